#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "flowmo/rng.hpp"
#include "flowmo/tensor.hpp"

namespace flowmo::data {

struct ImageRecord {
    Tensor pixels;  // [C, H, W] in [-1, 1]
    std::string source;
    std::optional<int> label;
};

using Dataset = std::vector<ImageRecord>;

/// 8-bit RGB raster, interleaved row-major.
struct Raster {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> rgb;
};

Raster read_png(const std::filesystem::path& path);
void write_png(const Raster& raster, const std::filesystem::path& path);

inline double to_unit(std::uint8_t v) { return static_cast<double>(v) / 127.5 - 1.0; }
std::uint8_t to_byte(double v);

/// Center-crops to a square, resizes bilinearly to `resolution`, and maps to [-1, 1].
Tensor raster_to_tensor(const Raster& raster, std::size_t resolution);
/// [3, H, W] in [-1, 1] -> 8-bit raster.
Raster tensor_to_raster(const Tensor& image);

/// Every *.png under `dir` (non-recursive), in lexicographic filename order.
/// Unreadable files are skipped with a warning on stderr; an empty result throws.
Dataset load_folder(const std::filesystem::path& dir, std::size_t resolution);

inline constexpr int kNumShapeClasses = 8;
const char* shape_class_name(int label);

/// Procedural shapes on gradient backgrounds; the class is the shape type.
/// `palette_size` colours are drawn once per seed and shared by all images.
Dataset synthetic_dataset(std::uint64_t seed, std::size_t count, std::size_t resolution, std::size_t palette_size = 8);

/// Tiles [N, 3, H, W] images into one PNG, `columns` per row, no padding.
void write_grid(const Tensor& images, const std::filesystem::path& path, std::size_t columns);

/// Stacks the given records into [B, C, H, W].
Tensor stack(const Dataset& dataset, const std::vector<std::size_t>& indices);
Tensor stack_all(const Dataset& dataset);

/// Reproducible epoch-shuffled batch indices.
class BatchSampler {
public:
    BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);
    std::vector<std::size_t> next();

private:
    std::size_t size_, batch_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

}  // namespace flowmo::data
