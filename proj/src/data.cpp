#include "flowmo/data.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace flowmo::data {

Raster read_png(const std::filesystem::path& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw std::runtime_error("cannot read " + path.string() + ": " + image.message);
    image.format = PNG_FORMAT_RGB;
    Raster r;
    r.width = image.width;
    r.height = image.height;
    r.rgb.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, r.rgb.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw std::runtime_error("cannot decode " + path.string() + ": " + msg);
    }
    return r;
}

void write_png(const Raster& raster, const std::filesystem::path& path) {
    if (raster.rgb.size() != raster.width * raster.height * 3) throw std::invalid_argument("write_png: bad raster size");
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(raster.width);
    image.height = static_cast<png_uint_32>(raster.height);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, raster.rgb.data(), 0, nullptr))
        throw std::runtime_error("cannot write " + path.string() + ": " + image.message);
}

std::uint8_t to_byte(double v) {
    const double b = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
    return static_cast<std::uint8_t>(b);
}

Tensor raster_to_tensor(const Raster& raster, std::size_t resolution) {
    if (raster.width == 0 || raster.height == 0 || resolution == 0) throw std::invalid_argument("raster_to_tensor: empty image");
    const std::size_t side = std::min(raster.width, raster.height);
    const std::size_t x0 = (raster.width - side) / 2, y0 = (raster.height - side) / 2;
    const double scale = static_cast<double>(side) / static_cast<double>(resolution);
    Tensor out(Shape{3, resolution, resolution});

    auto px = [&](std::size_t x, std::size_t y, std::size_t c) {
        return to_unit(raster.rgb[((y0 + y) * raster.width + x0 + x) * 3 + c]);
    };
    for (std::size_t oy = 0; oy < resolution; ++oy) {
        const double sy = std::clamp((static_cast<double>(oy) + 0.5) * scale - 0.5, 0.0, static_cast<double>(side - 1));
        const auto iy = static_cast<std::size_t>(sy);
        const std::size_t iy1 = std::min(iy + 1, side - 1);
        const double fy = sy - static_cast<double>(iy);
        for (std::size_t ox = 0; ox < resolution; ++ox) {
            const double sx = std::clamp((static_cast<double>(ox) + 0.5) * scale - 0.5, 0.0, static_cast<double>(side - 1));
            const auto ix = static_cast<std::size_t>(sx);
            const std::size_t ix1 = std::min(ix + 1, side - 1);
            const double fx = sx - static_cast<double>(ix);
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = px(ix, iy, c) * (1 - fx) + px(ix1, iy, c) * fx;
                const double bot = px(ix, iy1, c) * (1 - fx) + px(ix1, iy1, c) * fx;
                out[(c * resolution + oy) * resolution + ox] = top * (1 - fy) + bot * fy;
            }
        }
    }
    return out;
}

Raster tensor_to_raster(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("tensor_to_raster: expected [3, H, W]");
    const std::size_t H = image.dim(1), W = image.dim(2);
    Raster r{W, H, std::vector<std::uint8_t>(W * H * 3)};
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) r.rgb[(y * W + x) * 3 + c] = to_byte(image[(c * H + y) * W + x]);
    return r;
}

Dataset load_folder(const std::filesystem::path& dir, std::size_t resolution) {
    if (!std::filesystem::is_directory(dir)) throw std::invalid_argument("load_folder: " + dir.string() + " is not a directory");
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end(),
              [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
    Dataset out;
    for (const auto& f : files) {
        try {
            out.push_back({raster_to_tensor(read_png(f), resolution), f.filename().string(), std::nullopt});
        } catch (const std::exception& e) {
            std::cerr << "warning: skipping " << f.string() << ": " << e.what() << '\n';
        }
    }
    if (out.empty()) throw std::runtime_error("load_folder: no readable images in " + dir.string());
    return out;
}

const char* shape_class_name(int label) {
    static constexpr std::array<const char*, kNumShapeClasses> names = {
        "rectangle", "circle", "triangle", "ring", "cross", "diamond", "stripes", "gradient"};
    if (label < 0 || label >= kNumShapeClasses) throw std::out_of_range("shape class " + std::to_string(label));
    return names[static_cast<std::size_t>(label)];
}

namespace {

using Color = std::array<double, 3>;

// Coverage of shape `label` at normalised coordinates (u, v) in [0, 1]^2.
bool inside(int label, double u, double v, double cx, double cy, double r, double angle) {
    const double dx = u - cx, dy = v - cy;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double ru = ca * dx + sa * dy, rv = -sa * dx + ca * dy;
    switch (label) {
        case 0: return std::abs(ru) <= r && std::abs(rv) <= 0.7 * r;
        case 1: return dx * dx + dy * dy <= r * r;
        case 2: return rv >= -0.6 * r && rv <= r && std::abs(ru) <= 0.5 * (r - rv) * 1.1;
        case 3: {
            const double d = std::sqrt(dx * dx + dy * dy);
            return d <= r && d >= 0.55 * r;
        }
        case 4: return (std::abs(ru) <= 0.3 * r && std::abs(rv) <= r) || (std::abs(rv) <= 0.3 * r && std::abs(ru) <= r);
        case 5: return std::abs(dx) + std::abs(dy) <= r;
        case 6: return std::fmod(std::abs(rv) / (0.25 * r + 1e-9), 2.0) < 1.0 && std::abs(ru) <= 1.2 * r;
        default: return false;
    }
}

}  // namespace

Dataset synthetic_dataset(std::uint64_t seed, std::size_t count, std::size_t resolution, std::size_t palette_size) {
    if (count == 0) throw std::invalid_argument("synthetic_dataset: count must be at least 1");
    if (resolution == 0 || palette_size == 0) throw std::invalid_argument("synthetic_dataset: resolution and palette must be positive");
    Rng rng = derive_rng(seed, 0x73686170);  // "shap"
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<Color> palette(palette_size);
    for (auto& c : palette)
        for (auto& ch : c) ch = 2.0 * unit(rng) - 1.0;

    // Balanced labels: each block of kNumShapeClasses images holds every class once.
    std::vector<int> labels(count);
    std::array<int, kNumShapeClasses> block;
    std::iota(block.begin(), block.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {
        if (i % kNumShapeClasses == 0) std::shuffle(block.begin(), block.end(), rng);
        labels[i] = block[i % kNumShapeClasses];
    }

    Dataset out;
    out.reserve(count);
    std::uniform_int_distribution<std::size_t> pick(0, palette_size - 1);
    constexpr int kSuper = 2;  // supersampling per axis
    for (std::size_t i = 0; i < count; ++i) {
        const int label = labels[i];
        const Color bg0 = palette[pick(rng)], bg1 = palette[pick(rng)], fg = palette[pick(rng)];
        const double gangle = unit(rng) * 2.0 * M_PI;
        const double cx = 0.3 + 0.4 * unit(rng), cy = 0.3 + 0.4 * unit(rng);
        const double r = 0.18 + 0.12 * unit(rng);
        const double angle = unit(rng) * M_PI;
        const double gx = std::cos(gangle), gy = std::sin(gangle);

        Tensor img(Shape{3, resolution, resolution});
        for (std::size_t y = 0; y < resolution; ++y)
            for (std::size_t x = 0; x < resolution; ++x) {
                Color acc{0, 0, 0};
                for (int sy = 0; sy < kSuper; ++sy)
                    for (int sx = 0; sx < kSuper; ++sx) {
                        const double u = (static_cast<double>(x) + (sx + 0.5) / kSuper) / static_cast<double>(resolution);
                        const double v = (static_cast<double>(y) + (sy + 0.5) / kSuper) / static_cast<double>(resolution);
                        const double w = std::clamp(0.5 + (u - 0.5) * gx + (v - 0.5) * gy, 0.0, 1.0);
                        const bool hit = inside(label, u, v, cx, cy, r, angle);
                        for (int c = 0; c < 3; ++c)
                            acc[c] += hit ? fg[c] : (1 - w) * bg0[c] + w * bg1[c];
                    }
                for (std::size_t c = 0; c < 3; ++c)
                    img[(c * resolution + y) * resolution + x] = std::clamp(acc[c] / (kSuper * kSuper), -1.0, 1.0);
            }
        out.push_back({std::move(img), "synthetic/" + std::to_string(i), label});
    }
    return out;
}

void write_grid(const Tensor& images, const std::filesystem::path& path, std::size_t columns) {
    if (images.rank() != 4 || images.dim(0) == 0 || images.dim(1) != 3)
        throw std::invalid_argument("write_grid: expected a nonempty [N, 3, H, W] batch");
    if (columns == 0) throw std::invalid_argument("write_grid: columns must be positive");
    const std::size_t N = images.dim(0), H = images.dim(2), W = images.dim(3);
    const std::size_t cols = std::min(columns, N), rows = (N + cols - 1) / cols;
    Raster r{cols * W, rows * H, std::vector<std::uint8_t>(cols * W * rows * H * 3, 0)};
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t ty = n / cols, tx = n % cols;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    r.rgb[((ty * H + y) * r.width + tx * W + x) * 3 + c] = to_byte(images[((n * 3 + c) * H + y) * W + x]);
    }
    write_png(r, path);
}

Tensor stack(const Dataset& dataset, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw std::invalid_argument("stack: no indices");
    const Shape& s = dataset.at(indices.front()).pixels.shape();
    Shape out_shape{indices.size()};
    out_shape.insert(out_shape.end(), s.begin(), s.end());
    Tensor out(out_shape);
    const std::size_t per = shape_numel(s);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& px = dataset.at(indices[i]).pixels;
        if (px.shape() != s) throw std::invalid_argument("stack: images differ in shape");
        std::copy(px.vec().begin(), px.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return out;
}

Tensor stack_all(const Dataset& dataset) {
    std::vector<std::size_t> idx(dataset.size());
    std::iota(idx.begin(), idx.end(), 0);
    return stack(dataset, idx);
}

BatchSampler::BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
    : size_(dataset_size), batch_(batch_size), rng_(derive_rng(seed, 0x62617463)) {  // "batc"
    if (size_ == 0 || batch_ == 0) throw std::invalid_argument("BatchSampler: empty dataset or batch");
    order_.resize(size_);
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
}

std::vector<std::size_t> BatchSampler::next() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    while (out.size() < batch_) {
        if (cursor_ == size_) {
            std::shuffle(order_.begin(), order_.end(), rng_);
            cursor_ = 0;
        }
        out.push_back(order_[cursor_++]);
    }
    return out;
}

}  // namespace flowmo::data
