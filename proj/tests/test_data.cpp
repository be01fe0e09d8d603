#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "flowmo/data.hpp"
#include "support.hpp"

using namespace flowmo;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

data::Raster solid(std::size_t w, std::size_t h, std::array<std::uint8_t, 3> rgb) {
    data::Raster r{w, h, {}};
    for (std::size_t i = 0; i < w * h; ++i) r.rgb.insert(r.rgb.end(), rgb.begin(), rgb.end());
    return r;
}

}  // namespace

TEST_CASE("byte normalisation endpoints") {
    CHECK(data::to_unit(0) == -1.0);
    CHECK(std::abs(data::to_unit(255) - 1.0) <= 1.0 / 255);
    CHECK(data::to_unit(128) == doctest::Approx(128.0 / 127.5 - 1.0).epsilon(1e-15));
    CHECK(data::to_unit(128) == doctest::Approx(0.00392).epsilon(1e-3));
    for (int v = 0; v < 256; ++v) CHECK(data::to_byte(data::to_unit(static_cast<std::uint8_t>(v))) == v);
    CHECK(data::to_byte(-5.0) == 0);
    CHECK(data::to_byte(5.0) == 255);
}

TEST_CASE("PNG round trip") {
    const auto dir = fresh_dir("flowmo_png");
    data::Raster r{5, 3, {}};
    for (std::size_t i = 0; i < 45; ++i) r.rgb.push_back(static_cast<std::uint8_t>(i * 5));
    data::write_png(r, dir / "a.png");
    const auto back = data::read_png(dir / "a.png");
    CHECK(back.width == 5);
    CHECK(back.height == 3);
    CHECK(back.rgb == r.rgb);
    CHECK_THROWS(data::read_png(dir / "missing.png"));
    fs::remove_all(dir);
}

TEST_CASE("center crop and resize") {
    // wide image: left and right quarters red, middle green; crop keeps the middle
    data::Raster r{8, 4, {}};
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
            const bool middle = x >= 2 && x < 6;
            r.rgb.push_back(middle ? 0 : 255);
            r.rgb.push_back(middle ? 255 : 0);
            r.rgb.push_back(0);
        }
    const auto t = data::raster_to_tensor(r, 4);
    CHECK(t.shape() == Shape{3, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK(t[i] == -1.0);
        CHECK(t[16 + i] == 1.0);
    }
    // constant images stay constant under bilinear resampling
    const auto up = data::raster_to_tensor(solid(3, 3, {10, 20, 30}), 7);
    for (std::size_t i = 0; i < 49; ++i) CHECK(up[i] == doctest::Approx(data::to_unit(10)).epsilon(1e-14));
}

TEST_CASE("write then load recovers pixels within quantisation") {
    const auto dir = fresh_dir("flowmo_roundtrip");
    Rng rng(1);
    const auto img = test::random_tensor({1, 3, 8, 8}, rng);
    data::write_grid(img, dir / "x.png", 1);
    const auto ds = data::load_folder(dir, 8);
    REQUIRE(ds.size() == 1);
    for (std::size_t i = 0; i < img.numel(); ++i) CHECK(std::abs(ds[0].pixels[i] - img[i]) <= 1.0 / 255 + 1e-12);
    fs::remove_all(dir);
}

TEST_CASE("grid layout") {
    const auto dir = fresh_dir("flowmo_grid");
    Tensor imgs({6, 3, 4, 5});
    for (std::size_t n = 0; n < 6; ++n)
        for (std::size_t i = 0; i < 60; ++i) imgs[n * 60 + i] = -1.0 + 0.3 * static_cast<double>(n);
    data::write_grid(imgs, dir / "g.png", 3);
    const auto g = data::read_png(dir / "g.png");
    CHECK(g.width == 15);
    CHECK(g.height == 8);
    // tile (row 1, col 2) is image 5
    const std::size_t px = (5 * 15 + 12) * 3;
    CHECK(g.rgb[px] == data::to_byte(-1.0 + 1.5));

    Tensor one({1, 3, 4, 5}, 0.0);
    data::write_grid(one, dir / "one.png", 4);
    const auto o = data::read_png(dir / "one.png");
    CHECK(o.width == 5);
    CHECK(o.height == 4);
    CHECK_THROWS(data::write_grid(Tensor({0, 3, 4, 4}), dir / "none.png", 2));
    CHECK_THROWS(data::write_grid(one, "/nonexistent-dir/x.png", 1));
    fs::remove_all(dir);
}

TEST_CASE("folder loading order, skipping and errors") {
    const auto dir = fresh_dir("flowmo_folder");
    data::write_png(solid(6, 6, {0, 0, 0}), dir / "b.png");
    data::write_png(solid(6, 6, {255, 255, 255}), dir / "a.png");
    data::write_png(solid(4, 6, {128, 0, 0}), dir / "c.png");
    {
        std::ofstream f(dir / "broken.png");
        f << "not a png";
    }
    {
        std::ofstream f(dir / "notes.txt");
        f << "ignored";
    }
    const auto ds = data::load_folder(dir, 4);
    REQUIRE(ds.size() == 3);
    CHECK(fs::path(ds[0].source).filename() == "a.png");
    CHECK(fs::path(ds[1].source).filename() == "b.png");
    CHECK(fs::path(ds[2].source).filename() == "c.png");
    CHECK(ds[0].pixels[0] == doctest::Approx(1.0).epsilon(1.0 / 255));
    CHECK(ds[1].pixels[0] == -1.0);
    const auto again = data::load_folder(dir, 4);
    for (std::size_t i = 0; i < 3; ++i) CHECK(again[i].pixels.vec() == ds[i].pixels.vec());

    const auto empty = fresh_dir("flowmo_empty");
    CHECK_THROWS(data::load_folder(empty, 4));
    CHECK_THROWS(data::load_folder(dir / "does-not-exist", 4));
    fs::remove_all(dir);
    fs::remove_all(empty);
}

TEST_CASE("synthetic dataset determinism and range") {
    const auto a = data::synthetic_dataset(5, 40, 16);
    const auto b = data::synthetic_dataset(5, 40, 16);
    const auto c = data::synthetic_dataset(6, 40, 16);
    REQUIRE(a.size() == 40);
    bool differs = false;
    for (std::size_t i = 0; i < 40; ++i) {
        CHECK(a[i].pixels.vec() == b[i].pixels.vec());
        CHECK(a[i].label == b[i].label);
        CHECK(a[i].pixels.shape() == Shape{3, 16, 16});
        REQUIRE(a[i].label.has_value());
        CHECK(*a[i].label >= 0);
        CHECK(*a[i].label < data::kNumShapeClasses);
        for (double v : a[i].pixels.vec()) {
            CHECK(v >= -1.0);
            CHECK(v <= 1.0);
        }
        differs = differs || a[i].pixels.vec() != c[i].pixels.vec();
    }
    CHECK(differs);
    std::set<std::string> names;
    for (int k = 0; k < data::kNumShapeClasses; ++k) names.insert(data::shape_class_name(k));
    CHECK(names.size() == data::kNumShapeClasses);
}

TEST_CASE("synthetic class histogram is uniform") {
    const auto ds = data::synthetic_dataset(9, 10000, 8);
    std::array<int, data::kNumShapeClasses> counts{};
    for (const auto& r : ds) ++counts[static_cast<std::size_t>(*r.label)];
    for (int c : counts) CHECK(std::abs(c / 10000.0 - 1.0 / data::kNumShapeClasses) <= 0.02);
}

TEST_CASE("stacking and batch sampling") {
    const auto ds = data::synthetic_dataset(1, 10, 8);
    const auto s = data::stack(ds, {3, 1});
    CHECK(s.shape() == Shape{2, 3, 8, 8});
    for (std::size_t i = 0; i < 192; ++i) CHECK(s[i] == ds[3].pixels[i]);
    CHECK(data::stack_all(ds).shape() == Shape{10, 3, 8, 8});

    data::BatchSampler a(10, 4, 77), b(10, 4, 77);
    std::multiset<std::size_t> epoch;
    for (int i = 0; i < 5; ++i) {
        const auto x = a.next();
        CHECK(x == b.next());
        CHECK(x.size() == 4);
        for (auto v : x) {
            CHECK(v < 10);
            if (epoch.size() < 10) epoch.insert(v);
        }
    }
    // the first ten indices drawn cover the dataset exactly once
    CHECK(std::set<std::size_t>(epoch.begin(), epoch.end()).size() == 10);
}
