#include "flowmo/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "flowmo/data.hpp"

namespace flowmo::plot {

namespace {

using Rgb = std::array<std::uint8_t, 3>;

constexpr std::array<Rgb, 6> kPalette = {{{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {255, 127, 14}, {148, 103, 189}, {23, 190, 207}}};

struct Canvas {
    data::Raster r;

    void set(long x, long y, Rgb c) {
        if (x < 0 || y < 0 || x >= static_cast<long>(r.width) || y >= static_cast<long>(r.height)) return;
        auto* p = &r.rgb[(static_cast<std::size_t>(y) * r.width + static_cast<std::size_t>(x)) * 3];
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    }

    void line(double x0, double y0, double x1, double y1, Rgb c) {
        const double len = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
        const int n = std::max(1, static_cast<int>(std::ceil(len)));
        for (int i = 0; i <= n; ++i) {
            const double a = static_cast<double>(i) / n;
            set(std::lround(x0 + a * (x1 - x0)), std::lround(y0 + a * (y1 - y0)), c);
        }
    }

    void rect(long x0, long y0, long x1, long y1, Rgb c) {
        for (long y = y0; y <= y1; ++y)
            for (long x = x0; x <= x1; ++x) set(x, y, c);
    }
};

std::vector<double> smoothed(const std::vector<double>& y, std::size_t window) {
    if (window <= 1) return y;
    std::vector<double> out(y.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        sum += y[i];
        if (i >= window) sum -= y[i - window];
        out[i] = sum / static_cast<double>(std::min(i + 1, window));
    }
    return out;
}

}  // namespace

void write_line_plot(const std::vector<Series>& series, const std::filesystem::path& path, const PlotOptions& options) {
    if (series.empty()) throw std::invalid_argument("write_line_plot: no series");
    const double inf = std::numeric_limits<double>::infinity();
    double xmin = inf, xmax = -inf, ymin = inf, ymax = -inf;
    std::vector<std::vector<std::pair<double, double>>> pts(series.size());
    for (std::size_t s = 0; s < series.size(); ++s) {
        if (series[s].x.size() != series[s].y.size()) throw std::invalid_argument("write_line_plot: x/y length mismatch");
        const auto y = smoothed(series[s].y, options.smooth);
        for (std::size_t i = 0; i < y.size(); ++i) {
            double v = y[i];
            if (!std::isfinite(v) || !std::isfinite(series[s].x[i])) continue;
            if (options.log_y) {
                if (v <= 0.0) continue;
                v = std::log10(v);
            }
            pts[s].emplace_back(series[s].x[i], v);
            xmin = std::min(xmin, series[s].x[i]);
            xmax = std::max(xmax, series[s].x[i]);
            ymin = std::min(ymin, v);
            ymax = std::max(ymax, v);
        }
    }
    if (!(xmin <= xmax)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;

    const long W = static_cast<long>(options.width), H = static_cast<long>(options.height);
    const long left = 40, right = W - 20, top = 30, bottom = H - 30;
    Canvas c{{options.width, options.height, std::vector<std::uint8_t>(options.width * options.height * 3, 255)}};
    const Rgb grid{225, 225, 225}, axis{60, 60, 60};
    for (int i = 0; i <= 10; ++i) {
        const double gx = left + (right - left) * i / 10.0, gy = top + (bottom - top) * i / 10.0;
        c.line(gx, top, gx, bottom, grid);
        c.line(left, gy, right, gy, grid);
    }
    if (options.log_y) {  // darker lines at powers of ten
        for (double d = std::ceil(ymin); d <= ymax; d += 1.0) {
            const double py = bottom - (d - ymin) / (ymax - ymin) * (bottom - top);
            c.line(left, py, right, py, {190, 190, 190});
        }
    }
    c.line(left, bottom, right, bottom, axis);
    c.line(left, top, left, bottom, axis);

    for (std::size_t s = 0; s < pts.size(); ++s) {
        const Rgb col = kPalette[s % kPalette.size()];
        for (std::size_t i = 0; i + 1 < pts[s].size(); ++i) {
            auto map = [&](const std::pair<double, double>& p) {
                return std::pair<double, double>{left + (p.first - xmin) / (xmax - xmin) * (right - left),
                                                 bottom - (p.second - ymin) / (ymax - ymin) * (bottom - top)};
            };
            const auto a = map(pts[s][i]), b = map(pts[s][i + 1]);
            c.line(a.first, a.second, b.first, b.second, col);
        }
        // legend swatch, one per series along the top edge
        const long lx = left + 10 + static_cast<long>(s) * 24;
        c.rect(lx, 10, lx + 14, 20, col);
    }
    data::write_png(c.r, path);
}

}  // namespace flowmo::plot
