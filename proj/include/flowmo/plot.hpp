#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace flowmo::plot {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

struct PlotOptions {
    std::size_t width = 640;
    std::size_t height = 400;
    bool log_y = true;
    std::size_t smooth = 1;  // trailing moving-average window
};

/// Line chart of the series on shared axes with light grid lines, written as
/// PNG. Non-finite and (for log_y) non-positive points are dropped.
void write_line_plot(const std::vector<Series>& series, const std::filesystem::path& path, const PlotOptions& options = {});

}  // namespace flowmo::plot
