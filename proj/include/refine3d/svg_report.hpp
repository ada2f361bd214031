#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace refine3d {

struct ChartSeries {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

struct LineChart {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<ChartSeries> series;
};

// SVG 1.1 line chart, 800x500, fixed palette, legend in the top margin.
std::string render_svg(const LineChart& chart);
void write_svg(const std::filesystem::path& path, const LineChart& chart);

}  // namespace refine3d
