#include "refine3d/svg_report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "refine3d/errors.hpp"
#include "refine3d/fsio.hpp"

namespace refine3d {

namespace {

constexpr double kWidth = 800, kHeight = 500;
constexpr double kLeft = 70, kRight = 30, kTop = 60, kBottom = 55;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string escape_xml(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

struct Range {
    double lo = 0, hi = 1;
    double span() const { return hi - lo; }
};

Range nice_range(double lo, double hi) {
    if (!(hi > lo)) {
        hi = lo + 1;
        lo -= 1;
    }
    const double pad = (hi - lo) * 0.05;
    return {lo - pad, hi + pad};
}

std::vector<double> ticks(const Range& r, int target = 6) {
    const double raw = r.span() / target;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double mult : {1.0, 2.0, 2.5, 5.0, 10.0}) {
        if (mag * mult >= raw) {
            step = mag * mult;
            break;
        }
    }
    std::vector<double> out;
    for (double t = std::ceil(r.lo / step) * step; t <= r.hi + step * 1e-9; t += step)
        out.push_back(t);
    return out;
}

}  // namespace

std::string render_svg(const LineChart& chart) {
    if (chart.series.empty()) throw DimensionError("render_svg: chart has no series");
    double x_lo = 1e300, x_hi = -1e300, y_lo = 1e300, y_hi = -1e300;
    for (const auto& s : chart.series)
        for (auto [x, y] : s.points) {
            x_lo = std::min(x_lo, x);
            x_hi = std::max(x_hi, x);
            y_lo = std::min(y_lo, y);
            y_hi = std::max(y_hi, y);
        }
    if (x_lo > x_hi) throw DimensionError("render_svg: chart has no points");
    const Range xr = nice_range(x_lo, x_hi), yr = nice_range(y_lo, y_hi);

    auto sx = [&](double x) { return kLeft + (x - xr.lo) / xr.span() * (kWidth - kLeft - kRight); };
    auto sy = [&](double y) {
        return kHeight - kBottom - (y - yr.lo) / yr.span() * (kHeight - kTop - kBottom);
    };

    std::string svg = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + num(kWidth) +
           "\" height=\"" + num(kHeight) + "\" viewBox=\"0 0 " + num(kWidth) + " " +
           num(kHeight) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + num(kWidth / 2) + "\" y=\"24\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"17\">" + escape_xml(chart.title) +
           "</text>\n";

    // axes
    svg += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(kTop) + "\" x2=\"" + num(kLeft) +
           "\" y2=\"" + num(kHeight - kBottom) + "\" stroke=\"black\"/>\n";
    svg += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(kHeight - kBottom) + "\" x2=\"" +
           num(kWidth - kRight) + "\" y2=\"" + num(kHeight - kBottom) + "\" stroke=\"black\"/>\n";

    for (double t : ticks(xr)) {
        svg += "<line x1=\"" + num(sx(t)) + "\" y1=\"" + num(kHeight - kBottom) + "\" x2=\"" +
               num(sx(t)) + "\" y2=\"" + num(kHeight - kBottom + 5) + "\" stroke=\"black\"/>\n";
        svg += "<text x=\"" + num(sx(t)) + "\" y=\"" + num(kHeight - kBottom + 20) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
               num(t) + "</text>\n";
    }
    for (double t : ticks(yr)) {
        svg += "<line x1=\"" + num(kLeft - 5) + "\" y1=\"" + num(sy(t)) + "\" x2=\"" +
               num(kLeft) + "\" y2=\"" + num(sy(t)) + "\" stroke=\"black\"/>\n";
        svg += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(sy(t)) + "\" x2=\"" +
               num(kWidth - kRight) + "\" y2=\"" + num(sy(t)) +
               "\" stroke=\"#dddddd\" stroke-width=\"0.5\"/>\n";
        svg += "<text x=\"" + num(kLeft - 9) + "\" y=\"" + num(sy(t) + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" + num(t) +
               "</text>\n";
    }
    svg += "<text x=\"" + num((kLeft + kWidth - kRight) / 2) + "\" y=\"" + num(kHeight - 14) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" +
           escape_xml(chart.x_label) + "</text>\n";
    svg += "<text x=\"18\" y=\"" + num((kTop + kHeight - kBottom) / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
           "transform=\"rotate(-90 18 " + num((kTop + kHeight - kBottom) / 2) + ")\">" +
           escape_xml(chart.y_label) + "</text>\n";

    for (size_t si = 0; si < chart.series.size(); ++si) {
        const auto& s = chart.series[si];
        const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
        if (!s.points.empty()) {
            std::string pts;
            for (auto [x, y] : s.points) {
                pts += num(sx(x)) + "," + num(sy(y)) + " ";
            }
            svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
                   "\" stroke-width=\"1.8\" points=\"" + pts + "\"/>\n";
        }
        // legend swatch + label, laid out in rows of four
        const double lx = kLeft + 170.0 * (si % 4);
        const double ly = 36.0 + 14.0 * (si / 4);
        svg += "<line x1=\"" + num(lx) + "\" y1=\"" + num(ly - 4) + "\" x2=\"" + num(lx + 18) +
               "\" y2=\"" + num(ly - 4) + "\" stroke=\"" + color + "\" stroke-width=\"3\"/>\n";
        svg += "<text x=\"" + num(lx + 23) + "\" y=\"" + num(ly) +
               "\" font-family=\"sans-serif\" font-size=\"12\">" + escape_xml(s.label) +
               "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

void write_svg(const std::filesystem::path& path, const LineChart& chart) {
    write_file_atomic(path, render_svg(chart));
}

}  // namespace refine3d
