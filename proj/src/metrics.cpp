#include "refine3d/metrics.hpp"

#include <cstdio>
#include <map>
#include <sstream>

#include "refine3d/errors.hpp"
#include "refine3d/fsio.hpp"

namespace refine3d {

VoxelGrid binarize(const VoxelGrid& pred, float t) {
    if (t <= 0.0f || t >= 1.0f)
        throw ConfigError("binarize: threshold must lie in (0,1), got " + std::to_string(t));
    VoxelGrid out(pred.dim);
    for (size_t i = 0; i < pred.values.size(); ++i)
        out.values[i] = pred.values[i] > t ? 1.0f : 0.0f;
    return out;
}

double iou(const VoxelGrid& pred, const VoxelGrid& gt, float t) {
    if (pred.dim != gt.dim)
        throw DimensionError("iou: grid extents differ, " + std::to_string(pred.dim) + " vs " +
                             std::to_string(gt.dim));
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.values.size(); ++i) {
        const bool p = pred.values[i] > t;
        const bool g = gt.values[i] > 0.5f;
        inter += (p && g) ? 1 : 0;
        uni += (p || g) ? 1 : 0;
    }
    if (uni == 0) return 1.0;  // agreement on emptiness
    return static_cast<double>(inter) / static_cast<double>(uni);
}

IouReport aggregate(const std::vector<std::pair<std::string, double>>& per_sample, int views,
                    float threshold) {
    if (per_sample.empty()) throw DimensionError("aggregate: no samples");
    std::map<std::string, std::pair<double, int64_t>> sums;
    for (const auto& [category, value] : per_sample) {
        auto& slot = sums[category];
        slot.first += value;
        slot.second += 1;
    }
    IouReport report;
    report.views = views;
    report.threshold = threshold;
    double total = 0.0;
    for (const auto& [category, sum_count] : sums) {
        const double mean = sum_count.first / static_cast<double>(sum_count.second);
        report.per_category.emplace_back(category, mean);
        total += mean;
    }
    report.overall = total / static_cast<double>(sums.size());
    return report;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

std::vector<IouRow> report_rows(const IouReport& report) {
    std::vector<IouRow> rows;
    for (const auto& [category, mean] : report.per_category)
        rows.push_back({category, report.views, report.threshold, mean});
    rows.push_back({"__overall__", report.views, report.threshold, report.overall});
    return rows;
}

std::string iou_csv(const std::vector<IouRow>& rows) {
    std::string out = "category,views,threshold,mean_iou\n";
    for (const auto& r : rows) {
        out += r.category;
        out += ',' + std::to_string(r.views);
        out += ',' + format_double(r.threshold);
        out += ',' + format_double(r.mean_iou);
        out += '\n';
    }
    return out;
}

void write_iou_csv(const std::filesystem::path& path, const std::vector<IouRow>& rows) {
    write_file_atomic(path, iou_csv(rows));
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

}  // namespace

std::vector<IouRow> parse_iou_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "category,views,threshold,mean_iou")
        throw FormatError("iou csv: bad or missing header row");
    std::vector<IouRow> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != 4)
            throw FormatError("iou csv: expected 4 fields on row " + std::to_string(lineno));
        try {
            rows.push_back({fields[0], std::stoi(fields[1]), std::stof(fields[2]),
                            std::stod(fields[3])});
        } catch (const std::exception&) {
            throw FormatError("iou csv: unparseable number on row " + std::to_string(lineno));
        }
    }
    return rows;
}

std::vector<IouRow> read_iou_csv(const std::filesystem::path& path) {
    return parse_iou_csv(read_file(path));
}

}  // namespace refine3d
