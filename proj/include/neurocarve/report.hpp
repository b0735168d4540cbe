#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace ncarve {

// One row of the benchmark table. Values are RAW metric outputs; the
// presentation scalings (FPD x1e-1, CD x1e2, EMD x1e2) are applied when the
// table is rendered. NaN marks a missing cell.
struct MetricRow {
    std::string label;
    double two_way = NAN;
    double ten_way = NAN;
    double fpd = NAN;
    double cd = NAN;
    double emd = NAN;
    double lpips_like = NAN;
    double psnr = NAN;
    double ssim = NAN;
};

namespace detail {

inline std::string fmt_cell(double v, const char* fmt) {
    if (std::isnan(v)) return "-";
    char buf[48];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

struct ReportColumn {
    const char* name;
    double MetricRow::*field;
    double scale;
    const char* fmt;
};

inline const std::vector<ReportColumn>& report_columns() {
    static const std::vector<ReportColumn> cols = {
        {"2-way", &MetricRow::two_way, 1.0, "%.3f"},
        {"10-way", &MetricRow::ten_way, 1.0, "%.3f"},
        {"FPD", &MetricRow::fpd, 0.1, "%.3f"},
        {"CD", &MetricRow::cd, 100.0, "%.3f"},
        {"EMD", &MetricRow::emd, 100.0, "%.3f"},
        {"LPIPS", &MetricRow::lpips_like, 1.0, "%.3f"},
        {"PSNR", &MetricRow::psnr, 1.0, "%.2f"},
        {"SSIM", &MetricRow::ssim, 1.0, "%.3f"},
    };
    return cols;
}

}  // namespace detail

// Mean over rows, ignoring missing cells per column.
inline MetricRow average_row(const std::vector<MetricRow>& rows, const std::string& label = "average") {
    MetricRow avg;
    avg.label = label;
    for (const auto& col : detail::report_columns()) {
        double sum = 0;
        int count = 0;
        for (const auto& r : rows) {
            const double v = r.*(col.field);
            if (!std::isnan(v)) {
                sum += v;
                ++count;
            }
        }
        avg.*(col.field) = count > 0 ? sum / count : NAN;
    }
    return avg;
}

inline std::string report_csv(const std::vector<MetricRow>& rows, bool with_average = true) {
    std::string out = "label";
    for (const auto& col : detail::report_columns()) {
        out += ",";
        out += col.name;
    }
    out += "\n";
    auto emit = [&](const MetricRow& r) {
        out += r.label;
        for (const auto& col : detail::report_columns()) {
            out += ",";
            const double v = r.*(col.field);
            out += std::isnan(v) ? "" : detail::fmt_cell(v * col.scale, col.fmt);
        }
        out += "\n";
    };
    for (const auto& r : rows) emit(r);
    if (with_average && !rows.empty()) emit(average_row(rows));
    return out;
}

inline std::string report_markdown(const std::vector<MetricRow>& rows, bool with_average = true) {
    std::string out = "| Method |";
    for (const auto& col : detail::report_columns()) {
        out += " ";
        out += col.name;
        out += " |";
    }
    out += "\n|---|";
    for (size_t i = 0; i < detail::report_columns().size(); ++i) out += "---|";
    out += "\n";
    auto emit = [&](const MetricRow& r) {
        out += "| " + r.label + " |";
        for (const auto& col : detail::report_columns()) {
            const double v = r.*(col.field);
            out += " " + (std::isnan(v) ? std::string("-")
                                        : detail::fmt_cell(v * col.scale, col.fmt)) + " |";
        }
        out += "\n";
    };
    for (const auto& r : rows) emit(r);
    if (with_average && !rows.empty()) emit(average_row(rows));
    return out;
}

}  // namespace ncarve
