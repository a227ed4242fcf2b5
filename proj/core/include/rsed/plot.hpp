#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace rsed {

/// Static SVG plot emission for inspect-style reports.
namespace plot {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

/// Multi-series line chart (loss curves).
void write_line_chart(const std::filesystem::path& path, const std::string& title,
                      const std::vector<Series>& series, const std::string& x_label = "step",
                      const std::string& y_label = "value");

/// Bar chart over labelled buckets (duration histograms).
void write_bar_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::string>& bucket_labels,
                     const std::vector<double>& counts);

} // namespace plot

} // namespace rsed
