#include "rsed/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace rsed::plot {

namespace {

constexpr int kWidth = 720;
constexpr int kHeight = 420;
constexpr int kMarginLeft = 70;
constexpr int kMarginRight = 30;
constexpr int kMarginTop = 50;
constexpr int kMarginBottom = 60;

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                          "#9467bd", "#8c564b", "#e377c2"};

std::string esc(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '<')
            out += "&lt;";
        else if (c == '>')
            out += "&gt;";
        else if (c == '&')
            out += "&amp;";
        else
            out += c;
    }
    return out;
}

void open_svg(std::ofstream& out, const std::string& title) {
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
        << kHeight << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << kWidth / 2 << "\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\""
        << " text-anchor=\"middle\">" << esc(title) << "</text>\n";
}

} // namespace

void write_line_chart(const std::filesystem::path& path, const std::string& title,
                      const std::vector<Series>& series, const std::string& x_label,
                      const std::string& y_label) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write plot: " + path.string());
    open_svg(out, title);

    double x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0;
    bool first = true;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            if (first) {
                x_min = x_max = s.x[i];
                y_min = y_max = s.y[i];
                first = false;
            } else {
                x_min = std::min(x_min, s.x[i]);
                x_max = std::max(x_max, s.x[i]);
                y_min = std::min(y_min, s.y[i]);
                y_max = std::max(y_max, s.y[i]);
            }
        }
    if (x_max <= x_min) x_max = x_min + 1.0;
    if (y_max <= y_min) y_max = y_min + 1.0;

    const double plot_w = kWidth - kMarginLeft - kMarginRight;
    const double plot_h = kHeight - kMarginTop - kMarginBottom;
    const auto px = [&](double x) { return kMarginLeft + (x - x_min) / (x_max - x_min) * plot_w; };
    const auto py = [&](double y) {
        return kMarginTop + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;
    };

    out << "<rect x=\"" << kMarginLeft << "\" y=\"" << kMarginTop << "\" width=\"" << plot_w
        << "\" height=\"" << plot_h << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fy = y_min + (y_max - y_min) * i / 4.0;
        const double fx = x_min + (x_max - x_min) * i / 4.0;
        out << "<text x=\"" << kMarginLeft - 8 << "\" y=\"" << py(fy) + 4
            << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << fy
            << "</text>\n";
        out << "<text x=\"" << px(fx) << "\" y=\"" << kHeight - kMarginBottom + 18
            << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" << fx
            << "</text>\n";
    }
    out << "<text x=\"" << kMarginLeft + plot_w / 2 << "\" y=\"" << kHeight - 14
        << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">" << esc(x_label)
        << "</text>\n";
    out << "<text x=\"18\" y=\"" << kMarginTop + plot_h / 2
        << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" "
        << "transform=\"rotate(-90 18 " << kMarginTop + plot_h / 2 << ")\">" << esc(y_label)
        << "</text>\n";

    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& sr = series[s];
        const char* color = kPalette[s % (sizeof(kPalette) / sizeof(kPalette[0]))];
        std::ostringstream pts;
        for (std::size_t i = 0; i < sr.x.size(); ++i) {
            if (!std::isfinite(sr.y[i])) continue;
            pts << px(sr.x[i]) << "," << py(sr.y[i]) << " ";
        }
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\""
            << pts.str() << "\"/>\n";
        out << "<text x=\"" << kWidth - kMarginRight - 6 << "\" y=\""
            << kMarginTop + 16 + 16 * static_cast<int>(s)
            << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\" fill=\""
            << color << "\">" << esc(sr.name) << "</text>\n";
    }
    out << "</svg>\n";
}

void write_bar_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::string>& bucket_labels,
                     const std::vector<double>& counts) {
    if (bucket_labels.size() != counts.size())
        throw std::invalid_argument("write_bar_chart: label/count size mismatch");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write plot: " + path.string());
    open_svg(out, title);

    const double plot_w = kWidth - kMarginLeft - kMarginRight;
    const double plot_h = kHeight - kMarginTop - kMarginBottom;
    double y_max = 1.0;
    for (double c : counts) y_max = std::max(y_max, c);

    out << "<rect x=\"" << kMarginLeft << "\" y=\"" << kMarginTop << "\" width=\"" << plot_w
        << "\" height=\"" << plot_h << "\" fill=\"none\" stroke=\"#444\"/>\n";
    const double slot = plot_w / static_cast<double>(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const double h = counts[i] / y_max * plot_h;
        const double x = kMarginLeft + slot * static_cast<double>(i) + slot * 0.15;
        out << "<rect x=\"" << x << "\" y=\"" << kMarginTop + plot_h - h << "\" width=\""
            << slot * 0.7 << "\" height=\"" << h << "\" fill=\"#1f77b4\"/>\n";
        out << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << kHeight - kMarginBottom + 18
            << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">"
            << esc(bucket_labels[i]) << "</text>\n";
        out << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << kMarginTop + plot_h - h - 5
            << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">"
            << counts[i] << "</text>\n";
    }
    out << "</svg>\n";
}

} // namespace rsed::plot
