#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "odg/common.hpp"

namespace odg {

/// Tiny standalone-SVG chart writer: line charts for loss curves, grouped
/// bars for ablation medians. No interactivity, no dependencies.
class SvgChart {
 public:
  SvgChart(int width, int height, std::string title)
      : width_(width), height_(height), title_(std::move(title)) {}

  struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
  };

  void add_series(Series s) { series_.push_back(std::move(s)); }

  struct Bar {
    std::string label;
    double value;
  };

  void add_bar(Bar b) { bars_.push_back(std::move(b)); }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write SVG: " + path.string());
    out << render();
  }

  std::string render() const {
    std::ostringstream svg;
    svg.precision(6);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width_ << "\" height=\""
        << height_ << "\" viewBox=\"0 0 " << width_ << " " << height_ << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << width_ / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">"
        << title_ << "</text>\n";
    const double x0 = 60, y0 = height_ - 40, x1 = width_ - 20, y1 = 35;
    svg << axis_line(x0, y0, x1, y0) << axis_line(x0, y0, x0, y1);

    double dmin_x = 0, dmax_x = 1, dmin_y = 0, dmax_y = 1;
    bool has_data = false;
    for (const Series& s : series_)
      for (const auto& [x, y] : s.points) {
        if (!has_data) {
          dmin_x = dmax_x = x;
          dmin_y = dmax_y = y;
          has_data = true;
        }
        dmin_x = std::min(dmin_x, x);
        dmax_x = std::max(dmax_x, x);
        dmin_y = std::min(dmin_y, y);
        dmax_y = std::max(dmax_y, y);
      }
    for (const Bar& b : bars_) {
      if (!has_data) {
        dmin_y = std::min(0.0, b.value);
        dmax_y = std::max(0.0, b.value);
        has_data = true;
      }
      dmin_y = std::min(dmin_y, b.value);
      dmax_y = std::max(dmax_y, b.value);
    }
    if (dmax_x == dmin_x) dmax_x = dmin_x + 1;
    if (dmax_y == dmin_y) dmax_y = dmin_y + 1;

    auto px = [&](double x) { return x0 + (x - dmin_x) / (dmax_x - dmin_x) * (x1 - x0); };
    auto py = [&](double y) { return y0 - (y - dmin_y) / (dmax_y - dmin_y) * (y0 - y1); };

    svg << label(x0, y0 + 18, format_num(dmin_x)) << label(x1, y0 + 18, format_num(dmax_x));
    svg << label(x0 - 6, y0, format_num(dmin_y), "end") << label(x0 - 6, y1 + 4, format_num(dmax_y), "end");

    static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
    for (std::size_t si = 0; si < series_.size(); ++si) {
      const Series& s = series_[si];
      if (s.points.empty()) continue;
      svg << "<polyline fill=\"none\" stroke=\"" << kColors[si % 6] << "\" stroke-width=\"1.5\" points=\"";
      for (const auto& [x, y] : s.points) svg << px(x) << "," << py(y) << " ";
      svg << "\"/>\n";
      svg << "<text x=\"" << x1 - 120 << "\" y=\"" << y1 + 14 + 14 * static_cast<double>(si)
          << "\" font-size=\"11\" fill=\"" << kColors[si % 6] << "\">" << s.name << "</text>\n";
    }

    if (!bars_.empty()) {
      const double slot = (x1 - x0) / static_cast<double>(bars_.size());
      for (std::size_t bi = 0; bi < bars_.size(); ++bi) {
        const double bx = x0 + slot * static_cast<double>(bi) + 0.15 * slot;
        const double top = py(bars_[bi].value);
        const double base = py(std::max(0.0, dmin_y));
        svg << "<rect x=\"" << bx << "\" y=\"" << std::min(top, base) << "\" width=\"" << 0.7 * slot
            << "\" height=\"" << std::fabs(base - top) << "\" fill=\"" << kColors[bi % 6] << "\"/>\n";
        svg << "<text x=\"" << bx + 0.35 * slot << "\" y=\"" << y0 + 16
            << "\" text-anchor=\"middle\" font-size=\"10\">" << bars_[bi].label << "</text>\n";
      }
    }
    svg << "</svg>\n";
    return svg.str();
  }

 private:
  static std::string axis_line(double ax, double ay, double bx, double by) {
    std::ostringstream s;
    s << "<line x1=\"" << ax << "\" y1=\"" << ay << "\" x2=\"" << bx << "\" y2=\"" << by
      << "\" stroke=\"black\"/>\n";
    return s.str();
  }
  static std::string label(double x, double y, const std::string& text,
                           const std::string& anchor = "middle") {
    std::ostringstream s;
    s << "<text x=\"" << x << "\" y=\"" << y << "\" text-anchor=\"" << anchor
      << "\" font-size=\"11\">" << text << "</text>\n";
    return s.str();
  }
  static std::string format_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
  }

  int width_;
  int height_;
  std::string title_;
  std::vector<Series> series_;
  std::vector<Bar> bars_;
};

}  // namespace odg
