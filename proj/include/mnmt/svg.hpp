#pragma once

#include <string>
#include <utility>
#include <vector>

namespace mnmt {

struct ChartSeries {
  std::string label;
  std::string color;  // e.g. "#1f77b4"
  std::vector<std::pair<double, double>> points;
};

// Minimal polyline line chart as a standalone SVG document.
std::string render_line_chart(const std::string& title, const std::string& x_label,
                              const std::string& y_label, const std::vector<ChartSeries>& series,
                              int width = 720, int height = 460);

}  // namespace mnmt
