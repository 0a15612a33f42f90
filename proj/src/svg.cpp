#include "mnmt/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace mnmt {

namespace {

std::string xml_escape(const std::string& s) {
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

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

std::string render_line_chart(const std::string& title, const std::string& x_label,
                              const std::string& y_label, const std::vector<ChartSeries>& series,
                              int width, int height) {
  const double ml = 56, mr = 16, mt = 36, mb = 44;
  const double pw = width - ml - mr, ph = height - mt - mb;
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  bool any = false;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      if (!any) {
        x_min = x_max = x;
        y_min = y_max = y;
        any = true;
      } else {
        x_min = std::min(x_min, x);
        x_max = std::max(x_max, x);
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y);
      }
    }
  if (x_max <= x_min) x_max = x_min + 1;
  if (y_max <= y_min) y_max = y_min + 1;
  auto px = [&](double x) { return ml + (x - x_min) / (x_max - x_min) * pw; };
  auto py = [&](double y) { return mt + ph - (y - y_min) / (y_max - y_min) * ph; };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\" "
      << "font-family=\"sans-serif\">" << xml_escape(title) << "</text>\n";
  // axes
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
      << mt + ph << "\" stroke=\"black\"/>\n";
  // tick labels
  svg << "<text x=\"" << ml << "\" y=\"" << mt + ph + 16
      << "\" font-size=\"11\" font-family=\"sans-serif\">" << fmt(x_min) << "</text>\n";
  svg << "<text x=\"" << ml + pw << "\" y=\"" << mt + ph + 16
      << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << fmt(x_max)
      << "</text>\n";
  svg << "<text x=\"" << ml - 6 << "\" y=\"" << mt + ph
      << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << fmt(y_min)
      << "</text>\n";
  svg << "<text x=\"" << ml - 6 << "\" y=\"" << mt + 10
      << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << fmt(y_max)
      << "</text>\n";
  svg << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 8
      << "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\">"
      << xml_escape(x_label) << "</text>\n";
  svg << "<text x=\"14\" y=\"" << mt + ph / 2
      << "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\" transform=\"rotate(-90 14 "
      << mt + ph / 2 << ")\">" << xml_escape(y_label) << "</text>\n";

  double legend_y = mt + 6;
  for (const auto& s : series) {
    if (!s.points.empty()) {
      svg << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
      for (const auto& [x, y] : s.points) svg << fmt(px(x)) << "," << fmt(py(y)) << " ";
      svg << "\"/>\n";
      for (const auto& [x, y] : s.points)
        svg << "<circle cx=\"" << fmt(px(x)) << "\" cy=\"" << fmt(py(y))
            << "\" r=\"2\" fill=\"" << s.color << "\"/>\n";
    }
    svg << "<rect x=\"" << ml + pw - 150 << "\" y=\"" << legend_y - 8
        << "\" width=\"10\" height=\"10\" fill=\"" << s.color << "\"/>\n";
    svg << "<text x=\"" << ml + pw - 136 << "\" y=\"" << legend_y + 1
        << "\" font-size=\"11\" font-family=\"sans-serif\">" << xml_escape(s.label)
        << "</text>\n";
    legend_y += 16;
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace mnmt
