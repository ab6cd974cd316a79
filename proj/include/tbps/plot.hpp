#pragma once

#include <string>
#include <vector>

namespace tbps {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

// Static SVG line chart. log_y plots log10(y) and drops non-positive values;
// non-finite points are skipped.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series, bool log_y = false);

}  // namespace tbps
