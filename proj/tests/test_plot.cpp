#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <string>

#include "tbps/plot.hpp"

using namespace tbps;

namespace {

int count(const std::string& s, const std::string& what) {
  int n = 0;
  for (auto p = s.find(what); p != std::string::npos; p = s.find(what, p + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("one polyline and legend entry per series") {
  const std::string svg = line_chart_svg("loss <total>", "step", "value",
                                         {{"a", {0, 1, 2}, {3, 2, 1}}, {"b&c", {0, 1, 2}, {1, 1, 1}}});
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(count(svg, "<polyline") == 2);
  CHECK(svg.find("loss &lt;total&gt;") != std::string::npos);
  CHECK(svg.find("b&amp;c") != std::string::npos);
}

TEST_CASE("non-finite and, on a log axis, non-positive points are skipped") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::string lin = line_chart_svg("t", "x", "y", {{"s", {0, 1, 2, 3}, {1, nan, 0, 2}}});
  const std::string log = line_chart_svg("t", "x", "y", {{"s", {0, 1, 2, 3}, {1, nan, 0, 2}}}, true);
  auto points = [](const std::string& svg) {
    const auto a = svg.find("points=\"") + 8;
    const std::string p = svg.substr(a, svg.find('"', a) - a);
    return count(p, ",");
  };
  CHECK(points(lin) == 3);
  CHECK(points(log) == 2);
  CHECK(log.find("nan") == std::string::npos);
  CHECK(lin.find("inf") == std::string::npos);
}

TEST_CASE("degenerate inputs still give a valid document") {
  CHECK(count(line_chart_svg("t", "x", "y", {}), "</svg>") == 1);
  CHECK(count(line_chart_svg("t", "x", "y", {{"flat", {5}, {5}}}), "<polyline") == 1);
}
