#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace anomseg::plot {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

// Minimal static line plot: axes, tick labels, one polyline per series.
void write_svg(const std::filesystem::path& path, const std::string& title,
               const std::vector<Series>& series);

}  // namespace anomseg::plot
