#pragma once

#include <string>
#include <vector>

namespace rap {

struct SvgSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Fixed-layout line chart (no interactivity; outputs are artifacts for
/// inspection).
void write_svg_chart(const std::string& path, const std::string& title,
                     const std::vector<SvgSeries>& series);

}  // namespace rap
