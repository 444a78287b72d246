#pragma once

#include <map>
#include <string>
#include <vector>

#include "cslab/metrics.h"

namespace cslab::cli {

// Grouped bar chart: one group per regime, one bar per test set.
std::string wer_bars_svg(const std::vector<std::string>& regimes,
                         const std::vector<std::string>& tests, const WerMatrix& wer);

// One polyline per series (mean training loss per epoch), log-scaled y axis.
std::string loss_curves_svg(const std::map<std::string, std::vector<double>>& series);

}  // namespace cslab::cli
