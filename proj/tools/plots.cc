#include "plots.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace cslab::cli {

namespace {

constexpr const char* kPalette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759",
                                    "#76b7b2", "#edc948", "#b07aa1", "#9c755f"};
constexpr int kPaletteSize = 8;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string wer_bars_svg(const std::vector<std::string>& regimes,
                         const std::vector<std::string>& tests, const WerMatrix& wer) {
  const double left = 60, top = 30, plot_h = 260, group_w = 30.0 * std::max<size_t>(1, tests.size()) + 20;
  const double width = left + group_w * static_cast<double>(regimes.size()) + 160;
  const double height = top + plot_h + 60;
  double ymax = 10.0;
  for (const auto& [r, row] : wer) {
    for (const auto& [t, cell] : row) {
      if (cell.wer) ymax = std::max(ymax, *cell.wer);
    }
  }
  ymax = std::ceil(ymax / 10.0) * 10.0;
  auto y = [&](double v) { return top + plot_h * (1.0 - v / ymax); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\""
     << num(height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << num(left) << "\" y=\"18\" font-size=\"13\">WER (%) by regime</text>\n";
  for (int k = 0; k <= 5; ++k) {
    const double v = ymax * k / 5.0;
    os << "<line x1=\"" << num(left) << "\" x2=\"" << num(width - 150) << "\" y1=\"" << num(y(v))
       << "\" y2=\"" << num(y(v)) << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << num(left - 6) << "\" y=\"" << num(y(v) + 4)
       << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  for (std::size_t g = 0; g < regimes.size(); ++g) {
    const double gx = left + group_w * static_cast<double>(g) + 10;
    for (std::size_t t = 0; t < tests.size(); ++t) {
      const auto row = wer.find(regimes[g]);
      if (row == wer.end()) continue;
      const auto cell = row->second.find(tests[t]);
      if (cell == row->second.end() || !cell->second.wer) continue;
      const double v = *cell->second.wer;
      os << "<rect x=\"" << num(gx + 30.0 * static_cast<double>(t)) << "\" y=\"" << num(y(v))
         << "\" width=\"26\" height=\"" << num(top + plot_h - y(v)) << "\" fill=\""
         << kPalette[t % kPaletteSize] << "\"><title>" << escape(regimes[g]) << " / "
         << escape(tests[t]) << ": " << num(v) << "</title></rect>\n";
    }
    os << "<text x=\"" << num(gx + group_w / 2 - 10) << "\" y=\"" << num(top + plot_h + 16)
       << "\" text-anchor=\"middle\">" << escape(regimes[g]) << "</text>\n";
  }
  for (std::size_t t = 0; t < tests.size(); ++t) {
    const double ly = top + 16.0 * static_cast<double>(t);
    os << "<rect x=\"" << num(width - 140) << "\" y=\"" << num(ly) << "\" width=\"10\" "
       << "height=\"10\" fill=\"" << kPalette[t % kPaletteSize] << "\"/>\n";
    os << "<text x=\"" << num(width - 125) << "\" y=\"" << num(ly + 9) << "\">"
       << escape(tests[t]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string loss_curves_svg(const std::map<std::string, std::vector<double>>& series) {
  const double left = 60, top = 30, plot_w = 420, plot_h = 260;
  const double width = left + plot_w + 160, height = top + plot_h + 50;
  std::size_t max_len = 1;
  double lo = 1e300, hi = -1e300;
  for (const auto& [name, s] : series) {
    max_len = std::max(max_len, s.size());
    for (double v : s) {
      if (v > 0) {
        lo = std::min(lo, std::log10(v));
        hi = std::max(hi, std::log10(v));
      }
    }
  }
  if (lo > hi) lo = 0, hi = 1;
  lo = std::floor(lo);
  hi = std::max(lo + 1, std::ceil(hi));
  auto x = [&](std::size_t i) {
    return left + plot_w * (max_len > 1 ? static_cast<double>(i) / (max_len - 1) : 0.0);
  };
  auto y = [&](double v) { return top + plot_h * (1.0 - (std::log10(v) - lo) / (hi - lo)); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\""
     << num(height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << num(left) << "\" y=\"18\" font-size=\"13\">"
     << "Mean training loss per epoch (log scale)</text>\n";
  for (double d = lo; d <= hi + 1e-9; d += 1.0) {
    const double yy = top + plot_h * (1.0 - (d - lo) / (hi - lo));
    os << "<line x1=\"" << num(left) << "\" x2=\"" << num(left + plot_w) << "\" y1=\"" << num(yy)
       << "\" y2=\"" << num(yy) << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << num(left - 6) << "\" y=\"" << num(yy + 4)
       << "\" text-anchor=\"end\">1e" << static_cast<int>(d) << "</text>\n";
  }
  int k = 0;
  for (const auto& [name, s] : series) {
    std::ostringstream pts;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] > 0) pts << num(x(i)) << ',' << num(y(s[i])) << ' ';
    }
    const char* color = kPalette[k % kPaletteSize];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\""
       << pts.str() << "\"/>\n";
    const double ly = top + 16.0 * k;
    os << "<rect x=\"" << num(left + plot_w + 15) << "\" y=\"" << num(ly)
       << "\" width=\"10\" height=\"10\" fill=\"" << color << "\"/>\n";
    os << "<text x=\"" << num(left + plot_w + 30) << "\" y=\"" << num(ly + 9) << "\">"
       << escape(name) << "</text>\n";
    ++k;
  }
  os << "<text x=\"" << num(left + plot_w / 2) << "\" y=\"" << num(top + plot_h + 30)
     << "\" text-anchor=\"middle\">epoch</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace cslab::cli
