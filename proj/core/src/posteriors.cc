#include "cslab/posteriors.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cslab/errors.h"

namespace cslab {

FramePosteriors FramePosteriors::from_probs(Tensor probs) {
  if (probs.rank() != 2 || probs.rows() == 0 || probs.cols() == 0) {
    throw ValidationError("posteriors must be a non-empty T x V matrix, got " +
                          shape_str(probs.shape()));
  }
  for (std::size_t t = 0; t < probs.rows(); ++t) {
    double s = 0.0;
    for (double p : probs.row(t)) {
      if (!(p > 0.0 && p <= 1.0)) {
        std::ostringstream os;
        os << "posteriors: frame " << t << " has entry " << p << " outside (0, 1]";
        throw ValidationError(os.str());
      }
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      std::ostringstream os;
      os << "posteriors: frame " << t << " sums to " << s;
      throw ValidationError(os.str());
    }
  }
  return FramePosteriors(std::move(probs));
}

FramePosteriors FramePosteriors::from_logits(const Tensor& logits) {
  Tensor probs = logits;
  if (probs.rank() == 1) probs = Tensor({1, logits.size()}, {logits.data().begin(), logits.data().end()});
  for (std::size_t t = 0; t < probs.rows(); ++t) {
    auto row = probs.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) z += (v = std::exp(v - mx));
    for (auto& v : row) v /= z;
  }
  return FramePosteriors(std::move(probs));
}

Tensor FramePosteriors::log_probs() const {
  Tensor out = probs_;
  for (auto& v : out.data()) v = std::log(v);
  return out;
}

}  // namespace cslab
