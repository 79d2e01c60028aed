#include "recoding/common.hpp"

#include <algorithm>
#include <cmath>

namespace recoding {

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  if (x > 0.0) {
    return x + std::log1p(std::exp(-x));
  }
  return std::log1p(std::exp(x));
}

double inverse_softplus(double y) {
  if (!(y > 0.0)) {
    throw Error("inverse_softplus: argument must be positive");
  }
  // log(exp(y) - 1), rearranged to stay finite for large y
  return y + std::log(-std::expm1(-y));
}

double safe_log(double p) { return std::log(std::max(p, kProbFloor)); }

Mat softmax_columns(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    const double mx = logits.col(b).maxCoeff();
    out.col(b) = (logits.col(b).array() - mx).exp().matrix();
    out.col(b) /= out.col(b).sum();
  }
  return out;
}

RowVec entropy_columns(const Mat& probs) {
  RowVec h(probs.cols());
  for (Eigen::Index b = 0; b < probs.cols(); ++b) {
    double s = 0.0;
    for (Eigen::Index v = 0; v < probs.rows(); ++v) {
      const double p = probs(v, b);
      s -= p * safe_log(p);
    }
    h(b) = s;
  }
  return h;
}

bool all_finite(const Mat& m) { return m.allFinite(); }

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace recoding
