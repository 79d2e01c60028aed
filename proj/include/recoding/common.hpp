#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace recoding {

// Column-major throughout: one column per batch row.
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

using TokenId = std::int32_t;

/// Validation, usage and I/O failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Floor applied to probabilities before every logarithm.
inline constexpr double kProbFloor = 1e-12;

double sigmoid(double x);
double softplus(double x);
double inverse_softplus(double y);
double safe_log(double p);

/// Column-wise softmax with max subtraction.
Mat softmax_columns(const Mat& logits);

/// Shannon entropy (nats) of each column.
RowVec entropy_columns(const Mat& probs);

bool all_finite(const Mat& m);

/// 64-bit mixer used to derive independent RNG sub-stream seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace recoding
