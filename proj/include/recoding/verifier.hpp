#pragma once

#include "recoding/lstm_lm.hpp"
#include "recoding/recoder.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace recoding::verifier {

using ScalarFn = std::function<double(const Vec&)>;
using GradientFn = std::function<Vec(const Vec&)>;

/// A scalar function together with its analytic gradient.
struct ScalarField {
  ScalarFn value;
  GradientFn gradient;
};

/// Central differences (f(h + eps e_i) - f(h - eps e_i)) / (2 eps).
Vec finite_diff_grad(const ScalarFn& f, const Vec& h, double eps = 1e-5);

/// |a - n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  Eigen::Index worst_index = -1;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

GradCheckReport compare_gradients(std::string name, const Vec& analytic, const Vec& numeric,
                                  double tolerance);

/// Merges reports into one line: worst error, summed coordinate count.
GradCheckReport merge_reports(std::string name, std::span<const GradCheckReport> parts);

/// max over sample pairs of ||grad(x) - grad(y)|| / ||x - y||. This is an
/// empirical lower bound on the true constant.
double estimate_lipschitz(const GradientFn& gradient, std::span<const Vec> samples);

struct TheoremReport {
  double delta_before = 0.0;
  double delta_after = 0.0;
  double improvement = 0.0;
  double bound = 0.0;  // ||grad||^2 / (2 L)
  double alpha_used = 0.0;
  double lipschitz = 0.0;
  bool bound_satisfied = false;
  bool descent = false;  // delta_after <= delta_before
  bool heuristic = true;  // lipschitz is an estimate, not a certified constant
};

/// One recoding step h - alpha grad(h) on a scalar field.
TheoremReport check_theorem1(const ScalarField& field, const Vec& h, double alpha,
                             double lipschitz);

struct PairedSignal {
  double baseline = 0.0;  // never recoded
  double recoded = 0.0;   // recoded only at step t
  double difference() const { return recoded - baseline; }
};

/// Runs one sentence twice (recoding only at position t, and never) and
/// returns the signal at t + k. Every (layer, kind) uses the fixed step alpha.
/// k = 0 compares the recoded step's own post-recoding signal.
PairedSignal check_theorem2(const LmParameters& params, const RecodingConfig& config,
                            const std::vector<TokenId>& inputs,
                            const std::vector<TokenId>& targets, int t, int k, double alpha,
                            std::uint64_t seed);

/// Fraction of (step, column) pairs with post-recoding signal <= signal.
struct DescentSweep {
  std::size_t steps = 0;
  std::size_t descents = 0;
  double rate() const { return steps == 0 ? 0.0 : static_cast<double>(descents) / steps; }
};

DescentSweep descent_sweep(const LmParameters& params, const RecodingConfig& config,
                           const lm::IdGrid& inputs, const lm::IdGrid& targets,
                           std::uint64_t seed);

/// Dimensions of the toy model used by the gradient suite.
ModelDims toy_dims();

/// Seeded toy model with weights drawn uniformly from [-scale, scale].
LmParameters toy_model(std::uint64_t seed, double scale = 0.5);

/// Every analytic gradient in the library checked against central differences
/// on the toy model.
std::vector<GradCheckReport> run_gradient_suite(std::uint64_t seed, double tolerance);

}  // namespace recoding::verifier
