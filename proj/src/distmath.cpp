#include "sfiqa/distmath.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "sfiqa/error.hpp"

namespace sfiqa {

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace

std::vector<double> make_levels(double lower, double upper, int levels) {
  require(levels >= 2, ErrorKind::kInvalidArgument, "rating scale needs at least 2 levels");
  require(std::isfinite(lower) && std::isfinite(upper) && lower < upper, ErrorKind::kInvalidArgument,
          "rating scale bounds must be finite with lower < upper");
  std::vector<double> out(static_cast<std::size_t>(levels));
  const double denom = levels - 1;
  for (int k = 0; k < levels; ++k) out[static_cast<std::size_t>(k)] = (k / denom) * (upper - lower) + lower;
  out.back() = upper;
  return out;
}

RatingScale::RatingScale(double lower, double upper, int levels)
    : lower_(lower), upper_(upper), levels_(make_levels(lower, upper, levels)) {}

RatingDistribution::RatingDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
  require(!probs_.empty(), ErrorKind::kInvalidArgument, "empty rating distribution");
  double sum = 0.0;
  for (const double p : probs_) {
    require(std::isfinite(p) && p >= 0.0, ErrorKind::kInvalidArgument, "negative or non-finite probability");
    sum += p;
  }
  require(std::abs(sum - 1.0) <= 1e-9, ErrorKind::kInvalidArgument,
          "probabilities sum to " + std::to_string(sum) + ", expected 1");
}

RatingDistribution RatingDistribution::uniform(int levels) {
  return RatingDistribution(std::vector<double>(static_cast<std::size_t>(levels), 1.0 / levels));
}

RatingDistribution RatingDistribution::one_hot(int levels, int index) {
  std::vector<double> p(static_cast<std::size_t>(levels), 0.0);
  p.at(static_cast<std::size_t>(index)) = 1.0;
  return RatingDistribution(std::move(p));
}

double truncated_gaussian_density(double l, const QualityLabel& label, const RatingScale& scale) {
  require(std::isfinite(l) && std::isfinite(label.mean) && std::isfinite(label.variance), ErrorKind::kInvalidArgument,
          "non-finite input to truncated Gaussian density");
  require(label.variance > 0.0, ErrorKind::kDomain, "truncated Gaussian needs positive variance");
  if (l < scale.lower() || l > scale.upper()) return 0.0;
  const double sigma = std::sqrt(label.variance);
  const double z = (l - label.mean) / sigma;
  const double phi = std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
  const double mass =
      normal_cdf((scale.upper() - label.mean) / sigma) - normal_cdf((scale.lower() - label.mean) / sigma);
  return phi / mass;
}

RatingDistribution discretize(const QualityLabel& label, const RatingScale& scale, double sigma_floor) {
  require(sigma_floor > 0.0, ErrorKind::kInvalidArgument, "sigma floor must be positive");
  require(std::isfinite(label.mean) && std::isfinite(label.variance) && label.variance >= 0.0,
          ErrorKind::kInvalidArgument, "invalid quality label");
  const double sigma = std::max(std::sqrt(label.variance), sigma_floor);
  const auto& levels = scale.levels();
  // log-domain with max subtraction so tiny sigmas never underflow to all zeros
  std::vector<double> logp(levels.size());
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const double z = (levels[k] - label.mean) / sigma;
    logp[k] = -0.5 * z * z;
  }
  const double peak = *std::max_element(logp.begin(), logp.end());
  double sum = 0.0;
  for (auto& v : logp) {
    v = std::exp(v - peak);
    sum += v;
  }
  for (auto& v : logp) v /= sum;
  return RatingDistribution(std::move(logp));
}

double dist_mean(std::span<const double> q, const RatingScale& scale) {
  require(q.size() == static_cast<std::size_t>(scale.size()), ErrorKind::kShape, "distribution/scale size mismatch");
  double m = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) m += q[k] * scale.levels()[k];
  return m;
}

double dist_var(std::span<const double> q, const RatingScale& scale) {
  const double m = dist_mean(q, scale);
  double v = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) {
    const double d = scale.levels()[k] - m;
    v += q[k] * d * d;
  }
  return std::max(v, 0.0);
}

RatingDistribution pseudo_distribution(std::span<const double> q_hat, const RatingScale& scale, double sigma_floor) {
  const double m = dist_mean(q_hat, scale);
  const double v = dist_var(q_hat, scale);
  return discretize({m, std::max(v, sigma_floor * sigma_floor)}, scale, sigma_floor);
}

double entropy(std::span<const double> q) {
  double h = 0.0;
  for (const double p : q)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

}  // namespace sfiqa
