#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sfiqa/distmath.hpp"

namespace sfiqa::metrics {

using Betas = std::array<double, 5>;

struct MetricReport {
  double srocc = 0.0;
  double plcc = 0.0;
  double rmse = 0.0;
  Betas betas{};
  std::size_t n = 0;
};

/// Ranks starting at 1, tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> values);

double pearson(std::span<const double> a, std::span<const double> b);

/// Spearman correlation: Pearson correlation of average ranks. Needs n >= 3
/// and non-constant inputs.
double srocc(std::span<const double> pred, std::span<const double> gt);

/// Five-parameter logistic b1 * (1/2 - 1/(1 + exp(b2 (x - b3)))) + b4 x + b5.
/// The exponent is clamped to +-500.
double logistic_map(double mu_hat, const Betas& betas);

/// Sum of squared residuals of gt against the mapped predictions.
double logistic_sse(std::span<const double> pred, std::span<const double> gt, const Betas& betas);

/// Least-squares fit of the logistic mapping by restarted Nelder-Mead.
Betas fit_logistic(std::span<const double> pred, std::span<const double> gt);

struct PlccResult {
  double value = 0.0;
  Betas betas{};
};

PlccResult plcc(std::span<const double> pred, std::span<const double> gt);

double rmse(std::span<const double> pred, std::span<const double> gt);

/// SROCC, PLCC (after fitting the logistic map) and raw RMSE.
MetricReport evaluate_predictions(std::span<const double> pred, std::span<const double> gt);

/// Element-wise mean of several reports (used for seed averaging).
MetricReport mean_report(std::span<const MetricReport> reports);

/// Rater counts per rating category; category k corresponds to level k of
/// the scale the histogram is interpreted on.
struct RaterHistogram {
  std::vector<double> counts;

  double total() const;
  std::vector<double> frequencies() const;
  double mean_score(const RatingScale& scale) const;
};

enum class Family { kGaussian, kGamma, kWeibull };

std::string to_string(Family family);

struct GofResult {
  Family family = Family::kGaussian;
  /// gaussian: (mean, sigma); gamma: (shape, scale); weibull: (shape, scale).
  /// Gamma and Weibull live on the shifted support rating - lower + 1.
  std::vector<double> params;
  std::vector<double> fitted;  // fitted family discretised at the categories
  double rmse = 0.0;
};

/// Maximum-likelihood fit of a family to the raters, discretised at the
/// rating categories and compared with the empirical frequencies.
GofResult gof_fit(const RaterHistogram& hist, Family family, const RatingScale& scale,
                  double sigma_floor = kDefaultSigmaFloor);

struct ClusterResult {
  std::vector<int> assignments;
  std::vector<std::vector<double>> centroids;
  std::vector<double> percentages;  // share of points per cluster, in percent
  double inertia = 0.0;
};

/// Euclidean k-means with k-means++ seeding; the restart with the lowest
/// inertia is kept.
ClusterResult cluster_distributions(const std::vector<std::vector<double>>& points, int k, std::uint64_t seed,
                                    int restarts = 50);

}  // namespace sfiqa::metrics
