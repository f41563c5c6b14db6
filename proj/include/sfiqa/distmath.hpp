#pragma once

#include <span>
#include <vector>

namespace sfiqa {

/// Equally spaced rating levels on [lower, upper].
class RatingScale {
 public:
  RatingScale(double lower, double upper, int levels);

  /// Default quality range: five levels on [1, 5].
  static RatingScale standard() { return RatingScale(1.0, 5.0, 5); }

  double lower() const { return lower_; }
  double upper() const { return upper_; }
  int size() const { return static_cast<int>(levels_.size()); }
  double spacing() const { return (upper_ - lower_) / (size() - 1); }
  const std::vector<double>& levels() const { return levels_; }
  double level(int k) const { return levels_[static_cast<std::size_t>(k)]; }
  bool contains(double value) const { return value >= lower_ && value <= upper_; }

 private:
  double lower_;
  double upper_;
  std::vector<double> levels_;
};

/// Probability vector over the levels of a RatingScale.
class RatingDistribution {
 public:
  RatingDistribution() = default;
  /// Validates non-negativity and unit sum (tolerance 1e-9).
  explicit RatingDistribution(std::vector<double> probs);

  static RatingDistribution uniform(int levels);
  static RatingDistribution one_hot(int levels, int index);

  std::span<const double> probs() const { return probs_; }
  double operator[](std::size_t k) const { return probs_[k]; }
  std::size_t size() const { return probs_.size(); }

 private:
  std::vector<double> probs_;
};

struct QualityLabel {
  double mean = 0.0;
  double variance = 0.0;
};

inline constexpr double kDefaultSigmaFloor = 0.1;

/// Grid l_k = k/(C-1) * (upper - lower) + lower for 0-based k.
std::vector<double> make_levels(double lower, double upper, int levels);

/// Density of the Gaussian truncated to [lower, upper]; zero outside.
double truncated_gaussian_density(double l, const QualityLabel& label, const RatingScale& scale);

/// Gaussian density sampled at the levels and renormalised. The truncation
/// constant cancels in the renormalisation, so the untruncated density is used.
RatingDistribution discretize(const QualityLabel& label, const RatingScale& scale,
                              double sigma_floor = kDefaultSigmaFloor);

double dist_mean(std::span<const double> q, const RatingScale& scale);
double dist_var(std::span<const double> q, const RatingScale& scale);
inline double dist_mean(const RatingDistribution& q, const RatingScale& scale) {
  return dist_mean(q.probs(), scale);
}
inline double dist_var(const RatingDistribution& q, const RatingScale& scale) {
  return dist_var(q.probs(), scale);
}

/// Discretised Gaussian rebuilt from the first two moments of q_hat.
RatingDistribution pseudo_distribution(std::span<const double> q_hat, const RatingScale& scale,
                                       double sigma_floor = kDefaultSigmaFloor);

/// Shannon entropy in nats; 0 log 0 = 0.
double entropy(std::span<const double> q);

}  // namespace sfiqa
