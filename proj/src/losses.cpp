#include "sfiqa/losses.hpp"

#include <algorithm>
#include <cmath>

#include "sfiqa/error.hpp"

namespace sfiqa::losses {

Logits log_softmax(const Logits& logits) {
  Logits out(logits.rows, logits.cols);
  for (int r = 0; r < logits.rows; ++r) {
    const auto z = logits.row(r);
    require(std::all_of(z.begin(), z.end(), [](double v) { return std::isfinite(v); }), ErrorKind::kInvalidArgument,
            "non-finite logits");
    const double peak = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (const double v : z) sum += std::exp(v - peak);
    const double lse = peak + std::log(sum);
    auto o = out.row(r);
    for (std::size_t k = 0; k < z.size(); ++k) o[k] = z[k] - lse;
  }
  return out;
}

namespace {

Logits exp_of(const Logits& log_probs) {
  Logits p(log_probs.rows, log_probs.cols);
  for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] = std::exp(log_probs.values[i]);
  return p;
}

void require_batch(const Logits& logits) {
  require(logits.rows >= 1 && logits.cols >= 2, ErrorKind::kShape, "loss needs B >= 1 rows and C >= 2 levels");
}

}  // namespace

LossOutput source_loss(const Logits& logits, const std::vector<QualityLabel>& labels, const RatingScale& scale,
                       double sigma_floor, MeanPenalty penalty) {
  require_batch(logits);
  require(static_cast<int>(labels.size()) == logits.rows, ErrorKind::kShape, "one label per logits row expected");
  require(logits.cols == scale.size(), ErrorKind::kShape, "logit count must equal the number of rating levels");
  const Logits logp = log_softmax(logits);
  const Logits p = exp_of(logp);
  const double inv_b = 1.0 / logits.rows;
  LossOutput out{0.0, Logits(logits.rows, logits.cols)};
  for (int b = 0; b < logits.rows; ++b) {
    const auto& label = labels[static_cast<std::size_t>(b)];
    require(scale.contains(label.mean), ErrorKind::kDomain, "quality label outside the rating scale");
    const RatingDistribution q = discretize(label, scale, sigma_floor);
    const auto prow = p.row(b);
    const auto lrow = logp.row(b);
    double ce = 0.0;
    for (int k = 0; k < logits.cols; ++k) ce -= q[static_cast<std::size_t>(k)] * lrow[static_cast<std::size_t>(k)];
    const double mu_hat = dist_mean(prow, scale);
    const double diff = label.mean - mu_hat;
    const double mean_term = penalty == MeanPenalty::kSquared ? diff * diff : std::abs(diff);
    // d(term)/d(mu_hat)
    const double dmu = penalty == MeanPenalty::kSquared ? -2.0 * diff : (diff > 0 ? -1.0 : (diff < 0 ? 1.0 : 0.0));
    out.value += (ce + mean_term) * inv_b;
    auto g = out.grad_logits.row(b);
    for (int k = 0; k < logits.cols; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      const double dmu_dz = prow[kk] * (scale.level(k) - mu_hat);
      g[kk] = (prow[kk] - q[kk] + dmu * dmu_dz) * inv_b;
    }
  }
  return out;
}

LossOutput entropy_loss(const Logits& logits) {
  require_batch(logits);
  const Logits logp = log_softmax(logits);
  const Logits p = exp_of(logp);
  const double inv_b = 1.0 / logits.rows;
  LossOutput out{0.0, Logits(logits.rows, logits.cols)};
  for (int b = 0; b < logits.rows; ++b) {
    double h = 0.0;
    for (int k = 0; k < logits.cols; ++k) h -= p(b, k) * logp(b, k);
    out.value += h * inv_b;
    for (int k = 0; k < logits.cols; ++k) out.grad_logits(b, k) = -p(b, k) * (logp(b, k) + h) * inv_b;
  }
  return out;
}

LossOutput diversity_loss(const Logits& logits) {
  require_batch(logits);
  const Logits p = exp_of(log_softmax(logits));
  const double inv_b = 1.0 / logits.rows;
  std::vector<double> mean(static_cast<std::size_t>(logits.cols), 0.0);
  for (int b = 0; b < logits.rows; ++b)
    for (int k = 0; k < logits.cols; ++k) mean[static_cast<std::size_t>(k)] += p(b, k) * inv_b;
  std::vector<double> log_mean(mean.size());
  for (std::size_t k = 0; k < mean.size(); ++k) log_mean[k] = mean[k] > 0.0 ? std::log(mean[k]) : 0.0;
  LossOutput out{entropy(mean), Logits(logits.rows, logits.cols)};
  for (int b = 0; b < logits.rows; ++b) {
    double cross = 0.0;
    for (int k = 0; k < logits.cols; ++k) cross += p(b, k) * log_mean[static_cast<std::size_t>(k)];
    for (int k = 0; k < logits.cols; ++k)
      out.grad_logits(b, k) = p(b, k) * (cross - log_mean[static_cast<std::size_t>(k)]) * inv_b;
  }
  return out;
}

LossOutput gaussian_reg_loss(const Logits& logits, const RatingScale& scale, double sigma_floor) {
  require_batch(logits);
  require(logits.cols == scale.size(), ErrorKind::kShape, "logit count must equal the number of rating levels");
  const Logits logp = log_softmax(logits);
  const Logits p = exp_of(logp);
  const double inv_b = 1.0 / logits.rows;
  LossOutput out{0.0, Logits(logits.rows, logits.cols)};
  for (int b = 0; b < logits.rows; ++b) {
    const RatingDistribution target = pseudo_distribution(p.row(b), scale, sigma_floor);
    for (int k = 0; k < logits.cols; ++k) {
      const double t = target[static_cast<std::size_t>(k)];
      out.value -= t * logp(b, k) * inv_b;
      out.grad_logits(b, k) = (p(b, k) - t) * inv_b;
    }
  }
  return out;
}

AdaptationLoss total_adaptation_loss(const std::vector<DomainBatch>& batches,
                                     const std::map<std::string, AdaptWeights>& weights, const RatingScale& scale,
                                     double sigma_floor) {
  require(!batches.empty(), ErrorKind::kInvalidArgument, "adaptation loss needs at least one target domain");
  AdaptationLoss out;
  const double inv_t = 1.0 / static_cast<double>(batches.size());
  for (const auto& batch : batches) {
    const auto it = weights.find(batch.domain);
    require(it != weights.end(), ErrorKind::kConfig, "no adaptation weights for domain '" + batch.domain + "'");
    const AdaptWeights& w = it->second;
    require(w.lambda_ent >= 0 && w.lambda_div >= 0 && w.lambda_gau >= 0, ErrorKind::kConfig,
            "adaptation weights must be non-negative");
    const LossOutput ent = entropy_loss(batch.logits);
    const LossOutput div = diversity_loss(batch.logits);
    const LossOutput gau = gaussian_reg_loss(batch.logits, scale, sigma_floor);
    DomainLossTerms terms;
    terms.domain = batch.domain;
    terms.entropy = ent.value;
    terms.diversity = div.value;
    terms.gaussian = gau.value;
    terms.combined = w.lambda_ent * ent.value - w.lambda_div * div.value + w.lambda_gau * gau.value;
    terms.grad_logits = Logits(batch.logits.rows, batch.logits.cols);
    for (std::size_t i = 0; i < terms.grad_logits.values.size(); ++i)
      terms.grad_logits.values[i] = inv_t * (w.lambda_ent * ent.grad_logits.values[i] -
                                             w.lambda_div * div.grad_logits.values[i] +
                                             w.lambda_gau * gau.grad_logits.values[i]);
    out.total += inv_t * terms.combined;
    out.domains.push_back(std::move(terms));
  }
  return out;
}

}  // namespace sfiqa::losses
