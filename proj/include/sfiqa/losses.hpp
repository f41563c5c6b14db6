#pragma once

#include <map>
#include <string>
#include <vector>

#include "sfiqa/distmath.hpp"
#include "sfiqa/nn/tensor.hpp"

namespace sfiqa::losses {

using Logits = nn::Matrix<double>;

struct LossOutput {
  double value = 0.0;
  Logits grad_logits;
};

/// How the mean-score term of the source objective penalises |mu - mu_hat|.
enum class MeanPenalty { kSquared, kAbsolute };

/// Per-target weights of the adaptation objective. `lambda_ent` is 1 in the
/// standard objective; ablation runs set it to 0 to drop the entropy term.
struct AdaptWeights {
  double lambda_ent = 1.0;
  double lambda_div = 1.0;
  double lambda_gau = 0.2;
};

/// Batch mean of cross-entropy to the discretised label plus the mean-score penalty.
LossOutput source_loss(const Logits& logits, const std::vector<QualityLabel>& labels, const RatingScale& scale,
                       double sigma_floor = kDefaultSigmaFloor, MeanPenalty penalty = MeanPenalty::kSquared);

/// Batch mean of per-sample prediction entropy.
LossOutput entropy_loss(const Logits& logits);

/// Entropy of the batch-averaged prediction.
LossOutput diversity_loss(const Logits& logits);

/// Batch mean cross-entropy against the pseudo distribution rebuilt from
/// each prediction's moments; the pseudo target is held constant.
LossOutput gaussian_reg_loss(const Logits& logits, const RatingScale& scale, double sigma_floor = kDefaultSigmaFloor);

struct DomainBatch {
  std::string domain;
  Logits logits;
};

struct DomainLossTerms {
  std::string domain;
  double entropy = 0.0;
  double diversity = 0.0;
  double gaussian = 0.0;
  /// lambda_ent * entropy - lambda_div * diversity + lambda_gau * gaussian
  double combined = 0.0;
  /// Gradient of the scalar total w.r.t. this domain's logits (includes 1/T).
  Logits grad_logits;
};

struct AdaptationLoss {
  double total = 0.0;
  std::vector<DomainLossTerms> domains;
};

/// Mean over targets of the weighted entropy/diversity/Gaussian objective,
/// with diversity subtracted.
AdaptationLoss total_adaptation_loss(const std::vector<DomainBatch>& batches,
                                     const std::map<std::string, AdaptWeights>& weights, const RatingScale& scale,
                                     double sigma_floor = kDefaultSigmaFloor);

/// Numerically stable row-wise log-softmax.
Logits log_softmax(const Logits& logits);

}  // namespace sfiqa::losses
