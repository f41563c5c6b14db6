#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "sfiqa/nn/network.hpp"

namespace sfiqa::optim {

inline constexpr double kSourceLearningRate = 1e-4;
inline constexpr double kAdaptLearningRate = 5e-5;

/// Learning rate for a training phase, unless overridden.
double make_lr(nn::Phase phase, std::optional<double> override_lr = std::nullopt);

struct AdamHyper {
  double learning_rate = kSourceLearningRate;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment accumulators exist only for the tensors of the mask it was built for.
struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  std::map<nn::ParamId, std::vector<double>> first_moment;
  std::map<nn::ParamId, std::vector<double>> second_moment;

  template <typename T>
  static AdamState for_mask(const nn::ModelParams<T>& params, const nn::ParamMask& mask, AdamHyper hyper);

  bool matches(const nn::ParamMask& mask) const;
};

/// One bias-corrected Adam update of the masked tensors. Everything outside
/// the mask is left untouched.
template <typename T>
void adam_step(nn::ModelParams<T>& params, const nn::GradientSet<T>& grads, const nn::ParamMask& mask,
               AdamState& state);

}  // namespace sfiqa::optim
