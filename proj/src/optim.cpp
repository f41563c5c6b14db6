#include "sfiqa/optim.hpp"

#include <cmath>

namespace sfiqa::optim {

double make_lr(nn::Phase phase, std::optional<double> override_lr) {
  if (override_lr) {
    require(*override_lr > 0.0 && std::isfinite(*override_lr), ErrorKind::kConfig, "learning rate must be positive");
    return *override_lr;
  }
  return phase == nn::Phase::kSourceTrain ? kSourceLearningRate : kAdaptLearningRate;
}

template <typename T>
AdamState AdamState::for_mask(const nn::ModelParams<T>& params, const nn::ParamMask& mask, AdamHyper hyper) {
  AdamState state;
  state.hyper = hyper;
  for (const auto& id : mask) {
    const auto n = nn::param_view(params, id).size();
    state.first_moment.emplace(id, std::vector<double>(n, 0.0));
    state.second_moment.emplace(id, std::vector<double>(n, 0.0));
  }
  return state;
}

bool AdamState::matches(const nn::ParamMask& mask) const {
  if (first_moment.size() != mask.size() || second_moment.size() != mask.size()) return false;
  for (const auto& id : mask)
    if (!first_moment.count(id) || !second_moment.count(id)) return false;
  return true;
}

template <typename T>
void adam_step(nn::ModelParams<T>& params, const nn::GradientSet<T>& grads, const nn::ParamMask& mask,
               AdamState& state) {
  require(state.matches(mask), ErrorKind::kState, "optimizer state was built for a different parameter mask");
  for (const auto& id : mask)
    require(grads.count(id) != 0, ErrorKind::kState, "no gradient for trainable tensor " + nn::to_string(id));
  const auto& h = state.hyper;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(h.beta1, t);
  const double correction2 = 1.0 - std::pow(h.beta2, t);
  for (const auto& id : mask) {
    auto values = nn::param_view(params, id);
    const auto& g = grads.at(id);
    auto& m = state.first_moment.at(id);
    auto& v = state.second_moment.at(id);
    require(g.size() == values.size() && m.size() == values.size(), ErrorKind::kState,
            "gradient size mismatch for " + nn::to_string(id));
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      const double update = h.learning_rate * m_hat / (std::sqrt(v_hat) + h.epsilon);
      // a zero update leaves the stored value bit-identical
      if (update != 0.0) values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
    }
  }
  ++params.revision;
}

template AdamState AdamState::for_mask<float>(const nn::ModelParams<float>&, const nn::ParamMask&, AdamHyper);
template AdamState AdamState::for_mask<double>(const nn::ModelParams<double>&, const nn::ParamMask&, AdamHyper);
template void adam_step<float>(nn::ModelParams<float>&, const nn::GradientSet<float>&, const nn::ParamMask&,
                               AdamState&);
template void adam_step<double>(nn::ModelParams<double>&, const nn::GradientSet<double>&, const nn::ParamMask&,
                                AdamState&);

}  // namespace sfiqa::optim
