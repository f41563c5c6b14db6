#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "sfiqa/nn/tensor.hpp"

namespace sfiqa::nn {

/// Backbone: blocks of {conv 3x3 -> DSBN -> ReLU -> 2x2 avg pool}, then global
/// average pool, a hidden FC-ReLU layer and a linear rating head.
struct NetworkSpec {
  int in_channels = 3;
  int height = 32;
  int width = 32;
  std::vector<int> block_channels{8, 16};
  int hidden = 32;
  int levels = 5;
  double epsilon = 1e-5;
  double ema_alpha = 0.1;

  void validate() const;
  bool operator==(const NetworkSpec&) const = default;
};

template <typename T>
struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  std::vector<T> weight;  // [out][in][3][3]
  std::vector<T> bias;    // [out]

  bool operator==(const ConvLayer&) const = default;
};

template <typename T>
struct DenseLayer {
  int inputs = 0;
  int outputs = 0;
  std::vector<T> weight;  // [out][in]
  std::vector<T> bias;    // [out]

  bool operator==(const DenseLayer&) const = default;
};

/// Per-channel state of one normalised layer inside a domain branch.
template <typename T>
struct BranchLayer {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool initialized = false;

  int channels() const { return static_cast<int>(gamma.size()); }
  bool operator==(const BranchLayer&) const = default;
};

/// One domain's DSBN parameters across all normalised layers.
template <typename T>
struct DomainBranch {
  std::vector<BranchLayer<T>> layers;
  T epsilon = T(1e-5);
  T ema_alpha = T(0.1);

  bool operator==(const DomainBranch&) const = default;
};

template <typename T>
struct ModelParams {
  NetworkSpec spec;
  std::vector<ConvLayer<T>> convs;
  DenseLayer<T> hidden;
  DenseLayer<T> head;
  std::map<std::string, DomainBranch<T>> branches;
  std::string source_domain;
  /// Bumped whenever trainable values change; traces record it.
  std::uint64_t revision = 0;

  const DomainBranch<T>& branch(const std::string& domain) const;
  DomainBranch<T>& branch(const std::string& domain);
  bool has_branch(const std::string& domain) const { return branches.count(domain) != 0; }
};

enum class ParamKind { kConvWeight, kConvBias, kDenseWeight, kDenseBias, kGamma, kBeta };

/// Names one parameter tensor. `layer` is the block index for conv/BN tensors
/// and 0 (hidden) or 1 (head) for dense tensors; `domain` is set for BN only.
struct ParamId {
  ParamKind kind = ParamKind::kConvWeight;
  int layer = 0;
  std::string domain;

  auto operator<=>(const ParamId&) const = default;
  bool operator==(const ParamId&) const = default;
  bool is_shared() const { return kind != ParamKind::kGamma && kind != ParamKind::kBeta; }
};

std::string to_string(const ParamId& id);

using ParamMask = std::set<ParamId>;

template <typename T>
using GradientSet = std::map<ParamId, std::vector<T>>;

enum class Mode { kTrain, kEval };
enum class Phase { kSourceTrain, kAdapt };

/// Creates parameters with He-scaled normal weights, gamma = 1, beta = 0 and
/// a single uninitialised branch for `source_domain`.
template <typename T>
ModelParams<T> init_params(const NetworkSpec& spec, const std::string& source_domain, std::uint64_t seed);

template <typename To, typename From>
ModelParams<To> convert(const ModelParams<From>& params);

template <typename T>
std::vector<ParamId> all_param_ids(const ModelParams<T>& params);

template <typename T>
std::span<T> param_view(ModelParams<T>& params, const ParamId& id);
template <typename T>
std::span<const T> param_view(const ModelParams<T>& params, const ParamId& id);

template <typename T>
std::size_t scalar_count(const ModelParams<T>& params, const ParamMask& mask);

template <typename T>
ParamMask freeze_mask(const ModelParams<T>& params, Phase phase, const std::string& domain);

/// Registers `new_domain` with a copy of `source_domain`'s branch.
template <typename T>
void add_domain_branch(ModelParams<T>& params, const std::string& new_domain, const std::string& source_domain);

/// Cache of one DSBN application, needed for the backward pass.
template <typename T>
struct NormCache {
  Tensor<T> whitened;
  std::vector<T> mean;     // statistics actually used for whitening
  std::vector<T> inv_std;  // 1 / sqrt(var + eps)
  Mode mode = Mode::kEval;
};

/// Whitens each channel of `v` and applies the branch layer's affine map.
/// Train mode uses biased batch statistics and then EMA-updates the running
/// statistics; eval mode uses the running statistics and mutates nothing.
template <typename T>
Tensor<T> dsbn_normalize(const Tensor<T>& v, BranchLayer<T>& layer, T epsilon, T ema_alpha, Mode mode,
                         NormCache<T>* cache = nullptr);
template <typename T>
Tensor<T> dsbn_normalize(const Tensor<T>& v, const BranchLayer<T>& layer, T epsilon, NormCache<T>* cache = nullptr);

template <typename T>
struct BlockTrace {
  Tensor<T> input;
  std::vector<T> columns;  // im2col buffers, one per sample
  Tensor<T> conv_out;
  NormCache<T> norm;
  Tensor<T> normalized;  // DSBN output, pre-ReLU
};

template <typename T>
struct ForwardTrace {
  std::string domain;
  Mode mode = Mode::kEval;
  std::uint64_t revision = 0;
  int batch = 0;
  std::vector<BlockTrace<T>> blocks;
  Tensor<T> last_pooled;  // input of the global average pool
  Matrix<T> pooled;       // global average pool output
  Matrix<T> hidden_pre;
  Matrix<T> hidden_out;
  Matrix<T> logits;
};

template <typename T>
struct ForwardResult {
  Matrix<T> logits;
  ForwardTrace<T> trace;
};

/// Forward pass through `domain`'s branch. Train mode updates that branch's
/// running statistics.
template <typename T>
ForwardResult<T> forward(ModelParams<T>& params, const Tensor<T>& batch, const std::string& domain, Mode mode);

/// Eval-mode forward over an immutable model.
template <typename T>
ForwardResult<T> forward_eval(const ModelParams<T>& params, const Tensor<T>& batch, const std::string& domain);

/// Exact gradients of sum(logits * grad_logits). With `wanted`, only those
/// tensors are produced and propagation stops below the lowest one needed.
template <typename T>
GradientSet<T> backward(const ModelParams<T>& params, const ForwardTrace<T>& trace, const Matrix<T>& grad_logits,
                        const ParamMask* wanted = nullptr);

/// Row-wise softmax with max subtraction.
template <typename T>
Matrix<T> softmax(const Matrix<T>& logits);

/// Per-channel batch mean of the first conv layer's output, used for branch
/// selection by statistics matching.
template <typename T>
std::vector<double> first_layer_channel_means(const ModelParams<T>& params, const Tensor<T>& batch);

}  // namespace sfiqa::nn
