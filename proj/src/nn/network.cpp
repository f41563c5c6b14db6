#include "sfiqa/nn/network.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <utility>

#include "sfiqa/rng.hpp"

namespace sfiqa::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr int kKernel = 3;
constexpr int kTaps = kKernel * kKernel;

template <typename T>
void im2col(std::span<const T> image, int channels, int height, int width, T* col) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    const T* src = image.data() + c * plane;
    for (int ky = 0; ky < kKernel; ++ky) {
      for (int kx = 0; kx < kKernel; ++kx) {
        T* dst = col + (static_cast<std::size_t>(c) * kTaps + ky * kKernel + kx) * plane;
        for (int y = 0; y < height; ++y) {
          const int sy = y + ky - 1;
          T* row = dst + static_cast<std::size_t>(y) * width;
          if (sy < 0 || sy >= height) {
            std::fill(row, row + width, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(sy) * width;
          for (int x = 0; x < width; ++x) {
            const int sx = x + kx - 1;
            row[x] = (sx < 0 || sx >= width) ? T(0) : srow[sx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int channels, int height, int width, std::span<T> image) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    T* dst = image.data() + c * plane;
    for (int ky = 0; ky < kKernel; ++ky) {
      for (int kx = 0; kx < kKernel; ++kx) {
        const T* src = col + (static_cast<std::size_t>(c) * kTaps + ky * kKernel + kx) * plane;
        for (int y = 0; y < height; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= height) continue;
          T* drow = dst + static_cast<std::size_t>(sy) * width;
          const T* srow = src + static_cast<std::size_t>(y) * width;
          for (int x = 0; x < width; ++x) {
            const int sx = x + kx - 1;
            if (sx >= 0 && sx < width) drow[sx] += srow[x];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv_forward(const ConvLayer<T>& conv, const Tensor<T>& input, std::vector<T>* columns) {
  Tensor<T> out(input.batch, conv.out_channels, input.height, input.width);
  const int hw = static_cast<int>(input.plane());
  const int k = conv.in_channels * kTaps;
  std::vector<T> local;
  std::vector<T>& cols = columns ? *columns : local;
  cols.resize(static_cast<std::size_t>(input.batch) * k * hw);
  Eigen::Map<const RowMat<T>> w(conv.weight.data(), conv.out_channels, k);
  for (int b = 0; b < input.batch; ++b) {
    T* col = cols.data() + static_cast<std::size_t>(b) * k * hw;
    im2col<T>(input.sample(b), input.channels, input.height, input.width, col);
    Eigen::Map<const RowMat<T>> colm(col, k, hw);
    Eigen::Map<RowMat<T>> y(out.sample(b).data(), conv.out_channels, hw);
    y.noalias() = w * colm;
    for (int o = 0; o < conv.out_channels; ++o) y.row(o).array() += conv.bias[static_cast<std::size_t>(o)];
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& in) {
  Tensor<T> out(in.batch, in.channels, in.height / 2, in.width / 2);
  for (int b = 0; b < in.batch; ++b)
    for (int c = 0; c < in.channels; ++c)
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
          out.at(b, c, y, x) = T(0.25) * (in.at(b, c, 2 * y, 2 * x) + in.at(b, c, 2 * y, 2 * x + 1) +
                                          in.at(b, c, 2 * y + 1, 2 * x) + in.at(b, c, 2 * y + 1, 2 * x + 1));
  return out;
}

template <typename T>
Matrix<T> dense_forward(const DenseLayer<T>& layer, const Matrix<T>& in) {
  Matrix<T> out(in.rows, layer.outputs);
  for (int b = 0; b < in.rows; ++b) {
    const auto x = in.row(b);
    for (int o = 0; o < layer.outputs; ++o) {
      const T* w = layer.weight.data() + static_cast<std::size_t>(o) * layer.inputs;
      T acc = layer.bias[static_cast<std::size_t>(o)];
      for (int i = 0; i < layer.inputs; ++i) acc += w[i] * x[static_cast<std::size_t>(i)];
      out(b, o) = acc;
    }
  }
  return out;
}

template <typename T>
void fill_he(std::vector<T>& w, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : w) v = static_cast<T>(stddev * rng.normal());
}

template <typename T>
BranchLayer<T> fresh_branch_layer(int channels) {
  const auto n = static_cast<std::size_t>(channels);
  return {std::vector<T>(n, T(1)), std::vector<T>(n, T(0)), std::vector<T>(n, T(0)), std::vector<T>(n, T(1)),
          false};
}

void check_domain(bool present, const std::string& domain) {
  require(present, ErrorKind::kMissingDomain, "no branch registered for domain '" + domain + "'");
}

template <typename T>
ForwardResult<T> forward_impl(const ModelParams<T>& params, DomainBranch<T>* mutable_branch,
                              const Tensor<T>& batch, const std::string& domain, Mode mode) {
  const auto& spec = params.spec;
  require(batch.channels == spec.in_channels && batch.height == spec.height && batch.width == spec.width,
          ErrorKind::kShape, "input dims do not match the network's first layer");
  const DomainBranch<T>& branch = params.branch(domain);
  ForwardResult<T> result;
  auto& trace = result.trace;
  trace.domain = domain;
  trace.mode = mode;
  trace.revision = params.revision;
  trace.batch = batch.batch;
  trace.blocks.resize(params.convs.size());

  Tensor<T> current = batch;
  for (std::size_t m = 0; m < params.convs.size(); ++m) {
    auto& bt = trace.blocks[m];
    bt.input = std::move(current);
    bt.conv_out = conv_forward(params.convs[m], bt.input, &bt.columns);
    if (mode == Mode::kTrain) {
      bt.normalized = dsbn_normalize(bt.conv_out, mutable_branch->layers[m], branch.epsilon, branch.ema_alpha,
                                     Mode::kTrain, &bt.norm);
    } else {
      bt.normalized = dsbn_normalize(bt.conv_out, branch.layers[m], branch.epsilon, &bt.norm);
    }
    Tensor<T> activated = bt.normalized;
    for (auto& v : activated.values) v = std::max(v, T(0));
    current = avg_pool2(activated);
  }
  trace.last_pooled = std::move(current);
  const auto& last = trace.last_pooled;
  trace.pooled = Matrix<T>(last.batch, last.channels);
  for (int b = 0; b < last.batch; ++b)
    for (int c = 0; c < last.channels; ++c) {
      T acc = T(0);
      for (const T v : last.channel(b, c)) acc += v;
      trace.pooled(b, c) = acc / static_cast<T>(last.plane());
    }
  trace.hidden_pre = dense_forward(params.hidden, trace.pooled);
  trace.hidden_out = trace.hidden_pre;
  for (auto& v : trace.hidden_out.values) v = std::max(v, T(0));
  trace.logits = dense_forward(params.head, trace.hidden_out);
  result.logits = trace.logits;
  return result;
}

}  // namespace

void NetworkSpec::validate() const {
  require(in_channels >= 1 && height >= 1 && width >= 1, ErrorKind::kConfig, "input dims must be >= 1");
  require(!block_channels.empty(), ErrorKind::kConfig, "at least one conv block is required");
  int h = height, w = width;
  for (const int c : block_channels) {
    require(c >= 1, ErrorKind::kConfig, "block channel counts must be >= 1");
    require(h % 2 == 0 && w % 2 == 0, ErrorKind::kConfig, "spatial dims must stay even through every pooling stage");
    h /= 2;
    w /= 2;
  }
  require(hidden >= 1, ErrorKind::kConfig, "hidden width must be >= 1");
  require(levels >= 2, ErrorKind::kConfig, "need at least 2 rating levels");
  require(epsilon > 0.0, ErrorKind::kConfig, "BN epsilon must be positive");
  require(ema_alpha > 0.0 && ema_alpha <= 1.0, ErrorKind::kConfig, "EMA factor must be in (0, 1]");
}

std::string to_string(const ParamId& id) {
  switch (id.kind) {
    case ParamKind::kConvWeight: return "conv" + std::to_string(id.layer) + ".weight";
    case ParamKind::kConvBias: return "conv" + std::to_string(id.layer) + ".bias";
    case ParamKind::kDenseWeight: return (id.layer == 0 ? "hidden" : "head") + std::string(".weight");
    case ParamKind::kDenseBias: return (id.layer == 0 ? "hidden" : "head") + std::string(".bias");
    case ParamKind::kGamma: return "bn" + std::to_string(id.layer) + "[" + id.domain + "].gamma";
    case ParamKind::kBeta: return "bn" + std::to_string(id.layer) + "[" + id.domain + "].beta";
  }
  return "?";
}

template <typename T>
const DomainBranch<T>& ModelParams<T>::branch(const std::string& domain) const {
  const auto it = branches.find(domain);
  check_domain(it != branches.end(), domain);
  return it->second;
}

template <typename T>
DomainBranch<T>& ModelParams<T>::branch(const std::string& domain) {
  const auto it = branches.find(domain);
  check_domain(it != branches.end(), domain);
  return it->second;
}

template <typename T>
ModelParams<T> init_params(const NetworkSpec& spec, const std::string& source_domain, std::uint64_t seed) {
  spec.validate();
  require(!source_domain.empty(), ErrorKind::kInvalidArgument, "source domain id must be non-empty");
  Rng rng(seed);
  ModelParams<T> p;
  p.spec = spec;
  p.source_domain = source_domain;
  int in = spec.in_channels;
  DomainBranch<T> branch;
  branch.epsilon = static_cast<T>(spec.epsilon);
  branch.ema_alpha = static_cast<T>(spec.ema_alpha);
  for (const int out : spec.block_channels) {
    ConvLayer<T> conv;
    conv.in_channels = in;
    conv.out_channels = out;
    conv.weight.resize(static_cast<std::size_t>(out) * in * kTaps);
    conv.bias.assign(static_cast<std::size_t>(out), T(0));
    fill_he(conv.weight, static_cast<std::size_t>(in) * kTaps, rng);
    p.convs.push_back(std::move(conv));
    branch.layers.push_back(fresh_branch_layer<T>(out));
    in = out;
  }
  auto make_dense = [&](int inputs, int outputs) {
    DenseLayer<T> d;
    d.inputs = inputs;
    d.outputs = outputs;
    d.weight.resize(static_cast<std::size_t>(inputs) * outputs);
    d.bias.assign(static_cast<std::size_t>(outputs), T(0));
    fill_he(d.weight, static_cast<std::size_t>(inputs), rng);
    return d;
  };
  p.hidden = make_dense(in, spec.hidden);
  p.head = make_dense(spec.hidden, spec.levels);
  p.branches.emplace(source_domain, std::move(branch));
  return p;
}

template <typename To, typename From>
ModelParams<To> convert(const ModelParams<From>& params) {
  auto vec = [](const std::vector<From>& v) { return std::vector<To>(v.begin(), v.end()); };
  ModelParams<To> out;
  out.spec = params.spec;
  out.source_domain = params.source_domain;
  out.revision = params.revision;
  for (const auto& c : params.convs) out.convs.push_back({c.in_channels, c.out_channels, vec(c.weight), vec(c.bias)});
  out.hidden = {params.hidden.inputs, params.hidden.outputs, vec(params.hidden.weight), vec(params.hidden.bias)};
  out.head = {params.head.inputs, params.head.outputs, vec(params.head.weight), vec(params.head.bias)};
  for (const auto& [name, br] : params.branches) {
    DomainBranch<To> nb;
    nb.epsilon = static_cast<To>(br.epsilon);
    nb.ema_alpha = static_cast<To>(br.ema_alpha);
    for (const auto& l : br.layers)
      nb.layers.push_back({vec(l.gamma), vec(l.beta), vec(l.running_mean), vec(l.running_var), l.initialized});
    out.branches.emplace(name, std::move(nb));
  }
  return out;
}

template <typename T>
std::vector<ParamId> all_param_ids(const ModelParams<T>& params) {
  std::vector<ParamId> ids;
  for (int m = 0; m < static_cast<int>(params.convs.size()); ++m) {
    ids.push_back({ParamKind::kConvWeight, m, {}});
    ids.push_back({ParamKind::kConvBias, m, {}});
  }
  for (int d = 0; d < 2; ++d) {
    ids.push_back({ParamKind::kDenseWeight, d, {}});
    ids.push_back({ParamKind::kDenseBias, d, {}});
  }
  for (const auto& [name, br] : params.branches)
    for (int m = 0; m < static_cast<int>(br.layers.size()); ++m) {
      ids.push_back({ParamKind::kGamma, m, name});
      ids.push_back({ParamKind::kBeta, m, name});
    }
  return ids;
}

namespace {

template <typename P>
auto& param_vector(P& params, const ParamId& id) {
  auto layer_at = [&](auto& container) -> auto& {
    require(id.layer >= 0 && static_cast<std::size_t>(id.layer) < container.size(), ErrorKind::kInvalidArgument,
            "parameter layer out of range: " + to_string(id));
    return container[static_cast<std::size_t>(id.layer)];
  };
  switch (id.kind) {
    case ParamKind::kConvWeight: return layer_at(params.convs).weight;
    case ParamKind::kConvBias: return layer_at(params.convs).bias;
    case ParamKind::kDenseWeight: return id.layer == 0 ? params.hidden.weight : params.head.weight;
    case ParamKind::kDenseBias: return id.layer == 0 ? params.hidden.bias : params.head.bias;
    case ParamKind::kGamma: return layer_at(params.branch(id.domain).layers).gamma;
    case ParamKind::kBeta: return layer_at(params.branch(id.domain).layers).beta;
  }
  fail(ErrorKind::kInvalidArgument, "unknown parameter kind");
}

}  // namespace

template <typename T>
std::span<T> param_view(ModelParams<T>& params, const ParamId& id) {
  return param_vector(params, id);
}

template <typename T>
std::span<const T> param_view(const ModelParams<T>& params, const ParamId& id) {
  return param_vector(params, id);
}

template <typename T>
std::size_t scalar_count(const ModelParams<T>& params, const ParamMask& mask) {
  std::size_t n = 0;
  for (const auto& id : mask) n += param_view(params, id).size();
  return n;
}

template <typename T>
ParamMask freeze_mask(const ModelParams<T>& params, Phase phase, const std::string& domain) {
  check_domain(params.has_branch(domain), domain);
  ParamMask mask;
  for (auto& id : all_param_ids(params)) {
    const bool in_branch = !id.is_shared() && id.domain == domain;
    if (phase == Phase::kAdapt ? in_branch : (id.is_shared() || in_branch)) mask.insert(id);
  }
  return mask;
}

template <typename T>
void add_domain_branch(ModelParams<T>& params, const std::string& new_domain, const std::string& source_domain) {
  require(!new_domain.empty(), ErrorKind::kInvalidArgument, "domain id must be non-empty");
  require(!params.has_branch(new_domain), ErrorKind::kAlreadyExists,
          "domain '" + new_domain + "' is already registered");
  DomainBranch<T> copy = params.branch(source_domain);
  params.branches.emplace(new_domain, std::move(copy));
}

template <typename T>
Tensor<T> dsbn_normalize(const Tensor<T>& v, BranchLayer<T>& layer, T epsilon, T ema_alpha, Mode mode,
                         NormCache<T>* cache) {
  if (mode == Mode::kEval) return dsbn_normalize(v, std::as_const(layer), epsilon, cache);
  require(v.channels == layer.channels(), ErrorKind::kShape, "DSBN channel count mismatch");
  const std::size_t count = static_cast<std::size_t>(v.batch) * v.plane();
  Tensor<T> out(v.batch, v.channels, v.height, v.width);
  NormCache<T> local;
  NormCache<T>& nc = cache ? *cache : local;
  nc.mode = Mode::kTrain;
  nc.whitened = Tensor<T>(v.batch, v.channels, v.height, v.width);
  nc.mean.assign(static_cast<std::size_t>(v.channels), T(0));
  nc.inv_std.assign(static_cast<std::size_t>(v.channels), T(0));
  for (int c = 0; c < v.channels; ++c) {
    // statistics accumulate in double so float batches stay accurate
    double sum = 0.0;
    for (int b = 0; b < v.batch; ++b)
      for (const T x : v.channel(b, c)) sum += x;
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (int b = 0; b < v.batch; ++b)
      for (const T x : v.channel(b, c)) sq += (x - mean) * (x - mean);
    const double var = sq / static_cast<double>(count);
    const T inv_std = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(epsilon)));
    const auto ci = static_cast<std::size_t>(c);
    nc.mean[ci] = static_cast<T>(mean);
    nc.inv_std[ci] = inv_std;
    const T g = layer.gamma[ci], be = layer.beta[ci], mu = static_cast<T>(mean);
    for (int b = 0; b < v.batch; ++b) {
      const auto src = v.channel(b, c);
      auto wh = nc.whitened.channel(b, c);
      auto dst = out.channel(b, c);
      for (std::size_t i = 0; i < src.size(); ++i) {
        wh[i] = (src[i] - mu) * inv_std;
        dst[i] = g * wh[i] + be;
      }
    }
    if (layer.initialized) {
      layer.running_mean[ci] = (T(1) - ema_alpha) * layer.running_mean[ci] + ema_alpha * static_cast<T>(mean);
      layer.running_var[ci] = (T(1) - ema_alpha) * layer.running_var[ci] + ema_alpha * static_cast<T>(var);
    } else {
      layer.running_mean[ci] = static_cast<T>(mean);
      layer.running_var[ci] = static_cast<T>(var);
    }
  }
  layer.initialized = true;
  return out;
}

template <typename T>
Tensor<T> dsbn_normalize(const Tensor<T>& v, const BranchLayer<T>& layer, T epsilon, NormCache<T>* cache) {
  require(v.channels == layer.channels(), ErrorKind::kShape, "DSBN channel count mismatch");
  require(layer.initialized, ErrorKind::kUninitializedStatistics,
          "eval-mode normalisation on a branch whose running statistics were never estimated");
  Tensor<T> out(v.batch, v.channels, v.height, v.width);
  NormCache<T> local;
  NormCache<T>& nc = cache ? *cache : local;
  nc.mode = Mode::kEval;
  nc.whitened = Tensor<T>(v.batch, v.channels, v.height, v.width);
  nc.mean = layer.running_mean;
  nc.inv_std.resize(static_cast<std::size_t>(v.channels));
  for (int c = 0; c < v.channels; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    const T inv_std = T(1) / std::sqrt(layer.running_var[ci] + epsilon);
    nc.inv_std[ci] = inv_std;
    const T g = layer.gamma[ci], be = layer.beta[ci], mu = layer.running_mean[ci];
    for (int b = 0; b < v.batch; ++b) {
      const auto src = v.channel(b, c);
      auto wh = nc.whitened.channel(b, c);
      auto dst = out.channel(b, c);
      for (std::size_t i = 0; i < src.size(); ++i) {
        wh[i] = (src[i] - mu) * inv_std;
        dst[i] = g * wh[i] + be;
      }
    }
  }
  return out;
}

template <typename T>
ForwardResult<T> forward(ModelParams<T>& params, const Tensor<T>& batch, const std::string& domain, Mode mode) {
  DomainBranch<T>& branch = params.branch(domain);
  return forward_impl<T>(params, mode == Mode::kTrain ? &branch : nullptr, batch, domain, mode);
}

template <typename T>
ForwardResult<T> forward_eval(const ModelParams<T>& params, const Tensor<T>& batch, const std::string& domain) {
  return forward_impl<T>(params, nullptr, batch, domain, Mode::kEval);
}

template <typename T>
GradientSet<T> backward(const ModelParams<T>& params, const ForwardTrace<T>& trace, const Matrix<T>& grad_logits,
                        const ParamMask* wanted) {
  require(trace.revision == params.revision && params.has_branch(trace.domain) &&
              trace.blocks.size() == params.convs.size(),
          ErrorKind::kTraceMismatch, "trace does not belong to the current parameters");
  require(grad_logits.rows == trace.logits.rows && grad_logits.cols == trace.logits.cols, ErrorKind::kShape,
          "grad_logits shape does not match logits");
  const auto& branch = params.branch(trace.domain);
  auto want = [&](const ParamId& id) { return wanted == nullptr || wanted->count(id) != 0; };
  const int nblocks = static_cast<int>(params.convs.size());
  // lowest block whose parameters are requested; nothing below it is propagated
  int lowest = nblocks;
  for (int m = 0; m < nblocks; ++m) {
    if (want({ParamKind::kConvWeight, m, {}}) || want({ParamKind::kConvBias, m, {}}) ||
        want({ParamKind::kGamma, m, trace.domain}) || want({ParamKind::kBeta, m, trace.domain})) {
      lowest = m;
      break;
    }
  }
  GradientSet<T> grads;
  const int batch = trace.batch;

  auto dense_backward = [&](const DenseLayer<T>& layer, int index, const Matrix<T>& input, const Matrix<T>& dout,
                            bool need_input) {
    const ParamId wid{ParamKind::kDenseWeight, index, {}}, bid{ParamKind::kDenseBias, index, {}};
    if (want(wid)) {
      auto& dw = grads[wid];
      dw.assign(layer.weight.size(), T(0));
      for (int b = 0; b < batch; ++b)
        for (int o = 0; o < layer.outputs; ++o) {
          const T g = dout(b, o);
          for (int i = 0; i < layer.inputs; ++i) dw[static_cast<std::size_t>(o) * layer.inputs + i] += g * input(b, i);
        }
    }
    if (want(bid)) {
      auto& db = grads[bid];
      db.assign(layer.bias.size(), T(0));
      for (int b = 0; b < batch; ++b)
        for (int o = 0; o < layer.outputs; ++o) db[static_cast<std::size_t>(o)] += dout(b, o);
    }
    Matrix<T> din;
    if (need_input) {
      din = Matrix<T>(batch, layer.inputs);
      for (int b = 0; b < batch; ++b)
        for (int o = 0; o < layer.outputs; ++o) {
          const T g = dout(b, o);
          const T* w = layer.weight.data() + static_cast<std::size_t>(o) * layer.inputs;
          for (int i = 0; i < layer.inputs; ++i) din(b, i) += g * w[i];
        }
    }
    return din;
  };

  Matrix<T> dhidden = dense_backward(params.head, 1, trace.hidden_out, grad_logits, true);
  for (std::size_t i = 0; i < dhidden.values.size(); ++i)
    if (!(trace.hidden_pre.values[i] > T(0))) dhidden.values[i] = T(0);
  const bool below_hidden = lowest < nblocks;
  Matrix<T> dpooled = dense_backward(params.hidden, 0, trace.pooled, dhidden, below_hidden);

  // zero-filled gradients for requested tensors that receive no signal
  auto ensure = [&](const ParamId& id) {
    if (want(id) && grads.count(id) == 0) grads[id].assign(param_view(params, id).size(), T(0));
  };
  for (int m = 0; m < nblocks; ++m) {
    ensure({ParamKind::kConvWeight, m, {}});
    ensure({ParamKind::kConvBias, m, {}});
    ensure({ParamKind::kGamma, m, trace.domain});
    ensure({ParamKind::kBeta, m, trace.domain});
  }
  if (!below_hidden) return grads;

  // gradient w.r.t. the output of the current block's pooling stage
  const auto& last = trace.last_pooled;
  Tensor<T> dout(last.batch, last.channels, last.height, last.width);
  const T inv_plane = T(1) / static_cast<T>(last.plane());
  for (int b = 0; b < last.batch; ++b)
    for (int c = 0; c < last.channels; ++c) {
      const T g = dpooled(b, c) * inv_plane;
      for (auto& v : dout.channel(b, c)) v = g;
    }

  for (int m = nblocks - 1; m >= lowest; --m) {
    const auto& bt = trace.blocks[static_cast<std::size_t>(m)];
    const auto& layer = branch.layers[static_cast<std::size_t>(m)];
    const auto& conv = params.convs[static_cast<std::size_t>(m)];
    const int ch = bt.normalized.channels, h = bt.normalized.height, w = bt.normalized.width;
    // avg-pool and ReLU backward
    Tensor<T> dnorm(batch, ch, h, w);
    for (int b = 0; b < batch; ++b)
      for (int c = 0; c < ch; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            if (bt.normalized.at(b, c, y, x) > T(0)) dnorm.at(b, c, y, x) = T(0.25) * dout.at(b, c, y / 2, x / 2);

    // DSBN backward
    Tensor<T> dconv(batch, ch, h, w);
    const ParamId gid{ParamKind::kGamma, m, trace.domain}, beid{ParamKind::kBeta, m, trace.domain};
    const double count = static_cast<double>(batch) * h * w;
    for (int c = 0; c < ch; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int b = 0; b < batch; ++b) {
        const auto dy = dnorm.channel(b, c);
        const auto xh = bt.norm.whitened.channel(b, c);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * xh[i];
        }
      }
      if (want(gid)) grads[gid][ci] = static_cast<T>(sum_dy_xhat);
      if (want(beid)) grads[beid][ci] = static_cast<T>(sum_dy);
      const T g = layer.gamma[ci], inv_std = bt.norm.inv_std[ci];
      if (bt.norm.mode == Mode::kTrain) {
        const T mean_dy = static_cast<T>(sum_dy / count);
        const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / count);
        for (int b = 0; b < batch; ++b) {
          const auto dy = dnorm.channel(b, c);
          const auto xh = bt.norm.whitened.channel(b, c);
          auto dx = dconv.channel(b, c);
          for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = g * inv_std * (dy[i] - mean_dy - xh[i] * mean_dy_xhat);
        }
      } else {
        for (int b = 0; b < batch; ++b) {
          const auto dy = dnorm.channel(b, c);
          auto dx = dconv.channel(b, c);
          for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = g * inv_std * dy[i];
        }
      }
    }

    // conv backward
    const int hw = h * w;
    const int k = conv.in_channels * kTaps;
    const ParamId wid{ParamKind::kConvWeight, m, {}}, bid{ParamKind::kConvBias, m, {}};
    if (want(wid)) {
      Eigen::Map<RowMat<T>> dw(grads[wid].data(), conv.out_channels, k);
      for (int b = 0; b < batch; ++b) {
        Eigen::Map<const RowMat<T>> dy(dconv.sample(b).data(), conv.out_channels, hw);
        Eigen::Map<const RowMat<T>> col(bt.columns.data() + static_cast<std::size_t>(b) * k * hw, k, hw);
        dw.noalias() += dy * col.transpose();
      }
    }
    if (want(bid)) {
      auto& db = grads[bid];
      for (int b = 0; b < batch; ++b)
        for (int c = 0; c < ch; ++c) {
          T acc = T(0);
          for (const T v : dconv.channel(b, c)) acc += v;
          db[static_cast<std::size_t>(c)] += acc;
        }
    }
    if (m == lowest) break;
    // gradient w.r.t. this block's input, which is the previous block's pool output
    Tensor<T> dinput(batch, conv.in_channels, h, w);
    Eigen::Map<const RowMat<T>> wmat(conv.weight.data(), conv.out_channels, k);
    RowMat<T> dcol(k, hw);
    for (int b = 0; b < batch; ++b) {
      Eigen::Map<const RowMat<T>> dy(dconv.sample(b).data(), conv.out_channels, hw);
      dcol.noalias() = wmat.transpose() * dy;
      col2im_add<T>(dcol.data(), conv.in_channels, h, w, dinput.sample(b));
    }
    dout = std::move(dinput);
  }
  return grads;
}

template <typename T>
Matrix<T> softmax(const Matrix<T>& logits) {
  Matrix<T> out(logits.rows, logits.cols);
  for (int r = 0; r < logits.rows; ++r) {
    const auto z = logits.row(r);
    require(std::all_of(z.begin(), z.end(), [](T v) { return std::isfinite(v); }), ErrorKind::kInvalidArgument,
            "non-finite logits");
    const T peak = *std::max_element(z.begin(), z.end());
    T sum = T(0);
    auto o = out.row(r);
    for (std::size_t k = 0; k < z.size(); ++k) {
      o[k] = std::exp(z[k] - peak);
      sum += o[k];
    }
    for (auto& v : o) v /= sum;
  }
  return out;
}

template <typename T>
std::vector<double> first_layer_channel_means(const ModelParams<T>& params, const Tensor<T>& batch) {
  require(batch.channels == params.spec.in_channels && batch.height == params.spec.height &&
              batch.width == params.spec.width,
          ErrorKind::kShape, "input dims do not match the network's first layer");
  const Tensor<T> y = conv_forward<T>(params.convs.front(), batch, nullptr);
  std::vector<double> means(static_cast<std::size_t>(y.channels), 0.0);
  for (int b = 0; b < y.batch; ++b)
    for (int c = 0; c < y.channels; ++c)
      for (const T v : y.channel(b, c)) means[static_cast<std::size_t>(c)] += v;
  for (auto& m : means) m /= static_cast<double>(y.batch) * y.plane();
  return means;
}

#define SFIQA_INSTANTIATE(T)                                                                                       \
  template struct ModelParams<T>;                                                                                  \
  template ModelParams<T> init_params<T>(const NetworkSpec&, const std::string&, std::uint64_t);                   \
  template std::vector<ParamId> all_param_ids<T>(const ModelParams<T>&);                                           \
  template std::span<T> param_view<T>(ModelParams<T>&, const ParamId&);                                            \
  template std::span<const T> param_view<T>(const ModelParams<T>&, const ParamId&);                                \
  template std::size_t scalar_count<T>(const ModelParams<T>&, const ParamMask&);                                   \
  template ParamMask freeze_mask<T>(const ModelParams<T>&, Phase, const std::string&);                             \
  template void add_domain_branch<T>(ModelParams<T>&, const std::string&, const std::string&);                     \
  template Tensor<T> dsbn_normalize<T>(const Tensor<T>&, BranchLayer<T>&, T, T, Mode, NormCache<T>*);              \
  template Tensor<T> dsbn_normalize<T>(const Tensor<T>&, const BranchLayer<T>&, T, NormCache<T>*);                 \
  template ForwardResult<T> forward<T>(ModelParams<T>&, const Tensor<T>&, const std::string&, Mode);               \
  template ForwardResult<T> forward_eval<T>(const ModelParams<T>&, const Tensor<T>&, const std::string&);          \
  template GradientSet<T> backward<T>(const ModelParams<T>&, const ForwardTrace<T>&, const Matrix<T>&,             \
                                      const ParamMask*);                                                           \
  template Matrix<T> softmax<T>(const Matrix<T>&);                                                                 \
  template std::vector<double> first_layer_channel_means<T>(const ModelParams<T>&, const Tensor<T>&);

SFIQA_INSTANTIATE(float)
SFIQA_INSTANTIATE(double)
#undef SFIQA_INSTANTIATE

template ModelParams<double> convert<double, float>(const ModelParams<float>&);
template ModelParams<float> convert<float, double>(const ModelParams<double>&);
template ModelParams<float> convert<float, float>(const ModelParams<float>&);
template ModelParams<double> convert<double, double>(const ModelParams<double>&);

}  // namespace sfiqa::nn
