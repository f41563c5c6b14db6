#include "sfiqa/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "sfiqa/error.hpp"
#include "sfiqa/optim.hpp"
#include "sfiqa/rng.hpp"

namespace sfiqa::engine {

namespace {

constexpr std::uint64_t kCropStream = 0xC0FFEEull;

nn::Matrix<double> predict_probs(const nn::ModelParams<float>& params, const std::vector<data::Image>& images,
                                 const std::string& domain, const TrainConfig& config) {
  require(!images.empty(), ErrorKind::kData, "no images to predict");
  std::vector<std::size_t> all(images.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  nn::Matrix<double> probs(static_cast<int>(images.size()), params.spec.levels);
  Rng unused(0);
  int row = 0;
  for (const auto& idx : data::batches(all, config.eval_batch_size, false, 0, false)) {
    const auto batch =
        data::make_batch(images, idx, config.crop_height, config.crop_width, data::CropMode::kCenter, unused);
    const auto fwd = nn::forward_eval(params, batch, domain);
    const auto logp = losses::log_softmax(nn::cast<double>(fwd.logits));
    for (int b = 0; b < logp.rows; ++b, ++row)
      for (int k = 0; k < logp.cols; ++k) probs(row, k) = std::exp(logp(b, k));
  }
  return probs;
}

std::vector<double> scores_of(const nn::Matrix<double>& probs, const RatingScale& scale) {
  std::vector<double> s(static_cast<std::size_t>(probs.rows));
  for (int r = 0; r < probs.rows; ++r) s[static_cast<std::size_t>(r)] = dist_mean(probs.row(r), scale);
  return s;
}

double srocc_or_floor(std::span<const double> pred, std::span<const double> gt) {
  try {
    return metrics::srocc(pred, gt);
  } catch (const Error&) {
    return -1.0;  // undefined (e.g. constant predictions) ranks below any real value
  }
}

/// Endless drop-last shuffled batches over one target's images.
class BatchStream {
 public:
  BatchStream(std::size_t n, int batch_size, std::uint64_t seed) : rng_(seed), batch_size_(batch_size) {
    all_.resize(n);
    for (std::size_t i = 0; i < n; ++i) all_[i] = i;
  }

  const std::vector<std::size_t>& next() {
    if (pos_ >= current_.size()) {
      current_ = data::batches(all_, batch_size_, true, rng_.next(), true);
      require(!current_.empty(), ErrorKind::kData, "target domain has fewer images than one batch");
      pos_ = 0;
    }
    return current_[pos_++];
  }

  Rng& rng() { return rng_; }

 private:
  Rng rng_;
  int batch_size_;
  std::vector<std::size_t> all_;
  std::vector<std::vector<std::size_t>> current_;
  std::size_t pos_ = 0;
};

}  // namespace

void TrainConfig::validate() const {
  network.validate();
  require(network.levels == scale.size(), ErrorKind::kConfig, "network levels must equal the rating scale size");
  require(sigma_floor > 0.0, ErrorKind::kConfig, "sigma_floor must be positive");
  require(batch_size >= 1 && eval_batch_size >= 1, ErrorKind::kConfig, "batch sizes must be >= 1");
  require(max_epochs >= 1 && patience >= 1, ErrorKind::kConfig, "max_epochs and patience must be >= 1");
  require(adapt_steps >= 1 && checkpoint_every >= 1, ErrorKind::kConfig, "adapt steps and checkpoint interval >= 1");
  require(source_lr > 0.0 && adapt_lr > 0.0, ErrorKind::kConfig, "learning rates must be positive");
  require(crop_height == network.height && crop_width == network.width, ErrorKind::kConfig,
          "crop size must equal the network input size");
}

SourceResult train_source(const TrainConfig& config, const data::Dataset& source, const std::string& source_name) {
  config.validate();
  require(source.labeled(), ErrorKind::kData, "source training needs labeled data");
  const std::vector<data::Split> splits =
      source.splits.empty() ? data::split(source.size(), source.groups, config.split_ratios, config.seed)
                            : source.splits;
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == data::Split::kTrain) train_idx.push_back(i);
    if (splits[i] == data::Split::kVal) val_idx.push_back(i);
  }
  require(!train_idx.empty(), ErrorKind::kData, "empty train split");
  require(!val_idx.empty(), ErrorKind::kData, "empty validation split");
  std::vector<data::Image> val_images;
  std::vector<double> val_gt;
  for (const auto i : val_idx) {
    val_images.push_back(source.images[i]);
    val_gt.push_back(source.labels[i].mean);
  }

  SourceResult result;
  auto params = nn::init_params<float>(config.network, source_name, config.seed);
  const auto mask = nn::freeze_mask(params, nn::Phase::kSourceTrain, source_name);
  optim::AdamState adam = optim::AdamState::for_mask(params, mask, {config.source_lr});
  Rng crop_rng(config.seed ^ kCropStream);
  Rng order_rng(stable_hash("source-order", config.seed));
  result.best_val_srocc = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  int step = 0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto epoch_batches = data::batches(train_idx, config.batch_size, true, order_rng.next(), true);
    require(!epoch_batches.empty(), ErrorKind::kData, "train split smaller than one batch");
    double epoch_loss = 0.0;
    for (const auto& idx : epoch_batches) {
      const auto batch =
          data::make_batch(source.images, idx, config.crop_height, config.crop_width, data::CropMode::kRandom, crop_rng);
      std::vector<QualityLabel> labels;
      for (const auto i : idx) labels.push_back(source.labels[i]);
      const auto fwd = nn::forward(params, batch, source_name, nn::Mode::kTrain);
      const auto logits = nn::cast<double>(fwd.logits);
      const auto loss = losses::source_loss(logits, labels, config.scale, config.sigma_floor, config.mean_penalty);
      const auto grads = nn::backward(params, fwd.trace, nn::cast<float>(loss.grad_logits), &mask);
      optim::adam_step(params, grads, mask, adam);
      // split the logged value into its two terms
      double penalty = 0.0;
      {
        const auto logp = losses::log_softmax(logits);
        for (int b = 0; b < logits.rows; ++b) {
          double mu_hat = 0.0;
          for (int k = 0; k < logits.cols; ++k) mu_hat += std::exp(logp(b, k)) * config.scale.level(k);
          const double d = labels[static_cast<std::size_t>(b)].mean - mu_hat;
          penalty += (config.mean_penalty == losses::MeanPenalty::kSquared ? d * d : std::abs(d)) / logits.rows;
        }
      }
      result.log.source_steps.push_back({++step, loss.value - penalty, penalty, loss.value});
      epoch_loss += loss.value / static_cast<double>(epoch_batches.size());
    }
    const auto val_scores = scores_of(predict_probs(params, val_images, source_name, config), config.scale);
    const double val_srocc = srocc_or_floor(val_scores, val_gt);
    result.log.epochs.push_back({epoch, epoch_loss, val_srocc});
    if (val_srocc > result.best_val_srocc) {
      result.best_val_srocc = val_srocc;
      result.best_epoch = epoch;
      result.params = params;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  return result;
}

AdaptResult adapt(const nn::ModelParams<float>& params, const std::vector<data::UnlabeledDomain>& targets,
                  const TrainConfig& config, int step_offset) {
  config.validate();
  require(!targets.empty(), ErrorKind::kInvalidArgument, "adaptation needs at least one target domain");
  AdaptResult result{params, {}};
  auto& model = result.params;
  require(model.has_branch(model.source_domain), ErrorKind::kMissingDomain, "model has no source branch");
  require(model.branch(model.source_domain).layers.front().initialized, ErrorKind::kUninitializedStatistics,
          "source branch has no running statistics; train the source model first");
  std::set<std::string> names;
  for (const auto& t : targets) {
    require(config.weights.count(t.name) != 0, ErrorKind::kConfig, "no adaptation weights for target '" + t.name + "'");
    require(names.insert(t.name).second, ErrorKind::kConfig, "target '" + t.name + "' listed twice");
    require(!t.images.empty(), ErrorKind::kData, "target '" + t.name + "' has no images");
  }

  nn::ParamMask mask;
  std::vector<BatchStream> streams;
  for (const auto& t : targets) {
    nn::add_domain_branch(model, t.name, model.source_domain);
    if (config.bn_policy == BnStatsPolicy::kResetThenEstimate)
      for (auto& layer : model.branch(t.name).layers) layer.initialized = false;
    const auto m = nn::freeze_mask(model, nn::Phase::kAdapt, t.name);
    mask.insert(m.begin(), m.end());
    streams.emplace_back(t.images.size(), config.batch_size, stable_hash(t.name, config.seed));
  }
  optim::AdamState adam = optim::AdamState::for_mask(model, mask, {config.adapt_lr});

  std::map<std::string, nn::DomainBranch<float>> best_branches;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t best_index = 0;
  double window_sum = 0.0;
  int window_count = 0;
  std::string domain_list;
  for (const auto& t : targets) domain_list += (domain_list.empty() ? "" : ";") + t.name;

  for (int step = 1; step <= config.adapt_steps; ++step) {
    std::vector<nn::ForwardTrace<float>> traces;
    std::vector<losses::DomainBatch> batches;
    for (std::size_t d = 0; d < targets.size(); ++d) {
      const auto& idx = streams[d].next();
      const auto batch = data::make_batch(targets[d].images, idx, config.crop_height, config.crop_width,
                                          data::CropMode::kRandom, streams[d].rng());
      auto fwd = nn::forward(model, batch, targets[d].name, nn::Mode::kTrain);
      batches.push_back({targets[d].name, nn::cast<double>(fwd.logits)});
      traces.push_back(std::move(fwd.trace));
    }
    const auto loss = losses::total_adaptation_loss(batches, config.weights, config.scale, config.sigma_floor);
    nn::GradientSet<float> grads;
    for (std::size_t d = 0; d < targets.size(); ++d) {
      auto g = nn::backward(model, traces[d], nn::cast<float>(loss.domains[d].grad_logits), &mask);
      grads.merge(g);
    }
    optim::adam_step(model, grads, mask, adam);
    for (const auto& terms : loss.domains)
      result.log.adapt_steps.push_back(
          {step_offset + step, terms.domain, terms.entropy, terms.diversity, terms.gaussian, terms.combined});
    window_sum += loss.total;
    ++window_count;
    if (step % config.checkpoint_every == 0 || step == config.adapt_steps) {
      const double window_loss = window_sum / window_count;
      result.log.checkpoints.push_back({step_offset + step, window_loss, domain_list});
      if (window_loss < best_loss) {
        best_loss = window_loss;
        best_index = result.log.checkpoints.size() - 1;
        best_branches.clear();
        for (const auto& t : targets) best_branches.emplace(t.name, model.branch(t.name));
      }
      window_sum = 0.0;
      window_count = 0;
    }
  }
  for (auto& [name, branch] : best_branches) model.branch(name) = std::move(branch);
  result.log.selected.push_back(best_index);
  return result;
}

AdaptResult adapt_continual(const nn::ModelParams<float>& params, const std::vector<data::UnlabeledDomain>& targets,
                            const TrainConfig& config) {
  require(!targets.empty(), ErrorKind::kInvalidArgument, "continual adaptation needs at least one target domain");
  AdaptResult result{params, {}};
  int offset = 0;
  for (const auto& target : targets) {
    auto step = adapt(result.params, {target}, config, offset);
    const std::size_t base = result.log.checkpoints.size();
    result.params = std::move(step.params);
    auto& log = result.log;
    log.adapt_steps.insert(log.adapt_steps.end(), step.log.adapt_steps.begin(), step.log.adapt_steps.end());
    log.checkpoints.insert(log.checkpoints.end(), step.log.checkpoints.begin(), step.log.checkpoints.end());
    for (const auto s : step.log.selected) log.selected.push_back(base + s);
    offset += config.adapt_steps;
  }
  return result;
}

std::string select_branch(const nn::ModelParams<float>& params, const std::vector<data::Image>& images,
                          const TrainConfig& config) {
  require(!images.empty(), ErrorKind::kData, "no images for branch selection");
  const int channels = params.spec.block_channels.front();
  std::vector<double> means(static_cast<std::size_t>(channels), 0.0);
  std::vector<std::size_t> all(images.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Rng unused(0);
  for (const auto& idx : data::batches(all, config.eval_batch_size, false, 0, false)) {
    const auto batch =
        data::make_batch(images, idx, config.crop_height, config.crop_width, data::CropMode::kCenter, unused);
    const auto m = nn::first_layer_channel_means(params, batch);
    const double weight = static_cast<double>(idx.size()) / static_cast<double>(images.size());
    for (std::size_t c = 0; c < means.size(); ++c) means[c] += m[c] * weight;
  }
  std::string best;
  double best_distance = std::numeric_limits<double>::infinity();
  for (const auto& [name, branch] : params.branches) {
    const auto& layer = branch.layers.front();
    if (!layer.initialized) continue;
    double distance = 0.0;
    for (std::size_t c = 0; c < means.size(); ++c) {
      const double d = means[c] - layer.running_mean[c];
      distance += d * d / (static_cast<double>(layer.running_var[c]) + static_cast<double>(branch.epsilon));
    }
    if (distance < best_distance) {
      best_distance = distance;
      best = name;
    }
  }
  require(!best.empty(), ErrorKind::kMissingDomain, "no initialised branch available for automatic selection");
  return best;
}

InferResult infer(const nn::ModelParams<float>& params, const std::vector<data::Image>& images,
                  const std::string& domain, const TrainConfig& config) {
  InferResult out;
  out.domain = (domain.empty() || domain == "auto") ? select_branch(params, images, config) : domain;
  const auto probs = predict_probs(params, images, out.domain, config);
  for (int r = 0; r < probs.rows; ++r) {
    const auto row = probs.row(r);
    // renormalise away float->double rounding before building the simplex
    std::vector<double> p(row.begin(), row.end());
    double sum = 0.0;
    for (const double v : p) sum += v;
    for (auto& v : p) v /= sum;
    RatingDistribution dist(std::move(p));
    const double score = dist_mean(dist, config.scale);
    out.predictions.push_back({std::move(dist), score});
  }
  return out;
}

Evaluation evaluate(const nn::ModelParams<float>& params, const data::Dataset& dataset, const std::string& domain,
                    const TrainConfig& config) {
  require(dataset.labeled(), ErrorKind::kData, "evaluation needs labeled data");
  require(dataset.size() >= 10, ErrorKind::kMetric, "evaluation needs at least 10 samples");
  Evaluation ev;
  ev.domain = (domain.empty() || domain == "auto") ? select_branch(params, dataset.images, config) : domain;
  ev.scores = scores_of(predict_probs(params, dataset.images, ev.domain, config), config.scale);
  std::vector<double> gt;
  for (const auto& l : dataset.labels) gt.push_back(l.mean);
  ev.report = metrics::evaluate_predictions(ev.scores, gt);
  return ev;
}

double mean_prediction_entropy(const nn::ModelParams<float>& params, const std::vector<data::Image>& images,
                               const std::string& domain, const TrainConfig& config) {
  const auto probs = predict_probs(params, images, domain, config);
  std::vector<double> mean(static_cast<std::size_t>(probs.cols), 0.0);
  for (int r = 0; r < probs.rows; ++r)
    for (int k = 0; k < probs.cols; ++k) mean[static_cast<std::size_t>(k)] += probs(r, k) / probs.rows;
  return entropy(mean);
}

}  // namespace sfiqa::engine
