#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sfiqa/data.hpp"
#include "sfiqa/losses.hpp"
#include "sfiqa/metrics.hpp"
#include "sfiqa/nn/network.hpp"

namespace sfiqa::engine {

/// How a new target branch obtains its running statistics.
enum class BnStatsPolicy {
  kEmaFromSource,      // start from the copied source statistics and EMA-update
  kResetThenEstimate,  // discard them; the first target batch initialises them
};

struct TrainConfig {
  nn::NetworkSpec network;
  RatingScale scale = RatingScale::standard();
  double sigma_floor = kDefaultSigmaFloor;
  std::uint64_t seed = 0;
  int batch_size = 32;
  int eval_batch_size = 64;
  int crop_height = 32;
  int crop_width = 32;

  // source training
  int max_epochs = 30;
  int patience = 5;
  double source_lr = 1e-4;
  losses::MeanPenalty mean_penalty = losses::MeanPenalty::kSquared;
  data::SplitRatios split_ratios;

  // adaptation
  double adapt_lr = 5e-5;
  int adapt_steps = 1000;
  int checkpoint_every = 50;
  BnStatsPolicy bn_policy = BnStatsPolicy::kEmaFromSource;
  std::map<std::string, losses::AdaptWeights> weights;

  void validate() const;
};

struct SourceStepRecord {
  int step = 0;
  double cross_entropy = 0.0;
  double mean_penalty = 0.0;
  double total = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_srocc = 0.0;
};

struct AdaptStepRecord {
  int step = 0;
  std::string domain;
  double entropy = 0.0;
  double diversity = 0.0;
  double gaussian = 0.0;
  double total = 0.0;
};

struct CheckpointRecord {
  int step = 0;
  double loss = 0.0;  // mean total loss of the steps since the previous checkpoint
  std::string domains;
};

struct RunLog {
  std::vector<SourceStepRecord> source_steps;
  std::vector<EpochRecord> epochs;
  std::vector<AdaptStepRecord> adapt_steps;
  std::vector<CheckpointRecord> checkpoints;
  /// Indices into `checkpoints` of the selected snapshots (one per adapt call).
  std::vector<std::size_t> selected;
};

struct SourceResult {
  nn::ModelParams<float> params;
  RunLog log;
  double best_val_srocc = 0.0;
  int best_epoch = 0;
};

/// Trains the source model on the train split, keeping the epoch with the best
/// validation SROCC; stops after `patience` epochs without improvement.
SourceResult train_source(const TrainConfig& config, const data::Dataset& source, const std::string& source_name);

struct AdaptResult {
  nn::ModelParams<float> params;
  RunLog log;
};

/// Source-free adaptation to one or more targets simultaneously. Only the new
/// targets' DSBN affine parameters are optimised; the snapshot with the lowest
/// windowed loss is returned.
AdaptResult adapt(const nn::ModelParams<float>& params, const std::vector<data::UnlabeledDomain>& targets,
                  const TrainConfig& config, int step_offset = 0);

/// Adapts to the targets one after another.
AdaptResult adapt_continual(const nn::ModelParams<float>& params, const std::vector<data::UnlabeledDomain>& targets,
                            const TrainConfig& config);

struct Prediction {
  RatingDistribution distribution;
  double score = 0.0;
};

struct InferResult {
  std::vector<Prediction> predictions;
  std::string domain;  // branch actually used
};

/// Branch whose first-layer running statistics best match the images.
std::string select_branch(const nn::ModelParams<float>& params, const std::vector<data::Image>& images,
                          const TrainConfig& config);

/// Eval-mode predictions; `domain` empty or "auto" selects a branch by
/// statistics matching.
InferResult infer(const nn::ModelParams<float>& params, const std::vector<data::Image>& images,
                  const std::string& domain, const TrainConfig& config);

struct Evaluation {
  metrics::MetricReport report;
  std::string domain;
  std::vector<double> scores;
};

Evaluation evaluate(const nn::ModelParams<float>& params, const data::Dataset& dataset, const std::string& domain,
                    const TrainConfig& config);

/// Mean entropy of the eval-mode predictions' batch average (collapse probe).
double mean_prediction_entropy(const nn::ModelParams<float>& params, const std::vector<data::Image>& images,
                               const std::string& domain, const TrainConfig& config);

}  // namespace sfiqa::engine
