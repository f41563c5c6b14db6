#include <doctest.h>

#include <cmath>

#include "sfiqa/checkpoint.hpp"
#include "sfiqa/engine.hpp"
#include "sfiqa/error.hpp"

using namespace sfiqa;
using namespace sfiqa::engine;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.network.height = 8;
  c.network.width = 8;
  c.network.block_channels = {4};
  c.network.hidden = 8;
  c.crop_height = 8;
  c.crop_width = 8;
  c.batch_size = 8;
  c.eval_batch_size = 16;
  c.max_epochs = 3;
  c.patience = 2;
  c.source_lr = 1e-3;
  c.adapt_lr = 1e-3;
  c.adapt_steps = 12;
  c.checkpoint_every = 5;
  c.seed = 7;
  return c;
}

data::Dataset domain(std::uint64_t seed, double a, double b, std::size_t n = 60) {
  data::SyntheticDomainSpec s;
  s.seed = seed;
  s.height = 8;
  s.width = 8;
  s.shift_a = {a, a, a};
  s.shift_b = {b, b, b};
  return data::generate_domain(s, n, RatingScale::standard());
}

data::UnlabeledDomain unlabeled(const std::string& name, const data::Dataset& ds) {
  return {name, ds.images};
}

// Source model shared by the tests in this file.
const SourceResult& source_model() {
  static const SourceResult r = train_source(tiny_config(), domain(1, 1.0, 0.0, 120), "src");
  return r;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kIo;
}

}  // namespace

TEST_CASE("source training is deterministic and keeps the best epoch") {
  const auto& a = source_model();
  const auto b = train_source(tiny_config(), domain(1, 1.0, 0.0, 120), "src");
  CHECK(serialize_params(a.params) == serialize_params(b.params));
  REQUIRE(!a.log.epochs.empty());
  CHECK(a.log.epochs.size() <= 3u);
  CHECK(a.log.source_steps.size() == b.log.source_steps.size());

  double best = -2.0;
  for (const auto& e : a.log.epochs) best = std::max(best, e.val_srocc);
  CHECK(a.best_val_srocc == best);
  CHECK(a.log.epochs[static_cast<std::size_t>(a.best_epoch - 1)].val_srocc == best);
  for (const auto& s : a.log.source_steps) CHECK(std::abs(s.cross_entropy + s.mean_penalty - s.total) < 1e-9);

  // replaying the validation split on the kept parameters reproduces the logged value
  auto ds = domain(1, 1.0, 0.0, 120);
  ds.splits = data::split(ds.size(), ds.groups, tiny_config().split_ratios, tiny_config().seed);
  const auto ev = evaluate(a.params, ds.subset(data::Split::kVal), "src", tiny_config());
  CHECK(ev.report.srocc == a.best_val_srocc);
}

TEST_CASE("eval batch size does not change predictions") {
  auto c = tiny_config();
  const auto ds = domain(3, 1.0, 0.0, 37);
  const auto big = infer(source_model().params, ds.images, "src", c);
  c.eval_batch_size = 1;
  const auto one = infer(source_model().params, ds.images, "src", c);
  REQUIRE(big.predictions.size() == 37u);
  for (std::size_t i = 0; i < 37; ++i) {
    CHECK(std::abs(big.predictions[i].score - one.predictions[i].score) <= 1e-6);
    CHECK(big.predictions[i].score >= 1.0);
    CHECK(big.predictions[i].score <= 5.0);
  }
}

TEST_CASE("adaptation touches only the new branches") {
  const auto& src = source_model().params;
  const auto cfg = [] {
    auto c = tiny_config();
    c.weights["t1"] = {};
    c.weights["t2"] = {};
    return c;
  }();
  const auto t1 = unlabeled("t1", domain(11, 1.3, 0.2));
  const auto t2 = unlabeled("t2", domain(12, 0.7, -0.2));
  const auto r = adapt(src, {t1, t2}, cfg);

  CHECK(params_hash(r.params, {"t1", "t2"}) == params_hash(src));
  CHECK(r.params.branch("t1").layers[0].gamma != src.branch("src").layers[0].gamma);
  CHECK(r.params.branch("t1").layers[0].running_mean != src.branch("src").layers[0].running_mean);

  // 12 steps with a checkpoint every 5: windows end at 5, 10 and 12
  REQUIRE(r.log.checkpoints.size() == 3u);
  CHECK(r.log.checkpoints.back().step == 12);
  CHECK(r.log.adapt_steps.size() == 24u);
  REQUIRE(r.log.selected.size() == 1u);
  double lowest = 1e300;
  for (const auto& c : r.log.checkpoints) lowest = std::min(lowest, c.loss);
  CHECK(r.log.checkpoints[r.log.selected[0]].loss == lowest);
}

TEST_CASE("target order does not matter") {
  auto cfg = tiny_config();
  cfg.weights["t1"] = {};
  cfg.weights["t2"] = {1.0, 0.5, 0.1};
  const auto t1 = unlabeled("t1", domain(11, 1.3, 0.2));
  const auto t2 = unlabeled("t2", domain(12, 0.7, -0.2));
  const auto ab = adapt(source_model().params, {t1, t2}, cfg);
  const auto ba = adapt(source_model().params, {t2, t1}, cfg);
  CHECK(ab.params.branch("t1") == ba.params.branch("t1"));
  CHECK(ab.params.branch("t2") == ba.params.branch("t2"));
}

TEST_CASE("continual adaptation of one target equals plain adaptation") {
  auto cfg = tiny_config();
  cfg.weights["t1"] = {};
  const auto t1 = unlabeled("t1", domain(11, 1.3, 0.2));
  const auto plain = adapt(source_model().params, {t1}, cfg);
  const auto cont = adapt_continual(source_model().params, {t1}, cfg);
  CHECK(serialize_params(plain.params) == serialize_params(cont.params));
  CHECK(plain.log.selected == cont.log.selected);
}

TEST_CASE("continual adaptation freezes earlier targets") {
  auto cfg = tiny_config();
  cfg.weights["t1"] = {};
  cfg.weights["t2"] = {};
  const auto t1 = unlabeled("t1", domain(11, 1.3, 0.2));
  const auto t2 = unlabeled("t2", domain(12, 0.7, -0.2));
  const auto first = adapt(source_model().params, {t1}, cfg);
  const auto both = adapt_continual(source_model().params, {t1, t2}, cfg);
  CHECK(both.params.branch("t1") == first.params.branch("t1"));
  CHECK(params_hash(both.params, {"t2"}) == params_hash(first.params));
  REQUIRE(both.log.selected.size() == 2u);
  CHECK(both.log.selected[1] >= 3u);
  CHECK(both.log.checkpoints.back().step == 24);
}

TEST_CASE("bn policies") {
  auto cfg = tiny_config();
  cfg.weights["t1"] = {};
  cfg.adapt_steps = 1;
  const auto t1 = unlabeled("t1", domain(11, 1.3, 0.2));
  const auto ema = adapt(source_model().params, {t1}, cfg);
  cfg.bn_policy = BnStatsPolicy::kResetThenEstimate;
  const auto reset = adapt(source_model().params, {t1}, cfg);
  const auto& src_mean = source_model().params.branch("src").layers[0].running_mean;
  const auto& e = ema.params.branch("t1").layers[0];
  const auto& r = reset.params.branch("t1").layers[0];
  CHECK(r.initialized);
  // EMA moves a tenth of the way from the source statistics; reset copies the batch
  for (std::size_t c = 0; c < src_mean.size(); ++c)
    CHECK(std::abs((e.running_mean[c] - src_mean[c]) - 0.1f * (r.running_mean[c] - src_mean[c])) < 1e-5);
}

TEST_CASE("automatic branch selection") {
  const auto ds = domain(3, 1.0, 0.0, 20);
  CHECK(select_branch(source_model().params, ds.images, tiny_config()) == "src");
  const auto r = infer(source_model().params, ds.images, "auto", tiny_config());
  CHECK(r.domain == "src");

  auto blank = nn::init_params<float>(tiny_config().network, "src", 1);
  CHECK(kind_of([&] { select_branch(blank, ds.images, tiny_config()); }) == ErrorKind::kMissingDomain);
}

TEST_CASE("collapse probe") {
  const auto ds = domain(3, 1.0, 0.0, 20);
  const double h = mean_prediction_entropy(source_model().params, ds.images, "src", tiny_config());
  CHECK(h >= 0.0);
  CHECK(h <= std::log(5.0) + 1e-12);
}

TEST_CASE("engine errors") {
  const auto& src = source_model().params;
  auto cfg = tiny_config();
  const auto t1 = unlabeled("t1", domain(11, 1.3, 0.2));
  CHECK(kind_of([&] { adapt(src, {t1}, cfg); }) == ErrorKind::kConfig);
  cfg.weights["t1"] = {};
  CHECK(kind_of([&] { adapt(src, {}, cfg); }) == ErrorKind::kInvalidArgument);
  CHECK(kind_of([&] { adapt(src, {t1, t1}, cfg); }) == ErrorKind::kConfig);

  auto untrained = nn::init_params<float>(cfg.network, "src", 1);
  CHECK(kind_of([&] { adapt(untrained, {t1}, cfg); }) == ErrorKind::kUninitializedStatistics);

  const auto ds = domain(3, 1.0, 0.0, 20);
  CHECK(kind_of([&] { infer(src, ds.images, "nope", cfg); }) == ErrorKind::kMissingDomain);
  const auto small = domain(3, 1.0, 0.0, 9);
  CHECK(kind_of([&] { evaluate(src, small, "src", cfg); }) == ErrorKind::kMetric);

  auto bad = cfg;
  bad.crop_height = 6;
  CHECK(kind_of([&] { train_source(bad, ds, "src"); }) == ErrorKind::kConfig);
  bad = cfg;
  bad.network.levels = 7;
  CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::kConfig);
}
