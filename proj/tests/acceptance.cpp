// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--strict] [--report FILE]
//
// Exits 2 if a criterion could not be evaluated (it threw), and 1 with
// --strict when any criterion fails. The lines are also written to FILE.

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "sfiqa/checkpoint.hpp"
#include "sfiqa/data.hpp"
#include "sfiqa/engine.hpp"
#include "sfiqa/error.hpp"
#include "sfiqa/metrics.hpp"
#include "sfiqa/optim.hpp"

using namespace sfiqa;

namespace {

const RatingScale kScale = RatingScale::standard();
const double kHalfLn5 = 0.5 * std::log(5.0);

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;
int errors = 0;
std::string report;

void criterion(const std::string& name, double time_limit, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("threw: ") + e.what()};
    ++errors;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (time_limit > 0 && secs >= time_limit) {
    o.pass = false;
    o.detail += fmt::format("; over the {:.0f} s limit", time_limit);
  }
  if (!o.pass) ++failures;
  const auto line = fmt::format("{} {}: {} ({:.1f} s)\n", o.pass ? "PASS" : "FAIL", name, o.detail, secs);
  report += line;
  fmt::print("{}", line);
  std::fflush(stdout);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Synthetic domain-shift benchmark shared by several criteria.

constexpr int kSeeds = 5;
constexpr std::size_t kDomainSize = 2000;

/// Per-seed shift with a common direction across channels, so every seed
/// moves the target well away from the source statistics.
data::SyntheticDomainSpec target_spec(std::uint64_t seed) {
  data::SyntheticDomainSpec t;
  t.seed = 200 + seed;
  Rng rng(stable_hash("shift", seed));
  const double dir = (rng.next() & 1) ? 1.0 : -1.0;
  for (std::size_t c = 0; c < 3; ++c) {
    t.shift_a[c] = 1.0 + dir * rng.uniform(0.2, 0.4);
    t.shift_b[c] = dir * rng.uniform(0.15, 0.3);
  }
  return t;
}

struct SeedRun {
  std::uint64_t seed = 0;
  engine::TrainConfig config;
  nn::ModelParams<float> source;
  data::Dataset target_test;
  data::UnlabeledDomain target_train;
  double no_adapt = 0.0;
  double full = 0.0;
  bool frozen = false;
};

std::vector<SeedRun> runs;

double adapt_and_score(SeedRun& run, const losses::AdaptWeights& w, bool* frozen = nullptr) {
  auto cfg = run.config;
  cfg.weights[run.target_train.name] = w;
  const auto adapted = engine::adapt(run.source, {run.target_train}, cfg);
  if (frozen) *frozen = params_hash(adapted.params, {run.target_train.name}) == params_hash(run.source);
  return engine::evaluate(adapted.params, run.target_test, run.target_train.name, cfg).report.srocc;
}

Outcome benchmark() {
  std::vector<double> gains;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    SeedRun run;
    run.seed = seed;
    run.config.seed = seed;
    data::SyntheticDomainSpec s;
    s.seed = 100 + seed;
    run.source = engine::train_source(run.config, data::generate_domain(s, kDomainSize, kScale), "source").params;
    auto target = data::generate_domain(target_spec(seed), kDomainSize, kScale);
    target.splits = data::split(target.size(), target.groups, run.config.split_ratios, seed);
    run.target_test = target.subset(data::Split::kTest);
    run.target_train = data::strip_labels(target, data::Split::kTrain);
    run.target_train.name = "target";
    run.no_adapt = engine::evaluate(run.source, run.target_test, "source", run.config).report.srocc;
    run.full = adapt_and_score(run, {1.0, 1.0, 0.2}, &run.frozen);
    gains.push_back(run.full - run.no_adapt);
    per_seed += fmt::format("{}{:.3f}->{:.3f}", seed == 1 ? "" : ", ", run.no_adapt, run.full);
    runs.push_back(std::move(run));
  }
  const double med = median(gains);
  const double worst = *std::min_element(gains.begin(), gains.end());
  return {med >= 0.05 && worst >= -0.02,
          fmt::format("median gain {:+.4f} (>= 0.05), worst {:+.4f} (>= -0.02); NoAdapt->adapted {}", med, worst,
                      per_seed)};
}

Outcome ablation() {
  if (runs.size() != kSeeds) return {false, "benchmark runs unavailable"};
  const std::vector<std::pair<std::string, losses::AdaptWeights>> singles{
      {"ent", {1.0, 0.0, 0.0}}, {"div", {0.0, 1.0, 0.0}}, {"gau", {0.0, 0.0, 0.2}}};
  std::vector<double> full;
  for (const auto& r : runs) full.push_back(r.full);
  const double full_med = median(full);
  bool pass = true;
  std::string detail = fmt::format("median SROCC full {:.4f}", full_med);
  for (const auto& [name, w] : singles) {
    std::vector<double> scores;
    for (auto& r : runs) scores.push_back(adapt_and_score(r, w));
    const double med = median(scores);
    pass = pass && full_med >= med;
    detail += fmt::format(", {} {:.4f}", name, med);
  }
  return {pass, detail};
}

Outcome collapse() {
  if (runs.empty()) return {false, "benchmark runs unavailable"};
  auto& run = runs.front();
  auto cfg = run.config;
  cfg.adapt_lr = 1e-2;
  cfg.adapt_steps = 200;
  std::map<double, double> h;
  for (const double div : {0.0, 1.0}) {
    cfg.weights = {{"target", {1.0, div, 0.2}}};
    const auto adapted = engine::adapt(run.source, {run.target_train}, cfg);
    h[div] = engine::mean_prediction_entropy(adapted.params, run.target_train.images, "target", cfg);
  }
  return {h[0.0] < kHalfLn5 && h[1.0] > kHalfLn5,
          fmt::format("batch-mean entropy {:.4f} without diversity, {:.4f} with (threshold {:.4f})", h[0.0], h[1.0],
                      kHalfLn5)};
}

// Three targets that differ clearly from the source and from each other: dark
// and flat, bright and contrasty, and a colour cast.
std::vector<data::SyntheticDomainSpec> continual_specs() {
  std::vector<data::SyntheticDomainSpec> specs(3);
  specs[0].shift_a.assign(3, 0.6);
  specs[0].shift_b.assign(3, -0.3);
  specs[1].shift_a.assign(3, 1.4);
  specs[1].shift_b.assign(3, 0.3);
  specs[2].shift_b = {0.3, -0.3, 0.0};
  for (std::size_t i = 0; i < 3; ++i) specs[i].seed = 301 + i;
  return specs;
}

Outcome continual() {
  if (runs.empty()) return {false, "benchmark runs unavailable"};
  const auto& base = runs.front();
  auto cfg = base.config;
  cfg.adapt_steps = 300;
  std::vector<data::UnlabeledDomain> train;
  std::vector<data::Dataset> test;
  const auto specs = continual_specs();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto ds = data::generate_domain(specs[i], 600, kScale);
    ds.splits = data::split(ds.size(), ds.groups, cfg.split_ratios, 1);
    train.push_back(data::strip_labels(ds, data::Split::kTrain));
    train.back().name = "t" + std::to_string(i + 1);
    test.push_back(ds.subset(data::Split::kTest));
    cfg.weights[train.back().name] = {};
  }
  auto model = base.source;
  engine::Evaluation first;
  for (std::size_t i = 0; i < train.size(); ++i) {
    model = engine::adapt(model, {train[i]}, cfg).params;
    if (i == 0) first = engine::evaluate(model, test[0], "t1", cfg);
  }
  const auto again = engine::evaluate(model, test[0], "t1", cfg);
  const bool identical = again.scores == first.scores && again.report.srocc == first.report.srocc &&
                         again.report.plcc == first.report.plcc && again.report.rmse == first.report.rmse;
  const bool same_as_continual = serialize_params(engine::adapt_continual(base.source, train, cfg).params) ==
                                 serialize_params(model);

  // task-agnostic selection, one image at a time, over every domain's test images
  data::SyntheticDomainSpec source_spec;
  source_spec.seed = 400;
  std::vector<std::pair<std::string, std::vector<data::Image>>> pools{
      {"source", data::generate_domain(source_spec, 60, kScale).images}};
  for (std::size_t i = 0; i < test.size(); ++i) pools.push_back({train[i].name, test[i].images});
  int correct = 0, total = 0;
  for (const auto& [name, images] : pools)
    for (const auto& img : images) {
      correct += engine::select_branch(model, {img}, cfg) == name;
      ++total;
    }
  const double accuracy = static_cast<double>(correct) / total;
  return {identical && same_as_continual && accuracy >= 0.9,
          fmt::format("t1 re-evaluation bit-identical: {} (SROCC {:.4f}); sequential == adapt_continual: {}; "
                      "auto selection {}/{} = {:.3f} (>= 0.9)",
                      identical ? "yes" : "no", again.report.srocc, same_as_continual ? "yes" : "no", correct, total,
                      accuracy)};
}

Outcome freeze() {
  if (runs.size() != kSeeds) return {false, "benchmark runs unavailable"};
  int ok = 0;
  for (const auto& r : runs) ok += r.frozen;
  // two targets at once leave the source branch and the other new branch alone too
  auto& run = runs.front();
  auto cfg = run.config;
  cfg.adapt_steps = 100;
  auto second = run.target_train;
  second.name = "other";
  std::reverse(second.images.begin(), second.images.end());
  cfg.weights = {{"target", {}}, {"other", {}}};
  const auto pair = engine::adapt(run.source, {run.target_train, second}, cfg);
  auto after_first = engine::adapt(run.source, {run.target_train}, cfg).params;
  cfg.weights = {{"other", {}}};
  const auto chained = engine::adapt(after_first, {second}, cfg).params;
  const bool pair_ok = params_hash(pair.params, {"target", "other"}) == params_hash(run.source);
  const bool chain_ok = params_hash(chained, {"other"}) == params_hash(after_first);
  return {ok == kSeeds && pair_ok && chain_ok,
          fmt::format("{}/{} benchmark seeds, two-target run {}, earlier branch under later adaptation {}", ok, kSeeds,
                      pair_ok ? "equal" : "changed", chain_ok ? "equal" : "changed")};
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  const auto net = gradcheck::network_suite(100);
  const auto loss = gradcheck::loss_suite(100);
  const bool pass = net.passed(1e-4) && loss.worst_tensor <= 1e-4 && loss.worst_element <= 1e-4;
  return {pass, fmt::format("network: tensor-wise {:.2e}, element-wise {:.2e}, {} coords, {} kinks skipped; "
                            "losses: tensor-wise {:.2e}, element-wise {:.2e} (tol 1e-4, 100 instances each)",
                            net.tensor_worst, net.worst, net.checked, net.kinks, loss.worst_tensor,
                            loss.worst_element)};
}

Outcome distributions() {
  Rng rng(11);
  // simplex property over random labels, including degenerate variances
  double simplex_err = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const QualityLabel l{rng.uniform(-1.0, 7.0), rng.index(10) == 0 ? 0.0 : rng.uniform(0.0, 4.0)};
    const auto q = discretize(l, kScale);
    double sum = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
      sum += q[k];
      simplex_err = std::max(simplex_err, -q[k]);
    }
    simplex_err = std::max(simplex_err, std::abs(sum - 1.0));
  }
  // round-trip bias over mu in [2, 4], sigma in [0.3, 0.7]
  double bias = 0.0, bias_mu = 0.0, bias_sigma = 0.0;
  for (int i = 0; i <= 200; ++i)
    for (int j = 0; j <= 40; ++j) {
      const double mu = 2.0 + 0.01 * i, sigma = 0.3 + 0.01 * j;
      const double b = std::abs(dist_mean(discretize({mu, sigma * sigma}, kScale), kScale) - mu);
      if (b > bias) {
        bias = b;
        bias_mu = mu;
        bias_sigma = sigma;
      }
    }
  // bounds and the trivial cases that attain them
  const double ln5 = std::log(5.0);
  bool in_bounds = true;
  double gau_gap = 1e300;
  for (int i = 0; i < 2000; ++i) {
    losses::Logits z(1 + static_cast<int>(rng.index(8)), 5);
    const double s = rng.uniform(0.1, 20.0);
    for (auto& v : z.values) v = s * rng.normal();
    const double e = losses::entropy_loss(z).value, d = losses::diversity_loss(z).value;
    in_bounds = in_bounds && e >= 0 && e <= ln5 + 1e-12 && d >= 0 && d <= ln5 + 1e-12;
    for (int b = 0; b < z.rows; ++b) {
      losses::Logits row(1, 5);
      std::copy(z.row(b).begin(), z.row(b).end(), row.values.begin());
      const auto p = nn::softmax(row);
      const auto q = pseudo_distribution(p.row(0), kScale);
      gau_gap = std::min(gau_gap, losses::gaussian_reg_loss(row, kScale).value - entropy(q.probs()));
    }
  }
  losses::Logits one_hot(4, 5), uniform(4, 5), spread(5, 5);
  for (int b = 0; b < 4; ++b) one_hot(b, 2) = 60.0;
  for (int b = 0; b < 5; ++b) spread(b, b) = 60.0;
  const bool trivial = losses::entropy_loss(one_hot).value <= 1e-9 &&
                       std::abs(losses::entropy_loss(uniform).value - ln5) <= 1e-12 &&
                       losses::diversity_loss(one_hot).value <= 1e-9 &&
                       std::abs(losses::diversity_loss(spread).value - ln5) <= 1e-9 &&
                       std::abs(losses::diversity_loss(uniform).value - ln5) <= 1e-12;
  const bool pass = simplex_err <= 1e-9 && bias <= 0.05 && in_bounds && trivial && gau_gap >= -1e-12;
  return {pass, fmt::format("simplex error {:.1e}; round-trip bias max {:.4f} at mu {:.2f}, sigma {:.2f} (<= 0.05); "
                            "entropy/diversity bounds {}, trivial cases {}; min gaussian_reg - H(pseudo) {:.2e}",
                            simplex_err, bias, bias_mu, bias_sigma, in_bounds ? "hold" : "violated",
                            trivial ? "attained" : "missed", gau_gap)};
}

Outcome goodness_of_fit() {
  const auto hists = data::synthesize_rater_histograms(500, 50, 2024, kScale);
  int wins = 0;
  for (const auto& h : hists) {
    const double g = metrics::gof_fit(h, metrics::Family::kGaussian, kScale).rmse;
    bool best = true;
    for (const auto f : {metrics::Family::kGamma, metrics::Family::kWeibull}) {
      try {
        best = best && g <= metrics::gof_fit(h, f, kScale).rmse;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kFit) throw;
      }
    }
    wins += best;
  }
  const double rate = wins / 500.0;
  return {rate >= 0.8, fmt::format("Gaussian lowest RMSE on {}/500 histograms = {:.1f}% (>= 80%)", wins, 100 * rate)};
}

Outcome oracles() {
  Rng rng(5);
  double srocc_gap = 0.0;
  int vectors = 0;
  while (vectors < 1000) {
    const std::size_t n = 10 + rng.index(190);
    const int levels = 2 + static_cast<int>(rng.index(30));  // few levels, many ties
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<double>(rng.index(static_cast<std::uint64_t>(levels)));
      b[i] = rng.index(3) ? a[i] + rng.normal() : static_cast<double>(rng.index(static_cast<std::uint64_t>(levels)));
    }
    if (std::all_of(a.begin(), a.end(), [&](double v) { return v == a[0]; })) continue;
    srocc_gap =
        std::max(srocc_gap, std::abs(metrics::srocc(a, b) - static_cast<double>(oracle::spearman(a, b))));
    ++vectors;
  }

  double adam_gap = 0.0;
  for (const double lr : {optim::kSourceLearningRate, optim::kAdaptLearningRate, 1e-2}) {
    auto p = nn::init_params<double>(gradcheck::small_spec(3, 8, {4, 6}, 8), "s", 9);
    const auto mask = nn::freeze_mask(p, nn::Phase::kSourceTrain, "s");
    auto state = optim::AdamState::for_mask(p, mask, {lr});
    std::map<nn::ParamId, oracle::Adam> ref;
    std::map<nn::ParamId, std::vector<oracle::Real>> x;
    for (const auto& id : mask) {
      const auto v = nn::param_view(p, id);
      x[id] = {v.begin(), v.end()};
      ref.emplace(id, oracle::Adam(v.size(), lr));
    }
    for (int step = 0; step < 10; ++step) {
      nn::GradientSet<double> g;
      for (const auto& id : mask) {
        std::vector<double> v(nn::param_view(p, id).size());
        for (auto& e : v) e = rng.normal() * std::pow(10.0, rng.uniform(-3, 1));
        g[id] = v;
      }
      optim::adam_step(p, g, mask, state);
      for (const auto& id : mask) ref.at(id).step(x[id], {g.at(id).begin(), g.at(id).end()});
    }
    for (const auto& id : mask) {
      const auto v = nn::param_view(p, id);
      for (std::size_t i = 0; i < v.size(); ++i)
        adam_gap = std::max(adam_gap, std::abs(v[i] - static_cast<double>(x[id][i])));
    }
  }
  return {srocc_gap <= 1e-12 && adam_gap <= 1e-10,
          fmt::format("SROCC vs rank-then-Pearson max gap {:.1e} over 1000 tied vectors (<= 1e-12); Adam vs "
                      "extended precision max gap {:.1e} after 10 steps (<= 1e-10)",
                      srocc_gap, adam_gap)};
}

}  // namespace

int main(int argc, char** argv) {
  bool strict = false;
  std::string report_path;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--strict") {
      strict = true;
    } else if (arg == "--report" && i + 1 < argc) {
      report_path = argv[++i];
    } else {
      fmt::print(stderr, "usage: acceptance [--strict] [--report FILE]\n");
      return 2;
    }
  }
  criterion("gradient suite", 60, gradients);
  criterion("distribution suite", 0, distributions);
  criterion("oracle equivalence", 0, oracles);
  criterion("goodness-of-fit ranking", 0, goodness_of_fit);
  criterion("domain-shift benchmark", 600, benchmark);
  criterion("trivial-solution demonstration", 120, collapse);
  criterion("ablation", 0, ablation);
  criterion("continual adaptation", 0, continual);
  criterion("freeze and isolation", 0, freeze);
  const auto summary = fmt::format("{} of 9 criteria failed\n", failures);
  report += summary;
  fmt::print("{}", summary);
  if (!report_path.empty()) std::ofstream(report_path) << report;
  if (errors > 0) return 2;
  return strict && failures > 0 ? 1 : 0;
}
