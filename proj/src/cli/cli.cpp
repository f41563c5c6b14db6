#include "sfiqa/cli.hpp"

#include <CLI11.hpp>
#include <fmt/chrono.h>
#include <fmt/format.h>

#include <array>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <functional>
#include <ostream>
#include <sstream>
#include <thread>

#include "sfiqa/checkpoint.hpp"
#include "sfiqa/data.hpp"
#include "sfiqa/engine.hpp"
#include "sfiqa/io.hpp"
#include "sfiqa/metrics.hpp"

namespace sfiqa::cli {

namespace fs = std::filesystem;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kInvalidArgument:
    case ErrorKind::kAlreadyExists:
    case ErrorKind::kMissingDomain:
      return 2;
    case ErrorKind::kData:
    case ErrorKind::kIo:
    case ErrorKind::kSplit:
    case ErrorKind::kCrop:
    case ErrorKind::kShape:
      return 3;
    case ErrorKind::kDomain:
    case ErrorKind::kFit:
    case ErrorKind::kMetric:
    case ErrorKind::kUninitializedStatistics:
    case ErrorKind::kState:
    case ErrorKind::kTraceMismatch:
      return 4;
  }
  return 1;
}

std::string Settings::text(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string Settings::text(const std::string& key) const {
  const auto it = values_.find(key);
  require(it != values_.end() && !it->second.empty(), ErrorKind::kConfig, "missing required key '" + key + "'");
  return it->second;
}

namespace {

double parse_number(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::kConfig, "key '" + key + "' expects a number, got '" + value + "'");
}

}  // namespace

double Settings::number(const std::string& key, double fallback) const {
  return has(key) ? parse_number(key, text(key)) : fallback;
}

int Settings::integer(const std::string& key, int fallback) const {
  if (!has(key)) return fallback;
  const double v = parse_number(key, text(key));
  require(v == std::floor(v) && std::abs(v) < 2e9, ErrorKind::kConfig, "key '" + key + "' expects an integer");
  return static_cast<int>(v);
}

bool Settings::flag(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const auto v = text(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(ErrorKind::kConfig, "key '" + key + "' expects true or false, got '" + v + "'");
}

std::vector<std::string> Settings::list(const std::string& key) const {
  std::vector<std::string> out;
  if (!has(key)) return out;
  std::stringstream in(text(key));
  std::string item;
  while (std::getline(in, item, ','))
    if (auto t = io::trim(item); !t.empty()) out.push_back(t);
  return out;
}

std::vector<double> Settings::numbers(const std::string& key, const std::vector<double>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<double> out;
  for (const auto& item : list(key)) out.push_back(parse_number(key, item));
  return out;
}

namespace {

struct Options {
  std::string command;
  std::string config;
  std::string out;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> overrides;
  std::string domain;
  bool parallel = false;
};

struct Context {
  Options options;
  Settings settings;
  fs::path out_dir;
  std::vector<std::uint64_t> seeds;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;
};

Settings load_settings(const Options& options) {
  std::map<std::string, std::string> values;
  if (!options.config.empty()) {
    require(fs::exists(options.config), ErrorKind::kConfig, "config file '" + options.config + "' does not exist");
    values = io::parse_key_values(io::read_text(options.config));
  }
  for (const auto& o : options.overrides) {
    const auto eq = o.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::kConfig, "override '" + o + "' is not key=value");
    values[io::trim(o.substr(0, eq))] = io::trim(o.substr(eq + 1));
  }
  return Settings(std::move(values));
}

std::string with_seed(std::string text, std::uint64_t seed) {
  const std::string token = "{seed}";
  for (auto pos = text.find(token); pos != std::string::npos; pos = text.find(token, pos))
    text.replace(pos, token.size(), std::to_string(seed));
  return text;
}

RatingScale scale_of(const Settings& s) {
  const int levels = s.integer("scale.levels", 5);
  const double lower = s.number("scale.lower", 1.0);
  const double upper = s.number("scale.upper", 5.0);
  require(levels >= 2 && lower < upper, ErrorKind::kConfig, "scale needs levels >= 2 and lower < upper");
  return RatingScale(lower, upper, levels);
}

losses::AdaptWeights ablation_preset(const std::string& name) {
  // rows of the objective ablation: which terms are switched on
  if (name == "full") return {1.0, 1.0, 0.2};
  if (name == "ent") return {1.0, 0.0, 0.0};
  if (name == "div") return {0.0, 1.0, 0.0};
  if (name == "gau") return {0.0, 0.0, 0.2};
  if (name == "ent+div") return {1.0, 1.0, 0.0};
  if (name == "ent+gau") return {1.0, 0.0, 0.2};
  if (name == "div+gau") return {0.0, 1.0, 0.2};
  if (name == "none") return {0.0, 0.0, 0.0};
  fail(ErrorKind::kConfig, "unknown ablation '" + name + "'");
}

engine::TrainConfig train_config(const Settings& s, std::uint64_t seed) {
  engine::TrainConfig c;
  c.scale = scale_of(s);
  c.sigma_floor = s.number("scale.sigma_floor", kDefaultSigmaFloor);
  c.seed = seed;
  auto& n = c.network;
  n.in_channels = s.integer("network.channels", n.in_channels);
  n.height = s.integer("network.height", n.height);
  n.width = s.integer("network.width", n.width);
  if (s.has("network.block_channels")) {
    n.block_channels.clear();
    for (const double v : s.numbers("network.block_channels", {})) n.block_channels.push_back(static_cast<int>(v));
  }
  n.hidden = s.integer("network.hidden", n.hidden);
  n.levels = c.scale.size();
  n.epsilon = s.number("network.epsilon", n.epsilon);
  n.ema_alpha = s.number("network.ema_alpha", n.ema_alpha);
  c.crop_height = n.height;
  c.crop_width = n.width;
  c.batch_size = s.integer("train.batch_size", c.batch_size);
  c.eval_batch_size = s.integer("train.eval_batch_size", c.eval_batch_size);
  c.max_epochs = s.integer("train.max_epochs", c.max_epochs);
  c.patience = s.integer("train.patience", c.patience);
  c.source_lr = optim::make_lr(nn::Phase::kSourceTrain,
                               s.has("train.lr") ? std::optional(s.number("train.lr", 0.0)) : std::nullopt);
  const auto penalty = s.text("train.mean_penalty", "squared");
  require(penalty == "squared" || penalty == "absolute", ErrorKind::kConfig, "train.mean_penalty: squared|absolute");
  c.mean_penalty = penalty == "squared" ? losses::MeanPenalty::kSquared : losses::MeanPenalty::kAbsolute;
  const auto ratios = s.numbers("train.split", {0.8, 0.1, 0.1});
  require(ratios.size() == 3, ErrorKind::kConfig, "train.split needs three ratios");
  c.split_ratios = {ratios[0], ratios[1], ratios[2]};
  c.adapt_lr = optim::make_lr(nn::Phase::kAdapt,
                              s.has("adapt.lr") ? std::optional(s.number("adapt.lr", 0.0)) : std::nullopt);
  c.adapt_steps = s.integer("adapt.steps", c.adapt_steps);
  c.checkpoint_every = s.integer("adapt.checkpoint_every", c.checkpoint_every);
  const auto policy = s.text("adapt.bn_policy", "ema");
  require(policy == "ema" || policy == "reset", ErrorKind::kConfig, "adapt.bn_policy: ema|reset");
  c.bn_policy = policy == "ema" ? engine::BnStatsPolicy::kEmaFromSource : engine::BnStatsPolicy::kResetThenEstimate;
  return c;
}

/// Dataset described under `prefix`: either `manifest = path` or
/// `synthetic = true` with generator keys. `split` (default `fallback_split`)
/// selects a subset; untagged data is split with the run seed.
data::Dataset load_dataset(const Settings& s, const std::string& prefix, std::uint64_t seed,
                           const engine::TrainConfig& config, const std::string& fallback_split) {
  data::Dataset ds;
  if (s.has(prefix + ".manifest")) {
    std::optional<fs::path> meta;
    if (s.has(prefix + ".meta")) meta = with_seed(s.text(prefix + ".meta"), seed);
    ds = data::load_manifest(with_seed(s.text(prefix + ".manifest"), seed), config.scale, meta);
  } else if (s.flag(prefix + ".synthetic", false)) {
    data::SyntheticDomainSpec spec;
    spec.seed = static_cast<std::uint64_t>(parse_number(prefix + ".seed", with_seed(s.text(prefix + ".seed", "0"), seed)));
    spec.height = config.network.height;
    spec.width = config.network.width;
    spec.channels = config.network.in_channels;
    spec.images_per_content = s.integer(prefix + ".images_per_content", spec.images_per_content);
    spec.label_variance = s.number(prefix + ".label_variance", spec.label_variance);
    spec.shift_a = s.numbers(prefix + ".shift_a", spec.shift_a);
    spec.shift_b = s.numbers(prefix + ".shift_b", spec.shift_b);
    const int count = s.integer(prefix + ".count", 2000);
    require(count >= 1, ErrorKind::kConfig, prefix + ".count must be >= 1");
    ds = data::generate_domain(spec, static_cast<std::size_t>(count), config.scale);
  } else {
    fail(ErrorKind::kConfig, "'" + prefix + "' needs either manifest = <path> or synthetic = true");
  }
  const auto dot = prefix.rfind('.');
  ds.name = s.text(prefix + ".name", dot == std::string::npos ? prefix : prefix.substr(dot + 1));
  const auto split = s.text(prefix + ".split", fallback_split);
  if (split == "all") return ds;
  if (ds.splits.empty()) ds.splits = data::split(ds.size(), ds.groups, config.split_ratios, seed);
  auto sub = ds.subset(data::parse_split(split));
  sub.name = ds.name;
  require(sub.size() > 0, ErrorKind::kData, "'" + prefix + "' has no images in split '" + split + "'");
  return sub;
}

std::string timestamp() {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(
                                                   std::chrono::system_clock::now())));
}

/// The only line of any output that may differ between identical runs.
std::string log_header(const Context& ctx, std::uint64_t seed) {
  std::string h = "# sfiqa " + ctx.options.command + " " + timestamp() + " seed=" + std::to_string(seed);
  for (const auto& [k, v] : ctx.settings.values()) h += " " + k + "=" + v;
  return h + "\n";
}

std::string num(double v) { return io::format_number(v); }

const char* kReportHeader = "dataset,domain,srocc,plcc,rmse,beta1,beta2,beta3,beta4,beta5,n";

std::string report_row(const std::string& dataset, const std::string& domain, const metrics::MetricReport& r) {
  std::string row = dataset + "," + domain + "," + num(r.srocc) + "," + num(r.plcc) + "," + num(r.rmse);
  for (const double b : r.betas) row += "," + num(b);
  return row + "," + std::to_string(r.n);
}

fs::path seed_dir(const Context& ctx, std::uint64_t seed) { return ctx.out_dir / ("seed_" + std::to_string(seed)); }

/// Runs `work` once per seed, optionally on one thread each; results keep
/// seed order and the first failure (in seed order) is rethrown.
template <typename R>
std::vector<R> fan_out(const Context& ctx, const std::function<R(std::uint64_t)>& work) {
  std::vector<R> results(ctx.seeds.size());
  std::vector<std::exception_ptr> errors(ctx.seeds.size());
  auto one = [&](std::size_t i) {
    try {
      results[i] = work(ctx.seeds[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (ctx.options.parallel && ctx.seeds.size() > 1) {
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < ctx.seeds.size(); ++i) threads.emplace_back(one, i);
    for (auto& t : threads) t.join();
  } else {
    for (std::size_t i = 0; i < ctx.seeds.size(); ++i) one(i);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

void write_adapt_logs(const Context& ctx, const fs::path& dir, std::uint64_t seed, const engine::RunLog& log) {
  std::string csv = log_header(ctx, seed) + "step,domain,l_ent,l_div,l_gau,total\n";
  for (const auto& r : log.adapt_steps)
    csv += std::to_string(r.step) + "," + r.domain + "," + num(r.entropy) + "," + num(r.diversity) + "," +
           num(r.gaussian) + "," + num(r.total) + "\n";
  io::write_text(dir / "runlog.csv", csv);
  std::string ck = "step,loss,domains,selected\n";
  for (std::size_t i = 0; i < log.checkpoints.size(); ++i) {
    const auto& c = log.checkpoints[i];
    const bool selected = std::find(log.selected.begin(), log.selected.end(), i) != log.selected.end();
    ck += std::to_string(c.step) + "," + num(c.loss) + "," + c.domains + "," + (selected ? "1" : "0") + "\n";
  }
  io::write_text(dir / "checkpoints.csv", ck);
}

int cmd_train_source(const Context& ctx) {
  const auto& s = ctx.settings;
  struct Outcome {
    double best_val = 0.0;
    int best_epoch = 0;
    std::optional<metrics::MetricReport> test;
    std::string dataset;
    std::string domain;
  };
  const auto outcomes = fan_out<Outcome>(ctx, [&](std::uint64_t seed) {
    const auto config = train_config(s, seed);
    auto ds = load_dataset(s, "source", seed, config, "all");
    require(ds.labeled(), ErrorKind::kData, "source data must carry labels");
    if (ds.splits.empty()) ds.splits = data::split(ds.size(), ds.groups, config.split_ratios, seed);
    const auto name = s.text("source.domain", "source");
    const auto result = engine::train_source(config, ds, name);
    const auto dir = seed_dir(ctx, seed);
    save_checkpoint(dir / "model.ckpt", result.params);
    std::string csv = log_header(ctx, seed) + "step,domain,l_ce,l_mean,total\n";
    for (const auto& r : result.log.source_steps)
      csv += std::to_string(r.step) + "," + name + "," + num(r.cross_entropy) + "," + num(r.mean_penalty) + "," +
             num(r.total) + "\n";
    io::write_text(dir / "runlog.csv", csv);
    std::string epochs = "epoch,train_loss,val_srocc\n";
    for (const auto& e : result.log.epochs)
      epochs += std::to_string(e.epoch) + "," + num(e.train_loss) + "," + num(e.val_srocc) + "\n";
    io::write_text(dir / "epochs.csv", epochs);
    Outcome o{result.best_val_srocc, result.best_epoch, std::nullopt, ds.name, name};
    const auto test = ds.subset(data::Split::kTest);
    if (test.size() >= 10) {
      o.test = engine::evaluate(result.params, test, name, config).report;
      io::write_text(dir / "report.csv", std::string(kReportHeader) + "\n" + report_row(ds.name, name, *o.test) + "\n");
    }
    return o;
  });
  std::vector<metrics::MetricReport> tests;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    *ctx.out << "seed " << ctx.seeds[i] << ": best val srocc " << num(o.best_val) << " (epoch " << o.best_epoch
             << ")";
    if (o.test) {
      *ctx.out << ", test srocc " << num(o.test->srocc) << ", plcc " << num(o.test->plcc);
      tests.push_back(*o.test);
    }
    *ctx.out << "\n";
  }
  if (tests.size() == outcomes.size() && !tests.empty()) {
    const auto mean = metrics::mean_report(tests);
    io::write_text(ctx.out_dir / "report.csv",
                   std::string(kReportHeader) + "\n" + report_row(outcomes[0].dataset, outcomes[0].domain, mean) + "\n");
    *ctx.out << "mean over " << tests.size() << " seed(s): srocc " << num(mean.srocc) << ", plcc " << num(mean.plcc)
             << "\n";
  }
  return 0;
}

/// Adaptation configs may not mention source data at all.
void guard_source_free(const Settings& s) {
  for (const auto& [key, value] : s.values()) {
    const bool source_section = key.rfind("source.", 0) == 0;
    const auto last = key.substr(key.rfind('.') == std::string::npos ? 0 : key.rfind('.') + 1);
    require(!source_section && last != "source_manifest", ErrorKind::kConfig,
            "adaptation is source-free; key '" + key + "' refers to source data and is not allowed");
  }
}

int cmd_adapt(const Context& ctx, bool continual) {
  const auto& s = ctx.settings;
  guard_source_free(s);
  const auto names = s.list("adapt.targets");
  require(!names.empty(), ErrorKind::kConfig, "adapt.targets lists no target domains");
  const auto preset = s.text("adapt.ablation", "full");
  fan_out<int>(ctx, [&](std::uint64_t seed) {
    const auto loaded = load_checkpoint(with_seed(s.text("adapt.checkpoint"), seed));
    auto config = train_config(s, seed);
    config.network = loaded.params.spec;
    config.crop_height = config.network.height;
    config.crop_width = config.network.width;
    require(config.network.levels == config.scale.size(), ErrorKind::kConfig,
            "checkpoint predicts " + std::to_string(config.network.levels) + " levels but the scale has " +
                std::to_string(config.scale.size()));
    std::vector<data::UnlabeledDomain> targets;
    for (const auto& name : names) {
      const auto prefix = "target." + name;
      auto ds = load_dataset(s, prefix, seed, config, "all");
      targets.push_back({name, std::move(ds.images)});
      auto w = ablation_preset(s.text(prefix + ".ablation", preset));
      w.lambda_ent = s.number(prefix + ".lambda_ent", w.lambda_ent);
      w.lambda_div = s.number(prefix + ".lambda_div", w.lambda_div);
      w.lambda_gau = s.number(prefix + ".lambda_gau", w.lambda_gau);
      require(w.lambda_ent >= 0 && w.lambda_div >= 0 && w.lambda_gau >= 0, ErrorKind::kConfig,
              "loss weights must be non-negative");
      config.weights[name] = w;
    }
    const auto result = continual ? engine::adapt_continual(loaded.params, targets, config)
                                  : engine::adapt(loaded.params, targets, config);
    const auto dir = seed_dir(ctx, seed);
    save_checkpoint(dir / "model.ckpt", result.params);
    write_adapt_logs(ctx, dir, seed, result.log);
    return 0;
  });
  for (const auto seed : ctx.seeds)
    *ctx.out << "seed " << seed << ": adapted " << names.size() << " target(s) -> "
             << (seed_dir(ctx, seed) / "model.ckpt").string() << "\n";
  return 0;
}

int cmd_evaluate(const Context& ctx) {
  const auto& s = ctx.settings;
  const auto names = s.list("evaluate.datasets");
  require(!names.empty(), ErrorKind::kConfig, "evaluate.datasets lists no datasets");
  const auto requested = ctx.options.domain.empty() ? s.text("evaluate.domain", "") : ctx.options.domain;
  const bool automatic = requested == "auto";
  struct Row {
    std::string dataset;
    std::string domain;
    metrics::MetricReport report;
  };
  const auto per_seed = fan_out<std::vector<Row>>(ctx, [&](std::uint64_t seed) {
    const auto loaded = load_checkpoint(with_seed(s.text("evaluate.checkpoint"), seed));
    auto config = train_config(s, seed);
    config.network = loaded.params.spec;
    config.crop_height = config.network.height;
    config.crop_width = config.network.width;
    const auto domain = requested.empty() ? loaded.params.source_domain : requested;
    require(automatic || loaded.params.has_branch(domain), ErrorKind::kMissingDomain,
            "checkpoint has no branch '" + domain + "'");
    std::vector<Row> rows;
    std::string csv = std::string(kReportHeader) + (automatic ? ",chosen_branch" : "") + "\n";
    for (const auto& name : names) {
      const auto ds = load_dataset(s, "dataset." + name, seed, config, "test");
      const auto ev = engine::evaluate(loaded.params, ds, domain, config);
      rows.push_back({ds.name, ev.domain, ev.report});
      csv += report_row(ds.name, automatic ? "auto" : ev.domain, ev.report) + (automatic ? "," + ev.domain : "") + "\n";
    }
    io::write_text(seed_dir(ctx, seed) / "report.csv", csv);
    return rows;
  });
  std::string csv = std::string(kReportHeader) + (automatic ? ",chosen_branch" : "") + "\n";
  for (std::size_t d = 0; d < names.size(); ++d) {
    std::vector<metrics::MetricReport> reports;
    std::string chosen = per_seed[0][d].domain;
    for (const auto& rows : per_seed) {
      reports.push_back(rows[d].report);
      if (rows[d].domain != chosen) chosen = "mixed";
    }
    const auto mean = metrics::mean_report(reports);
    const auto& first = per_seed[0][d];
    csv += report_row(first.dataset, automatic ? "auto" : first.domain, mean) + (automatic ? "," + chosen : "") + "\n";
    *ctx.out << first.dataset << " [" << chosen << "]: srocc " << num(mean.srocc) << ", plcc " << num(mean.plcc)
             << ", rmse " << num(mean.rmse) << "\n";
  }
  io::write_text(ctx.out_dir / "report.csv", csv);
  return 0;
}

std::vector<metrics::RaterHistogram> histograms(const Settings& s, const std::string& section, std::uint64_t seed,
                                                const RatingScale& scale) {
  if (s.has(section + ".histograms")) {
    auto h = data::load_histograms(with_seed(s.text(section + ".histograms"), seed));
    for (const auto& x : h)
      require(static_cast<int>(x.counts.size()) == scale.size(), ErrorKind::kData,
              "histogram width does not match the scale's level count");
    return h;
  }
  return data::synthesize_rater_histograms(static_cast<std::size_t>(s.integer(section + ".count", 500)),
                                           s.integer(section + ".raters", 50), seed, scale);
}

// MOS segments of the goodness-of-fit table and of the clustering figure.
constexpr std::array<double, 8> kRangeEdges{1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5};

std::string range_label(std::size_t r) { return fmt::format("{:.1f}-{:.1f}", kRangeEdges[r], kRangeEdges[r + 1]); }

/// Index of the MOS segment, or -1 outside [1, 4.5].
int range_of(double mos) {
  if (mos < kRangeEdges.front() || mos > kRangeEdges.back()) return -1;
  for (std::size_t r = 0; r + 1 < kRangeEdges.size(); ++r)
    if (mos < kRangeEdges[r + 1]) return static_cast<int>(r);
  return static_cast<int>(kRangeEdges.size()) - 2;
}

int cmd_gof(const Context& ctx) {
  const auto& s = ctx.settings;
  const auto scale = scale_of(s);
  const auto seed = ctx.seeds.front();
  const auto hists = histograms(s, "gof", seed, scale);
  constexpr std::size_t kRanges = kRangeEdges.size() - 1;
  const std::array<metrics::Family, 3> families{metrics::Family::kGaussian, metrics::Family::kGamma,
                                                metrics::Family::kWeibull};
  std::array<std::array<double, kRanges>, 3> sum{};
  std::array<std::array<int, kRanges>, 3> fitted{};
  std::array<int, kRanges> members{};
  std::size_t outside = 0, failed = 0;
  for (const auto& h : hists) {
    const int r = range_of(h.mean_score(scale));
    if (r < 0) {
      ++outside;
      continue;
    }
    ++members[static_cast<std::size_t>(r)];
    for (std::size_t f = 0; f < families.size(); ++f) {
      try {
        sum[f][static_cast<std::size_t>(r)] +=
            metrics::gof_fit(h, families[f], scale, s.number("scale.sigma_floor", kDefaultSigmaFloor)).rmse;
        ++fitted[f][static_cast<std::size_t>(r)];
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kFit) throw;
        ++failed;
      }
    }
  }
  const int included = static_cast<int>(hists.size() - outside);
  require(included > 0, ErrorKind::kData, "no histogram has a mean score inside the tabulated ranges");
  std::string csv = "family";
  for (std::size_t r = 0; r < kRanges; ++r) csv += "," + range_label(r);
  csv += ",weighted_avg\n";
  for (std::size_t f = 0; f < families.size(); ++f) {
    csv += metrics::to_string(families[f]);
    double weighted = 0.0, weight = 0.0;
    for (std::size_t r = 0; r < kRanges; ++r) {
      if (fitted[f][r] == 0) {
        csv += ",";
        continue;
      }
      const double mean = sum[f][r] / fitted[f][r];
      csv += "," + num(mean);
      weighted += mean * members[r];
      weight += members[r];
    }
    csv += "," + num(weighted / weight) + "\n";
  }
  csv += "share_percent";
  for (std::size_t r = 0; r < kRanges; ++r) csv += "," + num(100.0 * members[r] / included);
  csv += ",100\n";
  io::write_text(ctx.out_dir / "gof.csv", csv);
  *ctx.out << "fitted " << included << " histogram(s)";
  if (outside) *ctx.out << ", " << outside << " outside the tabulated MOS ranges";
  if (failed) *ctx.out << ", " << failed << " degenerate fit(s) skipped";
  *ctx.out << "\n";
  return 0;
}

int cmd_cluster(const Context& ctx) {
  const auto& s = ctx.settings;
  const auto scale = scale_of(s);
  const auto seed = ctx.seeds.front();
  const auto hists = histograms(s, "cluster", seed, scale);
  const int k = s.integer("cluster.k", 5);
  require(k >= 1, ErrorKind::kConfig, "cluster.k must be >= 1");
  const bool by_range = s.flag("cluster.by_range", true);
  require(static_cast<std::size_t>(k) <= hists.size(), ErrorKind::kInvalidArgument,
          "k = " + std::to_string(k) + " exceeds the " + std::to_string(hists.size()) + " histogram(s)");
  std::map<std::string, std::vector<std::vector<double>>> groups;
  for (const auto& h : hists) {
    if (!by_range) {
      groups["all"].push_back(h.frequencies());
      continue;
    }
    if (const int r = range_of(h.mean_score(scale)); r >= 0)
      groups[range_label(static_cast<std::size_t>(r))].push_back(h.frequencies());
  }
  std::string csv = "range,cluster,size,percent";
  for (int c = 1; c <= scale.size(); ++c) csv += ",p" + std::to_string(c);
  csv += "\n";
  int clustered = 0;
  for (const auto& [label, points] : groups) {
    if (points.size() < static_cast<std::size_t>(k)) {
      *ctx.err << "note: range " << label << " has " << points.size() << " histogram(s), fewer than k; skipped\n";
      continue;
    }
    const auto result = metrics::cluster_distributions(points, k, seed);
    ++clustered;
    for (int c = 0; c < k; ++c) {
      const auto size = std::count(result.assignments.begin(), result.assignments.end(), c);
      csv += label + "," + std::to_string(c + 1) + "," + std::to_string(size) + "," +
             num(result.percentages[static_cast<std::size_t>(c)]);
      for (const double p : result.centroids[static_cast<std::size_t>(c)]) csv += "," + num(p);
      csv += "\n";
    }
  }
  require(clustered > 0, ErrorKind::kInvalidArgument, "no MOS range holds at least k histograms");
  io::write_text(ctx.out_dir / "cluster.csv", csv);
  *ctx.out << "clustered " << clustered << " group(s) with k = " << k << "\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Source-free domain adaptation for blind quality assessment"};
  app.require_subcommand(1);
  Options options;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", options.config, "Configuration file (key = value, [sections])");
    sub->add_option("--out", options.out, "Output directory");
    sub->add_option("--seed", options.seeds, "Run seed; repeat for a seed list");
    sub->add_option("--set", options.overrides, "Override a config key: section.key=value (repeatable)");
    sub->add_flag("--parallel", options.parallel, "Run the seed list concurrently");
  };
  const std::array<std::pair<const char*, const char*>, 6> commands{{
      {"train-source", "Train the source model on labeled data"},
      {"adapt", "Adapt to unlabeled target domains simultaneously"},
      {"adapt-continual", "Adapt to unlabeled target domains one after another"},
      {"evaluate", "Report SROCC/PLCC/RMSE of a checkpoint"},
      {"gof", "Goodness-of-fit table of rater histograms"},
      {"cluster", "k-means clusters of rater histograms"},
  }};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    if (std::string(name) == "evaluate") sub->add_option("--domain", options.domain, "Branch to use, or auto");
    sub->callback([&options, sub] { options.command = sub->get_name(); });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  try {
    Context ctx;
    ctx.options = options;
    ctx.settings = load_settings(options);
    ctx.out = &out;
    ctx.err = &err;
    const auto out_dir = options.out.empty() ? ctx.settings.text("run.out", "") : options.out;
    require(!out_dir.empty(), ErrorKind::kConfig, "no output directory (use --out or run.out)");
    ctx.out_dir = out_dir;
    ctx.seeds = options.seeds;
    if (ctx.seeds.empty())
      for (const double v : ctx.settings.numbers("run.seeds", {0.0})) ctx.seeds.push_back(static_cast<std::uint64_t>(v));
    std::error_code ec;
    fs::create_directories(ctx.out_dir, ec);
    require(!ec, ErrorKind::kIo, "cannot create output directory '" + out_dir + "': " + ec.message());
    const auto& cmd = options.command;
    if (cmd == "train-source") return cmd_train_source(ctx);
    if (cmd == "adapt") return cmd_adapt(ctx, false);
    if (cmd == "adapt-continual") return cmd_adapt(ctx, true);
    if (cmd == "evaluate") return cmd_evaluate(ctx);
    if (cmd == "gof") return cmd_gof(ctx);
    return cmd_cluster(ctx);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"sfiqa"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace sfiqa::cli
