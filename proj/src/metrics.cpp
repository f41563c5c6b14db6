#include "sfiqa/metrics.hpp"

#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include "sfiqa/error.hpp"
#include "sfiqa/rng.hpp"

namespace sfiqa::metrics {

namespace {

void require_pair(std::span<const double> a, std::span<const double> b, std::size_t min_n) {
  require(a.size() == b.size(), ErrorKind::kMetric, "prediction and ground-truth lengths differ");
  require(a.size() >= min_n, ErrorKind::kMetric, "need at least " + std::to_string(min_n) + " samples");
  for (std::size_t i = 0; i < a.size(); ++i)
    require(std::isfinite(a[i]) && std::isfinite(b[i]), ErrorKind::kMetric, "non-finite score");
}

bool is_constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

using Point = std::array<double, 5>;

/// Nelder-Mead minimisation; stops when the spread of simplex values drops
/// below rel_tol relative to the best value or after max_iter iterations.
template <std::size_t n>
std::array<double, n> nelder_mead(const std::function<double(const std::array<double, n>&)>& f,
                                  std::array<double, n> start, const std::array<double, n>& step, double rel_tol,
                                  int max_iter) {
  using Point = std::array<double, n>;
  std::array<Point, n + 1> simplex;
  std::array<double, n + 1> values;
  simplex[0] = start;
  for (std::size_t i = 0; i < n; ++i) {
    simplex[i + 1] = start;
    simplex[i + 1][i] += step[i];
  }
  for (std::size_t i = 0; i <= n; ++i) values[i] = f(simplex[i]);
  std::array<std::size_t, n + 1> order;
  for (int iter = 0; iter < max_iter; ++iter) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    const double best = values[order.front()], worst = values[order.back()];
    if (std::abs(worst - best) <= rel_tol * (std::abs(best) + 1e-300)) break;
    Point centroid{};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < n; ++d) centroid[d] += simplex[order[i]][d] / n;
    const std::size_t w = order.back();
    auto along = [&](double t) {
      Point p;
      for (std::size_t d = 0; d < n; ++d) p[d] = centroid[d] + t * (simplex[w][d] - centroid[d]);
      return p;
    };
    const Point reflected = along(-1.0);
    const double fr = f(reflected);
    if (fr < values[order.front()]) {
      const Point expanded = along(-2.0);
      const double fe = f(expanded);
      if (fe < fr) {
        simplex[w] = expanded;
        values[w] = fe;
      } else {
        simplex[w] = reflected;
        values[w] = fr;
      }
      continue;
    }
    if (fr < values[order[n - 1]]) {
      simplex[w] = reflected;
      values[w] = fr;
      continue;
    }
    const bool outside = fr < values[w];
    const Point contracted = along(outside ? -0.5 : 0.5);
    const double fc = f(contracted);
    if (fc < (outside ? fr : values[w])) {
      simplex[w] = contracted;
      values[w] = fc;
      continue;
    }
    const Point& anchor = simplex[order.front()];
    for (std::size_t i = 1; i <= n; ++i) {
      Point& p = simplex[order[i]];
      for (std::size_t d = 0; d < n; ++d) p[d] = anchor[d] + 0.5 * (p[d] - anchor[d]);
      values[order[i]] = f(p);
    }
  }
  const auto best = std::min_element(values.begin(), values.end()) - values.begin();
  return simplex[static_cast<std::size_t>(best)];
}

/// Fits gt ~ a * f + b by least squares and folds the affine map into the betas.
Betas refit_affine(std::span<const double> pred, std::span<const double> gt, Betas betas) {
  std::vector<double> mapped(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) mapped[i] = logistic_map(pred[i], betas);
  const double mf = mean_of(mapped), mg = mean_of(gt);
  double sff = 0.0, sfg = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sff += (mapped[i] - mf) * (mapped[i] - mf);
    sfg += (mapped[i] - mf) * (gt[i] - mg);
  }
  if (sff <= 0.0) return betas;
  const double a = sfg / sff, b = mg - a * mf;
  return {a * betas[0], betas[1], betas[2], a * betas[3], a * betas[4] + b};
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  require_pair(a, b, 2);
  require(!is_constant(a) && !is_constant(b), ErrorKind::kMetric, "correlation undefined for a constant vector");
  const double ma = mean_of(a), mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double srocc(std::span<const double> pred, std::span<const double> gt) {
  require_pair(pred, gt, 3);
  const auto rp = average_ranks(pred);
  const auto rg = average_ranks(gt);
  return pearson(rp, rg);
}

double logistic_map(double mu_hat, const Betas& b) {
  const double e = std::clamp(b[1] * (mu_hat - b[2]), -500.0, 500.0);
  return b[0] * (0.5 - 1.0 / (1.0 + std::exp(e))) + b[3] * mu_hat + b[4];
}

double logistic_sse(std::span<const double> pred, std::span<const double> gt, const Betas& betas) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = gt[i] - logistic_map(pred[i], betas);
    s += r * r;
  }
  return s;
}

Betas fit_logistic(std::span<const double> pred, std::span<const double> gt) {
  require_pair(pred, gt, 10);
  if (is_constant(pred) || is_constant(gt)) fail(ErrorKind::kFit, "logistic fit on constant input");
  const auto [gmin, gmax] = std::minmax_element(gt.begin(), gt.end());
  const auto [pmin, pmax] = std::minmax_element(pred.begin(), pred.end());
  const double mp = mean_of(pred), mg = mean_of(gt);
  const double pred_span = *pmax - *pmin, gt_span = *gmax - *gmin;

  auto objective = [&](const Point& b) {
    const double v = logistic_sse(pred, gt, b);
    return std::isfinite(v) ? v : std::numeric_limits<double>::max();
  };
  const Point step{0.1 * gt_span + 1e-3, 0.5 / pred_span, 0.1 * pred_span, 0.1 * gt_span / pred_span + 1e-3,
                   0.1 * gt_span + 1e-3};

  const Betas identity{0.0, 1.0, mp, 1.0, 0.0};
  const std::array<Betas, 3> starts{
      Betas{gt_span, 1.0, mp, 0.0, mg},
      identity,
      refit_affine(pred, gt, Betas{0.0, 1.0, mp, 1.0, 0.0}),
  };
  Betas best = identity;
  double best_value = objective(identity);
  for (const auto& start : starts) {
    Point x = start;
    for (int restart = 0; restart < 3; ++restart) x = nelder_mead<5>(objective, x, step, 1e-10, 2000);
    x = refit_affine(pred, gt, x);
    const double v = objective(x);
    if (v < best_value) {
      best_value = v;
      best = x;
    }
  }
  return best;
}

PlccResult plcc(std::span<const double> pred, std::span<const double> gt) {
  const Betas betas = fit_logistic(pred, gt);
  std::vector<double> mapped(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) mapped[i] = logistic_map(pred[i], betas);
  if (is_constant(mapped)) fail(ErrorKind::kFit, "fitted logistic map is constant");
  // an order-reversing fit would hide anti-correlated predictions
  const double sign = pearson(mapped, pred) < 0.0 ? -1.0 : 1.0;
  return {sign * pearson(mapped, gt), betas};
}

double rmse(std::span<const double> pred, std::span<const double> gt) {
  require_pair(pred, gt, 1);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - gt[i]) * (pred[i] - gt[i]);
  return std::sqrt(s / pred.size());
}

MetricReport evaluate_predictions(std::span<const double> pred, std::span<const double> gt) {
  require_pair(pred, gt, 10);
  MetricReport r;
  r.n = pred.size();
  r.srocc = srocc(pred, gt);
  const auto p = plcc(pred, gt);
  r.plcc = p.value;
  r.betas = p.betas;
  r.rmse = rmse(pred, gt);
  return r;
}

MetricReport mean_report(std::span<const MetricReport> reports) {
  require(!reports.empty(), ErrorKind::kMetric, "no reports to average");
  MetricReport m;
  const double inv = 1.0 / static_cast<double>(reports.size());
  for (const auto& r : reports) {
    m.srocc += r.srocc * inv;
    m.plcc += r.plcc * inv;
    m.rmse += r.rmse * inv;
    for (std::size_t i = 0; i < 5; ++i) m.betas[i] += r.betas[i] * inv;
    m.n += r.n;
  }
  m.n /= reports.size();
  return m;
}

double RaterHistogram::total() const { return std::accumulate(counts.begin(), counts.end(), 0.0); }

std::vector<double> RaterHistogram::frequencies() const {
  const double n = total();
  require(n > 0.0, ErrorKind::kData, "empty rater histogram");
  std::vector<double> f(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) f[k] = counts[k] / n;
  return f;
}

double RaterHistogram::mean_score(const RatingScale& scale) const { return dist_mean(frequencies(), scale); }

std::string to_string(Family family) {
  switch (family) {
    case Family::kGaussian: return "gaussian";
    case Family::kGamma: return "gamma";
    case Family::kWeibull: return "weibull";
  }
  return "?";
}

namespace {

std::vector<double> normalise_log_density(const std::vector<double>& logd) {
  const double peak = *std::max_element(logd.begin(), logd.end());
  std::vector<double> p(logd.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    p[k] = std::exp(logd[k] - peak);
    sum += p[k];
  }
  for (auto& v : p) v /= sum;
  return p;
}

/// Solves log k - digamma(k) = s for the gamma shape.
double gamma_shape(double s) {
  double k = (3.0 - s + std::sqrt((s - 3.0) * (s - 3.0) + 24.0 * s)) / (12.0 * s);
  for (int it = 0; it < 100; ++it) {
    const double f = std::log(k) - boost::math::digamma(k) - s;
    const double df = 1.0 / k - boost::math::trigamma(k);
    double next = k - f / df;
    if (!(next > 0.0)) next = 0.5 * k;
    const bool done = std::abs(next - k) <= 1e-10 * k;
    k = next;
    if (done) break;
  }
  return k;
}

/// Solves the Weibull shape likelihood equation for weighted samples.
double weibull_shape(const std::vector<double>& x, const std::vector<double>& w) {
  const double n = std::accumulate(w.begin(), w.end(), 0.0);
  double mean_log = 0.0, var_log = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mean_log += w[i] * std::log(x[i]) / n;
  for (std::size_t i = 0; i < x.size(); ++i) var_log += w[i] * std::pow(std::log(x[i]) - mean_log, 2) / n;
  double k = 1.2 / std::sqrt(var_log);
  for (int it = 0; it < 100; ++it) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double lx = std::log(x[i]);
      const double xk = w[i] * std::pow(x[i], k);
      s0 += xk;
      s1 += xk * lx;
      s2 += xk * lx * lx;
    }
    const double g = s1 / s0 - 1.0 / k - mean_log;
    const double dg = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k);
    double next = k - g / dg;
    if (!(next > 0.0)) next = 0.5 * k;
    const bool done = std::abs(next - k) <= 1e-10 * k;
    k = next;
    if (done) break;
  }
  return k;
}

}  // namespace

namespace {

using Pair = std::array<double, 2>;

/// Category probabilities of a family with natural parameters `params`.
std::vector<double> family_probs(Family family, const Pair& params, const RatingScale& scale, double sigma_floor) {
  if (family == Family::kGaussian) {
    const double sigma = std::max(params[1], sigma_floor);
    const auto q = discretize({params[0], sigma * sigma}, scale, sigma_floor);
    return {q.probs().begin(), q.probs().end()};
  }
  const auto& levels = scale.levels();
  std::vector<double> logd(levels.size());
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const double x = levels[k] - scale.lower() + 1.0;
    logd[k] = family == Family::kGamma
                  ? (params[0] - 1.0) * std::log(x) - x / params[1]
                  : (params[0] - 1.0) * std::log(x / params[1]) - std::pow(x / params[1], params[0]);
  }
  return normalise_log_density(logd);
}

/// Maximum-likelihood estimate treating ratings as points on the (shifted)
/// support. Gaussian is closed form; gamma and Weibull solve for the shape.
Pair continuous_fit(Family family, const std::vector<double>& freq, const RatingScale& scale, double sigma_floor) {
  if (family == Family::kGaussian)
    return {dist_mean(freq, scale), std::max(std::sqrt(dist_var(freq, scale)), sigma_floor)};
  const auto& levels = scale.levels();
  std::vector<double> x(levels.size());
  for (std::size_t k = 0; k < levels.size(); ++k) x[k] = levels[k] - scale.lower() + 1.0;
  if (family == Family::kGamma) {
    double mean_x = 0.0, mean_log = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      mean_x += freq[k] * x[k];
      mean_log += freq[k] * std::log(x[k]);
    }
    const double s = std::log(mean_x) - mean_log;
    if (!(s > 0.0)) fail(ErrorKind::kFit, "degenerate sample for gamma fit");
    const double shape = gamma_shape(s);
    return {shape, mean_x / shape};
  }
  const double shape = weibull_shape(x, freq);
  double s0 = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) s0 += freq[k] * std::pow(x[k], shape);
  return {shape, std::pow(s0, 1.0 / shape)};
}

}  // namespace

GofResult gof_fit(const RaterHistogram& hist, Family family, const RatingScale& scale, double sigma_floor) {
  require(static_cast<int>(hist.counts.size()) == scale.size(), ErrorKind::kData,
          "histogram category count must equal the number of rating levels");
  for (const double c : hist.counts) require(c >= 0.0 && std::isfinite(c), ErrorKind::kData, "negative rater count");
  const double n = hist.total();
  require(n >= 5.0, ErrorKind::kData, "goodness-of-fit needs at least 5 raters");
  const auto freq = hist.frequencies();
  const std::size_t occupied = static_cast<std::size_t>(std::count_if(hist.counts.begin(), hist.counts.end(),
                                                                      [](double c) { return c > 0.0; }));
  if (family != Family::kGaussian && occupied < 2)
    fail(ErrorKind::kFit, to_string(family) + " fit needs raters in at least two categories");

  Pair params = continuous_fit(family, freq, scale, sigma_floor);
  for (const double v : params)
    if (!std::isfinite(v) || v <= 0.0) fail(ErrorKind::kFit, to_string(family) + " fit did not converge");

  // Raters report categories, so the estimate above (which treats ratings as
  // points) only seeds the fit: each family maximises the likelihood of its
  // discretised model. On a coarse grid the two differ noticeably, e.g. the
  // discrete variance of a narrow Gaussian is well below sigma^2.
  // Gaussian works on (mean, log sigma), gamma and Weibull on log parameters.
  if (occupied >= 2) {
    const bool gaussian = family == Family::kGaussian;
    auto to_natural = [&](const Pair& t) {
      return gaussian ? Pair{t[0], std::exp(t[1])} : Pair{std::exp(t[0]), std::exp(t[1])};
    };
    auto nll = [&](const Pair& t) {
      const Pair natural = to_natural(t);
      if (!std::isfinite(natural[0]) || !std::isfinite(natural[1]) || natural[1] <= 0.0)
        return std::numeric_limits<double>::max();
      const auto q = family_probs(family, natural, scale, sigma_floor);
      double v = 0.0;
      for (std::size_t k = 0; k < q.size(); ++k)
        if (freq[k] > 0.0) v -= freq[k] * std::log(std::max(q[k], 1e-300));
      return std::isfinite(v) ? v : std::numeric_limits<double>::max();
    };
    Pair t = gaussian ? Pair{params[0], std::log(params[1])} : Pair{std::log(params[0]), std::log(params[1])};
    const double start_value = nll(t);
    for (int restart = 0; restart < 3; ++restart) t = nelder_mead<2>(nll, t, {0.1, 0.1}, 1e-14, 2000);
    if (nll(t) <= start_value) params = to_natural(t);
    if (gaussian) params[1] = std::max(params[1], sigma_floor);
  }

  GofResult out;
  out.family = family;
  out.params = {params[0], params[1]};
  out.fitted = family_probs(family, params, scale, sigma_floor);
  double s = 0.0;
  for (std::size_t k = 0; k < freq.size(); ++k) s += (out.fitted[k] - freq[k]) * (out.fitted[k] - freq[k]);
  out.rmse = std::sqrt(s / static_cast<double>(freq.size()));
  return out;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

ClusterResult lloyd(const std::vector<std::vector<double>>& points, int k, Rng& rng) {
  const std::size_t n = points.size();
  std::vector<std::vector<double>> centroids;
  centroids.push_back(points[rng.index(n)]);
  std::vector<double> d2(n);
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (const auto& c : centroids) best = std::min(best, sq_dist(points[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = rng.index(n);
    if (total > 0.0) {
      double r = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        r -= d2[i];
        if (r < 0.0) {
          pick = i;
          break;
        }
      }
    }
    centroids.push_back(points[pick]);
  }
  std::vector<int> assign(n, -1);
  for (int iter = 0; iter < 300; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = sq_dist(points[i], centroids[0]);
      for (int c = 1; c < k; ++c) {
        const double d = sq_dist(points[i], centroids[static_cast<std::size_t>(c)]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed && iter > 0) break;
    const std::size_t dim = points.front().size();
    std::vector<std::vector<double>> sums(static_cast<std::size_t>(k), std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(assign[i]);
      ++counts[c];
      for (std::size_t d = 0; d < dim; ++d) sums[c][d] += points[i][d];
    }
    for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its previous centroid
      for (std::size_t d = 0; d < dim; ++d) centroids[c][d] = sums[c][d] / static_cast<double>(counts[c]);
    }
  }
  ClusterResult r;
  r.assignments = std::move(assign);
  r.centroids = std::move(centroids);
  r.percentages.assign(static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    r.inertia += sq_dist(points[i], r.centroids[static_cast<std::size_t>(r.assignments[i])]);
    r.percentages[static_cast<std::size_t>(r.assignments[i])] += 100.0 / static_cast<double>(n);
  }
  return r;
}

}  // namespace

ClusterResult cluster_distributions(const std::vector<std::vector<double>>& points, int k, std::uint64_t seed,
                                    int restarts) {
  require(k >= 1, ErrorKind::kInvalidArgument, "k must be >= 1");
  require(points.size() >= static_cast<std::size_t>(k), ErrorKind::kInvalidArgument,
          "fewer histograms than clusters");
  require(restarts >= 1, ErrorKind::kInvalidArgument, "restarts must be >= 1");
  for (const auto& p : points)
    require(p.size() == points.front().size(), ErrorKind::kShape, "histograms have different category counts");
  ClusterResult best;
  best.inertia = std::numeric_limits<double>::max();
  for (int r = 0; r < restarts; ++r) {
    Rng rng(seed + 7919ull * static_cast<std::uint64_t>(r));
    ClusterResult candidate = lloyd(points, k, rng);
    if (candidate.inertia < best.inertia) best = std::move(candidate);
  }
  return best;
}

}  // namespace sfiqa::metrics
