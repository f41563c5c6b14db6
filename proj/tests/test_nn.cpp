#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "sfiqa/nn/network.hpp"
#include "sfiqa/rng.hpp"

using namespace sfiqa;
using namespace sfiqa::nn;

using gradcheck::random_tensor;
using gradcheck::randomize_branch;
using gradcheck::small_spec;

namespace {

// Straight-line long-double forward of the whole network, written from the
// layer definitions with naive loops.
std::vector<std::vector<oracle::Real>> oracle_forward(const ModelParams<float>& p, const Tensor<float>& x,
                                                      const std::string& domain, bool train) {
  using R = oracle::Real;
  const int B = x.batch;
  int C = x.channels, H = x.height, W = x.width;
  std::vector<R> cur(x.values.begin(), x.values.end());
  auto at = [&](const std::vector<R>& t, int c_count, int h, int w, int b, int c, int y, int xx) -> R {
    if (y < 0 || y >= h || xx < 0 || xx >= w) return 0;
    return t[((static_cast<std::size_t>(b) * c_count + c) * h + y) * w + xx];
  };
  const auto& br = p.branch(domain);
  for (std::size_t m = 0; m < p.convs.size(); ++m) {
    const auto& conv = p.convs[m];
    const int O = conv.out_channels;
    std::vector<R> out(static_cast<std::size_t>(B) * O * H * W);
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < O; ++o)
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx) {
            R acc = conv.bias[static_cast<std::size_t>(o)];
            for (int c = 0; c < C; ++c)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                  acc += static_cast<R>(conv.weight[((static_cast<std::size_t>(o) * C + c) * 3 + ky) * 3 + kx]) *
                         at(cur, C, H, W, b, c, y + ky - 1, xx + kx - 1);
            out[((static_cast<std::size_t>(b) * O + o) * H + y) * W + xx] = acc;
          }
    const auto& layer = br.layers[m];
    for (int o = 0; o < O; ++o) {
      R mean = 0, var = 0;
      const R n = static_cast<R>(B) * H * W;
      if (train) {
        for (int b = 0; b < B; ++b)
          for (int i = 0; i < H * W; ++i) mean += out[(static_cast<std::size_t>(b) * O + o) * H * W + i] / n;
        for (int b = 0; b < B; ++b)
          for (int i = 0; i < H * W; ++i) {
            const R d = out[(static_cast<std::size_t>(b) * O + o) * H * W + i] - mean;
            var += d * d / n;
          }
      } else {
        mean = layer.running_mean[static_cast<std::size_t>(o)];
        var = layer.running_var[static_cast<std::size_t>(o)];
      }
      const R inv = 1.0L / std::sqrt(var + static_cast<R>(br.epsilon));
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < H * W; ++i) {
          R& v = out[(static_cast<std::size_t>(b) * O + o) * H * W + i];
          v = layer.gamma[static_cast<std::size_t>(o)] * (v - mean) * inv + layer.beta[static_cast<std::size_t>(o)];
          v = std::max(v, R(0));
        }
    }
    std::vector<R> pooled(static_cast<std::size_t>(B) * O * (H / 2) * (W / 2));
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < O; ++o)
        for (int y = 0; y < H / 2; ++y)
          for (int xx = 0; xx < W / 2; ++xx)
            pooled[((static_cast<std::size_t>(b) * O + o) * (H / 2) + y) * (W / 2) + xx] =
                (at(out, O, H, W, b, o, 2 * y, 2 * xx) + at(out, O, H, W, b, o, 2 * y, 2 * xx + 1) +
                 at(out, O, H, W, b, o, 2 * y + 1, 2 * xx) + at(out, O, H, W, b, o, 2 * y + 1, 2 * xx + 1)) /
                4;
    cur = std::move(pooled);
    C = O;
    H /= 2;
    W /= 2;
  }
  std::vector<std::vector<R>> logits(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    std::vector<R> gap(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H * W; ++i) gap[static_cast<std::size_t>(c)] += cur[(static_cast<std::size_t>(b) * C + c) * H * W + i];
    for (auto& g : gap) g /= H * W;
    auto dense = [](const DenseLayer<float>& d, const std::vector<R>& in) {
      std::vector<R> o(static_cast<std::size_t>(d.outputs));
      for (int j = 0; j < d.outputs; ++j) {
        R acc = d.bias[static_cast<std::size_t>(j)];
        for (int i = 0; i < d.inputs; ++i) acc += static_cast<R>(d.weight[static_cast<std::size_t>(j) * d.inputs + i]) * in[static_cast<std::size_t>(i)];
        o[static_cast<std::size_t>(j)] = acc;
      }
      return o;
    };
    auto h = dense(p.hidden, gap);
    for (auto& v : h) v = std::max(v, R(0));
    logits[static_cast<std::size_t>(b)] = dense(p.head, h);
  }
  return logits;
}

}  // namespace

TEST_CASE("zero-weight network predicts the uniform distribution") {
  auto p = init_params<float>(small_spec(3, 8, {4}, 6), "s", 1);
  for (auto& c : p.convs) std::fill(c.weight.begin(), c.weight.end(), 0.0f), std::fill(c.bias.begin(), c.bias.end(), 0.0f);
  std::fill(p.hidden.weight.begin(), p.hidden.weight.end(), 0.0f);
  std::fill(p.head.weight.begin(), p.head.weight.end(), 0.0f);
  std::fill(p.head.bias.begin(), p.head.bias.end(), 0.0f);
  Rng rng(2);
  const auto x = random_tensor<float>(3, 3, 8, 8, rng);
  const auto probs = softmax(forward(p, x, "s", Mode::kTrain).logits);
  for (const float v : probs.values) CHECK(v == doctest::Approx(0.2f));
}

TEST_CASE("eval forward is pure and batch-size invariant") {
  Rng rng(5);
  auto p = init_params<float>(small_spec(3, 8, {4, 6}, 8), "s", 3);
  randomize_branch(p, "s", rng);
  const auto before = p;
  const auto x = random_tensor<float>(4, 3, 8, 8, rng);
  const auto a = forward(p, x, "s", Mode::kEval).logits;
  const auto b = forward_eval(p, x, "s").logits;
  CHECK(a.values == b.values);
  CHECK(p.branches == before.branches);
  for (int i = 0; i < 4; ++i) {
    Tensor<float> one(1, 3, 8, 8);
    std::copy(x.sample(i).begin(), x.sample(i).end(), one.values.begin());
    const auto single = forward_eval(p, one, "s").logits;
    for (int k = 0; k < 5; ++k) CHECK(single(0, k) == a(i, k));
  }
}

TEST_CASE("forward matches a straight-line extended-precision oracle") {
  Rng rng(9);
  auto p = init_params<float>(small_spec(3, 8, {4}, 6), "s", 4);
  randomize_branch(p, "s", rng);
  const auto x = random_tensor<float>(2, 3, 8, 8, rng);
  for (const bool train : {true, false}) {
    auto copy = p;
    const auto got = forward(copy, x, "s", train ? Mode::kTrain : Mode::kEval).logits;
    const auto want = oracle_forward(p, x, "s", train);
    for (int b = 0; b < 2; ++b)
      for (int k = 0; k < 5; ++k) {
        const double w = static_cast<double>(want[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)]);
        CHECK(std::abs(got(b, k) - w) <= 1e-4 * std::max(std::abs(w), 1e-2));
      }
  }
}

TEST_CASE("softmax") {
  Matrix<double> z(3, 5);
  for (int k = 0; k < 5; ++k) {
    z(1, k) = k + 1;
    z(2, k) = k + 1 + 1000.0;
  }
  const auto p = softmax(z);
  for (int k = 0; k < 5; ++k) CHECK(p(0, k) == doctest::Approx(0.2).epsilon(1e-15));
  const auto ref = oracle::softmax({1, 2, 3, 4, 5});
  for (int k = 0; k < 5; ++k) {
    CHECK(std::abs(p(1, k) - static_cast<double>(ref[static_cast<std::size_t>(k)])) <= 1e-15);
    CHECK(std::abs(p(2, k) - p(1, k)) <= 1e-12);
  }
  Rng rng(1);
  Matrix<float> zf(50, 5);
  for (auto& v : zf.values) v = static_cast<float>(20 * rng.normal());
  const auto pf = softmax(zf);
  for (int r = 0; r < 50; ++r) {
    float s = 0;
    for (const float v : pf.row(r)) s += v;
    CHECK(std::abs(s - 1.0f) <= 1e-6f);
  }
}

TEST_CASE("dsbn normalisation") {
  BranchLayer<double> layer{{1.0}, {0.0}, {0.0}, {1.0}, true};
  SUBCASE("constant channel whitens to zero") {
    Tensor<double> v(2, 1, 3, 3);
    std::fill(v.values.begin(), v.values.end(), 4.2);
    const auto out = dsbn_normalize(v, layer, 1e-5, 0.1, Mode::kTrain);
    for (const double x : out.values) CHECK(std::abs(x) <= 1e-9);
  }
  SUBCASE("affine law") {
    Rng rng(4);
    Tensor<double> v(16, 1, 8, 8);
    for (auto& x : v.values) x = rng.normal();
    layer.gamma = {2.0};
    layer.beta = {3.0};
    const auto out = dsbn_normalize(v, layer, 0.0 + 1e-12, 0.1, Mode::kTrain);
    double m = 0, s = 0;
    for (const double x : out.values) m += x / out.values.size();
    for (const double x : out.values) s += (x - m) * (x - m) / out.values.size();
    CHECK(m == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(s == doctest::Approx(4.0).epsilon(1e-9));
  }
  SUBCASE("EMA update of the running mean") {
    layer.running_mean = {1.0};
    Tensor<double> v(2, 1, 1, 2);
    v.values = {1.0, 3.0, 2.0, 2.0};  // batch mean 2, biased variance 0.5
    dsbn_normalize(v, layer, 1e-5, 0.1, Mode::kTrain);
    CHECK(layer.running_mean[0] == doctest::Approx(1.1).epsilon(1e-15));
    CHECK(layer.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 0.5).epsilon(1e-15));
  }
  SUBCASE("first update of an uninitialised layer copies the batch statistics") {
    BranchLayer<double> fresh{{1.0}, {0.0}, {0.0}, {1.0}, false};
    Tensor<double> v(2, 1, 1, 2);
    v.values = {1.0, 3.0, 2.0, 2.0};
    dsbn_normalize(v, fresh, 1e-5, 0.1, Mode::kTrain);
    CHECK(fresh.initialized);
    CHECK(fresh.running_mean[0] == 2.0);
    CHECK(fresh.running_var[0] == 0.5);
  }
  SUBCASE("eval on never-updated statistics is an error") {
    BranchLayer<double> fresh{{1.0}, {0.0}, {0.0}, {1.0}, false};
    Tensor<double> v(1, 1, 2, 2);
    try {
      dsbn_normalize(v, std::as_const(fresh), 1e-5);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kUninitializedStatistics);
    }
  }
  SUBCASE("eval mode whitens with the running statistics and mutates nothing") {
    layer.running_mean = {0.5};
    layer.running_var = {4.0};
    const auto before = layer;
    Tensor<double> v(1, 1, 1, 2);
    v.values = {2.5, 0.5};
    const auto out = dsbn_normalize(v, layer, 0.0, 0.1, Mode::kEval);
    CHECK(out.values[0] == doctest::Approx(1.0));
    CHECK(out.values[1] == doctest::Approx(0.0));
    CHECK(layer == before);
  }
}

TEST_CASE("backward matches central finite differences") {
  const auto st = gradcheck::network_suite(100);
  INFO("worst at " << st.where << ", tensor-wise " << st.tensor_worst);
  INFO("checked " << st.checked << " coordinates, skipped " << st.kinks << " at ReLU kinks");
  CHECK(st.all_tensors);
  CHECK(st.zero_tensors_ok);
  CHECK(st.worst <= 1e-4);
  CHECK(st.tensor_worst <= 1e-4);
  CHECK(st.kinks * 20 < st.checked);
}

TEST_CASE("zero upstream gradient gives zero gradients") {
  Rng rng(3);
  auto p = init_params<double>(small_spec(2, 8, {3, 4}, 5), "s", 1);
  const auto x = random_tensor<double>(3, 2, 8, 8, rng);
  const auto fwd = forward(p, x, "s", Mode::kTrain);
  for (const auto& [id, g] : backward(p, fwd.trace, Matrix<double>(3, 5)))
    for (const double v : g) CHECK(v == 0.0);
}

TEST_CASE("branch isolation") {
  Rng rng(8);
  auto p = init_params<double>(small_spec(2, 8, {3, 4}, 5), "s", 1);
  const auto x = random_tensor<double>(3, 2, 8, 8, rng);
  forward(p, x, "s", Mode::kTrain);
  add_domain_branch(p, "t1", "s");
  add_domain_branch(p, "t2", "s");
  const auto t2_before = p.branch("t2");
  const auto s_before = p.branch("s");
  Matrix<double> g(3, 5);
  for (auto& v : g.values) v = rng.normal();
  const auto fwd = forward(p, x, "t1", Mode::kTrain);
  const auto grads = backward(p, fwd.trace, g);
  for (const auto& [id, v] : grads)
    if (!id.is_shared()) CHECK(id.domain == "t1");
  CHECK(p.branch("t2") == t2_before);
  CHECK(p.branch("s") == s_before);
}

TEST_CASE("freeze masks") {
  auto p = init_params<float>(small_spec(3, 8, {4, 6}, 8), "s", 1);
  add_domain_branch(p, "t1", "s");
  add_domain_branch(p, "t2", "s");
  const auto adapt = freeze_mask(p, Phase::kAdapt, "t1");
  CHECK(adapt.size() == 2 * 2);  // gamma and beta per normalised layer
  CHECK(scalar_count(p, adapt) == 2 * (4 + 6));
  for (const auto& id : adapt) {
    CHECK(id.domain == "t1");
    CHECK(!id.is_shared());
  }
  const auto source = freeze_mask(p, Phase::kSourceTrain, "s");
  for (const auto& id : source) CHECK((id.is_shared() || id.domain == "s"));
  std::size_t shared = 0;
  for (const auto& id : all_param_ids(p)) shared += id.is_shared();
  CHECK(source.size() == shared + 4);
}

TEST_CASE("add_domain_branch copies the source branch") {
  Rng rng(12);
  auto p = init_params<float>(small_spec(3, 8, {4, 6}, 8), "s", 1);
  randomize_branch(p, "s", rng);
  add_domain_branch(p, "t", "s");
  const auto x = random_tensor<float>(3, 3, 8, 8, rng);
  CHECK(forward_eval(p, x, "t").logits.values == forward_eval(p, x, "s").logits.values);
  try {
    add_domain_branch(p, "t", "s");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kAlreadyExists);
  }
}

TEST_CASE("forward and backward error cases") {
  Rng rng(1);
  auto p = init_params<float>(small_spec(3, 8, {4}, 8), "s", 1);
  const auto x = random_tensor<float>(2, 3, 8, 8, rng);
  auto kind = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kIo;
  };
  CHECK(kind([&] { forward(p, x, "nope", Mode::kTrain); }) == ErrorKind::kMissingDomain);
  CHECK(kind([&] { forward(p, random_tensor<float>(2, 3, 4, 4, rng), "s", Mode::kTrain); }) == ErrorKind::kShape);
  CHECK(kind([&] { forward_eval(p, x, "s"); }) == ErrorKind::kUninitializedStatistics);
  const auto fwd = forward(p, x, "s", Mode::kTrain);
  p.revision++;
  CHECK(kind([&] { backward(p, fwd.trace, Matrix<float>(2, 5)); }) == ErrorKind::kTraceMismatch);
}

TEST_CASE("masked backward returns exactly the wanted tensors") {
  Rng rng(2);
  auto p = init_params<double>(small_spec(2, 8, {3, 4}, 5), "s", 1);
  forward(p, random_tensor<double>(3, 2, 8, 8, rng), "s", Mode::kTrain);
  add_domain_branch(p, "t", "s");
  const auto x = random_tensor<double>(3, 2, 8, 8, rng);
  Matrix<double> g(3, 5);
  for (auto& v : g.values) v = rng.normal();
  auto full_copy = p;
  const auto full = backward(full_copy, forward(full_copy, x, "t", Mode::kTrain).trace, g);
  const auto mask = freeze_mask(p, Phase::kAdapt, "t");
  const auto masked = backward(p, forward(p, x, "t", Mode::kTrain).trace, g, &mask);
  CHECK(masked.size() == mask.size());
  for (const auto& [id, v] : masked) CHECK(v == full.at(id));
}
