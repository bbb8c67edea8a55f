#include "protodet/gradcheck_suite.hpp"

#include <cmath>

namespace protodet {

namespace {

// Values in [-1, 1] kept at least 0.1 away from zero, so ReLU-style kinks are
// never straddled by a finite-difference probe.
Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Random fixed projection turning a tensor into a scalar with non-trivial
// upstream gradients.
Tensor project(const Tensor& x, const Tensor& w) { return sum(mul(x, w)); }

AttentionConfig tiny_attention(std::size_t dim) {
  AttentionConfig a;
  a.model_dim = dim;
  a.heads = 2;
  a.layers = 2;
  a.mlp_hidden = 2 * dim;
  a.dropout_rate = 0.1;
  return a;
}

}  // namespace

FixtureEpisode make_fixture_episode(DetectorStyle style, const AggregationFlags& flags,
                                    std::uint64_t seed) {
  DetectorConfig cfg;
  cfg.style = style;
  cfg.dim = 8;
  cfg.num_classes = 2;
  cfg.attention = tiny_attention(8);
  cfg.flags = flags;
  cfg.anchor_sizes = {2};
  cfg.top_k = 4;

  std::mt19937_64 rng(seed);
  FixtureEpisode fx;
  fx.model = Model::init(cfg, derive_seed(seed, 1));

  std::normal_distribution<double> g(0.0, 1.0);
  const std::vector<double> sig0{1.5, -0.5, 0.8, 0.2, -1.1, 0.4, 0.9, -0.7};
  const std::vector<double> sig1{-1.0, 1.2, -0.3, 0.9, 0.6, -1.3, 0.1, 1.0};
  std::vector<double> grid(16 * 8);
  for (double& v : grid) v = 0.3 * g(rng);
  auto paint = [&](std::size_t x0, std::size_t y0, const std::vector<double>& sig) {
    for (std::size_t y = y0; y < y0 + 2; ++y)
      for (std::size_t x = x0; x < x0 + 2; ++x)
        for (std::size_t k = 0; k < 8; ++k) grid[(y * 4 + x) * 8 + k] += sig[k];
  };
  paint(0, 0, sig0);
  paint(2, 2, sig1);
  fx.query.id = seed;
  fx.query.grid = FeatureMap(4, 4, Tensor({16, 8}, std::move(grid)));
  fx.query.boxes = {Box{0, 0, 2, 2}, Box{2, 2, 4, 4}};
  fx.query.labels = {0, 1};
  fx.query.modes = {0, 0};

  for (int cls : {0, 1}) {
    const auto& sig = cls == 0 ? sig0 : sig1;
    std::vector<double> rows;
    for (int k = 0; k < 3; ++k)
      for (double s : sig) rows.push_back(s + g(rng));
    fx.supports.push_back(SupportSet{cls, Tensor({3, 8}, std::move(rows))});
  }
  return fx;
}

ScalarFn episode_loss_fn(const FixtureEpisode& fx) {
  return [fx](const std::vector<Tensor>& params) {
    const Model m = fx.model.with_parameters(params);
    return episode_losses(m, fx.query, fx.supports, ForwardContext::eval()).total;
  };
}

std::vector<SuiteResult> run_gradcheck_suite(double eps, double tol, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SuiteResult> out;
  auto check = [&](const std::string& name, const ScalarFn& fn, const std::vector<Tensor>& in) {
    out.push_back({name, finite_diff_check(fn, in, eps, tol)});
  };

  const Tensor a = uniform({3, 4}, -1, 1, rng), b = uniform({4, 2}, -1, 1, rng);
  const Tensor w34 = uniform({3, 4}, -1, 1, rng), w32 = uniform({3, 2}, -1, 1, rng);
  const Tensor w43 = uniform({4, 3}, -1, 1, rng), v4 = uniform({4}, -1, 1, rng);
  const Tensor c34 = uniform({3, 4}, -1, 1, rng);

  check("matmul", [&](const auto& x) { return project(matmul(x[0], x[1]), w32); }, {a, b});
  check("transpose", [&](const auto& x) { return project(transpose(x[0]), w43); }, {a});
  check("softmax_rows", [&](const auto& x) { return project(softmax_rows(x[0]), w34); }, {a});
  check("layer_norm",
        [&](const auto& x) { return project(layer_norm(x[0], x[1], x[2]), w34); },
        {a, uniform({4}, 0.5, 1.5, rng), uniform({4}, -0.5, 0.5, rng)});
  check("add", [&](const auto& x) { return project(add(x[0], x[1]), w34); }, {a, c34});
  check("add_broadcast", [&](const auto& x) { return project(add(x[0], x[1]), w34); }, {a, v4});
  check("sub", [&](const auto& x) { return project(sub(x[0], x[1]), w34); }, {a, c34});
  check("sub_broadcast", [&](const auto& x) { return project(sub(x[0], x[1]), w34); }, {a, v4});
  check("mul", [&](const auto& x) { return project(mul(x[0], x[1]), w34); }, {a, c34});
  check("mul_broadcast", [&](const auto& x) { return project(mul(x[0], x[1]), w34); }, {a, v4});
  check("mul_scalar_tensor",
        [&](const auto& x) { return project(mul(x[0], x[1]), w34); }, {a, Tensor::scalar(0.7)});
  check("add_constant", [&](const auto& x) { return project(add(x[0], 0.3), w34); }, {a});
  check("mul_constant", [&](const auto& x) { return project(mul(x[0], -1.7), w34); }, {a});
  check("relu", [&](const auto& x) { return project(relu(x[0]), w34); },
        {away_from_zero({3, 4}, rng)});
  check("sum", [&](const auto& x) { return mul(sum(x[0]), sum(x[0])); }, {a});
  check("mean", [&](const auto& x) { return mul(mean(x[0]), mean(x[0])); }, {a});
  check("mean_rows", [&](const auto& x) { return project(mean_rows(x[0]), Tensor({1, 4}, v4.to_vector())); },
        {a});
  check("reshape", [&](const auto& x) { return project(reshape(x[0], {4, 3}), w43); }, {a});
  const Tensor w36 = uniform({3, 6}, -1, 1, rng);
  check("concat_cols", [&](const auto& x) { return project(concat_cols({x[0], x[1]}), w36); },
        {a, uniform({3, 2}, -1, 1, rng)});
  const Tensor w54 = uniform({5, 4}, -1, 1, rng);
  check("concat_rows", [&](const auto& x) { return project(concat_rows({x[0], x[1]}), w54); },
        {a, uniform({2, 4}, -1, 1, rng)});
  const std::vector<std::size_t> rows{2, 0, 2};
  check("gather_rows", [&](const auto& x) { return project(gather_rows(x[0], rows), w34); }, {a});
  const std::vector<std::size_t> cols{3, 1};
  check("select_cols", [&](const auto& x) { return project(select_cols(x[0], cols), w32); }, {a});
  const std::vector<std::vector<std::size_t>> groups{{0, 1}, {2}, {0, 1, 2}};
  check("pool_rows", [&](const auto& x) { return project(pool_rows(x[0], groups), w34); }, {a});
  const std::uint64_t mask_seed = rng();
  check("dropout",
        [&](const auto& x) {
          std::mt19937_64 r(mask_seed);
          return project(dropout(x[0], 0.3, Mode::train, r), w34);
        },
        {a});
  // Differences kept inside the quadratic zone or well outside it.
  check("smooth_l1", [&](const auto& x) { return smooth_l1(x[0], x[1]); },
        {Tensor({2, 2}, {0.2, -0.3, 2.5, -1.8}), Tensor({2, 2}, {0.5, 0.1, 0.2, 0.4})});
  const std::vector<std::size_t> labels{1, 0, 3};
  check("cross_entropy", [&](const auto& x) { return cross_entropy(x[0], labels); }, {a});

  const AttentionConfig acfg = tiny_attention(8);
  std::mt19937_64 init(derive_seed(seed, 2));
  const MultiHeadParams mh = MultiHeadParams::init(acfg, init);
  const EncoderStack enc = EncoderStack::init(acfg, init);
  const DecoderStack dec = DecoderStack::init(acfg, init);
  const Tensor q = uniform({3, 8}, -1, 1, rng), s = uniform({5, 8}, -1, 1, rng);
  const Tensor w38 = uniform({3, 8}, -1, 1, rng), w58 = uniform({5, 8}, -1, 1, rng);
  check("scaled_dot_attention",
        [&](const auto& x) { return project(scaled_dot_attention(x[0], x[1], x[2]), w32); },
        {q, uniform({5, 8}, -1, 1, rng), uniform({5, 2}, -1, 1, rng)});
  check("multi_head",
        [&](const auto& x) {
          MultiHeadParams p = mh;
          p.query[0] = x[2];
          p.output = x[3];
          return project(multi_head(x[0], x[1], x[1], p, acfg), w38);
        },
        {q, s, mh.query[0], mh.output});
  check("isam_refine",
        [&](const auto& x) { return project(isam_refine(x[0], enc, ForwardContext::eval()), w58); },
        {s});
  check("qsam_aggregate",
        [&](const auto& x) {
          return project(qsam_aggregate(x[0], x[1], dec, ForwardContext::eval()), w38);
        },
        {q, s});

  auto stack_params = [](auto stack) {
    std::vector<Tensor> v;
    stack.visit_params("s", [&](const std::string&, Tensor& t) { v.push_back(t); });
    return v;
  };
  auto with_params = [](auto stack, const std::vector<Tensor>& v) {
    std::size_t i = 0;
    stack.visit_params("s", [&](const std::string&, Tensor& t) { t = v[i++]; });
    return stack;
  };
  check("encoder_stack_params",
        [&](const auto& x) {
          return project(isam_refine(s, with_params(enc, x), ForwardContext::eval()), w58);
        },
        stack_params(enc));
  check("decoder_stack_params",
        [&](const auto& x) {
          return project(qsam_aggregate(q, s, with_params(dec, x), ForwardContext::eval()), w38);
        },
        stack_params(dec));

  for (DetectorStyle style : {DetectorStyle::fsdetview, DetectorStyle::fewx}) {
    const FixtureEpisode fx = make_fixture_episode(style, AggregationFlags{});
    check("episode_loss_" + to_string(style), episode_loss_fn(fx), fx.model.parameters());
  }
  const FixtureEpisode base = make_fixture_episode(DetectorStyle::fsdetview, AggregationFlags{false, false});
  check("episode_loss_baseline", episode_loss_fn(base), base.model.parameters());
  return out;
}

}  // namespace protodet
