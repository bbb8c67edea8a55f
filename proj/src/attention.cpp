#include "protodet/attention.hpp"

#include <cmath>

namespace protodet {

namespace {

Tensor uniform_init(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = u(rng);
  return Tensor({fan_in, fan_out}, std::move(v));
}

Tensor apply_dropout(const Tensor& x, const AttentionConfig& cfg, const ForwardContext& ctx) {
  if (ctx.mode == Mode::eval || cfg.dropout_rate == 0.0) return x;
  if (!ctx.rng) throw ContractError("train-mode forward pass needs a generator");
  return dropout(x, cfg.dropout_rate, ctx.mode, *ctx.rng);
}

Tensor norm(const Tensor& x, const LayerNormParams& ln) { return layer_norm(x, ln.gamma, ln.beta); }

void check_width(const Tensor& x, const AttentionConfig& cfg, const char* what) {
  if (x.rank() != 2 || x.cols() != cfg.model_dim) {
    throw DimensionError(std::string(what) + " must be n x " + std::to_string(cfg.model_dim) +
                         ", got " + shape_str(x.shape()));
  }
}

}  // namespace

void AttentionConfig::validate() const {
  if (model_dim < 1) throw ParameterError("attention.model_dim must be >= 1");
  if (heads < 1) throw ParameterError("attention.heads must be >= 1");
  if (layers < 1) throw ParameterError("attention.layers must be >= 1");
  if (mlp_hidden < 1) throw ParameterError("attention.mlp_hidden must be >= 1");
  if (model_dim % heads != 0) {
    throw ParameterError("attention.model_dim must be divisible by attention.heads");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ParameterError("attention.dropout_rate must be in [0, 1)");
  }
}

MultiHeadParams MultiHeadParams::init(const AttentionConfig& cfg, std::mt19937_64& rng) {
  MultiHeadParams p;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    p.query.push_back(uniform_init(cfg.model_dim, cfg.head_dim(), rng));
    p.key.push_back(uniform_init(cfg.model_dim, cfg.head_dim(), rng));
    p.value.push_back(uniform_init(cfg.model_dim, cfg.head_dim(), rng));
  }
  p.output = uniform_init(cfg.model_dim, cfg.model_dim, rng);
  return p;
}

void MultiHeadParams::visit_params(const std::string& prefix, const ParamVisitor& f) {
  for (std::size_t h = 0; h < query.size(); ++h) {
    const std::string head = prefix + ".h" + std::to_string(h);
    f(head + ".wq", query[h]);
    f(head + ".wk", key[h]);
    f(head + ".wv", value[h]);
  }
  f(prefix + ".wo", output);
}

LayerNormParams LayerNormParams::init(std::size_t dim) {
  return {Tensor::filled({dim}, 1.0), Tensor::zeros({dim})};
}

void LayerNormParams::visit_params(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".gamma", gamma);
  f(prefix + ".beta", beta);
}

MlpParams MlpParams::init(std::size_t dim, std::size_t hidden, std::mt19937_64& rng) {
  MlpParams m;
  m.w1 = uniform_init(dim, hidden, rng);
  m.b1 = Tensor::zeros({hidden});
  m.w2 = uniform_init(hidden, dim, rng);
  m.b2 = Tensor::zeros({dim});
  return m;
}

void MlpParams::visit_params(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".w1", w1);
  f(prefix + ".b1", b1);
  f(prefix + ".w2", w2);
  f(prefix + ".b2", b2);
}

EncoderStack EncoderStack::init(const AttentionConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  EncoderStack s;
  s.config = cfg;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    EncoderLayer layer;
    layer.self_attention = MultiHeadParams::init(cfg, rng);
    layer.norm1 = LayerNormParams::init(cfg.model_dim);
    layer.mlp = MlpParams::init(cfg.model_dim, cfg.mlp_hidden, rng);
    layer.norm2 = LayerNormParams::init(cfg.model_dim);
    s.layers.push_back(std::move(layer));
  }
  return s;
}

void EncoderStack::visit_params(const std::string& prefix, const ParamVisitor& f) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    layers[l].self_attention.visit_params(p + ".self", f);
    layers[l].norm1.visit_params(p + ".norm1", f);
    layers[l].mlp.visit_params(p + ".mlp", f);
    layers[l].norm2.visit_params(p + ".norm2", f);
  }
}

DecoderStack DecoderStack::init(const AttentionConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  DecoderStack s;
  s.config = cfg;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    DecoderLayer layer;
    if (cfg.decoder_self_attention) {
      layer.self_attention = MultiHeadParams::init(cfg, rng);
      layer.norm0 = LayerNormParams::init(cfg.model_dim);
    }
    layer.cross_attention = MultiHeadParams::init(cfg, rng);
    layer.norm1 = LayerNormParams::init(cfg.model_dim);
    layer.mlp = MlpParams::init(cfg.model_dim, cfg.mlp_hidden, rng);
    layer.norm2 = LayerNormParams::init(cfg.model_dim);
    s.layers.push_back(std::move(layer));
  }
  return s;
}

void DecoderStack::visit_params(const std::string& prefix, const ParamVisitor& f) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    if (layers[l].self_attention) {
      layers[l].self_attention->visit_params(p + ".self", f);
      layers[l].norm0->visit_params(p + ".norm0", f);
    }
    layers[l].cross_attention.visit_params(p + ".cross", f);
    layers[l].norm1.visit_params(p + ".norm1", f);
    layers[l].mlp.visit_params(p + ".mlp", f);
    layers[l].norm2.visit_params(p + ".norm2", f);
  }
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError("attention operands must be matrices");
  }
  if (k.rows() == 0) throw EmptyInputError("attention over an empty key set");
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw DimensionError("attention: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) +
                         ", V " + shape_str(v.shape()) + " are incompatible");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor scores = mul(matmul(q, transpose(k)), scale);
  return matmul(softmax_rows(scores), v);
}

Tensor multi_head(const Tensor& q, const Tensor& k, const Tensor& v, const MultiHeadParams& params,
                  const AttentionConfig& cfg) {
  check_width(q, cfg, "attention queries");
  check_width(k, cfg, "attention keys");
  check_width(v, cfg, "attention values");
  if (params.query.size() != cfg.heads) throw DimensionError("head count differs from config");
  if (k.rows() == 0) throw EmptyInputError("attention over an empty key set");
  std::vector<Tensor> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    heads.push_back(scaled_dot_attention(matmul(q, params.query[h]), matmul(k, params.key[h]),
                                         matmul(v, params.value[h])));
  }
  Tensor joined = heads.size() == 1 ? heads.front() : concat_cols(heads);
  return matmul(joined, params.output);
}

Tensor mlp_forward(const Tensor& x, const MlpParams& mlp) {
  return add(matmul(relu(add(matmul(x, mlp.w1), mlp.b1)), mlp.w2), mlp.b2);
}

Tensor isam_refine(const Tensor& supports, const EncoderStack& stack, const ForwardContext& ctx) {
  if (supports.rank() == 2 && supports.rows() == 0) throw EmptyInputError("no support vectors");
  check_width(supports, stack.config, "supports");
  Tensor x = supports;
  for (const auto& layer : stack.layers) {
    Tensor a = multi_head(x, x, x, layer.self_attention, stack.config);
    x = norm(add(x, apply_dropout(a, stack.config, ctx)), layer.norm1);
    Tensor m = mlp_forward(x, layer.mlp);
    x = norm(add(x, apply_dropout(m, stack.config, ctx)), layer.norm2);
  }
  return x;
}

Tensor qsam_aggregate(const Tensor& queries, const Tensor& supports, const DecoderStack& stack,
                      const ForwardContext& ctx) {
  if (queries.rank() == 2 && queries.rows() == 0) throw EmptyInputError("no query vectors");
  if (supports.rank() == 2 && supports.rows() == 0) throw EmptyInputError("no support vectors");
  check_width(queries, stack.config, "queries");
  check_width(supports, stack.config, "supports");
  Tensor x = queries;
  for (const auto& layer : stack.layers) {
    if (layer.self_attention) {
      Tensor s = multi_head(x, x, x, *layer.self_attention, stack.config);
      x = norm(add(x, apply_dropout(s, stack.config, ctx)), *layer.norm0);
    }
    Tensor c = multi_head(x, supports, supports, layer.cross_attention, stack.config);
    x = norm(add(x, apply_dropout(c, stack.config, ctx)), layer.norm1);
    Tensor m = mlp_forward(x, layer.mlp);
    x = norm(add(x, apply_dropout(m, stack.config, ctx)), layer.norm2);
  }
  return x;
}

}  // namespace protodet
