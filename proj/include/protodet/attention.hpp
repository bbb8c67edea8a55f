#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "protodet/params.hpp"
#include "protodet/tensor.hpp"

namespace protodet {

/// Shallow transformer configuration shared by the intra-support encoder
/// and the query-support decoder. Activation is always ReLU.
struct AttentionConfig {
  std::size_t model_dim = 256;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t mlp_hidden = 256;
  double dropout_rate = 0.1;
  // Decoder self-attention over query rows. Off by default so every query
  // row is aggregated independently of the others.
  bool decoder_self_attention = false;

  std::size_t head_dim() const { return model_dim / heads; }
  // Throws ParameterError naming the offending field.
  void validate() const;
};

/// Dropout mode plus the generator that drives it. The generator may be null
/// in eval mode.
struct ForwardContext {
  Mode mode = Mode::eval;
  std::mt19937_64* rng = nullptr;

  static ForwardContext eval() { return {}; }
  static ForwardContext train(std::mt19937_64& rng) { return {Mode::train, &rng}; }
};

struct MultiHeadParams {
  // Per-head projections, each model_dim x head_dim.
  std::vector<Tensor> query, key, value;
  // model_dim x model_dim, applied to the concatenated heads.
  Tensor output;

  static MultiHeadParams init(const AttentionConfig& cfg, std::mt19937_64& rng);
  void visit_params(const std::string& prefix, const ParamVisitor& f);
};

struct LayerNormParams {
  Tensor gamma, beta;
  static LayerNormParams init(std::size_t dim);
  void visit_params(const std::string& prefix, const ParamVisitor& f);
};

struct MlpParams {
  Tensor w1, b1, w2, b2;
  static MlpParams init(std::size_t dim, std::size_t hidden, std::mt19937_64& rng);
  void visit_params(const std::string& prefix, const ParamVisitor& f);
};

struct EncoderLayer {
  MultiHeadParams self_attention;
  LayerNormParams norm1;
  MlpParams mlp;
  LayerNormParams norm2;
};

struct DecoderLayer {
  std::optional<MultiHeadParams> self_attention;
  std::optional<LayerNormParams> norm0;
  MultiHeadParams cross_attention;
  LayerNormParams norm1;
  MlpParams mlp;
  LayerNormParams norm2;
};

/// Post-norm transformer encoder: per layer
/// x = LN(x + drop(MHA(x, x, x))); x = LN(x + drop(MLP(x))).
struct EncoderStack {
  AttentionConfig config;
  std::vector<EncoderLayer> layers;

  static EncoderStack init(const AttentionConfig& cfg, std::mt19937_64& rng);
  void visit_params(const std::string& prefix, const ParamVisitor& f);
};

/// Post-norm transformer decoder without masking: optional self-attention,
/// then cross-attention onto the memory rows, then the MLP block.
struct DecoderStack {
  AttentionConfig config;
  std::vector<DecoderLayer> layers;

  static DecoderStack init(const AttentionConfig& cfg, std::mt19937_64& rng);
  void visit_params(const std::string& prefix, const ParamVisitor& f);
};

/// softmax(Q K^T / sqrt(d)) V with d the row width of Q and K.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Per-head projected attention, heads concatenated, output-projected.
Tensor multi_head(const Tensor& q, const Tensor& k, const Tensor& v, const MultiHeadParams& params,
                  const AttentionConfig& cfg);

Tensor mlp_forward(const Tensor& x, const MlpParams& mlp);

/// Intra-support refinement: self-attention encoder over the K support rows.
/// Permutation-equivariant over rows in eval mode.
Tensor isam_refine(const Tensor& supports, const EncoderStack& stack, const ForwardContext& ctx);

/// Query-support aggregation: decoder with queries as Q and supports as K/V.
/// Invariant to support-row order in eval mode.
Tensor qsam_aggregate(const Tensor& queries, const Tensor& supports, const DecoderStack& stack,
                      const ForwardContext& ctx);

}  // namespace protodet
