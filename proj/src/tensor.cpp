#include "protodet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace protodet {

namespace {

std::atomic<std::uint64_t> g_next_generation{1};

void require_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError("non-finite value in tensor");
  }
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_str(t.shape()));
  }
}

// How an operand of a binary elementwise op maps onto the output.
enum class Bcast { full, scalar, last_axis };

Bcast classify(const Tensor& small, const Shape& out) {
  if (small.shape() == out) return Bcast::full;
  if (small.numel() == 1) return Bcast::scalar;
  const bool vec_shape = small.rank() == 1 || (small.rank() == 2 && small.shape()[0] == 1);
  if (vec_shape && !out.empty() && small.numel() == out.back()) return Bcast::last_axis;
  throw DimensionError("incompatible shapes " + shape_str(small.shape()) + " and " +
                       shape_str(out));
}

inline std::size_t bcast_index(Bcast b, std::size_t i, std::size_t last) {
  switch (b) {
    case Bcast::full:
      return i;
    case Bcast::scalar:
      return 0;
    case Bcast::last_axis:
      return i % last;
  }
  return i;
}

// Output shape of a broadcasting binary op: the operand with more elements
// (ties: a).
Shape bcast_shape(const Tensor& a, const Tensor& b) {
  return a.numel() >= b.numel() ? a.shape() : b.shape();
}

enum class BinOp { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
  Shape out_shape = bcast_shape(a, b);
  const Bcast ba = classify(a, out_shape);
  const Bcast bb = classify(b, out_shape);
  const std::size_t n = shape_numel(out_shape);
  const std::size_t last = out_shape.empty() ? 1 : out_shape.back();
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[bcast_index(ba, i, last)];
    const double y = bv[bcast_index(bb, i, last)];
    switch (op) {
      case BinOp::add:
        out[i] = x + y;
        break;
      case BinOp::sub:
        out[i] = x - y;
        break;
      case BinOp::mul:
        out[i] = x * y;
        break;
    }
  }
  Tensor result(out_shape, std::move(out));
  return Tape::record(std::move(result), {&a, &b},
                      [a, b, ba, bb, op, n, last](std::span<const double> g,
                                                  std::span<std::span<double>> gin) {
                        auto av = a.values();
                        auto bv = b.values();
                        for (std::size_t i = 0; i < n; ++i) {
                          const std::size_t ia = bcast_index(ba, i, last);
                          const std::size_t ib = bcast_index(bb, i, last);
                          double da = g[i];
                          double db = g[i];
                          if (op == BinOp::sub) db = -g[i];
                          if (op == BinOp::mul) {
                            da = g[i] * bv[ib];
                            db = g[i] * av[ia];
                          }
                          if (!gin[0].empty()) gin[0][ia] += da;
                          if (!gin[1].empty()) gin[1][ib] += db;
                        }
                      });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor() : values_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != values.size()) {
    throw DimensionError("shape " + shape_str(shape_) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  require_finite(values);
  values_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<std::vector<double>> r;
  for (const auto& row : rows) r.emplace_back(row);
  return from_rows(r);
}

Tensor Tensor::row(std::span<const double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::row(std::initializer_list<double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values));
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.front().size() : 0;
  std::vector<double> v;
  v.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("ragged rows");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(v));
}

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_rank2(*this, "cols");
  return shape_[1];
}

std::vector<double> Tensor::row_values(std::size_t r) const {
  const std::size_t n = cols();
  if (r >= rows()) throw IndexError("row " + std::to_string(r) + " out of range");
  return {values_->begin() + static_cast<std::ptrdiff_t>(r * n),
          values_->begin() + static_cast<std::ptrdiff_t>((r + 1) * n)};
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return (*values_)[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (r >= rows() || c >= cols()) throw IndexError("index out of range");
  return (*values_)[r * shape_[1] + c];
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = 0;
  t.generation_ = 0;
  return t;
}

bool Tensor::same_values(const Tensor& other) const {
  return shape_ == other.shape_ && *values_ == *other.values_;
}

// ---- Tape -------------------------------------------------------------------

Tape::Tape() : generation_(g_next_generation.fetch_add(1)) {}

void Tape::reset() {
  nodes_.clear();
  generation_ = g_next_generation.fetch_add(1);
}

void Tape::check_owned(const Tensor& t) const {
  if (t.tape_ != this) throw ContractError("tensor belongs to a different tape");
  if (t.generation_ != generation_) {
    throw ContractError("tensor refers to a consumed tape generation");
  }
}

Tensor Tape::watch(const Tensor& value) {
  Tensor t = value.detached();
  t.tape_ = this;
  t.node_ = nodes_.size();
  t.generation_ = generation_;
  nodes_.push_back(Node{t.shape(), {}, {}});
  return t;
}

Tensor Tape::record(Tensor out, std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  return record(std::move(out), std::vector<const Tensor*>(inputs), std::move(fn));
}

Tensor Tape::record(Tensor out, const std::vector<const Tensor*>& inputs, BackwardFn fn) {
  Tape* tape = nullptr;
  for (const Tensor* in : inputs) {
    if (!in->tape_) continue;
    if (tape && tape != in->tape_) throw ContractError("operands recorded on different tapes");
    tape = in->tape_;
  }
  if (!tape) return out;
  Node node;
  node.shape = out.shape();
  node.inputs.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    if (in->tape_) {
      tape->check_owned(*in);
      node.inputs.push_back(in->node_);
    } else {
      node.inputs.push_back(kNoNode);
    }
  }
  node.backward = std::move(fn);
  out.tape_ = tape;
  out.node_ = tape->nodes_.size();
  out.generation_ = tape->generation_;
  tape->nodes_.push_back(std::move(node));
  return out;
}

Gradients backward(const Tensor& loss) {
  if (!loss.grad_enabled()) throw MissingTapeError("loss is not attached to a tape");
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  Tape& tape = *loss.tape();
  tape.check_owned(loss);

  std::vector<std::vector<double>> grads(tape.nodes_.size());
  grads[loss.node()] = {1.0};
  std::vector<std::span<double>> gin;
  for (std::size_t k = loss.node() + 1; k-- > 0;) {
    auto& node = tape.nodes_[k];
    if (grads[k].empty() || !node.backward) continue;
    gin.assign(node.inputs.size(), std::span<double>());
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const std::size_t src = node.inputs[i];
      if (src == Tape::kNoNode) continue;
      if (grads[src].empty()) grads[src].assign(shape_numel(tape.nodes_[src].shape), 0.0);
      gin[i] = grads[src];
    }
    node.backward(grads[k], gin);
    grads[k].clear();
    grads[k].shrink_to_fit();
  }

  Gradients out;
  out.generation_ = tape.generation();
  out.tape_ = &tape;
  for (std::size_t k = 0; k < tape.nodes_.size(); ++k) {
    if (tape.nodes_[k].backward || grads[k].empty()) continue;
    out.grads_.emplace(k, Tensor(tape.nodes_[k].shape, std::move(grads[k])));
  }
  tape.reset();
  return out;
}

Tensor Gradients::of(const Tensor& leaf) const {
  if (leaf.tape() != tape_ || leaf.grad_enabled() == false) {
    throw ContractError("tensor is not a leaf of the differentiated tape");
  }
  auto it = grads_.find(leaf.node());
  if (it == grads_.end()) return Tensor::zeros(leaf.shape());
  return it->second;
}

bool Gradients::contains(const Tensor& leaf) const {
  return leaf.tape() == tape_ && grads_.count(leaf.node()) > 0;
}

// ---- matrix -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }
  return Tape::record(Tensor({m, n}, std::move(out)), {&a, &b},
                      [a, b, m, k, n](std::span<const double> g, std::span<std::span<double>> gin) {
                        auto av = a.values();
                        auto bv = b.values();
                        if (!gin[0].empty()) {
                          // dA = G B^T
                          for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t p = 0; p < k; ++p) {
                              double acc = 0.0;
                              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
                              gin[0][i * k + p] += acc;
                            }
                          }
                        }
                        if (!gin[1].empty()) {
                          // dB = A^T G
                          for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t p = 0; p < k; ++p) {
                              const double x = av[i * k + p];
                              if (x == 0.0) continue;
                              for (std::size_t j = 0; j < n; ++j) gin[1][p * n + j] += x * g[i * n + j];
                            }
                          }
                        }
                      });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  auto av = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return Tape::record(Tensor({n, m}, std::move(out)), {&a},
                      [m, n](std::span<const double> g, std::span<std::span<double>> gin) {
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] += g[j * m + i];
                      });
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw DimensionError("softmax_rows: empty row dimension");
  auto xv = x.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &xv[i * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  Tensor y({m, n}, std::move(out));
  return Tape::record(y, {&x}, [y, m, n](std::span<const double> g, std::span<std::span<double>> gin) {
    auto yv = y.values();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * yv[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] += yv[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank2(x, "layer_norm");
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");
  const std::size_t m = x.rows(), d = x.cols();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma/beta length does not match row width " +
                         std::to_string(d));
  }
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> xhat(m * d), inv_std(m), out(m * d);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &xv[i * d];
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * inv_std[i];
      out[i * d + j] = gv[j] * xhat[i * d + j] + bv[j];
    }
  }
  return Tape::record(
      Tensor({m, d}, std::move(out)), {&x, &gamma, &beta},
      [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), m, d](
          std::span<const double> g, std::span<std::span<double>> gin) {
        auto gv = gamma.values();
        std::vector<double> dxhat(d);
        for (std::size_t i = 0; i < m; ++i) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gij = g[i * d + j];
            if (!gin[1].empty()) gin[1][j] += gij * xhat[i * d + j];
            if (!gin[2].empty()) gin[2][j] += gij;
            dxhat[j] = gij * gv[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xhat[i * d + j];
          }
          if (gin[0].empty()) continue;
          const double scale = inv_std[i] / static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gin[0][i * d + j] +=
                scale * (static_cast<double>(d) * dxhat[j] - s1 - xhat[i * d + j] * s2);
          }
        }
      });
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul); }

Tensor add(const Tensor& a, double b) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v += b;
  return Tape::record(Tensor(a.shape(), std::move(out)), {&a},
                      [](std::span<const double> g, std::span<std::span<double>> gin) {
                        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                      });
}

Tensor mul(const Tensor& a, double b) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= b;
  return Tape::record(Tensor(a.shape(), std::move(out)), {&a},
                      [b](std::span<const double> g, std::span<std::span<double>> gin) {
                        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * b;
                      });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return Tape::record(Tensor(x.shape(), std::move(out)), {&x},
                      [x](std::span<const double> g, std::span<std::span<double>> gin) {
                        auto xv = x.values();
                        for (std::size_t i = 0; i < g.size(); ++i)
                          if (xv[i] > 0.0) gin[0][i] += g[i];
                      });
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return Tape::record(Tensor::scalar(s), {&x},
                      [](std::span<const double> g, std::span<std::span<double>> gin) {
                        for (double& v : gin[0]) v += g[0];
                      });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.values()) s += v;
  return Tape::record(Tensor::scalar(s / n), {&x},
                      [n](std::span<const double> g, std::span<std::span<double>> gin) {
                        for (double& v : gin[0]) v += g[0] / n;
                      });
}

Tensor mean_rows(const Tensor& x) {
  require_rank2(x, "mean_rows");
  const std::size_t m = x.rows();
  if (m == 0) throw EmptyInputError("mean_rows: no rows");
  std::vector<std::size_t> all(m);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return pool_rows(x, {all});
}

// ---- structural -------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return Tape::record(Tensor(std::move(shape), x.to_vector()), {&x},
                      [](std::span<const double> g, std::span<std::span<double>> gin) {
                        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                      });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    offsets.push_back(total);
    total += p.cols();
  }
  std::vector<double> out(m * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].values();
    const std::size_t c = parts[k].cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(&pv[i * c], c, &out[i * total + offsets[k]]);
  }
  std::vector<const Tensor*> inputs;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    inputs.push_back(&p);
    widths.push_back(p.cols());
  }
  return Tape::record(Tensor({m, total}, std::move(out)), inputs,
                      [m, total, offsets, widths](std::span<const double> g,
                                                  std::span<std::span<double>> gin) {
                        for (std::size_t k = 0; k < gin.size(); ++k) {
                          if (gin[k].empty()) continue;
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < widths[k]; ++j)
                              gin[k][i * widths[k] + j] += g[i * total + offsets[k] + j];
                        }
                      });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const std::size_t n = parts.front().cols();
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  std::size_t rows = 0;
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) {
    if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
    rows += p.rows();
    inputs.push_back(&p);
  }
  return Tape::record(Tensor({rows, n}, std::move(out)), inputs,
                      [offsets](std::span<const double> g, std::span<std::span<double>> gin) {
                        for (std::size_t k = 0; k < gin.size(); ++k) {
                          for (std::size_t i = 0; i < gin[k].size(); ++i) gin[k][i] += g[offsets[k] + i];
                        }
                      });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank2(x, "gather_rows");
  const std::size_t d = x.cols();
  auto xv = x.values();
  std::vector<double> out;
  out.reserve(rows.size() * d);
  for (std::size_t r : rows) {
    if (r >= x.rows()) throw IndexError("gather_rows: row " + std::to_string(r) + " out of range");
    out.insert(out.end(), xv.begin() + static_cast<std::ptrdiff_t>(r * d),
               xv.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return Tape::record(Tensor({idx.size(), d}, std::move(out)), {&x},
                      [idx, d](std::span<const double> g, std::span<std::span<double>> gin) {
                        for (std::size_t i = 0; i < idx.size(); ++i)
                          for (std::size_t j = 0; j < d; ++j) gin[0][idx[i] * d + j] += g[i * d + j];
                      });
}

Tensor select_cols(const Tensor& x, std::span<const std::size_t> cols) {
  require_rank2(x, "select_cols");
  const std::size_t m = x.rows(), n = x.cols();
  for (std::size_t c : cols)
    if (c >= n) throw IndexError("select_cols: column " + std::to_string(c) + " out of range");
  auto xv = x.values();
  const std::size_t k = cols.size();
  std::vector<double> out(m * k);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = xv[i * n + cols[j]];
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  return Tape::record(Tensor({m, k}, std::move(out)), {&x},
                      [idx, m, n, k](std::span<const double> g, std::span<std::span<double>> gin) {
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < k; ++j) gin[0][i * n + idx[j]] += g[i * k + j];
                      });
}

Tensor pool_rows(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups) {
  require_rank2(x, "pool_rows");
  const std::size_t d = x.cols();
  auto xv = x.values();
  std::vector<double> out(groups.size() * d, 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw EmptyInputError("pool_rows: empty group");
    for (std::size_t r : groups[g]) {
      if (r >= x.rows()) throw IndexError("pool_rows: row out of range");
      for (std::size_t j = 0; j < d; ++j) out[g * d + j] += xv[r * d + j];
    }
    const double inv = 1.0 / static_cast<double>(groups[g].size());
    for (std::size_t j = 0; j < d; ++j) out[g * d + j] *= inv;
  }
  return Tape::record(Tensor({groups.size(), d}, std::move(out)), {&x},
                      [groups, d](std::span<const double> gr, std::span<std::span<double>> gin) {
                        for (std::size_t g = 0; g < groups.size(); ++g) {
                          const double inv = 1.0 / static_cast<double>(groups[g].size());
                          for (std::size_t r : groups[g])
                            for (std::size_t j = 0; j < d; ++j) gin[0][r * d + j] += gr[g * d + j] * inv;
                        }
                      });
}

// ---- stochastic / losses ----------------------------------------------------

Tensor dropout(const Tensor& x, double rate, Mode mode, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout rate must be in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  const double scale = 1.0 / (1.0 - rate);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = u(rng) < rate ? 0.0 : scale;
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return Tape::record(Tensor(x.shape(), std::move(out)), {&x},
                      [mask = std::move(mask)](std::span<const double> g,
                                               std::span<std::span<double>> gin) {
                        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * mask[i];
                      });
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("smooth_l1: shapes differ " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
  }
  const std::size_t n = pred.numel();
  if (n == 0) throw DimensionError("smooth_l1 of empty tensors");
  auto pv = pred.values();
  auto tv = target.values();
  std::vector<double> slope(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pv[i] - tv[i];
    if (std::abs(x) < 1.0) {
      total += 0.5 * x * x;
      slope[i] = x;
    } else {
      total += std::abs(x) - 0.5;
      slope[i] = x > 0 ? 1.0 : -1.0;
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  return Tape::record(Tensor::scalar(total * inv), {&pred, &target},
                      [slope = std::move(slope), inv](std::span<const double> g,
                                                      std::span<std::span<double>> gin) {
                        for (std::size_t i = 0; i < slope.size(); ++i) {
                          const double v = g[0] * slope[i] * inv;
                          if (!gin[0].empty()) gin[0][i] += v;
                          if (!gin[1].empty()) gin[1][i] -= v;
                        }
                      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank2(logits, "cross_entropy");
  const std::size_t m = logits.rows(), c = logits.cols();
  if (labels.size() != m) throw DimensionError("cross_entropy: label count differs from rows");
  if (m == 0) throw DimensionError("cross_entropy: no rows");
  for (std::size_t l : labels)
    if (l >= c) throw IndexError("cross_entropy: label " + std::to_string(l) + " out of range");
  auto lv = logits.values();
  std::vector<double> prob(m * c);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &lv[i * c];
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    total += log_z - row[labels[i]];
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] = std::exp(row[j] - log_z);
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const double inv = 1.0 / static_cast<double>(m);
  return Tape::record(Tensor::scalar(total * inv), {&logits},
                      [prob = std::move(prob), lab = std::move(lab), m, c, inv](
                          std::span<const double> g, std::span<std::span<double>> gin) {
                        for (std::size_t i = 0; i < m; ++i) {
                          for (std::size_t j = 0; j < c; ++j) {
                            const double onehot = j == lab[i] ? 1.0 : 0.0;
                            gin[0][i * c + j] += g[0] * (prob[i * c + j] - onehot) * inv;
                          }
                        }
                      });
}

}  // namespace protodet
