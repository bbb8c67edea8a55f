#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "protodet/error.hpp"

namespace protodet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

/// Dense row-major double tensor.
///
/// Tensors are immutable values: every operation returns a new tensor and
/// copies share storage. A tensor that was produced on a Tape (or watched by
/// one) carries a node reference and participates in differentiation.
/// Construction rejects non-finite values with NumericError.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row(std::span<const double> values);
  static Tensor row(std::initializer_list<double> values);
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return values_->size(); }
  // Rank-2 accessors; throw DimensionError otherwise.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const noexcept { return *values_; }
  std::vector<double> to_vector() const { return *values_; }
  std::vector<double> row_values(std::size_t r) const;
  double item() const;
  double operator[](std::size_t i) const { return (*values_)[i]; }
  double at(std::size_t r, std::size_t c) const;

  bool grad_enabled() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  std::size_t node() const noexcept { return node_; }
  Tensor detached() const;

  // True iff shapes and every value compare equal (bitwise for non-NaN).
  bool same_values(const Tensor& other) const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> values_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
  std::uint64_t generation_ = 0;
};

/// Gradients of a scalar loss with respect to every watched leaf.
class Gradients {
 public:
  // Gradient for a leaf produced by Tape::watch; zeros if the loss did not
  // depend on it.
  Tensor of(const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const;
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  friend Gradients backward(const Tensor& loss);
  std::uint64_t generation_ = 0;
  const Tape* tape_ = nullptr;
  std::map<std::size_t, Tensor> grads_;
};

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so inputs always precede the
/// operations that consume them. A tape is single-threaded and must outlive
/// every tensor recorded on it. backward() consumes the tape: afterwards it
/// is reset and tensors from the previous generation are rejected.
class Tape {
 public:
  // gin[i] is empty when input i does not require a gradient.
  using BackwardFn =
      std::function<void(std::span<const double> gout, std::span<std::span<double>> gin)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor watch(const Tensor& value);
  std::size_t size() const noexcept { return nodes_.size(); }
  std::uint64_t generation() const noexcept { return generation_; }
  void reset();

  // Records `out` as produced from `inputs`. Returns `out` unchanged when no
  // input is tracked.
  static Tensor record(Tensor out, std::initializer_list<const Tensor*> inputs, BackwardFn fn);
  static Tensor record(Tensor out, const std::vector<const Tensor*>& inputs, BackwardFn fn);

 private:
  friend Gradients backward(const Tensor& loss);
  static constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);
  struct Node {
    Shape shape;
    std::vector<std::size_t> inputs;  // kNoNode for untracked inputs
    BackwardFn backward;              // empty for leaves
  };
  void check_owned(const Tensor& t) const;

  std::vector<Node> nodes_;
  std::uint64_t generation_;
};

/// Reverse-mode pass from a scalar loss. Throws ContractError for a
/// non-scalar loss and MissingTapeError for a detached one. Resets the tape.
Gradients backward(const Tensor& loss);

// ---- matrix operations (rank 2) ---------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& x);

/// Normalizes each row of x (m×d) to zero mean / unit variance, then scales by
/// gamma and shifts by beta (both of length d).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ---- elementwise --------------------------------------------------------
// Broadcasting: equal shapes, a scalar operand (numel 1), or a vector along
// the last axis (shape {d} or {1, d}).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor relu(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- reductions ---------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Column means over rows: m×d -> 1×d.
Tensor mean_rows(const Tensor& x);

// ---- structural ---------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor select_cols(const Tensor& x, std::span<const std::size_t> cols);
// Output row g is the mean of x's rows listed in groups[g].
Tensor pool_rows(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups);

// ---- stochastic / losses ------------------------------------------------

enum class Mode { train, eval };

/// Inverted dropout: in train mode each entry is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate). Eval mode returns x.
Tensor dropout(const Tensor& x, double rate, Mode mode, std::mt19937_64& rng);

/// Mean over elements of 0.5 x^2 (|x|<1) or |x|-0.5, x = pred - target.
Tensor smooth_l1(const Tensor& pred, const Tensor& target);

/// Mean negative log-softmax probability of the labelled class.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace protodet
