#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "iselab/errors.hpp"

namespace iselab {

/// Dense row-major tensor. Copies share the underlying buffers (handle
/// semantics); `grad` is allocated only for tensors that participate in
/// differentiation. `node` is the index of the producing operation on the
/// tape that recorded it, or -1 for leaves and untracked values.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;
  int node = -1;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool with_grad = false);
  static Tensor full(std::vector<int> shape, T value, bool with_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<T> values, bool with_grad = false);

  std::size_t numel() const;
  int dim() const { return static_cast<int>(shape.size()); }
  int rows() const;
  int cols() const;

  T& at(int r, int c) { return (*data)[static_cast<std::size_t>(r) * cols() + c]; }
  const T& at(int r, int c) const { return (*data)[static_cast<std::size_t>(r) * cols() + c]; }

  /// Value of a scalar (1-element) tensor.
  T value() const;

  bool tracked() const { return static_cast<bool>(grad); }
  void ensure_grad();
  void zero_grad();
  T* grad_at(int r, int c) { return grad->data() + static_cast<std::size_t>(r) * cols() + c; }
};

/// Reverse-mode computation tape. Operations append nodes in execution
/// order, so every node's parents precede it; backward() replays the hooks
/// once, in reverse. One tape is active per thread at a time (see Scope);
/// tapes on distinct threads are independent.
template <typename T>
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<int> parents;
    std::shared_ptr<std::vector<T>> out_grad;
    std::function<void()> backward;
  };

  int record(std::string op, std::vector<int> parents, std::shared_ptr<std::vector<T>> out_grad,
             std::function<void()> backward) {
    nodes_.push_back(Node{std::move(op), std::move(parents), std::move(out_grad), std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  /// Resets the gradients of tensors produced on this tape (leaf gradients
  /// are left alone), seeds d(loss)/d(loss) = 1 and runs every recorded
  /// hook in reverse order. Repeated calls accumulate one gradient copy
  /// into the leaves per call.
  void backward(Tensor<T>& loss);

  static Tape* active() { return active_slot(); }

  /// RAII activation: ops record onto the innermost active tape of the
  /// current thread; with no active tape they are pure forward computations.
  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(active_slot()) { active_slot() = &tape; }
    ~Scope() { active_slot() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

 private:
  static Tape*& active_slot() {
    thread_local Tape* active = nullptr;
    return active;
  }

  std::vector<Node> nodes_;
};

/// Runs backward on the active tape. Throws TapeError when no tape is
/// active or the loss was not recorded, ShapeError for non-scalar losses.
template <typename T>
void backward(Tensor<T>& loss);

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// [m×k]·[k×n] -> [m×n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int begin, int length);

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);

/// Row-wise softmax with per-row max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

/// Softmax over the causal prefix: row m is normalized over columns
/// j <= m, and entries past the diagonal are exactly zero. Requires a
/// square input.
template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& x);

/// Row-wise RMS normalization: x / sqrt(mean(x^2) + eps), scaled by gain.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain);

template <typename T>
Tensor<T> silu(const Tensor<T>& x);

/// Gathers rows of `table` at `ids`; backward scatter-adds into the table
/// gradient so repeated ids accumulate.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids);

/// Mean negative log-softmax probability of `targets` over positions where
/// `mask` is true. Throws on an all-false mask.
template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                               const std::vector<bool>& mask);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// Rotary position encoding over pair dimensions (2i, 2i+1) of each row;
/// rotation angle is positions[row] * theta^(-2i/d). Requires even width.
template <typename T>
Tensor<T> rope_rotate(const Tensor<T>& qk, const std::vector<int>& positions, double theta);

inline constexpr double kRmsNormEps = 1e-5;

void assert_finite(const std::vector<float>& values, const char* what);
void assert_finite(const std::vector<double>& values, const char* what);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
};

inline constexpr double kGradCheckStep = 1e-5;

/// Floor of the relative-error denominator. Central differences on a loss
/// of magnitude |f| carry absolute noise around eps*|f|/(2h) ~ 1e-11, so
/// the floor must sit well above noise/tol for near-zero gradients; a
/// genuinely wrong backward rule still shows relative errors >= 1e-2.
inline constexpr double kGradCheckDenomFloor = 1e-4;

/// Compares the tape gradient of f with central finite differences taken
/// over every element of x. f must build a scalar result from x using tape
/// ops. Relative error uses denominator max(|a|, |b|, denom floor).
template <typename F>
GradCheckReport grad_check(F&& f, Tensor<double>& x, double tol) {
  x.ensure_grad();
  x.zero_grad();
  Tape<double> tape;
  {
    typename Tape<double>::Scope scope(tape);
    Tensor<double> y = f(x);
    tape.backward(y);
  }
  std::vector<double> analytic = *x.grad;

  GradCheckReport report;
  const double h = kGradCheckStep;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double saved = (*x.data)[i];
    (*x.data)[i] = saved + h;
    const double up = f(x).value();
    (*x.data)[i] = saved - h;
    const double down = f(x).value();
    (*x.data)[i] = saved;
    const double fd = (up - down) / (2.0 * h);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(fd), kGradCheckDenomFloor});
    const double rel = std::abs(a - fd) / denom;
    if (rel > report.max_rel_err) report.max_rel_err = rel;
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace iselab
