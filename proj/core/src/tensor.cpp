#include "iselab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace iselab {

namespace {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.dim() != 2) throw ShapeError(std::string(op) + ": expected a 2-d tensor");
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape != b.shape) throw ShapeError(std::string(op) + ": shape mismatch");
}

/// True when the result of an op over these inputs should be recorded.
template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->tracked()) return true;
  }
  return false;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<int> shape, bool with_grad) {
  Tensor<T> t;
  const std::size_t n = shape_numel(shape);
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<T>>(n, T(0));
  if (with_grad) t.grad = std::make_shared<std::vector<T>>(n, T(0));
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<int> shape, T value, bool with_grad) {
  Tensor<T> t = zeros(std::move(shape), with_grad);
  std::fill(t.data->begin(), t.data->end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(std::vector<int> shape, std::vector<T> values, bool with_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from: value count does not match shape");
  }
  Tensor<T> t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<T>>(std::move(values));
  if (with_grad) t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
  return t;
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return data ? data->size() : 0;
}

template <typename T>
int Tensor<T>::rows() const {
  if (dim() != 2) throw ShapeError("rows: not a 2-d tensor");
  return shape[0];
}

template <typename T>
int Tensor<T>::cols() const {
  if (dim() != 2) throw ShapeError("cols: not a 2-d tensor");
  return shape[1];
}

template <typename T>
T Tensor<T>::value() const {
  if (numel() != 1) throw ShapeError("value: tensor is not a scalar");
  return (*data)[0];
}

template <typename T>
void Tensor<T>::ensure_grad() {
  if (!grad) grad = std::make_shared<std::vector<T>>(numel(), T(0));
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), T(0));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename T>
void Tape<T>::backward(Tensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
  if (loss.node < 0 || !loss.tracked()) {
    throw TapeError("backward: loss is not recorded on this tape");
  }
  for (auto& node : nodes_) {
    if (node.out_grad) std::fill(node.out_grad->begin(), node.out_grad->end(), T(0));
  }
  (*loss.grad)[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
}

template <typename T>
void backward(Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) throw TapeError("backward: no active tape");
  tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  if (tracking<T>({&a, &b})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("add", {a.node, b.node}, out.grad, [a, b, out]() {
      const std::size_t n2 = out.numel();
      if (a.tracked())
        for (std::size_t i = 0; i < n2; ++i) (*a.grad)[i] += (*out.grad)[i];
      if (b.tracked())
        for (std::size_t i = 0; i < n2; ++i) (*b.grad)[i] += (*out.grad)[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  if (tracking<T>({&a, &b})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("mul", {a.node, b.node}, out.grad, [a, b, out]() {
      const std::size_t n2 = out.numel();
      if (a.tracked())
        for (std::size_t i = 0; i < n2; ++i) (*a.grad)[i] += (*out.grad)[i] * (*b.data)[i];
      if (b.tracked())
        for (std::size_t i = 0; i < n2; ++i) (*b.grad)[i] += (*out.grad)[i] * (*a.data)[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * factor;
  if (tracking<T>({&a})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("scale", {a.node}, out.grad, [a, out, factor]() {
      if (!a.tracked()) return;
      const std::size_t n2 = out.numel();
      for (std::size_t i = 0; i < n2; ++i) (*a.grad)[i] += (*out.grad)[i] * factor;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

namespace {

/// c[m×n] += a[m×k] · b[k×n], ikj order.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ.
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n].
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    const T* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> out = Tensor<T>::zeros({m, n});
  gemm_acc(a.data->data(), b.data->data(), out.data->data(), m, k, n);
  if (tracking<T>({&a, &b})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("matmul", {a.node, b.node}, out.grad, [a, b, out, m, k, n]() {
      if (a.tracked()) gemm_nt_acc(out.grad->data(), b.data->data(), a.grad->data(), m, n, k);
      if (b.tracked()) gemm_tn_acc(a.data->data(), out.grad->data(), b.grad->data(), m, k, n);
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_2d(a, "transpose");
  const int m = a.rows(), n = a.cols();
  Tensor<T> out = Tensor<T>::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  if (tracking<T>({&a})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("transpose", {a.node}, out.grad, [a, out, m, n]() {
      if (!a.tracked()) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          (*a.grad)[static_cast<std::size_t>(i) * n + j] +=
              (*out.grad)[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int begin, int length) {
  require_2d(a, "slice_cols");
  if (begin < 0 || length <= 0 || begin + length > a.cols()) {
    throw ShapeError("slice_cols: range out of bounds");
  }
  const int m = a.rows(), n = a.cols();
  Tensor<T> out = Tensor<T>::zeros({m, length});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < length; ++j) out.at(i, j) = a.at(i, begin + j);
  if (tracking<T>({&a})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("slice_cols", {a.node}, out.grad, [a, out, m, n, begin, length]() {
      if (!a.tracked()) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < length; ++j)
          (*a.grad)[static_cast<std::size_t>(i) * n + begin + j] +=
              (*out.grad)[static_cast<std::size_t>(i) * length + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int m = parts.front().rows();
  int total = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != m) throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
  }
  Tensor<T> out = Tensor<T>::zeros({m, total});
  int offset = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < p.cols(); ++j) out.at(i, offset + j) = p.at(i, j);
    offset += p.cols();
  }
  bool track = false;
  for (const auto& p : parts) track = track || p.tracked();
  if (Tape<T>::active() && track) {
    out.ensure_grad();
    std::vector<int> parent_ids;
    for (const auto& p : parts) parent_ids.push_back(p.node);
    std::vector<Tensor<T>> held = parts;
    out.node = Tape<T>::active()->record("concat_cols", std::move(parent_ids), out.grad, [held, out, m, total]() {
      int off = 0;
      for (const auto& p : held) {
        if (p.tracked()) {
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < p.cols(); ++j)
              (*p.grad)[static_cast<std::size_t>(i) * p.cols() + j] +=
                  (*out.grad)[static_cast<std::size_t>(i) * total + off + j];
        }
        off += p.cols();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_2d(x, "softmax_rows");
  const int m = x.rows(), n = x.cols();
  Tensor<T> out = Tensor<T>::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    T mx = x.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
    T denom = T(0);
    for (int j = 0; j < n; ++j) {
      const T e = std::exp(x.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= denom;
  }
  if (tracking<T>({&x})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("softmax_rows", {x.node}, out.grad, [x, out, m, n]() {
      if (!x.tracked()) return;
      for (int i = 0; i < m; ++i) {
        T dot = T(0);
        for (int j = 0; j < n; ++j)
          dot += (*out.grad)[static_cast<std::size_t>(i) * n + j] * out.at(i, j);
        for (int j = 0; j < n; ++j) {
          const T g = (*out.grad)[static_cast<std::size_t>(i) * n + j];
          (*x.grad)[static_cast<std::size_t>(i) * n + j] += out.at(i, j) * (g - dot);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& x) {
  require_2d(x, "causal_softmax");
  if (x.rows() != x.cols()) throw ShapeError("causal_softmax: square input required");
  const int m = x.rows();
  Tensor<T> out = Tensor<T>::zeros({m, m});
  for (int i = 0; i < m; ++i) {
    T mx = x.at(i, 0);
    for (int j = 1; j <= i; ++j) mx = std::max(mx, x.at(i, j));
    T denom = T(0);
    for (int j = 0; j <= i; ++j) {
      const T e = std::exp(x.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (int j = 0; j <= i; ++j) out.at(i, j) /= denom;
  }
  if (tracking<T>({&x})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("causal_softmax", {x.node}, out.grad, [x, out, m]() {
      if (!x.tracked()) return;
      for (int i = 0; i < m; ++i) {
        T dot = T(0);
        for (int j = 0; j <= i; ++j)
          dot += (*out.grad)[static_cast<std::size_t>(i) * m + j] * out.at(i, j);
        for (int j = 0; j <= i; ++j) {
          const T g = (*out.grad)[static_cast<std::size_t>(i) * m + j];
          (*x.grad)[static_cast<std::size_t>(i) * m + j] += out.at(i, j) * (g - dot);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain) {
  require_2d(x, "rms_norm");
  const int m = x.rows(), d = x.cols();
  if (gain.dim() != 1 || gain.shape[0] != d) throw ShapeError("rms_norm: gain must have shape [d]");
  Tensor<T> out = Tensor<T>::zeros({m, d});
  std::vector<T> inv_rms(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    T ss = T(0);
    for (int j = 0; j < d; ++j) ss += x.at(i, j) * x.at(i, j);
    const T r = T(1) / std::sqrt(ss / T(d) + T(kRmsNormEps));
    inv_rms[static_cast<std::size_t>(i)] = r;
    for (int j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) * r * (*gain.data)[j];
  }
  if (tracking<T>({&x, &gain})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("rms_norm", {x.node, gain.node}, out.grad, [x, gain, out, inv_rms, m, d]() {
      for (int i = 0; i < m; ++i) {
        const T r = inv_rms[static_cast<std::size_t>(i)];
        if (gain.tracked()) {
          for (int j = 0; j < d; ++j)
            (*gain.grad)[j] += (*out.grad)[static_cast<std::size_t>(i) * d + j] * x.at(i, j) * r;
        }
        if (x.tracked()) {
          T dot = T(0);
          for (int j = 0; j < d; ++j)
            dot += (*out.grad)[static_cast<std::size_t>(i) * d + j] * (*gain.data)[j] * x.at(i, j);
          const T coeff = dot * r * r * r / T(d);
          for (int j = 0; j < d; ++j) {
            const T g = (*out.grad)[static_cast<std::size_t>(i) * d + j] * (*gain.data)[j];
            (*x.grad)[static_cast<std::size_t>(i) * d + j] += g * r - x.at(i, j) * coeff;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const T v = (*x.data)[i];
    (*out.data)[i] = v / (T(1) + std::exp(-v));
  }
  if (tracking<T>({&x})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("silu", {x.node}, out.grad, [x, out]() {
      if (!x.tracked()) return;
      const std::size_t n2 = out.numel();
      for (std::size_t i = 0; i < n2; ++i) {
        const T v = (*x.data)[i];
        const T sig = T(1) / (T(1) + std::exp(-v));
        (*x.grad)[i] += (*out.grad)[i] * sig * (T(1) + v * (T(1) - sig));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lookup / loss / reduction
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids) {
  require_2d(table, "embedding_lookup");
  const int r = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= r) throw IndexError("embedding_lookup: id out of range");
  }
  const int m = static_cast<int>(ids.size());
  Tensor<T> out = Tensor<T>::zeros({m, d});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) = table.at(ids[static_cast<std::size_t>(i)], j);
  if (tracking<T>({&table})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("embedding_lookup", {table.node}, out.grad, [table, out, ids, m, d]() {
      if (!table.tracked()) return;
      for (int i = 0; i < m; ++i) {
        const int id = ids[static_cast<std::size_t>(i)];
        for (int j = 0; j < d; ++j)
          (*table.grad)[static_cast<std::size_t>(id) * d + j] +=
              (*out.grad)[static_cast<std::size_t>(i) * d + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                               const std::vector<bool>& mask) {
  require_2d(logits, "masked_cross_entropy");
  const int m = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != m || static_cast<int>(mask.size()) != m) {
    throw ShapeError("masked_cross_entropy: targets/mask length must equal row count");
  }
  int count = 0;
  for (bool b : mask) count += b ? 1 : 0;
  if (count == 0) throw ShapeError("masked_cross_entropy: degenerate all-false mask");
  for (int i = 0; i < m; ++i) {
    if (mask[static_cast<std::size_t>(i)] && (targets[static_cast<std::size_t>(i)] < 0 ||
                                              targets[static_cast<std::size_t>(i)] >= v)) {
      throw IndexError("masked_cross_entropy: target out of range");
    }
  }

  // log-softmax per masked row, accumulated in double for stability
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    T mx = logits.at(i, 0);
    for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(i, j));
    double denom = 0.0;
    for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(logits.at(i, j) - mx));
    const double lp = static_cast<double>(logits.at(i, targets[static_cast<std::size_t>(i)]) - mx) -
                      std::log(denom);
    total -= lp;
  }
  Tensor<T> out = Tensor<T>::from({1}, {static_cast<T>(total / count)});
  if (tracking<T>({&logits})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("masked_cross_entropy", {logits.node}, out.grad,
                                         [logits, out, targets, mask, m, v, count]() {
      if (!logits.tracked()) return;
      const T upstream = (*out.grad)[0];
      for (int i = 0; i < m; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        T mx = logits.at(i, 0);
        for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(i, j));
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(logits.at(i, j) - mx));
        for (int j = 0; j < v; ++j) {
          const double p = std::exp(static_cast<double>(logits.at(i, j) - mx)) / denom;
          const double indicator = (j == targets[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
          (*logits.grad)[static_cast<std::size_t>(i) * v + j] +=
              upstream * static_cast<T>((p - indicator) / count);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (const T& v : *x.data) total += v;
  Tensor<T> out = Tensor<T>::from({1}, {total});
  if (tracking<T>({&x})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("sum", {x.node}, out.grad, [x, out]() {
      if (!x.tracked()) return;
      const T g = (*out.grad)[0];
      for (std::size_t i = 0; i < x.numel(); ++i) (*x.grad)[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rotary position encoding
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void rope_apply(const T* in, T* out, const std::vector<int>& positions, double theta, int m, int d,
                bool invert) {
  const int pairs = d / 2;
  for (int i = 0; i < m; ++i) {
    const double pos = static_cast<double>(positions[static_cast<std::size_t>(i)]);
    for (int p = 0; p < pairs; ++p) {
      const double freq = std::pow(theta, -2.0 * p / d);
      double angle = pos * freq;
      if (invert) angle = -angle;
      const T c = static_cast<T>(std::cos(angle));
      const T s = static_cast<T>(std::sin(angle));
      const std::size_t base = static_cast<std::size_t>(i) * d + 2 * p;
      const T x0 = in[base];
      const T x1 = in[base + 1];
      out[base] = x0 * c - x1 * s;
      out[base + 1] = x0 * s + x1 * c;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> rope_rotate(const Tensor<T>& qk, const std::vector<int>& positions, double theta) {
  require_2d(qk, "rope_rotate");
  const int m = qk.rows(), d = qk.cols();
  if (d % 2 != 0) throw ConfigError("rope_rotate: head dimension must be even");
  if (static_cast<int>(positions.size()) != m) {
    throw ShapeError("rope_rotate: one position per row required");
  }
  Tensor<T> out = Tensor<T>::zeros({m, d});
  rope_apply(qk.data->data(), out.data->data(), positions, theta, m, d, false);
  if (tracking<T>({&qk})) {
    out.ensure_grad();
    out.node = Tape<T>::active()->record("rope_rotate", {qk.node}, out.grad, [qk, out, positions, theta, m, d]() {
      if (!qk.tracked()) return;
      // Jacobian of a rotation is the inverse rotation.
      std::vector<T> tmp(static_cast<std::size_t>(m) * d);
      rope_apply(out.grad->data(), tmp.data(), positions, theta, m, d, true);
      for (std::size_t i = 0; i < tmp.size(); ++i) (*qk.grad)[i] += tmp[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finiteness guard
// ---------------------------------------------------------------------------

namespace {
template <typename T>
void assert_finite_impl(const std::vector<T>& values, const char* what) {
  for (const T& v : values) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError(std::string(what) + ": non-finite value");
    }
  }
}
}  // namespace

void assert_finite(const std::vector<float>& values, const char* what) {
  assert_finite_impl(values, what);
}
void assert_finite(const std::vector<double>& values, const char* what) {
  assert_finite_impl(values, what);
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define ISELAB_INSTANTIATE_OPS(T)                                                              \
  template struct Tensor<T>;                                                                   \
  template class Tape<T>;                                                                      \
  template void backward<T>(Tensor<T>&);                                                       \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                            \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                           \
  template Tensor<T> slice_cols<T>(const Tensor<T>&, int, int);                                \
  template Tensor<T> concat_cols<T>(const std::vector<Tensor<T>>&);                            \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                        \
  template Tensor<T> causal_softmax<T>(const Tensor<T>&);                                      \
  template Tensor<T> rms_norm<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> silu<T>(const Tensor<T>&);                                                \
  template Tensor<T> embedding_lookup<T>(const Tensor<T>&, const std::vector<int>&);           \
  template Tensor<T> masked_cross_entropy<T>(const Tensor<T>&, const std::vector<int>&,        \
                                             const std::vector<bool>&);                        \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                 \
  template Tensor<T> rope_rotate<T>(const Tensor<T>&, const std::vector<int>&, double);

ISELAB_INSTANTIATE_OPS(float)
ISELAB_INSTANTIATE_OPS(double)

#undef ISELAB_INSTANTIATE_OPS

}  // namespace iselab
