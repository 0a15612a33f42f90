#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "mnmt/common.hpp"
#include "mnmt/threading.hpp"

namespace mnmt {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Integer id matrix (token ids, masks). Not differentiable.
struct IdMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<int32_t> v;

  IdMatrix() = default;
  IdMatrix(int64_t r, int64_t c, int32_t fill = 0)
      : rows(r), cols(c), v(static_cast<size_t>(r * c), fill) {}
  int32_t& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
  int32_t at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
};

template <class T>
class Tape;

// Dense row-major tensor. data and grad buffers are shared (views alias
// them); grad is present only for tensors participating in differentiation.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    check_shape(t.shape_);
    t.data_ = std::make_shared<std::vector<T>>(static_cast<size_t>(shape_numel(t.shape_)), T(0));
    return t;
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    check_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw dimension_error("tensor data length " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static Tensor scalar_of(T value) { return from({1}, {value}); }

  const Shape& shape() const { return shape_; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  std::vector<T>& data() { return *data_; }
  const std::vector<T>& data() const { return *data_; }
  const std::shared_ptr<std::vector<T>>& data_ptr() const { return data_; }

  bool has_grad() const { return static_cast<bool>(grad_); }
  std::vector<T>& grad() { return *grad_; }
  const std::vector<T>& grad() const { return *grad_; }
  const std::shared_ptr<std::vector<T>>& grad_ptr() const { return grad_; }

  void ensure_grad() {
    if (!grad_) grad_ = std::make_shared<std::vector<T>>(data_->size(), T(0));
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }

  // Reinterprets the flat buffer under a new shape; data and grad are shared.
  Tensor view(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
      throw dimension_error("view " + shape_str(new_shape) + " incompatible with " +
                            shape_str(shape_));
    Tensor t = *this;
    t.shape_ = std::move(new_shape);
    return t;
  }

  // Same data, no grad participation.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  T item() const {
    if (numel() != 1) throw contract_error("item() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
  }

  int64_t node() const { return node_; }
  void set_node(int64_t id) { node_ = id; }

 private:
  static void check_shape(const Shape& s) {
    for (int64_t d : s)
      if (d <= 0) throw dimension_error("non-positive extent in shape " + shape_str(s));
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<std::vector<T>> grad_;
  int64_t node_ = -1;  // producing op on the tape, -1 for leaves
};

// Reverse-mode tape. Ops append one node each in execution order, which is a
// valid topological order; backward replays nodes in reverse exactly once.
template <class T>
class Tape {
 public:
  int64_t record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
    return static_cast<int64_t>(nodes_.size()) - 1;
  }

  // Registers a grad buffer so clear() can zero it.
  void watch(Tensor<T>& t) {
    if (!t.has_grad()) t.ensure_grad();
    const void* key = t.grad_ptr().get();
    if (watched_set_.insert(key).second) watched_.push_back(t.grad_ptr());
  }

  void backward(const Tensor<T>& loss) {
    if (consumed_)
      throw contract_error("backward() called twice on the same tape; clear() first");
    if (loss.numel() != 1)
      throw contract_error("backward() requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.has_grad())
      throw contract_error("backward() loss does not participate in this tape");
    loss.grad_ptr()->at(0) += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    consumed_ = true;
  }

  // Zeroes every watched grad and resets the tape for reuse.
  void clear() {
    for (auto& g : watched_)
      if (g) std::fill(g->begin(), g->end(), T(0));
    nodes_.clear();
    watched_.clear();
    watched_set_.clear();
    consumed_ = false;
  }

  bool consumed() const { return consumed_; }
  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<std::vector<T>>> watched_;
  std::unordered_set<const void*> watched_set_;
  bool consumed_ = false;
};

namespace ops {

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T  (dot-product form). The reduction runs in
// fixed lane order so results are deterministic while still vectorizing.
template <class T>
void gemm_bt_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  constexpr int64_t W = 16;
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T lanes[W] = {};
      int64_t p = 0;
      for (; p + W <= k; p += W)
        for (int64_t l = 0; l < W; ++l) lanes[l] += arow[p + l] * brow[p + l];
      T acc = T(0);
      for (; p < k; ++p) acc += arow[p] * brow[p];
      for (int64_t l = 0; l < W; ++l) acc += lanes[l];
      crow[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n], restricted to output rows [p0, p1)
template <class T>
void gemm_at_acc_rows(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, int64_t p0,
                      int64_t p1) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (int64_t p = p0; p < p1; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void gemm_at_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  gemm_at_acc_rows(a, b, c, m, k, n, 0, k);
}

inline bool parallel_worthwhile(int64_t flops) { return flops >= (int64_t{1} << 21); }

// Row-partitioned parallel wrappers. Every output element is produced by one
// worker with the serial accumulation order, so any thread count gives
// bit-identical results.
template <class T>
void p_gemm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  if (!parallel_worthwhile(2 * m * k * n)) {
    gemm_acc(a, b, c, m, k, n);
    return;
  }
  ThreadPool::instance().parallel_ranges(
      m, [&](int64_t r0, int64_t r1) { gemm_acc(a + r0 * k, b, c + r0 * n, r1 - r0, k, n); });
}

template <class T>
void p_gemm_bt_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  if (!parallel_worthwhile(2 * m * k * n)) {
    gemm_bt_acc(a, b, c, m, k, n);
    return;
  }
  ThreadPool::instance().parallel_ranges(m, [&](int64_t r0, int64_t r1) {
    gemm_bt_acc(a + r0 * k, b, c + r0 * n, r1 - r0, k, n);
  });
}

template <class T>
void p_gemm_at_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  if (!parallel_worthwhile(2 * m * k * n)) {
    gemm_at_acc(a, b, c, m, k, n);
    return;
  }
  ThreadPool::instance().parallel_ranges(
      k, [&](int64_t p0, int64_t p1) { gemm_at_acc_rows(a, b, c, m, k, n, p0, p1); });
}

template <class T>
bool any_grad(const Tensor<T>& a) {
  return a.has_grad();
}

template <class T, class... Rest>
bool any_grad(const Tensor<T>& a, const Rest&... rest) {
  return a.has_grad() || any_grad(rest...);
}

}  // namespace detail

template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw dimension_error("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::p_gemm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (detail::any_grad(a, b)) {
    out.ensure_grad();
    Tensor<T> ac = a, bc = b, oc = out;
    if (ac.has_grad()) tape.watch(ac);
    if (bc.has_grad()) tape.watch(bc);
    tape.watch(oc);
    out.set_node(tape.record([ac, bc, oc, m, k, n]() mutable {
      const T* g = oc.grad().data();
      if (ac.has_grad())  // dA += G * B^T
        detail::p_gemm_bt_acc(g, bc.data().data(), ac.grad().data(), m, n, k);
      if (bc.has_grad())  // dB += A^T * G
        detail::p_gemm_at_acc(ac.data().data(), g, bc.grad().data(), m, k, n);
    }));
  }
  return out;
}

// Batched matmul over matching leading dim: [B,m,k] x [B,k,n] -> [B,m,n].
// trans_b treats b as [B,n,k] and multiplies by its transpose.
template <class T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0))
    throw dimension_error("bmm shape mismatch: " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
  const int64_t bsz = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int64_t n = trans_b ? b.dim(1) : b.dim(2);
  const int64_t bk = trans_b ? b.dim(2) : b.dim(1);
  if (bk != k)
    throw dimension_error("bmm inner dim mismatch: " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()) + (trans_b ? " (b transposed)" : ""));
  Tensor<T> out = Tensor<T>::zeros({bsz, m, n});
  {
    const T* abase = a.data().data();
    const T* bbase = b.data().data();
    T* obase = out.data().data();
    auto run = [&](int64_t e0, int64_t e1) {
      for (int64_t e = e0; e < e1; ++e) {
        const T* ap = abase + e * m * k;
        const T* bp = bbase + e * (trans_b ? n * k : k * n);
        T* op = obase + e * m * n;
        if (trans_b)
          detail::gemm_bt_acc(ap, bp, op, m, k, n);
        else
          detail::gemm_acc(ap, bp, op, m, k, n);
      }
    };
    if (detail::parallel_worthwhile(2 * bsz * m * k * n))
      ThreadPool::instance().parallel_ranges(bsz, run);
    else
      run(0, bsz);
  }
  if (detail::any_grad(a, b)) {
    out.ensure_grad();
    Tensor<T> ac = a, bc = b, oc = out;
    if (ac.has_grad()) tape.watch(ac);
    if (bc.has_grad()) tape.watch(bc);
    tape.watch(oc);
    out.set_node(tape.record([ac, bc, oc, bsz, m, k, n, trans_b]() mutable {
      auto run = [&](int64_t e0, int64_t e1) {
        for (int64_t e = e0; e < e1; ++e) {
          const T* g = oc.grad().data() + e * m * n;
          const T* ap = ac.data().data() + e * m * k;
          const T* bp = bc.data().data() + e * (trans_b ? n * k : k * n);
          if (ac.has_grad()) {
            T* da = ac.grad().data() + e * m * k;
            if (trans_b)  // out = A B^T: dA += G * B
              detail::gemm_acc(g, bp, da, m, n, k);
            else  // dA += G * B^T
              detail::gemm_bt_acc(g, bp, da, m, n, k);
          }
          if (bc.has_grad()) {
            T* db = bc.grad().data() + e * (trans_b ? n * k : k * n);
            if (trans_b)  // out = A B^T: dB += G^T * A
              detail::gemm_at_acc(g, ap, db, m, n, k);
            else  // dB += A^T * G
              detail::gemm_at_acc(ap, g, db, m, k, n);
          }
        }
      };
      if (detail::parallel_worthwhile(4 * bsz * m * k * n))
        ThreadPool::instance().parallel_ranges(bsz, run);
      else
        run(0, bsz);
    }));
  }
  return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw dimension_error("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::any_grad(a, b)) {
    out.ensure_grad();
    Tensor<T> ac = a, bc = b, oc = out;
    if (ac.has_grad()) tape.watch(ac);
    if (bc.has_grad()) tape.watch(bc);
    tape.watch(oc);
    out.set_node(tape.record([ac, bc, oc, n]() mutable {
      const T* g = oc.grad().data();
      if (ac.has_grad()) {
        T* da = ac.grad().data();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (bc.has_grad()) {
        T* db = bc.grad().data();
        for (int64_t i = 0; i < n; ++i) db[i] += g[i];
      }
    }));
  }
  return out;
}

// a[..., d] + bias[d]
template <class T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& bias) {
  if (bias.ndim() != 1 || a.dim(a.ndim() - 1) != bias.dim(0))
    throw dimension_error("add_bias shape mismatch: " + shape_str(a.shape()) + " + " +
                          shape_str(bias.shape()));
  const int64_t d = bias.dim(0);
  const int64_t rows = a.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j)
      out.data()[r * d + j] = a.data()[r * d + j] + bias.data()[j];
  if (detail::any_grad(a, bias)) {
    out.ensure_grad();
    Tensor<T> ac = a, bc = bias, oc = out;
    if (ac.has_grad()) tape.watch(ac);
    if (bc.has_grad()) tape.watch(bc);
    tape.watch(oc);
    out.set_node(tape.record([ac, bc, oc, rows, d]() mutable {
      const T* g = oc.grad().data();
      if (ac.has_grad()) {
        T* da = ac.grad().data();
        for (int64_t i = 0; i < rows * d; ++i) da[i] += g[i];
      }
      if (bc.has_grad()) {
        T* db = bc.grad().data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < d; ++j) db[j] += g[r * d + j];
      }
    }));
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = c * a.data()[i];
  if (a.has_grad()) {
    out.ensure_grad();
    Tensor<T> ac = a, oc = out;
    tape.watch(ac);
    tape.watch(oc);
    out.set_node(tape.record([ac, oc, c, n]() mutable {
      const T* g = oc.grad().data();
      T* da = ac.grad().data();
      for (int64_t i = 0; i < n; ++i) da[i] += c * g[i];
    }));
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw dimension_error("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::any_grad(a, b)) {
    out.ensure_grad();
    Tensor<T> ac = a, bc = b, oc = out;
    if (ac.has_grad()) tape.watch(ac);
    if (bc.has_grad()) tape.watch(bc);
    tape.watch(oc);
    out.set_node(tape.record([ac, bc, oc, n]() mutable {
      const T* g = oc.grad().data();
      if (ac.has_grad()) {
        T* da = ac.grad().data();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i] * bc.data()[i];
      }
      if (bc.has_grad()) {
        T* db = bc.grad().data();
        for (int64_t i = 0; i < n; ++i) db[i] += g[i] * ac.data()[i];
      }
    }));
  }
  return out;
}

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  if (a.has_grad()) {
    out.ensure_grad();
    Tensor<T> ac = a, oc = out;
    tape.watch(ac);
    tape.watch(oc);
    out.set_node(tape.record([ac, oc, n]() mutable {
      const T* g = oc.grad().data();
      T* da = ac.grad().data();
      for (int64_t i = 0; i < n; ++i)
        if (ac.data()[i] > T(0)) da[i] += g[i];
    }));
  }
  return out;
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar_of(acc);
  if (a.has_grad()) {
    out.ensure_grad();
    Tensor<T> ac = a, oc = out;
    tape.watch(ac);
    tape.watch(oc);
    const int64_t n = a.numel();
    out.set_node(tape.record([ac, oc, n]() mutable {
      T g = oc.grad()[0];
      T* da = ac.grad().data();
      for (int64_t i = 0; i < n; ++i) da[i] += g;
    }));
  }
  return out;
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  Tensor<T> s = sum(tape, a);
  return scale(tape, s, T(1) / static_cast<T>(a.numel()));
}

// Softmax over the last axis, max-stabilized. Throws numeric_error on
// non-finite input.
template <class T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& a) {
  if (a.ndim() < 1 || a.dim(a.ndim() - 1) < 1)
    throw dimension_error("softmax needs a non-empty last axis: " + shape_str(a.shape()));
  const int64_t d = a.dim(a.ndim() - 1);
  const int64_t rows = a.numel() / d;
  for (T v : a.data())
    if (!std::isfinite(static_cast<double>(v)))
      throw numeric_error("softmax input contains NaN or Inf");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * d;
    T* y = out.data().data() + r * d;
    T mx = x[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    T z = T(0);
    for (int64_t j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    T inv = T(1) / z;
    for (int64_t j = 0; j < d; ++j) y[j] *= inv;
  }
  if (a.has_grad()) {
    out.ensure_grad();
    Tensor<T> ac = a, oc = out;
    tape.watch(ac);
    tape.watch(oc);
    out.set_node(tape.record([ac, oc, rows, d]() mutable {
      T* da = ac.grad().data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* p = oc.data().data() + r * d;
        const T* g = oc.grad().data() + r * d;
        T dot = T(0);
        for (int64_t j = 0; j < d; ++j) dot += g[j] * p[j];
        for (int64_t j = 0; j < d; ++j) da[r * d + j] += p[j] * (g[j] - dot);
      }
    }));
  }
  return out;
}

// Layer normalization over the last axis with learned gain and bias.
template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  const int64_t d = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != d || bias.dim(0) != d)
    throw dimension_error("layer_norm gain/bias must be [d]=" + std::to_string(d));
  if (d < 2) throw dimension_error("layer_norm needs last axis >= 2");
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  // per-row inverse stddev and normalized values, kept for backward
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  auto xhat = std::make_shared<std::vector<T>>(x.data().size());
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T mu = T(0);
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) {
      T c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    T* h = xhat->data() + r * d;
    T* y = out.data().data() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      h[j] = (xr[j] - mu) * is;
      y[j] = gain.data()[j] * h[j] + bias.data()[j];
    }
  }
  if (detail::any_grad(x, gain, bias)) {
    out.ensure_grad();
    Tensor<T> xc = x, gc = gain, bc = bias, oc = out;
    if (xc.has_grad()) tape.watch(xc);
    if (gc.has_grad()) tape.watch(gc);
    if (bc.has_grad()) tape.watch(bc);
    tape.watch(oc);
    out.set_node(tape.record([xc, gc, bc, oc, inv_std, xhat, rows, d]() mutable {
      const T* g = oc.grad().data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = g + r * d;
        const T* h = xhat->data() + r * d;
        if (gc.has_grad()) {
          T* dg = gc.grad().data();
          for (int64_t j = 0; j < d; ++j) dg[j] += gr[j] * h[j];
        }
        if (bc.has_grad()) {
          T* db = bc.grad().data();
          for (int64_t j = 0; j < d; ++j) db[j] += gr[j];
        }
        if (xc.has_grad()) {
          // dx = inv_std * (w - mean(w) - xhat * mean(w .* xhat)), w = gain .* g
          T mw = T(0), mwh = T(0);
          const T* gv = gc.data().data();
          for (int64_t j = 0; j < d; ++j) {
            T w = gv[j] * gr[j];
            mw += w;
            mwh += w * h[j];
          }
          mw /= static_cast<T>(d);
          mwh /= static_cast<T>(d);
          T is = (*inv_std)[static_cast<size_t>(r)];
          T* dx = xc.grad().data() + r * d;
          for (int64_t j = 0; j < d; ++j)
            dx[j] += is * (gv[j] * gr[j] - mw - h[j] * mwh);
        }
      }
    }));
  }
  return out;
}

// table[V,d] gathered by ids[r,c] -> [r,c,d]; backward scatter-adds rows.
template <class T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, const IdMatrix& ids) {
  if (table.ndim() != 2)
    throw dimension_error("embedding table must be 2-d, got " + shape_str(table.shape()));
  const int64_t V = table.dim(0), d = table.dim(1);
  for (int32_t id : ids.v)
    if (id < 0 || id >= V)
      throw index_error("embedding id " + std::to_string(id) + " out of range [0," +
                        std::to_string(V) + ")");
  Tensor<T> out = Tensor<T>::zeros({ids.rows, ids.cols, d});
  for (int64_t i = 0; i < ids.rows * ids.cols; ++i) {
    const T* src = table.data().data() + static_cast<int64_t>(ids.v[static_cast<size_t>(i)]) * d;
    std::copy(src, src + d, out.data().data() + i * d);
  }
  if (table.has_grad()) {
    out.ensure_grad();
    Tensor<T> tc = table, oc = out;
    IdMatrix idc = ids;
    tape.watch(tc);
    tape.watch(oc);
    out.set_node(tape.record([tc, oc, idc, d]() mutable {
      T* dt = tc.grad().data();
      const T* g = oc.grad().data();
      for (int64_t i = 0; i < idc.rows * idc.cols; ++i) {
        T* row = dt + static_cast<int64_t>(idc.v[static_cast<size_t>(i)]) * d;
        const T* gr = g + i * d;
        for (int64_t j = 0; j < d; ++j) row[j] += gr[j];
      }
    }));
  }
  return out;
}

// [b,t,h,e] -> [b,h,t,e]
template <class T>
Tensor<T> permute_0213(Tape<T>& tape, const Tensor<T>& a) {
  if (a.ndim() != 4)
    throw dimension_error("permute_0213 expects 4-d tensor, got " + shape_str(a.shape()));
  const int64_t b = a.dim(0), t = a.dim(1), h = a.dim(2), e = a.dim(3);
  Tensor<T> out = Tensor<T>::zeros({b, h, t, e});
  for (int64_t ib = 0; ib < b; ++ib)
    for (int64_t it = 0; it < t; ++it)
      for (int64_t ih = 0; ih < h; ++ih) {
        const T* src = a.data().data() + ((ib * t + it) * h + ih) * e;
        T* dst = out.data().data() + ((ib * h + ih) * t + it) * e;
        std::copy(src, src + e, dst);
      }
  if (a.has_grad()) {
    out.ensure_grad();
    Tensor<T> ac = a, oc = out;
    tape.watch(ac);
    tape.watch(oc);
    out.set_node(tape.record([ac, oc, b, t, h, e]() mutable {
      T* da = ac.grad().data();
      const T* g = oc.grad().data();
      for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t it = 0; it < t; ++it)
          for (int64_t ih = 0; ih < h; ++ih) {
            const T* src = g + ((ib * h + ih) * t + it) * e;
            T* dst = da + ((ib * t + it) * h + ih) * e;
            for (int64_t j = 0; j < e; ++j) dst[j] += src[j];
          }
    }));
  }
  return out;
}

// Inverted dropout: mask in {0, 1/(1-p)}, deterministic for a given rng key.
template <class T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& a, double p, uint64_t rng_key) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw contract_error("dropout p must be < 1");
  Rng rng(rng_key);
  const int64_t n = a.numel();
  auto mask = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (int64_t i = 0; i < n; ++i)
    (*mask)[static_cast<size_t>(i)] = rng.uniform() < p ? T(0) : keep_scale;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * (*mask)[static_cast<size_t>(i)];
  if (a.has_grad()) {
    out.ensure_grad();
    Tensor<T> ac = a, oc = out;
    tape.watch(ac);
    tape.watch(oc);
    out.set_node(tape.record([ac, oc, mask, n]() mutable {
      const T* g = oc.grad().data();
      T* da = ac.grad().data();
      for (int64_t i = 0; i < n; ++i) da[i] += g[i] * (*mask)[static_cast<size_t>(i)];
    }));
  }
  return out;
}

// Mean over non-pad positions of -sum_v q(v) log softmax(logits)(v) with
// q = (1-alpha) onehot(target) + alpha/V.
template <class T>
Tensor<T> cross_entropy_label_smoothed(Tape<T>& tape, const Tensor<T>& logits,
                                       const IdMatrix& targets, double alpha, int32_t pad_id) {
  if (logits.ndim() != 3)
    throw dimension_error("cross_entropy expects [b,t,V] logits, got " +
                          shape_str(logits.shape()));
  if (alpha < 0.0 || alpha >= 1.0) throw contract_error("label smoothing alpha must be in [0,1)");
  const int64_t b = logits.dim(0), t = logits.dim(1), V = logits.dim(2);
  if (targets.rows != b || targets.cols != t)
    throw dimension_error("cross_entropy targets shape mismatch");
  for (int32_t id : targets.v)
    if (id != pad_id && (id < 0 || id >= V))
      throw index_error("cross_entropy target id " + std::to_string(id) + " out of range [0," +
                        std::to_string(V) + ")");
  // per-position losses computed in parallel, combined in fixed order
  std::vector<double> pos_loss(static_cast<size_t>(b * t), 0.0);
  ThreadPool::instance().parallel_ranges(b * t, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      int32_t tgt = targets.v[static_cast<size_t>(i)];
      if (tgt == pad_id) continue;
      const T* x = logits.data().data() + i * V;
      T mx = x[0];
      for (int64_t v = 1; v < V; ++v) mx = std::max(mx, x[v]);
      double z = 0.0, sum_x = 0.0;
      for (int64_t v = 0; v < V; ++v) {
        z += std::exp(static_cast<double>(x[v] - mx));
        sum_x += static_cast<double>(x[v]);
      }
      double lse = std::log(z) + static_cast<double>(mx);
      // -sum q_v (x_v - lse) = lse - (1-alpha) x_tgt - alpha/V sum_v x_v
      pos_loss[static_cast<size_t>(i)] = lse - (1.0 - alpha) * static_cast<double>(x[tgt]) -
                                         alpha / static_cast<double>(V) * sum_x;
    }
  });
  int64_t n_valid = 0;
  double total = 0.0;
  for (int64_t i = 0; i < b * t; ++i) {
    if (targets.v[static_cast<size_t>(i)] == pad_id) continue;
    ++n_valid;
    total += pos_loss[static_cast<size_t>(i)];
  }
  if (n_valid == 0) throw contract_error("cross_entropy: all positions are padding");
  Tensor<T> out = Tensor<T>::scalar_of(static_cast<T>(total / static_cast<double>(n_valid)));
  if (logits.has_grad()) {
    out.ensure_grad();
    Tensor<T> lc = logits, oc = out;
    IdMatrix tc = targets;
    tape.watch(lc);
    tape.watch(oc);
    out.set_node(tape.record([lc, oc, tc, alpha, pad_id, b, t, V, n_valid]() mutable {
      const T g = oc.grad()[0];
      const T w = g / static_cast<T>(n_valid);
      T* dl = lc.grad().data();
      ThreadPool::instance().parallel_ranges(b * t, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
          int32_t tgt = tc.v[static_cast<size_t>(i)];
          if (tgt == pad_id) continue;
          const T* x = lc.data().data() + i * V;
          T mx = x[0];
          for (int64_t v = 1; v < V; ++v) mx = std::max(mx, x[v]);
          double z = 0.0;
          for (int64_t v = 0; v < V; ++v) z += std::exp(static_cast<double>(x[v] - mx));
          const double inv_z = 1.0 / z;
          const double u = alpha / static_cast<double>(V);
          T* drow = dl + i * V;
          for (int64_t v = 0; v < V; ++v) {
            double p = std::exp(static_cast<double>(x[v] - mx)) * inv_z;
            double q = u + (v == tgt ? 1.0 - alpha : 0.0);
            drow[v] += w * static_cast<T>(p - q);
          }
        }
      });
    }));
  }
  return out;
}

// Symmetrized KL between softmax(logits_a) and softmax(logits_b), computed
// per valid target position, averaged over positions then over the batch.
// valid[b,t] is nonzero on positions that count. Probabilities are clamped
// at `floor` before the logs.
template <class T>
Tensor<T> kl_sym_from_logits(Tape<T>& tape, const Tensor<T>& logits_a, const Tensor<T>& logits_b,
                             const IdMatrix& valid, double floor = 1e-12) {
  if (logits_a.shape() != logits_b.shape() || logits_a.ndim() != 3)
    throw dimension_error("kl_sym_from_logits expects matching [b,t,V] logits: " +
                          shape_str(logits_a.shape()) + " vs " + shape_str(logits_b.shape()));
  const int64_t b = logits_a.dim(0), t = logits_a.dim(1), V = logits_a.dim(2);
  if (valid.rows != b || valid.cols != t)
    throw dimension_error("kl_sym_from_logits valid-mask shape mismatch");

  auto probs = [&](const T* x, std::vector<double>& p) {
    T mx = x[0];
    for (int64_t v = 1; v < V; ++v) mx = std::max(mx, x[v]);
    double z = 0.0;
    for (int64_t v = 0; v < V; ++v) {
      p[static_cast<size_t>(v)] = std::exp(static_cast<double>(x[v] - mx));
      z += p[static_cast<size_t>(v)];
    }
    for (int64_t v = 0; v < V; ++v) p[static_cast<size_t>(v)] /= z;
  };

  std::vector<double> p(static_cast<size_t>(V)), q(static_cast<size_t>(V));
  std::vector<int64_t> n_valid(static_cast<size_t>(b), 0);
  int64_t b_valid = 0;
  for (int64_t e = 0; e < b; ++e) {
    for (int64_t i = 0; i < t; ++i)
      if (valid.at(e, i) != 0) ++n_valid[static_cast<size_t>(e)];
    if (n_valid[static_cast<size_t>(e)] > 0) ++b_valid;
  }
  if (b_valid == 0) throw contract_error("kl_sym_from_logits: no valid positions");

  double total = 0.0;
  for (int64_t e = 0; e < b; ++e) {
    if (n_valid[static_cast<size_t>(e)] == 0) continue;
    double ex_sum = 0.0;
    for (int64_t i = 0; i < t; ++i) {
      if (valid.at(e, i) == 0) continue;
      const int64_t off = (e * t + i) * V;
      probs(logits_a.data().data() + off, p);
      probs(logits_b.data().data() + off, q);
      double acc = 0.0;
      for (int64_t v = 0; v < V; ++v) {
        double pv = std::max(p[static_cast<size_t>(v)], floor);
        double qv = std::max(q[static_cast<size_t>(v)], floor);
        acc += (p[static_cast<size_t>(v)] - q[static_cast<size_t>(v)]) * (std::log(pv) - std::log(qv));
      }
      ex_sum += acc;
    }
    total += ex_sum / static_cast<double>(n_valid[static_cast<size_t>(e)]);
  }
  Tensor<T> out = Tensor<T>::scalar_of(static_cast<T>(total / static_cast<double>(b_valid)));

  if (detail::any_grad(logits_a, logits_b)) {
    out.ensure_grad();
    Tensor<T> acp = logits_a, bcp = logits_b, oc = out;
    IdMatrix vc = valid;
    if (acp.has_grad()) tape.watch(acp);
    if (bcp.has_grad()) tape.watch(bcp);
    tape.watch(oc);
    auto nv = std::make_shared<std::vector<int64_t>>(n_valid);
    out.set_node(tape.record([acp, bcp, oc, vc, nv, b, t, V, b_valid, floor]() mutable {
      const T g = oc.grad()[0];
      std::vector<double> p(static_cast<size_t>(V)), q(static_cast<size_t>(V));
      auto probs = [&](const T* x, std::vector<double>& out_p) {
        T mx = x[0];
        for (int64_t v = 1; v < V; ++v) mx = std::max(mx, x[v]);
        double z = 0.0;
        for (int64_t v = 0; v < V; ++v) {
          out_p[static_cast<size_t>(v)] = std::exp(static_cast<double>(x[v] - mx));
          z += out_p[static_cast<size_t>(v)];
        }
        for (int64_t v = 0; v < V; ++v) out_p[static_cast<size_t>(v)] /= z;
      };
      for (int64_t e = 0; e < b; ++e) {
        if ((*nv)[static_cast<size_t>(e)] == 0) continue;
        const double w = static_cast<double>(g) /
                         (static_cast<double>(b_valid) * static_cast<double>((*nv)[static_cast<size_t>(e)]));
        for (int64_t i = 0; i < t; ++i) {
          if (vc.at(e, i) == 0) continue;
          const int64_t off = (e * t + i) * V;
          probs(acp.data().data() + off, p);
          probs(bcp.data().data() + off, q);
          // s_v = log p_v - log q_v; kl_pq = E_p[s]; kl_qp = -E_q[s]
          double kl_pq = 0.0, kl_qp = 0.0;
          for (int64_t v = 0; v < V; ++v) {
            double s = std::log(std::max(p[static_cast<size_t>(v)], floor)) -
                       std::log(std::max(q[static_cast<size_t>(v)], floor));
            kl_pq += p[static_cast<size_t>(v)] * s;
            kl_qp -= q[static_cast<size_t>(v)] * s;
          }
          for (int64_t v = 0; v < V; ++v) {
            double pv = p[static_cast<size_t>(v)], qv = q[static_cast<size_t>(v)];
            double s = std::log(std::max(pv, floor)) - std::log(std::max(qv, floor));
            if (acp.has_grad())
              acp.grad()[static_cast<size_t>(off + v)] +=
                  static_cast<T>(w * (pv * s - pv * kl_pq + pv - qv));
            if (bcp.has_grad())
              bcp.grad()[static_cast<size_t>(off + v)] +=
                  static_cast<T>(w * (-qv * s - qv * kl_qp + qv - pv));
          }
        }
      }
    }));
  }
  return out;
}

}  // namespace ops
}  // namespace mnmt
