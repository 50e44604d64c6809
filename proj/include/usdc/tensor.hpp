#pragma once

// Dense row-major tensors with reverse-mode autodiff on a per-step tape.
// Templated on the scalar type: float for training, double for gradient
// checks. Single-threaded by design — determinism beats speed at this scale.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "usdc/rng.hpp"

namespace usdc {

// ---------------------------------------------------------------------------
// errors
// ---------------------------------------------------------------------------

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& m) : std::runtime_error(m) {}
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// MAC counting hook
// ---------------------------------------------------------------------------

// Thread-local multiply-accumulate counter. When enabled, matmul adds its
// exact MAC count; elementwise ops and softmax stay invisible, matching the
// cost ledger's convention (matrix products only).
class MacCounter {
 public:
  static MacCounter& instance() {
    static thread_local MacCounter c;
    return c;
  }
  void reset() { macs_ = 0; }
  void enable(bool on) { enabled_ = on; }
  bool enabled() const { return enabled_; }
  void add(long long macs) {
    if (enabled_) macs_ += macs;
  }
  long long macs() const { return macs_; }

 private:
  bool enabled_ = false;
  long long macs_ = 0;
};

struct MacCountScope {
  MacCountScope() {
    MacCounter::instance().reset();
    MacCounter::instance().enable(true);
  }
  ~MacCountScope() { MacCounter::instance().enable(false); }
  long long macs() const { return MacCounter::instance().macs(); }
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <typename T>
struct TensorData {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated iff requires_grad
  bool requires_grad = false;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, bool requires_grad = false)
      : d_(std::make_shared<TensorData<T>>()) {
    for (int s : shape) {
      if (s < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    }
    d_->shape = std::move(shape);
    d_->value.assign(count(d_->shape), T(0));
    if (requires_grad) set_requires_grad(true);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.value().begin(), t.value().end(), v);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from(std::vector<int> shape, std::vector<T> data) {
    Tensor t(std::move(shape));
    if (static_cast<long long>(data.size()) != t.numel()) {
      throw ShapeError("from(): data size does not match shape");
    }
    t.value() = std::move(data);
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  const std::vector<int>& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int dim(int i) const {
    if (i < 0) i += rank();
    return d_->shape.at(static_cast<size_t>(i));
  }
  long long numel() const { return static_cast<long long>(d_->value.size()); }

  // Tensor is a shared handle: a const Tensor still exposes mutable storage,
  // mirroring mainstream tensor-library semantics. Backward closures rely on
  // this to accumulate into by-value captures.
  std::vector<T>& value() const { return d_->value; }
  std::vector<T>& grad() const {
    if (!d_->requires_grad) throw ValueError("grad(): tensor does not require grad");
    return d_->grad;
  }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool on) {
    d_->requires_grad = on;
    if (on && d_->grad.size() != d_->value.size()) d_->grad.assign(d_->value.size(), T(0));
    if (!on) d_->grad.clear();
  }
  void zero_grad() {
    if (requires_grad()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
    return d_->value[0];
  }

  // Flat-index convenience accessor (tests and kernels).
  T& at(long long i) const { return d_->value[static_cast<size_t>(i)]; }

  Tensor clone() const {
    Tensor t(d_->shape, false);
    t.value() = d_->value;
    return t;
  }

  // Identity of the underlying buffer; used by optimizers to dedupe.
  const void* id() const { return d_.get(); }

  static long long count(const std::vector<int>& shape) {
    long long n = 1;
    for (int s : shape) n *= s;
    return n;
  }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

// Records backward closures during forward evaluation. One tape per training
// step; cleared (or destroyed) before the optimizer touches parameters.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(slot()) { slot() = &t; }
    ~Scope() { slot() = prev_; }

   private:
    Tape* prev_;
  };

  static Tape* current() { return slot(); }

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the recorded graph in reverse.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward(): loss must be scalar");
    if (!loss.requires_grad()) throw ValueError("backward(): loss does not require grad");
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

 private:
  static Tape*& slot() {
    static thread_local Tape* cur = nullptr;
    return cur;
  }
  std::vector<std::function<void()>> nodes_;
};

namespace detail {

template <typename T>
bool track(std::initializer_list<const Tensor<T>*> ins) {
  if (!Tape<T>::current()) return false;
  for (const Tensor<T>* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void record(std::function<void()> fn) {
  Tape<T>::current()->record(std::move(fn));
}

// Broadcast two shapes, NumPy-style (align trailing dims; 1 stretches).
inline std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t r = std::max(a.size(), b.size());
  std::vector<int> out(r);
  for (size_t i = 0; i < r; ++i) {
    const int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `shape` seen through `out_shape`; 0 on stretched dims.
inline std::vector<long long> effective_strides(const std::vector<int>& shape,
                                                const std::vector<int>& out_shape) {
  const size_t r = out_shape.size();
  std::vector<long long> strides(r, 0);
  long long s = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    const size_t o = i + (r - shape.size());
    strides[o] = (shape[i] == 1 && out_shape[o] != 1) ? 0 : s;
    s *= shape[i];
  }
  return strides;
}

// Sums `src` (shaped `src_shape`) down to `dst_shape`, accumulating into dst.
// Inverse of broadcasting; used by every broadcasting backward.
template <typename T>
void reduce_into(const std::vector<T>& src, const std::vector<int>& src_shape,
                 std::vector<T>& dst, const std::vector<int>& dst_shape) {
  const auto strides = effective_strides(dst_shape, src_shape);
  const size_t r = src_shape.size();
  std::vector<long long> idx(r, 0);
  const long long n = Tensor<T>::count(src_shape);
  long long off = 0;
  for (long long lin = 0; lin < n; ++lin) {
    dst[static_cast<size_t>(off)] += src[static_cast<size_t>(lin)];
    for (size_t i = r; i-- > 0;) {
      ++idx[i];
      off += strides[i];
      if (idx[i] < src_shape[i]) break;
      idx[i] = 0;
      off -= strides[i] * src_shape[i];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { Add, Sub, Mul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op) {
  const auto out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out(out_shape);
  const auto sa = effective_strides(a.shape(), out_shape);
  const auto sb = effective_strides(b.shape(), out_shape);
  const size_t r = out_shape.size();
  std::vector<long long> idx(r, 0);
  long long oa = 0, ob = 0;
  const long long n = out.numel();
  const auto& va = a.value();
  const auto& vb = b.value();
  auto& vo = out.value();
  for (long long lin = 0; lin < n; ++lin) {
    const T x = va[static_cast<size_t>(oa)];
    const T y = vb[static_cast<size_t>(ob)];
    vo[static_cast<size_t>(lin)] = op == BinOp::Add ? x + y : op == BinOp::Sub ? x - y : x * y;
    for (size_t i = r; i-- > 0;) {
      ++idx[i];
      oa += sa[i];
      ob += sb[i];
      if (idx[i] < out_shape[i]) break;
      idx[i] = 0;
      oa -= sa[i] * out_shape[i];
      ob -= sb[i] * out_shape[i];
    }
  }
  if (track<T>({&a, &b})) {
    out.set_requires_grad(true);
    record<T>([a, b, out, op]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad()) {
        if (op == BinOp::Mul) {
          // dL/da = g * b, reduced to a's shape.
          std::vector<T> tmp(g.size());
          const auto sbb = effective_strides(b.shape(), out.shape());
          const size_t r = out.shape().size();
          std::vector<long long> idx(r, 0);
          long long ob = 0;
          for (long long lin = 0; lin < out.numel(); ++lin) {
            tmp[static_cast<size_t>(lin)] = g[static_cast<size_t>(lin)] * b.value()[static_cast<size_t>(ob)];
            for (size_t i = r; i-- > 0;) {
              ++idx[i];
              ob += sbb[i];
              if (idx[i] < out.shape()[i]) break;
              idx[i] = 0;
              ob -= sbb[i] * out.shape()[i];
            }
          }
          reduce_into(tmp, out.shape(), a.grad(), a.shape());
        } else {
          reduce_into(g, out.shape(), a.grad(), a.shape());
        }
      }
      if (b.requires_grad()) {
        std::vector<T> tmp(g.size());
        if (op == BinOp::Mul) {
          const auto saa = effective_strides(a.shape(), out.shape());
          const size_t r = out.shape().size();
          std::vector<long long> idx(r, 0);
          long long oa = 0;
          for (long long lin = 0; lin < out.numel(); ++lin) {
            tmp[static_cast<size_t>(lin)] = g[static_cast<size_t>(lin)] * a.value()[static_cast<size_t>(oa)];
            for (size_t i = r; i-- > 0;) {
              ++idx[i];
              oa += saa[i];
              if (idx[i] < out.shape()[i]) break;
              idx[i] = 0;
              oa -= saa[i] * out.shape()[i];
            }
          }
        } else if (op == BinOp::Sub) {
          for (size_t i = 0; i < g.size(); ++i) tmp[i] = -g[i];
        } else {
          tmp = g;
        }
        reduce_into(tmp, out.shape(), b.grad(), b.shape());
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::Add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::Sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::Mul);
}

// out = a*x + b, elementwise with scalar constants. Covers scaling, negation
// and the (1 - g) complement without extra graph nodes.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T a, T b) {
  Tensor<T> out(x.shape());
  const auto& vx = x.value();
  auto& vo = out.value();
  for (size_t i = 0; i < vx.size(); ++i) vo[i] = a * vx[i] + b;
  if (detail::track<T>({&x})) {
    out.set_requires_grad(true);
    detail::record<T>([x, out, a]() mutable {
      auto& gx = x.grad();
      const auto& g = out.grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T a) {
  return affine(x, a, T(0));
}

// Elementwise division by a scalar constant. A true IEEE division rather
// than a multiply by the reciprocal, so c/c == 1 exactly — normalized cost
// ledgers rely on that.
template <typename T>
Tensor<T> divide(const Tensor<T>& x, T c) {
  if (c == T(0)) throw ValueError("divide: divisor must be nonzero");
  Tensor<T> out(x.shape());
  for (size_t i = 0; i < x.value().size(); ++i) out.value()[i] = x.value()[i] / c;
  if (detail::track<T>({&x})) {
    out.set_requires_grad(true);
    detail::record<T>([x, out, c]() mutable {
      auto& gx = x.grad();
      const auto& g = out.grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / c;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// C[b] = A[b] @ B[b] for 2-D matrices laid out contiguously.
template <typename T>
void mm_kernel(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<long long>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] = T(0);
    const T* arow = a + static_cast<long long>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      const T* brow = b + static_cast<long long>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A @ B, with optional transposes; workhorse for matmul backward.
template <typename T>
void mm_acc(const T* a, const T* b, T* c, int m, int k, int n, bool ta, bool tb) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<long long>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const T av = ta ? a[static_cast<long long>(kk) * m + i] : a[static_cast<long long>(i) * k + kk];
      if (tb) {
        for (int j = 0; j < n; ++j) crow[j] += av * b[static_cast<long long>(j) * k + kk];
      } else {
        const T* brow = b + static_cast<long long>(kk) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace detail

// Batched matrix product. a is [..., m, k]; b is either [k, n] (shared) or
// [..., k, n] with identical leading dims. k = 0 is legal and yields zeros.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: ranks must be >= 2, got " + shape_str(a.shape()) + " " +
                     shape_str(b.shape()));
  }
  const int m = a.dim(-2), k = a.dim(-1);
  const int kb = b.dim(-2), n = b.dim(-1);
  if (k != kb) {
    throw ShapeError("matmul: inner dims disagree: " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  }
  const bool shared_b = b.rank() == 2 && a.rank() > 2;
  if (!shared_b && a.rank() != b.rank()) {
    throw ShapeError("matmul: rank mismatch: " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  }
  long long batch = 1;
  for (int i = 0; i + 2 < a.rank(); ++i) {
    batch *= a.dim(i);
    if (!shared_b && a.dim(i) != b.dim(i)) {
      throw ShapeError("matmul: batch dims disagree: " + shape_str(a.shape()) + " @ " +
                       shape_str(b.shape()));
    }
  }
  std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);

  const long long astep = static_cast<long long>(m) * k;
  const long long bstep = shared_b ? 0 : static_cast<long long>(k) * n;
  const long long ostep = static_cast<long long>(m) * n;
  for (long long bi = 0; bi < batch; ++bi) {
    detail::mm_kernel(a.value().data() + bi * astep, b.value().data() + bi * bstep,
                      out.value().data() + bi * ostep, m, k, n);
  }
  MacCounter::instance().add(batch * m * k * n);

  if (detail::track<T>({&a, &b})) {
    out.set_requires_grad(true);
    detail::record<T>([a, b, out, m, k, n, batch, astep, bstep, ostep]() mutable {
      const T* g = out.grad().data();
      if (a.requires_grad()) {
        // dA[b] += dC[b] @ B[b]^T
        for (long long bi = 0; bi < batch; ++bi) {
          detail::mm_acc(g + bi * ostep, b.value().data() + bi * bstep, a.grad().data() + bi * astep,
                         m, n, k, false, true);
        }
      }
      if (b.requires_grad()) {
        // dB[b] += A[b]^T @ dC[b]; shared b accumulates over the batch.
        for (long long bi = 0; bi < batch; ++bi) {
          detail::mm_acc(a.value().data() + bi * astep, g + bi * ostep, b.grad().data() + bi * bstep,
                         k, m, n, true, false);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank must be >= 2");
  const int m = x.dim(-2), n = x.dim(-1);
  std::vector<int> out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  Tensor<T> out(out_shape);
  long long batch = 1;
  for (int i = 0; i + 2 < x.rank(); ++i) batch *= x.dim(i);
  const long long step = static_cast<long long>(m) * n;
  for (long long bi = 0; bi < batch; ++bi) {
    const T* src = x.value().data() + bi * step;
    T* dst = out.value().data() + bi * step;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) dst[static_cast<long long>(j) * m + i] = src[static_cast<long long>(i) * n + j];
  }
  if (detail::track<T>({&x})) {
    out.set_requires_grad(true);
    detail::record<T>([x, out, m, n, batch, step]() mutable {
      const T* g = out.grad().data();
      T* gx = x.grad().data();
      for (long long bi = 0; bi < batch; ++bi) {
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            gx[bi * step + static_cast<long long>(i) * n + j] += g[bi * step + static_cast<long long>(j) * m + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape) {
  long long n = 1;
  int infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1");
      infer = static_cast<int>(i);
    } else {
      n *= new_shape[i];
    }
  }
  if (infer >= 0) {
    if (n == 0 || x.numel() % n != 0) throw ShapeError("reshape: cannot infer dimension");
    new_shape[infer] = static_cast<int>(x.numel() / n);
    n = x.numel();
  }
  if (n != x.numel()) {
    throw ShapeError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
  }
  Tensor<T> out(new_shape);
  out.value() = x.value();
  if (detail::track<T>({&x})) {
    out.set_requires_grad(true);
    detail::record<T>([x, out]() mutable {
      auto& gx = x.grad();
      const auto& g = out.grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const std::vector<int>& shape) {
  const auto check = detail::broadcast_shape(x.shape(), shape);
  if (check != shape) throw ShapeError("broadcast_to: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor<T> out(shape);
  const auto sx = detail::effective_strides(x.shape(), shape);
  const size_t r = shape.size();
  std::vector<long long> idx(r, 0);
  long long ox = 0;
  for (long long lin = 0; lin < out.numel(); ++lin) {
    out.value()[static_cast<size_t>(lin)] = x.value()[static_cast<size_t>(ox)];
    for (size_t i = r; i-- > 0;) {
      ++idx[i];
      ox += sx[i];
      if (idx[i] < shape[i]) break;
      idx[i] = 0;
      ox -= sx[i] * shape[i];
    }
  }
  if (detail::track<T>({&x})) {
    out.set_requires_grad(true);
    detail::record<T>([x, out]() mutable {
      detail::reduce_into(out.grad(), out.shape(), x.grad(), x.shape());
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_axis(const Tensor<T>& x, int axis, int start, int len) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ShapeError("slice_axis: bad axis");
  if (start < 0 || len < 0 || start + len > x.dim(axis)) {
    throw ShapeError("slice_axis: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for " + shape_str(x.shape()));
  }
  std::vector<int> out_shape = x.shape();
  out_shape[axis] = len;
  Tensor<T> out(out_shape);
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const long long d = x.dim(axis);
  for (long long o = 0; o < outer; ++o) {
    const T* src = x.value().data() + (o * d + start) * inner;
    T* dst = out.value().data() + o * len * inner;
    std::copy(src, src + static_cast<long long>(len) * inner, dst);
  }
  if (detail::track<T>({&x})) {
    out.set_requires_grad(true);
    detail::record<T>([x, out, outer, inner, d, start, len]() mutable {
      const T* g = out.grad().data();
      T* gx = x.grad().data();
      for (long long o = 0; o < outer; ++o) {
        const T* src = g + o * len * inner;
        T* dst = gx + (o * d + start) * inner;
        for (long long i = 0; i < static_cast<long long>(len) * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  int r = xs[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: bad axis");
  std::vector<int> out_shape = xs[0].shape();
  int total = 0;
  for (const auto& x : xs) {
    if (x.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && x.dim(i) != out_shape[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(x.shape()));
      }
    }
    total += x.dim(axis);
  }
  out_shape[axis] = total;
  Tensor<T> out(out_shape);
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];
  long long off = 0;
  for (const auto& x : xs) {
    const long long len = x.dim(axis);
    for (long long o = 0; o < outer; ++o) {
      const T* src = x.value().data() + o * len * inner;
      T* dst = out.value().data() + (o * total + off) * inner;
      std::copy(src, src + len * inner, dst);
    }
    off += len;
  }
  bool any = false;
  for (const auto& x : xs) any = any || x.requires_grad();
  if (Tape<T>::current() && any) {
    out.set_requires_grad(true);
    std::vector<Tensor<T>> ins = xs;
    detail::record<T>([ins, out, outer, inner, total, axis]() mutable {
      const T* g = out.grad().data();
      long long off = 0;
      for (auto& x : ins) {
        const long long len = x.dim(axis);
        if (x.requires_grad()) {
          T* gx = x.grad().data();
          for (long long o = 0; o < outer; ++o) {
            const T* src = g + (o * total + off) * inner;
            for (long long i = 0; i < len * inner; ++i) gx[o * len * inner + i] += src[i];
          }
        }
        off += len;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out({1});
  T s = T(0);
  for (T v : x.value()) s += v;
  out.value()[0] = s;
  if (detail::track<T>({&x})) {
    out.set_requires_grad(true);
    detail::record<T>([x, out]() mutable {
      const T g = out.grad()[0];
      for (auto& v : x.grad()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ShapeError("mean_axis: bad axis");
  const long long d = x.dim(axis);
  if (d == 0) throw ShapeError("mean_axis: empty axis");
  std::vector<int> out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out(out_shape);
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const T inv = T(1) / static_cast<T>(d);
  for (long long o = 0; o < outer; ++o) {
    for (long long i = 0; i < inner; ++i) {
      T s = T(0);
      for (long long j = 0; j < d; ++j) s += x.value()[(o * d + j) * inner + i];
      out.value()[o * inner + i] = s * inv;
    }
  }
  if (detail::track<T>({&x})) {
    out.set_requires_grad(true);
    detail::record<T>([x, out, outer, inner, d, inv]() mutable {
      const T* g = out.grad().data();
      T* gx = x.grad().data();
      for (long long o = 0; o < outer; ++o) {
        for (long long i = 0; i < inner; ++i) {
          const T gv = g[o * inner + i] * inv;
          for (long long j = 0; j < d; ++j) gx[(o * d + j) * inner + i] += gv;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (size_t i = 0; i < x.value().size(); ++i) out.value()[i] = x.value()[i] > T(0) ? x.value()[i] : T(0);
  if (detail::track<T>({&x})) {
    out.set_requires_grad(true);
    detail::record<T>([x, out]() mutable {
      auto& gx = x.grad();
      for (size_t i = 0; i < gx.size(); ++i) {
        if (x.value()[i] > T(0)) gx[i] += out.grad()[i];
      }
    });
  }
  return out;
}

enum class GeluMode { Tanh, Erf };

// GeLU; tanh approximation by default, exact erf as an opt-in mode.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x, GeluMode mode = GeluMode::Tanh) {
  Tensor<T> out(x.shape());
  const T c = static_cast<T>(std::sqrt(2.0 / M_PI));
  const T k = static_cast<T>(0.044715);
  for (size_t i = 0; i < x.value().size(); ++i) {
    const T v = x.value()[i];
    if (mode == GeluMode::Tanh) {
      out.value()[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
    } else {
      out.value()[i] = T(0.5) * v * (T(1) + std::erf(v / static_cast<T>(M_SQRT2)));
    }
  }
  if (detail::track<T>({&x})) {
    out.set_requires_grad(true);
    detail::record<T>([x, out, mode, c, k]() mutable {
      auto& gx = x.grad();
      for (size_t i = 0; i < gx.size(); ++i) {
        const T v = x.value()[i];
        T d;
        if (mode == GeluMode::Tanh) {
          const T u = c * (v + k * v * v * v);
          const T t = std::tanh(u);
          d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * k * v * v);
        } else {
          const T cdf = T(0.5) * (T(1) + std::erf(v / static_cast<T>(M_SQRT2)));
          const T pdf = static_cast<T>(std::exp(-0.5 * double(v) * double(v)) / std::sqrt(2.0 * M_PI));
          d = cdf + v * pdf;
        }
        gx[i] += out.grad()[i] * d;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax / layernorm / batchnorm
// ---------------------------------------------------------------------------

// Softmax over the last axis, max-subtracted for stability.
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  if (x.rank() < 1 || x.dim(-1) == 0) throw ShapeError("softmax: empty last axis");
  Tensor<T> out(x.shape());
  const long long d = x.dim(-1);
  const long long rows = x.numel() / d;
  for (long long r = 0; r < rows; ++r) {
    const T* src = x.value().data() + r * d;
    T* dst = out.value().data() + r * d;
    T mx = src[0];
    for (long long i = 1; i < d; ++i) mx = std::max(mx, src[i]);
    T s = T(0);
    for (long long i = 0; i < d; ++i) {
      dst[i] = std::exp(src[i] - mx);
      s += dst[i];
    }
    const T inv = T(1) / s;
    for (long long i = 0; i < d; ++i) dst[i] *= inv;
  }
  if (detail::track<T>({&x})) {
    out.set_requires_grad(true);
    detail::record<T>([x, out, d, rows]() mutable {
      T* gx = x.grad().data();
      const T* y = out.value().data();
      const T* g = out.grad().data();
      for (long long r = 0; r < rows; ++r) {
        T dot = T(0);
        for (long long i = 0; i < d; ++i) dot += y[r * d + i] * g[r * d + i];
        for (long long i = 0; i < d; ++i) gx[r * d + i] += y[r * d + i] * (g[r * d + i] - dot);
      }
    });
  }
  return out;
}

// LayerNorm over the last axis with learnable gain/bias of shape [d].
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                    T eps = T(1e-5)) {
  const long long d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layernorm: gain/bias must have " + std::to_string(d) + " elements");
  }
  Tensor<T> out(x.shape());
  const long long rows = x.numel() / d;
  std::vector<T> inv_sigma(static_cast<size_t>(rows));
  std::vector<T> mu(static_cast<size_t>(rows));
  for (long long r = 0; r < rows; ++r) {
    const T* src = x.value().data() + r * d;
    T m = T(0);
    for (long long i = 0; i < d; ++i) m += src[i];
    m /= static_cast<T>(d);
    T v = T(0);
    for (long long i = 0; i < d; ++i) {
      const T c = src[i] - m;
      v += c * c;
    }
    v /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(v + eps);
    mu[static_cast<size_t>(r)] = m;
    inv_sigma[static_cast<size_t>(r)] = is;
    T* dst = out.value().data() + r * d;
    for (long long i = 0; i < d; ++i) {
      dst[i] = (src[i] - m) * is * gain.value()[static_cast<size_t>(i)] + bias.value()[static_cast<size_t>(i)];
    }
  }
  if (detail::track<T>({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    detail::record<T>([x, gain, bias, out, d, rows, mu, inv_sigma]() mutable {
      const T* g = out.grad().data();
      for (long long r = 0; r < rows; ++r) {
        const T* src = x.value().data() + r * d;
        const T m = mu[static_cast<size_t>(r)];
        const T is = inv_sigma[static_cast<size_t>(r)];
        // xhat_i = (x_i - mu) * is
        T sum_gy = T(0), sum_gy_xhat = T(0);
        for (long long i = 0; i < d; ++i) {
          const T xhat = (src[i] - m) * is;
          const T gy = g[r * d + i] * gain.value()[static_cast<size_t>(i)];
          sum_gy += gy;
          sum_gy_xhat += gy * xhat;
        }
        if (gain.requires_grad()) {
          for (long long i = 0; i < d; ++i) {
            gain.grad()[static_cast<size_t>(i)] += g[r * d + i] * (src[i] - m) * is;
          }
        }
        if (bias.requires_grad()) {
          for (long long i = 0; i < d; ++i) bias.grad()[static_cast<size_t>(i)] += g[r * d + i];
        }
        if (x.requires_grad()) {
          T* gx = x.grad().data() + r * d;
          const T invd = T(1) / static_cast<T>(d);
          for (long long i = 0; i < d; ++i) {
            const T xhat = (src[i] - m) * is;
            const T gy = g[r * d + i] * gain.value()[static_cast<size_t>(i)];
            gx[i] += is * (gy - invd * sum_gy - invd * xhat * sum_gy_xhat);
          }
        }
      }
    });
  }
  return out;
}

// Running statistics + learnable affine for batch normalization. Features
// live on the last axis; statistics pool every leading axis, which makes the
// same code serve per-feature ([B,F]) and per-channel tokenwise ([B,T,F])
// normalization.
template <typename T>
struct BatchNormState {
  Tensor<T> gamma, beta;          // learnable
  Tensor<T> run_mean, run_var;    // buffers, not differentiated
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(int features = 0) {
    if (features > 0) init(features);
  }
  void init(int features) {
    gamma = Tensor<T>::full({features}, T(1));
    beta = Tensor<T>::zeros({features});
    run_mean = Tensor<T>::zeros({features});
    run_var = Tensor<T>::full({features}, T(1));
  }
  int features() const { return gamma.defined() ? static_cast<int>(gamma.numel()) : 0; }
};

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormState<T>& bn, bool training) {
  const long long f = x.dim(-1);
  if (f != bn.features()) {
    throw ShapeError("batchnorm: feature count " + std::to_string(f) + " != state " +
                     std::to_string(bn.features()));
  }
  const long long rows = x.numel() / f;
  if (rows == 0) throw ShapeError("batchnorm: empty batch");
  Tensor<T> out(x.shape());
  if (!training) {
    // Normalize by the frozen running statistics; pure affine map.
    std::vector<T> sc(static_cast<size_t>(f)), sh(static_cast<size_t>(f));
    for (long long i = 0; i < f; ++i) {
      const T is = T(1) / std::sqrt(bn.run_var.value()[static_cast<size_t>(i)] + bn.eps);
      sc[static_cast<size_t>(i)] = bn.gamma.value()[static_cast<size_t>(i)] * is;
      sh[static_cast<size_t>(i)] = bn.beta.value()[static_cast<size_t>(i)] -
                                   bn.run_mean.value()[static_cast<size_t>(i)] * sc[static_cast<size_t>(i)];
    }
    for (long long r = 0; r < rows; ++r) {
      for (long long i = 0; i < f; ++i) {
        out.value()[r * f + i] = x.value()[r * f + i] * sc[static_cast<size_t>(i)] + sh[static_cast<size_t>(i)];
      }
    }
    Tensor<T> gamma = bn.gamma, beta = bn.beta;
    if (detail::track<T>({&x, &gamma, &beta})) {
      out.set_requires_grad(true);
      Tensor<T> rm = bn.run_mean, rv = bn.run_var;
      const T eps = bn.eps;
      detail::record<T>([x, gamma, beta, rm, rv, out, f, rows, eps]() mutable {
        const T* g = out.grad().data();
        for (long long i = 0; i < f; ++i) {
          const T is = T(1) / std::sqrt(rv.value()[static_cast<size_t>(i)] + eps);
          for (long long r = 0; r < rows; ++r) {
            const T gv = g[r * f + i];
            if (x.requires_grad()) x.grad()[r * f + i] += gv * gamma.value()[static_cast<size_t>(i)] * is;
            if (gamma.requires_grad()) {
              gamma.grad()[static_cast<size_t>(i)] +=
                  gv * (x.value()[r * f + i] - rm.value()[static_cast<size_t>(i)]) * is;
            }
            if (beta.requires_grad()) beta.grad()[static_cast<size_t>(i)] += gv;
          }
        }
      });
    }
    return out;
  }

  // Training: normalize by batch statistics (biased variance; a batch of one
  // degenerates to variance 0, floored by eps) and update running buffers.
  std::vector<T> mu(static_cast<size_t>(f), T(0)), var(static_cast<size_t>(f), T(0));
  for (long long r = 0; r < rows; ++r)
    for (long long i = 0; i < f; ++i) mu[static_cast<size_t>(i)] += x.value()[r * f + i];
  for (long long i = 0; i < f; ++i) mu[static_cast<size_t>(i)] /= static_cast<T>(rows);
  for (long long r = 0; r < rows; ++r) {
    for (long long i = 0; i < f; ++i) {
      const T c = x.value()[r * f + i] - mu[static_cast<size_t>(i)];
      var[static_cast<size_t>(i)] += c * c;
    }
  }
  for (long long i = 0; i < f; ++i) var[static_cast<size_t>(i)] /= static_cast<T>(rows);
  for (long long i = 0; i < f; ++i) {
    bn.run_mean.value()[static_cast<size_t>(i)] =
        (T(1) - bn.momentum) * bn.run_mean.value()[static_cast<size_t>(i)] + bn.momentum * mu[static_cast<size_t>(i)];
    bn.run_var.value()[static_cast<size_t>(i)] =
        (T(1) - bn.momentum) * bn.run_var.value()[static_cast<size_t>(i)] + bn.momentum * var[static_cast<size_t>(i)];
  }
  std::vector<T> inv_sigma(static_cast<size_t>(f));
  for (long long i = 0; i < f; ++i) inv_sigma[static_cast<size_t>(i)] = T(1) / std::sqrt(var[static_cast<size_t>(i)] + bn.eps);
  for (long long r = 0; r < rows; ++r) {
    for (long long i = 0; i < f; ++i) {
      const T xhat = (x.value()[r * f + i] - mu[static_cast<size_t>(i)]) * inv_sigma[static_cast<size_t>(i)];
      out.value()[r * f + i] = xhat * bn.gamma.value()[static_cast<size_t>(i)] + bn.beta.value()[static_cast<size_t>(i)];
    }
  }
  Tensor<T> gamma = bn.gamma, beta = bn.beta;
  if (detail::track<T>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    detail::record<T>([x, gamma, beta, out, f, rows, mu, inv_sigma]() mutable {
      const T* g = out.grad().data();
      const T invn = T(1) / static_cast<T>(rows);
      for (long long i = 0; i < f; ++i) {
        const T is = inv_sigma[static_cast<size_t>(i)];
        const T m = mu[static_cast<size_t>(i)];
        T sum_gy = T(0), sum_gy_xhat = T(0);
        for (long long r = 0; r < rows; ++r) {
          const T xhat = (x.value()[r * f + i] - m) * is;
          const T gy = g[r * f + i] * gamma.value()[static_cast<size_t>(i)];
          sum_gy += gy;
          sum_gy_xhat += gy * xhat;
          if (gamma.requires_grad()) gamma.grad()[static_cast<size_t>(i)] += g[r * f + i] * xhat;
          if (beta.requires_grad()) beta.grad()[static_cast<size_t>(i)] += g[r * f + i];
        }
        if (x.requires_grad()) {
          for (long long r = 0; r < rows; ++r) {
            const T xhat = (x.value()[r * f + i] - m) * is;
            const T gy = g[r * f + i] * gamma.value()[static_cast<size_t>(i)];
            x.grad()[r * f + i] += is * (gy - invn * sum_gy - invn * xhat * sum_gy_xhat);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// gumbel-softmax
// ---------------------------------------------------------------------------

// Core relaxation with caller-supplied noise over the last axis:
//   soft = softmax((logits + noise) / tau)
// hard=true replaces the forward value by one-hot(argmax(soft)) but routes
// gradients through the soft sample (straight-through).
template <typename T>
Tensor<T> gumbel_softmax_with_noise(const Tensor<T>& logits, const Tensor<T>& noise, T tau,
                                    bool hard) {
  if (tau <= T(0)) throw ValueError("gumbel_softmax: tau must be positive");
  if (logits.shape() != noise.shape()) throw ShapeError("gumbel_softmax: noise shape mismatch");
  Tensor<T> soft = softmax_last(scale(add(logits, noise), T(1) / tau));
  if (!hard) return soft;

  const long long d = soft.dim(-1);
  const long long rows = soft.numel() / d;
  Tensor<T> out(soft.shape());
  for (long long r = 0; r < rows; ++r) {
    const T* src = soft.value().data() + r * d;
    long long best = 0;
    for (long long i = 1; i < d; ++i) {
      if (src[i] > src[best]) best = i;  // ties keep the lowest index
    }
    out.value()[r * d + best] = T(1);
  }
  if (detail::track<T>({&soft})) {
    out.set_requires_grad(true);
    detail::record<T>([soft, out]() mutable {
      auto& gs = soft.grad();
      const auto& g = out.grad();
      for (size_t i = 0; i < g.size(); ++i) gs[i] += g[i];  // straight-through
    });
  }
  return out;
}

// Draws standard Gumbel noise -log(-log(u)) from `rng`, one value per logit,
// in flat order. u is clamped away from {0,1}.
template <typename T>
Tensor<T> gumbel_noise(const std::vector<int>& shape, RngState& rng) {
  Tensor<T> noise(shape);
  constexpr double kClamp = 1e-12;
  for (auto& v : noise.value()) {
    double u = rng.uniform();
    u = std::min(std::max(u, kClamp), 1.0 - kClamp);
    v = static_cast<T>(-std::log(-std::log(u)));
  }
  return noise;
}

template <typename T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, T tau, bool hard, RngState& rng) {
  return gumbel_softmax_with_noise(logits, gumbel_noise<T>(logits.shape(), rng), tau, hard);
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

// Mean negative log-likelihood over the batch from raw logits [B, C].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [B, C]");
  const long long b = logits.dim(0), c = logits.dim(1);
  if (static_cast<long long>(labels.size()) != b) {
    throw ShapeError("cross_entropy: batch size mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= c) {
      throw ValueError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                       std::to_string(c) + ")");
    }
  }
  Tensor<T> out({1});
  std::vector<T> logp(static_cast<size_t>(b * c));
  T total = T(0);
  for (long long r = 0; r < b; ++r) {
    const T* src = logits.value().data() + r * c;
    T mx = src[0];
    for (long long i = 1; i < c; ++i) mx = std::max(mx, src[i]);
    T s = T(0);
    for (long long i = 0; i < c; ++i) s += std::exp(src[i] - mx);
    const T lse = mx + std::log(s);
    for (long long i = 0; i < c; ++i) logp[static_cast<size_t>(r * c + i)] = src[i] - lse;
    total -= logp[static_cast<size_t>(r * c + labels[static_cast<size_t>(r)])];
  }
  out.value()[0] = total / static_cast<T>(b);
  if (detail::track<T>({&logits})) {
    out.set_requires_grad(true);
    detail::record<T>([logits, out, labels, logp, b, c]() mutable {
      const T g = out.grad()[0] / static_cast<T>(b);
      T* gx = logits.grad().data();
      for (long long r = 0; r < b; ++r) {
        for (long long i = 0; i < c; ++i) {
          const T p = std::exp(logp[static_cast<size_t>(r * c + i)]);
          const T ind = (i == labels[static_cast<size_t>(r)]) ? T(1) : T(0);
          gx[r * c + i] += g * (p - ind);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// patch extraction
// ---------------------------------------------------------------------------

// [B, C, S, S] -> [B, P, C*p*p] where P = (S/p)^2; patches in row-major grid
// order, each flattened channel-major to match a weight of shape [C*p*p, d].
template <typename T>
Tensor<T> im2patches(const Tensor<T>& images, int patch) {
  if (images.rank() != 4) throw ShapeError("im2patches: expected [B, C, S, S]");
  const int b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (h != w) throw ShapeError("im2patches: images must be square");
  if (patch <= 0 || h % patch != 0) {
    throw ShapeError("im2patches: size " + std::to_string(h) + " not divisible by patch " +
                     std::to_string(patch));
  }
  const int grid = h / patch;
  const int np = grid * grid;
  const int pd = c * patch * patch;
  Tensor<T> out({b, np, pd});
  for (int bi = 0; bi < b; ++bi) {
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        T* dst = out.value().data() + ((static_cast<long long>(bi) * np + gy * grid + gx)) * pd;
        long long k = 0;
        for (int ci = 0; ci < c; ++ci) {
          for (int py = 0; py < patch; ++py) {
            const T* src = images.value().data() +
                           ((static_cast<long long>(bi) * c + ci) * h + (gy * patch + py)) * w +
                           gx * patch;
            for (int px = 0; px < patch; ++px) dst[k++] = src[px];
          }
        }
      }
    }
  }
  if (detail::track<T>({&images})) {
    out.set_requires_grad(true);
    detail::record<T>([images, out, b, c, h, w, patch, grid, np, pd]() mutable {
      const T* g = out.grad().data();
      T* gx = images.grad().data();
      for (int bi = 0; bi < b; ++bi) {
        for (int gy = 0; gy < grid; ++gy) {
          for (int gxi = 0; gxi < grid; ++gxi) {
            const T* src = g + ((static_cast<long long>(bi) * np + gy * grid + gxi)) * pd;
            long long k = 0;
            for (int ci = 0; ci < c; ++ci) {
              for (int py = 0; py < patch; ++py) {
                T* dst = gx + ((static_cast<long long>(bi) * c + ci) * h + (gy * patch + py)) * w +
                         gxi * patch;
                for (int px = 0; px < patch; ++px) dst[px] += src[k++];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// small conveniences
// ---------------------------------------------------------------------------

// Drops the last axis by selecting one component: [..., d] -> [...].
template <typename T>
Tensor<T> index_last(const Tensor<T>& x, int idx) {
  Tensor<T> s = slice_axis(x, -1, idx, 1);
  std::vector<int> shape(s.shape().begin(), s.shape().end() - 1);
  if (shape.empty()) shape.push_back(1);
  return reshape(s, shape);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

// Fills a tensor with N(0, std^2) draws; used by initializers.
template <typename T>
void fill_normal(Tensor<T>& t, double stddev, RngState& rng) {
  for (auto& v : t.value()) v = static_cast<T>(rng.normal() * stddev);
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.value()) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

}  // namespace usdc
