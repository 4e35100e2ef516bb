#include "sod/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace sod {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, bool requires_grad)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<real>>(static_cast<size_t>(numel_of(shape_)), real(0))),
      requires_grad_(requires_grad) {
  for (int e : shape_)
    if (e <= 0) throw ShapeError("tensor extent must be positive, got " + shape_str(shape_));
  if (requires_grad_) ensure_grad();
}

Tensor::Tensor(Shape shape, std::vector<real> data, bool requires_grad)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<real>>(std::move(data))),
      requires_grad_(requires_grad) {
  if (numel_of(shape_) != static_cast<std::int64_t>(data_->size()))
    throw ShapeError("data length " + std::to_string(data_->size()) + " does not match shape " +
                     shape_str(shape_));
  if (requires_grad_) ensure_grad();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return Tensor(std::move(shape), requires_grad); }

Tensor Tensor::full(Shape shape, real v, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), v);
  return t;
}

Tensor Tensor::scalar(real v, bool requires_grad) { return full({1}, v, requires_grad); }

real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
  return (*data_)[0];
}

std::vector<real>& Tensor::ensure_grad() {
  if (!grad_) grad_ = std::make_shared<std::vector<real>>(data_->size(), real(0));
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), real(0));
}

bool Tensor::all_finite() const {
  for (real v : *data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::check_finite(const std::string& who) const {
  if (!all_finite()) throw NumericError("non-finite value in " + who);
}

void Tape::backward(Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  loss.ensure_grad()[0] = real(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
}

void backward(Tape& tape, Tensor& loss) { tape.backward(loss); }

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

bool want_tape(Tape* tape, const Tensor& out) { return tape && tape->recording() && out.requires_grad(); }

// C[M,N] += A[M,K] * B[K,N], all row-major.
void matmul_acc(const real* A, const real* B, real* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const real* a = A + static_cast<std::int64_t>(i) * K;
    real* c = C + static_cast<std::int64_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      real av = a[k];
      if (av == real(0)) continue;
      const real* b = B + static_cast<std::int64_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A^T[M,K] * B[K,N] where A is stored [K,M].
void matmul_at_acc(const real* A, const real* B, real* C, int M, int K, int N) {
  for (int k = 0; k < K; ++k) {
    const real* a = A + static_cast<std::int64_t>(k) * M;
    const real* b = B + static_cast<std::int64_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      real av = a[i];
      if (av == real(0)) continue;
      real* c = C + static_cast<std::int64_t>(i) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B^T[K,N] where B is stored [N,K].
void matmul_bt_acc(const real* A, const real* B, real* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const real* a = A + static_cast<std::int64_t>(i) * K;
    real* c = C + static_cast<std::int64_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const real* b = B + static_cast<std::int64_t>(j) * K;
      real acc = 0;
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

template <class Fwd, class Bwd>
Tensor unary_op(Tape* tape, const Tensor& a, Fwd f, Bwd dfdx) {
  Tensor out(a.shape(), a.requires_grad());
  const auto& x = a.data();
  auto& y = out.data();
  for (size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  if (want_tape(tape, out)) {
    Tensor ia = a, o = out;
    tape->record([ia, o, dfdx]() mutable {
      if (!o.has_grad() || !ia.requires_grad()) return;
      const auto& g = o.grad();
      const auto& x = ia.data();
      const auto& y = o.data();
      auto& ga = ia.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
    });
  }
  return out;
}

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape(), a.requires_grad() || b.requires_grad());
  for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (want_tape(tape, out)) {
    Tensor ia = a, ib = b, o = out;
    tape->record([ia, ib, o]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      if (ia.requires_grad()) {
        auto& ga = ia.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (ib.requires_grad()) {
        auto& gb = ib.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape(), a.requires_grad() || b.requires_grad());
  for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (want_tape(tape, out)) {
    Tensor ia = a, ib = b, o = out;
    tape->record([ia, ib, o]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      if (ia.requires_grad()) {
        auto& ga = ia.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (ib.requires_grad()) {
        auto& gb = ib.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape(), a.requires_grad() || b.requires_grad());
  for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (want_tape(tape, out)) {
    Tensor ia = a, ib = b, o = out;
    tape->record([ia, ib, o]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      if (ia.requires_grad()) {
        auto& ga = ia.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ib.data()[i];
      }
      if (ib.requires_grad()) {
        auto& gb = ib.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ia.data()[i];
      }
    });
  }
  return out;
}

Tensor div(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  Tensor out(a.shape(), a.requires_grad() || b.requires_grad());
  for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] / b.data()[i];
  if (want_tape(tape, out)) {
    Tensor ia = a, ib = b, o = out;
    tape->record([ia, ib, o]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      if (ia.requires_grad()) {
        auto& ga = ia.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / ib.data()[i];
      }
      if (ib.requires_grad()) {
        auto& gb = ib.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i)
          gb[i] -= g[i] * ia.data()[i] / (ib.data()[i] * ib.data()[i]);
      }
    });
  }
  return out;
}

namespace {
Tensor min_or_max(Tape* tape, const Tensor& a, const Tensor& b, bool take_min) {
  check_same_shape(a, b, take_min ? "minimum" : "maximum");
  Tensor out(a.shape(), a.requires_grad() || b.requires_grad());
  for (size_t i = 0; i < out.data().size(); ++i)
    out.data()[i] = take_min ? std::min(a.data()[i], b.data()[i]) : std::max(a.data()[i], b.data()[i]);
  if (want_tape(tape, out)) {
    Tensor ia = a, ib = b, o = out;
    tape->record([ia, ib, o, take_min]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      for (size_t i = 0; i < g.size(); ++i) {
        bool a_wins = take_min ? (ia.data()[i] <= ib.data()[i]) : (ia.data()[i] >= ib.data()[i]);
        if (a_wins) {
          if (ia.requires_grad()) ia.ensure_grad()[i] += g[i];
        } else {
          if (ib.requires_grad()) ib.ensure_grad()[i] += g[i];
        }
      }
    });
  }
  return out;
}
}  // namespace

Tensor minimum(Tape* tape, const Tensor& a, const Tensor& b) { return min_or_max(tape, a, b, true); }
Tensor maximum(Tape* tape, const Tensor& a, const Tensor& b) { return min_or_max(tape, a, b, false); }

Tensor add_scalar(Tape* tape, const Tensor& a, real s) {
  return unary_op(tape, a, [s](real x) { return x + s; }, [](real, real) { return real(1); });
}

Tensor mul_scalar(Tape* tape, const Tensor& a, real s) {
  return unary_op(tape, a, [s](real x) { return x * s; }, [s](real, real) { return s; });
}

Tensor neg(Tape* tape, const Tensor& a) { return mul_scalar(tape, a, real(-1)); }

Tensor square(Tape* tape, const Tensor& a) {
  return unary_op(tape, a, [](real x) { return x * x; }, [](real x, real) { return 2 * x; });
}

Tensor tsqrt(Tape* tape, const Tensor& a) {
  return unary_op(tape, a, [](real x) { return std::sqrt(x); },
                  [](real, real y) { return real(0.5) / y; });
}

Tensor texp(Tape* tape, const Tensor& a) {
  return unary_op(tape, a, [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

Tensor tlog(Tape* tape, const Tensor& a) {
  return unary_op(tape, a, [](real x) { return std::log(x); }, [](real x, real) { return 1 / x; });
}

Tensor tatan(Tape* tape, const Tensor& a) {
  return unary_op(tape, a, [](real x) { return std::atan(x); },
                  [](real x, real) { return 1 / (1 + x * x); });
}

Tensor sigmoid(Tape* tape, const Tensor& a) {
  return unary_op(tape, a, [](real x) { return 1 / (1 + std::exp(-x)); },
                  [](real, real y) { return y * (1 - y); });
}

Tensor silu(Tape* tape, const Tensor& a) {
  return unary_op(tape, a,
                  [](real x) { return x / (1 + std::exp(-x)); },
                  [](real x, real) {
                    real s = 1 / (1 + std::exp(-x));
                    return s * (1 + x * (1 - s));
                  });
}

Tensor gelu(Tape* tape, const Tensor& a) {
  constexpr real kInvSqrt2 = real(0.7071067811865475);
  constexpr real kInvSqrt2Pi = real(0.3989422804014327);
  return unary_op(tape, a,
                  [](real x) { return real(0.5) * x * (1 + std::erf(x * kInvSqrt2)); },
                  [](real x, real) {
                    real cdf = real(0.5) * (1 + std::erf(x * kInvSqrt2));
                    real pdf = kInvSqrt2Pi * std::exp(real(-0.5) * x * x);
                    return cdf + x * pdf;
                  });
}

Tensor sum(Tape* tape, const Tensor& a) {
  real acc = 0;
  for (real v : a.data()) acc += v;
  Tensor out = Tensor::scalar(acc, a.requires_grad());
  if (want_tape(tape, out)) {
    Tensor ia = a, o = out;
    tape->record([ia, o]() mutable {
      if (!o.has_grad() || !ia.requires_grad()) return;
      real g = o.grad()[0];
      auto& ga = ia.ensure_grad();
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

Tensor mean(Tape* tape, const Tensor& a) {
  return mul_scalar(tape, sum(tape, a), real(1) / static_cast<real>(a.numel()));
}

Tensor reshape(Tape* tape, const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out(shape, a.data(), a.requires_grad());
  if (want_tape(tape, out)) {
    Tensor ia = a, o = out;
    tape->record([ia, o]() mutable {
      if (!o.has_grad() || !ia.requires_grad()) return;
      const auto& g = o.grad();
      auto& ga = ia.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

namespace {
std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
  return st;
}
}  // namespace

Tensor permute(Tape* tape, const Tensor& a, const std::vector<int>& perm) {
  int r = a.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute rank mismatch");
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = a.dim(perm[static_cast<size_t>(i)]);
  Tensor out(out_shape, a.requires_grad());
  auto in_st = strides_of(a.shape());
  auto out_st = strides_of(out_shape);
  std::int64_t n = a.numel();
  // map flat output index -> flat input index
  std::vector<std::int64_t> src(static_cast<size_t>(n));
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t rem = o, in = 0;
    for (int d = 0; d < r; ++d) {
      std::int64_t c = rem / out_st[static_cast<size_t>(d)];
      rem %= out_st[static_cast<size_t>(d)];
      in += c * in_st[static_cast<size_t>(perm[static_cast<size_t>(d)])];
    }
    src[static_cast<size_t>(o)] = in;
    out.data()[static_cast<size_t>(o)] = a.data()[static_cast<size_t>(in)];
  }
  if (want_tape(tape, out)) {
    Tensor ia = a, o = out;
    tape->record([ia, o, src = std::move(src)]() mutable {
      if (!o.has_grad() || !ia.requires_grad()) return;
      const auto& g = o.grad();
      auto& ga = ia.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ga[static_cast<size_t>(src[i])] += g[i];
    });
  }
  return out;
}

Tensor concat_channels(Tape* tape, const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty operand list");
  const Tensor& first = xs[0];
  if (first.rank() != 4) throw ShapeError("concat_channels needs 4-D operands");
  int N = first.dim(0), H = first.dim(2), W = first.dim(3);
  int C = 0;
  bool rg = false;
  for (size_t i = 0; i < xs.size(); ++i) {
    const Tensor& t = xs[i];
    if (t.rank() != 4 || t.dim(0) != N || t.dim(2) != H || t.dim(3) != W)
      throw ShapeError("concat_channels: operand " + std::to_string(i) + " has shape " +
                       shape_str(t.shape()) + ", expected [N=" + std::to_string(N) + ",*,H=" +
                       std::to_string(H) + ",W=" + std::to_string(W) + "]");
    C += t.dim(1);
    rg = rg || t.requires_grad();
  }
  Tensor out({N, C, H, W}, rg);
  std::int64_t hw = static_cast<std::int64_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    std::int64_t coff = 0;
    for (const Tensor& t : xs) {
      std::int64_t cnt = static_cast<std::int64_t>(t.dim(1)) * hw;
      std::memcpy(out.data().data() + (static_cast<std::int64_t>(n) * C * hw + coff * hw),
                  t.data().data() + static_cast<std::int64_t>(n) * cnt, sizeof(real) * static_cast<size_t>(cnt));
      coff += t.dim(1);
    }
  }
  if (tape && tape->recording() && rg) {
    std::vector<Tensor> ins = xs;
    Tensor o = out;
    tape->record([ins, o, N, C, hw]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      for (int n = 0; n < N; ++n) {
        std::int64_t coff = 0;
        for (Tensor& t : ins) {
          std::int64_t cnt = static_cast<std::int64_t>(t.dim(1)) * hw;
          if (t.requires_grad()) {
            auto& gt = t.ensure_grad();
            const real* src = g.data() + (static_cast<std::int64_t>(n) * C * hw + coff * hw);
            real* dst = gt.data() + static_cast<std::int64_t>(n) * cnt;
            for (std::int64_t i = 0; i < cnt; ++i) dst[i] += src[i];
          }
          coff += t.dim(1);
        }
      }
    });
  }
  return out;
}

Tensor gather(Tape* tape, const Tensor& a, const std::vector<std::int64_t>& idx, Shape out_shape) {
  if (numel_of(out_shape) != static_cast<std::int64_t>(idx.size()))
    throw ShapeError("gather: index count does not match output shape");
  Tensor out(out_shape, a.requires_grad());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.numel()) throw ShapeError("gather: index out of range");
    out.data()[i] = a.data()[static_cast<size_t>(idx[i])];
  }
  if (want_tape(tape, out)) {
    Tensor ia = a, o = out;
    tape->record([ia, o, idx]() mutable {
      if (!o.has_grad() || !ia.requires_grad()) return;
      const auto& g = o.grad();
      auto& ga = ia.ensure_grad();
      for (size_t i = 0; i < idx.size(); ++i) ga[static_cast<size_t>(idx[i])] += g[i];
    });
  }
  return out;
}

Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be 2-D, got " + shape_str(w.shape()));
  int din = w.dim(0), dout = w.dim(1);
  if (x.dim(x.rank() - 1) != din)
    throw ShapeError("linear: input last extent " + std::to_string(x.dim(x.rank() - 1)) +
                     " != weight rows " + std::to_string(din));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != dout))
    throw ShapeError("linear: bias shape " + shape_str(b.shape()));
  std::int64_t rows = x.numel() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  bool rg = x.requires_grad() || w.requires_grad() || (b.defined() && b.requires_grad());
  Tensor out(out_shape, rg);
  if (b.defined()) {
    for (std::int64_t r = 0; r < rows; ++r)
      std::memcpy(out.data().data() + r * dout, b.data().data(), sizeof(real) * static_cast<size_t>(dout));
  }
  matmul_acc(x.data().data(), w.data().data(), out.data().data(), static_cast<int>(rows), din, dout);
  if (want_tape(tape, out)) {
    Tensor ix = x, iw = w, ib = b, o = out;
    tape->record([ix, iw, ib, o, rows, din, dout]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      if (ix.requires_grad()) {
        auto& gx = ix.ensure_grad();
        matmul_bt_acc(g.data(), iw.data().data(), gx.data(), static_cast<int>(rows), dout, din);
      }
      if (iw.requires_grad()) {
        auto& gw = iw.ensure_grad();
        matmul_at_acc(ix.data().data(), g.data(), gw.data(), din, static_cast<int>(rows), dout);
      }
      if (ib.defined() && ib.requires_grad()) {
        auto& gb = ib.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < dout; ++j) gb[static_cast<size_t>(j)] += g[static_cast<size_t>(r * dout + j)];
      }
    });
  }
  return out;
}

Tensor bmm(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  Tensor out({B, M, N}, a.requires_grad() || b.requires_grad());
  for (int i = 0; i < B; ++i)
    matmul_acc(a.data().data() + static_cast<std::int64_t>(i) * M * K,
               b.data().data() + static_cast<std::int64_t>(i) * K * N,
               out.data().data() + static_cast<std::int64_t>(i) * M * N, M, K, N);
  if (want_tape(tape, out)) {
    Tensor ia = a, ib = b, o = out;
    tape->record([ia, ib, o, B, M, K, N]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      for (int i = 0; i < B; ++i) {
        const real* gi = g.data() + static_cast<std::int64_t>(i) * M * N;
        if (ia.requires_grad())
          matmul_bt_acc(gi, ib.data().data() + static_cast<std::int64_t>(i) * K * N,
                        ia.ensure_grad().data() + static_cast<std::int64_t>(i) * M * K, M, N, K);
        if (ib.requires_grad())
          matmul_at_acc(ia.data().data() + static_cast<std::int64_t>(i) * M * K, gi,
                        ib.ensure_grad().data() + static_cast<std::int64_t>(i) * K * N, K, M, N);
      }
    });
  }
  return out;
}

Tensor softmax_last(Tape* tape, const Tensor& a) {
  int D = a.dim(a.rank() - 1);
  std::int64_t rows = a.numel() / D;
  Tensor out(a.shape(), a.requires_grad());
  for (std::int64_t r = 0; r < rows; ++r) {
    const real* x = a.data().data() + r * D;
    real* y = out.data().data() + r * D;
    real mx = x[0];
    for (int i = 1; i < D; ++i) mx = std::max(mx, x[i]);
    real z = 0;
    for (int i = 0; i < D; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    for (int i = 0; i < D; ++i) y[i] /= z;
  }
  if (want_tape(tape, out)) {
    Tensor ia = a, o = out;
    tape->record([ia, o, rows, D]() mutable {
      if (!o.has_grad() || !ia.requires_grad()) return;
      const auto& g = o.grad();
      auto& ga = ia.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const real* y = o.data().data() + r * D;
        const real* gy = g.data() + r * D;
        real dot = 0;
        for (int i = 0; i < D; ++i) dot += gy[i] * y[i];
        real* gx = ga.data() + r * D;
        for (int i = 0; i < D; ++i) gx[i] += y[i] * (gy[i] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
  int D = x.dim(x.rank() - 1);
  if (gamma.numel() != D || beta.numel() != D)
    throw ShapeError("layer_norm: affine extent " + std::to_string(gamma.numel()) +
                     " does not match feature extent " + std::to_string(D));
  std::int64_t rows = x.numel() / D;
  bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  Tensor out(x.shape(), rg);
  std::vector<real> inv_std(static_cast<size_t>(rows)), mu(static_cast<size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const real* xv = x.data().data() + r * D;
    real m = 0;
    for (int i = 0; i < D; ++i) m += xv[i];
    m /= D;
    real var = 0;
    for (int i = 0; i < D; ++i) var += (xv[i] - m) * (xv[i] - m);
    var /= D;
    real is = 1 / std::sqrt(var + eps);
    mu[static_cast<size_t>(r)] = m;
    inv_std[static_cast<size_t>(r)] = is;
    real* y = out.data().data() + r * D;
    for (int i = 0; i < D; ++i)
      y[i] = (xv[i] - m) * is * gamma.data()[static_cast<size_t>(i)] + beta.data()[static_cast<size_t>(i)];
  }
  if (want_tape(tape, out)) {
    Tensor ix = x, ig = gamma, ibt = beta, o = out;
    tape->record([ix, ig, ibt, o, rows, D, mu = std::move(mu), inv_std = std::move(inv_std)]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const real* xv = ix.data().data() + r * D;
        const real* gy = g.data() + r * D;
        real m = mu[static_cast<size_t>(r)], is = inv_std[static_cast<size_t>(r)];
        if (ig.requires_grad() || ibt.requires_grad()) {
          for (int i = 0; i < D; ++i) {
            real xh = (xv[i] - m) * is;
            if (ig.requires_grad()) ig.ensure_grad()[static_cast<size_t>(i)] += gy[i] * xh;
            if (ibt.requires_grad()) ibt.ensure_grad()[static_cast<size_t>(i)] += gy[i];
          }
        }
        if (ix.requires_grad()) {
          real sum_g = 0, sum_gx = 0;
          for (int i = 0; i < D; ++i) {
            real dgy = gy[i] * ig.data()[static_cast<size_t>(i)];
            real xh = (xv[i] - m) * is;
            sum_g += dgy;
            sum_gx += dgy * xh;
          }
          auto& gx = ix.ensure_grad();
          for (int i = 0; i < D; ++i) {
            real dgy = gy[i] * ig.data()[static_cast<size_t>(i)];
            real xh = (xv[i] - m) * is;
            gx[static_cast<size_t>(r * D + i)] += is * (dgy - sum_g / D - xh * sum_gx / D);
          }
        }
      }
    });
  }
  return out;
}

Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d: operands must be 4-D, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin)
    throw ShapeError("conv2d: input channels " + shape_str(x.shape()) + " do not match kernel " +
                     shape_str(w.shape()));
  if (w.dim(3) != k) throw ShapeError("conv2d: only square kernels supported");
  if (k < 1 || stride < 1 || H + 2 * pad < k || W + 2 * pad < k)
    throw ShapeError("conv2d: invalid geometry k=" + std::to_string(k) + " s=" + std::to_string(stride) +
                     " pad=" + std::to_string(pad) + " on " + shape_str(x.shape()));
  if (b.defined() && b.numel() != Cout) throw ShapeError("conv2d: bias extent mismatch");
  int Ho = (H + 2 * pad - k) / stride + 1;
  int Wo = (W + 2 * pad - k) / stride + 1;
  bool rg = x.requires_grad() || w.requires_grad() || (b.defined() && b.requires_grad());
  Tensor out({N, Cout, Ho, Wo}, rg);

  int K = Cin * k * k;
  std::int64_t owh = static_cast<std::int64_t>(Ho) * Wo;
  std::vector<real> cols(static_cast<size_t>(K) * static_cast<size_t>(owh));
  auto im2col = [&](const real* img) {
    // cols layout [K, Ho*Wo]
    for (int c = 0; c < Cin; ++c)
      for (int ki = 0; ki < k; ++ki)
        for (int kj = 0; kj < k; ++kj) {
          real* row = cols.data() + (static_cast<std::int64_t>((c * k + ki) * k + kj)) * owh;
          for (int oi = 0; oi < Ho; ++oi) {
            int ii = oi * stride + ki - pad;
            for (int oj = 0; oj < Wo; ++oj) {
              int jj = oj * stride + kj - pad;
              row[static_cast<std::int64_t>(oi) * Wo + oj] =
                  (ii >= 0 && ii < H && jj >= 0 && jj < W)
                      ? img[(static_cast<std::int64_t>(c) * H + ii) * W + jj]
                      : real(0);
            }
          }
        }
  };

  for (int n = 0; n < N; ++n) {
    im2col(x.data().data() + static_cast<std::int64_t>(n) * Cin * H * W);
    real* on = out.data().data() + static_cast<std::int64_t>(n) * Cout * owh;
    if (b.defined())
      for (int co = 0; co < Cout; ++co)
        for (std::int64_t p = 0; p < owh; ++p) on[co * owh + p] = b.data()[static_cast<size_t>(co)];
    matmul_acc(w.data().data(), cols.data(), on, Cout, K, static_cast<int>(owh));
  }

  if (want_tape(tape, out)) {
    Tensor ix = x, iw = w, ib = b, o = out;
    tape->record([ix, iw, ib, o, stride, pad, N, Cin, H, W, Cout, k, Ho, Wo]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      int K = Cin * k * k;
      std::int64_t owh = static_cast<std::int64_t>(Ho) * Wo;
      std::vector<real> cols(static_cast<size_t>(K) * static_cast<size_t>(owh));
      std::vector<real> gcols;
      if (ix.requires_grad()) gcols.resize(cols.size());
      for (int n = 0; n < N; ++n) {
        const real* img = ix.data().data() + static_cast<std::int64_t>(n) * Cin * H * W;
        const real* gn = g.data() + static_cast<std::int64_t>(n) * Cout * owh;
        if (iw.requires_grad() || ix.requires_grad()) {
          for (int c = 0; c < Cin; ++c)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                real* row = cols.data() + (static_cast<std::int64_t>((c * k + ki) * k + kj)) * owh;
                for (int oi = 0; oi < Ho; ++oi) {
                  int ii = oi * stride + ki - pad;
                  for (int oj = 0; oj < Wo; ++oj) {
                    int jj = oj * stride + kj - pad;
                    row[static_cast<std::int64_t>(oi) * Wo + oj] =
                        (ii >= 0 && ii < H && jj >= 0 && jj < W)
                            ? img[(static_cast<std::int64_t>(c) * H + ii) * W + jj]
                            : real(0);
                  }
                }
              }
        }
        if (iw.requires_grad())
          matmul_bt_acc(gn, cols.data(), iw.ensure_grad().data(), Cout, static_cast<int>(owh), K);
        if (ib.defined() && ib.requires_grad()) {
          auto& gb = ib.ensure_grad();
          for (int co = 0; co < Cout; ++co)
            for (std::int64_t p = 0; p < owh; ++p) gb[static_cast<size_t>(co)] += gn[co * owh + p];
        }
        if (ix.requires_grad()) {
          std::fill(gcols.begin(), gcols.end(), real(0));
          matmul_at_acc(iw.data().data(), gn, gcols.data(), K, Cout, static_cast<int>(owh));
          auto& gx = ix.ensure_grad();
          real* gimg = gx.data() + static_cast<std::int64_t>(n) * Cin * H * W;
          for (int c = 0; c < Cin; ++c)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                const real* row = gcols.data() + (static_cast<std::int64_t>((c * k + ki) * k + kj)) * owh;
                for (int oi = 0; oi < Ho; ++oi) {
                  int ii = oi * stride + ki - pad;
                  if (ii < 0 || ii >= H) continue;
                  for (int oj = 0; oj < Wo; ++oj) {
                    int jj = oj * stride + kj - pad;
                    if (jj < 0 || jj >= W) continue;
                    gimg[(static_cast<std::int64_t>(c) * H + ii) * W + jj] +=
                        row[static_cast<std::int64_t>(oi) * Wo + oj];
                  }
                }
              }
        }
      }
    });
  }
  return out;
}

Tensor max_pool2d(Tape* tape, const Tensor& x, int k, int stride, int pad) {
  if (x.rank() != 4) throw ShapeError("max_pool2d needs 4-D input");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H + 2 * pad < k || W + 2 * pad < k)
    throw ShapeError("max_pool2d: window larger than padded input");
  int Ho = (H + 2 * pad - k) / stride + 1;
  int Wo = (W + 2 * pad - k) / stride + 1;
  Tensor out({N, C, Ho, Wo}, x.requires_grad());
  std::vector<std::int64_t> arg(static_cast<size_t>(out.numel()), -1);
  std::int64_t oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const real* plane = x.data().data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j, ++oi) {
          real best = 0;
          std::int64_t besti = -1;
          for (int ki = 0; ki < k; ++ki) {
            int ii = i * stride + ki - pad;
            if (ii < 0 || ii >= H) continue;
            for (int kj = 0; kj < k; ++kj) {
              int jj = j * stride + kj - pad;
              if (jj < 0 || jj >= W) continue;
              real v = plane[static_cast<std::int64_t>(ii) * W + jj];
              if (besti < 0 || v > best) {
                best = v;
                besti = (static_cast<std::int64_t>(n) * C + c) * H * W + static_cast<std::int64_t>(ii) * W + jj;
              }
            }
          }
          out.data()[static_cast<size_t>(oi)] = best;
          arg[static_cast<size_t>(oi)] = besti;
        }
    }
  if (want_tape(tape, out)) {
    Tensor ix = x, o = out;
    tape->record([ix, o, arg = std::move(arg)]() mutable {
      if (!o.has_grad() || !ix.requires_grad()) return;
      const auto& g = o.grad();
      auto& gx = ix.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i)
        if (arg[i] >= 0) gx[static_cast<size_t>(arg[i])] += g[i];
    });
  }
  return out;
}

Tensor upsample_nearest2(Tape* tape, const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest2 needs 4-D input");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out({N, C, 2 * H, 2 * W}, x.requires_grad());
  for (int nc = 0; nc < N * C; ++nc) {
    const real* src = x.data().data() + static_cast<std::int64_t>(nc) * H * W;
    real* dst = out.data().data() + static_cast<std::int64_t>(nc) * 4 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        real v = src[static_cast<std::int64_t>(i) * W + j];
        std::int64_t base = (static_cast<std::int64_t>(2 * i)) * 2 * W + 2 * j;
        dst[base] = v;
        dst[base + 1] = v;
        dst[base + 2 * W] = v;
        dst[base + 2 * W + 1] = v;
      }
  }
  if (want_tape(tape, out)) {
    Tensor ix = x, o = out;
    tape->record([ix, o, N, C, H, W]() mutable {
      if (!o.has_grad() || !ix.requires_grad()) return;
      const auto& g = o.grad();
      auto& gx = ix.ensure_grad();
      for (int nc = 0; nc < N * C; ++nc) {
        const real* gd = g.data() + static_cast<std::int64_t>(nc) * 4 * H * W;
        real* gs = gx.data() + static_cast<std::int64_t>(nc) * H * W;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            std::int64_t base = (static_cast<std::int64_t>(2 * i)) * 2 * W + 2 * j;
            gs[static_cast<std::int64_t>(i) * W + j] +=
                gd[base] + gd[base + 1] + gd[base + 2 * W] + gd[base + 2 * W + 1];
          }
      }
    });
  }
  return out;
}

Tensor batch_norm2d(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, real momentum, real eps,
                    bool training) {
  if (x.rank() != 4) throw ShapeError("batch_norm2d needs 4-D input");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C)
    throw ShapeError("batch_norm2d: per-channel extents must equal C=" + std::to_string(C));
  bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  Tensor out(x.shape(), rg);
  std::int64_t hw = static_cast<std::int64_t>(H) * W;
  std::int64_t m = static_cast<std::int64_t>(N) * hw;
  std::vector<real> mu(static_cast<size_t>(C)), var(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) {
    if (training) {
      real s = 0;
      for (int n = 0; n < N; ++n) {
        const real* p = x.data().data() + (static_cast<std::int64_t>(n) * C + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      }
      real mc = s / static_cast<real>(m);
      real v = 0;
      for (int n = 0; n < N; ++n) {
        const real* p = x.data().data() + (static_cast<std::int64_t>(n) * C + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) v += (p[i] - mc) * (p[i] - mc);
      }
      v /= static_cast<real>(m);
      mu[static_cast<size_t>(c)] = mc;
      var[static_cast<size_t>(c)] = v;
      running_mean.data()[static_cast<size_t>(c)] =
          (1 - momentum) * running_mean.data()[static_cast<size_t>(c)] + momentum * mc;
      running_var.data()[static_cast<size_t>(c)] =
          (1 - momentum) * running_var.data()[static_cast<size_t>(c)] + momentum * v;
    } else {
      mu[static_cast<size_t>(c)] = running_mean.data()[static_cast<size_t>(c)];
      var[static_cast<size_t>(c)] = running_var.data()[static_cast<size_t>(c)];
    }
    real is = 1 / std::sqrt(var[static_cast<size_t>(c)] + eps);
    real gc = gamma.data()[static_cast<size_t>(c)], bc = beta.data()[static_cast<size_t>(c)];
    for (int n = 0; n < N; ++n) {
      const real* p = x.data().data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      real* q = out.data().data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) q[i] = (p[i] - mu[static_cast<size_t>(c)]) * is * gc + bc;
    }
  }
  if (want_tape(tape, out)) {
    Tensor ix = x, ig = gamma, ib = beta, o = out;
    tape->record([ix, ig, ib, o, N, C, hw, m, training, eps, mu = std::move(mu),
                  var = std::move(var)]() mutable {
      if (!o.has_grad()) return;
      const auto& g = o.grad();
      for (int c = 0; c < C; ++c) {
        real is = 1 / std::sqrt(var[static_cast<size_t>(c)] + eps);
        real gc = ig.data()[static_cast<size_t>(c)];
        real sum_g = 0, sum_gx = 0;
        for (int n = 0; n < N; ++n) {
          const real* p = ix.data().data() + (static_cast<std::int64_t>(n) * C + c) * hw;
          const real* gy = g.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            real xh = (p[i] - mu[static_cast<size_t>(c)]) * is;
            sum_g += gy[i];
            sum_gx += gy[i] * xh;
          }
        }
        if (ig.requires_grad()) ig.ensure_grad()[static_cast<size_t>(c)] += sum_gx;
        if (ib.requires_grad()) ib.ensure_grad()[static_cast<size_t>(c)] += sum_g;
        if (ix.requires_grad()) {
          auto& gx = ix.ensure_grad();
          for (int n = 0; n < N; ++n) {
            const real* p = ix.data().data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            const real* gy = g.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            real* gq = gx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              if (training) {
                real xh = (p[i] - mu[static_cast<size_t>(c)]) * is;
                gq[i] += gc * is *
                         (gy[i] - sum_g / static_cast<real>(m) - xh * sum_gx / static_cast<real>(m));
              } else {
                gq[i] += gc * is * gy[i];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor bce_with_logits_mean(Tape* tape, const Tensor& logits, const Tensor& targets) {
  check_same_shape(logits, targets, "bce_with_logits_mean");
  std::int64_t n = logits.numel();
  real acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    real x = logits.data()[static_cast<size_t>(i)];
    real t = targets.data()[static_cast<size_t>(i)];
    // max(x,0) - x*t + log(1+exp(-|x|)), the stable form
    acc += std::max(x, real(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor out = Tensor::scalar(acc / static_cast<real>(n), logits.requires_grad());
  if (want_tape(tape, out)) {
    Tensor il = logits, it = targets, o = out;
    tape->record([il, it, o, n]() mutable {
      if (!o.has_grad() || !il.requires_grad()) return;
      real g = o.grad()[0] / static_cast<real>(n);
      auto& gl = il.ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        real x = il.data()[static_cast<size_t>(i)];
        real s = 1 / (1 + std::exp(-x));
        gl[static_cast<size_t>(i)] += g * (s - it.data()[static_cast<size_t>(i)]);
      }
    });
  }
  return out;
}

}  // namespace sod
