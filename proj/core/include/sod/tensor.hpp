#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace sod {

// Scalar width is build-selectable: double for gradient-check builds,
// float for speed-sensitive deployments. Default is double.
#ifdef SOD_REAL_FLOAT
using real = float;
#else
using real = double;
#endif

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t numel_of(const Shape& s);

// Dense row-major tensor. Data and grad buffers are shared; copying a
// Tensor aliases the same storage, which is what the tape relies on.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real v, bool requires_grad = false);
  static Tensor scalar(real v, bool requires_grad = false);

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  std::vector<real>& data() { return *data_; }
  const std::vector<real>& data() const { return *data_; }
  real item() const;

  bool requires_grad() const { return requires_grad_; }
  // Enabling gradients allocates the grad buffer so every alias of this
  // tensor shares it; the tape relies on that.
  void set_requires_grad(bool b) {
    requires_grad_ = b;
    if (b && data_) ensure_grad();
  }

  bool has_grad() const { return static_cast<bool>(grad_); }
  std::vector<real>& ensure_grad();
  std::vector<real>& grad() { return *grad_; }
  const std::vector<real>& grad() const { return *grad_; }
  void zero_grad();
  void drop_grad() { grad_.reset(); }

  bool all_finite() const;
  // Throws NumericError naming `who` if any stored scalar is NaN/Inf.
  void check_finite(const std::string& who) const;

  bool same_storage(const Tensor& o) const { return data_ == o.data_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<real>> data_;
  std::shared_ptr<std::vector<real>> grad_;
  bool requires_grad_ = false;
};

// Explicit per-forward-pass gradient tape. Nodes are recorded in forward
// (topological) order and replayed exactly once in reverse.
class Tape {
 public:
  void record(std::function<void()> fn) {
    if (recording_) nodes_.push_back(std::move(fn));
  }
  void set_recording(bool b) { recording_ = b; }
  bool recording() const { return recording_; }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs every node backward in reverse
  // order, then clears the tape. `loss` must be a scalar.
  void backward(Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  bool recording_ = true;
};

// ---- elementwise ----
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor div(Tape* tape, const Tensor& a, const Tensor& b);
Tensor minimum(Tape* tape, const Tensor& a, const Tensor& b);
Tensor maximum(Tape* tape, const Tensor& a, const Tensor& b);
Tensor add_scalar(Tape* tape, const Tensor& a, real s);
Tensor mul_scalar(Tape* tape, const Tensor& a, real s);
Tensor neg(Tape* tape, const Tensor& a);
Tensor square(Tape* tape, const Tensor& a);
Tensor tsqrt(Tape* tape, const Tensor& a);
Tensor texp(Tape* tape, const Tensor& a);
Tensor tlog(Tape* tape, const Tensor& a);
Tensor tatan(Tape* tape, const Tensor& a);
Tensor sigmoid(Tape* tape, const Tensor& a);
Tensor silu(Tape* tape, const Tensor& a);
Tensor gelu(Tape* tape, const Tensor& a);

// ---- reductions ----
Tensor sum(Tape* tape, const Tensor& a);
Tensor mean(Tape* tape, const Tensor& a);

// ---- structural ----
Tensor reshape(Tape* tape, const Tensor& a, Shape shape);
Tensor permute(Tape* tape, const Tensor& a, const std::vector<int>& perm);
Tensor concat_channels(Tape* tape, const std::vector<Tensor>& xs);
// out[i] = a.flat[idx[i]]; backward scatter-adds. idx entries must be in range.
Tensor gather(Tape* tape, const Tensor& a, const std::vector<std::int64_t>& idx, Shape out_shape);

// ---- linear algebra ----
// x: [..., Din] -> [..., Dout]; w: [Din, Dout]; b: [Dout] (may be undefined).
Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b);
// a: [B, M, K], b: [B, K, N] -> [B, M, N]
Tensor bmm(Tape* tape, const Tensor& a, const Tensor& b);
Tensor softmax_last(Tape* tape, const Tensor& a);
// gamma/beta over last extent D.
Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps);

// ---- spatial ----
Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor max_pool2d(Tape* tape, const Tensor& x, int k, int stride, int pad);
Tensor upsample_nearest2(Tape* tape, const Tensor& x);
// Training mode computes batch statistics and folds them into running
// buffers with the given momentum; eval mode normalizes by the running
// statistics (affine-only backward).
Tensor batch_norm2d(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, real momentum, real eps,
                    bool training);

// ---- losses ----
// mean over all elements of BCE(logits, targets); backward is (sigmoid(x)-t)/n.
Tensor bce_with_logits_mean(Tape* tape, const Tensor& logits, const Tensor& targets);

// Convenience: standalone backward entry matching the tape contract.
void backward(Tape& tape, Tensor& loss);

}  // namespace sod
