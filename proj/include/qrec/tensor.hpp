// Reverse-mode autodiff over dense row-major matrices.
//
// The tape is dynamic: every op appends a backward closure, and backward()
// replays them in reverse. Graphs are rebuilt from scratch each step, which
// keeps halting / masking logic trivially correct at the cost of a little
// allocation churn. All tensors are rank-2; scalars are 1x1, vectors 1xn.
#pragma once

#include <functional>
#include <memory>

#include "qrec/common.hpp"

namespace qrec {

struct TensorImpl {
  int rows = 0;
  int cols = 0;
  std::vector<Real> v;
  std::vector<Real> g;  // allocated lazily, same size as v
  bool requires_grad = false;
  int64_t id = 0;  // tape-assigned; keys the dropout stream
  std::string name;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int rows, int cols, bool requires_grad = false);
  static Tensor from(int rows, int cols, std::vector<Real> values,
                     bool requires_grad = false);
  static Tensor scalar(Real x);
  // iid N(0, sigma^2) entries drawn from rng
  static Tensor randn(int rows, int cols, Real sigma, Rng& rng,
                      bool requires_grad = false);
  static Tensor full(int rows, int cols, Real value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  int rows() const { return impl_->rows; }
  int cols() const { return impl_->cols; }
  int64_t numel() const { return int64_t(impl_->rows) * impl_->cols; }

  std::vector<Real>& v() { return impl_->v; }
  const std::vector<Real>& v() const { return impl_->v; }
  Real item() const;  // value of a 1x1 tensor

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }
  void ensure_grad();
  void zero_grad();
  std::vector<Real>& g();
  const std::vector<Real>& g() const;

  const std::string& name() const { return impl_->name; }
  Tensor& set_name(const std::string& n) {
    impl_->name = n;
    return *this;
  }
  int64_t id() const { return impl_->id; }

  TensorImpl* impl() const { return impl_.get(); }
  bool same_as(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
  explicit Tensor(std::shared_ptr<TensorImpl> p) : impl_(std::move(p)) {}
  friend class Tape;
  static Tensor alloc(int rows, int cols);
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  // Context consumed by dropout(); callers set these once per step.
  uint64_t rng_seed = 0;
  int64_t step = 0;
  bool train_mode = false;

  Tensor matmul(const Tensor& a, const Tensor& b);     // a[m,k] * b[k,n]
  Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a[m,k] * b[n,k]^T
  // add/sub/mul broadcast b against a: same shape, 1x1, row 1xn, or col mx1
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, Real c);
  Tensor relu(const Tensor& a);
  Tensor sigmoid(const Tensor& a);
  Tensor softmax_rows(const Tensor& a);
  Tensor layer_norm_rows(const Tensor& a, Real eps = 1e-5);
  Tensor l2_normalize_rows(const Tensor& a, Real eps = 1e-12);
  Tensor dropout(const Tensor& a, Real p);
  Tensor stop_gradient(const Tensor& a);
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  Tensor sum_rows(const Tensor& a);  // [m,n] -> [m,1]
  Tensor take_rows(const Tensor& a, std::vector<int> idx);
  Tensor concat_cols(const std::vector<Tensor>& xs);
  Tensor slice_cols(const Tensor& a, int start, int len);
  // xs[m] are [B,d]; output [B*M, d] with row i*M+m = xs[m] row i
  Tensor interleave_rows(const std::vector<Tensor>& xs);
  // mean over rows of -log softmax(logits)[target]
  Tensor cross_entropy_rows(const Tensor& logits, std::vector<int> targets);
  // Multi-head scaled dot-product attention. q is [B*Tq, H], k/v are [B*Tk, H].
  // valid_from[b] (optional) masks keys with column < valid_from[b]; when
  // Tq == Tk the same mask silences the padded query rows (zero output/grad).
  Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch,
                   int q_len, int k_len, int heads,
                   std::vector<int> valid_from = {});

  void backward(const Tensor& loss);
  void reset();
  size_t node_count() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  Tensor out(int rows, int cols, bool requires_grad);
  void record(std::function<void()> fn);
  bool track(const Tensor& t) const {
    return grad_enabled_ && t.requires_grad();
  }
  std::vector<std::function<void()>> nodes_;
  int64_t next_id_ = 1;
  bool grad_enabled_ = true;
};

// Debug-build finite check (can be forced on with QREC_CHECK_FINITE=1).
bool finite_checks_enabled();
void check_finite(const Tensor& t, const char* op);

}  // namespace qrec
