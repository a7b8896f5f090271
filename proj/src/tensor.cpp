#include "qrec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "qrec/gemm.hpp"

namespace qrec {

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::alloc(int rows, int cols) {
  QREC_CHECK(rows > 0 && cols > 0, "bad tensor shape ", rows, "x", cols);
  auto impl = std::make_shared<TensorImpl>();
  impl->rows = rows;
  impl->cols = cols;
  impl->v.assign(size_t(rows) * cols, Real(0));
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
  Tensor t = alloc(rows, cols);
  t.impl_->requires_grad = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::from(int rows, int cols, std::vector<Real> values, bool requires_grad) {
  Tensor t = zeros(rows, cols, requires_grad);
  QREC_CHECK(values.size() == size_t(rows) * cols, "value count ", values.size(),
             " does not match shape ", rows, "x", cols);
  t.impl_->v = std::move(values);
  return t;
}

Tensor Tensor::scalar(Real x) { return from(1, 1, {x}); }

Tensor Tensor::full(int rows, int cols, Real value, bool requires_grad) {
  Tensor t = zeros(rows, cols, requires_grad);
  std::fill(t.v().begin(), t.v().end(), value);
  return t;
}

Tensor Tensor::randn(int rows, int cols, Real sigma, Rng& rng, bool requires_grad) {
  Tensor t = zeros(rows, cols, requires_grad);
  for (auto& x : t.v()) x = sigma * rng.normal();
  return t;
}

Real Tensor::item() const {
  QREC_CHECK(numel() == 1, "item() on non-scalar tensor ", rows(), "x", cols());
  return impl_->v[0];
}

void Tensor::ensure_grad() {
  if (impl_->g.size() != impl_->v.size()) impl_->g.assign(impl_->v.size(), Real(0));
}

void Tensor::zero_grad() {
  if (!impl_->g.empty()) std::fill(impl_->g.begin(), impl_->g.end(), Real(0));
}

std::vector<Real>& Tensor::g() {
  QREC_CHECK(impl_->g.size() == impl_->v.size(), "grad not allocated for '",
             impl_->name, "'");
  return impl_->g;
}

const std::vector<Real>& Tensor::g() const {
  QREC_CHECK(impl_->g.size() == impl_->v.size(), "grad not allocated for '",
             impl_->name, "'");
  return impl_->g;
}

bool finite_checks_enabled() {
  static bool on = [] {
#ifndef NDEBUG
    return true;
#else
    const char* env = std::getenv("QREC_CHECK_FINITE");
    return env && env[0] == '1';
#endif
  }();
  return on;
}

void check_finite(const Tensor& t, const char* op) {
  if (!finite_checks_enabled()) return;
  for (Real x : t.v())
    if (!std::isfinite(x))
      throw TrainingError(detail::msg("non-finite value out of op '", op, "'"));
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::out(int rows, int cols, bool requires_grad) {
  Tensor t = Tensor::alloc(rows, cols);
  t.impl()->id = next_id_++;
  t.impl()->requires_grad = requires_grad && grad_enabled_;
  if (t.impl()->requires_grad) t.ensure_grad();
  return t;
}

void Tape::record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

void Tape::backward(const Tensor& loss) {
  QREC_CHECK(grad_enabled_, "backward() on a no-grad tape");
  QREC_CHECK(loss.numel() == 1, "backward() needs a scalar loss, got ",
             loss.rows(), "x", loss.cols());
  QREC_CHECK(loss.requires_grad(), "loss does not require grad");
  const_cast<Tensor&>(loss).g()[0] += Real(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::reset() {
  nodes_.clear();
  next_id_ = 1;
}

namespace {
enum class Bcast { kSame, kScalar, kRow, kCol };

Bcast bcast_kind(const Tensor& a, const Tensor& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::kSame;
  if (b.rows() == 1 && b.cols() == 1) return Bcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::kRow;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::kCol;
  throw ContractError(detail::msg("shapes not broadcastable: ", a.rows(), "x",
                                  a.cols(), " vs ", b.rows(), "x", b.cols()));
}

// index of b's element aligned with a's flat index i
inline size_t bidx(Bcast k, size_t i, int cols) {
  switch (k) {
    case Bcast::kSame: return i;
    case Bcast::kScalar: return 0;
    case Bcast::kRow: return i % cols;
    case Bcast::kCol: return i / cols;
  }
  return 0;
}
}  // namespace

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  QREC_CHECK(a.cols() == b.rows(), "matmul shape mismatch ", a.rows(), "x",
             a.cols(), " * ", b.rows(), "x", b.cols());
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c = out(m, n, track(a) || track(b));
  detail::gemm_nn(a.v().data(), b.v().data(), c.v().data(), m, k, n);
  check_finite(c, "matmul");
  if (c.requires_grad()) {
    Tensor av = a, bv = b;
    record([av, bv, c, m, k, n]() mutable {
      if (av.requires_grad()) {
        av.ensure_grad();
        detail::gemm_nt(c.g().data(), bv.v().data(), av.g().data(), m, n, k);
      }
      if (bv.requires_grad()) {
        bv.ensure_grad();
        detail::gemm_tn(av.v().data(), c.g().data(), bv.g().data(), k, m, n);
      }
    });
  }
  return c;
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
  QREC_CHECK(a.cols() == b.cols(), "matmul_nt shape mismatch ", a.rows(), "x",
             a.cols(), " * (", b.rows(), "x", b.cols(), ")^T");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c = out(m, n, track(a) || track(b));
  detail::gemm_nt(a.v().data(), b.v().data(), c.v().data(), m, k, n);
  check_finite(c, "matmul_nt");
  if (c.requires_grad()) {
    Tensor av = a, bv = b;
    record([av, bv, c, m, k, n]() mutable {
      if (av.requires_grad()) {
        av.ensure_grad();
        detail::gemm_nn(c.g().data(), bv.v().data(), av.g().data(), m, n, k);
      }
      if (bv.requires_grad()) {
        bv.ensure_grad();
        detail::gemm_tn(c.g().data(), av.v().data(), bv.g().data(), n, m, k);
      }
    });
  }
  return c;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  const Bcast kind = bcast_kind(a, b);
  Tensor c = out(a.rows(), a.cols(), track(a) || track(b));
  const int cols = a.cols();
  const size_t n = size_t(a.numel());
  for (size_t i = 0; i < n; ++i) c.v()[i] = a.v()[i] + b.v()[bidx(kind, i, cols)];
  check_finite(c, "add");
  if (c.requires_grad()) {
    Tensor av = a, bv = b;
    record([av, bv, c, kind, cols, n]() mutable {
      if (av.requires_grad()) {
        av.ensure_grad();
        for (size_t i = 0; i < n; ++i) av.g()[i] += c.g()[i];
      }
      if (bv.requires_grad()) {
        bv.ensure_grad();
        for (size_t i = 0; i < n; ++i) bv.g()[bidx(kind, i, cols)] += c.g()[i];
      }
    });
  }
  return c;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  const Bcast kind = bcast_kind(a, b);
  Tensor c = out(a.rows(), a.cols(), track(a) || track(b));
  const int cols = a.cols();
  const size_t n = size_t(a.numel());
  for (size_t i = 0; i < n; ++i) c.v()[i] = a.v()[i] - b.v()[bidx(kind, i, cols)];
  check_finite(c, "sub");
  if (c.requires_grad()) {
    Tensor av = a, bv = b;
    record([av, bv, c, kind, cols, n]() mutable {
      if (av.requires_grad()) {
        av.ensure_grad();
        for (size_t i = 0; i < n; ++i) av.g()[i] += c.g()[i];
      }
      if (bv.requires_grad()) {
        bv.ensure_grad();
        for (size_t i = 0; i < n; ++i) bv.g()[bidx(kind, i, cols)] -= c.g()[i];
      }
    });
  }
  return c;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  const Bcast kind = bcast_kind(a, b);
  Tensor c = out(a.rows(), a.cols(), track(a) || track(b));
  const int cols = a.cols();
  const size_t n = size_t(a.numel());
  for (size_t i = 0; i < n; ++i) c.v()[i] = a.v()[i] * b.v()[bidx(kind, i, cols)];
  check_finite(c, "mul");
  if (c.requires_grad()) {
    Tensor av = a, bv = b;
    record([av, bv, c, kind, cols, n]() mutable {
      if (av.requires_grad()) {
        av.ensure_grad();
        for (size_t i = 0; i < n; ++i)
          av.g()[i] += c.g()[i] * bv.v()[bidx(kind, i, cols)];
      }
      if (bv.requires_grad()) {
        bv.ensure_grad();
        for (size_t i = 0; i < n; ++i)
          bv.g()[bidx(kind, i, cols)] += c.g()[i] * av.v()[i];
      }
    });
  }
  return c;
}

Tensor Tape::scale(const Tensor& a, Real s) {
  Tensor c = out(a.rows(), a.cols(), track(a));
  const size_t n = size_t(a.numel());
  for (size_t i = 0; i < n; ++i) c.v()[i] = s * a.v()[i];
  check_finite(c, "scale");
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c, s, n]() mutable {
      av.ensure_grad();
      for (size_t i = 0; i < n; ++i) av.g()[i] += s * c.g()[i];
    });
  }
  return c;
}

Tensor Tape::relu(const Tensor& a) {
  Tensor c = out(a.rows(), a.cols(), track(a));
  const size_t n = size_t(a.numel());
  for (size_t i = 0; i < n; ++i) c.v()[i] = a.v()[i] > 0 ? a.v()[i] : Real(0);
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c, n]() mutable {
      av.ensure_grad();
      for (size_t i = 0; i < n; ++i)
        if (av.v()[i] > 0) av.g()[i] += c.g()[i];
    });
  }
  return c;
}

Tensor Tape::sigmoid(const Tensor& a) {
  Tensor c = out(a.rows(), a.cols(), track(a));
  const size_t n = size_t(a.numel());
  for (size_t i = 0; i < n; ++i) {
    const Real x = a.v()[i];
    c.v()[i] = x >= 0 ? Real(1) / (Real(1) + std::exp(-x))
                      : std::exp(x) / (Real(1) + std::exp(x));
  }
  check_finite(c, "sigmoid");
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c, n]() mutable {
      av.ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        const Real y = c.v()[i];
        av.g()[i] += c.g()[i] * y * (Real(1) - y);
      }
    });
  }
  return c;
}

Tensor Tape::softmax_rows(const Tensor& a) {
  Tensor c = out(a.rows(), a.cols(), track(a));
  const int rows = a.rows(), cols = a.cols();
  for (int i = 0; i < rows; ++i) {
    const Real* x = a.v().data() + size_t(i) * cols;
    Real* y = c.v().data() + size_t(i) * cols;
    Real mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    Real z = 0;
    for (int j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < cols; ++j) y[j] /= z;
  }
  check_finite(c, "softmax_rows");
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c, rows, cols]() mutable {
      av.ensure_grad();
      for (int i = 0; i < rows; ++i) {
        const Real* y = c.v().data() + size_t(i) * cols;
        const Real* gy = c.g().data() + size_t(i) * cols;
        Real* gx = av.g().data() + size_t(i) * cols;
        Real dot = 0;
        for (int j = 0; j < cols; ++j) dot += y[j] * gy[j];
        for (int j = 0; j < cols; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return c;
}

Tensor Tape::layer_norm_rows(const Tensor& a, Real eps) {
  Tensor c = out(a.rows(), a.cols(), track(a));
  const int rows = a.rows(), cols = a.cols();
  std::vector<Real> inv_std(rows);
  for (int i = 0; i < rows; ++i) {
    const Real* x = a.v().data() + size_t(i) * cols;
    Real* y = c.v().data() + size_t(i) * cols;
    Real mu = 0;
    for (int j = 0; j < cols; ++j) mu += x[j];
    mu /= cols;
    Real var = 0;
    for (int j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= cols;
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (int j = 0; j < cols; ++j) y[j] = (x[j] - mu) * is;
  }
  check_finite(c, "layer_norm_rows");
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c, rows, cols, inv_std = std::move(inv_std)]() mutable {
      av.ensure_grad();
      for (int i = 0; i < rows; ++i) {
        const Real* y = c.v().data() + size_t(i) * cols;
        const Real* gy = c.g().data() + size_t(i) * cols;
        Real* gx = av.g().data() + size_t(i) * cols;
        Real mean_gy = 0, mean_gyy = 0;
        for (int j = 0; j < cols; ++j) {
          mean_gy += gy[j];
          mean_gyy += gy[j] * y[j];
        }
        mean_gy /= cols;
        mean_gyy /= cols;
        for (int j = 0; j < cols; ++j)
          gx[j] += inv_std[i] * (gy[j] - mean_gy - y[j] * mean_gyy);
      }
    });
  }
  return c;
}

Tensor Tape::l2_normalize_rows(const Tensor& a, Real eps) {
  Tensor c = out(a.rows(), a.cols(), track(a));
  const int rows = a.rows(), cols = a.cols();
  std::vector<Real> norms(rows);
  for (int i = 0; i < rows; ++i) {
    const Real* x = a.v().data() + size_t(i) * cols;
    Real* y = c.v().data() + size_t(i) * cols;
    Real ss = 0;
    for (int j = 0; j < cols; ++j) ss += x[j] * x[j];
    const Real nrm = std::max(std::sqrt(ss), eps);
    norms[i] = nrm;
    for (int j = 0; j < cols; ++j) y[j] = x[j] / nrm;
  }
  check_finite(c, "l2_normalize_rows");
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c, rows, cols, norms = std::move(norms)]() mutable {
      av.ensure_grad();
      for (int i = 0; i < rows; ++i) {
        const Real* y = c.v().data() + size_t(i) * cols;
        const Real* gy = c.g().data() + size_t(i) * cols;
        Real* gx = av.g().data() + size_t(i) * cols;
        Real dot = 0;
        for (int j = 0; j < cols; ++j) dot += y[j] * gy[j];
        for (int j = 0; j < cols; ++j) gx[j] += (gy[j] - y[j] * dot) / norms[i];
      }
    });
  }
  return c;
}

Tensor Tape::dropout(const Tensor& a, Real p) {
  QREC_CHECK(p >= 0 && p < 1, "dropout rate must be in [0,1), got ", p);
  if (!train_mode || p == 0) return a;  // identity at inference
  Tensor c = out(a.rows(), a.cols(), track(a));
  const size_t n = size_t(a.numel());
  const Real keep_scale = Real(1) / (Real(1) - p);
  const uint64_t id = uint64_t(c.id());
  const uint64_t seed = rng_seed;
  const uint64_t stp = uint64_t(step);
  for (size_t i = 0; i < n; ++i) {
    const bool keep = counter_uniform(seed, stp, id, i) >= p;
    c.v()[i] = keep ? a.v()[i] * keep_scale : Real(0);
  }
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c, n, p, keep_scale, seed, stp, id]() mutable {
      av.ensure_grad();
      for (size_t i = 0; i < n; ++i)
        if (counter_uniform(seed, stp, id, i) >= p)
          av.g()[i] += c.g()[i] * keep_scale;
    });
  }
  return c;
}

Tensor Tape::stop_gradient(const Tensor& a) {
  Tensor c = out(a.rows(), a.cols(), false);
  c.v() = a.v();
  return c;
}

Tensor Tape::sum(const Tensor& a) {
  Tensor c = out(1, 1, track(a));
  Real s = 0;
  for (Real x : a.v()) s += x;
  c.v()[0] = s;
  check_finite(c, "sum");
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c]() mutable {
      av.ensure_grad();
      const Real g = c.g()[0];
      for (auto& x : av.g()) x += g;
    });
  }
  return c;
}

Tensor Tape::mean(const Tensor& a) {
  Tensor c = out(1, 1, track(a));
  Real s = 0;
  for (Real x : a.v()) s += x;
  const Real inv = Real(1) / Real(a.numel());
  c.v()[0] = s * inv;
  check_finite(c, "mean");
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c, inv]() mutable {
      av.ensure_grad();
      const Real g = c.g()[0] * inv;
      for (auto& x : av.g()) x += g;
    });
  }
  return c;
}

Tensor Tape::sum_rows(const Tensor& a) {
  Tensor c = out(a.rows(), 1, track(a));
  const int rows = a.rows(), cols = a.cols();
  for (int i = 0; i < rows; ++i) {
    Real s = 0;
    const Real* x = a.v().data() + size_t(i) * cols;
    for (int j = 0; j < cols; ++j) s += x[j];
    c.v()[i] = s;
  }
  check_finite(c, "sum_rows");
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c, rows, cols]() mutable {
      av.ensure_grad();
      for (int i = 0; i < rows; ++i) {
        const Real g = c.g()[i];
        Real* gx = av.g().data() + size_t(i) * cols;
        for (int j = 0; j < cols; ++j) gx[j] += g;
      }
    });
  }
  return c;
}

Tensor Tape::take_rows(const Tensor& a, std::vector<int> idx) {
  QREC_CHECK(!idx.empty(), "take_rows with empty index list");
  for (int i : idx)
    QREC_CHECK(i >= 0 && i < a.rows(), "take_rows index ", i, " out of range [0,",
               a.rows(), ")");
  const int cols = a.cols();
  Tensor c = out(int(idx.size()), cols, track(a));
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(a.v().data() + size_t(idx[r]) * cols, cols,
                c.v().data() + r * cols);
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c, idx = std::move(idx), cols]() mutable {
      av.ensure_grad();
      for (size_t r = 0; r < idx.size(); ++r) {
        const Real* gy = c.g().data() + r * cols;
        Real* gx = av.g().data() + size_t(idx[r]) * cols;
        for (int j = 0; j < cols; ++j) gx[j] += gy[j];
      }
    });
  }
  return c;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& xs) {
  QREC_CHECK(!xs.empty(), "concat_cols with no inputs");
  const int rows = xs[0].rows();
  int total = 0;
  bool req = false;
  for (const auto& x : xs) {
    QREC_CHECK(x.rows() == rows, "concat_cols row mismatch");
    total += x.cols();
    req = req || track(x);
  }
  Tensor c = out(rows, total, req);
  int off = 0;
  for (const auto& x : xs) {
    for (int i = 0; i < rows; ++i)
      std::copy_n(x.v().data() + size_t(i) * x.cols(), x.cols(),
                  c.v().data() + size_t(i) * total + off);
    off += x.cols();
  }
  if (c.requires_grad()) {
    auto inputs = xs;
    record([inputs, c, rows, total]() mutable {
      int off = 0;
      for (auto& x : inputs) {
        if (x.requires_grad()) {
          x.ensure_grad();
          for (int i = 0; i < rows; ++i) {
            const Real* gy = c.g().data() + size_t(i) * total + off;
            Real* gx = x.g().data() + size_t(i) * x.cols();
            for (int j = 0; j < x.cols(); ++j) gx[j] += gy[j];
          }
        }
        off += x.cols();
      }
    });
  }
  return c;
}

Tensor Tape::slice_cols(const Tensor& a, int start, int len) {
  QREC_CHECK(start >= 0 && len > 0 && start + len <= a.cols(),
             "slice_cols [", start, ",", start + len, ") out of range for ",
             a.cols(), " cols");
  const int rows = a.rows(), cols = a.cols();
  Tensor c = out(rows, len, track(a));
  for (int i = 0; i < rows; ++i)
    std::copy_n(a.v().data() + size_t(i) * cols + start, len,
                c.v().data() + size_t(i) * len);
  if (c.requires_grad()) {
    Tensor av = a;
    record([av, c, rows, cols, start, len]() mutable {
      av.ensure_grad();
      for (int i = 0; i < rows; ++i) {
        const Real* gy = c.g().data() + size_t(i) * len;
        Real* gx = av.g().data() + size_t(i) * cols + start;
        for (int j = 0; j < len; ++j) gx[j] += gy[j];
      }
    });
  }
  return c;
}

Tensor Tape::interleave_rows(const std::vector<Tensor>& xs) {
  QREC_CHECK(!xs.empty(), "interleave_rows with no inputs");
  const int b = xs[0].rows(), d = xs[0].cols();
  const int m = int(xs.size());
  bool req = false;
  for (const auto& x : xs) {
    QREC_CHECK(x.rows() == b && x.cols() == d, "interleave_rows shape mismatch");
    req = req || track(x);
  }
  Tensor c = out(b * m, d, req);
  for (int i = 0; i < b; ++i)
    for (int s = 0; s < m; ++s)
      std::copy_n(xs[s].v().data() + size_t(i) * d, d,
                  c.v().data() + size_t(i * m + s) * d);
  if (c.requires_grad()) {
    auto inputs = xs;
    record([inputs, c, b, m, d]() mutable {
      for (int s = 0; s < m; ++s) {
        auto& x = inputs[s];
        if (!x.requires_grad()) continue;
        x.ensure_grad();
        for (int i = 0; i < b; ++i) {
          const Real* gy = c.g().data() + size_t(i * m + s) * d;
          Real* gx = x.g().data() + size_t(i) * d;
          for (int j = 0; j < d; ++j) gx[j] += gy[j];
        }
      }
    });
  }
  return c;
}

Tensor Tape::cross_entropy_rows(const Tensor& logits, std::vector<int> targets) {
  const int rows = logits.rows(), cols = logits.cols();
  QREC_CHECK(int(targets.size()) == rows, "cross_entropy_rows: ", targets.size(),
             " targets for ", rows, " rows");
  for (int t : targets)
    QREC_CHECK(t >= 0 && t < cols, "cross_entropy_rows target ", t,
               " out of range [0,", cols, ")");
  Tensor c = out(1, 1, track(logits));
  Real total = 0;
  for (int i = 0; i < rows; ++i) {
    const Real* x = logits.v().data() + size_t(i) * cols;
    Real mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    Real z = 0;
    for (int j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
    total += mx + std::log(z) - x[targets[i]];
  }
  c.v()[0] = total / rows;
  check_finite(c, "cross_entropy_rows");
  if (c.requires_grad()) {
    Tensor lv = logits;
    record([lv, c, targets = std::move(targets), rows, cols]() mutable {
      lv.ensure_grad();
      const Real g = c.g()[0] / rows;
      for (int i = 0; i < rows; ++i) {
        const Real* x = lv.v().data() + size_t(i) * cols;
        Real* gx = lv.g().data() + size_t(i) * cols;
        Real mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        Real z = 0;
        for (int j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
        for (int j = 0; j < cols; ++j)
          gx[j] += g * (std::exp(x[j] - mx) / z - (j == targets[i] ? 1 : 0));
      }
    });
  }
  return c;
}

namespace {
// Shared by attention forward and backward: softmax over the valid key range.
void attn_probs(const Real* qrow, const Real* k, int k_len, int kv_from, int dh,
                int head_off, int64_t krow0, int hidden, Real scl,
                std::vector<Real>& p) {
  p.assign(size_t(k_len), Real(0));
  if (kv_from >= k_len) return;
  Real mx = -1e300;
  for (int s = kv_from; s < k_len; ++s) {
    const Real* krow = k + (krow0 + s) * hidden + head_off;
    Real dot = 0;
    for (int j = 0; j < dh; ++j) dot += qrow[j] * krow[j];
    p[s] = dot * scl;
    mx = std::max(mx, p[s]);
  }
  Real z = 0;
  for (int s = kv_from; s < k_len; ++s) {
    p[s] = std::exp(p[s] - mx);
    z += p[s];
  }
  for (int s = kv_from; s < k_len; ++s) p[s] /= z;
}
}  // namespace

Tensor Tape::attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       int batch, int q_len, int k_len, int heads,
                       std::vector<int> valid_from) {
  const int hidden = q.cols();
  QREC_CHECK(hidden % heads == 0, "hidden ", hidden, " not divisible by ", heads,
             " heads");
  QREC_CHECK(q.rows() == batch * q_len, "attention: bad q rows");
  QREC_CHECK(k.rows() == batch * k_len && v.rows() == batch * k_len,
             "attention: bad k/v rows");
  QREC_CHECK(k.cols() == hidden && v.cols() == hidden, "attention: bad k/v cols");
  QREC_CHECK(valid_from.empty() || int(valid_from.size()) == batch,
             "attention: valid_from size mismatch");
  const bool mask_queries = (q_len == k_len) && !valid_from.empty();
  const int dh = hidden / heads;
  const Real scl = Real(1) / std::sqrt(Real(dh));

  Tensor o = out(batch * q_len, hidden, track(q) || track(k) || track(v));
  std::vector<Real> p;
  for (int b = 0; b < batch; ++b) {
    const int kv_from = valid_from.empty() ? 0 : valid_from[b];
    const int q_from = mask_queries ? kv_from : 0;
    for (int h = 0; h < heads; ++h) {
      const int off = h * dh;
      for (int t = q_from; t < q_len; ++t) {
        const Real* qrow = q.v().data() + size_t(b * q_len + t) * hidden + off;
        attn_probs(qrow, k.v().data(), k_len, kv_from, dh, off,
                   int64_t(b) * k_len, hidden, scl, p);
        Real* orow = o.v().data() + size_t(b * q_len + t) * hidden + off;
        for (int s = kv_from; s < k_len; ++s) {
          const Real ps = p[s];
          if (ps == 0) continue;
          const Real* vrow = v.v().data() + size_t(b * k_len + s) * hidden + off;
          for (int j = 0; j < dh; ++j) orow[j] += ps * vrow[j];
        }
      }
    }
  }
  check_finite(o, "attention");
  if (o.requires_grad()) {
    Tensor qv = q, kv = k, vv = v;
    record([qv, kv, vv, o, batch, q_len, k_len, heads, dh, scl, hidden,
            mask_queries, valid_from = std::move(valid_from)]() mutable {
      if (qv.requires_grad()) qv.ensure_grad();
      if (kv.requires_grad()) kv.ensure_grad();
      if (vv.requires_grad()) vv.ensure_grad();
      std::vector<Real> p, dp;
      for (int b = 0; b < batch; ++b) {
        const int kv_from = valid_from.empty() ? 0 : valid_from[b];
        const int q_from = mask_queries ? kv_from : 0;
        for (int h = 0; h < heads; ++h) {
          const int off = h * dh;
          for (int t = q_from; t < q_len; ++t) {
            const size_t qi = size_t(b * q_len + t) * hidden + off;
            const Real* qrow = qv.v().data() + qi;
            attn_probs(qrow, kv.v().data(), k_len, kv_from, dh, off,
                       int64_t(b) * k_len, hidden, scl, p);
            const Real* go = o.g().data() + qi;
            dp.assign(size_t(k_len), Real(0));
            Real pdot = 0;
            for (int s = kv_from; s < k_len; ++s) {
              const Real* vrow =
                  vv.v().data() + size_t(b * k_len + s) * hidden + off;
              Real d = 0;
              for (int j = 0; j < dh; ++j) d += go[j] * vrow[j];
              dp[s] = d;
              pdot += p[s] * d;
            }
            for (int s = kv_from; s < k_len; ++s) {
              const Real ds = p[s] * (dp[s] - pdot);  // dL/dscore_s
              const size_t ki = size_t(b * k_len + s) * hidden + off;
              if (vv.requires_grad()) {
                Real* gv = vv.g().data() + ki;
                for (int j = 0; j < dh; ++j) gv[j] += p[s] * go[j];
              }
              if (ds != 0) {
                if (qv.requires_grad()) {
                  const Real* krow = kv.v().data() + ki;
                  Real* gq = qv.g().data() + qi;
                  for (int j = 0; j < dh; ++j) gq[j] += scl * ds * krow[j];
                }
                if (kv.requires_grad()) {
                  Real* gk = kv.g().data() + ki;
                  for (int j = 0; j < dh; ++j) gk[j] += scl * ds * qrow[j];
                }
              }
            }
          }
        }
      }
    });
  }
  return o;
}

}  // namespace qrec
