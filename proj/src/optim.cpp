#include "qrec/optim.hpp"

#include <cmath>

namespace qrec {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (auto& p : params_) {
    QREC_CHECK(p.requires_grad(), "Adam got non-trainable tensor '", p.name(), "'");
    p.ensure_grad();
    m_.emplace_back(p.v().size(), Real(0));
    v_.emplace_back(p.v().size(), Real(0));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const Real bc1 = Real(1) - std::pow(cfg_.beta1, Real(t_));
  const Real bc2 = Real(1) - std::pow(cfg_.beta2, Real(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto& val = p.v();
    auto& grad = p.g();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < val.size(); ++j) {
      const Real g = grad[j];
      if (!std::isfinite(g))
        throw TrainingError(detail::msg("non-finite gradient in parameter '",
                                        p.name().empty() ? "<unnamed>" : p.name(),
                                        "' at element ", j));
      m[j] = cfg_.beta1 * m[j] + (Real(1) - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (Real(1) - cfg_.beta2) * g * g;
      const Real mhat = m[j] / bc1;
      const Real vhat = v[j] / bc2;
      val[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace qrec
