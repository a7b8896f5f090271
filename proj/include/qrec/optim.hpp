#pragma once

#include "qrec/tensor.hpp"

namespace qrec {

struct AdamConfig {
  Real lr = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
};

// Adam over a fixed parameter list. Moments live next to the parameters and
// are serialized into checkpoints so a resumed run continues bit-for-bit.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  void step();       // throws TrainingError (naming the tensor) on non-finite grads
  void zero_grad();

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Real>& moment1(size_t i) { return m_[i]; }
  std::vector<Real>& moment2(size_t i) { return v_[i]; }
  AdamConfig& config() { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<Real>> m_, v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

}  // namespace qrec
