// Cross-modal semantic injection: learnable per-item queries attend over
// projected modality vectors through a stack of gated transformer layers with
// per-item early exit, trained with symmetric InfoNCE alignment plus a
// query-consistency penalty.
#pragma once

#include <map>

#include "qrec/data.hpp"
#include "qrec/optim.hpp"
#include "qrec/tensor.hpp"

namespace qrec::fusion {

struct FusionConfig {
  int embed_dim = 48;
  int max_depth = 5;
  int n_heads = 4;
  Real tau = 0.07;           // shared by the alignment softmax and InfoNCE
  Real halt_threshold = 0.5;
  Real lambda = 0.1;         // weight of the query-consistency term
  bool fixed_depth = false;  // run all max_depth layers, ignore halting
  Real lr = 1e-3;
  int epochs = 30;
  int batch_size = 128;
};

struct FusionLayer {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
  Tensor wg1, bg1, wg2, bg2;  // gate MLP
};

struct FusionState {
  FusionConfig cfg;
  int n_items = 0;
  Tensor queries;            // [n_items, d]
  Tensor w_t, b_t, w_v, b_v; // modality projections
  Tensor w_s, b_s;           // optional structural channel
  bool has_struct = false;
  std::vector<FusionLayer> layers;

  static FusionState init(const FusionConfig& cfg, int n_items, int text_dim,
                          int vision_dim, int struct_dim, Rng& rng);
  std::vector<Tensor> params() const;
  std::vector<std::vector<Real>> snapshot() const;
  void restore(const std::vector<std::vector<Real>>& snap);
};

struct GateTrace {
  std::vector<int> depth_used;                  // per item in forward order
  std::vector<std::vector<Real>> gate_means;    // per item, one entry per executed layer
  std::map<int, int> depth_histogram() const;
  int distinct_depths() const;
};

// Soft selection of one fused vector from per-item candidates (all [B,d]):
// weights = softmax_j(q . x_j / tau). A single candidate passes through
// unchanged (the softmax over one entry is exactly 1, with zero gradient to
// the score, so the shortcut is exact).
Tensor align_modality(Tape& t, const Tensor& q, const std::vector<Tensor>& candidates,
                      Real tau);

// Symmetric in-batch InfoNCE with diagonal targets, averaged over the two
// directions. Rows should be L2-normalized by the caller. Batch must be >= 2.
Tensor info_nce(Tape& t, const Tensor& a, const Tensor& b, Real tau);

// InfoNCE(h,xt) + InfoNCE(h,xv) + InfoNCE(xt,xv) + lambda * mean_i |h_i - sg(q_i)|^2.
// The consistency term backpropagates into h only.
Tensor align_loss(Tape& t, const Tensor& h, const Tensor& xt, const Tensor& xv,
                  const Tensor& q, Real lambda, Real tau);

struct ForwardResult {
  Tensor h;                      // [B, d] fused representations
  Tensor q;                      // gathered queries
  std::vector<Tensor> aligned;   // per channel, [B, d]
  GateTrace trace;
  // populated when capture_internals is set (used by invariant tests)
  std::vector<Tensor> layer_h;
  std::vector<Tensor> layer_candidate;
  std::vector<Tensor> layer_gate;
};

// raw_feats: one [n_items, dim] constant tensor per channel (t, v[, s]).
ForwardResult dynamic_forward(Tape& t, const FusionState& st,
                              const std::vector<int>& item_idx,
                              const std::vector<Tensor>& raw_feats,
                              bool capture_internals = false);

std::vector<Tensor> feature_tensors(const data::ItemFeatures& feats);

struct TrainResult {
  std::vector<std::vector<Real>> h_table;  // per catalog item
  GateTrace trace;                         // from the final full-catalog pass
  std::vector<Real> epoch_losses;
  bool diverged = false;
};

TrainResult train_injection(FusionState& st, const data::ItemFeatures& feats,
                            uint64_t seed);

}  // namespace qrec::fusion
