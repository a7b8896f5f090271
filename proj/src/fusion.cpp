#include "qrec/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qrec::fusion {

namespace {

Tensor named(Tensor t, const std::string& name) {
  t.set_name(name);
  return t;
}

Tensor linear_init(int in, int out, Rng& rng, const std::string& name) {
  const Real sigma = Real(1) / std::sqrt(Real(in));
  return named(Tensor::randn(in, out, sigma, rng, true), name);
}

Tensor zeros_param(int rows, int cols, const std::string& name) {
  return named(Tensor::zeros(rows, cols, true), name);
}

}  // namespace

FusionState FusionState::init(const FusionConfig& cfg, int n_items, int text_dim,
                              int vision_dim, int struct_dim, Rng& rng) {
  QREC_CHECK(cfg.embed_dim > 0 && cfg.embed_dim % cfg.n_heads == 0,
             "embed_dim must be a positive multiple of n_heads");
  QREC_CHECK(cfg.max_depth >= 1, "max_depth must be >= 1");
  FusionState st;
  st.cfg = cfg;
  st.n_items = n_items;
  const int d = cfg.embed_dim;
  st.queries = named(Tensor::randn(n_items, d, 0.1, rng, true), "fusion.queries");
  st.w_t = linear_init(text_dim, d, rng, "fusion.proj_t.w");
  st.b_t = zeros_param(1, d, "fusion.proj_t.b");
  st.w_v = linear_init(vision_dim, d, rng, "fusion.proj_v.w");
  st.b_v = zeros_param(1, d, "fusion.proj_v.b");
  st.has_struct = struct_dim > 0;
  if (st.has_struct) {
    st.w_s = linear_init(struct_dim, d, rng, "fusion.proj_s.w");
    st.b_s = zeros_param(1, d, "fusion.proj_s.b");
  }
  const int gate_hidden = std::max(4, d / 2);
  for (int l = 0; l < cfg.max_depth; ++l) {
    const std::string p = "fusion.layer" + std::to_string(l) + ".";
    FusionLayer lay;
    lay.wq = linear_init(d, d, rng, p + "wq");
    lay.bq = zeros_param(1, d, p + "bq");
    lay.wk = linear_init(d, d, rng, p + "wk");
    lay.bk = zeros_param(1, d, p + "bk");
    lay.wv = linear_init(d, d, rng, p + "wv");
    lay.bv = zeros_param(1, d, p + "bv");
    lay.wo = linear_init(d, d, rng, p + "wo");
    lay.bo = zeros_param(1, d, p + "bo");
    lay.ln1_g = named(Tensor::full(1, d, 1.0, true), p + "ln1.g");
    lay.ln1_b = zeros_param(1, d, p + "ln1.b");
    lay.ln2_g = named(Tensor::full(1, d, 1.0, true), p + "ln2.g");
    lay.ln2_b = zeros_param(1, d, p + "ln2.b");
    lay.w1 = linear_init(d, 4 * d, rng, p + "ffn.w1");
    lay.b1 = zeros_param(1, 4 * d, p + "ffn.b1");
    lay.w2 = linear_init(4 * d, d, rng, p + "ffn.w2");
    lay.b2 = zeros_param(1, d, p + "ffn.b2");
    // small gate head biased to pre-activation ~0 so gates start near 0.5
    lay.wg1 = linear_init(d, gate_hidden, rng, p + "gate.w1");
    lay.bg1 = zeros_param(1, gate_hidden, p + "gate.b1");
    lay.wg2 = named(Tensor::randn(gate_hidden, d, 0.1, rng, true), p + "gate.w2");
    lay.bg2 = zeros_param(1, d, p + "gate.b2");
    st.layers.push_back(std::move(lay));
  }
  return st;
}

std::vector<Tensor> FusionState::params() const {
  std::vector<Tensor> ps = {queries, w_t, b_t, w_v, b_v};
  if (has_struct) {
    ps.push_back(w_s);
    ps.push_back(b_s);
  }
  for (const auto& l : layers)
    for (const auto& t : {l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                          l.ln1_g, l.ln1_b, l.ln2_g, l.ln2_b, l.w1, l.b1, l.w2,
                          l.b2, l.wg1, l.bg1, l.wg2, l.bg2})
      ps.push_back(t);
  return ps;
}

std::vector<std::vector<Real>> FusionState::snapshot() const {
  std::vector<std::vector<Real>> snap;
  for (const auto& p : params()) snap.push_back(p.v());
  return snap;
}

void FusionState::restore(const std::vector<std::vector<Real>>& snap) {
  auto ps = params();
  QREC_CHECK(snap.size() == ps.size(), "snapshot size mismatch");
  for (size_t i = 0; i < ps.size(); ++i) ps[i].v() = snap[i];
}

std::map<int, int> GateTrace::depth_histogram() const {
  std::map<int, int> h;
  for (int d : depth_used) ++h[d];
  return h;
}

int GateTrace::distinct_depths() const { return int(depth_histogram().size()); }

Tensor align_modality(Tape& t, const Tensor& q, const std::vector<Tensor>& candidates,
                      Real tau) {
  QREC_CHECK(!candidates.empty(), "align_modality needs at least one candidate");
  QREC_CHECK(tau > 0, "temperature must be positive");
  if (candidates.size() == 1) return candidates[0];
  std::vector<Tensor> scores;
  scores.reserve(candidates.size());
  for (const auto& x : candidates)
    scores.push_back(t.scale(t.sum_rows(t.mul(q, x)), Real(1) / tau));
  Tensor w = t.softmax_rows(t.concat_cols(scores));  // [B, J]
  Tensor out;
  for (size_t j = 0; j < candidates.size(); ++j) {
    Tensor term = t.mul(candidates[j], t.slice_cols(w, int(j), 1));
    out = j == 0 ? term : t.add(out, term);
  }
  return out;
}

Tensor info_nce(Tape& t, const Tensor& a, const Tensor& b, Real tau) {
  QREC_CHECK(a.rows() == b.rows() && a.cols() == b.cols(),
             "info_nce shape mismatch");
  QREC_CHECK(a.rows() >= 2, "info_nce needs a batch of >= 2, got ", a.rows());
  QREC_CHECK(tau > 0, "temperature must be positive");
  std::vector<int> diag(static_cast<size_t>(a.rows()));
  std::iota(diag.begin(), diag.end(), 0);
  Tensor l_ab = t.cross_entropy_rows(t.scale(t.matmul_nt(a, b), Real(1) / tau), diag);
  Tensor l_ba = t.cross_entropy_rows(t.scale(t.matmul_nt(b, a), Real(1) / tau), diag);
  return t.scale(t.add(l_ab, l_ba), 0.5);
}

Tensor align_loss(Tape& t, const Tensor& h, const Tensor& xt, const Tensor& xv,
                  const Tensor& q, Real lambda, Real tau) {
  Tensor hn = t.l2_normalize_rows(h);
  Tensor xtn = t.l2_normalize_rows(xt);
  Tensor xvn = t.l2_normalize_rows(xv);
  Tensor loss = t.add(t.add(info_nce(t, hn, xtn, tau), info_nce(t, hn, xvn, tau)),
                      info_nce(t, xtn, xvn, tau));
  Tensor d = t.sub(h, t.stop_gradient(q));
  Tensor consistency = t.mean(t.sum_rows(t.mul(d, d)));
  return t.add(loss, t.scale(consistency, lambda));
}

std::vector<Tensor> feature_tensors(const data::ItemFeatures& feats) {
  auto pack = [](const std::vector<std::vector<Real>>& rows, int dim) {
    std::vector<Real> flat;
    flat.reserve(rows.size() * size_t(dim));
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    return Tensor::from(int(rows.size()), dim, std::move(flat));
  };
  std::vector<Tensor> out = {pack(feats.text, feats.text_dim),
                             pack(feats.vision, feats.vision_dim)};
  if (feats.has_struct()) out.push_back(pack(feats.structural, feats.struct_dim));
  return out;
}

ForwardResult dynamic_forward(Tape& t, const FusionState& st,
                              const std::vector<int>& item_idx,
                              const std::vector<Tensor>& raw_feats,
                              bool capture_internals) {
  const int B = int(item_idx.size());
  QREC_CHECK(B > 0, "empty item batch");
  const size_t n_channels = st.has_struct ? 3 : 2;
  QREC_CHECK(raw_feats.size() == n_channels, "expected ", n_channels,
             " feature channels, got ", raw_feats.size());
  const FusionConfig& cfg = st.cfg;

  ForwardResult res;
  res.q = t.take_rows(st.queries, item_idx);

  // project each modality into the shared space, renormalize, then apply the
  // soft candidate selection (a single vector per item passes through)
  const Tensor* proj_w[3] = {&st.w_t, &st.w_v, &st.w_s};
  const Tensor* proj_b[3] = {&st.b_t, &st.b_v, &st.b_s};
  for (size_t c = 0; c < n_channels; ++c) {
    Tensor raw = t.take_rows(raw_feats[c], item_idx);
    Tensor proj = t.l2_normalize_rows(t.add(t.matmul(raw, *proj_w[c]), *proj_b[c]));
    res.aligned.push_back(align_modality(t, res.q, {proj}, cfg.tau));
  }

  Tensor kv = t.interleave_rows(res.aligned);  // [B*M, d]
  const int M = int(n_channels);

  Tensor h = res.q;
  std::vector<char> active(size_t(B), 1);
  res.trace.depth_used.assign(size_t(B), cfg.max_depth);
  res.trace.gate_means.assign(size_t(B), {});
  int n_active = B;

  for (int l = 0; l < cfg.max_depth && n_active > 0; ++l) {
    const FusionLayer& lay = st.layers[size_t(l)];
    Tensor qh = t.add(t.matmul(h, lay.wq), lay.bq);
    Tensor K = t.add(t.matmul(kv, lay.wk), lay.bk);
    Tensor V = t.add(t.matmul(kv, lay.wv), lay.bv);
    Tensor ctx = t.attention(qh, K, V, B, 1, M, cfg.n_heads);
    Tensor attn_out = t.add(t.matmul(ctx, lay.wo), lay.bo);
    Tensor h1 = t.add(t.mul(t.layer_norm_rows(t.add(h, attn_out)), lay.ln1_g),
                      lay.ln1_b);
    Tensor ffn = t.add(
        t.matmul(t.relu(t.add(t.matmul(h1, lay.w1), lay.b1)), lay.w2), lay.b2);
    Tensor cand = t.add(t.mul(t.layer_norm_rows(t.add(h1, ffn)), lay.ln2_g),
                        lay.ln2_b);
    Tensor gate = t.sigmoid(t.add(
        t.matmul(t.relu(t.add(t.matmul(cand, lay.wg1), lay.bg1)), lay.wg2),
        lay.bg2));

    // per-item mean gate drives the halting decision (values only, the
    // threshold compare is not differentiated)
    std::vector<Real> gmean(size_t(B), 0);
    const int d = cfg.embed_dim;
    for (int i = 0; i < B; ++i) {
      Real s = 0;
      for (int j = 0; j < d; ++j) s += gate.v()[size_t(i) * d + j];
      gmean[size_t(i)] = s / d;
    }

    Tensor delta = t.mul(gate, t.sub(cand, h));
    if (n_active < B) {
      // freeze items that already exited: mask the update by a 0/1 column
      std::vector<Real> mask(static_cast<size_t>(B));
      for (int i = 0; i < B; ++i) mask[size_t(i)] = active[size_t(i)] ? 1.0 : 0.0;
      delta = t.mul(delta, Tensor::from(B, 1, std::move(mask)));
    }
    Tensor h_next = t.add(h, delta);

    for (int i = 0; i < B; ++i) {
      if (!active[size_t(i)]) continue;
      res.trace.gate_means[size_t(i)].push_back(gmean[size_t(i)]);
      const bool halt = !cfg.fixed_depth && gmean[size_t(i)] < cfg.halt_threshold;
      if (halt || l + 1 == cfg.max_depth) {
        res.trace.depth_used[size_t(i)] = l + 1;
        active[size_t(i)] = 0;
        --n_active;
      }
    }
    if (capture_internals) {
      res.layer_h.push_back(h_next);
      res.layer_candidate.push_back(cand);
      res.layer_gate.push_back(gate);
    }
    h = h_next;
  }
  res.h = h;
  return res;
}

TrainResult train_injection(FusionState& st, const data::ItemFeatures& feats,
                            uint64_t seed) {
  const int n = int(feats.item_ids.size());
  QREC_CHECK(n == st.n_items, "feature catalog size ", n,
             " does not match fusion state (", st.n_items, ")");
  auto raw = feature_tensors(feats);
  const FusionConfig& cfg = st.cfg;

  TrainResult out;
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam opt(st.params(), acfg);
  Rng rng(mix64(seed ^ 0xF051ull));

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto last_good = st.snapshot();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    Real epoch_loss = 0;
    int64_t n_batches = 0;
    bool bad = false;
    for (int start = 0; start < n && !bad; start += cfg.batch_size) {
      int end = std::min(n, start + cfg.batch_size);
      // InfoNCE needs >= 2 rows; fold a trailing singleton into this batch
      if (n - end == 1) end = n;
      std::vector<int> idx(order.begin() + start, order.begin() + end);
      if (int(idx.size()) < 2) continue;  // degenerate catalog
      Tape tape;
      tape.train_mode = true;
      tape.rng_seed = seed;
      tape.step = opt.step_count();
      auto fwd = dynamic_forward(tape, st, idx, raw);
      QREC_CHECK(fwd.aligned.size() >= 2, "need text+vision channels");
      Tensor loss = align_loss(tape, fwd.h, fwd.aligned[0], fwd.aligned[1], fwd.q,
                               cfg.lambda, cfg.tau);
      if (!std::isfinite(loss.item())) {
        log_error("fusion loss diverged at epoch ", epoch, "; restoring last epoch");
        st.restore(last_good);
        out.diverged = true;
        bad = true;
        break;
      }
      opt.zero_grad();
      tape.backward(loss);
      try {
        opt.step();
      } catch (const TrainingError& e) {
        log_error("fusion training aborted: ", e.what(), "; restoring last epoch");
        st.restore(last_good);
        out.diverged = true;
        bad = true;
        break;
      }
      epoch_loss += loss.item();
      ++n_batches;
      if (end == n) break;
    }
    if (bad) break;
    out.epoch_losses.push_back(n_batches ? epoch_loss / Real(n_batches) : 0);
    last_good = st.snapshot();
    log_debug("fusion epoch ", epoch, " loss ",
              out.epoch_losses.empty() ? 0.0 : out.epoch_losses.back());
  }

  // final full-catalog pass (inference mode) producing the h table + trace
  out.h_table.assign(size_t(n), {});
  out.trace.depth_used.assign(size_t(n), 0);
  out.trace.gate_means.assign(size_t(n), {});
  const int chunk = std::max(2, cfg.batch_size);
  for (int start = 0; start < n; start += chunk) {
    const int end = std::min(n, start + chunk);
    std::vector<int> idx(static_cast<size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    Tape tape(/*grad_enabled=*/false);
    auto fwd = dynamic_forward(tape, st, idx, raw);
    const int d = cfg.embed_dim;
    for (int i = start; i < end; ++i) {
      const Real* row = fwd.h.v().data() + size_t(i - start) * d;
      out.h_table[size_t(i)].assign(row, row + d);
      out.trace.depth_used[size_t(i)] = fwd.trace.depth_used[size_t(i - start)];
      out.trace.gate_means[size_t(i)] = fwd.trace.gate_means[size_t(i - start)];
    }
  }
  return out;
}

}  // namespace qrec::fusion
