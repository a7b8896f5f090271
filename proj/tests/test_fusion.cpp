#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "qrec/fusion.hpp"

using namespace qrec;
using namespace qrec::fusion;
using qrec::testing::fd_check;

namespace {

FusionConfig small_cfg() {
  FusionConfig cfg;
  cfg.embed_dim = 8;
  cfg.max_depth = 3;
  cfg.n_heads = 2;
  cfg.epochs = 0;
  cfg.batch_size = 8;
  return cfg;
}

std::vector<Tensor> random_feats(int n_items, int td, int vd, uint64_t seed) {
  Rng rng(seed);
  return {Tensor::randn(n_items, td, 1.0, rng), Tensor::randn(n_items, vd, 1.0, rng)};
}

data::ItemFeatures make_item_features(int n, int td, int vd, uint64_t seed) {
  Rng rng(seed);
  data::ItemFeatures f;
  f.text_dim = td;
  f.vision_dim = vd;
  for (int i = 0; i < n; ++i) {
    f.item_ids.push_back("i" + std::to_string(100 + i));
    std::vector<Real> tr, vr;
    Real tn = 0, vn = 0;
    for (int j = 0; j < td; ++j) { tr.push_back(rng.normal()); tn += tr.back() * tr.back(); }
    for (int j = 0; j < vd; ++j) { vr.push_back(rng.normal()); vn += vr.back() * vr.back(); }
    for (auto& x : tr) x /= std::sqrt(tn);
    for (auto& x : vr) x /= std::sqrt(vn);
    f.text.push_back(tr);
    f.vision.push_back(vr);
  }
  return f;
}

}  // namespace

TEST_CASE("align_modality: single candidate passes through unchanged") {
  Tape t;
  Rng rng(1);
  Tensor q = Tensor::randn(3, 4, 1.0, rng);
  Tensor x = Tensor::randn(3, 4, 1.0, rng);
  Tensor out = align_modality(t, q, {x}, 0.07);
  CHECK(out.same_as(x));
}

TEST_CASE("align_modality: two-candidate weights match the closed form") {
  // q=(1,0), x1=(1,0), x2=(0,1), tau=0.5 -> scores (2, 0),
  // softmax = (e^2, 1)/(e^2+1) = (0.880797..., 0.119203...)
  Tape t;
  Tensor q = Tensor::from(1, 2, {1, 0});
  Tensor x1 = Tensor::from(1, 2, {1, 0});
  Tensor x2 = Tensor::from(1, 2, {0, 1});
  Tensor out = align_modality(t, q, {x1, x2}, 0.5);
  CHECK(out.v()[0] == doctest::Approx(0.8807970779778823).epsilon(1e-12));
  CHECK(out.v()[1] == doctest::Approx(0.11920292202211755).epsilon(1e-12));
}

TEST_CASE("align_modality: weights form a convex combination") {
  // identical candidates must reproduce themselves exactly for any q/tau
  Tape t;
  Rng rng(7);
  Tensor q = Tensor::randn(4, 6, 1.0, rng);
  Tensor x = Tensor::randn(4, 6, 1.0, rng);
  Tensor out = align_modality(t, q, {x, x, x}, 0.07);
  for (size_t i = 0; i < out.v().size(); ++i)
    CHECK(out.v()[i] == doctest::Approx(x.v()[i]).epsilon(1e-12));
}

TEST_CASE("align_modality gradients match finite differences") {
  Rng rng(11);
  Tensor q = Tensor::randn(3, 5, 1.0, rng, true);
  Tensor x1 = Tensor::randn(3, 5, 1.0, rng, true);
  Tensor x2 = Tensor::randn(3, 5, 1.0, rng, true);
  Tensor dir = Tensor::randn(3, 5, 1.0, rng);
  auto build = [&](Tape& t) {
    return t.sum(t.mul(align_modality(t, q, {x1, x2}, 0.3), dir));
  };
  auto rep = fd_check(build, {q, x1, x2});
  INFO(rep.worst);
  CHECK(rep.max_rel <= 1e-4);
}

TEST_CASE("info_nce: orthonormal pair at tau=1 gives ln(1+e^-1)") {
  Tape t;
  Tensor a = Tensor::from(2, 2, {1, 0, 0, 1});
  Tensor b = Tensor::from(2, 2, {1, 0, 0, 1});
  Tensor loss = info_nce(t, a, b, 1.0);
  CHECK(loss.item() == doctest::Approx(0.3132616875182228).epsilon(1e-12));
}

TEST_CASE("info_nce rejects singleton batches") {
  Tape t;
  Tensor a = Tensor::from(1, 3, {1, 0, 0});
  CHECK_THROWS_AS(info_nce(t, a, a, 0.07), ContractError);
}

TEST_CASE("info_nce is symmetric in its arguments") {
  Tape t;
  Rng rng(3);
  Tensor a = Tensor::randn(4, 6, 1.0, rng);
  Tensor b = Tensor::randn(4, 6, 1.0, rng);
  CHECK(info_nce(t, a, b, 0.2).item() ==
        doctest::Approx(info_nce(t, b, a, 0.2).item()).epsilon(1e-12));
}

TEST_CASE("align_loss gradients match finite differences") {
  Rng rng(17);
  Tensor h = Tensor::randn(4, 6, 1.0, rng, true);
  Tensor xt = Tensor::randn(4, 6, 1.0, rng, true);
  Tensor xv = Tensor::randn(4, 6, 1.0, rng, true);
  Tensor q = Tensor::randn(4, 6, 1.0, rng);  // constant anchor
  auto build = [&](Tape& t) { return align_loss(t, h, xt, xv, q, 0.3, 0.2); };
  auto rep = fd_check(build, {h, xt, xv});
  INFO(rep.worst);
  CHECK(rep.max_rel <= 1e-4);
}

TEST_CASE("align_loss: anchor receives no gradient through the consistency term") {
  Rng rng(19);
  Tensor h = Tensor::randn(4, 6, 1.0, rng, true);
  Tensor xt = Tensor::randn(4, 6, 1.0, rng);
  Tensor xv = Tensor::randn(4, 6, 1.0, rng);
  Tensor q = Tensor::randn(4, 6, 1.0, rng, true);
  Tape t;
  Tensor loss = align_loss(t, h, xt, xv, q, 5.0, 0.5);
  q.ensure_grad();
  q.zero_grad();
  h.ensure_grad();
  h.zero_grad();
  t.backward(loss);
  for (Real g : q.g()) CHECK(g == 0.0);
  Real hsum = 0;
  for (Real g : h.g()) hsum += std::abs(g);
  CHECK(hsum > 0.0);  // the loss does flow into h
}

TEST_CASE("feature_tensors packs channels row-major") {
  auto f = make_item_features(3, 4, 2, 23);
  auto ts = feature_tensors(f);
  REQUIRE(ts.size() == 2);
  CHECK(ts[0].rows() == 3);
  CHECK(ts[0].cols() == 4);
  CHECK(ts[1].cols() == 2);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(ts[0].v()[size_t(i) * 4 + j] == f.text[size_t(i)][size_t(j)]);
}

TEST_CASE("gate activations start near one half") {
  auto cfg = small_cfg();
  Rng rng(31);
  FusionState st = FusionState::init(cfg, 10, 5, 6, 0, rng);
  auto raw = random_feats(10, 5, 6, 32);
  Tape t(false);
  auto fwd = dynamic_forward(t, st, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, raw, true);
  REQUIRE(!fwd.layer_gate.empty());
  for (Real g : fwd.layer_gate[0].v()) {
    CHECK(g > 0.3);
    CHECK(g < 0.7);
  }
}

TEST_CASE("gated residual keeps each update between input and candidate") {
  auto cfg = small_cfg();
  cfg.fixed_depth = true;
  Rng rng(37);
  FusionState st = FusionState::init(cfg, 6, 5, 6, 0, rng);
  auto raw = random_feats(6, 5, 6, 38);
  Tape t(false);
  auto fwd = dynamic_forward(t, st, {0, 1, 2, 3, 4, 5}, raw, true);
  REQUIRE(int(fwd.layer_h.size()) == cfg.max_depth);
  for (int l = 0; l < cfg.max_depth; ++l) {
    const auto& prev = l == 0 ? fwd.q.v() : fwd.layer_h[size_t(l) - 1].v();
    const auto& next = fwd.layer_h[size_t(l)].v();
    const auto& cand = fwd.layer_candidate[size_t(l)].v();
    for (size_t i = 0; i < next.size(); ++i) {
      CHECK(next[i] >= std::min(prev[i], cand[i]) - 1e-12);
      CHECK(next[i] <= std::max(prev[i], cand[i]) + 1e-12);
    }
  }
}

TEST_CASE("halting depth is monotone in the threshold") {
  auto cfg = small_cfg();
  Rng rng(41);
  FusionState st = FusionState::init(cfg, 8, 5, 6, 0, rng);
  auto raw = random_feats(8, 5, 6, 42);
  std::vector<int> idx = {0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<Real> thresholds = {0.0, 0.45, 0.55, 0.9};
  std::vector<std::vector<int>> depths;
  for (Real th : thresholds) {
    FusionState s2 = st;
    s2.cfg.halt_threshold = th;
    Tape t(false);
    depths.push_back(dynamic_forward(t, s2, idx, raw).trace.depth_used);
  }
  // threshold 0 can never trigger (gates are strictly positive)
  for (int d : depths[0]) CHECK(d == cfg.max_depth);
  for (size_t k = 1; k < depths.size(); ++k)
    for (size_t i = 0; i < idx.size(); ++i) CHECK(depths[k][i] <= depths[k - 1][i]);
}

TEST_CASE("threshold one halts everything after the first layer") {
  auto cfg = small_cfg();
  cfg.halt_threshold = 1.0;  // sigmoid output is strictly below 1
  Rng rng(43);
  FusionState st = FusionState::init(cfg, 5, 5, 6, 0, rng);
  auto raw = random_feats(5, 5, 6, 44);
  Tape t(false);
  auto fwd = dynamic_forward(t, st, {0, 1, 2, 3, 4}, raw);
  for (int d : fwd.trace.depth_used) CHECK(d == 1);
  auto hist = fwd.trace.depth_histogram();
  CHECK(hist.at(1) == 5);
  CHECK(fwd.trace.distinct_depths() == 1);
}

TEST_CASE("fixed depth matches dynamic mode when halting never fires") {
  auto cfg = small_cfg();
  Rng rng(47);
  FusionState st = FusionState::init(cfg, 6, 5, 6, 0, rng);
  auto raw = random_feats(6, 5, 6, 48);
  std::vector<int> idx = {0, 1, 2, 3, 4, 5};

  FusionState sa = st;
  sa.cfg.fixed_depth = true;
  Tape ta(false);
  auto fa = dynamic_forward(ta, sa, idx, raw);

  FusionState sb = st;
  sb.cfg.fixed_depth = false;
  sb.cfg.halt_threshold = 0.0;
  Tape tb(false);
  auto fb = dynamic_forward(tb, sb, idx, raw);

  REQUIRE(fa.h.v().size() == fb.h.v().size());
  for (size_t i = 0; i < fa.h.v().size(); ++i) CHECK(fa.h.v()[i] == fb.h.v()[i]);
  for (size_t i = 0; i < idx.size(); ++i) {
    CHECK(fa.trace.depth_used[i] == cfg.max_depth);
    CHECK(fb.trace.depth_used[i] == cfg.max_depth);
  }
}

TEST_CASE("trace bookkeeping: one gate mean per executed layer") {
  auto cfg = small_cfg();
  cfg.halt_threshold = 0.5;
  Rng rng(53);
  FusionState st = FusionState::init(cfg, 12, 5, 6, 0, rng);
  auto raw = random_feats(12, 5, 6, 54);
  std::vector<int> idx;
  for (int i = 0; i < 12; ++i) idx.push_back(i);
  Tape t(false);
  auto fwd = dynamic_forward(t, st, idx, raw);
  int total = 0;
  for (const auto& [d, n] : fwd.trace.depth_histogram()) {
    CHECK(d >= 1);
    CHECK(d <= cfg.max_depth);
    total += n;
  }
  CHECK(total == 12);
  for (size_t i = 0; i < idx.size(); ++i)
    CHECK(int(fwd.trace.gate_means[i].size()) == fwd.trace.depth_used[i]);
}

TEST_CASE("full forward gradients match finite differences at fixed depth") {
  FusionConfig cfg = small_cfg();
  cfg.max_depth = 2;
  cfg.fixed_depth = true;  // value-independent control flow keeps FD well-posed
  Rng rng(59);
  FusionState st = FusionState::init(cfg, 4, 5, 6, 0, rng);
  auto raw = random_feats(4, 5, 6, 60);
  std::vector<int> idx = {0, 1, 3};
  // freeze the stop-gradient anchor at the base point so the finite
  // differences measure exactly what the backward pass claims (the anchor is
  // treated as a constant by the graph)
  Tensor q_frozen;
  {
    Tape t0(false);
    auto f0 = dynamic_forward(t0, st, idx, raw);
    q_frozen = Tensor::from(f0.q.rows(), f0.q.cols(), f0.q.v());
  }
  auto build = [&](Tape& t) {
    auto fwd = dynamic_forward(t, st, idx, raw);
    return align_loss(t, fwd.h, fwd.aligned[0], fwd.aligned[1], q_frozen, 0.3, 0.2);
  };
  std::vector<Tensor> subset = {st.queries,        st.w_t,
                                st.b_v,            st.layers[0].wq,
                                st.layers[0].wg1,  st.layers[0].ln2_b,
                                st.layers[1].w2,   st.layers[1].bg2};
  auto rep = fd_check(build, subset);
  INFO(rep.worst);
  CHECK(rep.max_rel <= 2e-4);
}

TEST_CASE("training reduces the alignment loss on a small catalog") {
  FusionConfig cfg;
  cfg.embed_dim = 16;
  cfg.max_depth = 2;
  cfg.n_heads = 2;
  cfg.epochs = 8;
  cfg.batch_size = 16;
  auto f = make_item_features(32, 6, 6, 61);
  Rng rng(62);
  FusionState st = FusionState::init(cfg, 32, 6, 6, 0, rng);
  auto res = train_injection(st, f, 63);
  REQUIRE(!res.diverged);
  REQUIRE(int(res.epoch_losses.size()) == cfg.epochs);
  CHECK(res.epoch_losses.back() < res.epoch_losses.front());
  CHECK(int(res.h_table.size()) == 32);
  CHECK(int(res.h_table[0].size()) == cfg.embed_dim);
}

TEST_CASE("training and the final table are deterministic") {
  auto run = [] {
    FusionConfig cfg;
    cfg.embed_dim = 8;
    cfg.max_depth = 2;
    cfg.n_heads = 2;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    auto f = make_item_features(12, 5, 4, 71);
    Rng rng(72);
    FusionState st = FusionState::init(cfg, 12, 5, 4, 0, rng);
    return train_injection(st, f, 73);
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.epoch_losses.size() == b.epoch_losses.size());
  for (size_t i = 0; i < a.epoch_losses.size(); ++i)
    CHECK(a.epoch_losses[i] == b.epoch_losses[i]);
  for (size_t i = 0; i < a.h_table.size(); ++i)
    for (size_t j = 0; j < a.h_table[i].size(); ++j)
      CHECK(a.h_table[i][j] == b.h_table[i][j]);
  CHECK(a.trace.depth_used == b.trace.depth_used);
}

TEST_CASE("zero-epoch training still produces a usable table") {
  FusionConfig cfg = small_cfg();
  auto f = make_item_features(9, 5, 4, 81);
  Rng rng(82);
  FusionState st = FusionState::init(cfg, 9, 5, 4, 0, rng);
  auto res = train_injection(st, f, 83);
  CHECK(res.epoch_losses.empty());
  CHECK(!res.diverged);
  REQUIRE(int(res.h_table.size()) == 9);
  for (const auto& row : res.h_table) {
    REQUIRE(int(row.size()) == cfg.embed_dim);
    for (Real x : row) CHECK(std::isfinite(x));
  }
  CHECK(int(res.trace.depth_used.size()) == 9);
}

TEST_CASE("snapshot and restore round-trip every parameter") {
  auto cfg = small_cfg();
  Rng rng(91);
  FusionState st = FusionState::init(cfg, 4, 5, 6, 0, rng);
  auto snap = st.snapshot();
  for (auto p : st.params())
    for (auto& x : p.v()) x += 1.0;
  st.restore(snap);
  auto snap2 = st.snapshot();
  REQUIRE(snap.size() == snap2.size());
  for (size_t i = 0; i < snap.size(); ++i) CHECK(snap[i] == snap2[i]);
}

TEST_CASE("catalog size mismatch is rejected") {
  auto cfg = small_cfg();
  auto f = make_item_features(5, 5, 4, 95);
  Rng rng(96);
  FusionState st = FusionState::init(cfg, 7, 5, 4, 0, rng);
  CHECK_THROWS_AS(train_injection(st, f, 97), ContractError);
}
