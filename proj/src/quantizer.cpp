#include "qrec/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "qrec/io.hpp"

namespace qrec::quant {

namespace {

Tensor named(Tensor t, const std::string& name) {
  t.set_name(name);
  return t;
}

Tensor linear_init(int in, int out, Rng& rng, const std::string& name) {
  return named(Tensor::randn(in, out, Real(1) / std::sqrt(Real(in)), rng, true),
               name);
}

Real sq_dist(const Real* a, const Real* b, int n) {
  Real s = 0;
  for (int i = 0; i < n; ++i) {
    const Real d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

int nearest_codeword(const Real* r, const Tensor& codewords, int dim) {
  int best = 0;
  Real best_d = sq_dist(r, codewords.v().data(), dim);
  const int m = codewords.rows();
  for (int c = 1; c < m; ++c) {
    const Real d = sq_dist(r, codewords.v().data() + size_t(c) * dim, dim);
    if (d < best_d) {  // strict: ties keep the lowest index
      best_d = d;
      best = c;
    }
  }
  return best;
}

}  // namespace

void QuantizerConfig::validate() const {
  QREC_CHECK(levels >= 1, "levels must be >= 1, got ", levels);
  QREC_CHECK(levels <= 26, "levels beyond 26 exhaust the level letters");
  QREC_CHECK(codebook_size >= 2, "codebook_size must be >= 2, got ", codebook_size);
  QREC_CHECK(code_dim >= 1, "code_dim must be >= 1, got ", code_dim);
  QREC_CHECK(beta > 0, "beta must be positive, got ", beta);
  QREC_CHECK(hidden_dim >= 1 && batch_size >= 1 && epochs >= 0 && lr > 0,
             "invalid training configuration");
}

RqVaeState RqVaeState::init(const QuantizerConfig& cfg, int in_dim, Rng& rng) {
  cfg.validate();
  QREC_CHECK(in_dim >= 1, "input dimension must be positive");
  RqVaeState st;
  st.cfg = cfg;
  st.in_dim = in_dim;
  st.enc_w1 = linear_init(in_dim, cfg.hidden_dim, rng, "rq.enc.w1");
  st.enc_b1 = named(Tensor::zeros(1, cfg.hidden_dim, true), "rq.enc.b1");
  st.enc_w2 = linear_init(cfg.hidden_dim, cfg.code_dim, rng, "rq.enc.w2");
  st.enc_b2 = named(Tensor::zeros(1, cfg.code_dim, true), "rq.enc.b2");
  st.dec_w1 = linear_init(cfg.code_dim, cfg.hidden_dim, rng, "rq.dec.w1");
  st.dec_b1 = named(Tensor::zeros(1, cfg.hidden_dim, true), "rq.dec.b1");
  st.dec_w2 = linear_init(cfg.hidden_dim, in_dim, rng, "rq.dec.w2");
  st.dec_b2 = named(Tensor::zeros(1, in_dim, true), "rq.dec.b2");
  for (int k = 0; k < cfg.levels; ++k) {
    Codebook cb;
    cb.level = k + 1;
    cb.letter = char('a' + k);
    cb.codewords = named(Tensor::randn(cfg.codebook_size, cfg.code_dim, 0.1,
                                       rng, true),
                         "rq.codebook." + std::string(1, cb.letter));
    cb.usage.assign(size_t(cfg.codebook_size), 0);
    st.codebooks.push_back(std::move(cb));
  }
  return st;
}

std::vector<Tensor> RqVaeState::params() const {
  std::vector<Tensor> ps = {enc_w1, enc_b1, enc_w2, enc_b2,
                            dec_w1, dec_b1, dec_w2, dec_b2};
  for (const auto& cb : codebooks) ps.push_back(cb.codewords);
  return ps;
}

Tensor RqVaeState::encode(Tape& t, const Tensor& x) const {
  return t.add(t.matmul(t.relu(t.add(t.matmul(x, enc_w1), enc_b1)), enc_w2),
               enc_b2);
}

Tensor RqVaeState::decode(Tape& t, const Tensor& z) const {
  return t.add(t.matmul(t.relu(t.add(t.matmul(z, dec_w1), dec_b1)), dec_w2),
               dec_b2);
}

QuantizeResult quantize(const std::vector<Real>& z,
                        const std::vector<Codebook>& codebooks) {
  QREC_CHECK(!codebooks.empty(), "no codebooks");
  const int dim = codebooks[0].codewords.cols();
  QREC_CHECK(int(z.size()) == dim, "input dim ", z.size(),
             " does not match codebook dim ", dim);
  QuantizeResult qr;
  qr.residuals.push_back(z);
  for (const auto& cb : codebooks) {
    const int idx = nearest_codeword(qr.residuals.back().data(), cb.codewords, dim);
    const Real* e = cb.codewords.v().data() + size_t(idx) * dim;
    qr.indices.push_back(idx);
    qr.codewords.emplace_back(e, e + dim);
    std::vector<Real> next(static_cast<size_t>(dim));
    for (int i = 0; i < dim; ++i) next[size_t(i)] = qr.residuals.back()[size_t(i)] - e[i];
    qr.residuals.push_back(std::move(next));
  }
  return qr;
}

Real recon_loss(const std::vector<Real>& h, const std::vector<Real>& h_hat) {
  QREC_CHECK(h.size() == h_hat.size(), "reconstruction dim mismatch");
  Real s = 0;
  for (size_t i = 0; i < h.size(); ++i) {
    const Real d = h[i] - h_hat[i];
    s += d * d;
  }
  return s;
}

Real rq_loss(const QuantizeResult& qr, Real beta) {
  Real s = 0;
  for (size_t k = 0; k < qr.codewords.size(); ++k)
    s += recon_loss(qr.residuals[k], qr.codewords[k]);
  return (1 + beta) * s;
}

Tensor rqvae_loss(Tape& t, const RqVaeState& st, const Tensor& x,
                  std::vector<std::vector<int>>* indices_out,
                  Tensor* recon_out) {
  QREC_CHECK(st.codebooks_ready, "codebooks are not initialized");
  const int B = x.rows();
  const int dim = st.cfg.code_dim;
  Tensor z = st.encode(t, x);

  // value-level pass picks the indices; the graph then re-materializes the
  // chosen codewords so gradients reach them through their own loss term
  std::vector<std::vector<int>> level_idx(size_t(st.cfg.levels),
                                          std::vector<int>(size_t(B)));
  {
    std::vector<Real> r(z.v());
    for (int k = 0; k < st.cfg.levels; ++k) {
      const auto& cw = st.codebooks[size_t(k)].codewords;
      for (int b = 0; b < B; ++b) {
        Real* rb = r.data() + size_t(b) * dim;
        const int idx = nearest_codeword(rb, cw, dim);
        level_idx[size_t(k)][size_t(b)] = idx;
        const Real* e = cw.v().data() + size_t(idx) * dim;
        for (int i = 0; i < dim; ++i) rb[i] -= e[i];
      }
    }
  }

  Tensor loss;
  Tensor r_graph = z;
  std::vector<Real> zq_vals(size_t(B) * dim, 0);
  for (int k = 0; k < st.cfg.levels; ++k) {
    Tensor e = t.take_rows(st.codebooks[size_t(k)].codewords, level_idx[size_t(k)]);
    for (size_t i = 0; i < zq_vals.size(); ++i) zq_vals[i] += e.v()[i];
    Tensor d_code = t.sub(t.stop_gradient(r_graph), e);   // trains the codebook
    Tensor d_commit = t.sub(r_graph, t.stop_gradient(e)); // trains the encoder
    Tensor term = t.add(t.mean(t.sum_rows(t.mul(d_code, d_code))),
                        t.scale(t.mean(t.sum_rows(t.mul(d_commit, d_commit))),
                                st.cfg.beta));
    loss = k == 0 ? term : t.add(loss, term);
    r_graph = t.sub(r_graph, t.stop_gradient(e));
  }

  // straight-through: the decoder sees the quantized values but its gradient
  // flows into z unchanged
  Tensor zq = Tensor::from(B, dim, std::move(zq_vals));
  Tensor z_st = t.add(z, t.stop_gradient(t.sub(zq, z)));
  Tensor h_hat = st.decode(t, z_st);
  Tensor diff = t.sub(x, h_hat);
  Tensor recon = t.mean(t.sum_rows(t.mul(diff, diff)));
  if (recon_out) *recon_out = recon;
  if (indices_out) {
    indices_out->assign(size_t(B), std::vector<int>(size_t(st.cfg.levels)));
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < st.cfg.levels; ++k)
        (*indices_out)[size_t(b)][size_t(k)] = level_idx[size_t(k)][size_t(b)];
  }
  return t.add(recon, loss);
}

namespace {

// k-means++ seeding; when there are fewer distinct points than centers the
// remainder are jittered copies of random points
std::vector<std::vector<Real>> kmeanspp(const std::vector<std::vector<Real>>& pts,
                                        int m, Rng& rng) {
  const int n = int(pts.size());
  const int dim = int(pts[0].size());
  std::vector<std::vector<Real>> centers;
  std::vector<Real> best_d(size_t(n), std::numeric_limits<Real>::infinity());
  centers.push_back(pts[size_t(rng.uniform_int(n))]);
  auto update = [&](const std::vector<Real>& c) {
    for (int i = 0; i < n; ++i)
      best_d[size_t(i)] = std::min(best_d[size_t(i)],
                                   sq_dist(pts[size_t(i)].data(), c.data(), dim));
  };
  update(centers.back());
  while (int(centers.size()) < m) {
    const Real total = std::accumulate(best_d.begin(), best_d.end(), Real(0));
    if (total <= 1e-12) {
      // every point is already a center: jitter a random point
      auto c = pts[size_t(rng.uniform_int(n))];
      for (auto& x : c) x += 1e-3 * rng.normal();
      centers.push_back(std::move(c));
      continue;
    }
    Real u = rng.uniform() * total;
    int pick = n - 1;
    for (int i = 0; i < n; ++i) {
      u -= best_d[size_t(i)];
      if (u <= 0) {
        pick = i;
        break;
      }
    }
    centers.push_back(pts[size_t(pick)]);
    update(centers.back());
  }
  return centers;
}

}  // namespace

void init_codebooks(RqVaeState& st, const std::vector<std::vector<Real>>& inputs,
                    uint64_t seed) {
  QREC_CHECK(!inputs.empty(), "cannot initialize codebooks from an empty catalog");
  const int dim = st.cfg.code_dim;
  Rng rng(mix64(seed ^ 0xC0DEull));

  // encoder outputs for the whole catalog (values only)
  std::vector<std::vector<Real>> pts;
  pts.reserve(inputs.size());
  {
    std::vector<Real> flat;
    flat.reserve(inputs.size() * size_t(st.in_dim));
    for (const auto& row : inputs) {
      QREC_CHECK(int(row.size()) == st.in_dim, "input dim mismatch");
      flat.insert(flat.end(), row.begin(), row.end());
    }
    Tape t(false);
    Tensor z = st.encode(t, Tensor::from(int(inputs.size()), st.in_dim,
                                         std::move(flat)));
    for (size_t i = 0; i < inputs.size(); ++i) {
      const Real* p = z.v().data() + i * size_t(dim);
      pts.emplace_back(p, p + dim);
    }
  }

  for (auto& cb : st.codebooks) {
    auto centers = kmeanspp(pts, st.cfg.codebook_size, rng);
    for (int c = 0; c < st.cfg.codebook_size; ++c)
      std::copy(centers[size_t(c)].begin(), centers[size_t(c)].end(),
                cb.codewords.v().begin() + size_t(c) * dim);
    std::fill(cb.usage.begin(), cb.usage.end(), 0);
    // residuals after this level feed the next level's seeding
    for (auto& p : pts) {
      const int idx = nearest_codeword(p.data(), cb.codewords, dim);
      const Real* e = cb.codewords.v().data() + size_t(idx) * dim;
      for (int i = 0; i < dim; ++i) p[size_t(i)] -= e[i];
    }
  }
  st.codebooks_ready = true;
}

QuantTrainReport train_rqvae(RqVaeState& st,
                             const std::vector<std::vector<Real>>& inputs,
                             uint64_t seed) {
  const int n = int(inputs.size());
  QREC_CHECK(n >= 1, "empty training set");
  if (!st.codebooks_ready) init_codebooks(st, inputs, seed);

  QuantTrainReport rep;
  AdamConfig acfg;
  acfg.lr = st.cfg.lr;
  Adam opt(st.params(), acfg);
  Rng rng(mix64(seed ^ 0x9A57ull));
  const int dim = st.cfg.code_dim;

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  auto gather = [&](const std::vector<int>& idx) {
    std::vector<Real> flat;
    flat.reserve(idx.size() * size_t(st.in_dim));
    for (int i : idx)
      flat.insert(flat.end(), inputs[size_t(i)].begin(), inputs[size_t(i)].end());
    return Tensor::from(int(idx.size()), st.in_dim, std::move(flat));
  };

  for (int epoch = 0; epoch < st.cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (auto& cb : st.codebooks) std::fill(cb.usage.begin(), cb.usage.end(), 0);
    Real epoch_loss = 0;
    int n_batches = 0;
    for (int start = 0; start < n; start += st.cfg.batch_size) {
      const int end = std::min(n, start + st.cfg.batch_size);
      std::vector<int> idx(order.begin() + start, order.begin() + end);
      Tape t;
      std::vector<std::vector<int>> chosen;
      Tensor loss = rqvae_loss(t, st, gather(idx), &chosen);
      if (!std::isfinite(loss.item()))
        throw TrainingError(detail::msg("quantizer loss is not finite at epoch ",
                                        epoch, ", batch ", n_batches));
      for (const auto& per_item : chosen)
        for (int k = 0; k < st.cfg.levels; ++k)
          ++st.codebooks[size_t(k)].usage[size_t(per_item[size_t(k)])];
      opt.zero_grad();
      t.backward(loss);
      opt.step();
      epoch_loss += loss.item();
      ++n_batches;
    }
    rep.epoch_losses.push_back(epoch_loss / std::max(1, n_batches));

    // restart codewords that went unused for the whole epoch
    for (auto& cb : st.codebooks) {
      for (int c = 0; c < st.cfg.codebook_size; ++c) {
        if (cb.usage[size_t(c)] != 0) continue;
        // reseed near the residual of a random item at this level
        const auto& h = inputs[size_t(rng.uniform_int(n))];
        Tape t(false);
        Tensor z = st.encode(t, Tensor::from(1, st.in_dim, h));
        std::vector<Real> r(z.v());
        for (int k = 0; k + 1 < cb.level; ++k) {
          const auto& prev = st.codebooks[size_t(k)].codewords;
          const int pi = nearest_codeword(r.data(), prev, dim);
          for (int i = 0; i < dim; ++i)
            r[size_t(i)] -= prev.v()[size_t(pi) * dim + i];
        }
        for (int i = 0; i < dim; ++i)
          cb.codewords.v()[size_t(c) * dim + i] = r[size_t(i)] + 1e-3 * rng.normal();
        ++rep.reseeded;
      }
    }
  }

  // final reconstruction quality over the full catalog
  {
    std::vector<int> all(static_cast<size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    Tape t(false);
    Tensor recon;
    rqvae_loss(t, st, gather(all), nullptr, &recon);
    rep.final_recon = recon.item();
  }
  return rep;
}

CatalogCodes quantize_catalog(const RqVaeState& st,
                              const std::vector<std::vector<Real>>& inputs,
                              const std::vector<std::string>& item_ids) {
  QREC_CHECK(inputs.size() == item_ids.size(), "catalog id/input size mismatch");
  QREC_CHECK(st.codebooks_ready, "codebooks are not initialized");
  CatalogCodes out;
  std::vector<Real> flat;
  flat.reserve(inputs.size() * size_t(st.in_dim));
  for (const auto& row : inputs) flat.insert(flat.end(), row.begin(), row.end());
  Tape t(false);
  Tensor z = st.encode(t, Tensor::from(int(inputs.size()), st.in_dim,
                                       std::move(flat)));
  const int dim = st.cfg.code_dim;
  for (size_t i = 0; i < inputs.size(); ++i) {
    const Real* p = z.v().data() + i * size_t(dim);
    auto qr = quantize(std::vector<Real>(p, p + dim), st.codebooks);
    out.ids.push_back({item_ids[i], qr.indices});
    out.stages.push_back(std::move(qr.residuals));
  }
  return out;
}

std::vector<std::vector<int>> detect_collisions(const std::vector<SemanticId>& ids) {
  std::map<std::vector<int>, std::vector<int>> by_tuple;
  for (size_t i = 0; i < ids.size(); ++i)
    by_tuple[ids[i].indices].push_back(int(i));
  std::vector<std::vector<int>> groups;
  for (auto& [tuple, members] : by_tuple) {
    if (members.size() < 2) continue;
    std::sort(members.begin(), members.end(), [&](int a, int b) {
      return ids[size_t(a)].item_id < ids[size_t(b)].item_id;
    });
    groups.push_back(std::move(members));
  }
  return groups;
}

namespace {

// codeword indices of one level sorted by distance to r (ties -> lower index)
std::vector<int> sorted_candidates(const std::vector<Real>& r, const Codebook& cb) {
  const int m = cb.codewords.rows();
  const int dim = cb.codewords.cols();
  std::vector<Real> d(static_cast<size_t>(m));
  for (int c = 0; c < m; ++c)
    d[size_t(c)] = sq_dist(r.data(), cb.codewords.v().data() + size_t(c) * dim, dim);
  std::vector<int> idx(static_cast<size_t>(m));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return d[size_t(a)] < d[size_t(b)]; });
  return idx;
}

}  // namespace

int reallocate(CatalogCodes& codes, const std::vector<Codebook>& codebooks,
               ReallocScope scope) {
  const int K = int(codebooks.size());
  const int M = codebooks[0].codewords.rows();
  {
    // uniqueness is impossible when the catalog exceeds the code capacity
    long double capacity = 1;
    for (int k = 0; k < K && capacity <= Real(codes.ids.size()); ++k)
      capacity *= M;
    QREC_CHECK(Real(codes.ids.size()) <= capacity, "catalog of ",
               codes.ids.size(), " items exceeds the ", M, "^", K,
               " distinct codes available");
  }

  std::vector<std::vector<int>> initial;
  initial.reserve(codes.ids.size());
  for (const auto& sid : codes.ids) initial.push_back(sid.indices);

  // locked items never move again: the initially collision-free part of the
  // catalog, plus any group member that retained its code through a pass
  // (keeps the "nearest-ranked item keeps its code" rule stable even when a
  // reassignment lands on another group's tuple and forces further passes)
  std::set<int> locked_items;
  std::set<std::vector<int>> locked_tuples;
  size_t prev_colliding = std::numeric_limits<size_t>::max();
  bool global_avail = scope == ReallocScope::kGlobal;

  for (int pass = 0;; ++pass) {
    QREC_CHECK(pass < 64, "collision reallocation failed to converge");
    auto groups = detect_collisions(codes.ids);
    if (groups.empty()) break;

    if (pass == 0) {
      std::set<int> in_group;
      for (const auto& g : groups)
        for (int gi : g) in_group.insert(gi);
      for (int i = 0; i < int(codes.ids.size()); ++i) {
        if (in_group.count(i)) continue;
        locked_items.insert(i);
        locked_tuples.insert(codes.ids[size_t(i)].indices);
      }
    }

    size_t colliding = 0;
    for (const auto& g : groups) colliding += g.size();
    if (!global_avail && colliding >= prev_colliding) {
      // group-local availability stalled; finish under global availability
      log_warn("collision reallocation stalled with ", colliding,
               " items after pass ", pass, "; switching to global availability");
      global_avail = true;
    }
    prev_colliding = colliding;

    std::map<std::vector<int>, int> taken_global;
    if (global_avail)
      for (const auto& sid : codes.ids) ++taken_global[sid.indices];

    for (const auto& group : groups) {
      // rank members by distance to their nearest last-level codeword
      std::vector<std::pair<Real, int>> ranked;
      for (int gi : group) {
        const auto& r_last = codes.stages[size_t(gi)][size_t(K - 1)];
        Real best = std::numeric_limits<Real>::infinity();
        for (int c = 0; c < M; ++c)
          best = std::min(best, sq_dist(r_last.data(),
                                        codebooks[size_t(K - 1)].codewords.v().data() +
                                            size_t(c) * codebooks[0].codewords.cols(),
                                        codebooks[0].codewords.cols()));
        ranked.emplace_back(best, gi);
      }
      std::stable_sort(ranked.begin(), ranked.end(),
                       [&](const auto& a, const auto& b) {
                         if (a.first != b.first) return a.first < b.first;
                         return codes.ids[size_t(a.second)].item_id <
                                codes.ids[size_t(b.second)].item_id;
                       });

      // the group's current tuples are up for grabs during its processing;
      // each member re-claims (or claims anew) on assignment
      if (global_avail)
        for (int gi : group) --taken_global[codes.ids[size_t(gi)].indices];

      std::set<std::vector<int>> taken_group;
      auto available = [&](const std::vector<int>& tuple) {
        if (taken_group.count(tuple)) return false;
        if (locked_tuples.count(tuple)) return false;
        if (global_avail) {
          auto it = taken_global.find(tuple);
          if (it != taken_global.end() && it->second > 0) return false;
        }
        return true;
      };

      // locked members hold their codes; reserve them before anyone walks
      for (const auto& [dist, gi] : ranked)
        if (locked_items.count(gi)) {
          taken_group.insert(codes.ids[size_t(gi)].indices);
          if (global_avail) ++taken_global[codes.ids[size_t(gi)].indices];
        }

      for (const auto& [dist, gi] : ranked) {
        if (locked_items.count(gi)) continue;
        SemanticId& sid = codes.ids[size_t(gi)];
        const std::vector<int> original = sid.indices;
        bool placed = false;
        // walk the last level first, then re-pick progressively earlier
        // levels (keeping the precomputed distance ordering at each level)
        for (int lv = K - 1; lv >= 0 && !placed; --lv) {
          auto lv_cands = sorted_candidates(codes.stages[size_t(gi)][size_t(lv)],
                                            codebooks[size_t(lv)]);
          auto last_cands =
              lv == K - 1 ? std::vector<int>{}
                          : sorted_candidates(codes.stages[size_t(gi)][size_t(K - 1)],
                                              codebooks[size_t(K - 1)]);
          for (int cand : lv_cands) {
            std::vector<int> tuple = original;
            tuple[size_t(lv)] = cand;
            if (lv == K - 1) {
              if (available(tuple)) {
                sid.indices = tuple;
                placed = true;
                break;
              }
            } else {
              for (int last : last_cands) {
                tuple[size_t(K - 1)] = last;
                if (available(tuple)) {
                  sid.indices = tuple;
                  placed = true;
                  break;
                }
              }
              if (placed) break;
            }
          }
        }
        QREC_CHECK(placed, "no free code for item ", sid.item_id);
        taken_group.insert(sid.indices);
        if (global_avail) ++taken_global[sid.indices];
        if (sid.indices == original) {
          locked_items.insert(gi);
          locked_tuples.insert(sid.indices);
        }
      }
    }
    if (global_avail) break;  // a single global pass is injective
  }

  int changed = 0;
  for (size_t i = 0; i < codes.ids.size(); ++i)
    if (codes.ids[i].indices != initial[i]) ++changed;
  return changed;
}

std::string serialize(const SemanticId& sid) {
  std::string s;
  for (size_t k = 0; k < sid.indices.size(); ++k) {
    s += '<';
    s += char('a' + k);
    s += '_';
    s += std::to_string(sid.indices[k]);
    s += '>';
  }
  return s;
}

SemanticId parse_token_string(const std::string& s, int levels, int codebook_size) {
  SemanticId sid;
  size_t pos = 0;
  for (int k = 0; k < levels; ++k) {
    const size_t open = pos;
    QREC_CHECK(pos < s.size(), "token string '", s, "' has ", k,
               " groups, expected ", levels);
    if (s[pos] != '<')
      throw ParseError(detail::msg("expected '<' at position ", pos, " in '", s, "'"));
    const size_t close = s.find('>', pos);
    if (close == std::string::npos)
      throw ParseError(detail::msg("unterminated token starting at position ",
                                   open, " in '", s, "'"));
    const std::string tok = s.substr(open, close - open + 1);
    const char want = char('a' + k);
    if (close - open < 4 || s[open + 2] != '_')
      throw ParseError("malformed token '" + tok + "'");
    if (s[open + 1] != want)
      throw ParseError(detail::msg("out-of-order level in token '", tok,
                                   "' (expected level letter '", want, "')"));
    int idx = 0;
    for (size_t i = open + 3; i < close; ++i) {
      if (s[i] < '0' || s[i] > '9')
        throw ParseError("non-numeric index in token '" + tok + "'");
      idx = idx * 10 + (s[i] - '0');
      if (idx >= codebook_size) break;
    }
    if (close == open + 3) throw ParseError("empty index in token '" + tok + "'");
    if (idx >= codebook_size)
      throw ParseError(detail::msg("index out of range in token '", tok,
                                   "' (codebook size ", codebook_size, ")"));
    sid.indices.push_back(idx);
    pos = close + 1;
  }
  if (pos != s.size())
    throw ParseError(detail::msg("trailing characters after ", levels,
                                 " token groups in '", s, "'"));
  return sid;
}

void export_semantic_ids(const std::string& path,
                         const std::vector<SemanticId>& ids) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& sid : ids) out << sid.item_id << '\t' << serialize(sid) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

std::vector<SemanticId> load_semantic_ids(const std::string& path, int levels,
                                          int codebook_size) {
  const std::string buf = io::read_all(path);
  io::LineCursor cur{buf};
  std::vector<SemanticId> ids;
  while (!cur.done()) {
    const std::string line = cur.next_line();
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw ParseError(path + ": missing tab separator in '" + line + "'");
    SemanticId sid = parse_token_string(line.substr(tab + 1), levels, codebook_size);
    sid.item_id = line.substr(0, tab);
    ids.push_back(std::move(sid));
  }
  return ids;
}

void save_codebooks(const std::string& path, const RqVaeState& st,
                    uint64_t config_hash) {
  QREC_CHECK(st.codebooks_ready, "refusing to save uninitialized codebooks");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "qrec-codebooks v1\n";
  out << "levels " << st.cfg.levels << "\n";
  out << "codebook_size " << st.cfg.codebook_size << "\n";
  out << "code_dim " << st.cfg.code_dim << "\n";
  out << "letters ";
  for (const auto& cb : st.codebooks) out << cb.letter;
  out << "\nconfig " << to_hex(config_hash) << "\n";
  out << "payload "
      << size_t(st.cfg.levels) * size_t(st.cfg.codebook_size) * size_t(st.cfg.code_dim) * 4
      << "\n";
  for (const auto& cb : st.codebooks)
    for (Real x : cb.codewords.v()) io::put_f32(out, float(x));
  if (!out) throw IoError("write failed: " + path);
}

void load_codebooks(const std::string& path, RqVaeState& st,
                    uint64_t expected_config_hash) {
  const std::string buf = io::read_all(path);
  io::LineCursor cur{buf};
  auto expect = [&](const std::string& key) {
    const std::string line = cur.next_line();
    QREC_CHECK(line.rfind(key, 0) == 0, path, ": expected '", key,
               "' line, got '", line, "'");
    return line.size() > key.size() + 1 ? line.substr(key.size() + 1) : std::string();
  };
  auto to_int = [&](const std::string& s) {
    try {
      return std::stoi(s);
    } catch (const std::exception&) {
      throw ParseError(path + ": expected an integer, got '" + s + "'");
    }
  };
  if (cur.next_line() != "qrec-codebooks v1")
    throw ParseError(path + ": not a codebook checkpoint");
  const int levels = to_int(expect("levels"));
  const int m = to_int(expect("codebook_size"));
  const int dim = to_int(expect("code_dim"));
  const std::string letters = expect("letters");
  const std::string cfg_hex = expect("config");
  QREC_CHECK(levels == st.cfg.levels && m == st.cfg.codebook_size &&
                 dim == st.cfg.code_dim,
             path, ": checkpoint geometry ", levels, "x", m, "x", dim,
             " does not match the configured ", st.cfg.levels, "x",
             st.cfg.codebook_size, "x", st.cfg.code_dim);
  if (cfg_hex != to_hex(expected_config_hash))
    throw ConfigError(path + ": checkpoint was produced under a different configuration");
  size_t payload = 0;
  try {
    payload = std::stoull(expect("payload"));
  } catch (const std::exception&) {
    throw ParseError(path + ": malformed payload line");
  }
  QREC_CHECK(buf.size() - cur.pos == payload, path, ": payload is ",
             buf.size() - cur.pos, " bytes, expected ", payload);
  QREC_CHECK(int(letters.size()) == levels, path, ": bad letters line");
  const char* p = buf.data() + cur.pos;
  for (auto& cb : st.codebooks)
    for (auto& x : cb.codewords.v()) x = Real(io::get_f32(p));
  st.codebooks_ready = true;
}

}  // namespace qrec::quant
