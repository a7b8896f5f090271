#include "qrec/seqmodel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "qrec/io.hpp"

namespace qrec::seq {

int TokenVocab::token(int level, int index) const {
  QREC_CHECK(level >= 0 && level < levels, "token level ", level,
             " out of range [0,", levels, ")");
  QREC_CHECK(index >= 0 && index < codebook_size, "token index ", index,
             " out of range [0,", codebook_size, ")");
  return level * codebook_size + index;
}

std::pair<int, int> TokenVocab::split(int tok) const {
  QREC_CHECK(is_semantic(tok), "token ", tok, " is not a semantic token");
  return {tok / codebook_size, tok % codebook_size};
}

const char* strategy_name(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::kSpan: return "span";
    case MaskStrategy::kTail: return "tail";
    case MaskStrategy::kMultiRegion: return "multi_region";
    case MaskStrategy::kUniform: return "uniform";
    case MaskStrategy::kCombined: return "combined";
  }
  return "?";
}

void SeqModelConfig::validate() const {
  auto ratio_ok = [](Real r) { return r > 0 && r < 1; };
  if (!ratio_ok(span_ratio) || !ratio_ok(multi_region_ratio) ||
      !ratio_ok(tail_ratio) || !ratio_ok(finetune_ratio) ||
      !ratio_ok(mix_common_ratio))
    throw ConfigError("mask ratios must lie in (0,1)");
  if (max_items < 2) throw ConfigError("max_items must be >= 2");
  if (n_layers < 1 || n_heads < 1 || hidden_dim < 1)
    throw ConfigError("encoder dimensions must be positive");
  if (hidden_dim % n_heads != 0)
    throw ConfigError(detail::msg("hidden_dim ", hidden_dim,
                                  " is not divisible by n_heads ", n_heads));
  if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must be in [0,1)");
  if (pretrain_batch < 1 || finetune_batch < 1)
    throw ConfigError("batch sizes must be positive");
  if (pretrain_lr <= 0 || finetune_lr <= 0)
    throw ConfigError("learning rates must be positive");
  if (pretrain_epochs < 0 || finetune_epochs < 0)
    throw ConfigError("epoch counts must be non-negative");
}

SidTable SidTable::from_ids(const std::vector<quant::SemanticId>& ids, int levels,
                            int codebook_size) {
  SidTable t;
  t.levels = levels;
  t.codebook_size = codebook_size;
  for (const auto& sid : ids) {
    QREC_CHECK(int(sid.indices.size()) == levels, "item '", sid.item_id,
               "' has ", sid.indices.size(), " levels, expected ", levels);
    for (int i : sid.indices)
      QREC_CHECK(i >= 0 && i < codebook_size, "item '", sid.item_id,
                 "' has index ", i, " outside [0,", codebook_size, ")");
    const bool fresh = t.codes.emplace(sid.item_id, sid.indices).second;
    QREC_CHECK(fresh, "duplicate semantic id for item '", sid.item_id, "'");
  }
  return t;
}

const std::vector<int>& SidTable::at(const std::string& item_id) const {
  auto it = codes.find(item_id);
  if (it == codes.end())
    throw ContractError("item '" + item_id + "' has no semantic id");
  return it->second;
}

std::vector<int> tokenize_sequence(const std::vector<std::string>& items,
                                   const SidTable& sids, const TokenVocab& vocab,
                                   int max_items) {
  QREC_CHECK(max_items >= 1, "max_items must be positive");
  const int k = vocab.levels;
  const size_t keep = std::min(items.size(), size_t(max_items));
  std::vector<int> out(size_t(max_items) * k, vocab.pad());
  size_t pos = out.size() - keep * k;
  for (size_t i = items.size() - keep; i < items.size(); ++i) {
    const auto& code = sids.at(items[i]);
    for (int lvl = 0; lvl < k; ++lvl) out[pos++] = vocab.token(lvl, code[lvl]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Masking. All strategies operate on whole items: a left-padded sequence of
// n items occupies the last n*K token positions.

namespace {

struct ItemLayout {
  int n_items = 0;
  int pad_len = 0;
};

ItemLayout item_layout(const std::vector<int>& tokens, const TokenVocab& vocab) {
  const int len = int(tokens.size());
  int first = 0;
  while (first < len && tokens[size_t(first)] == vocab.pad()) ++first;
  QREC_CHECK(first < len, "sequence is all padding, nothing to mask");
  QREC_CHECK((len - first) % vocab.levels == 0, "non-pad tail of ", len - first,
             " tokens is not a whole number of ", vocab.levels, "-token items");
  return {(len - first) / vocab.levels, first};
}

int masked_item_count(Real ratio, int n_items, int min_count) {
  QREC_CHECK(ratio > 0 && ratio < 1, "mask ratio must be in (0,1), got ", ratio);
  const int m = int(std::lround(ratio * n_items));
  return std::clamp(m, std::min(min_count, n_items), n_items);
}

MaskPlan plan_from_items(const std::vector<int>& tokens, const TokenVocab& vocab,
                         const ItemLayout& lay, std::vector<int> items,
                         MaskStrategy strategy) {
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());
  MaskPlan plan;
  plan.strategy = strategy;
  for (int it : items)
    for (int k = 0; k < vocab.levels; ++k) {
      const int pos = lay.pad_len + it * vocab.levels + k;
      plan.positions.push_back(pos);
      plan.original_tokens.push_back(tokens[size_t(pos)]);
    }
  return plan;
}

}  // namespace

MaskPlan span_mask(const std::vector<int>& tokens, const TokenVocab& vocab,
                   Real ratio, Rng& rng) {
  const ItemLayout lay = item_layout(tokens, vocab);
  const int m = masked_item_count(ratio, lay.n_items, 1);
  const int start = int(rng.uniform_int(lay.n_items - m + 1));
  std::vector<int> items(static_cast<size_t>(m));
  std::iota(items.begin(), items.end(), start);
  return plan_from_items(tokens, vocab, lay, std::move(items), MaskStrategy::kSpan);
}

MaskPlan tail_mask(const std::vector<int>& tokens, const TokenVocab& vocab,
                   Real ratio, Rng& rng) {
  (void)rng;  // placement is deterministic; kept for a uniform signature
  const ItemLayout lay = item_layout(tokens, vocab);
  const int m = masked_item_count(ratio, lay.n_items, 1);
  std::vector<int> items(static_cast<size_t>(m));
  std::iota(items.begin(), items.end(), lay.n_items - m);
  return plan_from_items(tokens, vocab, lay, std::move(items), MaskStrategy::kTail);
}

MaskPlan multi_region_mask(const std::vector<int>& tokens, const TokenVocab& vocab,
                           Real ratio, Rng& rng) {
  const ItemLayout lay = item_layout(tokens, vocab);
  const int n = lay.n_items;
  if (n < 4) {
    log_debug("multi-region mask needs >= 4 items, got ", n,
              "; falling back to span");
    return span_mask(tokens, vocab, ratio, rng);
  }
  // Need one spare position per inter-region gap, so at most n-1 items fit.
  const int m = std::min(masked_item_count(ratio, n, 2), n - 1);
  int regions = (m >= 3 && m + 2 <= n) ? 2 + int(rng.uniform_int(2)) : 2;
  std::vector<int> sizes(size_t(regions), 1);
  for (int extra = m - regions; extra > 0; --extra)
    ++sizes[size_t(rng.uniform_int(regions))];
  // Distribute the leftover slack over the r+1 gap slots (edges may be 0,
  // inter-region gaps get a guaranteed +1 below).
  std::vector<int> gaps(size_t(regions) + 1, 0);
  for (int slack = n - m - (regions - 1); slack > 0; --slack)
    ++gaps[size_t(rng.uniform_int(regions + 1))];
  std::vector<int> items;
  int cursor = gaps[0];
  for (int r = 0; r < regions; ++r) {
    for (int j = 0; j < sizes[size_t(r)]; ++j) items.push_back(cursor + j);
    cursor += sizes[size_t(r)] + 1 + gaps[size_t(r) + 1];
  }
  return plan_from_items(tokens, vocab, lay, std::move(items),
                         MaskStrategy::kMultiRegion);
}

MaskPlan uniform_mask(const std::vector<int>& tokens, const TokenVocab& vocab,
                      Real ratio, Rng& rng) {
  const ItemLayout lay = item_layout(tokens, vocab);
  const int n = lay.n_items;
  const int m = masked_item_count(ratio, n, 1);
  std::vector<int> pool(static_cast<size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < m; ++i)
    std::swap(pool[size_t(i)], pool[size_t(i) + size_t(rng.uniform_int(n - i))]);
  pool.resize(size_t(m));
  return plan_from_items(tokens, vocab, lay, std::move(pool),
                         MaskStrategy::kUniform);
}

std::pair<MaskStrategy, Real> sample_strategy(const SeqModelConfig& cfg,
                                              TrainPhase phase, Rng& rng) {
  if (phase == TrainPhase::kFinetune ||
      cfg.strategy_mode == StrategyMode::kMlm) {
    if (phase == TrainPhase::kPretrain) rng.next_u64();  // keep stream layout
    return {MaskStrategy::kUniform, cfg.finetune_ratio};
  }
  if (cfg.simultaneous) {
    rng.next_u64();
    return {MaskStrategy::kCombined, Real(0)};
  }
  const std::pair<MaskStrategy, Real> menu[3] = {
      {MaskStrategy::kSpan, cfg.span_ratio},
      {MaskStrategy::kMultiRegion, cfg.multi_region_ratio},
      {MaskStrategy::kTail, cfg.tail_ratio},
  };
  if (cfg.mix_mode == MixMode::kRatios) return menu[rng.uniform_int(3)];
  const Real total = cfg.span_ratio + cfg.multi_region_ratio + cfg.tail_ratio;
  Real u = rng.uniform() * total;
  for (const auto& [strat, weight] : menu) {
    if (u < weight) return {strat, cfg.mix_common_ratio};
    u -= weight;
  }
  return {MaskStrategy::kTail, cfg.mix_common_ratio};
}

MaskPlan build_mask_plan(const SeqModelConfig& cfg, const std::vector<int>& tokens,
                         const TokenVocab& vocab, MaskStrategy strategy, Real ratio,
                         Rng& rng) {
  switch (strategy) {
    case MaskStrategy::kSpan: return span_mask(tokens, vocab, ratio, rng);
    case MaskStrategy::kTail: return tail_mask(tokens, vocab, ratio, rng);
    case MaskStrategy::kMultiRegion:
      return multi_region_mask(tokens, vocab, ratio, rng);
    case MaskStrategy::kUniform: return uniform_mask(tokens, vocab, ratio, rng);
    case MaskStrategy::kCombined: break;
  }
  const ItemLayout lay = item_layout(tokens, vocab);
  std::vector<int> items;
  for (const MaskPlan& part :
       {span_mask(tokens, vocab, cfg.span_ratio, rng),
        multi_region_mask(tokens, vocab, cfg.multi_region_ratio, rng),
        tail_mask(tokens, vocab, cfg.tail_ratio, rng)})
    for (size_t i = 0; i < part.positions.size(); i += size_t(vocab.levels))
      items.push_back((part.positions[i] - lay.pad_len) / vocab.levels);
  return plan_from_items(tokens, vocab, lay, std::move(items),
                         MaskStrategy::kCombined);
}

std::vector<int> apply_mask(const std::vector<int>& tokens, const MaskPlan& plan,
                            const TokenVocab& vocab) {
  std::vector<int> out = tokens;
  for (int p : plan.positions) {
    QREC_CHECK(p >= 0 && p < int(out.size()), "mask position ", p,
               " outside sequence of ", out.size());
    out[size_t(p)] = vocab.mask();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoder.

EncoderState EncoderState::init(const SeqModelConfig& cfg, const TokenVocab& vocab,
                                Rng& rng) {
  cfg.validate();
  QREC_CHECK(vocab.levels >= 1 && vocab.codebook_size >= 2, "bad vocabulary ",
             vocab.levels, "x", vocab.codebook_size);
  EncoderState st;
  st.cfg = cfg;
  st.vocab = vocab;
  const int h = cfg.hidden_dim;
  const int ffn = 4 * h;
  auto named = [](Tensor t, std::string n) { return t.set_name(std::move(n)); };
  st.tok_emb = named(Tensor::randn(vocab.size(), h, 0.02, rng, true), "enc.tok_emb");
  st.pos_emb = named(Tensor::randn(cfg.max_items * vocab.levels, h, 0.02, rng, true),
                     "enc.pos_emb");
  st.out_bias = named(Tensor::zeros(1, vocab.size(), true), "enc.out_bias");
  const Real s_h = Real(1) / std::sqrt(Real(h));
  const Real s_f = Real(1) / std::sqrt(Real(ffn));
  for (int l = 0; l < cfg.n_layers; ++l) {
    EncoderLayer lay;
    const std::string p = "enc.layer" + std::to_string(l) + ".";
    lay.wq = named(Tensor::randn(h, h, s_h, rng, true), p + "wq");
    lay.bq = named(Tensor::zeros(1, h, true), p + "bq");
    lay.wk = named(Tensor::randn(h, h, s_h, rng, true), p + "wk");
    lay.bk = named(Tensor::zeros(1, h, true), p + "bk");
    lay.wv = named(Tensor::randn(h, h, s_h, rng, true), p + "wv");
    lay.bv = named(Tensor::zeros(1, h, true), p + "bv");
    lay.wo = named(Tensor::randn(h, h, s_h, rng, true), p + "wo");
    lay.bo = named(Tensor::zeros(1, h, true), p + "bo");
    lay.ln1_g = named(Tensor::full(1, h, 1.0, true), p + "ln1_g");
    lay.ln1_b = named(Tensor::zeros(1, h, true), p + "ln1_b");
    lay.w1 = named(Tensor::randn(h, ffn, s_h, rng, true), p + "w1");
    lay.b1 = named(Tensor::zeros(1, ffn, true), p + "b1");
    lay.w2 = named(Tensor::randn(ffn, h, s_f, rng, true), p + "w2");
    lay.b2 = named(Tensor::zeros(1, h, true), p + "b2");
    lay.ln2_g = named(Tensor::full(1, h, 1.0, true), p + "ln2_g");
    lay.ln2_b = named(Tensor::zeros(1, h, true), p + "ln2_b");
    st.layers.push_back(lay);
  }
  return st;
}

std::vector<Tensor> EncoderState::params() const {
  std::vector<Tensor> out = {tok_emb, pos_emb, out_bias};
  for (const auto& l : layers)
    for (const Tensor& t : {l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                            l.ln1_g, l.ln1_b, l.w1, l.b1, l.w2, l.b2, l.ln2_g,
                            l.ln2_b})
      out.push_back(t);
  return out;
}

std::vector<std::vector<Real>> EncoderState::snapshot() const {
  std::vector<std::vector<Real>> snap;
  for (const Tensor& p : params()) snap.push_back(p.v());
  return snap;
}

void EncoderState::restore(const std::vector<std::vector<Real>>& snap) {
  auto ps = params();
  QREC_CHECK(snap.size() == ps.size(), "snapshot has ", snap.size(),
             " tensors, state has ", ps.size());
  for (size_t i = 0; i < ps.size(); ++i) {
    QREC_CHECK(snap[i].size() == ps[i].v().size(), "snapshot tensor ", i,
               " size mismatch");
    ps[i].v() = snap[i];
  }
}

uint64_t EncoderState::arch_fingerprint() const {
  return fnv1a64_str(detail::msg("mlm|v=", vocab.size(), "|k=", vocab.levels,
                                 "|m=", vocab.codebook_size, "|h=", cfg.hidden_dim,
                                 "|l=", cfg.n_layers, "|a=", cfg.n_heads,
                                 "|t=", cfg.max_items));
}

Tensor encode_batch(Tape& t, const EncoderState& st,
                    const std::vector<std::vector<int>>& rows) {
  const int b = int(rows.size());
  QREC_CHECK(b >= 1, "empty batch");
  const int len = int(rows[0].size());
  QREC_CHECK(len >= 1 && len <= st.full_len(), "batch width ", len,
             " outside [1,", st.full_len(), "]");
  const int offset = st.full_len() - len;

  std::vector<int> flat(size_t(b) * len);
  std::vector<int> pos(size_t(b) * len);
  std::vector<int> valid_from(static_cast<size_t>(b));
  for (int r = 0; r < b; ++r) {
    QREC_CHECK(int(rows[size_t(r)].size()) == len, "ragged batch: row ", r,
               " has ", rows[size_t(r)].size(), " tokens, row 0 has ", len);
    int first = len;
    for (int j = 0; j < len; ++j) {
      const int tok = rows[size_t(r)][size_t(j)];
      QREC_CHECK(tok >= 0 && tok < st.vocab.size(), "row ", r, " token ", tok,
                 " outside vocabulary of ", st.vocab.size());
      if (first == len && tok != st.vocab.pad()) first = j;
      flat[size_t(r) * len + j] = tok;
      pos[size_t(r) * len + j] = offset + j;
    }
    QREC_CHECK(first < len, "row ", r, " is all padding");
    valid_from[size_t(r)] = first;
  }

  const Real p = st.cfg.dropout;
  Tensor x = t.dropout(
      t.add(t.take_rows(st.tok_emb, flat), t.take_rows(st.pos_emb, pos)), p);
  auto affine_ln = [&](const Tensor& a, const Tensor& g, const Tensor& bb) {
    return t.add(t.mul(t.layer_norm_rows(a), g), bb);
  };
  for (const auto& l : st.layers) {
    Tensor q = t.add(t.matmul(x, l.wq), l.bq);
    Tensor k = t.add(t.matmul(x, l.wk), l.bk);
    Tensor v = t.add(t.matmul(x, l.wv), l.bv);
    Tensor ctx = t.attention(q, k, v, b, len, len, st.cfg.n_heads, valid_from);
    Tensor attn = t.dropout(t.add(t.matmul(ctx, l.wo), l.bo), p);
    x = affine_ln(t.add(x, attn), l.ln1_g, l.ln1_b);
    Tensor hid = t.relu(t.add(t.matmul(x, l.w1), l.b1));
    Tensor ffn = t.dropout(t.add(t.matmul(hid, l.w2), l.b2), p);
    x = affine_ln(t.add(x, ffn), l.ln2_g, l.ln2_b);
  }
  return t.add(t.matmul_nt(x, st.tok_emb), st.out_bias);
}

Tensor mlm_forward(Tape& t, const EncoderState& st, const std::vector<int>& tokens) {
  QREC_CHECK(int(tokens.size()) == st.full_len(), "sequence has ", tokens.size(),
             " tokens, model expects ", st.full_len());
  return encode_batch(t, st, {tokens});
}

Tensor mask_loss(Tape& t, const Tensor& logits, const MaskPlan& plan) {
  QREC_CHECK(!plan.positions.empty(), "mask plan is empty");
  QREC_CHECK(plan.positions.size() == plan.original_tokens.size(),
             "mask plan positions/targets length mismatch");
  return t.cross_entropy_rows(t.take_rows(logits, plan.positions),
                              plan.original_tokens);
}

Tensor mask_loss_batch(Tape& t, const Tensor& logits,
                       const std::vector<MaskPlan>& plans, int seq_len) {
  std::vector<int> rows;
  std::vector<int> targets;
  for (size_t r = 0; r < plans.size(); ++r) {
    const auto& plan = plans[r];
    QREC_CHECK(plan.positions.size() == plan.original_tokens.size(),
               "mask plan positions/targets length mismatch");
    for (size_t i = 0; i < plan.positions.size(); ++i) {
      const int p = plan.positions[i];
      QREC_CHECK(p >= 0 && p < seq_len, "mask position ", p,
                 " outside rows of length ", seq_len);
      rows.push_back(int(r) * seq_len + p);
      targets.push_back(plan.original_tokens[i]);
    }
  }
  QREC_CHECK(!rows.empty(), "mask plans are all empty");
  return t.cross_entropy_rows(t.take_rows(logits, rows), std::move(targets));
}

// ---------------------------------------------------------------------------
// Training.

namespace {

void round_f32_inplace(std::vector<Real>& v) {
  for (Real& x : v) x = Real(float(x));
}

OptimSnapshot snapshot_optimizer(Adam& opt) {
  OptimSnapshot snap;
  snap.step_count = opt.step_count();
  for (size_t i = 0; i < opt.params().size(); ++i) {
    snap.m1.push_back(opt.moment1(i));
    snap.m2.push_back(opt.moment2(i));
  }
  return snap;
}

}  // namespace

TrainReport train_encoder(EncoderState& st, TrainPhase phase,
                          const std::vector<const data::InteractionDataset*>& corpora,
                          const SidTable& sids, uint64_t seed,
                          const TrainOptions& opts) {
  st.cfg.validate();
  QREC_CHECK(!corpora.empty(), "no training corpora");
  QREC_CHECK(st.vocab.levels == sids.levels &&
                 st.vocab.codebook_size == sids.codebook_size,
             "vocabulary ", st.vocab.levels, "x", st.vocab.codebook_size,
             " does not match the semantic-id table ", sids.levels, "x",
             sids.codebook_size);
  const bool pre = phase == TrainPhase::kPretrain;
  const int epochs =
      opts.epochs_override >= 0
          ? opts.epochs_override
          : (pre ? st.cfg.pretrain_epochs : st.cfg.finetune_epochs);
  const int batch_size = pre ? st.cfg.pretrain_batch : st.cfg.finetune_batch;
  const Real lr = pre ? st.cfg.pretrain_lr : st.cfg.finetune_lr;

  // Train only on leave-one-out prefixes; the last two interactions are the
  // evaluation targets and never enter a training batch.
  std::vector<std::vector<int>> seqs;
  std::vector<int> n_tokens;
  for (const auto* ds : corpora) {
    QREC_CHECK(ds != nullptr, "null corpus");
    for (size_t u = 0; u < ds->n_users(); ++u) {
      const auto& full = ds->sequences[u];
      QREC_CHECK(full.size() >= 3, "user '", ds->user_ids[u], "' has only ",
                 full.size(), " interactions; need >= 3 for leave-one-out");
      std::vector<std::string> prefix(full.begin(), full.end() - 2);
      seqs.push_back(tokenize_sequence(prefix, sids, st.vocab, st.cfg.max_items));
      const int items = std::min<int>(int(prefix.size()), st.cfg.max_items);
      QREC_CHECK(items >= 1, "user '", ds->user_ids[u],
                 "' has an empty training prefix");
      n_tokens.push_back(items * st.vocab.levels);
    }
  }
  const int n = int(seqs.size());
  QREC_CHECK(n >= 1, "training corpora contain no usable sequences");
  const int n_batches = (n + batch_size - 1) / batch_size;

  Adam opt(st.params(), {.lr = lr});
  if (!opts.resume.empty()) {
    QREC_CHECK(opts.resume.m1.size() == opt.params().size(),
               "optimizer snapshot has ", opts.resume.m1.size(),
               " tensors, model has ", opt.params().size());
    opt.set_step_count(opts.resume.step_count);
    for (size_t i = 0; i < opt.params().size(); ++i) {
      opt.moment1(i) = opts.resume.m1[i];
      opt.moment2(i) = opts.resume.m2[i];
    }
  }

  std::ofstream csv;
  if (!opts.log_csv.empty()) {
    csv.open(opts.log_csv, opts.start_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write " + opts.log_csv);
    if (opts.start_epoch == 0) csv << "epoch,loss,lr,wall_seconds\n";
  }
  if (!opts.ckpt_dir.empty())
    std::filesystem::create_directories(opts.ckpt_dir);

  TrainReport report;
  auto last_good = st.snapshot();
  const uint64_t dropout_seed = mix64(seed ^ 0xD60D5EEDull);
  const char* phase_name = pre ? "pretrain" : "finetune";

  for (int e = opts.start_epoch; e < epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng er(mix64(mix64(seed ^ 0xE70C0000ull) +
                 uint64_t(e) * 0x9E3779B97F4A7C15ull));
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    er.shuffle(order);
    std::stable_sort(order.begin(), order.end(), [&](int a, int bdx) {
      return n_tokens[size_t(a)] > n_tokens[size_t(bdx)];
    });
    std::vector<int> batch_order(static_cast<size_t>(n_batches));
    std::iota(batch_order.begin(), batch_order.end(), 0);
    er.shuffle(batch_order);

    Real loss_sum = 0;
    int64_t masked_total = 0;
    bool aborted = false;
    for (int iter = 0; iter < n_batches && !aborted; ++iter) {
      const int bi = batch_order[size_t(iter)];
      const int lo = bi * batch_size;
      const int hi = std::min(n, lo + batch_size);
      const auto [strategy, ratio] = sample_strategy(st.cfg, phase, er);

      int trim = st.full_len();
      std::vector<MaskPlan> plans;
      std::vector<std::vector<int>> rows;
      for (int i = lo; i < hi; ++i) {
        const auto& toks = seqs[size_t(order[size_t(i)])];
        plans.push_back(build_mask_plan(st.cfg, toks, st.vocab, strategy, ratio, er));
        rows.push_back(apply_mask(toks, plans.back(), st.vocab));
        trim = std::min(trim, st.full_len() - n_tokens[size_t(order[size_t(i)])]);
      }
      if (trim > 0) {
        for (auto& r : rows) r.erase(r.begin(), r.begin() + trim);
        for (auto& plan : plans)
          for (int& p : plan.positions) p -= trim;
      }

      Tape tape;
      tape.train_mode = true;
      tape.rng_seed = dropout_seed;
      tape.step = int64_t(e) * n_batches + iter;
      Tensor logits = encode_batch(tape, st, rows);
      Tensor loss = mask_loss_batch(tape, logits, plans, int(rows[0].size()));
      const Real lv = loss.item();
      int64_t masked = 0;
      for (const auto& plan : plans) masked += int64_t(plan.positions.size());
      if (!std::isfinite(lv)) {
        log_error(phase_name, " loss became non-finite at epoch ", e + 1,
                  " batch ", iter, "; restoring last epoch checkpoint");
        st.restore(last_good);
        report.diverged = true;
        aborted = true;
        break;
      }
      tape.backward(loss);
      try {
        opt.step();
      } catch (const TrainingError& err) {
        log_error(phase_name, " aborted: ", err.what(),
                  "; restoring last epoch checkpoint");
        st.restore(last_good);
        report.diverged = true;
        aborted = true;
        break;
      }
      opt.zero_grad();
      loss_sum += lv * Real(masked);
      masked_total += masked;
    }
    if (aborted) break;

    const Real epoch_loss = loss_sum / Real(std::max<int64_t>(masked_total, 1));
    report.epoch_losses.push_back(epoch_loss);
    const Real wall =
        std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
    log_info(phase_name, " epoch ", e + 1, "/", epochs, " loss ", epoch_loss,
             " (", masked_total, " masked tokens, ", wall, "s)");
    if (csv.is_open()) {
      csv << (e + 1) << "," << epoch_loss << "," << lr << "," << wall << "\n";
      csv.flush();
    }
    if (!opts.ckpt_dir.empty()) {
      OptimSnapshot snap = snapshot_optimizer(opt);
      save_encoder(opts.ckpt_dir + "/encoder_epoch_" + std::to_string(e + 1) +
                       ".ckpt",
                   st, &snap, e + 1);
      // Round the live state to what was just serialized so an uninterrupted
      // run and a resumed run continue from bit-identical values.
      for (auto p : st.params()) round_f32_inplace(p.v());
      for (size_t i = 0; i < opt.params().size(); ++i) {
        round_f32_inplace(opt.moment1(i));
        round_f32_inplace(opt.moment2(i));
      }
    }
    last_good = st.snapshot();
  }
  return report;
}

TrainReport pretrain(EncoderState& st,
                     const std::vector<const data::InteractionDataset*>& corpora,
                     const SidTable& sids, uint64_t seed, const TrainOptions& opts) {
  return train_encoder(st, TrainPhase::kPretrain, corpora, sids, seed, opts);
}

TrainReport finetune(EncoderState& st, const data::InteractionDataset& ds,
                     const SidTable& sids, uint64_t seed, const TrainOptions& opts) {
  return train_encoder(st, TrainPhase::kFinetune, {&ds}, sids, seed, opts);
}

// ---------------------------------------------------------------------------
// Checkpoints.

void save_encoder(const std::string& path, const EncoderState& st,
                  const OptimSnapshot* opt, int epochs_done) {
  const auto ps = st.params();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  size_t values = 0;
  for (const auto& p : ps) values += p.v().size();
  const size_t payload = values * 4 * (opt ? 3 : 1);
  out << "qrec-encoder v1\n";
  out << "arch " << to_hex(st.arch_fingerprint()) << "\n";
  out << "vocab " << st.vocab.size() << "\n";
  out << "levels " << st.vocab.levels << "\n";
  out << "codebook_size " << st.vocab.codebook_size << "\n";
  out << "hidden " << st.cfg.hidden_dim << "\n";
  out << "layers " << st.cfg.n_layers << "\n";
  out << "heads " << st.cfg.n_heads << "\n";
  out << "max_items " << st.cfg.max_items << "\n";
  out << "epochs_done " << epochs_done << "\n";
  out << "adam_step " << (opt ? opt->step_count : 0) << "\n";
  out << "optimizer " << (opt ? 1 : 0) << "\n";
  out << "params " << ps.size() << "\n";
  for (const auto& p : ps)
    out << p.name() << " " << p.rows() << " " << p.cols() << "\n";
  out << "payload " << payload << "\n";
  for (const auto& p : ps)
    for (Real x : p.v()) io::put_f32(out, float(x));
  if (opt) {
    QREC_CHECK(opt->m1.size() == ps.size() && opt->m2.size() == ps.size(),
               "optimizer snapshot does not match the parameter list");
    for (size_t i = 0; i < ps.size(); ++i) {
      for (Real x : opt->m1[i]) io::put_f32(out, float(x));
      for (Real x : opt->m2[i]) io::put_f32(out, float(x));
    }
  }
  if (!out) throw IoError("write failed: " + path);

  std::ofstream meta(path + ".meta");
  if (!meta) throw IoError("cannot write " + path + ".meta");
  meta << "format qrec-encoder v1\n"
       << "arch " << to_hex(st.arch_fingerprint()) << "\n"
       << "epochs_done " << epochs_done << "\n"
       << "adam_step " << (opt ? opt->step_count : 0) << "\n"
       << "parameters " << ps.size() << "\n"
       << "values " << values << "\n";
}

CheckpointInfo load_encoder(const std::string& path, EncoderState& st) {
  const std::string buf = io::read_all(path);
  io::LineCursor cur{buf};
  if (cur.next_line() != "qrec-encoder v1")
    throw ParseError(path + ": not an encoder checkpoint");
  auto field = [&](const std::string& key) {
    const std::string line = cur.next_line();
    if (line.rfind(key + " ", 0) != 0)
      throw ParseError(path + ": expected '" + key + "' line, got '" + line + "'");
    return line.substr(key.size() + 1);
  };
  auto to_i64 = [&](const std::string& s) {
    try {
      return std::stoll(s);
    } catch (const std::exception&) {
      throw ParseError(path + ": expected an integer, got '" + s + "'");
    }
  };
  const std::string arch_hex = field("arch");
  const int vocab_size = int(to_i64(field("vocab")));
  const int levels = int(to_i64(field("levels")));
  const int m = int(to_i64(field("codebook_size")));
  const int hidden = int(to_i64(field("hidden")));
  const int layers = int(to_i64(field("layers")));
  const int heads = int(to_i64(field("heads")));
  const int max_items = int(to_i64(field("max_items")));
  CheckpointInfo info;
  info.epochs_done = int(to_i64(field("epochs_done")));
  const int64_t adam_step = to_i64(field("adam_step"));
  const bool has_opt = to_i64(field("optimizer")) != 0;
  const size_t n_params = size_t(to_i64(field("params")));

  if (arch_hex != to_hex(st.arch_fingerprint()))
    throw ConfigError(detail::msg(
        path, ": checkpoint was produced under a different architecture (vocab ",
        vocab_size, ", ", levels, "x", m, ", hidden ", hidden, ", layers ",
        layers, ", heads ", heads, ", max_items ", max_items, ")"));
  // corruption guard; a matching hash implies matching geometry
  QREC_CHECK(levels == st.vocab.levels && m == st.vocab.codebook_size &&
                 vocab_size == st.vocab.size() && hidden == st.cfg.hidden_dim &&
                 layers == st.cfg.n_layers && heads == st.cfg.n_heads &&
                 max_items == st.cfg.max_items,
             path, ": header geometry disagrees with its own arch hash");

  const auto ps = st.params();
  QREC_CHECK(n_params == ps.size(), path, ": checkpoint has ", n_params,
             " tensors, model has ", ps.size());
  size_t values = 0;
  for (const auto& p : ps) {
    const std::string line = cur.next_line();
    std::istringstream is(line);
    std::string name;
    int rows = 0, cols = 0;
    is >> name >> rows >> cols;
    QREC_CHECK(!is.fail() && name == p.name() && rows == p.rows() &&
                   cols == p.cols(),
               path, ": parameter '", p.name(), "' [", p.rows(), "x", p.cols(),
               "] does not match checkpoint line '", line, "'");
    values += p.v().size();
  }
  size_t payload = 0;
  try {
    payload = std::stoull(field("payload"));
  } catch (const std::exception&) {
    throw ParseError(path + ": malformed payload line");
  }
  const size_t expect = values * 4 * (has_opt ? 3 : 1);
  QREC_CHECK(payload == expect && buf.size() - cur.pos == payload, path,
             ": payload is ", buf.size() - cur.pos, " bytes, expected ", expect);

  const char* p = buf.data() + cur.pos;
  for (auto t : ps)
    for (Real& x : t.v()) x = Real(io::get_f32(p));
  if (has_opt) {
    info.opt.step_count = adam_step;
    for (const auto& t : ps) {
      std::vector<Real> m1(t.v().size()), m2(t.v().size());
      for (Real& x : m1) x = Real(io::get_f32(p));
      for (Real& x : m2) x = Real(io::get_f32(p));
      info.opt.m1.push_back(std::move(m1));
      info.opt.m2.push_back(std::move(m2));
    }
  }
  return info;
}

}  // namespace qrec::seq
