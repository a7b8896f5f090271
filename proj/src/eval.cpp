#include "qrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

namespace qrec::eval {

Real hr_at_k(int rank, int k) {
  QREC_CHECK(rank >= 1, "rank must be 1-based, got ", rank);
  return rank <= k ? Real(1) : Real(0);
}

Real ndcg_at_k(int rank, int k) {
  QREC_CHECK(rank >= 1, "rank must be 1-based, got ", rank);
  return rank <= k ? Real(1) / std::log2(Real(rank) + 1) : Real(0);
}

MetricRow aggregate_ranks(const std::vector<int>& ranks) {
  MetricRow row;
  QREC_CHECK(!ranks.empty(), "no ranks to aggregate");
  for (int r : ranks) {
    row.hr1 += hr_at_k(r, 1);
    row.hr5 += hr_at_k(r, 5);
    row.hr10 += hr_at_k(r, 10);
    row.ndcg5 += ndcg_at_k(r, 5);
    row.ndcg10 += ndcg_at_k(r, 10);
  }
  const Real n = Real(ranks.size());
  row.hr1 /= n;
  row.hr5 /= n;
  row.hr10 /= n;
  row.ndcg5 /= n;
  row.ndcg10 /= n;
  return row;
}

namespace {

std::string fmt_real(Real x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", double(x));
  return buf;
}

void append_row(std::string& out, const char* name, const MetricRow& r) {
  out += "  \"";
  out += name;
  out += "\": {\"hr1\": " + fmt_real(r.hr1) + ", \"hr5\": " + fmt_real(r.hr5) +
         ", \"hr10\": " + fmt_real(r.hr10) + ", \"ndcg5\": " + fmt_real(r.ndcg5) +
         ", \"ndcg10\": " + fmt_real(r.ndcg10) + "}";
}

// log softmax over the semantic columns of one logits row; specials get -inf
// conceptually but are simply never read.
std::vector<Real> sem_log_softmax(const Real* row, int n_sem) {
  Real mx = row[0];
  for (int c = 1; c < n_sem; ++c) mx = std::max(mx, row[c]);
  Real denom = 0;
  for (int c = 0; c < n_sem; ++c) denom += std::exp(row[c] - mx);
  const Real log_denom = std::log(denom) + mx;
  std::vector<Real> lp(static_cast<size_t>(n_sem));
  for (int c = 0; c < n_sem; ++c) lp[size_t(c)] = row[c] - log_denom;
  return lp;
}

// Tokens of the masked query: history (most recent max_items-1 items) then K
// MASK tokens in the target slot.
std::vector<int> query_tokens(const seq::EncoderState& st,
                              const std::vector<std::string>& history,
                              const seq::SidTable& sids) {
  QREC_CHECK(!history.empty(), "cannot score an empty history");
  std::vector<int> toks = seq::tokenize_sequence(history, sids, st.vocab,
                                                 st.cfg.max_items - 1);
  for (int k = 0; k < st.vocab.levels; ++k) toks.push_back(st.vocab.mask());
  return toks;
}

// Sum each candidate's per-level log-probabilities. lp[k] is the semantic
// log-softmax at masked position k; cand_tokens[c][k] indexes into it.
std::vector<Real> sum_scores(const std::vector<std::vector<Real>>& lp,
                             const std::vector<std::vector<int>>& cand_tokens) {
  std::vector<Real> scores(cand_tokens.size(), Real(0));
  for (size_t c = 0; c < cand_tokens.size(); ++c)
    for (size_t k = 0; k < lp.size(); ++k)
      scores[c] += lp[k][size_t(cand_tokens[c][k])];
  return scores;
}

}  // namespace

std::vector<Real> score_candidates(const seq::EncoderState& st,
                                   const std::vector<std::string>& history,
                                   const std::vector<std::string>& candidates,
                                   const seq::SidTable& sids) {
  QREC_CHECK(!candidates.empty(), "no candidates to score");
  const seq::TokenVocab& v = st.vocab;
  const int k_levels = v.levels;
  const int n_sem = k_levels * v.codebook_size;

  std::vector<std::vector<int>> cand_tokens;
  for (const auto& c : candidates) {
    const auto& code = sids.at(c);
    std::vector<int> toks(static_cast<size_t>(k_levels));
    for (int k = 0; k < k_levels; ++k) toks[size_t(k)] = v.token(k, code[k]);
    cand_tokens.push_back(std::move(toks));
  }

  Tape t(/*grad_enabled=*/false);
  Tensor logits = seq::mlm_forward(t, st, query_tokens(st, history, sids));
  std::vector<std::vector<Real>> lp;
  for (int k = 0; k < k_levels; ++k) {
    const int pos = st.full_len() - k_levels + k;
    lp.push_back(sem_log_softmax(logits.v().data() + size_t(pos) * v.size(), n_sem));
  }
  return sum_scores(lp, cand_tokens);
}

MetricsReport evaluate(const data::InteractionDataset& ds,
                       const seq::EncoderState& st, const seq::SidTable& sids,
                       EvalPhase phase, const EvalOptions& opts) {
  QREC_CHECK(opts.batch_users >= 1, "batch_users must be positive");
  const seq::TokenVocab& v = st.vocab;
  const int k_levels = v.levels;
  const int n_sem = k_levels * v.codebook_size;
  const auto& catalog = ds.item_universe;
  QREC_CHECK(!catalog.empty(), "dataset has an empty item catalog");
  const int n_items = int(catalog.size());
  const int n_users = int(ds.n_users());
  QREC_CHECK(n_users >= 1, "dataset has no users");

  // candidate token ids and the lexicographic tie ordering (catalog is sorted)
  std::vector<std::vector<int>> cand_tokens;
  std::map<std::string, int> cat_index;
  for (int c = 0; c < n_items; ++c) {
    const auto& code = sids.at(catalog[size_t(c)]);
    std::vector<int> toks(static_cast<size_t>(k_levels));
    for (int k = 0; k < k_levels; ++k) toks[size_t(k)] = v.token(k, code[k]);
    cand_tokens.push_back(std::move(toks));
    cat_index[catalog[size_t(c)]] = c;
  }

  // histories, targets, and train-prefix popularity in one pass
  std::vector<std::vector<std::string>> histories;
  std::vector<int> targets;
  std::vector<int64_t> pop_count(static_cast<size_t>(n_items), 0);
  for (int u = 0; u < n_users; ++u) {
    data::SplitSpec split = data::leave_one_out(ds.sequences[size_t(u)]);
    for (const auto& it : split.train) {
      auto idx = cat_index.find(it);
      QREC_CHECK(idx != cat_index.end(), "train item '", it,
                 "' missing from the catalog");
      ++pop_count[size_t(idx->second)];
    }
    std::vector<std::string> hist = split.train;
    std::string target = split.val;
    if (phase == EvalPhase::kTest) {
      hist.push_back(split.val);
      target = split.test;
    }
    auto idx = cat_index.find(target);
    QREC_CHECK(idx != cat_index.end(), "target item '", target,
               "' missing from the catalog");
    histories.push_back(std::move(hist));
    targets.push_back(idx->second);
  }

  // popularity ranking: frequency desc, item id asc; rank of item = position
  std::vector<int> pop_order(static_cast<size_t>(n_items));
  std::iota(pop_order.begin(), pop_order.end(), 0);
  std::sort(pop_order.begin(), pop_order.end(), [&](int a, int b) {
    if (pop_count[size_t(a)] != pop_count[size_t(b)])
      return pop_count[size_t(a)] > pop_count[size_t(b)];
    return catalog[size_t(a)] < catalog[size_t(b)];
  });
  std::vector<int> pop_rank(static_cast<size_t>(n_items));
  for (int r = 0; r < n_items; ++r) pop_rank[size_t(pop_order[size_t(r)])] = r + 1;

  std::ofstream csv;
  if (!opts.per_user_csv.empty()) {
    csv.open(opts.per_user_csv, std::ios::trunc);
    if (!csv) throw IoError("cannot write " + opts.per_user_csv);
    csv << "user_id,target,rank\n";
  }

  std::vector<int> model_ranks, pop_ranks;
  for (int lo = 0; lo < n_users; lo += opts.batch_users) {
    const int hi = std::min(n_users, lo + opts.batch_users);
    int trim = st.full_len();
    std::vector<std::vector<int>> rows;
    for (int u = lo; u < hi; ++u) {
      rows.push_back(query_tokens(st, histories[size_t(u)], sids));
      int first = 0;
      while (rows.back()[size_t(first)] == v.pad()) ++first;
      trim = std::min(trim, first);
    }
    if (trim > 0)
      for (auto& r : rows) r.erase(r.begin(), r.begin() + trim);
    const int width = int(rows[0].size());

    Tape t(/*grad_enabled=*/false);
    Tensor logits = seq::encode_batch(t, st, rows);
    for (int u = lo; u < hi; ++u) {
      const int base = (u - lo) * width + (width - k_levels);
      std::vector<std::vector<Real>> lp;
      for (int k = 0; k < k_levels; ++k)
        lp.push_back(sem_log_softmax(
            logits.v().data() + size_t(base + k) * v.size(), n_sem));
      const std::vector<Real> scores = sum_scores(lp, cand_tokens);

      const int tgt = targets[size_t(u)];
      const Real ts = scores[size_t(tgt)];
      int rank = 1;
      for (int c = 0; c < n_items; ++c) {
        if (c == tgt) continue;
        if (scores[size_t(c)] > ts ||
            (scores[size_t(c)] == ts && catalog[size_t(c)] < catalog[size_t(tgt)]))
          ++rank;
      }
      model_ranks.push_back(rank);
      pop_ranks.push_back(pop_rank[size_t(tgt)]);
      if (csv.is_open())
        csv << ds.user_ids[size_t(u)] << "," << catalog[size_t(tgt)] << ","
            << rank << "\n";
      if (opts.ranks_out) {
        RankingResult rr;
        rr.user_id = ds.user_ids[size_t(u)];
        rr.target = catalog[size_t(tgt)];
        rr.rank = rank;
        std::vector<int> order(static_cast<size_t>(n_items));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
          if (scores[size_t(a)] != scores[size_t(b)])
            return scores[size_t(a)] > scores[size_t(b)];
          return catalog[size_t(a)] < catalog[size_t(b)];
        });
        for (int i = 0; i < std::min(10, n_items); ++i)
          rr.top_k.push_back(catalog[size_t(order[size_t(i)])]);
        opts.ranks_out->push_back(std::move(rr));
      }
    }
  }

  MetricsReport rep;
  rep.phase = phase == EvalPhase::kVal ? "val" : "test";
  rep.n_users = n_users;
  rep.n_items = n_items;
  rep.model = aggregate_ranks(model_ranks);
  rep.popularity = aggregate_ranks(pop_ranks);
  rep.random.hr1 = Real(1) / n_items;
  rep.random.hr5 = Real(std::min(5, n_items)) / n_items;
  rep.random.hr10 = Real(std::min(10, n_items)) / n_items;
  for (int r = 1; r <= std::min(5, n_items); ++r)
    rep.random.ndcg5 += Real(1) / std::log2(Real(r) + 1);
  for (int r = 1; r <= std::min(10, n_items); ++r)
    rep.random.ndcg10 += Real(1) / std::log2(Real(r) + 1);
  rep.random.ndcg5 /= n_items;
  rep.random.ndcg10 /= n_items;
  return rep;
}

std::string MetricsReport::to_json() const {
  std::string out = "{\n";
  out += "  \"phase\": \"" + phase + "\",\n";
  out += "  \"n_users\": " + std::to_string(n_users) + ",\n";
  out += "  \"n_items\": " + std::to_string(n_items) + ",\n";
  append_row(out, "model", model);
  out += ",\n";
  append_row(out, "popularity", popularity);
  out += ",\n";
  append_row(out, "random", random);
  out += "\n}\n";
  return out;
}

std::string MetricsReport::to_text() const {
  char buf[160];
  std::string out;
  std::snprintf(buf, sizeof buf, "%s metrics over %d users, %d items\n",
                phase.c_str(), n_users, n_items);
  out += buf;
  std::snprintf(buf, sizeof buf, "%-12s %8s %8s %8s %8s %8s\n", "", "HR@1",
                "HR@5", "HR@10", "NDCG@5", "NDCG@10");
  out += buf;
  auto line = [&](const char* name, const MetricRow& r) {
    std::snprintf(buf, sizeof buf, "%-12s %8.4f %8.4f %8.4f %8.4f %8.4f\n", name,
                  double(r.hr1), double(r.hr5), double(r.hr10), double(r.ndcg5),
                  double(r.ndcg10));
    out += buf;
  };
  line("model", model);
  line("popularity", popularity);
  line("random", random);
  return out;
}

}  // namespace qrec::eval
