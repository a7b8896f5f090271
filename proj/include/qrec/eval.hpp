// Leave-one-out next-item evaluation: the target slot is appended as K MASK
// tokens, one forward pass scores every candidate by the sum of its token
// log-probabilities at those positions, and HR@K / NDCG@K are aggregated
// against analytic-random and train-popularity baselines.
#pragma once

#include "qrec/data.hpp"
#include "qrec/seqmodel.hpp"

namespace qrec::eval {

Real hr_at_k(int rank, int k);    // 1 iff rank <= k
Real ndcg_at_k(int rank, int k);  // 1/log2(rank+1) if rank <= k else 0

struct RankingResult {
  std::string user_id;
  std::string target;
  int rank = 0;                    // 1-based, ties broken by item id
  std::vector<std::string> top_k;  // best 10 candidates in rank order
};

struct MetricRow {
  Real hr1 = 0, hr5 = 0, hr10 = 0, ndcg5 = 0, ndcg10 = 0;  // ndcg1 == hr1
};

// Mean HR/NDCG over a set of 1-based ranks.
MetricRow aggregate_ranks(const std::vector<int>& ranks);

struct MetricsReport {
  std::string phase;  // "val" | "test"
  int n_users = 0;
  int n_items = 0;
  MetricRow model, popularity, random;

  std::string to_json() const;  // fixed key order and float format, no timestamps
  std::string to_text() const;  // aligned columns for terminals
};

enum class EvalPhase { kVal, kTest };

// Candidate scores from one forward pass. The history keeps its most recent
// max_items-1 items; score_c = sum_k log softmax(logits at mask position k)
// restricted to semantic-token columns, evaluated at c's level-k token.
std::vector<Real> score_candidates(const seq::EncoderState& st,
                                   const std::vector<std::string>& history,
                                   const std::vector<std::string>& candidates,
                                   const seq::SidTable& sids);

struct EvalOptions {
  int batch_users = 256;
  std::string per_user_csv;                      // optional rank dump
  std::vector<RankingResult>* ranks_out = nullptr;  // optional detail capture
};

// Per user: history = everything before the phase target (val excludes both
// held-out items, test includes the val item), target ranked against the full
// item catalog. Popularity ranks items by train-prefix frequency; the random
// row is analytic (HR@K = K/|I|).
MetricsReport evaluate(const data::InteractionDataset& ds,
                       const seq::EncoderState& st, const seq::SidTable& sids,
                       EvalPhase phase, const EvalOptions& opts = {});

}  // namespace qrec::eval
