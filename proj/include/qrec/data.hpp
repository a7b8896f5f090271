// Interaction logs, item feature tables, synthetic data, leave-one-out split.
#pragma once

#include <map>
#include <optional>
#include <string>

#include "qrec/common.hpp"

namespace qrec::data {

struct InteractionDataset {
  std::vector<std::string> user_ids;
  std::vector<std::vector<std::string>> sequences;  // chronological item ids
  std::vector<std::string> item_universe;           // sorted, unique

  size_t n_users() const { return user_ids.size(); }
};

// One line per user: "user_id item1 item2 ...". Consecutive duplicate items
// are collapsed; users left with fewer than 3 items are dropped (count is
// logged via the returned report).
struct LoadReport {
  size_t users_dropped = 0;
  size_t duplicates_removed = 0;
};
InteractionDataset load_interactions(const std::string& path, LoadReport* report = nullptr);
void save_interactions(const InteractionDataset& ds, const std::string& path);

// ---------------------------------------------------------------------------
// Feature tables. On-disk codec ("qrec-features v1"):
//
//   qrec-features v1
//   encoding text|binary
//   channels t:24 v:24          <- name:dim pairs, file order = payload order
//   items 500
//   <one item id per line, 500 lines>
//   <payload>
//
// text payload: one line per item, all channels' floats concatenated.
// binary payload: contiguous little-endian f32, items x sum(dims).
// In text mode a channel may be the single token "*" meaning missing.
struct FeatureFile {
  std::vector<std::pair<std::string, int>> channels;
  std::vector<std::string> item_ids;
  // values[item][channel] -> vector<Real> (empty = missing)
  std::vector<std::vector<std::vector<Real>>> values;

  int channel_index(const std::string& name) const;
};
FeatureFile read_feature_file(const std::string& path);
void write_feature_file(const FeatureFile& f, const std::string& path, bool binary);

// Modality features keyed by item, L2-normalized on load. Channels "t" and
// "v" are required, "s" optional. A zero vector normalizes to uniform
// 1/sqrt(d) (warned); a missing channel is an error unless allow_missing,
// in which case the per-channel mean vector is substituted.
struct ItemFeatures {
  std::vector<std::string> item_ids;  // sorted
  std::vector<std::vector<Real>> text;
  std::vector<std::vector<Real>> vision;
  std::vector<std::vector<Real>> structural;  // empty if channel absent
  int text_dim = 0, vision_dim = 0, struct_dim = 0;

  bool has_struct() const { return struct_dim > 0; }
  std::optional<size_t> index_of(const std::string& item_id) const;
};
ItemFeatures load_features(const std::string& path, bool allow_missing = false);
ItemFeatures features_from_table(const FeatureFile& f, bool allow_missing = false);

// ---------------------------------------------------------------------------
// Leave-one-out split: per user, last item = test target, second-to-last =
// validation target, rest = training prefix.
struct SplitSpec {
  std::vector<std::string> train;  // prefix
  std::string val;
  std::string test;
};
SplitSpec leave_one_out(const std::vector<std::string>& sequence);

// ---------------------------------------------------------------------------
// Synthetic planted-concept generator. Items are assigned round-robin to
// concepts; each modality gets per-concept centroid + N(0, sigma^2) noise.
// User sequences follow a sticky Markov chain over concepts with uniform
// item choice inside the current concept.
struct SynthConfig {
  int n_users = 2000;
  int n_items = 500;
  int n_concepts = 20;
  int seq_len_min = 5;
  int seq_len_max = 10;
  int text_dim = 24;
  int vision_dim = 24;
  Real concept_noise_sigma = 0.1;
  Real markov_stickiness = 0.85;
  uint64_t seed = 7;
  // Items (catalog, concepts, features) are derived from `seed`; user
  // trajectories from `user_seed`, so several interaction sets can share one
  // catalog. 0 means "same as seed".
  uint64_t user_seed = 0;
  // Optional heterogeneous noise: a hetero_fraction of items use sigma_hi.
  Real noise_sigma_hi = -1.0;  // <0 disables
  Real hetero_fraction = 0.5;
};

struct SynthData {
  InteractionDataset interactions;
  FeatureFile features;            // channels t, v (raw, unnormalized)
  std::vector<int> item_concept;   // per catalog item
  std::vector<Real> item_sigma;    // per catalog item
};
SynthData synth_generate(const SynthConfig& cfg);

}  // namespace qrec::data
