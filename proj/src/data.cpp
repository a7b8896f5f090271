#include "qrec/data.hpp"

#include "qrec/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace qrec::data {

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

void l2_normalize_or_uniform(std::vector<Real>& x, const std::string& what) {
  Real ss = 0;
  for (Real v : x) ss += v * v;
  if (ss == 0) {
    log_warn("zero feature vector for ", what, ", substituting uniform direction");
    const Real u = Real(1) / std::sqrt(Real(x.size()));
    std::fill(x.begin(), x.end(), u);
    return;
  }
  const Real inv = Real(1) / std::sqrt(ss);
  for (Real& v : x) v *= inv;
}

}  // namespace

InteractionDataset load_interactions(const std::string& path, LoadReport* report) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  InteractionDataset ds;
  LoadReport rep;
  std::set<std::string> seen_users;
  std::set<std::string> universe;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() < 2)
      throw ParseError(detail::msg(path, ":", lineno, ": user with no items"));
    const std::string user = toks[0];
    if (!seen_users.insert(user).second)
      throw ParseError(detail::msg(path, ":", lineno, ": duplicate user id '", user, "'"));
    std::vector<std::string> seq;
    for (size_t i = 1; i < toks.size(); ++i) {
      if (!seq.empty() && seq.back() == toks[i]) {
        ++rep.duplicates_removed;
        continue;
      }
      seq.push_back(toks[i]);
    }
    if (seq.size() < 3) {
      ++rep.users_dropped;
      continue;
    }
    for (const auto& it : seq) universe.insert(it);
    ds.user_ids.push_back(user);
    ds.sequences.push_back(std::move(seq));
  }
  ds.item_universe.assign(universe.begin(), universe.end());
  if (rep.users_dropped > 0)
    log_info("dropped ", rep.users_dropped, " users shorter than 3 items from ", path);
  if (report) *report = rep;
  return ds;
}

void save_interactions(const InteractionDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (size_t u = 0; u < ds.user_ids.size(); ++u) {
    out << ds.user_ids[u];
    for (const auto& it : ds.sequences[u]) out << ' ' << it;
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------

int FeatureFile::channel_index(const std::string& name) const {
  for (size_t i = 0; i < channels.size(); ++i)
    if (channels[i].first == name) return int(i);
  return -1;
}

FeatureFile read_feature_file(const std::string& path) {
  const std::string buf = io::read_all(path);
  io::LineCursor cur{buf};
  if (cur.next_line() != "qrec-features v1")
    throw ParseError(path + ": not a qrec-features v1 file");

  auto expect_kv = [&](const std::string& key) {
    auto toks = split_ws(cur.next_line());
    if (toks.size() < 2 || toks[0] != key)
      throw ParseError(path + ": expected '" + key + " ...' header line");
    toks.erase(toks.begin());
    return toks;
  };

  const std::string enc = expect_kv("encoding")[0];
  if (enc != "text" && enc != "binary")
    throw ParseError(path + ": unknown encoding '" + enc + "'");

  FeatureFile f;
  int total_dim = 0;
  for (const auto& spec : expect_kv("channels")) {
    const size_t colon = spec.find(':');
    if (colon == std::string::npos)
      throw ParseError(path + ": bad channel spec '" + spec + "'");
    const int dim = std::stoi(spec.substr(colon + 1));
    if (dim <= 0) throw ParseError(path + ": channel dim must be positive");
    f.channels.emplace_back(spec.substr(0, colon), dim);
    total_dim += dim;
  }
  const int n_items = std::stoi(expect_kv("items")[0]);
  if (n_items <= 0) throw ParseError(path + ": item count must be positive");

  f.item_ids.reserve(n_items);
  for (int i = 0; i < n_items; ++i) {
    auto toks = split_ws(cur.next_line());
    if (toks.size() != 1)
      throw ParseError(detail::msg(path, ": bad item id line ", i));
    f.item_ids.push_back(toks[0]);
  }

  f.values.assign(n_items, {});
  if (enc == "text") {
    for (int i = 0; i < n_items; ++i) {
      std::istringstream is(cur.next_line());
      auto& per_channel = f.values[i];
      per_channel.resize(f.channels.size());
      for (size_t c = 0; c < f.channels.size(); ++c) {
        std::string first;
        if (!(is >> first))
          throw ParseError(detail::msg(path, ": truncated values for item ",
                                       f.item_ids[i]));
        if (first == "*") continue;  // missing channel
        auto& vec = per_channel[c];
        vec.resize(f.channels[c].second);
        vec[0] = std::stod(first);
        for (int j = 1; j < f.channels[c].second; ++j)
          if (!(is >> vec[j]))
            throw ParseError(detail::msg(path, ": truncated values for item ",
                                         f.item_ids[i]));
      }
      std::string extra;
      if (is >> extra)
        throw ParseError(detail::msg(path, ": trailing values for item ",
                                     f.item_ids[i]));
    }
  } else {
    const size_t need = size_t(n_items) * total_dim * 4;
    if (buf.size() - cur.pos != need)
      throw ParseError(detail::msg(path, ": binary payload is ",
                                   buf.size() - cur.pos, " bytes, expected ", need));
    const char* p = buf.data() + cur.pos;
    for (int i = 0; i < n_items; ++i) {
      auto& per_channel = f.values[i];
      per_channel.resize(f.channels.size());
      for (size_t c = 0; c < f.channels.size(); ++c) {
        auto& vec = per_channel[c];
        vec.resize(f.channels[c].second);
        for (int j = 0; j < f.channels[c].second; ++j)
          vec[j] = Real(io::get_f32(p));
      }
    }
  }
  return f;
}

void write_feature_file(const FeatureFile& f, const std::string& path, bool binary) {
  QREC_CHECK(f.item_ids.size() == f.values.size(), "feature table id/value mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "qrec-features v1\n";
  out << "encoding " << (binary ? "binary" : "text") << "\n";
  out << "channels";
  for (const auto& [name, dim] : f.channels) out << ' ' << name << ':' << dim;
  out << "\nitems " << f.item_ids.size() << "\n";
  for (const auto& id : f.item_ids) out << id << "\n";

  char numbuf[64];
  for (size_t i = 0; i < f.values.size(); ++i) {
    QREC_CHECK(f.values[i].size() == f.channels.size(),
               "channel count mismatch for item ", f.item_ids[i]);
    for (size_t c = 0; c < f.channels.size(); ++c) {
      const auto& vec = f.values[i][c];
      if (vec.empty()) {
        QREC_CHECK(!binary, "missing channels are only representable in text encoding");
        out << "*" << (c + 1 == f.channels.size() ? "" : " ");
        continue;
      }
      QREC_CHECK(int(vec.size()) == f.channels[c].second, "dim mismatch for item ",
                 f.item_ids[i]);
      for (size_t j = 0; j < vec.size(); ++j) {
        // values are stored at f32 precision in both encodings
        const float fv = float(vec[j]);
        if (binary) {
          io::put_f32(out, fv);
        } else {
          std::snprintf(numbuf, sizeof(numbuf), "%.9g", double(fv));
          out << numbuf;
          if (!(c + 1 == f.channels.size() && j + 1 == vec.size())) out << ' ';
        }
      }
    }
    if (!binary) out << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------

std::optional<size_t> ItemFeatures::index_of(const std::string& item_id) const {
  auto it = std::lower_bound(item_ids.begin(), item_ids.end(), item_id);
  if (it == item_ids.end() || *it != item_id) return std::nullopt;
  return size_t(it - item_ids.begin());
}

ItemFeatures features_from_table(const FeatureFile& f, bool allow_missing) {
  const int ti = f.channel_index("t");
  const int vi = f.channel_index("v");
  const int si = f.channel_index("s");
  if (ti < 0 || vi < 0)
    throw ParseError("feature table must provide channels 't' and 'v'");

  std::vector<size_t> order(f.item_ids.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return f.item_ids[a] < f.item_ids[b];
  });
  for (size_t i = 1; i < order.size(); ++i)
    if (f.item_ids[order[i - 1]] == f.item_ids[order[i]])
      throw ParseError("duplicate item id in feature table: " + f.item_ids[order[i]]);

  ItemFeatures out;
  out.text_dim = f.channels[ti].second;
  out.vision_dim = f.channels[vi].second;
  out.struct_dim = si >= 0 ? f.channels[si].second : 0;

  auto extract = [&](int channel, int dim, const char* name) {
    std::vector<std::vector<Real>> rows;
    if (channel < 0) return rows;
    rows.reserve(order.size());
    std::vector<Real> mean(dim, 0);
    size_t present = 0;
    for (size_t i : order) {
      const auto& vec = f.values[i][channel];
      if (!vec.empty()) {
        std::vector<Real> x = vec;
        l2_normalize_or_uniform(x, detail::msg(name, "/", f.item_ids[i]));
        for (int j = 0; j < dim; ++j) mean[j] += x[j];
        ++present;
        rows.push_back(std::move(x));
      } else {
        rows.emplace_back();  // fill after the mean is known
      }
    }
    if (present < order.size()) {
      if (!allow_missing)
        throw ParseError(detail::msg("missing '", name,
                                     "' features; pass allow_missing to substitute the mean"));
      QREC_CHECK(present > 0, "all '", name, "' features are missing");
      for (auto& m : mean) m /= Real(present);
      l2_normalize_or_uniform(mean, detail::msg(name, "/<mean>"));
      size_t substituted = 0;
      for (auto& row : rows)
        if (row.empty()) {
          row = mean;
          ++substituted;
        }
      log_warn("substituted mean '", name, "' vector for ", substituted, " items");
    }
    return rows;
  };

  out.item_ids.reserve(order.size());
  for (size_t i : order) out.item_ids.push_back(f.item_ids[i]);
  out.text = extract(ti, out.text_dim, "t");
  out.vision = extract(vi, out.vision_dim, "v");
  out.structural = extract(si, out.struct_dim, "s");
  return out;
}

ItemFeatures load_features(const std::string& path, bool allow_missing) {
  return features_from_table(read_feature_file(path), allow_missing);
}

// ---------------------------------------------------------------------------

SplitSpec leave_one_out(const std::vector<std::string>& sequence) {
  QREC_CHECK(sequence.size() >= 3, "leave-one-out needs >= 3 items, got ",
             sequence.size());
  SplitSpec s;
  s.train.assign(sequence.begin(), sequence.end() - 2);
  s.val = sequence[sequence.size() - 2];
  s.test = sequence.back();
  return s;
}

// ---------------------------------------------------------------------------

SynthData synth_generate(const SynthConfig& cfg) {
  QREC_CHECK(cfg.n_items > 0 && cfg.n_users > 0 && cfg.n_concepts > 0,
             "bad synth sizes");
  QREC_CHECK(cfg.n_concepts <= cfg.n_items, "more concepts than items");
  QREC_CHECK(cfg.seq_len_min >= 3 && cfg.seq_len_max >= cfg.seq_len_min,
             "sequence length range must start at >= 3");
  QREC_CHECK(cfg.markov_stickiness >= 0 && cfg.markov_stickiness <= 1,
             "stickiness must be in [0,1]");

  SynthData out;
  Rng item_rng(mix64(cfg.seed ^ 0xA11CEull));

  // zero-padded ids so lexicographic order == catalog order
  int width = 1;
  for (int v = cfg.n_items - 1; v >= 10; v /= 10) ++width;
  auto item_name = [&](int i) {
    std::ostringstream os;
    os << 'i';
    std::string digits = std::to_string(i);
    os << std::string(size_t(width) - digits.size(), '0') << digits;
    return os.str();
  };

  std::vector<std::vector<Real>> cent_t(cfg.n_concepts), cent_v(cfg.n_concepts);
  for (int c = 0; c < cfg.n_concepts; ++c) {
    cent_t[c].resize(cfg.text_dim);
    for (auto& x : cent_t[c]) x = item_rng.normal();
    cent_v[c].resize(cfg.vision_dim);
    for (auto& x : cent_v[c]) x = item_rng.normal();
  }

  out.item_concept.resize(cfg.n_items);
  out.item_sigma.resize(cfg.n_items);
  const bool hetero = cfg.noise_sigma_hi >= 0;
  out.features.channels = {{"t", cfg.text_dim}, {"v", cfg.vision_dim}};
  out.features.item_ids.reserve(cfg.n_items);
  out.features.values.reserve(cfg.n_items);
  for (int i = 0; i < cfg.n_items; ++i) {
    const int c = i % cfg.n_concepts;
    out.item_concept[i] = c;
    Real sigma = cfg.concept_noise_sigma;
    if (hetero && item_rng.uniform() < cfg.hetero_fraction) sigma = cfg.noise_sigma_hi;
    out.item_sigma[i] = sigma;
    std::vector<Real> ft = cent_t[c], fv = cent_v[c];
    for (auto& x : ft) x += sigma * item_rng.normal();
    for (auto& x : fv) x += sigma * item_rng.normal();
    out.features.item_ids.push_back(item_name(i));
    out.features.values.push_back({std::move(ft), std::move(fv)});
  }

  std::vector<std::vector<int>> concept_items(cfg.n_concepts);
  for (int i = 0; i < cfg.n_items; ++i)
    concept_items[out.item_concept[i]].push_back(i);

  const uint64_t user_seed = cfg.user_seed ? cfg.user_seed : cfg.seed;
  Rng user_rng(mix64(user_seed ^ 0xBEEFull));
  int uwidth = 1;
  for (int v = cfg.n_users - 1; v >= 10; v /= 10) ++uwidth;

  auto& ds = out.interactions;
  std::set<std::string> universe;
  for (int u = 0; u < cfg.n_users; ++u) {
    const int len = int(user_rng.uniform_range(cfg.seq_len_min, cfg.seq_len_max));
    int cpt = int(user_rng.uniform_int(cfg.n_concepts));
    std::vector<std::string> seq;
    int prev_item = -1;
    for (int s = 0; s < len; ++s) {
      if (s > 0 && user_rng.uniform() >= cfg.markov_stickiness && cfg.n_concepts > 1) {
        const int jump = int(user_rng.uniform_int(cfg.n_concepts - 1));
        cpt = jump >= cpt ? jump + 1 : jump;
      }
      const auto& pool = concept_items[cpt];
      int item = pool[user_rng.uniform_int(int64_t(pool.size()))];
      while (item == prev_item && pool.size() > 1)
        item = pool[user_rng.uniform_int(int64_t(pool.size()))];
      prev_item = item;
      seq.push_back(item_name(item));
      universe.insert(seq.back());
    }
    std::string digits = std::to_string(u);
    ds.user_ids.push_back("u" + std::string(size_t(uwidth) - digits.size(), '0') +
                          digits);
    ds.sequences.push_back(std::move(seq));
  }
  ds.item_universe.assign(universe.begin(), universe.end());
  return out;
}

}  // namespace qrec::data
