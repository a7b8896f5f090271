#include "qrec/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>

#include "qrec/io.hpp"

namespace qrec::pipe {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config codec

namespace {

void config_check(bool cond, const std::string& what) {
  if (!cond) throw ConfigError(what);
}

using FieldTable =
    std::vector<std::pair<const char*, std::function<void(const ordered_json&)>>>;

// Applies every present key through its setter; anything else is fatal.
void parse_object(const ordered_json& j, const std::string& path,
                  const FieldTable& fields) {
  config_check(j.is_object(), path + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto f = std::find_if(fields.begin(), fields.end(),
                                [&](const auto& p) { return it.key() == p.first; });
    config_check(f != fields.end(), "unknown config key " + path + "." + it.key());
    try {
      f->second(it.value());
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key " + path + "." + it.key() +
                        " has the wrong type");
    }
  }
}

seq::StrategyMode strategy_mode_from(const std::string& s) {
  if (s == "multimask") return seq::StrategyMode::kMultiMask;
  if (s == "mlm") return seq::StrategyMode::kMlm;
  throw ConfigError("seqmodel.strategy_mode must be multimask or mlm, got '" + s +
                    "'");
}
const char* strategy_mode_name(seq::StrategyMode m) {
  return m == seq::StrategyMode::kMultiMask ? "multimask" : "mlm";
}

seq::MixMode mix_mode_from(const std::string& s) {
  if (s == "ratios") return seq::MixMode::kRatios;
  if (s == "weights") return seq::MixMode::kWeights;
  throw ConfigError("seqmodel.mix_mode must be ratios or weights, got '" + s + "'");
}
const char* mix_mode_name(seq::MixMode m) {
  return m == seq::MixMode::kRatios ? "ratios" : "weights";
}

}  // namespace

RunConfig config_from_json(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }

  RunConfig cfg;
  auto& sy = cfg.synth;
  auto& fu = cfg.fusion;
  auto& qu = cfg.quantizer;
  auto& sm = cfg.seqmodel;

  const FieldTable data_fields = {
      {"n_users", [&](const ordered_json& v) { sy.n_users = v.get<int>(); }},
      {"n_items", [&](const ordered_json& v) { sy.n_items = v.get<int>(); }},
      {"n_concepts", [&](const ordered_json& v) { sy.n_concepts = v.get<int>(); }},
      {"seq_len_min", [&](const ordered_json& v) { sy.seq_len_min = v.get<int>(); }},
      {"seq_len_max", [&](const ordered_json& v) { sy.seq_len_max = v.get<int>(); }},
      {"text_dim", [&](const ordered_json& v) { sy.text_dim = v.get<int>(); }},
      {"vision_dim", [&](const ordered_json& v) { sy.vision_dim = v.get<int>(); }},
      {"concept_noise_sigma",
       [&](const ordered_json& v) { sy.concept_noise_sigma = v.get<Real>(); }},
      {"markov_stickiness",
       [&](const ordered_json& v) { sy.markov_stickiness = v.get<Real>(); }},
      {"seed", [&](const ordered_json& v) { sy.seed = v.get<uint64_t>(); }},
      {"user_seed", [&](const ordered_json& v) { sy.user_seed = v.get<uint64_t>(); }},
      {"noise_sigma_hi",
       [&](const ordered_json& v) { sy.noise_sigma_hi = v.get<Real>(); }},
      {"hetero_fraction",
       [&](const ordered_json& v) { sy.hetero_fraction = v.get<Real>(); }},
  };
  const FieldTable fusion_fields = {
      {"embed_dim", [&](const ordered_json& v) { fu.embed_dim = v.get<int>(); }},
      {"max_depth", [&](const ordered_json& v) { fu.max_depth = v.get<int>(); }},
      {"n_heads", [&](const ordered_json& v) { fu.n_heads = v.get<int>(); }},
      {"tau", [&](const ordered_json& v) { fu.tau = v.get<Real>(); }},
      {"halt_threshold",
       [&](const ordered_json& v) { fu.halt_threshold = v.get<Real>(); }},
      {"lambda", [&](const ordered_json& v) { fu.lambda = v.get<Real>(); }},
      {"fixed_depth", [&](const ordered_json& v) { fu.fixed_depth = v.get<bool>(); }},
      {"lr", [&](const ordered_json& v) { fu.lr = v.get<Real>(); }},
      {"epochs", [&](const ordered_json& v) { fu.epochs = v.get<int>(); }},
      {"batch_size", [&](const ordered_json& v) { fu.batch_size = v.get<int>(); }},
  };
  const FieldTable quant_fields = {
      {"levels", [&](const ordered_json& v) { qu.levels = v.get<int>(); }},
      {"codebook_size",
       [&](const ordered_json& v) { qu.codebook_size = v.get<int>(); }},
      {"code_dim", [&](const ordered_json& v) { qu.code_dim = v.get<int>(); }},
      {"beta", [&](const ordered_json& v) { qu.beta = v.get<Real>(); }},
      {"lr", [&](const ordered_json& v) { qu.lr = v.get<Real>(); }},
      {"batch_size", [&](const ordered_json& v) { qu.batch_size = v.get<int>(); }},
      {"epochs", [&](const ordered_json& v) { qu.epochs = v.get<int>(); }},
      {"hidden_dim", [&](const ordered_json& v) { qu.hidden_dim = v.get<int>(); }},
      {"realloc_scope",
       [&](const ordered_json& v) { cfg.realloc_scope = v.get<std::string>(); }},
  };
  const FieldTable seq_fields = {
      {"n_layers", [&](const ordered_json& v) { sm.n_layers = v.get<int>(); }},
      {"n_heads", [&](const ordered_json& v) { sm.n_heads = v.get<int>(); }},
      {"dropout", [&](const ordered_json& v) { sm.dropout = v.get<Real>(); }},
      {"max_items", [&](const ordered_json& v) { sm.max_items = v.get<int>(); }},
      {"hidden_dim", [&](const ordered_json& v) { sm.hidden_dim = v.get<int>(); }},
      {"span_ratio", [&](const ordered_json& v) { sm.span_ratio = v.get<Real>(); }},
      {"multi_region_ratio",
       [&](const ordered_json& v) { sm.multi_region_ratio = v.get<Real>(); }},
      {"tail_ratio", [&](const ordered_json& v) { sm.tail_ratio = v.get<Real>(); }},
      {"finetune_ratio",
       [&](const ordered_json& v) { sm.finetune_ratio = v.get<Real>(); }},
      {"strategy_mode",
       [&](const ordered_json& v) {
         sm.strategy_mode = strategy_mode_from(v.get<std::string>());
       }},
      {"mix_mode",
       [&](const ordered_json& v) { sm.mix_mode = mix_mode_from(v.get<std::string>()); }},
      {"mix_common_ratio",
       [&](const ordered_json& v) { sm.mix_common_ratio = v.get<Real>(); }},
      {"simultaneous",
       [&](const ordered_json& v) { sm.simultaneous = v.get<bool>(); }},
      {"pretrain_lr", [&](const ordered_json& v) { sm.pretrain_lr = v.get<Real>(); }},
      {"pretrain_batch",
       [&](const ordered_json& v) { sm.pretrain_batch = v.get<int>(); }},
      {"pretrain_epochs",
       [&](const ordered_json& v) { sm.pretrain_epochs = v.get<int>(); }},
      {"finetune_lr", [&](const ordered_json& v) { sm.finetune_lr = v.get<Real>(); }},
      {"finetune_batch",
       [&](const ordered_json& v) { sm.finetune_batch = v.get<int>(); }},
      {"finetune_epochs",
       [&](const ordered_json& v) { sm.finetune_epochs = v.get<int>(); }},
      {"encoder_init",
       [&](const ordered_json& v) { cfg.encoder_init = v.get<std::string>(); }},
  };
  const FieldTable eval_fields = {
      {"batch_users",
       [&](const ordered_json& v) { cfg.eval.batch_users = v.get<int>(); }},
      {"per_user_csv",
       [&](const ordered_json& v) { cfg.eval.per_user_csv = v.get<bool>(); }},
  };
  const FieldTable top_fields = {
      {"seed", [&](const ordered_json& v) { cfg.seed = v.get<uint64_t>(); }},
      {"out_dir", [&](const ordered_json& v) { cfg.out_dir = v.get<std::string>(); }},
      {"data", [&](const ordered_json& v) { parse_object(v, "data", data_fields); }},
      {"fusion",
       [&](const ordered_json& v) { parse_object(v, "fusion", fusion_fields); }},
      {"quantizer",
       [&](const ordered_json& v) { parse_object(v, "quantizer", quant_fields); }},
      {"seqmodel",
       [&](const ordered_json& v) { parse_object(v, "seqmodel", seq_fields); }},
      {"eval", [&](const ordered_json& v) { parse_object(v, "eval", eval_fields); }},
  };
  parse_object(j, "config", top_fields);
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  return config_from_json(io::read_all(path));
}

std::string config_to_json(const RunConfig& cfg) {
  const auto& sy = cfg.synth;
  const auto& fu = cfg.fusion;
  const auto& qu = cfg.quantizer;
  const auto& sm = cfg.seqmodel;
  ordered_json j;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["data"] = {{"n_users", sy.n_users},
               {"n_items", sy.n_items},
               {"n_concepts", sy.n_concepts},
               {"seq_len_min", sy.seq_len_min},
               {"seq_len_max", sy.seq_len_max},
               {"text_dim", sy.text_dim},
               {"vision_dim", sy.vision_dim},
               {"concept_noise_sigma", sy.concept_noise_sigma},
               {"markov_stickiness", sy.markov_stickiness},
               {"seed", sy.seed},
               {"user_seed", sy.user_seed},
               {"noise_sigma_hi", sy.noise_sigma_hi},
               {"hetero_fraction", sy.hetero_fraction}};
  j["fusion"] = {{"embed_dim", fu.embed_dim},
                 {"max_depth", fu.max_depth},
                 {"n_heads", fu.n_heads},
                 {"tau", fu.tau},
                 {"halt_threshold", fu.halt_threshold},
                 {"lambda", fu.lambda},
                 {"fixed_depth", fu.fixed_depth},
                 {"lr", fu.lr},
                 {"epochs", fu.epochs},
                 {"batch_size", fu.batch_size}};
  j["quantizer"] = {{"levels", qu.levels},
                    {"codebook_size", qu.codebook_size},
                    {"code_dim", qu.code_dim},
                    {"beta", qu.beta},
                    {"lr", qu.lr},
                    {"batch_size", qu.batch_size},
                    {"epochs", qu.epochs},
                    {"hidden_dim", qu.hidden_dim},
                    {"realloc_scope", cfg.realloc_scope}};
  j["seqmodel"] = {{"n_layers", sm.n_layers},
                   {"n_heads", sm.n_heads},
                   {"dropout", sm.dropout},
                   {"max_items", sm.max_items},
                   {"hidden_dim", sm.hidden_dim},
                   {"span_ratio", sm.span_ratio},
                   {"multi_region_ratio", sm.multi_region_ratio},
                   {"tail_ratio", sm.tail_ratio},
                   {"finetune_ratio", sm.finetune_ratio},
                   {"strategy_mode", strategy_mode_name(sm.strategy_mode)},
                   {"mix_mode", mix_mode_name(sm.mix_mode)},
                   {"mix_common_ratio", sm.mix_common_ratio},
                   {"simultaneous", sm.simultaneous},
                   {"pretrain_lr", sm.pretrain_lr},
                   {"pretrain_batch", sm.pretrain_batch},
                   {"pretrain_epochs", sm.pretrain_epochs},
                   {"finetune_lr", sm.finetune_lr},
                   {"finetune_batch", sm.finetune_batch},
                   {"finetune_epochs", sm.finetune_epochs},
                   {"encoder_init", cfg.encoder_init}};
  j["eval"] = {{"batch_users", cfg.eval.batch_users},
               {"per_user_csv", cfg.eval.per_user_csv}};
  return j.dump(2) + "\n";
}

uint64_t config_hash(const RunConfig& cfg) {
  return fnv1a64_str(config_to_json(cfg));
}

void RunConfig::validate() const {
  config_check(!out_dir.empty(), "out_dir must not be empty");

  config_check(synth.n_users > 0 && synth.n_items > 0 && synth.n_concepts > 0,
               "data sizes must be positive");
  config_check(synth.n_concepts <= synth.n_items,
               "data.n_concepts cannot exceed data.n_items");
  config_check(synth.seq_len_min >= 3, "data.seq_len_min must be >= 3");
  config_check(synth.seq_len_max >= synth.seq_len_min,
               "data.seq_len_max must be >= data.seq_len_min");
  config_check(synth.text_dim >= 1 && synth.vision_dim >= 1,
               "data feature dimensions must be positive");
  config_check(synth.markov_stickiness >= 0 && synth.markov_stickiness <= 1,
               "data.markov_stickiness must be in [0,1]");
  config_check(synth.concept_noise_sigma > 0,
               "data.concept_noise_sigma must be positive");
  config_check(synth.hetero_fraction >= 0 && synth.hetero_fraction <= 1,
               "data.hetero_fraction must be in [0,1]");

  config_check(fusion.embed_dim >= 1 && fusion.max_depth >= 1,
               "fusion geometry must be positive");
  config_check(fusion.n_heads >= 1 && fusion.embed_dim % fusion.n_heads == 0,
               "fusion.embed_dim must divide evenly into fusion.n_heads");
  config_check(fusion.tau > 0, "fusion.tau must be positive");
  config_check(fusion.halt_threshold > 0 && fusion.halt_threshold <= 1,
               "fusion.halt_threshold must be in (0,1]");
  config_check(fusion.lambda >= 0, "fusion.lambda must be non-negative");
  config_check(fusion.lr > 0 && fusion.epochs >= 0 && fusion.batch_size >= 2,
               "fusion training settings invalid (batch_size must be >= 2)");

  try {
    quantizer.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("quantizer: ") + e.what());
  }
  config_check(realloc_scope == "group" || realloc_scope == "global",
               "quantizer.realloc_scope must be group or global, got '" +
                   realloc_scope + "'");

  seqmodel.validate();  // already reports ConfigError
  config_check(encoder_init == "pretrained" || encoder_init == "none",
               "seqmodel.encoder_init must be pretrained or none, got '" +
                   encoder_init + "'");

  config_check(eval.batch_users >= 1, "eval.batch_users must be positive");
}

// ---------------------------------------------------------------------------
// Stages, manifest, artifact resolution

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kSynth: return "synth";
    case Stage::kInject: return "inject";
    case Stage::kQuantize: return "quantize";
    case Stage::kPretrain: return "pretrain";
    case Stage::kFinetune: return "finetune";
    case Stage::kEval: return "eval";
  }
  throw ContractError("unreachable stage");
}

Stage first_affected_stage(const std::string& key) {
  const auto dot = key.find('.');
  const std::string section = key.substr(0, dot);
  const std::string leaf = dot == std::string::npos ? "" : key.substr(dot + 1);
  if (section == "seed") return Stage::kInject;  // synth uses data.seed
  if (section == "data") return Stage::kSynth;
  if (section == "fusion") return Stage::kInject;
  if (section == "quantizer") return Stage::kQuantize;
  if (section == "eval") return Stage::kEval;
  if (section == "seqmodel") {
    if (leaf.rfind("finetune_", 0) == 0 || leaf == "encoder_init")
      return Stage::kFinetune;
    return Stage::kPretrain;
  }
  throw ConfigError("cannot map config key '" + key + "' to a pipeline stage");
}

namespace {

// Stage that produces each artifact, for actionable dependency errors.
std::string producer_of(const std::string& name) {
  static const std::map<std::string, const char*> table = {
      {art::kInteractions, "synth"},  {art::kFeatures, "synth"},
      {"item_meta.csv", "synth"},     {art::kEmbeddings, "inject"},
      {art::kDepths, "inject"},       {art::kSids, "quantize"},
      {art::kCodebooks, "quantize"},  {art::kPretrained, "pretrain"},
      {art::kFinetuned, "finetune"},  {art::kMetricsVal, "eval"},
      {art::kMetricsTest, "eval"},
  };
  const auto it = table.find(name);
  return it == table.end() ? "an earlier" : it->second;
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void atomic_write(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".part";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << content;
  }
  fs::rename(tmp, path);
}

}  // namespace

std::vector<ManifestEntry> load_manifest(const std::string& dir) {
  const std::string path = join(dir, "manifest.json");
  if (!fs::exists(path)) return {};
  ordered_json j;
  try {
    j = ordered_json::parse(io::read_all(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path + " is corrupt: " + e.what());
  }
  QREC_CHECK(j.is_array(), "manifest must be a JSON array: ", path);
  std::vector<ManifestEntry> entries;
  for (const auto& e : j) {
    ManifestEntry m;
    m.stage = e.at("stage").get<std::string>();
    m.seed = e.at("seed").get<uint64_t>();
    m.version = e.at("version").get<std::string>();
    m.wall_seconds = e.at("wall_seconds").get<Real>();
    m.config_hash = e.at("config_hash").get<std::string>();
    for (auto it = e.at("inputs").begin(); it != e.at("inputs").end(); ++it)
      m.inputs.emplace_back(it.key(), it.value().get<std::string>());
    for (auto it = e.at("outputs").begin(); it != e.at("outputs").end(); ++it)
      m.outputs.emplace_back(it.key(), it.value().get<std::string>());
    entries.push_back(std::move(m));
  }
  return entries;
}

void append_manifest(const std::string& dir, const ManifestEntry& entry) {
  std::vector<ManifestEntry> entries = load_manifest(dir);
  entries.push_back(entry);
  ordered_json arr = ordered_json::array();
  for (const auto& m : entries) {
    ordered_json e;
    e["stage"] = m.stage;
    e["seed"] = m.seed;
    e["version"] = m.version;
    e["wall_seconds"] = m.wall_seconds;
    e["config_hash"] = m.config_hash;
    ordered_json in = ordered_json::object(), out = ordered_json::object();
    for (const auto& [k, v] : m.inputs) in[k] = v;
    for (const auto& [k, v] : m.outputs) out[k] = v;
    e["inputs"] = in;
    e["outputs"] = out;
    arr.push_back(e);
  }
  atomic_write(join(dir, "manifest.json"), arr.dump(2) + "\n");
}

std::string ArtifactStore::require(const std::string& name) const {
  std::vector<std::string> dirs = {out};
  if (!base.empty() && base != out) dirs.push_back(base);
  for (const auto& dir : dirs) {
    const std::string path = join(dir, name);
    if (!fs::exists(path)) continue;
    const auto entries = load_manifest(dir);
    const std::string* expected = nullptr;
    for (auto it = entries.rbegin(); it != entries.rend() && !expected; ++it)
      for (const auto& [n, h] : it->outputs)
        if (n == name) {
          expected = &h;
          break;
        }
    if (!expected)
      throw DependencyError(path +
                            " exists but no manifest entry records producing "
                            "it; rerun the " +
                            producer_of(name) + " stage");
    const std::string actual = to_hex(hash_file(path));
    if (actual != *expected)
      throw DependencyError(path + " does not match its manifest hash (file " +
                            actual + ", manifest " + *expected + "); rerun the " +
                            producer_of(name) + " stage");
    return path;
  }
  throw DependencyError("missing artifact " + name + ": run the " +
                        producer_of(name) + " stage first");
}

namespace {

// Shared per-stage bookkeeping: input verification, .part output collection,
// and the commit that renames everything, records hashes, writes the resolved
// config, and appends the manifest entry. A throw before commit() leaves only
// .part files behind.
class StageRun {
 public:
  StageRun(const RunConfig& cfg, Stage stage, std::string base_dir)
      : cfg_(cfg), store_{cfg.out_dir, std::move(base_dir)},
        start_(std::chrono::steady_clock::now()) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    entry_.stage = stage_name(stage);
    entry_.seed = cfg.seed;
    entry_.version = kVersion;
    entry_.config_hash = to_hex(config_hash(cfg));
  }

  std::string in(const std::string& name) {
    const std::string path = store_.require(name);
    entry_.inputs.emplace_back(name, to_hex(hash_file(path)));
    return path;
  }

  // Registers an output and returns the .part path to write to.
  std::string out(const std::string& name) {
    renames_.emplace_back(join(cfg_.out_dir, name + ".part"),
                          join(cfg_.out_dir, name));
    names_.push_back(name);
    return renames_.back().first;
  }

  // The .meta sidecar a checkpoint writer puts next to its .part file.
  void meta_sidecar(const std::string& ckpt_name) {
    renames_.emplace_back(join(cfg_.out_dir, ckpt_name + ".part.meta"),
                          join(cfg_.out_dir, ckpt_name + ".meta"));
    names_.push_back(ckpt_name + ".meta");
  }

  void commit() {
    for (const auto& [from, to] : renames_) {
      if (!fs::exists(from)) throw IoError("stage did not produce " + from);
      fs::rename(from, to);
    }
    for (const auto& name : names_)
      entry_.outputs.emplace_back(name,
                                  to_hex(hash_file(join(cfg_.out_dir, name))));
    entry_.wall_seconds =
        std::chrono::duration<Real>(std::chrono::steady_clock::now() - start_)
            .count();
    atomic_write(join(cfg_.out_dir, "config.json"), config_to_json(cfg_));
    append_manifest(cfg_.out_dir, entry_);
    log_info(entry_.stage, " finished in ", entry_.wall_seconds, "s");
  }

 private:
  const RunConfig& cfg_;
  ArtifactStore store_;
  ManifestEntry entry_;
  std::vector<std::pair<std::string, std::string>> renames_;
  std::vector<std::string> names_;
  std::chrono::steady_clock::time_point start_;
};

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c == '\n' ? ' ' : c;
  }
  return q + "\"";
}

std::string fmt_metric(Real x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", double(x));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage commands

void cmd_synth(const RunConfig& cfg) {
  StageRun run(cfg, Stage::kSynth, "");
  const data::SynthData sd = data::synth_generate(cfg.synth);
  data::save_interactions(sd.interactions, run.out(art::kInteractions));
  data::write_feature_file(sd.features, run.out(art::kFeatures), /*binary=*/false);
  {
    std::ofstream meta(run.out("item_meta.csv"));
    if (!meta) throw IoError("cannot write item metadata");
    meta << "item_id,concept,noise_sigma\n";
    for (size_t i = 0; i < sd.interactions.item_universe.size(); ++i)
      meta << sd.interactions.item_universe[i] << "," << sd.item_concept[i] << ","
           << fmt_metric(sd.item_sigma[i]) << "\n";
  }
  std::cout << "synth: " << sd.interactions.n_users() << " users over "
            << sd.interactions.item_universe.size() << " items\n";
  run.commit();
}

void cmd_inject(const RunConfig& cfg, const std::string& base_dir) {
  StageRun run(cfg, Stage::kInject, base_dir);
  const data::FeatureFile table = data::read_feature_file(run.in(art::kFeatures));
  const data::ItemFeatures feats = data::features_from_table(table);

  Rng rng(mix64(cfg.seed ^ 0x1A17EC7ull));
  fusion::FusionState st =
      fusion::FusionState::init(cfg.fusion, int(feats.item_ids.size()),
                                feats.text_dim, feats.vision_dim,
                                feats.struct_dim, rng);
  const fusion::TrainResult res = fusion::train_injection(st, feats, cfg.seed);
  if (res.diverged) throw TrainingError("injection training diverged");

  data::FeatureFile emb;
  emb.channels = {{"h", cfg.fusion.embed_dim}};
  emb.item_ids = feats.item_ids;
  for (const auto& h : res.h_table) emb.values.push_back({h});
  data::write_feature_file(emb, run.out(art::kEmbeddings), /*binary=*/true);

  {
    std::ofstream depths(run.out(art::kDepths));
    if (!depths) throw IoError("cannot write gate depths");
    depths << "item_id,depth\n";
    QREC_CHECK(res.trace.depth_used.size() == feats.item_ids.size(),
               "gate trace does not cover the catalog");
    for (size_t i = 0; i < feats.item_ids.size(); ++i)
      depths << feats.item_ids[i] << "," << res.trace.depth_used[i] << "\n";
  }

  std::string hist;
  for (const auto& [d, n] : res.trace.depth_histogram())
    hist += " " + std::to_string(d) + ":" + std::to_string(n);
  std::cout << "inject: loss " << fmt_metric(res.epoch_losses.back())
            << ", depth histogram" << hist << "\n";
  run.commit();
}

namespace {

// Reads the fused item table back out of the inject artifact.
void load_embeddings(const std::string& path, std::vector<std::string>& ids,
                     std::vector<std::vector<Real>>& rows) {
  const data::FeatureFile table = data::read_feature_file(path);
  const int h = table.channel_index("h");
  QREC_CHECK(h >= 0, "embeddings table lacks channel h: ", path);
  ids = table.item_ids;
  for (const auto& item : table.values) {
    QREC_CHECK(!item[size_t(h)].empty(), "missing embedding row in ", path);
    rows.push_back(item[size_t(h)]);
  }
}

}  // namespace

void cmd_quantize(const RunConfig& cfg, const std::string& base_dir) {
  StageRun run(cfg, Stage::kQuantize, base_dir);
  std::vector<std::string> ids;
  std::vector<std::vector<Real>> inputs;
  load_embeddings(run.in(art::kEmbeddings), ids, inputs);

  Rng rng(mix64(cfg.seed ^ 0x9A47Dull));
  quant::RqVaeState st =
      quant::RqVaeState::init(cfg.quantizer, int(inputs[0].size()), rng);
  const quant::QuantTrainReport rep = quant::train_rqvae(st, inputs, cfg.seed);

  quant::CatalogCodes codes = quant::quantize_catalog(st, inputs, ids);
  const auto groups = quant::detect_collisions(codes.ids);
  size_t colliding = 0;
  for (const auto& g : groups) colliding += g.size();
  const int moved = quant::reallocate(codes, st.codebooks,
                                      cfg.realloc_scope == "global"
                                          ? quant::ReallocScope::kGlobal
                                          : quant::ReallocScope::kGroup);
  QREC_CHECK(quant::detect_collisions(codes.ids).empty(),
             "reallocation left duplicate codes");
  std::cout << "collisions: " << colliding << " \xE2\x86\x92 0\n";
  log_info("quantize: recon ", rep.final_recon, ", ", moved, " items moved, ",
           rep.reseeded, " codewords reseeded");

  quant::export_semantic_ids(run.out(art::kSids), codes.ids);
  quant::save_codebooks(run.out(art::kCodebooks), st, config_hash(cfg));
  run.commit();
}

namespace {

struct Corpus {
  data::InteractionDataset ds;
  seq::SidTable sids;
};

Corpus load_corpus(StageRun& run, const RunConfig& cfg) {
  Corpus c;
  c.ds = data::load_interactions(run.in(art::kInteractions));
  const auto ids = quant::load_semantic_ids(
      run.in(art::kSids), cfg.quantizer.levels, cfg.quantizer.codebook_size);
  c.sids = seq::SidTable::from_ids(ids, cfg.quantizer.levels,
                                   cfg.quantizer.codebook_size);
  return c;
}

seq::TokenVocab vocab_of(const RunConfig& cfg) {
  return seq::TokenVocab{cfg.quantizer.levels, cfg.quantizer.codebook_size};
}

// Appends the run-config fingerprint to a checkpoint's .part sidecar so every
// persisted model is traceable to the exact configuration that trained it.
void stamp_meta(const std::string& part_path, const RunConfig& cfg) {
  std::ofstream meta(part_path + ".meta", std::ios::app);
  if (!meta) throw IoError("cannot stamp " + part_path + ".meta");
  meta << "config_hash " << to_hex(config_hash(cfg)) << "\n";
}

}  // namespace

void cmd_pretrain(const RunConfig& cfg, const std::string& base_dir) {
  StageRun run(cfg, Stage::kPretrain, base_dir);
  Corpus c = load_corpus(run, cfg);

  Rng rng(mix64(cfg.seed ^ 0x53D9E1ull));
  seq::EncoderState st = seq::EncoderState::init(cfg.seqmodel, vocab_of(cfg), rng);
  seq::TrainOptions topt;
  topt.log_csv = run.out("pretrain_loss.csv");
  const seq::TrainReport rep = seq::pretrain(st, {&c.ds}, c.sids, cfg.seed, topt);
  if (rep.diverged) throw TrainingError("pretraining diverged");

  const std::string part = run.out(art::kPretrained);
  seq::save_encoder(part, st, nullptr, int(rep.epoch_losses.size()));
  stamp_meta(part, cfg);
  run.meta_sidecar(art::kPretrained);
  std::cout << "pretrain: loss " << fmt_metric(rep.epoch_losses.front()) << " -> "
            << fmt_metric(rep.epoch_losses.back()) << " over "
            << rep.epoch_losses.size() << " epochs\n";
  run.commit();
}

void cmd_finetune(const RunConfig& cfg, const std::string& base_dir) {
  StageRun run(cfg, Stage::kFinetune, base_dir);
  Corpus c = load_corpus(run, cfg);

  Rng rng(mix64(cfg.seed ^ 0xF17E7EULL));
  seq::EncoderState st = seq::EncoderState::init(cfg.seqmodel, vocab_of(cfg), rng);
  if (cfg.encoder_init == "pretrained")
    seq::load_encoder(run.in(art::kPretrained), st);

  seq::TrainOptions topt;
  topt.log_csv = run.out("finetune_loss.csv");
  const seq::TrainReport rep =
      seq::finetune(st, c.ds, c.sids, mix64(cfg.seed ^ 0xF1DE5EEDull), topt);
  if (rep.diverged) throw TrainingError("fine-tuning diverged");

  const std::string part = run.out(art::kFinetuned);
  seq::save_encoder(part, st, nullptr, int(rep.epoch_losses.size()));
  stamp_meta(part, cfg);
  run.meta_sidecar(art::kFinetuned);
  std::cout << "finetune: loss "
            << (rep.epoch_losses.empty()
                    ? std::string("n/a")
                    : fmt_metric(rep.epoch_losses.front()) + " -> " +
                          fmt_metric(rep.epoch_losses.back()))
            << " (init " << cfg.encoder_init << ")\n";
  run.commit();
}

eval::MetricsReport cmd_eval(const RunConfig& cfg, const std::string& base_dir) {
  StageRun run(cfg, Stage::kEval, base_dir);
  Corpus c = load_corpus(run, cfg);

  Rng rng(1);
  seq::EncoderState st = seq::EncoderState::init(cfg.seqmodel, vocab_of(cfg), rng);
  seq::load_encoder(run.in(art::kFinetuned), st);

  eval::MetricsReport reports[2];
  const eval::EvalPhase phases[2] = {eval::EvalPhase::kVal, eval::EvalPhase::kTest};
  const char* rank_files[2] = {"ranks_val.csv", "ranks_test.csv"};
  const char* metric_files[2] = {art::kMetricsVal, art::kMetricsTest};
  for (int i = 0; i < 2; ++i) {
    eval::EvalOptions opts;
    opts.batch_users = cfg.eval.batch_users;
    if (cfg.eval.per_user_csv) opts.per_user_csv = run.out(rank_files[i]);
    reports[i] = eval::evaluate(c.ds, st, c.sids, phases[i], opts);
    std::cout << reports[i].to_text();
    std::ofstream out(run.out(metric_files[i]), std::ios::binary);
    if (!out) throw IoError("cannot write metrics");
    out << reports[i].to_json();
  }
  run.commit();
  return reports[1];
}

size_t cmd_export_tokens(const RunConfig& cfg, std::string dest,
                         const std::string& base_dir) {
  cfg.validate();
  ArtifactStore store{cfg.out_dir, base_dir};
  const auto ids = quant::load_semantic_ids(store.require(art::kSids),
                                            cfg.quantizer.levels,
                                            cfg.quantizer.codebook_size);
  if (dest.empty()) dest = join(cfg.out_dir, art::kTokens);
  if (!fs::path(dest).parent_path().empty())
    fs::create_directories(fs::path(dest).parent_path());
  quant::export_semantic_ids(dest + ".part", ids);
  fs::rename(dest + ".part", dest);

  ManifestEntry entry;
  entry.stage = "export_tokens";
  entry.seed = cfg.seed;
  entry.version = kVersion;
  entry.config_hash = to_hex(config_hash(cfg));
  entry.inputs.emplace_back(art::kSids,
                            to_hex(hash_file(store.require(art::kSids))));
  entry.outputs.emplace_back(fs::path(dest).filename().string(),
                             to_hex(hash_file(dest)));
  append_manifest(cfg.out_dir, entry);
  std::cout << "exported " << ids.size() << " token strings to " << dest << "\n";
  return ids.size();
}

void cmd_pipeline(const RunConfig& cfg) {
  cmd_synth(cfg);
  cmd_inject(cfg);
  cmd_quantize(cfg);
  cmd_pretrain(cfg);
  cmd_finetune(cfg);
  cmd_eval(cfg);
}

// ---------------------------------------------------------------------------
// Sweeps

SweepAxis parse_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  config_check(eq != std::string::npos && eq > 0,
               "grid spec must look like key=v1,v2 — got '" + spec + "'");
  SweepAxis axis;
  axis.key = spec.substr(0, eq);
  std::string rest = spec.substr(eq + 1);
  size_t pos = 0;
  while (pos <= rest.size()) {
    const size_t comma = rest.find(',', pos);
    const std::string v = rest.substr(
        pos, comma == std::string::npos ? std::string::npos : comma - pos);
    config_check(!v.empty(), "empty value in grid spec '" + spec + "'");
    axis.values.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  first_affected_stage(axis.key);  // validates the key maps to a stage
  return axis;
}

namespace {

// Resolves "section.leaf" inside the canonical JSON form; unknown segments
// and section-valued keys are config errors.
ordered_json* walk_key(ordered_json& j, const std::string& key) {
  ordered_json* node = &j;
  size_t pos = 0;
  while (true) {
    const size_t dot = key.find('.', pos);
    const std::string part =
        key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    config_check(node->is_object() && node->contains(part),
                 "unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  config_check(!node->is_object(), "config key '" + key + "' is a section");
  return node;
}

}  // namespace

RunConfig apply_override(const RunConfig& cfg, const std::string& key,
                         const std::string& value) {
  ordered_json j = ordered_json::parse(config_to_json(cfg));
  ordered_json* node = walk_key(j, key);
  ordered_json parsed;
  try {
    parsed = ordered_json::parse(value);
    if (parsed.is_object() || parsed.is_array())
      parsed = ordered_json(value);  // treat structured text as a plain string
  } catch (const nlohmann::json::parse_error&) {
    parsed = ordered_json(value);
  }
  *node = parsed;
  return config_from_json(j.dump());
}

namespace {

void run_stage(Stage s, const RunConfig& cfg, const std::string& base) {
  switch (s) {
    case Stage::kSynth: cmd_synth(cfg); return;
    case Stage::kInject: cmd_inject(cfg, base); return;
    case Stage::kQuantize: cmd_quantize(cfg, base); return;
    case Stage::kPretrain: cmd_pretrain(cfg, base); return;
    case Stage::kFinetune: cmd_finetune(cfg, base); return;
    case Stage::kEval: cmd_eval(cfg, base); return;
  }
}

const char* stage_output(Stage s) {
  switch (s) {
    case Stage::kSynth: return art::kInteractions;
    case Stage::kInject: return art::kEmbeddings;
    case Stage::kQuantize: return art::kSids;
    case Stage::kPretrain: return art::kPretrained;
    case Stage::kFinetune: return art::kFinetuned;
    case Stage::kEval: return art::kMetricsTest;
  }
  throw ContractError("unreachable stage");
}

std::string one_line(const std::string& s) {
  std::string t = s;
  for (char& c : t)
    if (c == '\n' || c == '\r') c = ' ';
  return t;
}

}  // namespace

std::string cmd_sweep(const RunConfig& cfg, const std::vector<SweepAxis>& grid) {
  cfg.validate();
  config_check(!grid.empty(), "sweep needs at least one --grid axis");
  {
    // keys must exist before any work; bad values stay per-cell failures
    ordered_json probe = ordered_json::parse(config_to_json(cfg));
    for (const auto& axis : grid) {
      config_check(!axis.values.empty(), "grid axis " + axis.key + " has no values");
      walk_key(probe, axis.key);
    }
  }

  Stage first = Stage::kEval;
  for (const auto& axis : grid)
    first = std::min(first, first_affected_stage(axis.key));

  // Base artifacts for everything upstream of the sweep, built on demand.
  ArtifactStore base_store{cfg.out_dir, ""};
  for (int s = 0; s < int(first); ++s) {
    const Stage stage = Stage(s);
    try {
      base_store.require(stage_output(stage));
    } catch (const DependencyError&) {
      log_info("sweep: building base ", stage_name(stage), " stage");
      run_stage(stage, cfg, "");
    }
  }

  // Cross product, first axis slowest.
  size_t n_cells = 1;
  for (const auto& axis : grid) n_cells *= axis.values.size();
  config_check(n_cells >= 1, "empty sweep grid");

  std::string csv = "cell";
  for (const auto& axis : grid) csv += "," + csv_field(axis.key);
  csv += ",status,hr1,hr5,hr10,ndcg5,ndcg10,error\n";

  for (size_t cell = 0; cell < n_cells; ++cell) {
    std::vector<std::string> values;
    size_t rem = cell;
    for (size_t a = grid.size(); a-- > 0;) {
      values.insert(values.begin(), grid[a].values[rem % grid[a].values.size()]);
      rem /= grid[a].values.size();
    }

    char cell_name[32];
    std::snprintf(cell_name, sizeof cell_name, "cell_%03zu", cell);
    std::string row = cell_name;
    for (const auto& v : values) row += "," + csv_field(v);
    try {
      RunConfig c = cfg;
      for (size_t a = 0; a < grid.size(); ++a)
        c = apply_override(c, grid[a].key, values[a]);
      c.out_dir = join(join(cfg.out_dir, "sweep"), cell_name);
      log_info("sweep: ", cell_name, " -> ", c.out_dir);
      eval::MetricsReport rep;
      for (int s = int(first); s <= int(Stage::kEval); ++s) {
        if (Stage(s) == Stage::kEval)
          rep = cmd_eval(c, cfg.out_dir);
        else
          run_stage(Stage(s), c, cfg.out_dir);
      }
      row += ",ok," + fmt_metric(rep.model.hr1) + "," + fmt_metric(rep.model.hr5) +
             "," + fmt_metric(rep.model.hr10) + "," + fmt_metric(rep.model.ndcg5) +
             "," + fmt_metric(rep.model.ndcg10) + ",";
    } catch (const std::exception& e) {
      log_warn("sweep: ", cell_name, " failed: ", e.what());
      row += ",failed,,,,,," + csv_field(one_line(e.what()));
    }
    csv += row + "\n";
  }

  const std::string csv_path = join(cfg.out_dir, "sweep.csv");
  atomic_write(csv_path, csv);

  ManifestEntry entry;
  entry.stage = "sweep";
  entry.seed = cfg.seed;
  entry.version = kVersion;
  entry.config_hash = to_hex(config_hash(cfg));
  entry.outputs.emplace_back("sweep.csv", to_hex(hash_file(csv_path)));
  append_manifest(cfg.out_dir, entry);
  std::cout << "sweep: " << n_cells << " cells -> " << csv_path << "\n";
  return csv_path;
}

}  // namespace qrec::pipe
