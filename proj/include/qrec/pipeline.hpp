// Pipeline orchestration: one JSON run configuration, file-based stage
// commands (synth -> inject -> quantize -> pretrain -> finetune -> eval), an
// append-only manifest with artifact hashes, parameter sweeps, and token
// export. Stages communicate only through files in the run directory.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "qrec/data.hpp"
#include "qrec/eval.hpp"
#include "qrec/fusion.hpp"
#include "qrec/quantizer.hpp"
#include "qrec/seqmodel.hpp"

namespace qrec::pipe {

inline constexpr const char* kVersion = "0.3.0";

struct EvalConfig {
  int batch_users = 256;
  bool per_user_csv = false;
};

struct RunConfig {
  uint64_t seed = 7;                     // training / stage seed
  std::string out_dir = "runs/default";
  data::SynthConfig synth;               // "data" section; has its own seed
  fusion::FusionConfig fusion;
  quant::QuantizerConfig quantizer;
  std::string realloc_scope = "group";   // or "global"
  seq::SeqModelConfig seqmodel;
  std::string encoder_init = "pretrained";  // or "none": fine-tune from scratch
  EvalConfig eval;

  void validate() const;  // throws ConfigError before any stage work
};

// JSON codec. Parsing rejects unknown keys anywhere (naming the full path)
// and applies defaults for missing ones; serialization emits every field in
// a fixed order — the canonical form that is hashed and written next to the
// outputs of each stage.
RunConfig config_from_json(const std::string& json_text);
RunConfig load_config(const std::string& path);
std::string config_to_json(const RunConfig& cfg);
uint64_t config_hash(const RunConfig& cfg);

// Pipeline order. A config key maps to the first stage whose outputs depend
// on it; sweeps restart from there and reuse everything upstream.
enum class Stage {
  kSynth = 0,
  kInject,
  kQuantize,
  kPretrain,
  kFinetune,
  kEval,
};
const char* stage_name(Stage s);
Stage first_affected_stage(const std::string& config_key);  // throws ConfigError

// Canonical artifact file names inside a run directory.
namespace art {
inline constexpr const char* kInteractions = "interactions.txt";
inline constexpr const char* kFeatures = "features.tsv";
inline constexpr const char* kEmbeddings = "embeddings.tsv";
inline constexpr const char* kDepths = "gate_depths.csv";
inline constexpr const char* kSids = "semantic_ids.tsv";
inline constexpr const char* kCodebooks = "codebooks.ckpt";
inline constexpr const char* kPretrained = "encoder_pretrained.ckpt";
inline constexpr const char* kFinetuned = "encoder_finetuned.ckpt";
inline constexpr const char* kMetricsVal = "metrics_val.json";
inline constexpr const char* kMetricsTest = "metrics_test.json";
inline constexpr const char* kTokens = "tokens.tsv";
}  // namespace art

// manifest.json: append-only list of completed stages with hashed inputs and
// outputs. Later stages look their inputs up here and refuse to run on a
// hash mismatch or an unrecorded artifact.
struct ManifestEntry {
  std::string stage;
  uint64_t seed = 0;
  std::string version;
  Real wall_seconds = 0;
  std::string config_hash;                                   // hex
  std::vector<std::pair<std::string, std::string>> inputs;   // file name -> hex hash
  std::vector<std::pair<std::string, std::string>> outputs;  // file name -> hex hash
};
std::vector<ManifestEntry> load_manifest(const std::string& dir);
void append_manifest(const std::string& dir, const ManifestEntry& entry);

// Input resolution for a run directory with an optional read-only upstream
// directory (sweep cells reuse the base run's artifacts). require() returns
// the path of a verified artifact or throws DependencyError naming it and
// the stage that should have produced it.
struct ArtifactStore {
  std::string out;
  std::string base;  // "" = no fallback

  std::string require(const std::string& name) const;
};

// Each command validates the config, verifies its inputs, writes outputs via
// .part files renamed only on success (a crashed stage leaves quarantined
// .part debris and no manifest entry), appends one manifest entry, and
// (re)writes the resolved config.json. `base_dir` is the optional upstream
// artifact directory. All throw on failure; the CLI maps exceptions to exit
// codes.
void cmd_synth(const RunConfig& cfg);
void cmd_inject(const RunConfig& cfg, const std::string& base_dir = "");
void cmd_quantize(const RunConfig& cfg, const std::string& base_dir = "");
void cmd_pretrain(const RunConfig& cfg, const std::string& base_dir = "");
void cmd_finetune(const RunConfig& cfg, const std::string& base_dir = "");
eval::MetricsReport cmd_eval(const RunConfig& cfg, const std::string& base_dir = "");
// Re-exports the semantic-id table to `dest` (default <out>/tokens.tsv) and
// returns the number of lines written.
size_t cmd_export_tokens(const RunConfig& cfg, std::string dest = "",
                         const std::string& base_dir = "");
// All six stages in order.
void cmd_pipeline(const RunConfig& cfg);

// One swept parameter: a config key plus the values it takes.
struct SweepAxis {
  std::string key;
  std::vector<std::string> values;  // parsed as JSON scalars, strings as-is
};
SweepAxis parse_axis(const std::string& spec);  // "seqmodel.n_layers=1,2,3"

// Cross-product sweep. Reuses the base run's artifacts upstream of each
// cell's first affected stage (running base stages on demand), executes the
// cells sequentially in grid order under <out>/sweep/cell_<i>, and writes
// <out>/sweep.csv with one row per cell: cell id, overridden keys, status
// (ok or failed), and the test-phase metrics. A failing cell is recorded and
// the sweep continues. Returns the CSV path.
std::string cmd_sweep(const RunConfig& cfg, const std::vector<SweepAxis>& grid);

// Applies "key=value" to the canonical JSON form and re-parses, so overrides
// get exactly the same validation as a config file.
RunConfig apply_override(const RunConfig& cfg, const std::string& key,
                         const std::string& value);

}  // namespace qrec::pipe
