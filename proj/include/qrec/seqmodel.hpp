// BERT-style bidirectional encoder over flattened semantic-token sequences.
//
// Items are expanded into K codebook tokens each; sequences keep the most
// recent max_items items and are left-padded so the newest item always sits
// at the same positions. Pretraining masks whole items with a mix of span /
// tail / multi-region strategies; fine-tuning uses plain uniform whole-item
// masking. The output projection is weight-tied to the token embedding.
#pragma once

#include <map>
#include <utility>

#include "qrec/data.hpp"
#include "qrec/optim.hpp"
#include "qrec/quantizer.hpp"
#include "qrec/tensor.hpp"

namespace qrec::seq {

// Vocabulary over K*M semantic tokens plus PAD / MASK specials.
// Level k (0-based), index i maps to token k*M + i; specials sit at the end.
struct TokenVocab {
  int levels = 4;
  int codebook_size = 256;

  int size() const { return levels * codebook_size + 2; }
  int pad() const { return levels * codebook_size; }
  int mask() const { return levels * codebook_size + 1; }
  bool is_semantic(int tok) const { return tok >= 0 && tok < levels * codebook_size; }
  int token(int level, int index) const;
  std::pair<int, int> split(int tok) const;  // token -> (level, index)
};

enum class MaskStrategy { kSpan, kTail, kMultiRegion, kUniform, kCombined };
const char* strategy_name(MaskStrategy s);

// Masking family used during pretraining: the full span/tail/multi-region
// mix, or plain uniform masking (the "MLM-only" ablation arm).
enum class StrategyMode { kMultiMask, kMlm };

// Reading of the per-strategy numbers: mask ratios with uniform strategy
// choice (default), or selection weights with a shared mask ratio.
enum class MixMode { kRatios, kWeights };

enum class TrainPhase { kPretrain, kFinetune };

struct SeqModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  Real dropout = 0.2;
  int max_items = 50;
  int hidden_dim = 64;  // FFN expands 4x internally

  Real span_ratio = 0.3;
  Real multi_region_ratio = 0.15;
  Real tail_ratio = 0.1;
  Real finetune_ratio = 0.3;  // also the MLM-arm pretraining ratio
  StrategyMode strategy_mode = StrategyMode::kMultiMask;
  MixMode mix_mode = MixMode::kRatios;
  Real mix_common_ratio = 0.3;  // every strategy's ratio under kWeights
  bool simultaneous = false;    // apply all three strategies to each sequence

  Real pretrain_lr = 5e-4;
  int pretrain_batch = 512;
  int pretrain_epochs = 5;
  Real finetune_lr = 1e-4;
  int finetune_batch = 256;
  int finetune_epochs = 10;

  void validate() const;  // throws ConfigError
};

// item_id -> per-level codebook indices; the bridge from quantizer output to
// token sequences.
struct SidTable {
  int levels = 0;
  int codebook_size = 0;
  std::map<std::string, std::vector<int>> codes;

  static SidTable from_ids(const std::vector<quant::SemanticId>& ids, int levels,
                           int codebook_size);
  // throws ContractError naming the item when absent
  const std::vector<int>& at(const std::string& item_id) const;
};

// Most recent max_items items widened to K tokens each, left-padded with PAD
// to exactly max_items*K tokens.
std::vector<int> tokenize_sequence(const std::vector<std::string>& items,
                                   const SidTable& sids, const TokenVocab& vocab,
                                   int max_items);

// A masking decision over one tokenized sequence. Positions are sorted token
// indices and always cover whole items (aligned K-blocks); original_tokens
// holds the pre-mask values in the same order.
struct MaskPlan {
  MaskStrategy strategy = MaskStrategy::kSpan;
  std::vector<int> positions;
  std::vector<int> original_tokens;
};

// One contiguous block of round(ratio*n_items) items (min 1), uniform start.
MaskPlan span_mask(const std::vector<int>& tokens, const TokenVocab& vocab,
                   Real ratio, Rng& rng);
// The last round(ratio*n_items) items (min 1) - next-item flavored.
MaskPlan tail_mask(const std::vector<int>& tokens, const TokenVocab& vocab,
                   Real ratio, Rng& rng);
// round(ratio*n_items) items (min 2 when they fit) split into 2-3 disjoint,
// non-adjacent regions; sequences under 4 items fall back to span (logged).
MaskPlan multi_region_mask(const std::vector<int>& tokens, const TokenVocab& vocab,
                           Real ratio, Rng& rng);
// round(ratio*n_items) distinct items (min 1), any placement.
MaskPlan uniform_mask(const std::vector<int>& tokens, const TokenVocab& vocab,
                      Real ratio, Rng& rng);

// Pretrain: uniform choice among {span, multi_region, tail} at their ratios
// (kRatios) or a weighted choice with a shared ratio (kWeights); the kMlm arm
// and the finetune phase always return (kUniform, finetune_ratio). With
// cfg.simultaneous the pretrain answer is (kCombined, 0) and build_mask_plan
// unions all three strategies.
std::pair<MaskStrategy, Real> sample_strategy(const SeqModelConfig& cfg,
                                              TrainPhase phase, Rng& rng);
MaskPlan build_mask_plan(const SeqModelConfig& cfg, const std::vector<int>& tokens,
                         const TokenVocab& vocab, MaskStrategy strategy, Real ratio,
                         Rng& rng);
// Copy of tokens with MASK substituted at plan positions.
std::vector<int> apply_mask(const std::vector<int>& tokens, const MaskPlan& plan,
                            const TokenVocab& vocab);

struct EncoderLayer {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;  // position-wise FFN
};

struct EncoderState {
  SeqModelConfig cfg;
  TokenVocab vocab;
  Tensor tok_emb;   // [vocab, hidden]; rows double as output-projection columns
  Tensor pos_emb;   // [max_items*levels, hidden]
  Tensor out_bias;  // [1, vocab]
  std::vector<EncoderLayer> layers;

  int full_len() const { return cfg.max_items * vocab.levels; }
  static EncoderState init(const SeqModelConfig& cfg, const TokenVocab& vocab,
                           Rng& rng);
  std::vector<Tensor> params() const;
  std::vector<std::vector<Real>> snapshot() const;
  void restore(const std::vector<std::vector<Real>>& snap);
  // Hash of every shape-determining field (vocab geometry, hidden, layers,
  // heads, max_items). Ratios / lr / dropout are deliberately excluded so a
  // pretrained checkpoint loads under fine-tune settings.
  uint64_t arch_fingerprint() const;
};

// Batched encoder forward. rows are equal-length left-padded token rows; a
// common all-PAD prefix may be trimmed off by the caller, position ids stay
// right-aligned (column j of a width-T batch is position full_len()-T+j).
// PAD columns are key-masked in attention and produce zero hidden rows.
// Returns logits [B*T, vocab].
Tensor encode_batch(Tape& t, const EncoderState& st,
                    const std::vector<std::vector<int>>& rows);

// Single-sequence convenience wrapper: logits [full_len, vocab].
Tensor mlm_forward(Tape& t, const EncoderState& st, const std::vector<int>& tokens);

// Mean over masked positions of -log softmax(logits_row)[original token].
Tensor mask_loss(Tape& t, const Tensor& logits, const MaskPlan& plan);
// Batched variant: logits [B*T, vocab], one plan per row with positions in
// [0, seq_len).
Tensor mask_loss_batch(Tape& t, const Tensor& logits,
                       const std::vector<MaskPlan>& plans, int seq_len);

// Adam moments captured alongside a checkpoint so training can resume
// bit-for-bit at an epoch boundary.
struct OptimSnapshot {
  int64_t step_count = 0;
  std::vector<std::vector<Real>> m1, m2;
  bool empty() const { return m1.empty() && m2.empty(); }
};

struct TrainOptions {
  std::string ckpt_dir;  // per-epoch checkpoints + f32 rounding when set
  std::string log_csv;   // epoch,loss,lr,wall_seconds rows when set
  int start_epoch = 0;   // resume point; caller loads state + moments first
  int epochs_override = -1;  // <0 uses the phase default from the config
  OptimSnapshot resume;
};

struct TrainReport {
  std::vector<Real> epoch_losses;  // mean masked CE per epoch
  bool diverged = false;
};

// Masked-token training over the leave-one-out train prefixes of every
// corpus (the last two interactions per user are always held out, so any
// dataset can safely feed any stage). Deterministic per seed; per-batch
// strategy sampling; batches are length-bucketed and column-trimmed.
TrainReport train_encoder(EncoderState& st, TrainPhase phase,
                          const std::vector<const data::InteractionDataset*>& corpora,
                          const SidTable& sids, uint64_t seed,
                          const TrainOptions& opts = {});

TrainReport pretrain(EncoderState& st,
                     const std::vector<const data::InteractionDataset*>& corpora,
                     const SidTable& sids, uint64_t seed,
                     const TrainOptions& opts = {});
TrainReport finetune(EncoderState& st, const data::InteractionDataset& ds,
                     const SidTable& sids, uint64_t seed,
                     const TrainOptions& opts = {});

// Checkpoint: text header (arch hash, geometry, epoch / step counters)
// followed by little-endian f32 parameter blocks, optionally Adam moments,
// plus a plain-text .meta sidecar. Loading requires a state initialized with
// a matching architecture; mismatches throw (ContractError for geometry,
// ConfigError for hash).
void save_encoder(const std::string& path, const EncoderState& st,
                  const OptimSnapshot* opt, int epochs_done);
struct CheckpointInfo {
  int epochs_done = 0;
  OptimSnapshot opt;
};
CheckpointInfo load_encoder(const std::string& path, EncoderState& st);

}  // namespace qrec::seq
