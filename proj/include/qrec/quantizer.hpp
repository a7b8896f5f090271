// Residual-quantized autoencoder over item embeddings: an encoder/decoder MLP
// pair with K levels of nearest-codeword residual quantization, trained with
// reconstruction + commitment losses through a straight-through estimator.
// Produces per-item semantic IDs with collision reallocation and a
// "<a_2><b_3><c_1><d_6>"-style token serialization.
#pragma once

#include <string>
#include <vector>

#include "qrec/data.hpp"
#include "qrec/optim.hpp"
#include "qrec/tensor.hpp"

namespace qrec::quant {

struct QuantizerConfig {
  int levels = 4;          // K
  int codebook_size = 256; // M_c
  int code_dim = 32;
  Real beta = 0.25;        // commitment weight
  Real lr = 1e-3;
  int batch_size = 1024;
  int epochs = 20;
  int hidden_dim = 64;     // encoder/decoder MLP hidden width

  void validate() const;
};

struct Codebook {
  int level = 1;   // 1-based
  char letter = 'a';
  Tensor codewords;              // [M_c, code_dim], trainable
  std::vector<int64_t> usage;    // per codeword, maintained by callers
};

struct SemanticId {
  std::string item_id;
  std::vector<int> indices;  // one per level, each in [0, M_c)
};

// One item pushed through the codebook stack (value-level, no gradients).
struct QuantizeResult {
  std::vector<int> indices;                  // K
  std::vector<std::vector<Real>> codewords;  // K selected codewords
  std::vector<std::vector<Real>> residuals;  // K+1 stages, residuals[0] = z
};

struct RqVaeState {
  QuantizerConfig cfg;
  int in_dim = 0;
  Tensor enc_w1, enc_b1, enc_w2, enc_b2;  // in_dim -> hidden -> code_dim
  Tensor dec_w1, dec_b1, dec_w2, dec_b2;  // code_dim -> hidden -> in_dim
  std::vector<Codebook> codebooks;
  bool codebooks_ready = false;

  static RqVaeState init(const QuantizerConfig& cfg, int in_dim, Rng& rng);
  std::vector<Tensor> params() const;
  Tensor encode(Tape& t, const Tensor& x) const;
  Tensor decode(Tape& t, const Tensor& z) const;
};

// r0 = z; per level pick the nearest codeword by squared L2 (ties -> lowest
// index) and subtract it. The telescoping identity z = sum(codewords) +
// residuals.back() holds exactly up to rounding.
QuantizeResult quantize(const std::vector<Real>& z,
                        const std::vector<Codebook>& codebooks);

// Sum of squared differences.
Real recon_loss(const std::vector<Real>& h, const std::vector<Real>& h_hat);

// Value of sum_k(|sg[r^(k-1)] - e_k|^2 + beta |r^(k-1) - sg[e_k]|^2); the
// stop-gradients only matter for the training graph, so the value is
// (1 + beta) * sum_k |r^(k-1) - e_k|^2.
Real rq_loss(const QuantizeResult& qr, Real beta);

// Builds the full training loss for a batch (mean over rows):
//   recon(x, dec(z + sg[zq - z])) + sum_k(codebook_k + beta * commit_k).
// The straight-through term routes decoder gradients into the encoder;
// codebooks learn only from their own term. Per-item level indices are
// written to *indices_out (shape [B][K]) when non-null.
Tensor rqvae_loss(Tape& t, const RqVaeState& st, const Tensor& x,
                  std::vector<std::vector<int>>* indices_out = nullptr,
                  Tensor* recon_out = nullptr);

// k-means++ seeding of every level from the current encoder outputs (level k
// is seeded from the residuals left by levels < k). Sets codebooks_ready.
void init_codebooks(RqVaeState& st, const std::vector<std::vector<Real>>& inputs,
                    uint64_t seed);

struct QuantTrainReport {
  std::vector<Real> epoch_losses;  // mean total loss per epoch
  Real final_recon = 0;            // mean reconstruction loss, final pass
  int reseeded = 0;                // dead codewords restarted
};

// Full training run: codebook init (unless already ready), Adam over
// encoder/decoder/codebooks, dead-codeword reseeding after each epoch.
// Throws TrainingError on NaN loss.
QuantTrainReport train_rqvae(RqVaeState& st,
                             const std::vector<std::vector<Real>>& inputs,
                             uint64_t seed);

struct CatalogCodes {
  std::vector<SemanticId> ids;
  // per item: K+1 residual stages kept for collision reallocation
  std::vector<std::vector<std::vector<Real>>> stages;
};

CatalogCodes quantize_catalog(const RqVaeState& st,
                              const std::vector<std::vector<Real>>& inputs,
                              const std::vector<std::string>& item_ids);

// Groups (as indices into ids) sharing an identical index tuple, each group
// sorted by item_id, groups ordered by tuple. Singletons are not reported.
std::vector<std::vector<int>> detect_collisions(const std::vector<SemanticId>& ids);

enum class ReallocScope { kGroup, kGlobal };

// Makes the item -> indices map injective. Within each colliding group items
// are ranked by their distance to the nearest last-level codeword; in rank
// order each takes its nearest not-yet-taken codeword (the rank-1 item keeps
// its original code), moving to earlier levels only when a level is
// exhausted. kGroup checks availability inside the group only and re-runs
// detection until the catalog is clean; kGlobal checks against every
// assigned tuple. Returns the number of items whose code changed.
int reallocate(CatalogCodes& codes, const std::vector<Codebook>& codebooks,
               ReallocScope scope = ReallocScope::kGroup);

std::string serialize(const SemanticId& sid);

// Inverse of serialize; enforces level order, exactly `levels` groups, and
// index < codebook_size, naming the offending token in errors.
SemanticId parse_token_string(const std::string& s, int levels, int codebook_size);

// One line per item: "item_id<TAB><a_2><b_3><c_1><d_6>".
void export_semantic_ids(const std::string& path, const std::vector<SemanticId>& ids);
std::vector<SemanticId> load_semantic_ids(const std::string& path, int levels,
                                          int codebook_size);

// Codebook checkpoint: plain-text header (levels, size, dim, letters, config
// hash) followed by one little-endian f32 block of K*M_c*code_dim values.
// Codewords round to f32 on save.
void save_codebooks(const std::string& path, const RqVaeState& st,
                    uint64_t config_hash);
void load_codebooks(const std::string& path, RqVaeState& st,
                    uint64_t expected_config_hash);

}  // namespace qrec::quant
