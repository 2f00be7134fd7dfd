#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "json.hpp"
#include "xdrec/autograd.hpp"
#include "xdrec/corpus.hpp"
#include "xdrec/rng.hpp"

namespace xdrec {

inline constexpr int kCheckpointFormatVersion = 1;

struct BackboneConfig {
  int d = 128;
  int layers = 2;
  int heads = 2;
  int d_ff = 512;
  int max_len = 50;
  int vocab_size = 0;
  // Applied to attention output and FFN hidden units when an RNG is passed
  // to encode_batch. Off by default.
  float dropout = 0.0f;

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
  bool operator==(const BackboneConfig&) const = default;
};

struct EncoderLayer {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  Var ln_gamma, ln_beta;
  Var w1, b1, w2, b2;
};

// One bidirectional Transformer encoder with a tied masked-item head.
// Layer k computes FFN(LN(MHA(H) + H)).
class BackboneParams {
 public:
  BackboneConfig config;
  Var item_embeddings;        // vocab x d
  Var positional_embeddings;  // max_len x d
  std::vector<EncoderLayer> layers;
  Var mlm_bias;  // 1 x vocab

  static BackboneParams init(const BackboneConfig& cfg, Rng& rng);
  // Deep copy with fresh parameter nodes.
  BackboneParams clone() const;
  ParamList params() const;
  bool all_finite() const;
};

// Batched encoding. Only valid window positions are materialised: row r of
// `tokens` belongs to segment b when offsets[b] <= r < offsets[b+1], and
// positions[r] is its index inside the window.
struct EncodedBatch {
  Var tokens;
  Var pooled;  // one row per window; zeros for an all-padding window
  std::vector<int> offsets;
  std::vector<int> positions;

  // Row holding window b, position t; -1 when that position is padding.
  int row_of(size_t b, int t) const;
};

EncodedBatch encode_batch(const BackboneParams& params, std::span<const Window> windows, Rng* dropout_rng = nullptr);

struct EncodedSequence {
  Mat tokens;  // L x d, zero rows at padding
  Mat pooled;  // 1 x d
  std::vector<uint8_t> mask;
};

// Inference-only single window encoding.
EncodedSequence encode(const BackboneParams& params, const Window& window);
// Pooled vectors for many windows, no graph.
Mat encode_pooled(const BackboneParams& params, std::span<const Window> windows, size_t chunk = 64);

struct MaskedBatch {
  std::vector<Window> inputs;                       // with MASK substitutions
  std::vector<IdxList> targets;                     // original index at masked positions, PAD elsewhere
  std::vector<std::vector<uint8_t>> mask_positions;  // B x L

  size_t masked_count() const;
};

// Every valid position is masked independently with probability mask_ratio;
// a non-empty row with no draw gets its last valid position masked.
MaskedBatch mask_items(std::span<const Window> windows, double mask_ratio, Rng& rng);

// Tied-weight logits: rows * item_embeddings^T + mlm_bias.
Var mlm_logits(const BackboneParams& params, const Var& rows);
// Mean cross-entropy over masked positions; zero (and no gradient) when
// the batch has none. `encoded` must come from encode_batch(batch.inputs).
Var mlm_loss(const BackboneParams& params, const EncodedBatch& encoded, const MaskedBatch& batch);
Var mlm_loss(const BackboneParams& params, const MaskedBatch& batch);

// Finite-difference verification. Relative error per coordinate is
// |analytic - numeric| / max(1, |analytic|); the maximum is returned.
double grad_check(const std::function<double(std::span<const double>)>& f, std::span<const double> analytic,
                  std::span<const double> point, double epsilon);

struct GradCheckOptions {
  double epsilon = 1e-2;
  int samples_per_tensor = 3;
  uint64_t seed = 0;
};

struct ParamCoord {
  size_t tensor;
  Index flat;
};

std::vector<ParamCoord> sample_coords(const ParamList& params, int per_tensor, uint64_t seed);
// Central differences of loss_fn at the sampled coordinates.
std::vector<double> finite_difference(const std::function<Var()>& loss_fn, const ParamList& params,
                                      std::span<const ParamCoord> coords, double epsilon);
// Gradients left in params by one backward pass of loss_fn.
std::vector<double> analytic_gradient(const std::function<Var()>& loss_fn, const ParamList& params,
                                      std::span<const ParamCoord> coords);
double grad_check(const std::function<Var()>& loss_fn, const ParamList& params, const GradCheckOptions& opts = {});

void save_backbone(const std::filesystem::path& dir, const BackboneParams& params);
BackboneParams load_backbone(const std::filesystem::path& dir);

// Xavier-uniform helper shared with the other modules.
Mat xavier_uniform(Index rows, Index cols, Rng& rng);
Mat normal_matrix(Index rows, Index cols, double stddev, Rng& rng);

}  // namespace xdrec
