#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "xdrec/autograd.hpp"
#include "xdrec/backbone.hpp"
#include "xdrec/corpus.hpp"
#include "xdrec/disentangle.hpp"
#include "xdrec/optim.hpp"
#include "xdrec/rng.hpp"

namespace xdrec {

struct GatingParams {
  Var wq;  // d x d
  Var wg;  // d x 3d, applied as [a_spe | a_cross | h] * wg^T
  Var bg;  // 1 x d

  static GatingParams init(int d, Rng& rng);
  ParamList params() const { return {{"wq", wq}, {"wg", wg}, {"bg", bg}}; }
};

// Which of the two preference signals reach the fusion, and whether the
// learned gate is used. Derived from the variant switches.
struct GateMode {
  bool use_spe = true;    // false: alpha_cross fixed to 1
  bool use_cross = true;  // false: alpha_spe fixed to 1
  bool learned = true;    // false: alpha = 0.5 and fused = (a_spe + a_cross) / 2

  static GateMode from_switches(const ComponentSwitches& sw);
};

// Token-level fusion over a batch of compacted token rows. Row r of
// v_spe / v_cross holds the preference vector of the session row r
// belongs to.
struct GateOutput {
  Var alpha_spe;    // N x 1
  Var alpha_cross;  // N x 1
  Var gate;         // N x d
  Var fused;        // N x d
};

GateOutput gate_tokens(const Var& tokens, const Var& v_spe, const Var& v_cross, const GatingParams& params,
                       const GateMode& mode = {});

// One session, valid tokens only, no graph.
struct SessionState {
  Mat token_states;  // n x d
  Mat alpha_spe;     // n x 1
  Mat alpha_cross;   // n x 1
  Mat gate;          // n x d
  Mat fused_tokens;  // n x d
  Mat session;       // 1 x d
};

SessionState gate_tokens(const Mat& token_states, const Mat& v_spe, const Mat& v_cross, const GatingParams& params,
                         const GateMode& mode = {});
// Mean of fused tokens; ContractError for an empty session.
Mat session_vector(const SessionState& state);

// (c . e) / sqrt(d); d defaults to the vector length.
double score(std::span<const float> c, std::span<const float> e, int d);
double score(std::span<const float> c, std::span<const float> e);
// Scaled scores of every row of c against every row of items.
Mat score_all(const Mat& c, const Mat& items);

// Mean -log softmax of column 0 (the positive) over each row.
Var rec_loss(const Var& scores);

struct RecConfig {
  int negatives = 99;  // Q
  float learning_rate = 1e-3f;
  int epochs = 100;
  int batch_size = 32;
  int session_len = 50;  // L
  bool freeze_item_embeddings = false;
  bool exclude_history_negatives = false;
  bool shuffle = true;

  void validate() const;
  nlohmann::json to_json() const;
  static RecConfig from_json(const nlohmann::json& j);
};

// Item sequence feeding the session encoder for the target-domain item at
// `position`: the cross-sequence prefix before it, or the target-domain
// prefix alone when the cross view is ablated. Not windowed.
IdxList session_prefix(const UserSequences& u, const Vocabulary& vocab, Domain target, size_t position,
                       bool cross_view);

// One teacher-forced training target.
struct Stage2Example {
  size_t user;
  size_t position;  // index into the user's target-domain sequence
  int32_t target;
};

// Every training-split position whose session is non-empty.
std::vector<Stage2Example> stage2_examples(const Corpus& corpus, Domain target, bool cross_view);

// The trainable Stage-2 model. The session encoder's item table is also
// the scoring table.
class Recommender {
 public:
  Recommender(BackboneConfig backbone, const Mat& initial_items, GateMode mode, Domain target,
              IdxList target_items, uint64_t seed);

  const BackboneConfig& config() const { return session_.config; }
  const BackboneParams& session_encoder() const { return session_; }
  const GatingParams& gating() const { return gating_; }
  const GateMode& mode() const { return mode_; }
  Domain target() const { return target_; }
  const IdxList& target_items() const { return target_items_; }
  const Var& item_table() const { return session_.item_embeddings; }

  // Trainable tensors. The masked-prediction bias of the session encoder
  // is never used and is left out.
  ParamList params(bool include_items = true) const;

  // Session vectors with graph; one row per window.
  Var session_vectors(std::span<const Window> windows, const Mat& v_spe, const Mat& v_cross) const;
  // Inference: scores of every target-domain item (columns follow
  // target_items order).
  Mat score_targets(std::span<const Window> windows, const Mat& v_spe, const Mat& v_cross) const;

  void save(const std::filesystem::path& dir, const nlohmann::json& extra_meta = {}) const;
  static Recommender load(const std::filesystem::path& dir);

 private:
  BackboneParams session_;
  GatingParams gating_;
  GateMode mode_;
  Domain target_;
  IdxList target_items_;
};

// Starting item table for Stage 2: the specific encoder's table, or the
// cross encoder's when the specific encoder is ablated.
Mat initial_item_table(const EncoderSet& enc);

class Stage2Trainer {
 public:
  Stage2Trainer(const Corpus& corpus, const PreferenceStore& store, Recommender& model, RecConfig cfg,
                bool cross_view, uint64_t seed);

  // One pass over all examples; returns the mean loss.
  double run_epoch();
  std::vector<double> train(const std::filesystem::path& loss_log = {});

  const std::vector<Stage2Example>& examples() const { return examples_; }
  int epochs_done() const { return epoch_; }

 private:
  const Corpus& corpus_;
  const PreferenceStore& store_;
  Recommender& model_;
  RecConfig cfg_;
  bool cross_view_;
  uint64_t seed_;
  std::vector<Stage2Example> examples_;
  std::vector<IdxList> history_;  // per user, sorted target-domain training items
  Adam opt_;
  int epoch_ = 0;
};

// Uniform sampling without replacement of `count` items from `pool`
// excluding every index in `exclude` (sorted). ConfigError when too few.
IdxList sample_negatives(const IdxList& pool, std::span<const int32_t> exclude, int count, Rng& rng);

}  // namespace xdrec
