#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "xdrec/autograd.hpp"
#include "xdrec/backbone.hpp"
#include "xdrec/corpus.hpp"
#include "xdrec/optim.hpp"
#include "xdrec/rng.hpp"

namespace xdrec {

// Domain classifier d -> d/2 (tanh) -> 1. Label X = 1, Y = 0.
struct Discriminator {
  Var w1, b1, w2, b2;

  static Discriminator init(int d, Rng& rng);
  Discriminator clone() const;
  ParamList params() const;
  Var logits(const Var& pooled) const;
  // Probability of domain X, clamped into the open interval (0, 1).
  Mat probability(const Mat& pooled) const;
};

struct GrlConfig {
  float lambda = 1.0f;
  void validate() const;
};

// Backward rule of the reversal layer on its own.
Mat grl_backward(const Mat& upstream, const GrlConfig& cfg);

std::vector<float> domain_labels(std::span<const Domain> domains);

// BCE of the discriminator on encoder outputs. Gradients reach both sides.
Var disc_loss_spe(const Discriminator& disc, const Var& pooled, std::span<const float> labels);
// Same forward value; the encoder side sees -lambda times the gradient when
// `reverse` is set, the discriminator side is unchanged.
Var disc_loss_com(const Discriminator& disc, const Var& pooled, std::span<const float> labels, const GrlConfig& cfg,
                  bool reverse = true);
// Mean over rows of ||cross - sg(com)||^2.
Var align_loss(const Var& pooled_cross, const Var& pooled_com);
// Mean over rows of max(0, rho - ||cross - spe||).
Var sep_loss(const Var& pooled_cross, const Var& pooled_spe, float rho);

enum class Variant { Full, NoSpe, NoCom, NoCross, NoGrl, NoAlign, NoSep, NoGate };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);  // ConfigError listing valid names
const std::vector<Variant>& all_variants();

// What a variant keeps. Derived from the variant, never set independently.
struct ComponentSwitches {
  bool spe = true;
  bool com = true;
  bool cross = true;
  bool grl = true;
  bool align = true;
  bool sep = true;
  bool gate = true;

  static ComponentSwitches from_variant(Variant v);
  bool needs_discriminator() const { return spe || com; }
  bool align_active() const { return align && com && cross; }
  bool sep_active() const { return sep && spe && cross; }
};

struct OpdConfig {
  float beta1 = 0.1f;
  float beta2 = 0.01f;
  float beta3 = 0.1f;
  float beta4 = 0.1f;
  float rho = 1.0f;
  float learning_rate = 1e-3f;
  int epochs = 50;
  int batch_size = 32;
  double mask_ratio = 0.2;
  int patience = 5;
  GrlConfig grl;

  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static OpdConfig from_json(const nlohmann::json& j);
};

// The three Stage-1 encoders and the discriminator. Encoders start as
// copies of one random draw and then train independently.
struct EncoderSet {
  BackboneConfig config;
  std::optional<BackboneParams> spe;
  std::optional<BackboneParams> com;
  std::optional<BackboneParams> cross;
  std::optional<Discriminator> disc;

  static EncoderSet init(const BackboneConfig& cfg, const ComponentSwitches& sw, Rng& rng);
  // Named parameter sets: "spe", "com", "cross", "disc" (absent ones omitted).
  std::vector<std::pair<std::string, ParamList>> parameter_sets() const;
  ParamList all_params() const;

  void save(const std::filesystem::path& dir) const;
  static EncoderSet load(const std::filesystem::path& dir);
};

// One Stage-1 batch for a group of users. Each user contributes the
// training portions of both single-domain sequences and the cross-sequence
// training portion relative to the target domain.
struct Stage1Batch {
  std::vector<Window> single;
  std::vector<float> labels;  // per single row
  IdxList owner;              // single row -> batch user index
  std::vector<Window> cross;  // one per user
  MaskedBatch single_masked;
  MaskedBatch cross_masked;
};

Stage1Batch make_stage1_batch(const Corpus& corpus, std::span<const size_t> users, Domain target, int max_len,
                              double mask_ratio, Rng& rng);

struct Stage1Terms {
  Var total;
  double mlm = 0.0;
  double disc = 0.0;
  double align = 0.0;
  double sep = 0.0;
};

// Sub-step objectives. loss_cross uses `com_pooled` as the alignment
// target when given, else encodes with the current common encoder.
Stage1Terms loss_spe(const EncoderSet& enc, const Stage1Batch& batch, const OpdConfig& cfg);
Stage1Terms loss_com(const EncoderSet& enc, const Stage1Batch& batch, const OpdConfig& cfg,
                     const ComponentSwitches& sw, Mat* com_pooled_out = nullptr);
Stage1Terms loss_cross(const EncoderSet& enc, const Stage1Batch& batch, const OpdConfig& cfg,
                       const ComponentSwitches& sw, const Mat* com_pooled = nullptr);

struct EpochLosses {
  int epoch = 0;
  double l_mlm_spe = 0.0;
  double l_disc_spe = 0.0;
  double l_disc_com = 0.0;
  double l_mlm_cross = 0.0;
  double l_align = 0.0;
  double l_sep = 0.0;
  double l_valid = 0.0;

  nlohmann::json to_json() const;
};

enum class SubStep { A, B, C };

class Stage1Trainer {
 public:
  using Hook = std::function<void(SubStep, size_t batch_index)>;

  Stage1Trainer(const Corpus& corpus, Domain target, BackboneConfig backbone, OpdConfig cfg, ComponentSwitches sw,
                uint64_t seed);

  // One pass over all users in a seed/epoch-derived order.
  EpochLosses run_epoch();
  // Masked prediction of each user's target-domain validation item.
  double validation_loss() const;

  // Runs until cfg.epochs or early stop. Appends one JSON line per epoch
  // to `loss_log` and, when `checkpoint_dir` is set, checkpoints after
  // every epoch so that a later call resumes where this one stopped.
  std::vector<EpochLosses> train(const std::filesystem::path& loss_log = {},
                                 const std::filesystem::path& checkpoint_dir = {});

  void set_hook(Hook hook) { hook_ = std::move(hook); }
  void save_state(const std::filesystem::path& dir) const;
  // Restores encoders, optimizer moments and early-stopping state.
  void load_state(const std::filesystem::path& dir);

  const EncoderSet& encoders() const { return enc_; }
  EncoderSet& encoders() { return enc_; }
  int epochs_done() const { return epoch_; }
  bool stopped() const { return stopped_; }

 private:
  void step_batch(const Stage1Batch& batch, size_t index, EpochLosses& acc);
  void check_finite(const Stage1Terms& t, SubStep s, size_t index) const;

  const Corpus& corpus_;
  Domain target_;
  OpdConfig cfg_;
  ComponentSwitches sw_;
  uint64_t seed_;
  EncoderSet enc_;
  std::optional<Adam> opt_spe_, opt_com_, opt_cross_;
  // The discriminator is stepped in both A and B; each sub-step keeps its
  // own moment estimates so the small B weight is not swamped by A.
  std::optional<Adam> opt_disc_, opt_disc_com_;
  int epoch_ = 0;
  double best_valid_ = 0.0;
  int bad_epochs_ = 0;
  bool stopped_ = false;
  Hook hook_;
};

// Per-user frozen preference vectors for one target domain.
class PreferenceStore {
 public:
  struct Entry {
    std::string user;
    Mat v_spe;    // 1 x d
    Mat v_cross;  // 1 x d
  };

  PreferenceStore(int d, Domain target) : d_(d), target_(target) {}

  void set(const std::string& user, Mat v_spe, Mat v_cross);  // ContractError when frozen
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }
  int dim() const { return d_; }
  Domain target() const { return target_; }
  size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  // DataError naming the user when missing.
  const Entry& at(const std::string& user) const;
  bool contains(const std::string& user) const { return index_.count(user) != 0; }

  std::string serialize() const;
  static PreferenceStore deserialize(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static PreferenceStore load(const std::filesystem::path& path);

 private:
  int d_;
  Domain target_;
  bool frozen_ = false;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// Pooled encodings of every user's target-domain training portion
// (spe) and cross-sequence training portion (cross). Ablated components
// give zero vectors. The returned store is frozen.
PreferenceStore extract_preferences(const EncoderSet& enc, const Corpus& corpus, Domain target);

// ||Cov(a, b)||_F across rows (users), with the n-1 normaliser.
double cross_covariance_norm(const Mat& a, const Mat& b);
// Symmetric 3x3 matrix over (spe, com, cross) populations.
std::array<std::array<double, 3>, 3> covariance_diagnostic(const Mat& spe, const Mat& com, const Mat& cross);

}  // namespace xdrec
