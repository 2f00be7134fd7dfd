#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "xdrec/corpus.hpp"
#include "xdrec/disentangle.hpp"
#include "xdrec/fuser.hpp"

namespace xdrec {

inline constexpr std::array<int, 3> kCutoffs{5, 10, 20};

enum class Split { Valid, Test };
enum class Protocol { FullRanking, SeenExcluded };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);
std::string_view to_string(Protocol p);
Protocol parse_protocol(std::string_view s);

struct RankGain {
  double hr = 0.0;
  double ndcg = 0.0;
};

// Single relevant item: hr = [rank <= k], ndcg = 1/log2(rank + 1) inside the cutoff.
RankGain rank_metrics(int rank, int k);

// 1-based rank of column `truth`: one plus the number of columns scoring
// higher, plus the number of lower-index columns scoring equal. Columns
// flagged in `excluded` do not compete.
int rank_of(std::span<const float> scores, size_t truth, std::span<const uint8_t> excluded = {});

double mean_of(std::span<const double> v);
// Sample standard deviation; 0 for fewer than two values.
double sample_stddev(std::span<const double> v);

// Percent change of `variant` relative to `full`.
double relative_delta(double variant, double full);

struct RankingReport {
  std::string variant = "full";
  Protocol protocol = Protocol::FullRanking;
  Split split = Split::Test;
  std::vector<uint64_t> seeds;
  // Indexed [seed][cutoff].
  std::vector<std::array<double, kCutoffs.size()>> hr;
  std::vector<std::array<double, kCutoffs.size()>> ndcg;
  size_t user_count = 0;

  double hr_mean(size_t cutoff) const;
  double hr_std(size_t cutoff) const;
  double ndcg_mean(size_t cutoff) const;
  double ndcg_std(size_t cutoff) const;
  // Position of k in kCutoffs; ContractError otherwise.
  static size_t cutoff_index(int k);

  nlohmann::json to_json() const;
  static RankingReport from_json(const nlohmann::json& j);
  // Header plus one row per cutoff.
  std::string to_tsv() const;
};

// One-seed report from per-user ranks.
RankingReport report_from_ranks(std::span<const int> ranks, uint64_t seed, Split split, Protocol protocol,
                                std::string variant = "full");
// Concatenates the seeds of reports that share variant, split and protocol.
RankingReport aggregate(std::span<const RankingReport> reports);

struct EvalQuery {
  size_t user = 0;
  size_t position = 0;  // index into the target-domain sequence
  int32_t truth = 0;
  Window window;
};

// Session windows ending just before each user's held-out item.
std::vector<EvalQuery> eval_queries(const Corpus& corpus, Domain target, Split split, bool cross_view,
                                    int session_len);

// Per-user ranks of the held-out item among all target-domain items.
std::vector<int> rank_users(const Recommender& model, const Corpus& corpus, const PreferenceStore& store, Split split,
                            Protocol protocol, bool cross_view, int session_len);

RankingReport evaluate_model(const Recommender& model, const Corpus& corpus, const PreferenceStore& store, Split split,
                             Protocol protocol, bool cross_view, int session_len, uint64_t seed = 0,
                             std::string variant = "full");

// Fraction of Stage-2 training examples whose target ranks within the top k.
double training_hit_rate(const Recommender& model, const Corpus& corpus, const PreferenceStore& store,
                         bool cross_view, int session_len, int k = 1);

// ---- end-to-end runs ----

struct PipelineConfig {
  BackboneConfig backbone;  // vocab_size is filled from the corpus
  OpdConfig opd;
  RecConfig rec;
  Domain target = Domain::X;

  nlohmann::json to_json() const;
};

struct Stage1Output {
  EncoderSet encoders;
  PreferenceStore store;
  std::vector<EpochLosses> losses;
};

Stage1Output run_stage1(const Corpus& corpus, const PipelineConfig& cfg, Variant variant, uint64_t seed,
                        const std::filesystem::path& loss_log = {}, const std::filesystem::path& checkpoint_dir = {});

Recommender build_recommender(const Corpus& corpus, const PipelineConfig& cfg, const EncoderSet& encoders,
                              Variant variant, uint64_t seed);

struct Stage2Output {
  Recommender model;
  std::vector<double> losses;
};

Stage2Output run_stage2(const Corpus& corpus, const PipelineConfig& cfg, const Stage1Output& stage1, Variant variant,
                        uint64_t seed, const std::filesystem::path& loss_log = {});

struct VariantResult {
  Variant variant = Variant::Full;
  RankingReport valid;
  RankingReport test;
};

struct AblationResult {
  std::vector<VariantResult> variants;

  const VariantResult& at(Variant v) const;
  nlohmann::json to_json() const;
  // Variant rows with HR/NDCG at 10 and 20 and deltas from `full`.
  std::string summary_table() const;
};

using Progress = std::function<void(const std::string&)>;

// Seeds outer, variants inner. Variants whose Stage 1 is identical share
// one Stage-1 run per seed.
AblationResult run_ablation(const Corpus& corpus, const PipelineConfig& cfg, std::span<const Variant> variants,
                            std::span<const uint64_t> seeds, Protocol protocol = Protocol::FullRanking,
                            const Progress& progress = {});

// ---- probes ----

// L2-regularised logistic regression fitted by Newton's method; the bias
// is not penalised. Objective: 0.5 |w|^2 + c * sum log-loss.
struct LogisticProbe {
  Eigen::VectorXd w;
  double b = 0.0;

  static LogisticProbe fit(const Eigen::MatrixXd& x, std::span<const int> y, double c = 1.0, int max_iter = 50);
  double accuracy(const Eigen::MatrixXd& x, std::span<const int> y) const;
};

struct ProbeReport {
  std::optional<double> spe_accuracy;
  std::optional<double> com_accuracy;
  std::optional<double> cross_accuracy;
  size_t train_users = 0;
  size_t test_users = 0;
  // (spe, com, cross) cross-covariance norms of target-domain encodings,
  // present when all three encoders exist.
  std::optional<std::array<std::array<double, 3>, 3>> covariance;

  nlohmann::json to_json() const;
};

inline constexpr size_t kMinProbeUsers = 20;

// Pools each user's X and Y training portions with every single-domain
// encoder and fits a domain classifier on the first half of `users`,
// scoring it on the second half. With shuffle_labels the training labels
// are permuted.
ProbeReport probe(const EncoderSet& enc, const Corpus& corpus, std::span<const size_t> users, Domain target,
                  bool shuffle_labels = false, uint64_t seed = 0);

}  // namespace xdrec
