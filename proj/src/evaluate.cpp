#include "xdrec/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "xdrec/errors.hpp"

namespace xdrec {
namespace fs = std::filesystem;

std::string_view to_string(Split s) { return s == Split::Valid ? "valid" : "test"; }

Split parse_split(std::string_view s) {
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + std::string(s) + "' (valid, test)");
}

std::string_view to_string(Protocol p) { return p == Protocol::FullRanking ? "full_ranking" : "seen_excluded"; }

Protocol parse_protocol(std::string_view s) {
  if (s == "full_ranking") return Protocol::FullRanking;
  if (s == "seen_excluded") return Protocol::SeenExcluded;
  throw ConfigError("unknown protocol '" + std::string(s) + "' (full_ranking, seen_excluded)");
}

RankGain rank_metrics(int rank, int k) {
  if (rank < 1) throw ContractError("rank must be >= 1");
  if (rank > k) return {};
  return {1.0, 1.0 / std::log2(static_cast<double>(rank) + 1.0)};
}

int rank_of(std::span<const float> scores, size_t truth, std::span<const uint8_t> excluded) {
  if (truth >= scores.size()) throw ContractError("rank_of: ground-truth column out of range");
  if (!excluded.empty() && excluded.size() != scores.size()) throw ContractError("rank_of: exclusion mask size");
  const float s = scores[truth];
  int rank = 1;
  for (size_t j = 0; j < scores.size(); ++j) {
    if (j == truth || (!excluded.empty() && excluded[j])) continue;
    if (scores[j] > s || (scores[j] == s && j < truth)) ++rank;
  }
  return rank;
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

double relative_delta(double variant, double full) {
  if (full == 0.0) throw ContractError("relative_delta: reference value is zero");
  return (variant - full) / full * 100.0;
}

// ---- reports ----

size_t RankingReport::cutoff_index(int k) {
  for (size_t i = 0; i < kCutoffs.size(); ++i)
    if (kCutoffs[i] == k) return i;
  throw ContractError("unsupported cutoff " + std::to_string(k));
}

namespace {

std::vector<double> column(const std::vector<std::array<double, kCutoffs.size()>>& rows, size_t c) {
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(r[c]);
  return out;
}

}  // namespace

double RankingReport::hr_mean(size_t c) const { return mean_of(column(hr, c)); }
double RankingReport::hr_std(size_t c) const { return sample_stddev(column(hr, c)); }
double RankingReport::ndcg_mean(size_t c) const { return mean_of(column(ndcg, c)); }
double RankingReport::ndcg_std(size_t c) const { return sample_stddev(column(ndcg, c)); }

nlohmann::json RankingReport::to_json() const {
  nlohmann::json per_k = nlohmann::json::array();
  for (size_t c = 0; c < kCutoffs.size(); ++c) {
    per_k.push_back({{"k", kCutoffs[c]},
                     {"hr_mean", hr_mean(c)},
                     {"hr_std", hr_std(c)},
                     {"ndcg_mean", ndcg_mean(c)},
                     {"ndcg_std", ndcg_std(c)},
                     {"hr_per_seed", column(hr, c)},
                     {"ndcg_per_seed", column(ndcg, c)}});
  }
  return {{"variant", variant},
          {"protocol", std::string(to_string(protocol))},
          {"split", std::string(to_string(split))},
          {"seeds", seeds},
          {"per_k", per_k},
          {"user_count", user_count}};
}

RankingReport RankingReport::from_json(const nlohmann::json& j) {
  RankingReport r;
  r.variant = j.at("variant").get<std::string>();
  r.protocol = parse_protocol(j.at("protocol").get<std::string>());
  r.split = parse_split(j.at("split").get<std::string>());
  r.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  r.user_count = j.at("user_count").get<size_t>();
  r.hr.assign(r.seeds.size(), {});
  r.ndcg.assign(r.seeds.size(), {});
  for (const auto& entry : j.at("per_k")) {
    const size_t c = cutoff_index(entry.at("k").get<int>());
    const auto hr = entry.at("hr_per_seed").get<std::vector<double>>();
    const auto ndcg = entry.at("ndcg_per_seed").get<std::vector<double>>();
    if (hr.size() != r.seeds.size() || ndcg.size() != r.seeds.size())
      throw DataError("report per-seed values do not match the seed list");
    for (size_t s = 0; s < r.seeds.size(); ++s) {
      r.hr[s][c] = hr[s];
      r.ndcg[s][c] = ndcg[s];
    }
  }
  return r;
}

std::string RankingReport::to_tsv() const {
  std::ostringstream out;
  out << std::setprecision(6) << std::fixed;
  out << "variant\tprotocol\tsplit\tk\thr_mean\thr_std\tndcg_mean\tndcg_std\tseeds\tusers\n";
  for (size_t c = 0; c < kCutoffs.size(); ++c) {
    out << variant << '\t' << to_string(protocol) << '\t' << to_string(split) << '\t' << kCutoffs[c] << '\t'
        << hr_mean(c) << '\t' << hr_std(c) << '\t' << ndcg_mean(c) << '\t' << ndcg_std(c) << '\t' << seeds.size()
        << '\t' << user_count << '\n';
  }
  return out.str();
}

RankingReport report_from_ranks(std::span<const int> ranks, uint64_t seed, Split split, Protocol protocol,
                                std::string variant) {
  if (ranks.empty()) throw DataError("no users to evaluate");
  RankingReport r;
  r.variant = std::move(variant);
  r.protocol = protocol;
  r.split = split;
  r.seeds = {seed};
  r.user_count = ranks.size();
  std::array<double, kCutoffs.size()> hr{}, ndcg{};
  // User-index order keeps the float summation deterministic.
  for (int rank : ranks) {
    for (size_t c = 0; c < kCutoffs.size(); ++c) {
      const auto g = rank_metrics(rank, kCutoffs[c]);
      hr[c] += g.hr;
      ndcg[c] += g.ndcg;
    }
  }
  for (size_t c = 0; c < kCutoffs.size(); ++c) {
    hr[c] /= static_cast<double>(ranks.size());
    ndcg[c] /= static_cast<double>(ranks.size());
  }
  r.hr.push_back(hr);
  r.ndcg.push_back(ndcg);
  return r;
}

RankingReport aggregate(std::span<const RankingReport> reports) {
  if (reports.empty()) throw ContractError("aggregate: no reports");
  RankingReport out = reports.front();
  for (size_t i = 1; i < reports.size(); ++i) {
    const auto& r = reports[i];
    if (r.variant != out.variant || r.split != out.split || r.protocol != out.protocol)
      throw ContractError("aggregate: reports differ in variant, split or protocol");
    out.seeds.insert(out.seeds.end(), r.seeds.begin(), r.seeds.end());
    out.hr.insert(out.hr.end(), r.hr.begin(), r.hr.end());
    out.ndcg.insert(out.ndcg.end(), r.ndcg.begin(), r.ndcg.end());
    out.user_count = std::max(out.user_count, r.user_count);
  }
  return out;
}

// ---- model evaluation ----

std::vector<EvalQuery> eval_queries(const Corpus& corpus, Domain target, Split split, bool cross_view,
                                    int session_len) {
  std::vector<EvalQuery> out;
  out.reserve(corpus.users.size());
  for (size_t ui = 0; ui < corpus.users.size(); ++ui) {
    const auto& u = corpus.users[ui];
    const auto& m = u.split(target);
    EvalQuery q;
    q.user = ui;
    q.position = static_cast<size_t>(m.train_end) + (split == Split::Test ? 1 : 0);
    q.truth = split == Split::Test ? m.test_item : m.valid_item;
    q.window = make_window(session_prefix(u, corpus.vocab, target, q.position, cross_view), session_len);
    out.push_back(std::move(q));
  }
  return out;
}

namespace {

struct PrefRows {
  Mat spe;
  Mat cross;
};

PrefRows preference_rows(const PreferenceStore& store, const Corpus& corpus, std::span<const size_t> users) {
  const int d = store.dim();
  PrefRows p{Mat(static_cast<Index>(users.size()), d), Mat(static_cast<Index>(users.size()), d)};
  for (size_t i = 0; i < users.size(); ++i) {
    const auto& e = store.at(corpus.users[users[i]].user);
    p.spe.row(static_cast<Index>(i)) = e.v_spe;
    p.cross.row(static_cast<Index>(i)) = e.v_cross;
  }
  return p;
}

size_t column_of(const IdxList& items, int32_t item) {
  const auto it = std::lower_bound(items.begin(), items.end(), item);
  if (it == items.end() || *it != item) throw DataError("held-out item is not a target-domain item");
  return static_cast<size_t>(it - items.begin());
}

}  // namespace

std::vector<int> rank_users(const Recommender& model, const Corpus& corpus, const PreferenceStore& store, Split split,
                            Protocol protocol, bool cross_view, int session_len) {
  const auto queries = eval_queries(corpus, model.target(), split, cross_view, session_len);
  std::vector<size_t> users;
  std::vector<Window> windows;
  for (const auto& q : queries) {
    users.push_back(q.user);
    windows.push_back(q.window);
  }
  const auto prefs = preference_rows(store, corpus, users);
  const Mat scores = model.score_targets(windows, prefs.spe, prefs.cross);
  const auto& items = model.target_items();

  std::vector<int> ranks;
  ranks.reserve(queries.size());
  std::vector<uint8_t> excluded;
  for (size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    const size_t truth = column_of(items, q.truth);
    excluded.clear();
    if (protocol == Protocol::SeenExcluded) {
      excluded.assign(items.size(), 0);
      const auto& seq = corpus.users[q.user].seq(model.target());
      for (size_t k = 0; k < q.position; ++k) excluded[column_of(items, seq[k])] = 1;
      excluded[truth] = 0;
    }
    const auto row = scores.row(static_cast<Index>(i));
    ranks.push_back(rank_of(std::span<const float>(row.data(), static_cast<size_t>(row.size())), truth, excluded));
  }
  return ranks;
}

RankingReport evaluate_model(const Recommender& model, const Corpus& corpus, const PreferenceStore& store, Split split,
                             Protocol protocol, bool cross_view, int session_len, uint64_t seed, std::string variant) {
  const auto ranks = rank_users(model, corpus, store, split, protocol, cross_view, session_len);
  return report_from_ranks(ranks, seed, split, protocol, std::move(variant));
}

double training_hit_rate(const Recommender& model, const Corpus& corpus, const PreferenceStore& store,
                         bool cross_view, int session_len, int k) {
  const auto examples = stage2_examples(corpus, model.target(), cross_view);
  if (examples.empty()) throw DataError("no training examples");
  std::vector<size_t> users;
  std::vector<Window> windows;
  for (const auto& ex : examples) {
    users.push_back(ex.user);
    windows.push_back(make_window(
        session_prefix(corpus.users[ex.user], corpus.vocab, model.target(), ex.position, cross_view), session_len));
  }
  const auto prefs = preference_rows(store, corpus, users);
  const Mat scores = model.score_targets(windows, prefs.spe, prefs.cross);
  size_t hits = 0;
  for (size_t i = 0; i < examples.size(); ++i) {
    const auto row = scores.row(static_cast<Index>(i));
    const size_t truth = column_of(model.target_items(), examples[i].target);
    if (rank_of(std::span<const float>(row.data(), static_cast<size_t>(row.size())), truth) <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

// ---- end-to-end runs ----

nlohmann::json PipelineConfig::to_json() const {
  return {{"backbone", backbone.to_json()},
          {"opd", opd.to_json()},
          {"rec", rec.to_json()},
          {"target", std::string(to_string(target))}};
}

namespace {

BackboneConfig stage1_backbone(const Corpus& corpus, const PipelineConfig& cfg) {
  BackboneConfig b = cfg.backbone;
  b.vocab_size = corpus.vocab.size();
  return b;
}

}  // namespace

Stage1Output run_stage1(const Corpus& corpus, const PipelineConfig& cfg, Variant variant, uint64_t seed,
                        const fs::path& loss_log, const fs::path& checkpoint_dir) {
  Stage1Trainer trainer(corpus, cfg.target, stage1_backbone(corpus, cfg), cfg.opd,
                        ComponentSwitches::from_variant(variant), seed);
  auto losses = trainer.train(loss_log, checkpoint_dir);
  auto store = extract_preferences(trainer.encoders(), corpus, cfg.target);
  return {trainer.encoders(), std::move(store), std::move(losses)};
}

Recommender build_recommender(const Corpus& corpus, const PipelineConfig& cfg, const EncoderSet& encoders,
                              Variant variant, uint64_t seed) {
  BackboneConfig b = stage1_backbone(corpus, cfg);
  b.max_len = cfg.rec.session_len;
  return Recommender(b, initial_item_table(encoders), GateMode::from_switches(ComponentSwitches::from_variant(variant)),
                     cfg.target, corpus.vocab.items_in(cfg.target), derive_seed(seed, {7}));
}

Stage2Output run_stage2(const Corpus& corpus, const PipelineConfig& cfg, const Stage1Output& stage1, Variant variant,
                        uint64_t seed, const fs::path& loss_log) {
  Stage2Output out{build_recommender(corpus, cfg, stage1.encoders, variant, seed), {}};
  Stage2Trainer trainer(corpus, stage1.store, out.model, cfg.rec, ComponentSwitches::from_variant(variant).cross,
                        derive_seed(seed, {8}));
  out.losses = trainer.train(loss_log);
  return out;
}

const VariantResult& AblationResult::at(Variant v) const {
  for (const auto& r : variants)
    if (r.variant == v) return r;
  throw ContractError("variant " + std::string(to_string(v)) + " was not run");
}

nlohmann::json AblationResult::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : variants) rows.push_back({{"valid", r.valid.to_json()}, {"test", r.test.to_json()}});
  return {{"variants", rows}};
}

std::string AblationResult::summary_table() const {
  const VariantResult* full = nullptr;
  for (const auto& r : variants)
    if (r.variant == Variant::Full) full = &r;
  std::ostringstream out;
  out << std::fixed;
  out << std::left << std::setw(10) << "variant";
  for (const char* m : {"HR@10", "NDCG@10", "HR@20", "NDCG@20"}) out << std::right << std::setw(18) << m;
  out << '\n';
  const size_t c10 = RankingReport::cutoff_index(10), c20 = RankingReport::cutoff_index(20);
  for (const auto& r : variants) {
    out << std::left << std::setw(10) << to_string(r.variant);
    const std::array<std::pair<double, double>, 4> cells{
        std::pair{r.test.hr_mean(c10), full ? full->test.hr_mean(c10) : 0.0},
        {r.test.ndcg_mean(c10), full ? full->test.ndcg_mean(c10) : 0.0},
        {r.test.hr_mean(c20), full ? full->test.hr_mean(c20) : 0.0},
        {r.test.ndcg_mean(c20), full ? full->test.ndcg_mean(c20) : 0.0}};
    for (const auto& [v, ref] : cells) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << v;
      if (full && r.variant != Variant::Full && ref != 0.0)
        cell << " (" << std::showpos << std::setprecision(1) << relative_delta(v, ref) << "%)";
      out << std::right << std::setw(18) << cell.str();
    }
    out << '\n';
  }
  return out.str();
}

AblationResult run_ablation(const Corpus& corpus, const PipelineConfig& cfg, std::span<const Variant> variants,
                            std::span<const uint64_t> seeds, Protocol protocol, const Progress& progress) {
  if (variants.empty() || seeds.empty()) throw ConfigError("ablation needs at least one variant and one seed");
  std::map<Variant, std::vector<RankingReport>> valid, test;
  for (uint64_t seed : seeds) {
    // Stage 1 depends on every switch except the gate.
    std::vector<std::pair<ComponentSwitches, std::shared_ptr<Stage1Output>>> cache;
    for (Variant v : variants) {
      const auto sw = ComponentSwitches::from_variant(v);
      auto key = sw;
      key.gate = true;
      std::shared_ptr<Stage1Output> s1;
      for (const auto& [k, out] : cache)
        if (k.spe == key.spe && k.com == key.com && k.cross == key.cross && k.grl == key.grl &&
            k.align == key.align && k.sep == key.sep)
          s1 = out;
      if (!s1) {
        if (progress) progress("stage 1: " + std::string(to_string(v)) + " seed " + std::to_string(seed));
        s1 = std::make_shared<Stage1Output>(run_stage1(corpus, cfg, v, seed));
        cache.emplace_back(key, s1);
      }
      if (progress) progress("stage 2: " + std::string(to_string(v)) + " seed " + std::to_string(seed));
      const auto s2 = run_stage2(corpus, cfg, *s1, v, seed);
      const std::string name(to_string(v));
      valid[v].push_back(evaluate_model(s2.model, corpus, s1->store, Split::Valid, protocol, sw.cross,
                                        cfg.rec.session_len, seed, name));
      test[v].push_back(evaluate_model(s2.model, corpus, s1->store, Split::Test, protocol, sw.cross,
                                       cfg.rec.session_len, seed, name));
    }
  }
  AblationResult out;
  for (Variant v : variants) {
    if (valid.count(v) == 0) continue;
    if (std::any_of(out.variants.begin(), out.variants.end(), [v](const auto& r) { return r.variant == v; }))
      continue;
    out.variants.push_back({v, aggregate(valid[v]), aggregate(test[v])});
  }
  return out;
}

// ---- probes ----

LogisticProbe LogisticProbe::fit(const Eigen::MatrixXd& x, std::span<const int> y, double c, int max_iter) {
  const Index n = x.rows();
  const Index d = x.cols();
  if (n == 0 || static_cast<size_t>(n) != y.size()) throw ContractError("probe: rows and labels differ");
  // Last coordinate is the unpenalised bias.
  Eigen::MatrixXd xa(n, d + 1);
  xa << x, Eigen::VectorXd::Ones(n);
  Eigen::VectorXd t(n);
  for (Index i = 0; i < n; ++i) t(i) = y[static_cast<size_t>(i)];
  Eigen::VectorXd reg = Eigen::VectorXd::Ones(d + 1);
  reg(d) = 0.0;

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
  auto objective = [&](const Eigen::VectorXd& th) {
    const Eigen::VectorXd z = xa * th;
    double loss = 0.0;
    for (Index i = 0; i < n; ++i) {
      // log(1 + e^z) - t z, stable form.
      loss += std::max(z(i), 0.0) + std::log1p(std::exp(-std::abs(z(i)))) - t(i) * z(i);
    }
    return 0.5 * th.cwiseProduct(reg).dot(th) + c * loss;
  };
  double f = objective(theta);
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::VectorXd z = xa * theta;
    Eigen::VectorXd p(n), wts(n);
    for (Index i = 0; i < n; ++i) {
      p(i) = 1.0 / (1.0 + std::exp(-z(i)));
      wts(i) = std::max(p(i) * (1.0 - p(i)), 1e-12);
    }
    const Eigen::VectorXd grad = reg.cwiseProduct(theta) + c * xa.transpose() * (p - t);
    Eigen::MatrixXd hess = c * xa.transpose() * wts.asDiagonal() * xa;
    hess.diagonal() += reg;
    hess(d, d) += 1e-10;
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    // Backtracking keeps Newton monotone on badly scaled inputs.
    double lr = 1.0;
    Eigen::VectorXd next = theta - step;
    double fn = objective(next);
    while (fn > f && lr > 1e-6) {
      lr *= 0.5;
      next = theta - lr * step;
      fn = objective(next);
    }
    const double change = f - fn;
    theta = next;
    f = fn;
    if (change >= 0.0 && change < 1e-10 * std::max(1.0, std::abs(f))) break;
  }
  LogisticProbe probe;
  probe.w = theta.head(d);
  probe.b = theta(d);
  return probe;
}

double LogisticProbe::accuracy(const Eigen::MatrixXd& x, std::span<const int> y) const {
  if (x.rows() == 0 || static_cast<size_t>(x.rows()) != y.size()) throw ContractError("probe: rows and labels differ");
  const Eigen::VectorXd z = x * w + Eigen::VectorXd::Constant(x.rows(), b);
  size_t correct = 0;
  for (Index i = 0; i < x.rows(); ++i) correct += static_cast<size_t>((z(i) > 0.0 ? 1 : 0) == y[static_cast<size_t>(i)]);
  return static_cast<double>(correct) / static_cast<double>(x.rows());
}

nlohmann::json ProbeReport::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j{{"spe_accuracy", opt(spe_accuracy)},
                   {"com_accuracy", opt(com_accuracy)},
                   {"cross_accuracy", opt(cross_accuracy)},
                   {"train_users", train_users},
                   {"test_users", test_users}};
  j["covariance"] = covariance ? nlohmann::json(*covariance) : nlohmann::json(nullptr);
  return j;
}

ProbeReport probe(const EncoderSet& enc, const Corpus& corpus, std::span<const size_t> users, Domain target,
                  bool shuffle_labels, uint64_t seed) {
  if (users.size() < kMinProbeUsers)
    throw DataError("probe needs at least " + std::to_string(kMinProbeUsers) + " holdout users, got " +
                    std::to_string(users.size()));
  const size_t n_train = users.size() / 2;
  ProbeReport report;
  report.train_users = n_train;
  report.test_users = users.size() - n_train;

  // Rows 2i and 2i+1 are user i's X and Y training portions.
  std::vector<Window> windows;
  std::vector<int> labels;
  for (size_t ui : users) {
    for (Domain d : {Domain::X, Domain::Y}) {
      windows.push_back(make_window(train_portion(corpus.users[ui], d), enc.config.max_len));
      labels.push_back(d == Domain::X ? 1 : 0);
    }
  }
  std::vector<int> train_labels(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(2 * n_train));
  const std::vector<int> test_labels(labels.begin() + static_cast<std::ptrdiff_t>(2 * n_train), labels.end());
  if (shuffle_labels) {
    Rng rng(derive_seed(seed, {9}));
    rng.shuffle(train_labels.begin(), train_labels.end());
  }

  auto accuracy_of = [&](const BackboneParams& p) {
    const Eigen::MatrixXd x = encode_pooled(p, windows).cast<double>();
    const auto tr = static_cast<Index>(2 * n_train);
    const auto model = LogisticProbe::fit(x.topRows(tr), train_labels);
    return model.accuracy(x.bottomRows(x.rows() - tr), test_labels);
  };
  if (enc.spe) report.spe_accuracy = accuracy_of(*enc.spe);
  if (enc.com) report.com_accuracy = accuracy_of(*enc.com);
  if (enc.cross) report.cross_accuracy = accuracy_of(*enc.cross);

  if (enc.spe && enc.com && enc.cross) {
    std::vector<Window> single, cross;
    for (size_t ui : users) {
      single.push_back(make_window(train_portion(corpus.users[ui], target), enc.config.max_len));
      cross.push_back(make_window(cross_train_portion(corpus.users[ui], corpus.vocab, target), enc.config.max_len));
    }
    report.covariance =
        covariance_diagnostic(encode_pooled(*enc.spe, single), encode_pooled(*enc.com, single),
                              encode_pooled(*enc.cross, cross));
  }
  return report;
}

}  // namespace xdrec
