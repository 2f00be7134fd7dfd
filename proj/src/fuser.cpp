#include "xdrec/fuser.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "xdrec/errors.hpp"
#include "xdrec/tensor_io.hpp"

namespace xdrec {
namespace fs = std::filesystem;

GatingParams GatingParams::init(int d, Rng& rng) {
  GatingParams p;
  p.wq = Var::parameter(xavier_uniform(d, d, rng));
  p.wg = Var::parameter(xavier_uniform(d, 3 * d, rng));
  p.bg = Var::parameter(Mat::Zero(1, d));
  return p;
}

GateMode GateMode::from_switches(const ComponentSwitches& sw) {
  GateMode m;
  m.use_spe = sw.spe;
  m.use_cross = sw.cross;
  m.learned = sw.gate;
  return m;
}

GateOutput gate_tokens(const Var& tokens, const Var& v_spe, const Var& v_cross, const GatingParams& params,
                       const GateMode& mode) {
  const Index n = tokens.rows();
  const Index d = tokens.cols();
  if (v_spe.rows() != n || v_cross.rows() != n || v_spe.cols() != d || v_cross.cols() != d)
    throw ContractError("gate_tokens: preference rows must match token rows");
  if (!mode.use_spe && !mode.use_cross) throw ContractError("gate_tokens: no preference signal enabled");

  GateOutput out;
  auto filled = [n](float v) { return Var::constant(Mat::Constant(n, 1, v)); };
  if (!mode.learned) {
    out.alpha_spe = filled(mode.use_spe ? (mode.use_cross ? 0.5f : 1.0f) : 0.0f);
  } else if (!mode.use_spe) {
    out.alpha_spe = filled(0.0f);
  } else if (!mode.use_cross) {
    out.alpha_spe = filled(1.0f);
  } else {
    // Two-way softmax over h W_q v^k reduces to a sigmoid of the difference.
    const Var q = ops::matmul(tokens, params.wq);
    out.alpha_spe = ops::sigmoid(ops::sub(ops::row_dot(q, v_spe), ops::row_dot(q, v_cross)));
  }
  out.alpha_cross = ops::add_scalar(ops::scale(out.alpha_spe, -1.0f), 1.0f);

  const Var a_spe = ops::mul_col(v_spe, out.alpha_spe);
  const Var a_cross = ops::mul_col(v_cross, out.alpha_cross);
  if (mode.learned) {
    const std::array<Var, 3> parts{a_spe, a_cross, tokens};
    out.gate = ops::sigmoid(ops::add_row(ops::matmul_nt(ops::concat_cols(parts), params.wg), params.bg));
    out.fused = ops::add(a_cross, ops::mul(out.gate, ops::sub(a_spe, a_cross)));
  } else {
    out.gate = Var::constant(Mat::Constant(n, d, 0.5f));
    out.fused = ops::scale(ops::add(a_spe, a_cross), 0.5f);
  }
  return out;
}

SessionState gate_tokens(const Mat& token_states, const Mat& v_spe, const Mat& v_cross, const GatingParams& params,
                         const GateMode& mode) {
  if (v_spe.rows() != 1 || v_cross.rows() != 1) throw ContractError("gate_tokens: expected 1 x d preferences");
  NoGradGuard guard;
  const Index n = token_states.rows();
  const auto g = gate_tokens(Var::constant(token_states), Var::constant(v_spe.replicate(n, 1)),
                             Var::constant(v_cross.replicate(n, 1)), params, mode);
  SessionState s;
  s.token_states = token_states;
  s.alpha_spe = g.alpha_spe.value();
  s.alpha_cross = g.alpha_cross.value();
  s.gate = g.gate.value();
  s.fused_tokens = g.fused.value();
  s.session = n > 0 ? Mat(s.fused_tokens.colwise().mean()) : Mat::Zero(1, token_states.cols());
  return s;
}

Mat session_vector(const SessionState& state) {
  if (state.fused_tokens.rows() == 0) throw ContractError("session_vector: empty session");
  return state.fused_tokens.colwise().mean();
}

double score(std::span<const float> c, std::span<const float> e, int d) {
  if (c.size() != e.size() || c.empty()) throw ContractError("score: dimension mismatch");
  if (d < 1) throw ContractError("score: d must be positive");
  double dot = 0.0;
  for (size_t i = 0; i < c.size(); ++i) dot += static_cast<double>(c[i]) * e[i];
  return dot / std::sqrt(static_cast<double>(d));
}

double score(std::span<const float> c, std::span<const float> e) {
  return score(c, e, static_cast<int>(c.size()));
}

Mat score_all(const Mat& c, const Mat& items) {
  if (c.cols() != items.cols()) throw ContractError("score_all: dimension mismatch");
  return (c * items.transpose()) / std::sqrt(static_cast<float>(c.cols()));
}

Var rec_loss(const Var& scores) {
  const IdxList targets(static_cast<size_t>(scores.rows()), 0);
  return ops::softmax_xent(scores, targets);
}

// ---- config ----

void RecConfig::validate() const {
  if (negatives < 1) throw ConfigError("negatives must be >= 1");
  if (!(learning_rate > 0.0f)) throw ConfigError("stage-2 learning rate must be positive");
  if (epochs < 0) throw ConfigError("stage-2 epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("stage-2 batch size must be >= 1");
  if (session_len < 1) throw ConfigError("session length must be >= 1");
}

nlohmann::json RecConfig::to_json() const {
  return {{"negatives", negatives},
          {"learning_rate", learning_rate},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"session_len", session_len},
          {"freeze_item_embeddings", freeze_item_embeddings},
          {"exclude_history_negatives", exclude_history_negatives},
          {"shuffle", shuffle}};
}

RecConfig RecConfig::from_json(const nlohmann::json& j) {
  RecConfig c;
  c.negatives = j.value("negatives", c.negatives);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.session_len = j.value("session_len", c.session_len);
  c.freeze_item_embeddings = j.value("freeze_item_embeddings", c.freeze_item_embeddings);
  c.exclude_history_negatives = j.value("exclude_history_negatives", c.exclude_history_negatives);
  c.shuffle = j.value("shuffle", c.shuffle);
  c.validate();
  return c;
}

// ---- examples ----

IdxList session_prefix(const UserSequences& u, const Vocabulary& vocab, Domain target, size_t position,
                       bool cross_view) {
  if (cross_view) return cross_prefix_before(u, vocab, target, position);
  const auto& seq = u.seq(target);
  if (position > seq.size()) throw ContractError("session_prefix: position past the end of the sequence");
  return IdxList(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(position));
}

std::vector<Stage2Example> stage2_examples(const Corpus& corpus, Domain target, bool cross_view) {
  std::vector<Stage2Example> out;
  for (size_t ui = 0; ui < corpus.users.size(); ++ui) {
    const auto& u = corpus.users[ui];
    const auto& seq = u.seq(target);
    const auto train_end = static_cast<size_t>(u.split(target).train_end);
    for (size_t k = 0; k < train_end; ++k) {
      if (k == 0 && !cross_view) continue;
      if (k == 0 && session_prefix(u, corpus.vocab, target, 0, true).empty()) continue;
      out.push_back({ui, k, seq[k]});
    }
  }
  return out;
}

IdxList sample_negatives(const IdxList& pool, std::span<const int32_t> exclude, int count, Rng& rng) {
  IdxList candidates;
  candidates.reserve(pool.size());
  for (int32_t i : pool)
    if (!std::binary_search(exclude.begin(), exclude.end(), i)) candidates.push_back(i);
  if (count < 0 || static_cast<size_t>(count) > candidates.size())
    throw ConfigError("cannot draw " + std::to_string(count) + " negatives from " +
                      std::to_string(candidates.size()) + " eligible items");
  // Partial Fisher-Yates.
  for (int i = 0; i < count; ++i) {
    const auto j = static_cast<size_t>(i) + rng.below(candidates.size() - static_cast<size_t>(i));
    std::swap(candidates[static_cast<size_t>(i)], candidates[j]);
  }
  candidates.resize(static_cast<size_t>(count));
  return candidates;
}

// ---- model ----

Recommender::Recommender(BackboneConfig backbone, const Mat& initial_items, GateMode mode, Domain target,
                         IdxList target_items, uint64_t seed)
    : mode_(mode), target_(target), target_items_(std::move(target_items)) {
  backbone.validate();
  if (initial_items.rows() != backbone.vocab_size || initial_items.cols() != backbone.d)
    throw ContractError("initial item table is " + std::to_string(initial_items.rows()) + "x" +
                        std::to_string(initial_items.cols()) + ", expected " + std::to_string(backbone.vocab_size) +
                        "x" + std::to_string(backbone.d));
  if (target_items_.empty()) throw DataError("target domain has no items");
  Rng rng(derive_seed(seed, {4}));
  session_ = BackboneParams::init(backbone, rng);
  session_.item_embeddings = Var::parameter(initial_items);
  gating_ = GatingParams::init(backbone.d, rng);
}

ParamList Recommender::params(bool include_items) const {
  ParamList out;
  for (auto& p : session_.params()) {
    if (p.name == "mlm_bias") continue;
    if (!include_items && p.name == "item_embeddings") continue;
    out.push_back({"session." + p.name, p.var});
  }
  for (auto& p : gating_.params()) out.push_back(p);
  return out;
}

Var Recommender::session_vectors(std::span<const Window> windows, const Mat& v_spe, const Mat& v_cross) const {
  const auto enc = encode_batch(session_, windows);
  const Var vs = ops::repeat_segments(Var::constant(v_spe), enc.offsets);
  const Var vx = ops::repeat_segments(Var::constant(v_cross), enc.offsets);
  const auto g = gate_tokens(enc.tokens, vs, vx, gating_, mode_);
  return ops::segment_mean(g.fused, enc.offsets);
}

Mat Recommender::score_targets(std::span<const Window> windows, const Mat& v_spe, const Mat& v_cross) const {
  NoGradGuard guard;
  const Mat& table = session_.item_embeddings.value();
  Mat items(static_cast<Index>(target_items_.size()), table.cols());
  for (size_t i = 0; i < target_items_.size(); ++i) items.row(static_cast<Index>(i)) = table.row(target_items_[i]);

  Mat out(static_cast<Index>(windows.size()), items.rows());
  constexpr size_t kChunk = 64;
  for (size_t start = 0; start < windows.size(); start += kChunk) {
    const size_t n = std::min(kChunk, windows.size() - start);
    const auto s = static_cast<Index>(start);
    const auto m = static_cast<Index>(n);
    const Var c = session_vectors(windows.subspan(start, n), v_spe.middleRows(s, m), v_cross.middleRows(s, m));
    out.middleRows(s, m) = score_all(c.value(), items);
  }
  return out;
}

void Recommender::save(const fs::path& dir, const nlohmann::json& extra_meta) const {
  ParamList tensors = prefixed("session.", session_.params());
  for (auto& p : gating_.params()) tensors.push_back(p);
  nlohmann::json meta;
  meta["format_version"] = kCheckpointFormatVersion;
  meta["backbone"] = session_.config.to_json();
  meta["mode"] = {{"use_spe", mode_.use_spe}, {"use_cross", mode_.use_cross}, {"learned", mode_.learned}};
  meta["target"] = std::string(to_string(target_));
  meta["target_items"] = target_items_;
  if (!extra_meta.is_null()) meta["info"] = extra_meta;
  save_tensor_dir(dir, tensors, meta);
}

Recommender Recommender::load(const fs::path& dir) {
  const auto src = load_tensor_dir(dir);
  const auto& meta = src.meta;
  if (meta.value("format_version", 0) != kCheckpointFormatVersion)
    throw DataError("unsupported recommender checkpoint version in " + dir.string());
  const auto cfg = BackboneConfig::from_json(meta.at("backbone"));
  GateMode mode;
  mode.use_spe = meta.at("mode").at("use_spe").get<bool>();
  mode.use_cross = meta.at("mode").at("use_cross").get<bool>();
  mode.learned = meta.at("mode").at("learned").get<bool>();
  Recommender r(cfg, Mat::Zero(cfg.vocab_size, cfg.d), mode, parse_domain(meta.at("target").get<std::string>()),
                meta.at("target_items").get<IdxList>(), 0);
  ParamList tensors = prefixed("session.", r.session_.params());
  for (auto& p : r.gating_.params()) tensors.push_back(p);
  if (src.tensors.size() != tensors.size())
    throw DataError("checkpoint " + dir.string() + " has " + std::to_string(src.tensors.size()) +
                    " tensors, expected " + std::to_string(tensors.size()));
  assign_tensors(src, tensors);
  return r;
}

Mat initial_item_table(const EncoderSet& enc) {
  if (enc.spe) return enc.spe->item_embeddings.value();
  if (enc.cross) return enc.cross->item_embeddings.value();
  throw ContractError("no stage-1 encoder with an item table");
}

// ---- training ----

Stage2Trainer::Stage2Trainer(const Corpus& corpus, const PreferenceStore& store, Recommender& model, RecConfig cfg,
                             bool cross_view, uint64_t seed)
    : corpus_(corpus),
      store_(store),
      model_(model),
      cfg_(cfg),
      cross_view_(cross_view),
      seed_(seed),
      opt_(model.params(!cfg.freeze_item_embeddings), AdamConfig{cfg.learning_rate}) {
  cfg_.validate();
  if (!store_.frozen()) throw ContractError("stage 2 requires a frozen preference store");
  if (store_.target() != model_.target()) throw ContractError("preference store and model target differ");
  if (store_.dim() != model_.config().d) throw ContractError("preference dimension differs from the model width");
  if (cfg_.session_len > model_.config().max_len)
    throw ConfigError("session length " + std::to_string(cfg_.session_len) + " exceeds encoder max_len " +
                      std::to_string(model_.config().max_len));
  const auto n_items = model_.target_items().size();
  if (static_cast<size_t>(cfg_.negatives) >= n_items)
    throw ConfigError("negatives per example (" + std::to_string(cfg_.negatives) +
                      ") must be below the target-domain item count (" + std::to_string(n_items) + ")");

  examples_ = stage2_examples(corpus_, model_.target(), cross_view_);
  if (examples_.empty()) throw DataError("no stage-2 training examples");
  for (const auto& u : corpus_.users) {
    store_.at(u.user);  // fail early on a user missing from the store
    const auto train = train_portion(u, model_.target());
    IdxList h(train.begin(), train.end());
    std::sort(h.begin(), h.end());
    h.erase(std::unique(h.begin(), h.end()), h.end());
    history_.push_back(std::move(h));
  }
}

double Stage2Trainer::run_epoch() {
  ++epoch_;
  std::vector<size_t> order(examples_.size());
  std::iota(order.begin(), order.end(), size_t{0});
  if (cfg_.shuffle) {
    Rng shuffle_rng(derive_seed(seed_, {5, static_cast<uint64_t>(epoch_)}));
    shuffle_rng.shuffle(order.begin(), order.end());
  }
  Rng neg_rng(derive_seed(seed_, {6, static_cast<uint64_t>(epoch_)}));

  const int d = model_.config().d;
  const int group = cfg_.negatives + 1;
  const auto all_params = model_.params(true);
  double total = 0.0;
  size_t batches = 0;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg_.batch_size)) {
    const size_t n = std::min(static_cast<size_t>(cfg_.batch_size), order.size() - start);
    std::vector<Window> windows;
    Mat v_spe(static_cast<Index>(n), d), v_cross(static_cast<Index>(n), d);
    IdxList candidates;
    candidates.reserve(n * static_cast<size_t>(group));
    for (size_t b = 0; b < n; ++b) {
      const auto& ex = examples_[order[start + b]];
      const auto& u = corpus_.users[ex.user];
      windows.push_back(
          make_window(session_prefix(u, corpus_.vocab, model_.target(), ex.position, cross_view_), cfg_.session_len));
      const auto& pref = store_.at(u.user);
      v_spe.row(static_cast<Index>(b)) = pref.v_spe;
      v_cross.row(static_cast<Index>(b)) = pref.v_cross;

      IdxList exclude{ex.target};
      if (cfg_.exclude_history_negatives) {
        const auto& h = history_[ex.user];
        exclude.insert(exclude.end(), h.begin(), h.end());
        std::sort(exclude.begin(), exclude.end());
        exclude.erase(std::unique(exclude.begin(), exclude.end()), exclude.end());
      }
      candidates.push_back(ex.target);
      const auto negs = sample_negatives(model_.target_items(), exclude, cfg_.negatives, neg_rng);
      candidates.insert(candidates.end(), negs.begin(), negs.end());
    }

    const Var c = model_.session_vectors(windows, v_spe, v_cross);
    const Var cand = ops::gather_rows(model_.item_table(), candidates);
    const Var scores = ops::scale(ops::group_dot(c, cand, group), 1.0f / std::sqrt(static_cast<float>(d)));
    const Var loss = rec_loss(scores);
    if (!std::isfinite(loss.item()))
      throw NumericalError("non-finite stage-2 loss at batch " + std::to_string(batches) + " of epoch " +
                           std::to_string(epoch_));
    backward(loss);
    opt_.step();
    zero_grad(all_params);
    total += loss.item();
    ++batches;
  }
  return total / static_cast<double>(batches);
}

std::vector<double> Stage2Trainer::train(const fs::path& loss_log) {
  if (!loss_log.empty()) {
    if (loss_log.has_parent_path()) fs::create_directories(loss_log.parent_path());
    std::ofstream(loss_log, std::ios::trunc);
  }
  std::vector<double> history;
  while (epoch_ < cfg_.epochs) {
    history.push_back(run_epoch());
    if (!loss_log.empty()) {
      std::ofstream out(loss_log, std::ios::app);
      out << nlohmann::json{{"epoch", epoch_}, {"loss", history.back()}}.dump() << '\n';
      if (!out) throw DataError("cannot append to " + loss_log.string());
    }
  }
  return history;
}

}  // namespace xdrec
