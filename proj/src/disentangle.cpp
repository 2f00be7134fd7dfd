#include "xdrec/disentangle.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "xdrec/errors.hpp"
#include "xdrec/tensor_io.hpp"

namespace xdrec {
namespace fs = std::filesystem;

// ---- discriminator and losses ----

Discriminator Discriminator::init(int d, Rng& rng) {
  const int hidden = std::max(1, d / 2);
  Discriminator D;
  D.w1 = Var::parameter(xavier_uniform(d, hidden, rng));
  D.b1 = Var::parameter(Mat::Zero(1, hidden));
  D.w2 = Var::parameter(xavier_uniform(hidden, 1, rng));
  D.b2 = Var::parameter(Mat::Zero(1, 1));
  return D;
}

Discriminator Discriminator::clone() const {
  auto copy = [](const Var& v) { return Var::parameter(v.value()); };
  return Discriminator{copy(w1), copy(b1), copy(w2), copy(b2)};
}

ParamList Discriminator::params() const { return {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}}; }

Var Discriminator::logits(const Var& pooled) const {
  return ops::linear(ops::tanh(ops::linear(pooled, w1, b1)), w2, b2);
}

Mat Discriminator::probability(const Mat& pooled) const {
  NoGradGuard guard;
  Mat z = logits(Var::constant(pooled)).value();
  constexpr float lo = std::numeric_limits<float>::min();
  const float hi = std::nextafter(1.0f, 0.0f);
  return z.unaryExpr([&](float x) { return std::clamp(1.0f / (1.0f + std::exp(-x)), lo, hi); });
}

void GrlConfig::validate() const {
  if (!(lambda > 0.0f)) throw ConfigError("GRL lambda must be positive");
}

Mat grl_backward(const Mat& upstream, const GrlConfig& cfg) { return -cfg.lambda * upstream; }

std::vector<float> domain_labels(std::span<const Domain> domains) {
  std::vector<float> y;
  y.reserve(domains.size());
  for (Domain d : domains) y.push_back(d == Domain::X ? 1.0f : 0.0f);
  return y;
}

Var disc_loss_spe(const Discriminator& disc, const Var& pooled, std::span<const float> labels) {
  return ops::bce_with_logits(disc.logits(pooled), labels);
}

Var disc_loss_com(const Discriminator& disc, const Var& pooled, std::span<const float> labels, const GrlConfig& cfg,
                  bool reverse) {
  const Var input = reverse ? ops::grad_reverse(pooled, cfg.lambda) : pooled;
  return ops::bce_with_logits(disc.logits(input), labels);
}

Var align_loss(const Var& pooled_cross, const Var& pooled_com) {
  if (pooled_cross.rows() != pooled_com.rows() || pooled_cross.cols() != pooled_com.cols())
    throw ContractError("align_loss: shape mismatch");
  return ops::mean(ops::row_sqnorm(ops::sub(pooled_cross, ops::stop_gradient(pooled_com))));
}

Var sep_loss(const Var& pooled_cross, const Var& pooled_spe, float rho) {
  if (!(rho > 0.0f)) throw ContractError("sep_loss: rho must be positive");
  if (pooled_cross.rows() != pooled_spe.rows() || pooled_cross.cols() != pooled_spe.cols())
    throw ContractError("sep_loss: shape mismatch");
  const Var dist = ops::row_norm(ops::sub(pooled_cross, pooled_spe));
  return ops::mean(ops::relu(ops::add_scalar(ops::scale(dist, -1.0f), rho)));
}

// ---- variants and config ----

namespace {
constexpr std::array<std::pair<Variant, std::string_view>, 8> kVariantNames = {{
    {Variant::Full, "full"},
    {Variant::NoSpe, "no_spe"},
    {Variant::NoCom, "no_com"},
    {Variant::NoCross, "no_cross"},
    {Variant::NoGrl, "no_grl"},
    {Variant::NoAlign, "no_align"},
    {Variant::NoSep, "no_sep"},
    {Variant::NoGate, "no_gate"},
}};
}  // namespace

std::string_view to_string(Variant v) {
  for (const auto& [k, name] : kVariantNames)
    if (k == v) return name;
  return "?";
}

Variant parse_variant(std::string_view s) {
  std::string valid;
  for (const auto& [k, name] : kVariantNames) {
    if (name == s) return k;
    valid += (valid.empty() ? "" : ", ") + std::string(name);
  }
  throw ConfigError("unknown variant '" + std::string(s) + "'; valid variants: " + valid);
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = [] {
    std::vector<Variant> out;
    for (const auto& [k, name] : kVariantNames) out.push_back(k);
    return out;
  }();
  return v;
}

ComponentSwitches ComponentSwitches::from_variant(Variant v) {
  ComponentSwitches s;
  switch (v) {
    case Variant::Full:
      break;
    case Variant::NoSpe:
      s.spe = false;
      break;
    case Variant::NoCom:
      s.com = false;
      break;
    case Variant::NoCross:
      s.cross = false;
      break;
    case Variant::NoGrl:
      s.grl = false;
      break;
    case Variant::NoAlign:
      s.align = false;
      break;
    case Variant::NoSep:
      s.sep = false;
      break;
    case Variant::NoGate:
      s.gate = false;
      break;
  }
  return s;
}

void OpdConfig::validate() const {
  for (float b : {beta1, beta2, beta3, beta4})
    if (!(b >= 0.0f)) throw ConfigError("loss weights beta1..beta4 must be non-negative");
  if (!(rho > 0.0f)) throw ConfigError("rho must be positive");
  if (!(learning_rate > 0.0f)) throw ConfigError("stage-1 learning rate must be positive");
  if (epochs < 0) throw ConfigError("stage-1 epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("stage-1 batch size must be at least 1");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must be in (0, 1)");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  grl.validate();
}

nlohmann::json OpdConfig::to_json() const {
  return {{"beta1", beta1},           {"beta2", beta2},       {"beta3", beta3},           {"beta4", beta4},
          {"rho", rho},               {"learning_rate", learning_rate}, {"epochs", epochs},
          {"batch_size", batch_size}, {"mask_ratio", mask_ratio},       {"patience", patience},
          {"grl_lambda", grl.lambda}};
}

OpdConfig OpdConfig::from_json(const nlohmann::json& j) {
  OpdConfig c;
  c.beta1 = j.at("beta1").get<float>();
  c.beta2 = j.at("beta2").get<float>();
  c.beta3 = j.at("beta3").get<float>();
  c.beta4 = j.at("beta4").get<float>();
  c.rho = j.at("rho").get<float>();
  c.learning_rate = j.at("learning_rate").get<float>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.mask_ratio = j.at("mask_ratio").get<double>();
  c.patience = j.at("patience").get<int>();
  c.grl.lambda = j.at("grl_lambda").get<float>();
  return c;
}

// ---- encoder set ----

EncoderSet EncoderSet::init(const BackboneConfig& cfg, const ComponentSwitches& sw, Rng& rng) {
  EncoderSet e;
  e.config = cfg;
  const auto base = BackboneParams::init(cfg, rng);
  if (sw.spe) e.spe = base.clone();
  if (sw.com) e.com = base.clone();
  if (sw.cross) e.cross = base.clone();
  if (sw.needs_discriminator()) e.disc = Discriminator::init(cfg.d, rng);
  return e;
}

std::vector<std::pair<std::string, ParamList>> EncoderSet::parameter_sets() const {
  std::vector<std::pair<std::string, ParamList>> out;
  if (spe) out.emplace_back("spe", spe->params());
  if (com) out.emplace_back("com", com->params());
  if (cross) out.emplace_back("cross", cross->params());
  if (disc) out.emplace_back("disc", disc->params());
  return out;
}

ParamList EncoderSet::all_params() const {
  ParamList out;
  for (const auto& [name, list] : parameter_sets()) {
    auto p = prefixed(name + ".", list);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

void EncoderSet::save(const fs::path& dir) const {
  fs::create_directories(dir);
  if (spe) save_backbone(dir / "spe", *spe);
  if (com) save_backbone(dir / "com", *com);
  if (cross) save_backbone(dir / "cross", *cross);
  if (disc) save_tensor_dir(dir / "disc", disc->params(), {{"d", config.d}});
  write_json_file(dir / "encoders.json", {{"backbone", config.to_json()},
                                          {"spe", spe.has_value()},
                                          {"com", com.has_value()},
                                          {"cross", cross.has_value()},
                                          {"disc", disc.has_value()}});
}

EncoderSet EncoderSet::load(const fs::path& dir) {
  const auto meta = read_json_file(dir / "encoders.json");
  EncoderSet e;
  e.config = BackboneConfig::from_json(meta.at("backbone"));
  auto load_one = [&](const char* name) -> std::optional<BackboneParams> {
    if (!meta.at(name).get<bool>()) return std::nullopt;
    auto p = load_backbone(dir / name);
    if (!(p.config == e.config)) throw DataError(std::string("encoder ") + name + " config differs from encoders.json");
    return p;
  };
  e.spe = load_one("spe");
  e.com = load_one("com");
  e.cross = load_one("cross");
  if (meta.at("disc").get<bool>()) {
    Rng rng(0);
    e.disc = Discriminator::init(e.config.d, rng);
    assign_tensors(load_tensor_dir(dir / "disc"), e.disc->params());
  }
  return e;
}

// ---- batches and sub-step objectives ----

Stage1Batch make_stage1_batch(const Corpus& corpus, std::span<const size_t> users, Domain target, int max_len,
                              double mask_ratio, Rng& rng) {
  Stage1Batch b;
  for (size_t i = 0; i < users.size(); ++i) {
    const auto& u = corpus.users[users[i]];
    for (Domain d : {Domain::X, Domain::Y}) {
      b.single.push_back(make_window(train_portion(u, d), max_len));
      b.labels.push_back(d == Domain::X ? 1.0f : 0.0f);
      b.owner.push_back(static_cast<int32_t>(i));
    }
    b.cross.push_back(make_window(cross_train_portion(u, corpus.vocab, target), max_len));
  }
  b.single_masked = mask_items(b.single, mask_ratio, rng);
  b.cross_masked = mask_items(b.cross, mask_ratio, rng);
  return b;
}

Stage1Terms loss_spe(const EncoderSet& enc, const Stage1Batch& batch, const OpdConfig& cfg) {
  if (!enc.spe || !enc.disc) throw ContractError("loss_spe: specific encoder and discriminator required");
  Stage1Terms t;
  const Var mlm = mlm_loss(*enc.spe, batch.single_masked);
  const auto pooled = encode_batch(*enc.spe, batch.single).pooled;
  const Var disc = disc_loss_spe(*enc.disc, pooled, batch.labels);
  t.mlm = mlm.item();
  t.disc = disc.item();
  t.total = ops::add(mlm, ops::scale(disc, cfg.beta1));
  return t;
}

Stage1Terms loss_com(const EncoderSet& enc, const Stage1Batch& batch, const OpdConfig& cfg,
                     const ComponentSwitches& sw, Mat* com_pooled_out) {
  if (!enc.com || !enc.disc) throw ContractError("loss_com: common encoder and discriminator required");
  Stage1Terms t;
  const auto pooled = encode_batch(*enc.com, batch.single).pooled;
  if (com_pooled_out) *com_pooled_out = pooled.value();
  const Var disc = disc_loss_com(*enc.disc, pooled, batch.labels, cfg.grl, sw.grl);
  t.disc = disc.item();
  t.total = ops::scale(disc, cfg.beta2);
  return t;
}

Stage1Terms loss_cross(const EncoderSet& enc, const Stage1Batch& batch, const OpdConfig& cfg,
                       const ComponentSwitches& sw, const Mat* com_pooled) {
  if (!enc.cross) throw ContractError("loss_cross: cross encoder required");
  Stage1Terms t;
  const Var mlm = mlm_loss(*enc.cross, batch.cross_masked);
  t.mlm = mlm.item();
  Var total = mlm;
  const bool need_align = sw.align_active() && enc.com.has_value();
  const bool need_sep = sw.sep_active() && enc.spe.has_value();
  if (need_align || need_sep) {
    // Each user's cross vector is paired with both of the user's
    // single-domain vectors.
    const Var cross = ops::gather_rows(encode_batch(*enc.cross, batch.cross).pooled, batch.owner);
    if (need_align) {
      Mat target;
      if (com_pooled) {
        target = *com_pooled;
      } else {
        target = encode_pooled(*enc.com, batch.single);
      }
      const Var align = align_loss(cross, Var::constant(std::move(target)));
      t.align = align.item();
      total = ops::add(total, ops::scale(align, cfg.beta3));
    }
    if (need_sep) {
      const Var spe = encode_batch(*enc.spe, batch.single).pooled;
      const Var sep = sep_loss(cross, spe, cfg.rho);
      t.sep = sep.item();
      total = ops::add(total, ops::scale(sep, cfg.beta4));
    }
  }
  t.total = total;
  return t;
}

nlohmann::json EpochLosses::to_json() const {
  return {{"epoch", epoch},         {"l_mlm_spe", l_mlm_spe}, {"l_disc_spe", l_disc_spe},
          {"l_disc_com", l_disc_com}, {"l_mlm_cross", l_mlm_cross}, {"l_align", l_align},
          {"l_sep", l_sep},         {"l_valid", l_valid}};
}

// ---- trainer ----

namespace {

const char* substep_name(SubStep s) {
  switch (s) {
    case SubStep::A:
      return "A";
    case SubStep::B:
      return "B";
    default:
      return "C";
  }
}

std::optional<Adam> make_adam(const std::optional<BackboneParams>& p, float lr) {
  if (!p) return std::nullopt;
  return Adam(p->params(), AdamConfig{lr});
}

}  // namespace

Stage1Trainer::Stage1Trainer(const Corpus& corpus, Domain target, BackboneConfig backbone, OpdConfig cfg,
                             ComponentSwitches sw, uint64_t seed)
    : corpus_(corpus), target_(target), cfg_(cfg), sw_(sw), seed_(seed) {
  cfg_.validate();
  if (corpus.users.empty()) throw DataError("stage 1 needs at least one user");
  backbone.vocab_size = corpus.vocab.size();
  Rng rng(derive_seed(seed, {1}));
  enc_ = EncoderSet::init(backbone, sw_, rng);
  opt_spe_ = make_adam(enc_.spe, cfg_.learning_rate);
  opt_com_ = make_adam(enc_.com, cfg_.learning_rate);
  opt_cross_ = make_adam(enc_.cross, cfg_.learning_rate);
  if (enc_.disc) {
    opt_disc_.emplace(enc_.disc->params(), AdamConfig{cfg_.learning_rate});
    opt_disc_com_.emplace(enc_.disc->params(), AdamConfig{cfg_.learning_rate});
  }
}

void Stage1Trainer::check_finite(const Stage1Terms& t, SubStep s, size_t index) const {
  if (!std::isfinite(t.total.item()))
    throw NumericalError("non-finite loss in stage-1 sub-step " + std::string(substep_name(s)) + " at batch " +
                         std::to_string(index) + " of epoch " + std::to_string(epoch_ + 1));
}

void Stage1Trainer::step_batch(const Stage1Batch& batch, size_t index, EpochLosses& acc) {
  // A: specific encoder and discriminator.
  if (enc_.spe) {
    opt_spe_->zero_grad();
    opt_disc_->zero_grad();
    const auto t = loss_spe(enc_, batch, cfg_);
    check_finite(t, SubStep::A, index);
    backward(t.total);
    opt_spe_->step();
    opt_disc_->step();
    acc.l_mlm_spe += t.mlm;
    acc.l_disc_spe += t.disc;
  }
  if (hook_) hook_(SubStep::A, index);

  // B: common encoder through the reversal layer, and discriminator.
  Mat com_pooled;
  if (enc_.com) {
    opt_com_->zero_grad();
    opt_disc_com_->zero_grad();
    const auto t = loss_com(enc_, batch, cfg_, sw_, &com_pooled);
    check_finite(t, SubStep::B, index);
    backward(t.total);
    opt_com_->step();
    opt_disc_com_->step();
    acc.l_disc_com += t.disc;
  }
  if (hook_) hook_(SubStep::B, index);

  // C: cross encoder; the specific encoder only through separation.
  if (enc_.cross) {
    opt_cross_->zero_grad();
    if (opt_spe_) opt_spe_->zero_grad();
    const auto t = loss_cross(enc_, batch, cfg_, sw_, enc_.com ? &com_pooled : nullptr);
    check_finite(t, SubStep::C, index);
    backward(t.total);
    opt_cross_->step();
    if (opt_spe_ && sw_.sep_active() && cfg_.beta4 > 0.0f) opt_spe_->step(/*skip_untouched=*/true);
    acc.l_mlm_cross += t.mlm;
    acc.l_align += t.align;
    acc.l_sep += t.sep;
  }
  if (hook_) hook_(SubStep::C, index);
}

EpochLosses Stage1Trainer::run_epoch() {
  const auto e = static_cast<uint64_t>(epoch_);
  std::vector<size_t> order(corpus_.users.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng order_rng(derive_seed(seed_, {2, e}));
  order_rng.shuffle(order.begin(), order.end());
  Rng mask_rng(derive_seed(seed_, {3, e}));

  EpochLosses acc;
  const auto bs = static_cast<size_t>(cfg_.batch_size);
  size_t batches = 0;
  for (size_t start = 0; start < order.size(); start += bs) {
    const size_t n = std::min(bs, order.size() - start);
    const auto batch = make_stage1_batch(corpus_, std::span<const size_t>(order).subspan(start, n), target_,
                                         enc_.config.max_len, cfg_.mask_ratio, mask_rng);
    step_batch(batch, batches, acc);
    ++batches;
  }
  const double nb = static_cast<double>(std::max<size_t>(batches, 1));
  for (double* v : {&acc.l_mlm_spe, &acc.l_disc_spe, &acc.l_disc_com, &acc.l_mlm_cross, &acc.l_align, &acc.l_sep})
    *v /= nb;
  ++epoch_;
  acc.epoch = epoch_;
  for (const auto& [name, list] : enc_.parameter_sets())
    for (const auto& p : list)
      if (!p.var.value().allFinite())
        throw NumericalError("non-finite parameter " + name + "." + p.name + " after epoch " + std::to_string(epoch_));
  return acc;
}

namespace {

// Masks only the final valid position of every window.
MaskedBatch mask_last(std::span<const Window> windows) {
  MaskedBatch b;
  for (const auto& w : windows) {
    Window in = w;
    IdxList targets(w.items.size(), Vocabulary::kPad);
    std::vector<uint8_t> mask(w.items.size(), 0);
    const auto last = static_cast<size_t>(w.length() - 1);
    if (w.valid[last]) {
      mask[last] = 1;
      targets[last] = w.items[last];
      in.items[last] = Vocabulary::kMask;
    }
    b.inputs.push_back(std::move(in));
    b.targets.push_back(std::move(targets));
    b.mask_positions.push_back(std::move(mask));
  }
  return b;
}

double chunked_mlm(const BackboneParams& p, const MaskedBatch& all) {
  NoGradGuard guard;
  constexpr size_t kChunk = 64;
  double total = 0.0;
  size_t count = 0;
  for (size_t s = 0; s < all.inputs.size(); s += kChunk) {
    const size_t n = std::min(kChunk, all.inputs.size() - s);
    MaskedBatch part;
    part.inputs.assign(all.inputs.begin() + s, all.inputs.begin() + s + n);
    part.targets.assign(all.targets.begin() + s, all.targets.begin() + s + n);
    part.mask_positions.assign(all.mask_positions.begin() + s, all.mask_positions.begin() + s + n);
    const size_t m = part.masked_count();
    total += mlm_loss(p, part).item() * static_cast<double>(m);
    count += m;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace

double Stage1Trainer::validation_loss() const {
  const int L = enc_.config.max_len;
  std::vector<Window> spe_w, cross_w;
  for (const auto& u : corpus_.users) {
    const auto& split = u.split(target_);
    const int32_t valid = u.seq(target_)[static_cast<size_t>(split.train_end)];
    auto single = train_portion(u, target_);
    single.push_back(valid);
    spe_w.push_back(make_window(single, L));
    auto cross = cross_train_portion(u, corpus_.vocab, target_);
    cross.push_back(valid);
    cross_w.push_back(make_window(cross, L));
  }
  double sum = 0.0;
  int parts = 0;
  if (enc_.spe) {
    sum += chunked_mlm(*enc_.spe, mask_last(spe_w));
    ++parts;
  }
  if (enc_.cross) {
    sum += chunked_mlm(*enc_.cross, mask_last(cross_w));
    ++parts;
  }
  return parts ? sum / parts : 0.0;
}

std::vector<EpochLosses> Stage1Trainer::train(const fs::path& loss_log, const fs::path& checkpoint_dir) {
  if (!loss_log.empty() && loss_log.has_parent_path()) fs::create_directories(loss_log.parent_path());
  if (!checkpoint_dir.empty() && fs::exists(checkpoint_dir / "state.json")) {
    load_state(checkpoint_dir);
    if (!loss_log.empty() && fs::exists(loss_log)) {
      // Drop log lines written after the checkpoint.
      std::ifstream in(loss_log);
      std::vector<std::string> lines;
      for (std::string line; std::getline(in, line) && static_cast<int>(lines.size()) < epoch_;)
        if (!line.empty()) lines.push_back(line);
      in.close();
      std::ofstream out(loss_log, std::ios::trunc);
      for (const auto& l : lines) out << l << '\n';
    }
  } else if (!loss_log.empty()) {
    std::ofstream(loss_log, std::ios::trunc);
  }

  std::vector<EpochLosses> history;
  while (epoch_ < cfg_.epochs && !stopped_) {
    auto losses = run_epoch();
    losses.l_valid = validation_loss();
    if (!std::isfinite(losses.l_valid))
      throw NumericalError("non-finite validation loss after epoch " + std::to_string(epoch_));
    if (epoch_ == 1 || losses.l_valid < best_valid_ - 1e-6) {
      best_valid_ = losses.l_valid;
      bad_epochs_ = 0;
    } else if (++bad_epochs_ >= cfg_.patience) {
      stopped_ = true;
    }
    history.push_back(losses);
    if (!loss_log.empty()) {
      std::ofstream out(loss_log, std::ios::app);
      out << losses.to_json().dump() << '\n';
      if (!out) throw DataError("cannot append to " + loss_log.string());
    }
    if (!checkpoint_dir.empty()) save_state(checkpoint_dir);
  }
  return history;
}

void Stage1Trainer::save_state(const fs::path& dir) const {
  fs::create_directories(dir);
  enc_.save(dir / "encoders");
  nlohmann::json steps = nlohmann::json::object();
  auto save_opt = [&](const std::optional<Adam>& opt, const char* name) {
    if (!opt) return;
    save_tensor_dir(dir / (std::string("adam_") + name), opt->state(), {{"steps", opt->steps()}});
    steps[name] = opt->steps();
  };
  save_opt(opt_spe_, "spe");
  save_opt(opt_com_, "com");
  save_opt(opt_cross_, "cross");
  save_opt(opt_disc_, "disc");
  save_opt(opt_disc_com_, "disc_com");
  const nlohmann::json state = {{"epoch", epoch_},         {"best_valid", best_valid_}, {"bad_epochs", bad_epochs_},
                                {"stopped", stopped_},     {"seed", seed_},             {"target", to_string(target_)},
                                {"adam_steps", steps},     {"config", cfg_.to_json()}};
  write_json_file(dir / "state.json.tmp", state);
  fs::rename(dir / "state.json.tmp", dir / "state.json");
}

void Stage1Trainer::load_state(const fs::path& dir) {
  const auto state = read_json_file(dir / "state.json");
  if (state.at("seed").get<uint64_t>() != seed_) throw ConfigError("checkpoint in " + dir.string() + " has a different seed");
  if (parse_domain(state.at("target").get<std::string>()) != target_)
    throw ConfigError("checkpoint in " + dir.string() + " has a different target domain");
  auto loaded = EncoderSet::load(dir / "encoders");
  if (loaded.spe.has_value() != enc_.spe.has_value() || loaded.com.has_value() != enc_.com.has_value() ||
      loaded.cross.has_value() != enc_.cross.has_value())
    throw ConfigError("checkpoint in " + dir.string() + " was written by a different variant");
  // Copy values into the existing parameter nodes so optimizers stay bound.
  const auto dst = enc_.all_params();
  const auto src = loaded.all_params();
  if (dst.size() != src.size()) throw DataError("checkpoint parameter count mismatch");
  for (size_t i = 0; i < dst.size(); ++i) {
    if (src[i].var.rows() != dst[i].var.rows() || src[i].var.cols() != dst[i].var.cols())
      throw DataError("checkpoint tensor " + src[i].name + " has the wrong shape");
    auto v = dst[i].var;
    v.mutable_value() = src[i].var.value();
  }
  auto load_opt = [&](std::optional<Adam>& opt, const char* name) {
    if (!opt) return;
    const auto td = load_tensor_dir(dir / (std::string("adam_") + name));
    assign_tensors(td, opt->state());
    opt->set_steps(td.meta.at("steps").get<int64_t>());
  };
  load_opt(opt_spe_, "spe");
  load_opt(opt_com_, "com");
  load_opt(opt_cross_, "cross");
  load_opt(opt_disc_, "disc");
  load_opt(opt_disc_com_, "disc_com");
  epoch_ = state.at("epoch").get<int>();
  best_valid_ = state.at("best_valid").get<double>();
  bad_epochs_ = state.at("bad_epochs").get<int>();
  stopped_ = state.at("stopped").get<bool>();
}

// ---- preference store ----

void PreferenceStore::set(const std::string& user, Mat v_spe, Mat v_cross) {
  if (frozen_) throw ContractError("preference store is frozen; cannot write vectors for user " + user);
  if (v_spe.rows() != 1 || v_spe.cols() != d_ || v_cross.rows() != 1 || v_cross.cols() != d_)
    throw ContractError("preference vectors must be 1 x " + std::to_string(d_));
  auto it = index_.find(user);
  if (it != index_.end()) {
    entries_[it->second].v_spe = std::move(v_spe);
    entries_[it->second].v_cross = std::move(v_cross);
    return;
  }
  index_.emplace(user, entries_.size());
  entries_.push_back({user, std::move(v_spe), std::move(v_cross)});
}

const PreferenceStore::Entry& PreferenceStore::at(const std::string& user) const {
  auto it = index_.find(user);
  if (it == index_.end()) throw DataError("no preference vectors for user " + user);
  return entries_[it->second];
}

namespace {

constexpr char kStoreMagic[4] = {'X', 'D', 'P', 'S'};
constexpr uint32_t kStoreVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(size_t n) const {
    if (pos_ + n > b_.size()) throw DataError("preference store is truncated");
  }
  std::string_view b_;
  size_t pos_ = 0;
};

}  // namespace

std::string PreferenceStore::serialize() const {
  std::string out(kStoreMagic, 4);
  put<uint32_t>(out, kStoreVersion);
  put<uint32_t>(out, frozen_ ? 1u : 0u);
  put<uint32_t>(out, static_cast<uint32_t>(d_));
  put<uint8_t>(out, static_cast<uint8_t>(target_));
  put<uint64_t>(out, entries_.size());
  for (const auto& e : entries_) {
    put<uint32_t>(out, static_cast<uint32_t>(e.user.size()));
    out += e.user;
    out.append(reinterpret_cast<const char*>(e.v_spe.data()), sizeof(float) * static_cast<size_t>(d_));
    out.append(reinterpret_cast<const char*>(e.v_cross.data()), sizeof(float) * static_cast<size_t>(d_));
  }
  return out;
}

PreferenceStore PreferenceStore::deserialize(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4) != std::string_view(kStoreMagic, 4)) throw DataError("not a preference store");
  if (r.get<uint32_t>() != kStoreVersion) throw DataError("unsupported preference store version");
  const bool frozen = r.get<uint32_t>() != 0;
  const int d = static_cast<int>(r.get<uint32_t>());
  const auto target = static_cast<Domain>(r.get<uint8_t>());
  if (d <= 0 || (target != Domain::X && target != Domain::Y)) throw DataError("corrupt preference store header");
  PreferenceStore s(d, target);
  const auto n = r.get<uint64_t>();
  for (uint64_t i = 0; i < n; ++i) {
    const auto len = r.get<uint32_t>();
    std::string user(r.take(len));
    Mat a(1, d), b(1, d);
    const auto bytes_per = sizeof(float) * static_cast<size_t>(d);
    std::memcpy(a.data(), r.take(bytes_per).data(), bytes_per);
    std::memcpy(b.data(), r.take(bytes_per).data(), bytes_per);
    s.set(user, std::move(a), std::move(b));
  }
  if (!r.done()) throw DataError("trailing bytes in preference store");
  if (frozen) s.freeze();
  return s;
}

void PreferenceStore::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  const auto bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

PreferenceStore PreferenceStore::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read preference store " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

PreferenceStore extract_preferences(const EncoderSet& enc, const Corpus& corpus, Domain target) {
  const int L = enc.config.max_len;
  const int d = enc.config.d;
  std::vector<Window> spe_w, cross_w;
  for (const auto& u : corpus.users) {
    const auto spe_seq = train_portion(u, target);
    if (spe_seq.empty()) throw DataError("user " + u.user + " has an empty training portion");
    spe_w.push_back(make_window(spe_seq, L));
    cross_w.push_back(make_window(cross_train_portion(u, corpus.vocab, target), L));
  }
  const Index n = static_cast<Index>(corpus.users.size());
  const Mat spe = enc.spe ? encode_pooled(*enc.spe, spe_w) : Mat::Zero(n, d);
  const Mat cross = enc.cross ? encode_pooled(*enc.cross, cross_w) : Mat::Zero(n, d);
  PreferenceStore store(d, target);
  for (Index i = 0; i < n; ++i) store.set(corpus.users[static_cast<size_t>(i)].user, spe.row(i), cross.row(i));
  store.freeze();
  return store;
}

// ---- covariance diagnostic ----

double cross_covariance_norm(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows()) throw ContractError("covariance populations must have the same number of rows");
  if (a.rows() < 2) throw DataError("covariance diagnostic needs at least 2 users");
  const Eigen::MatrixXd x = a.cast<double>();
  const Eigen::MatrixXd y = b.cast<double>();
  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
  return (xc.transpose() * yc / static_cast<double>(a.rows() - 1)).norm();
}

std::array<std::array<double, 3>, 3> covariance_diagnostic(const Mat& spe, const Mat& com, const Mat& cross) {
  const Mat* pops[3] = {&spe, &com, &cross};
  std::array<std::array<double, 3>, 3> out{};
  for (int i = 0; i < 3; ++i)
    for (int j = i; j < 3; ++j) out[i][j] = out[j][i] = cross_covariance_norm(*pops[i], *pops[j]);
  return out;
}

}  // namespace xdrec
