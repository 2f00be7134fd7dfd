#include "xdrec/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "xdrec/errors.hpp"
#include "xdrec/tensor_io.hpp"

namespace xdrec {
namespace fs = std::filesystem;

void BackboneConfig::validate() const {
  if (d <= 0 || layers <= 0 || heads <= 0 || d_ff <= 0 || max_len <= 0)
    throw ConfigError("backbone dimensions must be positive");
  if (d % heads != 0) throw ConfigError("d must be divisible by the number of heads");
  if (vocab_size <= Vocabulary::kFirstItem) throw ConfigError("vocabulary must contain at least one item");
  if (dropout < 0.0f || dropout >= 1.0f) throw ConfigError("dropout must be in [0, 1)");
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"d", d},           {"layers", layers},         {"heads", heads},
          {"d_ff", d_ff},     {"max_len", max_len},       {"vocab_size", vocab_size},
          {"dropout", dropout}, {"format_version", kCheckpointFormatVersion}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  if (j.value("format_version", 0) != kCheckpointFormatVersion)
    throw DataError("unsupported checkpoint format version");
  BackboneConfig c;
  c.d = j.at("d").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.dropout = j.value("dropout", 0.0f);
  return c;
}

Mat xavier_uniform(Index rows, Index cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>((2.0 * rng.uniform() - 1.0) * limit);
  return m;
}

Mat normal_matrix(Index rows, Index cols, double stddev, Rng& rng) {
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal() * stddev);
  return m;
}

BackboneParams BackboneParams::init(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  BackboneParams p;
  p.config = cfg;
  const Index d = cfg.d;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  p.item_embeddings = Var::parameter(normal_matrix(cfg.vocab_size, d, emb_std, rng));
  p.positional_embeddings = Var::parameter(normal_matrix(cfg.max_len, d, emb_std, rng));
  auto zeros = [](Index n) { return Var::parameter(Mat::Zero(1, n)); };
  for (int k = 0; k < cfg.layers; ++k) {
    EncoderLayer l;
    l.wq = Var::parameter(xavier_uniform(d, d, rng));
    l.bq = zeros(d);
    l.wk = Var::parameter(xavier_uniform(d, d, rng));
    l.bk = zeros(d);
    l.wv = Var::parameter(xavier_uniform(d, d, rng));
    l.bv = zeros(d);
    l.wo = Var::parameter(xavier_uniform(d, d, rng));
    l.bo = zeros(d);
    l.ln_gamma = Var::parameter(Mat::Ones(1, d));
    l.ln_beta = zeros(d);
    l.w1 = Var::parameter(xavier_uniform(d, cfg.d_ff, rng));
    l.b1 = zeros(cfg.d_ff);
    l.w2 = Var::parameter(xavier_uniform(cfg.d_ff, d, rng));
    l.b2 = zeros(d);
    p.layers.push_back(std::move(l));
  }
  p.mlm_bias = zeros(cfg.vocab_size);
  return p;
}

ParamList BackboneParams::params() const {
  ParamList out{{"item_embeddings", item_embeddings}, {"positional_embeddings", positional_embeddings}};
  for (size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    const std::string pre = "layers." + std::to_string(k) + ".";
    for (const auto& [name, var] : std::initializer_list<std::pair<const char*, Var>>{
             {"wq", l.wq}, {"bq", l.bq}, {"wk", l.wk}, {"bk", l.bk}, {"wv", l.wv},
             {"bv", l.bv}, {"wo", l.wo}, {"bo", l.bo}, {"ln_gamma", l.ln_gamma}, {"ln_beta", l.ln_beta},
             {"w1", l.w1}, {"b1", l.b1}, {"w2", l.w2}, {"b2", l.b2}})
      out.push_back({pre + name, var});
  }
  out.push_back({"mlm_bias", mlm_bias});
  return out;
}

BackboneParams BackboneParams::clone() const {
  auto copy = [](const Var& v) { return Var::parameter(v.value()); };
  BackboneParams p;
  p.config = config;
  p.item_embeddings = copy(item_embeddings);
  p.positional_embeddings = copy(positional_embeddings);
  for (const auto& l : layers) {
    p.layers.push_back(EncoderLayer{copy(l.wq), copy(l.bq), copy(l.wk), copy(l.bk), copy(l.wv), copy(l.bv),
                                    copy(l.wo), copy(l.bo), copy(l.ln_gamma), copy(l.ln_beta), copy(l.w1),
                                    copy(l.b1), copy(l.w2), copy(l.b2)});
  }
  p.mlm_bias = copy(mlm_bias);
  return p;
}

bool BackboneParams::all_finite() const {
  for (const auto& p : params())
    if (!p.var.value().allFinite()) return false;
  return true;
}

int EncodedBatch::row_of(size_t b, int t) const {
  for (int r = offsets[b]; r < offsets[b + 1]; ++r)
    if (positions[static_cast<size_t>(r)] == t) return r;
  return -1;
}

namespace {

Var maybe_dropout(const Var& x, float rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0f) return x;
  Mat keep(x.rows(), x.cols());
  const float scale = 1.0f / (1.0f - rate);
  for (Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng->uniform() < rate ? 0.0f : scale;
  return ops::mul(x, Var::constant(std::move(keep)));
}

}  // namespace

EncodedBatch encode_batch(const BackboneParams& params, std::span<const Window> windows, Rng* dropout_rng) {
  const auto& cfg = params.config;
  EncodedBatch out;
  IdxList items;
  IdxList positions;
  out.offsets.push_back(0);
  for (const auto& w : windows) {
    if (w.length() > cfg.max_len)
      throw ContractError("encode: window length " + std::to_string(w.length()) + " exceeds max_len " +
                          std::to_string(cfg.max_len));
    for (int t = 0; t < w.length(); ++t) {
      if (!w.valid[static_cast<size_t>(t)]) continue;
      items.push_back(w.items[static_cast<size_t>(t)]);
      positions.push_back(t);
    }
    out.offsets.push_back(static_cast<int>(items.size()));
  }
  out.positions.assign(positions.begin(), positions.end());

  Var h = ops::add(ops::gather_rows(params.item_embeddings, items), ops::gather_rows(params.positional_embeddings, positions));
  for (const auto& l : params.layers) {
    Var q = ops::linear(h, l.wq, l.bq);
    Var k = ops::linear(h, l.wk, l.bk);
    Var v = ops::linear(h, l.wv, l.bv);
    Var att = ops::linear(ops::segment_attention(q, k, v, out.offsets, cfg.heads), l.wo, l.bo);
    att = maybe_dropout(att, cfg.dropout, dropout_rng);
    Var x = ops::layer_norm(ops::add(att, h), l.ln_gamma, l.ln_beta);
    Var hidden = maybe_dropout(ops::gelu(ops::linear(x, l.w1, l.b1)), cfg.dropout, dropout_rng);
    h = ops::linear(hidden, l.w2, l.b2);
  }
  out.tokens = h;
  out.pooled = ops::segment_mean(h, out.offsets);
  return out;
}

EncodedSequence encode(const BackboneParams& params, const Window& window) {
  NoGradGuard guard;
  const auto enc = encode_batch(params, std::span<const Window>(&window, 1));
  EncodedSequence out;
  out.tokens = Mat::Zero(window.length(), params.config.d);
  for (int r = 0; r < enc.offsets[1]; ++r) out.tokens.row(enc.positions[static_cast<size_t>(r)]) = enc.tokens.value().row(r);
  out.pooled = enc.pooled.value();
  out.mask = window.valid;
  return out;
}

Mat encode_pooled(const BackboneParams& params, std::span<const Window> windows, size_t chunk) {
  NoGradGuard guard;
  Mat out(static_cast<Index>(windows.size()), params.config.d);
  for (size_t start = 0; start < windows.size(); start += chunk) {
    const size_t n = std::min(chunk, windows.size() - start);
    const auto enc = encode_batch(params, windows.subspan(start, n));
    out.middleRows(static_cast<Index>(start), static_cast<Index>(n)) = enc.pooled.value();
  }
  return out;
}

size_t MaskedBatch::masked_count() const {
  size_t n = 0;
  for (const auto& row : mask_positions) n += static_cast<size_t>(std::count(row.begin(), row.end(), uint8_t{1}));
  return n;
}

MaskedBatch mask_items(std::span<const Window> windows, double mask_ratio, Rng& rng) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ContractError("mask_items: mask_ratio must be in (0, 1)");
  MaskedBatch batch;
  for (const auto& w : windows) {
    Window in = w;
    IdxList targets(w.items.size(), Vocabulary::kPad);
    std::vector<uint8_t> masked(w.items.size(), 0);
    int last_valid = -1;
    bool any = false;
    for (int t = 0; t < w.length(); ++t) {
      if (!w.valid[static_cast<size_t>(t)]) continue;
      last_valid = t;
      if (rng.bernoulli(mask_ratio)) {
        masked[static_cast<size_t>(t)] = 1;
        any = true;
      }
    }
    if (!any && last_valid >= 0) masked[static_cast<size_t>(last_valid)] = 1;
    for (size_t t = 0; t < masked.size(); ++t) {
      if (!masked[t]) continue;
      targets[t] = w.items[t];
      in.items[t] = Vocabulary::kMask;
    }
    batch.inputs.push_back(std::move(in));
    batch.targets.push_back(std::move(targets));
    batch.mask_positions.push_back(std::move(masked));
  }
  return batch;
}

Var mlm_logits(const BackboneParams& params, const Var& rows) {
  return ops::add_row(ops::matmul_nt(rows, params.item_embeddings), params.mlm_bias);
}

Var mlm_loss(const BackboneParams& params, const EncodedBatch& encoded, const MaskedBatch& batch) {
  IdxList rows;
  IdxList targets;
  for (size_t b = 0; b < batch.inputs.size(); ++b) {
    for (size_t t = 0; t < batch.mask_positions[b].size(); ++t) {
      if (!batch.mask_positions[b][t]) continue;
      const int r = encoded.row_of(b, static_cast<int>(t));
      if (r < 0) throw ContractError("mlm_loss: masked position is padding");
      rows.push_back(r);
      targets.push_back(batch.targets[b][t]);
    }
  }
  if (rows.empty()) return Var::constant(Mat::Zero(1, 1));
  return ops::softmax_xent(mlm_logits(params, ops::gather_rows(encoded.tokens, rows)), targets);
}

Var mlm_loss(const BackboneParams& params, const MaskedBatch& batch) {
  return mlm_loss(params, encode_batch(params, batch.inputs), batch);
}

double grad_check(const std::function<double(std::span<const double>)>& f, std::span<const double> analytic,
                  std::span<const double> point, double epsilon) {
  if (analytic.size() != point.size()) throw ContractError("grad_check: gradient and point sizes differ");
  std::vector<double> x(point.begin(), point.end());
  double worst = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + epsilon;
    const double up = f(x);
    x[i] = orig - epsilon;
    const double down = f(x);
    x[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericalError("grad_check: non-finite function value");
    const double numeric = (up - down) / (2.0 * epsilon);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

std::vector<ParamCoord> sample_coords(const ParamList& params, int per_tensor, uint64_t seed) {
  Rng rng(derive_seed(seed, {0x67726164ULL}));
  std::vector<ParamCoord> coords;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto size = static_cast<uint64_t>(params[i].var.value().size());
    for (int s = 0; s < per_tensor && size > 0; ++s) coords.push_back({i, static_cast<Index>(rng.below(size))});
  }
  return coords;
}

std::vector<double> finite_difference(const std::function<Var()>& loss_fn, const ParamList& params,
                                      std::span<const ParamCoord> coords, double epsilon) {
  NoGradGuard guard;
  std::vector<double> out;
  out.reserve(coords.size());
  for (const auto& c : coords) {
    auto var = params[c.tensor].var;
    float& slot = var.mutable_value().data()[c.flat];
    const float orig = slot;
    slot = static_cast<float>(orig + epsilon);
    const double up = loss_fn().item();
    slot = static_cast<float>(orig - epsilon);
    const double down = loss_fn().item();
    slot = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericalError("finite_difference: non-finite loss at " + params[c.tensor].name);
    out.push_back((up - down) / (2.0 * epsilon));
  }
  return out;
}

std::vector<double> analytic_gradient(const std::function<Var()>& loss_fn, const ParamList& params,
                                      std::span<const ParamCoord> coords) {
  zero_grad(params);
  const Var loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericalError("analytic_gradient: non-finite loss");
  backward(loss);
  std::vector<double> out;
  for (const auto& c : coords) {
    const auto& node = *params[c.tensor].var.node();
    out.push_back(node.grad.size() == node.value.size() ? node.grad.data()[c.flat] : 0.0);
  }
  return out;
}

double grad_check(const std::function<Var()>& loss_fn, const ParamList& params, const GradCheckOptions& opts) {
  const auto coords = sample_coords(params, opts.samples_per_tensor, opts.seed);
  const auto analytic = analytic_gradient(loss_fn, params, coords);
  const auto numeric = finite_difference(loss_fn, params, coords, opts.epsilon);
  double worst = 0.0;
  for (size_t i = 0; i < coords.size(); ++i)
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(analytic[i])));
  return worst;
}

void save_backbone(const fs::path& dir, const BackboneParams& params) {
  save_tensor_dir(dir, params.params(), params.config.to_json());
}

BackboneParams load_backbone(const fs::path& dir) {
  const auto src = load_tensor_dir(dir);
  const auto cfg = BackboneConfig::from_json(src.meta);
  Rng rng(0);
  auto params = BackboneParams::init(cfg, rng);
  const auto list = params.params();
  if (src.tensors.size() != list.size())
    throw DataError("checkpoint " + dir.string() + " has " + std::to_string(src.tensors.size()) +
                    " tensors, expected " + std::to_string(list.size()));
  assign_tensors(src, list);
  return params;
}

}  // namespace xdrec
