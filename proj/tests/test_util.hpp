#pragma once

#include <cstring>
#include <vector>

#include "xdrec/backbone.hpp"
#include "xdrec/rng.hpp"
#include "xdrec/synth.hpp"

namespace xdrec::testing {

inline BackboneConfig tiny_config(int vocab = 20, int d = 8, int max_len = 6) {
  BackboneConfig c;
  c.d = d;
  c.layers = 2;
  c.heads = 2;
  c.d_ff = 4 * d;
  c.max_len = max_len;
  c.vocab_size = vocab;
  return c;
}

// Windows with between 1 and max_len valid items drawn from [2, vocab).
inline std::vector<Window> random_windows(size_t n, const BackboneConfig& cfg, Rng& rng) {
  std::vector<Window> out;
  for (size_t i = 0; i < n; ++i) {
    const auto len = 1 + rng.below(static_cast<uint64_t>(cfg.max_len));
    IdxList seq;
    for (uint64_t t = 0; t < len; ++t)
      seq.push_back(Vocabulary::kFirstItem + static_cast<int32_t>(rng.below(static_cast<uint64_t>(cfg.vocab_size - 2))));
    out.push_back(make_window(seq, cfg.max_len));
  }
  return out;
}

inline bool same_values(const ParamList& a, const ParamList& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    const Mat& x = a[i].var.value();
    const Mat& y = b[i].var.value();
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<size_t>(x.size())) != 0) return false;
  }
  return true;
}

inline Corpus synthetic_corpus(int users, uint64_t seed, SignalMix mix = {}, int items = 30,
                               std::pair<int, int> lengths = {10, 20}) {
  SynthSpec spec;
  spec.n_users = users;
  spec.n_items_per_domain = items;
  spec.seq_len_range = lengths;
  spec.signal_mix = mix;
  spec.seed = seed;
  return synthesize(spec).corpus;
}

inline std::vector<ParamList> snapshot_sets(const std::vector<std::pair<std::string, ParamList>>& sets) {
  std::vector<ParamList> out;
  for (const auto& [name, list] : sets) {
    ParamList copy;
    for (const auto& p : list) copy.push_back({p.name, Var::constant(p.var.value())});
    out.push_back(std::move(copy));
  }
  return out;
}

}  // namespace xdrec::testing
