#include "xdrec/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "xdrec/errors.hpp"
#include "xdrec/rng.hpp"
#include "xdrec/tensor_io.hpp"

namespace xdrec {

std::string_view to_string(Mechanism m) {
  switch (m) {
    case Mechanism::Specific:
      return "specific";
    case Mechanism::Common:
      return "common";
    case Mechanism::CrossExclusive:
      return "cross_exclusive";
    case Mechanism::Fallback:
      return "fallback";
  }
  return "?";
}

void SynthSpec::validate() const {
  if (n_users <= 0) throw ConfigError("synthetic spec needs at least one user");
  if (n_items_per_domain <= 0) throw ConfigError("synthetic spec needs at least one item per domain");
  if (seq_len_range.first < kMinInteractionsPerDomain || seq_len_range.second < seq_len_range.first)
    throw ConfigError("sequence length range must satisfy " + std::to_string(kMinInteractionsPerDomain) +
                      " <= min <= max");
  const double w[3] = {signal_mix.specific, signal_mix.common, signal_mix.cross_exclusive};
  for (double x : w)
    if (!(x >= 0.0)) throw ConfigError("signal mix weights must be non-negative");
  if (std::abs(w[0] + w[1] + w[2] - 1.0) > 1e-9) throw ConfigError("signal mix weights must sum to 1");
}

std::string synth_item_id(Domain d, int local) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%c%03d", d == Domain::X ? 'x' : 'y', local);
  return buf;
}

namespace {

std::vector<int> single_cycle(int n, Rng& rng) {
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  std::vector<int> next(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) next[static_cast<size_t>(order[static_cast<size_t>(i)])] = order[static_cast<size_t>((i + 1) % n)];
  return next;
}

std::vector<int> permutation(int n, Rng& rng) {
  std::vector<int> p(static_cast<size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  rng.shuffle(p.begin(), p.end());
  return p;
}

std::vector<std::vector<int>> archetype_blocks(int n, Rng& rng) {
  const int size = std::max(1, n / kArchetypes);
  std::vector<std::vector<int>> blocks;
  for (int a = 0; a < kArchetypes; ++a) {
    auto p = permutation(n, rng);
    p.resize(static_cast<size_t>(size));
    blocks.push_back(std::move(p));
  }
  return blocks;
}

}  // namespace

SynthCorpus synthesize(const SynthSpec& spec) {
  spec.validate();
  const int n = spec.n_items_per_domain;
  SynthCorpus out;

  Rng world_rng(derive_seed(spec.seed, {0}));
  auto& world = out.world;
  world.successor_x = single_cycle(n, world_rng);
  world.successor_y = single_cycle(n, world_rng);
  world.cross_to_x = permutation(n, world_rng);
  world.cross_to_y = permutation(n, world_rng);
  world.archetype_x = archetype_blocks(n, world_rng);
  world.archetype_y = archetype_blocks(n, world_rng);

  const double w_specific = spec.signal_mix.specific;
  const double w_common = spec.signal_mix.common;
  constexpr int64_t kBaseTime = 1'600'000'000;

  for (int u = 0; u < spec.n_users; ++u) {
    Rng rng(derive_seed(spec.seed, {1, static_cast<uint64_t>(u)}));
    char name[32];
    std::snprintf(name, sizeof(name), "u%05d", u);
    SynthUserLabel label;
    label.user = name;
    label.archetype = static_cast<int>(rng.below(kArchetypes));

    const auto span = static_cast<uint64_t>(spec.seq_len_range.second - spec.seq_len_range.first + 1);
    const int len_x = spec.seq_len_range.first + static_cast<int>(rng.below(span));
    const int len_y = spec.seq_len_range.first + static_cast<int>(rng.below(span));
    std::vector<Domain> order(static_cast<size_t>(len_x), Domain::X);
    order.insert(order.end(), static_cast<size_t>(len_y), Domain::Y);
    rng.shuffle(order.begin(), order.end());

    int last[2] = {-1, -1};
    for (size_t step = 0; step < order.size(); ++step) {
      const Domain d = order[step];
      const int di = static_cast<int>(d);
      const int oi = 1 - di;
      const auto& successor = d == Domain::X ? world.successor_x : world.successor_y;
      const auto& cross = d == Domain::X ? world.cross_to_x : world.cross_to_y;
      const auto& block = (d == Domain::X ? world.archetype_x : world.archetype_y)[static_cast<size_t>(label.archetype)];

      const double r = rng.uniform();
      Mechanism mech = r < w_specific              ? Mechanism::Specific
                       : r < w_specific + w_common ? Mechanism::Common
                                                   : Mechanism::CrossExclusive;
      int item;
      switch (mech) {
        case Mechanism::Specific:
          if (last[di] < 0) {
            mech = Mechanism::Fallback;
            item = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
          } else {
            item = rng.bernoulli(kTransitionSharpness) ? successor[static_cast<size_t>(last[di])]
                                                       : static_cast<int>(rng.below(static_cast<uint64_t>(n)));
          }
          break;
        case Mechanism::Common:
          item = rng.bernoulli(kTransitionSharpness) ? block[rng.below(block.size())]
                                                     : static_cast<int>(rng.below(static_cast<uint64_t>(n)));
          break;
        default:
          if (last[oi] < 0) {
            mech = Mechanism::Fallback;
            item = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
          } else {
            item = rng.bernoulli(kTransitionSharpness) ? cross[static_cast<size_t>(last[oi])]
                                                       : static_cast<int>(rng.below(static_cast<uint64_t>(n)));
          }
          break;
      }
      last[di] = item;

      InteractionRecord rec;
      rec.user_id = label.user;
      rec.item_id = synth_item_id(d, item);
      rec.domain = d;
      rec.timestamp = kBaseTime + 60 * static_cast<int64_t>(step);
      label.events.push_back({rec.item_id, d, mech});
      out.records.push_back(std::move(rec));
    }
    out.labels.push_back(std::move(label));
  }

  out.corpus = preprocess(out.records);
  return out;
}

void write_synth_corpus(const std::filesystem::path& dir, const SynthCorpus& synth) {
  write_corpus(dir, synth.corpus);
  std::ofstream out(dir / "synth_labels.jsonl", std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + (dir / "synth_labels.jsonl").string());
  for (const auto& label : synth.labels) {
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : label.events)
      events.push_back({{"item", e.item_id}, {"domain", to_string(e.domain)}, {"mechanism", to_string(e.mechanism)}});
    nlohmann::json j = {{"user", label.user}, {"archetype", label.archetype}, {"events", std::move(events)}};
    out << j.dump() << '\n';
  }
  const auto& w = synth.world;
  nlohmann::json world = {{"successor_x", w.successor_x}, {"successor_y", w.successor_y},
                          {"cross_to_x", w.cross_to_x},   {"cross_to_y", w.cross_to_y},
                          {"archetype_x", w.archetype_x}, {"archetype_y", w.archetype_y},
                          {"archetypes", kArchetypes},    {"transition_sharpness", kTransitionSharpness}};
  write_json_file(dir / "synth_world.json", world);
}

}  // namespace xdrec
