#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "xdrec/corpus.hpp"

namespace xdrec {

// Generator constants. Each user belongs to one of kArchetypes latent
// groups; a mechanism that fires picks its planted target with probability
// kTransitionSharpness and a uniform domain item otherwise.
inline constexpr int kArchetypes = 4;
inline constexpr double kTransitionSharpness = 0.9;

struct SignalMix {
  double specific = 0.4;
  double common = 0.3;
  double cross_exclusive = 0.3;
};

struct SynthSpec {
  int n_users = 200;
  int n_items_per_domain = 30;
  // Per-domain sequence length range, inclusive.
  std::pair<int, int> seq_len_range{10, 20};
  SignalMix signal_mix;
  uint64_t seed = 7;

  void validate() const;  // throws ConfigError
};

enum class Mechanism { Specific, Common, CrossExclusive, Fallback };
std::string_view to_string(Mechanism m);

struct SynthEvent {
  std::string item_id;
  Domain domain;
  Mechanism mechanism;
};

struct SynthUserLabel {
  std::string user;
  int archetype = 0;
  std::vector<SynthEvent> events;  // chronological
};

// The planted structure of a generated world.
struct SynthWorld {
  std::vector<int> successor_x, successor_y;  // same-domain next item
  std::vector<int> cross_to_x, cross_to_y;    // latest other-domain item -> next item
  std::vector<std::vector<int>> archetype_x, archetype_y;  // preferred item blocks
};

struct SynthCorpus {
  Corpus corpus;
  SynthWorld world;
  std::vector<SynthUserLabel> labels;
  std::vector<InteractionRecord> records;
};

std::string synth_item_id(Domain d, int local);

// Deterministic in spec.seed. The generated records pass through preprocess.
SynthCorpus synthesize(const SynthSpec& spec);

// Writes the corpus files plus synth_labels.jsonl.
void write_synth_corpus(const std::filesystem::path& dir, const SynthCorpus& synth);

}  // namespace xdrec
