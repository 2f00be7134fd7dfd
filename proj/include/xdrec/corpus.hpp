#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xdrec/autograd.hpp"

namespace xdrec {

enum class Domain : uint8_t { X = 0, Y = 1 };

std::string_view to_string(Domain d);
Domain parse_domain(std::string_view s);  // throws ConfigError
inline Domain other(Domain d) { return d == Domain::X ? Domain::Y : Domain::X; }

struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  Domain domain = Domain::X;
  int64_t timestamp = 0;
};

enum class InputFormat { Tsv };

struct IngestResult {
  std::vector<InteractionRecord> records;
  size_t malformed = 0;
  // 1-based line numbers of the first malformed rows (at most 10).
  std::vector<size_t> malformed_lines;
  std::vector<std::string> warnings;
};

// Reads `user_id\titem_id\tdomain\ttimestamp` rows (header optional).
// Throws DataError when the file is unreadable or more than 10% of rows
// are malformed.
IngestResult ingest(const std::filesystem::path& path, InputFormat format = InputFormat::Tsv);
IngestResult ingest_text(std::string_view text);

// Dense item indices. 0 = PAD, 1 = MASK, items from 2 in first-occurrence order.
class Vocabulary {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kMask = 1;
  static constexpr int32_t kFirstItem = 2;

  // Returns the existing index, or appends. An item seen under two domains
  // is a DataError.
  int32_t add(const std::string& item_id, Domain domain);

  std::optional<int32_t> find(const std::string& item_id) const;
  const std::string& item_id(int32_t index) const;
  Domain domain_of(int32_t index) const;
  bool is_item(int32_t index) const { return index >= kFirstItem && index < size(); }

  // Total size including the reserved tokens.
  int32_t size() const { return kFirstItem + static_cast<int32_t>(items_.size()); }
  int32_t item_count() const { return static_cast<int32_t>(items_.size()); }
  // Indices of the domain's items, ascending.
  const IdxList& items_in(Domain d) const { return d == Domain::X ? x_items_ : y_items_; }

 private:
  std::vector<std::pair<std::string, Domain>> items_;
  std::unordered_map<std::string, int32_t> index_of_;
  IdxList x_items_;
  IdxList y_items_;
};

// train_end is the number of training items; the validation item sits at
// position train_end and the test item at train_end + 1.
struct SplitMarkers {
  int32_t train_end = 0;
  int32_t valid_item = 0;
  int32_t test_item = 0;
};

struct UserSequences {
  std::string user;
  IdxList seq_x;
  IdxList seq_y;
  IdxList seq_cross;
  SplitMarkers split_x;
  SplitMarkers split_y;

  const IdxList& seq(Domain d) const { return d == Domain::X ? seq_x : seq_y; }
  const SplitMarkers& split(Domain d) const { return d == Domain::X ? split_x : split_y; }
};

struct Corpus {
  Vocabulary vocab;
  std::vector<UserSequences> users;
};

inline constexpr int kMinInteractionsPerDomain = 5;

// Filters users below kMinInteractionsPerDomain in either domain, sorts
// stably by timestamp, builds the three views and leave-one-out markers.
Corpus preprocess(std::span<const InteractionRecord> records);

// Training items of the single-domain sequence.
IdxList train_portion(const UserSequences& u, Domain d);
// Items of seq_cross strictly before the `position`-th item of domain d.
IdxList cross_prefix_before(const UserSequences& u, const Vocabulary& vocab, Domain d, size_t position);
// Cross-sequence training portion: everything before the domain's validation item.
IdxList cross_train_portion(const UserSequences& u, const Vocabulary& vocab, Domain d);

// Fixed-length view of a sequence: the most recent min(|seq|, L) items,
// left-padded.
struct Window {
  IdxList items;
  std::vector<uint8_t> valid;

  int length() const { return static_cast<int>(items.size()); }
  int valid_count() const;
};

Window make_window(std::span<const int32_t> seq, int max_len, int32_t pad_index = Vocabulary::kPad);

// Per-domain statistics in the shape of a dataset summary table.
struct DomainStats {
  Domain domain = Domain::X;
  size_t users = 0;
  size_t items = 0;
  size_t interactions = 0;
  double avg_length = 0.0;
  double density = 0.0;
};

double density(size_t interactions, size_t users, size_t items);
std::vector<DomainStats> corpus_stats(const Corpus& corpus);
std::string format_stats_table(const std::vector<DomainStats>& stats);

// Corpus directory: vocab.tsv and sequences.jsonl.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace xdrec
