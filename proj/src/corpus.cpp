#include "xdrec/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "xdrec/errors.hpp"

namespace xdrec {
namespace fs = std::filesystem;

std::string_view to_string(Domain d) { return d == Domain::X ? "X" : "Y"; }

Domain parse_domain(std::string_view s) {
  if (s == "X" || s == "x") return Domain::X;
  if (s == "Y" || s == "y") return Domain::Y;
  throw ConfigError("unknown domain '" + std::string(s) + "' (expected X or Y)");
}

namespace {

constexpr std::string_view kHeader = "user_id\titem_id\tdomain\ttimestamp";

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (true) {
    const size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

std::optional<InteractionRecord> parse_row(std::string_view line) {
  const auto fields = split_tabs(line);
  if (fields.size() != 4) return std::nullopt;
  for (auto f : fields)
    if (f.empty()) return std::nullopt;
  InteractionRecord rec;
  rec.user_id = std::string(fields[0]);
  rec.item_id = std::string(fields[1]);
  if (fields[2] == "X" || fields[2] == "x")
    rec.domain = Domain::X;
  else if (fields[2] == "Y" || fields[2] == "y")
    rec.domain = Domain::Y;
  else
    return std::nullopt;
  const auto ts = fields[3];
  auto [ptr, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), rec.timestamp);
  if (ec != std::errc() || ptr != ts.data() + ts.size() || rec.timestamp < 0) return std::nullopt;
  return rec;
}

}  // namespace

IngestResult ingest_text(std::string_view text) {
  IngestResult result;
  size_t line_no = 0;
  size_t rows = 0;
  size_t pos = 0;
  bool first_content = true;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (first_content) {
      first_content = false;
      if (line == kHeader) continue;
    }
    ++rows;
    if (auto rec = parse_row(line)) {
      result.records.push_back(std::move(*rec));
    } else {
      ++result.malformed;
      if (result.malformed_lines.size() < 10) result.malformed_lines.push_back(line_no);
    }
  }
  if (rows == 0) {
    result.warnings.push_back("input contains no interaction rows");
    return result;
  }
  if (result.malformed * 10 > rows) {
    std::ostringstream msg;
    msg << result.malformed << " of " << rows << " rows are malformed (more than 10%); first offending lines:";
    for (size_t l : result.malformed_lines) msg << ' ' << l;
    throw DataError(msg.str());
  }
  if (result.malformed > 0) {
    std::ostringstream msg;
    msg << "skipped " << result.malformed << " malformed row(s); lines:";
    for (size_t l : result.malformed_lines) msg << ' ' << l;
    result.warnings.push_back(msg.str());
  }
  return result;
}

IngestResult ingest(const fs::path& path, InputFormat format) {
  if (format != InputFormat::Tsv) throw ConfigError("unsupported input format");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read input file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("error while reading " + path.string());
  return ingest_text(text);
}

int32_t Vocabulary::add(const std::string& item_id, Domain domain) {
  auto it = index_of_.find(item_id);
  if (it != index_of_.end()) {
    if (domain_of(it->second) != domain)
      throw DataError("item '" + item_id + "' appears in both domains; domains must be disjoint");
    return it->second;
  }
  const int32_t index = size();
  items_.emplace_back(item_id, domain);
  index_of_.emplace(item_id, index);
  (domain == Domain::X ? x_items_ : y_items_).push_back(index);
  return index;
}

std::optional<int32_t> Vocabulary::find(const std::string& item_id) const {
  auto it = index_of_.find(item_id);
  if (it == index_of_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::item_id(int32_t index) const {
  if (!is_item(index)) throw std::out_of_range("vocabulary index " + std::to_string(index) + " is not an item");
  return items_[static_cast<size_t>(index - kFirstItem)].first;
}

Domain Vocabulary::domain_of(int32_t index) const {
  if (!is_item(index)) throw std::out_of_range("vocabulary index " + std::to_string(index) + " is not an item");
  return items_[static_cast<size_t>(index - kFirstItem)].second;
}

namespace {

SplitMarkers make_split(const IdxList& seq) {
  const auto n = static_cast<int32_t>(seq.size());
  return SplitMarkers{n - 2, seq[static_cast<size_t>(n - 2)], seq[static_cast<size_t>(n - 1)]};
}

}  // namespace

Corpus preprocess(std::span<const InteractionRecord> records) {
  if (records.empty()) throw DataError("no interaction records to preprocess");

  // Group record positions by user, users in first-appearance order.
  std::unordered_map<std::string, size_t> user_slot;
  std::vector<std::vector<size_t>> by_user;
  std::vector<std::string> user_keys;
  for (size_t i = 0; i < records.size(); ++i) {
    auto [it, inserted] = user_slot.emplace(records[i].user_id, by_user.size());
    if (inserted) {
      by_user.emplace_back();
      user_keys.push_back(records[i].user_id);
    }
    by_user[it->second].push_back(i);
  }

  std::vector<bool> keep(by_user.size(), false);
  for (size_t u = 0; u < by_user.size(); ++u) {
    int nx = 0, ny = 0;
    for (size_t r : by_user[u]) (records[r].domain == Domain::X ? nx : ny)++;
    keep[u] = nx >= kMinInteractionsPerDomain && ny >= kMinInteractionsPerDomain;
  }

  Corpus corpus;
  for (size_t i = 0; i < records.size(); ++i)
    if (keep[user_slot.at(records[i].user_id)]) corpus.vocab.add(records[i].item_id, records[i].domain);

  for (size_t u = 0; u < by_user.size(); ++u) {
    if (!keep[u]) continue;
    auto order = by_user[u];
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return records[a].timestamp < records[b].timestamp; });
    UserSequences seqs;
    seqs.user = user_keys[u];
    for (size_t r : order) {
      const int32_t idx = *corpus.vocab.find(records[r].item_id);
      seqs.seq_cross.push_back(idx);
      (records[r].domain == Domain::X ? seqs.seq_x : seqs.seq_y).push_back(idx);
    }
    seqs.split_x = make_split(seqs.seq_x);
    seqs.split_y = make_split(seqs.seq_y);
    corpus.users.push_back(std::move(seqs));
  }

  if (corpus.users.empty())
    throw DataError("no users left after requiring at least " + std::to_string(kMinInteractionsPerDomain) +
                    " interactions in each domain");
  return corpus;
}

IdxList train_portion(const UserSequences& u, Domain d) {
  const auto& seq = u.seq(d);
  const auto end = static_cast<size_t>(u.split(d).train_end);
  return IdxList(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(std::min(end, seq.size())));
}

IdxList cross_prefix_before(const UserSequences& u, const Vocabulary& vocab, Domain d, size_t position) {
  IdxList out;
  size_t seen = 0;
  for (int32_t item : u.seq_cross) {
    if (vocab.domain_of(item) == d) {
      if (seen == position) return out;
      ++seen;
    }
    out.push_back(item);
  }
  if (position > seen) throw ContractError("cross_prefix_before: position beyond domain sequence");
  return out;
}

IdxList cross_train_portion(const UserSequences& u, const Vocabulary& vocab, Domain d) {
  return cross_prefix_before(u, vocab, d, static_cast<size_t>(u.split(d).train_end));
}

int Window::valid_count() const { return static_cast<int>(std::count(valid.begin(), valid.end(), uint8_t{1})); }

Window make_window(std::span<const int32_t> seq, int max_len, int32_t pad_index) {
  if (max_len < 1) throw ContractError("make_window: window length must be at least 1");
  const size_t len = static_cast<size_t>(max_len);
  const size_t keep = std::min(seq.size(), len);
  Window w;
  w.items.assign(len, pad_index);
  w.valid.assign(len, 0);
  const size_t offset = len - keep;
  for (size_t i = 0; i < keep; ++i) {
    w.items[offset + i] = seq[seq.size() - keep + i];
    w.valid[offset + i] = 1;
  }
  return w;
}

double density(size_t interactions, size_t users, size_t items) {
  if (users == 0 || items == 0) return 0.0;
  return static_cast<double>(interactions) / (static_cast<double>(users) * static_cast<double>(items));
}

std::vector<DomainStats> corpus_stats(const Corpus& corpus) {
  std::vector<DomainStats> out;
  for (Domain d : {Domain::X, Domain::Y}) {
    DomainStats s;
    s.domain = d;
    s.users = corpus.users.size();
    s.items = corpus.vocab.items_in(d).size();
    for (const auto& u : corpus.users) s.interactions += u.seq(d).size();
    s.avg_length = s.users ? static_cast<double>(s.interactions) / static_cast<double>(s.users) : 0.0;
    s.density = density(s.interactions, s.users, s.items);
    out.push_back(s);
  }
  return out;
}

std::string format_stats_table(const std::vector<DomainStats>& stats) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "Domain" << std::right << std::setw(10) << "#Users" << std::setw(10) << "#Items"
     << std::setw(16) << "#Interactions" << std::setw(11) << "Avg. len." << std::setw(11) << "Density" << '\n';
  for (const auto& s : stats) {
    os << std::left << std::setw(8) << to_string(s.domain) << std::right << std::setw(10) << s.users << std::setw(10)
       << s.items << std::setw(16) << s.interactions << std::setw(11) << std::fixed << std::setprecision(1)
       << s.avg_length << std::setw(10) << std::setprecision(3) << s.density * 100.0 << "%\n";
  }
  return os.str();
}

namespace {

nlohmann::json split_json(const SplitMarkers& s) {
  return {{"train_end", s.train_end}, {"valid_item", s.valid_item}, {"test_item", s.test_item}};
}

SplitMarkers split_from_json(const nlohmann::json& j) {
  return SplitMarkers{j.at("train_end").get<int32_t>(), j.at("valid_item").get<int32_t>(),
                      j.at("test_item").get<int32_t>()};
}

void check_split(const UserSequences& u, Domain d) {
  const auto& seq = u.seq(d);
  const auto& s = u.split(d);
  const auto n = static_cast<int32_t>(seq.size());
  if (n < kMinInteractionsPerDomain || s.train_end != n - 2 || s.valid_item != seq[static_cast<size_t>(n - 2)] ||
      s.test_item != seq[static_cast<size_t>(n - 1)])
    throw DataError("inconsistent split markers for user '" + u.user + "' in domain " + std::string(to_string(d)));
}

}  // namespace

void write_corpus(const fs::path& dir, const Corpus& corpus) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "vocab.tsv", std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / "vocab.tsv").string());
    out << "index\titem_id\tdomain\n";
    for (int32_t i = Vocabulary::kFirstItem; i < corpus.vocab.size(); ++i)
      out << i << '\t' << corpus.vocab.item_id(i) << '\t' << to_string(corpus.vocab.domain_of(i)) << '\n';
  }
  std::ofstream out(dir / "sequences.jsonl", std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + (dir / "sequences.jsonl").string());
  for (const auto& u : corpus.users) {
    nlohmann::json j = {{"user", u.user},           {"seq_x", u.seq_x},
                        {"seq_y", u.seq_y},         {"seq_cross", u.seq_cross},
                        {"split_x", split_json(u.split_x)}, {"split_y", split_json(u.split_y)}};
    out << j.dump() << '\n';
  }
}

Corpus read_corpus(const fs::path& dir) {
  Corpus corpus;
  std::ifstream vin(dir / "vocab.tsv");
  if (!vin) throw DataError("corpus directory " + dir.string() + " has no readable vocab.tsv");
  std::string line;
  std::getline(vin, line);
  while (std::getline(vin, line)) {
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 3) throw DataError("malformed vocab.tsv line: " + line);
    const int32_t idx = corpus.vocab.add(std::string(fields[1]), parse_domain(fields[2]));
    if (std::to_string(idx) != fields[0]) throw DataError("vocab.tsv indices are not contiguous at: " + line);
  }
  std::ifstream sin(dir / "sequences.jsonl");
  if (!sin) throw DataError("corpus directory " + dir.string() + " has no readable sequences.jsonl");
  while (std::getline(sin, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      UserSequences u;
      u.user = j.at("user").get<std::string>();
      u.seq_x = j.at("seq_x").get<IdxList>();
      u.seq_y = j.at("seq_y").get<IdxList>();
      u.seq_cross = j.at("seq_cross").get<IdxList>();
      u.split_x = split_from_json(j.at("split_x"));
      u.split_y = split_from_json(j.at("split_y"));
      for (int32_t item : u.seq_cross)
        if (!corpus.vocab.is_item(item)) throw DataError("sequence references unknown item index");
      check_split(u, Domain::X);
      check_split(u, Domain::Y);
      corpus.users.push_back(std::move(u));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed sequences.jsonl line: " + std::string(e.what()));
    }
  }
  if (corpus.users.empty()) throw DataError("corpus " + dir.string() + " contains no users");
  return corpus;
}

}  // namespace xdrec
