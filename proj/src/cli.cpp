#include "xdrec/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

#include "CLI11.hpp"
#include "xdrec/errors.hpp"
#include "xdrec/synth.hpp"
#include "xdrec/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace xdrec {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> parts;
  size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto end = comma == std::string_view::npos ? s.size() : comma;
    auto part = trim(s.substr(start, end - start));
    if (!part.empty()) parts.push_back(std::move(part));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return parts;
}

ConfigError bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  return ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + ": expected " +
                     std::string(expected));
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  const auto v = trim(value);
  T out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || end != v.data() + v.size())
    throw bad_value(key, value, std::is_integral_v<T> ? "an integer" : "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  const auto v = trim(value);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw bad_value(key, value, "true or false");
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<json(const RunConfig&)> get;
};

// Floats go out in their shortest decimal form so that 0.1f reads as 0.1.
template <typename T>
json number_json(T v) {
  if constexpr (std::is_same_v<T, float>) {
    char buf[32];
    const auto end = std::to_chars(buf, buf + sizeof(buf), v).ptr;
    return json(std::stod(std::string(buf, end)));
  } else {
    return json(v);
  }
}

template <typename T, typename Ref>
Field number_field(std::string key, Ref ref) {
  return {key, [key, ref](RunConfig& c, std::string_view v) { ref(c) = parse_number<T>(key, v); },
          [ref](const RunConfig& c) { return number_json<T>(ref(c)); }};
}

template <typename Ref>
Field bool_field(std::string key, Ref ref) {
  return {key, [key, ref](RunConfig& c, std::string_view v) { ref(c) = parse_bool(key, v); },
          [ref](const RunConfig& c) { return json(ref(c)); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back({"corpus", [](RunConfig& c, std::string_view s) { c.corpus = trim(s); },
                 [](const RunConfig& c) { return json(c.corpus.string()); }});
    v.push_back({"out", [](RunConfig& c, std::string_view s) { c.out = trim(s); },
                 [](const RunConfig& c) { return json(c.out.string()); }});
    v.push_back({"target", [](RunConfig& c, std::string_view s) { c.pipeline.target = parse_domain(trim(s)); },
                 [](const RunConfig& c) { return json(std::string(to_string(c.pipeline.target))); }});
    v.push_back({"seeds",
                 [](RunConfig& c, std::string_view s) {
                   c.seeds.clear();
                   for (const auto& p : split_list(s)) c.seeds.push_back(parse_number<uint64_t>("seeds", p));
                 },
                 [](const RunConfig& c) { return json(c.seeds); }});
    v.push_back({"variant", [](RunConfig& c, std::string_view s) { c.variant = parse_variant(trim(s)); },
                 [](const RunConfig& c) { return json(std::string(to_string(c.variant))); }});
    v.push_back({"variants",
                 [](RunConfig& c, std::string_view s) {
                   c.variants.clear();
                   for (const auto& p : split_list(s)) c.variants.push_back(parse_variant(p));
                 },
                 [](const RunConfig& c) {
                   json a = json::array();
                   for (auto x : c.variants) a.push_back(std::string(to_string(x)));
                   return a;
                 }});
    v.push_back({"protocol", [](RunConfig& c, std::string_view s) { c.protocol = parse_protocol(trim(s)); },
                 [](const RunConfig& c) { return json(std::string(to_string(c.protocol))); }});
    v.push_back({"split", [](RunConfig& c, std::string_view s) { c.split = parse_split(trim(s)); },
                 [](const RunConfig& c) { return json(std::string(to_string(c.split))); }});

    v.push_back(number_field<int>("d", [](auto& c) -> auto& { return c.pipeline.backbone.d; }));
    v.push_back(number_field<int>("layers", [](auto& c) -> auto& { return c.pipeline.backbone.layers; }));
    v.push_back(number_field<int>("heads", [](auto& c) -> auto& { return c.pipeline.backbone.heads; }));
    v.push_back(number_field<int>("d_ff", [](auto& c) -> auto& { return c.pipeline.backbone.d_ff; }));
    v.push_back(number_field<int>("max_len", [](auto& c) -> auto& { return c.pipeline.backbone.max_len; }));
    v.push_back(number_field<float>("dropout", [](auto& c) -> auto& { return c.pipeline.backbone.dropout; }));

    v.push_back(number_field<float>("beta1", [](auto& c) -> auto& { return c.pipeline.opd.beta1; }));
    v.push_back(number_field<float>("beta2", [](auto& c) -> auto& { return c.pipeline.opd.beta2; }));
    v.push_back(number_field<float>("beta3", [](auto& c) -> auto& { return c.pipeline.opd.beta3; }));
    v.push_back(number_field<float>("beta4", [](auto& c) -> auto& { return c.pipeline.opd.beta4; }));
    v.push_back(number_field<float>("rho", [](auto& c) -> auto& { return c.pipeline.opd.rho; }));
    v.push_back(number_field<float>("grl_lambda", [](auto& c) -> auto& { return c.pipeline.opd.grl.lambda; }));
    v.push_back(
        number_field<float>("stage1_lr", [](auto& c) -> auto& { return c.pipeline.opd.learning_rate; }));
    v.push_back(number_field<int>("stage1_epochs", [](auto& c) -> auto& { return c.pipeline.opd.epochs; }));
    v.push_back(number_field<int>("stage1_batch", [](auto& c) -> auto& { return c.pipeline.opd.batch_size; }));
    v.push_back(number_field<double>("mask_ratio", [](auto& c) -> auto& { return c.pipeline.opd.mask_ratio; }));
    v.push_back(number_field<int>("patience", [](auto& c) -> auto& { return c.pipeline.opd.patience; }));

    v.push_back(number_field<int>("negatives", [](auto& c) -> auto& { return c.pipeline.rec.negatives; }));
    v.push_back(number_field<float>("lr", [](auto& c) -> auto& { return c.pipeline.rec.learning_rate; }));
    v.push_back(number_field<int>("epochs", [](auto& c) -> auto& { return c.pipeline.rec.epochs; }));
    v.push_back(number_field<int>("batch", [](auto& c) -> auto& { return c.pipeline.rec.batch_size; }));
    v.push_back(number_field<int>("session_len", [](auto& c) -> auto& { return c.pipeline.rec.session_len; }));
    v.push_back(
        bool_field("freeze_items", [](auto& c) -> auto& { return c.pipeline.rec.freeze_item_embeddings; }));
    v.push_back(bool_field("exclude_history_negatives",
                           [](auto& c) -> auto& { return c.pipeline.rec.exclude_history_negatives; }));
    v.push_back(bool_field("shuffle", [](auto& c) -> auto& { return c.pipeline.rec.shuffle; }));
    return v;
  }();
  return f;
}

const Field& field(std::string_view key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::string json_as_text(const json& j) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_array()) {
    std::string s;
    for (const auto& e : j) {
      if (!s.empty()) s += ',';
      s += json_as_text(e);
    }
    return s;
  }
  return j.dump();
}

}  // namespace

// ---- RunConfig ----

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

void RunConfig::set(std::string_view key, std::string_view value) { field(key).set(*this, value); }

std::string RunConfig::get(std::string_view key) const { return json_as_text(field(key).get(*this)); }

void RunConfig::validate() const {
  BackboneConfig b = pipeline.backbone;
  b.vocab_size = Vocabulary::kFirstItem + 1;  // filled from the corpus later
  b.validate();
  pipeline.opd.validate();
  pipeline.rec.validate();
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (variants.empty()) throw ConfigError("at least one variant is required");
}

json RunConfig::to_json() const {
  json j = json::object();
  for (const auto& f : fields()) j[f.key] = f.get(*this);
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  for (const auto& [key, value] : j.items()) c.set(key, json_as_text(value));
  return c;
}

void apply_config_file(RunConfig& cfg, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    cfg.set(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
  }
}

// ---- infrastructure ----

OutputLock::OutputLock(const fs::path& dir) : path_(dir / kFileName) {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0)
    throw ConfigError("output directory " + dir.string() + " is in use by another run (remove " + path_.string() +
                      " if that run is gone)");
  const auto pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::string sha256_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::pair<std::string, fs::path>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (name == OutputLock::kFileName || name.rfind("manifest_", 0) == 0) continue;
    files.emplace_back(fs::relative(e.path(), dir).generic_string(), e.path());
  }
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& [rel, path] : files) listing += rel + '\t' + sha256_file(path) + '\n';
  return sha256_hex(listing);
}

std::string build_id() { return XDREC_BUILD_ID; }

// ---- commands ----

namespace {

fs::path output_root() {
  const char* root = std::getenv(kOutputRootEnv);
  if (root == nullptr || *root == '\0')
    throw ConfigError(std::string("no output location: pass --out or set ") + kOutputRootEnv);
  return root;
}

fs::path resolve_out(const RunConfig& cfg, const std::string& default_sub) {
  return cfg.out.empty() ? output_root() / default_sub : cfg.out;
}

fs::path resolve_corpus(const RunConfig& cfg) { return cfg.corpus.empty() ? output_root() / "corpus" : cfg.corpus; }

Corpus load_corpus(const fs::path& dir) {
  if (!fs::exists(dir / "sequences.jsonl"))
    throw DataError("no corpus at " + dir.string() + "; run `xdrec preprocess` or `xdrec synth` first");
  return read_corpus(dir);
}

void write_manifest(const fs::path& dir, const std::string& command, const json& body) {
  json m = body;
  m["command"] = command;
  m["build_id"] = build_id();
  write_json_file(dir / ("manifest_" + command + ".json"), m);
}

// Records the resolved locations so the manifest alone reproduces the run.
json run_manifest(RunConfig cfg, const fs::path& corpus, const fs::path& out, const json& inputs,
                  const json& outputs) {
  cfg.corpus = corpus;
  cfg.out = out;
  return {{"config", cfg.to_json()}, {"seeds", cfg.seeds}, {"inputs", inputs}, {"outputs", outputs}};
}

// Variants that differ only in the gate share Stage 1.
bool same_stage1(Variant a, Variant b) {
  auto sa = ComponentSwitches::from_variant(a);
  auto sb = ComponentSwitches::from_variant(b);
  sa.gate = sb.gate = true;
  return sa.spe == sb.spe && sa.com == sb.com && sa.cross == sb.cross && sa.grl == sb.grl && sa.align == sb.align &&
         sa.sep == sb.sep;
}

struct Context {
  std::ostream& out;
  std::ostream& err;
};

int cmd_preprocess(const fs::path& input, RunConfig cfg, Context& io) {
  const fs::path out = resolve_out(cfg, "corpus");
  OutputLock lock(out);
  const auto ingested = ingest(input);
  for (const auto& w : ingested.warnings) io.err << "warning: " << w << '\n';
  const Corpus corpus = preprocess(ingested.records);
  write_corpus(out, corpus);
  write_manifest(out, "preprocess",
                 {{"inputs", {{"interactions", sha256_file(input)}}},
                  {"input_path", input.string()},
                  {"malformed_rows", ingested.malformed},
                  {"outputs", {{"corpus", sha256_dir(out)}}}});
  io.out << format_stats_table(corpus_stats(corpus));
  return kExitOk;
}

int cmd_synth(const SynthSpec& spec, RunConfig cfg, Context& io) {
  spec.validate();
  const fs::path out = resolve_out(cfg, "corpus");
  OutputLock lock(out);
  const auto synth = synthesize(spec);
  write_synth_corpus(out, synth);
  const json spec_json = {{"users", spec.n_users},
                          {"items_per_domain", spec.n_items_per_domain},
                          {"len_min", spec.seq_len_range.first},
                          {"len_max", spec.seq_len_range.second},
                          {"mix",
                           {spec.signal_mix.specific, spec.signal_mix.common, spec.signal_mix.cross_exclusive}},
                          {"seed", spec.seed}};
  write_manifest(out, "synth", {{"synth", spec_json}, {"outputs", {{"corpus", sha256_dir(out)}}}});
  io.out << format_stats_table(corpus_stats(synth.corpus));
  return kExitOk;
}

int cmd_pretrain(const RunConfig& cfg, bool resume, Context& io) {
  const fs::path corpus_dir = resolve_corpus(cfg);
  const Corpus corpus = load_corpus(corpus_dir);
  const fs::path out = resolve_out(cfg, "run");
  OutputLock lock(out);
  const fs::path ckpt = out / "stage1_ckpt";
  if (!resume) fs::remove_all(ckpt);
  else if (!fs::exists(ckpt / "state.json")) io.err << "no Stage-1 checkpoint in " << ckpt << "; starting fresh\n";

  const uint64_t seed = cfg.seeds.front();
  const auto s1 = run_stage1(corpus, cfg.pipeline, cfg.variant, seed, out / "stage1_losses.jsonl", ckpt);
  fs::remove_all(out / "encoders");
  s1.encoders.save(out / "encoders");
  s1.store.save(out / "preferences.bin");

  write_manifest(out, "pretrain",
                 run_manifest(cfg, corpus_dir, out, {{"corpus", sha256_dir(corpus_dir)}},
                              {{"preferences", sha256_file(out / "preferences.bin")},
                               {"encoders", sha256_dir(out / "encoders")}}));
  // The log holds every epoch, including ones run before a resume.
  std::ifstream log(out / "stage1_losses.jsonl");
  int epochs = 0;
  std::string last;
  for (std::string line; std::getline(log, line);)
    if (!line.empty()) ++epochs, last = line;
  io.out << "stage 1: " << epochs << " epochs";
  if (!last.empty()) io.out << ", final validation loss " << json::parse(last).at("l_valid").get<double>();
  io.out << "\npreferences: " << s1.store.size() << " users -> " << (out / "preferences.bin").string() << '\n';
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, Context& io) {
  const fs::path corpus_dir = resolve_corpus(cfg);
  const Corpus corpus = load_corpus(corpus_dir);
  const fs::path out = resolve_out(cfg, "run");
  OutputLock lock(out);

  const fs::path store_path = out / "preferences.bin";
  if (!fs::exists(store_path))
    throw DataError("no preference store at " + store_path.string() + "; run `xdrec pretrain` with the same --out");
  const auto store = PreferenceStore::load(store_path);
  if (!store.frozen())
    throw DataError("preference store " + store_path.string() +
                    " is not frozen; re-run `xdrec pretrain` to regenerate it");
  const fs::path pre_manifest = out / "manifest_pretrain.json";
  if (fs::exists(pre_manifest)) {
    const auto m = read_json_file(pre_manifest);
    const auto pre = RunConfig::from_json(m.at("config"));
    if (!same_stage1(pre.variant, cfg.variant))
      throw ConfigError("variant " + std::string(to_string(cfg.variant)) + " cannot reuse Stage 1 trained as " +
                        std::string(to_string(pre.variant)));
    if (m.at("inputs").at("corpus") != sha256_dir(corpus_dir))
      throw DataError("corpus at " + corpus_dir.string() + " changed since pretrain; re-run `xdrec pretrain`");
  }
  const auto encoders = EncoderSet::load(out / "encoders");

  const uint64_t seed = cfg.seeds.front();
  auto model = build_recommender(corpus, cfg.pipeline, encoders, cfg.variant, seed);
  Stage2Trainer trainer(corpus, store, model, cfg.pipeline.rec, ComponentSwitches::from_variant(cfg.variant).cross,
                        derive_seed(seed, {8}));
  const auto losses = trainer.train(out / "stage2_losses.jsonl");
  fs::remove_all(out / "model");
  model.save(out / "model", {{"variant", std::string(to_string(cfg.variant))}, {"seed", seed}});

  write_manifest(out, "train",
                 run_manifest(cfg, corpus_dir, out, {{"corpus", sha256_dir(corpus_dir)}, {"preferences", sha256_file(store_path)}},
                              {{"model", sha256_dir(out / "model")}}));
  io.out << "stage 2: " << losses.size() << " epochs";
  if (!losses.empty()) io.out << ", final loss " << losses.back();
  io.out << "\nmodel -> " << (out / "model").string() << '\n';
  return kExitOk;
}

int cmd_evaluate(const RunConfig& cfg, Context& io) {
  const fs::path corpus_dir = resolve_corpus(cfg);
  const Corpus corpus = load_corpus(corpus_dir);
  const fs::path out = resolve_out(cfg, "run");
  OutputLock lock(out);
  if (!fs::exists(out / "model" / "meta.json"))
    throw DataError("no trained model in " + (out / "model").string() + "; run `xdrec train` first");
  const auto model = Recommender::load(out / "model");
  const auto meta = read_json_file(out / "model" / "meta.json");
  const auto info = meta.value("info", json::object());
  const std::string variant = info.value("variant", std::string(to_string(cfg.variant)));
  const uint64_t seed = info.value("seed", cfg.seeds.front());
  const auto store = PreferenceStore::load(out / "preferences.bin");

  const auto report = evaluate_model(model, corpus, store, cfg.split, cfg.protocol, model.mode().use_cross,
                                     model.config().max_len, seed, variant);
  const std::string stem = "report_" + std::string(to_string(cfg.split)) + "_" + std::string(to_string(cfg.protocol));
  write_json_file(out / (stem + ".json"), report.to_json());
  {
    std::ofstream tsv(out / (stem + ".tsv"), std::ios::binary | std::ios::trunc);
    tsv << report.to_tsv();
  }
  write_manifest(out, "evaluate",
                 run_manifest(cfg, corpus_dir, out,
                              {{"corpus", sha256_dir(corpus_dir)},
                               {"preferences", sha256_file(out / "preferences.bin")},
                               {"model", sha256_dir(out / "model")}},
                              {{stem + ".json", sha256_file(out / (stem + ".json"))}}));
  io.out << report.to_tsv();
  return kExitOk;
}

struct Sweep {
  std::string key;
  std::vector<std::string> values;
};

Sweep parse_sweep(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("--sweep expects key=v1,v2,...");
  Sweep s{trim(std::string_view(text).substr(0, eq)), split_list(std::string_view(text).substr(eq + 1))};
  if (s.values.empty()) throw ConfigError("--sweep needs at least one value");
  RunConfig probe_cfg;
  for (const auto& v : s.values) probe_cfg.set(s.key, v);  // reject bad values before any training
  return s;
}

AblationResult ablate_into(const Corpus& corpus, const RunConfig& cfg, const fs::path& dir, Context& io) {
  const auto result = run_ablation(corpus, cfg.pipeline, cfg.variants, cfg.seeds, cfg.protocol,
                                   [&](const std::string& m) { io.err << m << '\n'; });
  fs::create_directories(dir);
  write_json_file(dir / "ablation.json", result.to_json());
  std::ofstream(dir / "summary.txt", std::ios::binary | std::ios::trunc) << result.summary_table();
  return result;
}

int cmd_ablate(const RunConfig& cfg, const std::string& sweep_text, Context& io) {
  const fs::path corpus_dir = resolve_corpus(cfg);
  const Corpus corpus = load_corpus(corpus_dir);
  const fs::path out = resolve_out(cfg, "ablate");
  OutputLock lock(out);
  const json inputs = {{"corpus", sha256_dir(corpus_dir)}};

  if (sweep_text.empty()) {
    const auto result = ablate_into(corpus, cfg, out, io);
    write_manifest(out, "ablate", run_manifest(cfg, corpus_dir, out, inputs, {{"ablation.json", sha256_file(out / "ablation.json")}}));
    io.out << result.summary_table();
    return kExitOk;
  }

  const auto sweep = parse_sweep(sweep_text);
  std::ostringstream table;
  table << std::fixed << std::setprecision(4);
  table << sweep.key << "\tvariant\tHR@10\tNDCG@10\tHR@20\tNDCG@20\n";
  json outputs = json::object();
  for (const auto& value : sweep.values) {
    RunConfig c = cfg;
    c.set(sweep.key, value);
    c.validate();
    const std::string name = sweep.key + "=" + value;
    const auto result = ablate_into(corpus, c, out / name, io);
    io.out << "== " << name << '\n' << result.summary_table();
    outputs[name] = sha256_file(out / name / "ablation.json");
    const size_t c10 = RankingReport::cutoff_index(10), c20 = RankingReport::cutoff_index(20);
    for (const auto& r : result.variants)
      table << value << '\t' << to_string(r.variant) << '\t' << r.test.hr_mean(c10) << '\t' << r.test.ndcg_mean(c10)
            << '\t' << r.test.hr_mean(c20) << '\t' << r.test.ndcg_mean(c20) << '\n';
  }
  std::ofstream(out / "sweep.tsv", std::ios::binary | std::ios::trunc) << table.str();
  auto m = run_manifest(cfg, corpus_dir, out, inputs, outputs);
  m["sweep"] = {{"key", sweep.key}, {"values", sweep.values}};
  write_manifest(out, "ablate", m);
  io.out << "== sweep\n" << table.str();
  return kExitOk;
}

int cmd_probe(const RunConfig& cfg, bool shuffle_labels, Context& io) {
  const fs::path corpus_dir = resolve_corpus(cfg);
  const Corpus corpus = load_corpus(corpus_dir);
  const fs::path out = resolve_out(cfg, "run");
  OutputLock lock(out);
  if (!fs::exists(out / "encoders"))
    throw DataError("no Stage-1 encoders in " + (out / "encoders").string() + "; run `xdrec pretrain` first");
  const auto enc = EncoderSet::load(out / "encoders");
  std::vector<size_t> users(corpus.users.size());
  for (size_t i = 0; i < users.size(); ++i) users[i] = i;
  const auto report = probe(enc, corpus, users, cfg.pipeline.target, shuffle_labels, cfg.seeds.front());
  auto j = report.to_json();
  j["shuffled_labels"] = shuffle_labels;
  write_json_file(out / "probe.json", j);
  write_manifest(out, "probe",
                 run_manifest(cfg, corpus_dir, out, {{"corpus", sha256_dir(corpus_dir)}, {"encoders", sha256_dir(out / "encoders")}},
                              {{"probe.json", sha256_file(out / "probe.json")}}));
  io.out << j.dump(2) << '\n';
  return kExitOk;
}

// Adds --config and one --<key> flag per RunConfig key.
struct ConfigFlags {
  std::string config_file;
  std::vector<std::tuple<const CLI::App*, CLI::Option*, std::string>> options;
  std::map<std::string, std::string> values;

  void attach(CLI::App* sub, const std::vector<std::string>& only = {}) {
    sub->add_option("--config", config_file, "key = value config file (flags override it)")
        ->check(CLI::ExistingFile);
    for (const auto& key : RunConfig::keys()) {
      if (!only.empty() && std::find(only.begin(), only.end(), key) == only.end()) continue;
      RunConfig defaults;
      auto* opt = sub->add_option("--" + key, values[key], "default: " + defaults.get(key))
                      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
      options.emplace_back(sub, opt, key);
    }
  }

  RunConfig resolve(const CLI::App* sub) const {
    RunConfig cfg;
    if (!config_file.empty()) apply_config_file(cfg, config_file);
    for (const auto& [owner, opt, key] : options)
      if (owner == sub && opt->count() > 0) cfg.set(key, values.at(key));
    cfg.validate();
    return cfg;
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Cross-domain sequential recommender: preprocessing, two-stage training, evaluation", "xdrec");
  app.require_subcommand(1);
  ConfigFlags flags;

  std::string input;
  auto* pre = app.add_subcommand("preprocess", "Ingest a TSV interaction log into a corpus directory");
  pre->add_option("--input", input, "user_id<TAB>item_id<TAB>domain<TAB>timestamp file")
      ->required()
      ->check(CLI::ExistingFile);
  flags.attach(pre, {"out"});

  SynthSpec spec;
  std::string mix;
  auto* syn = app.add_subcommand("synth", "Generate a synthetic two-domain corpus with planted structure");
  syn->add_option("--users", spec.n_users, "number of users")->capture_default_str();
  syn->add_option("--items", spec.n_items_per_domain, "items per domain")->capture_default_str();
  syn->add_option("--len-min", spec.seq_len_range.first, "shortest per-domain sequence")->capture_default_str();
  syn->add_option("--len-max", spec.seq_len_range.second, "longest per-domain sequence")->capture_default_str();
  syn->add_option("--mix", mix, "specific,common,cross_exclusive weights (default 0.4,0.3,0.3)");
  syn->add_option("--seed", spec.seed, "generator seed")->capture_default_str();
  flags.attach(syn, {"out"});

  bool resume = false;
  auto* pt = app.add_subcommand("pretrain", "Stage 1: train the three encoders and freeze preference vectors");
  pt->add_flag("--resume", resume, "continue from the last epoch checkpoint in the output directory");
  flags.attach(pt);

  auto* tr = app.add_subcommand("train", "Stage 2: train the gated recommender on frozen preferences");
  flags.attach(tr);
  auto* ev = app.add_subcommand("evaluate", "Full-ranking HR/NDCG of a trained model");
  flags.attach(ev);

  std::string sweep;
  auto* ab = app.add_subcommand("ablate", "Train and evaluate variants across seeds");
  ab->add_option("--sweep", sweep, "repeat the ablation for key=v1,v2,...");
  flags.attach(ab);

  bool shuffle_labels = false;
  auto* pr = app.add_subcommand("probe", "Linear domain probes on Stage-1 encoders");
  pr->add_flag("--shuffle-labels", shuffle_labels, "permute the training labels (chance-level control)");
  flags.attach(pr);

  Context io{out, err};
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    app.parse(rev);

    if (pre->parsed()) return cmd_preprocess(input, flags.resolve(pre), io);
    if (syn->parsed()) {
      if (!mix.empty()) {
        const auto w = split_list(mix);
        if (w.size() != 3) throw ConfigError("--mix expects three comma-separated weights");
        spec.signal_mix = {parse_number<double>("mix", w[0]), parse_number<double>("mix", w[1]),
                           parse_number<double>("mix", w[2])};
      }
      return cmd_synth(spec, flags.resolve(syn), io);
    }
    if (pt->parsed()) return cmd_pretrain(flags.resolve(pt), resume, io);
    if (tr->parsed()) return cmd_train(flags.resolve(tr), io);
    if (ev->parsed()) return cmd_evaluate(flags.resolve(ev), io);
    if (ab->parsed()) return cmd_ablate(flags.resolve(ab), sweep, io);
    if (pr->parsed()) return cmd_probe(flags.resolve(pr), shuffle_labels, io);
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace xdrec
