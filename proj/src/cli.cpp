#include "segcvae/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include "segcvae/checkpoint.hpp"
#include "segcvae/corpus.hpp"
#include "segcvae/errors.hpp"
#include "segcvae/eval.hpp"
#include "segcvae/gradient_suite.hpp"
#include "segcvae/hash.hpp"

namespace segcvae::cli {

namespace fs = std::filesystem;
using corpus::DialoguePair;
using corpus::Vocabulary;

namespace {

constexpr double kGradTolerance = 1e-4;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t parse_positive(const std::string& key, const std::string& v, int line) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || out == 0) {
    throw TypeError("line " + std::to_string(line) + ": " + key + " must be a positive integer, got '" + v + "'",
                    line);
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v, int line) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw TypeError("line " + std::to_string(line) + ": " + key + " must be a non-negative integer, got '" + v + "'",
                    line);
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v, int line, bool positive) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(out) || (positive && out <= 0) ||
      (!positive && out < 0)) {
    throw TypeError("line " + std::to_string(line) + ": " + key + " must be a " +
                        (positive ? "positive" : "non-negative") + " number, got '" + v + "'",
                    line);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v, int line) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw TypeError("line " + std::to_string(line) + ": " + key + " must be true or false, got '" + v + "'", line);
}

struct Key {
  std::string name;
  std::function<void(const std::string&, int)> set;
  std::function<std::optional<std::string>()> get;
};

std::vector<Key> keys(RunConfig& c, const fs::path& base) {
  auto size_key = [](const char* name, std::size_t& ref) {
    return Key{name, [&ref, name](const std::string& v, int l) { ref = parse_positive(name, v, l); },
               [&ref] { return std::optional(std::to_string(ref)); }};
  };
  auto opt_size_key = [](const char* name, std::optional<std::size_t>& ref) {
    return Key{name, [&ref, name](const std::string& v, int l) { ref = parse_positive(name, v, l); },
               [&ref] { return ref ? std::optional(std::to_string(*ref)) : std::nullopt; }};
  };
  auto real_key = [](const char* name, double& ref, bool positive) {
    return Key{name, [&ref, name, positive](const std::string& v, int l) { ref = parse_double(name, v, l, positive); },
               [&ref] { return std::optional(format_double(ref)); }};
  };
  auto flag_key = [](const char* name, bool& ref) {
    return Key{name, [&ref, name](const std::string& v, int l) { ref = parse_bool(name, v, l); },
               [&ref] { return std::optional(std::string(ref ? "true" : "false")); }};
  };
  auto path_key = [base](const char* name, std::optional<fs::path>& ref) {
    return Key{name,
               [&ref, base](const std::string& v, int) {
                 fs::path p(v);
                 ref = p.is_relative() && !base.empty() ? base / p : p;
               },
               [&ref] { return ref ? std::optional(ref->string()) : std::nullopt; }};
  };
  auto& m = c.model;
  auto& t = c.training;
  return {
      path_key("train_data", c.data.train_data),
      path_key("valid_data", c.data.valid_data),
      path_key("embedding_file", c.data.embedding_file),
      size_key("max_vocab_size", c.data.max_vocab_size),
      size_key("max_clen", m.max_clen),
      size_key("n_emb", m.n_emb),
      size_key("n_hid", m.n_hid),
      size_key("d_z", m.d_z),
      size_key("m", m.kernel_m),
      size_key("chan", m.chan),
      size_key("num_triggers", m.num_triggers),
      real_key("tau", m.tau, true),
      flag_key("no_is", m.ablation.no_is),
      flag_key("no_eg", m.ablation.no_eg),
      flag_key("no_san", m.ablation.no_san),
      flag_key("no_scn", m.ablation.no_scn),
      flag_key("no_sdn", m.ablation.no_sdn),
      real_key("learning_rate", t.learning_rate, true),
      size_key("batch_size", t.batch_size),
      size_key("epochs", t.epochs),
      opt_size_key("snorm_step", t.snorm_step),
      size_key("kl_anneal_steps", t.kl_anneal_steps),
      Key{"seed", [&t](const std::string& v, int l) { t.seed = parse_u64("seed", v, l); },
          [&t] { return std::optional(std::to_string(t.seed)); }},
      Key{"lambda_constant",
          [&t](const std::string& v, int l) { t.lambda_constant = parse_double("lambda_constant", v, l, false); },
          [&t] { return t.lambda_constant ? std::optional(format_double(*t.lambda_constant)) : std::nullopt; }},
      real_key("clip_norm", t.clip_norm, true),
      real_key("beta1", t.beta1, false),
      real_key("beta2", t.beta2, false),
      real_key("adam_epsilon", t.adam_epsilon, true),
      opt_size_key("max_steps", t.max_steps),
  };
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("cannot read " + path.string());
  return in;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DomainError("cannot write " + path.string());
  return out;
}

std::vector<DialoguePair> load_pairs(const fs::path& path) {
  auto in = open_in(path);
  return corpus::read_pairs(in);
}

std::vector<corpus::EncodedPair> encode_all(std::span<const DialoguePair> pairs, const Vocabulary& vocab,
                                            std::size_t max_clen) {
  std::vector<corpus::EncodedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(corpus::encode_pair(p, vocab, max_clen));
  return out;
}

struct LoadedModel {
  model::SegCvae model;
  Vocabulary vocab;
};

// The metric vocabulary carries the trained embedding from the checkpoint.
LoadedModel load_model(const fs::path& dir) {
  auto ck = Checkpoint::load(dir / "best.ckpt");
  auto net = model::SegCvae::from_checkpoint(ck);
  auto in = open_in(dir / "vocab.txt");
  std::vector<std::string> tokens;
  std::string line;
  for (std::size_t i = 0; std::getline(in, line); ++i) {
    if (i < Vocabulary::kSpecials) {
      if (line != Vocabulary::special_tokens()[i]) throw FormatError("vocab.txt must start with the special tokens");
      continue;
    }
    tokens.push_back(line);
  }
  const auto& emb = net.embedding();
  Vocabulary vocab(std::move(tokens), std::vector<double>(emb.values().begin(), emb.values().end()), emb.cols());
  if (vocab.size() != net.config().vocab_size) throw FormatError("vocab.txt does not match the checkpoint");
  return {std::move(net), std::move(vocab)};
}

// Contexts in first-seen order with all of their responses.
std::vector<std::pair<corpus::Tokens, std::vector<corpus::Tokens>>> group_by_context(
    std::span<const DialoguePair> pairs) {
  std::vector<std::pair<corpus::Tokens, std::vector<corpus::Tokens>>> groups;
  std::map<corpus::Tokens, std::size_t> index;
  for (const auto& p : pairs) {
    auto [it, fresh] = index.emplace(p.context, groups.size());
    if (fresh) groups.push_back({p.context, {}});
    groups[it->second].second.push_back(p.response);
  }
  return groups;
}

struct Options {
  std::string config;
  std::string in;
  std::string out;
  std::string model;
  std::string data;
  std::string mode = "general";
  std::optional<std::uint64_t> seed;
  std::size_t n_responses = 8;
  std::vector<std::string> drop;
  std::size_t configs = 100;
  bool resume = false;
};

RunManifest manifest_for(std::string command, std::uint64_t seed = 0, std::string config = {}) {
  RunManifest m;
  m.command = std::move(command);
  m.seed = seed;
  m.config = std::move(config);
  return m;
}

void emit_manifest(const RunManifest& manifest, const std::string& out_file, std::ostream& err) {
  if (out_file.empty()) {
    manifest.write(err);
  } else {
    manifest.save(out_file);
  }
}

RunConfig load_run_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : parse_config(fs::path(o.config));
  if (!o.in.empty()) cfg.data.train_data = fs::path(o.in);
  if (o.seed) cfg.training.seed = *o.seed;
  for (const auto& d : o.drop) {
    auto& a = cfg.model.ablation;
    if (d == "is") a.no_is = true;
    else if (d == "eg") a.no_eg = true;
    else if (d == "san") a.no_san = true;
    else if (d == "scn") a.no_scn = true;
    else if (d == "sdn") a.no_sdn = true;
  }
  cfg.training.validate();
  return cfg;
}

int run_prepare(const Options& o, std::ostream& out) {
  const fs::path dir(o.out);
  fs::create_directories(dir);
  const auto mode = corpus::parse_mode(o.mode);
  auto manifest = manifest_for("prepare-data --mode " + std::string(corpus::mode_name(mode)));
  manifest.add_input(o.in);
  for (const char* a : {"train.txt", "valid.txt", "test.txt", "split_manifest.txt"})
    manifest.artifacts.push_back((dir / a).string());
  manifest.save(dir / "manifest.txt");

  auto in = open_in(o.in);
  std::vector<DialoguePair> pairs;
  for (const auto& d : corpus::read_dialogues(in)) {
    auto p = corpus::extract_single_turn_pairs(d);
    pairs.insert(pairs.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  }
  auto data = corpus::build_cdm_dataset(pairs, mode);
  auto write = [&](const char* name, const std::vector<DialoguePair>& split) {
    auto f = open_out(dir / name);
    corpus::write_pairs(f, split);
  };
  write("train.txt", data.train);
  write("valid.txt", data.valid);
  write("test.txt", data.test);
  auto f = open_out(dir / "split_manifest.txt");
  corpus::write_split_manifest(f, data);
  corpus::write_split_manifest(out, data);
  return 0;
}

int run_cdm_stats(const Options& o, std::ostream& out, std::ostream& err) {
  auto manifest = manifest_for("cdm-stats");
  manifest.add_input(o.in);
  emit_manifest(manifest, "", err);
  const auto pairs = load_pairs(o.in);
  corpus::write_report(out, corpus::mine_cdm(pairs));
  return 0;
}

int run_train(const Options& o, const std::string& command, std::ostream& out) {
  const RunConfig cfg = load_run_config(o);
  const fs::path& train_path = cfg.require_train_data();
  const fs::path dir(o.out);
  fs::create_directories(dir);

  std::ostringstream snapshot;
  write_config(snapshot, cfg);
  auto manifest = manifest_for(command, cfg.training.seed, snapshot.str());
  if (!o.config.empty()) manifest.add_input(o.config);
  manifest.add_input(train_path);
  if (cfg.data.valid_data) manifest.add_input(*cfg.data.valid_data);
  if (cfg.data.embedding_file) manifest.add_input(*cfg.data.embedding_file);
  for (const char* a : {"vocab.txt", "best.ckpt", "state.ckpt", "train.log"})
    manifest.artifacts.push_back((dir / a).string());
  manifest.save(dir / "manifest.txt");

  const auto train_pairs = load_pairs(train_path);
  const auto valid_pairs = cfg.data.valid_data ? load_pairs(*cfg.data.valid_data) : train_pairs;
  std::optional<corpus::EmbeddingTable> table;
  if (cfg.data.embedding_file) {
    auto in = open_in(*cfg.data.embedding_file);
    table = corpus::read_embedding_table(in);
  }
  const auto vocab = corpus::build_vocab(train_pairs, cfg.data.max_vocab_size, cfg.model.n_emb, cfg.training.seed,
                                         table ? &*table : nullptr);
  {
    auto f = open_out(dir / "vocab.txt");
    vocab.write(f);
  }
  model::ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  mc.validate();
  const auto train = encode_all(train_pairs, vocab, mc.max_clen);
  const auto valid = encode_all(valid_pairs, vocab, mc.max_clen);

  const fs::path state_path = dir / "state.ckpt";
  training::TrainState state = o.resume && fs::exists(state_path)
                                   ? training::TrainState::from_checkpoint(Checkpoint::load(state_path))
                                   : training::TrainState(model::SegCvae(mc, vocab, cfg.training.seed),
                                                          cfg.training.seed);
  std::ofstream log(dir / "train.log", o.resume ? std::ios::binary | std::ios::app : std::ios::binary);
  if (!log) throw DomainError("cannot write " + (dir / "train.log").string());
  auto result = training::fit(state, train, valid, cfg.training, dir, log);
  char buf[128];
  std::snprintf(buf, sizeof buf, "steps=%zu best_epoch=%zu best_valid_ppl=%.9g\n", result.steps, result.best_epoch,
                result.best_valid_ppl);
  out << buf;
  return 0;
}

int run_generate(const Options& o, std::ostream& err) {
  const fs::path dir(o.model);
  const std::uint64_t seed = o.seed.value_or(training::TrainingConfig{}.seed);
  auto manifest = manifest_for("generate --n-responses " + std::to_string(o.n_responses), seed);
  manifest.add_input(dir / "best.ckpt");
  manifest.add_input(dir / "vocab.txt");
  manifest.add_input(o.in);
  manifest.artifacts.push_back(o.out);
  emit_manifest(manifest, o.out + ".manifest", err);

  auto [net, vocab] = load_model(dir);
  const auto pairs = load_pairs(o.in);
  Rng rng(seed);
  std::vector<eval::EvalItem> items;
  for (const auto& [context, refs] : group_by_context(pairs)) {
    const auto ids = corpus::encode_pair({context, {}, {}}, vocab, net.config().max_clen).context;
    auto rec = eval::generate_n(net, ids, o.n_responses, rng);
    eval::EvalItem item{context, {}, refs};
    for (const auto& r : rec.responses) item.generated.push_back(eval::to_tokens(r, vocab));
    items.push_back(std::move(item));
  }
  auto f = open_out(o.out);
  eval::write_generations(f, items);
  return 0;
}

int run_evaluate(const Options& o, std::ostream& out, std::ostream& err) {
  const fs::path dir(o.model);
  auto manifest = manifest_for("evaluate");
  manifest.add_input(dir / "best.ckpt");
  manifest.add_input(dir / "vocab.txt");
  manifest.add_input(o.in);
  manifest.add_input(o.data);
  if (!o.out.empty()) manifest.artifacts.push_back(o.out);
  emit_manifest(manifest, o.out.empty() ? "" : o.out + ".manifest", err);

  auto [net, vocab] = load_model(dir);
  const auto refs = load_pairs(o.data);
  std::map<corpus::Tokens, std::vector<corpus::Tokens>> by_context;
  for (auto& [c, rs] : group_by_context(refs)) by_context[c] = rs;
  auto gen_in = open_in(o.in);
  auto items = eval::read_generations(gen_in);
  for (auto& item : items) {
    auto it = by_context.find(item.context);
    if (it == by_context.end()) throw DomainError("no reference for context: " + corpus::join(item.context));
    item.references = it->second;
  }
  const double ppl = training::perplexity(net, encode_all(refs, vocab, net.config().max_clen));
  const auto report = eval::evaluate(items, vocab);
  auto write = [&](std::ostream& s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "perplexity: %.6f\n", ppl);
    s << buf;
    eval::write_report(s, report);
  };
  if (o.out.empty()) {
    write(out);
  } else {
    auto f = open_out(o.out);
    write(f);
  }
  return 0;
}

int run_gradcheck(const Options& o, std::ostream& out, std::ostream& err) {
  auto manifest = manifest_for("gradcheck --configs " + std::to_string(o.configs));
  emit_manifest(manifest, "", err);
  bool ok = true;
  for (auto* suite : {&primitive_grad_checks, &loss_grad_checks}) {
    for (const auto& r : run_grad_suite(suite(), o.configs, kGradTolerance)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-24s configs=%zu max_rel_error=%.3e %s\n", r.name.c_str(), r.configs,
                    r.max_rel_error, r.passed ? "ok" : "FAILED");
      out << buf;
      ok = ok && r.passed;
    }
  }
  return ok ? 0 : 1;
}

}  // namespace

const fs::path& RunConfig::require_train_data() const {
  if (!data.train_data) throw MissingKey("train_data is required (config key or --in)");
  return *data.train_data;
}

RunConfig parse_config(std::istream& in, const fs::path& base_dir) {
  RunConfig cfg;
  auto table = keys(cfg, base_dir);
  std::set<std::string> seen;
  std::string raw;
  for (int line = 1; std::getline(in, raw); ++line) {
    std::string text = raw.substr(0, raw.find('#'));
    text = trim(text);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw TypeError("line " + std::to_string(line) + ": expected 'key = value'", line);
    const std::string key = trim(std::string_view(text).substr(0, eq));
    const std::string value = trim(std::string_view(text).substr(eq + 1));
    auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
    if (it == table.end()) throw TypeError("line " + std::to_string(line) + ": unknown key '" + key + "'", line);
    if (!seen.insert(key).second) throw TypeError("line " + std::to_string(line) + ": repeated key '" + key + "'", line);
    if (value.empty()) throw TypeError("line " + std::to_string(line) + ": " + key + " has no value", line);
    it->set(value, line);
  }
  cfg.training.validate();
  return cfg;
}

RunConfig parse_config(const fs::path& path) {
  auto in = open_in(path);
  return parse_config(in, path.parent_path());
}

void write_config(std::ostream& out, const RunConfig& config) {
  RunConfig copy = config;
  for (const auto& k : keys(copy, {}))
    if (auto v = k.get()) out << k.name << " = " << *v << '\n';
}

std::string file_digest(const fs::path& path) {
  auto in = open_in(path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a64(bytes));
}

void RunManifest::add_input(const fs::path& path) { inputs.emplace_back(path.string(), file_digest(path)); }

void RunManifest::write(std::ostream& out) const {
  out << "tool_version: " << tool_version << '\n';
  out << "command: " << command << '\n';
  out << "seed: " << seed << '\n';
  for (const auto& [path, digest] : inputs) out << "input: " << path << " fnv1a64:" << digest << '\n';
  for (const auto& a : artifacts) out << "artifact: " << a << '\n';
  std::istringstream lines(config);
  std::string line;
  while (std::getline(lines, line)) out << "config: " << line << '\n';
}

void RunManifest::save(const fs::path& path) const {
  auto f = open_out(path);
  write(f);
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"SegCVAE dialogue response generation", "segcvae"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  Options o;

  auto* prepare = app.add_subcommand("prepare-data", "Extract pairs from dialogues and build the CDM splits");
  prepare->add_option("--in", o.in, "Dialogue file: one utterance per line, blank line between dialogues")
      ->required();
  prepare->add_option("--out", o.out, "Output directory")->required();
  prepare->add_option("--mode", o.mode, "Dataset kind")->check(CLI::IsMember({"o2m", "m2o", "general"}));

  auto* stats = app.add_subcommand("cdm-stats", "Report one-to-many and many-to-one groups of a pair file");
  stats->add_option("--in", o.in, "Pair file: context<TAB>response per line")->required();

  auto add_train_options = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "Configuration file ('key = value' lines)");
    cmd->add_option("--in", o.in, "Training pairs; overrides train_data");
    cmd->add_option("--out", o.out, "Model directory")->required();
    cmd->add_option("--seed", o.seed, "Overrides seed");
    cmd->add_flag("--resume", o.resume, "Continue from out/state.ckpt when present");
  };
  auto* train = app.add_subcommand("train", "Train a model");
  add_train_options(train);
  auto* ablate = app.add_subcommand("ablate", "Train with components switched off");
  add_train_options(ablate);
  ablate->add_option("--drop", o.drop, "Component to remove (repeatable)")
      ->required()
      ->check(CLI::IsMember({"is", "eg", "san", "scn", "sdn"}));

  auto* generate = app.add_subcommand("generate", "Greedy-decode responses for every context of a pair file");
  generate->add_option("--model", o.model, "Model directory")->required();
  generate->add_option("--in", o.in, "Pair file whose contexts are answered")->required();
  generate->add_option("--out", o.out, "Generation dump")->required();
  generate->add_option("--n-responses", o.n_responses, "Responses per context")->check(CLI::PositiveNumber);
  generate->add_option("--seed", o.seed, "Latent sampling seed");

  auto* evaluate = app.add_subcommand("evaluate", "Score a generation dump against reference pairs");
  evaluate->add_option("--model", o.model, "Model directory")->required();
  evaluate->add_option("--in", o.in, "Generation dump")->required();
  evaluate->add_option("--data", o.data, "Reference pairs")->required();
  evaluate->add_option("--out", o.out, "Report file (stdout when absent)");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks of every primitive and loss term");
  gradcheck->add_option("--configs", o.configs, "Random configurations per check")->check(CLI::PositiveNumber);

  std::vector<std::string> argv_store{"segcvae"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    err << app.help();
    return 2;
  }

  try {
    if (prepare->parsed()) return run_prepare(o, out);
    if (stats->parsed()) return run_cdm_stats(o, out, err);
    if (train->parsed()) return run_train(o, "train", out);
    if (ablate->parsed()) {
      std::string command = "ablate";
      for (const auto& d : o.drop) command += " --drop " + d;
      return run_train(o, command, out);
    }
    if (generate->parsed()) return run_generate(o, err);
    if (evaluate->parsed()) return run_evaluate(o, out, err);
    if (gradcheck->parsed()) return run_gradcheck(o, out, err);
  } catch (const TypeError& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace segcvae::cli
