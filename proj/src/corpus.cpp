#include "segcvae/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "segcvae/errors.hpp"
#include "segcvae/hash.hpp"
#include "segcvae/rng.hpp"

namespace segcvae::corpus {

namespace {

bool is_word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      flush();
    } else if (is_word_char(c)) {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else if (c == '\'' && !cur.empty() && cur.front() != '\'' && i + 1 < text.size() &&
               std::isalpha(static_cast<unsigned char>(text[i + 1]))) {
      flush();
      cur.push_back('\'');
    } else {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

std::string join(const Tokens& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s.push_back(' ');
    s += tokens[i];
  }
  return s;
}

std::vector<Dialogue> read_dialogues(std::istream& in) {
  std::vector<Dialogue> out;
  Dialogue current;
  std::string line;
  auto close = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  while (std::getline(in, line)) {
    if (trim(line).empty()) {
      close();
      continue;
    }
    Tokens toks = tokenize(line);
    if (toks.empty()) continue;
    Utterance u;
    u.tokens = std::move(toks);
    u.dialogue_id = "d" + std::to_string(out.size());
    u.turn_index = current.size();
    current.push_back(std::move(u));
  }
  close();
  return out;
}

std::vector<DialoguePair> read_pairs(std::istream& in) {
  std::vector<DialoguePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError("pair file line " + std::to_string(lineno) + " has no TAB");
    }
    DialoguePair p;
    p.context = tokenize(std::string_view(line).substr(0, tab));
    p.response = tokenize(std::string_view(line).substr(tab + 1));
    p.source = "line" + std::to_string(lineno);
    if (p.context.empty() || p.response.empty()) continue;
    out.push_back(std::move(p));
  }
  return out;
}

void write_pairs(std::ostream& out, std::span<const DialoguePair> pairs) {
  for (const auto& p : pairs) out << join(p.context) << '\t' << join(p.response) << '\n';
}

std::vector<DialoguePair> extract_single_turn_pairs(const Dialogue& dialogue) {
  std::vector<DialoguePair> out;
  if (dialogue.size() < 2) return out;
  out.reserve(dialogue.size() - 1);
  for (std::size_t t = 0; t + 1 < dialogue.size(); ++t) {
    out.push_back({dialogue[t].tokens, dialogue[t + 1].tokens,
                   dialogue[t].dialogue_id + ":" + std::to_string(dialogue[t].turn_index)});
  }
  return out;
}

EmbeddingTable read_embedding_table(std::istream& in) {
  EmbeddingTable table;
  std::string line;
  std::size_t dim = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string token;
    if (!(ls >> token)) continue;
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (dim == 0) dim = row.size();
    if (row.size() != dim || dim == 0) throw FormatError("embedding row for '" + token + "' has wrong width");
    table.emplace(std::move(token), std::move(row));
  }
  return table;
}

const std::array<std::string, 4>& Vocabulary::special_tokens() {
  static const std::array<std::string, 4> specials{"<pad>", "<unk>", "<bos>", "<eos>"};
  return specials;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, std::vector<double> embedding, std::size_t dim)
    : dim_(dim) {
  for (const auto& s : special_tokens()) tokens_.push_back(s);
  for (auto& t : tokens) tokens_.push_back(std::move(t));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<Id>(i)).second) {
      throw DomainError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
  set_embedding(std::move(embedding));
}

void Vocabulary::set_embedding(std::vector<double> embedding) {
  if (embedding.size() != tokens_.size() * dim_) {
    throw ShapeError("embedding has " + std::to_string(embedding.size()) + " values, expected " +
                     std::to_string(tokens_.size() * dim_));
  }
  embedding_ = std::move(embedding);
}

Id Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

std::span<const double> Vocabulary::embedding_row(Id id) const {
  return std::span<const double>(embedding_).subspan(static_cast<std::size_t>(id) * dim_, dim_);
}

void Vocabulary::write(std::ostream& out) const {
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary build_vocab(std::span<const DialoguePair> pairs, std::size_t max_size,
                       std::size_t embedding_dim, std::uint64_t seed, const EmbeddingTable* external) {
  if (max_size < Vocabulary::kSpecials) throw DomainError("vocabulary size must leave room for the 4 specials");
  std::unordered_map<std::string, std::size_t> freq;
  for (const auto& p : pairs) {
    for (const auto& t : p.context) ++freq[t];
    for (const auto& t : p.response) ++freq[t];
  }
  for (const auto& s : Vocabulary::special_tokens()) freq.erase(s);
  if (freq.empty()) throw EmptyCorpus("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  const std::size_t keep = std::min(ranked.size(), max_size - Vocabulary::kSpecials);
  std::vector<std::string> tokens;
  tokens.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(ranked[i].first);

  const std::size_t V = keep + Vocabulary::kSpecials;
  std::vector<double> emb(V * embedding_dim, 0.0);
  Rng rng(seed);
  for (std::size_t id = 1; id < V; ++id) {
    const std::string& tok = id < Vocabulary::kSpecials ? Vocabulary::special_tokens()[id]
                                                        : tokens[id - Vocabulary::kSpecials];
    const std::vector<double>* row = nullptr;
    if (external) {
      auto it = external->find(tok);
      if (it != external->end()) {
        if (it->second.size() != embedding_dim) throw ShapeError("external embedding width differs");
        row = &it->second;
      }
    }
    for (std::size_t d = 0; d < embedding_dim; ++d) {
      emb[id * embedding_dim + d] = row ? (*row)[d] : rng.uniform(-0.1, 0.1);
    }
  }
  return Vocabulary(std::move(tokens), std::move(emb), embedding_dim);
}

std::vector<DialoguePair> filter_by_vocab(std::span<const DialoguePair> pairs, const Vocabulary& vocab) {
  auto in_vocab = [&](const Tokens& u) {
    return std::all_of(u.begin(), u.end(), [&](const std::string& t) { return vocab.contains(t); });
  };
  std::unordered_set<std::string> banned;
  for (const auto& p : pairs) {
    if (!in_vocab(p.context)) banned.insert(join(p.context));
    if (!in_vocab(p.response)) banned.insert(join(p.response));
  }
  std::vector<DialoguePair> out;
  for (const auto& p : pairs) {
    if (banned.contains(join(p.context)) || banned.contains(join(p.response))) continue;
    out.push_back(p);
  }
  return out;
}

namespace {

struct GroupAccumulator {
  Tokens key;
  std::vector<Tokens> counterparts;
  std::set<std::string> seen;
  std::vector<std::size_t> members;
};

// Keyed by joined key text; std::map keeps group order independent of input order.
std::map<std::string, GroupAccumulator> group_by(std::span<const DialoguePair> pairs, bool by_context) {
  std::map<std::string, GroupAccumulator> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Tokens& key = by_context ? pairs[i].context : pairs[i].response;
    const Tokens& other = by_context ? pairs[i].response : pairs[i].context;
    auto& g = groups[join(key)];
    if (g.members.empty()) g.key = key;
    g.members.push_back(i);
    if (g.seen.insert(join(other)).second) g.counterparts.push_back(other);
  }
  return groups;
}

}  // namespace

CdmReport mine_cdm(std::span<const DialoguePair> pairs) {
  if (pairs.empty()) throw EmptyCorpus("no dialogue pairs to mine");
  CdmReport report;
  report.total_pairs = pairs.size();
  std::vector<char> in_cdm(pairs.size(), 0);
  for (bool by_context : {true, false}) {
    auto& groups = by_context ? report.o2m_groups : report.m2o_groups;
    auto& count = by_context ? report.o2m_pairs : report.m2o_pairs;
    for (auto& [_, g] : group_by(pairs, by_context)) {
      if (g.counterparts.size() < 2) continue;
      groups.push_back({g.key, g.counterparts, g.members.size()});
      count += g.members.size();
      for (auto i : g.members) in_cdm[i] = 1;
    }
  }
  report.cdm_pairs = static_cast<std::size_t>(std::count(in_cdm.begin(), in_cdm.end(), 1));
  const double n = static_cast<double>(report.total_pairs);
  report.o2m_pair_fraction = static_cast<double>(report.o2m_pairs) / n;
  report.m2o_pair_fraction = static_cast<double>(report.m2o_pairs) / n;
  report.cdm_fraction = static_cast<double>(report.cdm_pairs) / n;
  return report;
}

void write_report(std::ostream& out, const CdmReport& r) {
  out << "total_pairs: " << r.total_pairs << '\n'
      << "o2m_groups: " << r.o2m_groups.size() << '\n'
      << "m2o_groups: " << r.m2o_groups.size() << '\n'
      << "o2m_pairs: " << r.o2m_pairs << '\n'
      << "m2o_pairs: " << r.m2o_pairs << '\n'
      << "cdm_pairs: " << r.cdm_pairs << '\n'
      << "o2m_pair_fraction: " << r.o2m_pair_fraction << '\n'
      << "m2o_pair_fraction: " << r.m2o_pair_fraction << '\n'
      << "cdm_fraction: " << r.cdm_fraction << '\n';
}

CdmMode parse_mode(std::string_view text) {
  if (text == "o2m") return CdmMode::O2M;
  if (text == "m2o") return CdmMode::M2O;
  if (text == "general") return CdmMode::General;
  throw DomainError("unknown mode '" + std::string(text) + "' (expected o2m, m2o or general)");
}

std::string_view mode_name(CdmMode mode) {
  switch (mode) {
    case CdmMode::O2M: return "o2m";
    case CdmMode::M2O: return "m2o";
    case CdmMode::General: return "general";
  }
  return "general";
}

SplitStats split_stats(std::span<const DialoguePair> pairs) {
  SplitStats s;
  s.pairs = pairs.size();
  if (pairs.empty()) return s;
  auto by_ctx = group_by(pairs, true);
  auto by_rsp = group_by(pairs, false);
  s.contexts = by_ctx.size();
  s.responses = by_rsp.size();
  for (const auto& [_, g] : by_ctx) s.max_responses_per_context = std::max(s.max_responses_per_context, g.counterparts.size());
  for (const auto& [_, g] : by_rsp) s.max_contexts_per_response = std::max(s.max_contexts_per_response, g.counterparts.size());
  s.avg_responses_per_context = static_cast<double>(s.pairs) / static_cast<double>(s.contexts);
  s.avg_contexts_per_response = static_cast<double>(s.pairs) / static_cast<double>(s.responses);
  return s;
}

SplitDataset build_cdm_dataset(std::span<const DialoguePair> pairs, CdmMode mode, SplitRatios ratios) {
  if (pairs.empty()) throw EmptyCorpus("no dialogue pairs");
  if (ratios.train_percent + ratios.valid_percent > 100) throw DomainError("split ratios exceed 100%");
  SplitDataset data;
  data.mode = mode;
  const bool by_context = mode != CdmMode::M2O;
  auto groups = group_by(pairs, by_context);
  for (const auto& [key, g] : groups) {
    if (mode != CdmMode::General && g.counterparts.size() < 2) continue;
    const std::size_t bucket = fnv1a64(key) % 100;
    auto& split = bucket < ratios.train_percent                         ? data.train
                  : bucket < ratios.train_percent + ratios.valid_percent ? data.valid
                                                                         : data.test;
    for (auto i : g.members) split.push_back(pairs[i]);
  }
  if (data.train.empty() && data.valid.empty() && data.test.empty()) {
    throw EmptyCorpus("no " + std::string(mode_name(mode)) + " groups in corpus");
  }
  return data;
}

void write_split_manifest(std::ostream& out, const SplitDataset& data) {
  out << "mode: " << mode_name(data.mode) << '\n';
  auto emit = [&](const char* name, const std::vector<DialoguePair>& split) {
    auto s = split_stats(split);
    out << name << ".pairs: " << s.pairs << '\n'
        << name << ".contexts: " << s.contexts << '\n'
        << name << ".responses: " << s.responses << '\n'
        << name << ".avg_responses_per_context: " << s.avg_responses_per_context << '\n'
        << name << ".avg_contexts_per_response: " << s.avg_contexts_per_response << '\n'
        << name << ".max_responses_per_context: " << s.max_responses_per_context << '\n'
        << name << ".max_contexts_per_response: " << s.max_contexts_per_response << '\n';
  };
  emit("train", data.train);
  emit("valid", data.valid);
  emit("test", data.test);
}

EncodedPair encode_pair(const DialoguePair& pair, const Vocabulary& vocab, std::size_t max_clen) {
  if (max_clen < 3) throw DomainError("max_clen must be at least 3");
  EncodedPair e;
  e.context.assign(max_clen, Vocabulary::kPad);
  e.response.assign(max_clen, Vocabulary::kPad);
  for (std::size_t i = 0; i < std::min(max_clen, pair.context.size()); ++i) {
    e.context[i] = vocab.id(pair.context[i]);
  }
  const std::size_t n = std::min(max_clen - 2, pair.response.size());
  e.response[0] = Vocabulary::kBos;
  for (std::size_t i = 0; i < n; ++i) e.response[i + 1] = vocab.id(pair.response[i]);
  e.response[n + 1] = Vocabulary::kEos;
  return e;
}

}  // namespace segcvae::corpus
