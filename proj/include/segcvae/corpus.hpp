#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace segcvae::corpus {

using Tokens = std::vector<std::string>;
using Id = std::uint32_t;

struct Utterance {
  Tokens tokens;
  std::string dialogue_id;
  std::size_t turn_index = 0;
};

using Dialogue = std::vector<Utterance>;

struct DialoguePair {
  Tokens context;
  Tokens response;
  std::string source;  // "<dialogue id>:<turn of the context>"
};

/// Lowercases ASCII, splits on whitespace and makes every punctuation
/// character its own token. An apostrophe between a word and following letters
/// starts a clitic token ("i'm" -> "i", "'m").
Tokens tokenize(std::string_view text);
std::string join(const Tokens& tokens);

/// Dialogues are blocks of non-empty lines separated by blank lines; each line
/// is one utterance. Lines that tokenize to nothing are skipped.
std::vector<Dialogue> read_dialogues(std::istream& in);
/// One pair per line, context and response separated by a TAB.
std::vector<DialoguePair> read_pairs(std::istream& in);
void write_pairs(std::ostream& out, std::span<const DialoguePair> pairs);

/// Adjacent (u_t, u_t+1) pairs, T - 1 of them; empty when T < 2.
std::vector<DialoguePair> extract_single_turn_pairs(const Dialogue& dialogue);

using EmbeddingTable = std::unordered_map<std::string, std::vector<double>>;

/// Reads whitespace-separated "token v1 ... vN" lines (GloVe text layout).
EmbeddingTable read_embedding_table(std::istream& in);

class Vocabulary {
 public:
  static constexpr Id kPad = 0;
  static constexpr Id kUnk = 1;
  static constexpr Id kBos = 2;
  static constexpr Id kEos = 3;
  static constexpr std::size_t kSpecials = 4;
  static const std::array<std::string, 4>& special_tokens();

  Vocabulary() = default;
  /// tokens excludes the four specials, which always take ids 0..3. The
  /// embedding is row-major (size() x dim).
  Vocabulary(std::vector<std::string> tokens, std::vector<double> embedding, std::size_t dim);

  std::size_t size() const { return tokens_.size(); }
  std::size_t embedding_dim() const { return dim_; }
  Id id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.contains(token); }
  const std::string& token(Id id) const { return tokens_.at(id); }
  static bool is_special(Id id) { return id < kSpecials; }
  std::span<const double> embedding_row(Id id) const;
  const std::vector<double>& embedding() const { return embedding_; }
  /// All tokens including specials, in id order.
  const std::vector<std::string>& tokens() const { return tokens_; }

  void set_embedding(std::vector<double> embedding);

  /// One token per line in id order, specials first.
  void write(std::ostream& out) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, Id> index_;
  std::vector<double> embedding_;
  std::size_t dim_ = 0;
};

/// Keeps the max_size - 4 most frequent tokens (ties broken lexicographically).
/// Rows missing from the external table are drawn uniformly in [-0.1, 0.1]
/// from the seed; the PAD row is zero. Throws EmptyCorpus on no tokens.
Vocabulary build_vocab(std::span<const DialoguePair> pairs, std::size_t max_size,
                       std::size_t embedding_dim, std::uint64_t seed,
                       const EmbeddingTable* external = nullptr);

/// Any utterance holding a token outside the vocabulary is banned, and every
/// pair whose context or response is a banned utterance is dropped.
std::vector<DialoguePair> filter_by_vocab(std::span<const DialoguePair> pairs, const Vocabulary& vocab);

struct CdmGroup {
  Tokens key;                        // the shared context (o2m) or response (m2o)
  std::vector<Tokens> counterparts;  // distinct, in first-seen order
  std::size_t pair_count = 0;        // pairs carrying the key, duplicates included
};

struct CdmReport {
  std::vector<CdmGroup> o2m_groups;
  std::vector<CdmGroup> m2o_groups;
  std::size_t total_pairs = 0;
  std::size_t o2m_pairs = 0;
  std::size_t m2o_pairs = 0;
  std::size_t cdm_pairs = 0;  // pairs in either kind of group
  double o2m_pair_fraction = 0.0;
  double m2o_pair_fraction = 0.0;
  double cdm_fraction = 0.0;
};

/// Groups pairs by exact token-sequence equality. A group needs at least two
/// distinct counterparts. Throws EmptyCorpus on empty input.
CdmReport mine_cdm(std::span<const DialoguePair> pairs);
/// "key: value" lines.
void write_report(std::ostream& out, const CdmReport& report);

enum class CdmMode { O2M, M2O, General };
CdmMode parse_mode(std::string_view text);
std::string_view mode_name(CdmMode mode);

struct SplitStats {
  std::size_t pairs = 0;
  std::size_t contexts = 0;
  std::size_t responses = 0;
  double avg_responses_per_context = 0.0;
  double avg_contexts_per_response = 0.0;
  std::size_t max_responses_per_context = 0;
  std::size_t max_contexts_per_response = 0;
};

SplitStats split_stats(std::span<const DialoguePair> pairs);

struct SplitDataset {
  CdmMode mode = CdmMode::General;
  std::vector<DialoguePair> train, valid, test;
};

struct SplitRatios {
  std::size_t train_percent = 90;
  std::size_t valid_percent = 5;
};

/// Keeps the pairs that belong to groups of the requested kind (all pairs for
/// General) and splits them by a hash of the group key, so a whole group lands
/// in one split. Throws EmptyCorpus when nothing qualifies.
SplitDataset build_cdm_dataset(std::span<const DialoguePair> pairs, CdmMode mode,
                               SplitRatios ratios = {});
/// Split manifest: "key: value" lines with per-split statistics.
void write_split_manifest(std::ostream& out, const SplitDataset& data);

struct EncodedPair {
  std::vector<Id> context;   // max_clen ids
  std::vector<Id> response;  // max_clen ids: BOS, tokens, EOS, PAD...
};

/// Context: truncate to max_clen then pad. Response: truncate to max_clen - 2,
/// frame with BOS/EOS, then pad. OOV tokens map to UNK.
EncodedPair encode_pair(const DialoguePair& pair, const Vocabulary& vocab, std::size_t max_clen);

}  // namespace segcvae::corpus
