#pragma once

#include <cstddef>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "segcvae/corpus.hpp"
#include "segcvae/model.hpp"
#include "segcvae/rng.hpp"

namespace segcvae::eval {

using corpus::Id;
using corpus::Tokens;

/// Starts from BOS and feeds back the argmax token until EOS or max_clen
/// tokens. PAD and BOS are never emitted. z is (1, d_z). The returned ids
/// exclude BOS and EOS.
std::vector<Id> greedy_decode(const model::SegCvae& model, std::span<const Id> context, std::size_t branch,
                              const model::Tensor& z);

struct GenerationRecord {
  std::vector<Id> context;
  std::vector<std::vector<Id>> responses;
  std::vector<Tokens> references;
  std::vector<std::size_t> branches;
  std::vector<std::vector<double>> z;
};

/// n responses; response k uses branch k mod M and a fresh prior sample of z.
/// Trigger selection runs without Gumbel noise.
GenerationRecord generate_n(const model::SegCvae& model, std::span<const Id> context, std::size_t n, Rng& rng);

/// Ordinary tokens of an id sequence (specials dropped).
Tokens to_tokens(std::span<const Id> ids, const corpus::Vocabulary& vocab);

/// Unique n-grams over all responses divided by the total n-gram count.
/// Special tokens are ignored. Throws DomainError when there are no n-grams.
double distinct_n(std::span<const Tokens> responses, std::size_t n);

/// Geometric mean of clipped k-gram precisions (k = 1..n) times the brevity
/// penalty. Counts for k >= 2 get +1 smoothing in numerator and denominator.
/// Clipping takes the per-k-gram maximum over references; the brevity penalty
/// uses the reference length closest to the candidate (shorter on ties).
/// Throws DomainError on an empty candidate or no references.
double bleu_n(const Tokens& candidate, std::span<const Tokens> references, std::size_t n);

/// Cosine of the mean embeddings of the usable tokens of each sentence
/// (in-vocabulary, not special). Throws DegenerateVector when a side has none.
double embedding_average(const Tokens& candidate, const Tokens& reference, const corpus::Vocabulary& vocab);
/// Same measure between a context and a candidate response.
double coherence(const Tokens& context, const Tokens& candidate, const corpus::Vocabulary& vocab);

/// Mean token count with specials excluded. Throws DomainError on no responses.
double length_avg(std::span<const Tokens> responses);

/// Generated responses for one context with every ground-truth response of
/// that context.
struct EvalItem {
  Tokens context;
  std::vector<Tokens> generated;
  std::vector<Tokens> references;
};

struct MetricReport {
  std::size_t contexts = 0;
  std::size_t responses = 0;
  double bleu1 = 0, bleu2 = 0, bleu3 = 0;
  double distinct1 = 0, distinct2 = 0;
  double embedding_average = 0;
  double coherence = 0;
  double length = 0;
};

/// BLEU and embedding average are per generated response against its
/// context's references (embedding average takes the best reference), then
/// averaged. Distinct-n pools every generated response. A response with no
/// usable tokens scores 0 on the per-response metrics.
MetricReport evaluate(std::span<const EvalItem> items, const corpus::Vocabulary& vocab);
/// One "metric: value" line per metric, plus the corpus sizes.
void write_report(std::ostream& out, const MetricReport& report);

/// Generation dump: one line per context, "context<TAB>response_1<TAB>...".
void write_generations(std::ostream& out, std::span<const EvalItem> items);
std::vector<EvalItem> read_generations(std::istream& in);

}  // namespace segcvae::eval
