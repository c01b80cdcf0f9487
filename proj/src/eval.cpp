#include "segcvae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>

#include "segcvae/errors.hpp"
#include "segcvae/ops.hpp"
#include "segcvae/recurrent.hpp"

namespace segcvae::eval {

using corpus::Vocabulary;
using model::Tensor;

namespace {

std::vector<Id> decode_from(const model::SegCvae& model, const Tensor& x, const Tensor& z) {
  const auto& heads = model.heads();
  const std::size_t limit = model.config().max_clen;
  Tensor h = heads.initial_state(z, x);
  Id input = Vocabulary::kBos;
  std::vector<Id> out;
  while (out.size() < limit) {
    const std::size_t index[1] = {input};
    auto step = ad::gru_decode_step(h, ad::gather_rows(heads.embedding, index), heads.decoder, heads.out_w,
                                    heads.out_b);
    h = step.state;
    auto logits = step.logits.values();
    Id best = Vocabulary::kUnk;
    for (Id v = 0; v < logits.size(); ++v) {
      if (v == Vocabulary::kPad || v == Vocabulary::kBos) continue;
      if (logits[v] > logits[best]) best = v;
    }
    if (best == Vocabulary::kEos) break;
    out.push_back(best);
    input = best;
  }
  return out;
}

bool usable(const std::string& token) {
  for (const auto& s : Vocabulary::special_tokens())
    if (token == s) return false;
  return true;
}

Tokens strip(const Tokens& tokens) {
  Tokens out;
  for (const auto& t : tokens)
    if (usable(t)) out.push_back(t);
  return out;
}

using Ngram = std::vector<std::string>;

std::map<Ngram, std::size_t> ngram_counts(const Tokens& tokens, std::size_t n) {
  std::map<Ngram, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[Ngram(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

std::vector<double> mean_embedding(const Tokens& tokens, const Vocabulary& vocab) {
  std::vector<double> mean(vocab.embedding_dim(), 0.0);
  std::size_t used = 0;
  for (const auto& t : tokens) {
    if (!usable(t) || !vocab.contains(t)) continue;
    auto row = vocab.embedding_row(vocab.id(t));
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += row[j];
    ++used;
  }
  if (used == 0) throw DegenerateVector("sentence has no in-vocabulary tokens");
  for (auto& v : mean) v /= static_cast<double>(used);
  return mean;
}

double cosine_of(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < ad::kNormEpsilon || nb < ad::kNormEpsilon) throw DegenerateVector("mean embedding has zero norm");
  return dot / (na * nb);
}

}  // namespace

std::vector<Id> greedy_decode(const model::SegCvae& model, std::span<const Id> context, std::size_t branch,
                              const Tensor& z) {
  if (branch >= model.config().num_triggers) throw DomainError("branch index out of range");
  if (z.size() != model.config().d_z) throw ShapeError("z must have d_z entries");
  ad::NoGradGuard no_grad;
  Rng unused(0);
  auto xs = model.prominent_batch({std::vector<Id>(context.begin(), context.end())}, unused, false);
  return decode_from(model, xs[branch], ad::reshape(z, {1, z.size()}));
}

GenerationRecord generate_n(const model::SegCvae& model, std::span<const Id> context, std::size_t n, Rng& rng) {
  if (n == 0) throw DomainError("generate_n needs n >= 1");
  ad::NoGradGuard no_grad;
  Rng unused(0);
  GenerationRecord rec;
  rec.context.assign(context.begin(), context.end());
  auto xs = model.prominent_batch({rec.context}, unused, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t branch = k % xs.size();
    auto prior = model.heads().prior(xs[branch]);
    Tensor z = ad::reparameterize(prior.mu, prior.logvar, rng);
    rec.responses.push_back(decode_from(model, xs[branch], z));
    rec.branches.push_back(branch);
    rec.z.emplace_back(z.values().begin(), z.values().end());
  }
  return rec;
}

Tokens to_tokens(std::span<const Id> ids, const Vocabulary& vocab) {
  Tokens out;
  for (Id id : ids)
    if (!Vocabulary::is_special(id)) out.push_back(vocab.token(id));
  return out;
}

double distinct_n(std::span<const Tokens> responses, std::size_t n) {
  if (n == 0) throw DomainError("distinct_n needs n >= 1");
  std::set<Ngram> unique;
  std::size_t total = 0;
  for (const auto& r : responses) {
    const Tokens t = strip(r);
    for (std::size_t i = 0; i + n <= t.size(); ++i) {
      unique.emplace(t.begin() + i, t.begin() + i + n);
      ++total;
    }
  }
  if (total == 0) throw DomainError("distinct_n: no n-grams");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

double bleu_n(const Tokens& candidate, std::span<const Tokens> references, std::size_t n) {
  const Tokens cand = strip(candidate);
  if (cand.empty()) throw DomainError("bleu_n: empty candidate");
  if (references.empty()) throw DomainError("bleu_n: no references");
  if (n == 0) throw DomainError("bleu_n needs n >= 1");
  std::vector<Tokens> refs;
  for (const auto& r : references) refs.push_back(strip(r));

  double log_sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    std::map<Ngram, std::size_t> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngram_counts(r, k)) max_ref[g] = std::max(max_ref[g], c);
    double matched = 0.0, total = 0.0;
    for (const auto& [g, c] : ngram_counts(cand, k)) {
      auto it = max_ref.find(g);
      matched += static_cast<double>(std::min(c, it == max_ref.end() ? std::size_t{0} : it->second));
      total += static_cast<double>(c);
    }
    if (k >= 2) {
      matched += 1.0;
      total += 1.0;
    }
    if (matched == 0.0) return 0.0;
    log_sum += std::log(matched / total);
  }
  const double c = static_cast<double>(cand.size());
  double r = 0.0, best_gap = 0.0;
  bool first = true;
  for (const auto& ref : refs) {
    const double len = static_cast<double>(ref.size());
    const double gap = std::abs(len - c);
    if (first || gap < best_gap || (gap == best_gap && len < r)) {
      r = len;
      best_gap = gap;
      first = false;
    }
  }
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(n));
}

double embedding_average(const Tokens& candidate, const Tokens& reference, const Vocabulary& vocab) {
  return cosine_of(mean_embedding(candidate, vocab), mean_embedding(reference, vocab));
}

double coherence(const Tokens& context, const Tokens& candidate, const Vocabulary& vocab) {
  return cosine_of(mean_embedding(context, vocab), mean_embedding(candidate, vocab));
}

double length_avg(std::span<const Tokens> responses) {
  if (responses.empty()) throw DomainError("length_avg of no responses");
  double total = 0.0;
  for (const auto& r : responses) total += static_cast<double>(strip(r).size());
  return total / static_cast<double>(responses.size());
}

MetricReport evaluate(std::span<const EvalItem> items, const Vocabulary& vocab) {
  if (items.empty()) throw EmptyCorpus("nothing to evaluate");
  MetricReport rep;
  rep.contexts = items.size();
  std::vector<Tokens> pooled;
  double b1 = 0, b2 = 0, b3 = 0, emb = 0, coh = 0;
  for (const auto& item : items) {
    if (item.references.empty()) throw DomainError("context without references: " + corpus::join(item.context));
    for (const auto& g : item.generated) {
      pooled.push_back(g);
      if (strip(g).empty()) continue;
      b1 += bleu_n(g, item.references, 1);
      b2 += bleu_n(g, item.references, 2);
      b3 += bleu_n(g, item.references, 3);
      double best = -1.0;
      bool any = false;
      for (const auto& r : item.references) {
        try {
          best = std::max(best, embedding_average(g, r, vocab));
          any = true;
        } catch (const DegenerateVector&) {
        }
      }
      if (any) emb += best;
      try {
        coh += coherence(item.context, g, vocab);
      } catch (const DegenerateVector&) {
      }
    }
  }
  rep.responses = pooled.size();
  if (pooled.empty()) throw DomainError("no generated responses");
  const double n = static_cast<double>(pooled.size());
  rep.bleu1 = b1 / n;
  rep.bleu2 = b2 / n;
  rep.bleu3 = b3 / n;
  rep.embedding_average = emb / n;
  rep.coherence = coh / n;
  auto distinct_or_zero = [&](std::size_t k) {
    try {
      return distinct_n(pooled, k);
    } catch (const DomainError&) {
      return 0.0;
    }
  };
  rep.distinct1 = distinct_or_zero(1);
  rep.distinct2 = distinct_or_zero(2);
  rep.length = length_avg(pooled);
  return rep;
}

void write_report(std::ostream& out, const MetricReport& r) {
  auto line = [&](const char* key, double v) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s: %.6f\n", key, v);
    out << buf;
  };
  out << "contexts: " << r.contexts << "\n";
  out << "responses: " << r.responses << "\n";
  line("bleu-1", r.bleu1);
  line("bleu-2", r.bleu2);
  line("bleu-3", r.bleu3);
  line("distinct-1", r.distinct1);
  line("distinct-2", r.distinct2);
  line("embedding-average", r.embedding_average);
  line("coherence", r.coherence);
  line("length", r.length);
}

void write_generations(std::ostream& out, std::span<const EvalItem> items) {
  for (const auto& item : items) {
    out << corpus::join(item.context);
    for (const auto& g : item.generated) out << '\t' << corpus::join(g);
    out << '\n';
  }
}

std::vector<EvalItem> read_generations(std::istream& in) {
  std::vector<EvalItem> items;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EvalItem item;
    std::size_t start = 0;
    bool first = true;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      const std::string field = line.substr(start, tab == std::string::npos ? std::string::npos : tab - start);
      if (first) {
        item.context = corpus::tokenize(field);
        first = false;
      } else {
        item.generated.push_back(corpus::tokenize(field));
      }
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace segcvae::eval
