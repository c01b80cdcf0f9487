#pragma once

#include <string>
#include <vector>

#include "segcvae/corpus.hpp"
#include "segcvae/model.hpp"
#include "segcvae/rng.hpp"

namespace fixtures {

using segcvae::Rng;
using segcvae::corpus::Id;
using segcvae::corpus::Vocabulary;

/// Vocabulary of `words` ordinary tokens w0..w{n-1} with random embeddings.
inline Vocabulary toy_vocab(std::size_t words, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < words; ++i) tokens.push_back("w" + std::to_string(i));
  std::vector<double> emb((words + Vocabulary::kSpecials) * dim, 0.0);
  for (std::size_t i = dim; i < emb.size(); ++i) emb[i] = rng.uniform(-0.5, 0.5);
  return Vocabulary(std::move(tokens), std::move(emb), dim);
}

inline segcvae::model::ModelConfig desk_config(std::size_t vocab_size) {
  segcvae::model::ModelConfig c;
  c.max_clen = 8;
  c.n_emb = 16;
  c.n_hid = 16;
  c.d_z = 16;
  c.kernel_m = 3;
  c.chan = 2;
  c.num_triggers = 2;
  c.vocab_size = vocab_size;
  return c;
}

/// Random contexts and BOS/EOS-framed responses over ordinary ids.
inline segcvae::model::Batch random_batch(std::size_t batch, std::size_t max_clen, std::size_t words, Rng& rng) {
  segcvae::model::Batch b;
  for (std::size_t i = 0; i < batch; ++i) {
    std::vector<Id> c(max_clen, Vocabulary::kPad), r(max_clen, Vocabulary::kPad);
    const std::size_t clen = 1 + rng.below(max_clen);
    for (std::size_t t = 0; t < clen; ++t) c[t] = static_cast<Id>(Vocabulary::kSpecials + rng.below(words));
    const std::size_t rlen = 1 + rng.below(max_clen - 2);
    r[0] = Vocabulary::kBos;
    for (std::size_t t = 0; t < rlen; ++t) r[t + 1] = static_cast<Id>(Vocabulary::kSpecials + rng.below(words));
    r[rlen + 1] = Vocabulary::kEos;
    b.context.push_back(std::move(c));
    b.response.push_back(std::move(r));
  }
  return b;
}

/// Sixteen short single-turn pairs over a small closed vocabulary.
inline std::vector<segcvae::corpus::DialoguePair> toy_pairs() {
  const char* rows[16][2] = {
      {"how are you ?", "i am fine thanks ."},
      {"where are you going ?", "i am going home ."},
      {"what is your name ?", "my name is sam ."},
      {"do you like tea ?", "yes i like tea ."},
      {"is it raining ?", "no it is sunny ."},
      {"can you help me ?", "sure what do you need ?"},
      {"what time is it ?", "it is nine ."},
      {"are you hungry ?", "yes a little ."},
      {"where is the cat ?", "the cat is home ."},
      {"did you sleep well ?", "not really ."},
      {"can we go now ?", "give me a minute ."},
      {"who is that ?", "that is my brother ."},
      {"how old are you ?", "i am nine ."},
      {"what do you need ?", "just some tea ."},
      {"is the shop open ?", "no it is late ."},
      {"why are you late ?", "the bus was late ."},
  };
  std::vector<segcvae::corpus::DialoguePair> out;
  for (const auto& r : rows) out.push_back({segcvae::corpus::tokenize(r[0]), segcvae::corpus::tokenize(r[1]), "toy"});
  return out;
}

}  // namespace fixtures
