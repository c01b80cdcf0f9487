#include <cmath>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "metric_fixture.hpp"
#include "segcvae/errors.hpp"
#include "segcvae/eval.hpp"
#include "segcvae/ops.hpp"

using namespace segcvae;
using namespace segcvae::eval;
using corpus::tokenize;
using corpus::Vocabulary;
using namespace metric_fixture;

namespace {

Vocabulary vocab_2d() { return Vocabulary({"a", "b"}, {0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 1}, 2); }

}  // namespace

TEST_CASE("distinct_n") {
  CHECK(distinct_n(toks({"a b", "a b"}), 1) == 0.5);
  CHECK(distinct_n(toks({"x y z w"}), 1) == 1.0);
  CHECK(distinct_n(toks({"a a a"}), 2) == 0.5);
  CHECK_THROWS_AS(distinct_n(toks({"a", "b"}), 2), DomainError);
  CHECK_THROWS_AS(distinct_n(std::vector<Tokens>{}, 1), DomainError);
  CHECK(distinct_n(std::vector<Tokens>{{"a", "<unk>", "a"}}, 1) == 0.5);

  SUBCASE("appending already-seen n-grams never increases the value") {
    Rng rng(4);
    const char* words[] = {"p", "q", "r", "s"};
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Tokens> set;
      for (int i = 0; i < 3; ++i) {
        Tokens t;
        for (std::size_t k = 0, n = 2 + rng.below(4); k < n; ++k) t.push_back(words[rng.below(4)]);
        set.push_back(t);
      }
      for (std::size_t n : {1, 2}) {
        const double before = distinct_n(set, n);
        auto more = set;
        more.push_back(set[rng.below(3)]);
        CHECK(distinct_n(more, n) <= before);
      }
    }
  }
}

TEST_CASE("bleu_n") {
  auto x = tokenize("the quick brown fox");
  CHECK(bleu_n(x, std::vector<Tokens>{x}, 3) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(bleu_n(tokenize("a b"), toks({"c d"}), 1) == 0.0);
  CHECK(bleu_n(tokenize("a b c d"), toks({"a b c e"}), 1) == 0.75);
  CHECK_THROWS_AS(bleu_n(Tokens{}, toks({"a"}), 1), DomainError);
  CHECK_THROWS_AS(bleu_n(tokenize("a"), std::vector<Tokens>{}, 1), DomainError);

  SUBCASE("brevity penalty picks the closest reference, shorter on ties") {
    // candidate length 3; references of length 2 and 4 tie, so r = 2 and BP = 1.
    CHECK(bleu_n(tokenize("a b c"), toks({"a b", "x y z w"}), 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    // single longer reference: BP = exp(1 - 5/3).
    CHECK(bleu_n(tokenize("a b c"), toks({"a b c d e"}), 1) ==
          doctest::Approx(std::exp(1.0 - 5.0 / 3.0)).epsilon(1e-15));
  }

  SUBCASE("properties") {
    Rng rng(9);
    const char* words[] = {"p", "q", "r", "s", "t"};
    auto sentence = [&] {
      Tokens t;
      for (std::size_t k = 0, n = 1 + rng.below(6); k < n; ++k) t.push_back(words[rng.below(5)]);
      return t;
    };
    for (int trial = 0; trial < 100; ++trial) {
      Tokens s = sentence();
      for (std::size_t n : {1, 2, 3}) CHECK(bleu_n(s, std::vector<Tokens>{s}, n) == doctest::Approx(1.0).epsilon(1e-12));
      std::vector<Tokens> refs{sentence(), sentence(), sentence()};
      std::vector<Tokens> reversed(refs.rbegin(), refs.rend());
      const double v = bleu_n(s, refs, 2);
      CHECK(v == bleu_n(s, reversed, 2));
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("embedding_average and coherence") {
  auto v = vocab_2d();
  CHECK(embedding_average(tokenize("a"), tokenize("a b"), v) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
  CHECK(embedding_average(tokenize("a b a"), tokenize("a b a"), v) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(embedding_average(tokenize("a"), tokenize("b"), v) == 0.0);
  CHECK(coherence(tokenize("b"), tokenize("a b"), v) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
  CHECK(coherence(tokenize("a b"), tokenize("a b"), v) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(coherence(tokenize("a a"), tokenize("b"), v) == 0.0);
  CHECK_THROWS_AS(embedding_average(tokenize("zzz"), tokenize("a"), v), DegenerateVector);
  CHECK_THROWS_AS(coherence(tokenize("a"), Tokens{"<unk>"}, v), DegenerateVector);

  SUBCASE("token order does not matter") {
    auto fv = fixture_vocab();
    Rng rng(2);
    for (const auto& s : fixture()) {
      Tokens shuffled = s;
      for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
      CHECK(embedding_average(s, fixture()[0], fv) ==
            doctest::Approx(embedding_average(shuffled, fixture()[0], fv)).epsilon(1e-14));
      CHECK(coherence(fixture()[3], s, fv) == doctest::Approx(coherence(fixture()[3], shuffled, fv)).epsilon(1e-14));
    }
  }
}

TEST_CASE("length_avg") {
  CHECK(length_avg(toks({"a b", "a b c d"})) == 3.0);
  CHECK(length_avg(std::vector<Tokens>{{}, {}}) == 0.0);
  Tokens long_one(25, "w");
  CHECK(length_avg(std::vector<Tokens>{long_one}) == 25.0);
  CHECK(length_avg(std::vector<Tokens>{{"a", "<unk>"}}) == 1.0);
  CHECK_THROWS_AS(length_avg(std::vector<Tokens>{}), DomainError);
}

TEST_CASE("twenty-sentence oracle table") {
  const auto& s = fixture();
  auto v = fixture_vocab();
  CHECK(std::abs(distinct_n(s, 1) - 0.28735632183908044) < 1e-9);
  CHECK(std::abs(distinct_n(s, 2) - 0.65671641791044777) < 1e-9);
  CHECK(std::abs(length_avg(s) - 4.3499999999999996) < 1e-9);
  for (std::size_t i = 0; i < 10; ++i) {
    std::vector<Tokens> refs{s[10 + i], s[10 + (i + 1) % 10]};
    CHECK(std::abs(bleu_n(s[i], refs, 1) - kBleu1[i]) < 1e-9);
    CHECK(std::abs(bleu_n(s[i], refs, 2) - kBleu2[i]) < 1e-9);
    CHECK(std::abs(bleu_n(s[i], refs, 3) - kBleu3[i]) < 1e-9);
    CHECK(std::abs(embedding_average(s[i], s[10 + i], v) - kEmb[i]) < 1e-9);
    CHECK(std::abs(coherence(s[(i + 5) % 20], s[i], v) - kCoh[i]) < 1e-9);
  }
}

TEST_CASE("evaluate and the report") {
  auto v = vocab_2d();
  std::vector<EvalItem> items{
      {tokenize("a"), toks({"a b", "b"}), toks({"a b"})},
      {tokenize("b"), toks({"a"}), toks({"a", "b b"})},
  };
  auto rep = evaluate(items, v);
  CHECK(rep.contexts == 2);
  CHECK(rep.responses == 3);
  CHECK(rep.bleu1 == doctest::Approx((1.0 + std::exp(-1.0) * 1.0 + 1.0) / 3.0).epsilon(1e-12));
  CHECK(rep.length == doctest::Approx(4.0 / 3.0).epsilon(1e-15));
  CHECK(rep.distinct1 == doctest::Approx(2.0 / 4.0).epsilon(1e-15));
  CHECK(rep.embedding_average == doctest::Approx((1.0 + std::sqrt(0.5) + 1.0) / 3.0).epsilon(1e-12));
  CHECK(rep.coherence == doctest::Approx((std::sqrt(0.5) + 0.0 + 0.0) / 3.0).epsilon(1e-12));
  std::ostringstream out;
  write_report(out, rep);
  CHECK(out.str().find("distinct-2: ") != std::string::npos);
  CHECK(out.str().find("contexts: 2\n") != std::string::npos);

  std::stringstream dump;
  write_generations(dump, items);
  CHECK(dump.str() == "a\ta b\tb\nb\ta\n");
  auto back = read_generations(dump);
  REQUIRE(back.size() == 2);
  CHECK(back[0].context == items[0].context);
  CHECK(back[0].generated == items[0].generated);
  CHECK(back[1].generated == items[1].generated);
}

TEST_CASE("greedy_decode") {
  auto vocab = fixtures::toy_vocab(12, 16, 3);
  auto cfg = fixtures::desk_config(vocab.size());
  model::SegCvae net(cfg, vocab, 4);
  std::vector<Id> context{4, 5, 6, 0, 0, 0, 0, 0};
  Rng rng(1);
  model::Tensor z = model::Tensor::from({1, cfg.d_z}, std::vector<double>(cfg.d_z, 0.3));

  auto first = greedy_decode(net, context, 1, z);
  CHECK(first == greedy_decode(net, context, 1, z));
  for (Id id : first) CHECK((!Vocabulary::is_special(id) || id == Vocabulary::kUnk));

  auto& ob = net.params().get("decoder.out_b");
  ob.mutable_values()[Vocabulary::kEos] = 1000.0;
  CHECK(greedy_decode(net, context, 0, z).empty());
  ob.mutable_values()[Vocabulary::kEos] = -1000.0;
  CHECK(greedy_decode(net, context, 0, z).size() == cfg.max_clen);
  ob.mutable_values()[Vocabulary::kPad] = 1e6;
  ob.mutable_values()[Vocabulary::kBos] = 1e6;
  for (Id id : greedy_decode(net, context, 0, z)) CHECK((id != Vocabulary::kPad && id != Vocabulary::kBos));

  CHECK_THROWS_AS(greedy_decode(net, context, 2, z), DomainError);
}

TEST_CASE("generate_n") {
  auto vocab = fixtures::toy_vocab(12, 16, 3);
  auto cfg = fixtures::desk_config(vocab.size());
  cfg.num_triggers = 8;
  model::SegCvae net(cfg, vocab, 4);
  std::vector<Id> context{4, 5, 6, 7, 0, 0, 0, 0};
  Rng a(11), b(11);
  auto rec = generate_n(net, context, 8, a);
  REQUIRE(rec.responses.size() == 8);
  for (std::size_t k = 0; k < 8; ++k) CHECK(rec.branches[k] == k);
  auto again = generate_n(net, context, 8, b);
  CHECK(rec.responses == again.responses);
  CHECK(rec.z == again.z);
  CHECK(rec.z[0] != rec.z[1]);

  Rng c(3);
  auto one = generate_n(net, context, 1, c);
  CHECK(one.responses.size() == 1);
  CHECK(one.branches[0] == 0);
  CHECK_THROWS_AS(generate_n(net, context, 0, c), DomainError);

  auto words = to_tokens(std::vector<Id>{Vocabulary::kBos, 4, Vocabulary::kUnk, 5}, vocab);
  CHECK(words == Tokens{vocab.token(4), vocab.token(5)});
}
