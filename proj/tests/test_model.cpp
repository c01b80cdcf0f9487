#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fixtures.hpp"
#include "segcvae/errors.hpp"
#include "segcvae/gradient_suite.hpp"
#include "segcvae/model.hpp"
#include "segcvae/ops.hpp"
#include "segcvae/recurrent.hpp"

using namespace segcvae;
using namespace segcvae::model;
using corpus::Vocabulary;

namespace {

Tensor random_tensor(Rng& rng, ad::Shape shape, double scale = 1.0) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = scale * rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), true);
}

TriggerNetwork make_trigger(Rng& rng, TriggerMode mode, std::size_t m, std::size_t n, std::size_t chan,
                            std::size_t max_clen, std::size_t width, double dense_scale) {
  return {random_tensor(rng, {m, n, 1, chan}), random_tensor(rng, {max_clen - m + 1, width}, dense_scale), mode, 0.1};
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// Expected rows of the argmax-selection oracle plus the smallest top-2 logit gap.
struct ArgmaxOracle {
  std::vector<double> rows;
  double min_gap = 1e300;
};

ArgmaxOracle argmax_oracle(const TriggerNetwork& t, const Tensor& context_emb, const Tensor& table,
                           const std::vector<char>& allowed) {
  ad::NoGradGuard g;
  Tensor logits = ad::matmul(ad::conv_seq(context_emb, t.kernel), t.dense);
  ArgmaxOracle o;
  const std::size_t W = logits.cols(), N = table.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = W;
    double top = -1e300, second = -1e300;
    for (std::size_t c = 0; c < W; ++c) {
      if (!allowed[c]) continue;
      const double v = logits.at(r, c);
      if (v > top) {
        second = top;
        top = v;
        best = c;
      } else if (v > second) {
        second = v;
      }
    }
    o.min_gap = std::min(o.min_gap, top - second);
    for (std::size_t j = 0; j < N; ++j) o.rows.push_back(table.at(best, j));
  }
  return o;
}

std::vector<Id> padded(std::vector<Id> ids, std::size_t len) {
  ids.resize(len, Vocabulary::kPad);
  return ids;
}

}  // namespace

TEST_CASE("internal_separation shapes at full scale (L 25, N 300, m 3, chan 3, M 8)") {
  Rng rng(3);
  const std::size_t L = 25, N = 300, m = 3, chan = 3, M = 8;
  std::vector<TriggerNetwork> triggers;
  for (std::size_t i = 0; i < M; ++i)
    triggers.push_back(make_trigger(rng, TriggerMode::InternalSeparation, m, N, chan, L, L, 1.0));
  Tensor C = random_tensor(rng, {L, N});
  std::vector<Id> ids(L, 7);
  auto out = internal_separation(C, ids, triggers, rng, true);
  REQUIRE(out.size() == M);
  for (const auto& t : out) CHECK(t.shape() == ad::Shape{chan, N});
}

TEST_CASE("internal_separation on a one-token context selects that token") {
  Rng rng(5);
  const std::size_t L = 8, N = 6;
  Tensor C = random_tensor(rng, {L, N});
  auto ids = padded({9}, L);
  std::vector<TriggerNetwork> triggers{make_trigger(rng, TriggerMode::InternalSeparation, 3, N, 2, L, L, 1.0)};
  auto out = internal_separation(C, ids, triggers, rng, false);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < N; ++j) CHECK(out[0].at(r, j) == doctest::Approx(C.at(0, j)).epsilon(1e-12));
}

TEST_CASE("internal_separation matches the argmax selection oracle at tau 0.1") {
  Rng rng(11);
  const std::size_t L = 10, N = 5, chan = 2;
  int scored = 0;
  for (int trial = 0; trial < 40; ++trial) {
    Tensor C = random_tensor(rng, {L, N});
    auto ids = padded({4, 5, 6, 7, 8, 9, 10}, L);
    std::vector<char> allowed(L, 0);
    for (std::size_t j = 0; j < 7; ++j) allowed[j] = 1;
    std::vector<TriggerNetwork> triggers{
        make_trigger(rng, TriggerMode::InternalSeparation, 3, N, chan, L, L, 30.0)};
    auto oracle = argmax_oracle(triggers[0], C, C, allowed);
    if (oracle.min_gap < 1.0) continue;
    ++scored;
    auto out = internal_separation(C, ids, triggers, rng, false);
    CHECK(max_abs_diff(out[0].values(), oracle.rows) < 1e-3);
  }
  CHECK(scored >= 10);
}

TEST_CASE("external_guidance shapes, symmetry and argmax oracle") {
  Rng rng(17);
  const std::size_t L = 25, N = 300, V = 40;
  Tensor C = random_tensor(rng, {L, N});
  Tensor W = random_tensor(rng, {V, N});
  std::vector<TriggerNetwork> eg{make_trigger(rng, TriggerMode::ExternalGuidance, 3, N, 3, L, V, 1.0)};
  auto out = external_guidance(C, eg, W, rng, true);
  CHECK(out[0].shape() == ad::Shape{3, N});

  SUBCASE("zero features give the mean unmasked embedding") {
    const std::size_t n = 4, v = 9, l = 6;
    Tensor c = random_tensor(rng, {l, n});
    Tensor w = random_tensor(rng, {v, n});
    TriggerNetwork t{Tensor::zeros({3, n, 1, 2}, true), random_tensor(rng, {l - 2, v}), TriggerMode::ExternalGuidance,
                     0.1};
    auto res = external_guidance(c, std::span(&t, 1), w, rng, false);
    for (std::size_t j = 0; j < n; ++j) {
      double mean = 0.0;
      for (std::size_t k = Vocabulary::kSpecials; k < v; ++k) mean += w.at(k, j);
      mean /= static_cast<double>(v - Vocabulary::kSpecials);
      for (std::size_t r = 0; r < 2; ++r) CHECK(res[0].at(r, j) == doctest::Approx(mean).epsilon(1e-12));
    }
  }

  SUBCASE("argmax oracle") {
    const std::size_t n = 5, v = 12, l = 8;
    int scored = 0;
    for (int trial = 0; trial < 40; ++trial) {
      Tensor c = random_tensor(rng, {l, n});
      Tensor w = random_tensor(rng, {v, n});
      TriggerNetwork t = make_trigger(rng, TriggerMode::ExternalGuidance, 3, n, 2, l, v, 30.0);
      std::vector<char> allowed(v, 1);
      for (std::size_t s = 0; s < Vocabulary::kSpecials; ++s) allowed[s] = 0;
      auto oracle = argmax_oracle(t, c, w, allowed);
      if (oracle.min_gap < 1.0) continue;
      ++scored;
      auto res = external_guidance(c, std::span(&t, 1), w, rng, false);
      CHECK(max_abs_diff(res[0].values(), oracle.rows) < 1e-3);
    }
    CHECK(scored >= 10);
  }
}

TEST_CASE("trigger mode and width are enforced") {
  Rng rng(1);
  Tensor C = random_tensor(rng, {8, 4});
  std::vector<Id> ids(8, 5);
  std::vector<TriggerNetwork> eg{make_trigger(rng, TriggerMode::ExternalGuidance, 3, 4, 2, 8, 12, 1.0)};
  CHECK_THROWS_AS(internal_separation(C, ids, eg, rng, false), ShapeError);
  std::vector<TriggerNetwork> is{make_trigger(rng, TriggerMode::InternalSeparation, 3, 4, 2, 8, 8, 1.0)};
  CHECK_THROWS_AS(external_guidance(C, is, random_tensor(rng, {12, 4}), rng, false), ShapeError);
}

TEST_CASE("prominent_semantics") {
  SUBCASE("full-scale configuration gives M vectors of width N_hid") {
    auto vocab = fixtures::toy_vocab(20, 300, 2);
    ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    SegCvae net(cfg, vocab, 9);
    Rng rng(4);
    auto ps = net.prominent_semantics(padded({4, 5, 6, 7}, 25), rng, false);
    REQUIRE(ps.x.size() == 8);
    for (const auto& x : ps.x) CHECK(x.shape() == ad::Shape{1, 300});
    CHECK(ps.X.shape() == ad::Shape{8, 300});
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 300; ++j) CHECK(ps.X.at(i, j) == ps.x[i].at(0, j));
  }

  auto vocab = fixtures::toy_vocab(20, 16, 3);
  auto cfg = fixtures::desk_config(vocab.size());
  auto context = padded({4, 9, 11, 5}, cfg.max_clen);

  SUBCASE("without IS each x_i encodes V_EG alone") {
    cfg.ablation.no_is = true;
    SegCvae net(cfg, vocab, 1);
    Rng rng(8);
    auto ps = net.prominent_semantics(context, rng, false);
    Rng unused(0);
    for (std::size_t i = 0; i < cfg.num_triggers; ++i) {
      auto v = external_guidance(net.embed(context), std::span(&net.eg_triggers()[i], 1), net.embedding(), unused,
                                 false)[0];
      Tensor x = ad::gru_encode(v, net.encoder(), std::vector<char>(cfg.chan, 1));
      CHECK(max_abs_diff(ps.x[i].values(), x.values()) < 1e-12);
    }
  }

  SUBCASE("copied trigger weights give identical x_i") {
    SegCvae net(cfg, vocab, 1);
    for (const char* part : {"is", "eg"}) {
      for (const char* w : {"kernel", "dense"}) {
        const std::string src = std::string(part) + ".0." + w, dst = std::string(part) + ".1." + w;
        auto from = net.params().get(src).values();
        std::copy(from.begin(), from.end(), net.params().get(dst).mutable_values().begin());
      }
    }
    Rng rng(2);
    auto ps = net.prominent_semantics(context, rng, false);
    CHECK(max_abs_diff(ps.x[0].values(), ps.x[1].values()) == 0.0);
  }

  SUBCASE("without both selectors x_i is the encoded context") {
    cfg.ablation.no_is = cfg.ablation.no_eg = true;
    SegCvae net(cfg, vocab, 1);
    Rng rng(2);
    auto ps = net.prominent_semantics(context, rng, false);
    Tensor enc = net.encode_ids({context});
    for (const auto& x : ps.x) CHECK(max_abs_diff(x.values(), enc.values()) == 0.0);
  }
}

TEST_CASE("elbo examples") {
  auto vocab = fixtures::toy_vocab(6, 16, 4);  // vocab_size 10
  REQUIRE(vocab.size() == 10);
  auto cfg = fixtures::desk_config(vocab.size());
  SegCvae net(cfg, vocab, 5);
  Batch batch;
  batch.context = {padded({4, 5, 6}, cfg.max_clen)};
  batch.response = {padded({Vocabulary::kBos, 7, 8, 9, Vocabulary::kEos}, cfg.max_clen)};
  Rng rng(1);
  auto xs = net.prominent_batch(batch.context, rng, true);
  Tensor r_e = net.encode_ids(batch.response);

  SUBCASE("uniform decoder") {
    auto& ow = net.params().get("decoder.out_w");
    auto& ob = net.params().get("decoder.out_b");
    std::fill(ow.mutable_values().begin(), ow.mutable_values().end(), 0.0);
    std::fill(ob.mutable_values().begin(), ob.mutable_values().end(), 0.0);
    ElboOptions eo;
    eo.kl_weight = 0.0;
    auto t = elbo(batch, r_e, xs[0], net.heads(), eo);
    CHECK(t.scored_tokens[0] == 4.0);
    CHECK(t.recon.item() == doctest::Approx(4.0 * std::log(0.1)).epsilon(1e-12));
    CHECK(t.recon.item() == doctest::Approx(-9.21).epsilon(1e-3));
  }

  SUBCASE("kl_weight 0 gives recon") {
    ElboOptions eo;
    eo.kl_weight = 0.0;
    auto t = elbo(batch, r_e, xs[0], net.heads(), eo);
    CHECK(t.kl.item() > 0.0);
    CHECK(t.value.item() == t.recon.item());
  }

  SUBCASE("recognition equal to prior gives zero kl") {
    const std::size_t H = cfg.n_hid;
    for (const char* head : {"mu", "lv"}) {
      auto& rw = net.params().get(std::string("recog.") + head + "_w");
      const auto& pw = net.params().get(std::string("prior.") + head + "_w");
      auto rv = rw.mutable_values();
      std::fill(rv.begin(), rv.begin() + H * cfg.d_z, 0.0);
      std::copy(pw.values().begin(), pw.values().end(), rv.begin() + H * cfg.d_z);
      auto& rb = net.params().get(std::string("recog.") + head + "_b");
      rb.mutable_values()[0] = 0.25;
      net.params().get(std::string("prior.") + head + "_b").mutable_values()[0] = 0.25;
    }
    ElboOptions eo;
    auto t = elbo(batch, r_e, xs[0], net.heads(), eo);
    CHECK(t.kl.item() == 0.0);
    CHECK(t.value.item() == t.recon.item());
  }

  SUBCASE("kl_weight outside [0, 1]") {
    ElboOptions eo;
    eo.kl_weight = 1.5;
    CHECK_THROWS_AS(elbo(batch, r_e, xs[0], net.heads(), eo), DomainError);
  }
}

TEST_CASE("elbo does not exceed recon when kl is positive") {
  auto vocab = fixtures::toy_vocab(12, 16, 6);
  auto cfg = fixtures::desk_config(vocab.size());
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    SegCvae net(cfg, vocab, rng.next_u64());
    auto batch = fixtures::random_batch(4, cfg.max_clen, 12, rng);
    auto xs = net.prominent_batch(batch.context, rng, true);
    ElboOptions eo;
    eo.kl_weight = rng.uniform(0.01, 1.0);
    eo.rng = &rng;
    auto t = elbo(batch, net.encode_ids(batch.response), xs[0], net.heads(), eo);
    for (std::size_t b = 0; b < 4; ++b) {
      REQUIRE(t.kl.values()[b] > 0.0);
      CHECK(t.value.values()[b] <= t.recon.values()[b]);
    }
  }
}

TEST_CASE("select_positive") {
  CHECK(select_positive(std::vector<double>{-3.2, -1.1, -7.0}) == 1);
  CHECK(select_positive(std::vector<double>{-4.0}) == 0);
  CHECK(select_positive(std::vector<double>{-2.0, -2.0}) == 0);
  CHECK_THROWS_AS(select_positive(std::vector<double>{}), DomainError);

  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> e(1 + rng.below(6));
    for (auto& v : e) v = -0.25 * static_cast<double>(rng.below(40));
    const double shift = 0.25 * (static_cast<double>(rng.below(200)) - 100.0);
    auto shifted = e;
    for (auto& v : shifted) v += shift;
    CHECK(select_positive(e) == select_positive(shifted));
  }
}

TEST_CASE("san") {
  CHECK(san(Tensor::matrix({{0.3, -1.2, 4.0}})).item() == 0.0);
  CHECK(san(Tensor::zeros({2, 3})).item() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(san(Tensor::matrix({{10, 0}, {0, 10}})).item() < 1e-6);

  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor X = random_tensor(rng, {1 + rng.below(5), 4}, 3.0);
    CHECK(san(X).item() >= 0.0);
  }
}

TEST_CASE("scn") {
  Tensor enc = Tensor::matrix({{0.5, -1.0, 2.0}});
  std::vector<Tensor> same{Tensor::matrix({{0.25, -0.5, 1.0}}), Tensor::matrix({{0.25, -0.5, 1.0}})};
  CHECK(scn(enc, same).item() == doctest::Approx(0.0).epsilon(1e-15));
  std::vector<Tensor> opposite{Tensor::matrix({{-0.5, 1.0, -2.0}})};
  CHECK(scn(enc, opposite).item() == doctest::Approx(2.0).epsilon(1e-15));
  std::vector<Tensor> orth{Tensor::matrix({{2.0, 1.0, 0.0}})};
  CHECK(scn(enc, orth).item() == doctest::Approx(1.0).epsilon(1e-15));
  std::vector<Tensor> zero{Tensor::zeros({1, 3})};
  CHECK_THROWS_AS(scn(enc, zero), DegenerateVector);

  Rng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor> xs{random_tensor(rng, {1, 5}), random_tensor(rng, {1, 5})};
    const double v = scn(random_tensor(rng, {1, 5}), xs).item();
    CHECK(v >= 0.0);
    CHECK(v <= 2.0);
  }
}

TEST_CASE("sdn") {
  Tensor gt = Tensor::matrix({{1, 0}, {0, 1}});
  CHECK(sdn(gt, gt).item() == 0.0);

  Tensor same_rows = Tensor::matrix({{0.6, 0.8}, {0.6, 0.8}});
  const double e = std::exp(1.0);
  const double p = e / (e + 1.0), q = 1.0 / (e + 1.0);
  const double expected = p * std::log(p / 0.5) + q * std::log(q / 0.5);
  CHECK(sdn(gt, same_rows).item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected > 0.0);

  Tensor gen = Tensor::matrix({{1.0, 0.2}, {0.3, 0.9}});
  CHECK(sdn(gt, gen).item() != doctest::Approx(sdn(gt, ad::scale(gen, 2.0)).item()));

  CHECK_THROWS_AS(sdn(Tensor::matrix({{1, 0}}), Tensor::matrix({{1, 0}})), DomainError);
  CHECK_THROWS_AS(sdn(gt, Tensor::zeros({2, 3})), ShapeError);

  SUBCASE("gradient reaches only the generated side") {
    Rng rng(3);
    Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4});
    sdn(a, b).backward();
    CHECK(!a.has_grad());
    CHECK(b.has_grad());
  }

  Rng rng(15);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 2 + rng.below(4);
    CHECK(sdn(random_tensor(rng, {B, 3}, 2.0), random_tensor(rng, {B, 3}, 2.0)).item() >= 0.0);
  }
}

TEST_CASE("total_loss") {
  Tensor elbo_plus = Tensor::scalar(-5.0);
  Tensor s = Tensor::scalar(0.5), c = Tensor::scalar(0.1), d = Tensor::scalar(0.2);
  CHECK(total_loss(elbo_plus, s, c, d, 0.0).item() == -5.0);
  CHECK(total_loss(elbo_plus, s, c, d, 1.0).item() == doctest::Approx(-5.8).epsilon(1e-15));
  Ablation no_san;
  no_san.no_san = true;
  CHECK(total_loss(elbo_plus, s, c, d, 1.0, no_san).item() == doctest::Approx(-5.3).epsilon(1e-15));
  CHECK(total_loss(elbo_plus, s, c, Tensor(), 1.0).item() == doctest::Approx(-5.6).epsilon(1e-15));
}

TEST_CASE("gradient blocking") {
  auto vocab = fixtures::toy_vocab(12, 16, 7);
  auto cfg = fixtures::desk_config(vocab.size());
  cfg.num_triggers = 3;
  Rng rng(77);
  for (int trial = 0; trial < 6; ++trial) {
    SegCvae net(cfg, vocab, rng.next_u64());
    auto batch = fixtures::random_batch(1, cfg.max_clen, 12, rng);
    ForwardOptions fo;
    fo.lambda = 0.0;
    fo.kl_weight = 0.5;
    fo.rng = &rng;
    net.params().zero_grad();
    auto res = net.forward(batch, fo);
    res.objective.backward();
    const std::size_t chosen = res.positive[0];
    for (std::size_t i = 0; i < cfg.num_triggers; ++i) {
      double norm = 0.0;
      for (const auto& name : net.branch_parameters(i)) {
        const auto& t = net.params().get(name);
        if (!t.has_grad()) continue;
        for (double g : t.grad()) norm += std::abs(g);
      }
      if (i == chosen) {
        CHECK(norm > 0.0);
      } else {
        CHECK(norm == 0.0);
      }
    }
  }

  SUBCASE("norm terms still reach every branch") {
    SegCvae net(cfg, vocab, 3);
    auto batch = fixtures::random_batch(1, cfg.max_clen, 12, rng);
    ForwardOptions fo;
    fo.lambda = 1.0;
    fo.rng = &rng;
    auto res = net.forward(batch, fo);
    res.objective.backward();
    for (std::size_t i = 0; i < cfg.num_triggers; ++i) {
      const auto& t = net.params().get("is." + std::to_string(i) + ".dense");
      REQUIRE(t.has_grad());
      double norm = 0.0;
      for (double g : t.grad()) norm += std::abs(g);
      CHECK(norm > 0.0);
    }
  }
}

TEST_CASE("forward statistics and ablations") {
  auto vocab = fixtures::toy_vocab(12, 16, 8);
  auto cfg = fixtures::desk_config(vocab.size());
  Rng rng(5);
  auto batch = fixtures::random_batch(4, cfg.max_clen, 12, rng);
  SegCvae net(cfg, vocab, 2);
  ForwardOptions fo;
  fo.lambda = 0.5;
  fo.rng = &rng;
  auto res = net.forward(batch, fo);
  CHECK(res.positive.size() == 4);
  CHECK(res.branch_elbos.size() == cfg.num_triggers);
  const auto& s = res.stats;
  CHECK(s.elbo == doctest::Approx(s.recon - s.kl).epsilon(1e-12));
  CHECK(s.loss == doctest::Approx(-(s.elbo - 0.5 * (s.san + s.scn + s.sdn))).epsilon(1e-12));
  CHECK(s.sdn > 0.0);

  cfg.ablation.no_sdn = true;
  SegCvae ablated(cfg, vocab, 2);
  auto r2 = ablated.forward(batch, fo);
  CHECK(r2.stats.sdn == 0.0);
  CHECK(r2.stats.loss == doctest::Approx(-(r2.stats.elbo - 0.5 * (r2.stats.san + r2.stats.scn))).epsilon(1e-12));

  fo.noise = false;
  fo.rng = nullptr;
  auto a = net.forward(batch, fo);
  auto b = net.forward(batch, fo);
  CHECK(a.stats.loss == b.stats.loss);
}

TEST_CASE("checkpoint round trip restores the model") {
  auto vocab = fixtures::toy_vocab(12, 16, 9);
  auto cfg = fixtures::desk_config(vocab.size());
  cfg.ablation.no_scn = true;
  SegCvae net(cfg, vocab, 4);
  const auto path = std::filesystem::temp_directory_path() / "segcvae_model_roundtrip.ckpt";
  net.to_checkpoint().save(path);
  auto restored = SegCvae::from_checkpoint(Checkpoint::load(path));
  std::filesystem::remove(path);
  CHECK(restored.config().ablation == cfg.ablation);
  CHECK(restored.config().num_triggers == cfg.num_triggers);
  Rng rng(1);
  auto batch = fixtures::random_batch(3, cfg.max_clen, 12, rng);
  ForwardOptions fo;
  fo.noise = false;
  fo.lambda = 0.3;
  CHECK(net.forward(batch, fo).stats.loss == restored.forward(batch, fo).stats.loss);
}

TEST_CASE("loss terms pass finite-difference checks") {
  for (const auto& o : run_grad_suite(loss_grad_checks(), 12, 1e-4)) {
    INFO(o.name << " max rel err " << o.max_rel_error);
    CHECK(o.passed);
  }
}

TEST_CASE("prior_likelihood agrees with the prior-side reconstruction term") {
  auto vocab = fixtures::toy_vocab(12, 16, 9);
  auto cfg = fixtures::desk_config(vocab.size());
  cfg.num_triggers = 3;
  SegCvae net(cfg, vocab, 21);
  Rng rng(4);
  auto batch = fixtures::random_batch(5, cfg.max_clen, 12, rng);
  auto lik = net.prior_likelihood(batch);
  Rng unused(0);
  auto xs = net.prominent_batch(batch.context, unused, false);
  ElboOptions eo;
  eo.kl_weight = 0.0;
  eo.prior_only = true;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    double best = -1e300;
    for (const auto& x : xs) best = std::max(best, elbo(batch, Tensor(), x, net.heads(), eo).recon[b]);
    CHECK(std::abs(static_cast<double>(lik.log_likelihood[b]) - best) < 1e-12 * std::max(1.0, std::abs(best)));
    auto terms = elbo(batch, Tensor(), xs[lik.branch[b]], net.heads(), eo);
    CHECK(lik.tokens[b] == terms.scored_tokens[b]);
  }
}

TEST_CASE("scn is exactly zero for exactly proportional inputs") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t D = 1 + rng.below(16);
    Tensor enc = random_tensor(rng, {1, D}, 5.0);
    // x = {enc, enc, 2 enc} sums to exactly 4 enc; integer entries scaled by 3 stay exact too.
    std::vector<Tensor> xs{enc, enc, ad::scale(enc, 2.0)};
    CHECK(scn(enc, xs).item() == 0.0);
    std::vector<double> ints(D);
    for (auto& v : ints) v = static_cast<double>(static_cast<int>(rng.below(41)) - 20);
    if (std::all_of(ints.begin(), ints.end(), [](double v) { return v == 0.0; })) ints[0] = 1.0;
    Tensor a = Tensor::from({1, D}, ints);
    std::vector<Tensor> triple{ad::scale(a, 3.0)};
    CHECK(scn(a, triple).item() == 0.0);
  }
}
