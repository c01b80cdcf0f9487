#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "segcvae/errors.hpp"
#include "segcvae/ops.hpp"
#include "segcvae/training.hpp"

using namespace segcvae;
using namespace segcvae::training;
using corpus::EncodedPair;
using corpus::Vocabulary;

namespace {

struct Toy {
  Vocabulary vocab;
  std::vector<EncodedPair> data;
  model::ModelConfig cfg;
};

Toy toy(model::Ablation ablation = {}, std::size_t triggers = 2) {
  auto pairs = fixtures::toy_pairs();
  Toy t;
  t.vocab = corpus::build_vocab(pairs, 64, 16, 5);
  t.cfg = fixtures::desk_config(t.vocab.size());
  t.cfg.num_triggers = triggers;
  t.cfg.ablation = ablation;
  for (const auto& p : pairs) t.data.push_back(corpus::encode_pair(p, t.vocab, t.cfg.max_clen));
  return t;
}

TrainingConfig quick_config() {
  TrainingConfig c;
  c.batch_size = 4;
  c.epochs = 2;
  c.snorm_step = 20;
  c.kl_anneal_steps = 20;
  c.seed = 42;
  return c;
}

model::Batch batch_of(const std::vector<EncodedPair>& data, std::size_t begin, std::size_t n) {
  return model::Batch::from(std::span(data).subspan(begin, n));
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("segcvae_training_" + name);
  std::filesystem::remove_all(p);
  return p;
}

bool same_stats(const model::ForwardStats& a, const model::ForwardStats& b) {
  return a.elbo == b.elbo && a.recon == b.recon && a.kl == b.kl && a.san == b.san && a.scn == b.scn &&
         a.sdn == b.sdn && a.loss == b.loss;
}

}  // namespace

TEST_CASE("lambda_schedule") {
  TrainingConfig c;
  c.snorm_step = 1000;
  CHECK(lambda_schedule(0, c) == 0.0);
  CHECK(lambda_schedule(500, c) == 0.5);
  CHECK(lambda_schedule(1000, c) == 1.0);
  CHECK(lambda_schedule(5000, c) == 1.0);
  TrainingConfig d;
  CHECK(lambda_schedule(kDefaultSnormStep / 2, d) == 0.5);
  TrainingConfig k;
  k.lambda_constant = 1.0;
  for (std::size_t s : {0, 1, 777, 100000}) CHECK(lambda_schedule(s, k) == 1.0);

  double prev = 0.0;
  for (std::size_t s = 0; s < 3000; s += 7) {
    const double v = lambda_schedule(s, c);
    CHECK(v >= prev);
    CHECK(v <= 1.0);
    prev = v;
  }
}

TEST_CASE("kl_anneal") {
  TrainingConfig c;
  CHECK(kl_anneal(0, c) == 0.0);
  CHECK(kl_anneal(5000, c) == 0.5);
  CHECK(kl_anneal(10000, c) == 1.0);
  CHECK(kl_anneal(25000, c) == 1.0);
  double prev = 0.0;
  for (std::size_t s = 0; s < 20000; s += 13) {
    const double v = kl_anneal(s, c);
    CHECK(v >= prev);
    CHECK(v <= 1.0);
    prev = v;
  }
}

TEST_CASE("TrainingConfig validation") {
  TrainingConfig c;
  c.snorm_step = 10;
  c.lambda_constant = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  TrainingConfig e;
  e.epochs = 0;
  CHECK_THROWS_AS(e.validate(), ConfigError);
  TrainingConfig l;
  l.learning_rate = 0.0;
  CHECK_THROWS_AS(l.validate(), ConfigError);
  CHECK_NOTHROW(TrainingConfig{}.validate());
}

TEST_CASE("train_step is deterministic") {
  auto t = toy();
  auto cfg = quick_config();
  std::vector<model::ForwardStats> runs[2];
  for (auto& run : runs) {
    TrainState s(model::SegCvae(t.cfg, t.vocab, 9), cfg.seed);
    for (std::size_t i = 0; i < 8; ++i) run.push_back(train_step(batch_of(t.data, (i % 4) * 4, 4), s, cfg));
    CHECK(s.step == 8);
  }
  for (std::size_t i = 0; i < 8; ++i) CHECK(same_stats(runs[0][i], runs[1][i]));
}

TEST_CASE("training resumes exactly from a saved state") {
  auto t = toy();
  auto cfg = quick_config();
  const auto dir = scratch("resume");
  std::filesystem::create_directories(dir);

  TrainState straight(model::SegCvae(t.cfg, t.vocab, 3), cfg.seed);
  std::vector<model::ForwardStats> expected;
  for (std::size_t i = 0; i < 10; ++i) expected.push_back(train_step(batch_of(t.data, (i % 4) * 4, 4), straight, cfg));

  TrainState first(model::SegCvae(t.cfg, t.vocab, 3), cfg.seed);
  for (std::size_t i = 0; i < 5; ++i) train_step(batch_of(t.data, (i % 4) * 4, 4), first, cfg);
  first.to_checkpoint().save(dir / "mid.ckpt");
  auto resumed = TrainState::from_checkpoint(Checkpoint::load(dir / "mid.ckpt"));
  CHECK(resumed.step == 5);
  for (std::size_t i = 5; i < 10; ++i) {
    CHECK(same_stats(train_step(batch_of(t.data, (i % 4) * 4, 4), resumed, cfg), expected[i]));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("fit resumes mid-run with identical logs") {
  auto t = toy();
  auto cfg = quick_config();
  cfg.epochs = 3;
  const auto a = scratch("fit_a"), b = scratch("fit_b");
  std::ostringstream full_log;
  TrainState full(model::SegCvae(t.cfg, t.vocab, 1), cfg.seed);
  fit(full, t.data, t.data, cfg, a, full_log);

  std::ostringstream split_log;
  TrainState part(model::SegCvae(t.cfg, t.vocab, 1), cfg.seed);
  auto short_cfg = cfg;
  short_cfg.max_steps = 6;
  fit(part, t.data, t.data, short_cfg, b, split_log);
  auto resumed = TrainState::from_checkpoint(Checkpoint::load(b / "state.ckpt"));
  CHECK(resumed.step == 6);
  std::ostringstream rest_log;
  fit(resumed, t.data, t.data, cfg, b, rest_log);

  // The interrupted run logs one extra validation line at the cut.
  std::string joined = split_log.str();
  joined.erase(joined.rfind("epoch="));
  joined += rest_log.str();
  CHECK(joined == full_log.str());
  CHECK(resumed.step == full.step);
  for (auto it_a = full.model.params().begin(), it_b = resumed.model.params().begin();
       it_a != full.model.params().end(); ++it_a, ++it_b) {
    CHECK(std::equal(it_a->second.values().begin(), it_a->second.values().end(), it_b->second.values().begin()));
  }
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST_CASE("with M = 1 and every component off, a step is a plain CVAE step") {
  model::Ablation all{true, true, true, true, true};
  auto t = toy(all, 1);
  auto cfg = quick_config();
  cfg.lambda_constant = 0.0;
  cfg.snorm_step.reset();

  TrainState seg(model::SegCvae(t.cfg, t.vocab, 8), cfg.seed);
  TrainState plain(model::SegCvae(t.cfg, t.vocab, 8), cfg.seed);
  std::vector<std::vector<double>> triggers_before;
  for (const auto& name : seg.model.branch_parameters(0)) {
    auto v = seg.model.params().get(name).values();
    triggers_before.emplace_back(v.begin(), v.end());
  }
  for (std::size_t i = 0; i < 6; ++i) {
    auto batch = batch_of(t.data, (i % 4) * 4, 4);
    auto stats = train_step(batch, seg, cfg);

    // Hand-built CVAE objective: conditioning on enc(C), mean ELBO, no norms.
    plain.model.params().zero_grad();
    model::ElboOptions eo;
    eo.kl_weight = kl_anneal(plain.step, cfg);
    eo.rng = &plain.rng;
    ad::Tensor x = plain.model.encode_ids(batch.context);
    auto terms = model::elbo(batch, plain.model.encode_ids(batch.response), x, plain.model.heads(), eo);
    ad::Tensor loss = ad::scale(ad::mean(terms.value), -1.0);
    loss.backward();
    apply_adam(plain, cfg);
    ++plain.step;
    CHECK(stats.loss == loss.item());
  }
  for (auto it_a = seg.model.params().begin(), it_b = plain.model.params().begin();
       it_a != seg.model.params().end(); ++it_a, ++it_b) {
    INFO(it_a->first);
    CHECK(std::equal(it_a->second.values().begin(), it_a->second.values().end(), it_b->second.values().begin()));
  }
  std::size_t k = 0;
  for (const auto& name : seg.model.branch_parameters(0)) {
    auto v = seg.model.params().get(name).values();
    CHECK(std::equal(v.begin(), v.end(), triggers_before[k++].begin()));
  }
}

TEST_CASE("non-finite loss reports the batch id") {
  auto t = toy();
  auto cfg = quick_config();
  TrainState s(model::SegCvae(t.cfg, t.vocab, 2), cfg.seed);
  s.model.params().get("decoder.out_b").mutable_values()[5] = std::nan("");
  try {
    train_step(batch_of(t.data, 0, 4), s, cfg, 17);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.batch_id() == 17);
  }
}

TEST_CASE("training loss improves on the toy corpus") {
  auto t = toy();
  auto cfg = quick_config();
  cfg.batch_size = 16;
  cfg.snorm_step = 100;
  cfg.kl_anneal_steps = 100;
  TrainState s(model::SegCvae(t.cfg, t.vocab, 6), cfg.seed);
  std::vector<double> losses;
  for (std::size_t i = 0; i < 300; ++i) losses.push_back(train_step(batch_of(t.data, 0, 16), s, cfg).loss);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 75; ++i) {
    first += losses[i];
    last += losses[225 + i];
  }
  CHECK(last < first);
}

TEST_CASE("perplexity") {
  auto vocab = fixtures::toy_vocab(6, 16, 4);
  REQUIRE(vocab.size() == 10);
  auto cfg = fixtures::desk_config(vocab.size());
  model::SegCvae net(cfg, vocab, 5);
  Rng rng(3);
  std::vector<EncodedPair> data;
  auto batch = fixtures::random_batch(7, cfg.max_clen, 6, rng);
  for (std::size_t i = 0; i < 7; ++i) data.push_back({batch.context[i], batch.response[i]});

  auto& ow = net.params().get("decoder.out_w");
  auto& ob = net.params().get("decoder.out_b");
  std::fill(ow.mutable_values().begin(), ow.mutable_values().end(), 0.0);
  std::fill(ob.mutable_values().begin(), ob.mutable_values().end(), 0.0);
  const double uniform = perplexity(net, data, 3);
  CHECK(uniform == 10.0);

  SUBCASE("perfect predictor") {
    std::vector<EncodedPair> eos_only;
    for (auto p : data) {
      std::fill(p.response.begin(), p.response.end(), Vocabulary::kPad);
      p.response[0] = Vocabulary::kBos;
      p.response[1] = Vocabulary::kEos;
      eos_only.push_back(p);
    }
    ob.mutable_values()[Vocabulary::kEos] = 1000.0;
    CHECK(perplexity(net, eos_only) == 1.0);
  }

  SUBCASE("thread count does not change the value") {
    ob.mutable_values()[5] = 0.7;
    ow.mutable_values()[3] = -0.4;
    const double one = perplexity(net, data, 2);
    setenv("SEGCVAE_THREADS", "3", 1);
    const double three = perplexity(net, data, 2);
    unsetenv("SEGCVAE_THREADS");
    CHECK(one == three);
    CHECK(one >= 1.0);
  }

  CHECK_THROWS_AS(perplexity(net, std::vector<EncodedPair>{}), EmptyCorpus);
}

TEST_CASE("fit keeps the checkpoint of the best validation epoch") {
  auto t = toy();
  auto cfg = quick_config();
  cfg.epochs = 3;
  const auto dir = scratch("best");
  std::vector<double> ppl{30.0, 20.0, 25.0};
  std::size_t calls = 0;
  std::ostringstream log;
  TrainState s(model::SegCvae(t.cfg, t.vocab, 4), cfg.seed);
  auto res = fit(s, t.data, t.data, cfg, dir, log, [&](const model::SegCvae&) { return ppl[calls++]; });
  CHECK(calls == 3);
  CHECK(res.best_epoch == 2);
  CHECK(res.best_valid_ppl == 20.0);
  auto ck = Checkpoint::load(res.best_checkpoint);
  CHECK(ck.meta_value("epoch") == "2");
  CHECK(std::filesystem::exists(dir / "state.ckpt"));

  std::istringstream lines(log.str());
  std::string first;
  std::getline(lines, first);
  CHECK(first.rfind("step=1 elbo=", 0) == 0);
  CHECK(first.find(" recon=") != std::string::npos);
  CHECK(first.find(" sdn=") != std::string::npos);
  CHECK(first.find(" loss=") != std::string::npos);

  auto bad = cfg;
  bad.epochs = 0;
  TrainState s2(model::SegCvae(t.cfg, t.vocab, 4), cfg.seed);
  CHECK_THROWS_AS(fit(s2, t.data, t.data, bad, dir, log), ConfigError);
  CHECK_THROWS_AS(fit(s2, std::vector<EncodedPair>{}, t.data, cfg, dir, log), EmptyCorpus);
  std::filesystem::remove_all(dir);
}
