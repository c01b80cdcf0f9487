#include <string>

#include "segcvae/gradient_suite.hpp"
#include "segcvae/model.hpp"
#include "segcvae/ops.hpp"

namespace segcvae {

using ad::Tensor;
using corpus::Id;
using corpus::Vocabulary;

namespace {

constexpr std::size_t kHidden = 8;
constexpr std::size_t kChan = 2;
constexpr std::size_t kSampledCoordinates = 64;

Tensor random_tensor(Rng& rng, ad::Shape shape, bool grad = true) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

struct TinySetup {
  model::SegCvae net;
  model::Batch batch;
};

TinySetup tiny_setup(Rng& rng, std::size_t batch_size) {
  const std::size_t M = 1 + rng.below(3);
  const std::size_t words = 6 + rng.below(4);
  const std::size_t N = 4;
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < words; ++i) tokens.push_back("w" + std::to_string(i));
  std::vector<double> emb((words + Vocabulary::kSpecials) * N);
  for (std::size_t i = N; i < emb.size(); ++i) emb[i] = rng.uniform(-0.5, 0.5);
  Vocabulary vocab(std::move(tokens), std::move(emb), N);

  model::ModelConfig cfg;
  cfg.max_clen = 6;
  cfg.n_emb = N;
  cfg.n_hid = kHidden;
  cfg.d_z = 4;
  cfg.kernel_m = 2;
  cfg.chan = kChan;
  cfg.num_triggers = M;
  model::SegCvae net(cfg, vocab, rng.next_u64());

  model::Batch batch;
  for (std::size_t b = 0; b < batch_size; ++b) {
    std::vector<Id> c(cfg.max_clen, Vocabulary::kPad), r(cfg.max_clen, Vocabulary::kPad);
    const std::size_t clen = 2 + rng.below(cfg.max_clen - 1);
    for (std::size_t t = 0; t < clen; ++t) c[t] = static_cast<Id>(Vocabulary::kSpecials + rng.below(words));
    const std::size_t rlen = 1 + rng.below(cfg.max_clen - 2);
    r[0] = Vocabulary::kBos;
    for (std::size_t t = 0; t < rlen; ++t) r[t + 1] = static_cast<Id>(Vocabulary::kSpecials + rng.below(words));
    r[rlen + 1] = Vocabulary::kEos;
    batch.context.push_back(std::move(c));
    batch.response.push_back(std::move(r));
  }
  return {std::move(net), std::move(batch)};
}

std::vector<Tensor> all_parameters(model::SegCvae& net) {
  std::vector<Tensor> out;
  for (auto& [_, t] : net.params()) out.push_back(t);
  return out;
}

// The full objective sums to O(10) while some trigger gradients are O(1e-8),
// so the two-point stencil's rounding noise swamps them.
ad::GradCheckOptions sampled(std::uint64_t seed) {
  ad::GradCheckOptions o;
  o.h = 1e-4;
  o.fourth_order = true;
  o.zero_floor = 1e-6;
  o.sample = kSampledCoordinates;
  o.sample_seed = seed;
  return o;
}

NamedGradCheck make(std::string name, std::function<ad::GradCheckResult(Rng&, std::uint64_t)> c) {
  return {std::move(name), [c = std::move(c)](std::uint64_t seed) {
            Rng rng(seed * 104729 + 31);
            return c(rng, seed);
          }};
}

}  // namespace

std::vector<NamedGradCheck> loss_grad_checks() {
  std::vector<NamedGradCheck> checks;

  checks.push_back(make("elbo", [](Rng& r, std::uint64_t seed) {
    auto s = tiny_setup(r, 3);
    const Rng noise = r.fork(1);
    const double kl_weight = r.uniform(0.1, 1.0);
    auto params = all_parameters(s.net);
    auto f = [&] {
      Rng local = noise;
      auto xs = s.net.prominent_batch(s.batch.context, local, true);
      Tensor r_e = s.net.encode_ids(s.batch.response);
      model::ElboOptions eo;
      eo.kl_weight = kl_weight;
      eo.rng = &local;
      return ad::mean(model::elbo(s.batch, r_e, xs.back(), s.net.heads(), eo).value);
    };
    return ad::grad_check(f, params, sampled(seed));
  }));

  checks.push_back(make("san", [](Rng& r, std::uint64_t) {
    std::vector<Tensor> in{random_tensor(r, {1 + r.below(3), kHidden})};
    return ad::grad_check([&] { return model::san(in[0]); }, in);
  }));

  checks.push_back(make("scn", [](Rng& r, std::uint64_t) {
    const std::size_t M = 1 + r.below(3);
    std::vector<Tensor> in;
    for (std::size_t i = 0; i <= M; ++i) in.push_back(random_tensor(r, {1, kHidden}));
    return ad::grad_check(
        [&] { return model::scn(in[0], std::span<const Tensor>(in).subspan(1)); }, in);
  }));

  checks.push_back(make("sdn", [](Rng& r, std::uint64_t) {
    const std::size_t B = 2 + r.below(3);
    Tensor gt = random_tensor(r, {B, kHidden}, false);
    std::vector<Tensor> in{random_tensor(r, {B, kHidden})};
    return ad::grad_check([&] { return model::sdn(gt, in[0]); }, in);
  }));

  checks.push_back(make("objective", [](Rng& r, std::uint64_t seed) {
    auto s = tiny_setup(r, 3);
    const Rng noise = r.fork(2);
    model::ForwardOptions fo;
    fo.kl_weight = r.uniform(0.1, 1.0);
    fo.lambda = r.uniform(0.1, 1.0);
    auto params = all_parameters(s.net);
    {
      ad::NoGradGuard g;
      fo.sdn_target = s.net.encode_ids(s.batch.response);
    }
    auto f = [&] {
      Rng local = noise;
      fo.rng = &local;
      return s.net.forward(s.batch, fo).objective;
    };
    return ad::grad_check(f, params, sampled(seed));
  }));

  return checks;
}

}  // namespace segcvae
