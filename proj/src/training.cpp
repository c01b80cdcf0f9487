#include "segcvae/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <thread>

#include "segcvae/errors.hpp"
#include "segcvae/ops.hpp"

namespace segcvae::training {

using model::Batch;
using model::ForwardStats;

void TrainingConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (kl_anneal_steps == 0) throw ConfigError("kl_anneal_steps must be positive");
  if (snorm_step && *snorm_step == 0) throw ConfigError("snorm_step must be positive");
  if (snorm_step && lambda_constant) throw ConfigError("snorm_step and lambda_constant are mutually exclusive");
  if (lambda_constant && (*lambda_constant < 0.0 || *lambda_constant > 1.0))
    throw ConfigError("lambda_constant must lie in [0, 1]");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (max_steps && *max_steps == 0) throw ConfigError("max_steps must be positive");
}

double lambda_schedule(std::size_t step, const TrainingConfig& cfg) {
  if (cfg.lambda_constant) return *cfg.lambda_constant;
  return std::min(static_cast<double>(step) / static_cast<double>(cfg.effective_snorm_step()), 1.0);
}

double kl_anneal(std::size_t step, const TrainingConfig& cfg) {
  return std::min(static_cast<double>(step) / static_cast<double>(cfg.kl_anneal_steps), 1.0);
}

TrainState::TrainState(model::SegCvae m, std::uint64_t seed) : model(std::move(m)), rng(Rng(seed).fork(0x7a11)) {
  for (const auto& [_, t] : model.params()) {
    adam_m.emplace_back(t.size(), 0.0);
    adam_v.emplace_back(t.size(), 0.0);
  }
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Checkpoint TrainState::to_checkpoint() const {
  Checkpoint ck = model.to_checkpoint();
  ck.meta["step"] = std::to_string(step);
  ck.meta["epoch"] = std::to_string(epoch);
  ck.meta["next_batch"] = std::to_string(next_batch);
  ck.meta["best_valid_ppl"] = format_double(best_valid_ppl);
  ck.meta["best_epoch"] = std::to_string(best_epoch);
  ck.meta["rng_seed"] = std::to_string(rng.seed());
  ck.meta["rng_counter"] = std::to_string(rng.counter());
  std::size_t k = 0;
  for (const auto& [name, t] : model.params()) {
    ck.arrays.push_back({"adam_m/" + name, Dtype::F64, t.shape(), adam_m[k]});
    ck.arrays.push_back({"adam_v/" + name, Dtype::F64, t.shape(), adam_v[k]});
    ++k;
  }
  return ck;
}

TrainState TrainState::from_checkpoint(const Checkpoint& ck) {
  TrainState s(model::SegCvae::from_checkpoint(ck), 0);
  auto num = [&](const char* key) { return static_cast<std::size_t>(std::stoull(ck.meta_value(key))); };
  s.step = num("step");
  s.epoch = num("epoch");
  s.next_batch = num("next_batch");
  s.best_valid_ppl = std::stod(ck.meta_value("best_valid_ppl"));
  s.best_epoch = num("best_epoch");
  s.rng = Rng(std::stoull(ck.meta_value("rng_seed")), std::stoull(ck.meta_value("rng_counter")));
  std::size_t k = 0;
  for (const auto& [name, t] : s.model.params()) {
    s.adam_m[k] = ck.array("adam_m/" + name).values;
    s.adam_v[k] = ck.array("adam_v/" + name).values;
    if (s.adam_m[k].size() != t.size() || s.adam_v[k].size() != t.size())
      throw FormatError("optimizer moments do not match parameter " + name);
    ++k;
  }
  return s;
}

double apply_adam(TrainState& state, const TrainingConfig& cfg) {
  double sq = 0.0;
  for (const auto& [_, t] : state.model.params()) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  std::size_t k = 0;
  for (auto& [_, p] : state.model.params()) {
    if (p.has_grad()) {
      auto g = p.grad();
      auto w = p.mutable_values();
      auto& m = state.adam_m[k];
      auto& v = state.adam_v[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] * clip;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        w[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_epsilon);
      }
    }
    ++k;
  }
  return norm;
}

ForwardStats train_step(const Batch& batch, TrainState& state, const TrainingConfig& cfg, long batch_id) {
  model::ForwardOptions fo;
  fo.kl_weight = kl_anneal(state.step, cfg);
  fo.lambda = lambda_schedule(state.step, cfg);
  fo.noise = true;
  fo.rng = &state.rng;
  state.model.params().zero_grad();
  auto res = state.model.forward(batch, fo);
  if (!std::isfinite(res.stats.loss)) {
    throw NonFiniteLoss("non-finite loss at step " + std::to_string(state.step), batch_id);
  }
  ad::scale(res.objective, -1.0).backward();
  const double norm = apply_adam(state, cfg);
  if (!std::isfinite(norm)) {
    throw NonFiniteLoss("non-finite gradient at step " + std::to_string(state.step), batch_id);
  }
  ++state.step;
  return res.stats;
}

void write_log_line(std::ostream& out, std::size_t step, const ForwardStats& s) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "step=%zu elbo=%.9g recon=%.9g kl=%.9g san=%.9g scn=%.9g sdn=%.9g loss=%.9g\n", step,
                s.elbo, s.recon, s.kl, s.san, s.scn, s.sdn, s.loss);
  out << buf;
}

namespace {

std::size_t thread_count() {
  const char* env = std::getenv("SEGCVAE_THREADS");
  if (!env) return 1;
  try {
    const long n = std::stol(env);
    return n > 0 ? static_cast<std::size_t>(n) : 1;
  } catch (const std::exception&) {
    return 1;
  }
}

Batch slice_batch(std::span<const corpus::EncodedPair> data, std::size_t begin, std::size_t end) {
  return Batch::from(data.subspan(begin, end - begin));
}

}  // namespace

double perplexity(const model::SegCvae& model, std::span<const corpus::EncodedPair> data, std::size_t batch_size) {
  if (data.empty()) throw EmptyCorpus("perplexity of an empty dataset");
  if (batch_size == 0) throw DomainError("batch_size must be positive");
  const std::size_t batches = (data.size() + batch_size - 1) / batch_size;
  std::vector<long double> nll(batches, 0.0L);
  std::vector<double> tokens(batches, 0.0);
  auto run = [&](std::size_t b) {
    const std::size_t begin = b * batch_size;
    auto lik = model.prior_likelihood(slice_batch(data, begin, std::min(begin + batch_size, data.size())));
    for (std::size_t i = 0; i < lik.log_likelihood.size(); ++i) {
      nll[b] -= lik.log_likelihood[i];
      tokens[b] += lik.tokens[i];
    }
  };
  const std::size_t workers = std::min(thread_count(), batches);
  if (workers <= 1) {
    for (std::size_t b = 0; b < batches; ++b) run(b);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t b = w; b < batches; b += workers) run(b);
      });
    }
    for (auto& t : pool) t.join();
  }
  long double total_nll = 0.0L;
  double total_tokens = 0.0;
  for (std::size_t b = 0; b < batches; ++b) {
    total_nll += nll[b];
    total_tokens += tokens[b];
  }
  if (total_tokens == 0.0) throw EmptyCorpus("perplexity over zero scored tokens");
  return static_cast<double>(std::exp(total_nll / static_cast<long double>(total_tokens)));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng(seed).fork(0xe90c + epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

FitResult fit(TrainState& state, std::span<const corpus::EncodedPair> train,
              std::span<const corpus::EncodedPair> valid, const TrainingConfig& cfg,
              const std::filesystem::path& out_dir, std::ostream& log, Validator validator) {
  cfg.validate();
  if (train.empty()) throw EmptyCorpus("empty training split");
  if (!validator) {
    if (valid.empty()) throw EmptyCorpus("empty validation split");
    validator = [valid](const model::SegCvae& m) { return perplexity(m, valid); };
  }
  std::filesystem::create_directories(out_dir);
  FitResult result;
  result.best_checkpoint = out_dir / "best.ckpt";
  const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  auto out_of_steps = [&] { return cfg.max_steps && state.step >= *cfg.max_steps; };

  while (state.epoch < cfg.epochs && !out_of_steps()) {
    const auto order = epoch_order(train.size(), cfg.seed, state.epoch);
    while (state.next_batch < batches && !out_of_steps()) {
      const std::size_t begin = state.next_batch * cfg.batch_size;
      const std::size_t end = std::min(begin + cfg.batch_size, train.size());
      Batch batch;
      for (std::size_t i = begin; i < end; ++i) {
        batch.context.push_back(train[order[i]].context);
        batch.response.push_back(train[order[i]].response);
      }
      const long batch_id = static_cast<long>(state.epoch * batches + state.next_batch);
      auto stats = train_step(batch, state, cfg, batch_id);
      write_log_line(log, state.step, stats);
      ++state.next_batch;
    }
    const bool epoch_done = state.next_batch >= batches;
    if (epoch_done) {
      ++state.epoch;
      state.next_batch = 0;
    }
    // A run cut short by max_steps still gets a validation point.
    const double ppl = validator(state.model);
    char buf[128];
    std::snprintf(buf, sizeof buf, "epoch=%zu valid_ppl=%.9g\n", state.epoch, ppl);
    log << buf;
    if (ppl < state.best_valid_ppl) {
      state.best_valid_ppl = ppl;
      state.best_epoch = state.epoch;
      Checkpoint ck = state.model.to_checkpoint();
      ck.meta["epoch"] = std::to_string(state.epoch);
      ck.meta["step"] = std::to_string(state.step);
      ck.meta["valid_ppl"] = format_double(ppl);
      ck.save(result.best_checkpoint);
    }
    if (!epoch_done) break;
  }
  state.to_checkpoint().save(out_dir / "state.ckpt");
  result.best_valid_ppl = state.best_valid_ppl;
  result.best_epoch = state.best_epoch;
  result.steps = state.step;
  return result;
}

}  // namespace segcvae::training
