#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "segcvae/checkpoint.hpp"
#include "segcvae/corpus.hpp"
#include "segcvae/model.hpp"
#include "segcvae/rng.hpp"

namespace segcvae::training {

inline constexpr std::size_t kDefaultSnormStep = 20000;

struct TrainingConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  std::optional<std::size_t> snorm_step;  // kDefaultSnormStep when unset
  std::size_t kl_anneal_steps = 10000;
  std::uint64_t seed = 123456;
  std::optional<double> lambda_constant;
  double clip_norm = 5.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  /// Stop after this many optimizer steps even mid-epoch.
  std::optional<std::size_t> max_steps;

  std::size_t effective_snorm_step() const { return snorm_step.value_or(kDefaultSnormStep); }
  /// Throws ConfigError on non-positive values or when both snorm_step and
  /// lambda_constant are given.
  void validate() const;
};

double lambda_schedule(std::size_t step, const TrainingConfig& cfg);
double kl_anneal(std::size_t step, const TrainingConfig& cfg);

/// Everything needed to continue a run bit-for-bit.
struct TrainState {
  model::SegCvae model;
  std::vector<std::vector<double>> adam_m, adam_v;  // parallel to model.params()
  std::size_t step = 0;
  std::size_t epoch = 0;       // epochs fully completed
  std::size_t next_batch = 0;  // position inside the current epoch
  double best_valid_ppl = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  Rng rng;

  TrainState(model::SegCvae m, std::uint64_t seed);

  Checkpoint to_checkpoint() const;
  static TrainState from_checkpoint(const Checkpoint& ck);
};

/// Adam step over every parameter that holds a gradient, after clipping the
/// global gradient norm to cfg.clip_norm. Returns the pre-clip norm.
double apply_adam(TrainState& state, const TrainingConfig& cfg);

/// One optimizer step on a batch. The schedules are read at the current step,
/// which is then incremented. Throws NonFiniteLoss carrying batch_id.
model::ForwardStats train_step(const model::Batch& batch, TrainState& state, const TrainingConfig& cfg,
                               long batch_id = 0);

/// "step=<k> elbo=<v> recon=<v> kl=<v> san=<v> scn=<v> sdn=<v> loss=<v>"
void write_log_line(std::ostream& out, std::size_t step, const model::ForwardStats& stats);

/// exp of the mean token NLL with z at the prior mean and the branch picked by
/// the largest prior-side bound. Batches are spread over SEGCVAE_THREADS
/// threads (default 1) and summed in batch order. Throws EmptyCorpus.
double perplexity(const model::SegCvae& model, std::span<const corpus::EncodedPair> data,
                  std::size_t batch_size = 64);

/// Epoch order: a permutation of [0, n) fixed by (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

struct FitResult {
  std::filesystem::path best_checkpoint;
  double best_valid_ppl = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
};

using Validator = std::function<double(const model::SegCvae&)>;

/// Trains from `state` until cfg.epochs (or cfg.max_steps). After each epoch
/// the validator (default: perplexity on `valid`) runs and the model is saved
/// to out_dir/best.ckpt on a new minimum. The resumable state is written to
/// out_dir/state.ckpt at the end. Throws EmptyCorpus on an empty split and
/// ConfigError when epochs is zero.
FitResult fit(TrainState& state, std::span<const corpus::EncodedPair> train,
              std::span<const corpus::EncodedPair> valid, const TrainingConfig& cfg,
              const std::filesystem::path& out_dir, std::ostream& log, Validator validator = {});

}  // namespace segcvae::training
