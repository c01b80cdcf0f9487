#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "segcvae/checkpoint.hpp"
#include "segcvae/corpus.hpp"
#include "segcvae/recurrent.hpp"
#include "segcvae/rng.hpp"
#include "segcvae/tensor.hpp"

namespace segcvae::model {

using ad::Tensor;
using corpus::Id;

/// Switches for the component ablations; all false is the full model.
struct Ablation {
  bool no_is = false;
  bool no_eg = false;
  bool no_san = false;
  bool no_scn = false;
  bool no_sdn = false;

  bool operator==(const Ablation&) const = default;
};

struct ModelConfig {
  std::size_t max_clen = 25;
  std::size_t n_emb = 300;
  std::size_t n_hid = 300;
  std::size_t d_z = 300;
  std::size_t kernel_m = 3;
  std::size_t chan = 3;
  std::size_t num_triggers = 8;  // M
  double tau = 0.1;
  std::size_t vocab_size = 0;
  Ablation ablation;

  /// Throws DomainError on inconsistent values.
  void validate() const;
};

enum class TriggerMode { InternalSeparation, ExternalGuidance };

/// Convolution over the context followed by a dense projection and a
/// Gumbel-Softmax head. IS triggers project to context positions (width
/// max_clen), EG triggers to the vocabulary (width vocab_size).
struct TriggerNetwork {
  Tensor kernel;  // (m, N_emb, 1, chan), stride fixed at 1
  Tensor dense;   // (max_clen - m + 1, width)
  TriggerMode mode = TriggerMode::InternalSeparation;
  double tau = 0.1;

  std::size_t width() const { return dense.cols(); }
  /// (chan, width) selection distribution; disallowed columns get zero mass.
  Tensor select(const Tensor& context_emb, Rng& rng, bool noise, std::span<const char> allowed) const;
};

/// C_IS^i = GS(Conv(C) W_i) C for every trigger; PAD positions of the context
/// are masked out of the selection. Each output is (chan, N_emb).
std::vector<Tensor> internal_separation(const Tensor& context_emb, std::span<const Id> context_ids,
                                        std::span<const TriggerNetwork> triggers, Rng& rng, bool noise);

/// V_EG^i = GS(Conv(C) W'_i) W_emb for every trigger, with the special-token
/// columns masked. Each output is (chan, N_emb).
std::vector<Tensor> external_guidance(const Tensor& context_emb, std::span<const TriggerNetwork> triggers,
                                      const Tensor& embedding, Rng& rng, bool noise);

struct ProminentSemantics {
  std::vector<Tensor> x;  // M vectors of shape (1, N_hid)
  Tensor X;               // (M, N_hid), row i is x[i]
  std::size_t positive_index = 0;
};

/// Index of the largest ELBO; ties go to the lowest index. The choice is a
/// plain comparison, so no gradient flows through it.
std::size_t select_positive(std::span<const double> elbos);

/// Mean of |I - softmax_rows(X X^T)| over all M*M entries.
Tensor san(const Tensor& X);
/// 1 - cosine(enc_C, sum_i x_i). enc_C and each x_i share one shape.
Tensor scn(const Tensor& enc_context, std::span<const Tensor> x);
/// Row-averaged KL(softmax_rows(R_gt R_gt^T) || softmax_rows(R_gen R_gen^T)).
/// R_gt is a constant target. Throws DomainError when B < 2.
Tensor sdn(const Tensor& r_gt, const Tensor& r_gen_plus);
/// elbo_plus - lambda (san + scn + sdn), skipping the terms switched off in
/// the ablation. Undefined norm tensors count as zero.
Tensor total_loss(const Tensor& elbo_plus, const Tensor& san_v, const Tensor& scn_v, const Tensor& sdn_v,
                  double lambda, const Ablation& ablation = {});

/// Ordered, named trainable tensors.
class ParameterSet {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

/// Recognition, prior and decoder for one conditioning vector.
struct LatentHeads {
  Tensor recog_mu_w, recog_mu_b, recog_lv_w, recog_lv_b;  // (2H, d_z) / (1, d_z)
  Tensor prior_mu_w, prior_mu_b, prior_lv_w, prior_lv_b;  // (H, d_z) / (1, d_z)
  Tensor init_w, init_b;                                  // (d_z + H, H) / (1, H)
  ad::GruParams decoder;
  Tensor out_w, out_b;  // (H, V) / (1, V)
  Tensor embedding;     // (V, N_emb), decoder inputs

  static constexpr double kLogvarBound = 10.0;
  struct Gaussian {
    Tensor mu, logvar;
  };
  Gaussian recognition(const Tensor& r_e, const Tensor& x) const;
  Gaussian prior(const Tensor& x) const;
  Tensor initial_state(const Tensor& z, const Tensor& x) const;
};

/// A batch of encoded pairs, each id row max_clen long.
struct Batch {
  std::vector<std::vector<Id>> context;
  std::vector<std::vector<Id>> response;

  std::size_t size() const { return context.size(); }
  static Batch from(std::span<const corpus::EncodedPair> pairs);
};

struct ElboOptions {
  double kl_weight = 1.0;
  /// Latent sample source. Null means z is the recognition mean.
  Rng* rng = nullptr;
  /// Use the prior instead of the recognition network (KL is then zero).
  bool prior_only = false;
  /// Also return the probability-weighted embedding at every decoder step.
  bool expected_embeddings = false;
};

struct ElboTerms {
  Tensor value;  // (B, 1): recon - kl_weight * kl
  Tensor recon;  // (B, 1): summed log-likelihood over scored positions
  Tensor kl;     // (B, 1)
  std::vector<double> scored_tokens;  // per row
  std::vector<Tensor> expected_emb;   // per decoder step, (B, N_emb)
};

/// Teacher-forced ELBO of the responses under conditioning x (B, H).
/// Scored positions are the non-PAD targets after BOS (the tokens and EOS).
ElboTerms elbo(const Batch& batch, const Tensor& r_e, const Tensor& x, const LatentHeads& heads,
               const ElboOptions& options);

struct ForwardOptions {
  double kl_weight = 1.0;
  double lambda = 0.0;
  bool noise = true;  // Gumbel noise in the triggers and sampled z
  Rng* rng = nullptr;
  /// Fixed R_gt for the SDN term instead of the detached response encoding.
  /// Finite-difference checks use it, since the stop-gradient is otherwise
  /// invisible to them.
  Tensor sdn_target;
};

struct ForwardStats {
  double elbo = 0, recon = 0, kl = 0, san = 0, scn = 0, sdn = 0, loss = 0;
};

struct ForwardResult {
  Tensor objective;  // L_all averaged over the batch (to be maximized)
  ForwardStats stats;
  std::vector<std::size_t> positive;  // selected branch per row
  std::vector<std::vector<double>> branch_elbos;  // [branch][row]
};

class SegCvae {
 public:
  /// Fresh parameters; the embedding starts from the vocabulary's table.
  SegCvae(const ModelConfig& config, const corpus::Vocabulary& vocab, std::uint64_t seed);
  /// Restores configuration and parameters written by to_checkpoint.
  static SegCvae from_checkpoint(const Checkpoint& ck);

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  const std::vector<TriggerNetwork>& is_triggers() const { return is_triggers_; }
  const std::vector<TriggerNetwork>& eg_triggers() const { return eg_triggers_; }
  const LatentHeads& heads() const { return heads_; }
  const ad::GruParams& encoder() const { return encoder_; }
  const Tensor& embedding() const { return params_.get("embedding"); }

  /// Embedded context (max_clen, N_emb).
  Tensor embed(std::span<const Id> ids) const;
  /// Final encoder state of a batch of id rows, skipping PAD; (B, H).
  Tensor encode_ids(const std::vector<std::vector<Id>>& rows) const;

  /// x_i for every row of the batch: M tensors of shape (B, H).
  std::vector<Tensor> prominent_batch(const std::vector<std::vector<Id>>& contexts, Rng& rng, bool noise) const;
  /// Prominent semantics of a single context. positive_index is left at 0.
  ProminentSemantics prominent_semantics(std::span<const Id> context, Rng& rng, bool noise) const;

  /// Full objective of one batch with gradient blocking across branches.
  ForwardResult forward(const Batch& batch, const ForwardOptions& options) const;

  /// Per-row log-likelihood and scored-token count with z at the prior mean
  /// and the branch with the largest prior-side bound. Token log-probabilities
  /// are taken from the logits in extended precision.
  struct Likelihood {
    std::vector<long double> log_likelihood;
    std::vector<double> tokens;
    std::vector<std::size_t> branch;
  };
  Likelihood prior_likelihood(const Batch& batch) const;

  Checkpoint to_checkpoint() const;
  void load_parameters(const Checkpoint& ck);

  /// Names of the parameters that belong to branch i alone.
  std::vector<std::string> branch_parameters(std::size_t branch) const;

 private:
  SegCvae() = default;
  void wire();

  ModelConfig config_;
  ParameterSet params_;
  std::vector<TriggerNetwork> is_triggers_;
  std::vector<TriggerNetwork> eg_triggers_;
  ad::GruParams encoder_;
  LatentHeads heads_;
};

/// Checkpoint meta keys for the model hyperparameters.
void write_config_meta(const ModelConfig& config, std::map<std::string, std::string>& meta);
ModelConfig read_config_meta(const std::map<std::string, std::string>& meta);

}  // namespace segcvae::model
