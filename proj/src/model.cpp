#include "segcvae/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "segcvae/errors.hpp"
#include "segcvae/ops.hpp"

namespace segcvae::model {

using corpus::Vocabulary;

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw DomainError(std::string(name) + " must be positive");
  };
  positive(max_clen, "max_clen");
  positive(n_emb, "n_emb");
  positive(n_hid, "n_hid");
  positive(d_z, "d_z");
  positive(kernel_m, "m");
  positive(chan, "chan");
  positive(num_triggers, "M");
  if (max_clen < 3) throw DomainError("max_clen must be at least 3");
  if (kernel_m > max_clen) throw DomainError("kernel length m exceeds max_clen");
  if (!(tau > 0.0)) throw DomainError("tau must be positive");
  if (vocab_size <= Vocabulary::kSpecials) throw DomainError("vocabulary has no ordinary tokens");
}

Tensor TriggerNetwork::select(const Tensor& context_emb, Rng& rng, bool noise,
                              std::span<const char> allowed) const {
  Tensor features = ad::conv_seq(context_emb, kernel);  // (chan, max_clen - m + 1)
  return ad::gumbel_softmax(ad::matmul(features, dense), tau, rng, noise, allowed);
}

std::vector<Tensor> internal_separation(const Tensor& context_emb, std::span<const Id> context_ids,
                                        std::span<const TriggerNetwork> triggers, Rng& rng, bool noise) {
  std::vector<char> allowed(context_emb.rows(), 0);
  for (std::size_t j = 0; j < allowed.size() && j < context_ids.size(); ++j) {
    allowed[j] = context_ids[j] != Vocabulary::kPad;
  }
  std::vector<Tensor> out;
  out.reserve(triggers.size());
  for (const auto& t : triggers) {
    if (t.mode != TriggerMode::InternalSeparation || t.width() != context_emb.rows()) {
      throw ShapeError("internal_separation needs IS triggers of width max_clen");
    }
    out.push_back(ad::matmul(t.select(context_emb, rng, noise, allowed), context_emb));
  }
  return out;
}

std::vector<Tensor> external_guidance(const Tensor& context_emb, std::span<const TriggerNetwork> triggers,
                                      const Tensor& embedding, Rng& rng, bool noise) {
  std::vector<char> allowed(embedding.rows(), 1);
  for (Id s = 0; s < Vocabulary::kSpecials && s < allowed.size(); ++s) allowed[s] = 0;
  std::vector<Tensor> out;
  out.reserve(triggers.size());
  for (const auto& t : triggers) {
    if (t.mode != TriggerMode::ExternalGuidance || t.width() != embedding.rows()) {
      throw ShapeError("external_guidance needs EG triggers of width vocab_size");
    }
    out.push_back(ad::matmul(t.select(context_emb, rng, noise, allowed), embedding));
  }
  return out;
}

std::size_t select_positive(std::span<const double> elbos) {
  if (elbos.empty()) throw DomainError("select_positive over no branches");
  std::size_t best = 0;
  for (std::size_t i = 1; i < elbos.size(); ++i)
    if (elbos[i] > elbos[best]) best = i;
  return best;
}

Tensor san(const Tensor& X) {
  const std::size_t M = X.rows();
  std::vector<double> eye(M * M, 0.0);
  for (std::size_t i = 0; i < M; ++i) eye[i * M + i] = 1.0;
  Tensor gram = ad::matmul(X, ad::transpose(X));
  return ad::mean(ad::abs(ad::sub(Tensor::from({M, M}, std::move(eye)), ad::softmax_rows(gram))));
}

Tensor scn(const Tensor& enc_context, std::span<const Tensor> x) {
  if (x.empty()) throw DomainError("scn needs at least one prominent semantic");
  Tensor total = x.front();
  for (std::size_t i = 1; i < x.size(); ++i) total = ad::add(total, x[i]);
  return ad::mean(ad::scale(ad::add_scalar(ad::cosine_rows(enc_context, total), -1.0), -1.0));
}

Tensor sdn(const Tensor& r_gt, const Tensor& r_gen_plus) {
  if (r_gt.rows() < 2) throw DomainError("sdn needs a batch of at least two responses");
  if (r_gt.shape() != r_gen_plus.shape()) throw ShapeError("sdn: R_gt and R_gen_plus differ in shape");
  Tensor target = r_gt.detach();
  Tensor log_p = ad::log_softmax_rows(ad::matmul(target, ad::transpose(target)));
  Tensor p = ad::exp(log_p);
  Tensor log_q = ad::log_softmax_rows(ad::matmul(r_gen_plus, ad::transpose(r_gen_plus)));
  return ad::mean(ad::sum_cols(ad::mul(p, ad::sub(log_p, log_q))));
}

Tensor total_loss(const Tensor& elbo_plus, const Tensor& san_v, const Tensor& scn_v, const Tensor& sdn_v,
                  double lambda, const Ablation& ablation) {
  Tensor norms;
  auto include = [&](const Tensor& t, bool dropped) {
    if (dropped || !t.defined()) return;
    norms = norms.defined() ? ad::add(norms, t) : t;
  };
  include(san_v, ablation.no_san);
  include(scn_v, ablation.no_scn);
  include(sdn_v, ablation.no_sdn);
  if (!norms.defined()) return elbo_plus;
  return ad::sub(elbo_plus, ad::scale(norms, lambda));
}

Tensor& ParameterSet::add(const std::string& name, Tensor t) {
  if (index_.contains(name)) throw DomainError("duplicate parameter " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParameterSet::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw DomainError("unknown parameter " + name);
  return items_[it->second].second;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw DomainError("unknown parameter " + name);
  return items_[it->second].second;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

LatentHeads::Gaussian LatentHeads::recognition(const Tensor& r_e, const Tensor& x) const {
  Tensor in = ad::concat_cols(r_e, x);
  return {ad::affine(in, recog_mu_w, recog_mu_b),
          ad::clamp(ad::affine(in, recog_lv_w, recog_lv_b), -kLogvarBound, kLogvarBound)};
}

LatentHeads::Gaussian LatentHeads::prior(const Tensor& x) const {
  return {ad::affine(x, prior_mu_w, prior_mu_b),
          ad::clamp(ad::affine(x, prior_lv_w, prior_lv_b), -kLogvarBound, kLogvarBound)};
}

Tensor LatentHeads::initial_state(const Tensor& z, const Tensor& x) const {
  return ad::affine(ad::concat_cols(z, x), init_w, init_b);
}

Batch Batch::from(std::span<const corpus::EncodedPair> pairs) {
  Batch b;
  for (const auto& p : pairs) {
    b.context.push_back(p.context);
    b.response.push_back(p.response);
  }
  return b;
}

namespace {

// Last non-PAD position over all rows, plus one.
std::size_t used_length(const std::vector<std::vector<Id>>& rows) {
  std::size_t n = 0;
  for (const auto& r : rows)
    for (std::size_t t = r.size(); t > n; --t)
      if (r[t - 1] != Vocabulary::kPad) {
        n = t;
        break;
      }
  return n;
}

Tensor column(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::from({n, 1}, std::move(v));
}

}  // namespace

ElboTerms elbo(const Batch& batch, const Tensor& r_e, const Tensor& x, const LatentHeads& heads,
               const ElboOptions& options) {
  const std::size_t B = batch.size();
  if (B == 0) throw DomainError("elbo of an empty batch");
  if (options.kl_weight < 0.0 || options.kl_weight > 1.0) throw DomainError("kl_weight outside [0, 1]");
  auto prior = heads.prior(x);
  ElboTerms out;
  LatentHeads::Gaussian source = prior;
  if (options.prior_only) {
    out.kl = Tensor::zeros({B, 1});
  } else {
    source = heads.recognition(r_e, x);
    out.kl = ad::gaussian_kl(source.mu, source.logvar, prior.mu, prior.logvar);
  }
  Tensor z = options.rng ? ad::reparameterize(source.mu, source.logvar, *options.rng) : source.mu;
  Tensor h = heads.initial_state(z, x);

  const std::size_t steps = used_length(batch.response);
  out.scored_tokens.assign(B, 0.0);
  Tensor recon = Tensor::zeros({B, 1});
  std::vector<std::size_t> inputs(B), targets(B);
  for (std::size_t t = 0; t + 1 < steps; ++t) {
    std::vector<double> mask(B);
    for (std::size_t b = 0; b < B; ++b) {
      inputs[b] = batch.response[b][t];
      targets[b] = batch.response[b][t + 1];
      mask[b] = targets[b] != Vocabulary::kPad ? 1.0 : 0.0;
      out.scored_tokens[b] += mask[b];
    }
    auto step = ad::gru_decode_step(h, ad::gather_rows(heads.embedding, inputs), heads.decoder, heads.out_w,
                                    heads.out_b);
    h = step.state;
    Tensor log_p = ad::log_softmax_rows(step.logits);
    recon = ad::add(recon, ad::mul(ad::pick_cols(log_p, targets), column(std::move(mask))));
    if (options.expected_embeddings) out.expected_emb.push_back(ad::matmul(ad::exp(log_p), heads.embedding));
  }
  out.recon = recon;
  out.value = ad::sub(recon, ad::scale(out.kl, options.kl_weight));
  return out;
}

SegCvae::SegCvae(const ModelConfig& config, const Vocabulary& vocab, std::uint64_t seed) : config_(config) {
  config_.vocab_size = vocab.size();
  if (vocab.embedding_dim() != config_.n_emb) throw ShapeError("vocabulary embedding width differs from n_emb");
  config_.validate();
  Rng rng = Rng(seed).fork(0x5e6c);
  auto uniform = [&](ad::Shape shape, double bound) {
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from(std::move(shape), std::move(v), true);
  };
  auto zeros = [](ad::Shape shape) { return Tensor::zeros(std::move(shape), true); };
  auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
  const std::size_t N = config_.n_emb, H = config_.n_hid, Z = config_.d_z, V = config_.vocab_size;
  const std::size_t T = config_.max_clen - config_.kernel_m + 1;

  params_.add("embedding", Tensor::from({V, N}, vocab.embedding(), true));
  params_.add("encoder.wx", uniform({N, 3 * H}, fan(N)));
  params_.add("encoder.wh", uniform({H, 3 * H}, fan(H)));
  params_.add("encoder.bias", zeros({1, 3 * H}));
  params_.add("recog.mu_w", uniform({2 * H, Z}, fan(2 * H)));
  params_.add("recog.mu_b", zeros({1, Z}));
  params_.add("recog.lv_w", uniform({2 * H, Z}, fan(2 * H)));
  params_.add("recog.lv_b", zeros({1, Z}));
  params_.add("prior.mu_w", uniform({H, Z}, fan(H)));
  params_.add("prior.mu_b", zeros({1, Z}));
  params_.add("prior.lv_w", uniform({H, Z}, fan(H)));
  params_.add("prior.lv_b", zeros({1, Z}));
  params_.add("decoder.init_w", uniform({Z + H, H}, fan(Z + H)));
  params_.add("decoder.init_b", zeros({1, H}));
  params_.add("decoder.wx", uniform({N, 3 * H}, fan(N)));
  params_.add("decoder.wh", uniform({H, 3 * H}, fan(H)));
  params_.add("decoder.bias", zeros({1, 3 * H}));
  params_.add("decoder.out_w", uniform({H, V}, fan(H)));
  params_.add("decoder.out_b", zeros({1, V}));
  for (std::size_t i = 0; i < config_.num_triggers; ++i) {
    const auto tag = std::to_string(i);
    params_.add("is." + tag + ".kernel", uniform({config_.kernel_m, N, 1, config_.chan}, fan(config_.kernel_m * N)));
    params_.add("is." + tag + ".dense", uniform({T, config_.max_clen}, fan(T)));
    params_.add("eg." + tag + ".kernel", uniform({config_.kernel_m, N, 1, config_.chan}, fan(config_.kernel_m * N)));
    params_.add("eg." + tag + ".dense", uniform({T, V}, fan(T)));
  }
  wire();
}

void SegCvae::wire() {
  auto& p = params_;
  encoder_ = {p.get("encoder.wx"), p.get("encoder.wh"), p.get("encoder.bias")};
  heads_.recog_mu_w = p.get("recog.mu_w");
  heads_.recog_mu_b = p.get("recog.mu_b");
  heads_.recog_lv_w = p.get("recog.lv_w");
  heads_.recog_lv_b = p.get("recog.lv_b");
  heads_.prior_mu_w = p.get("prior.mu_w");
  heads_.prior_mu_b = p.get("prior.mu_b");
  heads_.prior_lv_w = p.get("prior.lv_w");
  heads_.prior_lv_b = p.get("prior.lv_b");
  heads_.init_w = p.get("decoder.init_w");
  heads_.init_b = p.get("decoder.init_b");
  heads_.decoder = {p.get("decoder.wx"), p.get("decoder.wh"), p.get("decoder.bias")};
  heads_.out_w = p.get("decoder.out_w");
  heads_.out_b = p.get("decoder.out_b");
  heads_.embedding = p.get("embedding");
  is_triggers_.clear();
  eg_triggers_.clear();
  for (std::size_t i = 0; i < config_.num_triggers; ++i) {
    const auto tag = std::to_string(i);
    is_triggers_.push_back({p.get("is." + tag + ".kernel"), p.get("is." + tag + ".dense"),
                            TriggerMode::InternalSeparation, config_.tau});
    eg_triggers_.push_back({p.get("eg." + tag + ".kernel"), p.get("eg." + tag + ".dense"),
                            TriggerMode::ExternalGuidance, config_.tau});
  }
}

Tensor SegCvae::embed(std::span<const Id> ids) const {
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return ad::gather_rows(embedding(), idx);
}

Tensor SegCvae::encode_ids(const std::vector<std::vector<Id>>& rows) const {
  const std::size_t B = rows.size();
  const std::size_t L = used_length(rows);
  if (B == 0 || L == 0) throw DomainError("encode of empty sequences");
  std::vector<Tensor> steps;
  std::vector<std::vector<double>> masks;
  std::vector<std::size_t> idx(B);
  for (std::size_t t = 0; t < L; ++t) {
    std::vector<double> m(B);
    for (std::size_t b = 0; b < B; ++b) {
      idx[b] = t < rows[b].size() ? rows[b][t] : Vocabulary::kPad;
      m[b] = idx[b] != Vocabulary::kPad ? 1.0 : 0.0;
    }
    steps.push_back(ad::gather_rows(embedding(), idx));
    masks.push_back(std::move(m));
  }
  return ad::gru_encode(steps, encoder_, masks);
}

std::vector<Tensor> SegCvae::prominent_batch(const std::vector<std::vector<Id>>& contexts, Rng& rng,
                                             bool noise) const {
  const std::size_t B = contexts.size();
  const std::size_t M = config_.num_triggers;
  const auto& ab = config_.ablation;
  if (ab.no_is && ab.no_eg) {
    // Neither selector: every branch conditions on the whole context.
    Tensor enc = encode_ids(contexts);
    return std::vector<Tensor>(M, enc);
  }
  std::vector<Tensor> context_emb;
  context_emb.reserve(B);
  for (const auto& ids : contexts) {
    if (ids.size() != config_.max_clen) throw ShapeError("context must be encoded to max_clen ids");
    context_emb.push_back(embed(ids));
  }
  const std::size_t S = (ab.no_is ? 0 : config_.chan) + (ab.no_eg ? 0 : config_.chan);
  std::vector<Tensor> xs;
  xs.reserve(M);
  for (std::size_t i = 0; i < M; ++i) {
    std::vector<Tensor> pseudo;
    pseudo.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<Tensor> parts;
      if (!ab.no_is) {
        parts.push_back(internal_separation(context_emb[b], contexts[b], std::span(&is_triggers_[i], 1), rng, noise)[0]);
      }
      if (!ab.no_eg) {
        parts.push_back(external_guidance(context_emb[b], std::span(&eg_triggers_[i], 1), embedding(), rng, noise)[0]);
      }
      pseudo.push_back(parts.size() == 1 ? parts[0] : ad::concat_rows(parts));
    }
    Tensor stacked = ad::concat_rows(pseudo);  // (B * S, N)
    std::vector<Tensor> steps;
    std::vector<std::size_t> idx(B);
    for (std::size_t t = 0; t < S; ++t) {
      for (std::size_t b = 0; b < B; ++b) idx[b] = b * S + t;
      steps.push_back(ad::gather_rows(stacked, idx));
    }
    xs.push_back(ad::gru_encode(steps, encoder_));
  }
  return xs;
}

ProminentSemantics SegCvae::prominent_semantics(std::span<const Id> context, Rng& rng, bool noise) const {
  ProminentSemantics ps;
  ps.x = prominent_batch({std::vector<Id>(context.begin(), context.end())}, rng, noise);
  ps.X = ad::concat_rows(ps.x);
  return ps;
}

ForwardResult SegCvae::forward(const Batch& batch, const ForwardOptions& options) const {
  const std::size_t B = batch.size();
  const std::size_t M = config_.num_triggers;
  if (B == 0) throw DomainError("forward on an empty batch");
  if (options.noise && !options.rng) throw DomainError("forward with noise needs an rng");
  Rng quiet(0);
  Rng& rng = options.rng ? *options.rng : quiet;
  const auto& ab = config_.ablation;
  const bool want_sdn = !ab.no_sdn && B >= 2;

  auto xs = prominent_batch(batch.context, rng, options.noise);
  Tensor r_e = encode_ids(batch.response);

  std::vector<ElboTerms> branches;
  branches.reserve(M);
  ForwardResult result;
  for (std::size_t i = 0; i < M; ++i) {
    ElboOptions eo;
    eo.kl_weight = options.kl_weight;
    eo.rng = options.noise ? &rng : nullptr;
    eo.expected_embeddings = want_sdn;
    branches.push_back(elbo(batch, r_e, xs[i], heads_, eo));
    result.branch_elbos.emplace_back(branches.back().value.values().begin(), branches.back().value.values().end());
  }

  // Gradient blocking: each row keeps only its best branch.
  result.positive.assign(B, 0);
  std::vector<double> row_elbos(M);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < M; ++i) row_elbos[i] = result.branch_elbos[i][b];
    result.positive[b] = select_positive(row_elbos);
  }
  std::vector<Tensor> onehot;
  for (std::size_t i = 0; i < M; ++i) {
    std::vector<double> v(B);
    for (std::size_t b = 0; b < B; ++b) v[b] = result.positive[b] == i ? 1.0 : 0.0;
    onehot.push_back(column(std::move(v)));
  }
  auto select = [&](auto member) {
    Tensor acc;
    for (std::size_t i = 0; i < M; ++i) {
      Tensor part = ad::mul(branches[i].*member, onehot[i]);
      acc = acc.defined() ? ad::add(acc, part) : part;
    }
    return acc;
  };
  Tensor elbo_plus = ad::mean(select(&ElboTerms::value));
  result.stats.elbo = elbo_plus.item();
  result.stats.recon = ad::mean(select(&ElboTerms::recon)).item();
  result.stats.kl = ad::mean(select(&ElboTerms::kl)).item();

  Tensor san_v, scn_v, sdn_v;
  if (!ab.no_san) {
    Tensor all = ad::concat_rows(xs);  // row i * B + b is x_i of row b
    Tensor total;
    std::vector<std::size_t> idx(M);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < M; ++i) idx[i] = i * B + b;
      Tensor v = san(ad::gather_rows(all, idx));
      total = total.defined() ? ad::add(total, v) : v;
    }
    san_v = ad::scale(total, 1.0 / static_cast<double>(B));
    result.stats.san = san_v.item();
  }
  if (!ab.no_scn) {
    scn_v = scn(encode_ids(batch.context), xs);
    result.stats.scn = scn_v.item();
  }
  if (want_sdn) {
    const std::size_t steps = used_length(batch.response);
    std::vector<Tensor> seq;
    std::vector<std::vector<double>> masks;
    std::vector<std::size_t> first(B, Vocabulary::kBos);
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<double> m(B);
      for (std::size_t b = 0; b < B; ++b) m[b] = batch.response[b][t] != Vocabulary::kPad ? 1.0 : 0.0;
      masks.push_back(std::move(m));
      if (t == 0) {
        seq.push_back(ad::gather_rows(embedding(), first));
        continue;
      }
      Tensor acc;
      for (std::size_t i = 0; i < M; ++i) {
        Tensor part = ad::mul_col(branches[i].expected_emb[t - 1], onehot[i]);
        acc = acc.defined() ? ad::add(acc, part) : part;
      }
      seq.push_back(acc);
    }
    Tensor r_gen = ad::gru_encode(seq, encoder_, masks);
    sdn_v = sdn(options.sdn_target.defined() ? options.sdn_target : r_e, r_gen);
    result.stats.sdn = sdn_v.item();
  }
  result.objective = total_loss(elbo_plus, san_v, scn_v, sdn_v, options.lambda, ab);
  result.stats.loss = -result.objective.item();
  return result;
}

SegCvae::Likelihood SegCvae::prior_likelihood(const Batch& batch) const {
  ad::NoGradGuard no_grad;
  const std::size_t B = batch.size();
  if (B == 0) throw DomainError("likelihood of an empty batch");
  Rng unused(0);
  auto xs = prominent_batch(batch.context, unused, false);
  Likelihood out;
  out.log_likelihood.assign(B, -std::numeric_limits<long double>::infinity());
  out.tokens.assign(B, 0.0);
  out.branch.assign(B, 0);
  const std::size_t steps = used_length(batch.response);
  std::vector<std::size_t> inputs(B);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Tensor h = heads_.initial_state(heads_.prior(xs[i]).mu, xs[i]);
    std::vector<long double> ll(B, 0.0L);
    std::vector<double> scored(B, 0.0);
    for (std::size_t t = 0; t + 1 < steps; ++t) {
      for (std::size_t b = 0; b < B; ++b) inputs[b] = batch.response[b][t];
      auto step = ad::gru_decode_step(h, ad::gather_rows(heads_.embedding, inputs), heads_.decoder, heads_.out_w,
                                      heads_.out_b);
      h = step.state;
      const std::size_t V = step.logits.cols();
      const auto logits = step.logits.values();
      for (std::size_t b = 0; b < B; ++b) {
        const Id target = batch.response[b][t + 1];
        if (target == Vocabulary::kPad) continue;
        const double* row = logits.data() + b * V;
        const long double top = *std::max_element(row, row + V);
        long double sum = 0.0L;
        for (std::size_t v = 0; v < V; ++v) sum += std::exp(static_cast<long double>(row[v]) - top);
        ll[b] += static_cast<long double>(row[target]) - top - std::log(sum);
        scored[b] += 1.0;
      }
    }
    for (std::size_t b = 0; b < B; ++b) {
      if (ll[b] > out.log_likelihood[b]) {
        out.log_likelihood[b] = ll[b];
        out.branch[b] = i;
      }
      out.tokens[b] = scored[b];
    }
  }
  return out;
}

void write_config_meta(const ModelConfig& c, std::map<std::string, std::string>& meta) {
  char tau[64];
  std::snprintf(tau, sizeof tau, "%.17g", c.tau);
  meta["max_clen"] = std::to_string(c.max_clen);
  meta["n_emb"] = std::to_string(c.n_emb);
  meta["n_hid"] = std::to_string(c.n_hid);
  meta["d_z"] = std::to_string(c.d_z);
  meta["m"] = std::to_string(c.kernel_m);
  meta["chan"] = std::to_string(c.chan);
  meta["M"] = std::to_string(c.num_triggers);
  meta["tau"] = tau;
  meta["vocab_size"] = std::to_string(c.vocab_size);
  meta["no_is"] = c.ablation.no_is ? "1" : "0";
  meta["no_eg"] = c.ablation.no_eg ? "1" : "0";
  meta["no_san"] = c.ablation.no_san ? "1" : "0";
  meta["no_scn"] = c.ablation.no_scn ? "1" : "0";
  meta["no_sdn"] = c.ablation.no_sdn ? "1" : "0";
}

ModelConfig read_config_meta(const std::map<std::string, std::string>& meta) {
  auto get = [&](const char* k) -> const std::string& {
    auto it = meta.find(k);
    if (it == meta.end()) throw FormatError(std::string("checkpoint is missing model key ") + k);
    return it->second;
  };
  auto num = [&](const char* k) { return static_cast<std::size_t>(std::stoull(get(k))); };
  ModelConfig c;
  c.max_clen = num("max_clen");
  c.n_emb = num("n_emb");
  c.n_hid = num("n_hid");
  c.d_z = num("d_z");
  c.kernel_m = num("m");
  c.chan = num("chan");
  c.num_triggers = num("M");
  c.tau = std::stod(get("tau"));
  c.vocab_size = num("vocab_size");
  c.ablation.no_is = get("no_is") == "1";
  c.ablation.no_eg = get("no_eg") == "1";
  c.ablation.no_san = get("no_san") == "1";
  c.ablation.no_scn = get("no_scn") == "1";
  c.ablation.no_sdn = get("no_sdn") == "1";
  return c;
}

Checkpoint SegCvae::to_checkpoint() const {
  Checkpoint ck;
  write_config_meta(config_, ck.meta);
  for (const auto& [name, t] : params_) {
    ck.arrays.push_back({"param/" + name, Dtype::F64, t.shape(), {t.values().begin(), t.values().end()}});
  }
  return ck;
}

void SegCvae::load_parameters(const Checkpoint& ck) {
  for (auto& [name, t] : params_) {
    const auto& a = ck.array("param/" + name);
    if (a.shape != t.shape()) throw ShapeError("checkpoint shape mismatch for " + name);
    std::copy(a.values.begin(), a.values.end(), t.mutable_values().begin());
  }
}

SegCvae SegCvae::from_checkpoint(const Checkpoint& ck) {
  SegCvae m;
  m.config_ = read_config_meta(ck.meta);
  m.config_.validate();
  const std::string prefix = "param/";
  for (const auto& a : ck.arrays) {
    if (a.name.rfind(prefix, 0) != 0) continue;
    m.params_.add(a.name.substr(prefix.size()), Tensor::from(a.shape, a.values, true));
  }
  m.wire();
  return m;
}

std::vector<std::string> SegCvae::branch_parameters(std::size_t branch) const {
  const auto tag = std::to_string(branch);
  return {"is." + tag + ".kernel", "is." + tag + ".dense", "eg." + tag + ".kernel", "eg." + tag + ".dense"};
}

}  // namespace segcvae::model
