#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "segcvae/rng.hpp"
#include "segcvae/tensor.hpp"

// Differentiable primitives. Every function builds a new node; inputs are
// never modified. Matrix-style operations view rank-1 tensors as one row.
namespace segcvae::ad {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
/// Natural log; inputs must be positive.
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
/// Values outside [lo, hi] are clipped and pass no gradient.
Tensor clamp(const Tensor& a, double lo, double hi);

// Broadcasting.
/// a (R, C) + bias (1, C) or (C).
Tensor add_row(const Tensor& a, const Tensor& bias);
/// a (R, C) scaled per row by s (R, 1).
Tensor mul_col(const Tensor& a, const Tensor& s);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// x · w + bias.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& bias);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Row sums: (R, C) -> (R, 1).
Tensor sum_cols(const Tensor& a);

// Structure.
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);
/// Rows of a at the given indices, in order; repeated indices are allowed.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
/// out[r] = a[r, cols[r]], shape (R, 1).
Tensor pick_cols(const Tensor& a, std::span<const std::size_t> cols);

// Normalizers.
/// Softmax over the last axis with max subtraction.
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
/// softmax((logits + g) / tau) over the last axis, g ~ Gumbel(0,1) i.i.d. when
/// noise is set. Columns whose allowed flag is 0 get exactly zero mass. The
/// relaxation is soft only; there is no straight-through hard pass.
Tensor gumbel_softmax(const Tensor& logits, double tau, Rng& rng, bool noise,
                      std::span<const char> allowed = {});

// Sequence primitives.
/// Valid stride-1 convolution of a sequence C (L, N) with a kernel
/// (m, N, 1, chan) spanning the full embedding width. Returns the feature map
/// squeezed and transposed to (chan, L - m + 1).
Tensor conv_seq(const Tensor& seq, const Tensor& kernel);

/// One gated recurrent step on a batch. x (B, N), h (B, H), wx (N, 3H),
/// wh (H, 3H), bias (1, 3H); gate blocks are ordered reset, update, candidate.
/// Rows whose mask entry is 0 carry h through unchanged. An empty mask means
/// every row updates.
Tensor gru_cell(const Tensor& x, const Tensor& h, const Tensor& wx, const Tensor& wh,
                const Tensor& bias, std::span<const double> mask = {});

// Distributions and similarities.
/// KL(N(mu_q, exp lv_q) || N(mu_p, exp lv_p)) for diagonal Gaussians, summed
/// over the last axis. Rank-1 inputs give shape (1); matrices give (R, 1).
Tensor gaussian_kl(const Tensor& mu_q, const Tensor& logvar_q, const Tensor& mu_p,
                   const Tensor& logvar_p);
/// mu + exp(logvar / 2) * eps, with eps treated as a constant.
Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& eps);
Tensor reparameterize(const Tensor& mu, const Tensor& logvar, Rng& rng);

inline constexpr double kNormEpsilon = 1e-8;
/// Row-wise cosine similarity, shape (R, 1). Throws DegenerateVector when a
/// row norm is at or below kNormEpsilon.
Tensor cosine_rows(const Tensor& u, const Tensor& v);
/// Cosine of two vectors as a one-element tensor.
Tensor cosine(const Tensor& u, const Tensor& v);

}  // namespace segcvae::ad
