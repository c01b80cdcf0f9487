#pragma once

#include <span>
#include <vector>

#include "segcvae/tensor.hpp"

namespace segcvae::ad {

/// Weights of one gated recurrent cell (see gru_cell for the layout).
struct GruParams {
  Tensor wx;    // (N, 3H)
  Tensor wh;    // (H, 3H)
  Tensor bias;  // (1, 3H)

  std::size_t input_size() const { return wx.rows(); }
  std::size_t hidden_size() const { return wh.rows(); }
};

/// Batched scan. steps[t] is (B, N); masks, when given, hold one 0/1 entry
/// per row and step, and a 0 leaves that row's state untouched. Starts from a
/// zero state unless h0 is defined. Returns the final (B, H) state.
Tensor gru_encode(std::span<const Tensor> steps, const GruParams& params,
                  std::span<const std::vector<double>> masks = {}, const Tensor& h0 = {});

/// Single sequence (L, N) -> (H). keep[t] == 0 marks a PAD position that is
/// skipped. Throws DomainError on an empty sequence.
Tensor gru_encode(const Tensor& seq, const GruParams& params, std::span<const char> keep = {});

struct DecodeStep {
  Tensor logits;  // (B, vocab)
  Tensor state;   // (B, H)
};

/// One decoder step: recurrent update from the input embedding, then the
/// output projection to vocabulary logits.
DecodeStep gru_decode_step(const Tensor& state, const Tensor& input, const GruParams& params,
                           const Tensor& out_w, const Tensor& out_b);

}  // namespace segcvae::ad
