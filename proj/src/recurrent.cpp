#include "segcvae/recurrent.hpp"

#include "segcvae/errors.hpp"
#include "segcvae/ops.hpp"

namespace segcvae::ad {

Tensor gru_encode(std::span<const Tensor> steps, const GruParams& params,
                  std::span<const std::vector<double>> masks, const Tensor& h0) {
  if (steps.empty()) throw DomainError("gru_encode: empty sequence");
  if (!masks.empty() && masks.size() != steps.size()) throw ShapeError("gru_encode: one mask per step");
  const std::size_t B = steps.front().rows();
  Tensor h = h0.defined() ? h0 : Tensor::zeros({B, params.hidden_size()});
  for (std::size_t t = 0; t < steps.size(); ++t) {
    std::span<const double> m;
    if (!masks.empty()) m = masks[t];
    h = gru_cell(steps[t], h, params.wx, params.wh, params.bias, m);
  }
  return h;
}

Tensor gru_encode(const Tensor& seq, const GruParams& params, std::span<const char> keep) {
  const std::size_t L = seq.rows();
  if (L == 0) throw DomainError("gru_encode: empty sequence");
  if (!keep.empty() && keep.size() != L) throw ShapeError("gru_encode: mask length");
  Tensor h = Tensor::zeros({1, params.hidden_size()});
  for (std::size_t t = 0; t < L; ++t) {
    if (!keep.empty() && !keep[t]) continue;
    h = gru_cell(slice_rows(seq, t, 1), h, params.wx, params.wh, params.bias);
  }
  return reshape(h, {params.hidden_size()});
}

DecodeStep gru_decode_step(const Tensor& state, const Tensor& input, const GruParams& params,
                           const Tensor& out_w, const Tensor& out_b) {
  if (state.cols() != params.hidden_size()) throw ShapeError("gru_decode_step: state width");
  Tensor next = gru_cell(input, state, params.wx, params.wh, params.bias);
  return {affine(next, out_w, out_b), next};
}

}  // namespace segcvae::ad
