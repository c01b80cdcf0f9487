#include <cmath>

#include "segcvae/gradient_suite.hpp"
#include "segcvae/ops.hpp"
#include "segcvae/recurrent.hpp"

namespace segcvae {

using ad::Tensor;

namespace {

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

Tensor random_tensor(Rng& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Values bounded away from zero, for kinks at the origin.
Tensor away_from_zero(Rng& rng, ad::Shape shape) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Scalar probe: <op output, random weights>, so every output entry matters.
Tensor probe(const Tensor& out, const Tensor& weights) { return ad::sum(ad::mul(out, weights)); }

ad::GradCheckResult check_op(Rng& rng, std::vector<Tensor> inputs,
                             const std::function<Tensor(const std::vector<Tensor>&)>& op) {
  Tensor first = op(inputs);
  Tensor weights = random_tensor(rng, first.shape(), -1.0, 1.0, false);
  return ad::grad_check([&] { return probe(op(inputs), weights); }, inputs);
}

using Check = std::function<ad::GradCheckResult(Rng&)>;

NamedGradCheck make(std::string name, Check c) {
  return {std::move(name), [c = std::move(c)](std::uint64_t seed) {
            Rng rng(seed * 7919 + 17);
            return c(rng);
          }};
}

}  // namespace

std::vector<NamedGradCheck> primitive_grad_checks() {
  std::vector<NamedGradCheck> checks;
  auto mat = [](Rng& r) { return ad::Shape{dim(r, 1, 4), dim(r, 1, 5)}; };

  checks.push_back(make("add", [mat](Rng& r) {
    auto s = mat(r);
    return check_op(r, {random_tensor(r, s), random_tensor(r, s)}, [](auto& in) { return ad::add(in[0], in[1]); });
  }));
  checks.push_back(make("sub", [mat](Rng& r) {
    auto s = mat(r);
    return check_op(r, {random_tensor(r, s), random_tensor(r, s)}, [](auto& in) { return ad::sub(in[0], in[1]); });
  }));
  checks.push_back(make("mul", [mat](Rng& r) {
    auto s = mat(r);
    return check_op(r, {random_tensor(r, s), random_tensor(r, s)}, [](auto& in) { return ad::mul(in[0], in[1]); });
  }));
  checks.push_back(make("scale", [mat](Rng& r) {
    double c = r.uniform(-2, 2);
    return check_op(r, {random_tensor(r, mat(r))}, [c](auto& in) { return ad::scale(in[0], c); });
  }));
  checks.push_back(make("add_scalar", [mat](Rng& r) {
    double c = r.uniform(-2, 2);
    return check_op(r, {random_tensor(r, mat(r))}, [c](auto& in) { return ad::add_scalar(in[0], c); });
  }));
  checks.push_back(make("sigmoid", [mat](Rng& r) {
    return check_op(r, {random_tensor(r, mat(r), -3, 3)}, [](auto& in) { return ad::sigmoid(in[0]); });
  }));
  checks.push_back(make("tanh", [mat](Rng& r) {
    return check_op(r, {random_tensor(r, mat(r), -2, 2)}, [](auto& in) { return ad::tanh(in[0]); });
  }));
  checks.push_back(make("exp", [mat](Rng& r) {
    return check_op(r, {random_tensor(r, mat(r), -2, 2)}, [](auto& in) { return ad::exp(in[0]); });
  }));
  checks.push_back(make("log", [mat](Rng& r) {
    return check_op(r, {random_tensor(r, mat(r), 0.2, 3)}, [](auto& in) { return ad::log(in[0]); });
  }));
  checks.push_back(make("abs", [mat](Rng& r) {
    return check_op(r, {away_from_zero(r, mat(r))}, [](auto& in) { return ad::abs(in[0]); });
  }));
  checks.push_back(make("clamp", [mat](Rng& r) {
    // Keep entries away from the clip points.
    Tensor x = away_from_zero(r, mat(r));
    return check_op(r, {x}, [](auto& in) { return ad::clamp(in[0], -0.5, 0.5); });
  }));
  checks.push_back(make("add_row", [mat](Rng& r) {
    auto s = mat(r);
    return check_op(r, {random_tensor(r, s), random_tensor(r, {1, s[1]})},
                    [](auto& in) { return ad::add_row(in[0], in[1]); });
  }));
  checks.push_back(make("mul_col", [mat](Rng& r) {
    auto s = mat(r);
    return check_op(r, {random_tensor(r, s), random_tensor(r, {s[0], 1})},
                    [](auto& in) { return ad::mul_col(in[0], in[1]); });
  }));
  checks.push_back(make("matmul", [](Rng& r) {
    std::size_t p = dim(r, 1, 4), q = dim(r, 1, 4), s = dim(r, 1, 4);
    return check_op(r, {random_tensor(r, {p, q}), random_tensor(r, {q, s})},
                    [](auto& in) { return ad::matmul(in[0], in[1]); });
  }));
  checks.push_back(make("transpose", [mat](Rng& r) {
    return check_op(r, {random_tensor(r, mat(r))}, [](auto& in) { return ad::transpose(in[0]); });
  }));
  checks.push_back(make("sum", [mat](Rng& r) {
    return check_op(r, {random_tensor(r, mat(r))}, [](auto& in) { return ad::sum(in[0]); });
  }));
  checks.push_back(make("mean", [mat](Rng& r) {
    return check_op(r, {random_tensor(r, mat(r))}, [](auto& in) { return ad::mean(in[0]); });
  }));
  checks.push_back(make("sum_cols", [mat](Rng& r) {
    return check_op(r, {random_tensor(r, mat(r))}, [](auto& in) { return ad::sum_cols(in[0]); });
  }));
  checks.push_back(make("reshape", [](Rng& r) {
    std::size_t a = dim(r, 1, 3), b = dim(r, 1, 3);
    return check_op(r, {random_tensor(r, {a, b})}, [a, b](auto& in) { return ad::reshape(in[0], {b, a}); });
  }));
  checks.push_back(make("concat_rows", [](Rng& r) {
    std::size_t c = dim(r, 1, 4);
    return check_op(r, {random_tensor(r, {dim(r, 1, 3), c}), random_tensor(r, {dim(r, 1, 3), c})},
                    [](auto& in) { return ad::concat_rows(in); });
  }));
  checks.push_back(make("concat_cols", [](Rng& r) {
    std::size_t rows = dim(r, 1, 4);
    return check_op(r, {random_tensor(r, {rows, dim(r, 1, 3)}), random_tensor(r, {rows, dim(r, 1, 3)})},
                    [](auto& in) { return ad::concat_cols(in[0], in[1]); });
  }));
  checks.push_back(make("gather_rows", [](Rng& r) {
    std::size_t rows = dim(r, 1, 4), c = dim(r, 1, 4);
    std::vector<std::size_t> idx(dim(r, 1, 6));
    for (auto& i : idx) i = r.below(rows);
    return check_op(r, {random_tensor(r, {rows, c})}, [idx](auto& in) { return ad::gather_rows(in[0], idx); });
  }));
  checks.push_back(make("slice_rows", [](Rng& r) {
    std::size_t rows = dim(r, 2, 5), c = dim(r, 1, 4);
    std::size_t start = r.below(rows - 1), count = 1 + r.below(rows - start);
    return check_op(r, {random_tensor(r, {rows, c})},
                    [start, count](auto& in) { return ad::slice_rows(in[0], start, count); });
  }));
  checks.push_back(make("pick_cols", [](Rng& r) {
    std::size_t rows = dim(r, 1, 4), c = dim(r, 1, 5);
    std::vector<std::size_t> idx(rows);
    for (auto& i : idx) i = r.below(c);
    return check_op(r, {random_tensor(r, {rows, c})}, [idx](auto& in) { return ad::pick_cols(in[0], idx); });
  }));
  checks.push_back(make("softmax_rows", [mat](Rng& r) {
    return check_op(r, {random_tensor(r, mat(r), -2, 2)}, [](auto& in) { return ad::softmax_rows(in[0]); });
  }));
  checks.push_back(make("log_softmax_rows", [mat](Rng& r) {
    return check_op(r, {random_tensor(r, mat(r), -2, 2)}, [](auto& in) { return ad::log_softmax_rows(in[0]); });
  }));
  checks.push_back(make("gumbel_softmax", [](Rng& r) {
    std::size_t rows = dim(r, 1, 3), c = dim(r, 2, 6);
    double tau = r.uniform(0.3, 1.5);
    bool noise = r.uniform() < 0.5;
    std::vector<char> allowed(c, 1);
    if (c > 2) allowed[r.below(c)] = 0;
    std::uint64_t noise_seed = r.next_u64();
    return check_op(r, {random_tensor(r, {rows, c})}, [=](auto& in) {
      Rng fixed(noise_seed);  // same noise on every evaluation
      return ad::gumbel_softmax(in[0], tau, fixed, noise, allowed);
    });
  }));
  checks.push_back(make("conv_seq", [](Rng& r) {
    std::size_t m = dim(r, 1, 3), L = m + dim(r, 0, 3), N = dim(r, 1, 3), chan = dim(r, 1, 3);
    return check_op(r, {random_tensor(r, {L, N}), random_tensor(r, {m, N, 1, chan})},
                    [](auto& in) { return ad::conv_seq(in[0], in[1]); });
  }));
  checks.push_back(make("gru_cell", [](Rng& r) {
    std::size_t B = dim(r, 1, 3), N = dim(r, 1, 3), H = dim(r, 1, 3);
    std::vector<double> mask(B, 1.0);
    mask[r.below(B)] = r.uniform() < 0.5 ? 0.0 : 1.0;
    return check_op(r,
                    {random_tensor(r, {B, N}), random_tensor(r, {B, H}), random_tensor(r, {N, 3 * H}),
                     random_tensor(r, {H, 3 * H}), random_tensor(r, {1, 3 * H})},
                    [mask](auto& in) { return ad::gru_cell(in[0], in[1], in[2], in[3], in[4], mask); });
  }));
  checks.push_back(make("gru_encode", [](Rng& r) {
    std::size_t L = dim(r, 1, 4), N = dim(r, 1, 3), H = dim(r, 1, 3);
    std::vector<char> keep(L, 1);
    keep[r.below(L)] = r.uniform() < 0.5 ? 0 : 1;
    keep[0] = 1;
    return check_op(r,
                    {random_tensor(r, {L, N}), random_tensor(r, {N, 3 * H}), random_tensor(r, {H, 3 * H}),
                     random_tensor(r, {1, 3 * H})},
                    [keep](auto& in) { return ad::gru_encode(in[0], {in[1], in[2], in[3]}, keep); });
  }));
  checks.push_back(make("gaussian_kl", [](Rng& r) {
    std::size_t rows = dim(r, 1, 3), d = dim(r, 1, 4);
    return check_op(r,
                    {random_tensor(r, {rows, d}), random_tensor(r, {rows, d}), random_tensor(r, {rows, d}),
                     random_tensor(r, {rows, d})},
                    [](auto& in) { return ad::gaussian_kl(in[0], in[1], in[2], in[3]); });
  }));
  checks.push_back(make("reparameterize", [](Rng& r) {
    std::size_t d = dim(r, 1, 5);
    std::uint64_t s = r.next_u64();
    return check_op(r, {random_tensor(r, {d}), random_tensor(r, {d})}, [s](auto& in) {
      Rng fixed(s);
      return ad::reparameterize(in[0], in[1], fixed);
    });
  }));
  checks.push_back(make("cosine_rows", [](Rng& r) {
    std::size_t rows = dim(r, 1, 3), d = dim(r, 2, 5);
    return check_op(r, {away_from_zero(r, {rows, d}), away_from_zero(r, {rows, d})},
                    [](auto& in) { return ad::cosine_rows(in[0], in[1]); });
  }));
  return checks;
}

std::vector<SuiteOutcome> run_grad_suite(const std::vector<NamedGradCheck>& checks, std::size_t configs,
                                         double tolerance) {
  std::vector<SuiteOutcome> out;
  for (const auto& c : checks) {
    SuiteOutcome o;
    o.name = c.name;
    for (std::size_t s = 0; s < configs; ++s) {
      auto res = c.run(s);
      o.max_rel_error = std::max(o.max_rel_error, std::isfinite(res.max_rel_error) ? res.max_rel_error : 1e300);
      ++o.configs;
    }
    o.passed = o.max_rel_error < tolerance;
    out.push_back(o);
  }
  return out;
}

}  // namespace segcvae
