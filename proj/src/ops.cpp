#include "segcvae/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "segcvae/errors.hpp"

namespace segcvae::ad {

namespace {

bool wants(const Node& n, std::size_t i) { return n.parents[i]->requires_grad; }
Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

Shape matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

// c (p, s) += a (p, q) * b (q, s), all row-major; flags transpose the operands.
void gemm_acc(const double* a, const double* b, double* c, std::size_t p, std::size_t q,
              std::size_t s, bool ta, bool tb) {
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t k = 0; k < q; ++k) {
      double av = ta ? a[k * p + i] : a[i * q + k];
      if (av == 0.0) continue;
      double* crow = c + i * s;
      if (!tb) {
        const double* brow = b + k * s;
        for (std::size_t j = 0; j < s; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < s; ++j) crow[j] += av * b[j * q + k];
      }
    }
  }
}

template <class F, class D>
Tensor unary(const Tensor& a, F f, D dfdx_from_x_and_y) {
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [dfdx_from_x_and_y](Node& self) {
    Node& p = parent(self, 0);
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      g[i] += self.grad[i] * dfdx_from_x_and_y(p.value[i], self.value[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(self, k)) continue;
      auto& g = parent(self, k).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(self, k)) continue;
      double sign = k == 0 ? 1.0 : -1.0;
      auto& g = parent(self, k).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value");
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  const std::size_t R = a.rows(), C = a.cols();
  if (bias.size() != C) {
    throw ShapeError("add_row: bias " + shape_str(bias.shape()) + " vs " + shape_str(a.shape()));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] += bias[c];
  return make_result(a.shape(), std::move(out), {a, bias}, [R, C](Node& self) {
    if (wants(self, 0)) {
      auto& g = parent(self, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = parent(self, 1).grad_buffer();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) g[c] += self.grad[r * C + c];
    }
  });
}

Tensor mul_col(const Tensor& a, const Tensor& s) {
  const std::size_t R = a.rows(), C = a.cols();
  if (s.size() != R) {
    throw ShapeError("mul_col: scale " + shape_str(s.shape()) + " vs " + shape_str(a.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = a.at(r, c) * s[r];
  return make_result(a.shape(), std::move(out), {a, s}, [R, C](Node& self) {
    Node& pa = parent(self, 0);
    Node& ps = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += self.grad[r * C + c] * ps.value[r];
    }
    if (ps.requires_grad) {
      auto& g = ps.grad_buffer();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) g[r] += self.grad[r * C + c] * pa.value[r * C + c];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() > 2 || b.rank() > 2) throw ShapeError("matmul expects matrices");
  const std::size_t p = a.rows(), q = a.cols();
  const std::size_t bq = b.rank() == 1 ? 1 : b.rows();
  const std::size_t s = b.cols();
  if (q != bq) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(p * s, 0.0);
  gemm_acc(a.values().data(), b.values().data(), out.data(), p, q, s, false, false);
  return make_result(matrix_shape(p, s), std::move(out), {a, b}, [p, q, s](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    // dA = G * B^T, dB = A^T * G
    if (pa.requires_grad) {
      gemm_acc(self.grad.data(), pb.value.data(), pa.grad_buffer().data(), p, s, q, false, true);
    }
    if (pb.requires_grad) {
      gemm_acc(pa.value.data(), self.grad.data(), pb.grad_buffer().data(), q, p, s, true, false);
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() > 2) throw ShapeError("transpose expects a matrix");
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = a.at(r, c);
  return make_result(matrix_shape(C, R), std::move(out), {a}, [R, C](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += self.grad[c * R + r];
  });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& bias) {
  return add_row(matmul(x, w), bias);
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_result({1}, {s}, {a}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DomainError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_cols(const Tensor& a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(R, 0.0);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r] += a.at(r, c);
  return make_result(matrix_shape(R, 1), std::move(out), {a}, [R, C](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += self.grad[r];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t C = parts.front().cols();
  std::size_t R = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.cols() != C) throw ShapeError("concat_rows: column counts differ");
    R += p.rows();
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_result(matrix_shape(R, C), std::move(out), std::move(parents), [](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += p->value.size();
    }
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const std::size_t R = a.rows(), Ca = a.cols(), Cb = b.cols();
  if (b.rows() != R) throw ShapeError("concat_cols: row counts differ");
  const std::size_t C = Ca + Cb;
  std::vector<double> out(R * C);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < Ca; ++c) out[r * C + c] = a.at(r, c);
    for (std::size_t c = 0; c < Cb; ++c) out[r * C + Ca + c] = b.at(r, c);
  }
  return make_result(matrix_shape(R, C), std::move(out), {a, b}, [R, Ca, Cb, C](Node& self) {
    if (wants(self, 0)) {
      auto& g = parent(self, 0).grad_buffer();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < Ca; ++c) g[r * Ca + c] += self.grad[r * C + c];
    }
    if (wants(self, 1)) {
      auto& g = parent(self, 1).grad_buffer();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < Cb; ++c) g[r * Cb + c] += self.grad[r * C + Ca + c];
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size() * C);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= R) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(idx[k] * C), C, out.begin() + static_cast<std::ptrdiff_t>(k * C));
  }
  Shape shape = matrix_shape(idx.size(), C);
  return make_result(std::move(shape), std::move(out), {a},
                     [idx = std::move(idx), C](Node& self) {
                       auto& g = parent(self, 0).grad_buffer();
                       for (std::size_t k = 0; k < idx.size(); ++k)
                         for (std::size_t c = 0; c < C; ++c) g[idx[k] * C + c] += self.grad[k * C + c];
                     });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a.rows()) throw ShapeError("slice_rows out of range");
  std::vector<std::size_t> idx(count);
  for (std::size_t k = 0; k < count; ++k) idx[k] = start + k;
  return gather_rows(a, idx);
}

Tensor pick_cols(const Tensor& a, std::span<const std::size_t> cols) {
  const std::size_t R = a.rows(), C = a.cols();
  if (cols.size() != R) throw ShapeError("pick_cols: one column per row required");
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  std::vector<double> out(R);
  for (std::size_t r = 0; r < R; ++r) {
    if (idx[r] >= C) throw ShapeError("pick_cols: column out of range");
    out[r] = a.at(r, idx[r]);
  }
  return make_result(matrix_shape(R, 1), std::move(out), {a}, [idx = std::move(idx), C](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) g[r * C + idx[r]] += self.grad[r];
  });
}

namespace {

// Softmax of each row of (x / tau) restricted to allowed columns; returns probabilities.
std::vector<double> masked_softmax(std::span<const double> x, std::size_t R, std::size_t C,
                                   double tau, std::span<const char> allowed) {
  std::vector<double> out(R * C, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    const double* row = x.data() + r * C;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c)
      if (allowed.empty() || allowed[c]) mx = std::max(mx, row[c] / tau);
    if (mx == -std::numeric_limits<double>::infinity()) throw DomainError("softmax row has no allowed column");
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      if (!allowed.empty() && !allowed[c]) continue;
      out[r * C + c] = std::exp(row[c] / tau - mx);
      z += out[r * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] /= z;
  }
  return out;
}

// dx = y * (dy - <dy, y>) / tau, row-wise.
void softmax_backward(const Node& self, std::vector<double>& g, std::size_t R, std::size_t C,
                      double tau) {
  for (std::size_t r = 0; r < R; ++r) {
    const double* y = self.value.data() + r * C;
    const double* dy = self.grad.data() + r * C;
    double dot = 0.0;
    for (std::size_t c = 0; c < C; ++c) dot += dy[c] * y[c];
    for (std::size_t c = 0; c < C; ++c) g[r * C + c] += y[c] * (dy[c] - dot) / tau;
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  const std::size_t R = a.rows(), C = a.cols();
  auto out = masked_softmax(a.values(), R, C, 1.0, {});
  return make_result(a.shape(), std::move(out), {a}, [R, C](Node& self) {
    softmax_backward(self, parent(self, 0).grad_buffer(), R, C, 1.0);
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < R; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, a.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(a.at(r, c) - mx);
    double lz = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = a.at(r, c) - lz;
  }
  return make_result(a.shape(), std::move(out), {a}, [R, C](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < R; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < C; ++c) total += self.grad[r * C + c];
      for (std::size_t c = 0; c < C; ++c)
        g[r * C + c] += self.grad[r * C + c] - std::exp(self.value[r * C + c]) * total;
    }
  });
}

Tensor gumbel_softmax(const Tensor& logits, double tau, Rng& rng, bool noise,
                      std::span<const char> allowed) {
  if (!(tau > 0.0)) throw DomainError("gumbel_softmax: tau must be positive");
  const std::size_t R = logits.rows(), C = logits.cols();
  if (!allowed.empty() && allowed.size() != C) throw ShapeError("gumbel_softmax: mask width");
  std::vector<double> perturbed(logits.values().begin(), logits.values().end());
  if (noise) {
    for (auto& v : perturbed) v += rng.gumbel();
  }
  auto out = masked_softmax(perturbed, R, C, tau, allowed);
  return make_result(logits.shape(), std::move(out), {logits}, [R, C, tau](Node& self) {
    softmax_backward(self, parent(self, 0).grad_buffer(), R, C, tau);
  });
}

Tensor conv_seq(const Tensor& seq, const Tensor& kernel) {
  if (seq.rank() != 2 || kernel.rank() != 4 || kernel.shape()[2] != 1) {
    throw ShapeError("conv_seq: expected (L, N) input and (m, N, 1, chan) kernel");
  }
  const std::size_t L = seq.shape()[0], N = seq.shape()[1];
  const std::size_t m = kernel.shape()[0], chan = kernel.shape()[3];
  if (kernel.shape()[1] != N) throw ShapeError("conv_seq: kernel width differs from embedding width");
  if (L < m) throw ShapeError("conv_seq: sequence shorter than kernel");
  const std::size_t T = L - m + 1;
  std::vector<double> out(chan * T, 0.0);
  auto C = seq.values();
  auto K = kernel.values();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        double x = C[(t + i) * N + j];
        if (x == 0.0) continue;
        const double* krow = K.data() + (i * N + j) * chan;
        for (std::size_t c = 0; c < chan; ++c) out[c * T + t] += x * krow[c];
      }
  return make_result({chan, T}, std::move(out), {seq, kernel}, [N, m, chan, T](Node& self) {
    Node& ps = parent(self, 0);
    Node& pk = parent(self, 1);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          const std::size_t si = (t + i) * N + j;
          const std::size_t ki = (i * N + j) * chan;
          for (std::size_t c = 0; c < chan; ++c) {
            double go = self.grad[c * T + t];
            if (ps.requires_grad) ps.accumulate(si, go * pk.value[ki + c]);
            if (pk.requires_grad) pk.accumulate(ki + c, go * ps.value[si]);
          }
        }
  });
}

Tensor gru_cell(const Tensor& x, const Tensor& h, const Tensor& wx, const Tensor& wh,
                const Tensor& bias, std::span<const double> mask) {
  const std::size_t B = x.rows(), N = x.cols(), H = h.cols();
  if (h.rows() != B || wx.rows() != N || wx.cols() != 3 * H || wh.rows() != H ||
      wh.cols() != 3 * H || bias.size() != 3 * H) {
    throw ShapeError("gru_cell: inconsistent shapes x" + shape_str(x.shape()) + " h" +
                     shape_str(h.shape()) + " wx" + shape_str(wx.shape()) + " wh" +
                     shape_str(wh.shape()));
  }
  if (!mask.empty() && mask.size() != B) throw ShapeError("gru_cell: mask length");
  std::vector<double> gx(B * 3 * H, 0.0), gh(B * 3 * H, 0.0);
  gemm_acc(x.values().data(), wx.values().data(), gx.data(), B, N, 3 * H, false, false);
  gemm_acc(h.values().data(), wh.values().data(), gh.data(), B, H, 3 * H, false, false);
  // cache: reset, update, candidate, candidate hidden projection
  std::vector<double> cache(B * 4 * H);
  std::vector<double> out(B * H);
  std::vector<double> m(mask.begin(), mask.end());
  auto sig = [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < H; ++k) {
      const std::size_t base = b * 3 * H;
      double r = sig(gx[base + k] + bias[k] + gh[base + k]);
      double u = sig(gx[base + H + k] + bias[H + k] + gh[base + H + k]);
      double hn = gh[base + 2 * H + k];
      double n = std::tanh(gx[base + 2 * H + k] + bias[2 * H + k] + r * hn);
      double hp = h.at(b, k);
      double next = (1.0 - u) * n + u * hp;
      bool keep = !m.empty() && m[b] == 0.0;
      out[b * H + k] = keep ? hp : next;
      double* c = cache.data() + b * 4 * H;
      c[k] = r;
      c[H + k] = u;
      c[2 * H + k] = n;
      c[3 * H + k] = hn;
    }
  }
  return make_result(
      {B, H}, std::move(out), {x, h, wx, wh, bias},
      [B, N, H, cache = std::move(cache), m = std::move(m)](Node& self) {
        Node& px = parent(self, 0);
        Node& ph = parent(self, 1);
        Node& pwx = parent(self, 2);
        Node& pwh = parent(self, 3);
        Node& pb = parent(self, 4);
        std::vector<double> dgx(B * 3 * H, 0.0), dgh(B * 3 * H, 0.0);
        std::vector<double> dh_direct(B * H, 0.0);
        for (std::size_t b = 0; b < B; ++b) {
          const bool keep = !m.empty() && m[b] == 0.0;
          const double* c = cache.data() + b * 4 * H;
          for (std::size_t k = 0; k < H; ++k) {
            double go = self.grad[b * H + k];
            if (keep) {
              dh_direct[b * H + k] += go;
              continue;
            }
            double r = c[k], u = c[H + k], n = c[2 * H + k], hn = c[3 * H + k];
            double hp = ph.value[b * H + k];
            double dn = go * (1.0 - u);
            double du = go * (hp - n);
            dh_direct[b * H + k] += go * u;
            double dan = dn * (1.0 - n * n);
            double dr = dan * hn;
            double dau = du * u * (1.0 - u);
            double dar = dr * r * (1.0 - r);
            const std::size_t base = b * 3 * H;
            dgx[base + k] = dar;
            dgh[base + k] = dar;
            dgx[base + H + k] = dau;
            dgh[base + H + k] = dau;
            dgx[base + 2 * H + k] = dan;
            dgh[base + 2 * H + k] = dan * r;
          }
        }
        if (px.requires_grad)
          gemm_acc(dgx.data(), pwx.value.data(), px.grad_buffer().data(), B, 3 * H, N, false, true);
        if (pwx.requires_grad)
          gemm_acc(px.value.data(), dgx.data(), pwx.grad_buffer().data(), N, B, 3 * H, true, false);
        if (pb.requires_grad) {
          auto& g = pb.grad_buffer();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < 3 * H; ++k) g[k] += dgx[b * 3 * H + k];
        }
        if (ph.requires_grad) {
          auto& g = ph.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += dh_direct[i];
          gemm_acc(dgh.data(), pwh.value.data(), g.data(), B, 3 * H, H, false, true);
        }
        if (pwh.requires_grad)
          gemm_acc(ph.value.data(), dgh.data(), pwh.grad_buffer().data(), H, B, 3 * H, true, false);
      });
}

Tensor gaussian_kl(const Tensor& mu_q, const Tensor& logvar_q, const Tensor& mu_p,
                   const Tensor& logvar_p) {
  require_same_shape(mu_q, logvar_q, "gaussian_kl");
  require_same_shape(mu_q, mu_p, "gaussian_kl");
  require_same_shape(mu_q, logvar_p, "gaussian_kl");
  const std::size_t R = mu_q.rows(), D = mu_q.cols();
  std::vector<double> out(R, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t i = r * D + d;
      double diff = mu_q[i] - mu_p[i];
      out[r] += 0.5 * (logvar_p[i] - logvar_q[i] +
                       (std::exp(logvar_q[i]) + diff * diff) / std::exp(logvar_p[i]) - 1.0);
    }
  }
  Shape shape = mu_q.rank() == 1 ? Shape{1} : Shape{R, 1};
  return make_result(std::move(shape), std::move(out), {mu_q, logvar_q, mu_p, logvar_p},
                     [R, D](Node& self) {
                       Node& mq = parent(self, 0);
                       Node& lq = parent(self, 1);
                       Node& mp = parent(self, 2);
                       Node& lp = parent(self, 3);
                       for (std::size_t r = 0; r < R; ++r) {
                         double go = self.grad[r];
                         for (std::size_t d = 0; d < D; ++d) {
                           const std::size_t i = r * D + d;
                           double var_p = std::exp(lp.value[i]);
                           double var_q = std::exp(lq.value[i]);
                           double diff = mq.value[i] - mp.value[i];
                           if (mq.requires_grad) mq.accumulate(i, go * diff / var_p);
                           if (mp.requires_grad) mp.accumulate(i, -go * diff / var_p);
                           if (lq.requires_grad) lq.accumulate(i, go * 0.5 * (var_q / var_p - 1.0));
                           if (lp.requires_grad)
                             lp.accumulate(i, go * 0.5 * (1.0 - (var_q + diff * diff) / var_p));
                         }
                       }
                     });
}

Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& eps) {
  require_same_shape(mu, logvar, "reparameterize");
  require_same_shape(mu, eps, "reparameterize");
  return add(mu, mul(exp(scale(logvar, 0.5)), eps.detach()));
}

Tensor reparameterize(const Tensor& mu, const Tensor& logvar, Rng& rng) {
  std::vector<double> e(mu.size());
  for (auto& v : e) v = rng.normal();
  return reparameterize(mu, logvar, Tensor::from(mu.shape(), std::move(e)));
}

Tensor cosine_rows(const Tensor& u, const Tensor& v) {
  require_same_shape(u, v, "cosine");
  const std::size_t R = u.rows(), D = u.cols();
  std::vector<double> out(R), nu(R), nv(R);
  for (std::size_t r = 0; r < R; ++r) {
    double dot = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      dot += u.at(r, d) * v.at(r, d);
      uu += u.at(r, d) * u.at(r, d);
      vv += v.at(r, d) * v.at(r, d);
    }
    nu[r] = std::sqrt(uu);
    nv[r] = std::sqrt(vv);
    if (nu[r] <= kNormEpsilon || nv[r] <= kNormEpsilon) {
      throw DegenerateVector("cosine of a near-zero vector");
    }
    out[r] = std::clamp(dot / std::sqrt(uu * vv), -1.0, 1.0);
  }
  Shape shape = u.rank() == 1 ? Shape{1} : Shape{R, 1};
  return make_result(std::move(shape), std::move(out), {u, v},
                     [R, D, nu = std::move(nu), nv = std::move(nv)](Node& self) {
                       Node& pu = parent(self, 0);
                       Node& pv = parent(self, 1);
                       for (std::size_t r = 0; r < R; ++r) {
                         double go = self.grad[r];
                         double c = self.value[r];
                         for (std::size_t d = 0; d < D; ++d) {
                           const std::size_t i = r * D + d;
                           if (pu.requires_grad)
                             pu.accumulate(i, go * (pv.value[i] / (nu[r] * nv[r]) -
                                                    c * pu.value[i] / (nu[r] * nu[r])));
                           if (pv.requires_grad)
                             pv.accumulate(i, go * (pu.value[i] / (nu[r] * nv[r]) -
                                                    c * pv.value[i] / (nv[r] * nv[r])));
                         }
                       }
                     });
}

Tensor cosine(const Tensor& u, const Tensor& v) {
  if (u.rows() != 1) throw ShapeError("cosine expects vectors");
  return reshape(cosine_rows(u, v), {1});
}

}  // namespace segcvae::ad
