#pragma once

// Test-only oracles, kept independent of the library paths they check. The
// reference network math below is a separate double-precision implementation;
// finite differences run through it with 64-bit accumulation throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "dtlab/tensor.hpp"

namespace oracles {

using dvec = std::vector<double>;

inline dvec to_d(std::span<const float> v) { return dvec(v.begin(), v.end()); }

// Scalar head for autodiff: L = sum_i c_i * y_i, reduction in 64-bit. Built
// directly on the public Var fields so it stays outside the library op set.
inline dtlab::nn::VarPtr weighted_sum(const dtlab::nn::VarPtr& x,
                                      std::vector<float> coeffs) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x->value.size(); ++i)
    acc += static_cast<double>(coeffs[i]) * x->value[i];
  auto out = dtlab::nn::make_var({1}, std::vector<float>{static_cast<float>(acc)});
  out->requires_grad = true;
  out->parents = {x};
  dtlab::nn::VarPtr px = x;
  out->backward_fn = [px, coeffs = std::move(coeffs)](dtlab::nn::Var& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < px->grad.size(); ++i)
      px->grad[i] += self.grad[0] * coeffs[i];
  };
  return out;
}

// ---- double-precision reference layers ----

inline dvec ref_linear(const dvec& x, std::size_t rows, std::size_t in_dim,
                       std::size_t out_dim, std::span<const float> w,
                       std::span<const float> b) {
  dvec y(rows * out_dim, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = b.empty() ? 0.0 : static_cast<double>(b[o]);
      for (std::size_t i = 0; i < in_dim; ++i)
        acc += x[r * in_dim + i] * static_cast<double>(w[o * in_dim + i]);
      y[r * out_dim + o] = acc;
    }
  return y;
}

inline dvec ref_gelu(const dvec& x) {
  dvec y(x.size());
  const double c = 0.7978845608028654;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = c * (x[i] + 0.044715 * x[i] * x[i] * x[i]);
    y[i] = 0.5 * x[i] * (1.0 + std::tanh(u));
  }
  return y;
}

inline dvec ref_tanh(const dvec& x) {
  dvec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
  return y;
}

inline dvec ref_layer_norm(const dvec& x, std::size_t rows, std::size_t d,
                           std::span<const float> gamma,
                           std::span<const float> beta, double eps = 1e-5) {
  dvec y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x[r * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x[r * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j)
      y[r * d + j] = static_cast<double>(gamma[j]) * (x[r * d + j] - mean) * inv +
                     static_cast<double>(beta[j]);
  }
  return y;
}

inline dvec ref_embedding(std::span<const float> table, std::size_t d,
                          std::span<const int> idx) {
  dvec y(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      y[i * d + j] = table[static_cast<std::size_t>(idx[i]) * d + j];
  return y;
}

inline dvec ref_attention(const dvec& q, const dvec& k, const dvec& v,
                          std::size_t batch, std::size_t t_len, std::size_t d,
                          std::size_t heads,
                          std::span<const std::uint8_t> valid = {}) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  dvec out(q.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* ok = valid.empty() ? nullptr : valid.data() + b * t_len;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < t_len; ++t) {
        if (ok && !ok[t]) continue;  // padded query: output stays zero
        const std::size_t qo = (b * t_len + t) * d + h * dh;
        dvec scores(t + 1, -std::numeric_limits<double>::infinity());
        double max_s = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= t; ++j) {
          if (ok && !ok[j]) continue;
          const std::size_t ko = (b * t_len + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t p = 0; p < dh; ++p) s += q[qo + p] * k[ko + p];
          scores[j] = s * scale;
          max_s = std::max(max_s, scores[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          if (ok && !ok[j]) continue;
          denom += std::exp(scores[j] - max_s);
        }
        for (std::size_t j = 0; j <= t; ++j) {
          if (ok && !ok[j]) continue;
          const double w = std::exp(scores[j] - max_s) / denom;
          const std::size_t vo = (b * t_len + j) * d + h * dh;
          for (std::size_t p = 0; p < dh; ++p) out[qo + p] += w * v[vo + p];
        }
      }
    }
  }
  return out;
}

// Central finite difference through a double-valued reference function. The
// float slot is perturbed in place; the slope divides by the actually
// realized step so float representation error cancels.
inline double fd_slope(const std::function<double()>& loss, float* slot,
                       double h = 1e-3) {
  const float orig = *slot;
  *slot = static_cast<float>(static_cast<double>(orig) + h);
  const double up = loss();
  const double up_x = static_cast<double>(*slot);
  *slot = static_cast<float>(static_cast<double>(orig) - h);
  const double down = loss();
  const double down_x = static_cast<double>(*slot);
  *slot = orig;
  return (up - down) / (up_x - down_x);
}

// Relative error with a floor, so near-zero gradients are judged absolutely.
inline double rel_err(double a, double b, double floor = 0.1) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Brute-force quantile: independent nth_element-based recomputation.
inline double brute_quantile(std::vector<float> values, double p) {
  const std::size_t n = values.size();
  if (n == 1) return values[0];
  const double pos = p * static_cast<double>(n - 1);
  const auto lo = static_cast<std::size_t>(pos);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo),
                   values.end());
  const double vlo = values[lo];
  if (lo + 1 >= n) return vlo;
  std::nth_element(values.begin(),
                   values.begin() + static_cast<std::ptrdiff_t>(lo + 1),
                   values.end());
  const double vhi = values[lo + 1];
  return vlo + (pos - static_cast<double>(lo)) * (vhi - vlo);
}

}  // namespace oracles
