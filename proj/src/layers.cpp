#include "dtlab/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dtlab::nn {

LayerParams make_linear(std::string name, int in_dim, int out_dim, Rng& rng,
                        float init_std) {
  LayerParams l;
  l.kind = LayerKind::kLinear;
  l.name = std::move(name);
  l.compressible = true;
  l.weight = make_var({out_dim, in_dim}, true);
  for (auto& w : l.weight->value) w = rng.normal(init_std);
  l.bias = make_var({out_dim}, true);
  return l;
}

LayerParams make_layer_norm(std::string name, int dim) {
  LayerParams l;
  l.kind = LayerKind::kLayerNorm;
  l.name = std::move(name);
  l.weight = make_var({dim}, true);
  std::fill(l.weight->value.begin(), l.weight->value.end(), 1.0f);
  l.bias = make_var({dim}, true);
  return l;
}

LayerParams make_embedding(std::string name, int rows, int dim, Rng& rng,
                           float init_std) {
  LayerParams l;
  l.kind = LayerKind::kEmbedding;
  l.name = std::move(name);
  l.weight = make_var({rows, dim}, true);
  for (auto& w : l.weight->value) w = rng.normal(init_std);
  return l;
}

namespace {
bool want_grad(const VarPtr& a, const VarPtr& b = nullptr,
               const VarPtr& c = nullptr) {
  if (!grad_enabled()) return false;
  return a->requires_grad || (b && b->requires_grad) || (c && c->requires_grad);
}
}  // namespace

VarPtr linear(const VarPtr& x, const LayerParams& layer) {
  if (layer.kind != LayerKind::kLinear)
    throw std::invalid_argument("linear: layer '" + layer.name + "' is not Linear");
  const int out_dim = layer.weight->dim(0);
  const int in_dim = layer.weight->dim(1);
  if (x->shape.empty() || x->shape.back() != in_dim)
    throw std::invalid_argument("linear '" + layer.name + "': input " +
                                shape_str(x->shape) + " does not match weight " +
                                shape_str(layer.weight->shape));
  const int rows = static_cast<int>(x->numel() / in_dim);
  std::vector<int> out_shape = x->shape;
  out_shape.back() = out_dim;
  auto out = make_var(out_shape);
  kernel::matmul_xwt(x->value.data(), layer.weight->value.data(),
                     layer.bias ? layer.bias->value.data() : nullptr,
                     out->value.data(), rows, out_dim, in_dim);
  if (want_grad(x, layer.weight, layer.bias)) {
    out->requires_grad = true;
    out->parents = {x, layer.weight};
    if (layer.bias) out->parents.push_back(layer.bias);
    VarPtr px = x, pw = layer.weight, pb = layer.bias;
    out->backward_fn = [px, pw, pb, rows, out_dim, in_dim](Var& self) {
      if (px->requires_grad) {
        px->ensure_grad();
        kernel::matmul_acc_dx(self.grad.data(), pw->value.data(), px->grad.data(),
                              rows, out_dim, in_dim);
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        kernel::matmul_acc_dw(self.grad.data(), px->value.data(), pw->grad.data(),
                              rows, out_dim, in_dim);
      }
      if (pb && pb->requires_grad) {
        pb->ensure_grad();
        for (int r = 0; r < rows; ++r) {
          const float* g = self.grad.data() + static_cast<std::size_t>(r) * out_dim;
          for (int j = 0; j < out_dim; ++j) pb->grad[j] += g[j];
        }
      }
    };
  }
  return out;
}

VarPtr layer_norm(const VarPtr& x, const LayerParams& layer, float eps) {
  if (layer.kind != LayerKind::kLayerNorm)
    throw std::invalid_argument("layer_norm: layer '" + layer.name +
                                "' is not LayerNorm");
  const int d = layer.weight->dim(0);
  if (x->shape.empty() || x->shape.back() != d)
    throw std::invalid_argument("layer_norm '" + layer.name + "': input " +
                                shape_str(x->shape) + " vs dim " + std::to_string(d));
  const std::size_t rows = static_cast<std::size_t>(x->numel() / d);
  auto out = make_var(x->shape);
  // Normalized values and inverse stddevs are kept for the backward pass.
  auto xhat = std::make_shared<std::vector<float>>(x->value.size());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  const float* gamma = layer.weight->value.data();
  const float* beta = layer.bias->value.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x->value.data() + r * d;
    float mean = 0.0f;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (int j = 0; j < d; ++j) {
      const float c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<float>(d);
    const float inv = 1.0f / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    float* hr = xhat->data() + r * d;
    float* yr = out->value.data() + r * d;
    for (int j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mean) * inv;
      yr[j] = gamma[j] * hr[j] + beta[j];
    }
  }
  if (want_grad(x, layer.weight, layer.bias)) {
    out->requires_grad = true;
    out->parents = {x, layer.weight, layer.bias};
    VarPtr px = x, pg = layer.weight, pb = layer.bias;
    out->backward_fn = [px, pg, pb, xhat, inv_std, rows, d](Var& self) {
      const bool dx_needed = px->requires_grad;
      if (dx_needed) px->ensure_grad();
      pg->ensure_grad();
      pb->ensure_grad();
      const float* gamma = pg->value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const float* dy = self.grad.data() + r * d;
        const float* hr = xhat->data() + r * d;
        for (int j = 0; j < d; ++j) {
          pg->grad[j] += dy[j] * hr[j];
          pb->grad[j] += dy[j];
        }
        if (!dx_needed) continue;
        float sum_g = 0.0f, sum_gh = 0.0f;
        for (int j = 0; j < d; ++j) {
          const float g = dy[j] * gamma[j];
          sum_g += g;
          sum_gh += g * hr[j];
        }
        const float mg = sum_g / static_cast<float>(d);
        const float mgh = sum_gh / static_cast<float>(d);
        float* dx = px->grad.data() + r * d;
        const float inv = (*inv_std)[r];
        for (int j = 0; j < d; ++j) {
          const float g = dy[j] * gamma[j];
          dx[j] += inv * (g - mg - hr[j] * mgh);
        }
      }
    };
  }
  return out;
}

VarPtr embedding_rows(const LayerParams& layer, std::span<const int> indices,
                      std::vector<int> out_shape) {
  if (layer.kind != LayerKind::kEmbedding)
    throw std::invalid_argument("embedding_rows: layer '" + layer.name +
                                "' is not Embedding");
  const int rows = layer.weight->dim(0);
  const int d = layer.weight->dim(1);
  if (out_shape.empty() || out_shape.back() != d ||
      shape_numel(out_shape) != static_cast<std::int64_t>(indices.size()) * d)
    throw std::invalid_argument("embedding_rows '" + layer.name +
                                "': bad output shape " + shape_str(out_shape));
  auto out = make_var(std::move(out_shape));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || idx >= rows)
      throw std::out_of_range("embedding_rows '" + layer.name + "': index " +
                              std::to_string(idx) + " outside table of " +
                              std::to_string(rows));
    std::copy_n(layer.weight->value.data() + static_cast<std::size_t>(idx) * d, d,
                out->value.data() + i * d);
  }
  if (grad_enabled() && layer.weight->requires_grad) {
    out->requires_grad = true;
    out->parents = {layer.weight};
    VarPtr pw = layer.weight;
    std::vector<int> idx(indices.begin(), indices.end());
    out->backward_fn = [pw, idx = std::move(idx), d](Var& self) {
      pw->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        float* dst = pw->grad.data() + static_cast<std::size_t>(idx[i]) * d;
        const float* src = self.grad.data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

VarPtr causal_attention(const VarPtr& q, const VarPtr& k, const VarPtr& v,
                        int heads, std::span<const std::uint8_t> key_valid) {
  if (q->shape != k->shape || q->shape != v->shape || q->shape.size() != 3)
    throw std::invalid_argument("causal_attention: q/k/v must share [B,T,d]");
  const int batch = q->dim(0), t_len = q->dim(1), d = q->dim(2);
  if (heads <= 0 || d % heads != 0)
    throw std::invalid_argument("causal_attention: embed dim " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(heads));
  if (!key_valid.empty() &&
      key_valid.size() != static_cast<std::size_t>(batch) * t_len)
    throw std::invalid_argument("causal_attention: key_valid length mismatch");
  const int dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  auto out = make_var(q->shape);
  // Softmax weights per (b, head): lower-triangular [T,T], kept for backward.
  auto probs = std::make_shared<std::vector<float>>(
      static_cast<std::size_t>(batch) * heads * t_len * t_len, 0.0f);

  const float* qd = q->value.data();
  const float* kd = k->value.data();
  const float* vd = v->value.data();
  float* od = out->value.data();

#pragma omp parallel for schedule(static)
  for (int b = 0; b < batch; ++b) {
    const std::uint8_t* valid =
        key_valid.empty() ? nullptr : key_valid.data() + static_cast<std::size_t>(b) * t_len;
    std::vector<float> scores(static_cast<std::size_t>(t_len));
    for (int h = 0; h < heads; ++h) {
      float* pb = probs->data() +
                  ((static_cast<std::size_t>(b) * heads + h) * t_len) * t_len;
      for (int t = 0; t < t_len; ++t) {
        const std::size_t q_off =
            (static_cast<std::size_t>(b) * t_len + t) * d + static_cast<std::size_t>(h) * dh;
        float* prow = pb + static_cast<std::size_t>(t) * t_len;
        float* orow = od + q_off;
        if (valid && !valid[t]) {
          std::fill_n(orow, dh, 0.0f);
          continue;  // padded query: weights stay zero, output unused
        }
        float max_s = -std::numeric_limits<float>::infinity();
        for (int j = 0; j <= t; ++j) {
          if (valid && !valid[j]) continue;
          const std::size_t k_off =
              (static_cast<std::size_t>(b) * t_len + j) * d + static_cast<std::size_t>(h) * dh;
          float s = 0.0f;
#pragma omp simd reduction(+ : s)
          for (int p = 0; p < dh; ++p) s += qd[q_off + p] * kd[k_off + p];
          s *= scale;
          scores[static_cast<std::size_t>(j)] = s;
          max_s = std::max(max_s, s);
        }
        float denom = 0.0f;
        for (int j = 0; j <= t; ++j) {
          if (valid && !valid[j]) continue;
          const float e = std::exp(scores[static_cast<std::size_t>(j)] - max_s);
          prow[j] = e;
          denom += e;
        }
        const float inv_denom = 1.0f / denom;
        std::fill_n(orow, dh, 0.0f);
        for (int j = 0; j <= t; ++j) {
          if (valid && !valid[j]) continue;
          const float w = prow[j] * inv_denom;
          prow[j] = w;
          const std::size_t v_off =
              (static_cast<std::size_t>(b) * t_len + j) * d + static_cast<std::size_t>(h) * dh;
#pragma omp simd
          for (int p = 0; p < dh; ++p) orow[p] += w * vd[v_off + p];
        }
      }
    }
  }

  if (want_grad(q, k, v)) {
    out->requires_grad = true;
    out->parents = {q, k, v};
    VarPtr pq = q, pk = k, pv = v;
    std::vector<std::uint8_t> valid_copy(key_valid.begin(), key_valid.end());
    out->backward_fn = [pq, pk, pv, probs, valid_copy = std::move(valid_copy),
                        batch, t_len, d, dh, heads, scale](Var& self) {
      pq->ensure_grad();
      pk->ensure_grad();
      pv->ensure_grad();
      const float* qd = pq->value.data();
      const float* kd = pk->value.data();
      const float* vd = pv->value.data();
      const float* god = self.grad.data();
      float* dq = pq->grad.data();
      float* dk = pk->grad.data();
      float* dv = pv->grad.data();
#pragma omp parallel for schedule(static)
      for (int b = 0; b < batch; ++b) {
        const std::uint8_t* valid =
            valid_copy.empty() ? nullptr
                               : valid_copy.data() + static_cast<std::size_t>(b) * t_len;
        std::vector<float> dp(static_cast<std::size_t>(t_len));
        for (int h = 0; h < heads; ++h) {
          const float* pb = probs->data() +
                            ((static_cast<std::size_t>(b) * heads + h) * t_len) * t_len;
          for (int t = 0; t < t_len; ++t) {
            if (valid && !valid[t]) continue;
            const std::size_t q_off =
                (static_cast<std::size_t>(b) * t_len + t) * d +
                static_cast<std::size_t>(h) * dh;
            const float* prow = pb + static_cast<std::size_t>(t) * t_len;
            const float* go = god + q_off;
            // dv_j += p_tj * do_t ; dp_tj = <do_t, v_j>
            float dp_dot_p = 0.0f;
            for (int j = 0; j <= t; ++j) {
              if (valid && !valid[j]) continue;
              const float w = prow[j];
              const std::size_t vo =
                  (static_cast<std::size_t>(b) * t_len + j) * d +
                  static_cast<std::size_t>(h) * dh;
              float dpj = 0.0f;
#pragma omp simd reduction(+ : dpj)
              for (int p = 0; p < dh; ++p) {
                dv[vo + p] += w * go[p];
                dpj += go[p] * vd[vo + p];
              }
              dp[static_cast<std::size_t>(j)] = dpj;
              dp_dot_p += dpj * w;
            }
            // ds_tj = p_tj (dp_tj - sum_l dp_tl p_tl); chain into q and k.
            for (int j = 0; j <= t; ++j) {
              if (valid && !valid[j]) continue;
              const float ds = prow[j] * (dp[static_cast<std::size_t>(j)] - dp_dot_p) * scale;
              if (ds == 0.0f) continue;
              const std::size_t ko =
                  (static_cast<std::size_t>(b) * t_len + j) * d +
                  static_cast<std::size_t>(h) * dh;
#pragma omp simd
              for (int p = 0; p < dh; ++p) {
                dq[q_off + p] += ds * kd[ko + p];
                dk[ko + p] += ds * qd[q_off + p];
              }
            }
          }
        }
      }
    };
  }
  return out;
}

VarPtr dropout(const VarPtr& x, float p, Rng& rng, bool active) {
  if (!active || p <= 0.0f) return x;
  if (p >= 1.0f) throw std::invalid_argument("dropout: p must be < 1");
  const float keep_scale = 1.0f / (1.0f - p);
  auto mask = std::make_shared<std::vector<float>>(x->value.size());
  auto out = make_var(x->shape);
  for (std::size_t i = 0; i < x->value.size(); ++i) {
    const float m = rng.uniform() >= p ? keep_scale : 0.0f;
    (*mask)[i] = m;
    out->value[i] = x->value[i] * m;
  }
  if (want_grad(x)) {
    out->requires_grad = true;
    out->parents = {x};
    VarPtr px = x;
    out->backward_fn = [px, mask](Var& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        px->grad[i] += self.grad[i] * (*mask)[i];
    };
  }
  return out;
}

void init_adam_state(AdamState& state, std::span<const ParamRef> params) {
  state.m.clear();
  state.v.clear();
  state.step = 0;
  for (const auto& p : params) {
    state.m.emplace_back(p.var->value.size(), 0.0f);
    state.v.emplace_back(p.var->value.size(), 0.0f);
  }
}

namespace {
void zero_masked_grads(std::span<const ParamRef> params) {
  for (const auto& p : params) {
    if (!p.mask || p.var->grad.empty()) continue;
    for (std::size_t i = 0; i < p.var->grad.size(); ++i)
      if (!p.mask[i]) p.var->grad[i] = 0.0f;
  }
}
}  // namespace

void clip_grad_norm(std::span<const ParamRef> params, float max_norm) {
  zero_masked_grads(params);
  double sq = 0.0;  // 64-bit accumulation for the global norm
  for (const auto& p : params) {
    if (p.var->grad.empty()) continue;
    for (float g : p.var->grad) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const float s = static_cast<float>(max_norm / norm);
  for (const auto& p : params)
    for (float& g : p.var->grad) g *= s;
}

void adam_step(std::span<const ParamRef> params, AdamState& state,
               const AdamConfig& cfg) {
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state not initialized for param list");
  zero_masked_grads(params);
  state.step += 1;
  const float b1c = 1.0f - std::pow(cfg.beta1, static_cast<float>(state.step));
  const float b2c = 1.0f - std::pow(cfg.beta2, static_cast<float>(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& p = params[pi];
    auto& val = p.var->value;
    if (p.var->grad.empty()) p.var->ensure_grad();
    auto& grad = p.var->grad;
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (std::size_t i = 0; i < val.size(); ++i) {
      const float g = grad[i];
      if (!std::isfinite(g))
        throw std::runtime_error("adam_step: non-finite gradient in '" + p.name +
                                 "' at flat index " + std::to_string(i));
      if (cfg.weight_decay != 0.0f && p.decay)
        val[i] -= cfg.lr * cfg.weight_decay * val[i];
      m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g * g;
      const float mhat = m[i] / b1c;
      const float vhat = v[i] / b2c;
      val[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    if (p.mask) {
      for (std::size_t i = 0; i < val.size(); ++i)
        if (!p.mask[i]) val[i] = 0.0f;
    }
  }
}

}  // namespace dtlab::nn
