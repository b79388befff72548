#include "dtlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dtlab::nn {

namespace {
thread_local bool t_grad_enabled = true;

bool track(std::initializer_list<const VarPtr*> inputs) {
  if (!t_grad_enabled) return false;
  for (const VarPtr* v : inputs)
    if ((*v)->requires_grad) return true;
  return false;
}
}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

VarPtr make_var(std::vector<int> shape, bool requires_grad) {
  auto v = std::make_shared<Var>();
  v->value.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
  v->shape = std::move(shape);
  v->requires_grad = requires_grad;
  return v;
}

VarPtr make_var(std::vector<int> shape, std::vector<float> data,
                bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("make_var: " + shape_str(shape) + " does not hold " +
                                std::to_string(data.size()) + " values");
  auto v = std::make_shared<Var>();
  v->shape = std::move(shape);
  v->value = std::move(data);
  v->requires_grad = requires_grad;
  return v;
}

void backward(const VarPtr& loss) {
  if (loss->numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss->shape));
  // Iterative post-order DFS over parents.
  std::vector<Var*> topo;
  std::unordered_set<Var*> visited;
  std::vector<std::pair<Var*, std::size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Var* p = node->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  for (Var* v : topo) v->ensure_grad();
  loss->grad[0] = 1.0f;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Var* v = *it;
    if (v->backward_fn) v->backward_fn(*v);
  }
  // The graph is consumed: release closures and edges, keep parameter grads.
  for (Var* v : topo) {
    v->backward_fn = nullptr;
    v->parents.clear();
  }
}

namespace kernel {

void matmul_xwt(const float* x, const float* w, const float* bias, float* y,
                int m, int n, int k) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const float* xr = x + static_cast<std::size_t>(i) * k;
    float* yr = y + static_cast<std::size_t>(i) * n;
    int j = 0;
    for (; j + 4 <= n; j += 4) {
      const float* w0 = w + static_cast<std::size_t>(j) * k;
      const float* w1 = w0 + k;
      const float* w2 = w1 + k;
      const float* w3 = w2 + k;
      float a0 = 0.f, a1 = 0.f, a2 = 0.f, a3 = 0.f;
#pragma omp simd reduction(+ : a0, a1, a2, a3)
      for (int p = 0; p < k; ++p) {
        const float xv = xr[p];
        a0 += xv * w0[p];
        a1 += xv * w1[p];
        a2 += xv * w2[p];
        a3 += xv * w3[p];
      }
      yr[j] = a0 + (bias ? bias[j] : 0.f);
      yr[j + 1] = a1 + (bias ? bias[j + 1] : 0.f);
      yr[j + 2] = a2 + (bias ? bias[j + 2] : 0.f);
      yr[j + 3] = a3 + (bias ? bias[j + 3] : 0.f);
    }
    for (; j < n; ++j) {
      const float* wr = w + static_cast<std::size_t>(j) * k;
      float acc = 0.f;
#pragma omp simd reduction(+ : acc)
      for (int p = 0; p < k; ++p) acc += xr[p] * wr[p];
      yr[j] = acc + (bias ? bias[j] : 0.f);
    }
  }
}

void matmul_acc_dx(const float* dy, const float* w, float* dx, int m, int n,
                   int k) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const float* dyr = dy + static_cast<std::size_t>(i) * n;
    float* dxr = dx + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const float g = dyr[j];
      if (g == 0.0f) continue;
      const float* wr = w + static_cast<std::size_t>(j) * k;
#pragma omp simd
      for (int p = 0; p < k; ++p) dxr[p] += g * wr[p];
    }
  }
}

void matmul_acc_dw(const float* dy, const float* x, float* dw, int m, int n,
                   int k) {
#pragma omp parallel
  {
#ifdef _OPENMP
    const int nth = omp_get_num_threads();
    const int tid = omp_get_thread_num();
#else
    const int nth = 1;
    const int tid = 0;
#endif
    const int lo = static_cast<int>(static_cast<std::int64_t>(n) * tid / nth);
    const int hi = static_cast<int>(static_cast<std::int64_t>(n) * (tid + 1) / nth);
    for (int i = 0; i < m; ++i) {
      const float* dyr = dy + static_cast<std::size_t>(i) * n;
      const float* xr = x + static_cast<std::size_t>(i) * k;
      for (int j = lo; j < hi; ++j) {
        const float g = dyr[j];
        if (g == 0.0f) continue;
        float* dwr = dw + static_cast<std::size_t>(j) * k;
#pragma omp simd
        for (int p = 0; p < k; ++p) dwr[p] += g * xr[p];
      }
    }
  }
}

}  // namespace kernel

VarPtr add(const VarPtr& a, const VarPtr& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("add: shape mismatch " + shape_str(a->shape) +
                                " vs " + shape_str(b->shape));
  auto out = make_var(a->shape);
  const std::size_t n = a->value.size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] + b->value[i];
  if (track({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a, b};
    VarPtr pa = a, pb = b;
    out->backward_fn = [pa, pb](Var& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
      }
    };
  }
  return out;
}

VarPtr gelu(const VarPtr& x) {
  constexpr float kRoot2OverPi = 0.7978845608028654f;
  constexpr float kCubic = 0.044715f;
  auto out = make_var(x->shape);
  const std::size_t n = x->value.size();
  for (std::size_t i = 0; i < n; ++i) {
    const float v = x->value[i];
    const float u = kRoot2OverPi * (v + kCubic * v * v * v);
    out->value[i] = 0.5f * v * (1.0f + std::tanh(u));
  }
  if (track({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    VarPtr px = x;
    out->backward_fn = [px](Var& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const float v = px->value[i];
        const float u = kRoot2OverPi * (v + kCubic * v * v * v);
        const float t = std::tanh(u);
        const float du = kRoot2OverPi * (1.0f + 3.0f * kCubic * v * v);
        const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
        px->grad[i] += self.grad[i] * d;
      }
    };
  }
  return out;
}

VarPtr tanh_act(const VarPtr& x) {
  auto out = make_var(x->shape);
  const std::size_t n = x->value.size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = std::tanh(x->value[i]);
  if (track({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    VarPtr px = x;
    out->backward_fn = [px, out_raw = out.get()](Var& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const float y = out_raw->value[i];
        px->grad[i] += self.grad[i] * (1.0f - y * y);
      }
    };
  }
  return out;
}

VarPtr interleave3(const VarPtr& a, const VarPtr& b, const VarPtr& c) {
  if (a->shape != b->shape || a->shape != c->shape || a->shape.size() != 3)
    throw std::invalid_argument("interleave3: need three equal [B,K,d] tensors");
  const int batch = a->dim(0), k = a->dim(1), d = a->dim(2);
  auto out = make_var({batch, 3 * k, d});
  const std::size_t row = static_cast<std::size_t>(d);
  for (int bi = 0; bi < batch; ++bi) {
    for (int ki = 0; ki < k; ++ki) {
      const std::size_t src = (static_cast<std::size_t>(bi) * k + ki) * row;
      const std::size_t dst = (static_cast<std::size_t>(bi) * 3 * k + 3 * ki) * row;
      std::copy_n(&a->value[src], row, &out->value[dst]);
      std::copy_n(&b->value[src], row, &out->value[dst + row]);
      std::copy_n(&c->value[src], row, &out->value[dst + 2 * row]);
    }
  }
  if (track({&a, &b, &c})) {
    out->requires_grad = true;
    out->parents = {a, b, c};
    VarPtr pa = a, pb = b, pc = c;
    out->backward_fn = [pa, pb, pc, batch, k, row](Var& self) {
      pa->ensure_grad();
      pb->ensure_grad();
      pc->ensure_grad();
      for (int bi = 0; bi < batch; ++bi) {
        for (int ki = 0; ki < k; ++ki) {
          const std::size_t src = (static_cast<std::size_t>(bi) * k + ki) * row;
          const std::size_t dst =
              (static_cast<std::size_t>(bi) * 3 * k + 3 * ki) * row;
          for (std::size_t j = 0; j < row; ++j) {
            pa->grad[src + j] += self.grad[dst + j];
            pb->grad[src + j] += self.grad[dst + row + j];
            pc->grad[src + j] += self.grad[dst + 2 * row + j];
          }
        }
      }
    };
  }
  return out;
}

VarPtr take_stride3(const VarPtr& x, int offset) {
  if (x->shape.size() != 3 || x->dim(1) % 3 != 0)
    throw std::invalid_argument("take_stride3: need [B,3K,d], got " +
                                shape_str(x->shape));
  if (offset < 0 || offset > 2)
    throw std::invalid_argument("take_stride3: offset must be 0..2");
  const int batch = x->dim(0), k = x->dim(1) / 3, d = x->dim(2);
  auto out = make_var({batch, k, d});
  const std::size_t row = static_cast<std::size_t>(d);
  for (int bi = 0; bi < batch; ++bi) {
    for (int ki = 0; ki < k; ++ki) {
      const std::size_t src =
          (static_cast<std::size_t>(bi) * 3 * k + 3 * ki + offset) * row;
      const std::size_t dst = (static_cast<std::size_t>(bi) * k + ki) * row;
      std::copy_n(&x->value[src], row, &out->value[dst]);
    }
  }
  if (track({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    VarPtr px = x;
    out->backward_fn = [px, batch, k, row, offset](Var& self) {
      px->ensure_grad();
      for (int bi = 0; bi < batch; ++bi) {
        for (int ki = 0; ki < k; ++ki) {
          const std::size_t src =
              (static_cast<std::size_t>(bi) * 3 * k + 3 * ki + offset) * row;
          const std::size_t dst = (static_cast<std::size_t>(bi) * k + ki) * row;
          for (std::size_t j = 0; j < row; ++j) px->grad[src + j] += self.grad[dst + j];
        }
      }
    };
  }
  return out;
}

std::array<VarPtr, 3> split_last3(const VarPtr& x) {
  if (x->shape.empty() || x->shape.back() % 3 != 0)
    throw std::invalid_argument("split_last3: last dim of " + shape_str(x->shape) +
                                " not divisible by 3");
  const int d = x->shape.back() / 3;
  std::vector<int> out_shape = x->shape;
  out_shape.back() = d;
  const std::size_t rows = static_cast<std::size_t>(x->numel()) /
                           static_cast<std::size_t>(3 * d);
  std::array<VarPtr, 3> outs = {make_var(out_shape), make_var(out_shape),
                                make_var(out_shape)};
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t src = r * 3 * d;
    for (int part = 0; part < 3; ++part)
      std::copy_n(&x->value[src + static_cast<std::size_t>(part) * d], d,
                  &outs[static_cast<std::size_t>(part)]->value[r * d]);
  }
  if (track({&x})) {
    VarPtr px = x;
    for (int part = 0; part < 3; ++part) {
      auto& out = outs[static_cast<std::size_t>(part)];
      out->requires_grad = true;
      out->parents = {x};
      out->backward_fn = [px, rows, d, part](Var& self) {
        px->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t dst = r * 3 * d + static_cast<std::size_t>(part) * d;
          for (int j = 0; j < d; ++j)
            px->grad[dst + j] += self.grad[r * d + j];
        }
      };
    }
  }
  return outs;
}

VarPtr mse_masked(const VarPtr& pred, const VarPtr& target,
                  std::span<const std::uint8_t> slot_mask) {
  if (pred->shape != target->shape || pred->shape.size() != 3)
    throw std::invalid_argument("mse_masked: got " + shape_str(pred->shape) +
                                " vs " + shape_str(target->shape));
  const int batch = pred->dim(0), k = pred->dim(1), d = pred->dim(2);
  if (slot_mask.size() != static_cast<std::size_t>(batch) * k)
    throw std::invalid_argument("mse_masked: mask length mismatch");
  std::int64_t live = 0;
  for (auto m : slot_mask) live += m ? 1 : 0;
  if (live == 0) throw std::invalid_argument("mse_masked: all slots masked");
  const float inv = 1.0f / (static_cast<float>(live) * static_cast<float>(d));
  float sum = 0.0f;
  for (std::size_t s = 0; s < slot_mask.size(); ++s) {
    if (!slot_mask[s]) continue;
    const std::size_t base = s * d;
    for (int j = 0; j < d; ++j) {
      const float diff = pred->value[base + j] - target->value[base + j];
      sum += diff * diff;
    }
  }
  auto out = make_var({1}, std::vector<float>{sum * inv});
  if (track({&pred})) {
    out->requires_grad = true;
    out->parents = {pred};
    VarPtr pp = pred, pt = target;
    std::vector<std::uint8_t> mask(slot_mask.begin(), slot_mask.end());
    out->backward_fn = [pp, pt, mask = std::move(mask), d, inv](Var& self) {
      pp->ensure_grad();
      const float g = self.grad[0];
      for (std::size_t s = 0; s < mask.size(); ++s) {
        if (!mask[s]) continue;
        const std::size_t base = s * d;
        for (int j = 0; j < d; ++j) {
          const float diff = pp->value[base + j] - pt->value[base + j];
          pp->grad[base + j] += g * 2.0f * inv * diff;
        }
      }
    };
  }
  return out;
}

}  // namespace dtlab::nn
