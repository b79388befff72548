#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dtlab::nn {

struct Var;
using VarPtr = std::shared_ptr<Var>;

// Dense row-major float32 tensor, doubling as a node of the autodiff tape.
// Activations are created per forward pass; parameters are long-lived Vars
// with requires_grad set.
struct Var {
  std::vector<int> shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until backward() touches this node
  bool requires_grad = false;

  std::vector<VarPtr> parents;
  std::function<void(Var&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0f);
  }
};

VarPtr make_var(std::vector<int> shape, bool requires_grad = false);
VarPtr make_var(std::vector<int> shape, std::vector<float> data,
                bool requires_grad = false);

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Thread-local autograd switch. Forward passes executed under NoGradGuard
// record nothing, so a frozen model can serve many rollout threads at once.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse-mode sweep from a scalar loss. Fills grad on every reachable node
// that requires it and consumes the recorded graph.
void backward(const VarPtr& loss);

// Elementwise / structural ops used by the model graph.
VarPtr add(const VarPtr& a, const VarPtr& b);
VarPtr gelu(const VarPtr& x);  // tanh approximation
VarPtr tanh_act(const VarPtr& x);

// Interleaves three [B,K,d] tensors into [B,3K,d] token order (a,b,c) per k.
VarPtr interleave3(const VarPtr& a, const VarPtr& b, const VarPtr& c);
// Picks tokens at positions 3k+offset from [B,3K,d], giving [B,K,d].
VarPtr take_stride3(const VarPtr& x, int offset);
// Splits the last dimension of [B,T,3d] into three [B,T,d] tensors.
std::array<VarPtr, 3> split_last3(const VarPtr& x);

// Mean squared error over the unmasked slots of [B,K,D] predictions.
// slot_mask has B*K entries; masked-out slots contribute nothing to either
// the sum or the normalizer.
VarPtr mse_masked(const VarPtr& pred, const VarPtr& target,
                  std::span<const std::uint8_t> slot_mask);

// Internal kernels, exposed for reuse by layer code and tests.
namespace kernel {
// y[M,N] = x[M,K] * w[N,K]^T (+ bias[N] when given)
void matmul_xwt(const float* x, const float* w, const float* bias, float* y,
                int m, int n, int k);
// dx[M,K] += dy[M,N] * w[N,K]
void matmul_acc_dx(const float* dy, const float* w, float* dx, int m, int n,
                   int k);
// dw[N,K] += dy[M,N]^T * x[M,K]
void matmul_acc_dw(const float* dy, const float* x, float* dw, int m, int n,
                   int k);
}  // namespace kernel

}  // namespace dtlab::nn
