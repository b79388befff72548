#include "dtlab/compress.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dtlab::compress {

void pack_bits(std::span<const std::uint32_t> values, int bits,
               std::vector<std::uint8_t>& out) {
  out.assign((values.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
  std::size_t pos = 0;
  for (std::uint32_t v : values) {
    for (int i = 0; i < bits; ++i, ++pos)
      if (v & (1u << i)) out[pos >> 3] |= static_cast<std::uint8_t>(1u << (pos & 7));
  }
}

std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> bytes,
                                       std::size_t count, int bits) {
  std::vector<std::uint32_t> values(count, 0);
  std::size_t pos = 0;
  for (std::size_t n = 0; n < count; ++n) {
    std::uint32_t v = 0;
    for (int i = 0; i < bits; ++i, ++pos)
      if (bytes[pos >> 3] & (1u << (pos & 7))) v |= 1u << i;
    values[n] = v;
  }
  return values;
}

QuantizedTensor quantize_tensor(std::span<const float> values,
                                std::vector<int> shape, int bits) {
  if (bits < 1 || bits > 8)
    throw std::invalid_argument("quantize_tensor: bits must be in [1,8], got " +
                                std::to_string(bits));
  if (values.empty())
    throw std::invalid_argument("quantize_tensor: empty tensor");
  float lo = values[0], hi = values[0];
  for (float v : values) {
    if (!std::isfinite(v))
      throw std::invalid_argument("quantize_tensor: non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  QuantizedTensor q;
  q.shape = std::move(shape);
  q.bits = bits;
  q.min_val = lo;
  const std::uint32_t levels = (1u << bits) - 1u;
  q.step = (hi - lo) / static_cast<float>(levels);
  std::vector<std::uint32_t> codes(values.size(), 0);
  if (q.step > 0.0f) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float c = std::round((values[i] - lo) / q.step);
      codes[i] = static_cast<std::uint32_t>(
          std::clamp(c, 0.0f, static_cast<float>(levels)));
    }
  }
  pack_bits(codes, bits, q.codes);
  return q;
}

std::vector<float> dequantize(const QuantizedTensor& q) {
  const auto numel = static_cast<std::size_t>(nn::shape_numel(q.shape));
  const auto codes = unpack_bits(q.codes, numel, q.bits);
  std::vector<float> out(numel);
  for (std::size_t i = 0; i < numel; ++i)
    out[i] = q.min_val + static_cast<float>(codes[i]) * q.step;
  return out;
}

std::string CompressionPlan::label() const {
  switch (strategy) {
    case Strategy::kFp32: return "fp32";
    case Strategy::kQuant: return "q" + std::to_string(bits);
    case Strategy::kPrune: return "p";
    case Strategy::kQuantThenPrune: return "q" + std::to_string(bits) + "+p";
    case Strategy::kPruneThenQuant: return "p+q" + std::to_string(bits);
    case Strategy::kPruneFineTuneQuant:
      return "p+ft+q" + std::to_string(bits);
  }
  return "fp32";
}

namespace {
[[noreturn]] void bad_plan(const std::string& text) {
  throw std::invalid_argument(
      "unknown strategy '" + text +
      "'; expected fp32 | q<b> | p | q<b>+p | p+q<b> | p+ft+q<b> with b in 1..8");
}
}  // namespace

CompressionPlan CompressionPlan::parse(const std::string& text) {
  CompressionPlan plan;
  auto bits_of = [&text](const std::string& token) {
    if (token.size() < 2 || token[0] != 'q') bad_plan(text);
    int b = 0;
    for (std::size_t i = 1; i < token.size(); ++i) {
      if (token[i] < '0' || token[i] > '9') bad_plan(text);
      b = b * 10 + (token[i] - '0');
      if (b > 99) bad_plan(text);
    }
    if (b < 1 || b > 8) bad_plan(text);
    return b;
  };
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto plus = text.find('+', start);
    parts.push_back(text.substr(start, plus - start));
    if (plus == std::string::npos) break;
    start = plus + 1;
  }
  if (parts.size() == 1) {
    if (parts[0] == "fp32") plan.strategy = Strategy::kFp32;
    else if (parts[0] == "p") plan.strategy = Strategy::kPrune;
    else {
      plan.strategy = Strategy::kQuant;
      plan.bits = bits_of(parts[0]);
    }
  } else if (parts.size() == 2 && parts[1] == "p") {
    plan.strategy = Strategy::kQuantThenPrune;
    plan.bits = bits_of(parts[0]);
  } else if (parts.size() == 2 && parts[0] == "p") {
    plan.strategy = Strategy::kPruneThenQuant;
    plan.bits = bits_of(parts[1]);
  } else if (parts.size() == 3 && parts[0] == "p" && parts[1] == "ft") {
    plan.strategy = Strategy::kPruneFineTuneQuant;
    plan.bits = bits_of(parts[2]);
  } else {
    bad_plan(text);
  }
  return plan;
}

namespace {

// Fake-quantizes one tensor in place, honoring an existing mask: the grid is
// fitted over all current values (masked zeros included) and masked entries
// stay exactly zero.
void fake_quantize_tensor(nn::Var& var, model::TensorCompression& tc, int bits) {
  QuantizedTensor q = quantize_tensor(var.value, var.shape, bits);
  const auto values = dequantize(q);
  for (std::size_t i = 0; i < var.value.size(); ++i) {
    if (!tc.mask.empty() && !tc.mask[i]) continue;
    var.value[i] = values[i];
  }
  tc.bits = bits;
  tc.qmin = q.min_val;
  tc.qstep = q.step;
}

}  // namespace

void quantize_model(model::DTModel& m, int bits) {
  if (bits < 1 || bits > 8)
    throw std::invalid_argument("quantize_model: bits must be in [1,8], got " +
                                std::to_string(bits));
  for (auto* layer : m.eligible_layers()) {
    fake_quantize_tensor(*layer->weight, m.comp[layer->name + ".weight"], bits);
    if (layer->bias)
      fake_quantize_tensor(*layer->bias, m.comp[layer->name + ".bias"], bits);
  }
}

PruneMask prune_unstructured(model::DTModel& m, float p_u) {
  if (p_u < 0.0f || p_u >= 1.0f)
    throw std::invalid_argument("prune_unstructured: fraction must be in [0,1)");
  PruneMask result;
  for (auto* layer : m.eligible_layers()) {
    auto& w = layer->weight->value;
    const std::size_t n = w.size();
    const auto n_zero = static_cast<std::size_t>(p_u * static_cast<double>(n));
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&w](std::uint32_t a, std::uint32_t b) {
      const float ma = std::abs(w[a]), mb = std::abs(w[b]);
      return ma != mb ? ma < mb : a < b;
    });
    std::vector<std::uint8_t> mask(n, 1);
    for (std::size_t i = 0; i < n_zero; ++i) {
      mask[order[i]] = 0;
      w[order[i]] = 0.0f;
    }
    auto& tc = m.comp[layer->name + ".weight"];
    if (!tc.mask.empty()) {  // merge with an existing mask
      for (std::size_t i = 0; i < n; ++i) mask[i] = mask[i] && tc.mask[i];
    }
    tc.mask = mask;
    result.kept.emplace(layer->name + ".weight", std::move(mask));
  }
  return result;
}

PruneMask prune_structured(model::DTModel& m, float p_s) {
  if (p_s < 0.0f || p_s >= 1.0f)
    throw std::invalid_argument("prune_structured: fraction must be in [0,1)");
  PruneMask result;
  for (auto& block : m.blocks) {
    auto& fin = block.ffn_in;
    auto& fout = block.ffn_out;
    const int hidden = fin.weight->dim(0);
    const int in_dim = fin.weight->dim(1);
    const int out_dim = fout.weight->dim(0);
    const auto n_remove = static_cast<int>(p_s * static_cast<double>(hidden));
    if (n_remove >= hidden)
      throw std::invalid_argument("prune_structured: would remove every hidden unit");
    std::vector<int> order(static_cast<std::size_t>(hidden));
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> norms(static_cast<std::size_t>(hidden));
    for (int r = 0; r < hidden; ++r) {
      double sq = 0.0;
      const float* row = fin.weight->value.data() + static_cast<std::size_t>(r) * in_dim;
      for (int c = 0; c < in_dim; ++c) sq += static_cast<double>(row[c]) * row[c];
      norms[static_cast<std::size_t>(r)] = sq;
    }
    std::sort(order.begin(), order.end(), [&norms](int a, int b) {
      const double na = norms[static_cast<std::size_t>(a)];
      const double nb = norms[static_cast<std::size_t>(b)];
      return na != nb ? na < nb : a < b;
    });
    std::vector<int> kept(order.begin() + n_remove, order.end());
    std::sort(kept.begin(), kept.end());

    const auto new_hidden = static_cast<int>(kept.size());
    std::vector<float> w_in(static_cast<std::size_t>(new_hidden) * in_dim);
    std::vector<float> b_in(static_cast<std::size_t>(new_hidden));
    std::vector<float> w_out(static_cast<std::size_t>(out_dim) * new_hidden);
    for (int r = 0; r < new_hidden; ++r) {
      const auto src = static_cast<std::size_t>(kept[static_cast<std::size_t>(r)]);
      std::copy_n(fin.weight->value.data() + src * in_dim, in_dim,
                  w_in.data() + static_cast<std::size_t>(r) * in_dim);
      b_in[static_cast<std::size_t>(r)] = fin.bias->value[src];
    }
    for (int r = 0; r < out_dim; ++r) {
      const float* src_row =
          fout.weight->value.data() + static_cast<std::size_t>(r) * hidden;
      float* dst_row = w_out.data() + static_cast<std::size_t>(r) * new_hidden;
      for (int c = 0; c < new_hidden; ++c)
        dst_row[c] = src_row[kept[static_cast<std::size_t>(c)]];
    }

    // Shrink any existing unstructured masks alongside the tensors.
    auto shrink_mask = [&](const std::string& name, auto&& keep_fn) {
      auto it = m.comp.find(name);
      if (it == m.comp.end() || it->second.mask.empty()) return;
      it->second.mask = keep_fn(it->second.mask);
    };
    shrink_mask(fin.name + ".weight", [&](const std::vector<std::uint8_t>& old) {
      std::vector<std::uint8_t> nw(static_cast<std::size_t>(new_hidden) * in_dim);
      for (int r = 0; r < new_hidden; ++r)
        std::copy_n(old.data() +
                        static_cast<std::size_t>(kept[static_cast<std::size_t>(r)]) * in_dim,
                    in_dim, nw.data() + static_cast<std::size_t>(r) * in_dim);
      return nw;
    });
    shrink_mask(fout.name + ".weight", [&](const std::vector<std::uint8_t>& old) {
      std::vector<std::uint8_t> nw(static_cast<std::size_t>(out_dim) * new_hidden);
      for (int r = 0; r < out_dim; ++r)
        for (int c = 0; c < new_hidden; ++c)
          nw[static_cast<std::size_t>(r) * new_hidden + c] =
              old[static_cast<std::size_t>(r) * hidden +
                  static_cast<std::size_t>(kept[static_cast<std::size_t>(c)])];
      return nw;
    });

    fin.weight = nn::make_var({new_hidden, in_dim}, std::move(w_in), true);
    fin.bias = nn::make_var({new_hidden}, std::move(b_in), true);
    fout.weight = nn::make_var({out_dim, new_hidden}, std::move(w_out), true);
    result.kept_hidden.push_back(std::move(kept));
  }
  return result;
}

model::TrainResult fine_tune(model::DTModel& m, const data::Dataset& dataset,
                             float ft_fraction, std::uint64_t seed) {
  if (ft_fraction < 0.0f)
    throw std::invalid_argument("fine_tune: negative fraction");
  bool has_mask = false;
  for (const auto& [name, tc] : m.comp)
    if (!tc.mask.empty()) has_mask = true;
  if (!has_mask)
    throw std::invalid_argument("fine_tune: model carries no prune mask");
  const int steps = static_cast<int>(
      std::lround(static_cast<double>(ft_fraction) * m.cfg.train_steps));
  if (steps == 0) return {};
  return model::train_steps(m, dataset, steps, mix_seed(seed, 2026));
}

void run_pipeline(model::DTModel& m, const CompressionPlan& plan,
                  const data::Dataset* dataset) {
  using S = CompressionPlan::Strategy;
  const auto prune_both = [&] {
    prune_structured(m, plan.prune_structured_frac);
    prune_unstructured(m, plan.prune_unstructured_frac);
  };
  switch (plan.strategy) {
    case S::kFp32:
      break;
    case S::kQuant:
      quantize_model(m, plan.bits);
      break;
    case S::kPrune:
      prune_both();
      break;
    case S::kQuantThenPrune:
      quantize_model(m, plan.bits);
      prune_both();
      break;
    case S::kPruneThenQuant:
      prune_both();
      quantize_model(m, plan.bits);
      break;
    case S::kPruneFineTuneQuant:
      if (!dataset)
        throw std::invalid_argument("run_pipeline: " + plan.label() +
                                    " needs a dataset for fine-tuning");
      prune_both();
      fine_tune(m, *dataset, plan.ft_fraction);
      quantize_model(m, plan.bits);
      break;
  }
  m.strategy = plan.label();
}

double sparsity(const model::DTModel& m) {
  std::size_t zeros = 0, total = 0;
  for (const auto* layer : m.layer_list()) {
    if (layer->kind != nn::LayerKind::kLinear || !layer->compressible) continue;
    total += layer->weight->value.size();
    auto it = m.comp.find(layer->name + ".weight");
    if (it == m.comp.end() || it->second.mask.empty()) continue;
    for (auto kept : it->second.mask) zeros += kept ? 0 : 1;
  }
  return total ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0;
}

}  // namespace dtlab::compress
