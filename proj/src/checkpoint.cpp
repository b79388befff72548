#include "dtlab/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "dtlab/compress.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace dtlab::ckpt {

namespace {

constexpr char kMagic[4] = {'D', 'T', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

struct Writer {
  std::vector<std::uint8_t> bytes;

  template <typename T>
  void put(T v) {
    const auto old = bytes.size();
    bytes.resize(old + sizeof(T));
    std::memcpy(bytes.data() + old, &v, sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto old = bytes.size();
    bytes.resize(old + n);
    std::memcpy(bytes.data() + old, data, n);
  }
  void put_string(const std::string& s) {
    if (s.size() > 0xffff) throw std::invalid_argument("string too long");
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
};

struct Reader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;
  std::string context = "header";

  template <typename T>
  T get() {
    if (pos + sizeof(T) > size)
      throw std::runtime_error("checkpoint truncated in " + context);
    T v;
    std::memcpy(&v, data + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::vector<std::uint8_t> get_bytes(std::size_t n) {
    if (pos + n > size)
      throw std::runtime_error("checkpoint truncated in " + context);
    std::vector<std::uint8_t> out(data + pos, data + pos + n);
    pos += n;
    return out;
  }
  std::string get_string() {
    const auto n = get<std::uint16_t>();
    if (pos + n > size)
      throw std::runtime_error("checkpoint truncated in " + context);
    std::string s(reinterpret_cast<const char*>(data + pos), n);
    pos += n;
    return s;
  }
};

std::size_t mask_kept_count(const std::vector<std::uint8_t>& mask) {
  std::size_t kept = 0;
  for (auto m : mask) kept += m ? 1 : 0;
  return kept;
}

std::uint64_t payload_size(Encoding enc, std::size_t numel, int bits,
                           std::size_t kept) {
  switch (enc) {
    case Encoding::kF32:
      return 4 * static_cast<std::uint64_t>(numel);
    case Encoding::kQuant:
      return 8 + (static_cast<std::uint64_t>(numel) * bits + 7) / 8;
    case Encoding::kSparseF32:
      return (numel + 7) / 8 + 4 * static_cast<std::uint64_t>(kept);
    case Encoding::kSparseQuant:
      return (numel + 7) / 8 + 8 + (static_cast<std::uint64_t>(kept) * bits + 7) / 8;
  }
  return 0;
}

// Codes recovered from fake-quantized values; exact because the values sit on
// the stored grid.
std::vector<std::uint32_t> codes_for(const std::vector<float>& values,
                                     const model::TensorCompression& tc,
                                     const std::vector<std::uint8_t>* mask) {
  std::vector<std::uint32_t> codes;
  codes.reserve(values.size());
  const auto levels = static_cast<float>((1u << tc.bits) - 1u);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    std::uint32_t c = 0;
    if (tc.qstep > 0.0f) {
      const float r = std::round((values[i] - tc.qmin) / tc.qstep);
      c = static_cast<std::uint32_t>(std::clamp(r, 0.0f, levels));
    }
    codes.push_back(c);
  }
  return codes;
}

void write_tensor(Writer& w, const std::string& name, const nn::Var& var,
                  const model::TensorCompression* tc, SizeReport* report) {
  const auto numel = var.value.size();
  const bool quantized = tc && tc->bits > 0;
  const bool masked = tc && !tc->mask.empty();
  const std::size_t kept = masked ? mask_kept_count(tc->mask) : numel;

  // Smallest lossless candidate wins; dense quant codes cannot represent the
  // exact zeros of a masked tensor, so it is only offered unmasked.
  Encoding enc = Encoding::kF32;
  std::uint64_t best = payload_size(Encoding::kF32, numel, 0, kept);
  auto consider = [&](Encoding cand, int bits) {
    const auto sz = payload_size(cand, numel, bits, kept);
    if (sz < best) {
      best = sz;
      enc = cand;
    }
  };
  if (quantized && !masked) consider(Encoding::kQuant, tc->bits);
  if (masked) consider(Encoding::kSparseF32, 0);
  if (masked && quantized) consider(Encoding::kSparseQuant, tc->bits);

  w.put_string(name);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(enc));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(
      enc == Encoding::kQuant || enc == Encoding::kSparseQuant ? tc->bits : 0));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(var.shape.size()));
  for (int d : var.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));

  const auto payload_start = w.bytes.size();
  switch (enc) {
    case Encoding::kF32:
      w.put_bytes(var.value.data(), 4 * numel);
      break;
    case Encoding::kQuant: {
      w.put<float>(tc->qmin);
      w.put<float>(tc->qstep);
      const auto codes = codes_for(var.value, *tc, nullptr);
      std::vector<std::uint8_t> packed;
      compress::pack_bits(codes, tc->bits, packed);
      w.put_bytes(packed.data(), packed.size());
      break;
    }
    case Encoding::kSparseF32:
    case Encoding::kSparseQuant: {
      std::vector<std::uint32_t> bits(numel);
      for (std::size_t i = 0; i < numel; ++i) bits[i] = tc->mask[i] ? 1 : 0;
      std::vector<std::uint8_t> bitmap;
      compress::pack_bits(bits, 1, bitmap);
      w.put_bytes(bitmap.data(), bitmap.size());
      if (enc == Encoding::kSparseF32) {
        for (std::size_t i = 0; i < numel; ++i)
          if (tc->mask[i]) w.put<float>(var.value[i]);
      } else {
        w.put<float>(tc->qmin);
        w.put<float>(tc->qstep);
        const auto codes = codes_for(var.value, *tc, &tc->mask);
        std::vector<std::uint8_t> packed;
        compress::pack_bits(codes, tc->bits, packed);
        w.put_bytes(packed.data(), packed.size());
      }
      break;
    }
  }
  if (report)
    report->tensors.push_back({name, enc, w.bytes.size() - payload_start});
}

}  // namespace

const char* encoding_name(Encoding e) {
  switch (e) {
    case Encoding::kF32: return "f32";
    case Encoding::kQuant: return "quant";
    case Encoding::kSparseF32: return "sparse_f32";
    case Encoding::kSparseQuant: return "sparse_quant";
  }
  return "?";
}

std::vector<std::uint8_t> serialize(const model::DTModel& m, SizeReport* report) {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint16_t>(kVersion);

  Writer cfg;
  const auto& c = m.cfg;
  for (int v : {c.context_len, c.embed_dim, c.layers, c.heads, c.state_dim,
                c.act_dim, c.max_timestep, c.train_steps, c.batch_size})
    cfg.put<std::int32_t>(v);
  for (float v : {c.dropout, c.lr, c.weight_decay, c.grad_clip}) cfg.put<float>(v);
  for (float v : m.norm.mean) cfg.put<float>(v);
  for (float v : m.norm.std) cfg.put<float>(v);
  cfg.put<float>(m.train_max_return);
  cfg.put_string(m.strategy);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.bytes.size()));
  w.put_bytes(cfg.bytes.data(), cfg.bytes.size());

  const auto layer_ptrs = m.layer_list();
  std::uint32_t tensor_count = 0;
  for (const auto* l : layer_ptrs) tensor_count += l->bias ? 2 : 1;
  w.put<std::uint32_t>(tensor_count);
  for (const auto* l : layer_ptrs) {
    const auto find_tc = [&m](const std::string& name) -> const model::TensorCompression* {
      auto it = m.comp.find(name);
      return it == m.comp.end() ? nullptr : &it->second;
    };
    write_tensor(w, l->name + ".weight", *l->weight, find_tc(l->name + ".weight"),
                 report);
    if (l->bias)
      write_tensor(w, l->name + ".bias", *l->bias, find_tc(l->name + ".bias"),
                   report);
  }
  if (report) report->total_bytes = w.bytes.size();
  return w.bytes;
}

SizeReport save(const model::DTModel& m, const std::filesystem::path& path) {
  SizeReport report;
  const auto bytes = serialize(m, &report);
  report.baseline_bytes = baseline_file_bytes(m.cfg);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save: cannot open '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("save: write failed for '" + path.string() + "'");
  return report;
}

model::DTModel load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load: cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  Reader r{bytes.data(), bytes.size()};

  const auto magic = r.get_bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw std::runtime_error("load: bad magic in '" + path.string() + "'");
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion)
    throw std::runtime_error("load: unsupported checkpoint version " +
                             std::to_string(version));

  r.context = "config block";
  const auto cfg_len = r.get<std::uint32_t>();
  const auto cfg_end = r.pos + cfg_len;
  model::DTConfig cfg;
  cfg.context_len = r.get<std::int32_t>();
  cfg.embed_dim = r.get<std::int32_t>();
  cfg.layers = r.get<std::int32_t>();
  cfg.heads = r.get<std::int32_t>();
  cfg.state_dim = r.get<std::int32_t>();
  cfg.act_dim = r.get<std::int32_t>();
  cfg.max_timestep = r.get<std::int32_t>();
  cfg.train_steps = r.get<std::int32_t>();
  cfg.batch_size = r.get<std::int32_t>();
  cfg.dropout = r.get<float>();
  cfg.lr = r.get<float>();
  cfg.weight_decay = r.get<float>();
  cfg.grad_clip = r.get<float>();
  if (cfg.state_dim != data::kStateDim)
    throw std::runtime_error("load: unexpected state_dim " +
                             std::to_string(cfg.state_dim));
  data::NormStats norm;
  for (auto& v : norm.mean) v = r.get<float>();
  for (auto& v : norm.std) v = r.get<float>();
  const float max_return = r.get<float>();
  const std::string strategy = r.get_string();
  if (r.pos != cfg_end)
    throw std::runtime_error("load: config block length mismatch");

  auto m = model::build_model(cfg, 0);
  m.norm = norm;
  m.train_max_return = max_return;
  m.strategy = strategy;

  const auto tensor_count = r.get<std::uint32_t>();
  auto layer_ptrs = m.layer_list();
  std::vector<std::pair<std::string, nn::LayerParams*>> expected;
  for (auto* l : layer_ptrs) {
    expected.emplace_back(l->name + ".weight", l);
    if (l->bias) expected.emplace_back(l->name + ".bias", l);
  }
  if (tensor_count != expected.size())
    throw std::runtime_error("load: expected " + std::to_string(expected.size()) +
                             " tensors, file has " + std::to_string(tensor_count));

  for (auto& [expected_name, layer] : expected) {
    r.context = expected_name;
    const auto name = r.get_string();
    if (name != expected_name)
      throw std::runtime_error("load: tensor '" + name + "' where '" +
                               expected_name + "' was expected");
    const auto tag = r.get<std::uint8_t>();
    if (tag > 3)
      throw std::runtime_error("load: bad encoding tag for '" + name + "'");
    const auto enc = static_cast<Encoding>(tag);
    const int bits = r.get<std::uint8_t>();
    const int ndim = r.get<std::uint8_t>();
    std::vector<int> shape(static_cast<std::size_t>(ndim));
    for (auto& d : shape) d = static_cast<int>(r.get<std::uint32_t>());
    const auto numel = static_cast<std::size_t>(nn::shape_numel(shape));

    std::vector<float> values(numel);
    model::TensorCompression tc;
    switch (enc) {
      case Encoding::kF32: {
        const auto raw = r.get_bytes(4 * numel);
        std::memcpy(values.data(), raw.data(), raw.size());
        break;
      }
      case Encoding::kQuant: {
        compress::QuantizedTensor q;
        q.shape = shape;
        q.bits = bits;
        q.min_val = r.get<float>();
        q.step = r.get<float>();
        q.codes = r.get_bytes((numel * static_cast<std::size_t>(bits) + 7) / 8);
        values = compress::dequantize(q);
        tc.bits = bits;
        tc.qmin = q.min_val;
        tc.qstep = q.step;
        break;
      }
      case Encoding::kSparseF32:
      case Encoding::kSparseQuant: {
        const auto bitmap = r.get_bytes((numel + 7) / 8);
        const auto flags = compress::unpack_bits(bitmap, numel, 1);
        tc.mask.resize(numel);
        std::size_t kept = 0;
        for (std::size_t i = 0; i < numel; ++i) {
          tc.mask[i] = static_cast<std::uint8_t>(flags[i]);
          kept += flags[i];
        }
        if (enc == Encoding::kSparseF32) {
          const auto raw = r.get_bytes(4 * kept);
          std::size_t k = 0;
          for (std::size_t i = 0; i < numel; ++i) {
            if (!tc.mask[i]) continue;
            std::memcpy(&values[i], raw.data() + 4 * k, 4);
            ++k;
          }
        } else {
          tc.bits = bits;
          tc.qmin = r.get<float>();
          tc.qstep = r.get<float>();
          const auto packed =
              r.get_bytes((kept * static_cast<std::size_t>(bits) + 7) / 8);
          const auto codes = compress::unpack_bits(packed, kept, bits);
          std::size_t k = 0;
          for (std::size_t i = 0; i < numel; ++i) {
            if (!tc.mask[i]) continue;
            values[i] = tc.qmin + static_cast<float>(codes[k]) * tc.qstep;
            ++k;
          }
        }
        break;
      }
    }
    auto var = nn::make_var(shape, std::move(values), true);
    const bool is_bias = expected_name.ends_with(".bias");
    if (is_bias)
      layer->bias = var;
    else
      layer->weight = var;
    if (tc.bits > 0 || !tc.mask.empty()) m.comp[expected_name] = std::move(tc);
  }
  if (r.pos != r.size)
    throw std::runtime_error("load: " + std::to_string(r.size - r.pos) +
                             " trailing bytes");
  return m;
}

SizeReport size_report(const model::DTModel& m) {
  SizeReport report;
  serialize(m, &report);
  report.baseline_bytes = baseline_file_bytes(m.cfg);
  return report;
}

std::uint64_t baseline_file_bytes(const model::DTConfig& cfg) {
  auto fresh = model::build_model(cfg, 0);
  return serialize(fresh).size();
}

}  // namespace dtlab::ckpt
