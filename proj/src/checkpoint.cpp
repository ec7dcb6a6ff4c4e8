// SPDX-License-Identifier: Apache-2.0
#include "surgeon/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "surgeon/common.hpp"

namespace surgeon {

std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i)
    c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

namespace {

void put_u16(std::vector<std::uint8_t>& v, std::uint16_t x) {
  v.push_back(static_cast<std::uint8_t>(x & 0xff));
  v.push_back(static_cast<std::uint8_t>(x >> 8));
}
void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  for (int i = 0; i < 4; ++i)
    v.push_back(static_cast<std::uint8_t>((x >> (8 * i)) & 0xff));
}
void put_f32(std::vector<std::uint8_t>& v, float f) {
  put_u32(v, std::bit_cast<std::uint32_t>(f));
}

struct Reader {
  const std::vector<std::uint8_t>& b;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > b.size()) throw std::runtime_error("SRGW: truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return b[pos++];
  }
  std::uint16_t u16() {
    std::uint16_t lo = u8(), hi = u8();
    return static_cast<std::uint16_t>(lo | (hi << 8));
  }
  std::uint32_t u32() {
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return x;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
    pos += n;
    return s;
  }
};

void put_tensor(std::vector<std::uint8_t>& out, const std::string& name,
                const Tensor& t) {
  put_u16(out, static_cast<std::uint16_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(0);  // dtype f32
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) put_f32(out, t[i]);
}

// u64 values ride as four exact 16-bit chunks in a [4] f32 tensor.
Tensor u64_tensor(std::uint64_t v) {
  Tensor t({4});
  for (int i = 0; i < 4; ++i)
    t[static_cast<std::size_t>(i)] =
        static_cast<float>((v >> (16 * i)) & 0xFFFFu);
  return t;
}
std::uint64_t tensor_u64(const Tensor& t) {
  if (t.size() != 4) throw std::runtime_error("SRGW: bad u64 meta tensor");
  std::uint64_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint64_t>(
             static_cast<std::uint32_t>(t[static_cast<std::size_t>(i)]))
         << (16 * i);
  return v;
}

constexpr int kKindCode[] = {0, 1, 2, 3, 4, 5};  // mirrors LayerKind order

Tensor layer_table(const ModelState& m) {
  const std::size_t L = static_cast<std::size_t>(m.num_layers());
  Tensor t({L, 10});
  for (std::size_t i = 0; i < L; ++i) {
    const LayerSpec& s = m.layers[i];
    float* row = t.ptr() + i * 10;
    row[0] = static_cast<float>(kKindCode[static_cast<int>(s.kind)]);
    row[1] = static_cast<float>(s.in_features);
    row[2] = static_cast<float>(s.out_features);
    row[3] = static_cast<float>(s.in_ch);
    row[4] = static_cast<float>(s.out_ch);
    row[5] = static_cast<float>(s.kernel * 100 + s.stride * 10 + s.pad);
    row[6] = static_cast<float>(s.channels);
    row[7] = s.pool_mode == PoolMode::max ? 0.0f : 1.0f;
    row[8] = static_cast<float>(s.pool_k);
    row[9] = static_cast<float>(s.pool_stride);
  }
  return t;
}

std::vector<LayerSpec> parse_layer_table(const Tensor& t) {
  if (t.rank() != 2 || t.dim(1) != 10)
    throw std::runtime_error("SRGW: malformed meta.layers table");
  std::vector<LayerSpec> specs;
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    const float* row = t.ptr() + i * 10;
    LayerSpec s;
    const int kind = static_cast<int>(row[0]);
    if (kind < 0 || kind > 5)
      throw std::runtime_error("SRGW: unknown layer kind in table");
    s.kind = static_cast<LayerKind>(kind);
    s.in_features = static_cast<int>(row[1]);
    s.out_features = static_cast<int>(row[2]);
    s.in_ch = static_cast<int>(row[3]);
    s.out_ch = static_cast<int>(row[4]);
    const int ksp = static_cast<int>(row[5]);
    s.kernel = ksp / 100;
    s.stride = (ksp / 10) % 10;
    s.pad = ksp % 10;
    s.channels = static_cast<int>(row[6]);
    s.pool_mode = row[7] == 0.0f ? PoolMode::max : PoolMode::avg;
    s.pool_k = static_cast<int>(row[8]);
    s.pool_stride = static_cast<int>(row[9]);
    s.id = static_cast<int>(i);
    specs.push_back(s);
  }
  return specs;
}

std::string param_name(int id, const char* field) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "layer%03d.%s", id, field);
  return buf;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ModelState& model) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (int i = 0; i < model.num_layers(); ++i) {
    const auto& p = model.params[static_cast<std::size_t>(i)];
    if (p.weight.size()) tensors.emplace_back(param_name(i, "weight"), p.weight);
    if (p.bias.size()) tensors.emplace_back(param_name(i, "bias"), p.bias);
    if (p.running_mean.size())
      tensors.emplace_back(param_name(i, "running_mean"), p.running_mean);
    if (p.running_var.size())
      tensors.emplace_back(param_name(i, "running_var"), p.running_var);
  }
  if (model.num_layers() > 0)
    tensors.emplace_back("meta.layers", layer_table(model));
  tensors.emplace_back("meta.seed", u64_tensor(model.meta.seed));
  tensors.emplace_back("meta.fingerprint",
                       u64_tensor(model.meta.dataset_fingerprint));
  Tensor misc({4});
  misc[0] = static_cast<float>(model.meta.epochs);
  misc[1] = static_cast<float>(model.meta.classes);
  misc[2] = static_cast<float>(model.meta.in_channels);
  misc[3] = static_cast<float>(model.meta.image_hw);
  tensors.emplace_back("meta.misc", misc);
  Tensor arch({1});
  arch[0] = model.meta.arch == "cnn-small" ? 0.0f
            : model.meta.arch == "cnn-wide" ? 1.0f
                                            : 2.0f;
  tensors.emplace_back("meta.arch", arch);

  std::vector<std::uint8_t> out;
  out.push_back('S');
  out.push_back('R');
  out.push_back('G');
  out.push_back('W');
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) put_tensor(out, name, t);
  put_u32(out, crc32(out.data(), out.size()));
  return out;
}

ModelState parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || bytes[0] != 'S' || bytes[1] != 'R' ||
      bytes[2] != 'G' || bytes[3] != 'W')
    throw std::runtime_error("SRGW: bad magic");
  if (bytes.size() < 14) throw std::runtime_error("SRGW: truncated file");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  const std::uint32_t actual = crc32(bytes.data(), body);
  if (stored != actual)
    throw std::runtime_error("SRGW: CRC mismatch (file corrupt or truncated)");

  Reader r{bytes};
  r.pos = 4;
  const auto version = r.u16();
  if (version != 1)
    throw std::runtime_error("SRGW: unsupported version " +
                             std::to_string(version));
  const auto count = r.u32();
  std::map<std::string, Tensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u16();
    const std::string name = r.str(name_len);
    const auto dtype = r.u8();
    if (dtype != 0)
      throw std::runtime_error("SRGW: unsupported dtype " +
                               std::to_string(dtype));
    const auto rank = r.u8();
    std::vector<std::size_t> shape;
    for (int d = 0; d < rank; ++d) shape.push_back(r.u32());
    const std::size_t n = shape_numel(shape);
    r.need(4 * n);
    Tensor t(shape);
    for (std::size_t j = 0; j < n; ++j) t[j] = r.f32();
    tensors.emplace(name, std::move(t));
  }
  if (r.pos != body) throw std::runtime_error("SRGW: trailing bytes in body");

  ModelState m;
  auto meta_it = tensors.find("meta.layers");
  if (meta_it != tensors.end()) m.layers = parse_layer_table(meta_it->second);
  for (const auto& spec : m.layers) {
    LayerParams<float> p;
    auto grab = [&](const char* field, Tensor& into, bool required) {
      auto it = tensors.find(param_name(spec.id, field));
      if (it == tensors.end()) {
        if (required)
          throw std::runtime_error("SRGW: missing tensor " +
                                   param_name(spec.id, field));
        return;
      }
      into = it->second;
    };
    if (spec.parametric()) {
      grab("weight", p.weight, true);
      grab("bias", p.bias, true);
    }
    if (spec.kind == LayerKind::batchnorm) {
      grab("running_mean", p.running_mean, true);
      grab("running_var", p.running_var, true);
      for (std::size_t c = 0; c < p.running_var.size(); ++c)
        if (!(p.running_var[c] > 0.0f))
          throw std::runtime_error("SRGW: non-positive running variance");
    }
    m.params.push_back(std::move(p));
  }
  // Shape validation against the specs.
  for (int i = 0; i < m.num_layers(); ++i) {
    const auto& s = m.layers[static_cast<std::size_t>(i)];
    const auto& p = m.params[static_cast<std::size_t>(i)];
    if (s.kind == LayerKind::linear &&
        p.weight.shape() !=
            std::vector<std::size_t>{static_cast<std::size_t>(s.out_features),
                                     static_cast<std::size_t>(s.in_features)})
      throw std::runtime_error("SRGW: weight shape mismatch for layer " +
                               std::to_string(i));
    if (s.kind == LayerKind::conv2d &&
        p.weight.shape() !=
            std::vector<std::size_t>{static_cast<std::size_t>(s.out_ch),
                                     static_cast<std::size_t>(s.in_ch),
                                     static_cast<std::size_t>(s.kernel),
                                     static_cast<std::size_t>(s.kernel)})
      throw std::runtime_error("SRGW: weight shape mismatch for layer " +
                               std::to_string(i));
    if (s.kind == LayerKind::batchnorm &&
        p.weight.size() != static_cast<std::size_t>(s.channels))
      throw std::runtime_error("SRGW: weight shape mismatch for layer " +
                               std::to_string(i));
  }

  // Metadata tensors are optional; a bare tensor container still loads.
  if (auto it = tensors.find("meta.seed"); it != tensors.end())
    m.meta.seed = tensor_u64(it->second);
  if (auto it = tensors.find("meta.fingerprint"); it != tensors.end())
    m.meta.dataset_fingerprint = tensor_u64(it->second);
  if (auto it = tensors.find("meta.misc"); it != tensors.end()) {
    const Tensor& misc = it->second;
    if (misc.size() != 4) throw std::runtime_error("SRGW: bad meta.misc");
    m.meta.epochs = static_cast<std::uint32_t>(misc[0]);
    m.meta.classes = static_cast<int>(misc[1]);
    m.meta.in_channels = static_cast<int>(misc[2]);
    m.meta.image_hw = static_cast<int>(misc[3]);
  }
  if (auto it = tensors.find("meta.arch"); it != tensors.end())
    m.meta.arch = it->second[0] == 0.0f ? "cnn-small"
                  : it->second[0] == 1.0f ? "cnn-wide"
                                          : "custom";
  return m;
}

void save_checkpoint(const ModelState& model, const std::string& path) {
  auto bytes = serialize_checkpoint(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace surgeon
