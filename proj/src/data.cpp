// SPDX-License-Identifier: Apache-2.0
#include "surgeon/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "surgeon/common.hpp"
#include "surgeon/rng.hpp"

namespace surgeon {

namespace {

void put_u16(std::vector<std::uint8_t>& v, std::uint16_t x) {
  v.push_back(static_cast<std::uint8_t>(x & 0xff));
  v.push_back(static_cast<std::uint8_t>(x >> 8));
}
void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  for (int i = 0; i < 4; ++i)
    v.push_back(static_cast<std::uint8_t>((x >> (8 * i)) & 0xff));
}

struct ByteReader {
  const std::vector<std::uint8_t>& b;
  std::size_t pos = 0;
  std::uint8_t u8() {
    if (pos + 1 > b.size()) throw std::runtime_error("SRGD: truncated file");
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
};

float byte_to_pixel(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }
std::uint8_t pixel_to_byte(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// Glyph painters. Coordinates are pixels; S is the short image side.
// Each returns foreground membership for (y, x).
struct GlyphParams {
  int period = 8, phase = 0, phase2 = 0;
  int cy = 0, cx = 0;
  int r_outer = 0, r_inner = 0, width = 0, half = 0;
};

bool glyph_fg(int cls, int y, int x, int S, const GlyphParams& g) {
  const int dy = y - g.cy, dx = x - g.cx;
  const int d2 = dy * dy + dx * dx;
  switch (cls) {
    case 0: return ((y + g.phase) % g.period) < g.period / 2;
    case 1: return ((x + g.phase) % g.period) < g.period / 2;
    case 2: return std::abs(dy) < g.width || std::abs(dx) < g.width;
    case 3: return d2 >= g.r_inner * g.r_inner && d2 < g.r_outer * g.r_outer;
    case 4:
      return (((y + g.phase) / g.period + (x + g.phase2) / g.period) % 2) == 0;
    case 5: return ((x + y + g.phase) % g.period) < g.period / 2;
    case 6: return d2 < g.r_outer * g.r_outer;
    case 7:
      return std::abs(dy - dx) < g.width || std::abs(dy + dx) < g.width;
    case 8: return y < g.cy;
    case 9: return x < g.cx;
    case 10: return std::abs(dy) < g.half && std::abs(dx) < g.half;
    case 11: {
      const int m = std::max(std::abs(dy), std::abs(dx));
      return m >= g.r_inner && m < g.r_outer;
    }
    case 12: return ((x - y + g.phase + 4 * S) % g.period) < g.period / 2;
    case 13: {
      const int q = S / 4;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          const int yy = y - (q + 2 * q * a + g.phase);
          const int xx = x - (q + 2 * q * b + g.phase2);
          if (yy * yy + xx * xx < g.r_inner * g.r_inner) return true;
        }
      return false;
    }
    case 14: return std::abs(dy) < g.width * 2;
    case 15: return std::abs(dx) < g.width * 2;
  }
  return false;
}

}  // namespace

const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::gauss_noise: return "gauss-noise";
    case CorruptionKind::contrast: return "contrast";
    case CorruptionKind::box_blur: return "box-blur";
    case CorruptionKind::pixelate: return "pixelate";
  }
  return "?";
}

CorruptionKind corruption_from_name(const std::string& name) {
  if (name == "gauss-noise") return CorruptionKind::gauss_noise;
  if (name == "contrast") return CorruptionKind::contrast;
  if (name == "box-blur") return CorruptionKind::box_blur;
  if (name == "pixelate") return CorruptionKind::pixelate;
  throw ConfigError("unknown corruption kind: " + name);
}

std::uint64_t Dataset::fingerprint() const {
  auto bytes = serialize_srgd(*this);
  return fnv1a64(bytes.data(), bytes.size());
}

Dataset generate_clean(int n, int classes, int image_size, std::uint64_t seed,
                       int channels) {
  if (classes < 1 || classes > 16)
    throw std::invalid_argument("generate_clean: classes must be in 1..16");
  if (image_size < 16)
    throw std::invalid_argument("generate_clean: image size must be >= 16");
  if (channels < 1 || channels > 4)
    throw std::invalid_argument("generate_clean: channels must be in 1..4");

  Dataset d;
  d.classes = classes;
  d.channels = channels;
  d.height = image_size;
  d.width = image_size;
  d.samples.reserve(static_cast<std::size_t>(n));

  const int H = image_size, W = image_size, S = image_size;
  constexpr float kBg = 0.15f, kFg = 0.85f;

  for (int i = 0; i < n; ++i) {
    const int cls = i % classes;
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(i));

    GlyphParams g;
    g.period = std::max(4, S / 4);
    g.phase = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(g.period)));
    g.phase2 = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(g.period)));
    const int jit = S / 8;
    g.cy = S / 2 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(2 * jit + 1))) - jit;
    g.cx = S / 2 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(2 * jit + 1))) - jit;
    g.r_outer = S / 3 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(std::max(1, S / 12))));
    g.r_inner = S / 6;
    g.width = std::max(2, S / 10);
    g.half = S / 4 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(std::max(1, S / 12))));

    Sample s;
    s.label = cls;
    s.image = Tensor({static_cast<std::size_t>(channels),
                      static_cast<std::size_t>(H),
                      static_cast<std::size_t>(W)});
    std::vector<float> lum(static_cast<std::size_t>(H * W));
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const bool fg = glyph_fg(cls, y, x, S, g);
        float v = (fg ? kFg : kBg) +
                  static_cast<float>(rng.uniform(-0.03, 0.03));
        lum[static_cast<std::size_t>(y * W + x)] =
            std::min(1.0f, std::max(0.0f, v));
      }
    for (int c = 0; c < channels; ++c)
      std::copy(lum.begin(), lum.end(),
                s.image.ptr() + static_cast<std::size_t>(c * H * W));
    d.samples.push_back(std::move(s));
  }
  return d;
}

Sample corrupt(const Sample& s, const CorruptionSpec& spec,
               std::uint64_t sample_index) {
  if (spec.severity < 0 || spec.severity > 5)
    throw std::invalid_argument("corrupt: severity outside 0..5");
  if (spec.severity == 0) return s;  // identity limit for every kind
  const auto& shp = s.image.shape();
  const int C = static_cast<int>(shp[0]);
  const int H = static_cast<int>(shp[1]);
  const int W = static_cast<int>(shp[2]);
  Sample out;
  out.label = s.label;
  out.image = Tensor(s.image.shape());
  const float* in = s.image.ptr();
  float* o = out.image.ptr();
  const int sev = spec.severity;

  switch (spec.kind) {
    case CorruptionKind::gauss_noise: {
      const double sigma = 0.04 * sev;
      Rng rng = Rng::derive(spec.seed, sample_index);
      for (std::size_t i = 0; i < s.image.size(); ++i) {
        const float v =
            in[i] + static_cast<float>(sigma * rng.normal());
        o[i] = std::min(1.0f, std::max(0.0f, v));
      }
      break;
    }
    case CorruptionKind::contrast: {
      const float c = 1.0f - 0.15f * static_cast<float>(sev);
      for (std::size_t i = 0; i < s.image.size(); ++i)
        o[i] = std::min(1.0f, std::max(0.0f, 0.5f + c * (in[i] - 0.5f)));
      break;
    }
    case CorruptionKind::box_blur: {
      int k = std::max(1, 2 * sev - 1);
      k = std::min(k, std::min(H, W));
      const int r = k / 2;
      for (int c = 0; c < C; ++c) {
        const float* plane = in + static_cast<std::size_t>(c * H * W);
        float* oplane = o + static_cast<std::size_t>(c * H * W);
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            float acc = 0.0f;
            int cnt = 0;
            for (int yy = std::max(0, y - r); yy <= std::min(H - 1, y + r); ++yy)
              for (int xx = std::max(0, x - r); xx <= std::min(W - 1, x + r); ++xx) {
                acc += plane[yy * W + xx];
                ++cnt;
              }
            oplane[y * W + x] = acc / static_cast<float>(cnt);
          }
      }
      break;
    }
    case CorruptionKind::pixelate: {
      const int f = std::max(1, sev);
      for (int c = 0; c < C; ++c) {
        const float* plane = in + static_cast<std::size_t>(c * H * W);
        float* oplane = o + static_cast<std::size_t>(c * H * W);
        for (int by = 0; by < H; by += f)
          for (int bx = 0; bx < W; bx += f) {
            float acc = 0.0f;
            int cnt = 0;
            for (int y = by; y < std::min(H, by + f); ++y)
              for (int x = bx; x < std::min(W, bx + f); ++x) {
                acc += plane[y * W + x];
                ++cnt;
              }
            const float v = acc / static_cast<float>(cnt);
            for (int y = by; y < std::min(H, by + f); ++y)
              for (int x = bx; x < std::min(W, bx + f); ++x)
                oplane[y * W + x] = v;
          }
      }
      break;
    }
  }
  return out;
}

std::vector<int> Stream::all_labels() const {
  std::vector<int> out;
  for (const auto& b : batches)
    out.insert(out.end(), b.labels.begin(), b.labels.end());
  return out;
}

int Stream::total_samples() const {
  int n = 0;
  for (const auto& b : batches) n += static_cast<int>(b.labels.size());
  return n;
}

Stream build_stream(const Dataset& clean_test, const StreamSpec& spec) {
  if (spec.batch_size < 1)
    throw std::invalid_argument("build_stream: batch size must be positive");
  Stream stream;
  stream.batch_size = spec.batch_size;
  const int n = clean_test.size();
  std::uint64_t global_index = 0;
  int batch_cursor = 0, sample_cursor = 0;

  for (std::size_t si = 0; si < spec.segments.size(); ++si) {
    const auto& seg = spec.segments[si];
    if (seg.count % spec.batch_size != 0)
      throw std::invalid_argument(
          "build_stream: segment count " + std::to_string(seg.count) +
          " not divisible by batch size " + std::to_string(spec.batch_size));
    if (seg.count > n)
      throw std::invalid_argument(
          "build_stream: segment needs " + std::to_string(seg.count) +
          " samples but the clean set has " + std::to_string(n));

    stream.segment_start_batch.push_back(batch_cursor);
    stream.segment_start_sample.push_back(sample_cursor);
    stream.segment_specs.push_back(seg.corruption);

    // Seeded subset, presented in ascending dataset order.
    Rng rng = Rng::derive(seg.corruption.seed, 0x73747265616dULL + si);
    auto perm = rng.permutation(static_cast<std::uint32_t>(n));
    std::vector<std::uint32_t> pick(perm.begin(), perm.begin() + seg.count);
    std::sort(pick.begin(), pick.end());

    const int C = clean_test.channels, H = clean_test.height,
              W = clean_test.width;
    for (int off = 0; off < seg.count; off += spec.batch_size) {
      Batch b;
      b.segment = static_cast<int>(si);
      b.images = Tensor({static_cast<std::size_t>(spec.batch_size),
                         static_cast<std::size_t>(C),
                         static_cast<std::size_t>(H),
                         static_cast<std::size_t>(W)});
      for (int j = 0; j < spec.batch_size; ++j) {
        const auto& src = clean_test.samples[pick[off + j]];
        Sample cs = corrupt(src, seg.corruption, global_index++);
        std::copy(cs.image.ptr(), cs.image.ptr() + cs.image.size(),
                  b.images.ptr() + static_cast<std::size_t>(j) * cs.image.size());
        b.labels.push_back(cs.label);
      }
      stream.batches.push_back(std::move(b));
      ++batch_cursor;
      sample_cursor += spec.batch_size;
    }
  }
  return stream;
}

std::vector<std::uint8_t> serialize_srgd(const Dataset& d) {
  std::vector<std::uint8_t> out;
  out.push_back('S');
  out.push_back('R');
  out.push_back('G');
  out.push_back('D');
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(d.samples.size()));
  put_u16(out, static_cast<std::uint16_t>(d.height));
  put_u16(out, static_cast<std::uint16_t>(d.width));
  put_u16(out, static_cast<std::uint16_t>(d.channels));
  put_u16(out, static_cast<std::uint16_t>(d.classes));
  for (const auto& s : d.samples) {
    out.push_back(static_cast<std::uint8_t>(s.label));
    for (std::size_t i = 0; i < s.image.size(); ++i)
      out.push_back(pixel_to_byte(s.image[i]));
  }
  return out;
}

Dataset parse_srgd(const std::vector<std::uint8_t>& bytes) {
  ByteReader r{bytes};
  if (bytes.size() < 4 || bytes[0] != 'S' || bytes[1] != 'R' ||
      bytes[2] != 'G' || bytes[3] != 'D')
    throw std::runtime_error("SRGD: bad magic");
  r.pos = 4;
  const auto version = r.u16();
  if (version != 1)
    throw std::runtime_error("SRGD: unsupported version " +
                             std::to_string(version));
  Dataset d;
  const auto count = r.u32();
  d.height = r.u16();
  d.width = r.u16();
  d.channels = r.u16();
  d.classes = r.u16();
  if (d.height == 0 || d.width == 0 || d.channels == 0 || d.classes == 0)
    throw std::runtime_error("SRGD: zero dimension in header");
  const std::size_t pix =
      static_cast<std::size_t>(d.height) * d.width * d.channels;
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    s.label = r.u8();
    if (s.label >= d.classes)
      throw std::runtime_error("SRGD: label out of range");
    if (r.pos + pix > bytes.size())
      throw std::runtime_error("SRGD: truncated file");
    s.image = Tensor({static_cast<std::size_t>(d.channels),
                      static_cast<std::size_t>(d.height),
                      static_cast<std::size_t>(d.width)});
    for (std::size_t j = 0; j < pix; ++j)
      s.image[j] = byte_to_pixel(bytes[r.pos + j]);
    r.pos += pix;
    d.samples.push_back(std::move(s));
  }
  if (r.pos != bytes.size())
    throw std::runtime_error("SRGD: trailing bytes after samples");
  return d;
}

void save_srgd(const Dataset& d, const std::string& path) {
  auto bytes = serialize_srgd(d);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

Dataset load_srgd(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return parse_srgd(bytes);
}

std::vector<StreamSegmentSpec> parse_stream_manifest(const std::string& text) {
  std::vector<StreamSegmentSpec> segs;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string kind;
    if (!(ls >> kind)) continue;  // blank
    StreamSegmentSpec seg;
    seg.corruption.kind = corruption_from_name(kind);
    long long sev = 0, count = 0;
    unsigned long long seed = 0;
    if (!(ls >> sev >> count >> seed))
      throw ConfigError("manifest line " + std::to_string(lineno) +
                        ": expected `kind severity count seed`");
    std::string extra;
    if (ls >> extra)
      throw ConfigError("manifest line " + std::to_string(lineno) +
                        ": unexpected token `" + extra + "`");
    if (sev < 0 || sev > 5)
      throw ConfigError("manifest line " + std::to_string(lineno) +
                        ": severity outside 0..5");
    if (count <= 0)
      throw ConfigError("manifest line " + std::to_string(lineno) +
                        ": count must be positive");
    seg.corruption.severity = static_cast<int>(sev);
    seg.corruption.seed = seed;
    seg.count = static_cast<int>(count);
    segs.push_back(seg);
  }
  if (segs.empty()) throw ConfigError("manifest has no segments");
  return segs;
}

std::vector<StreamSegmentSpec> load_stream_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open manifest " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_stream_manifest(ss.str());
}

std::string format_stream_manifest(const std::vector<StreamSegmentSpec>& segs) {
  std::ostringstream os;
  for (const auto& s : segs)
    os << corruption_name(s.corruption.kind) << ' ' << s.corruption.severity
       << ' ' << s.count << ' ' << s.corruption.seed << '\n';
  return os.str();
}

Dataset load_cifar_bin(const std::string& path, int classes) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  if (bytes.empty() || bytes.size() % kRecord != 0)
    throw std::runtime_error(
        "CIFAR binary: size is not a multiple of 3073 bytes");
  Dataset d;
  d.classes = classes;
  d.channels = 3;
  d.height = 32;
  d.width = 32;
  const std::size_t n = bytes.size() / kRecord;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kRecord;
    if (rec[0] >= classes)
      throw std::runtime_error("CIFAR binary: label out of range");
    Sample s;
    s.label = rec[0];
    s.image = Tensor({3, 32, 32});
    for (std::size_t j = 0; j < 3 * 32 * 32; ++j)
      s.image[j] = byte_to_pixel(rec[1 + j]);
    d.samples.push_back(std::move(s));
  }
  return d;
}

Batch make_batch(const Dataset& d, const std::vector<std::uint32_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index set");
  Batch b;
  b.images = Tensor({indices.size(), static_cast<std::size_t>(d.channels),
                     static_cast<std::size_t>(d.height),
                     static_cast<std::size_t>(d.width)});
  const std::size_t row = b.images.size() / indices.size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& s = d.samples.at(indices[i]);
    std::copy(s.image.ptr(), s.image.ptr() + row, b.images.ptr() + i * row);
    b.labels.push_back(s.label);
  }
  return b;
}

StreamSpec default_benchmark_stream(std::uint64_t seed, int samples_per_segment,
                                    int batch_size) {
  StreamSpec spec;
  spec.batch_size = batch_size;
  const CorruptionKind kinds[] = {CorruptionKind::gauss_noise,
                                  CorruptionKind::contrast,
                                  CorruptionKind::box_blur,
                                  CorruptionKind::pixelate};
  for (std::size_t i = 0; i < 4; ++i) {
    StreamSegmentSpec seg;
    seg.corruption.kind = kinds[i];
    seg.corruption.severity = 5;
    seg.corruption.seed = seed + i;
    seg.count = samples_per_segment;
    spec.segments.push_back(seg);
  }
  return spec;
}

}  // namespace surgeon
