// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "surgeon/tensor.hpp"

namespace surgeon {

// One image/label pair; pixels in [0, 1], image layout [C, H, W].
struct Sample {
  Tensor image;
  int label = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  int classes = 0, channels = 0, height = 0, width = 0;

  int size() const { return static_cast<int>(samples.size()); }
  std::uint64_t fingerprint() const;
};

enum class CorruptionKind { gauss_noise, contrast, box_blur, pixelate };

const char* corruption_name(CorruptionKind k);
CorruptionKind corruption_from_name(const std::string& name);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gauss_noise;
  int severity = 5;  // 1..5; 0 is the identity limit
  std::uint64_t seed = 0;
};

struct StreamSegmentSpec {
  CorruptionSpec corruption;
  int count = 0;
};

struct StreamSpec {
  std::vector<StreamSegmentSpec> segments;
  int batch_size = 20;
};

struct Batch {
  Tensor images;  // [B, C, H, W]
  std::vector<int> labels;
  int segment = 0;
};

struct Stream {
  std::vector<Batch> batches;
  std::vector<int> segment_start_batch;   // first batch index per segment
  std::vector<int> segment_start_sample;  // first sample offset per segment
  std::vector<CorruptionSpec> segment_specs;
  int batch_size = 0;

  std::vector<int> all_labels() const;
  int total_samples() const;
};

// Procedural glyph classification set: each class is a fixed geometric
// pattern with seeded position/phase jitter. Deterministic per seed.
Dataset generate_clean(int n, int classes, int image_size, std::uint64_t seed,
                       int channels = 1);

// Label-preserving corruption; the noise stream is derived from the spec
// seed mixed with the sample index.
Sample corrupt(const Sample& s, const CorruptionSpec& spec,
               std::uint64_t sample_index);

// Per segment: a seeded draw without replacement from the clean set, in
// ascending dataset order, corrupted and batched. Counts must divide by the
// batch size.
Stream build_stream(const Dataset& clean_test, const StreamSpec& spec);

// SRGD container (little-endian): magic "SRGD", version u16 = 1, count u32,
// H u16, W u16, C u16, K u16; per sample a label byte plus H*W*C pixel
// bytes, pixel = round(value * 255), written in [C, H, W] tensor order.
std::vector<std::uint8_t> serialize_srgd(const Dataset& d);
Dataset parse_srgd(const std::vector<std::uint8_t>& bytes);
void save_srgd(const Dataset& d, const std::string& path);
Dataset load_srgd(const std::string& path);

// Stream manifests: one `kind severity count seed` line per segment;
// blank lines and '#' comments ignored.
std::vector<StreamSegmentSpec> parse_stream_manifest(const std::string& text);
std::vector<StreamSegmentSpec> load_stream_manifest(const std::string& path);
std::string format_stream_manifest(const std::vector<StreamSegmentSpec>& segs);

// CIFAR-style binary records: label byte + 3072 pixel bytes (3x32x32,
// plane-major RGB).
Dataset load_cifar_bin(const std::string& path, int classes = 10);

// Default desk-scale benchmark: 4 corruption kinds at severity 5.
StreamSpec default_benchmark_stream(std::uint64_t seed, int samples_per_segment = 400,
                                    int batch_size = 20);

// Stack the given samples into a [B, C, H, W] batch.
Batch make_batch(const Dataset& d, const std::vector<std::uint32_t>& indices);

}  // namespace surgeon
