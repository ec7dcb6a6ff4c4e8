// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "surgeon/layers.hpp"
#include "surgeon/rng.hpp"
#include "surgeon/tensor.hpp"

namespace surgeon {

struct ModelMeta {
  std::string arch = "custom";
  std::uint64_t seed = 0;
  std::uint32_t epochs = 0;
  std::uint64_t dataset_fingerprint = 0;
  int classes = 0;
  int in_channels = 0;
  int image_hw = 0;
};

// An ordered chain of layers plus their parameters. A value type: adaptation
// mutates a private copy, snapshots are cheap to share.
template <typename T>
struct ModelStateT {
  std::vector<LayerSpec> layers;
  std::vector<LayerParams<T>> params;
  ModelMeta meta;

  int num_layers() const { return static_cast<int>(layers.size()); }

  std::vector<int> prunable_layer_ids() const {
    std::vector<int> ids;
    for (const auto& l : layers)
      if (l.prunable()) ids.push_back(l.id);
    return ids;
  }

  const LayerSpec& spec_by_id(int id) const {
    for (const auto& l : layers)
      if (l.id == id) return l;
    throw std::invalid_argument("no layer with id " + std::to_string(id));
  }

  // Layers are assembled in chain order with id == position.
  LayerParams<T>& params_by_id(int id) {
    if (id < 0 || id >= num_layers() || layers[static_cast<std::size_t>(id)].id != id)
      throw std::invalid_argument("no layer with id " + std::to_string(id));
    return params[static_cast<std::size_t>(id)];
  }
  const LayerParams<T>& params_by_id(int id) const {
    return const_cast<ModelStateT*>(this)->params_by_id(id);
  }

  template <typename U>
  ModelStateT<U> cast() const {
    ModelStateT<U> m;
    m.layers = layers;
    m.meta = meta;
    m.params.reserve(params.size());
    for (const auto& p : params) {
      LayerParams<U> q;
      q.weight = p.weight.template cast<U>();
      q.bias = p.bias.template cast<U>();
      q.running_mean = p.running_mean.template cast<U>();
      q.running_var = p.running_var.template cast<U>();
      m.params.push_back(std::move(q));
    }
    return m;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.weight.size() + p.bias.size();
    return n;
  }
};

using ModelState = ModelStateT<float>;
using ModelState64 = ModelStateT<double>;

namespace detail {

// Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases
// start at zero, batchnorm at identity.
template <typename T>
LayerParams<T> init_params(const LayerSpec& spec, Rng& rng) {
  LayerParams<T> p;
  switch (spec.kind) {
    case LayerKind::linear: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.in_features));
      p.weight = TensorT<T>({static_cast<std::size_t>(spec.out_features),
                             static_cast<std::size_t>(spec.in_features)});
      for (auto& v : p.weight.data())
        v = static_cast<T>(rng.uniform(-bound, bound));
      p.bias = TensorT<T>({static_cast<std::size_t>(spec.out_features)});
      break;
    }
    case LayerKind::conv2d: {
      const double fan_in =
          static_cast<double>(spec.in_ch) * spec.kernel * spec.kernel;
      const double bound = 1.0 / std::sqrt(fan_in);
      p.weight = TensorT<T>({static_cast<std::size_t>(spec.out_ch),
                             static_cast<std::size_t>(spec.in_ch),
                             static_cast<std::size_t>(spec.kernel),
                             static_cast<std::size_t>(spec.kernel)});
      for (auto& v : p.weight.data())
        v = static_cast<T>(rng.uniform(-bound, bound));
      p.bias = TensorT<T>({static_cast<std::size_t>(spec.out_ch)});
      break;
    }
    case LayerKind::batchnorm: {
      const auto c = static_cast<std::size_t>(spec.channels);
      p.weight = TensorT<T>({c});
      p.bias = TensorT<T>({c});
      p.running_mean = TensorT<T>({c});
      p.running_var = TensorT<T>({c});
      for (auto& v : p.weight.data()) v = T(1);
      for (auto& v : p.running_var.data()) v = T(1);
      break;
    }
    default:
      break;
  }
  return p;
}

}  // namespace detail

template <typename T>
ModelStateT<T> assemble_model(std::vector<LayerSpec> specs, std::uint64_t seed) {
  ModelStateT<T> m;
  Rng rng = Rng::derive(seed, 0x6d6f64656cULL);
  int next_id = 0;
  for (auto& s : specs) {
    s.id = next_id++;
    m.params.push_back(detail::init_params<T>(s, rng));
    m.layers.push_back(s);
  }
  m.meta.seed = seed;
  return m;
}

// cnn-small: three conv-bn-relu blocks with two 2x2 max pools, then a linear
// classifier head. cnn-wide doubles the channel counts.
template <typename T>
ModelStateT<T> build_model(const std::string& arch, std::uint64_t seed,
                           int in_channels = 1, int image_hw = 32,
                           int classes = 8) {
  int c1 = 16, c2 = 16, c3 = 32;
  if (arch == "cnn-wide") {
    c1 = 32;
    c2 = 32;
    c3 = 64;
  } else if (arch != "cnn-small") {
    throw std::invalid_argument("unknown architecture: " + arch);
  }
  const int hw_out = image_hw / 4;  // two stride-2 pools
  if (hw_out < 1)
    throw std::invalid_argument("image size too small for " + arch);
  std::vector<LayerSpec> specs = {
      LayerSpec::make_conv(in_channels, c1),
      LayerSpec::make_batchnorm(c1),
      LayerSpec::make_relu(),
      LayerSpec::make_conv(c1, c2),
      LayerSpec::make_batchnorm(c2),
      LayerSpec::make_relu(),
      LayerSpec::make_pool(),
      LayerSpec::make_conv(c2, c3),
      LayerSpec::make_batchnorm(c3),
      LayerSpec::make_relu(),
      LayerSpec::make_pool(),
      LayerSpec::make_linear(c3 * hw_out * hw_out, classes),
  };
  auto m = assemble_model<T>(std::move(specs), seed);
  m.meta.arch = arch;
  m.meta.classes = classes;
  m.meta.in_channels = in_channels;
  m.meta.image_hw = image_hw;
  return m;
}

}  // namespace surgeon
