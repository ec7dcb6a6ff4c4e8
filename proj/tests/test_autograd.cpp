// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "surgeon/autograd.hpp"
#include "surgeon/losses.hpp"
#include "surgeon/model.hpp"
#include "test_util.hpp"

using namespace surgeon;
using surgeon::testing::random_tensor;

namespace {

// conv-bn-relu-pool-linear chain on 8x8 single-channel images.
template <typename T>
ModelStateT<T> tiny_cnn(std::uint64_t seed, int classes = 3) {
  return assemble_model<T>(
      {LayerSpec::make_conv(1, 2), LayerSpec::make_batchnorm(2),
       LayerSpec::make_relu(), LayerSpec::make_pool(),
       LayerSpec::make_linear(2 * 4 * 4, classes)},
      seed);
}

template <typename T>
LossFn<T> sum_squares_loss() {
  return {[](const TensorT<T>& z) {
            T acc = T(0);
            for (std::size_t i = 0; i < z.size(); ++i) acc += z[i] * z[i];
            return acc;
          },
          [](const TensorT<T>& z) {
            TensorT<T> g(z.shape());
            for (std::size_t i = 0; i < z.size(); ++i) g[i] = T(2) * z[i];
            return g;
          }};
}

}  // namespace

TEST_CASE("forward: one linear layer example") {
  auto m = assemble_model<float>({LayerSpec::make_linear(1, 1)}, 0);
  m.params[0].weight[0] = 2.0f;
  Tensor in({1, 1}, {3.0f});
  auto fw = forward(m, in);
  CHECK(fw.output[0] == 6.0f);
  REQUIRE(fw.tape.nodes.size() == 1);
  CHECK(fw.tape.nodes[0].record.kind == ActivationRecord::Kind::dense);
  CHECK(fw.tape.nodes[0].record.dense.data() == std::vector<float>{3.0f});
}

TEST_CASE("forward-output invariance across policies") {
  Rng rng(5);
  auto m = tiny_cnn<float>(10);
  auto x = random_tensor<float>({4, 1, 8, 8}, rng);
  auto full = forward(m, x);

  auto st = forward(m, x, CachePolicy::static_p(0.8));
  CHECK(st.output == full.output);

  PruningSchedule sched;
  sched.ratios = {0.5, 0.9, 0.2};  // conv, bn, linear
  auto dyn = forward(m, x, CachePolicy::dynamic(), &sched);
  CHECK(dyn.output == full.output);

  auto gc = forward(m, x, CachePolicy::checkpoint());
  CHECK(gc.output == full.output);

  auto frozen = forward(m, x, CachePolicy::freeze_all(m));
  CHECK(frozen.output == full.output);
  for (const auto& n : frozen.tape.nodes)
    CHECK(n.record.kind == ActivationRecord::Kind::absent);
}

TEST_CASE("dynamic policy with all ratios zero equals full caching") {
  Rng rng(6);
  auto m = tiny_cnn<float>(11);
  auto x = random_tensor<float>({4, 1, 8, 8}, rng);

  auto full = forward(m, x);
  PruningSchedule zeros;
  zeros.ratios = {0.0, 0.0, 0.0};
  auto dyn = forward(m, x, CachePolicy::dynamic(), &zeros);
  CHECK(dyn.output == full.output);
  for (std::size_t i = 0; i < full.tape.nodes.size(); ++i) {
    const auto& a = full.tape.nodes[i].record;
    const auto& b = dyn.tape.nodes[i].record;
    CHECK(a.kind == b.kind);
    if (a.kind == ActivationRecord::Kind::dense) CHECK(a.dense == b.dense);
  }

  auto seed_grad = entropy_loss_grad(full.output);
  auto g_full = backward(full.tape, m, seed_grad);
  auto g_dyn = backward(dyn.tape, m, seed_grad);
  CHECK(gradients_identical(g_full, g_dyn));
}

TEST_CASE("schedule presence and length are validated") {
  Rng rng(7);
  auto m = tiny_cnn<float>(12);
  auto x = random_tensor<float>({2, 1, 8, 8}, rng);
  CHECK_THROWS_AS(forward(m, x, CachePolicy::dynamic(), nullptr),
                  std::invalid_argument);
  PruningSchedule s;
  s.ratios = {0.5};
  CHECK_THROWS_AS(forward(m, x, CachePolicy::dynamic(), &s),
                  std::invalid_argument);
  CHECK_THROWS_AS(forward(m, x, CachePolicy::full_caching(), &s),
                  std::invalid_argument);
}

TEST_CASE("backward: linear weight gradient example") {
  auto m = assemble_model<float>({LayerSpec::make_linear(2, 2)}, 0);
  m.params[0].weight = Tensor({2, 2}, {1, 0, 0, 1});
  Tensor a({1, 2}, {1, 2});
  auto fw = forward(m, a);
  Tensor seed({1, 2}, {1, 0});
  auto grads = backward(fw.tape, m, seed);
  REQUIRE(grads.count(0) == 1);
  CHECK(grads[0].weight.data() == std::vector<float>{1, 2, 0, 0});
  CHECK(grads[0].bias.data() == std::vector<float>{1, 0});
}

TEST_CASE("backward: zero loss gradient gives zero weight gradients") {
  Rng rng(8);
  auto m = tiny_cnn<float>(13);
  auto x = random_tensor<float>({2, 1, 8, 8}, rng);
  auto fw = forward(m, x);
  auto grads = backward(fw.tape, m, Tensor(fw.output.shape()));
  for (const auto& [id, g] : grads) {
    for (std::size_t i = 0; i < g.weight.size(); ++i) CHECK(g.weight[i] == 0.0f);
    for (std::size_t i = 0; i < g.bias.size(); ++i) CHECK(g.bias[i] == 0.0f);
  }
}

TEST_CASE("sparse record with zero pruned elements matches dense path") {
  Rng rng(9);
  auto m = assemble_model<float>({LayerSpec::make_linear(6, 2)}, 3);
  auto x = random_tensor<float>({3, 6}, rng);
  auto fw_dense = forward(m, x);
  auto fw2 = forward(m, x);
  // Force the sparse representation of the unpruned input.
  auto& node = fw2.tape.nodes[0];
  node.record = ActivationRecord::make_sparse(decompose(x));
  Tensor seed = random_tensor<float>({3, 2}, rng);
  auto g1 = backward(fw_dense.tape, m, seed);
  auto g2 = backward(fw2.tape, m, seed);
  CHECK(gradients_identical(g1, g2));
}

TEST_CASE("tape is single-use") {
  Rng rng(10);
  auto m = tiny_cnn<float>(14);
  auto x = random_tensor<float>({2, 1, 8, 8}, rng);
  auto fw = forward(m, x);
  auto seed = entropy_loss_grad(fw.output);
  backward(fw.tape, m, seed);
  CHECK_THROWS_AS(backward(fw.tape, m, seed), std::invalid_argument);
}

TEST_CASE("missing record for an updated layer is an error") {
  Rng rng(11);
  auto m = assemble_model<float>({LayerSpec::make_linear(4, 2)}, 5);
  auto x = random_tensor<float>({2, 4}, rng);
  auto fw = forward(m, x);
  fw.tape.nodes[0].record = ActivationRecord::absent();
  CHECK_THROWS_AS(backward(fw.tape, m, random_tensor<float>({2, 2}, rng)),
                  std::invalid_argument);
}

TEST_CASE("loss gradient shape is validated") {
  Rng rng(12);
  auto m = tiny_cnn<float>(15);
  auto x = random_tensor<float>({2, 1, 8, 8}, rng);
  auto fw = forward(m, x);
  CHECK_THROWS_AS(backward(fw.tape, m, Tensor({2, 5})), std::invalid_argument);
}

TEST_CASE("finite differences: quadratic example") {
  auto m = assemble_model<double>({LayerSpec::make_linear(1, 1)}, 0);
  m.params[0].weight[0] = 3.0;
  Tensor64 in({1, 1}, {1.0});
  auto fd = finite_difference_gradients(m, in, sum_squares_loss<double>(), 1e-5);
  CHECK(std::abs(fd[0].weight[0] - 6.0) <= 1e-8);

  LossFn<double> constant{[](const Tensor64&) { return 1.5; },
                          [](const Tensor64& z) { return Tensor64(z.shape()); }};
  auto zero = finite_difference_gradients(m, in, constant, 1e-5);
  CHECK(zero[0].weight[0] == 0.0);
  CHECK(zero[0].bias[0] == 0.0);

  CHECK_THROWS_AS(
      finite_difference_gradients(m, in, sum_squares_loss<double>(), 0.5),
      std::invalid_argument);
}

TEST_CASE("finite differences match backward on a random 2-layer net") {
  Rng rng(13);
  auto m = assemble_model<double>(
      {LayerSpec::make_linear(6, 5), LayerSpec::make_relu(),
       LayerSpec::make_linear(5, 3)},
      21);
  auto x = random_tensor<double>({4, 6}, rng);
  auto loss = make_entropy_loss<double>();
  auto fw = forward(m, x);
  auto bp = backward(fw.tape, m, loss.grad(fw.output));
  auto fd = finite_difference_gradients(m, x, loss, 1e-5);
  CHECK(max_relative_error(bp, fd) <= 1e-6);
}

TEST_CASE("finite differences match backward through conv/bn/pool") {
  Rng rng(14);
  for (std::uint64_t seed : {31, 32}) {
    auto m = tiny_cnn<double>(seed);
    auto x = random_tensor<double>({3, 1, 8, 8}, rng);
    auto loss = make_entropy_loss<double>();
    auto fw = forward(m, x);
    auto bp = backward(fw.tape, m, loss.grad(fw.output));
    auto fd = finite_difference_gradients(m, x, loss, 1e-5);
    CHECK(max_relative_error(bp, fd) <= 1e-6);
  }
}

TEST_CASE("finite differences match backward with blended BN statistics") {
  Rng rng(15);
  auto m = tiny_cnn<double>(33);
  // Non-trivial running statistics.
  for (auto& v : m.params[1].running_mean.data()) v = rng.uniform(-0.3, 0.3);
  for (auto& v : m.params[1].running_var.data()) v = rng.uniform(0.5, 1.5);
  auto x = random_tensor<double>({3, 1, 8, 8}, rng);
  ForwardOptions opts;
  opts.bn_blend = 0.6;
  auto loss = make_entropy_loss<double>();
  auto fw = forward(m, x, CachePolicy::full_caching(), nullptr, opts);
  auto bp = backward(fw.tape, m, loss.grad(fw.output));
  auto fd = finite_difference_gradients(m, x, loss, 1e-5, opts);
  CHECK(max_relative_error(bp, fd) <= 1e-6);
}

TEST_CASE("checkpoint recompute yields bit-identical gradients, lower peak") {
  Rng rng(16);
  auto m = assemble_model<float>(
      {LayerSpec::make_conv(1, 4), LayerSpec::make_batchnorm(4),
       LayerSpec::make_relu(), LayerSpec::make_conv(4, 4),
       LayerSpec::make_batchnorm(4), LayerSpec::make_relu(),
       LayerSpec::make_pool(), LayerSpec::make_linear(4 * 4 * 4, 3)},
      77);
  auto x = random_tensor<float>({4, 1, 8, 8}, rng);

  auto full = forward(m, x);
  auto gc = forward(m, x, CachePolicy::checkpoint());
  CHECK(gc.output == full.output);
  CHECK(gc.tape.stored_bytes < full.tape.stored_bytes);

  auto seed = entropy_loss_grad(full.output);
  auto g_full = backward(full.tape, m, seed);
  auto g_gc = backward(gc.tape, m, seed);
  CHECK(gradients_identical(g_full, g_gc));
  // Peak includes the rematerialized segment but stays below full caching.
  CHECK(gc.tape.peak_bytes > gc.tape.stored_bytes);
  CHECK(gc.tape.peak_bytes < full.tape.peak_bytes);
}

TEST_CASE("frozen layers propagate but emit no weight gradient") {
  Rng rng(17);
  auto m = tiny_cnn<float>(55);
  auto x = random_tensor<float>({3, 1, 8, 8}, rng);
  CachePolicy policy;
  policy.frozen = {0, 1};  // conv and bn frozen; linear updated
  auto fw = forward(m, x, policy);
  auto grads = backward(fw.tape, m, entropy_loss_grad(fw.output));
  CHECK(grads.count(0) == 0);
  CHECK(grads.count(1) == 0);
  CHECK(grads.count(4) == 1);

  // Freezing the layers above the only updated one stores no conv record.
  CHECK(fw.tape.nodes[0].record.kind == ActivationRecord::Kind::absent);
  // Frozen batch-stat BN keeps a dense record: the linear layer below...
  // (id order: conv=0, bn=1, relu=2, pool=3, linear=4; gradients flow
  // from linear down, so nothing passes through bn). Record stays absent.
  CHECK(fw.tape.nodes[1].record.kind == ActivationRecord::Kind::absent);
}

TEST_CASE("frozen eval-mode BN passes gradients with no record at all") {
  // With running statistics the layer is affine, so a frozen BN on the
  // gradient path needs no cached input.
  Rng rng(19);
  auto m = tiny_cnn<double>(57);
  for (auto& v : m.params[1].running_mean.data()) v = rng.uniform(-0.2, 0.2);
  for (auto& v : m.params[1].running_var.data()) v = rng.uniform(0.6, 1.4);
  auto x = random_tensor<double>({3, 1, 8, 8}, rng);
  ForwardOptions opts;
  opts.bn_blend = 0.0;
  CachePolicy policy;
  policy.frozen = {1, 4};  // bn and linear frozen; conv updated below bn
  auto fw = forward(m, x, policy, nullptr, opts);
  CHECK(fw.tape.nodes[1].record.kind == ActivationRecordT<double>::Kind::absent);
  auto loss = make_entropy_loss<double>();
  auto bp = backward(fw.tape, m, loss.grad(fw.output));
  REQUIRE(bp.count(0) == 1);
  auto fd = finite_difference_gradients(m, x, loss, 1e-5, opts);
  GradientSet<double> fd_conv;
  fd_conv[0] = fd[0];
  CHECK(max_relative_error(bp, fd_conv) <= 1e-6);
}

#ifdef _OPENMP
TEST_CASE("forward/backward are bit-identical for any thread count") {
  Rng rng(21);
  auto m = tiny_cnn<float>(88);
  auto x = random_tensor<float>({4, 1, 8, 8}, rng);
  const int saved = omp_get_max_threads();

  omp_set_num_threads(1);
  auto fw1 = forward(m, x);
  auto g1 = backward(fw1.tape, m, entropy_loss_grad(fw1.output));

  omp_set_num_threads(std::max(2, saved));
  auto fw2 = forward(m, x);
  auto g2 = backward(fw2.tape, m, entropy_loss_grad(fw2.output));

  omp_set_num_threads(saved);
  CHECK(fw1.output == fw2.output);
  CHECK(gradients_identical(g1, g2));
}
#endif

TEST_CASE("frozen batch-stat BN above an updated layer keeps a dense record") {
  Rng rng(18);
  auto m = tiny_cnn<float>(56);
  auto x = random_tensor<float>({3, 1, 8, 8}, rng);
  CachePolicy policy;
  policy.frozen = {1, 4};  // bn and linear frozen; conv updated below bn
  auto fw = forward(m, x, policy);
  CHECK(fw.tape.nodes[1].record.kind == ActivationRecord::Kind::dense);
  auto grads = backward(fw.tape, m, entropy_loss_grad(fw.output));
  CHECK(grads.count(0) == 1);
  CHECK(grads.count(1) == 0);

  // The frozen-BN gradient path is exact: compare against an f64 oracle.
  auto m64 = m.cast<double>();
  auto x64 = x.cast<double>();
  auto loss = make_entropy_loss<double>();
  auto fw64 = forward(m64, x64, policy);
  auto bp = backward(fw64.tape, m64, loss.grad(fw64.output));
  auto fd = finite_difference_gradients(m64, x64, loss, 1e-5);
  // Only compare the conv layer; fd covers all parametric layers.
  GradientSet<double> fd_conv;
  fd_conv[0] = fd[0];
  CHECK(max_relative_error(bp, fd_conv) <= 1e-6);
}
