// SPDX-License-Identifier: Apache-2.0
//
// Times the OpenMP kernels against the serial reference and verifies that
// both lanes produce bit-identical results. `--smoke` shrinks the sizes for
// use as a quick test.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>

#include "surgeon/kernels.hpp"
#include "surgeon/rng.hpp"
#include "surgeon/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace surgeon;
using kernels::i64;

namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
double time_best_ms(F&& fn, int reps) {
  double best = 1e30;
  for (int r = 0; r < reps; ++r) {
    auto t0 = Clock::now();
    fn();
    auto t1 = Clock::now();
    best = std::min(best,
                    std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

int failures = 0;

void report(const char* name, double gflop, double serial_ms, double omp_ms,
            bool identical) {
  std::printf("%-28s %9.2f ms %9.2f ms %7.2fx   %5.2f GFLOP/s   %s\n", name,
              serial_ms, omp_ms, serial_ms / omp_ms, gflop / (omp_ms * 1e-3),
              identical ? "bit-identical" : "MISMATCH");
  if (!identical) ++failures;
}

}  // namespace

int main(int argc, char** argv) {
  bool smoke = false;
  for (int i = 1; i < argc; ++i)
    if (std::strcmp(argv[i], "--smoke") == 0) smoke = true;

  const i64 M = smoke ? 48 : 256;
  const i64 B = smoke ? 2 : 8;
  const i64 C = smoke ? 4 : 16;
  const i64 HW = smoke ? 16 : 32;
  const int reps = smoke ? 2 : 5;

#ifdef _OPENMP
  std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
  std::printf("OpenMP not enabled; both lanes are serial\n");
#endif
  std::printf("%-28s %12s %12s %9s\n", "kernel", "serial", "openmp", "speedup");

  Rng rng(1);
  {
    Tensor a({(std::size_t)M, (std::size_t)M}), b(a.shape()), c1(a.shape()),
        c2(a.shape());
    for (auto& v : a.data()) v = (float)rng.uniform(-1, 1);
    for (auto& v : b.data()) v = (float)rng.uniform(-1, 1);
    double ts = time_best_ms(
        [&] { kernels::serial::matmul(a.ptr(), b.ptr(), c1.ptr(), M, M, M); },
        reps);
    double tp = time_best_ms(
        [&] { kernels::matmul(a.ptr(), b.ptr(), c2.ptr(), M, M, M); }, reps);
    report("matmul", 2.0 * M * M * M * 1e-9, ts, tp, c1 == c2);
  }
  {
    const i64 K = 3, Ho = HW, Wo = HW;
    Tensor in({(std::size_t)B, (std::size_t)C, (std::size_t)HW, (std::size_t)HW});
    Tensor w({(std::size_t)C, (std::size_t)C, 3, 3});
    Tensor bias({(std::size_t)C});
    Tensor o1({(std::size_t)B, (std::size_t)C, (std::size_t)HW, (std::size_t)HW});
    Tensor o2 = o1;
    for (auto& v : in.data()) v = (float)rng.uniform(-1, 1);
    for (auto& v : w.data()) v = (float)rng.uniform(-1, 1);
    double gflop = 2.0 * B * C * C * K * K * Ho * Wo * 1e-9;
    double ts = time_best_ms(
        [&] {
          kernels::serial::conv2d_forward(in.ptr(), w.ptr(), bias.ptr(),
                                          o1.ptr(), B, C, HW, HW, C, K, 1, 1,
                                          Ho, Wo);
        },
        reps);
    double tp = time_best_ms(
        [&] {
          kernels::conv2d_forward(in.ptr(), w.ptr(), bias.ptr(), o2.ptr(), B,
                                  C, HW, HW, C, K, 1, 1, Ho, Wo);
        },
        reps);
    report("conv2d_forward", gflop, ts, tp, o1 == o2);

    Tensor di1 = in, di2 = in;
    ts = time_best_ms(
        [&] {
          kernels::serial::conv2d_backward_input(o1.ptr(), w.ptr(), di1.ptr(),
                                                 B, C, HW, HW, C, K, 1, 1, Ho,
                                                 Wo);
        },
        reps);
    tp = time_best_ms(
        [&] {
          kernels::conv2d_backward_input(o1.ptr(), w.ptr(), di2.ptr(), B, C,
                                         HW, HW, C, K, 1, 1, Ho, Wo);
        },
        reps);
    report("conv2d_backward_input", gflop, ts, tp, di1 == di2);

    Tensor dw1 = w, dw2 = w, db1 = bias, db2 = bias;
    ts = time_best_ms(
        [&] {
          kernels::serial::conv2d_backward_weights(in.ptr(), o1.ptr(),
                                                   dw1.ptr(), db1.ptr(), B, C,
                                                   HW, HW, C, K, 1, 1, Ho, Wo);
        },
        reps);
    tp = time_best_ms(
        [&] {
          kernels::conv2d_backward_weights(in.ptr(), o1.ptr(), dw2.ptr(),
                                           db2.ptr(), B, C, HW, HW, C, K, 1, 1,
                                           Ho, Wo);
        },
        reps);
    report("conv2d_backward_weights", gflop, ts, tp, dw1 == dw2 && db1 == db2);
  }
  {
    const std::size_t N = smoke ? 100000 : 4000000;
    Tensor a({N}), b({N});
    for (auto& v : a.data()) v = (float)rng.uniform(-1, 1);
    for (auto& v : b.data()) v = (float)rng.uniform(-1, 1);
    Tensor r1, r2;
    double ts = time_best_ms(
        [&] {
          Tensor tmp(a.shape());
          const float* pa = a.ptr();
          const float* pb = b.ptr();
          float* po = tmp.ptr();
          for (std::size_t i = 0; i < N; ++i) po[i] = pa[i] * pb[i];
          r1 = std::move(tmp);
        },
        reps);
    double tp = time_best_ms([&] { r2 = elementwise(EwOp::mul, a, b); }, reps);
    report("elementwise_mul", N * 1e-9, ts, tp, r1 == r2);
  }

  if (failures) {
    std::printf("%d kernel mismatches\n", failures);
    return 1;
  }
  std::printf("all kernels bit-identical across lanes\n");
  return 0;
}
