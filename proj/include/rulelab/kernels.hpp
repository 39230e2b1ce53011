#pragma once

// Dense arithmetic kernels used by the model's forward and backward passes.
//
// Every kernel has a portable scalar reference implementation. SIMD variants
// (AVX2+FMA on x86-64, NEON on AArch64) are compiled alongside it and one
// table is selected at runtime. The selection can be forced with the
// RULELAB_KERNELS environment variable ("scalar", "avx2", "neon").

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace rulelab::kernels {

struct KernelTable {
  const char* name;
  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y[i] *= alpha
  void (*scale)(double alpha, double* y, std::size_t n);
};

const KernelTable& scalar_table();

// nullptr when the variant is not compiled in or the CPU lacks the feature.
const KernelTable* avx2_table();
const KernelTable* neon_table();

// Tables usable on this machine, scalar first.
std::vector<const KernelTable*> available_tables();

// The table every model routine dispatches through.
const KernelTable& active();

// Returns false if `name` is unknown or unsupported on this CPU.
bool select(std::string_view name);

// out[t, :] = bias + in[t, :] * w   for t < rows; w is [in_dim x out_dim].
void linear_forward(std::span<double> out, std::span<const double> in,
                    std::span<const double> w, std::span<const double> bias,
                    std::size_t rows, std::size_t in_dim, std::size_t out_dim);

// Accumulates d_in (if non-empty), d_w and d_bias for linear_forward.
void linear_backward(std::span<double> d_in, std::span<double> d_w,
                     std::span<double> d_bias, std::span<const double> d_out,
                     std::span<const double> in, std::span<const double> w,
                     std::size_t rows, std::size_t in_dim,
                     std::size_t out_dim);

}  // namespace rulelab::kernels
