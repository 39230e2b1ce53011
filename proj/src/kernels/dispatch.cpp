#include <atomic>
#include <cstdlib>
#include <string>

#include "rulelab/kernels.hpp"

namespace rulelab::kernels {
namespace {

const KernelTable* best_available() {
  if (const char* forced = std::getenv("RULELAB_KERNELS")) {
    for (const KernelTable* t : available_tables()) {
      if (std::string_view(t->name) == forced) return t;
    }
  }
  if (const KernelTable* t = avx2_table()) return t;
  if (const KernelTable* t = neon_table()) return t;
  return &scalar_table();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{best_available()};
  return table;
}

}  // namespace

std::vector<const KernelTable*> available_tables() {
  std::vector<const KernelTable*> out{&scalar_table()};
  if (const KernelTable* t = avx2_table()) out.push_back(t);
  if (const KernelTable* t = neon_table()) out.push_back(t);
  return out;
}

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

bool select(std::string_view name) {
  for (const KernelTable* t : available_tables()) {
    if (name == t->name) {
      current().store(t, std::memory_order_relaxed);
      return true;
    }
  }
  return false;
}

void linear_forward(std::span<double> out, std::span<const double> in,
                    std::span<const double> w, std::span<const double> bias,
                    std::size_t rows, std::size_t in_dim,
                    std::size_t out_dim) {
  const KernelTable& k = active();
  for (std::size_t t = 0; t < rows; ++t) {
    double* o = out.data() + t * out_dim;
    const double* x = in.data() + t * in_dim;
    for (std::size_t j = 0; j < out_dim; ++j) o[j] = bias[j];
    for (std::size_t i = 0; i < in_dim; ++i) {
      if (x[i] != 0.0) k.axpy(x[i], w.data() + i * out_dim, o, out_dim);
    }
  }
}

void linear_backward(std::span<double> d_in, std::span<double> d_w,
                     std::span<double> d_bias, std::span<const double> d_out,
                     std::span<const double> in, std::span<const double> w,
                     std::size_t rows, std::size_t in_dim,
                     std::size_t out_dim) {
  const KernelTable& k = active();
  for (std::size_t t = 0; t < rows; ++t) {
    const double* g = d_out.data() + t * out_dim;
    const double* x = in.data() + t * in_dim;
    k.axpy(1.0, g, d_bias.data(), out_dim);
    for (std::size_t i = 0; i < in_dim; ++i) {
      if (!d_in.empty()) {
        d_in[t * in_dim + i] += k.dot(g, w.data() + i * out_dim, out_dim);
      }
      if (x[i] != 0.0) k.axpy(x[i], g, d_w.data() + i * out_dim, out_dim);
    }
  }
}

}  // namespace rulelab::kernels
