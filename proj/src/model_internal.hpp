#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "rulelab/model.hpp"

namespace rulelab::detail {

struct LayerOffsets {
  std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc,
      w_proj, b_proj;
};

struct ParamLayout {
  std::size_t V, C, d, H, hd;
  std::size_t wte, wpe;
  std::vector<LayerOffsets> layers;
  std::size_t lnf_g, lnf_b, w_out, b_out, w_v, b_v;
  bool value_head;
  std::size_t total;

  static ParamLayout of(const ModelConfig& c);
};

constexpr double kLnEps = 1e-5;

inline std::span<const double> slice(std::span<const double> p, std::size_t off,
                                     std::size_t n) {
  return p.subspan(off, n);
}
inline std::span<double> slice(std::span<double> p, std::size_t off,
                               std::size_t n) {
  return p.subspan(off, n);
}

// out = (x - mean) * rstd * g + b; returns {mean, rstd}.
inline void layer_norm_row(const double* x, const double* g, const double* b,
                           double* out, std::size_t d, double& mean,
                           double& rstd) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += x[i];
  mean = s / static_cast<double>(d);
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  rstd = 1.0 / std::sqrt(var + kLnEps);
  for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mean) * rstd * g[i] + b[i];
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  return 0.5 * (1.0 + th) +
         0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// In-place log-softmax of one row.
inline void log_softmax_row(double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t i = 1; i < n; ++i) mx = row[i] > mx ? row[i] : mx;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(row[i] - mx);
  const double lse = mx + std::log(s);
  for (std::size_t i = 0; i < n; ++i) row[i] -= lse;
}

// Causal attention for query position t over keys [0, t]: fills probs[0..t]
// and adds the weighted values into y (d wide, all heads).
void attend_row(const double* q_row, const double* keys, const double* vals,
                std::size_t key_stride, std::size_t t, std::size_t H,
                std::size_t hd, double* probs_all, std::size_t probs_stride,
                double* y);

}  // namespace rulelab::detail
