// Reverse-mode pass through the transformer, mirroring forward() in model.cpp.

#include <cmath>

#include "model_internal.hpp"
#include "rulelab/errors.hpp"
#include "rulelab/kernels.hpp"
#include "rulelab/model.hpp"

namespace rulelab {
namespace {

// d_x += LayerNorm backward for one row; accumulates d_g, d_b.
void layer_norm_backward_row(const double* x, double mean, double rstd,
                             const double* g, const double* d_out, double* d_x,
                             double* d_g, double* d_b, std::size_t d) {
  double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double dxhat = d_out[i] * g[i];
    d_g[i] += d_out[i] * xhat;
    d_b[i] += d_out[i];
    mean_dxhat += dxhat;
    mean_dxhat_xhat += dxhat * xhat;
  }
  mean_dxhat /= static_cast<double>(d);
  mean_dxhat_xhat /= static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double dxhat = d_out[i] * g[i];
    d_x[i] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
  }
}

}  // namespace

void backward(const PolicyModel& m, const ForwardTrace& tr,
              std::span<const double> d_logits, std::span<const double> d_values,
              std::span<double> grad) {
  const auto p = detail::ParamLayout::of(m.config());
  const std::size_t n = tr.tokens.size();
  const std::size_t d = p.d, H = p.H, hd = p.hd, V = p.V;
  const std::size_t outs = tr.outputs();
  if (d_logits.size() != outs * V) throw DomainError("backward: d_logits shape mismatch");
  if (!d_values.empty() && (d_values.size() != outs || !p.value_head)) {
    throw DomainError("backward: d_values shape mismatch");
  }
  if (grad.size() != p.total) throw DomainError("backward: gradient size mismatch");
  const auto w = m.params();
  const kernels::KernelTable& k = kernels::active();

  // Output head and value head.
  std::vector<double> d_lnf(n * d, 0.0);
  kernels::linear_backward(
      std::span<double>(d_lnf).subspan(tr.first_output * d, outs * d),
      grad.subspan(p.w_out, d * V), grad.subspan(p.b_out, V), d_logits,
      std::span<const double>(tr.lnf_out).subspan(tr.first_output * d, outs * d),
      w.subspan(p.w_out, d * V), outs, d, V);
  if (!d_values.empty()) {
    for (std::size_t t = 0; t < outs; ++t) {
      const double dv = d_values[t];
      if (dv == 0.0) continue;
      const std::size_t row = (tr.first_output + t) * d;
      k.axpy(dv, &tr.lnf_out[row], &grad[p.w_v], d);
      grad[p.b_v] += dv;
      k.axpy(dv, &w[p.w_v], &d_lnf[row], d);
    }
  }

  std::vector<double> dx(n * d, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    layer_norm_backward_row(&tr.x_final[t * d], tr.lnf_mean[t], tr.lnf_rstd[t],
                            &w[p.lnf_g], &d_lnf[t * d], &dx[t * d],
                            &grad[p.lnf_g], &grad[p.lnf_b], d);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& lo = p.layers[li];
    const auto& L = tr.layers[li];

    // x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
    std::vector<double> d_fc_act(n * 4 * d, 0.0);
    kernels::linear_backward(d_fc_act, grad.subspan(lo.w_proj, 4 * d * d),
                             grad.subspan(lo.b_proj, d), dx, L.fc_act,
                             w.subspan(lo.w_proj, 4 * d * d), n, 4 * d, d);
    std::vector<double> d_fc_pre(n * 4 * d);
    for (std::size_t i = 0; i < n * 4 * d; ++i) {
      d_fc_pre[i] = d_fc_act[i] * detail::gelu_grad(L.fc_pre[i]);
    }
    std::vector<double> d_ln2(n * d, 0.0);
    kernels::linear_backward(d_ln2, grad.subspan(lo.w_fc, d * 4 * d),
                             grad.subspan(lo.b_fc, 4 * d), d_fc_pre, L.ln2_out,
                             w.subspan(lo.w_fc, d * 4 * d), n, d, 4 * d);
    std::vector<double> d_mid = dx;
    for (std::size_t t = 0; t < n; ++t) {
      layer_norm_backward_row(&L.x_mid[t * d], L.ln2_mean[t], L.ln2_rstd[t],
                              &w[lo.ln2_g], &d_ln2[t * d], &d_mid[t * d],
                              &grad[lo.ln2_g], &grad[lo.ln2_b], d);
    }

    // x_mid = x_in + w_o(attention(qkv(ln1(x_in))))
    std::vector<double> d_att_y(n * d, 0.0);
    kernels::linear_backward(d_att_y, grad.subspan(lo.w_o, d * d),
                             grad.subspan(lo.b_o, d), d_mid, L.att_y,
                             w.subspan(lo.w_o, d * d), n, d, d);
    std::vector<double> d_qkv(n * 3 * d, 0.0);
    std::vector<double> d_att(n);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < n; ++t) {
        const double* probs = &L.att[h * n * n + t * n];
        const double* dy = &d_att_y[t * d + h * hd];
        double dot_pa = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          const double* v = &L.qkv[u * 3 * d + 2 * d + h * hd];
          d_att[u] = k.dot(dy, v, hd);
          dot_pa += probs[u] * d_att[u];
          k.axpy(probs[u], dy, &d_qkv[u * 3 * d + 2 * d + h * hd], hd);
        }
        const double* q = &L.qkv[t * 3 * d + h * hd];
        double* dq = &d_qkv[t * 3 * d + h * hd];
        for (std::size_t u = 0; u <= t; ++u) {
          const double ds = probs[u] * (d_att[u] - dot_pa) * scale;
          if (ds == 0.0) continue;
          k.axpy(ds, &L.qkv[u * 3 * d + d + h * hd], dq, hd);
          k.axpy(ds, q, &d_qkv[u * 3 * d + d + h * hd], hd);
        }
      }
    }
    std::vector<double> d_ln1(n * d, 0.0);
    kernels::linear_backward(d_ln1, grad.subspan(lo.w_qkv, d * 3 * d),
                             grad.subspan(lo.b_qkv, 3 * d), d_qkv, L.ln1_out,
                             w.subspan(lo.w_qkv, d * 3 * d), n, d, 3 * d);
    dx = d_mid;
    for (std::size_t t = 0; t < n; ++t) {
      layer_norm_backward_row(&L.x_in[t * d], L.ln1_mean[t], L.ln1_rstd[t],
                              &w[lo.ln1_g], &d_ln1[t * d], &dx[t * d],
                              &grad[lo.ln1_g], &grad[lo.ln1_b], d);
    }
  }

  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t tok = static_cast<std::size_t>(tr.tokens[t]);
    k.axpy(1.0, &dx[t * d], &grad[p.wte + tok * d], d);
    k.axpy(1.0, &dx[t * d], &grad[p.wpe + t * d], d);
  }
}

}  // namespace rulelab
