#pragma once

// Scalar-generic decoder forward/backward over a flat parameter vector.
// Instantiated with double for plain reverse-mode gradients and with Dual
// for exact Hessian-vector products (tangents ride through the identical
// arithmetic, so the gradient's tangent is H*v to machine precision).
//
// Layout and shapes follow ParamLayout: pre-norm blocks
//   x += Wo * attn(rmsnorm(x) ; Wq, Wk, Wv)
//   x += W2 * gelu(W1 * rmsnorm(x))
// with a final rmsnorm and an untied output head. All activations are
// smooth (tanh-form gelu), which keeps finite-difference checks tight.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "paml/diffcore.hpp"
#include "paml/seqmodel.hpp"

namespace paml::detail {

constexpr double kRmsEps = 1e-8;

// --------------------------------------------------------------------------
// scalar helpers usable with double and Dual
// --------------------------------------------------------------------------

inline double s_sqrt(double x) { return std::sqrt(x); }
inline Dual s_sqrt(Dual x) { return sqrt(x); }
inline double s_exp(double x) { return std::exp(x); }
inline Dual s_exp(Dual x) { return exp(x); }
inline double s_log(double x) { return std::log(x); }
inline Dual s_log(Dual x) { return log(x); }
inline double s_tanh(double x) { return std::tanh(x); }
inline Dual s_tanh(Dual x) { return tanh(x); }

template <class S>
inline S gelu(S x) {
  const double c = 0.7978845608028654;  // sqrt(2/pi)
  const double a = 0.044715;
  S u = c * (x + a * x * x * x);
  return 0.5 * x * (1.0 + s_tanh(u));
}

template <class S>
inline S gelu_grad(S x) {
  const double c = 0.7978845608028654;
  const double a = 0.044715;
  S u = c * (x + a * x * x * x);
  S th = s_tanh(u);
  S sech2 = 1.0 - th * th;
  return 0.5 * (1.0 + th) + 0.5 * x * sech2 * (c * (1.0 + 3.0 * a * x * x));
}

// y[j] = sum_i x[i] * W[i*out+j]   (W row-major, in x out)
template <class S>
inline void vec_mat(const S* x, const S* w, int in_dim, int out_dim, S* y) {
  for (int j = 0; j < out_dim; ++j) y[j] = S(0.0);
  for (int i = 0; i < in_dim; ++i) {
    const S xi = x[i];
    const S* wrow = w + static_cast<std::size_t>(i) * out_dim;
    for (int j = 0; j < out_dim; ++j) y[j] += xi * wrow[j];
  }
}

// dx[i] += sum_j dy[j] * W[i*out+j];  dW[i*out+j] += x[i] * dy[j]
template <class S>
inline void vec_mat_bwd(const S* x, const S* w, const S* dy, int in_dim,
                        int out_dim, S* dx, S* dw) {
  for (int i = 0; i < in_dim; ++i) {
    const S* wrow = w + static_cast<std::size_t>(i) * out_dim;
    S* dwrow = dw + static_cast<std::size_t>(i) * out_dim;
    S acc = S(0.0);
    const S xi = x[i];
    for (int j = 0; j < out_dim; ++j) {
      acc += dy[j] * wrow[j];
      dwrow[j] += xi * dy[j];
    }
    dx[i] += acc;
  }
}

// Writes xhat = x / rms and returns rms = sqrt(mean(x^2) + eps).
template <class S>
inline S rmsnorm_fwd(const S* x, int dim, S* xhat) {
  S ms = S(0.0);
  for (int d = 0; d < dim; ++d) ms += x[d] * x[d];
  S r = s_sqrt(ms / static_cast<double>(dim) + kRmsEps);
  for (int d = 0; d < dim; ++d) xhat[d] = x[d] / r;
  return r;
}

// Backward of y = xhat * gain through the rms normalization.
// dx[e] += (dy[e]*g[e] - xhat[e] * mean_d(dy*g*xhat)) / r;  dgain[d] += dy[d]*xhat[d]
template <class S>
inline void rmsnorm_bwd(const S* dy, const S* xhat, S r, const S* gain, int dim,
                        S* dx, S* dgain) {
  S dot = S(0.0);
  for (int d = 0; d < dim; ++d) dot += dy[d] * gain[d] * xhat[d];
  dot = dot / static_cast<double>(dim);
  for (int d = 0; d < dim; ++d) {
    dx[d] += (dy[d] * gain[d] - xhat[d] * dot) / r;
    dgain[d] += dy[d] * xhat[d];
  }
}

// --------------------------------------------------------------------------
// dropout
// --------------------------------------------------------------------------

struct DropoutSpec {
  double rate = 0.0;
  std::uint64_t seed = 0;
  bool active() const { return rate > 0.0; }
};

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stateless inverted-dropout scale: 0 or 1/keep, a pure function of the
// mask seed and the site coordinates, so forward, backward, and the dual
// re-run all see the same mask.
inline double drop_scale(const DropoutSpec& ds, std::uint64_t site,
                         std::uint64_t layer, std::uint64_t row,
                         std::uint64_t t, std::uint64_t d) {
  const std::uint64_t h =
      mix64(ds.seed ^ mix64((site << 56) ^ (layer << 48) ^ (row << 32) ^
                            (t << 16) ^ d));
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return u < ds.rate ? 0.0 : 1.0 / (1.0 - ds.rate);
}

// --------------------------------------------------------------------------
// per-row caches
// --------------------------------------------------------------------------

template <class S>
struct LayerCache {
  std::vector<S> x_in;   // n*D stream entering the layer
  std::vector<S> rms1;   // n
  std::vector<S> xhat1;  // n*D
  std::vector<S> q, k, v;  // n*D each
  std::vector<S> p;      // H*n*n causal attention probabilities
  std::vector<S> o;      // n*D concatenated head outputs
  std::vector<S> x_mid;  // n*D stream after the attention residual
  std::vector<S> rms2;   // n
  std::vector<S> xhat2;  // n*D
  std::vector<S> hpre;   // n*F
  std::vector<S> hact;   // n*F
};

template <class S>
struct RowCache {
  int len = 0;
  std::vector<LayerCache<S>> layers;
  std::vector<S> x_final;  // n*D stream entering the final norm
  std::vector<S> rmsf;     // n
  std::vector<S> xhatf;    // n*D
  std::vector<S> nf;       // n*D post-gain final activations
};

// --------------------------------------------------------------------------
// trunk forward / backward (everything below the output head)
// --------------------------------------------------------------------------

template <class S>
void forward_trunk(const ModelConfig& cfg, const ParamLayout& L, const S* P,
                   const TokenId* toks, int n, const DropoutSpec& drop,
                   std::uint64_t row, RowCache<S>& rc) {
  const int D = cfg.model_dim, E = cfg.embed_dim, H = cfg.heads;
  const int hd = D / H, F = cfg.ffn_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  rc.len = n;
  rc.layers.assign(static_cast<std::size_t>(cfg.layers), {});

  std::vector<S> x(static_cast<std::size_t>(n) * D);
  for (int t = 0; t < n; ++t) {
    const S* emb = P + L.tok_emb + static_cast<std::size_t>(toks[t]) * E;
    const S* pos = P + L.pos_emb + static_cast<std::size_t>(t) * D;
    S* xt = &x[static_cast<std::size_t>(t) * D];
    if (L.has_proj) {
      vec_mat(emb, P + L.in_proj, E, D, xt);
      for (int d = 0; d < D; ++d) xt[d] += pos[d];
    } else {
      for (int d = 0; d < D; ++d) xt[d] = emb[d] + pos[d];
    }
  }

  std::vector<S> n1(static_cast<std::size_t>(n) * D);
  std::vector<S> n2(static_cast<std::size_t>(n) * D);
  std::vector<S> tmp(static_cast<std::size_t>(std::max(D, F)));

  for (int l = 0; l < cfg.layers; ++l) {
    LayerCache<S>& lc = rc.layers[static_cast<std::size_t>(l)];
    const S* lp = P + L.layer_base(l);
    lc.x_in = x;

    // attention block
    lc.rms1.resize(static_cast<std::size_t>(n));
    lc.xhat1.resize(static_cast<std::size_t>(n) * D);
    for (int t = 0; t < n; ++t) {
      lc.rms1[t] = rmsnorm_fwd(&lc.x_in[static_cast<std::size_t>(t) * D], D,
                               &lc.xhat1[static_cast<std::size_t>(t) * D]);
      for (int d = 0; d < D; ++d)
        n1[static_cast<std::size_t>(t) * D + d] =
            lc.xhat1[static_cast<std::size_t>(t) * D + d] * lp[L.ln1 + d];
    }
    lc.q.resize(static_cast<std::size_t>(n) * D);
    lc.k.resize(static_cast<std::size_t>(n) * D);
    lc.v.resize(static_cast<std::size_t>(n) * D);
    for (int t = 0; t < n; ++t) {
      const S* nt = &n1[static_cast<std::size_t>(t) * D];
      vec_mat(nt, lp + L.wq, D, D, &lc.q[static_cast<std::size_t>(t) * D]);
      vec_mat(nt, lp + L.wk, D, D, &lc.k[static_cast<std::size_t>(t) * D]);
      vec_mat(nt, lp + L.wv, D, D, &lc.v[static_cast<std::size_t>(t) * D]);
    }
    lc.p.assign(static_cast<std::size_t>(H) * n * n, S(0.0));
    lc.o.assign(static_cast<std::size_t>(n) * D, S(0.0));
    for (int h = 0; h < H; ++h) {
      const int hoff = h * hd;
      for (int t = 0; t < n; ++t) {
        S* prow = &lc.p[(static_cast<std::size_t>(h) * n + t) * n];
        const S* qt = &lc.q[static_cast<std::size_t>(t) * D + hoff];
        // causal scores, numerically stabilized softmax
        S mx = S(0.0);
        for (int u = 0; u <= t; ++u) {
          const S* ku = &lc.k[static_cast<std::size_t>(u) * D + hoff];
          S s = S(0.0);
          for (int d = 0; d < hd; ++d) s += qt[d] * ku[d];
          s = s * scale;
          prow[u] = s;
          if (u == 0 || mx < s) mx = s;
        }
        S z = S(0.0);
        for (int u = 0; u <= t; ++u) {
          prow[u] = s_exp(prow[u] - mx);
          z += prow[u];
        }
        for (int u = 0; u <= t; ++u) prow[u] = prow[u] / z;
        S* ot = &lc.o[static_cast<std::size_t>(t) * D + hoff];
        for (int u = 0; u <= t; ++u) {
          const S* vu = &lc.v[static_cast<std::size_t>(u) * D + hoff];
          const S pu = prow[u];
          for (int d = 0; d < hd; ++d) ot[d] += pu * vu[d];
        }
      }
    }
    for (int t = 0; t < n; ++t) {
      vec_mat(&lc.o[static_cast<std::size_t>(t) * D], lp + L.wo, D, D, tmp.data());
      S* xt = &x[static_cast<std::size_t>(t) * D];
      if (drop.active()) {
        for (int d = 0; d < D; ++d)
          xt[d] += tmp[d] * drop_scale(drop, 0, static_cast<std::uint64_t>(l),
                                       row, static_cast<std::uint64_t>(t),
                                       static_cast<std::uint64_t>(d));
      } else {
        for (int d = 0; d < D; ++d) xt[d] += tmp[d];
      }
    }
    lc.x_mid = x;

    // feed-forward block
    lc.rms2.resize(static_cast<std::size_t>(n));
    lc.xhat2.resize(static_cast<std::size_t>(n) * D);
    for (int t = 0; t < n; ++t) {
      lc.rms2[t] = rmsnorm_fwd(&lc.x_mid[static_cast<std::size_t>(t) * D], D,
                               &lc.xhat2[static_cast<std::size_t>(t) * D]);
      for (int d = 0; d < D; ++d)
        n2[static_cast<std::size_t>(t) * D + d] =
            lc.xhat2[static_cast<std::size_t>(t) * D + d] * lp[L.ln2 + d];
    }
    lc.hpre.resize(static_cast<std::size_t>(n) * F);
    lc.hact.resize(static_cast<std::size_t>(n) * F);
    for (int t = 0; t < n; ++t) {
      vec_mat(&n2[static_cast<std::size_t>(t) * D], lp + L.w1, D, F,
              &lc.hpre[static_cast<std::size_t>(t) * F]);
      for (int f = 0; f < F; ++f)
        lc.hact[static_cast<std::size_t>(t) * F + f] =
            gelu(lc.hpre[static_cast<std::size_t>(t) * F + f]);
      vec_mat(&lc.hact[static_cast<std::size_t>(t) * F], lp + L.w2, F, D,
              tmp.data());
      S* xt = &x[static_cast<std::size_t>(t) * D];
      if (drop.active()) {
        for (int d = 0; d < D; ++d)
          xt[d] += tmp[d] * drop_scale(drop, 1, static_cast<std::uint64_t>(l),
                                       row, static_cast<std::uint64_t>(t),
                                       static_cast<std::uint64_t>(d));
      } else {
        for (int d = 0; d < D; ++d) xt[d] += tmp[d];
      }
    }
  }

  rc.x_final = std::move(x);
  rc.rmsf.resize(static_cast<std::size_t>(n));
  rc.xhatf.resize(static_cast<std::size_t>(n) * D);
  rc.nf.resize(static_cast<std::size_t>(n) * D);
  for (int t = 0; t < n; ++t) {
    rc.rmsf[t] = rmsnorm_fwd(&rc.x_final[static_cast<std::size_t>(t) * D], D,
                             &rc.xhatf[static_cast<std::size_t>(t) * D]);
    for (int d = 0; d < D; ++d)
      rc.nf[static_cast<std::size_t>(t) * D + d] =
          rc.xhatf[static_cast<std::size_t>(t) * D + d] * P[L.lnf + d];
  }
}

// Backward from dnf (gradient w.r.t. the post-final-norm activations) down
// to the parameter gradient G. Mirrors forward_trunk exactly, in reverse.
template <class S>
void backward_trunk(const ModelConfig& cfg, const ParamLayout& L, const S* P,
                    const TokenId* toks, const DropoutSpec& drop,
                    std::uint64_t row, const RowCache<S>& rc,
                    const std::vector<S>& dnf, S* G) {
  const int D = cfg.model_dim, E = cfg.embed_dim, H = cfg.heads;
  const int hd = D / H, F = cfg.ffn_dim, n = rc.len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<S> dx(static_cast<std::size_t>(n) * D, S(0.0));
  for (int t = 0; t < n; ++t)
    rmsnorm_bwd(&dnf[static_cast<std::size_t>(t) * D],
                &rc.xhatf[static_cast<std::size_t>(t) * D], rc.rmsf[t],
                P + L.lnf, D, &dx[static_cast<std::size_t>(t) * D], G + L.lnf);

  std::vector<S> dn1(static_cast<std::size_t>(n) * D);
  std::vector<S> dn2(static_cast<std::size_t>(n) * D);
  std::vector<S> dq(static_cast<std::size_t>(n) * D);
  std::vector<S> dk(static_cast<std::size_t>(n) * D);
  std::vector<S> dv(static_cast<std::size_t>(n) * D);
  std::vector<S> do_(static_cast<std::size_t>(n) * D);
  std::vector<S> dtmp(static_cast<std::size_t>(std::max(D, F)));
  std::vector<S> n2row(static_cast<std::size_t>(D));
  std::vector<S> dhact(static_cast<std::size_t>(F));
  std::vector<S> dhpre(static_cast<std::size_t>(F));
  std::vector<S> dprow(0);

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const LayerCache<S>& lc = rc.layers[static_cast<std::size_t>(l)];
    const S* lp = P + L.layer_base(l);
    S* Gl = G + L.layer_base(l);

    // feed-forward block:  x_out = x_mid + drop(gelu(n2 W1) W2)
    std::fill(dn2.begin(), dn2.end(), S(0.0));
    for (int t = 0; t < n; ++t) {
      const S* dxt = &dx[static_cast<std::size_t>(t) * D];
      if (drop.active()) {
        for (int d = 0; d < D; ++d)
          dtmp[d] = dxt[d] * drop_scale(drop, 1, static_cast<std::uint64_t>(l),
                                        row, static_cast<std::uint64_t>(t),
                                        static_cast<std::uint64_t>(d));
      } else {
        for (int d = 0; d < D; ++d) dtmp[d] = dxt[d];
      }
      std::fill(dhact.begin(), dhact.end(), S(0.0));
      vec_mat_bwd(&lc.hact[static_cast<std::size_t>(t) * F], lp + L.w2,
                  dtmp.data(), F, D, dhact.data(), Gl + L.w2);
      for (int f = 0; f < F; ++f)
        dhpre[f] = dhact[f] *
                   gelu_grad(lc.hpre[static_cast<std::size_t>(t) * F + f]);
      for (int d = 0; d < D; ++d)
        n2row[d] = lc.xhat2[static_cast<std::size_t>(t) * D + d] * lp[L.ln2 + d];
      vec_mat_bwd(n2row.data(), lp + L.w1, dhpre.data(), D, F,
                  &dn2[static_cast<std::size_t>(t) * D], Gl + L.w1);
    }
    // residual passthrough keeps dx; the norm path adds to it
    for (int t = 0; t < n; ++t)
      rmsnorm_bwd(&dn2[static_cast<std::size_t>(t) * D],
                  &lc.xhat2[static_cast<std::size_t>(t) * D], lc.rms2[t],
                  lp + L.ln2, D, &dx[static_cast<std::size_t>(t) * D],
                  Gl + L.ln2);

    // attention block:  x_mid = x_in + drop(o Wo)
    std::fill(do_.begin(), do_.end(), S(0.0));
    for (int t = 0; t < n; ++t) {
      const S* dxt = &dx[static_cast<std::size_t>(t) * D];
      if (drop.active()) {
        for (int d = 0; d < D; ++d)
          dtmp[d] = dxt[d] * drop_scale(drop, 0, static_cast<std::uint64_t>(l),
                                        row, static_cast<std::uint64_t>(t),
                                        static_cast<std::uint64_t>(d));
      } else {
        for (int d = 0; d < D; ++d) dtmp[d] = dxt[d];
      }
      vec_mat_bwd(&lc.o[static_cast<std::size_t>(t) * D], lp + L.wo,
                  dtmp.data(), D, D, &do_[static_cast<std::size_t>(t) * D],
                  Gl + L.wo);
    }
    std::fill(dq.begin(), dq.end(), S(0.0));
    std::fill(dk.begin(), dk.end(), S(0.0));
    std::fill(dv.begin(), dv.end(), S(0.0));
    for (int h = 0; h < H; ++h) {
      const int hoff = h * hd;
      for (int t = 0; t < n; ++t) {
        const S* prow = &lc.p[(static_cast<std::size_t>(h) * n + t) * n];
        const S* dot = &do_[static_cast<std::size_t>(t) * D + hoff];
        dprow.assign(static_cast<std::size_t>(t) + 1, S(0.0));
        S pdp = S(0.0);
        for (int u = 0; u <= t; ++u) {
          const S* vu = &lc.v[static_cast<std::size_t>(u) * D + hoff];
          S* dvu = &dv[static_cast<std::size_t>(u) * D + hoff];
          S g = S(0.0);
          for (int d = 0; d < hd; ++d) {
            g += dot[d] * vu[d];
            dvu[d] += prow[u] * dot[d];
          }
          dprow[u] = g;
          pdp += prow[u] * g;
        }
        const S* qt = &lc.q[static_cast<std::size_t>(t) * D + hoff];
        S* dqt = &dq[static_cast<std::size_t>(t) * D + hoff];
        for (int u = 0; u <= t; ++u) {
          const S ds = prow[u] * (dprow[u] - pdp) * scale;
          const S* ku = &lc.k[static_cast<std::size_t>(u) * D + hoff];
          S* dku = &dk[static_cast<std::size_t>(u) * D + hoff];
          for (int d = 0; d < hd; ++d) {
            dqt[d] += ds * ku[d];
            dku[d] += ds * qt[d];
          }
        }
      }
    }
    std::fill(dn1.begin(), dn1.end(), S(0.0));
    for (int t = 0; t < n; ++t) {
      // n1 recomputed from the cached normalized stream
      for (int d = 0; d < D; ++d)
        n2row[d] = lc.xhat1[static_cast<std::size_t>(t) * D + d] * lp[L.ln1 + d];
      S* dn1t = &dn1[static_cast<std::size_t>(t) * D];
      vec_mat_bwd(n2row.data(), lp + L.wq, &dq[static_cast<std::size_t>(t) * D],
                  D, D, dn1t, Gl + L.wq);
      vec_mat_bwd(n2row.data(), lp + L.wk, &dk[static_cast<std::size_t>(t) * D],
                  D, D, dn1t, Gl + L.wk);
      vec_mat_bwd(n2row.data(), lp + L.wv, &dv[static_cast<std::size_t>(t) * D],
                  D, D, dn1t, Gl + L.wv);
    }
    for (int t = 0; t < n; ++t)
      rmsnorm_bwd(&dn1[static_cast<std::size_t>(t) * D],
                  &lc.xhat1[static_cast<std::size_t>(t) * D], lc.rms1[t],
                  lp + L.ln1, D, &dx[static_cast<std::size_t>(t) * D],
                  Gl + L.ln1);
  }

  // embeddings
  for (int t = 0; t < n; ++t) {
    const S* dxt = &dx[static_cast<std::size_t>(t) * D];
    S* gpos = G + L.pos_emb + static_cast<std::size_t>(t) * D;
    for (int d = 0; d < D; ++d) gpos[d] += dxt[d];
    const std::size_t erow = L.tok_emb + static_cast<std::size_t>(toks[t]) * E;
    if (L.has_proj) {
      const S* emb = P + erow;
      vec_mat_bwd(emb, P + L.in_proj, dxt, E, D, G + erow, G + L.in_proj);
    } else {
      S* ge = G + erow;
      for (int d = 0; d < D; ++d) ge[d] += dxt[d];
    }
  }
}

// --------------------------------------------------------------------------
// output head
// --------------------------------------------------------------------------

template <class S>
void logits_at(const ModelConfig& cfg, const ParamLayout& L, const S* P,
               const RowCache<S>& rc, int t, S* out) {
  const int D = cfg.model_dim, V = cfg.vocab_size;
  const S* nft = &rc.nf[static_cast<std::size_t>(t) * D];
  vec_mat(nft, P + L.head, D, V, out);
}

// log-sum-exp over the vocabulary, stabilized
template <class S>
inline S logsumexp(const S* lg, int V) {
  S mx = lg[0];
  for (int v = 1; v < V; ++v)
    if (mx < lg[v]) mx = lg[v];
  S z = S(0.0);
  for (int v = 0; v < V; ++v) z += s_exp(lg[v] - mx);
  return mx + s_log(z);
}

}  // namespace paml::detail
