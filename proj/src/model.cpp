#include "oracle/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace oracle {

using kern::add_bias_rows;
using kern::add_inplace;
using kern::colsum_acc;
using kern::dot;
using kern::fast_exp;
using kern::gemm;
using kern::transpose;

// ---------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (hidden <= 0 || latent <= 0 || layers <= 0 || heads <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (hidden % heads != 0) {
    throw ConfigError("heads (" + std::to_string(heads) +
                      ") must divide hidden width (" + std::to_string(hidden) +
                      ")");
  }
  if (vocab != classes + 1) {
    throw ConfigError("vocab must be classes + 1 (the MASK symbol)");
  }
  if (seq_len <= 0) throw ConfigError("seq_len must be positive");
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("dropout must lie in [0, 1)");
  }
  if (kl_weight < 0.0 || contrastive_weight < 0.0) {
    throw ConfigError("loss weights must be nonnegative");
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "hidden " << hidden << "\nlatent " << latent << "\nlayers " << layers
     << "\nheads " << heads << "\nvocab " << vocab << "\nclasses " << classes
     << "\nseq_len " << seq_len << "\nffn_mult " << ffn_mult << "\nkl_weight "
     << kl_weight << "\ncontrastive_weight " << contrastive_weight
     << "\ndropout " << dropout << "\n";
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string key;
  while (is >> key) {
    if (key == "hidden") is >> c.hidden;
    else if (key == "latent") is >> c.latent;
    else if (key == "layers") is >> c.layers;
    else if (key == "heads") is >> c.heads;
    else if (key == "vocab") is >> c.vocab;
    else if (key == "classes") is >> c.classes;
    else if (key == "seq_len") is >> c.seq_len;
    else if (key == "ffn_mult") is >> c.ffn_mult;
    else if (key == "kl_weight") is >> c.kl_weight;
    else if (key == "contrastive_weight") is >> c.contrastive_weight;
    else if (key == "dropout") is >> c.dropout;
    else throw ConfigError("unknown model config key: " + key);
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------
// Params

template <class T>
void Params<T>::init(const ModelConfig& cfg, Rng* rng) {
  const int C = cfg.hidden, C0 = cfg.latent, F = cfg.ffn_dim();
  const T sd = T(0.02);
  auto fill_mat = [&](Mat<T>& m, int r, int c) {
    m.resize(r, c);
    if (rng) {
      for (auto& v : m.d) v = static_cast<T>(rng->normal()) * sd;
    }
  };
  fill_mat(tok_emb, cfg.vocab, C);
  fill_mat(pos_emb, cfg.seq_len, C);
  if (rng) {
    emb_ln_enc.init(C);
    emb_ln_dec.init(C);
  } else {
    emb_ln_enc.zeros(C);
    emb_ln_dec.zeros(C);
  }
  enc.assign(cfg.layers, {});
  for (auto& l : enc) {
    l.wq.init(C, C, rng, sd);
    l.wk.init(C, C, rng, sd);
    l.wv.init(C, C, rng, sd);
    l.wo.init(C, C, rng, sd);
    rng ? l.ln1.init(C) : l.ln1.zeros(C);
    l.ff1.init(C, F, rng, sd);
    l.ff2.init(F, C, rng, sd);
    rng ? l.ln2.init(C) : l.ln2.zeros(C);
  }
  dec.assign(cfg.layers, {});
  for (auto& l : dec) {
    l.sq.init(C, C, rng, sd);
    l.sk.init(C, C, rng, sd);
    l.sv.init(C, C, rng, sd);
    l.so.init(C, C, rng, sd);
    rng ? l.ln1.init(C) : l.ln1.zeros(C);
    l.cq.init(C, C, rng, sd);
    l.ck.init(C, C, rng, sd);
    l.cv.init(C, C, rng, sd);
    l.co.init(C, C, rng, sd);
    rng ? l.ln2.init(C) : l.ln2.zeros(C);
    l.ff1.init(C, F, rng, sd);
    l.ff2.init(F, C, rng, sd);
    rng ? l.ln3.init(C) : l.ln3.zeros(C);
  }
  fc_mu.init(C, C0, rng, sd);
  fc_sigma.init(C, C0, rng, sd);
  fc_z.init(C0, C, rng, sd);
  fc_head.init(C, cfg.classes, rng, sd);
}

template <class T>
size_t Params<T>::tensor_count() const {
  size_t n = 0;
  const_cast<Params<T>*>(this)->visit(
      [&n](const std::string&, T*, size_t) { ++n; });
  return n;
}

// ---------------------------------------------------------------------
// Small helpers

namespace {

template <class T>
void linear_fwd(const Mat<T>& x, const Linear<T>& lin, Mat<T>& y) {
  y.resize(x.rows, lin.w.cols);
  gemm(x.d.data(), lin.w.d.data(), y.d.data(), x.rows, x.cols, lin.w.cols,
       false);
  add_bias_rows(y.d.data(), lin.b.data(), y.rows, y.cols);
}

// dx += dy * w^T ; dw += x^T * dy ; db += colsum(dy)
template <class T>
void linear_bwd(const Mat<T>& x, const Linear<T>& lin, const Mat<T>& dy,
                Mat<T>* dx, Linear<T>& dlin, AttnScratch<T>& s) {
  if (dx) {
    s.w_t.resize(lin.w.cols, lin.w.rows);
    transpose(lin.w.d.data(), s.w_t.d.data(), lin.w.rows, lin.w.cols);
    gemm(dy.d.data(), s.w_t.d.data(), dx->d.data(), dy.rows, dy.cols,
         lin.w.rows, true);
  }
  s.x_t.resize(x.cols, x.rows);
  transpose(x.d.data(), s.x_t.d.data(), x.rows, x.cols);
  gemm(s.x_t.d.data(), dy.d.data(), dlin.w.d.data(), x.cols, x.rows, dy.cols,
       true);
  colsum_acc(dy.d.data(), dlin.b.data(), dy.rows, dy.cols);
}

template <class T>
std::vector<T> col_means(const Mat<T>& m) {
  std::vector<double> acc(m.cols, 0.0);
  for (int i = 0; i < m.rows; ++i) {
    const T* r = m.row(i);
    for (int j = 0; j < m.cols; ++j) acc[j] += static_cast<double>(r[j]);
  }
  std::vector<T> out(m.cols);
  for (int j = 0; j < m.cols; ++j) {
    out[j] = static_cast<T>(acc[j] / m.rows);
  }
  return out;
}

template <class T>
void fill_dropout(Mat<T>& mask, int rows, int cols, T p, Rng& rng) {
  mask.resize(rows, cols);
  const T keep = T(1) / (T(1) - p);
  for (auto& v : mask.d) {
    v = (static_cast<T>(rng.uniform()) >= p) ? keep : T(0);
  }
}

template <class T>
void apply_mask(Mat<T>& x, const Mat<T>& mask) {
  for (size_t i = 0; i < x.d.size(); ++i) x.d[i] *= mask.d[i];
}

}  // namespace

// ---------------------------------------------------------------------
// CvaeModel

template <class T>
CvaeModel<T>::CvaeModel(const ModelConfig& config, uint64_t seed)
    : cfg(config) {
  cfg.validate();
  Rng rng(mix_seed(seed));
  params.init(cfg, &rng);
}

template <class T>
void CvaeModel<T>::check_tokens(const std::vector<int>& tokens,
                                bool allow_mask) const {
  if (static_cast<int>(tokens.size()) != cfg.seq_len) {
    throw StructuralError("token sequence has length " +
                          std::to_string(tokens.size()) + ", expected " +
                          std::to_string(cfg.seq_len));
  }
  const int limit = allow_mask ? cfg.vocab : cfg.classes;
  for (int t : tokens) {
    if (t < 0 || t >= limit) {
      throw StructuralError("token id " + std::to_string(t) +
                            " out of vocabulary");
    }
  }
}

// ---- attention -------------------------------------------------------

namespace {

// Forward attention. Queries come from x_q, keys/values from x_kv.
// If causal, query row t attends to key rows [0, t].
template <class T>
void attention_fwd(const ModelConfig& cfg, const Mat<T>& x_q,
                   const Mat<T>& x_kv, const Linear<T>& lq,
                   const Linear<T>& lk, const Linear<T>& lv,
                   const Linear<T>& lo, bool causal, AttnCache<T>& c,
                   AttnScratch<T>& s, Mat<T>& out) {
  const int Sq = x_q.rows, Skv = x_kv.rows;
  const int H = cfg.heads, dh = cfg.head_dim(), C = cfg.hidden;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  linear_fwd(x_q, lq, c.q);
  linear_fwd(x_kv, lk, c.k);
  linear_fwd(x_kv, lv, c.v);
  c.concat.resize(Sq, C);
  if (static_cast<int>(c.p.size()) != H) c.p.assign(H, {});

  for (int h = 0; h < H; ++h) {
    const int off = h * dh;
    s.qh.resize(Sq, dh);
    for (int t = 0; t < Sq; ++t) {
      const T* q = c.q.row(t) + off;
      T* qs = s.qh.row(t);
      for (int kk = 0; kk < dh; ++kk) qs[kk] = q[kk] * scale;
    }
    s.kht.resize(dh, Skv);
    for (int j = 0; j < Skv; ++j) {
      const T* k = c.k.row(j) + off;
      for (int kk = 0; kk < dh; ++kk) s.kht.at(kk, j) = k[kk];
    }
    s.vh.resize(Skv, dh);
    for (int j = 0; j < Skv; ++j) {
      std::memcpy(s.vh.row(j), c.v.row(j) + off, sizeof(T) * dh);
    }

    Mat<T>& P = c.p[h];
    P.resize(Sq, Skv);
    for (int t = 0; t < Sq; ++t) {
      const int valid = causal ? t + 1 : Skv;
      T* prow = P.row(t);
      const T* q = s.qh.row(t);
      for (int kk = 0; kk < dh; ++kk) {
        const T qv = q[kk];
        const T* krow = s.kht.row(kk);
#pragma omp simd
        for (int j = 0; j < valid; ++j) prow[j] += qv * krow[j];
      }
      kern::serial::softmax_rows(prow, 1, valid);
    }

    for (int t = 0; t < Sq; ++t) {
      const int valid = causal ? t + 1 : Skv;
      const T* prow = P.row(t);
      T* orow = c.concat.row(t) + off;
      std::fill(orow, orow + dh, T(0));
      for (int j = 0; j < valid; ++j) {
        const T pv = prow[j];
        const T* vrow = s.vh.row(j);
#pragma omp simd
        for (int kk = 0; kk < dh; ++kk) orow[kk] += pv * vrow[kk];
      }
    }
  }
  linear_fwd(c.concat, lo, out);
}

// Backward attention. d_out is the gradient on the projected output.
// dx_q and dx_kv accumulate; for self-attention pass the same matrix.
template <class T>
void attention_bwd(const ModelConfig& cfg, const Mat<T>& x_q,
                   const Mat<T>& x_kv, const Linear<T>& lq,
                   const Linear<T>& lk, const Linear<T>& lv,
                   const Linear<T>& lo, bool causal, const AttnCache<T>& c,
                   const Mat<T>& d_out, Linear<T>& gq, Linear<T>& gk,
                   Linear<T>& gv, Linear<T>& go, Mat<T>& dx_q, Mat<T>& dx_kv,
                   AttnScratch<T>& s, Mat<T>& d_concat) {
  const int Sq = x_q.rows, Skv = x_kv.rows;
  const int H = cfg.heads, dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  d_concat.resize(Sq, cfg.hidden);
  d_concat.zero();
  linear_bwd(c.concat, lo, d_out, &d_concat, go, s);

  s.dq.resize(Sq, cfg.hidden);
  s.dq.zero();
  s.dk.resize(Skv, cfg.hidden);
  s.dk.zero();
  s.dv.resize(Skv, cfg.hidden);
  s.dv.zero();

  for (int h = 0; h < H; ++h) {
    const int off = h * dh;
    // Rebuild per-head views.
    s.qh.resize(Sq, dh);
    for (int t = 0; t < Sq; ++t) {
      const T* q = c.q.row(t) + off;
      T* qs = s.qh.row(t);
      for (int kk = 0; kk < dh; ++kk) qs[kk] = q[kk] * scale;
    }
    s.kh.resize(Skv, dh);
    s.vh.resize(Skv, dh);
    for (int j = 0; j < Skv; ++j) {
      std::memcpy(s.kh.row(j), c.k.row(j) + off, sizeof(T) * dh);
      std::memcpy(s.vh.row(j), c.v.row(j) + off, sizeof(T) * dh);
    }
    s.doh.resize(Sq, dh);
    for (int t = 0; t < Sq; ++t) {
      std::memcpy(s.doh.row(t), d_concat.row(t) + off, sizeof(T) * dh);
    }

    s.dqh.resize(Sq, dh);
    s.dqh.zero();
    s.dkh.resize(Skv, dh);
    s.dkh.zero();
    s.dvh.resize(Skv, dh);
    s.dvh.zero();
    if (s.ds.size() < static_cast<size_t>(Skv)) s.ds.resize(Skv);

    const Mat<T>& P = c.p[h];
    for (int t = 0; t < Sq; ++t) {
      const int valid = causal ? t + 1 : Skv;
      const T* prow = P.row(t);
      const T* doh = s.doh.row(t);
      // dP, then softmax backward into ds.
      T inner = T(0);
      for (int j = 0; j < valid; ++j) {
        const T dp = dot(doh, s.vh.row(j), dh);
        s.ds[j] = dp;
        inner += prow[j] * dp;
      }
      for (int j = 0; j < valid; ++j) {
        s.ds[j] = prow[j] * (s.ds[j] - inner);
      }
      // dV += P^T dOh ; dQ += dS K ; dK += dS^T Q
      T* dqh = s.dqh.row(t);
      for (int j = 0; j < valid; ++j) {
        const T pv = prow[j];
        const T dsv = s.ds[j];
        T* dvh = s.dvh.row(j);
        T* dkh = s.dkh.row(j);
        const T* kr = s.kh.row(j);
        const T* qr = s.qh.row(t);
#pragma omp simd
        for (int kk = 0; kk < dh; ++kk) {
          dvh[kk] += pv * doh[kk];
          dqh[kk] += dsv * kr[kk];
          dkh[kk] += dsv * qr[kk];
        }
      }
    }
    // Scatter back into full-width projection gradients.
    for (int t = 0; t < Sq; ++t) {
      T* dst = s.dq.row(t) + off;
      const T* src = s.dqh.row(t);
      for (int kk = 0; kk < dh; ++kk) dst[kk] += src[kk] * scale;
    }
    for (int j = 0; j < Skv; ++j) {
      T* dstk = s.dk.row(j) + off;
      T* dstv = s.dv.row(j) + off;
      const T* srk = s.dkh.row(j);
      const T* srv = s.dvh.row(j);
      for (int kk = 0; kk < dh; ++kk) {
        dstk[kk] += srk[kk];
        dstv[kk] += srv[kk];
      }
    }
  }
  linear_bwd(x_q, lq, s.dq, &dx_q, gq, s);
  linear_bwd(x_kv, lk, s.dk, &dx_kv, gk, s);
  linear_bwd(x_kv, lv, s.dv, &dx_kv, gv, s);
}

template <class T>
void ln_fwd_cached(const LayerNormParam<T>& p, const Mat<T>& res,
                   LnCache<T>& c, Mat<T>& out) {
  const int S = res.rows, C = res.cols;
  c.in = res;
  c.mean.resize(S);
  c.rstd.resize(S);
  out.resize(S, C);
  kern::layernorm_fwd(res.d.data(), p.gamma.data(), p.beta.data(),
                      out.d.data(), c.mean.data(), c.rstd.data(), S, C);
}

template <class T>
void ln_bwd_cached(const LayerNormParam<T>& p, const LnCache<T>& c,
                   const Mat<T>& dy, LayerNormParam<T>& g, Mat<T>& dx) {
  const int S = c.in.rows, C = c.in.cols;
  dx.resize(S, C);
  kern::serial::layernorm_bwd(c.in.d.data(), p.gamma.data(), dy.d.data(),
                              c.mean.data(), c.rstd.data(), dx.d.data(),
                              g.gamma.data(), g.beta.data(), S, C);
}

}  // namespace

// ---- encoder ----------------------------------------------------------

template <class T>
void CvaeModel<T>::encode_fwd(const std::vector<int>& tokens, EncCache<T>& c,
                              Rng* drop_rng) const {
  const int S = cfg.seq_len, C = cfg.hidden;
  c.tokens = tokens;
  c.emb.resize(S, C);
  for (int t = 0; t < S; ++t) {
    const T* te = params.tok_emb.row(tokens[t]);
    const T* pe = params.pos_emb.row(t);
    T* e = c.emb.row(t);
#pragma omp simd
    for (int j = 0; j < C; ++j) e[j] = te[j] + pe[j];
  }
  ln_fwd_cached(params.emb_ln_enc, c.emb, c.emb_ln, c.x0);
  const T p = static_cast<T>(cfg.dropout);
  if (drop_rng && p > 0) {
    fill_dropout(c.emb_drop, S, C, p, *drop_rng);
    apply_mask(c.x0, c.emb_drop);
  } else {
    c.emb_drop.rows = 0;
  }

  if (static_cast<int>(c.layers.size()) != cfg.layers) {
    c.layers.assign(cfg.layers, {});
  }
  // Scratch local to this encode; attention fwd only needs small views.
  AttnScratch<T> s;
  const Mat<T>* x = &c.x0;
  for (int l = 0; l < cfg.layers; ++l) {
    EncLayerCache<T>& lc = c.layers[l];
    const EncoderLayerParam<T>& lp = params.enc[l];
    lc.x_in = *x;
    Mat<T>& attn_out = lc.ln1.in;  // reuse: res1 built in place
    attention_fwd(cfg, lc.x_in, lc.x_in, lp.wq, lp.wk, lp.wv, lp.wo,
                  /*causal=*/false, lc.attn, s, attn_out);
    if (drop_rng && p > 0) {
      fill_dropout(lc.attn.proj_drop, S, C, p, *drop_rng);
      apply_mask(attn_out, lc.attn.proj_drop);
    } else {
      lc.attn.proj_drop.rows = 0;
    }
    add_inplace(attn_out.d.data(), lc.x_in.d.data(), attn_out.d.size());
    // LayerNorm 1 (cache keeps the pre-norm sum).
    lc.ln1.mean.resize(S);
    lc.ln1.rstd.resize(S);
    lc.x_mid.resize(S, C);
    kern::layernorm_fwd(attn_out.d.data(), lp.ln1.gamma.data(),
                        lp.ln1.beta.data(), lc.x_mid.d.data(),
                        lc.ln1.mean.data(), lc.ln1.rstd.data(), S, C);
    // FFN
    linear_fwd(lc.x_mid, lp.ff1, lc.ff_pre);
    lc.ff_act.resize(S, cfg.ffn_dim());
    kern::gelu_fwd(lc.ff_pre.d.data(), lc.ff_act.d.data(), lc.ff_pre.size());
    Mat<T>& ff_out = lc.ln2.in;
    linear_fwd(lc.ff_act, lp.ff2, ff_out);
    if (drop_rng && p > 0) {
      fill_dropout(lc.ff_drop, S, C, p, *drop_rng);
      apply_mask(ff_out, lc.ff_drop);
    } else {
      lc.ff_drop.rows = 0;
    }
    add_inplace(ff_out.d.data(), lc.x_mid.d.data(), ff_out.d.size());
    lc.ln2.mean.resize(S);
    lc.ln2.rstd.resize(S);
    lc.x_out.resize(S, C);
    kern::layernorm_fwd(ff_out.d.data(), lp.ln2.gamma.data(),
                        lp.ln2.beta.data(), lc.x_out.d.data(),
                        lc.ln2.mean.data(), lc.ln2.rstd.data(), S, C);
    x = &lc.x_out;
  }
}

// d_out: gradient on the encoder output; scatters through to embeddings.
template <class T>
static void encode_bwd_impl(const CvaeModel<T>& model, const EncCache<T>& c,
                            Mat<T> d_out, Params<T>& g, AttnScratch<T>& s,
                            Mat<T>& m1, Mat<T>& m2) {
  const ModelConfig& cfg = model.cfg;
  const int S = cfg.seq_len;
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const EncLayerCache<T>& lc = c.layers[l];
    const EncoderLayerParam<T>& lp = model.params.enc[l];
    Params<T>& gp = g;
    // LN2
    Mat<T>& d_res2 = m1;
    ln_bwd_cached(lp.ln2, lc.ln2, d_out, gp.enc[l].ln2, d_res2);
    // FFN backward; d_res2 also flows to x_mid via the residual.
    Mat<T> d_ff = d_res2;  // copy: ff-branch gradient
    if (lc.ff_drop.rows) apply_mask(d_ff, lc.ff_drop);
    Mat<T>& d_act = m2;
    d_act.resize(S, cfg.ffn_dim());
    d_act.zero();
    linear_bwd(lc.ff_act, lp.ff2, d_ff, &d_act, gp.enc[l].ff2, s);
    Mat<T> d_pre(S, cfg.ffn_dim());
    kern::gelu_bwd(lc.ff_pre.d.data(), d_act.d.data(), d_pre.d.data(),
                   d_pre.size());
    Mat<T> d_mid = d_res2;  // residual path
    linear_bwd(lc.x_mid, lp.ff1, d_pre, &d_mid, gp.enc[l].ff1, s);
    // LN1
    Mat<T>& d_res1 = m1;
    ln_bwd_cached(lp.ln1, lc.ln1, d_mid, gp.enc[l].ln1, d_res1);
    // Attention branch + residual.
    Mat<T> d_attn = d_res1;
    if (lc.attn.proj_drop.rows) apply_mask(d_attn, lc.attn.proj_drop);
    d_out = d_res1;  // becomes dx_in (residual); attention adds to it
    attention_bwd(cfg, lc.x_in, lc.x_in, lp.wq, lp.wk, lp.wv, lp.wo,
                  /*causal=*/false, lc.attn, d_attn, gp.enc[l].wq,
                  gp.enc[l].wk, gp.enc[l].wv, gp.enc[l].wo, d_out, d_out, s,
                  m2);
  }
  // Embedding LN and dropout.
  if (c.emb_drop.rows) apply_mask(d_out, c.emb_drop);
  Mat<T>& d_emb = m1;
  ln_bwd_cached(model.params.emb_ln_enc, c.emb_ln, d_out, g.emb_ln_enc,
                d_emb);
  for (int t = 0; t < S; ++t) {
    add_inplace(g.tok_emb.row(c.tokens[t]), d_emb.row(t), cfg.hidden);
    add_inplace(g.pos_emb.row(t), d_emb.row(t), cfg.hidden);
  }
}

// ---- decoder ----------------------------------------------------------

template <class T>
void CvaeModel<T>::decode_fwd(const std::vector<int>& targets,
                              const Mat<T>& memory, DecCache<T>& c,
                              Rng* drop_rng) const {
  const int S = cfg.seq_len, C = cfg.hidden;
  c.targets = targets;
  c.emb.resize(S, C);
  {
    const T* sos = memory.row(0);
    const T* pe = params.pos_emb.row(0);
    T* e = c.emb.row(0);
    for (int j = 0; j < C; ++j) e[j] = sos[j] + pe[j];
  }
  for (int t = 1; t < S; ++t) {
    const T* te = params.tok_emb.row(targets[t - 1]);
    const T* pe = params.pos_emb.row(t);
    T* e = c.emb.row(t);
#pragma omp simd
    for (int j = 0; j < C; ++j) e[j] = te[j] + pe[j];
  }
  ln_fwd_cached(params.emb_ln_dec, c.emb, c.emb_ln, c.x0);
  const T p = static_cast<T>(cfg.dropout);
  if (drop_rng && p > 0) {
    fill_dropout(c.emb_drop, S, C, p, *drop_rng);
    apply_mask(c.x0, c.emb_drop);
  } else {
    c.emb_drop.rows = 0;
  }

  if (static_cast<int>(c.layers.size()) != cfg.layers) {
    c.layers.assign(cfg.layers, {});
  }
  AttnScratch<T> s;
  const Mat<T>* x = &c.x0;
  for (int l = 0; l < cfg.layers; ++l) {
    DecLayerCache<T>& lc = c.layers[l];
    const DecoderLayerParam<T>& lp = params.dec[l];
    lc.x_in = *x;
    // Masked self-attention.
    Mat<T>& self_out = lc.ln1.in;
    attention_fwd(cfg, lc.x_in, lc.x_in, lp.sq, lp.sk, lp.sv, lp.so,
                  /*causal=*/true, lc.self, s, self_out);
    if (drop_rng && p > 0) {
      fill_dropout(lc.self.proj_drop, S, C, p, *drop_rng);
      apply_mask(self_out, lc.self.proj_drop);
    } else {
      lc.self.proj_drop.rows = 0;
    }
    add_inplace(self_out.d.data(), lc.x_in.d.data(), self_out.d.size());
    lc.ln1.mean.resize(S);
    lc.ln1.rstd.resize(S);
    lc.x_mid1.resize(S, C);
    kern::layernorm_fwd(self_out.d.data(), lp.ln1.gamma.data(),
                        lp.ln1.beta.data(), lc.x_mid1.d.data(),
                        lc.ln1.mean.data(), lc.ln1.rstd.data(), S, C);
    // Cross-attention over memory.
    Mat<T>& cross_out = lc.ln2.in;
    attention_fwd(cfg, lc.x_mid1, memory, lp.cq, lp.ck, lp.cv, lp.co,
                  /*causal=*/false, lc.cross, s, cross_out);
    if (drop_rng && p > 0) {
      fill_dropout(lc.cross.proj_drop, S, C, p, *drop_rng);
      apply_mask(cross_out, lc.cross.proj_drop);
    } else {
      lc.cross.proj_drop.rows = 0;
    }
    add_inplace(cross_out.d.data(), lc.x_mid1.d.data(), cross_out.d.size());
    lc.ln2.mean.resize(S);
    lc.ln2.rstd.resize(S);
    lc.x_mid2.resize(S, C);
    kern::layernorm_fwd(cross_out.d.data(), lp.ln2.gamma.data(),
                        lp.ln2.beta.data(), lc.x_mid2.d.data(),
                        lc.ln2.mean.data(), lc.ln2.rstd.data(), S, C);
    // FFN
    linear_fwd(lc.x_mid2, lp.ff1, lc.ff_pre);
    lc.ff_act.resize(S, cfg.ffn_dim());
    kern::gelu_fwd(lc.ff_pre.d.data(), lc.ff_act.d.data(), lc.ff_pre.size());
    Mat<T>& ff_out = lc.ln3.in;
    linear_fwd(lc.ff_act, lp.ff2, ff_out);
    if (drop_rng && p > 0) {
      fill_dropout(lc.ff_drop, S, C, p, *drop_rng);
      apply_mask(ff_out, lc.ff_drop);
    } else {
      lc.ff_drop.rows = 0;
    }
    add_inplace(ff_out.d.data(), lc.x_mid2.d.data(), ff_out.d.size());
    lc.ln3.mean.resize(S);
    lc.ln3.rstd.resize(S);
    lc.x_out.resize(S, C);
    kern::layernorm_fwd(ff_out.d.data(), lp.ln3.gamma.data(),
                        lp.ln3.beta.data(), lc.x_out.d.data(),
                        lc.ln3.mean.data(), lc.ln3.rstd.data(), S, C);
    x = &lc.x_out;
  }
}

// d_out: gradient on decoder hidden states. Accumulates dMemory (including
// row 0, which doubles as the SOS embedding gradient).
template <class T>
static void decode_bwd_impl(const CvaeModel<T>& model, const DecCache<T>& c,
                            const Mat<T>& memory, Mat<T> d_out, Params<T>& g,
                            Mat<T>& d_memory, AttnScratch<T>& s, Mat<T>& m1,
                            Mat<T>& m2) {
  const ModelConfig& cfg = model.cfg;
  const int S = cfg.seq_len;
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const DecLayerCache<T>& lc = c.layers[l];
    const DecoderLayerParam<T>& lp = model.params.dec[l];
    // LN3 + FFN
    Mat<T>& d_res3 = m1;
    ln_bwd_cached(lp.ln3, lc.ln3, d_out, g.dec[l].ln3, d_res3);
    Mat<T> d_ff = d_res3;
    if (lc.ff_drop.rows) apply_mask(d_ff, lc.ff_drop);
    Mat<T>& d_act = m2;
    d_act.resize(S, cfg.ffn_dim());
    d_act.zero();
    linear_bwd(lc.ff_act, lp.ff2, d_ff, &d_act, g.dec[l].ff2, s);
    Mat<T> d_pre(S, cfg.ffn_dim());
    kern::gelu_bwd(lc.ff_pre.d.data(), d_act.d.data(), d_pre.d.data(),
                   d_pre.size());
    Mat<T> d_mid2 = d_res3;
    linear_bwd(lc.x_mid2, lp.ff1, d_pre, &d_mid2, g.dec[l].ff1, s);
    // LN2 + cross-attention
    Mat<T>& d_res2 = m1;
    ln_bwd_cached(lp.ln2, lc.ln2, d_mid2, g.dec[l].ln2, d_res2);
    Mat<T> d_cross = d_res2;
    if (lc.cross.proj_drop.rows) apply_mask(d_cross, lc.cross.proj_drop);
    Mat<T> d_mid1 = d_res2;
    attention_bwd(cfg, lc.x_mid1, memory, lp.cq, lp.ck, lp.cv, lp.co,
                  /*causal=*/false, lc.cross, d_cross, g.dec[l].cq,
                  g.dec[l].ck, g.dec[l].cv, g.dec[l].co, d_mid1, d_memory, s,
                  m2);
    // LN1 + masked self-attention
    Mat<T>& d_res1 = m1;
    ln_bwd_cached(lp.ln1, lc.ln1, d_mid1, g.dec[l].ln1, d_res1);
    Mat<T> d_self = d_res1;
    if (lc.self.proj_drop.rows) apply_mask(d_self, lc.self.proj_drop);
    d_out = d_res1;
    attention_bwd(cfg, lc.x_in, lc.x_in, lp.sq, lp.sk, lp.sv, lp.so,
                  /*causal=*/true, lc.self, d_self, g.dec[l].sq, g.dec[l].sk,
                  g.dec[l].sv, g.dec[l].so, d_out, d_out, s, m2);
  }
  if (c.emb_drop.rows) apply_mask(d_out, c.emb_drop);
  Mat<T>& d_emb = m1;
  ln_bwd_cached(model.params.emb_ln_dec, c.emb_ln, d_out, g.emb_ln_dec,
                d_emb);
  // Row 0 is the SOS embedding, i.e. memory row 0.
  add_inplace(d_memory.row(0), d_emb.row(0), cfg.hidden);
  add_inplace(g.pos_emb.row(0), d_emb.row(0), cfg.hidden);
  for (int t = 1; t < S; ++t) {
    add_inplace(g.tok_emb.row(c.targets[t - 1]), d_emb.row(t), cfg.hidden);
    add_inplace(g.pos_emb.row(t), d_emb.row(t), cfg.hidden);
  }
}

// ---- public eval-mode wrappers -----------------------------------------

template <class T>
Mat<T> CvaeModel<T>::encode(const std::vector<int>& tokens) const {
  check_tokens(tokens, /*allow_mask=*/true);
  EncCache<T> c;
  encode_fwd(tokens, c, nullptr);
  Mat<T> out = c.out();
  for (T v : out.d) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericalError("encoder produced non-finite activations");
    }
  }
  return out;
}

template <class T>
void CvaeModel<T>::pool_project(const Mat<T>& hidden, std::vector<T>& mu,
                                std::vector<T>& logvar) const {
  for (T v : hidden.d) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericalError("pool_project: non-finite input");
    }
  }
  std::vector<T> pooled = col_means(hidden);
  Mat<T> pm(1, cfg.hidden);
  std::copy(pooled.begin(), pooled.end(), pm.d.begin());
  Mat<T> mu_m, lv_m;
  linear_fwd(pm, params.fc_mu, mu_m);
  linear_fwd(pm, params.fc_sigma, lv_m);
  mu = mu_m.d;
  logvar = lv_m.d;
}

template <class T>
std::vector<T> CvaeModel<T>::reparameterize(const std::vector<T>& mu,
                                            const std::vector<T>& logvar,
                                            const std::vector<T>& eps) {
  std::vector<T> z(mu.size());
  for (size_t j = 0; j < mu.size(); ++j) {
    z[j] = mu[j] + std::exp(T(0.5) * logvar[j]) * eps[j];
  }
  return z;
}

template <class T>
std::vector<T> CvaeModel<T>::draw_eps(int n, Rng& rng) {
  std::vector<T> eps(n);
  for (auto& e : eps) e = static_cast<T>(rng.normal());
  return eps;
}

template <class T>
T CvaeModel<T>::kl_loss(const std::vector<T>& mu,
                        const std::vector<T>& logvar) {
  double acc = 0.0;
  const size_t n = mu.size();
  for (size_t j = 0; j < n; ++j) {
    const double m = mu[j], lv = logvar[j];
    acc += 0.5 * (m * m + std::exp(lv) - lv - 1.0);
  }
  return static_cast<T>(acc / n);
}

template <class T>
Mat<T> CvaeModel<T>::build_memory(const std::vector<T>& z,
                                  const std::vector<int>& cond_tokens) const {
  check_tokens(cond_tokens, /*allow_mask=*/true);
  EncCache<T> c;
  encode_fwd(cond_tokens, c, nullptr);
  Mat<T> zrow(1, cfg.latent);
  std::copy(z.begin(), z.end(), zrow.d.begin());
  Mat<T> zc;
  linear_fwd(zrow, params.fc_z, zc);
  Mat<T> memory;
  memory_from(zc.d, c.out(), memory);
  return memory;
}

template <class T>
void CvaeModel<T>::memory_from(const std::vector<T>& zc,
                               const Mat<T>& cond_out, Mat<T>& memory) const {
  memory.resize(cfg.memory_len(), cfg.hidden);
  std::copy(zc.begin(), zc.end(), memory.row(0));
  std::memcpy(memory.row(1), cond_out.d.data(),
              sizeof(T) * cond_out.d.size());
}

template <class T>
Mat<T> CvaeModel<T>::decode(const std::vector<int>& targets,
                            const Mat<T>& memory) const {
  check_tokens(targets, /*allow_mask=*/false);
  if (memory.rows != cfg.memory_len() || memory.cols != cfg.hidden) {
    throw StructuralError("memory must be (seq_len+1) x hidden");
  }
  DecCache<T> c;
  decode_fwd(targets, memory, c, nullptr);
  return c.out();
}

template <class T>
Mat<T> CvaeModel<T>::head(const Mat<T>& hidden) const {
  Mat<T> logits;
  head_fwd(hidden, logits);
  return logits;
}

template <class T>
void CvaeModel<T>::head_fwd(const Mat<T>& hidden, Mat<T>& logits) const {
  linear_fwd(hidden, params.fc_head, logits);
  for (T v : logits.d) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericalError("head produced non-finite logits");
    }
  }
}

template <class T>
T CvaeModel<T>::recon_loss(const Mat<T>& logits,
                           const std::vector<int>& targets) {
  if (logits.rows != static_cast<int>(targets.size())) {
    throw StructuralError("recon_loss: row/target count mismatch");
  }
  double acc = 0.0;
  for (int t = 0; t < logits.rows; ++t) {
    const T* x = logits.row(t);
    T mx = x[0];
    for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < logits.cols; ++j) {
      sum += std::exp(static_cast<double>(x[j] - mx));
    }
    acc += std::log(sum) + static_cast<double>(mx) -
           static_cast<double>(x[targets[t]]);
  }
  return static_cast<T>(acc / logits.rows);
}

template <class T>
std::vector<T> CvaeModel<T>::sequence_repr(const Mat<T>& dec_hidden) {
  return col_means(dec_hidden);
}

namespace {

template <class T>
double cosine(const std::vector<T>& a, const std::vector<T>& b) {
  double num = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na <= 0 || nb <= 0) {
    throw NumericalError("cosine similarity of a zero-norm vector");
  }
  return num / std::sqrt(na * nb);
}

// d(cos)/da accumulated into da with factor w.
template <class T>
void cosine_bwd(const std::vector<T>& a, const std::vector<T>& b, double w,
                std::vector<T>& da) {
  double num = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double denom = std::sqrt(na * nb);
  const double c = num / denom;
  for (size_t i = 0; i < a.size(); ++i) {
    da[i] += static_cast<T>(w * (b[i] / denom - c * a[i] / na));
  }
}

}  // namespace

template <class T>
T CvaeModel<T>::contrastive_loss(
    const std::vector<T>& anchor, const std::vector<std::vector<T>>& positives,
    const std::vector<std::vector<T>>& negatives) {
  double loss = 0.0;
  if (!positives.empty()) {
    double acc = 0.0;
    for (const auto& p : positives) acc += 1.0 - cosine(anchor, p);
    loss += acc / positives.size();
  }
  if (!negatives.empty()) {
    double acc = 0.0;
    for (const auto& n : negatives) {
      double c = cosine(anchor, n);
      acc += c * c;
    }
    loss += acc / negatives.size();
  }
  return static_cast<T>(loss);
}

// ---- training step ------------------------------------------------------

template <class T>
LossParts<T> CvaeModel<T>::forward_backward(const TrainItem<T>& item, T scale,
                                            Params<T>& grads,
                                            SeqWork<T>& work) const {
  const int S = cfg.seq_len, C = cfg.hidden, C0 = cfg.latent;
  const int K = cfg.classes;
  check_tokens(item.tokens, false);
  check_tokens(item.cond, true);

  Rng drop_rng(item.dropout_seed);
  Rng* rng = cfg.dropout > 0 ? &drop_rng : nullptr;

  // ---------- forward ----------
  encode_fwd(item.tokens, work.enc_a, rng);
  work.pooled = col_means(work.enc_a.out());
  Mat<T> pooled_m(1, C);
  std::copy(work.pooled.begin(), work.pooled.end(), pooled_m.d.begin());
  Mat<T> mu_m, lv_m;
  linear_fwd(pooled_m, params.fc_mu, mu_m);
  linear_fwd(pooled_m, params.fc_sigma, lv_m);
  work.mu = mu_m.d;
  work.logvar = lv_m.d;
  work.z.resize(C0);
  for (int j = 0; j < C0; ++j) {
    work.z[j] = work.mu[j] +
                std::exp(T(0.5) * work.logvar[j]) * item.eps[j];
  }
  Mat<T> z_m(1, C0);
  std::copy(work.z.begin(), work.z.end(), z_m.d.begin());
  Mat<T> zc_m;
  linear_fwd(z_m, params.fc_z, zc_m);
  work.zc = zc_m.d;

  encode_fwd(item.cond, work.enc_m, rng);
  memory_from(work.zc, work.enc_m.out(), work.memory);
  decode_fwd(item.tokens, work.memory, work.dec, rng);
  head_fwd(work.dec.out(), work.logits);

  LossParts<T> parts;
  parts.recon = recon_loss(work.logits, item.tokens);
  parts.kl = kl_loss(work.mu, work.logvar);

  // Contrastive branch: teacher-forced decodes of mined samples against the
  // fully-masked condition they were generated under.
  const size_t n_mined = item.positives.size() + item.negatives.size();
  std::vector<T> anchor_repr;
  if (n_mined > 0) {
    std::vector<int> fm(S, kMaskId);
    encode_fwd(fm, work.enc_fm, rng);
    anchor_repr = sequence_repr(work.dec.out());
    work.mined_dec.resize(n_mined);
    work.mined_memory.resize(n_mined);
    work.mined_zc.resize(n_mined);
    work.mined_repr.resize(n_mined);
    std::vector<std::vector<T>> pos_reprs, neg_reprs;
    for (size_t i = 0; i < n_mined; ++i) {
      const MinedSample<T>& m = i < item.positives.size()
                                    ? item.positives[i]
                                    : item.negatives[i - item.positives.size()];
      Mat<T> zi(1, C0);
      std::copy(m.z.begin(), m.z.end(), zi.d.begin());
      Mat<T> zci;
      linear_fwd(zi, params.fc_z, zci);
      work.mined_zc[i] = zci.d;
      memory_from(zci.d, work.enc_fm.out(), work.mined_memory[i]);
      decode_fwd(m.tokens, work.mined_memory[i], work.mined_dec[i], rng);
      work.mined_repr[i] = sequence_repr(work.mined_dec[i].out());
      if (i < item.positives.size()) {
        pos_reprs.push_back(work.mined_repr[i]);
      } else {
        neg_reprs.push_back(work.mined_repr[i]);
      }
    }
    parts.contrastive = contrastive_loss(anchor_repr, pos_reprs, neg_reprs);
  }

  // ---------- backward ----------
  AttnScratch<T>& s = work.attn;
  const T cw = static_cast<T>(cfg.contrastive_weight);
  const T klw = static_cast<T>(cfg.kl_weight);

  // dlogits from the reconstruction term.
  work.d_logits.resize(S, K);
  const T row_w = scale / static_cast<T>(S);
  for (int t = 0; t < S; ++t) {
    const T* x = work.logits.row(t);
    T* dl = work.d_logits.row(t);
    T mx = x[0];
    for (int j = 1; j < K; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
    for (int j = 0; j < K; ++j) {
      dl[j] = fast_exp(x[j] - mx);
      sum += dl[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < K; ++j) dl[j] *= inv * row_w;
    dl[item.tokens[t]] -= row_w;
  }
  work.d_hidden.resize(S, C);
  work.d_hidden.zero();
  linear_bwd(work.dec.out(), params.fc_head, work.d_logits, &work.d_hidden,
             grads.fc_head, s);

  // Contrastive gradients on representations.
  std::vector<T> d_anchor(C, T(0));
  std::vector<std::vector<T>> d_mined(n_mined, std::vector<T>(C, T(0)));
  if (n_mined > 0) {
    const size_t np = item.positives.size(), nn = item.negatives.size();
    for (size_t i = 0; i < n_mined; ++i) {
      const bool is_pos = i < np;
      const std::vector<T>& r = work.mined_repr[i];
      if (is_pos) {
        const double w = -static_cast<double>(scale * cw) / np;
        cosine_bwd(anchor_repr, r, w, d_anchor);
        cosine_bwd(r, anchor_repr, w, d_mined[i]);
      } else {
        const double c = cosine(anchor_repr, r);
        const double w = static_cast<double>(scale * cw) * 2.0 * c / nn;
        cosine_bwd(anchor_repr, r, w, d_anchor);
        cosine_bwd(r, anchor_repr, w, d_mined[i]);
      }
    }
    const T inv_s = T(1) / static_cast<T>(S);
    for (int t = 0; t < S; ++t) {
      T* dh = work.d_hidden.row(t);
#pragma omp simd
      for (int j = 0; j < C; ++j) dh[j] += d_anchor[j] * inv_s;
    }
  }

  // Anchor decoder backward.
  work.d_memory.resize(cfg.memory_len(), C);
  work.d_memory.zero();
  decode_bwd_impl(*this, work.dec, work.memory, work.d_hidden, grads,
                  work.d_memory, s, work.m1, work.m2);

  // Mined decodes backward; their memories share the full-mask encoding.
  if (n_mined > 0) {
    work.d_enc.resize(S, C);
    work.d_enc.zero();
    Mat<T> d_mem_i(cfg.memory_len(), C);
    Mat<T> d_h_i(S, C);
    for (size_t i = 0; i < n_mined; ++i) {
      const T inv_s = T(1) / static_cast<T>(S);
      for (int t = 0; t < S; ++t) {
        T* dh = d_h_i.row(t);
        for (int j = 0; j < C; ++j) dh[j] = d_mined[i][j] * inv_s;
      }
      d_mem_i.zero();
      decode_bwd_impl(*this, work.mined_dec[i], work.mined_memory[i], d_h_i,
                      grads, d_mem_i, s, work.m1, work.m2);
      // Latent projection gradient (the mined z itself is a constant).
      const MinedSample<T>& m = i < item.positives.size()
                                    ? item.positives[i]
                                    : item.negatives[i - item.positives.size()];
      Mat<T> zi(1, C0);
      std::copy(m.z.begin(), m.z.end(), zi.d.begin());
      Mat<T> dzc(1, C);
      std::memcpy(dzc.row(0), d_mem_i.row(0), sizeof(T) * C);
      linear_bwd(zi, params.fc_z, dzc, nullptr, grads.fc_z, s);
      // Condition-encoder gradient accumulates across mined samples.
      add_inplace(work.d_enc.d.data(), d_mem_i.row(1),
                  static_cast<size_t>(S) * C);
    }
    encode_bwd_impl(*this, work.enc_fm, work.d_enc, grads, s, work.m1,
                    work.m2);
  }

  // Anchor memory: row 0 -> latent projection; rows 1.. -> condition encoder.
  {
    Mat<T> dzc(1, C);
    std::memcpy(dzc.row(0), work.d_memory.row(0), sizeof(T) * C);
    Mat<T> dz(1, C0);
    dz.zero();
    linear_bwd(z_m, params.fc_z, dzc, &dz, grads.fc_z, s);

    work.d_enc.resize(S, C);
    std::memcpy(work.d_enc.d.data(), work.d_memory.row(1),
                sizeof(T) * static_cast<size_t>(S) * C);
    encode_bwd_impl(*this, work.enc_m, work.d_enc, grads, s, work.m1,
                    work.m2);

    // Reparameterization + KL gradients.
    Mat<T> dmu(1, C0), dlv(1, C0);
    for (int j = 0; j < C0; ++j) {
      const T dzj = dz.d[j];
      dmu.d[j] = dzj;
      dlv.d[j] = dzj * item.eps[j] * T(0.5) * std::exp(T(0.5) * work.logvar[j]);
    }
    const T kw = scale * klw / static_cast<T>(C0);
    for (int j = 0; j < C0; ++j) {
      dmu.d[j] += kw * work.mu[j];
      dlv.d[j] += kw * T(0.5) * (std::exp(work.logvar[j]) - T(1));
    }
    Mat<T> d_pooled(1, C);
    d_pooled.zero();
    linear_bwd(pooled_m, params.fc_mu, dmu, &d_pooled, grads.fc_mu, s);
    linear_bwd(pooled_m, params.fc_sigma, dlv, &d_pooled, grads.fc_sigma, s);

    work.d_enc.zero();
    const T inv_s = T(1) / static_cast<T>(S);
    for (int t = 0; t < S; ++t) {
      T* de = work.d_enc.row(t);
#pragma omp simd
      for (int j = 0; j < C; ++j) de[j] = d_pooled.d[j] * inv_s;
    }
    encode_bwd_impl(*this, work.enc_a, work.d_enc, grads, s, work.m1,
                    work.m2);
  }
  return parts;
}

template <class T>
LossParts<T> CvaeModel<T>::loss_only(const TrainItem<T>& item,
                                     SeqWork<T>& work) const {
  const int S = cfg.seq_len, C0 = cfg.latent;
  Rng drop_rng(item.dropout_seed);
  Rng* rng = cfg.dropout > 0 ? &drop_rng : nullptr;

  encode_fwd(item.tokens, work.enc_a, rng);
  work.pooled = col_means(work.enc_a.out());
  Mat<T> pooled_m(1, cfg.hidden);
  std::copy(work.pooled.begin(), work.pooled.end(), pooled_m.d.begin());
  Mat<T> mu_m, lv_m;
  linear_fwd(pooled_m, params.fc_mu, mu_m);
  linear_fwd(pooled_m, params.fc_sigma, lv_m);
  work.z.resize(C0);
  for (int j = 0; j < C0; ++j) {
    work.z[j] = mu_m.d[j] + std::exp(T(0.5) * lv_m.d[j]) * item.eps[j];
  }
  Mat<T> z_m(1, C0);
  std::copy(work.z.begin(), work.z.end(), z_m.d.begin());
  Mat<T> zc_m;
  linear_fwd(z_m, params.fc_z, zc_m);

  encode_fwd(item.cond, work.enc_m, rng);
  memory_from(zc_m.d, work.enc_m.out(), work.memory);
  decode_fwd(item.tokens, work.memory, work.dec, rng);
  head_fwd(work.dec.out(), work.logits);

  LossParts<T> parts;
  parts.recon = recon_loss(work.logits, item.tokens);
  parts.kl = kl_loss(mu_m.d, lv_m.d);

  const size_t n_mined = item.positives.size() + item.negatives.size();
  if (n_mined > 0) {
    std::vector<int> fm(S, kMaskId);
    encode_fwd(fm, work.enc_fm, rng);
    std::vector<T> anchor = sequence_repr(work.dec.out());
    std::vector<std::vector<T>> pos, neg;
    DecCache<T> dc;
    Mat<T> mem_i;
    for (size_t i = 0; i < n_mined; ++i) {
      const MinedSample<T>& m = i < item.positives.size()
                                    ? item.positives[i]
                                    : item.negatives[i - item.positives.size()];
      Mat<T> zi(1, C0);
      std::copy(m.z.begin(), m.z.end(), zi.d.begin());
      Mat<T> zci;
      linear_fwd(zi, params.fc_z, zci);
      memory_from(zci.d, work.enc_fm.out(), mem_i);
      decode_fwd(m.tokens, mem_i, dc, rng);
      (i < item.positives.size() ? pos : neg)
          .push_back(sequence_repr(dc.out()));
    }
    parts.contrastive = contrastive_loss(anchor, pos, neg);
  }
  return parts;
}

// ---- autoregressive sampling -------------------------------------------

template <class T>
void CvaeModel<T>::kv_init(const Mat<T>& memory, KvCache<T>& kv) const {
  const int C = cfg.hidden;
  if (static_cast<int>(kv.layers.size()) != cfg.layers) {
    kv.layers.assign(cfg.layers, {});
  }
  for (int l = 0; l < cfg.layers; ++l) {
    auto& kl = kv.layers[l];
    kl.k_self.resize(cfg.seq_len, C);
    kl.v_self.resize(cfg.seq_len, C);
    linear_fwd(memory, params.dec[l].ck, kl.k_cross);
    linear_fwd(memory, params.dec[l].cv, kl.v_cross);
  }
  kv.len = 0;
}

namespace {

// Single-row attention over cached keys/values.
template <class T>
void attend_row(const ModelConfig& cfg, const T* q_full, const Mat<T>& k,
                const Mat<T>& v, int n_keys, T* out) {
  const int H = cfg.heads, dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> p(n_keys);
  for (int h = 0; h < H; ++h) {
    const int off = h * dh;
    const T* q = q_full + off;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < n_keys; ++j) {
      p[j] = scale * dot(q, k.row(j) + off, dh);
      mx = std::max(mx, p[j]);
    }
    T sum = T(0);
    for (int j = 0; j < n_keys; ++j) {
      p[j] = fast_exp(p[j] - mx);
      sum += p[j];
    }
    const T inv = T(1) / sum;
    T* o = out + off;
    std::fill(o, o + dh, T(0));
    for (int j = 0; j < n_keys; ++j) {
      const T pv = p[j] * inv;
      const T* vr = v.row(j) + off;
#pragma omp simd
      for (int kk = 0; kk < dh; ++kk) o[kk] += pv * vr[kk];
    }
  }
}

template <class T>
void row_linear(const T* x, const Linear<T>& lin, T* y) {
  const int in = lin.w.rows, out = lin.w.cols;
  std::copy(lin.b.begin(), lin.b.end(), y);
  for (int kk = 0; kk < in; ++kk) {
    const T v = x[kk];
    const T* w = lin.w.row(kk);
#pragma omp simd
    for (int j = 0; j < out; ++j) y[j] += v * w[j];
  }
}

template <class T>
void row_layernorm(const LayerNormParam<T>& p, const T* x, T* y, int n) {
  T mean, rstd;
  kern::serial::layernorm_fwd(x, p.gamma.data(), p.beta.data(), y, &mean,
                              &rstd, 1, n);
}

}  // namespace

template <class T>
std::vector<int> CvaeModel<T>::sample_tokens(const Mat<T>& memory,
                                             const ConditionMask& mask,
                                             double temperature, Rng& rng,
                                             KvCache<T>& kv) const {
  if (temperature < 0) {
    throw ConfigError("temperature must be nonnegative");
  }
  const int S = cfg.seq_len, C = cfg.hidden, K = cfg.classes;
  const int F = cfg.ffn_dim();
  kv_init(memory, kv);
  std::vector<int> out(S);
  std::vector<T> x(C), tmp(C), x1(C), x2(C), q(C), attn(C), proj(C);
  std::vector<T> ff(F), ffa(F);
  std::vector<T> logits(K);
  std::vector<double> cumsum(K);

  int prev = -1;
  for (int t = 0; t < S; ++t) {
    // Input embedding for row t.
    const T* pe = params.pos_emb.row(t);
    if (t == 0) {
      const T* sos = memory.row(0);
      for (int j = 0; j < C; ++j) tmp[j] = sos[j] + pe[j];
    } else {
      const T* te = params.tok_emb.row(prev);
      for (int j = 0; j < C; ++j) tmp[j] = te[j] + pe[j];
    }
    row_layernorm(params.emb_ln_dec, tmp.data(), x.data(), C);

    for (int l = 0; l < cfg.layers; ++l) {
      const DecoderLayerParam<T>& lp = params.dec[l];
      auto& kl = kv.layers[l];
      // Masked self-attention with the KV cache.
      row_linear(x.data(), lp.sq, q.data());
      row_linear(x.data(), lp.sk, kl.k_self.row(t));
      row_linear(x.data(), lp.sv, kl.v_self.row(t));
      attend_row(cfg, q.data(), kl.k_self, kl.v_self, t + 1, attn.data());
      row_linear(attn.data(), lp.so, proj.data());
      for (int j = 0; j < C; ++j) tmp[j] = x[j] + proj[j];
      row_layernorm(lp.ln1, tmp.data(), x1.data(), C);
      // Cross-attention over the full memory.
      row_linear(x1.data(), lp.cq, q.data());
      attend_row(cfg, q.data(), kl.k_cross, kl.v_cross, cfg.memory_len(),
                 attn.data());
      row_linear(attn.data(), lp.co, proj.data());
      for (int j = 0; j < C; ++j) tmp[j] = x1[j] + proj[j];
      row_layernorm(lp.ln2, tmp.data(), x2.data(), C);
      // FFN
      row_linear(x2.data(), lp.ff1, ff.data());
      kern::gelu_fwd(ff.data(), ffa.data(), ff.size());
      row_linear(ffa.data(), lp.ff2, proj.data());
      for (int j = 0; j < C; ++j) tmp[j] = x2[j] + proj[j];
      row_layernorm(lp.ln3, tmp.data(), x.data(), C);
    }
    row_linear(x.data(), params.fc_head, logits.data());
    for (int j = 0; j < K; ++j) {
      if (!std::isfinite(static_cast<double>(logits[j]))) {
        throw NumericalError("non-finite logits at bin " + std::to_string(t));
      }
    }

    int token;
    if (mask.is_unmasked(t)) {
      token = mask.fixed_at(t);  // hard constraint, no sampling
    } else if (temperature <= 1e-6) {
      token = 0;
      for (int j = 1; j < K; ++j) {
        if (logits[j] > logits[token]) token = j;
      }
    } else {
      double mx = logits[0];
      for (int j = 1; j < K; ++j) mx = std::max(mx, (double)logits[j]);
      double cumsum[kNumClasses];
      double sum = 0;
      for (int j = 0; j < K; ++j) {
        sum += std::exp((static_cast<double>(logits[j]) - mx) / temperature);
        cumsum[j] = sum;
      }
      const double r = rng.uniform() * sum;
      token = K - 1;
      for (int j = 0; j < K; ++j) {
        if (r < cumsum[j]) {
          token = j;
          break;
        }
      }
    }
    out[t] = token;
    prev = token;
    kv.len = t + 1;
  }
  return out;
}

template <class T>
std::vector<Mat<T>> CvaeModel<T>::cross_attention_maps(
    const std::vector<int>& targets, const Mat<T>& memory) const {
  check_tokens(targets, false);
  DecCache<T> c;
  decode_fwd(targets, memory, c, nullptr);
  return c.layers.back().cross.p;
}

// ---- checkpointing -------------------------------------------------------

template <class T>
void CvaeModel<T>::save_checkpoint(
    const std::string& path, int64_t step, const std::string& rng_state,
    const std::vector<std::pair<std::string, std::vector<float>>>& extra)
    const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f << "ORACLE-CKPT v1\n";
  f << cfg.to_text() << "end-config\n";
  f << "step " << step << "\n";
  f << "rng " << rng_state << "\n";
  auto& self = const_cast<CvaeModel<T>&>(*this);
  f << "tensors " << self.params.tensor_count() << "\n";
  std::vector<float> buf;
  self.params.visit([&](const std::string& name, T* data, size_t n) {
    f << name << " " << n << "\n";
    buf.resize(n);
    for (size_t i = 0; i < n; ++i) buf[i] = static_cast<float>(data[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    f << "\n";
  });
  f << "extra " << extra.size() << "\n";
  for (const auto& [name, data] : extra) {
    f << name << " " << data.size() << "\n";
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    f << "\n";
  }
  if (!f) throw IoError("failed while writing checkpoint: " + path);
}

template <class T>
CvaeModel<T> CvaeModel<T>::load_checkpoint(const std::string& path,
                                           LoadResult* meta) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint: " + path);
  std::string line;
  std::getline(f, line);
  if (line != "ORACLE-CKPT v1") {
    throw ConfigError(path + ": not an oracle checkpoint");
  }
  std::string cfg_text;
  while (std::getline(f, line) && line != "end-config") {
    cfg_text += line + "\n";
  }
  ModelConfig cfg = ModelConfig::from_text(cfg_text);
  int64_t step = 0;
  std::string key;
  f >> key >> step;
  if (key != "step") throw StructuralError(path + ": missing step");
  f >> key;
  if (key != "rng") throw StructuralError(path + ": missing rng state");
  std::getline(f, line);
  std::string rng_state = line.empty() ? line : line.substr(1);

  size_t n_tensors = 0;
  f >> key >> n_tensors;
  if (key != "tensors") throw StructuralError(path + ": missing tensors");
  std::getline(f, line);

  CvaeModel<T> model(cfg, 0);
  std::vector<float> buf;
  auto read_blob = [&](const std::string& expect_name, size_t n) {
    buf.resize(n);
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(n * sizeof(float)));
    char nl;
    f.read(&nl, 1);
    if (!f || nl != '\n') {
      throw StructuralError(path + ": truncated tensor " + expect_name);
    }
  };
  size_t seen = 0;
  model.params.visit([&](const std::string& name, T* data, size_t n) {
    std::string tname;
    size_t tn = 0;
    f >> tname >> tn;
    std::getline(f, line);
    if (tname != name || tn != n) {
      throw StructuralError(path + ": tensor mismatch, expected " + name +
                            "/" + std::to_string(n) + ", found " + tname +
                            "/" + std::to_string(tn));
    }
    read_blob(name, n);
    for (size_t i = 0; i < n; ++i) data[i] = static_cast<T>(buf[i]);
    ++seen;
  });
  if (seen != n_tensors) {
    throw StructuralError(path + ": tensor count mismatch");
  }
  std::vector<std::pair<std::string, std::vector<float>>> extra;
  size_t n_extra = 0;
  if (f >> key >> n_extra) {
    if (key != "extra") throw StructuralError(path + ": missing extra block");
    std::getline(f, line);
    for (size_t i = 0; i < n_extra; ++i) {
      std::string name;
      size_t n = 0;
      f >> name >> n;
      std::getline(f, line);
      read_blob(name, n);
      extra.emplace_back(name, buf);
    }
  }
  if (meta) {
    meta->step = step;
    meta->rng_state = rng_state;
    meta->extra = std::move(extra);
  }
  return model;
}

template class CvaeModel<float>;
template class CvaeModel<double>;
template struct Params<float>;
template struct Params<double>;

}  // namespace oracle
