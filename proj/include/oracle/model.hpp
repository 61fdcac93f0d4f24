#pragma once
// Transformer-CVAE over 288-token activity days.
//
// A shared post-LN transformer encoder embeds both the activity sequence
// and the condition sequence. The activity encoding is mean-pooled and
// projected to a diagonal Gaussian (mu, log sigma^2); a reparameterized
// latent is projected back to model width, prepended to the condition
// encoding as decoder memory, and also fed as the decoder's SOS embedding.
// The decoder runs masked self-attention plus cross-attention over the
// memory and ends in a 12-way classification head per bin.
//
// The class is templated on the scalar type: float is the production
// type, double exists for finite-difference gradient verification.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "oracle/activity.hpp"
#include "oracle/mat.hpp"

namespace oracle {

struct ModelConfig {
  int hidden = 64;    // C
  int latent = 64;    // C0
  int layers = 2;     // encoder depth == decoder depth
  int heads = 4;
  int vocab = kVocabSize;
  int classes = kNumClasses;
  int seq_len = kSeqLen;
  int ffn_mult = 4;
  double kl_weight = 1e-5;
  double contrastive_weight = 1.0;
  double dropout = 0.0;

  static ModelConfig desk() { return ModelConfig{}; }
  static ModelConfig full() {
    ModelConfig c;
    c.hidden = 768;
    c.latent = 768;
    c.layers = 12;
    c.heads = 12;
    c.dropout = 0.1;
    return c;
  }

  int head_dim() const { return hidden / heads; }
  int ffn_dim() const { return hidden * ffn_mult; }
  int memory_len() const { return seq_len + 1; }
  void validate() const;

  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct LayerNormParam {
  std::vector<T> gamma, beta;
  void init(int n) {
    gamma.assign(n, T(1));
    beta.assign(n, T(0));
  }
  void zeros(int n) {
    gamma.assign(n, T(0));
    beta.assign(n, T(0));
  }
};

template <class T>
struct Linear {
  Mat<T> w;  // in x out
  std::vector<T> b;
  void init(int in, int out, Rng* rng, T std_dev) {
    w.resize(in, out);
    if (rng) {
      for (auto& v : w.d) v = static_cast<T>(rng->normal()) * std_dev;
    }
    b.assign(out, T(0));
  }
};

template <class T>
struct EncoderLayerParam {
  Linear<T> wq, wk, wv, wo;
  LayerNormParam<T> ln1;
  Linear<T> ff1, ff2;
  LayerNormParam<T> ln2;
};

template <class T>
struct DecoderLayerParam {
  Linear<T> sq, sk, sv, so;  // masked self-attention
  LayerNormParam<T> ln1;
  Linear<T> cq, ck, cv, co;  // cross-attention over memory
  LayerNormParam<T> ln2;
  Linear<T> ff1, ff2;
  LayerNormParam<T> ln3;
};

template <class T>
struct Params {
  Mat<T> tok_emb;  // vocab x C
  Mat<T> pos_emb;  // seq_len x C
  LayerNormParam<T> emb_ln_enc, emb_ln_dec;
  std::vector<EncoderLayerParam<T>> enc;
  std::vector<DecoderLayerParam<T>> dec;
  Linear<T> fc_mu, fc_sigma;  // C -> C0
  Linear<T> fc_z;             // C0 -> C
  Linear<T> fc_head;          // C -> 12

  void init(const ModelConfig& cfg, Rng* rng);  // rng=nullptr -> zeros

  // Visits every tensor in a fixed order: f(name, data, count).
  template <class F>
  void visit(F&& f);
  size_t tensor_count() const;
};

// ---- forward caches -------------------------------------------------

template <class T>
struct AttnCache {
  Mat<T> q, k, v;          // projections (queries S x C; keys/values Skv x C)
  std::vector<Mat<T>> p;   // attention probabilities per head (S x Skv)
  Mat<T> concat;           // S x C, heads concatenated, pre-output-projection
  Mat<T> proj_drop;        // dropout mask on the projected output (optional)
};

template <class T>
struct LnCache {
  Mat<T> in;  // pre-normalization activations
  std::vector<T> mean, rstd;
};

template <class T>
struct EncLayerCache {
  Mat<T> x_in;
  AttnCache<T> attn;
  LnCache<T> ln1;
  Mat<T> x_mid;
  Mat<T> ff_pre, ff_act, ff_drop;
  LnCache<T> ln2;
  Mat<T> x_out;
};

template <class T>
struct EncCache {
  std::vector<int> tokens;
  Mat<T> emb;  // tok+pos, pre-LN
  LnCache<T> emb_ln;
  Mat<T> emb_drop;
  Mat<T> x0;
  std::vector<EncLayerCache<T>> layers;
  const Mat<T>& out() const { return layers.empty() ? x0 : layers.back().x_out; }
};

template <class T>
struct DecLayerCache {
  Mat<T> x_in;
  AttnCache<T> self;
  LnCache<T> ln1;
  Mat<T> x_mid1;
  AttnCache<T> cross;
  LnCache<T> ln2;
  Mat<T> x_mid2;
  Mat<T> ff_pre, ff_act, ff_drop;
  LnCache<T> ln3;
  Mat<T> x_out;
};

template <class T>
struct DecCache {
  std::vector<int> targets;  // length S; input row t is targets[t-1]
  Mat<T> emb;
  LnCache<T> emb_ln;
  Mat<T> emb_drop;
  Mat<T> x0;
  std::vector<DecLayerCache<T>> layers;
  const Mat<T>& out() const { return layers.empty() ? x0 : layers.back().x_out; }
};

// One model-sampled sequence kept for the contrastive branch, together with
// the latent that generated it.
template <class T>
struct MinedSample {
  std::vector<int> tokens;  // 288 class ids
  std::vector<T> z;         // C0
};

template <class T>
struct TrainItem {
  std::vector<int> tokens;      // target day, ids 0..11
  std::vector<int> cond;        // condition tokens (ids or MASK)
  std::vector<T> eps;           // reparameterization noise, C0
  uint64_t dropout_seed = 0;
  std::vector<MinedSample<T>> positives, negatives;
};

template <class T>
struct LossParts {
  T recon = 0, kl = 0, contrastive = 0;
  T total(const ModelConfig& cfg) const {
    return recon + static_cast<T>(cfg.kl_weight) * kl +
           static_cast<T>(cfg.contrastive_weight) * contrastive;
  }
};

// Reusable buffers for attention and linear backward passes.
template <class T>
struct AttnScratch {
  Mat<T> qh, kht, vh, kh;          // per-head forward views
  Mat<T> doh, dvh, dkh, dqh;       // per-head gradients
  Mat<T> dq, dk, dv;               // full-width projection gradients
  Mat<T> w_t, x_t;                 // transposes for linear backward
  std::vector<T> ds;
};

// Scratch space for one in-flight sequence (reused across steps).
template <class T>
struct SeqWork {
  EncCache<T> enc_a, enc_m, enc_fm;
  DecCache<T> dec;
  std::vector<DecCache<T>> mined_dec;
  std::vector<Mat<T>> mined_memory;
  std::vector<std::vector<T>> mined_zc, mined_repr;
  Mat<T> memory;
  Mat<T> logits;
  std::vector<T> pooled, mu, logvar, z, zc;
  AttnScratch<T> attn;
  Mat<T> d_hidden, d_memory, d_enc, d_logits, m1, m2;
};

// Per-layer incremental decoding state for autoregressive sampling.
template <class T>
struct KvCache {
  struct Layer {
    Mat<T> k_self, v_self;    // seq_len x C, filled as decoding advances
    Mat<T> k_cross, v_cross;  // memory_len x C, fixed per sample
  };
  std::vector<Layer> layers;
  int len = 0;  // rows of k_self/v_self filled so far
};

template <class T>
class CvaeModel {
 public:
  ModelConfig cfg;
  Params<T> params;

  CvaeModel(const ModelConfig& config, uint64_t seed);

  // ---- eval-mode operations (dropout off) ----
  // Validates ids and length; condition sequences may contain MASK.
  Mat<T> encode(const std::vector<int>& tokens) const;
  void pool_project(const Mat<T>& hidden, std::vector<T>& mu,
                    std::vector<T>& logvar) const;
  static std::vector<T> reparameterize(const std::vector<T>& mu,
                                       const std::vector<T>& logvar,
                                       const std::vector<T>& eps);
  static std::vector<T> draw_eps(int n, Rng& rng);
  static T kl_loss(const std::vector<T>& mu, const std::vector<T>& logvar);
  Mat<T> build_memory(const std::vector<T>& z,
                      const std::vector<int>& cond_tokens) const;
  // Teacher-forced decoder hidden states for `targets` under `memory`.
  Mat<T> decode(const std::vector<int>& targets, const Mat<T>& memory) const;
  Mat<T> head(const Mat<T>& hidden) const;
  static T recon_loss(const Mat<T>& logits, const std::vector<int>& targets);
  static std::vector<T> sequence_repr(const Mat<T>& dec_hidden);
  static T contrastive_loss(const std::vector<T>& anchor,
                            const std::vector<std::vector<T>>& positives,
                            const std::vector<std::vector<T>>& negatives);

  // ---- cache-filling internals (shared by training and eval paths) ----
  void encode_fwd(const std::vector<int>& tokens, EncCache<T>& c,
                  Rng* drop_rng) const;
  // Decoder input row 0 is memory row 0 (the projected latent, acting as
  // the SOS embedding); row t>0 embeds targets[t-1].
  void decode_fwd(const std::vector<int>& targets, const Mat<T>& memory,
                  DecCache<T>& c, Rng* drop_rng) const;
  void memory_from(const std::vector<T>& zc, const Mat<T>& cond_out,
                   Mat<T>& memory) const;
  void head_fwd(const Mat<T>& hidden, Mat<T>& logits) const;

  // Forward + backward of one batch element; gradients are accumulated
  // into `grads` scaled by `scale` (the caller passes 1/batch).
  LossParts<T> forward_backward(const TrainItem<T>& item, T scale,
                                Params<T>& grads, SeqWork<T>& work) const;

  // Loss only (same math as forward_backward), for finite differences.
  LossParts<T> loss_only(const TrainItem<T>& item, SeqWork<T>& work) const;

  // ---- autoregressive sampling ----
  // Precompute per-layer cross K/V for a fixed memory.
  void kv_init(const Mat<T>& memory, KvCache<T>& kv) const;
  // Samples one sequence; at unmasked bins the fixed activity is forced.
  // temperature <= 1e-6 selects argmax decoding.
  std::vector<int> sample_tokens(const Mat<T>& memory,
                                 const ConditionMask& mask, double temperature,
                                 Rng& rng, KvCache<T>& kv) const;

  // Attention probabilities of the final decoder layer's cross-attention,
  // one S x (S+1) matrix per head, from a teacher-forced pass.
  std::vector<Mat<T>> cross_attention_maps(const std::vector<int>& targets,
                                           const Mat<T>& memory) const;

  // ---- checkpointing (always stored as float32) ----
  void save_checkpoint(const std::string& path, int64_t step,
                       const std::string& rng_state,
                       const std::vector<std::pair<std::string, std::vector<float>>>&
                           extra = {}) const;
  struct LoadResult {
    int64_t step = 0;
    std::string rng_state;
    std::vector<std::pair<std::string, std::vector<float>>> extra;
  };
  static CvaeModel load_checkpoint(const std::string& path, LoadResult* meta);

 private:
  void check_tokens(const std::vector<int>& tokens, bool allow_mask) const;
};

using Model = CvaeModel<float>;

// Fixed tensor visiting order; checkpointing, the optimizer, and the
// gradient check all rely on it.
template <class T>
template <class F>
void Params<T>::visit(F&& f) {
  auto mat = [&f](const std::string& name, Mat<T>& m) {
    f(name, m.d.data(), m.d.size());
  };
  auto vec = [&f](const std::string& name, std::vector<T>& v) {
    f(name, v.data(), v.size());
  };
  auto lin = [&](const std::string& name, Linear<T>& l) {
    mat(name + ".w", l.w);
    vec(name + ".b", l.b);
  };
  auto ln = [&](const std::string& name, LayerNormParam<T>& l) {
    vec(name + ".gamma", l.gamma);
    vec(name + ".beta", l.beta);
  };
  mat("tok_emb", tok_emb);
  mat("pos_emb", pos_emb);
  ln("emb_ln_enc", emb_ln_enc);
  ln("emb_ln_dec", emb_ln_dec);
  for (size_t i = 0; i < enc.size(); ++i) {
    std::string p = "enc." + std::to_string(i) + ".";
    lin(p + "wq", enc[i].wq);
    lin(p + "wk", enc[i].wk);
    lin(p + "wv", enc[i].wv);
    lin(p + "wo", enc[i].wo);
    ln(p + "ln1", enc[i].ln1);
    lin(p + "ff1", enc[i].ff1);
    lin(p + "ff2", enc[i].ff2);
    ln(p + "ln2", enc[i].ln2);
  }
  for (size_t i = 0; i < dec.size(); ++i) {
    std::string p = "dec." + std::to_string(i) + ".";
    lin(p + "sq", dec[i].sq);
    lin(p + "sk", dec[i].sk);
    lin(p + "sv", dec[i].sv);
    lin(p + "so", dec[i].so);
    ln(p + "ln1", dec[i].ln1);
    lin(p + "cq", dec[i].cq);
    lin(p + "ck", dec[i].ck);
    lin(p + "cv", dec[i].cv);
    lin(p + "co", dec[i].co);
    ln(p + "ln2", dec[i].ln2);
    lin(p + "ff1", dec[i].ff1);
    lin(p + "ff2", dec[i].ff2);
    ln(p + "ln3", dec[i].ln3);
  }
  lin("fc_mu", fc_mu);
  lin("fc_sigma", fc_sigma);
  lin("fc_z", fc_z);
  lin("fc_head", fc_head);
}

}  // namespace oracle
