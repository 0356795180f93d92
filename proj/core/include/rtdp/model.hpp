#pragma once

// Generator/discriminator encoder pair with disentangled attention.
//
// Attention scores sum three terms per head:
//   content-to-content   Qc(i) . Kc(j)
//   content-to-position  Qc(i) . Kr(delta(i,j))
//   position-to-content  Kc(j) . Qr(delta(j,i))
// scaled by 1/sqrt(3 * head_dim). The relative-position table P is a single
// tensor shared by both encoders and all their layers; each encoder owns one
// position projection pair (Qr/Kr) shared across its layers.
//
// Discriminator token embeddings are stop_gradient(E_G[ids]) + E_Delta[ids],
// so the detection loss can only move the difference table.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rtdp/data.hpp"
#include "rtdp/tensor.hpp"

namespace rtdp {

struct ModelConfig {
  int64_t n_layers = 2;
  int64_t n_heads = 2;
  int64_t hidden = 16;
  int64_t vocab_size = 37;
  int64_t max_rel_distance = 4;  // k; the table has 2k rows
  int64_t generator_hidden = 8;
  int64_t generator_layers = 2;
  int64_t conv_kernel = 3;

  int64_t head_dim() const { return hidden / n_heads; }
  int64_t generator_heads() const { return generator_hidden / head_dim(); }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Clamped relative offset, range [0, 2k).
inline int64_t relative_bucket(int64_t i, int64_t j, int64_t k) {
  if (i < 0 || j < 0 || k < 1) throw contract_error("relative_bucket: bad arguments");
  const int64_t diff = i - j;
  if (diff <= -k) return 0;
  if (diff >= k) return 2 * k - 1;
  return diff + k;
}

// Precomputed [L x L] index tables for the two positional score terms.
struct BucketTables {
  std::shared_ptr<const std::vector<int32_t>> row_i;    // (i,j) -> i
  std::shared_ptr<const std::vector<int32_t>> row_j;    // (i,j) -> j
  std::shared_ptr<const std::vector<int32_t>> c2p;      // (i,j) -> delta(i,j)
  std::shared_ptr<const std::vector<int32_t>> p2c;      // (i,j) -> delta(j,i)
  int64_t len = 0;
};

BucketTables make_bucket_tables(int64_t len, int64_t k);

// Captured attention weight matrices ([L x L] per layer, batch row, head in
// that nesting order), for tests and diagnostics.
template <typename T>
struct AttnCapture {
  std::vector<TensorT<T>> weights;
};

template <typename T>
struct EncoderLayerT {
  TensorT<T> wq, bq, wk, bk, wv, bv;
  TensorT<T> wo, bo;
  TensorT<T> ln1_g, ln1_b;
  TensorT<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  TensorT<T> ln2_g, ln2_b;
};

template <typename T>
struct EncoderConfigT {
  std::string prefix;       // parameter name prefix, e.g. "disc."
  int64_t n_layers = 2;
  int64_t width = 16;
  int64_t n_heads = 2;
  int64_t pos_dim = 16;     // width of the shared position table P
  int64_t max_rel_distance = 4;
  bool conv_branch = false;
  int64_t conv_kernel = 3;
  // When false a private projection pair is created per layer; only the
  // duplicated reference model of the shared-projection audit uses this.
  bool share_position_projections = true;
};

template <typename T>
class EncoderT {
 public:
  EncoderT() = default;
  EncoderT(const EncoderConfigT<T>& cfg, ParameterStoreT<T>& params, Rng& rng);

  // x is [B*L x width] row-major; mask is B*L bytes (0 = PAD column).
  TensorT<T> forward(const TensorT<T>& x, int64_t batch, int64_t len,
                     std::span<const uint8_t> mask, const TensorT<T>& pos_table,
                     AttnCapture<T>* capture = nullptr) const;

  // One attention sublayer (scores, softmax, heads, output projection,
  // residual, norm) on a single sequence. kr/qr are the projected position
  // tables [2k x width].
  TensorT<T> attention_sublayer(int64_t layer, const TensorT<T>& x_seq,
                                const TensorT<T>& kr, const TensorT<T>& qr,
                                const BucketTables& buckets, const TensorT<T>& mask_row,
                                AttnCapture<T>* capture = nullptr) const;

  const EncoderConfigT<T>& config() const { return cfg_; }
  const TensorT<T>& pos_q(int64_t layer) const {
    return cfg_.share_position_projections ? pos_q_[0] : pos_q_[static_cast<size_t>(layer)];
  }
  const TensorT<T>& pos_k(int64_t layer) const {
    return cfg_.share_position_projections ? pos_k_[0] : pos_k_[static_cast<size_t>(layer)];
  }
  const EncoderLayerT<T>& layer(int64_t i) const { return layers_[static_cast<size_t>(i)]; }
  int64_t layer_count() const { return static_cast<int64_t>(layers_.size()); }
  const TensorT<T>& conv_w() const { return conv_w_; }
  const TensorT<T>& conv_b() const { return conv_b_; }
  const TensorT<T>& conv_ln_g() const { return conv_ln_g_; }
  const TensorT<T>& conv_ln_b() const { return conv_ln_b_; }

 private:
  EncoderConfigT<T> cfg_;
  std::vector<TensorT<T>> pos_q_, pos_k_;  // one entry when shared
  std::vector<EncoderLayerT<T>> layers_;
  TensorT<T> conv_w_, conv_b_, conv_ln_g_, conv_ln_b_;
};

template <typename T>
class ModelT {
 public:
  ModelT(const ModelConfig& cfg, uint64_t seed, bool gdes_enabled = true);

  const ModelConfig& config() const { return cfg_; }
  ParameterStoreT<T>& params() { return params_; }
  const ParameterStoreT<T>& params() const { return params_; }
  bool gdes_enabled() const { return gdes_; }

  TensorT<T>& token_embeddings() { return e_g_; }
  TensorT<T>& difference_embeddings() { return e_delta_; }
  TensorT<T>& position_table() { return rel_pos_; }
  const TensorT<T>& token_embeddings() const { return e_g_; }
  const TensorT<T>& difference_embeddings() const { return e_delta_; }

  const EncoderT<T>& generator_encoder() const { return gen_; }
  const EncoderT<T>& discriminator_encoder() const { return disc_; }

  // Generator encoder states, [B*L x generator_hidden].
  TensorT<T> generator_hidden(std::span<const int32_t> ids, std::span<const uint8_t> mask,
                              int64_t batch, int64_t len) const;
  // MLM head tied to E_G through the input projection: h W_p^T E_G^T + bias.
  TensorT<T> mlm_logits(const TensorT<T>& hidden_states) const;
  // Full-vocabulary logits over every position, [B*L x vocab].
  TensorT<T> generator_forward(const MaskedBatch& batch) const;

  // stop_gradient(E_G[ids]) + E_Delta[ids]; without GDES (ablation) the
  // stop_gradient is omitted.
  TensorT<T> gdes_embed(std::span<const int32_t> ids) const;
  // Per-position replacement logits, [B*L x 1].
  TensorT<T> discriminator_forward(std::span<const int32_t> ids, std::span<const uint8_t> mask,
                                   int64_t batch, int64_t len,
                                   AttnCapture<T>* capture = nullptr) const;
  // Same encoder and head on caller-supplied input embeddings; the gradient
  // oracles use this to freeze the stop-gradient operand.
  TensorT<T> discriminator_from_embeddings(const TensorT<T>& embeddings,
                                           std::span<const uint8_t> mask, int64_t batch,
                                           int64_t len, AttnCapture<T>* capture = nullptr) const;

  // E_D = E_G + E_Delta (plain data, not recorded on any tape).
  TensorT<T> finalize_embeddings() const;

 private:
  ModelConfig cfg_;
  bool gdes_ = true;
  ParameterStoreT<T> params_;
  TensorT<T> e_g_, e_delta_, rel_pos_;
  TensorT<T> gen_in_proj_;   // [hidden x generator_hidden]
  TensorT<T> mlm_out_bias_;  // [vocab]
  EncoderT<T> gen_, disc_;
  TensorT<T> rtd_head_w_, rtd_head_b_;  // [hidden x 1], [1]
};

// ----------------------------------------------------------------------------
// implementation
// ----------------------------------------------------------------------------

inline void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || hidden < 1 || vocab_size <= 5 || generator_layers < 1)
    throw config_error("model config: sizes must be positive (vocab_size > 5)");
  if (hidden % n_heads != 0)
    throw config_error("model config: hidden " + std::to_string(hidden) +
                       " not divisible by n_heads " + std::to_string(n_heads));
  if (generator_hidden > hidden)
    throw config_error("model config: generator_hidden exceeds hidden");
  if (generator_hidden % head_dim() != 0)
    throw config_error("model config: generator_hidden " + std::to_string(generator_hidden) +
                       " not divisible by head_dim " + std::to_string(head_dim()));
  if (max_rel_distance < 1) throw config_error("model config: max_rel_distance must be >= 1");
  if (conv_kernel < 1 || conv_kernel % 2 == 0)
    throw config_error("model config: conv_kernel must be odd");
}

inline BucketTables make_bucket_tables(int64_t len, int64_t k) {
  auto row_i = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(len * len));
  auto row_j = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(len * len));
  auto c2p = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(len * len));
  auto p2c = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(len * len));
  for (int64_t i = 0; i < len; ++i)
    for (int64_t j = 0; j < len; ++j) {
      const size_t t = static_cast<size_t>(i * len + j);
      (*row_i)[t] = static_cast<int32_t>(i);
      (*row_j)[t] = static_cast<int32_t>(j);
      (*c2p)[t] = static_cast<int32_t>(relative_bucket(i, j, k));
      (*p2c)[t] = static_cast<int32_t>(relative_bucket(j, i, k));
    }
  BucketTables bt;
  bt.row_i = row_i;
  bt.row_j = row_j;
  bt.c2p = c2p;
  bt.p2c = p2c;
  bt.len = len;
  return bt;
}

namespace detail {

template <typename T>
TensorT<T> linear_init(Shape shape, Rng& rng) {
  return TensorT<T>::randn(std::move(shape), rng, T(0.02));
}

// Column bias rows per batch element: 0 for valid keys, a large negative
// number for PAD keys. Finite so downstream values stay finite; exp() of the
// shifted score still underflows to exactly zero weight.
template <typename T>
TensorT<T> mask_bias_row(std::span<const uint8_t> mask, int64_t base, int64_t len) {
  std::vector<T> bias(static_cast<size_t>(len));
  for (int64_t j = 0; j < len; ++j)
    bias[static_cast<size_t>(j)] = mask[static_cast<size_t>(base + j)] ? T(0) : T(-1e30);
  return TensorT<T>::from_vector({len}, std::move(bias));
}

}  // namespace detail

template <typename T>
EncoderT<T>::EncoderT(const EncoderConfigT<T>& cfg, ParameterStoreT<T>& params, Rng& rng)
    : cfg_(cfg) {
  const int64_t w = cfg_.width;
  const int64_t ff = 4 * w;
  const std::string& p = cfg_.prefix;

  const size_t pairs = cfg_.share_position_projections ? 1 : static_cast<size_t>(cfg_.n_layers);
  for (size_t i = 0; i < pairs; ++i) {
    const std::string tag =
        cfg_.share_position_projections ? "" : "l" + std::to_string(i) + ".";
    pos_q_.push_back(params.add(p + tag + "pos_q.w",
                                detail::linear_init<T>({cfg_.pos_dim, w}, rng)));
    pos_k_.push_back(params.add(p + tag + "pos_k.w",
                                detail::linear_init<T>({cfg_.pos_dim, w}, rng)));
  }

  for (int64_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string lp = p + "l" + std::to_string(l) + ".";
    EncoderLayerT<T> layer;
    layer.wq = params.add(lp + "q.w", detail::linear_init<T>({w, w}, rng));
    layer.bq = params.add(lp + "q.b", TensorT<T>::zeros({w}), true);
    layer.wk = params.add(lp + "k.w", detail::linear_init<T>({w, w}, rng));
    layer.bk = params.add(lp + "k.b", TensorT<T>::zeros({w}), true);
    layer.wv = params.add(lp + "v.w", detail::linear_init<T>({w, w}, rng));
    layer.bv = params.add(lp + "v.b", TensorT<T>::zeros({w}), true);
    layer.wo = params.add(lp + "o.w", detail::linear_init<T>({w, w}, rng));
    layer.bo = params.add(lp + "o.b", TensorT<T>::zeros({w}), true);
    layer.ln1_g = params.add(lp + "ln1.g", TensorT<T>::full({w}, T(1)), true);
    layer.ln1_b = params.add(lp + "ln1.b", TensorT<T>::zeros({w}), true);
    layer.ffn_w1 = params.add(lp + "ffn.w1", detail::linear_init<T>({w, ff}, rng));
    layer.ffn_b1 = params.add(lp + "ffn.b1", TensorT<T>::zeros({ff}), true);
    layer.ffn_w2 = params.add(lp + "ffn.w2", detail::linear_init<T>({ff, w}, rng));
    layer.ffn_b2 = params.add(lp + "ffn.b2", TensorT<T>::zeros({w}), true);
    layer.ln2_g = params.add(lp + "ln2.g", TensorT<T>::full({w}, T(1)), true);
    layer.ln2_b = params.add(lp + "ln2.b", TensorT<T>::zeros({w}), true);
    layers_.push_back(std::move(layer));
  }

  if (cfg_.conv_branch) {
    conv_w_ = params.add(p + "conv.w", detail::linear_init<T>({cfg_.conv_kernel, w, w}, rng));
    conv_b_ = params.add(p + "conv.b", TensorT<T>::zeros({w}), true);
    conv_ln_g_ = params.add(p + "conv_ln.g", TensorT<T>::full({w}, T(1)), true);
    conv_ln_b_ = params.add(p + "conv_ln.b", TensorT<T>::zeros({w}), true);
  }
}

template <typename T>
TensorT<T> EncoderT<T>::attention_sublayer(int64_t layer_idx, const TensorT<T>& x_seq,
                                           const TensorT<T>& kr, const TensorT<T>& qr,
                                           const BucketTables& buckets,
                                           const TensorT<T>& mask_row,
                                           AttnCapture<T>* capture) const {
  const auto& layer = layers_[static_cast<size_t>(layer_idx)];
  const int64_t len = x_seq.dim(0);
  const int64_t w = cfg_.width;
  const int64_t hd = w / cfg_.n_heads;
  const T score_scale = T(1) / std::sqrt(T(3 * hd));

  TensorT<T> qc = add_row(matmul(x_seq, layer.wq), layer.bq);
  TensorT<T> kc = add_row(matmul(x_seq, layer.wk), layer.bk);
  TensorT<T> vc = add_row(matmul(x_seq, layer.wv), layer.bv);

  std::vector<TensorT<T>> heads;
  heads.reserve(static_cast<size_t>(cfg_.n_heads));
  for (int64_t h = 0; h < cfg_.n_heads; ++h) {
    TensorT<T> qh = slice(qc, 0, len, h * hd, hd);
    TensorT<T> kh = slice(kc, 0, len, h * hd, hd);
    TensorT<T> vh = slice(vc, 0, len, h * hd, hd);
    TensorT<T> krh = slice(kr, 0, kr.dim(0), h * hd, hd);
    TensorT<T> qrh = slice(qr, 0, qr.dim(0), h * hd, hd);

    TensorT<T> c2c = matmul(qh, transpose2d(kh));                             // [L x L]
    TensorT<T> c2p_all = matmul(qh, transpose2d(krh));                        // [L x 2k]
    TensorT<T> c2p = gather2d(c2p_all, buckets.row_i, buckets.c2p, len, len);
    TensorT<T> p2c_all = matmul(kh, transpose2d(qrh));                        // [L x 2k]
    TensorT<T> p2c = gather2d(p2c_all, buckets.row_j, buckets.p2c, len, len);

    TensorT<T> scores = scale(add(add(c2c, c2p), p2c), score_scale);
    scores = add_row(scores, mask_row);
    TensorT<T> weights = softmax(scores, 1);
    if (capture) capture->weights.push_back(weights);
    heads.push_back(matmul(weights, vh));
  }

  TensorT<T> ctx = cfg_.n_heads == 1 ? heads[0] : concat_cols(heads);
  TensorT<T> attn_out = add_row(matmul(ctx, layer.wo), layer.bo);
  return layer_norm(add(x_seq, attn_out), layer.ln1_g, layer.ln1_b);
}

template <typename T>
TensorT<T> EncoderT<T>::forward(const TensorT<T>& x, int64_t batch, int64_t len,
                                std::span<const uint8_t> mask, const TensorT<T>& pos_table,
                                AttnCapture<T>* capture) const {
  if (x.dim(0) != batch * len || x.dim(1) != cfg_.width)
    throw shape_error("encoder: input " + shape_str(x.shape()) + " does not match batch/len");
  const BucketTables buckets = make_bucket_tables(len, cfg_.max_rel_distance);

  std::vector<TensorT<T>> mask_rows;
  mask_rows.reserve(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b)
    mask_rows.push_back(detail::mask_bias_row<T>(mask, b * len, len));

  TensorT<T> cur = x;
  for (int64_t l = 0; l < cfg_.n_layers; ++l) {
    TensorT<T> kr = matmul(pos_table, pos_k(l));  // [2k x width]
    TensorT<T> qr = matmul(pos_table, pos_q(l));
    std::vector<TensorT<T>> seq_outs;
    seq_outs.reserve(static_cast<size_t>(batch));
    for (int64_t b = 0; b < batch; ++b) {
      TensorT<T> x_seq = batch == 1 ? cur : slice(cur, b * len, len, 0, cfg_.width);
      TensorT<T> y = attention_sublayer(l, x_seq, kr, qr, buckets,
                                        mask_rows[static_cast<size_t>(b)], capture);
      // feed-forward sublayer
      const auto& layer = layers_[static_cast<size_t>(l)];
      TensorT<T> f = add_row(matmul(gelu(add_row(matmul(y, layer.ffn_w1), layer.ffn_b1)),
                                    layer.ffn_w2),
                             layer.ffn_b2);
      seq_outs.push_back(layer_norm(add(y, f), layer.ln2_g, layer.ln2_b));
    }
    TensorT<T> next = batch == 1 ? seq_outs[0] : concat_rows(seq_outs);

    if (l == 0 && cfg_.conv_branch) {
      // Convolution over the token axis of the first layer's input, summed
      // with the first layer's output.
      std::vector<TensorT<T>> conv_outs;
      conv_outs.reserve(static_cast<size_t>(batch));
      for (int64_t b = 0; b < batch; ++b) {
        TensorT<T> x_seq = batch == 1 ? x : slice(x, b * len, len, 0, cfg_.width);
        TensorT<T> c = conv1d_same(x_seq, conv_w_, conv_b_);
        conv_outs.push_back(layer_norm(gelu(c), conv_ln_g_, conv_ln_b_));
      }
      TensorT<T> conv_all = batch == 1 ? conv_outs[0] : concat_rows(conv_outs);
      next = add(next, conv_all);
    }
    cur = next;
  }
  return cur;
}

template <typename T>
ModelT<T>::ModelT(const ModelConfig& cfg, uint64_t seed, bool gdes_enabled)
    : cfg_(cfg), gdes_(gdes_enabled) {
  cfg_.validate();
  Rng rng(seed);
  e_g_ = params_.add("emb.e_g", detail::linear_init<T>({cfg_.vocab_size, cfg_.hidden}, rng));
  // Zero difference table: the discriminator starts in the generator's
  // embedding space.
  e_delta_ = params_.add("emb.e_delta", TensorT<T>::zeros({cfg_.vocab_size, cfg_.hidden}));
  rel_pos_ = params_.add("emb.rel_pos",
                         detail::linear_init<T>({2 * cfg_.max_rel_distance, cfg_.hidden}, rng));
  gen_in_proj_ =
      params_.add("gen.in_proj.w", detail::linear_init<T>({cfg_.hidden, cfg_.generator_hidden}, rng));
  mlm_out_bias_ = params_.add("gen.out_bias", TensorT<T>::zeros({cfg_.vocab_size}), true);

  EncoderConfigT<T> gen_cfg;
  gen_cfg.prefix = "gen.";
  gen_cfg.n_layers = cfg_.generator_layers;
  gen_cfg.width = cfg_.generator_hidden;
  gen_cfg.n_heads = cfg_.generator_heads();
  gen_cfg.pos_dim = cfg_.hidden;
  gen_cfg.max_rel_distance = cfg_.max_rel_distance;
  gen_cfg.conv_branch = false;
  gen_ = EncoderT<T>(gen_cfg, params_, rng);

  EncoderConfigT<T> disc_cfg;
  disc_cfg.prefix = "disc.";
  disc_cfg.n_layers = cfg_.n_layers;
  disc_cfg.width = cfg_.hidden;
  disc_cfg.n_heads = cfg_.n_heads;
  disc_cfg.pos_dim = cfg_.hidden;
  disc_cfg.max_rel_distance = cfg_.max_rel_distance;
  disc_cfg.conv_branch = true;
  disc_cfg.conv_kernel = cfg_.conv_kernel;
  disc_ = EncoderT<T>(disc_cfg, params_, rng);

  rtd_head_w_ = params_.add("disc.head.w", detail::linear_init<T>({cfg_.hidden, 1}, rng));
  rtd_head_b_ = params_.add("disc.head.b", TensorT<T>::zeros({1}), true);
}

template <typename T>
TensorT<T> ModelT<T>::generator_hidden(std::span<const int32_t> ids,
                                       std::span<const uint8_t> mask, int64_t batch,
                                       int64_t len) const {
  TensorT<T> emb = matmul(embedding_gather(e_g_, ids), gen_in_proj_);
  return gen_.forward(emb, batch, len, mask, rel_pos_);
}

template <typename T>
TensorT<T> ModelT<T>::mlm_logits(const TensorT<T>& hidden_states) const {
  TensorT<T> widened = matmul(hidden_states, transpose2d(gen_in_proj_));  // [N x hidden]
  return add_row(matmul(widened, transpose2d(e_g_)), mlm_out_bias_);
}

template <typename T>
TensorT<T> ModelT<T>::generator_forward(const MaskedBatch& batch) const {
  return mlm_logits(generator_hidden(batch.input_ids, batch.attention_mask, batch.batch,
                                     batch.seq_len));
}

template <typename T>
TensorT<T> ModelT<T>::gdes_embed(std::span<const int32_t> ids) const {
  TensorT<T> base = embedding_gather(e_g_, ids);
  if (gdes_) base = stop_gradient(base);
  return add(base, embedding_gather(e_delta_, ids));
}

template <typename T>
TensorT<T> ModelT<T>::discriminator_forward(std::span<const int32_t> ids,
                                            std::span<const uint8_t> mask, int64_t batch,
                                            int64_t len, AttnCapture<T>* capture) const {
  return discriminator_from_embeddings(gdes_embed(ids), mask, batch, len, capture);
}

template <typename T>
TensorT<T> ModelT<T>::discriminator_from_embeddings(const TensorT<T>& embeddings,
                                                    std::span<const uint8_t> mask, int64_t batch,
                                                    int64_t len, AttnCapture<T>* capture) const {
  TensorT<T> h = disc_.forward(embeddings, batch, len, mask, rel_pos_, capture);
  return add_row(matmul(h, rtd_head_w_), rtd_head_b_);  // [B*L x 1]
}

template <typename T>
TensorT<T> ModelT<T>::finalize_embeddings() const {
  TensorT<T> out = TensorT<T>::zeros(e_g_.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out.value()[i] = e_g_.value()[i] + e_delta_.value()[i];
  return out;
}

using Model = ModelT<float>;

}  // namespace rtdp
