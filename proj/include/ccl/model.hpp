#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ccl/rng.hpp"
#include "ccl/tensor.hpp"

// A small pre-norm transformer used in three roles: full-attention encoder,
// causal decoder, and frozen teacher. Inputs mix token ids, continuous
// vectors, and repeated compression-token slots; the attention pattern is a
// pluggable mask. Low-rank adapters cover the attention projections and can
// be merged into the base weights.

namespace ccl {

// ---------------------------------------------------------------------------
// Configuration and weights
// ---------------------------------------------------------------------------

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 0;
  int n_layers = 0;
  int n_heads = 0;
  int d_ff = 0;
  int max_positions = 0;

  void validate() const {
    if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 ||
        d_ff <= 0 || max_positions <= 0)
      throw InvalidArgumentError("ModelConfig: all dimensions must be positive");
    if (d_model % n_heads != 0)
      throw InvalidArgumentError("ModelConfig: d_model must be divisible by n_heads");
  }

  int head_dim() const { return d_model / n_heads; }
};

// All projection matrices are stored [d_out x d_in]; a forward applies
// y = x * W^T. The feed-forward block is bilinear-gated:
// ffn(x) = ((x W_in^T) .* (x W_gate^T)) W_out^T, which keeps the layer
// nonlinear while staying inside the primitive set.
struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;  // [d_model x d_model]
  Tensor ln2_gain, ln2_bias;
  Tensor w_in, w_gate;  // [d_ff x d_model]
  Tensor w_out;         // [d_model x d_ff]
};

struct ModelWeights {
  ModelConfig config;
  Tensor tok_emb;  // [vocab x d_model]
  Tensor pos_emb;  // [max_positions x d_model]
  std::vector<LayerWeights> layers;
  Tensor ln_f_gain, ln_f_bias;
  Tensor out_proj;   // [vocab x d_model], untied from tok_emb
  Tensor comp_tok;   // [1 x d_model], the single shared compression token

  std::vector<std::pair<std::string, Tensor>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      const LayerWeights& lw = layers[i];
      out.emplace_back(p + "ln1_gain", lw.ln1_gain);
      out.emplace_back(p + "ln1_bias", lw.ln1_bias);
      out.emplace_back(p + "wq", lw.wq);
      out.emplace_back(p + "wk", lw.wk);
      out.emplace_back(p + "wv", lw.wv);
      out.emplace_back(p + "wo", lw.wo);
      out.emplace_back(p + "ln2_gain", lw.ln2_gain);
      out.emplace_back(p + "ln2_bias", lw.ln2_bias);
      out.emplace_back(p + "w_in", lw.w_in);
      out.emplace_back(p + "w_gate", lw.w_gate);
      out.emplace_back(p + "w_out", lw.w_out);
    }
    out.emplace_back("ln_f_gain", ln_f_gain);
    out.emplace_back("ln_f_bias", ln_f_bias);
    out.emplace_back("out_proj", out_proj);
    out.emplace_back("comp_tok", comp_tok);
    return out;
  }
};

// Layer matrices use init_std (0.02); embeddings and the output projection
// use embed_std, defaulting to 1/sqrt(d_model). With a frozen random base
// the final layer norm fixes |h| at sqrt(d), so the peak reachable logit is
// |h| * |embedding row| = d * embed_std: at GPT-2 scale 0.02 is ~1/sqrt(d),
// but at desk-scale d it must grow accordingly or every distribution the
// model can express stays nearly uniform.
inline ModelWeights init_weights(const ModelConfig& config, Rng& rng,
                                 double init_std = 0.02, double embed_std = 0.0) {
  config.validate();
  ModelWeights w;
  w.config = config;
  const int d = config.d_model;
  if (embed_std <= 0.0) embed_std = 1.0 / std::sqrt(static_cast<double>(d));
  w.tok_emb = Tensor::randn({config.vocab_size, d}, rng, embed_std);
  // Learned absolute positions, initialized sinusoidally and scaled to the
  // token-embedding norm. The shift structure of sinusoids lets attention
  // express relative offsets through low-rank query/key updates, which a
  // random initialization only supports at full rank.
  w.pos_emb = Tensor::zeros({config.max_positions, d});
  {
    auto pos_data = w.pos_emb.mutable_data();
    const double row_scale =
        embed_std * std::sqrt(static_cast<double>(d)) /
        std::sqrt(static_cast<double>(d) / 2.0);
    for (int pos = 0; pos < config.max_positions; ++pos) {
      for (int i = 0; i < d / 2; ++i) {
        const double freq =
            std::pow(10000.0, -2.0 * static_cast<double>(i) / d);
        pos_data[static_cast<size_t>(pos) * d + 2 * i] =
            row_scale * std::sin(pos * freq);
        pos_data[static_cast<size_t>(pos) * d + 2 * i + 1] =
            row_scale * std::cos(pos * freq);
      }
    }
  }
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_gain = Tensor::filled({d}, 1.0);
    lw.ln1_bias = Tensor::zeros({d});
    lw.wq = Tensor::randn({d, d}, rng, init_std);
    // Key projection starts equal to the query projection: W^T W of a
    // gaussian matrix concentrates to a scaled identity, so raw attention
    // scores begin as content similarity instead of an arbitrary bilinear
    // form. The two matrices are independent parameters from step one.
    lw.wk = lw.wq.detached_copy();
    lw.wv = Tensor::randn({d, d}, rng, init_std);
    lw.wo = Tensor::randn({d, d}, rng, init_std);
    lw.ln2_gain = Tensor::filled({d}, 1.0);
    lw.ln2_bias = Tensor::zeros({d});
    lw.w_in = Tensor::randn({config.d_ff, d}, rng, init_std);
    lw.w_gate = Tensor::randn({config.d_ff, d}, rng, init_std);
    lw.w_out = Tensor::randn({d, config.d_ff}, rng, init_std);
    w.layers.push_back(std::move(lw));
  }
  w.ln_f_gain = Tensor::filled({d}, 1.0);
  w.ln_f_bias = Tensor::zeros({d});
  // The output projection starts as a copy of the token embedding (still an
  // untied, independent parameter). A fresh random readout would leave the
  // residual stream and the vocabulary uncorrelated, which no trained
  // language model exhibits; the copy gives the frozen base the usual
  // property that writing a token's embedding into the residual stream
  // raises that token's logit.
  w.out_proj = w.tok_emb.detached_copy();
  w.comp_tok = Tensor::randn({1, d}, rng, init_std);
  return w;
}

// ---------------------------------------------------------------------------
// Low-rank adapters
// ---------------------------------------------------------------------------

// One adapted matrix: delta = (alpha / rank) * up * down, shaped like the
// base [d_out x d_in]. A zero `up` makes the adapted forward equal the base
// forward exactly.
struct LowRankDelta {
  Tensor down;  // [rank x d_in]
  Tensor up;    // [d_out x rank]
};

struct LayerAdapters {
  LowRankDelta q, k, v, o;
};

struct LowRankAdapter {
  double alpha = 16.0;
  int rank = 16;
  std::vector<LayerAdapters> layers;

  std::vector<std::pair<std::string, Tensor>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      auto push = [&](const char* name, const LowRankDelta& d) {
        out.emplace_back(p + name + std::string(".down"), d.down);
        out.emplace_back(p + name + std::string(".up"), d.up);
      };
      push("q", layers[i].q);
      push("k", layers[i].k);
      push("v", layers[i].v);
      push("o", layers[i].o);
    }
    return out;
  }
};

// down is random; up defaults to zero so the initial delta vanishes. A
// nonzero up_std trades that exact-identity start for live gradients on
// both factors from the first step.
inline LowRankAdapter init_adapter(const ModelConfig& config, int rank,
                                   double alpha, Rng& rng,
                                   double init_std = 0.02, double up_std = 0.0) {
  if (rank <= 0) throw InvalidArgumentError("init_adapter: rank must be positive");
  LowRankAdapter adapter;
  adapter.alpha = alpha;
  adapter.rank = rank;
  const int d = config.d_model;
  for (int l = 0; l < config.n_layers; ++l) {
    LayerAdapters la;
    for (LowRankDelta* delta : {&la.q, &la.k, &la.v, &la.o}) {
      delta->down = Tensor::randn({rank, d}, rng, init_std);
      delta->up = up_std > 0.0 ? Tensor::randn({d, rank}, rng, up_std)
                               : Tensor::zeros({d, rank});
    }
    adapter.layers.push_back(std::move(la));
  }
  return adapter;
}

// merged = base + (alpha/rank) * up * down for every adapted matrix.
inline ModelWeights merge_adapter(const ModelWeights& base,
                                  const LowRankAdapter& adapter) {
  if (adapter.layers.size() != base.layers.size())
    throw InvalidArgumentError("merge_adapter: layer count mismatch");
  ModelWeights merged;
  merged.config = base.config;
  merged.tok_emb = base.tok_emb.detached_copy();
  merged.pos_emb = base.pos_emb.detached_copy();
  merged.ln_f_gain = base.ln_f_gain.detached_copy();
  merged.ln_f_bias = base.ln_f_bias.detached_copy();
  merged.out_proj = base.out_proj.detached_copy();
  merged.comp_tok = base.comp_tok.detached_copy();
  const double scaling = adapter.alpha / adapter.rank;
  for (size_t l = 0; l < base.layers.size(); ++l) {
    const LayerWeights& bl = base.layers[l];
    const LayerAdapters& al = adapter.layers[l];
    LayerWeights ml;
    ml.ln1_gain = bl.ln1_gain.detached_copy();
    ml.ln1_bias = bl.ln1_bias.detached_copy();
    ml.ln2_gain = bl.ln2_gain.detached_copy();
    ml.ln2_bias = bl.ln2_bias.detached_copy();
    ml.w_in = bl.w_in.detached_copy();
    ml.w_gate = bl.w_gate.detached_copy();
    ml.w_out = bl.w_out.detached_copy();
    auto merge_one = [&](const Tensor& base_w, const LowRankDelta& delta) {
      if (delta.up.dim(0) != base_w.dim(0) || delta.down.dim(1) != base_w.dim(1) ||
          delta.up.dim(1) != delta.down.dim(0))
        throw InvalidArgumentError("merge_adapter: delta shape mismatch");
      Tensor merged_w = base_w.detached_copy();
      auto out = merged_w.mutable_data();
      const auto up = delta.up.data();
      const auto down = delta.down.data();
      const int d_out = base_w.dim(0), d_in = base_w.dim(1);
      const int rank = delta.up.dim(1);
      for (int i = 0; i < d_out; ++i)
        for (int r = 0; r < rank; ++r) {
          const double u = up[static_cast<size_t>(i) * rank + r] * scaling;
          if (u == 0.0) continue;
          for (int j = 0; j < d_in; ++j)
            out[static_cast<size_t>(i) * d_in + j] +=
                u * down[static_cast<size_t>(r) * d_in + j];
        }
      return merged_w;
    };
    ml.wq = merge_one(bl.wq, al.q);
    ml.wk = merge_one(bl.wk, al.k);
    ml.wv = merge_one(bl.wv, al.v);
    ml.wo = merge_one(bl.wo, al.o);
    merged.layers.push_back(std::move(ml));
  }
  return merged;
}

// ---------------------------------------------------------------------------
// Attention masks
// ---------------------------------------------------------------------------

enum class MaskKind { Causal, Full, CompTokCausal, CompTokBidirectional };

inline const char* to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::Causal: return "causal";
    case MaskKind::Full: return "full";
    case MaskKind::CompTokCausal: return "comp-tok-causal";
    case MaskKind::CompTokBidirectional: return "comp-tok-bidirectional";
  }
  return "?";
}

struct AttentionMask {
  MaskKind kind = MaskKind::Causal;
  int context_len = 0;
  int comp_len = 0;
  int size = 0;                   // context_len + comp_len
  std::vector<uint8_t> allowed;   // row-major [size x size]

  bool at(int i, int j) const {
    return allowed[static_cast<size_t>(i) * size + j] != 0;
  }
};

inline AttentionMask build_mask(MaskKind kind, int context_len, int comp_len) {
  if (context_len < 1)
    throw InvalidArgumentError("build_mask: context_len must be >= 1");
  if (comp_len < 0)
    throw InvalidArgumentError("build_mask: comp_len must be >= 0");
  if ((kind == MaskKind::Causal || kind == MaskKind::Full) && comp_len != 0)
    throw InvalidArgumentError("build_mask: comp_len must be 0 for causal/full masks");
  AttentionMask mask;
  mask.kind = kind;
  mask.context_len = context_len;
  mask.comp_len = comp_len;
  mask.size = context_len + comp_len;
  mask.allowed.assign(static_cast<size_t>(mask.size) * mask.size, 0);
  const int n = mask.size;
  const int ctx = context_len;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      bool ok = false;
      switch (kind) {
        case MaskKind::Causal:
          ok = j <= i;
          break;
        case MaskKind::Full:
          ok = true;
          break;
        case MaskKind::CompTokCausal:
          // Context rows causal; compression rows causal over everything
          // before and at themselves.
          ok = j <= i;
          break;
        case MaskKind::CompTokBidirectional:
          // Context rows stay causal and never see compression slots;
          // compression rows see the whole context and each other.
          ok = i < ctx ? (j <= i) : true;
          break;
      }
      if (ok) mask.allowed[static_cast<size_t>(i) * n + j] = 1;
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Mixed input sequences
// ---------------------------------------------------------------------------

// Ordered runs of items: token ids, continuous rows, or repeated
// compression-token slots. Continuous rows keep their tape history, so
// gradients flow back into whatever produced them.
class InputSeq {
 public:
  struct Segment {
    enum class Kind { Tokens, Vectors, CompTokens } kind;
    std::vector<int> tokens;
    Tensor vectors;  // [k x d_model]
    int count = 0;   // CompTokens only
  };

  void add_tokens(std::span<const int> ids) {
    if (ids.empty()) return;
    Segment s{Segment::Kind::Tokens, {ids.begin(), ids.end()}, {}, 0};
    length_ += static_cast<int>(ids.size());
    segments_.push_back(std::move(s));
  }

  void add_token(int id) {
    const int one[] = {id};
    add_tokens(one);
  }

  void add_vectors(const Tensor& rows) {
    if (rows.rank() != 2)
      throw ShapeError("InputSeq: continuous input must be [k x d_model]");
    Segment s{Segment::Kind::Vectors, {}, rows, 0};
    length_ += rows.dim(0);
    segments_.push_back(std::move(s));
  }

  void add_comp_tokens(int count) {
    if (count <= 0) throw InvalidArgumentError("InputSeq: comp token count must be positive");
    Segment s{Segment::Kind::CompTokens, {}, {}, count};
    length_ += count;
    segments_.push_back(std::move(s));
  }

  int length() const { return length_; }
  const std::vector<Segment>& segments() const { return segments_; }

 private:
  std::vector<Segment> segments_;
  int length_ = 0;
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct ForwardResult {
  Tensor hidden;  // [len x d_model], final states before the vocab projection
  Tensor logits;  // [len x vocab_size]
};

namespace detail {

inline Tensor linear(const Tensor& x, const Tensor& w) {
  return matmul_nt(x, w);
}

inline Tensor adapted_linear(const Tensor& x, const Tensor& w,
                             const LowRankDelta* delta, double scaling) {
  Tensor base = linear(x, w);
  if (delta == nullptr) return base;
  Tensor lora = matmul_nt(matmul_nt(x, delta->down), delta->up);
  return add(base, scale(lora, scaling));
}

// Embeds the mixed sequence and adds positional rows 0..n-1.
inline Tensor embed_input(const ModelWeights& w, const InputSeq& input) {
  const int n = input.length();
  if (n < 1) throw InvalidArgumentError("forward: empty input");
  if (n > w.config.max_positions)
    throw LengthError("forward: sequence of " + std::to_string(n) +
                      " exceeds max_positions " +
                      std::to_string(w.config.max_positions));
  std::vector<Tensor> chunks;
  for (const auto& seg : input.segments()) {
    switch (seg.kind) {
      case InputSeq::Segment::Kind::Tokens: {
        for (int id : seg.tokens)
          if (id < 0 || id >= w.config.vocab_size)
            throw InvalidTokenError("forward: token id " + std::to_string(id) +
                                    " outside vocabulary");
        chunks.push_back(gather_rows(w.tok_emb, seg.tokens));
        break;
      }
      case InputSeq::Segment::Kind::Vectors: {
        if (seg.vectors.dim(1) != w.config.d_model)
          throw ShapeError("forward: continuous input width != d_model");
        chunks.push_back(seg.vectors);
        break;
      }
      case InputSeq::Segment::Kind::CompTokens: {
        std::vector<Tensor> repeats(static_cast<size_t>(seg.count), w.comp_tok);
        chunks.push_back(seg.count == 1 ? w.comp_tok : concat(repeats, 0));
        break;
      }
    }
  }
  Tensor embedded = chunks.size() == 1 ? chunks[0] : concat(chunks, 0);
  return add(embedded, slice(w.pos_emb, 0, 0, n));
}

}  // namespace detail

// Final hidden states for a mixed input under the given mask. Deterministic
// in (weights, adapter, input, mask).
inline Tensor forward_hidden(const ModelWeights& w, const LowRankAdapter* adapter,
                             const InputSeq& input, const AttentionMask& mask) {
  const int n = input.length();
  if (mask.size != n)
    throw ShapeError("forward: input length " + std::to_string(n) +
                     " does not match mask size " + std::to_string(mask.size));
  if (adapter != nullptr && adapter->layers.size() != w.layers.size())
    throw InvalidArgumentError("forward: adapter layer count mismatch");

  Tensor h = detail::embed_input(w, input);
  const int heads = w.config.n_heads;
  const int hd = w.config.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const double lora_scaling =
      adapter != nullptr ? adapter->alpha / adapter->rank : 0.0;

  for (size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& lw = w.layers[l];
    const LayerAdapters* la = adapter != nullptr ? &adapter->layers[l] : nullptr;

    Tensor normed = layer_norm(h, lw.ln1_gain, lw.ln1_bias);
    Tensor q = detail::adapted_linear(normed, lw.wq, la ? &la->q : nullptr, lora_scaling);
    Tensor k = detail::adapted_linear(normed, lw.wk, la ? &la->k : nullptr, lora_scaling);
    Tensor v = detail::adapted_linear(normed, lw.wv, la ? &la->v : nullptr, lora_scaling);

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<size_t>(heads));
    for (int head = 0; head < heads; ++head) {
      Tensor qh = ccl::slice(q, 1, head * hd, hd);
      Tensor kh = ccl::slice(k, 1, head * hd, hd);
      Tensor vh = ccl::slice(v, 1, head * hd, hd);
      Tensor scores = scale(matmul_nt(qh, kh), att_scale);
      scores = masked_fill(scores, mask.allowed, -1e9);
      Tensor attn = softmax(scores);
      head_outputs.push_back(matmul(attn, vh));
    }
    Tensor ctx = heads == 1 ? head_outputs[0] : concat(head_outputs, 1);
    Tensor attn_out =
        detail::adapted_linear(ctx, lw.wo, la ? &la->o : nullptr, lora_scaling);
    h = add(h, attn_out);

    Tensor normed2 = layer_norm(h, lw.ln2_gain, lw.ln2_bias);
    Tensor gated = mul(detail::linear(normed2, lw.w_in),
                       detail::linear(normed2, lw.w_gate));
    h = add(h, detail::linear(gated, lw.w_out));
  }
  return layer_norm(h, w.ln_f_gain, w.ln_f_bias);
}

// Vocabulary logits for a block of hidden rows.
inline Tensor project_to_vocab(const ModelWeights& w, const Tensor& hidden_rows) {
  return detail::linear(hidden_rows, w.out_proj);
}

inline ForwardResult forward(const ModelWeights& w, const LowRankAdapter* adapter,
                             const InputSeq& input, const AttentionMask& mask) {
  ForwardResult result;
  result.hidden = forward_hidden(w, adapter, input, mask);
  result.logits = project_to_vocab(w, result.hidden);
  return result;
}

}  // namespace ccl
