#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ccl/checkpoint.hpp"
#include "ccl/model.hpp"
#include "ccl/tensor.hpp"

// The compression function f_c: token sequence + ratio -> C x d_model block
// of continuous vectors, C = ceil(L / r). Three variants: mean pooling over
// full-attention encoder states, and appended compression tokens with causal
// or bidirectional attention among the appended slots. A shared square
// projection is applied to the output. Each compression reports how many
// encoder positions it consumed (L for pooling, L + C for token variants).

namespace ccl {

enum class CompressVariant { MeanPool, CompTokCausal, CompTokBidirectional };

inline const char* to_string(CompressVariant v) {
  switch (v) {
    case CompressVariant::MeanPool: return "mean-pool";
    case CompressVariant::CompTokCausal: return "ctok-causal";
    case CompressVariant::CompTokBidirectional: return "ctok-bidir";
  }
  return "?";
}

inline CompressVariant variant_from_string(const std::string& s) {
  if (s == "mean-pool") return CompressVariant::MeanPool;
  if (s == "ctok-causal") return CompressVariant::CompTokCausal;
  if (s == "ctok-bidir") return CompressVariant::CompTokBidirectional;
  throw InvalidArgumentError("unknown compressor variant: " + s);
}

struct RatioSet {
  std::vector<int> ratios;

  RatioSet() = default;
  explicit RatioSet(std::vector<int> r) : ratios(std::move(r)) { validate(); }

  static RatioSet default_set() { return RatioSet({4, 8, 16, 32, 64, 128}); }

  void validate() const {
    if (ratios.empty()) throw InvalidArgumentError("RatioSet: empty");
    int prev = 0;
    for (int r : ratios) {
      if (r < 1) throw InvalidArgumentError("RatioSet: ratios must be >= 1");
      if (r <= prev)
        throw InvalidArgumentError("RatioSet: ratios must be strictly increasing");
      prev = r;
    }
  }
};

struct ProjectionWeights {
  Tensor w;  // [d_model x d_model], no bias

  static ProjectionWeights identity(int d) {
    return ProjectionWeights{Tensor::identity(d)};
  }
};

struct CompressedContext {
  Tensor vectors;  // [C x d_model]
  int ratio = 1;
  int source_len = 0;
  CompressVariant variant = CompressVariant::MeanPool;
  bool projected = false;
  long encoder_positions = 0;  // positions the encoder processed to build this

  int compressed_len() const { return vectors.dim(0); }
};

inline int compressed_length(int source_len, int ratio) {
  return (source_len + ratio - 1) / ratio;
}

namespace testhook {
// Verification-suite fault injection: shifts the pooling stride so the
// pooling oracle must fail. Never set outside tests / cmd_verify.
inline int& pool_stride_offset() {
  static int offset = 0;
  return offset;
}
}  // namespace testhook

// Consecutive non-overlapping index blocks covering [0, L): block k is
// [k*r, min((k+1)*r, L)). All blocks have size r except possibly the last.
inline std::vector<std::pair<int, int>> partition_blocks(int source_len, int ratio) {
  if (source_len < 1) throw InvalidArgumentError("partition_blocks: L must be >= 1");
  if (ratio < 1) throw InvalidArgumentError("partition_blocks: r must be >= 1");
  std::vector<std::pair<int, int>> blocks;
  for (int begin = 0; begin < source_len; begin += ratio)
    blocks.emplace_back(begin, std::min(begin + ratio, source_len));
  return blocks;
}

// Block means of h's rows: row k of the result is the arithmetic mean of
// h over block k. Differentiable; each member receives 1/|block| of the
// output gradient.
inline Tensor mean_pool(const Tensor& h, int ratio) {
  if (h.rank() != 2) throw ShapeError("mean_pool: input must be [L x d]");
  const int stride = ratio + testhook::pool_stride_offset();
  auto blocks = partition_blocks(h.dim(0), stride);
  std::vector<Tensor> rows;
  rows.reserve(blocks.size());
  for (auto [begin, end] : blocks)
    rows.push_back(mean_axis(slice(h, 0, begin, end - begin), 0));
  return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

inline Tensor apply_projection(const Tensor& z, const ProjectionWeights& proj) {
  if (z.rank() != 2 || proj.w.rank() != 2 || proj.w.dim(0) != proj.w.dim(1) ||
      z.dim(1) != proj.w.dim(0))
    throw InvalidArgumentError("apply_projection: shape mismatch");
  return matmul(z, proj.w);
}

inline void apply_projection(CompressedContext& ctx, const ProjectionWeights& proj) {
  ctx.vectors = apply_projection(ctx.vectors, proj);
  ctx.projected = true;
}

// Encoder pass over exactly L positions with the full self-attention mask.
inline Tensor encode_full_attention(const ModelWeights& encoder,
                                    const LowRankAdapter* adapter,
                                    std::span<const int> tokens) {
  if (tokens.empty()) throw InvalidArgumentError("encode: empty token sequence");
  InputSeq seq;
  seq.add_tokens(tokens);
  AttentionMask mask = build_mask(MaskKind::Full, static_cast<int>(tokens.size()), 0);
  return forward_hidden(encoder, adapter, seq, mask);
}

// No-encoder ablation: the context representation is just the decoder's
// token embeddings, no attention layers.
inline Tensor embedding_lookup_states(const ModelWeights& decoder,
                                      std::span<const int> tokens) {
  if (tokens.empty()) throw InvalidArgumentError("encode: empty token sequence");
  for (int id : tokens)
    if (id < 0 || id >= decoder.config.vocab_size)
      throw InvalidTokenError("embedding lookup: token id out of vocabulary");
  return gather_rows(decoder.tok_emb, {tokens.begin(), tokens.end()});
}

inline CompressedContext compress_states(const Tensor& states, int ratio,
                                         const ProjectionWeights& proj,
                                         long encoder_positions) {
  CompressedContext ctx;
  ctx.vectors = mean_pool(states, ratio);
  ctx.ratio = ratio;
  ctx.source_len = states.dim(0);
  ctx.variant = CompressVariant::MeanPool;
  ctx.encoder_positions = encoder_positions;
  apply_projection(ctx, proj);
  return ctx;
}

inline CompressedContext compress_mean_pool(const ModelWeights& encoder,
                                            const LowRankAdapter* adapter,
                                            std::span<const int> tokens, int ratio,
                                            const ProjectionWeights& proj) {
  Tensor states = encode_full_attention(encoder, adapter, tokens);
  return compress_states(states, ratio, proj,
                         static_cast<long>(tokens.size()));
}

enum class CompTokAttention { Causal, Bidirectional };

// Appends C copies of the learned compression token and reads back their
// final hidden states. The encoder therefore processes L + C positions.
inline CompressedContext compress_tokens(const ModelWeights& encoder,
                                         const LowRankAdapter* adapter,
                                         std::span<const int> tokens, int ratio,
                                         CompTokAttention attention,
                                         const ProjectionWeights& proj) {
  if (tokens.empty()) throw InvalidArgumentError("compress_tokens: empty sequence");
  if (ratio < 1) throw InvalidArgumentError("compress_tokens: ratio must be >= 1");
  const int source_len = static_cast<int>(tokens.size());
  const int comp_len = compressed_length(source_len, ratio);
  InputSeq seq;
  seq.add_tokens(tokens);
  seq.add_comp_tokens(comp_len);
  const MaskKind kind = attention == CompTokAttention::Causal
                            ? MaskKind::CompTokCausal
                            : MaskKind::CompTokBidirectional;
  AttentionMask mask = build_mask(kind, source_len, comp_len);
  Tensor hidden = forward_hidden(encoder, adapter, seq, mask);
  CompressedContext ctx;
  ctx.vectors = slice(hidden, 0, source_len, comp_len);
  ctx.ratio = ratio;
  ctx.source_len = source_len;
  ctx.variant = attention == CompTokAttention::Causal
                    ? CompressVariant::CompTokCausal
                    : CompressVariant::CompTokBidirectional;
  ctx.encoder_positions = static_cast<long>(source_len) + comp_len;
  apply_projection(ctx, proj);
  return ctx;
}

struct MultiCompressResult {
  std::map<int, CompressedContext> by_ratio;
  long encoder_positions = 0;  // total across the ratio set
};

// Compression at every ratio in the set. Mean pooling shares one encoder
// pass across all ratios; the token variants need one pass per ratio.
inline MultiCompressResult compress_multi(const ModelWeights& encoder,
                                          const LowRankAdapter* adapter,
                                          std::span<const int> tokens,
                                          const RatioSet& ratio_set,
                                          CompressVariant variant,
                                          const ProjectionWeights& proj) {
  ratio_set.validate();
  MultiCompressResult result;
  if (variant == CompressVariant::MeanPool) {
    Tensor states = encode_full_attention(encoder, adapter, tokens);
    const long positions = static_cast<long>(tokens.size());
    for (int r : ratio_set.ratios)
      result.by_ratio.emplace(r, compress_states(states, r, proj, positions));
    result.encoder_positions = positions;
    return result;
  }
  const CompTokAttention attention = variant == CompressVariant::CompTokCausal
                                         ? CompTokAttention::Causal
                                         : CompTokAttention::Bidirectional;
  for (int r : ratio_set.ratios) {
    CompressedContext ctx = compress_tokens(encoder, adapter, tokens, r, attention, proj);
    result.encoder_positions += ctx.encoder_positions;
    result.by_ratio.emplace(r, std::move(ctx));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Serialization (checkpoint tensor format plus a metadata block)
// ---------------------------------------------------------------------------

inline TensorFile pack_compressed_context(const CompressedContext& ctx) {
  TensorFile file;
  file.meta.emplace_back("kind", "compressed_context");
  file.meta.emplace_back("variant", to_string(ctx.variant));
  file.meta.emplace_back("ratio", std::to_string(ctx.ratio));
  file.meta.emplace_back("source_len", std::to_string(ctx.source_len));
  file.meta.emplace_back("projected", ctx.projected ? "1" : "0");
  file.meta.emplace_back("encoder_positions", std::to_string(ctx.encoder_positions));
  file.tensors.emplace_back("vectors", ctx.vectors);
  return file;
}

inline CompressedContext unpack_compressed_context(const TensorFile& file) {
  CompressedContext ctx;
  ctx.variant = variant_from_string(file.meta_or_throw("variant"));
  ctx.ratio = std::stoi(file.meta_or_throw("ratio"));
  ctx.source_len = std::stoi(file.meta_or_throw("source_len"));
  ctx.projected = file.meta_or_throw("projected") == "1";
  ctx.encoder_positions = std::stol(file.meta_or_throw("encoder_positions"));
  ctx.vectors = file.tensor_or_throw("vectors");
  return ctx;
}

}  // namespace ccl
