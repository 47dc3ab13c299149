#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ccl/checkpoint.hpp"
#include "ccl/model.hpp"
#include "ccl/rng.hpp"

namespace {

using ccl::AttentionMask;
using ccl::InputSeq;
using ccl::MaskKind;
using ccl::ModelConfig;
using ccl::ModelWeights;
using ccl::Tensor;

ModelConfig tiny_config(int max_positions = 32) {
  ModelConfig c;
  c.vocab_size = 17;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_ff = 32;
  c.max_positions = max_positions;
  return c;
}

std::vector<int> random_tokens(int n, int vocab, ccl::Rng& rng) {
  std::vector<int> out(static_cast<size_t>(n));
  for (int& t : out) t = rng.uniform_int(vocab);
  return out;
}

ccl::LowRankAdapter randomized_adapter(const ModelConfig& config, int rank,
                                       double alpha, ccl::Rng& rng) {
  ccl::LowRankAdapter adapter = ccl::init_adapter(config, rank, alpha, rng);
  for (auto& layer : adapter.layers)
    for (ccl::LowRankDelta* d : {&layer.q, &layer.k, &layer.v, &layer.o})
      for (double& v : d->up.mutable_data()) v = rng.normal(0.0, 0.05);
  return adapter;
}

TEST(BuildMask, CausalRows) {
  AttentionMask m = ccl::build_mask(MaskKind::Causal, 3, 0);
  EXPECT_EQ(m.size, 3);
  const bool expected[3][3] = {{1, 0, 0}, {1, 1, 0}, {1, 1, 1}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_EQ(m.at(i, j), expected[i][j]);
}

TEST(BuildMask, FullAllowsEverything) {
  AttentionMask m = ccl::build_mask(MaskKind::Full, 4, 0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_TRUE(m.at(i, j));
}

TEST(BuildMask, CompTokBidirectional) {
  AttentionMask m = ccl::build_mask(MaskKind::CompTokBidirectional, 3, 2);
  EXPECT_EQ(m.size, 5);
  // Compression rows (indices 3, 4) see all five positions.
  for (int i = 3; i < 5; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_TRUE(m.at(i, j));
  // Context row 1 sees positions {0, 1} only.
  EXPECT_TRUE(m.at(1, 0));
  EXPECT_TRUE(m.at(1, 1));
  EXPECT_FALSE(m.at(1, 2));
  EXPECT_FALSE(m.at(1, 3));
  EXPECT_FALSE(m.at(1, 4));
}

TEST(BuildMask, CompTokCausal) {
  AttentionMask m = ccl::build_mask(MaskKind::CompTokCausal, 3, 2);
  // First compression row sees positions 0..3, second sees all.
  for (int j = 0; j < 4; ++j) EXPECT_TRUE(m.at(3, j));
  EXPECT_FALSE(m.at(3, 4));
  for (int j = 0; j < 5; ++j) EXPECT_TRUE(m.at(4, j));
}

TEST(BuildMask, CompLenRejectedForPlainKinds) {
  EXPECT_THROW(ccl::build_mask(MaskKind::Causal, 3, 1), ccl::InvalidArgumentError);
  EXPECT_THROW(ccl::build_mask(MaskKind::Full, 3, 2), ccl::InvalidArgumentError);
}

TEST(Forward, ShapesForSingleToken) {
  ccl::Rng rng(5);
  ModelConfig config = tiny_config();
  ModelWeights w = ccl::init_weights(config, rng);
  InputSeq seq;
  seq.add_token(3);
  auto result = ccl::forward(w, nullptr, seq, ccl::build_mask(MaskKind::Causal, 1, 0));
  EXPECT_EQ(result.hidden.shape(), (std::vector<int>{1, config.d_model}));
  EXPECT_EQ(result.logits.shape(), (std::vector<int>{1, config.vocab_size}));
}

TEST(Forward, ZeroUpAdapterMatchesBaseBitwise) {
  ccl::Rng rng(6);
  ModelConfig config = tiny_config();
  ModelWeights w = ccl::init_weights(config, rng);
  ccl::LowRankAdapter adapter = ccl::init_adapter(config, 4, 4.0, rng);
  InputSeq seq;
  auto tokens = random_tokens(5, config.vocab_size, rng);
  seq.add_tokens(tokens);
  AttentionMask mask = ccl::build_mask(MaskKind::Causal, 5, 0);
  auto base = ccl::forward(w, nullptr, seq, mask);
  auto adapted = ccl::forward(w, &adapter, seq, mask);
  EXPECT_EQ(ccl::max_abs_diff(base.hidden, adapted.hidden), 0.0);
  EXPECT_EQ(ccl::max_abs_diff(base.logits, adapted.logits), 0.0);
}

TEST(Forward, FullAndCausalDifferAtFirstPosition) {
  ccl::Rng rng(7);
  ModelConfig config = tiny_config();
  ModelWeights w = ccl::init_weights(config, rng);
  auto tokens = random_tokens(4, config.vocab_size, rng);
  InputSeq seq;
  seq.add_tokens(tokens);
  auto causal = ccl::forward_hidden(w, nullptr, seq, ccl::build_mask(MaskKind::Causal, 4, 0));
  auto full = ccl::forward_hidden(w, nullptr, seq, ccl::build_mask(MaskKind::Full, 4, 0));
  Tensor causal_row = ccl::slice(causal, 0, 0, 1);
  Tensor full_row = ccl::slice(full, 0, 0, 1);
  EXPECT_GT(ccl::max_abs_diff(causal_row, full_row), 1e-6);
}

TEST(Forward, CausalFlowIsBitStableUpstream) {
  ccl::Rng rng(8);
  ModelConfig config = tiny_config();
  ModelWeights w = ccl::init_weights(config, rng);
  const int len = 6;
  auto tokens = random_tokens(len, config.vocab_size, rng);
  AttentionMask mask = ccl::build_mask(MaskKind::Causal, len, 0);

  InputSeq seq_a;
  seq_a.add_tokens(tokens);
  Tensor hidden_a = ccl::forward_hidden(w, nullptr, seq_a, mask);

  // Change the last token; all earlier positions must be bit-identical.
  auto perturbed = tokens;
  perturbed[len - 1] = (perturbed[len - 1] + 1) % config.vocab_size;
  InputSeq seq_b;
  seq_b.add_tokens(perturbed);
  Tensor hidden_b = ccl::forward_hidden(w, nullptr, seq_b, mask);

  Tensor head_a = ccl::slice(hidden_a, 0, 0, len - 1);
  Tensor head_b = ccl::slice(hidden_b, 0, 0, len - 1);
  EXPECT_EQ(ccl::max_abs_diff(head_a, head_b), 0.0);

  // Under the full mask the first position must react.
  AttentionMask full = ccl::build_mask(MaskKind::Full, len, 0);
  Tensor full_a = ccl::forward_hidden(w, nullptr, seq_a, full);
  Tensor full_b = ccl::forward_hidden(w, nullptr, seq_b, full);
  EXPECT_GT(ccl::max_abs_diff(ccl::slice(full_a, 0, 0, 1),
                              ccl::slice(full_b, 0, 0, 1)),
            1e-7);
}

// Hidden states at compression slots under the causal compression mask must
// not depend on how many further slots follow.
TEST(Forward, CompressionPrefixStableUnderCausalMask) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    ccl::Rng rng(seed);
    ModelConfig config = tiny_config();
    ModelWeights w = ccl::init_weights(config, rng);
    const int len = 8;
    auto tokens = random_tokens(len, config.vocab_size, rng);

    auto run = [&](int comp) {
      InputSeq seq;
      seq.add_tokens(tokens);
      seq.add_comp_tokens(comp);
      AttentionMask mask = ccl::build_mask(MaskKind::CompTokCausal, len, comp);
      Tensor hidden = ccl::forward_hidden(w, nullptr, seq, mask);
      return hidden;
    };
    Tensor long_run = run(4);
    Tensor short_run = run(2);
    Tensor long_prefix = ccl::slice(long_run, 0, len, 2);
    Tensor short_states = ccl::slice(short_run, 0, len, 2);
    EXPECT_LT(ccl::max_abs_diff(long_prefix, short_states), 1e-5) << "seed " << seed;
  }
}

TEST(Forward, CompressionPrefixShiftsUnderBidirectionalMask) {
  int differing = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    ccl::Rng rng(100 + seed);
    ModelConfig config = tiny_config();
    ModelWeights w = ccl::init_weights(config, rng);
    const int len = 8;
    auto tokens = random_tokens(len, config.vocab_size, rng);
    auto run = [&](int comp) {
      InputSeq seq;
      seq.add_tokens(tokens);
      seq.add_comp_tokens(comp);
      AttentionMask mask = ccl::build_mask(MaskKind::CompTokBidirectional, len, comp);
      return ccl::forward_hidden(w, nullptr, seq, mask);
    };
    Tensor long_prefix = ccl::slice(run(4), 0, len, 2);
    Tensor short_states = ccl::slice(run(2), 0, len, 2);
    if (ccl::max_abs_diff(long_prefix, short_states) > 1e-4) ++differing;
  }
  EXPECT_GE(differing, 9);
}

TEST(Forward, RejectsBadInputs) {
  ccl::Rng rng(9);
  ModelConfig config = tiny_config(/*max_positions=*/8);
  ModelWeights w = ccl::init_weights(config, rng);

  InputSeq overlong;
  overlong.add_tokens(random_tokens(9, config.vocab_size, rng));
  EXPECT_THROW(ccl::forward_hidden(w, nullptr, overlong,
                                   ccl::build_mask(MaskKind::Causal, 9, 0)),
               ccl::LengthError);

  InputSeq bad_token;
  bad_token.add_token(config.vocab_size);
  EXPECT_THROW(ccl::forward_hidden(w, nullptr, bad_token,
                                   ccl::build_mask(MaskKind::Causal, 1, 0)),
               ccl::InvalidTokenError);

  InputSeq two;
  two.add_tokens(random_tokens(2, config.vocab_size, rng));
  EXPECT_THROW(ccl::forward_hidden(w, nullptr, two,
                                   ccl::build_mask(MaskKind::Causal, 3, 0)),
               ccl::ShapeError);
}

TEST(MergeAdapter, ZeroUpLeavesWeightsExact) {
  ccl::Rng rng(10);
  ModelConfig config = tiny_config();
  ModelWeights base = ccl::init_weights(config, rng);
  ccl::LowRankAdapter adapter = ccl::init_adapter(config, 4, 4.0, rng);
  ModelWeights merged = ccl::merge_adapter(base, adapter);
  for (size_t l = 0; l < base.layers.size(); ++l) {
    EXPECT_EQ(ccl::max_abs_diff(base.layers[l].wq, merged.layers[l].wq), 0.0);
    EXPECT_EQ(ccl::max_abs_diff(base.layers[l].wo, merged.layers[l].wo), 0.0);
  }
}

TEST(MergeAdapter, MergedForwardMatchesAdaptedForward) {
  ccl::Rng rng(11);
  ModelConfig config = tiny_config();
  ModelWeights base = ccl::init_weights(config, rng);
  ccl::LowRankAdapter adapter = randomized_adapter(config, 4, 8.0, rng);
  ModelWeights merged = ccl::merge_adapter(base, adapter);

  InputSeq seq;
  seq.add_tokens(random_tokens(6, config.vocab_size, rng));
  AttentionMask mask = ccl::build_mask(MaskKind::Causal, 6, 0);
  auto adapted = ccl::forward(base, &adapter, seq, mask);
  auto direct = ccl::forward(merged, nullptr, seq, mask);
  EXPECT_LT(ccl::max_abs_diff(adapted.hidden, direct.hidden), 1e-10);
  EXPECT_LT(ccl::max_abs_diff(adapted.logits, direct.logits), 1e-10);
}

TEST(MergeAdapter, MergingTwiceDoublesTheDelta) {
  ccl::Rng rng(12);
  ModelConfig config = tiny_config();
  ModelWeights base = ccl::init_weights(config, rng);
  ccl::LowRankAdapter adapter = randomized_adapter(config, 4, 8.0, rng);
  ModelWeights once = ccl::merge_adapter(base, adapter);
  ModelWeights twice = ccl::merge_adapter(once, adapter);
  EXPECT_GT(ccl::max_abs_diff(once.layers[0].wq, twice.layers[0].wq), 0.0);
}

TEST(Checkpoint, FileRoundTripIsBitExact) {
  ccl::Rng rng(13);
  ModelConfig config = tiny_config();
  ModelWeights w = ccl::init_weights(config, rng);

  ccl::TensorFile file = ccl::pack_model(w);
  file.meta.emplace_back("role", "test");
  const std::string bytes = ccl::encode_tensor_file(file);

  ccl::TensorFile decoded = ccl::decode_tensor_file(bytes);
  const std::string bytes_again = ccl::encode_tensor_file(decoded);
  EXPECT_EQ(bytes, bytes_again);

  ModelWeights restored = ccl::unpack_model(decoded);
  EXPECT_EQ(restored.config.d_model, config.d_model);
  // Payload is float32; reloading a float32-quantized model is lossless.
  ccl::TensorFile file2 = ccl::pack_model(restored);
  file2.meta.emplace_back("role", "test");
  EXPECT_EQ(ccl::encode_tensor_file(file2), bytes);
}

TEST(Checkpoint, CorruptFilesRejected) {
  EXPECT_THROW(ccl::decode_tensor_file("short"), ccl::ParseError);
  std::string bad(16, '\0');
  EXPECT_THROW(ccl::decode_tensor_file(bad), ccl::ParseError);
}

TEST(Checkpoint, AdapterRoundTrip) {
  ccl::Rng rng(14);
  ModelConfig config = tiny_config();
  ccl::LowRankAdapter adapter = randomized_adapter(config, 4, 8.0, rng);
  ccl::TensorFile file;
  ccl::append_adapter(file, adapter, "enc_adapter.");
  const std::string bytes = ccl::encode_tensor_file(file);
  ccl::TensorFile decoded = ccl::decode_tensor_file(bytes);
  ccl::LowRankAdapter restored =
      ccl::extract_adapter(decoded, config.n_layers, "enc_adapter.");
  EXPECT_EQ(restored.rank, adapter.rank);
  EXPECT_DOUBLE_EQ(restored.alpha, adapter.alpha);
  EXPECT_EQ(restored.layers.size(), adapter.layers.size());
}

}  // namespace
