#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccl/compressor.hpp"
#include "ccl/distill.hpp"
#include "ccl/grad_check.hpp"
#include "ccl/model.hpp"
#include "ccl/rng.hpp"

// The release-gate property suites behind `ccl verify`: gradient checks,
// the pooling oracle, the compression-token prefix property, and the KL
// identities. Each suite reports pass/fail with a short diagnostic.

namespace ccl {

struct SuiteResult {
  std::string suite;
  bool passed = false;
  std::string detail;
};

namespace verify_detail {

inline Tensor naive_block_average(const Tensor& h, int ratio) {
  const int rows = h.dim(0), cols = h.dim(1);
  const int out_rows = (rows + ratio - 1) / ratio;
  std::vector<double> out(static_cast<size_t>(out_rows) * cols, 0.0);
  for (int k = 0; k < out_rows; ++k) {
    const int begin = k * ratio;
    const int end = std::min(begin + ratio, rows);
    for (int j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (int i = begin; i < end; ++i) acc += h.at(i, j);
      out[static_cast<size_t>(k) * cols + j] = acc / (end - begin);
    }
  }
  return Tensor::from_data({out_rows, cols}, std::move(out));
}

}  // namespace verify_detail

// Central-difference checks: every primitive at random generic points, then
// the end-to-end multi-ratio loss on a tiny model.
inline SuiteResult verify_gradients() {
  SuiteResult result{"gradient_checks", true, ""};
  Rng rng(2024);
  auto expect = [&result](bool ok, const std::string& what) {
    if (!ok && result.passed) {
      result.passed = false;
      result.detail = what;
    }
  };

  for (int trial = 0; trial < 3 && result.passed; ++trial) {
    // Width >= 4 avoids layer_norm's two-element geometry, where the output
    // is +-1 for any input and the true gradient all but vanishes.
    const int m = 4 + rng.uniform_int(3), k = 4 + rng.uniform_int(3),
              n = 4 + rng.uniform_int(3);
    Tensor a = Tensor::randn({m, k}, rng, 1.0, true);
    Tensor b = Tensor::randn({k, n}, rng, 1.0, true);
    Tensor w_mn = Tensor::randn({m, n}, rng, 1.0);
    Tensor w_mk = Tensor::randn({m, k}, rng, 1.0);
    Tensor gain = Tensor::randn({k}, rng, 1.0, true);
    Tensor bias = Tensor::randn({k}, rng, 1.0, true);
    Tensor positive = Tensor::randn({m, k}, rng, 1.0, true);
    for (double& v : positive.mutable_data()) v = std::abs(v) + 0.5;
    std::vector<uint8_t> mask(static_cast<size_t>(m) * k);
    for (auto& bit : mask) bit = rng.uniform() < 0.5 ? 1 : 0;

    struct Case {
      const char* name;
      std::function<Tensor()> f;
      std::vector<std::pair<std::string, Tensor>> params;
    };
    const std::vector<Case> cases = {
        {"matmul", [&] { return sum(mul(matmul(a, b), w_mn)); }, {{"a", a}, {"b", b}}},
        {"add", [&] { return sum(mul(add(a, a), w_mk)); }, {{"a", a}}},
        {"mul", [&] { return sum(mul(mul(a, a), w_mk)); }, {{"a", a}}},
        {"scale", [&] { return sum(mul(scale(a, -1.3), w_mk)); }, {{"a", a}}},
        {"transpose", [&] { return sum(mul(transpose(a), transpose(w_mk))); }, {{"a", a}}},
        {"concat", [&] { return sum(concat({a, a}, 0)); }, {{"a", a}}},
        {"slice", [&] { return sum(slice(a, 1, 0, k - 1)); }, {{"a", a}}},
        {"gather", [&] { return sum(gather_rows(a, {0, m - 1, 0})); }, {{"a", a}}},
        {"softmax", [&] { return sum(mul(softmax(a), w_mk)); }, {{"a", a}}},
        {"log", [&] { return sum(mul(log(positive), w_mk)); }, {{"positive", positive}}},
        {"mean_axis", [&] { return sum(mean_axis(a, 0)); }, {{"a", a}}},
        {"layer_norm",
         [&] { return sum(mul(layer_norm(a, gain, bias), w_mk)); },
         {{"a", a}, {"gain", gain}, {"bias", bias}}},
        {"masked_fill", [&] { return sum(mul(masked_fill(a, mask, -2.0), w_mk)); }, {{"a", a}}},
        {"mean", [&] { return mean(a); }, {{"a", a}}},
        {"kl",
         [&] { return kl_divergence(softmax(slice(w_mk, 0, 0, 1)), softmax(slice(a, 0, 0, 1))); },
         {{"a", a}}},
    };
    for (const Case& c : cases) {
      const double err = grad_check(c.f, c.params, 1e-6).max_rel_err();
      expect(err < 1e-5, std::string("primitive ") + c.name + " rel err " +
                             std::to_string(err));
    }
  }

  if (result.passed) {
    ModelConfig config;
    config.vocab_size = 20;
    config.d_model = 16;
    config.n_layers = 1;
    config.n_heads = 2;
    config.d_ff = 32;
    config.max_positions = 64;
    ModelWeights teacher = init_weights(config, rng, 0.3);
    Student student;
    student.base = init_weights(config, rng, 0.3);
    student.encoder_adapter = init_adapter(config, 2, 2.0, rng, 0.3);
    student.decoder_adapter = init_adapter(config, 2, 2.0, rng, 0.3);
    for (auto* adapter : {&student.encoder_adapter, &student.decoder_adapter})
      for (auto& layer : adapter->layers)
        for (LowRankDelta* d : {&layer.q, &layer.k, &layer.v, &layer.o})
          for (double& v : d->up.mutable_data()) v = rng.normal(0.0, 0.3);
    student.projection = ProjectionWeights::identity(config.d_model);
    student.variant = CompressVariant::CompTokCausal;
    TrainingExample ex;
    for (int i = 0; i < 8; ++i) ex.context.push_back(rng.uniform_int(20));
    for (int i = 0; i < 3; ++i) ex.prompt.push_back(rng.uniform_int(20));
    for (int i = 0; i < 2; ++i) ex.answer.push_back(rng.uniform_int(20));
    TeacherOutput target = teacher_distributions(teacher, ex);
    auto params = trainable_parameters(student, {});
    auto f = [&] { return multi_ratio_loss(student, target, ex, RatioSet({2, 4})); };
    const double err = grad_check(f, params, 1e-5).max_rel_err();
    expect(err < 1e-5, "end-to-end loss rel err " + std::to_string(err));
  }
  if (result.passed) result.detail = "all gradients within 1e-5";
  return result;
}

// mean_pool against an independent double-loop average, plus block counts.
inline SuiteResult verify_pooling(int random_cases = 300) {
  SuiteResult result{"pooling_oracle", true, ""};
  Rng rng(7);
  for (int len = 1; len <= 256 && result.passed; ++len) {
    for (int ratio : {1, 2, 3, 4, 7, 16, 64, 128}) {
      if (static_cast<int>(partition_blocks(len, ratio).size()) !=
          (len + ratio - 1) / ratio) {
        result.passed = false;
        result.detail = "block count wrong at L=" + std::to_string(len) +
                        " r=" + std::to_string(ratio);
      }
    }
  }
  for (int t = 0; t < random_cases && result.passed; ++t) {
    const int rows = 1 + rng.uniform_int(256);
    const int cols = 1 + rng.uniform_int(16);
    const int ratio = 1 + rng.uniform_int(128);
    Tensor h = Tensor::randn({rows, cols}, rng, 1.0);
    Tensor pooled = mean_pool(h, ratio);
    Tensor reference = verify_detail::naive_block_average(h, ratio);
    if (pooled.dim(0) != reference.dim(0)) {
      result.passed = false;
      result.detail = "pooled row count wrong at L=" + std::to_string(rows) +
                      " r=" + std::to_string(ratio);
      break;
    }
    const double diff = max_abs_diff(pooled, reference);
    if (diff > 1e-9) {
      result.passed = false;
      result.detail = "pooling mismatch " + std::to_string(diff) + " at L=" +
                      std::to_string(rows) + " r=" + std::to_string(ratio);
    }
  }
  if (result.passed)
    result.detail = std::to_string(random_cases) + " random cases within 1e-9";
  return result;
}

// Causal compression tokens: shorter outputs are prefixes of longer ones.
// Bidirectional compression tokens: they are not, for generic weights.
inline SuiteResult verify_prefix_property() {
  SuiteResult result{"prefix_property", true, ""};
  int bidirectional_differs = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(300 + seed);
    ModelConfig config;
    config.vocab_size = 19;
    config.d_model = 16;
    config.n_layers = 2;
    config.n_heads = 4;
    config.d_ff = 32;
    config.max_positions = 24;
    ModelWeights enc = init_weights(config, rng);
    ProjectionWeights proj = ProjectionWeights::identity(config.d_model);
    std::vector<int> tokens(8);
    for (int& t : tokens) t = rng.uniform_int(config.vocab_size);

    auto fine = compress_tokens(enc, nullptr, tokens, 4, CompTokAttention::Causal, proj);
    auto coarse = compress_tokens(enc, nullptr, tokens, 8, CompTokAttention::Causal, proj);
    const double causal_diff =
        max_abs_diff(slice(fine.vectors, 0, 0, 1), coarse.vectors);
    if (causal_diff > 1e-5) {
      result.passed = false;
      result.detail = "causal prefix broke at seed " + std::to_string(seed) +
                      " (diff " + std::to_string(causal_diff) + ")";
      break;
    }
    auto fine_bi =
        compress_tokens(enc, nullptr, tokens, 4, CompTokAttention::Bidirectional, proj);
    auto coarse_bi =
        compress_tokens(enc, nullptr, tokens, 8, CompTokAttention::Bidirectional, proj);
    if (max_abs_diff(slice(fine_bi.vectors, 0, 0, 1), coarse_bi.vectors) > 1e-4)
      ++bidirectional_differs;
  }
  if (result.passed && bidirectional_differs < 9) {
    result.passed = false;
    result.detail = "bidirectional states differed in only " +
                    std::to_string(bidirectional_differs) + "/10 seeds";
  }
  if (result.passed)
    result.detail = "causal prefixes stable; bidirectional differ in " +
                    std::to_string(bidirectional_differs) + "/10 seeds";
  return result;
}

// KL nonnegativity, zero at equality, hand values, softmax normalization.
inline SuiteResult verify_kl_properties() {
  SuiteResult result{"kl_properties", true, ""};
  Rng rng(11);
  auto fail = [&result](const std::string& what) {
    if (result.passed) {
      result.passed = false;
      result.detail = what;
    }
  };
  for (int t = 0; t < 200 && result.passed; ++t) {
    const int n = 2 + rng.uniform_int(12);
    std::vector<double> qv(static_cast<size_t>(n)), pv(static_cast<size_t>(n));
    double qs = 0.0, ps = 0.0;
    for (int i = 0; i < n; ++i) {
      qv[static_cast<size_t>(i)] = rng.uniform() + 1e-3;
      pv[static_cast<size_t>(i)] = rng.uniform() + 1e-3;
      qs += qv[static_cast<size_t>(i)];
      ps += pv[static_cast<size_t>(i)];
    }
    for (int i = 0; i < n; ++i) {
      qv[static_cast<size_t>(i)] /= qs;
      pv[static_cast<size_t>(i)] /= ps;
    }
    Tensor q = Tensor::from_data({n}, qv);
    Tensor p = Tensor::from_data({n}, pv);
    if (kl_divergence(q, p).value() < -1e-12) fail("negative divergence");
    if (std::abs(kl_divergence(q, q).value()) > 1e-9) fail("KL(q||q) nonzero");
    if (max_abs_diff(q, p) >= 1e-3 && kl_divergence(q, p).value() <= 1e-9)
      fail("zero divergence for distinct distributions");
  }
  if (result.passed) {
    Tensor q1 = Tensor::from_data({2}, {1.0, 0.0});
    Tensor p1 = Tensor::from_data({2}, {0.5, 0.5});
    if (std::abs(kl_divergence(q1, p1).value() - std::log(2.0)) > 1e-12)
      fail("KL((1,0)||(.5,.5)) != ln 2");
    Tensor q2 = Tensor::from_data({2}, {0.5, 0.5});
    Tensor p2 = Tensor::from_data({2}, {0.25, 0.75});
    const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    if (std::abs(kl_divergence(q2, p2).value() - expected) > 1e-12)
      fail("KL((.5,.5)||(.25,.75)) wrong");
    for (int t = 0; t < 50 && result.passed; ++t) {
      std::vector<double> logits(16);
      for (double& v : logits) v = (rng.uniform() * 2.0 - 1.0) * 80.0;
      Tensor s = softmax(Tensor::from_data({16}, logits));
      double total = 0.0;
      for (double v : s.data()) total += v;
      if (std::abs(total - 1.0) > 1e-6) fail("softmax row does not sum to 1");
    }
  }
  if (result.passed) result.detail = "nonnegativity, equality, and hand values hold";
  return result;
}

inline std::vector<SuiteResult> run_verification_suites() {
  return {verify_gradients(), verify_pooling(), verify_prefix_property(),
          verify_kl_properties()};
}

inline std::string verification_report_json(const std::vector<SuiteResult>& suites) {
  nlohmann::json out = nlohmann::json::array();
  for (const SuiteResult& s : suites) {
    out.push_back({{"suite", s.suite}, {"passed", s.passed}, {"detail", s.detail}});
  }
  return out.dump(2);
}

}  // namespace ccl
