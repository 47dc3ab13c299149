#include <gtest/gtest.h>

#include "ccl/metrics.hpp"
#include "ccl/rng.hpp"

namespace {

using ccl::DatasetEval;
using ccl::Domain;
using ccl::MetricSet;
using ccl::StudentScore;

TEST(NormalizeAnswer, AppliesAllRules) {
  EXPECT_EQ(ccl::normalize_answer("The Cat."), "cat");
  EXPECT_EQ(ccl::normalize_answer("cat"), "cat");
  EXPECT_EQ(ccl::normalize_answer("A  big   DOG!"), "big dog");
  EXPECT_EQ(ccl::normalize_answer(""), "");
  EXPECT_EQ(ccl::normalize_answer("an the a"), "");
}

TEST(ExactMatch, NormalizedComparison) {
  EXPECT_EQ(ccl::exact_match("The Cat.", "cat"), 1.0);
  EXPECT_EQ(ccl::exact_match("cats", "cat"), 0.0);
  EXPECT_EQ(ccl::exact_match("x", "x"), 1.0);
}

TEST(TokenF1, OverlapCases) {
  EXPECT_NEAR(ccl::token_f1("black cat", "cat"), 2.0 / 3.0, 1e-12);
  // "a" is an article and falls out during normalization, leaving
  // {b,c} vs {b,c,d}: precision 1, recall 2/3.
  EXPECT_NEAR(ccl::token_f1("a b c", "b c d"), 0.8, 1e-12);
  // The same overlap structure without articles: 2 shared of 3 vs 3.
  EXPECT_NEAR(ccl::token_f1("x b c", "b c d"), 2.0 / 3.0, 1e-12);
  EXPECT_EQ(ccl::token_f1("same answer", "same answer"), 1.0);
  EXPECT_EQ(ccl::token_f1("", ""), 1.0);
  EXPECT_EQ(ccl::token_f1("something", ""), 0.0);
  EXPECT_EQ(ccl::token_f1("", "gold"), 0.0);
}

TEST(TokenF1, SymmetricInArguments) {
  ccl::Rng rng(3);
  const std::vector<std::string> words = {"red", "blue", "green", "cat", "dog"};
  for (int trial = 0; trial < 50; ++trial) {
    auto sample = [&] {
      std::string s;
      const int n = 1 + rng.uniform_int(4);
      for (int i = 0; i < n; ++i) {
        if (i) s.push_back(' ');
        s += words[static_cast<size_t>(rng.uniform_int(static_cast<int>(words.size())))];
      }
      return s;
    };
    const std::string a = sample(), b = sample();
    EXPECT_DOUBLE_EQ(ccl::token_f1(a, b), ccl::token_f1(b, a));
  }
}

TEST(SubstringAccuracy, Containment) {
  EXPECT_EQ(ccl::substring_accuracy("the answer is cat", "cat"), 1.0);
  EXPECT_EQ(ccl::substring_accuracy("dog", "cat"), 0.0);
  // The documented exploit: listing every candidate contains the gold one.
  std::string all_states = "alabama alaska arizona ohio oklahoma oregon texas utah";
  EXPECT_EQ(ccl::substring_accuracy(all_states, "ohio"), 1.0);
}

TEST(MetricImplications, ExactMatchDominates) {
  const std::vector<std::pair<std::string, std::string>> equal_pairs = {
      {"The Cat.", "cat"}, {"x", "x"}, {"big dog", "a big dog"}};
  for (const auto& [pred, gold] : equal_pairs) {
    ASSERT_EQ(ccl::exact_match(pred, gold), 1.0);
    EXPECT_EQ(ccl::token_f1(pred, gold), 1.0);
    EXPECT_EQ(ccl::substring_accuracy(pred, gold), 1.0);
  }
}

TEST(TeacherNormalized, PaperArithmetic) {
  EXPECT_NEAR(ccl::teacher_normalized(47.90, 74.33, 23.06), 0.4845, 1e-3);
  EXPECT_NEAR(ccl::teacher_normalized(71.66, 74.33, 23.06), 0.9479, 1e-3);
  EXPECT_DOUBLE_EQ(ccl::teacher_normalized(74.33, 74.33, 23.06), 1.0);
  EXPECT_THROW(ccl::teacher_normalized(0.5, 0.4, 0.4), ccl::InvalidArgumentError);
}

TEST(TeacherNormalized, AffineInvariance) {
  ccl::Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const double m_no = rng.uniform();
    const double m_t = m_no + 0.1 + rng.uniform();
    const double m_fc = rng.uniform() * 2.0 - 0.5;
    const double a = 0.1 + rng.uniform() * 3.0;
    const double b = rng.uniform() * 10.0 - 5.0;
    const double base = ccl::teacher_normalized(m_fc, m_t, m_no);
    const double mapped =
        ccl::teacher_normalized(a * m_fc + b, a * m_t + b, a * m_no + b);
    EXPECT_NEAR(base, mapped, 1e-9);
  }
}

TEST(MetricRange, AlwaysWithinUnitInterval) {
  ccl::Rng rng(6);
  const std::vector<std::string> words = {"x", "y", "z", "cat"};
  for (int trial = 0; trial < 100; ++trial) {
    auto sample = [&] {
      std::string s;
      const int n = rng.uniform_int(4);
      for (int i = 0; i < n; ++i) {
        if (i) s.push_back(' ');
        s += words[static_cast<size_t>(rng.uniform_int(4))];
      }
      return s;
    };
    const std::string pred = sample(), gold = sample();
    for (double v : {ccl::exact_match(pred, gold), ccl::token_f1(pred, gold),
                     ccl::substring_accuracy(pred, gold)}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

DatasetEval make_dataset(const std::string& name, Domain domain, double teacher,
                         double noctx, double student) {
  DatasetEval d;
  d.dataset = name;
  d.domain = domain;
  d.teacher_full = {teacher, teacher, teacher};
  d.teacher_noctx = {noctx, noctx, noctx};
  StudentScore s;
  s.system = "mean-pool";
  s.ratio = 4;
  s.regime = "single";
  s.raw = {student, student, student};
  d.students.push_back(s);
  return d;
}

TEST(Aggregate, SingleDatasetIsItsOwnMean) {
  auto report = ccl::aggregate({make_dataset("only", Domain::In, 0.9, 0.1, 0.5)});
  ASSERT_EQ(report.macro.size(), 1u);
  EXPECT_NEAR(report.macro[0].raw.em, 0.5, 1e-12);
  EXPECT_NEAR(report.macro[0].normalized.em, (0.5 - 0.1) / (0.9 - 0.1), 1e-12);
  EXPECT_TRUE(report.out_domain.empty());
  EXPECT_TRUE(report.domain_gap.empty());
}

TEST(Aggregate, UnweightedMeanAndGap) {
  auto report = ccl::aggregate({make_dataset("in", Domain::In, 0.9, 0.1, 0.4),
                                make_dataset("out", Domain::Out, 0.9, 0.1, 0.6)});
  ASSERT_EQ(report.macro.size(), 1u);
  EXPECT_NEAR(report.macro[0].raw.em, 0.5, 1e-12);
  ASSERT_EQ(report.domain_gap.size(), 1u);
  EXPECT_NEAR(report.domain_gap[0].raw.em, 0.4 - 0.6, 1e-12);
  // Equal in/out values give zero gap.
  auto balanced = ccl::aggregate({make_dataset("in", Domain::In, 0.9, 0.1, 0.5),
                                  make_dataset("out", Domain::Out, 0.9, 0.1, 0.5)});
  EXPECT_NEAR(balanced.domain_gap[0].raw.em, 0.0, 1e-12);
  EXPECT_NEAR(balanced.domain_gap[0].normalized.em, 0.0, 1e-12);
}

TEST(Aggregate, EmptyInputRejected) {
  EXPECT_THROW(ccl::aggregate({}), ccl::InvalidArgumentError);
}

TEST(Emission, CsvHasHeaderAndRows) {
  auto report = ccl::aggregate({make_dataset("in", Domain::In, 0.9, 0.1, 0.4)});
  const std::string csv = ccl::to_csv(report);
  EXPECT_NE(csv.find("dataset,system,ratio,regime,em,f1,substring_acc,"
                     "relative_em,relative_f1"),
            std::string::npos);
  EXPECT_NE(csv.find("in,teacher-full"), std::string::npos);
  EXPECT_NE(csv.find("in,mean-pool,4,single"), std::string::npos);
  EXPECT_NE(csv.find("macro,mean-pool"), std::string::npos);
  const std::string table = ccl::to_table(report);
  EXPECT_NE(table.find("teacher"), std::string::npos);
  EXPECT_NE(table.find("mean-pool"), std::string::npos);
}

}  // namespace
