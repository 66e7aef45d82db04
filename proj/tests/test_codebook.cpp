#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "shiftcnn/codebook.hpp"

namespace shiftcnn {
namespace {

std::vector<int> as_ints(const std::vector<CodewordIndex>& v) {
  return std::vector<int>(v.begin(), v.end());
}

TEST(CodebookConfig, DerivedSizes) {
  const CodebookConfig c(2, 4);
  EXPECT_EQ(c.stage_size(), 15);
  EXPECT_EQ(c.max_index(), 7);
  EXPECT_EQ(c.combinations(), 17);
  EXPECT_EQ(c.max_shift(), 7);
  EXPECT_EQ(CodebookConfig(1, 2).combinations(), 3);
  EXPECT_EQ(CodebookConfig(3, 4).combinations(), 19);
}

TEST(CodebookConfig, RejectsInvalid) {
  EXPECT_THROW(CodebookConfig(0, 4), Error);
  EXPECT_THROW(CodebookConfig(2, 1), Error);
  EXPECT_THROW(CodebookConfig(2, 9), Error);
  try {
    CodebookConfig(2, 1);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_config);
    EXPECT_NE(std::string(e.what()).find("unsupported bit-width"), std::string::npos);
  }
}

TEST(BuildCodebook, N2B4MatchesListing) {
  const Codebook book = build_codebook(CodebookConfig(2, 4));
  ASSERT_EQ(book.stages.size(), 2u);
  // C1 = {0, +-2^0 .. +-2^-6}, C2 = {0, +-2^-1 .. +-2^-7}
  for (int n = 1; n <= 2; ++n) {
    const auto& s = book.stages[static_cast<std::size_t>(n - 1)];
    ASSERT_EQ(s.size(), 15u);
    double top = 0.0;
    for (double v : s) top = std::max(top, v);
    EXPECT_EQ(top, std::ldexp(1.0, 1 - n));
  }
  ASSERT_EQ(book.values.size(), 17u);
  std::set<int> exps;
  for (double v : book.values) {
    if (v == 0.0) continue;
    int e = 0;
    EXPECT_EQ(std::frexp(std::abs(v), &e), 0.5);
    exps.insert(e - 1);
  }
  EXPECT_EQ(exps, (std::set<int>{0, -1, -2, -3, -4, -5, -6, -7}));
}

TEST(BuildCodebook, TernaryN1B2) {
  const Codebook book = build_codebook(CodebookConfig(1, 2));
  EXPECT_EQ(book.values, (std::vector<double>{-1.0, 0.0, 1.0}));
}

TEST(BuildCodebook, CardinalityExhaustive) {
  for (int n = 1; n <= 8; ++n) {
    for (int b = 2; b <= 8; ++b) {
      const CodebookConfig c(n, b);
      const Codebook book = build_codebook(c);
      const auto expected = oracle::union_codewords(n, b);
      ASSERT_EQ(book.values.size(), static_cast<std::size_t>(c.combinations())) << n << "," << b;
      ASSERT_EQ(std::set<double>(book.values.begin(), book.values.end()), expected);
    }
  }
}

TEST(QuantizeScalar, HandTracedVectors) {
  const CodebookConfig c(2, 4);
  auto q = quantize_scalar(0.8, c);
  EXPECT_EQ(as_ints(q.indices), (std::vector<int>{1, -2}));
  EXPECT_EQ(q.reconstruction, 0.75);

  q = quantize_scalar(1.0, c);
  EXPECT_EQ(as_ints(q.indices), (std::vector<int>{1, 0}));
  EXPECT_EQ(q.reconstruction, 1.0);

  q = quantize_scalar(-0.3, c);
  EXPECT_EQ(as_ints(q.indices), (std::vector<int>{-3, -4}));
  EXPECT_EQ(q.reconstruction, -0.3125);

  q = quantize_scalar(0.0, CodebookConfig(3, 3));
  EXPECT_EQ(as_ints(q.indices), (std::vector<int>{0, 0, 0}));
  EXPECT_EQ(q.reconstruction, 0.0);

  q = quantize_scalar(0.003, CodebookConfig(1, 4));
  EXPECT_EQ(as_ints(q.indices), (std::vector<int>{0}));
  EXPECT_EQ(q.reconstruction, 0.0);
}

TEST(QuantizeScalar, ExactThresholdKeepsLowerExponent) {
  const auto q = quantize_scalar(0.75, CodebookConfig(2, 4));
  EXPECT_EQ(q.indices[0], 2);  // 2^-1
  EXPECT_EQ(decode(1, q.indices[0]), 0.5);
  // Residual 0.25 is an exact stage-2 codeword.
  EXPECT_EQ(q.indices[1], 2);
  EXPECT_EQ(q.reconstruction, 0.75);
}

TEST(QuantizeScalar, MatchesLiteralOracle) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (int n = 1; n <= 3; ++n) {
    for (int b = 2; b <= 4; ++b) {
      const CodebookConfig c(n, b);
      for (int i = 0; i < 20000; ++i) {
        const double r = dist(rng);
        double recon = 0.0;
        const auto expected = oracle::quantize_indices(r, n, b, &recon);
        const auto got = quantize_scalar(r, c);
        ASSERT_EQ(as_ints(got.indices), expected) << r;
        ASSERT_EQ(got.reconstruction, recon);
      }
    }
  }
}

TEST(QuantizeScalar, DomainErrors) {
  const CodebookConfig c(2, 4);
  EXPECT_THROW(quantize_scalar(1.0000001, c), Error);
  EXPECT_THROW(quantize_scalar(-2.0, c), Error);
  EXPECT_THROW(quantize_scalar(std::nan(""), c), Error);
  EXPECT_THROW(quantize_scalar(INFINITY, c), Error);
}

TEST(QuantizeScalar, SignSymmetryAndDeterminism) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const CodebookConfig c(3, 4);
  for (int i = 0; i < 5000; ++i) {
    const double r = dist(rng);
    const auto pos = quantize_scalar(r, c);
    const auto neg = quantize_scalar(-r, c);
    const auto again = quantize_scalar(r, c);
    for (std::size_t k = 0; k < pos.indices.size(); ++k) {
      EXPECT_EQ(pos.indices[k], -neg.indices[k]);
    }
    EXPECT_EQ(pos.indices, again.indices);
  }
}

TEST(QuantizeScalar, MonotoneResidual) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const CodebookConfig c(4, 3);
  for (int i = 0; i < 5000; ++i) {
    double residual = dist(rng);
    for (int n = 1; n <= c.stages(); ++n) {
      const StageChoice s = quantize_stage(residual, n, c);
      const double next = residual - s.value;
      if (s.index != 0) {
        EXPECT_LT(std::abs(next), std::abs(residual));
      } else {
        EXPECT_EQ(next, residual);
      }
      residual = next;
    }
  }
}

TEST(QuantizeStage, DecodeEncodeConsistency) {
  for (int b = 2; b <= 8; ++b) {
    for (int n = 1; n <= 8; ++n) {
      const CodebookConfig c(n, b);
      for (int idx = -c.max_index(); idx <= c.max_index(); ++idx) {
        const StageChoice s = quantize_stage(decode(n, idx), n, c);
        EXPECT_EQ(s.index, idx) << "n=" << n << " b=" << b;
      }
    }
  }
}

TEST(QuantizeStage, NearestCodewordOnDenseGrid) {
  const CodebookConfig c(3, 4);
  const int m = c.max_index();
  for (int n = 1; n <= 3; ++n) {
    // Below 0.75 * (smallest codeword) the stage emits the zero codeword.
    const double lo = std::ldexp(0.75, 2 - n - m);
    const double hi = std::ldexp(1.0, 1 - n);
    for (int i = 0; i <= 200000; ++i) {
      // Log-spaced grid across the whole stage range.
      const double r = lo * std::pow(hi / lo, i / 200000.0);
      if (r <= lo || r > hi) continue;
      const StageChoice s = quantize_stage(r, n, c);
      double best = INFINITY;
      for (int k = 1; k <= m; ++k) best = std::min(best, std::abs(r - decode(n, k)));
      ASSERT_NE(s.index, 0) << r;
      ASSERT_LE(std::abs(r - s.value), best) << r;
    }
  }
}

TEST(QuantizeTensor, Examples) {
  const CodebookConfig c(2, 4);
  const auto q = quantize_tensor(FloatTensor({3}, {0.8, -0.3, 1.0}), c);
  EXPECT_EQ(q.scale, 1.0);
  EXPECT_EQ(as_ints(q.indices), (std::vector<int>{1, -2, -3, -4, 1, 0}));

  const auto zeros = quantize_tensor(FloatTensor({2, 2}, 0.0), c);
  EXPECT_EQ(zeros.scale, 0.0);
  for (auto i : zeros.indices) EXPECT_EQ(i, 0);

  const auto two = quantize_tensor(FloatTensor({1}, {2.0}), c);
  EXPECT_EQ(two.scale, 2.0);
  EXPECT_EQ(as_ints(two.indices), (std::vector<int>{1, 0}));

  EXPECT_THROW(quantize_tensor(FloatTensor({1}, {NAN}), c), Error);
}

TEST(QuantizeTensor, RequantizingReconstructionIsIdempotent) {
  // Indices need not repeat (0.8 -> (1,-2) = 0.75 -> (2,2)), but the
  // reconstructed value must.
  const CodebookConfig c22(2, 4);
  EXPECT_EQ(as_ints(quantize_scalar(0.75, c22).indices), (std::vector<int>{2, 2}));

  std::mt19937_64 rng(5);
  std::normal_distribution<double> dist(0.0, 0.3);
  for (int n = 1; n <= 3; ++n) {
    const CodebookConfig c(n, 4);
    FloatTensor w({5000});
    for (double& v : w.data()) v = dist(rng);
    const auto q = quantize_tensor(w, c);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double recon = q.normalized(i);
      ASSERT_EQ(quantize_scalar(recon, c).reconstruction, recon);
      ASSERT_LE(std::abs(recon), static_cast<double>(n));
    }
  }
}

TEST(DequantizeTensor, Examples) {
  const CodebookConfig c(2, 4);
  QuantizedWeightTensor q{{3}, {1, -2, 0, 0, -3, -4}, 1.0, c};
  auto w = dequantize_tensor(q);
  EXPECT_EQ(w[0], 0.75);
  EXPECT_EQ(w[1], 0.0);
  EXPECT_EQ(w[2], -0.3125);
  q.scale = 2.0;
  w = dequantize_tensor(q);
  EXPECT_EQ(w[2], -0.625);
}

TEST(QuantizedWeightTensor, ValidateRejectsOutOfRange) {
  QuantizedWeightTensor q{{1}, {8, 0}, 1.0, CodebookConfig(2, 4)};
  try {
    q.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::index_out_of_range);
  }
}

TEST(EmpiricalDistortion, ZeroForExactCodewords) {
  const CodebookConfig c(2, 4);
  EXPECT_EQ(empirical_distortion(FloatTensor({1}, {1.0}), c), 0.0);
  // Every entry is a union codeword times the scale 4.
  EXPECT_EQ(empirical_distortion(FloatTensor({4}, {4.0, -2.0, 0.5, 4.0 / 128}), c), 0.0);
  EXPECT_EQ(empirical_distortion(FloatTensor({3}, 0.0), c), 0.0);
}

TEST(EmpiricalDistortion, MatchesOracleOnGaussianSamples) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> dist(0.0, 0.25);
  FloatTensor w({200000});
  for (double& v : w.data()) v = std::clamp(dist(rng), -1.0, 1.0);
  const CodebookConfig c(2, 4);
  double scale = 0.0;
  for (double v : w.data()) scale = std::max(scale, std::abs(v));
  double sum = 0.0;
  for (double v : w.data()) {
    double recon = 0.0;
    oracle::quantize_indices(v / scale, 2, 4, &recon);
    sum += (v / scale - recon) * (v / scale - recon);
  }
  EXPECT_NEAR(empirical_distortion(w, c), sum / static_cast<double>(w.size()), 1e-12);
}

}  // namespace
}  // namespace shiftcnn
