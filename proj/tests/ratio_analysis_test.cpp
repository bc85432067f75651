#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "support.hpp"

using namespace rskip;
using rskip::testing::random_block;
using rskip::testing::random_tensor;

namespace {

struct Sample {
  Tensor x, f, y;
  RatioWitness witness;
};

Sample run_recursive(int lambda, Rng& rng, std::size_t batch = 4, std::size_t width = 6) {
  ResidualBlock block = random_block(SkipConstruction::rskip_ln(lambda), rng, width, 5);
  const Tensor x = random_tensor(rng, {batch, width}, -2.0, 2.0);
  BlockTrace trace;
  const Tensor y = forward_block(block, x, &trace);
  return {x, trace.branch_output, y, trace.witness};
}

RatioWitness uniform_witness(std::size_t lambda, double sigma, double gain) {
  RatioWitness w;
  for (std::size_t k = 0; k < lambda; ++k)
    w.levels.push_back({Tensor::full({2}, sigma), Tensor::zeros({2}), Tensor::full({3}, gain), Tensor::zeros({3})});
  return w;
}

}  // namespace

TEST(Ratio, ReconstructionReproducesForward) {
  Rng rng(1);
  for (int lambda = 1; lambda <= 4; ++lambda) {
    for (int t = 0; t < 100; ++t) {
      const auto s = run_recursive(lambda, rng);
      ASSERT_EQ(s.witness.lambda(), static_cast<std::size_t>(lambda));
      const auto dec = unroll_decompose(s.witness, s.x, s.f);
      ASSERT_LE(max_abs_difference(dec.reconstruct(s.x, s.f), s.y), 1e-10) << "lambda " << lambda;
    }
  }
}

TEST(Ratio, ClosedFormMatchesDecomposition) {
  Rng rng(2);
  for (int lambda = 1; lambda <= 4; ++lambda) {
    for (int t = 0; t < 100; ++t) {
      const auto s = run_recursive(lambda, rng);
      const auto dec = unroll_decompose(s.witness, s.x, s.f);
      ASSERT_LE(max_ratio_discrepancy(ratio_general(s.witness), dec), 1e-10) << "lambda " << lambda;
    }
  }
}

TEST(Ratio, LiteralBoundOverCounts) {
  Rng rng(3);
  for (int lambda = 1; lambda <= 4; ++lambda) {
    const auto s = run_recursive(lambda, rng);
    const auto dec = unroll_decompose(s.witness, s.x, s.f);
    EXPECT_GT(max_ratio_discrepancy(ratio_general(s.witness, RatioIndexing::kLiteral), dec), 1e-3);
  }
}

TEST(Ratio, LambdaTwoIsSigmaOverGainPlusOne) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto s = run_recursive(2, rng);
    const Tensor r = ratio_general(s.witness);
    const auto& L1 = s.witness.levels[0];
    for (std::size_t row = 0; row < s.witness.batch(); ++row)
      for (std::size_t j = 0; j < s.witness.width(); ++j)
        EXPECT_NEAR(r.at(row, j), L1.sigma.at(row) / L1.gain.at(j) + 1.0, 1e-14);
  }
}

TEST(Ratio, LambdaOneRatioIsOne) {
  Rng rng(5);
  const auto s = run_recursive(1, rng);
  const Tensor r = ratio_general(s.witness);
  for (double v : r.values()) EXPECT_EQ(v, 1.0);
}

TEST(Ratio, UnitSigmaOverGainGivesLambda) {
  for (std::size_t lambda = 1; lambda <= 6; ++lambda) {
    const Tensor r = ratio_general(uniform_witness(lambda, 1.7, 1.7));
    for (double v : r.values()) EXPECT_DOUBLE_EQ(v, static_cast<double>(lambda));
  }
}

TEST(Ratio, IncreasesWithLambdaForPositiveGains) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const auto s = run_recursive(4, rng);
    double prev = 0.0;
    for (std::size_t lambda = 1; lambda <= 4; ++lambda) {
      RatioWitness prefix;
      prefix.levels.assign(s.witness.levels.begin(), s.witness.levels.begin() + static_cast<long>(lambda));
      const double m = ratio_general(prefix).at(0);
      EXPECT_GT(m, prev);
      prev = m;
    }
  }
}

TEST(Ratio, GeometricSeriesForConstantSigmaOverGain) {
  const double q = 0.5;
  for (std::size_t lambda = 1; lambda <= 5; ++lambda) {
    double expected = 0.0;
    for (std::size_t i = 0; i < lambda; ++i) expected += std::pow(q, static_cast<double>(i));
    const Tensor r = ratio_general(uniform_witness(lambda, q, 1.0));
    for (double v : r.values()) EXPECT_NEAR(v, expected, 1e-15);
  }
}

TEST(Ratio, ZeroGainIsSingular) {
  auto w = uniform_witness(3, 1.0, 1.0);
  w.levels[1].gain.mutable_data()[2] = 0.0;
  EXPECT_THROW(ratio_general(w), SingularRatioError);
  // The last level's gain never enters the ratio.
  auto last = uniform_witness(2, 1.0, 1.0);
  last.levels[1].gain.mutable_data()[0] = 0.0;
  EXPECT_NO_THROW(ratio_general(last));
}

TEST(Ratio, WitnessValidation) {
  RatioWitness empty;
  EXPECT_THROW(ratio_general(empty), ContractError);
  auto bad = uniform_witness(2, 1.0, 1.0);
  bad.levels[1].sigma = Tensor::full({3}, 1.0);
  EXPECT_THROW(ratio_general(bad), ContractError);
  auto nonpos = uniform_witness(2, 1.0, 1.0);
  nonpos.levels[0].sigma.mutable_data()[0] = 0.0;
  EXPECT_THROW(ratio_general(nonpos), ContractError);
  const auto ok = uniform_witness(2, 1.0, 1.0);
  EXPECT_THROW(unroll_decompose(ok, Tensor::zeros({2, 4}), Tensor::zeros({2, 4})), ContractError);
}

TEST(Ratio, NonRecursiveLayerNormBlocksCaptureOneLevel) {
  Rng rng(7);
  for (const auto& c : {SkipConstruction::xskip_ln(2.0), SkipConstruction::wskip_ln(), SkipConstruction::contracted_ln(3.0)}) {
    ResidualBlock block = random_block(c, rng, 5, 3);
    BlockTrace trace;
    block.forward(random_tensor(rng, {3, 5}), &trace);
    EXPECT_EQ(trace.witness.lambda(), 1u);
  }
}
