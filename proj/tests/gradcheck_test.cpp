#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "support.hpp"

using namespace rskip;
using rskip::testing::away_from_zero;
using rskip::testing::random_tensor;
using rskip::testing::weighted_sum;

namespace {

constexpr int kInstances = 20;
constexpr double kTol = 1e-4;

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

void expect_passes(const std::string& what, const Fn& f, std::vector<Tensor> inputs) {
  const auto r = gradcheck(f, std::move(inputs));
  EXPECT_TRUE(r.passed) << what << ": max rel error " << r.max_rel_error << " at input " << r.worst_input << "["
                        << r.worst_index << "] analytic " << r.worst_analytic << " numeric " << r.worst_numeric;
}

/// x^2 with its derivative multiplied by `slope_error`.
Tensor square_op(const Tensor& a, double slope_error) {
  std::vector<double> out(a.values());
  for (auto& v : out) v *= v;
  return Tensor::from_op("square", a.shape(), std::move(out), {a}, [slope_error](detail::Node& self) {
    auto& in = *self.parents[0];
    for (std::size_t i = 0; i < self.pending.size(); ++i)
      in.pending[i] += slope_error * 2.0 * in.data[i] * self.pending[i];
  });
}

}  // namespace

TEST(Gradcheck, RelativeErrorDefinition) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1.0, 3.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
}

TEST(Gradcheck, RejectsNonScalarAndNonLeafInputs) {
  Rng rng(0);
  Tensor x = random_tensor(rng, {2, 2});
  EXPECT_THROW(gradcheck([](const std::vector<Tensor>& in) { return scale(in[0], 2.0); }, {x}), ContractError);
  Tensor leaf = random_tensor(rng, {2}, -1, 1, true);
  EXPECT_THROW(gradcheck([](const std::vector<Tensor>& in) { return sum(in[0]); }, {scale(leaf, 1.0)}),
               ContractError);
}

TEST(Gradcheck, CorrectCustomOpPasses) {
  Rng rng(11);
  for (int t = 0; t < kInstances; ++t) {
    const Tensor w = random_tensor(rng, {3, 4});
    expect_passes("square", [&](const std::vector<Tensor>& in) { return weighted_sum(square_op(in[0], 1.0), w); },
                  {random_tensor(rng, {3, 4})});
  }
}

TEST(Gradcheck, DetectsOnePercentBackwardError) {
  Rng rng(12);
  for (int t = 0; t < kInstances; ++t) {
    const Tensor w = random_tensor(rng, {3, 4}, 0.5, 1.0);
    const auto r = gradcheck([&](const std::vector<Tensor>& in) { return weighted_sum(square_op(in[0], 1.01), w); },
                             {random_tensor(rng, {3, 4}, 0.5, 1.0)});
    EXPECT_FALSE(r.passed);
    EXPECT_GT(r.max_rel_error, 1e-3);
  }
}

TEST(Gradcheck, Add) {
  Rng rng(1);
  for (int t = 0; t < kInstances; ++t) {
    const Tensor w = random_tensor(rng, {3, 4});
    expect_passes("add", [&](const std::vector<Tensor>& in) { return weighted_sum(add(in[0], in[1]), w); },
                  {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})});
    expect_passes("add broadcast", [&](const std::vector<Tensor>& in) { return weighted_sum(add(in[0], in[1]), w); },
                  {random_tensor(rng, {3, 4}), random_tensor(rng, {4})});
  }
}

TEST(Gradcheck, Scale) {
  Rng rng(2);
  for (int t = 0; t < kInstances; ++t) {
    const Tensor w = random_tensor(rng, {2, 5});
    const double c = rng.uniform(-3.0, 3.0);
    expect_passes("scale", [&](const std::vector<Tensor>& in) { return weighted_sum(scale(in[0], c), w); },
                  {random_tensor(rng, {2, 5})});
  }
}

TEST(Gradcheck, Ewmul) {
  Rng rng(3);
  for (int t = 0; t < kInstances; ++t) {
    const Tensor w = random_tensor(rng, {3, 4});
    expect_passes("ewmul", [&](const std::vector<Tensor>& in) { return weighted_sum(ewmul(in[0], in[1]), w); },
                  {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})});
    expect_passes("ewmul broadcast",
                  [&](const std::vector<Tensor>& in) { return weighted_sum(ewmul(in[0], in[1]), w); },
                  {random_tensor(rng, {3, 4}), random_tensor(rng, {4})});
  }
}

TEST(Gradcheck, Matmul) {
  Rng rng(4);
  for (int t = 0; t < kInstances; ++t) {
    const Tensor w = random_tensor(rng, {3, 2});
    expect_passes("matmul", [&](const std::vector<Tensor>& in) { return weighted_sum(matmul(in[0], in[1]), w); },
                  {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2})});
  }
}

TEST(Gradcheck, Relu) {
  Rng rng(5);
  for (int t = 0; t < kInstances; ++t) {
    const Tensor w = random_tensor(rng, {4, 3});
    expect_passes("relu", [&](const std::vector<Tensor>& in) { return weighted_sum(relu(in[0]), w); },
                  {away_from_zero(rng, {4, 3})});
  }
}

TEST(Gradcheck, SumAndMean) {
  Rng rng(6);
  for (int t = 0; t < kInstances; ++t) {
    const Tensor w = random_tensor(rng, {3, 3});
    expect_passes("sum", [&](const std::vector<Tensor>& in) { return sum(ewmul(in[0], w)); },
                  {random_tensor(rng, {3, 3})});
    expect_passes("mean", [&](const std::vector<Tensor>& in) { return mean(ewmul(in[0], in[0])); },
                  {random_tensor(rng, {3, 3})});
  }
}

TEST(Gradcheck, SoftmaxCrossEntropy) {
  Rng rng(7);
  for (int t = 0; t < kInstances; ++t) {
    std::vector<int> labels(5);
    for (auto& y : labels) y = static_cast<int>(rng.below(4));
    expect_passes("softmax_ce mean",
                  [&](const std::vector<Tensor>& in) { return softmax_cross_entropy(in[0], labels); },
                  {random_tensor(rng, {5, 4}, -3.0, 3.0)});
    expect_passes("softmax_ce sum",
                  [&](const std::vector<Tensor>& in) {
                    return softmax_cross_entropy(in[0], labels, Reduction::kSum);
                  },
                  {random_tensor(rng, {5, 4}, -3.0, 3.0)});
  }
}

TEST(Gradcheck, LayerNorm) {
  Rng rng(8);
  for (int t = 0; t < kInstances; ++t) {
    const Tensor w = random_tensor(rng, {4, 6});
    expect_passes("layer_norm",
                  [&](const std::vector<Tensor>& in) {
                    const LayerNormParams p{in[1], in[2], kDefaultNormEps};
                    return weighted_sum(layer_norm(in[0], p), w);
                  },
                  {random_tensor(rng, {4, 6}, -2.0, 2.0), random_tensor(rng, {6}, 0.5, 1.5),
                   random_tensor(rng, {6})});
  }
}

TEST(Gradcheck, BatchNormTrainingAndInference) {
  Rng rng(9);
  for (int t = 0; t < kInstances; ++t) {
    const Tensor w = random_tensor(rng, {5, 3});
    auto bn = BatchNormParams::create(3);
    bn.running_mean = random_tensor(rng, {3});
    bn.running_var = random_tensor(rng, {3}, 0.5, 2.0);
    for (auto mode : {NormMode::kTraining, NormMode::kInference}) {
      expect_passes(mode == NormMode::kTraining ? "batch_norm train" : "batch_norm inference",
                    [&](const std::vector<Tensor>& in) {
                      BatchNormParams p = bn;
                      p.gain = in[1];
                      p.bias = in[2];
                      p.running_mean = bn.running_mean.clone();
                      p.running_var = bn.running_var.clone();
                      p.mode = mode;
                      return weighted_sum(batch_norm(in[0], p), w);
                    },
                    {random_tensor(rng, {5, 3}, -2.0, 2.0), random_tensor(rng, {3}, 0.5, 1.5),
                     random_tensor(rng, {3})});
    }
  }
}
