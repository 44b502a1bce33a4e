// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#include "tokensel/tensor.hpp"

#include <gtest/gtest.h>

#include "tokensel/difftopk.hpp"
#include "tokensel/gradcheck.hpp"
#include "tokensel/ops.hpp"
#include "tokensel/rng.hpp"

using namespace tokensel;

TEST(Tensor, ShapeDataAgreement) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(Tensor({2, 3}, {1, 2, 3}), DimensionError);
}

TEST(Tensor, ScalarAndFill) {
  EXPECT_DOUBLE_EQ(Tensor::scalar(2.5).item(), 2.5);
  Tensor ones = Tensor::ones({4});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(ones.data()[i], 1.0);
  EXPECT_THROW(ones.item(), DimensionError);
}

TEST(Tape, SingleActiveTapePerTensor) {
  Tensor x({2}, {1, 2});
  Tape tape;
  Tensor watched = tape.watch(x);
  EXPECT_TRUE(watched.requires_grad());
  EXPECT_FALSE(x.requires_grad());
  EXPECT_THROW(tape.watch(watched), InputError);
}

TEST(Tape, GradientAccumulationSumsContributions) {
  // f(x) = x + x must produce gradient 2 for every entry.
  Tape tape;
  Tensor x = tape.watch(Tensor({3}, {1.0, -2.0, 0.5}));
  Tensor loss = sum(add(x, x));
  tape.backward(loss);
  Tensor grad = tape.grad(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(grad.data()[i], 2.0);
}

TEST(Tape, BackwardRequiresScalarRootAndRunsOnce) {
  Tape tape;
  Tensor x = tape.watch(Tensor({2}, {1, 2}));
  Tensor y = add(x, x);
  EXPECT_THROW(tape.backward(y), DimensionError);
  Tensor loss = sum(y);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), InputError);
}

TEST(Tape, DeterministicReplay) {
  // Same seed -> bitwise identical forward values and gradients.
  const auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a({3, 3});
    Tensor b({3, 3});
    for (std::size_t i = 0; i < 9; ++i) a.data()[i] = rng.normal();
    for (std::size_t i = 0; i < 9; ++i) b.data()[i] = rng.normal();
    Tape tape;
    Tensor aw = tape.watch(a);
    Tensor out = sum(sigmoid(matmul(aw, b)));
    tape.backward(out);
    return std::make_pair(out.item(), tape.grad(aw).values());
  };
  const auto first = run(7);
  const auto second = run(7);
  EXPECT_EQ(first.first, second.first);
  EXPECT_EQ(first.second, second.second);
}

TEST(Matmul, IdentityCase) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {3, 4, 5, 6});
  Tensor out = matmul(eye, m);
  EXPECT_EQ(out.values(), m.values());
}

TEST(Matmul, HandArithmetic) {
  Tensor a({1, 2}, {1, 2});
  Tensor b({2, 1}, {3, 4});
  EXPECT_DOUBLE_EQ(matmul(a, b).item(), 11.0);
}

TEST(Matmul, MismatchNamesBothShapes) {
  Tensor a({2, 3});
  Tensor b({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("[2,3]"), std::string::npos) << what;
    EXPECT_NE(what.find("[4,5]"), std::string::npos) << what;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor a({4, 3});
  Tensor b({3, 5});
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  for (std::size_t i = 0; i < b.size(); ++i) b.data()[i] = rng.normal();
  Tensor g({4, 5});
  for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();

  Tape tape;
  Tensor aw = tape.watch(a);
  Tensor bw = tape.watch(b);
  tape.backward(sum(mul(matmul(aw, bw), g)));

  const auto loss_a = [&](const std::vector<double>& x) {
    return sum(mul(matmul(Tensor(a.shape(), x), b), g)).item();
  };
  const auto loss_b = [&](const std::vector<double>& x) {
    return sum(mul(matmul(a, Tensor(b.shape(), x)), g)).item();
  };
  EXPECT_LT(gradient_relative_error(tape.grad(aw).values(),
                                    central_difference(loss_a, a.values())),
            1e-6);
  EXPECT_LT(gradient_relative_error(tape.grad(bw).values(),
                                    central_difference(loss_b, b.values())),
            1e-6);
}

TEST(Matmul, BatchedAgainstShared2d) {
  Rng rng(12);
  Tensor a({2, 3, 4});
  Tensor b({4, 2});
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  for (std::size_t i = 0; i < b.size(); ++i) b.data()[i] = rng.normal();
  Tensor out = matmul(a, b);
  ASSERT_EQ(out.shape(), (Shape{2, 3, 2}));
  // Spot-check one entry against a hand loop.
  double expect = 0.0;
  for (std::size_t p = 0; p < 4; ++p) {
    expect += a.data()[1 * 12 + 2 * 4 + p] * b.data()[p * 2 + 1];
  }
  EXPECT_NEAR(out.data()[1 * 6 + 2 * 2 + 1], expect, 1e-12);
}

TEST(CustomOp, PassThroughIdentityBackward) {
  static const int id = register_custom_op(CustomOp{
      "pass_through",
      [](const std::vector<Tensor>& inputs) {
        return CustomOpResult{inputs[0].clone(), {}};
      },
      [](const std::vector<Tensor>&, const Tensor& upstream) {
        return std::vector<Tensor>{upstream.clone()};
      }});

  Rng rng(13);
  Tensor x({5});
  for (std::size_t i = 0; i < 5; ++i) x.data()[i] = rng.normal();
  Tensor g({5});
  for (std::size_t i = 0; i < 5; ++i) g.data()[i] = rng.normal();

  Tape tape;
  Tensor xw = tape.watch(x);
  tape.backward(sum(mul(apply_custom_op(id, {xw}), g)));
  const auto fd = central_difference(
      [&](const std::vector<double>& v) {
        return sum(mul(apply_custom_op(id, {Tensor(x.shape(), v)}), g)).item();
      },
      x.values());
  EXPECT_LT(gradient_relative_error(tape.grad(xw).values(), fd), 1e-8);
}

TEST(CustomOp, DiffTopkBisectionLeavesNoTapeNodes) {
  Tape tape;
  Tensor scores = tape.watch(Tensor({1, 6}, {0.3, -1.2, 0.8, 0.1, 2.0, -0.5}));
  const std::size_t before = tape.node_count();
  SoftMaskResult soft = diff_topk_forward(scores, {2}, {6});
  // The 64-iteration solver runs on detached values: exactly one node.
  EXPECT_EQ(tape.node_count(), before + 1);
  EXPECT_EQ(tape.op_name(soft.soft_mask.node()), "diff_topk");
}
