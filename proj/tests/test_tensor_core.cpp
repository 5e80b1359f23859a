#include "fd_oracle.hpp"

#include <drkrnet/adam.hpp>
#include <drkrnet/autodiff.hpp>
#include <drkrnet/nn.hpp>

#include <gtest/gtest.h>

using namespace drkrnet;
using drkrnet::testing::central_differences;
using drkrnet::testing::max_relative_error;
using drkrnet::testing::random_tensor;

namespace {

double evaluate(const Program &program, const ParamStore &params, const Tensor &inputs) {
  Tape tape;
  BoundParams bound(tape, params, false);
  return tape.value(program(tape, bound, inputs)).item();
}

void expect_gradients_match(const Program &program, const ParamStore &params,
                            const Tensor &inputs, double tol = 1e-5) {
  const auto eval = evaluate_with_gradients(program, params, inputs);
  const auto fd = central_differences(
      [&](const ParamStore &p) { return evaluate(program, p, inputs); }, params);
  EXPECT_LT(max_relative_error(eval.gradients, fd), tol);
}

const Tensor kSobelX = Tensor::matrix(3, 3, {-1, 0, 1, -2, 0, 2, -1, 0, 1});

} // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(Tensor::scalar(3.0).item(), 3.0);
}

TEST(ParamStore, RejectsDuplicateNames) {
  ParamStore s;
  s.add("a", Tensor(Shape{1}));
  EXPECT_THROW(s.add("a", Tensor(Shape{1})), ValidationError);
}

TEST(ParamStore, BinaryRoundTripIsBitExact) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore s;
    std::uniform_int_distribution<std::size_t> dim(1, 5), rank(0, 3);
    const auto n = dim(rng);
    for (std::size_t k = 0; k < n; ++k) {
      Shape shape(rank(rng));
      for (auto &d : shape)
        d = dim(rng);
      s.add("layer" + std::to_string(k) + "/W", random_tensor(shape, rng, 1e3));
    }
    const std::string bytes = serialize(s);
    EXPECT_EQ(bytes.substr(0, 4), "KRFL");
    const ParamStore back = deserialize(bytes);
    EXPECT_EQ(back, s);
    EXPECT_EQ(serialize(back), bytes);
  }
}

TEST(ParamStore, RejectsForeignBytes) {
  EXPECT_THROW(deserialize("NOPE\x01\0\0\0"), ValidationError);
  ParamStore s;
  s.add("w", Tensor(Shape{4}, 1.0));
  std::string bytes = serialize(s);
  bytes.pop_back();
  EXPECT_THROW(deserialize(bytes), ValidationError);
}

TEST(EvaluateWithGradients, SumOfSquares) {
  ParamStore params;
  params.add("p", Tensor::vector({1, 2, 3}));
  Program program = [](Tape &, const BoundParams &p, const Tensor &) {
    return sum(p["p"] * p["p"]);
  };
  const auto e = evaluate_with_gradients(program, params, Tensor{});
  EXPECT_DOUBLE_EQ(e.value, 14.0);
  EXPECT_EQ(e.gradients.at("p").storage(), (std::vector<double>{2, 4, 6}));
}

TEST(EvaluateWithGradients, ConstantProgramHasZeroGradients) {
  ParamStore params;
  params.add("p", Tensor::vector({1, 2, 3}));
  Program program = [](Tape &t, const BoundParams &, const Tensor &) {
    return t.constant(Tensor::scalar(5.0));
  };
  const auto e = evaluate_with_gradients(program, params, Tensor{});
  EXPECT_DOUBLE_EQ(e.value, 5.0);
  EXPECT_EQ(e.gradients.at("p"), Tensor(Shape{3}));
}

TEST(EvaluateWithGradients, ThreeLayerDenseNetworkMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const MlpShape shape{{5, 7, 6, 3}, Activation::tanh};
  ParamStore params;
  init_mlp(params, "net", shape, rng);
  for (auto &[n, t] : params)
    if (n.find("/b") != std::string::npos)
      t = random_tensor(t.shape(), rng, 0.3);
  const Tensor x = random_tensor(Shape{4, 5}, rng);
  Program program = [&](Tape &t, const BoundParams &p, const Tensor &in) {
    return sum(square(mlp_forward(p, "net", shape, t.constant(in))));
  };
  expect_gradients_match(program, params, x);
}

TEST(EvaluateWithGradients, EveryOpMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  ParamStore params;
  params.add("a", random_tensor(Shape{3, 4}, rng));
  params.add("b", random_tensor(Shape{3, 4}, rng));
  params.add("r", random_tensor(Shape{4}, rng));
  params.add("w", random_tensor(Shape{4, 2}, rng));
  params.add("f", random_tensor(Shape{2, 16}, rng));
  const Kernel3 k{0.3, -1.2, 0.5, 2.0, 0.1, -0.7, 0.4, 0.9, -0.2};

  Program program = [&](Tape &, const BoundParams &p, const Tensor &) {
    Var a = p["a"], b = p["b"];
    Var e = relu(a) + softplus(b) + tanh(a * b) + exp(scale(b, 0.3)) + clamp(a, -0.5, 0.5) -
            b;
    Var m = add_row(mul_row(e, p["r"]), p["r"]);
    Var g = gather_cols(m, {3, 0, 2});
    Var rest = gather_cols(m, {1});
    Var back = scatter_cols({{g, {3, 0, 2}}, {rest, {1}}}, 4);
    Var mm = matmul(back, p["w"]);
    Var c = conv3x3(p["f"], 4, 4, k);
    return sum(square(mm)) + mean(row_sum(square(c))) +
           sum(gaussian_log_density(a, b, scale(a, 0.2))) +
           sum(standard_normal_log_density(b));
  };
  expect_gradients_match(program, params, Tensor{});
}

TEST(EvaluateWithGradients, UnknownParameterIsReported) {
  ParamStore params;
  params.add("p", Tensor::vector({1.0}));
  Program program = [](Tape &, const BoundParams &p, const Tensor &) { return sum(p["q"]); };
  try {
    evaluate_with_gradients(program, params, Tensor{});
    FAIL();
  } catch (const ValidationError &e) {
    EXPECT_NE(std::string(e.what()).find("'q'"), std::string::npos);
  }
}

TEST(EvaluateWithGradients, ShapeMismatchNamesTheOperands) {
  ParamStore params;
  params.add("p", Tensor::vector({1.0, 2.0}));
  params.add("q", Tensor::vector({1.0, 2.0, 3.0}));
  Program program = [](Tape &, const BoundParams &p, const Tensor &) {
    return sum(p["p"] + p["q"]);
  };
  try {
    evaluate_with_gradients(program, params, Tensor{});
    FAIL();
  } catch (const ShapeError &e) {
    EXPECT_NE(std::string(e.what()).find("(2) vs (3)"), std::string::npos);
  }
}

TEST(EvaluateWithGradients, NonFiniteIntermediateNamesTheOp) {
  ParamStore params;
  params.add("p", Tensor::vector({1000.0}));
  Program program = [](Tape &, const BoundParams &p, const Tensor &) {
    return sum(exp(p["p"]));
  };
  try {
    evaluate_with_gradients(program, params, Tensor{});
    FAIL();
  } catch (const NumericalError &e) {
    EXPECT_NE(std::string(e.what()).find("'exp'"), std::string::npos);
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParamStore p;
  p.add("w", Tensor::vector({1.0, -2.0}));
  const ParamStore before = p;
  AdamState st(0.01);
  adam_step(p, p.zeros_like(), st);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step_count, 1u);
}

TEST(Adam, FirstStepIsBiasCorrected) {
  ParamStore p;
  p.add("w", Tensor::vector({1.0}));
  ParamStore g;
  g.add("w", Tensor::vector({0.5}));
  AdamState st(0.01, 0.9, 0.999, 1e-8);
  adam_step(p, g, st);
  EXPECT_NEAR(p.at("w")[0], 1.0 - 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p.at("w")[0], 0.99, 1e-9);
}

TEST(Adam, SecondIdenticalStepStaysWithinLearningRate) {
  ParamStore p;
  p.add("w", Tensor::vector({0.0}));
  ParamStore g;
  g.add("w", Tensor::vector({1.0}));
  AdamState st(0.01);
  adam_step(p, g, st);
  const double after_one = p.at("w")[0];
  adam_step(p, g, st);
  const double step2 = std::abs(p.at("w")[0] - after_one);
  EXPECT_GE(step2, 0.9 * 0.01);
  EXPECT_LE(step2, 0.01);
  EXPECT_GE(st.second_moment[0][0], 0.0);
}

TEST(Adam, IsDeterministic) {
  std::mt19937_64 rng(9);
  ParamStore p;
  p.add("a", random_tensor(Shape{3, 3}, rng));
  ParamStore g = p.zeros_like();
  g.at("a") = random_tensor(Shape{3, 3}, rng);
  ParamStore p1 = p, p2 = p;
  AdamState s1(0.05), s2(0.05);
  for (int i = 0; i < 5; ++i) {
    adam_step(p1, g, s1);
    adam_step(p2, g, s2);
  }
  EXPECT_EQ(serialize(p1), serialize(p2));
}

TEST(Adam, RejectsShapeMismatch) {
  ParamStore p;
  p.add("w", Tensor::vector({1.0, 2.0}));
  ParamStore g;
  g.add("w", Tensor::vector({1.0}));
  AdamState st;
  EXPECT_THROW(adam_step(p, g, st), ShapeError);
}

TEST(FixedConv2d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(1);
  const Tensor f = random_tensor(Shape{5, 6}, rng);
  const Tensor delta = Tensor::matrix(3, 3, {0, 0, 0, 0, 1, 0, 0, 0, 0});
  EXPECT_EQ(fixed_conv2d(f, delta), f);
}

TEST(FixedConv2d, ZeroSumKernelKillsConstants) {
  const Tensor f(Shape{4, 4}, 2.5);
  const Tensor out = fixed_conv2d(f, kSobelX);
  for (double v : out.storage())
    EXPECT_EQ(v, 0.0);
}

TEST(FixedConv2d, SobelOnRampGivesEightInInterior) {
  Tensor f(Shape{6, 7});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 7; ++j)
      f.at(i, j) = static_cast<double>(j);
  const Tensor out = fixed_conv2d(f, kSobelX);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 1; j + 1 < 7; ++j)
      EXPECT_DOUBLE_EQ(out.at(i, j), 8.0);
}

TEST(FixedConv2d, IsLinearInTheField) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor f = random_tensor(Shape{5, 5}, rng), g = random_tensor(Shape{5, 5}, rng);
    const Tensor k = random_tensor(Shape{3, 3}, rng);
    const double a = 1.7, b = -0.4;
    Tensor combo(Shape{5, 5});
    for (std::size_t i = 0; i < combo.size(); ++i)
      combo[i] = a * f[i] + b * g[i];
    const Tensor lhs = fixed_conv2d(combo, k);
    const Tensor cf = fixed_conv2d(f, k), cg = fixed_conv2d(g, k);
    for (std::size_t i = 0; i < lhs.size(); ++i)
      EXPECT_NEAR(lhs[i], a * cf[i] + b * cg[i], 1e-12);
  }
}

TEST(FixedConv2d, RejectsFieldsSmallerThanKernel) {
  EXPECT_THROW(fixed_conv2d(Tensor(Shape{2, 5}), kSobelX), ShapeError);
}

TEST(FixedConv2d, TapeGradientWithRespectToFieldMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  ParamStore params;
  params.add("field", random_tensor(Shape{5, 4}, rng));
  const Kernel3 k = kernel_from(kSobelX);
  Program program = [&](Tape &, const BoundParams &p, const Tensor &) {
    return sum(square(conv3x3(p["field"], 5, 4, k)));
  };
  expect_gradients_match(program, params, Tensor{});
}
