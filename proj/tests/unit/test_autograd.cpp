#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "doc2dict/autograd.hpp"
#include "support/gradcheck.hpp"

namespace d2d {
namespace {

using testing::max_relative_error;
using testing::numeric_grads;
using testing::random_tensor;

using testing::Builder;
using testing::op_gradcheck;

TEST(Ops, MatmulIdentity) {
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0f;
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({3, 5}, rng);
  EXPECT_EQ(matmul(constant(eye), constant(a)).value(), a);
}

TEST(Ops, SoftmaxUniform) {
  const Var y = softmax(constant(Tensor::zeros({4})));
  for (float v : y.value().data()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Ops, CrossEntropyUniformLogits) {
  const int target[] = {0};
  const Var loss = cross_entropy(constant(Tensor::zeros({1, 2})), target, -1);
  EXPECT_NEAR(loss.value()[0], std::log(2.0f), 1e-6);
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
  try {
    matmul(constant(Tensor::zeros({2, 3})), constant(Tensor::zeros({4, 2})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,2]"), std::string::npos);
  }
  EXPECT_THROW(add(constant(Tensor::zeros({2, 3})), constant(Tensor::zeros({2}))), ShapeError);
}

TEST(Ops, NonFiniteOutputIsAnError) {
  const Var big = constant(Tensor::filled({1, 1}, 3e38f));
  EXPECT_THROW(scale(big, 10.0f), NumericError);
}

TEST(Backward, SumOfSquares) {
  const Var w = parameter(Tensor({3}, {1, 2, 3}));
  backward(sum(mul(w, w)));
  ASSERT_TRUE(w.grad());
  EXPECT_EQ(*w.grad(), Tensor({3}, {2, 4, 6}));
}

TEST(Backward, CrossEntropyUniformIsSoftmaxMinusOneHot) {
  const Var logits = parameter(Tensor::zeros({1, 4}));
  const int target[] = {2};
  backward(cross_entropy(logits, target, -1));
  const Tensor expect({1, 4}, {0.25f, 0.25f, -0.75f, 0.25f});
  EXPECT_LE(max_abs_diff(*logits.grad(), expect), 1e-7f);
}

TEST(Backward, NonScalarLossRejected) {
  const Var w = parameter(Tensor::zeros({2}));
  EXPECT_THROW(backward(scale(w, 2.0f)), ShapeError);
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const Builder mlp = [](const std::vector<Var>& v) {
    return matmul(relu(matmul(v[0], v[1])), v[2]);
  };
  // Keep relu pre-activations away from the kink.
  Tensor x = random_tensor({4, 5}, rng), w1 = random_tensor({5, 6}, rng), w2 = random_tensor({6, 3}, rng);
  EXPECT_LE(op_gradcheck(mlp, {x, w1, w2}, rng), 1e-3);
}

TEST(Backward, LinearInUpstreamGradient) {
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  auto run = [&](float seed) {
    const Var pa = parameter(a), pb = parameter(b);
    backward(sum(gelu(matmul(pa, pb))), seed);
    return std::pair{*pa.grad(), *pb.grad()};
  };
  const auto [ga1, gb1] = run(1.0f);
  const auto [ga2, gb2] = run(2.0f);
  for (std::size_t i = 0; i < ga1.size(); ++i) EXPECT_EQ(2.0f * ga1[i], ga2[i]);
  for (std::size_t i = 0; i < gb1.size(); ++i) EXPECT_EQ(2.0f * gb1[i], gb2[i]);
}

TEST(Backward, AccumulatesOverAllPaths) {
  const Var w = parameter(Tensor({2}, {1.0f, -2.0f}));
  backward(sum(add(w, scale(w, 3.0f))));
  EXPECT_EQ(*w.grad(), Tensor({2}, {4.0f, 4.0f}));
}

// Every op kind against central differences, several random draws each.
TEST(GradCheck, EveryOpKind) {
  std::mt19937_64 rng(11);
  const int ids[] = {0, 3, 1, 3};
  const int targets[] = {1, 0, 2};
  const int targets_with_pad[] = {1, -1, 2};
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    Builder build;
  };
  const std::vector<Case> cases = {
      {"matmul", {{3, 4}, {4, 5}}, [](auto& v) { return matmul(v[0], v[1]); }},
      {"add", {{3, 4}, {3, 4}}, [](auto& v) { return add(v[0], v[1]); }},
      {"add_broadcast", {{3, 4}, {4}}, [](auto& v) { return add(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& v) { return mul(v[0], v[1]); }},
      {"mul_broadcast", {{2, 3, 4}, {3, 4}}, [](auto& v) { return mul(v[0], v[1]); }},
      {"scale", {{5, 3}}, [](auto& v) { return scale(v[0], -1.7f); }},
      {"softmax_last", {{4, 6}}, [](auto& v) { return softmax(v[0], -1); }},
      {"softmax_axis0", {{4, 6}}, [](auto& v) { return softmax(v[0], 0); }},
      {"layer_norm", {{4, 8}}, [](auto& v) { return layer_norm(v[0], -1); }},
      {"layer_norm_axis0", {{6, 3}}, [](auto& v) { return layer_norm(v[0], 0); }},
      {"relu", {{6, 6}}, [](auto& v) { return relu(v[0]); }},
      {"gelu", {{6, 6}}, [](auto& v) { return gelu(v[0]); }},
      {"embedding", {{4, 5}}, [&](auto& v) { return embedding_lookup(v[0], ids); }},
      {"concat0", {{2, 3}, {4, 3}}, [](auto& v) { return concat({v[0], v[1]}, 0); }},
      {"concat1", {{3, 2}, {3, 5}}, [](auto& v) { return concat({v[0], v[1]}, 1); }},
      {"slice", {{5, 6}}, [](auto& v) { return slice(v[0], 1, 2, 5); }},
      {"transpose", {{3, 7}}, [](auto& v) { return transpose(v[0]); }},
      {"cross_entropy", {{3, 4}}, [&](auto& v) { return cross_entropy(v[0], targets, -1); }},
      {"cross_entropy_pad", {{3, 4}}, [&](auto& v) { return cross_entropy(v[0], targets_with_pad, -1); }},
      {"sum", {{4, 4}}, [](auto& v) { return sum(v[0]); }},
  };
  for (const auto& c : cases) {
    for (int draw = 0; draw < 3; ++draw) {
      std::vector<Tensor> inputs;
      for (const auto& s : c.shapes) {
        Tensor t = random_tensor(s, rng);
        if (std::string(c.name) == "relu") {
          for (float& x : t.data()) x = (x >= 0 ? 0.05f : -0.05f) + x;
        }
        inputs.push_back(std::move(t));
      }
      EXPECT_LE(op_gradcheck(c.build, inputs, rng), 1e-3) << c.name << " draw " << draw;
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint segments

struct Dense {
  Var w;
  explicit Dense(std::mt19937_64& rng, std::size_t in, std::size_t out)
      : w(parameter(random_tensor({in, out}, rng))) {}
};

TEST(Checkpoint, SegmentMatchesUnwrappedGradients) {
  std::mt19937_64 rng(5);
  Dense layer(rng, 4, 3);
  const Tensor x = random_tensor({2, 4}, rng);
  const Tensor r = random_tensor({2, 3}, rng);

  backward(sum(mul(relu(matmul(constant(x), layer.w)), constant(r))));
  const Tensor direct = *layer.w.grad();
  layer.w.zero_grad();

  auto outs = checkpoint_segment(
      [&](std::span<const Var> in) { return std::vector<Var>{relu(matmul(in[0], layer.w))}; },
      {constant(x)}, 1);
  backward(sum(mul(outs[0], constant(r))));
  EXPECT_LE(max_abs_diff(direct, *layer.w.grad()), 1e-6f);
}

TEST(Checkpoint, NestedSegmentsMatchFlatGraph) {
  std::mt19937_64 rng(9);
  Dense a(rng, 5, 5), b(rng, 5, 5), c(rng, 5, 4);
  const Tensor x0 = random_tensor({3, 5}, rng);
  auto stack = [&](const Var& x) {
    return matmul(gelu(matmul(gelu(matmul(x, a.w)), b.w)), c.w);
  };
  const Var xin = parameter(x0);
  backward(sum(stack(xin)));
  const Tensor ga = *a.w.grad(), gb = *b.w.grad(), gc = *c.w.grad(), gx = *xin.grad();
  for (auto* d : {&a, &b, &c}) d->w.zero_grad();

  // Outer segment wraps the whole stack; inner segments wrap each layer.
  auto layer = [](Var w, std::uint32_t id, bool act) {
    return [w, id, act](std::span<const Var> in) {
      return checkpoint_segment(
          [w, act](std::span<const Var> x) {
            Var y = matmul(x[0], w);
            return std::vector<Var>{act ? gelu(y) : y};
          },
          {in[0]}, id);
    };
  };
  const Var xin2 = parameter(x0);
  auto outer = checkpoint_segment(
      [&](std::span<const Var> in) {
        auto h = layer(a.w, 11, true)(in);
        h = layer(b.w, 12, true)(h);
        return layer(c.w, 13, false)(h);
      },
      {xin2}, 10);
  backward(sum(outer[0]));
  EXPECT_LE(max_abs_diff(ga, *a.w.grad()), 1e-6f);
  EXPECT_LE(max_abs_diff(gb, *b.w.grad()), 1e-6f);
  EXPECT_LE(max_abs_diff(gc, *c.w.grad()), 1e-6f);
  EXPECT_LE(max_abs_diff(gx, *xin2.grad()), 1e-6f);
}

TEST(Checkpoint, IdentityReplayPassesThrough) {
  const Var x = parameter(Tensor({2}, {1.0f, 2.0f}));
  auto& stats = activation_stats();
  const auto before = stats.op_executions;
  auto outs = checkpoint_segment([](std::span<const Var> in) { return std::vector<Var>(in.begin(), in.end()); },
                                 {x}, 3);
  // Only the boundary copy; nothing inside the segment.
  EXPECT_EQ(stats.op_executions - before, 1);
  EXPECT_EQ(outs[0].value(), x.value());
  backward(sum(scale(outs[0], 2.0f)));
  EXPECT_EQ(*x.grad(), Tensor({2}, {2.0f, 2.0f}));
}

TEST(Checkpoint, NondeterministicReplayDetected) {
  const Var x = parameter(Tensor({2}, {1.0f, 2.0f}));
  int calls = 0;
  auto outs = checkpoint_segment(
      [&calls](std::span<const Var> in) {
        return std::vector<Var>{scale(in[0], static_cast<float>(++calls))};
      },
      {x}, 4);
  EXPECT_THROW(backward(sum(outs[0])), ReplayError);
}

TEST(Checkpoint, MissingReplayRejected) {
  EXPECT_THROW(checkpoint_segment(ReplayFn{}, {parameter(Tensor::zeros({1}))}, 0), GraphError);
}

TEST(Checkpoint, SegmentIdTagsInteriorNodes) {
  const Var x = parameter(Tensor({2}, {1.0f, 2.0f}));
  std::optional<std::uint32_t> seen;
  auto outs = checkpoint_segment(
      [&seen](std::span<const Var> in) {
        Var y = scale(in[0], 2.0f);
        seen = y.node()->segment_id;
        return std::vector<Var>{y};
      },
      {x}, 42);
  EXPECT_EQ(seen, 42u);
  EXPECT_EQ(outs[0].node()->segment_id, 42u);
}

TEST(Checkpoint, FewerPeakLiveActivations) {
  std::mt19937_64 rng(21);
  Dense a(rng, 16, 16), b(rng, 16, 16);
  const Tensor x0 = random_tensor({32, 16}, rng);
  auto block = [&](const Var& x) { return gelu(matmul(gelu(matmul(x, a.w)), b.w)); };
  auto& stats = activation_stats();

  stats.reset_peak();
  const auto base_live = stats.live;
  {
    Var h = constant(x0);
    for (int i = 0; i < 4; ++i) h = block(h);
    backward(sum(h));
  }
  const auto direct_peak = stats.peak - base_live;

  stats.reset_peak();
  {
    Var h = parameter(x0);
    for (int i = 0; i < 4; ++i) {
      h = checkpoint_segment([&](std::span<const Var> in) { return std::vector<Var>{block(in[0])}; }, {h},
                             static_cast<std::uint32_t>(i))[0];
    }
    backward(sum(h));
  }
  const auto ckpt_peak = stats.peak - base_live;
  EXPECT_LT(ckpt_peak, direct_peak);
  EXPECT_EQ(stats.live, base_live);
}

}  // namespace
}  // namespace d2d
