#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "mtp/gradcheck.hpp"
#include "mtp/optim.hpp"
#include "mtp/tensor.hpp"

using namespace mtp;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool grad = true) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = n(rng);
  return T64::from(std::move(shape), std::move(v), grad);
}

double gelu_ref(double x) {
  return 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
}

}  // namespace

TEST(Tensor, ShapeMismatchNamesOp) {
  auto a = T64::zeros({2, 3});
  auto b = T64::zeros({3, 2});
  try {
    add(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(matmul(a, a), Error);
  EXPECT_THROW(T64::from({2, 2}, {1, 2, 3}), Error);
}

TEST(Tensor, GeluMatchesTanhApproximation) {
  auto x = T64::from({5}, {-3, -0.5, 0, 0.7, 2.5});
  auto y = gelu(x);
  EXPECT_EQ(y[2], 0.0);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(y[i], gelu_ref(x[i]), 1e-12);
}

TEST(Tensor, MatmulHandComputed) {
  auto a = T64::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = T64::from({3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_DOUBLE_EQ(c[0], 58);
  EXPECT_DOUBLE_EQ(c[1], 64);
  EXPECT_DOUBLE_EQ(c[2], 139);
  EXPECT_DOUBLE_EQ(c[3], 154);
  auto ct = matmul_nt(a, transpose(b));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(ct[i], c[i]);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({7, 11}, rng, 5.0, false);
  auto s = softmax(x);
  for (std::size_t r = 0; r < 7; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 11; ++c) total += s.at(r, c);
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
  auto s0 = softmax(x, 0);
  for (std::size_t c = 0; c < 11; ++c) {
    double total = 0;
    for (std::size_t r = 0; r < 7; ++r) total += s0.at(r, c);
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Tensor, LayerNormPreAffineMoments) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({6, 32}, rng, 3.0, false);
  auto y = layer_norm(x, T64::from({32}, std::vector<double>(32, 1.0)), T64::zeros({32}));
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 32; ++c) m += y.at(r, c);
    m /= 32;
    for (std::size_t c = 0; c < 32; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
    v /= 32;
    EXPECT_LT(std::abs(m), 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Tensor, BackwardOfSumIsOnes) {
  auto w = T64::from({2, 3}, {1, -2, 3, 0.5, 0, 9}, true);
  backward(sum(w));
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Tensor, MseGradientMeanConvention) {
  auto w = T64::from({1}, {3.0}, true);
  std::vector<double> target{0.0};
  backward(mse(w, std::span<const double>(target)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);

  auto v = T64::from({4}, {1, 2, 3, 4}, true);
  std::vector<double> zeros(4, 0.0);
  auto loss = mse(v, std::span<const double>(zeros));
  EXPECT_DOUBLE_EQ(loss.item(), 7.5);
  backward(loss);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(v.grad()[i], 2.0 * v[i] / 4.0);
}

TEST(Tensor, BackwardRejectsNonScalar) {
  auto w = T64::zeros({3}, true);
  EXPECT_THROW(backward(w), Error);
}

TEST(Tensor, LeafGradientsAccumulate) {
  auto w = T64::from({2}, {1, 2}, true);
  backward(sum(w));
  backward(sum(w));
  EXPECT_EQ(w.grad()[0], 2.0);
  w.zero_grad();
  EXPECT_EQ(w.grad()[1], 0.0);
}

TEST(Tensor, CrossEntropyUniformIsLogK) {
  auto logits = T64::zeros({3, 5}, true);
  std::vector<int> t{0, 4, 2};
  EXPECT_NEAR(cross_entropy(logits, std::span<const int>(t)).item(), std::log(5.0), 1e-12);
  std::vector<int> bad{0, 5, 1};
  EXPECT_THROW(cross_entropy(logits, std::span<const int>(bad)), Error);
}

TEST(Tensor, CosineSimilarity) {
  auto u = T64::from({2, 2}, {1, 0, 3, 4});
  auto v = T64::from({2, 2}, {0, 2, 6, 8});
  auto c = cosine_similarity(u, v);
  EXPECT_NEAR(c[0], 0.0, 1e-12);
  EXPECT_NEAR(c[1], 1.0, 1e-12);
  auto m = cosine_matrix(u, v);
  EXPECT_EQ(m.shape(), (Shape{2, 2}));
  EXPECT_NEAR(m.at(0, 1), 0.6, 1e-12);
}

TEST(Tensor, DropoutInvertedScaling) {
  std::mt19937_64 rng(5);
  auto x = T64::from({10000}, std::vector<double>(10000, 1.0));
  auto y = dropout(x, 0.25, rng, true);
  double total = 0;
  std::size_t zeros = 0;
  for (double v : y.values()) {
    total += v;
    if (v == 0) ++zeros;
    else EXPECT_NEAR(v, 1.0 / 0.75, 1e-12);
  }
  EXPECT_NEAR(total / 10000, 1.0, 0.05);
  EXPECT_NEAR(zeros / 10000.0, 0.25, 0.03);
  auto e = dropout(x, 0.25, rng, false);
  for (double v : e.values()) EXPECT_EQ(v, 1.0);
}

TEST(Tensor, AttentionIgnoresMaskedKeys) {
  std::mt19937_64 rng(3);
  const std::size_t B = 2, L = 4, H = 4;
  auto q = random_tensor({B * L, H}, rng, 1.0, false);
  auto k = random_tensor({B * L, H}, rng, 1.0, false);
  auto v = random_tensor({B * L, H}, rng, 1.0, false);
  std::vector<std::uint8_t> mask{1, 1, 1, 0, 1, 1, 0, 0};
  std::vector<double> probs;
  auto out = multi_head_attention(q, k, v, std::span<const std::uint8_t>(mask), {B, L, 2}, 0.0, rng,
                                  false, &probs);
  ASSERT_EQ(probs.size(), B * 2 * L * L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < L; ++i) {
        double total = 0;
        for (std::size_t j = 0; j < L; ++j) {
          const double p = probs[((b * 2 + h) * L + i) * L + j];
          if (!mask[b * L + j]) {
            EXPECT_EQ(p, 0.0);
          }
          total += p;
        }
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
  // Changing a masked value row leaves every output unchanged.
  auto v2vals = std::vector<double>(v.values().begin(), v.values().end());
  for (std::size_t c = 0; c < H; ++c) v2vals[3 * H + c] += 100;
  auto v2 = T64::from({B * L, H}, v2vals);
  auto out2 = multi_head_attention(q, k, v2, std::span<const std::uint8_t>(mask), {B, L, 2}, 0.0, rng,
                                   false);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], out2[i], 1e-12);
}

TEST(GradCheck, TwoLayerNet) {
  std::mt19937_64 rng(11);
  std::vector<Parameter<double>> params{
      {"w1", random_tensor({5, 8}, rng), true}, {"b1", random_tensor({8}, rng), false},
      {"w2", random_tensor({8, 3}, rng), true}, {"b2", random_tensor({3}, rng), false}};
  auto x = random_tensor({4, 5}, rng, 1.0, false);
  std::vector<int> targets{0, 2, 1, 2};
  auto loss = [&] {
    auto h = gelu(add_row(matmul(x, params[0].tensor), params[1].tensor));
    auto o = add_row(matmul(h, params[2].tensor), params[3].tensor);
    return cross_entropy(o, std::span<const int>(targets));
  };
  EXPECT_LT(check_gradients(loss, params).max_rel_error, 1e-4);
}

TEST(GradCheck, LayerNormOnly) {
  std::mt19937_64 rng(12);
  auto x = random_tensor({3, 6}, rng, 2.0, true);
  std::vector<Parameter<double>> params{
      {"x", x, true}, {"g", random_tensor({6}, rng), false}, {"b", random_tensor({6}, rng), false}};
  auto w = random_tensor({3, 6}, rng, 1.0, false);
  auto loss = [&] { return sum(mul(layer_norm(params[0].tensor, params[1].tensor, params[2].tensor), w)); };
  EXPECT_LT(check_gradients(loss, params).max_rel_error, 1e-5);
}

TEST(GradCheck, EmbeddingLookupScatter) {
  std::mt19937_64 rng(13);
  std::vector<Parameter<double>> params{{"table", random_tensor({6, 3}, rng), true}};
  std::vector<int> ids{1, 4, 1, 0};
  auto loss = [&] { return sum(embedding_lookup(params[0].tensor, std::span<const int>(ids))); };
  EXPECT_LT(check_gradients(loss, params).max_rel_error, 1e-9);
  zero_grads(params);
  backward(loss());
  const auto g = params[0].tensor.grad();
  EXPECT_EQ(g[1 * 3], 2.0);
  EXPECT_EQ(g[4 * 3 + 2], 1.0);
  EXPECT_EQ(g[2 * 3], 0.0);
}

TEST(GradCheck, CompositeOps) {
  std::mt19937_64 rng(14);
  std::vector<Parameter<double>> params{{"a", random_tensor({4, 6}, rng), true},
                                        {"b", random_tensor({4, 6}, rng), true}};
  std::vector<int> rows{3, 0, 2};
  std::vector<int> cols{5, 1, 0};
  auto loss = [&] {
    auto& a = params[0].tensor;
    auto& b = params[1].tensor;
    auto cm = cosine_matrix(a, b);
    auto sm = softmax(cm, 0);
    auto cat = concat_cols<double>({tanh(a), b});
    auto g = gather_elements(cat, std::span<const int>(rows), std::span<const int>(cols));
    auto lc = log_clamped(affine(cosine_similarity(a, b), 0.5, 0.5), 1e-7, 1.0);
    auto r = reshape(gather_rows(a, std::span<const int>(rows)), {6, 3});
    auto mm = matmul_nt(r, r);
    return add(add(add(mean(sm), sum(g)), mean(lc)), mean(mm));
  };
  EXPECT_LT(check_gradients(loss, params).max_rel_error, 1e-4);
}

TEST(GradCheck, Attention) {
  std::mt19937_64 rng(15);
  const std::size_t B = 2, L = 3, H = 4;
  std::vector<Parameter<double>> params{{"q", random_tensor({B * L, H}, rng), true},
                                        {"k", random_tensor({B * L, H}, rng), true},
                                        {"v", random_tensor({B * L, H}, rng), true}};
  std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1};
  auto w = random_tensor({B * L, H}, rng, 1.0, false);
  auto loss = [&] {
    std::mt19937_64 r(0);
    auto o = multi_head_attention(params[0].tensor, params[1].tensor, params[2].tensor,
                                  std::span<const std::uint8_t>(mask), {B, L, 2}, 0.0, r, false);
    return sum(mul(o, w));
  };
  EXPECT_LT(check_gradients(loss, params).max_rel_error, 1e-4);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  std::vector<Parameter<double>> params{{"w", T64::from({3}, {1, -2, 3}, true), true}};
  AdamState<double> s;
  s.config.weight_decay = 0;
  params[0].tensor.mutable_grad();
  adam_step(params, s, 0.1);
  EXPECT_EQ(params[0].tensor[0], 1.0);
  EXPECT_EQ(params[0].tensor[1], -2.0);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Parameter<double>> params{{"w", T64::from({1}, {0.5}, true), false}};
  AdamState<double> s;
  params[0].tensor.mutable_grad()[0] = 1.0;
  adam_step(params, s, 0.1);
  // m_hat = g, v_hat = g^2 -> step lr * 1 / (1 + eps)
  EXPECT_NEAR(params[0].tensor[0], 0.5 - 0.1 / (1 + 1e-6), 1e-12);
}

TEST(Adam, WeightDecayOnlyOnDecayedParams) {
  std::vector<Parameter<double>> params{{"w", T64::from({1}, {2.0}, true), true},
                                        {"b", T64::from({1}, {2.0}, true), false}};
  AdamState<double> s;
  for (auto& p : params) p.tensor.mutable_grad();
  adam_step(params, s, 0.1);
  // zero gradient: only the decoupled decay lr * wd * w acts
  EXPECT_NEAR(params[0].tensor[0], 2.0 - 0.1 * 0.01 * 2.0, 1e-15);
  EXPECT_EQ(params[1].tensor[0], 2.0);
  EXPECT_EQ(s.m[0][0], 0.0);
}

// The decay does not enter the moments, so the normalized step still
// follows a tiny gradient rather than the weight.
TEST(Adam, DecayDoesNotDrownSmallGradients) {
  std::vector<Parameter<double>> params{{"w", T64::from({1}, {0.02}, true), true}};
  AdamState<double> s;
  params[0].tensor.mutable_grad()[0] = -1e-6;
  adam_step(params, s, 0.1);
  EXPECT_GT(params[0].tensor[0], 0.02);
}

TEST(Adam, Deterministic) {
  auto run = [] {
    std::mt19937_64 rng(4);
    std::vector<Parameter<double>> params{{"w", random_tensor({4, 4}, rng), true}};
    AdamState<double> s;
    auto x = random_tensor({3, 4}, rng, 1.0, false);
    for (int i = 0; i < 5; ++i) {
      zero_grads(params);
      backward(sum(gelu(matmul(x, params[0].tensor))));
      adam_step(params, s, 0.01);
    }
    return std::vector<double>(params[0].tensor.values().begin(), params[0].tensor.values().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(LearningRate, WarmupAndDecay) {
  const double T = 1e6;
  EXPECT_EQ(lr_at(0, T), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(0.01 * T, T), 1e-4);
  EXPECT_EQ(lr_at(T, T), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(0.005 * T, T), 0.5e-4);
  EXPECT_NEAR(lr_at(0.505 * T, T), 0.5e-4, 1e-15);
  EXPECT_THROW(lr_at(0, 0), Error);
  // continuity at the warmup boundary
  EXPECT_NEAR(lr_at(0.01 * T - 1e-3, T), lr_at(0.01 * T + 1e-3, T), 1e-10);
}
