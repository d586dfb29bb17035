#include <gtest/gtest.h>

#include <cmath>

#include "ecer/error.hpp"
#include "ecer/pretrain.hpp"
#include "gradcheck.hpp"

using namespace ecer;
using ecer::testing::grad_check;
using ecer::testing::random_tensor;

namespace {

double cos_span(std::span<const double> a, std::span<const double> b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::sqrt(na * nb);
}

/// Two-direction InfoNCE written out term by term.
double contrastive_oracle(const std::vector<std::vector<double>>& s, double tau, bool literal) {
  const std::size_t b = s.size();
  double total = 0;
  for (int dir = 0; dir < 2; ++dir)
    for (std::size_t i = 0; i < b; ++i) {
      double z = 0;
      for (std::size_t j = 0; j < b; ++j) {
        if (literal && j == i) continue;
        z += std::exp((dir == 0 ? s[i][j] : s[j][i]) / tau);
      }
      total += -std::log(std::exp(s[i][i] / tau) / z) / static_cast<double>(b);
    }
  return total;
}

Tensor to_tensor(const std::vector<std::vector<double>>& s) {
  std::vector<double> v;
  for (const auto& r : s) v.insert(v.end(), r.begin(), r.end());
  return Tensor::from({s.size(), s.size()}, v);
}

}  // namespace

TEST(Contrastive, IdentityClosedForm) {
  const auto sims = Tensor::from({2, 2}, {1, 0, 0, 1});
  const double per = std::log(1.0 + std::exp(-1.0));
  EXPECT_NEAR(per, 0.31326, 1e-5);
  EXPECT_NEAR(contrastive_loss(sims, 1.0, false).item(), 2 * per, 1e-12);
  EXPECT_NEAR(contrastive_loss(sims, 1.0, false).item(), 0.62652, 1e-5);
}

TEST(Contrastive, UniformIsLogB) {
  for (std::size_t b : {2u, 3u, 7u}) {
    const auto sims = Tensor::full({b, b}, 0.3);
    // Two directions, each ln B.
    EXPECT_NEAR(contrastive_loss(sims, 1.0, false).item(), 2 * std::log(static_cast<double>(b)), 1e-12);
  }
}

TEST(Contrastive, MatchesOracleBothForms) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t b = 2 + rng.index(5);
    std::vector<std::vector<double>> s(b, std::vector<double>(b));
    for (auto& r : s)
      for (auto& x : r) x = rng.uniform(-1, 1);
    for (bool literal : {false, true}) {
      EXPECT_NEAR(contrastive_loss(to_tensor(s), 0.07, literal).item(), contrastive_oracle(s, 0.07, literal), 1e-9);
    }
  }
}

TEST(Contrastive, LiteralDropsPositiveFromDenominator) {
  const auto sims = Tensor::from({2, 2}, {1, 0, 0, 1});
  // Denominator holds only the negative: −ln(e¹/e⁰) = −1 per item per direction.
  EXPECT_NEAR(contrastive_loss(sims, 1.0, true).item(), -2.0, 1e-12);
}

TEST(Contrastive, TransposeSwapsDirections) {
  Rng rng(3);
  auto s = random_tensor({5, 5}, rng, 1.0, false);
  EXPECT_NEAR(contrastive_loss(s, 0.1, false).item(), contrastive_loss(ops::transpose(s), 0.1, false).item(), 1e-12);
}

TEST(Contrastive, Errors) {
  EXPECT_THROW(contrastive_loss(Tensor::zeros({1, 1}), 1.0, false), Error);
  EXPECT_THROW(contrastive_loss(Tensor::zeros({2, 3}), 1.0, false), Error);
  EXPECT_THROW(contrastive_loss(Tensor::zeros({2, 2}), 0.0, false), Error);
}

TEST(Contrastive, Gradients) {
  Rng rng(4);
  auto s = random_tensor({4, 4}, rng);
  for (bool literal : {false, true}) {
    const auto r = grad_check([&] { return contrastive_loss(s, 0.5, literal); }, {s}, 16, 1, 1e-5, 1e-6);
    EXPECT_EQ(r.passed, r.checked) << r.max_rel;
  }
}

TEST(Similarity, GlobalAndLocal) {
  const std::vector<double> t{1, 0};
  const std::vector<double> same{2, 0, 3, 0};
  EXPECT_NEAR(local_similarity(same, 2, t), 1.0, 1e-12);
  const std::vector<double> mixed{1, 0, 0, 5};
  EXPECT_NEAR(local_similarity(mixed, 2, t), 0.5, 1e-12);
  const std::vector<double> with_zero{1, 0, 0, 0};
  std::size_t zeros = 0;
  EXPECT_NEAR(local_similarity(with_zero, 2, t, &zeros), 0.5, 1e-12);
  EXPECT_EQ(zeros, 1u);
  EXPECT_NEAR(global_similarity(std::vector<double>{1, 1}, t), std::sqrt(0.5), 1e-12);
  EXPECT_THROW(global_similarity(std::vector<double>{0, 0}, t), Error);
}

TEST(Similarity, LocalMatrixMatchesLoop) {
  Rng rng(5);
  const std::size_t b = 3, hw = 4, c = 6;
  auto rows = random_tensor({b * hw, c}, rng, 1.0, false);
  auto t = random_tensor({b, c}, rng, 1.0, false);
  const auto m = local_similarity_matrix(rows, hw, t);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < hw; ++k)
        acc += cos_span(rows.data().subspan((i * hw + k) * c, c), t.data().subspan(j * c, c));
      EXPECT_NEAR(m.at(i * b + j), acc / hw, 1e-9);
      EXPECT_NEAR(local_similarity(rows.data().subspan(i * hw * c, hw * c), c, t.data().subspan(j * c, c)),
                  acc / hw, 1e-9);
    }
}

TEST(Similarity, LocalMatrixGradients) {
  Rng rng(6);
  auto rows = random_tensor({3 * 4, 5}, rng);
  auto t = random_tensor({3, 5}, rng);
  const auto r = grad_check([&] { return contrastive_loss(local_similarity_matrix(rows, 4, t), 0.2, false); },
                            {rows, t}, 200, 2);
  EXPECT_GE(r.pass_fraction(), 0.99) << r.max_rel;
}

TEST(Adapter, MapsTextIntoVisualSpace) {
  PretrainConfig cfg;
  cfg.adapter_hidden = 8;
  TextAdapter a(12, 5, cfg, 1);
  EXPECT_EQ(a.in_dim(), 12u);
  EXPECT_EQ(a.out_dim(), 5u);
  EXPECT_TRUE(a.trainable());
  EXPECT_EQ(a(Tensor::zeros({3, 12})).shape(), (Shape{3, 5}));
  EXPECT_THROW(a(Tensor::zeros({3, 5})), Error);

  cfg.use_adapter = false;
  TextAdapter frozen(12, 5, cfg, 1);
  EXPECT_FALSE(frozen.trainable());
  EXPECT_TRUE(frozen.parameters().empty());
  EXPECT_EQ(frozen(Tensor::zeros({2, 12})).shape(), (Shape{2, 5}));
}

TEST(Adapter, Gradients) {
  PretrainConfig cfg;
  cfg.adapter_hidden = 6;
  TextAdapter a(5, 4, cfg, 2);
  Rng rng(7);
  auto text = random_tensor({3, 5}, rng, 1.0, false);
  auto vis = random_tensor({3, 4}, rng, 1.0, false);
  std::vector<Tensor> params;
  for (auto& p : a.parameters()) params.push_back(p.tensor);
  const auto r =
      grad_check([&] { return contrastive_loss(global_similarity_matrix(vis, a(text)), 0.3, false); }, params, 200, 3);
  EXPECT_GE(r.pass_fraction(), 0.99) << r.max_rel;
}

namespace {

struct Toy {
  Backbone backbone;
  TextAdapter adapter;
  Tensor images, captions;
  std::vector<std::size_t> labels;
};

Toy make_toy(const PretrainConfig& cfg) {
  BackboneConfig bc;
  bc.channels = {4, 8};
  bc.input_size = 8;
  bc.num_base_classes = 3;
  Rng rng(8);
  Toy t{Backbone(bc), TextAdapter(6, 8, cfg, 1), random_tensor({4, 3, 8, 8}, rng, 1.0, false),
        random_tensor({4, 6}, rng, 1.0, false), {0, 1, 2, 1}};
  return t;
}

}  // namespace

TEST(Objective, TotalIsWeightedSum) {
  PretrainConfig cfg;
  cfg.lambda = 0.7;
  cfg.eta = 1.3;
  cfg.adapter_hidden = 8;
  auto toy = make_toy(cfg);
  const auto [total, lb] = pretrain_objective(toy.backbone, toy.adapter, toy.images, toy.captions, toy.labels, cfg, true);
  EXPECT_NEAR(lb.total, lb.ce + 0.7 * lb.it_global + 1.3 * lb.it_local, 1e-9);
  EXPECT_NEAR(total.item(), lb.total, 1e-12);
  EXPECT_EQ(lb.count, 4u);
}

TEST(Objective, ZeroWeightsLeaveCrossEntropy) {
  PretrainConfig cfg;
  cfg.lambda = 0;
  cfg.eta = 0;
  cfg.adapter_hidden = 8;
  auto toy = make_toy(cfg);
  const auto [total, lb] = pretrain_objective(toy.backbone, toy.adapter, toy.images, toy.captions, toy.labels, cfg, true);
  EXPECT_NEAR(lb.total, lb.ce, 1e-12);
  EXPECT_GT(lb.it_global, 0.0);
  EXPECT_GT(lb.it_local, 0.0);

  cfg.lambda = cfg.eta = 1.0;
  cfg.use_global = cfg.use_local = false;
  const auto off = pretrain_objective(toy.backbone, toy.adapter, toy.images, toy.captions, toy.labels, cfg, false);
  EXPECT_NEAR(off.second.total, off.second.ce, 1e-12);
}

TEST(Objective, MissingCaptionRejected) {
  PretrainConfig cfg;
  cfg.adapter_hidden = 8;
  auto toy = make_toy(cfg);
  try {
    pretrain_objective(toy.backbone, toy.adapter, toy.images, Tensor::zeros({3, 6}), toy.labels, cfg, true);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingCaption);
  }
}

TEST(Objective, StepsReduceLoss) {
  PretrainConfig cfg;
  cfg.adapter_hidden = 8;
  cfg.lr = 1e-2;
  auto toy = make_toy(cfg);
  Pretrainer trainer(toy.backbone, toy.adapter, cfg);
  const double first = trainer.step(toy.images, toy.captions, toy.labels).total;
  double last = first;
  for (int i = 0; i < 30; ++i) last = trainer.step(toy.images, toy.captions, toy.labels).total;
  EXPECT_LT(last, first);
}

TEST(PretrainConfigTest, Validation) {
  PretrainConfig cfg;
  cfg.tau = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), Error);
}
