#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ecer/error.hpp"
#include "ecer/pvsa.hpp"
#include "gradcheck.hpp"

using namespace ecer;
using ecer::testing::grad_check;
using ecer::testing::random_tensor;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i * t.dim(1) + j);
  return m;
}

std::vector<double> linear(const nn::Linear& l, const std::vector<double>& x) {
  const std::size_t in = l.in_features(), out = l.out_features();
  std::vector<double> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double s = l.bias().at(o);
    for (std::size_t i = 0; i < in; ++i) s += x[i] * l.weight().at(i * out + o);
    y[o] = s;
  }
  return y;
}

std::vector<double> two_layer(const nn::TwoLayer& net, const std::vector<double>& x) {
  auto h = linear(net.first(), x);
  for (double& v : h) v = v > 0 ? v : net.slope() * v;
  return linear(net.second(), h);
}

std::vector<double> cat(std::vector<double> a, const std::vector<double>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), tol) << "at " << i;
}

struct Fixture {
  std::vector<std::size_t> channels{4, 6, 8, 10};
  std::vector<std::size_t> hw{16, 4, 4, 1};
  std::size_t dim = 5;
  std::size_t way = 2;
  std::size_t k = 2;
  SupportFeatures support;
  SemanticBatch sem;

  explicit Fixture(std::uint64_t seed, std::size_t entities = 2) : k(entities) {
    Rng rng(seed);
    for (std::size_t b = 0; b < channels.size(); ++b) {
      support.maps.push_back(random_tensor({way * hw[b], channels[b]}, rng, 1.0, false));
      support.locations.push_back(hw[b]);
    }
    support.f_s = random_tensor({way, channels.back()}, rng, 1.0, false);
    sem.items_per_class = k + 1;
    sem.rows = random_tensor({way * (k + 1), dim}, rng, 1.0, false);
  }
};

PvsaConfig no_zero_init() {
  PvsaConfig c;
  c.zero_init_output = false;
  return c;
}

}  // namespace

TEST(Attention, SingleLocation) {
  Rng rng(1);
  auto s = random_tensor({1, 5}, rng, 1.0, false);
  auto F = random_tensor({1, 5}, rng, 1.0, false);
  std::vector<double> w;
  auto out = semantic_attention(s, F, 1, 1, false, &w);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_DOUBLE_EQ(w[0], 1.0);
  expect_close(out, F, 0.0);
}

TEST(Attention, UniformWhenLogitsTie) {
  auto s = Tensor::row({0, 0, 1});
  auto F = Tensor::from({3, 3}, {1, 2, 0, 1, 2, 0, 1, 2, 0});
  std::vector<double> w;
  auto out = semantic_attention(s, F, 3, 1, false, &w);
  for (double x : w) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(out.at(0), 1.0, 1e-12);
  EXPECT_NEAR(out.at(1), 2.0, 1e-12);
}

TEST(Attention, MatchesLoopOracle) {
  Rng rng(2);
  const std::size_t groups = 3, per = 2, hw = 5, c = 4;
  auto s = random_tensor({groups * per, c}, rng, 1.0, false);
  auto F = random_tensor({groups * hw, c}, rng, 1.0, false);
  std::vector<double> w;
  const auto out = semantic_attention(s, F, hw, per, false, &w);
  const auto sm = to_mat(s), fm = to_mat(F);
  for (std::size_t r = 0; r < groups * per; ++r) {
    const std::size_t g = r / per;
    std::vector<double> a(hw);
    double z = 0, wsum = 0;
    for (std::size_t k = 0; k < hw; ++k) {
      double d = 0;
      for (std::size_t j = 0; j < c; ++j) d += sm[r][j] * fm[g * hw + k][j];
      a[k] = std::exp(d / std::sqrt(4.0));
      z += a[k];
    }
    for (std::size_t j = 0; j < c; ++j) {
      double v = 0;
      for (std::size_t k = 0; k < hw; ++k) v += a[k] / z * fm[g * hw + k][j];
      EXPECT_NEAR(out.at(r * c + j), v, 1e-9);
    }
    for (std::size_t k = 0; k < hw; ++k) {
      EXPECT_GE(w[r * hw + k], 0.0);
      wsum += w[r * hw + k];
    }
    EXPECT_NEAR(wsum, 1.0, 1e-12);
  }
}

TEST(Attention, RawWeighting) {
  auto s = Tensor::row({1, 0, 0, 0});
  auto F = Tensor::from({2, 4}, {2, 0, 0, 0, 4, 0, 0, 0});
  std::vector<double> w;
  auto out = semantic_attention(s, F, 2, 1, true, &w);
  // (⟨s, f⟩/√4)/HW
  EXPECT_DOUBLE_EQ(w[0], 0.5);
  EXPECT_DOUBLE_EQ(w[1], 1.0);
  EXPECT_DOUBLE_EQ(out.at(0), 0.5 * 2 + 1.0 * 4);
}

TEST(Attention, ShapeErrors) {
  EXPECT_THROW(semantic_attention(Tensor::zeros({1, 3}), Tensor::zeros({4, 4}), 4, 1), Error);
  EXPECT_THROW(semantic_attention(Tensor::zeros({3, 4}), Tensor::zeros({4, 4}), 4, 1), Error);
}

TEST(Progressive, OneChainPerItem) {
  Fixture f(3, 0);
  PvsaModel m(f.channels, f.dim, no_zero_init(), 1);
  const auto out = m.run_progressive(f.support, f.sem, true);
  EXPECT_EQ(out.blocks, (std::vector<std::size_t>{0, 1, 2, 3}));
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(out.P[j].shape(), (Shape{f.way, f.channels[j]}));
    EXPECT_EQ(out.weights[j].size(), f.way * f.hw[j]);
  }
  Fixture g(3, 2);
  EXPECT_EQ(m.run_progressive(g.support, g.sem).P[0].dim(0), f.way * 3);
}

TEST(Progressive, FirstBlockAndChainingOracle) {
  Fixture f(4, 1);
  PvsaModel m(f.channels, f.dim, no_zero_init(), 2);
  const auto out = m.run_progressive(f.support, f.sem);
  const auto sem = to_mat(f.sem.rows);
  const auto& blocks = m.blocks();
  // Block 0: s = W·sem. Block 1: s = leaky(W·sem + U·P_0).
  const auto p0 = to_mat(out.P[0]);
  for (std::size_t r = 0; r < sem.size(); ++r) {
    const auto s0 = linear(blocks[0].W, sem[r]);
    for (std::size_t c = 0; c < s0.size(); ++c) EXPECT_NEAR(out.s[0].at(r * 4 + c), s0[c], 1e-12);
    auto s1 = linear(blocks[1].W, sem[r]);
    const auto u = linear(blocks[1].U, p0[r]);
    for (std::size_t c = 0; c < s1.size(); ++c) {
      const double v = s1[c] + u[c];
      EXPECT_NEAR(out.s[1].at(r * 6 + c), v > 0 ? v : 0.1 * v, 1e-12);
    }
  }
}

TEST(Progressive, ZeroChainGivesIndependentBlocks) {
  Fixture f(5);
  PvsaModel m(f.channels, f.dim, no_zero_init(), 3);
  for (auto& b : m.blocks()) {
    for (auto& v : b.U.weight().mutable_data()) v = 0.0;
    for (auto& v : b.U.bias().mutable_data()) v = 0.0;
  }
  const auto before = m.run_progressive(f.support, f.sem);
  // Perturbing block 0 must not reach later blocks.
  for (auto& v : m.blocks()[0].fusion.second().bias().mutable_data()) v += 1.0;
  const auto after = m.run_progressive(f.support, f.sem);
  EXPECT_NE(before.P[0].at(0), after.P[0].at(0));
  for (std::size_t j = 1; j < 4; ++j) expect_close(before.P[j], after.P[j], 0.0);
  // Each block equals a standalone SVPE block on leaky(W·sem).
  const auto s = ops::leaky_relu(m.blocks()[2].W(ops::slice_rows(f.sem.rows, 0, 1)), 0.1);
  const auto F = ops::slice_rows(f.support.maps[2], 0, f.hw[2]);
  expect_close(svpe_block(s, F, m.blocks()[2].fusion), ops::slice_rows(after.P[2], 0, 1), 1e-12);
}

TEST(Progressive, StageTruncation) {
  Fixture f(6);
  for (std::size_t n = 1; n <= 4; ++n) {
    PvsaConfig c = no_zero_init();
    c.num_stages = n;
    PvsaModel m(f.channels, f.dim, c, 1);
    const auto out = m.run_progressive(f.support, f.sem);
    ASSERT_EQ(out.blocks.size(), n);
    EXPECT_EQ(out.blocks.front(), 4 - n);
    EXPECT_EQ(out.blocks.back(), 3u);
    EXPECT_EQ(m.prototypes(f.support, f.sem).C.shape(), (Shape{f.way, 10}));
  }
  PvsaConfig bad;
  bad.num_stages = 5;
  EXPECT_THROW(PvsaModel(f.channels, f.dim, bad, 1), Error);
}

TEST(Fusion, OrderSensitive) {
  PvsaConfig c = no_zero_init();
  c.num_stages = 3;
  PvsaModel m({6, 6, 6}, 4, c, 7);
  Rng rng(7);
  std::vector<Tensor> P{random_tensor({2, 6}, rng, 1.0, false), random_tensor({2, 6}, rng, 1.0, false),
                        random_tensor({2, 6}, rng, 1.0, false)};
  const std::vector<std::size_t> blocks{0, 1, 2};
  const auto a = m.fuse_blocks(P, blocks);
  std::swap(P[0], P[1]);
  const auto b = m.fuse_blocks(P, blocks);
  double diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.at(i) - b.at(i)));
  EXPECT_GT(diff, 1e-6);
}

TEST(Fusion, ZeroSecondLayerGivesBias) {
  Fixture f(8);
  PvsaModel m(f.channels, f.dim, no_zero_init(), 1);
  auto& second = m.block_fusion().second();
  for (auto& v : second.weight().mutable_data()) v = 0.0;
  Rng rng(8);
  for (auto& v : second.bias().mutable_data()) v = rng.normal();
  const auto out = m.run_progressive(f.support, f.sem);
  const auto fused = m.fuse_blocks(out.P, out.blocks);
  for (std::size_t r = 0; r < fused.dim(0); ++r)
    for (std::size_t c = 0; c < 10; ++c) EXPECT_DOUBLE_EQ(fused.at(r * 10 + c), second.bias().at(c));
}

TEST(Calibration, BetaZeroIsScaledRawPrototype) {
  Fixture f(9);
  PvsaConfig c = no_zero_init();
  c.beta = 0.0;
  PvsaModel m(f.channels, f.dim, c, 1);
  const auto C = m.prototypes(f.support, f.sem).C;
  for (std::size_t i = 0; i < C.numel(); ++i) EXPECT_DOUBLE_EQ(C.at(i), 0.2 * f.support.f_s.at(i));
}

TEST(Calibration, StraightLineOracle) {
  Rng rng(10);
  const std::size_t cn = 6;
  nn::TwoLayer fusion(2 * cn, cn, cn, 0.1, rng);
  nn::Linear fc(cn, cn, rng);
  auto f_s = random_tensor({1, cn}, rng, 1.0, false);
  auto P_cls = random_tensor({1, cn}, rng, 1.0, false);
  auto P_ent = random_tensor({2, cn}, rng, 1.0, false);
  const auto C = calibrate_prototype(f_s, P_cls, P_ent, 0.2, 0.8, fusion, fc);
  const auto f = to_mat(f_s)[0];
  std::vector<Mat::value_type> items{to_mat(P_cls)[0], to_mat(P_ent)[0], to_mat(P_ent)[1]};
  std::vector<double> sum(cn, 0.0);
  for (const auto& p : items) {
    const auto y = linear(fc, two_layer(fusion, cat(f, p)));
    for (std::size_t i = 0; i < cn; ++i) sum[i] += y[i];
  }
  for (std::size_t i = 0; i < cn; ++i) EXPECT_NEAR(C.at(i), 0.2 * f[i] + 0.8 * sum[i], 1e-9);

  // The mean variant averages the entity terms only.
  const auto Cm = calibrate_prototype(f_s, P_cls, P_ent, 0.2, 0.8, fusion, fc, true);
  const auto y0 = linear(fc, two_layer(fusion, cat(f, items[0])));
  const auto y1 = linear(fc, two_layer(fusion, cat(f, items[1])));
  const auto y2 = linear(fc, two_layer(fusion, cat(f, items[2])));
  for (std::size_t i = 0; i < cn; ++i) EXPECT_NEAR(Cm.at(i), 0.2 * f[i] + 0.8 * (y0[i] + 0.5 * (y1[i] + y2[i])), 1e-9);
}

TEST(Calibration, ModelCalibrateMatchesFreeFunction) {
  Fixture f(11);
  PvsaModel m(f.channels, f.dim, no_zero_init(), 4);
  const auto bundle = m.prototypes(f.support, f.sem);
  for (std::size_t cls = 0; cls < f.way; ++cls) {
    const auto C = calibrate_prototype(ops::slice_rows(f.support.f_s, cls, cls + 1),
                                       ops::slice_rows(bundle.P, cls * 3, cls * 3 + 1),
                                       ops::slice_rows(bundle.P, cls * 3 + 1, cls * 3 + 3), 0.2, 0.8,
                                       m.pc_fusion(), m.pc_fc());
    expect_close(C, ops::slice_rows(bundle.C, cls, cls + 1), 1e-12);
  }
}

TEST(Calibration, ZeroInitStartsAtScaledPrototype) {
  Fixture f(12);
  PvsaModel m(f.channels, f.dim, PvsaConfig{}, 1);
  const auto C = m.prototypes(f.support, f.sem).C;
  for (std::size_t i = 0; i < C.numel(); ++i) EXPECT_DOUBLE_EQ(C.at(i), 0.2 * f.support.f_s.at(i));
}

TEST(Calibration, SwitchesChangeTheMapping) {
  Fixture f(13);
  PvsaConfig off = no_zero_init();
  off.use_svpe = false;
  PvsaModel m(f.channels, f.dim, off, 1);
  expect_close(m.prototypes(f.support, f.sem).C, f.support.f_s, 0.0);

  PvsaConfig no_pc = no_zero_init();
  no_pc.use_pc = false;
  PvsaModel n(f.channels, f.dim, no_pc, 1);
  const auto b = n.prototypes(f.support, f.sem);
  for (std::size_t cls = 0; cls < f.way; ++cls)
    for (std::size_t c = 0; c < 10; ++c) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += b.P.at((cls * 3 + k) * 10 + c);
      EXPECT_NEAR(b.C.at(cls * 10 + c), 0.2 * f.support.f_s.at(cls * 10 + c) + 0.8 * s, 1e-12);
    }
}

TEST(Classifier, ClosedForm) {
  auto q = Tensor::row({1, 0});
  auto protos = Tensor::from({2, 2}, {1, 0, 0, 1});
  const auto p = classify_query(q, protos, 1.0);
  EXPECT_NEAR(p.at(0), std::numbers::e / (std::numbers::e + 1), 1e-12);
  EXPECT_NEAR(p.at(0), 0.7311, 1e-4);
  EXPECT_NEAR(p.at(1), 0.2689, 1e-4);
}

TEST(Classifier, UniformAndScaleInvariant) {
  Rng rng(14);
  auto q = random_tensor({3, 5}, rng, 1.0, false);
  auto one = random_tensor({1, 5}, rng, 1.0, false);
  const auto same = classify_query(q, ops::concat_rows({one, one, one, one}), 0.1);
  for (double v : same.data()) EXPECT_NEAR(v, 0.25, 1e-12);
  auto protos = random_tensor({4, 5}, rng, 1.0, false);
  const auto a = classify_query(q, protos, 0.1);
  const auto b = classify_query(q, ops::scale(protos, 3.0), 0.1);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
}

TEST(Classifier, ZeroRowsRejected) {
  try {
    classify_query(Tensor::row({1, 0}), Tensor::from({2, 2}, {1, 0, 0, 0}), 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kZeroVector);
  }
  EXPECT_THROW(classify_query(Tensor::row({0, 0}), Tensor::from({1, 2}, {1, 0}), 1.0), Error);
  EXPECT_THROW(classify_query(Tensor::row({1, 0}), Tensor::from({1, 2}, {1, 0}), 0.0), Error);
}

TEST(EpisodeLossTest, Oracles) {
  const std::vector<double> uniform(5, 0.2);
  const std::vector<std::size_t> y{3};
  EXPECT_NEAR(episode_loss_from_probs(uniform, 5, y), std::log(5.0), 1e-12);
  const auto lp = ops::log_softmax_rows(Tensor::zeros({1, 5}));
  EXPECT_NEAR(episode_loss(lp, y).sum.item(), std::log(5.0), 1e-12);
  const std::vector<double> onehot{0, 1, 0, 1, 0, 0};
  const std::vector<std::size_t> y2{1, 0};
  EXPECT_DOUBLE_EQ(episode_loss_from_probs(onehot, 3, y2), 0.0);

  Rng rng(15);
  auto logits = random_tensor({4, 3}, rng, 1.0, false);
  const auto p = ops::softmax_rows(logits);
  const std::vector<std::size_t> y3{0, 2, 2, 1};
  double oracle = 0;
  for (std::size_t i = 0; i < 4; ++i) oracle -= std::log(p.at(i * 3 + y3[i]));
  const auto l = episode_loss(ops::log_softmax_rows(logits), y3);
  EXPECT_NEAR(l.sum.item(), oracle, 1e-12);
  EXPECT_NEAR(l.mean, oracle / 4, 1e-12);
  const std::vector<std::size_t> bad{0, 2, 3, 1};
  EXPECT_THROW(episode_loss(ops::log_softmax_rows(logits), bad), Error);
}

TEST(PvsaGrad, SvpeBlock) {
  Rng rng(16);
  nn::TwoLayer fusion(8, 4, 4, 0.1, rng);
  auto s = random_tensor({1, 4}, rng);
  auto F = random_tensor({6, 4}, rng);
  auto probe = random_tensor({1, 4}, rng, 1.0, false);
  std::vector<Tensor> params{s, F};
  nn::ParamList fp;
  fusion.collect("f", fp);
  for (auto& p : fp) params.push_back(p.tensor);
  for (bool raw : {false, true}) {
    const auto r = grad_check([&] { return ops::sum(ops::mul(svpe_block(s, F, fusion, raw), probe)); }, params, 200, 1);
    EXPECT_GE(r.pass_fraction(), 0.99) << r.max_rel;
  }
}

TEST(PvsaGrad, FullEpisode) {
  Fixture f(17);
  PvsaModel m(f.channels, f.dim, no_zero_init(), 5);
  Rng rng(17);
  auto query = random_tensor({6, 10}, rng, 1.0, false);
  const std::vector<std::size_t> y{0, 1, 1, 0, 0, 1};
  std::vector<Tensor> params;
  for (auto& p : m.parameters()) params.push_back(p.tensor);
  const auto r = grad_check(
      [&] {
        const auto C = m.prototypes(f.support, f.sem).C;
        return episode_loss(ops::log_softmax_rows(classify_logits(query, C, 0.5)), y).sum;
      },
      params, 200, 2);
  EXPECT_GE(r.pass_fraction(), 0.99) << r.max_rel;
}

TEST(Pvsa, Deterministic) {
  Fixture f(18);
  PvsaModel a(f.channels, f.dim, no_zero_init(), 9), b(f.channels, f.dim, no_zero_init(), 9);
  const auto ca = a.prototypes(f.support, f.sem).C, cb = b.prototypes(f.support, f.sem).C;
  for (std::size_t i = 0; i < ca.numel(); ++i) ASSERT_EQ(ca.at(i), cb.at(i));
}

TEST(Pvsa, CheckpointRoundTrip) {
  Fixture f(19);
  PvsaModel a(f.channels, f.dim, no_zero_init(), 1), b(f.channels, f.dim, no_zero_init(), 2);
  Checkpoint ck;
  a.save_to(ck);
  b.load_from(ck);
  expect_close(a.prototypes(f.support, f.sem).C, b.prototypes(f.support, f.sem).C, 0.0);
}

TEST(Maps, MinMax) {
  const std::vector<double> v{2, 4, 3};
  EXPECT_EQ(minmax_normalize(v), (std::vector<double>{0, 1, 0.5}));
  const std::vector<double> flat{7, 7, 7, 7};
  EXPECT_EQ(minmax_normalize(flat), (std::vector<double>(4, 0.5)));
}

TEST(Maps, GridsPerBlockAndItem) {
  Fixture f(20);
  PvsaModel m(f.channels, f.dim, no_zero_init(), 1);
  std::vector<Tensor> maps;
  for (std::size_t b = 0; b < 4; ++b) maps.push_back(ops::slice_rows(f.support.maps[b], 0, f.hw[b]));
  const std::vector<std::pair<std::size_t, std::size_t>> dims{{4, 4}, {2, 2}, {2, 2}, {1, 1}};
  SemanticBatch one{ops::slice_rows(f.sem.rows, 0, 3), 3};
  const auto grids = similarity_grids(m, maps, dims, ops::slice_rows(f.support.f_s, 0, 1), one, {"cls", "e1", "e2"});
  ASSERT_EQ(grids.size(), 12u);
  for (const auto& g : grids) {
    EXPECT_EQ(g.normalized.size(), g.height * g.width);
    for (double v : g.normalized) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}
