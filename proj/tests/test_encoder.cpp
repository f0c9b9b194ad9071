#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace medrat;
using medrat::support::Md;
using medrat::support::random_matrix;

namespace {

Md layer_norm_ref(const Md& x, const Md& g, const Md& b) {
  Md y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mu = 0.0, var = 0.0;
    for (Eigen::Index k = 0; k < x.cols(); ++k) mu += x(i, k);
    mu /= static_cast<double>(x.cols());
    for (Eigen::Index k = 0; k < x.cols(); ++k) var += (x(i, k) - mu) * (x(i, k) - mu);
    var /= static_cast<double>(x.cols());
    for (Eigen::Index k = 0; k < x.cols(); ++k) y(i, k) = (x(i, k) - mu) / std::sqrt(var + 1e-5) * g(0, k) + b(0, k);
  }
  return y;
}

Md affine_ref(const Md& x, const nn::Linear<double>& l) {
  Md y(x.rows(), l.weight.value.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      double s = l.bias.value(0, j);
      for (Eigen::Index k = 0; k < x.cols(); ++k) s += x(i, k) * l.weight.value(k, j);
      y(i, j) = s;
    }
  return y;
}

// One pre-norm encoder layer on a single unpadded sequence, written out
// with explicit loops.
Md encoder_layer_ref(const Md& x, const nn::EncoderLayer<double>& L) {
  const Eigen::Index n = x.rows(), d = x.cols();
  const int heads = L.attn.heads;
  const Eigen::Index dh = d / heads;
  const Md h = layer_norm_ref(x, L.norm1.gain.value, L.norm1.bias.value);
  const Md q = affine_ref(h, L.attn.query), k = affine_ref(h, L.attn.key), v = affine_ref(h, L.attn.value);
  Md a = Md::Zero(n, d);
  for (int hd = 0; hd < heads; ++hd) {
    for (Eigen::Index i = 0; i < n; ++i) {
      std::vector<double> w(static_cast<std::size_t>(n));
      double mx = -1e300, z = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        double s = 0.0;
        for (Eigen::Index c = 0; c < dh; ++c) s += q(i, hd * dh + c) * k(j, hd * dh + c);
        w[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, w[static_cast<std::size_t>(j)]);
      }
      for (auto& e : w) z += (e = std::exp(e - mx));
      for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index c = 0; c < dh; ++c) a(i, hd * dh + c) += w[static_cast<std::size_t>(j)] / z * v(j, hd * dh + c);
    }
  }
  const Md y = x + affine_ref(a, L.attn.output);
  Md hid = affine_ref(layer_norm_ref(y, L.norm2.gain.value, L.norm2.bias.value), L.ff.in);
  for (Eigen::Index i = 0; i < hid.size(); ++i) hid.data()[i] = std::max(0.0, hid.data()[i]);
  return y + affine_ref(hid, L.ff.out);
}

synth::Grid random_grid(Eigen::Index n, Eigen::Index d, Rng& rng) { return random_matrix(n, d, rng).cast<float>(); }

}  // namespace

TEST(ReportFeatures, ShapeAndDeterminism) {
  Rng rng(1);
  ReportFeatures<double> rf("r", 20, 16, 8, rng);
  const synth::Tokens toks{synth::kBos, synth::kEos};
  ag::Tape<double> t(false);
  auto a = rf(t, {&toks});
  EXPECT_EQ(a.x.rows(), 2);
  EXPECT_EQ(a.x.cols(), 8);
  EXPECT_EQ(a.segs.size(), 1u);
  auto b = rf(t, {&toks});
  EXPECT_EQ(a.x.value(), b.x.value());
}

TEST(ReportFeatures, EmbeddingRowLocality) {
  Rng rng(2);
  ReportFeatures<double> rf("r", 20, 16, 8, rng);
  const synth::Tokens toks{synth::kBos, 11, 7, 11, synth::kPeriod, synth::kEos};
  ag::Tape<double> t0(false), t1(false);  // a tape snapshots parameters on first use
  const Md before = rf(t0, {&toks}).x.value();
  rf.embedding.value.row(11).array() += 0.5;
  const Md after = rf(t1, {&toks}).x.value();
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (toks[i] == 11) {
      EXPECT_GT((after.row(r) - before.row(r)).norm(), 0.0);
    } else {
      EXPECT_EQ(after.row(r), before.row(r));
    }
  }
}

TEST(ReportFeatures, PadMaskAndErrors) {
  Rng rng(3);
  ReportFeatures<double> rf("r", 20, 6, 8, rng);
  const synth::Tokens toks{synth::kBos, 9, synth::kEos, synth::kPad};
  ag::Tape<double> t(false);
  EXPECT_EQ(rf(t, {&toks}).mask, (std::vector<std::uint8_t>{1, 1, 1, 0}));
  const synth::Tokens oov{synth::kBos, 25};
  EXPECT_THROW(rf(t, {&oov}), InputError);
  const synth::Tokens longer(7, synth::kPeriod);
  EXPECT_THROW(rf(t, {&longer}), InputError);
  const synth::Tokens empty;
  EXPECT_THROW(rf(t, {&empty}), InputError);
}

TEST(ImageFeatures, ZeroGridGivesPositions) {
  Rng rng(4);
  ImageFeatures<double> imf("i", 9, 5, 8, rng);
  const auto view = full_view(synth::Grid::Zero(9, 5));
  ag::Tape<double> t(false);
  EXPECT_TRUE(imf(t, {&view}).x.value().isApprox(imf.positions.value, 0.0));
}

TEST(ImageFeatures, MatchesMatrixProduct) {
  Rng rng(5);
  ImageFeatures<double> imf("i", 9, 5, 8, rng);
  imf.proj.bias.value = random_matrix(1, 8, rng);
  const synth::Grid g = random_grid(9, 5, rng);
  const auto view = full_view(g);
  ag::Tape<double> t(false);
  const Md got = imf(t, {&view}).x.value();
  for (Eigen::Index i = 0; i < 9; ++i)
    for (Eigen::Index j = 0; j < 8; ++j) {
      double s = imf.proj.bias.value(0, j) + imf.positions.value(i, j);
      for (Eigen::Index k = 0; k < 5; ++k) s += static_cast<double>(g(i, k)) * imf.proj.weight.value(k, j);
      EXPECT_NEAR(got(i, j), s, 1e-6);
    }
}

TEST(ImageFeatures, PermutationEquivariantWithoutPositions) {
  Rng rng(6);
  ImageFeatures<double> imf("i", 6, 4, 8, rng);
  imf.positions.value.setZero();
  const synth::Grid g = random_grid(6, 4, rng);
  const std::vector<int> perm{3, 0, 5, 1, 4, 2};
  synth::Grid p(6, 4);
  for (int i = 0; i < 6; ++i) p.row(i) = g.row(perm[static_cast<std::size_t>(i)]);
  const auto va = full_view(g), vb = full_view(p);
  ag::Tape<double> t(false);
  const Md a = imf(t, {&va}).x.value(), b = imf(t, {&vb}).x.value();
  for (int i = 0; i < 6; ++i) EXPECT_TRUE(b.row(i).isApprox(a.row(perm[static_cast<std::size_t>(i)]), 1e-12));
}

TEST(ImageFeatures, WrongPatchDimension) {
  Rng rng(7);
  ImageFeatures<double> imf("i", 6, 4, 8, rng);
  const auto view = full_view(synth::Grid::Zero(6, 5));
  ag::Tape<double> t(false);
  EXPECT_THROW(imf(t, {&view}), InputError);
}

TEST(EncoderLayer, PadKeysGetZeroWeight) {
  Rng rng(8);
  nn::EncoderLayer<double> layer("e", 8, 2, 12, rng);
  ag::Tape<double> t(false);
  const auto segs = make_segments({5});
  const std::vector<std::uint8_t> mask{1, 1, 1, 0, 0};
  ag::AttentionWeights<double> w;
  auto y = layer(t.constant(random_matrix(5, 8, rng)), segs, &mask, &w);
  EXPECT_TRUE(y.value().allFinite());
  EXPECT_EQ(y.rows(), 5);
  for (Eigen::Index i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ(w[0](i, 3), 0.0);
    EXPECT_DOUBLE_EQ(w[0](i, 4), 0.0);
    EXPECT_NEAR(w[0].row(i).sum(), 1.0, 1e-12);
  }
}

TEST(EncoderLayer, SinglePositionAttendsToItself) {
  Rng rng(9);
  nn::EncoderLayer<double> layer("e", 8, 2, 12, rng);
  ag::Tape<double> t(false);
  ag::AttentionWeights<double> w;
  layer(t.constant(random_matrix(1, 8, rng)), make_segments({1}), nullptr, &w);
  EXPECT_DOUBLE_EQ(w[0](0, 0), 1.0);
}

TEST(EncoderLayer, MatchesLoopReference) {
  Rng rng(10);
  nn::EncoderLayer<double> layer("e", 8, 2, 12, rng);
  for (auto* p : std::vector<ag::Parameter<double>*>{&layer.attn.query.bias, &layer.ff.in.bias, &layer.norm1.bias,
                                                      &layer.norm2.gain})
    p->value = random_matrix(1, p->value.cols(), rng);
  const Md x = random_matrix(6, 8, rng);
  ag::Tape<double> t(false);
  const Md got = layer(t.constant(x), make_segments({6})).value();
  EXPECT_LT((got - encoder_layer_ref(x, layer)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(EncoderLayer, PackedSequencesAreIndependent) {
  Rng rng(11);
  nn::EncoderLayer<double> layer("e", 8, 2, 12, rng);
  const Md a = random_matrix(3, 8, rng), b = random_matrix(4, 8, rng);
  Md both(7, 8);
  both << a, b;
  ag::Tape<double> t(false);
  const Md packed = layer(t.constant(both), make_segments({3, 4})).value();
  EXPECT_TRUE(packed.topRows(3).isApprox(layer(t.constant(a), make_segments({3})).value(), 1e-12));
  EXPECT_TRUE(packed.bottomRows(4).isApprox(layer(t.constant(b), make_segments({4})).value(), 1e-12));
}

TEST(SharedEncoder, SameInputSameOutputForBothModalities) {
  auto cfg = support::tiny_config();
  Model<double> model(cfg, 3);
  Rng rng(12);
  const Md x = random_matrix(5, cfg.d_model, rng);
  ag::Tape<double> t(false);
  FeatureSeq<double> r{t.constant(x), make_segments({5}), std::vector<std::uint8_t>(5, 1), Modality::Report};
  FeatureSeq<double> i{t.constant(x), make_segments({5}), std::vector<std::uint8_t>(5, 1), Modality::Image};
  const auto zr = model.encode_shared(r.x, r.segs, r.mask);
  const auto zi = model.encode_shared(i.x, i.segs, i.mask);
  EXPECT_EQ(zr.z.value(), zi.z.value());
  EXPECT_EQ(zr.z.rows(), 5);
  EXPECT_EQ(zr.z.cols(), cfg.d_model);
  // the modality encoders differ, so the same features diverge before E_S
  EXPECT_FALSE(model.encode_modality(r).value().isApprox(model.encode_modality(i).value()));
}

TEST(SharedEncoder, SingleParameterSet) {
  Model<double> model(support::tiny_config(), 3);
  std::set<std::string> names;
  int shared = 0;
  for (auto* p : model.parameters()) {
    EXPECT_TRUE(names.insert(p->name).second) << p->name;
    if (p->name.rfind("shared_encoder", 0) == 0) ++shared;
  }
  EXPECT_GT(shared, 0);
}

TEST(AttentionPool, ZeroSecondWeightGivesMean) {
  Rng rng(13);
  AttentionPool<double> pool("p", 8, rng);
  pool.w2.value.setZero();
  const Md z = random_matrix(5, 8, rng);
  ag::Tape<double> t(false);
  auto g = pool(LocalReps<double>{t.constant(z), make_segments({5}), std::vector<std::uint8_t>(5, 1)});
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_NEAR(g.attention.value()(i, 0), 0.2, 1e-12);
  EXPECT_TRUE(g.z.value().row(0).isApprox(z.colwise().mean(), 1e-12));
}

TEST(AttentionPool, SingleRow) {
  Rng rng(14);
  AttentionPool<double> pool("p", 8, rng);
  const Md z = random_matrix(1, 8, rng);
  ag::Tape<double> t(false);
  auto g = pool(LocalReps<double>{t.constant(z), make_segments({1}), {1}});
  EXPECT_DOUBLE_EQ(g.attention.value()(0, 0), 1.0);
  EXPECT_TRUE(g.z.value().isApprox(z, 1e-15));
}

TEST(AttentionPool, MatchesFormula) {
  Rng rng(15);
  AttentionPool<double> pool("p", 8, rng);
  const Md z = random_matrix(5, 8, rng);
  ag::Tape<double> t(false);
  auto g = pool(LocalReps<double>{t.constant(z), make_segments({5}), std::vector<std::uint8_t>(5, 1)});
  const auto [a, zg] = support::pool_oracle(z, pool.w1.value, pool.w2.value);
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_NEAR(g.attention.value()(i, 0), a[static_cast<std::size_t>(i)], 1e-6);
  for (Eigen::Index k = 0; k < 8; ++k) EXPECT_NEAR(g.z.value()(0, k), zg[static_cast<std::size_t>(k)], 1e-6);
}

TEST(AttentionPool, PermutationInvariant) {
  Rng rng(16);
  AttentionPool<double> pool("p", 8, rng);
  const Md z = random_matrix(6, 8, rng);
  const std::vector<Eigen::Index> perm{4, 1, 5, 0, 3, 2};
  Md zp(6, 8);
  for (int i = 0; i < 6; ++i) zp.row(i) = z.row(perm[static_cast<std::size_t>(i)]);
  ag::Tape<double> t(false);
  const std::vector<std::uint8_t> ones(6, 1);
  auto a = pool(LocalReps<double>{t.constant(z), make_segments({6}), ones});
  auto b = pool(LocalReps<double>{t.constant(zp), make_segments({6}), ones});
  EXPECT_TRUE(a.z.value().isApprox(b.z.value(), 1e-12));
  for (int i = 0; i < 6; ++i)
    EXPECT_NEAR(b.attention.value()(i, 0), a.attention.value()(perm[static_cast<std::size_t>(i)], 0), 1e-12);
}

TEST(AttentionPool, PaddingExcluded) {
  Rng rng(17);
  AttentionPool<double> pool("p", 8, rng);
  Md z = random_matrix(4, 8, rng);
  ag::Tape<double> t(false);
  auto a = pool(LocalReps<double>{t.constant(z), make_segments({4}), {1, 1, 1, 0}});
  z.row(3).setRandom();
  auto b = pool(LocalReps<double>{t.constant(z), make_segments({4}), {1, 1, 1, 0}});
  EXPECT_DOUBLE_EQ(a.attention.value()(3, 0), 0.0);
  EXPECT_TRUE(a.z.value().isApprox(b.z.value(), 1e-14));
}

TEST(AttentionPool, Gradient) {
  Rng rng(18);
  AttentionPool<double> pool("p", 6, rng);
  ag::Parameter<double> z("z", random_matrix(7, 6, rng));
  nn::ParamRefs<double> params{&z};
  pool.collect(params);
  auto loss = [&](ag::Tape<double>& t) {
    Rng w(4);
    auto g = pool(LocalReps<double>{t.parameter(z), make_segments({3, 4}), std::vector<std::uint8_t>(7, 1)});
    return ag::sum(ag::mul(g.z, t.constant(random_matrix(2, 6, w))));
  };
  EXPECT_LT(support::parameter_gradient_error(params, loss, 12), 1e-3);
}

TEST(EncoderStack, EndToEndGradient) {
  auto cfg = support::tiny_config();
  Model<double> model(cfg, 5);
  const synth::Tokens a{synth::kBos, 9, 25, 40, synth::kPeriod, synth::kEos};
  const synth::Tokens b{synth::kBos, synth::kNo, 12, synth::kPeriod, synth::kEos, synth::kPad};
  auto loss = [&](ag::Tape<double>& t) {
    Rng w(6);
    auto e = model.encode_reports(t, {&a, &b});
    return ag::sum(ag::mul(e.global.z, t.constant(random_matrix(2, cfg.d_model, w))));
  };
  nn::ParamRefs<double> params;
  model.report_features.collect(params);
  model.memory.collect(params);
  model.report_encoder.collect(params);
  model.shared_encoder.collect(params);
  model.pool.collect(params);
  EXPECT_LT(support::parameter_gradient_error(params, loss, 3), 1e-3);
}
