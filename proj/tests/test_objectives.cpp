#include <gtest/gtest.h>

#include <cmath>

#include "cosa/errors.hpp"
#include "cosa/objectives.hpp"
#include "test_util.hpp"

using namespace cosa;
using cosa::testing::tiny_grammar;
using cosa::testing::tiny_model;
using M = ag::Matrix<double>;

namespace {

const Corpus& corpus() {
  static const Corpus c = build_corpus(16, 4, tiny_grammar());
  return c;
}

std::vector<Sample> batch(std::size_t n, std::size_t offset = 0) {
  return {corpus().samples.begin() + offset, corpus().samples.begin() + offset + n};
}

std::vector<ConcatGroup> groups_of(const std::vector<Sample>& b, int n_c, std::uint64_t seed) {
  ConcatConfig c;
  c.n_c = n_c;
  Rng rng(seed);
  return group_batch(b, c, rng, corpus().vocab);
}

StepInputs inputs_for(const ObjectiveConfig& cfg, const std::vector<Sample>& b, const std::vector<ConcatGroup>& g) {
  StepInputs in;
  if (cfg.any_single()) in.samples = b;
  if (cfg.any_concatenated()) in.groups = g;
  return in;
}

double loss_value(const Model<double>& m, const StepInputs& in, const ObjectiveConfig& cfg, std::uint64_t seed = 1) {
  ag::Tape<double> t(false);
  Rng mask(seed), neg(seed + 1);
  return total_loss(m, t, in, cfg, mask, neg).breakdown.total;
}

}  // namespace

TEST(Objectives, NamesAndMapping) {
  for (Objective o : kAllObjectives) EXPECT_EQ(parse_objective(to_string(o)), o);
  EXPECT_EQ(single_counterpart(Objective::citc), Objective::itc);
  EXPECT_EQ(single_counterpart(Objective::cgm), Objective::gm);
  EXPECT_EQ(single_counterpart(Objective::mlm), Objective::mlm);
  EXPECT_TRUE(is_concatenated(Objective::cmlm));
  EXPECT_FALSE(is_concatenated(Objective::itm));
  EXPECT_THROW(parse_objective("lm"), ConfigError);
}

TEST(Objectives, DefaultSet) {
  const auto d = ObjectiveConfig::defaults();
  EXPECT_EQ(d.enabled_list(), (std::vector<Objective>{Objective::itc, Objective::itm, Objective::citc, Objective::citm,
                                                      Objective::cmlm, Objective::cgm}));
  EXPECT_DOUBLE_EQ(d.mlm_rate, 0.15);
  EXPECT_DOUBLE_EQ(d.gm_rate, 0.60);
  for (Objective o : kAllObjectives) EXPECT_DOUBLE_EQ(d.weight(o), 1.0);
  EXPECT_EQ(ObjectiveConfig::from_json(d.to_json()), d);
  EXPECT_THROW(ObjectiveConfig::from_json({{"enabled", {"itc", "xyz"}}}), ConfigError);
  ObjectiveConfig none;
  EXPECT_THROW(none.validate(), ConfigError);
}

TEST(Contrastive, SingleItemIsZero) {
  Rng rng(1);
  M v(1, 5), t(1, 5);
  for (int k = 0; k < 5; ++k) v(0, k) = rng.normal(), t(0, k) = rng.normal();
  EXPECT_NEAR(contrastive_loss(v, t, 0.07), 0.0, 1e-9);
}

TEST(Contrastive, EqualSimilarityIsLogN) {
  for (int n : {2, 3, 7, 16}) {
    M v = M::Ones(n, 4), t = M::Ones(n, 4);
    t.col(1).setConstant(-2.0);
    EXPECT_NEAR(contrastive_loss(v, t, 0.07), std::log(n), 1e-6) << n;
  }
}

TEST(Contrastive, HandBuiltThreeByThree) {
  // video globals are the unit axes, so sim(i, j) = text_j[i] for unit text rows
  M v = M::Identity(3, 3);
  M t(3, 3);
  t << 0.8, 0.6, 0.0,   //
      0.0, 0.6, 0.8,    //
      0.6, 0.0, 0.8;
  const double tau = 0.5;
  double s[3][3];
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) s[i][j] = t(j, i) / tau;
  }
  double v2t = 0, t2v = 0;
  for (int i = 0; i < 3; ++i) {
    v2t += -s[i][i] + std::log(std::exp(s[i][0]) + std::exp(s[i][1]) + std::exp(s[i][2]));
    t2v += -s[i][i] + std::log(std::exp(s[0][i]) + std::exp(s[1][i]) + std::exp(s[2][i]));
  }
  const double want = 0.5 * (v2t / 3 + t2v / 3);
  EXPECT_NEAR(contrastive_loss(v, t, tau), want, 1e-12);
}

TEST(Contrastive, ScaleInvariantAndSymmetric) {
  Rng rng(3);
  M v(6, 5), t(6, 5);
  for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = rng.normal(), t.data()[k] = rng.normal();
  const double base = contrastive_loss(v, t, 0.1);
  M vs = v, ts = t;
  for (int i = 0; i < 6; ++i) vs.row(i) *= 0.1 + i, ts.row(i) *= 3.0 + 2 * i;
  EXPECT_NEAR(contrastive_loss(vs, ts, 0.1), base, 1e-6);
  EXPECT_NEAR(contrastive_loss(t, v, 0.1), base, 1e-12);
}

TEST(HardNegatives, PairAlwaysPicksTheOther) {
  M sim = M::Zero(2, 2);
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto n = mine_hard_negatives(sim, rng);
    EXPECT_EQ(n.text_for_video, (std::vector<int>{1, 0}));
    EXPECT_EQ(n.video_for_text, (std::vector<int>{1, 0}));
  }
}

TEST(HardNegatives, FollowsSimilarity) {
  M sim = M::Constant(3, 3, -10.0);
  sim(0, 2) = 10.0;  // video 0 is most similar to text 2
  Rng rng(7);
  int hits = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto n = mine_hard_negatives(sim, rng);
    hits += n.text_for_video[0] == 2;
    for (int a = 0; a < 3; ++a) {
      EXPECT_NE(n.text_for_video[a], a);
      EXPECT_NE(n.video_for_text[a], a);
    }
  }
  EXPECT_GE(hits / double(draws), 0.99);
}

TEST(HardNegatives, FrequenciesMatchSoftmax) {
  M sim(3, 3);
  sim << 0, 1.0, 0.0, 0, 0, 0, 0, 0, 0;
  Rng rng(9);
  int ones = 0;
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) ones += mine_hard_negatives(sim, rng).text_for_video[0] == 1;
  const double p = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_NEAR(ones / double(draws), p, 0.015);
  EXPECT_THROW(mine_hard_negatives(M::Zero(1, 1), rng), ConfigError);
  const auto u = uniform_negatives(5, rng);
  for (int a = 0; a < 5; ++a) EXPECT_NE(u.text_for_video[a], a);
}

TEST(Matching, ClosedForms) {
  ag::Tape<double> t(false);
  M uniform = M::Zero(4, 2);
  EXPECT_NEAR(matching_loss(t.constant(uniform), {1, 0, 0, 1}).item(), std::log(2.0), 1e-6);
  M sure(3, 2);
  sure << -20, 20, 20, -20, 20, -20;
  EXPECT_LT(matching_loss(t.constant(sure), {1, 0, 0}).item(), 1e-3);
  EXPECT_THROW(matching_loss(t.constant(M::Zero(2, 3)), {0, 1}), ShapeError);
}

TEST(Matching, TwoItemBatchEqualsScalarBce) {
  ObjectiveConfig cfg = ObjectiveConfig::only({Objective::itm});
  const auto b = batch(2);
  Model<double> m(tiny_model(static_cast<int>(corpus().vocab.size())), 3);
  // Recompute the two-class cross-entropy from independently scored logits.
  // With two items the negatives are forced: text 1 for video 0 and so on.
  double want = 0;
  for (int i = 0; i < 2; ++i) {
    const std::vector<Image> frames_i = {b[i].image}, frames_o = {b[1 - i].image};
    auto framed = [](const Sample& s) {
      std::vector<TokenId> out = {Vocabulary::kCls};
      out.insert(out.end(), s.caption.begin(), s.caption.end());
      out.push_back(Vocabulary::kSep);
      return out;
    };
    const auto vis_i = m.encode_pseudo_video(frames_i).visual_sequence;
    const auto vis_o = m.encode_pseudo_video(frames_o).visual_sequence;
    const auto pos = m.itm_score(framed(b[i]), vis_i);
    const auto neg_text = m.itm_score(framed(b[1 - i]), vis_i);
    const auto neg_video = m.itm_score(framed(b[i]), vis_o);
    auto nll = [](const M& l, int label) {
      const double z = std::log(std::exp(l(0, 0)) + std::exp(l(0, 1)));
      return z - l(0, label);
    };
    want += nll(pos, 1) + nll(neg_text, 0) + nll(neg_video, 0);
  }
  want /= 6.0;
  StepInputs in;
  in.samples = b;
  EXPECT_NEAR(loss_value(m, in, cfg), want, 1e-10);
}

TEST(Reconstruction, UniformLogitsGiveLogV) {
  Model<double> m(tiny_model(static_cast<int>(corpus().vocab.size())), 5);
  m.params().token_embed.value.setZero();
  m.params().lm_bias.value.setZero();
  const auto b = batch(3);
  const auto g = groups_of(b, 2, 1)[0];
  Rng rng(4);
  const MaskedParagraph masked = mask_tokens(g.paragraph, 0.15, rng);
  ag::Tape<double> t(false);
  const auto vis = m.encode_pseudo_video(g.frames).visual_sequence;
  const double v = static_cast<double>(corpus().vocab.size());
  for (bool causal : {false, true}) {
    EXPECT_NEAR(masked_reconstruction_loss(m, t, masked, t.constant(vis), causal).item(), std::log(v), 1e-6);
  }
}

TEST(Reconstruction, ConfidentTargetGivesNearZero) {
  Model<double> m(tiny_model(static_cast<int>(corpus().vocab.size())), 5);
  const auto b = batch(1);
  std::vector<TokenId> p = {Vocabulary::kCls};
  p.insert(p.end(), b[0].caption.begin(), b[0].caption.end());
  p.push_back(Vocabulary::kSep);
  MaskedParagraph masked;
  masked.input_tokens = p;
  masked.input_tokens[3] = Vocabulary::kMask;
  masked.masked_positions = {3};
  masked.target_tokens = {p[3]};
  m.params().token_embed.value.setZero();
  m.params().lm_bias.value.setZero();
  m.params().lm_bias.value(0, p[3]) = 50.0;
  ag::Tape<double> t(false);
  const std::vector<Image> frames = {b[0].image};
  const auto vis = m.encode_pseudo_video(frames).visual_sequence;
  EXPECT_LT(masked_reconstruction_loss(m, t, masked, t.constant(vis), false).item(), 1e-3);
  masked.masked_positions.clear();
  EXPECT_THROW(masked_reconstruction_loss(m, t, masked, t.constant(vis), false), MaskingError);
}

TEST(TotalLoss, OnlyItcOnSingleItemIsZero) {
  const Model<double> m(tiny_model(static_cast<int>(corpus().vocab.size())), 1);
  const auto b = batch(1);
  StepInputs in;
  in.samples = b;
  EXPECT_NEAR(loss_value(m, in, ObjectiveConfig::only({Objective::itc})), 0.0, 1e-9);
}

TEST(TotalLoss, InputPresenceChecked) {
  const Model<double> m(tiny_model(static_cast<int>(corpus().vocab.size())), 1);
  const auto b = batch(4);
  const auto g = groups_of(b, 1, 3);
  StepInputs only_samples;
  only_samples.samples = b;
  EXPECT_THROW(loss_value(m, only_samples, ObjectiveConfig::defaults()), ConfigError);
  StepInputs both;
  both.samples = b;
  both.groups = g;
  EXPECT_THROW(loss_value(m, both, ObjectiveConfig::only({Objective::citc})), ConfigError);
}

TEST(TotalLoss, DisablingALossRemovesExactlyItsContribution) {
  const Model<double> m(tiny_model(static_cast<int>(corpus().vocab.size())), 2);
  const auto b = batch(6);
  const auto g = groups_of(b, 2, 5);
  ObjectiveConfig with = ObjectiveConfig::defaults();
  with.weights[static_cast<std::size_t>(Objective::cgm)] = 0.7;
  ObjectiveConfig without = with;
  without.set(Objective::cgm, false);
  ag::Tape<double> t(false);
  Rng mask(11), neg(12);
  const auto full = total_loss(m, t, inputs_for(with, b, g), with, mask, neg).breakdown;
  const double reduced = loss_value(m, inputs_for(without, b, g), without, 11);
  EXPECT_NEAR(full.total - reduced, 0.7 * full.value(Objective::cgm), 1e-6);
  // each enabled loss is reported and the total is their weighted sum
  double sum = 0;
  for (Objective o : kAllObjectives) {
    EXPECT_EQ(full.has(o), with.on(o));
    if (full.has(o)) sum += with.weight(o) * full.value(o);
  }
  EXPECT_NEAR(full.total, sum, 1e-9);
  EXPECT_GT(full.masked_tokens, 0);
  EXPECT_EQ(full.negatives, 2 * 6 * 2);
}

TEST(TotalLoss, Deterministic) {
  const Model<double> m(tiny_model(static_cast<int>(corpus().vocab.size())), 2);
  const auto b = batch(6);
  const auto g = groups_of(b, 2, 5);
  const auto cfg = ObjectiveConfig::defaults();
  EXPECT_EQ(loss_value(m, inputs_for(cfg, b, g), cfg, 3), loss_value(m, inputs_for(cfg, b, g), cfg, 3));
  EXPECT_NE(loss_value(m, inputs_for(cfg, b, g), cfg, 3), loss_value(m, inputs_for(cfg, b, g), cfg, 4));
}

TEST(TotalLoss, FloatAndDoubleAgree) {
  const ModelConfig mc = tiny_model(static_cast<int>(corpus().vocab.size()));
  const Model<double> md(mc, 6);
  const Model<float> mf(mc, 6);
  const auto b = batch(6);
  const auto g = groups_of(b, 2, 5);
  const auto cfg = ObjectiveConfig::defaults();
  ag::Tape<float> tf(false);
  Rng mask(1), neg(2);
  const double f = total_loss(mf, tf, inputs_for(cfg, b, g), cfg, mask, neg).breakdown.total;
  EXPECT_NEAR(f, loss_value(md, inputs_for(cfg, b, g), cfg, 1), 1e-3);
}
