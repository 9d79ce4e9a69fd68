#include <gtest/gtest.h>

#include <set>

#include "cosa/errors.hpp"
#include "cosa/model.hpp"
#include "test_util.hpp"

using namespace cosa;
using cosa::testing::tiny_grammar;
using cosa::testing::tiny_model;

namespace {

const Corpus& tiny_corpus() {
  static const Corpus c = build_corpus(16, 2, tiny_grammar());
  return c;
}

int vocab_size() { return static_cast<int>(tiny_corpus().vocab.size()); }

std::vector<TokenId> framed(std::initializer_list<std::size_t> ids) {
  std::vector<TokenId> out = {Vocabulary::kCls};
  for (std::size_t i : ids) {
    const auto& c = tiny_corpus().samples[i].caption;
    out.insert(out.end(), c.begin(), c.end());
  }
  out.push_back(Vocabulary::kSep);
  return out;
}

Image noise_image(int size, Rng& rng) {
  Image img(size, size, 3);
  for (float& p : img.pixels) p = static_cast<float>(rng.uniform01());
  return img;
}

template <typename T>
void zero_temporal(Model<T>& m) {
  m.params().temporal.value.setZero();
}

}  // namespace

TEST(Model, DefaultImageSequenceLength) {
  ModelConfig cfg;
  cfg.vocab_size = 40;
  const Model<float> m(cfg, 1);
  Rng rng(1);
  const auto enc = m.encode_image(noise_image(32, rng));
  EXPECT_EQ(cfg.frame_len(), 17);
  EXPECT_EQ(enc.features.rows(), 17);
  EXPECT_EQ(enc.features.cols(), 64);
  EXPECT_EQ(enc.cls.rows(), 1);
}

TEST(Model, ShapeContractOverRandomConfigs) {
  Rng rng(5);
  for (int trial = 0; trial < 12; ++trial) {
    ModelConfig cfg = tiny_model(vocab_size());
    cfg.n_heads = 1 + static_cast<int>(rng.uniform_index(3));
    cfg.d_model = cfg.n_heads * (2 + static_cast<int>(rng.uniform_index(4)));
    cfg.n_vision_layers = 1 + static_cast<int>(rng.uniform_index(2));
    cfg.n_text_layers = 1 + static_cast<int>(rng.uniform_index(2));
    cfg.patch_size = rng.uniform_index(2) ? 4 : 8;
    cfg.itm_head_hidden = 3 + static_cast<int>(rng.uniform_index(5));
    cfg.project_then_mean = rng.uniform_index(2) == 1;
    const Model<float> m(cfg, trial);
    const int frames = 1 + static_cast<int>(rng.uniform_index(4));
    std::vector<Image> imgs;
    for (int f = 0; f < frames; ++f) imgs.push_back(noise_image(8, rng));
    const auto video = m.encode_pseudo_video(imgs);
    EXPECT_EQ(video.visual_sequence.rows(), frames * cfg.frame_len());
    EXPECT_EQ(video.visual_sequence.cols(), cfg.d_model);
    EXPECT_EQ(video.video_global.rows(), 1);
    EXPECT_EQ(video.video_global.cols(), cfg.d_model);
    const auto tokens = framed({0, 1});
    for (TextMode mode : {TextMode::unimodal, TextMode::cross_bidirectional, TextMode::cross_causal}) {
      std::optional<ag::Matrix<float>> vis;
      if (mode != TextMode::unimodal) vis = video.visual_sequence;
      const auto out = m.text_forward(tokens, mode, vis);
      EXPECT_EQ(out.hidden.rows(), static_cast<long>(tokens.size()));
      EXPECT_EQ(out.hidden.cols(), cfg.d_model);
      EXPECT_EQ(out.cls.cols(), cfg.d_model);
      EXPECT_EQ(out.logits.rows(), static_cast<long>(tokens.size()));
      EXPECT_EQ(out.logits.cols(), cfg.vocab_size);
    }
    const auto itm = m.itm_score(tokens, video.visual_sequence);
    EXPECT_EQ(itm.rows(), 1);
    EXPECT_EQ(itm.cols(), 2);
  }
}

TEST(Model, IdenticalImagesIdenticalFeatures) {
  const Model<float> m(tiny_model(vocab_size()), 3);
  const Image& img = tiny_corpus().samples[0].image;
  const Image copy = img;
  EXPECT_EQ(m.encode_image(img).features, m.encode_image(copy).features);
}

TEST(Model, BatchPermutationPermutesOutputs) {
  const Model<double> m(tiny_model(vocab_size()), 3);
  const Image& a = tiny_corpus().samples[0].image;
  const Image& b = tiny_corpus().samples[5].image;
  ag::Tape<double> t(false);
  const std::vector<const Image*> ab = {&a, &b}, ba = {&b, &a};
  const auto fab = m.encode_images(t, ab).value();
  const auto fba = m.encode_images(t, ba).value();
  const int L = m.config().frame_len();
  EXPECT_TRUE(fab.topRows(L).isApprox(fba.bottomRows(L), 1e-12));
  EXPECT_TRUE(fab.bottomRows(L).isApprox(fba.topRows(L), 1e-12));
  EXPECT_TRUE(fab.topRows(L).isApprox(m.encode_image(a).features, 1e-12));
}

TEST(Model, SingleFrameVideo) {
  Model<double> m(tiny_model(vocab_size()), 4);
  const Image& img = tiny_corpus().samples[2].image;
  const auto enc = m.encode_image(img);
  const std::vector<Image> frames = {img};
  const auto video = m.encode_pseudo_video(frames);
  ag::Matrix<double> want = enc.features.rowwise() + m.params().temporal.value.row(0);
  EXPECT_TRUE(video.visual_sequence.isApprox(want, 1e-12));
  zero_temporal(m);
  const auto v0 = m.encode_pseudo_video(frames);
  ag::Tape<double> t(false);
  const auto projected =
      ag::linear(t.constant(enc.cls), t.param(m.params().vision_proj.weight), t.param(m.params().vision_proj.bias));
  EXPECT_TRUE(v0.video_global.isApprox(projected.value(), 1e-12));
}

TEST(Model, MeanPoolingIgnoresFrameOrderWithoutTemporalEmbeddings) {
  for (bool project_then_mean : {true, false}) {
    ModelConfig cfg = tiny_model(vocab_size());
    cfg.project_then_mean = project_then_mean;
    Model<double> m(cfg, 5);
    zero_temporal(m);
    const auto& s = tiny_corpus().samples;
    const std::vector<Image> same = {s[1].image, s[1].image, s[1].image, s[1].image};
    const std::vector<Image> one = {s[1].image};
    EXPECT_TRUE(m.encode_pseudo_video(same).video_global.isApprox(m.encode_pseudo_video(one).video_global, 1e-12));
    const std::vector<Image> order = {s[0].image, s[1].image, s[2].image};
    const std::vector<Image> swapped = {s[0].image, s[2].image, s[1].image};
    const auto va = m.encode_pseudo_video(order), vb = m.encode_pseudo_video(swapped);
    EXPECT_FALSE(va.visual_sequence.isApprox(vb.visual_sequence, 1e-9));
    EXPECT_TRUE(va.video_global.isApprox(vb.video_global, 1e-12));
  }
}

TEST(Model, TemporalEmbeddingsMarkFramePosition) {
  const Model<double> m(tiny_model(vocab_size()), 5);
  const auto& s = tiny_corpus().samples;
  const std::vector<Image> a = {s[0].image, s[1].image}, b = {s[1].image, s[0].image};
  const auto va = m.encode_pseudo_video(a).visual_sequence, vb = m.encode_pseudo_video(b).visual_sequence;
  const int L = m.config().frame_len();
  // swapping frames is not a plain block swap of the sequence
  EXPECT_FALSE(va.topRows(L).isApprox(vb.bottomRows(L), 1e-9));
  const auto t0 = m.params().temporal.value.row(0), t1 = m.params().temporal.value.row(1);
  ag::Matrix<double> moved = vb.bottomRows(L).rowwise() - t1;
  moved.rowwise() += t0;
  EXPECT_TRUE(va.topRows(L).isApprox(moved, 1e-12));
}

TEST(Model, CausalModeNoLeak) {
  const Model<float> m(tiny_model(vocab_size()), 6);
  const auto& s = tiny_corpus().samples;
  const std::vector<Image> frames = {s[0].image, s[1].image};
  const auto vis = m.encode_pseudo_video(frames).visual_sequence;
  auto tokens = framed({0, 1});
  const auto base = m.text_forward(tokens, TextMode::cross_causal, vis);
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const int t = static_cast<int>(rng.uniform_index(tokens.size() - 1));
    auto changed = tokens;
    const auto j = t + 1 + rng.uniform_index(tokens.size() - t - 1);
    changed[j] = static_cast<TokenId>(4 + rng.uniform_index(vocab_size() - 4));
    const auto out = m.text_forward(changed, TextMode::cross_causal, vis);
    for (int r = 0; r <= t; ++r) {
      EXPECT_EQ(out.hidden.row(r), base.hidden.row(r));
      EXPECT_EQ(out.logits.row(r), base.logits.row(r));
    }
  }
  // the bidirectional pass does see later tokens
  const auto bi = m.text_forward(tokens, TextMode::cross_bidirectional, vis);
  auto later = tokens;
  later[5] = later[5] == 4 ? 5 : 4;
  EXPECT_NE(m.text_forward(later, TextMode::cross_bidirectional, vis).hidden.row(0), bi.hidden.row(0));
  EXPECT_NE(bi.hidden, base.hidden);
}

TEST(Model, CrossAttentionIsLive) {
  const Model<double> m(tiny_model(vocab_size()), 7);
  const auto& s = tiny_corpus().samples;
  const std::vector<Image> frames = {s[0].image};
  auto vis = m.encode_pseudo_video(frames).visual_sequence;
  const auto tokens = framed({0});
  const auto a = m.text_forward(tokens, TextMode::cross_bidirectional, vis);
  vis(3, 2) += 0.5;
  const auto b = m.text_forward(tokens, TextMode::cross_bidirectional, vis);
  EXPECT_GT((a.hidden - b.hidden).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Model, UnimodalRejectsVisualInput) {
  const Model<float> m(tiny_model(vocab_size()), 7);
  const auto tokens = framed({0});
  const ag::Matrix<float> vis = ag::Matrix<float>::Ones(3, m.config().d_model);
  EXPECT_THROW(m.text_forward(tokens, TextMode::unimodal, vis), ShapeError);
  EXPECT_THROW(m.text_forward(tokens, TextMode::cross_causal, std::nullopt), ShapeError);
  const auto a = m.text_forward(tokens, TextMode::unimodal, std::nullopt);
  const auto b = m.text_forward(tokens, TextMode::unimodal, std::nullopt);
  EXPECT_EQ(a.hidden, b.hidden);
}

TEST(Model, PackedMatchesSingleAndPaddingIsNeutral) {
  const Model<double> m(tiny_model(vocab_size()), 8);
  const auto& s = tiny_corpus().samples;
  const std::vector<Image> f1 = {s[0].image}, f2 = {s[1].image, s[2].image};
  const auto v1 = m.encode_pseudo_video(f1).visual_sequence, v2 = m.encode_pseudo_video(f2).visual_sequence;
  const auto t1 = framed({0}), t2 = framed({1, 2});
  ag::Tape<double> tape(false);
  ag::Matrix<double> rows(v1.rows() + v2.rows(), v1.cols());
  rows << v1, v2;
  const auto memory = m.prepare_memory(tape, tape.constant(rows));
  const std::vector<TextSequence> seqs = {{t1, false, 0, static_cast<int>(v1.rows())},
                                          {t2, true, static_cast<int>(v1.rows()), static_cast<int>(v2.rows())}};
  const auto packed = m.text_forward(tape, seqs, &memory);
  const auto& h = packed.hidden.value();
  const auto single1 = m.text_forward(t1, TextMode::cross_bidirectional, v1).hidden;
  const auto single2 = m.text_forward(t2, TextMode::cross_causal, v2).hidden;
  EXPECT_TRUE(h.middleRows(packed.offsets[0], packed.lengths[0]).isApprox(single1, 1e-10));
  EXPECT_TRUE(h.middleRows(packed.offsets[1], packed.lengths[1]).isApprox(single2, 1e-10));

  auto padded = t1;
  padded.push_back(Vocabulary::kPad);
  padded.push_back(Vocabulary::kPad);
  const auto hp = m.text_forward(padded, TextMode::cross_bidirectional, v1).hidden;
  EXPECT_TRUE(hp.topRows(t1.size()).isApprox(single1, 1e-10));
}

TEST(Model, ItmDeterministicAndHeadGradient) {
  Model<double> m(tiny_model(vocab_size()), 9);
  const auto& s = tiny_corpus().samples;
  const std::vector<Image> frames = {s[3].image, s[4].image};
  const auto vis = m.encode_pseudo_video(frames).visual_sequence;
  const auto tokens = framed({3, 4});
  EXPECT_EQ(m.itm_score(tokens, vis), m.itm_score(tokens, vis));

  auto matched = [&] {
    ag::Tape<double> t;
    const auto memory = m.prepare_memory(t, t.constant(vis));
    const std::vector<TextSequence> seq = {{tokens, false, 0, static_cast<int>(vis.rows())}};
    const auto out = m.text_forward(t, seq, &memory);
    const auto logits = m.itm_logits(t, ag::gather_rows(out.hidden, {0}));
    return logits.value()(0, 1);
  };
  m.zero_grad();
  {
    ag::Tape<double> t;
    const auto memory = m.prepare_memory(t, t.constant(vis));
    const std::vector<TextSequence> seq = {{tokens, false, 0, static_cast<int>(vis.rows())}};
    const auto out = m.text_forward(t, seq, &memory);
    const auto logits = m.itm_logits(t, ag::gather_rows(out.hidden, {0}));
    ag::Matrix<double> pick(2, 1);
    pick << 0, 1;
    t.backward(ag::matmul(logits, t.constant(pick)));
  }
  EXPECT_NEAR(matched(), m.itm_score(tokens, vis)(0, 1), 1e-12);
  for (ag::Param<double>* p : {&m.params().itm_hidden.weight, &m.params().itm_out.weight, &m.params().itm_hidden.bias}) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x, h = 1e-6;
      x = saved + h;
      const double up = matched();
      x = saved - h;
      const double down = matched();
      x = saved;
      const double fd = (up - down) / (2 * h);
      EXPECT_LT(cosa::testing::rel_error(fd, p->grad.data()[i]), 1e-4) << i;
    }
  }
}

TEST(Model, InputErrors) {
  const Model<float> m(tiny_model(vocab_size()), 10);
  const auto& s = tiny_corpus().samples;
  std::vector<TokenId> long_tokens(m.config().max_position_len + 1, 4);
  EXPECT_THROW(m.text_forward(long_tokens, TextMode::unimodal, std::nullopt), TruncationError);
  const std::vector<TokenId> bad = {Vocabulary::kCls, static_cast<TokenId>(vocab_size()), Vocabulary::kSep};
  EXPECT_THROW(m.text_forward(bad, TextMode::unimodal, std::nullopt), ShapeError);
  EXPECT_THROW(m.encode_image(Image(16, 16, 3)), ShapeError);
  const std::vector<Image> too_many(m.config().max_frames + 1, s[0].image);
  EXPECT_THROW(m.encode_pseudo_video(too_many), ShapeError);
}

TEST(ModelConfig, JsonAndValidation) {
  ModelConfig c = tiny_model(30);
  EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
  EXPECT_THROW(ModelConfig::from_json({{"d_modle", 8}}), ConfigError);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_model(30);
  c.patch_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelParams, VisitNamesUniqueAndInitDeterministic) {
  const Model<float> a(tiny_model(vocab_size()), 11), b(tiny_model(vocab_size()), 11), c(tiny_model(vocab_size()), 12);
  std::set<std::string> names;
  std::size_t count = 0, total = 0;
  a.params().visit([&](const std::string& n, const ag::Param<float>& p) {
    names.insert(n);
    ++count;
    total += static_cast<std::size_t>(p.value.size());
  });
  EXPECT_EQ(names.size(), count);
  EXPECT_EQ(total, a.parameter_count());
  EXPECT_TRUE(names.count("temperature"));
  EXPECT_FLOAT_EQ(a.params().temperature.value(0, 0), 0.07f);
  EXPECT_FALSE(a.params().temperature.decay);
  EXPECT_FALSE(a.params().token_embed.decay);
  EXPECT_TRUE(a.params().patch_embed.weight.decay);
  EXPECT_EQ(a.params().patch_embed.weight.value, b.params().patch_embed.weight.value);
  EXPECT_NE(a.params().patch_embed.weight.value, c.params().patch_embed.weight.value);
}
