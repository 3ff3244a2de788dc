#include <set>

#include <gtest/gtest.h>

#include "langemb/model.hpp"
#include "support.hpp"

namespace langemb {
namespace {

using testing::gradient_check;
using testing::random_tensor;

ModelDims small_dims() {
  ModelDims d;
  d.bins = 6;
  d.conv_channels = 4;
  d.z_dim = 8;
  d.h_dim = 4;
  d.phoneme_hidden = 5;
  d.n_languages = 3;
  d.n_speakers = 6;
  d.n_phonemes_total = 7;
  return d;
}

TEST(Model, DefaultDimensions) {
  const ModelDims d = ModelDims::from_corpus(CorpusConfig{});
  EXPECT_EQ(d.receptive_field(), 13u);
  EXPECT_EQ(d.n_languages, 6u);
  EXPECT_EQ(d.n_speakers, 48u);
  EXPECT_EQ(d.n_phonemes_total, 56u);
  const ModelGraph m(d, 7);
  EXPECT_EQ(m.param("downstream.hidden.weight").shape(), (Shape{56, 64}));
  EXPECT_EQ(m.param("projection.weight").shape(), (Shape{1, 64, 32}));
}

TEST(Model, EncodeShapeIsLengthIndependent) {
  const ModelGraph m(ModelDims{}, 7);
  Rng rng(1);
  for (std::size_t T : {13u, 20u, 100u, 300u}) {
    const Tensor z = m.encode(random_tensor({T, 24}, rng, -1, 1, false));
    EXPECT_EQ(z.shape(), (Shape{64}));
    for (double v : z.data()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Model, EncodeRejectsShortInputNamingMinimum) {
  const ModelGraph m(ModelDims{}, 7);
  try {
    m.encode(Tensor::zeros({12, 24}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("at least 13"), std::string::npos) << e.what();
  }
}

TEST(Model, ZeroEncoderGivesZeroLatent) {
  ModelGraph m(ModelDims{}, 7);
  for (auto& t : m.group_tensors(ParamGroup::kEncoder))
    for (double& v : t.mutable_data()) v = 0.0;
  Rng rng(2);
  const Tensor z = m.encode(random_tensor({40, 24}, rng, -1, 1, false));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, ProjectionIsBitwiseLinearPlusRelu) {
  const ModelGraph m(ModelDims{}, 7);
  Rng rng(3);
  const Tensor z = random_tensor({5, 64}, rng, -2, 2, false);
  const Tensor w = reshape(m.param("projection.weight"), {64, 32});
  const Tensor expect = relu(add_bias(matmul(z, w), m.param("projection.bias")));
  const Tensor h = m.project(z);
  ASSERT_EQ(h.shape(), (Shape{5, 32}));
  for (std::size_t i = 0; i < h.numel(); ++i) {
    EXPECT_EQ(h[i], expect[i]);
    EXPECT_GE(h[i], 0.0);
  }
  EXPECT_THROW(m.project(Tensor::zeros({1, 63})), ShapeError);
}

TEST(Model, TruncationTakesLeadingCoordinates) {
  const ModelGraph m(ModelDims{}, 7);
  Rng rng(4);
  const Tensor z = random_tensor({2, 64}, rng, -2, 2, false);
  const Tensor t = m.embed(z, false);
  ASSERT_EQ(t.shape(), (Shape{2, 32}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 32; ++c) EXPECT_EQ(t.at(r, c), z.at(r, c));
}

TEST(Model, SatDoesNotChangeForwardValues) {
  const ModelGraph m(ModelDims{}, 7);
  Rng rng(5);
  const Tensor h = random_tensor({3, 32}, rng, 0, 2, false);
  const auto on = m.forward_heads(h, true, 1.0);
  const auto off = m.forward_heads(h, false, 1.0);
  ASSERT_EQ(on.spk_logits.shape(), (Shape{3, 48}));
  for (std::size_t i = 0; i < on.lang_logits.numel(); ++i)
    EXPECT_EQ(on.lang_logits[i], off.lang_logits[i]);
  for (std::size_t i = 0; i < on.spk_logits.numel(); ++i)
    EXPECT_EQ(on.spk_logits[i], off.spk_logits[i]);
}

// Under SAT the projection sees the negated speaker gradient, so a descent
// step on it raises L_spk.
TEST(Model, SatStepIncreasesSpeakerLossUpstream) {
  ModelGraph m(ModelDims{}, 7);
  Rng rng(6);
  const Tensor z = random_tensor({8, 64}, rng, -1, 1, false);
  const std::vector<int> spk{0, 1, 2, 3, 4, 5, 6, 7};
  auto spk_loss = [&](bool sat) {
    return softmax_cross_entropy(m.forward_heads(m.project(z), sat, 1.0).spk_logits, spk);
  };
  Tensor& w = m.param("projection.weight");
  m.zero_grad();
  backward(spk_loss(true));
  const std::vector<double> g_sat(w.grad().begin(), w.grad().end());
  m.zero_grad();
  backward(spk_loss(false));
  const std::vector<double> g_plain(w.grad().begin(), w.grad().end());
  m.zero_grad();
  double dot = 0;
  for (std::size_t i = 0; i < g_sat.size(); ++i) {
    EXPECT_EQ(g_sat[i], -g_plain[i]);
    dot += g_sat[i] * g_plain[i];
  }
  EXPECT_LT(dot, 0.0);
  const double before = spk_loss(false).item();
  auto data = w.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) data[i] -= 1e-3 * g_sat[i];
  EXPECT_GT(spk_loss(false).item(), before);
}

TEST(Model, GroupsPartitionParameters) {
  const ModelGraph m(ModelDims{}, 7);
  std::set<std::string> names;
  std::map<ParamGroup, std::size_t> per_group;
  for (const auto& p : m.parameters()) {
    EXPECT_TRUE(names.insert(p.name).second) << p.name;
    ++per_group[p.group];
    EXPECT_EQ(p.name.rfind(group_name(p.group), 0), 0u) << p.name;
  }
  EXPECT_EQ(per_group[ParamGroup::kEncoder], 8u);
  EXPECT_EQ(per_group[ParamGroup::kProjection], 2u);
  EXPECT_EQ(per_group[ParamGroup::kClassifiers], 4u);
  EXPECT_EQ(per_group[ParamGroup::kDownstream], 4u);
}

TEST(Model, PhonemeLogitsShapeAndHBoundary) {
  const ModelGraph m(ModelDims{}, 7);
  Rng rng(7);
  const std::vector<Tensor> frames{random_tensor({20, 24}, rng, -1, 1, false),
                                   random_tensor({15, 24}, rng, -1, 1, false)};
  const Tensor h = random_tensor({2, 32}, rng, 0, 1, false);
  EXPECT_EQ(m.phoneme_logits(frames, h).shape(), (Shape{35, 56}));
  EXPECT_THROW(m.phoneme_logits(frames, Tensor::zeros({2, 64})), ShapeError);
}

TEST(Model, EndToEndGradientsMatchFiniteDifferences) {
  ModelGraph m(small_dims(), 3);
  Rng rng(8);
  const Tensor frames = random_tensor({16, 6}, rng, -1, 1, false);
  const Tensor frames2 = random_tensor({14, 6}, rng, -1, 1, false);
  const std::vector<int> lang{0, 2}, spk{1, 5};
  std::vector<int> ph;
  for (int t = 0; t < 30; ++t) ph.push_back(t % 7);
  auto loss = [&] {
    const Tensor z = concat({m.encode_row(frames), m.encode_row(frames2)}, 0);
    const Tensor h = m.project(z);
    const auto heads = m.forward_heads(h, false, 0.7);  // reversal is not a derivative
    return add(add(softmax_cross_entropy(heads.lang_logits, lang),
                   softmax_cross_entropy(heads.spk_logits, spk)),
               softmax_cross_entropy(m.phoneme_logits({frames, frames2}, h), ph));
  };
  std::vector<Tensor> params;
  for (const auto& p : m.parameters()) params.push_back(p.value);
  EXPECT_LT(gradient_check(loss, params), 1e-5);
}

TEST(Model, SeedDeterminesInitialization) {
  const ModelGraph a(ModelDims{}, 7), b(ModelDims{}, 7), c(ModelDims{}, 8);
  for (ParamGroup g : kAllGroups) EXPECT_EQ(a.group_hash(g), b.group_hash(g));
  EXPECT_NE(a.group_hash(ParamGroup::kEncoder), c.group_hash(ParamGroup::kEncoder));
}

TEST(LanguageIdBaseline, LooksUpSeenAndRejectsUnseen) {
  const std::vector<int> ids{0, 1, 2, 3, 4, 5};
  const LanguageIDBaseline base(ids, 32, 7);
  const Tensor a = base.embed(3), b = base.embed(3);
  EXPECT_EQ(a.shape(), (Shape{32}));
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(a[i], b[i]);
  try {
    base.embed(6);
    FAIL() << "expected UnseenLanguageError";
  } catch (const UnseenLanguageError& e) {
    EXPECT_NE(std::string(e.what()).find("unseen language has no ID"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripIsBitwise) {
  testing::TempDir dir("ckpt");
  const ModelGraph a(ModelDims{}, 7);
  save_checkpoint(a, dir.path() / "a.ldck");
  ModelGraph b(ModelDims{}, 99);
  load_checkpoint(b, dir.path() / "a.ldck");
  for (ParamGroup g : kAllGroups) EXPECT_EQ(a.group_hash(g), b.group_hash(g));
  save_checkpoint(b, dir.path() / "b.ldck");
  EXPECT_EQ(hash_file(dir.path() / "a.ldck"), hash_file(dir.path() / "b.ldck"));
}

TEST(Checkpoint, RejectsCorruptionWithoutPartialLoad) {
  const ModelGraph a(ModelDims{}, 7);
  auto bytes = encode_checkpoint(a);
  ModelGraph b(ModelDims{}, 8);
  const std::string before = b.group_hash(ParamGroup::kEncoder);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 8);
  EXPECT_THROW(decode_checkpoint(b, truncated, "t"), FormatError);
  auto magic = bytes;
  magic[1] = 'X';
  EXPECT_THROW(decode_checkpoint(b, magic, "m"), FormatError);
  ModelGraph other(small_dims(), 7);
  EXPECT_THROW(decode_checkpoint(other, bytes, "arch"), FormatError);
  EXPECT_EQ(b.group_hash(ParamGroup::kEncoder), before);
}

}  // namespace
}  // namespace langemb
