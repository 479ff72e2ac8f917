#include <cctype>
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "mtp/losses.hpp"
#include "mtp/model.hpp"
#include "mtp/selfcheck.hpp"
#include "mtp/synthetic.hpp"

using namespace mtp;

namespace {

struct Fixture {
  Vocabulary vocab = synthetic::vocabulary();
  Corpus corpus = synthetic::corpus(vocab, {40, 6, 12, 5});
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

ModelConfig small_config(TaskSet heads) {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.vocab = fx().vocab.size();
  c.max_seq_len = 32;
  c.dropout = 0.0;
  c.head_tasks = std::move(heads);
  return c;
}

// Hand-built batch: two rows, the first padded after 5 tokens.
TrainingBatch padded_batch(std::size_t V) {
  TrainingBatch b;
  b.batch = 2;
  b.seq_len = 8;
  std::mt19937_64 rng(4);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < 8; ++i) {
      const bool real = r == 1 || i < 5;
      b.input_ids.push_back(real ? TokenId(5 + rng() % (V - 5)) : 0);
      b.type_ids.push_back(i >= 4 ? 1 : 0);
      b.attention_mask.push_back(real ? 1 : 0);
      b.content_mask.push_back(real ? 1 : 0);
    }
  return b;
}

}  // namespace

TEST(Model, BertBaseParameterCount) {
  ModelConfig c;
  c.layers = 12;
  c.hidden = 768;
  c.heads = 12;
  c.vocab = 30522;
  c.max_seq_len = 512;
  c.task_vocab = 15;
  c.head_tasks = TaskSet{Task::kMlm};
  const std::uint64_t H = 768, V = 30522, P = 512;
  const std::uint64_t embeddings = V * H + P * H + 2 * H + 15 * H + 2 * H;
  const std::uint64_t layer = 4 * (H * H + H) + 2 * H + (H * 4 * H + 4 * H) + (4 * H * H + H) + 2 * H;
  const std::uint64_t pooler = H * H + H;
  const std::uint64_t mlm = H * H + H + 2 * H + V;
  const std::uint64_t oracle = embeddings + 12 * layer + pooler + mlm;
  EXPECT_EQ(parameter_count(c), oracle);
  EXPECT_EQ(parameter_count(c), 110116410u);
  EXPECT_NEAR(double(parameter_count(c)), 110e6, 0.02 * 110e6);
}

TEST(Model, ConfigValidation) {
  auto c = small_config(TaskSet{Task::kMlm});
  c.heads = 3;
  EXPECT_THROW(c.validate(), Error);
  c = small_config(TaskSet{Task::kMlm});
  c.vocab = 0;
  EXPECT_THROW(Model<float>(c, 1), Error);
}

TEST(Model, ZeroTablesEmbedToZero) {
  Model<double> m(small_config(TaskSet{Task::kMlm}), 1);
  for (auto& p : m.parameters())
    if (p.name.rfind("embed.", 0) == 0 && p.name.find(".ln.") == std::string::npos)
      for (auto& v : p.tensor.mutable_values()) v = 0;
  auto b = padded_batch(fx().vocab.size());
  Rng rng(0);
  auto e = m.embed(b, rng, false);
  ASSERT_EQ(e.shape(), (Shape{16, 16}));
  for (double v : e.values()) EXPECT_EQ(v, 0.0);
}

TEST(Model, TaskIdChangesEmbeddings) {
  Model<double> m(small_config(TaskSet{Task::kMlm}), 1);
  auto b = padded_batch(fx().vocab.size());
  Rng rng(0);
  auto e0 = m.embed(b, rng, false);
  b.task_id = 3;
  auto e3 = m.embed(b, rng, false);
  double diff = 0;
  for (std::size_t i = 0; i < e0.size(); ++i) diff += std::abs(e0[i] - e3[i]);
  EXPECT_GT(diff, 1e-3);
  b.task_id = kTaskCount;
  EXPECT_THROW(m.embed(b, rng, false), Error);
}

TEST(Model, OutOfRangeTokenIsError) {
  Model<float> m(small_config(TaskSet{Task::kMlm}), 1);
  auto b = padded_batch(fx().vocab.size());
  b.input_ids[3] = TokenId(fx().vocab.size());
  Rng rng(0);
  EXPECT_THROW(m.embed(b, rng, false), Error);
}

TEST(Model, EncodeShapeAndAttentionRows) {
  Model<double> m(small_config(TaskSet{Task::kMlm}), 2);
  auto b = padded_batch(fx().vocab.size());
  Rng rng(0);
  std::vector<std::vector<double>> probs;
  auto h = m.encode(m.embed(b, rng, false), b.attention_mask, 2, 8, rng, false, &probs);
  EXPECT_EQ(h.shape(), (Shape{16, 16}));
  ASSERT_EQ(probs.size(), 2u);
  for (const auto& layer : probs) {
    ASSERT_EQ(layer.size(), 2u * 2u * 8u * 8u);
    for (std::size_t r = 0; r < layer.size() / 8; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 8; ++j) s += layer[r * 8 + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    // batch row 0: padded keys get no weight
    for (std::size_t q = 0; q < 8; ++q)
      for (std::size_t j = 5; j < 8; ++j) EXPECT_EQ(layer[q * 8 + j], 0.0);
  }
}

TEST(Model, PaddingContentDoesNotLeak) {
  Model<double> m(small_config(TaskSet{Task::kMlm}), 3);
  auto b = padded_batch(fx().vocab.size());
  Rng rng(0);
  auto h1 = m.forward(b, rng, false);
  for (std::size_t i = 5; i < 8; ++i) {
    b.input_ids[i] = TokenId(7 + i);
    b.type_ids[i] = 0;
  }
  auto h2 = m.forward(b, rng, false);
  for (std::size_t r = 0; r < 16; ++r) {
    if (!b.attention_mask[r]) continue;
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(h1.at(r, c), h2.at(r, c), 1e-6);
  }
}

TEST(Model, HeadShapes) {
  const auto& f = fx();
  TaskSet all(kAllTasks.begin(), kAllTasks.end());
  Model<float> m(small_config(all), 4);
  Rng rng(9);
  auto mlm = assemble_batch(TaskSet{Task::kMlm, Task::kTgs}, f.corpus, f.vocab, 4, 24, rng);
  auto h = m.forward(mlm, rng, false);
  auto out = m.head_forward(Task::kMlm, h, mlm);
  EXPECT_EQ(out.logits.shape(), (Shape{mlm.labels.mlm_positions.size(), f.vocab.size()}));
  auto tgs = m.head_forward(Task::kTgs, h, mlm);
  EXPECT_EQ(tgs.logits.shape(), (Shape{4, 6}));

  auto so = assemble_batch(TaskSet{Task::kSo}, f.corpus, f.vocab, 4, 24, rng);
  auto hs = m.forward(so, rng, false);
  EXPECT_EQ(m.head_forward(Task::kSo, hs, so).logits.shape(), (Shape{4, 2}));
  auto sdp = assemble_batch(TaskSet{Task::kSdp}, f.corpus, f.vocab, 4, 24, rng);
  EXPECT_EQ(m.head_forward(Task::kSdp, m.forward(sdp, rng, false), sdp).logits.shape(), (Shape{4, 3}));

  auto tf = assemble_batch(TaskSet{Task::kTf, Task::kQt}, f.corpus, f.vocab, 4, 24, rng);
  auto ht = m.forward(tf, rng, false);
  std::size_t content = 0;
  for (auto v : tf.labels.token_valid) content += v;
  EXPECT_EQ(m.head_forward(Task::kTf, ht, tf).predictions.shape(), (Shape{content}));
  auto qt = m.head_forward(Task::kQt, ht, tf);
  EXPECT_EQ(qt.cls_first.shape(), (Shape{2, 16}));
  EXPECT_EQ(qt.cls_second.shape(), (Shape{2, 16}));
}

TEST(Model, FsPairsFirstHalfWithContinuation) {
  const auto& f = fx();
  Model<double> m(small_config(TaskSet{Task::kFs}), 5);
  Rng rng(2);
  auto b = assemble_batch(TaskSet{Task::kFs}, f.corpus, f.vocab, 4, 24, rng);
  auto out = m.head_forward(Task::kFs, m.forward(b, rng, false), b);
  std::size_t expected = 0;
  for (std::size_t r = 2; r < 4; ++r)
    for (std::size_t i = 0; i < 24; ++i) expected += b.content_mask[r * 24 + i];
  EXPECT_EQ(out.count, expected);
  EXPECT_EQ(out.fs_cls.rows(), expected);
}

TEST(Model, SentenceHeadReadsOnlyFirstPosition) {
  const auto& f = fx();
  Model<double> m(small_config(TaskSet{Task::kSo}), 6);
  Rng rng(3);
  auto b = assemble_batch(TaskSet{Task::kSo}, f.corpus, f.vocab, 4, 24, rng);
  auto h = m.forward(b, rng, false);
  auto before = m.head_forward(Task::kSo, h, b).logits;
  std::vector<double> vals(h.values().begin(), h.values().end());
  for (std::size_t r = 0; r < 4 * 24; ++r) {
    if (r % 24 == 0) continue;
    for (std::size_t c = 0; c < 16; ++c) vals[r * 16 + c] += 5.0;
  }
  auto after = m.head_forward(Task::kSo, Tensor<double>::from(h.shape(), vals), b).logits;
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(Model, MissingHeadOrLabelsIsError) {
  const auto& f = fx();
  Model<float> m(small_config(TaskSet{Task::kMlm, Task::kSo}), 7);
  Rng rng(3);
  auto b = assemble_batch(TaskSet{Task::kMlm}, f.corpus, f.vocab, 4, 24, rng);
  auto h = m.forward(b, rng, false);
  try {
    m.head_forward(Task::kSo, h, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("SO"), std::string::npos);
  }
  EXPECT_THROW(m.head_forward(Task::kTf, h, b), Error);
  b.labels.mlm_positions.clear();
  EXPECT_THROW(m.head_forward(Task::kMlm, h, b), Error);
}

TEST(Model, SameSeedSameWeights) {
  Model<float> a(small_config(TaskSet{Task::kMlm}), 11), b(small_config(TaskSet{Task::kMlm}), 11);
  Model<float> c(small_config(TaskSet{Task::kMlm}), 12);
  const auto& wa = a.param("layer0.attn.q.weight");
  const auto& wb = b.param("layer0.attn.q.weight");
  const auto& wc = c.param("layer0.attn.q.weight");
  bool differs = false;
  for (std::size_t i = 0; i < wa.size(); ++i) {
    EXPECT_EQ(wa[i], wb[i]);
    EXPECT_LE(std::abs(wa[i]), 0.04f);
    differs |= wa[i] != wc[i];
  }
  EXPECT_TRUE(differs);
  EXPECT_THROW(a.param("nope"), Error);
}

TEST(Model, CopyDoesNotShareWeights) {
  Model<float> a(small_config(TaskSet{Task::kMlm}), 11);
  Model<float> b = a;
  const float before = a.param("embed.token")[0];
  EXPECT_EQ(b.param("embed.token")[0], before);
  a.parameters()[0].tensor.mutable_values()[0] += 1.0f;
  EXPECT_EQ(b.param("embed.token")[0], before);
  b = a;
  EXPECT_EQ(b.param("embed.token")[0], before + 1.0f);
  EXPECT_TRUE(b.parameters()[0].tensor.requires_grad());
}

class TaskGradients : public ::testing::TestWithParam<Task> {};

TEST_P(TaskGradients, EndToEndBelowTolerance) {
  TaskGradCheckSetup s;
  s.max_entries_per_param = 6;
  auto r = gradcheck_task(GetParam(), fx().corpus, fx().vocab, s);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "] analytic "
                                   << r.worst_analytic << " numeric " << r.worst_numeric;
  EXPECT_GT(r.entries_checked, 0u);
}

INSTANTIATE_TEST_SUITE_P(AllTasks, TaskGradients, ::testing::ValuesIn(kAllTasks), [](const auto& info) {
  std::string n;
  for (char c : task_name(info.param))
    if (std::isalnum(static_cast<unsigned char>(c))) n += c;
  return n;
});
