#include <gtest/gtest.h>

#include <random>

#include "doc2dict/optim.hpp"
#include "doc2dict/transformer.hpp"

namespace d2d {
namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = Vocab::kCoverageMinimum;
  cfg.chunk_size = 8;
  cfg.max_chunks = 4;
  cfg.max_target_len = 16;
  cfg.dropout = 0.0f;
  return cfg;
}

std::vector<int> random_ids(std::mt19937_64& rng, std::size_t n, int vocab) {
  std::uniform_int_distribution<int> d(Vocab::kFirstLearned, vocab - 1);
  std::vector<int> ids(n);
  for (int& x : ids) x = d(rng);
  return ids;
}

TEST(ModelConfig, RejectsIndivisibleHeads) {
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.vocab_size = 10;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(ModelParams, InitIsSeeded) {
  const ModelConfig cfg = tiny_config();
  const auto a = ModelParams::init(cfg, 7).named();
  const auto b = ModelParams::init(cfg, 7).named();
  const auto c = ModelParams::init(cfg, 8).named();
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second.value(), b[i].second.value());
    differs = differs || !(a[i].second.value() == c[i].second.value());
  }
  EXPECT_TRUE(differs);
}

TEST(EncodeChunk, PaddingIsInvisibleAndZeroed) {
  const ModelConfig cfg = tiny_config();
  const ModelParams p = ModelParams::init(cfg, 1);
  std::mt19937_64 rng(3);
  const auto ids = random_ids(rng, 5, cfg.vocab_size);
  const std::vector<std::uint8_t> valid(5, 1);
  NoGradGuard ng;
  const Tensor short_enc = encode_chunk(p, cfg, ids, valid, 0, {}).value();

  // Same chunk with three explicit junk pad positions.
  auto padded = ids;
  padded.insert(padded.end(), {40, 50, 60});
  std::vector<std::uint8_t> mask = valid;
  mask.insert(mask.end(), {0, 0, 0});
  const Tensor long_enc = encode_chunk(p, cfg, padded, mask, 0, {}).value();
  EXPECT_EQ(short_enc.shape(), (Shape{8, 16}));
  EXPECT_LT(max_abs_diff(short_enc, long_enc), 1e-6f);
  for (std::size_t r = 5; r < 8; ++r) {
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(long_enc.at(r, j), 0.0f);
  }
}

TEST(EncodeChunk, ChunkIndexEmbeddingDistinguishesPositions) {
  const ModelConfig cfg = tiny_config();
  const ModelParams p = ModelParams::init(cfg, 1);
  std::mt19937_64 rng(4);
  const auto ids = random_ids(rng, 8, cfg.vocab_size);
  const std::vector<std::uint8_t> valid(8, 1);
  NoGradGuard ng;
  const Tensor a = encode_chunk(p, cfg, ids, valid, 0, {}).value();
  const Tensor b = encode_chunk(p, cfg, ids, valid, 1, {}).value();
  EXPECT_GT(max_abs_diff(a, b), 1e-4f);
  EXPECT_THROW(encode_chunk(p, cfg, ids, valid, cfg.max_chunks, {}), ShapeError);
  const auto too_long = random_ids(rng, 9, cfg.vocab_size);
  EXPECT_THROW(encode_chunk(p, cfg, too_long, std::vector<std::uint8_t>(9, 1), 0, {}), ShapeError);
}

TEST(Decoder, IsCausal) {
  const ModelConfig cfg = tiny_config();
  const ModelParams p = ModelParams::init(cfg, 2);
  std::mt19937_64 rng(5);
  const auto ids = random_ids(rng, 8, cfg.vocab_size);
  const std::vector<std::uint8_t> valid(8, 1);
  NoGradGuard ng;
  const Var memory = encode_chunk(p, cfg, ids, valid, 0, {});
  auto target = random_ids(rng, 6, cfg.vocab_size);
  target.back() = Vocab::kEos;
  const Tensor a = decode_teacher_forced(p, cfg, memory, valid, target, {}).logits.value();
  auto changed = target;
  changed[3] = changed[3] == 30 ? 31 : 30;
  const Tensor b = decode_teacher_forced(p, cfg, memory, valid, changed, {}).logits.value();
  // target[3] is the decoder input at row 4.
  for (std::size_t r = 0; r < 6; ++r) {
    float diff = 0.0f;
    for (std::size_t j = 0; j < a.cols(); ++j) diff = std::max(diff, std::abs(a.at(r, j) - b.at(r, j)));
    if (r <= 3) {
      EXPECT_EQ(diff, 0.0f) << "row " << r;
    } else {
      EXPECT_GT(diff, 0.0f) << "row " << r;
    }
  }
}

TEST(Decoder, EveryParameterReceivesGradient) {
  const ModelConfig cfg = tiny_config();
  const ModelParams p = ModelParams::init(cfg, 3);
  std::mt19937_64 rng(6);
  std::vector<Var> chunks;
  std::vector<std::uint8_t> valid;
  for (int i = 0; i < cfg.max_chunks; ++i) {
    const auto ids = random_ids(rng, 8, cfg.vocab_size);
    chunks.push_back(encode_chunk(p, cfg, ids, std::vector<std::uint8_t>(8, 1), i, {}));
    valid.insert(valid.end(), 8, 1);
  }
  const Var memory = concat(std::span<const Var>(chunks), 0);
  auto target = random_ids(rng, 10, cfg.vocab_size);
  target.back() = Vocab::kEos;
  const Var loss = decode_teacher_forced(p, cfg, memory, valid, target, {}).loss;
  backward(loss);
  for (const auto& [name, v] : p.named()) {
    ASSERT_TRUE(v.grad().has_value()) << name;
    float norm = 0.0f;
    for (float g : v.grad()->data()) norm += g * g;
    EXPECT_GT(norm, 0.0f) << name;
  }
}

TEST(Decoder, EmptyTargetAndBadMemoryRejected) {
  const ModelConfig cfg = tiny_config();
  const ModelParams p = ModelParams::init(cfg, 3);
  const Var memory = constant(Tensor::zeros({4, 16}));
  const std::vector<std::uint8_t> valid(4, 1);
  EXPECT_THROW(decode_teacher_forced(p, cfg, memory, valid, std::vector<int>{}, {}), ShapeError);
  const Var wrong = constant(Tensor::zeros({4, 8}));
  EXPECT_THROW(decode_teacher_forced(p, cfg, wrong, valid, std::vector<int>{5, 2}, {}), ShapeError);
  EXPECT_THROW(decode_teacher_forced(p, cfg, Var{}, valid, std::vector<int>{5, 2}, {}), ShapeError);
}

TEST(Decoder, CheckpointedBlocksMatchInline) {
  const ModelConfig cfg = tiny_config();
  std::mt19937_64 rng(7);
  const auto ids = random_ids(rng, 8, cfg.vocab_size);
  auto target = random_ids(rng, 7, cfg.vocab_size);
  target.back() = Vocab::kEos;
  const std::vector<std::uint8_t> valid(8, 1);
  ForwardContext ctx{true, 0.1f, 11};

  auto run = [&](const BlockRunner& runner) {
    const ModelParams p = ModelParams::init(cfg, 9);
    const Var memory = encode_chunk(p, cfg, ids, valid, 0, ctx, runner);
    const Var loss = decode_teacher_forced(p, cfg, memory, valid, target, ctx, runner).loss;
    const float value = loss.value()[0];
    backward(loss);
    std::vector<Tensor> grads;
    for (const auto& [name, v] : p.named()) grads.push_back(*v.grad());
    return std::make_pair(value, grads);
  };
  const auto direct = run(run_inline);
  const auto ckpt = run([](std::uint32_t id, ReplayFn fn, std::vector<Var> in) {
    return checkpoint_segment(std::move(fn), std::move(in), id);
  });
  EXPECT_EQ(direct.first, ckpt.first);
  for (std::size_t i = 0; i < direct.second.size(); ++i) {
    EXPECT_LE(max_abs_diff(direct.second[i], ckpt.second[i]), 1e-6f) << i;
  }
}

TEST(Decoder, OverfitsSingleExample) {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 32;
  cfg.d_ff = 64;
  const ModelParams p = ModelParams::init(cfg, 4);
  std::mt19937_64 rng(8);
  const auto ids = random_ids(rng, 8, cfg.vocab_size);
  auto target = random_ids(rng, 5, cfg.vocab_size);
  target.back() = Vocab::kEos;
  const std::vector<std::uint8_t> valid(8, 1);
  std::vector<Var> params;
  for (const auto& [name, v] : p.named()) params.push_back(v);
  Adam adam(params, AdamConfig{.lr = 3e-3f});
  float first = 0.0f;
  float last = 0.0f;
  for (int step = 0; step < 150; ++step) {
    const Var memory = encode_chunk(p, cfg, ids, valid, 0, {});
    const Var loss = decode_teacher_forced(p, cfg, memory, valid, target, {}).loss;
    if (step == 0) first = loss.value()[0];
    last = loss.value()[0];
    backward(loss);
    adam.step();
  }
  EXPECT_LT(last, 0.1f * first);

  const Var memory = encode_chunk(p, cfg, ids, valid, 0, {});
  const Generation g = generate(p, cfg, memory, valid, DecodeMode::greedy(), 10);
  EXPECT_EQ(g.ids, target);
}

TEST(Generate, FixedLogitsPickArgmaxThenEos) {
  const StepFn step = [](std::span<const int> prefix) {
    std::vector<float> lp(10, std::log(0.01f));
    lp[prefix.empty() ? 5 : Vocab::kEos] = std::log(0.91f);
    return lp;
  };
  const Generation g = generate(step, DecodeMode::greedy(), 8);
  EXPECT_EQ(g.ids, (std::vector<int>{5, Vocab::kEos}));
  EXPECT_FALSE(g.truncated);
  const Generation b = generate(step, DecodeMode::beam(4), 8);
  EXPECT_EQ(b.ids, (std::vector<int>{5, Vocab::kEos}));
}

TEST(Generate, TruncatedWithoutEos) {
  const StepFn step = [](std::span<const int>) {
    std::vector<float> lp(10, -5.0f);
    lp[7] = -0.1f;
    return lp;
  };
  const Generation g = generate(step, DecodeMode::greedy(), 4);
  EXPECT_EQ(g.ids, (std::vector<int>{7, 7, 7, 7}));
  EXPECT_TRUE(g.truncated);
}

TEST(Generate, LengthNormalizationPrefersBetterAveragePerToken) {
  // Short path sums to -0.9; the longer one sums to -1.2 but averages -0.6.
  const StepFn step = [](std::span<const int> prefix) {
    std::vector<float> lp(10, -20.0f);
    if (prefix.empty()) {
      lp[Vocab::kEos] = -0.9f;
      lp[8] = -0.6f;
    } else {
      lp[Vocab::kEos] = -0.6f;
    }
    return lp;
  };
  EXPECT_EQ(generate(step, DecodeMode::beam(2), 5).ids, (std::vector<int>{8, Vocab::kEos}));
}

TEST(Generate, BeamOfOneMatchesGreedyOnModel) {
  const ModelConfig cfg = tiny_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ModelParams p = ModelParams::init(cfg, seed);
    std::mt19937_64 rng(seed);
    const auto ids = random_ids(rng, 8, cfg.vocab_size);
    const std::vector<std::uint8_t> valid(8, 1);
    NoGradGuard ng;
    const Var memory = encode_chunk(p, cfg, ids, valid, 0, {});
    const Generation g = generate(p, cfg, memory, valid, DecodeMode::greedy(), 12);
    const Generation b = generate(p, cfg, memory, valid, DecodeMode::beam(1), 12);
    EXPECT_EQ(g.ids, b.ids);
    EXPECT_DOUBLE_EQ(g.log_prob, b.log_prob);
  }
}

TEST(Counters, AttentionEntriesPerChunk) {
  const ModelConfig cfg = tiny_config();
  const ModelParams p = ModelParams::init(cfg, 1);
  std::mt19937_64 rng(1);
  NoGradGuard ng;
  model_counters().reset();
  for (int i = 0; i < 3; ++i) {
    encode_chunk(p, cfg, random_ids(rng, 8, cfg.vocab_size), std::vector<std::uint8_t>(8, 1), i, {});
  }
  EXPECT_EQ(model_counters().encoder_attn_entries,
            std::int64_t(cfg.n_enc_layers) * cfg.n_heads * 3 * cfg.chunk_size * cfg.chunk_size);
  EXPECT_EQ(model_counters().encoder_block_runs.size(), 6u);
}

}  // namespace
}  // namespace d2d
