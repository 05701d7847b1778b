#include <gtest/gtest.h>

#include <random>

#include "doc2dict/chunked_fusion.hpp"

namespace d2d {
namespace {

std::vector<int> iota_ids(std::size_t n) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 24 + static_cast<int>(i % 90);
  return v;
}

TEST(ChunkDocument, CountsAndPadding) {
  const auto b = chunk_document(iota_ids(1025), 512, 64);
  EXPECT_EQ(b.m, 3u);
  EXPECT_FALSE(b.truncated);
  std::size_t pads = 0;
  for (auto v : b.pad_mask[2]) pads += v == 0;
  EXPECT_EQ(pads, 511u);
  EXPECT_EQ(b.chunks[2][1], Vocab::kPad);
}

TEST(ChunkDocument, EmptyGivesOneAllPadChunk) {
  const auto b = chunk_document(std::vector<int>{}, 8, 4);
  ASSERT_EQ(b.m, 1u);
  for (auto v : b.pad_mask[0]) EXPECT_EQ(v, 0);
}

TEST(ChunkDocument, TruncationKeepsHead) {
  const auto ids = iota_ids(40000);
  const auto b = chunk_document(ids, 512, 64);
  EXPECT_EQ(b.m, 64u);
  EXPECT_TRUE(b.truncated);
  const auto kept = unchunk(b);
  ASSERT_EQ(kept.size(), 32768u);
  EXPECT_TRUE(std::equal(kept.begin(), kept.end(), ids.begin()));
}

TEST(ChunkDocument, UnchunkIsLossless) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = 1 + rng() % 20;
    const auto ids = iota_ids(rng() % 200);
    const auto b = chunk_document(ids, c, 1000);
    EXPECT_FALSE(b.truncated);
    EXPECT_EQ(unchunk(b), ids);
    EXPECT_EQ(b.m, ids.empty() ? 1 : (ids.size() + c - 1) / c);
  }
  EXPECT_THROW(chunk_document(iota_ids(4), 0, 4), ConfigError);
}

ModelConfig small() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.d_ff = 32;
  cfg.chunk_size = 8;
  cfg.max_chunks = 4;
  cfg.max_target_len = 8;
  cfg.dropout = 0.0f;
  return cfg;
}

TEST(FuseEncodings, SingleChunkIsIdentity) {
  const Var a = constant(Tensor::filled({8, 16}, 0.5f));
  const std::vector<std::vector<std::uint8_t>> masks{std::vector<std::uint8_t>(8, 1)};
  const auto f = fuse_encodings(std::span<const Var>(&a, 1), masks);
  EXPECT_EQ(f.memory.value(), a.value());
  EXPECT_EQ(f.valid.size(), 8u);
}

TEST(FuseEncodings, ShapesChecked) {
  const std::vector<Var> encs{constant(Tensor::zeros({8, 16})), constant(Tensor::zeros({8, 12}))};
  const std::vector<std::vector<std::uint8_t>> masks(2, std::vector<std::uint8_t>(8, 1));
  EXPECT_THROW(fuse_encodings(encs, masks), ShapeError);
  const std::vector<Var> ok{constant(Tensor::zeros({8, 16})), constant(Tensor::zeros({8, 16}))};
  const auto f = fuse_encodings(ok, masks);
  EXPECT_EQ(f.memory.shape(), (Shape{16, 16}));
}

TEST(FuseEncodings, PaddedChunkGetsNoCrossAttention) {
  // Output is unchanged by the contents of a fully padded second chunk.
  const ModelConfig cfg = small();
  const ModelParams p = ModelParams::init(cfg, 2);
  NoGradGuard ng;
  const auto b = chunk_document(iota_ids(8), 8, 4);
  auto f1 = encode_document(p, cfg, b, {});
  const std::vector<int> target{30, 31, Vocab::kEos};
  const Tensor base = decode_teacher_forced(p, cfg, f1.memory, f1.valid, target, {}).logits.value();
  std::vector<Var> encs{f1.memory, constant(Tensor::filled({8, 16}, 3.0f))};
  std::vector<std::vector<std::uint8_t>> masks{b.pad_mask[0], std::vector<std::uint8_t>(8, 0)};
  const auto f2 = fuse_encodings(encs, masks);
  const Tensor with_pad = decode_teacher_forced(p, cfg, f2.memory, f2.valid, target, {}).logits.value();
  EXPECT_LT(max_abs_diff(base, with_pad), 1e-5f);
}

TEST(AttentionCost, ClosedForm) {
  const auto r = attention_cost(512, 64, 1, 1, 768);
  EXPECT_EQ(r.encoder_attn_entries, 16777216u);
  EXPECT_EQ(r.dense_attn_entries, 1073741824u);
  EXPECT_EQ(r.ratio, 64.0);
  EXPECT_EQ(attention_cost(16, 1, 2, 2, 8).ratio, 1.0);
  for (std::size_t m = 1; m <= 32; ++m) {
    EXPECT_EQ(attention_cost(16, 2 * m, 2, 4, 8).encoder_attn_entries,
              2 * attention_cost(16, m, 2, 4, 8).encoder_attn_entries);
  }
  EXPECT_NE(r.to_text().find("ratio=64\n"), std::string::npos);
}

TEST(AttentionCost, MatchesRuntimeAccountant) {
  ModelConfig cfg = small();
  cfg.n_enc_layers = 2;
  cfg.max_chunks = 8;
  const ModelParams p = ModelParams::init(cfg, 1);
  NoGradGuard ng;
  for (std::size_t m : {1u, 2u, 4u, 8u}) {
    model_counters().reset();
    encode_document(p, cfg, chunk_document(iota_ids(m * 8), 8, 8), {});
    EXPECT_EQ(static_cast<std::uint64_t>(model_counters().encoder_attn_entries),
              attention_cost(cfg, m).encoder_attn_entries);
  }
}

}  // namespace
}  // namespace d2d
