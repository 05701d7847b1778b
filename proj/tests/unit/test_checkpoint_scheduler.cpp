#include <gtest/gtest.h>

#include <random>

#include "doc2dict/checkpoint_scheduler.hpp"

namespace d2d {
namespace {

ModelConfig config(int d, std::size_t m_max) {
  ModelConfig cfg;
  cfg.d_model = d;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 2;
  cfg.d_ff = 2 * d;
  cfg.chunk_size = 16;
  cfg.max_chunks = static_cast<int>(m_max);
  cfg.max_target_len = 12;
  cfg.dropout = 0.1f;
  return cfg;
}

struct Example {
  ChunkBatch batch;
  std::vector<int> target;
};

Example make_example(std::mt19937_64& rng, const ModelConfig& cfg, std::size_t m) {
  std::uniform_int_distribution<int> tok(Vocab::kFirstLearned, cfg.vocab_size - 1);
  std::vector<int> ids(m * static_cast<std::size_t>(cfg.chunk_size));
  for (int& t : ids) t = tok(rng);
  std::vector<int> target(static_cast<std::size_t>(cfg.max_target_len));
  for (int& t : target) t = tok(rng);
  target.back() = Vocab::kEos;
  return {chunk_document(ids, static_cast<std::size_t>(cfg.chunk_size), m), target};
}

float max_grad_diff(const StepResult& a, const StepResult& b) {
  float d = 0.0f;
  for (std::size_t i = 0; i < a.grads.size(); ++i) d = std::max(d, max_abs_diff(a.grads[i].second, b.grads[i].second));
  return d;
}

TEST(Scheduler, GradientsMatchDirect) {
  const ModelConfig cfg = config(32, 4);
  std::mt19937_64 rng(1);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const ModelParams p = ModelParams::init(cfg, seed);
    const Example ex = make_example(rng, cfg, 4);
    const ForwardContext ctx{true, 0.1f, seed};
    const StepResult ck = train_step_checkpointed(p, cfg, ex.batch, ex.target, ctx);
    p.zero_grad();
    const StepResult dir = train_step_direct(p, cfg, ex.batch, ex.target, ctx);
    p.zero_grad();
    EXPECT_EQ(ck.loss, dir.loss);
    EXPECT_LE(max_grad_diff(ck, dir), 1e-5f);
    EXPECT_LT(ck.trace.peak_live, dir.trace.peak_live);
    EXPECT_GT(ck.trace.op_executions, dir.trace.op_executions);
  }
}

TEST(Scheduler, SingleChunkDegenerates) {
  const ModelConfig cfg = config(32, 1);
  std::mt19937_64 rng(2);
  const ModelParams p = ModelParams::init(cfg, 3);
  const Example ex = make_example(rng, cfg, 1);
  const StepResult ck = train_step_checkpointed(p, cfg, ex.batch, ex.target, {});
  p.zero_grad();
  const StepResult dir = train_step_direct(p, cfg, ex.batch, ex.target, {});
  EXPECT_LE(max_grad_diff(ck, dir), 1e-5f);
}

TEST(Scheduler, BlockForwardCounts) {
  const ModelConfig cfg = config(32, 4);
  std::mt19937_64 rng(3);
  const ModelParams p = ModelParams::init(cfg, 1);
  const Example ex = make_example(rng, cfg, 3);
  const auto plan = CheckpointPlan::fig2(cfg, 3);
  const PassReport expected = recompute_passes(plan);
  EXPECT_EQ(expected.encoder_block_forwards, 3);
  EXPECT_EQ(expected.decoder_block_forwards, 2);
  const StepResult ck = train_step(p, cfg, ex.batch, ex.target, plan, {});
  ASSERT_EQ(ck.counters.encoder_block_runs.size(), 6u);
  for (const auto& [key, n] : ck.counters.encoder_block_runs) EXPECT_EQ(n, 3);
  for (const auto& [key, n] : ck.counters.decoder_block_runs) EXPECT_EQ(n, 2);
  p.zero_grad();

  const StepResult dir = train_step(p, cfg, ex.batch, ex.target, CheckpointPlan::none(cfg, 3), {});
  EXPECT_EQ(recompute_passes(CheckpointPlan::none(cfg, 3)).encoder_block_forwards, 1);
  for (const auto& [key, n] : dir.counters.encoder_block_runs) EXPECT_EQ(n, 1);
  for (const auto& [key, n] : dir.counters.decoder_block_runs) EXPECT_EQ(n, 1);
}

TEST(Scheduler, PlanMismatchRejected) {
  const ModelConfig cfg = config(32, 4);
  std::mt19937_64 rng(4);
  const ModelParams p = ModelParams::init(cfg, 1);
  const Example ex = make_example(rng, cfg, 2);
  EXPECT_THROW(train_step(p, cfg, ex.batch, ex.target, CheckpointPlan::fig2(cfg, 3), {}), GraphError);
  ModelConfig other = cfg;
  other.n_enc_layers = 3;
  EXPECT_THROW(train_step(p, cfg, ex.batch, ex.target, CheckpointPlan::fig2(other, 2), {}), GraphError);
}

TEST(Scheduler, PlanDescribesSegments) {
  const ModelConfig cfg = config(32, 4);
  const auto plan = CheckpointPlan::fig2(cfg, 4);
  EXPECT_EQ(plan.encoder_boundaries().size(), 8u);
  EXPECT_EQ(plan.decoder_boundaries().size(), 2u);
  EXPECT_EQ(plan.cached_set().size(), 6u);
  EXPECT_TRUE(CheckpointPlan::none(cfg, 4).encoder_boundaries().empty());
}

TEST(PeakModel, MatchesMeasuredPeak) {
  for (int d : {32, 48}) {
    const ModelConfig cfg = config(d, 8);
    const ModelParams p = ModelParams::init(cfg, 5);
    std::mt19937_64 rng(5);
    for (std::size_t m : {1u, 2u, 4u, 8u}) {
      const Example ex = make_example(rng, cfg, m);
      const StepResult ck = train_step_checkpointed(p, cfg, ex.batch, ex.target, {true, 0.1f, 1});
      p.zero_grad();
      EXPECT_EQ(ck.trace.peak_live, peak_activation_model(cfg, m, ex.target.size(), true).peak) << "d=" << d << " m=" << m;
    }
  }
}

TEST(PeakModel, LinearInM) {
  const ModelConfig cfg = config(64, 64);
  for (std::size_t m = 2; m <= 16; ++m) {
    const auto a = peak_activation_model(cfg, m, 12, true);
    const auto b = peak_activation_model(cfg, 2 * m, 12, true);
    const auto a1 = peak_activation_model(cfg, m + 1, 12, true);
    EXPECT_EQ(b.decoder_phase - a.decoder_phase, static_cast<std::int64_t>(m) * (a1.decoder_phase - a.decoder_phase));
  }
}

}  // namespace
}  // namespace d2d
