#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "doc2dict/autograd.hpp"
#include "doc2dict/chunked_fusion.hpp"
#include "doc2dict/transformer.hpp"

namespace d2d {

// Two schedules: `none` records the full graph; `fig2` keeps per-chunk encoder
// outputs and decoder inter-block activations, recomputes each decoder block
// during the decoder backward, then recomputes each chunk's encoder (caching
// its block boundaries) and finally each encoder block for its gradients.
struct CheckpointPlan {
  enum class Kind { none, fig2 } kind = Kind::none;
  int n_enc_layers = 0;
  int n_dec_layers = 0;
  std::size_t m = 0;

  static CheckpointPlan none(const ModelConfig& cfg, std::size_t m) {
    return {Kind::none, cfg.n_enc_layers, cfg.n_dec_layers, m};
  }
  static CheckpointPlan fig2(const ModelConfig& cfg, std::size_t m) {
    return {Kind::fig2, cfg.n_enc_layers, cfg.n_dec_layers, m};
  }

  // One segment per (chunk, encoder block), nested inside one per chunk.
  std::vector<std::uint32_t> encoder_boundaries() const {
    std::vector<std::uint32_t> ids;
    if (kind == Kind::none) return ids;
    for (std::size_t i = 0; i < m; ++i) {
      for (int l = 0; l < n_enc_layers; ++l) ids.push_back(encoder_block_segment(static_cast<int>(i), l));
    }
    return ids;
  }

  std::vector<std::uint32_t> decoder_boundaries() const {
    std::vector<std::uint32_t> ids;
    if (kind == Kind::none) return ids;
    for (int l = 0; l < n_dec_layers; ++l) ids.push_back(decoder_block_segment(l));
    return ids;
  }

  // Activations that persist from the first forward until backward.
  std::vector<std::string> cached_set() const {
    std::vector<std::string> out;
    if (kind == Kind::none) {
      out.push_back("all");
      return out;
    }
    for (std::size_t i = 0; i < m; ++i) out.push_back("encoder_output." + std::to_string(i));
    for (int l = 0; l < n_dec_layers; ++l) out.push_back("decoder_block_output." + std::to_string(l));
    return out;
  }

  void validate(const ModelConfig& cfg, std::size_t batch_m) const {
    if (n_enc_layers != cfg.n_enc_layers || n_dec_layers != cfg.n_dec_layers) {
      throw GraphError("checkpoint plan covers " + std::to_string(n_enc_layers) + "+" +
                       std::to_string(n_dec_layers) + " layers but the model has " +
                       std::to_string(cfg.n_enc_layers) + "+" + std::to_string(cfg.n_dec_layers));
    }
    if (m != batch_m) {
      throw GraphError("checkpoint plan covers " + std::to_string(m) + " chunks but the batch has " +
                       std::to_string(batch_m));
    }
    if (m < 1 || m > static_cast<std::size_t>(cfg.max_chunks)) {
      throw GraphError("checkpoint plan chunk count " + std::to_string(m) + " outside [1, m_max]");
    }
  }
};

struct MemoryTrace {
  std::int64_t peak_live = 0;      // peak simultaneously-live interior activation scalars
  std::int64_t op_executions = 0;  // op results computed, including recomputation
  std::size_t m = 0;

  std::string to_text() const {
    std::ostringstream os;
    os << "m=" << m << "\npeak_live_activations=" << peak_live << "\nop_executions=" << op_executions << '\n';
    return os.str();
  }
};

struct StepResult {
  float loss = 0.0f;
  std::vector<std::pair<std::string, Tensor>> grads;  // in ModelParams::named() order
  MemoryTrace trace;
  ModelCounters counters;
};

inline std::vector<Var> run_checkpointed(std::uint32_t id, ReplayFn block, std::vector<Var> inputs) {
  return checkpoint_segment(std::move(block), std::move(inputs), id);
}

// Forward and backward for one (document, target) pair. Gradients are left
// accumulated on the parameters and also copied into the result.
inline StepResult train_step(const ModelParams& params, const ModelConfig& cfg, const ChunkBatch& batch,
                             std::span<const int> target, const CheckpointPlan& plan, const ForwardContext& ctx,
                             bool copy_grads = true) {
  plan.validate(cfg, batch.m);
  auto& stats = activation_stats();
  const std::int64_t base_live = stats.live;
  const std::int64_t base_ops = stats.op_executions;
  stats.peak = stats.live;
  model_counters().reset();

  const bool ckpt = plan.kind == CheckpointPlan::Kind::fig2;
  const BlockRunner runner = ckpt ? BlockRunner(run_checkpointed) : BlockRunner(run_inline);
  StepResult r;
  {
    std::vector<Var> enc;
    for (std::size_t i = 0; i < batch.m; ++i) {
      const int ci = static_cast<int>(i);
      if (!ckpt) {
        enc.push_back(encode_chunk(params, cfg, batch.chunks[i], batch.pad_mask[i], ci, ctx));
        continue;
      }
      ReplayFn stack = [&params, &cfg, &batch, &runner, ctx, i, ci](std::span<const Var>) {
        return std::vector<Var>{encode_chunk(params, cfg, batch.chunks[i], batch.pad_mask[i], ci, ctx, runner)};
      };
      enc.push_back(checkpoint_segment(std::move(stack), {}, encoder_stack_segment(ci))[0]);
    }
    FusedMemory fused = fuse_encodings(enc, batch.pad_mask);
    enc.clear();
    Var loss = decode_teacher_forced(params, cfg, fused.memory, fused.valid, target, ctx, runner).loss;
    fused.memory = Var{};
    r.loss = loss.value()[0];
    backward(loss);
  }
  r.trace.peak_live = stats.peak - base_live;
  r.trace.op_executions = stats.op_executions - base_ops;
  r.trace.m = batch.m;
  r.counters = model_counters();
  for (const auto& [name, v] : copy_grads ? params.named() : decltype(params.named()){}) {
    r.grads.emplace_back(name, v.grad() ? *v.grad() : Tensor::zeros(v.shape()));
  }
  return r;
}

inline StepResult train_step_checkpointed(const ModelParams& params, const ModelConfig& cfg, const ChunkBatch& batch,
                                          std::span<const int> target, const ForwardContext& ctx) {
  return train_step(params, cfg, batch, target, CheckpointPlan::fig2(cfg, batch.m), ctx);
}

inline StepResult train_step_direct(const ModelParams& params, const ModelConfig& cfg, const ChunkBatch& batch,
                                    std::span<const int> target, const ForwardContext& ctx) {
  return train_step(params, cfg, batch, target, CheckpointPlan::none(cfg, batch.m), ctx);
}

struct PeakModel {
  std::int64_t encoder_phase = 0;  // while recomputing the first chunk's top encoder block
  std::int64_t decoder_phase = 0;  // while recomputing the top decoder block
  std::int64_t peak = 0;
};

// Closed-form peak of live interior activation scalars for one fig2 step over
// m full chunks (no padding) and a target of `target_len` tokens. Each term is
// an op result kept alive by the graph at the moment a block is replayed.
inline PeakModel peak_activation_model(const ModelConfig& cfg, std::size_t m, std::size_t target_len,
                                       bool dropout_active) {
  if (m < 1) throw ConfigError("peak_activation_model: m must be >= 1");
  const std::int64_t c = cfg.chunk_size, d = cfg.d_model, h = cfg.n_heads, f = cfg.d_ff;
  const std::int64_t T = static_cast<std::int64_t>(target_len);
  const std::int64_t M = static_cast<std::int64_t>(m) * c;
  const std::int64_t s = c * d;
  const std::int64_t drop = dropout_active ? 1 : 0;
  const std::int64_t cat = h > 1 ? 1 : 0;

  // Encoder block: 2 layer norms (3 results each), q/k/v, per-head slices,
  // transposed keys, head outputs, head concat, output projection, residual
  // adds, FFN output; scores/scaled/softmax per head; FFN hidden and gelu.
  const std::int64_t enc_block = (18 + cat + 2 * drop) * s + 2 * c * f + 3 * h * c * c;
  // Decoder block: as above for self and cross attention plus a third norm.
  // Cross attention adds keys/values of the memory, their slices and the
  // transposed keys (5 M d) and T x M score matrices.
  const std::int64_t dec_block = (26 + 2 * cat + 3 * drop) * T * d + 4 * h * T * T + 2 * T * f + 5 * M * d +
                                 3 * h * T * M;
  // Decoder input embedding chain (lookup, positions, sum, dropout) and loss.
  const std::int64_t dec_inputs = (3 + drop) * T * d + 1;

  PeakModel pm;
  // Cached chunk outputs, the fused memory (a copy only when m > 1), the
  // decoder inputs and lower decoder block outputs, then one block's graph.
  pm.decoder_phase = static_cast<std::int64_t>(m) * s + (m > 1 ? M * d : 0) + dec_inputs +
                     (cfg.n_dec_layers - 1) * T * d + dec_block;
  // Outputs of the other chunks still cached, the decoder inputs, then the
  // chunk's recorded embedding chain, lower block outputs, the chunk output
  // held as the backward root, and one block's graph.
  pm.encoder_phase = static_cast<std::int64_t>(m - 1) * s + dec_inputs + (2 + drop) * s +
                     (cfg.n_enc_layers - 1) * s + s + enc_block;
  pm.peak = std::max(pm.encoder_phase, pm.decoder_phase);
  return pm;
}

// Forward executions per block in one training step.
struct PassReport {
  int full_forward = 1;
  int decoder_recompute = 0;
  int encoder_recompute = 0;       // per chunk, caching block boundaries
  int encoder_block_gradient = 0;  // per encoder block
  int encoder_block_forwards = 1;
  int decoder_block_forwards = 1;
};

inline PassReport recompute_passes(const CheckpointPlan& plan) {
  PassReport p;
  if (plan.kind == CheckpointPlan::Kind::fig2) {
    p.decoder_recompute = 1;
    p.encoder_recompute = 1;
    p.encoder_block_gradient = 1;
    p.encoder_block_forwards = p.full_forward + p.encoder_recompute + p.encoder_block_gradient;
    p.decoder_block_forwards = p.full_forward + p.decoder_recompute;
  }
  return p;
}

}  // namespace d2d
