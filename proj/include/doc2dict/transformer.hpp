#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "doc2dict/autograd.hpp"
#include "doc2dict/rng.hpp"
#include "doc2dict/tokenizer.hpp"

namespace d2d {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ff = 512;
  int vocab_size = Vocab::kCoverageMinimum;
  int chunk_size = 64;      // c
  int max_chunks = 4;       // m_max
  int max_target_len = 128;
  float dropout = 0.1f;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) throw ConfigError(std::string("invalid model config: ") + what);
    };
    require(d_model > 0 && n_heads > 0, "d_model and n_heads must be positive");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    require(n_enc_layers >= 1 && n_dec_layers >= 1, "layer counts must be >= 1");
    require(d_ff > 0, "d_ff must be positive");
    require(vocab_size >= Vocab::kCoverageMinimum, "vocab_size below character coverage");
    require(chunk_size >= 1, "chunk_size must be >= 1");
    require(max_chunks >= 1, "max_chunks must be >= 1");
    require(max_target_len >= 1, "max_target_len must be >= 1");
    require(dropout >= 0.0f && dropout < 1.0f, "dropout must be in [0,1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct AttentionParams {
  Var wq, wk, wv, wo;
};

struct FeedForwardParams {
  Var w1, w2;
};

struct LayerNormParams {
  Var gain, bias;
};

struct EncoderLayerParams {
  LayerNormParams ln_attn;
  AttentionParams self_attn;
  LayerNormParams ln_ffn;
  FeedForwardParams ffn;
};

struct DecoderLayerParams {
  LayerNormParams ln_self;
  AttentionParams self_attn;
  LayerNormParams ln_cross;
  AttentionParams cross_attn;
  LayerNormParams ln_ffn;
  FeedForwardParams ffn;
};

struct ModelParams {
  Var token_embedding;   // [vocab, d]; also the tied output projection
  Var encoder_position;  // [c, d]
  Var chunk_embedding;   // [m_max, d]
  Var decoder_position;  // [max_target_len, d]
  std::vector<EncoderLayerParams> encoder;
  LayerNormParams encoder_final;
  std::vector<DecoderLayerParams> decoder;
  LayerNormParams decoder_final;

  // Stable (name, tensor) listing used by persistence and optimizers.
  std::vector<std::pair<std::string, Var>> named() const {
    std::vector<std::pair<std::string, Var>> out;
    auto attn = [&out](const std::string& p, const AttentionParams& a) {
      out.emplace_back(p + ".wq", a.wq);
      out.emplace_back(p + ".wk", a.wk);
      out.emplace_back(p + ".wv", a.wv);
      out.emplace_back(p + ".wo", a.wo);
    };
    auto ln = [&out](const std::string& p, const LayerNormParams& l) {
      out.emplace_back(p + ".gain", l.gain);
      out.emplace_back(p + ".bias", l.bias);
    };
    auto ffn = [&out](const std::string& p, const FeedForwardParams& f) {
      out.emplace_back(p + ".w1", f.w1);
      out.emplace_back(p + ".w2", f.w2);
    };
    out.emplace_back("token_embedding", token_embedding);
    out.emplace_back("encoder_position", encoder_position);
    out.emplace_back("chunk_embedding", chunk_embedding);
    out.emplace_back("decoder_position", decoder_position);
    for (std::size_t l = 0; l < encoder.size(); ++l) {
      const std::string p = "encoder." + std::to_string(l);
      ln(p + ".ln_attn", encoder[l].ln_attn);
      attn(p + ".self_attn", encoder[l].self_attn);
      ln(p + ".ln_ffn", encoder[l].ln_ffn);
      ffn(p + ".ffn", encoder[l].ffn);
    }
    ln("encoder.final", encoder_final);
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      const std::string p = "decoder." + std::to_string(l);
      ln(p + ".ln_self", decoder[l].ln_self);
      attn(p + ".self_attn", decoder[l].self_attn);
      ln(p + ".ln_cross", decoder[l].ln_cross);
      attn(p + ".cross_attn", decoder[l].cross_attn);
      ln(p + ".ln_ffn", decoder[l].ln_ffn);
      ffn(p + ".ffn", decoder[l].ffn);
    }
    ln("decoder.final", decoder_final);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : named()) n += v.size();
    return n;
  }

  void zero_grad() const {
    for (const auto& [name, v] : named()) v.zero_grad();
  }

  // Gaussian(0, 0.02) weights, unit gains, zero biases.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 0.02f);
    auto weight = [&](std::size_t r, std::size_t c) {
      std::vector<float> v(r * c);
      for (float& x : v) x = normal(rng);
      return parameter(Tensor({r, c}, std::move(v)));
    };
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto ff = static_cast<std::size_t>(cfg.d_ff);
    // Position tables start as sinusoids with the same RMS as the Gaussian
    // weights, then train like any other table.
    auto positions = [&](std::size_t rows) {
      const float amp = 0.02f;
      std::vector<float> v(rows * d);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < d; i += 2) {
          const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
          v[r * d + i] = amp * static_cast<float>(std::sin(static_cast<double>(r) * freq));
          if (i + 1 < d) v[r * d + i + 1] = amp * static_cast<float>(std::cos(static_cast<double>(r) * freq));
        }
      }
      return parameter(Tensor({rows, d}, std::move(v)));
    };
    auto ln = [d] { return LayerNormParams{parameter(Tensor::filled({d}, 1.0f)), parameter(Tensor::zeros({d}))}; };
    auto attn = [&] { return AttentionParams{weight(d, d), weight(d, d), weight(d, d), weight(d, d)}; };
    auto ffn = [&] { return FeedForwardParams{weight(d, ff), weight(ff, d)}; };

    ModelParams p;
    p.token_embedding = weight(static_cast<std::size_t>(cfg.vocab_size), d);
    p.encoder_position = positions(static_cast<std::size_t>(cfg.chunk_size));
    p.chunk_embedding = weight(static_cast<std::size_t>(cfg.max_chunks), d);
    p.decoder_position = positions(static_cast<std::size_t>(cfg.max_target_len));
    for (int l = 0; l < cfg.n_enc_layers; ++l) {
      EncoderLayerParams e;
      e.ln_attn = ln();
      e.self_attn = attn();
      e.ln_ffn = ln();
      e.ffn = ffn();
      p.encoder.push_back(std::move(e));
    }
    p.encoder_final = ln();
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
      DecoderLayerParams dl;
      dl.ln_self = ln();
      dl.self_attn = attn();
      dl.ln_cross = ln();
      dl.cross_attn = attn();
      dl.ln_ffn = ln();
      dl.ffn = ffn();
      p.decoder.push_back(std::move(dl));
    }
    p.decoder_final = ln();
    return p;
  }
};

// Runtime instrumentation: block executions and attention-score entries.
struct ModelCounters {
  std::map<std::pair<int, int>, int> encoder_block_runs;  // (chunk, layer)
  std::map<int, int> decoder_block_runs;                  // layer
  std::int64_t encoder_attn_entries = 0;
  std::int64_t decoder_self_attn_entries = 0;
  std::int64_t cross_attn_entries = 0;

  void reset() { *this = ModelCounters{}; }
};

inline ModelCounters& model_counters() {
  thread_local ModelCounters counters;
  return counters;
}

struct ForwardContext {
  bool training = false;
  float dropout = 0.0f;
  std::uint64_t step_key = 0;  // dropout masks are a pure function of (step_key, site)
};

namespace detail {

enum class AttnKind { encoder_self, decoder_self, cross };

constexpr float kMaskedLogit = -1e9f;

inline Var dropout(const Var& x, const ForwardContext& ctx, std::uint64_t site) {
  if (!ctx.training || ctx.dropout <= 0.0f) return x;
  const std::uint64_t key = mix_seed({ctx.step_key, site});
  const float keep = 1.0f - ctx.dropout;
  Tensor mask = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = counter_uniform(key, i) < keep ? 1.0f / keep : 0.0f;
  }
  return mul(x, constant(std::move(mask)));
}

inline Var apply_layer_norm(const Var& x, const LayerNormParams& p) {
  return add(mul(layer_norm(x, -1), p.gain), p.bias);
}

// Multi-head attention of q [T,d] over k,v [S,d]; bias broadcasts over rows
// ([S]) or is full ([T,S]).
inline Var attend(const Var& q, const Var& k, const Var& v, const Var* bias, const ModelConfig& cfg,
                  AttnKind kind) {
  const auto h = static_cast<std::size_t>(cfg.n_heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  const std::int64_t entries = static_cast<std::int64_t>(q.shape()[0] * k.shape()[0]);
  auto& counters = model_counters();
  std::vector<Var> heads;
  heads.reserve(h);
  for (std::size_t i = 0; i < h; ++i) {
    Var qh = slice(q, 1, i * dh, (i + 1) * dh);
    Var kh = slice(k, 1, i * dh, (i + 1) * dh);
    Var vh = slice(v, 1, i * dh, (i + 1) * dh);
    Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (bias) scores = add(scores, *bias);
    switch (kind) {
      case AttnKind::encoder_self: counters.encoder_attn_entries += entries; break;
      case AttnKind::decoder_self: counters.decoder_self_attn_entries += entries; break;
      case AttnKind::cross: counters.cross_attn_entries += entries; break;
    }
    heads.push_back(matmul(softmax(scores, -1), vh));
  }
  return h == 1 ? heads[0] : concat(std::span<const Var>(heads), 1);
}

inline Var self_attention(const AttentionParams& p, const Var& x, const Var* bias, const ModelConfig& cfg,
                          AttnKind kind) {
  return matmul(attend(matmul(x, p.wq), matmul(x, p.wk), matmul(x, p.wv), bias, cfg, kind), p.wo);
}

inline Var feed_forward(const FeedForwardParams& p, const Var& x) {
  return matmul(gelu(matmul(x, p.w1)), p.w2);
}

inline std::uint64_t site_id(int kind, int a, int b, int c) {
  return (std::uint64_t(kind) << 48) | (std::uint64_t(std::uint16_t(a)) << 32) |
         (std::uint64_t(std::uint16_t(b)) << 16) | std::uint64_t(std::uint16_t(c));
}

// Key bias row: 0 for valid keys, a large negative logit for padding.
inline Var key_bias(std::span<const std::uint8_t> valid) {
  std::vector<float> b(valid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) b[i] = valid[i] ? 0.0f : kMaskedLogit;
  return constant(Tensor({valid.size()}, std::move(b)));
}

inline Var causal_bias(std::size_t t) {
  Tensor b = Tensor::zeros({t, t});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) b[i * t + j] = kMaskedLogit;
  }
  return constant(std::move(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder

// One pre-layer-norm encoder block over a single chunk.
inline Var encoder_block(const EncoderLayerParams& p, const ModelConfig& cfg, const Var& x,
                         const Var* bias, const ForwardContext& ctx, int chunk, int layer) {
  ++model_counters().encoder_block_runs[{chunk, layer}];
  Var a = detail::self_attention(p.self_attn, detail::apply_layer_norm(x, p.ln_attn), bias, cfg,
                                 detail::AttnKind::encoder_self);
  Var h = add(x, detail::dropout(a, ctx, detail::site_id(1, chunk, layer, 0)));
  Var f = detail::feed_forward(p.ffn, detail::apply_layer_norm(h, p.ln_ffn));
  return add(h, detail::dropout(f, ctx, detail::site_id(1, chunk, layer, 1)));
}

// Wraps one block evaluation; the default runs it inline.
using BlockRunner =
    std::function<std::vector<Var>(std::uint32_t segment_id, ReplayFn block, std::vector<Var> inputs)>;

inline std::vector<Var> run_inline(std::uint32_t, ReplayFn block, std::vector<Var> inputs) {
  return block(inputs);
}

inline std::uint32_t encoder_stack_segment(int chunk) { return 0x100000u + static_cast<std::uint32_t>(chunk); }
inline std::uint32_t encoder_block_segment(int chunk, int layer) {
  return 0x200000u + static_cast<std::uint32_t>(chunk) * 256u + static_cast<std::uint32_t>(layer);
}
inline std::uint32_t decoder_block_segment(int layer) { return 0x300000u + static_cast<std::uint32_t>(layer); }

// Encodes one chunk of at most c ids (right-padded internally). Attention is
// dense within the chunk only; padded rows of the result are exactly zero.
// The chunk-index embedding is added after the final layer norm.
inline Var encode_chunk(const ModelParams& params, const ModelConfig& cfg, std::span<const int> ids,
                        std::span<const std::uint8_t> valid, int chunk_index, const ForwardContext& ctx,
                        const BlockRunner& runner = run_inline) {
  const auto c = static_cast<std::size_t>(cfg.chunk_size);
  if (ids.size() > c) {
    throw ShapeError("encode_chunk: chunk of " + std::to_string(ids.size()) + " tokens exceeds chunk size " +
                     std::to_string(c));
  }
  if (valid.size() != ids.size()) throw ShapeError("encode_chunk: pad mask length differs from chunk length");
  if (chunk_index < 0 || chunk_index >= cfg.max_chunks) {
    throw ShapeError("encode_chunk: chunk index " + std::to_string(chunk_index) + " outside [0, m_max)");
  }
  std::vector<int> padded(c, Vocab::kPad);
  std::vector<std::uint8_t> mask(c, 0);
  std::copy(ids.begin(), ids.end(), padded.begin());
  std::copy(valid.begin(), valid.end(), mask.begin());

  const bool any_pad = std::find(mask.begin(), mask.end(), 0) != mask.end();
  const Var bias = detail::key_bias(mask);
  Var x = add(embedding_lookup(params.token_embedding, padded), params.encoder_position);
  x = detail::dropout(x, ctx, detail::site_id(0, chunk_index, 0, 0));
  for (int l = 0; l < cfg.n_enc_layers; ++l) {
    const EncoderLayerParams& layer = params.encoder[static_cast<std::size_t>(l)];
    ReplayFn block = [&layer, &cfg, bias, any_pad, ctx, chunk_index, l](std::span<const Var> in) {
      return std::vector<Var>{encoder_block(layer, cfg, in[0], any_pad ? &bias : nullptr, ctx, chunk_index, l)};
    };
    x = runner(encoder_block_segment(chunk_index, l), std::move(block), {x})[0];
  }
  x = detail::apply_layer_norm(x, params.encoder_final);
  x = add(x, embedding_lookup(params.chunk_embedding, std::vector<int>(c, chunk_index)));
  if (any_pad) {
    Tensor keep = Tensor::zeros({c, static_cast<std::size_t>(cfg.d_model)});
    for (std::size_t r = 0; r < c; ++r) {
      if (mask[r]) std::fill_n(keep.ptr() + r * keep.cols(), keep.cols(), 1.0f);
    }
    x = mul(x, constant(std::move(keep)));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Decoder

struct CrossKV {
  Var k, v;
};

inline CrossKV cross_kv(const DecoderLayerParams& p, const Var& memory) {
  return {matmul(memory, p.cross_attn.wk), matmul(memory, p.cross_attn.wv)};
}

inline Var decoder_block(const DecoderLayerParams& p, const ModelConfig& cfg, const Var& x, const CrossKV& kv,
                         const Var* cross_bias, const Var& causal, const ForwardContext& ctx, int layer) {
  ++model_counters().decoder_block_runs[layer];
  Var a = detail::self_attention(p.self_attn, detail::apply_layer_norm(x, p.ln_self), &causal, cfg,
                                 detail::AttnKind::decoder_self);
  Var h = add(x, detail::dropout(a, ctx, detail::site_id(2, 0, layer, 0)));
  Var q = matmul(detail::apply_layer_norm(h, p.ln_cross), p.cross_attn.wq);
  Var cr = matmul(detail::attend(q, kv.k, kv.v, cross_bias, cfg, detail::AttnKind::cross), p.cross_attn.wo);
  h = add(h, detail::dropout(cr, ctx, detail::site_id(2, 0, layer, 1)));
  Var f = detail::feed_forward(p.ffn, detail::apply_layer_norm(h, p.ln_ffn));
  return add(h, detail::dropout(f, ctx, detail::site_id(2, 0, layer, 2)));
}

inline Var decoder_inputs(const ModelParams& params, std::span<const int> input_ids, const ForwardContext& ctx) {
  Var x = add(embedding_lookup(params.token_embedding, input_ids),
              slice(params.decoder_position, 0, 0, input_ids.size()));
  return detail::dropout(x, ctx, detail::site_id(2, 0, 0xffff, 0));
}

inline Var output_logits(const ModelParams& params, const Var& hidden) {
  return matmul(detail::apply_layer_norm(hidden, params.decoder_final), transpose(params.token_embedding));
}

struct DecodeOutput {
  Var loss;
  Var logits;
};

// Teacher-forced decoder pass. `target` ends with eos; the decoder input is
// bos followed by target[0..n-2]. Loss is mean cross-entropy ignoring pad.
inline DecodeOutput decode_teacher_forced(const ModelParams& params, const ModelConfig& cfg, const Var& memory,
                                          std::span<const std::uint8_t> memory_valid,
                                          std::span<const int> target, const ForwardContext& ctx,
                                          const BlockRunner& runner = run_inline) {
  if (!memory || memory.shape().empty() || memory.shape()[0] == 0) {
    throw ShapeError("decode_teacher_forced: empty memory");
  }
  if (memory.shape().size() != 2 || memory.shape()[1] != static_cast<std::size_t>(cfg.d_model)) {
    throw ShapeError("decode_teacher_forced: memory shape " + shape_str(memory.shape()));
  }
  if (memory_valid.size() != memory.shape()[0]) {
    throw ShapeError("decode_teacher_forced: validity mask length differs from memory rows");
  }
  if (target.empty()) throw ShapeError("decode_teacher_forced: empty target");
  if (target.size() > static_cast<std::size_t>(cfg.max_target_len)) {
    throw ShapeError("decode_teacher_forced: target length " + std::to_string(target.size()) +
                     " exceeds max_target_len " + std::to_string(cfg.max_target_len));
  }
  std::vector<int> inputs;
  inputs.reserve(target.size());
  inputs.push_back(Vocab::kBos);
  inputs.insert(inputs.end(), target.begin(), target.end() - 1);

  const bool any_pad = std::find(memory_valid.begin(), memory_valid.end(), 0) != memory_valid.end();
  const Var cross_bias = detail::key_bias(memory_valid);
  const Var causal = detail::causal_bias(inputs.size());
  Var x = decoder_inputs(params, inputs, ctx);
  for (int l = 0; l < cfg.n_dec_layers; ++l) {
    const DecoderLayerParams& layer = params.decoder[static_cast<std::size_t>(l)];
    ReplayFn block = [&layer, &cfg, cross_bias, causal, any_pad, ctx, l](std::span<const Var> in) {
      return std::vector<Var>{decoder_block(layer, cfg, in[0], cross_kv(layer, in[1]),
                                            any_pad ? &cross_bias : nullptr, causal, ctx, l)};
    };
    x = runner(decoder_block_segment(l), std::move(block), {x, memory})[0];
  }
  Var logits = output_logits(params, x);
  Var loss = cross_entropy(logits, target, Vocab::kPad);
  return {loss, logits};
}

// ---------------------------------------------------------------------------
// Generation

struct DecodeMode {
  enum class Kind { greedy, beam } kind = Kind::greedy;
  int beam_size = 1;

  static DecodeMode greedy() { return {}; }
  static DecodeMode beam(int k) { return {Kind::beam, k}; }
};

struct Generation {
  std::vector<int> ids;    // generated tokens, eos included when reached
  double log_prob = 0.0;   // sum of token log-probabilities
  double score = 0.0;      // log_prob / ids.size()
  bool truncated = false;  // max_len reached without eos
};

// Next-token log-probabilities given the tokens generated so far.
using StepFn = std::function<std::vector<float>(std::span<const int> prefix)>;

namespace detail {

inline std::vector<int> top_k(const std::vector<float>& lp, int k) {
  std::vector<int> idx(lp.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(),
                    [&lp](int a, int b) { return lp[a] > lp[b] || (lp[a] == lp[b] && a < b); });
  idx.resize(kk);
  return idx;
}

inline Generation finish(std::vector<int> ids, double lp, bool truncated) {
  Generation g;
  g.score = ids.empty() ? lp : lp / static_cast<double>(ids.size());
  g.ids = std::move(ids);
  g.log_prob = lp;
  g.truncated = truncated;
  return g;
}

}  // namespace detail

// Greedy argmax, or length-normalized beam search with k hypotheses. Beams
// are pruned by summed log-probability; the result maximizes log_prob/length.
inline Generation generate(const StepFn& step, DecodeMode mode, int max_len, int eos = Vocab::kEos) {
  if (max_len < 1) throw ConfigError("generate: max_len must be >= 1");
  const int k = mode.kind == DecodeMode::Kind::greedy ? 1 : mode.beam_size;
  if (k < 1) throw ConfigError("generate: beam size must be >= 1");

  struct Hyp {
    std::vector<int> ids;
    double lp = 0.0;
  };
  std::vector<Hyp> beams{Hyp{}};
  std::vector<Generation> finished;
  for (int t = 0; t < max_len && !beams.empty(); ++t) {
    std::vector<Hyp> cands;
    for (const Hyp& b : beams) {
      const std::vector<float> lp = step(b.ids);
      for (int tok : detail::top_k(lp, k)) {
        Hyp h{b.ids, b.lp + lp[static_cast<std::size_t>(tok)]};
        h.ids.push_back(tok);
        cands.push_back(std::move(h));
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Hyp& a, const Hyp& b) { return a.lp > b.lp; });
    beams.clear();
    for (std::size_t r = 0; r < cands.size() && beams.size() < static_cast<std::size_t>(k); ++r) {
      if (cands[r].ids.back() == eos) {
        if (r < static_cast<std::size_t>(k)) finished.push_back(detail::finish(cands[r].ids, cands[r].lp, false));
      } else {
        beams.push_back(std::move(cands[r]));
      }
    }
    if (finished.size() >= static_cast<std::size_t>(k)) break;
  }
  if (finished.empty()) {
    for (const Hyp& b : beams) finished.push_back(detail::finish(b.ids, b.lp, true));
  }
  return *std::max_element(finished.begin(), finished.end(),
                           [](const Generation& a, const Generation& b) { return a.score < b.score; });
}

// Model-backed generation over a fused memory; cross-attention keys and values
// are computed once per call.
inline Generation generate(const ModelParams& params, const ModelConfig& cfg, const Var& memory,
                           std::span<const std::uint8_t> memory_valid, DecodeMode mode, int max_len) {
  if (max_len > cfg.max_target_len) max_len = cfg.max_target_len;
  NoGradGuard no_grad;
  const ForwardContext ctx{};
  const bool any_pad = std::find(memory_valid.begin(), memory_valid.end(), 0) != memory_valid.end();
  const Var cross_bias = detail::key_bias(memory_valid);
  std::vector<CrossKV> kv;
  for (const auto& layer : params.decoder) kv.push_back(cross_kv(layer, memory));
  const Var emb_t = transpose(params.token_embedding);

  StepFn step = [&](std::span<const int> prefix) {
    std::vector<int> inputs{Vocab::kBos};
    inputs.insert(inputs.end(), prefix.begin(), prefix.end());
    const Var causal = detail::causal_bias(inputs.size());
    Var x = decoder_inputs(params, inputs, ctx);
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
      x = decoder_block(params.decoder[static_cast<std::size_t>(l)], cfg, x, kv[static_cast<std::size_t>(l)],
                        any_pad ? &cross_bias : nullptr, causal, ctx, l);
    }
    Var last = slice(x, 0, inputs.size() - 1, inputs.size());
    const Tensor logits = matmul(detail::apply_layer_norm(last, params.decoder_final), emb_t).value();
    std::vector<float> lp(logits.data().begin(), logits.data().end());
    const float mx = *std::max_element(lp.begin(), lp.end());
    double total = 0.0;
    for (float v : lp) total += std::exp(static_cast<double>(v - mx));
    const float lse = mx + static_cast<float>(std::log(total));
    for (float& v : lp) v -= lse;
    // Never emit padding, bos or unk.
    lp[Vocab::kPad] = lp[Vocab::kBos] = lp[Vocab::kUnk] = -1e30f;
    return lp;
  };
  return generate(step, mode, max_len);
}

}  // namespace d2d
