#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "doc2dict/autograd.hpp"
#include "doc2dict/tokenizer.hpp"
#include "doc2dict/transformer.hpp"

namespace d2d {

// m x c token matrix; row i holds chunk i, right-padded with pad ids.
struct ChunkBatch {
  std::vector<std::vector<int>> chunks;
  std::vector<std::vector<std::uint8_t>> pad_mask;  // 1 = real token
  std::size_t m = 0;
  std::size_t c = 0;
  bool truncated = false;
  std::size_t original_length = 0;
};

// Fixed-width windows with no overlap. Empty input yields one all-pad chunk;
// more than m_max chunks keeps the head.
inline ChunkBatch chunk_document(std::span<const int> tokens, std::size_t c, std::size_t m_max) {
  if (c < 1) throw ConfigError("chunk_document: chunk size must be >= 1");
  if (m_max < 1) throw ConfigError("chunk_document: m_max must be >= 1");
  ChunkBatch b;
  b.c = c;
  b.original_length = tokens.size();
  std::size_t m = tokens.empty() ? 1 : (tokens.size() + c - 1) / c;
  if (m > m_max) {
    m = m_max;
    b.truncated = true;
  }
  b.m = m;
  const std::size_t kept = std::min(tokens.size(), m * c);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<int> row(c, Vocab::kPad);
    std::vector<std::uint8_t> mask(c, 0);
    for (std::size_t j = 0; j < c && i * c + j < kept; ++j) {
      row[j] = tokens[i * c + j];
      mask[j] = 1;
    }
    b.chunks.push_back(std::move(row));
    b.pad_mask.push_back(std::move(mask));
  }
  return b;
}

inline ChunkBatch chunk_document(const TokenSeq& seq, std::size_t c, std::size_t m_max) {
  return chunk_document(std::span<const int>(seq.ids), c, m_max);
}

// Concatenation of the unpadded chunk contents.
inline std::vector<int> unchunk(const ChunkBatch& b) {
  std::vector<int> out;
  for (std::size_t i = 0; i < b.m; ++i) {
    for (std::size_t j = 0; j < b.c; ++j) {
      if (b.pad_mask[i][j]) out.push_back(b.chunks[i][j]);
    }
  }
  return out;
}

struct FusedMemory {
  Var memory;                        // [(m*c), d]
  std::vector<std::uint8_t> valid;  // m*c
};

inline FusedMemory fuse_encodings(std::span<const Var> encodings,
                                  std::span<const std::vector<std::uint8_t>> masks) {
  if (encodings.empty()) throw ShapeError("fuse_encodings: no chunk encodings");
  if (masks.size() != encodings.size()) throw ShapeError("fuse_encodings: mask count differs from chunk count");
  const Shape& first = encodings[0].shape();
  if (first.size() != 2) throw ShapeError("fuse_encodings: chunk encoding must be rank 2, got " + shape_str(first));
  FusedMemory f;
  for (std::size_t i = 0; i < encodings.size(); ++i) {
    if (encodings[i].shape() != first) {
      throw ShapeError("fuse_encodings: chunk " + std::to_string(i) + " has shape " +
                       shape_str(encodings[i].shape()) + ", expected " + shape_str(first));
    }
    if (masks[i].size() != first[0]) {
      throw ShapeError("fuse_encodings: mask " + std::to_string(i) + " length differs from chunk size");
    }
    f.valid.insert(f.valid.end(), masks[i].begin(), masks[i].end());
  }
  f.memory = encodings.size() == 1 ? encodings[0] : concat(encodings, 0);
  return f;
}

// Encodes every chunk independently and fuses them in chunk order.
inline FusedMemory encode_document(const ModelParams& params, const ModelConfig& cfg, const ChunkBatch& batch,
                                   const ForwardContext& ctx, const BlockRunner& runner = run_inline) {
  if (batch.c != static_cast<std::size_t>(cfg.chunk_size)) {
    throw ShapeError("encode_document: batch chunk size " + std::to_string(batch.c) + " differs from model chunk size " +
                     std::to_string(cfg.chunk_size));
  }
  std::vector<Var> enc;
  for (std::size_t i = 0; i < batch.m; ++i) {
    enc.push_back(encode_chunk(params, cfg, batch.chunks[i], batch.pad_mask[i], static_cast<int>(i), ctx, runner));
  }
  return fuse_encodings(enc, batch.pad_mask);
}

struct CostReport {
  std::size_t m = 0, c = 0, n_layers = 0, n_heads = 0, d_model = 0;
  std::uint64_t encoder_attn_entries = 0;  // n_layers * n_heads * m * c^2
  std::uint64_t dense_attn_entries = 0;    // n_layers * n_heads * (m*c)^2
  double ratio = 0.0;
  // Floating-point operations in QK^T and AV, summed over layers and heads.
  std::uint64_t encoder_attn_flops = 0;
  std::uint64_t dense_attn_flops = 0;

  std::string to_text() const {
    std::ostringstream os;
    os << "m=" << m << "\nc=" << c << "\nn_layers=" << n_layers << "\nn_heads=" << n_heads
       << "\nd_model=" << d_model << "\nencoder_attn_entries=" << encoder_attn_entries
       << "\ndense_attn_entries=" << dense_attn_entries << "\nratio=" << ratio
       << "\nencoder_attn_flops=" << encoder_attn_flops << "\ndense_attn_flops=" << dense_attn_flops << '\n';
    return os.str();
  }
};

inline CostReport attention_cost(std::size_t c, std::size_t m, std::size_t n_layers, std::size_t n_heads,
                                 std::size_t d_model) {
  if (m < 1) throw ConfigError("attention_cost: m must be >= 1");
  CostReport r{m, c, n_layers, n_heads, d_model};
  const std::uint64_t lh = n_layers * n_heads;
  r.encoder_attn_entries = lh * m * c * c;
  r.dense_attn_entries = lh * (m * c) * (m * c);
  r.ratio = static_cast<double>(r.dense_attn_entries) / static_cast<double>(r.encoder_attn_entries);
  // QK^T and AV each cost c^2 * d_head multiply-adds per head, 2 flops apiece.
  r.encoder_attn_flops = 4ull * n_layers * m * c * c * d_model;
  r.dense_attn_flops = 4ull * n_layers * (m * c) * (m * c) * d_model;
  return r;
}

inline CostReport attention_cost(const ModelConfig& cfg, std::size_t m) {
  return attention_cost(static_cast<std::size_t>(cfg.chunk_size), m, static_cast<std::size_t>(cfg.n_enc_layers),
                        static_cast<std::size_t>(cfg.n_heads), static_cast<std::size_t>(cfg.d_model));
}

}  // namespace d2d
