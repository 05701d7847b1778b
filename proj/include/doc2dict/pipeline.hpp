#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doc2dict/alignment_eval.hpp"
#include "doc2dict/checkpoint_scheduler.hpp"
#include "doc2dict/chunked_fusion.hpp"
#include "doc2dict/optim.hpp"
#include "doc2dict/preprocessing.hpp"
#include "doc2dict/rng.hpp"
#include "doc2dict/structured_codec.hpp"
#include "doc2dict/synthetic_tasks.hpp"
#include "doc2dict/tokenizer.hpp"
#include "doc2dict/transformer.hpp"

namespace d2d {

class ModelFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Task { dates, names, numbers, longdoc, custom };

inline std::string task_name(Task t) {
  switch (t) {
    case Task::dates: return "dates";
    case Task::names: return "names";
    case Task::numbers: return "numbers";
    case Task::longdoc: return "longdoc";
    case Task::custom: return "custom-jsonl";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  for (Task t : {Task::dates, Task::names, Task::numbers, Task::longdoc, Task::custom}) {
    if (task_name(t) == s) return t;
  }
  if (s == "custom") return Task::custom;
  throw ConfigError("unknown task '" + s + "'");
}

struct RunConfig {
  Task task = Task::custom;
  ModelConfig model;
  int beam_size = 1;
  int epochs = 1;
  float learning_rate = 6.25e-5f;
  float clip_norm = 1.0f;
  std::size_t warmup_steps = 0;  // linear ramp from 0
  bool linear_decay = false;     // then linear decay to 0 at the last step
  std::uint64_t seed = 1;
  bool lowercase = false;
  bool strip_commas = false;
  bool shuffle_epochs = true;
  bool slot_prefix = false;
  bool digit_split = true;
  bool checkpoint = false;     // Fig. 2 schedule for every training step
  int merged_vocab_size = 0;   // 0 = character vocabulary
  std::size_t max_steps = 0;   // 0 = epochs * |train|
  Format format = Format::pyliteral;
  RecordShape shape = RecordShape::dict;
  std::string train_path, eval_path, model_path, report_path;

  PreprocessOptions preprocess() const { return {lowercase, strip_commas, slot_prefix}; }

  void validate() const {
    model.validate();
    if (beam_size < 1) throw ConfigError("beam size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(learning_rate > 0.0f)) throw ConfigError("learning rate must be positive");
    if (merged_vocab_size != 0 && merged_vocab_size < Vocab::kCoverageMinimum) {
      throw ConfigError("merged vocabulary size must be 0 or >= " + std::to_string(Vocab::kCoverageMinimum));
    }
  }

  // Paths named in the config must exist (inputs) or be creatable (outputs).
  void check_paths() const {
    namespace fs = std::filesystem;
    for (const std::string* p : {&train_path, &eval_path}) {
      if (!p->empty() && !fs::exists(*p)) throw ConfigError("no such file: " + *p);
    }
    for (const std::string* p : {&model_path, &report_path}) {
      if (p->empty()) continue;
      const fs::path parent = fs::path(*p).parent_path();
      if (!parent.empty() && !fs::is_directory(parent)) throw ConfigError("no such directory: " + parent.string());
    }
  }
};

// Everything needed to run a trained model.
struct Model {
  ModelConfig cfg;
  ModelParams params;
  Vocab vocab = Vocab::characters();
  PreprocessOptions prep;
  Format format = Format::pyliteral;
  RecordShape shape = RecordShape::dict;
  std::vector<std::string> slot_keys;
};

// ---------------------------------------------------------------------------
// Persistence: little-endian "D2D1" container.

namespace detail {

inline constexpr char kModelMagic[4] = {'D', '2', 'D', '1'};
inline constexpr char kModelTrailer[4] = {'E', 'N', 'D', '1'};
inline constexpr std::uint32_t kModelVersion = 1;

struct ByteWriter {
  std::string out;
  void u8(std::uint8_t v) { out += static_cast<char>(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    u32(v);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out += s;
  }
  void raw(const char* p, std::size_t n) { out.append(p, n); }
};

struct ByteReader {
  std::string_view in;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (in.size() - pos < n) throw ModelFileError(std::string("model file truncated while reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(in[pos++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos++])) << (8 * i);
    return v;
  }
  std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }
  float f32(const char* what) {
    const std::uint32_t v = u32(what);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(in.substr(pos, n));
    pos += n;
    return s;
  }
};

inline void write_config(ByteWriter& w, const ModelConfig& c) {
  for (int v : {c.d_model, c.n_heads, c.n_enc_layers, c.n_dec_layers, c.d_ff, c.vocab_size, c.chunk_size,
                c.max_chunks, c.max_target_len}) {
    w.i32(v);
  }
  w.f32(c.dropout);
}

inline ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  for (int* v : {&c.d_model, &c.n_heads, &c.n_enc_layers, &c.n_dec_layers, &c.d_ff, &c.vocab_size, &c.chunk_size,
                 &c.max_chunks, &c.max_target_len}) {
    *v = r.i32("config");
  }
  c.dropout = r.f32("config");
  return c;
}

inline std::string config_diff(const ModelConfig& file, const ModelConfig& want) {
  std::ostringstream os;
  auto field = [&](const char* name, auto a, auto b) {
    if (a != b && os.tellp() == 0) os << name << " is " << a << " in the file but " << b << " was expected";
  };
  field("d_model", file.d_model, want.d_model);
  field("n_heads", file.n_heads, want.n_heads);
  field("n_enc_layers", file.n_enc_layers, want.n_enc_layers);
  field("n_dec_layers", file.n_dec_layers, want.n_dec_layers);
  field("d_ff", file.d_ff, want.d_ff);
  field("vocab_size", file.vocab_size, want.vocab_size);
  field("chunk_size", file.chunk_size, want.chunk_size);
  field("max_chunks", file.max_chunks, want.max_chunks);
  field("max_target_len", file.max_target_len, want.max_target_len);
  field("dropout", file.dropout, want.dropout);
  return os.str();
}

}  // namespace detail

inline std::string serialize_model(const Model& m) {
  detail::ByteWriter w;
  w.raw(detail::kModelMagic, 4);
  w.u32(detail::kModelVersion);
  detail::write_config(w, m.cfg);
  w.u8(static_cast<std::uint8_t>(m.format));
  w.u8(static_cast<std::uint8_t>(m.shape));
  w.u8(static_cast<std::uint8_t>((m.prep.lowercase ? 1 : 0) | (m.prep.strip_commas ? 2 : 0) |
                                 (m.prep.slot_prefix ? 4 : 0)));
  w.u32(static_cast<std::uint32_t>(m.slot_keys.size()));
  for (const auto& k : m.slot_keys) w.str(k);
  w.str(m.vocab.to_text());
  const auto named = m.params.named();
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, v] : named) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(v.shape().size()));
    for (std::size_t d : v.shape()) w.u64(d);
    for (float f : v.value().data()) w.f32(f);
  }
  w.raw(detail::kModelTrailer, 4);
  return std::move(w.out);
}

// Parses a model image. With `expected`, the stored configuration must match
// it; a shape disagreement names the first offending tensor.
inline Model deserialize_model(std::string_view bytes, const ModelConfig* expected = nullptr) {
  detail::ByteReader r{bytes};
  r.need(4, "magic");
  if (bytes.substr(0, 4) != std::string_view(detail::kModelMagic, 4)) {
    throw ModelFileError("not a model file (bad magic bytes)");
  }
  r.pos = 4;
  const std::uint32_t version = r.u32("version");
  if (version != detail::kModelVersion) {
    throw ModelFileError("unsupported model file version " + std::to_string(version));
  }
  Model m;
  m.cfg = detail::read_config(r);
  try {
    m.cfg.validate();
  } catch (const ConfigError& e) {
    throw ModelFileError(std::string("stored configuration is invalid: ") + e.what());
  }
  const std::uint8_t fmt = r.u8("format"), shp = r.u8("shape"), flags = r.u8("flags");
  if (fmt > 3 || shp > 1 || flags > 7) throw ModelFileError("corrupt header fields");
  m.format = static_cast<Format>(fmt);
  m.shape = static_cast<RecordShape>(shp);
  m.prep = {(flags & 1) != 0, (flags & 2) != 0, (flags & 4) != 0};
  const std::uint32_t nkeys = r.u32("slot keys");
  if (nkeys > bytes.size()) throw ModelFileError("corrupt slot key count");
  for (std::uint32_t i = 0; i < nkeys; ++i) m.slot_keys.push_back(r.str("slot keys"));
  try {
    m.vocab = Vocab::from_text(r.str("vocabulary"));
  } catch (const VocabError& e) {
    throw ModelFileError(std::string("stored vocabulary is invalid: ") + e.what());
  }
  if (m.vocab.size() != m.cfg.vocab_size) {
    throw ModelFileError("vocabulary has " + std::to_string(m.vocab.size()) + " entries but the config says " +
                         std::to_string(m.cfg.vocab_size));
  }

  const ModelConfig& want = expected ? *expected : m.cfg;
  ModelParams params = ModelParams::init(want, 0);
  const auto slots = params.named();
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str("tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank > 8) throw ModelFileError("tensor '" + name + "' has corrupt rank");
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(static_cast<std::size_t>(r.u64("tensor shape")));
      n *= shape.back();
    }
    if (i >= slots.size() || slots[i].first != name) {
      throw ModelFileError("tensor '" + name + "' is not expected at position " + std::to_string(i) +
                           (expected ? " under the requested configuration" : ""));
    }
    if (shape != slots[i].second.shape()) {
      throw ModelFileError("tensor '" + name + "' has shape " + shape_str(shape) + " in the file but " +
                           shape_str(slots[i].second.shape()) + " was expected");
    }
    r.need(n * 4, "tensor data");
    float* dst = slots[i].second.node()->value.ptr();
    for (std::size_t k = 0; k < n; ++k) dst[k] = r.f32("tensor data");
  }
  if (count != slots.size()) {
    throw ModelFileError("model file holds " + std::to_string(count) + " tensors, expected " +
                         std::to_string(slots.size()) + " (next missing: '" + slots[count < slots.size() ? count : 0].first + "')");
  }
  if (expected && !(m.cfg == *expected)) throw ModelFileError("configuration mismatch: " + detail::config_diff(m.cfg, *expected));
  r.need(4, "trailer");
  if (bytes.substr(r.pos, 4) != std::string_view(detail::kModelTrailer, 4)) throw ModelFileError("corrupt trailer");
  r.pos += 4;
  if (r.pos != bytes.size()) throw ModelFileError("trailing bytes after model data");
  m.params = std::move(params);
  return m;
}

inline void save_model(const Model& m, const std::string& path) {
  const std::string bytes = serialize_model(m);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ModelFileError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ModelFileError("write failed for " + path);
}

inline Model load_model(const std::string& path, const ModelConfig* expected = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ModelFileError("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_model(ss.str(), expected);
}

// ---------------------------------------------------------------------------
// Example preparation

// Applies the value-side transforms to string values.
inline Record transform_record(const Record& r, const PreprocessOptions& opt) {
  Record out;
  out.shape = r.shape;
  for (const auto& [k, v] : r.pairs) {
    out.add(k, v.is_number ? v : Value::string(preprocess_value(v.text, opt)));
  }
  return out;
}

inline std::vector<std::string> collect_keys(const std::vector<Example>& data) {
  std::vector<std::string> keys;
  for (const auto& ex : data) {
    for (const auto& [k, v] : ex.record.pairs) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
  }
  return keys;
}

// Source tokens chunked for the encoder. `m_limit` > 0 caps the chunk count.
inline ChunkBatch prepare_source(const Model& m, const std::string& text, std::size_t m_limit = 0) {
  const std::string pre = preprocess_input(text, m.prep, m.slot_keys);
  const std::size_t cap = m_limit ? std::min<std::size_t>(m_limit, m.cfg.max_chunks) : m.cfg.max_chunks;
  return chunk_document(m.vocab.tokenize(pre), static_cast<std::size_t>(m.cfg.chunk_size), cap);
}

inline std::string target_text(const Model& m, const Record& r) {
  Record t = transform_record(r, m.prep);
  t.shape = m.shape;
  return serialize(t, m.format);
}

inline std::vector<int> target_ids(const Model& m, const std::string& text) {
  std::vector<int> ids = m.vocab.tokenize(text).ids;
  ids.push_back(Vocab::kEos);
  return ids;
}

// ---------------------------------------------------------------------------
// Prediction and evaluation

struct PredictResult {
  Record record;
  std::string raw;
  ParseOutcome outcome;
  bool truncated_input = false;
  bool truncated_output = false;
  std::size_t chunks = 0;

  Prediction as_prediction() const { return {record, !outcome.ok()}; }
};

inline PredictResult predict(const Model& m, const std::string& input, int beam_size = 1, std::size_t m_limit = 0) {
  if (beam_size < 1) throw ConfigError("beam size must be >= 1");
  PredictResult res;
  const ChunkBatch batch = prepare_source(m, input, m_limit);
  res.truncated_input = batch.truncated || (m_limit && batch.original_length > batch.m * batch.c);
  res.chunks = batch.m;
  FusedMemory fused;
  {
    NoGradGuard no_grad;
    fused = encode_document(m.params, m.cfg, batch, ForwardContext{});
  }
  const DecodeMode mode = beam_size == 1 ? DecodeMode::greedy() : DecodeMode::beam(beam_size);
  const Generation g = generate(m.params, m.cfg, fused.memory, fused.valid, mode, m.cfg.max_target_len);
  res.truncated_output = g.truncated;
  std::vector<int> ids = g.ids;
  if (!ids.empty() && ids.back() == Vocab::kEos) ids.pop_back();
  res.raw = m.vocab.detokenize(ids);
  res.outcome = parse(res.raw, m.format, m.shape);
  if (res.outcome.ok()) res.record = *res.outcome.record;
  res.record.shape = m.shape;
  return res;
}

struct EvalReport {
  MetricReport metrics;
  double exact_match = 0.0;
  std::size_t truncated_inputs = 0;
  std::vector<PredictResult> predictions;

  std::string to_text() const {
    std::ostringstream os;
    os << "exact_match=" << exact_match << "\ntruncated_inputs=" << truncated_inputs << '\n' << metrics.to_text();
    return os.str();
  }
};

// Gold records get the same value transforms as training targets.
inline EvalReport evaluate(const Model& m, const std::vector<Example>& data, int beam_size = 1, bool cased = false,
                           Averaging averaging = Averaging::micro, std::size_t m_limit = 0) {
  EvalReport rep;
  std::vector<Prediction> preds;
  std::vector<Record> golds;
  for (const auto& ex : data) {
    PredictResult p = predict(m, ex.input, beam_size, m_limit);
    if (p.truncated_input) ++rep.truncated_inputs;
    preds.push_back(p.as_prediction());
    golds.push_back(transform_record(ex.record, m.prep));
    rep.predictions.push_back(std::move(p));
  }
  rep.metrics = entity_f1(std::span<const Prediction>(preds), golds, cased, averaging);
  rep.exact_match = exact_match_rate(preds, golds);
  return rep;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  int epoch = 0;
  std::size_t steps = 0;
  double mean_loss = 0.0;
  bool has_dev = false;
  double dev_exact = 0.0;
  double dev_f1 = 0.0;

  std::string to_text() const {
    std::ostringstream os;
    os.precision(6);
    os << "epoch=" << epoch << " steps=" << steps << " loss=" << mean_loss;
    if (has_dev) os << " dev_exact=" << dev_exact << " dev_f1=" << dev_f1;
    return os.str();
  }
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
  int best_epoch = 0;

  std::string log_text() const {
    std::string s;
    for (const auto& e : log) s += e.to_text() + "\n";
    s += "best_epoch=" + std::to_string(best_epoch) + "\n";
    return s;
  }
};

// Seed for shuffling one example's pairs in one epoch.
inline std::uint64_t epoch_shuffle_seed(std::uint64_t run_seed, int epoch, std::size_t index) {
  return mix_seed({run_seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(index)});
}

inline std::vector<std::size_t> epoch_order(std::uint64_t run_seed, int epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::uint64_t key = mix_seed({run_seed, static_cast<std::uint64_t>(epoch), 0x4F52444552ull});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(counter_uniform(key, i) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  return order;
}

// Target string for one example in one epoch.
inline float scheduled_lr(const RunConfig& rc, std::size_t step, std::size_t total_steps) {
  double f = 1.0;
  if (step < rc.warmup_steps) f = static_cast<double>(step + 1) / static_cast<double>(rc.warmup_steps);
  if (rc.linear_decay && total_steps > rc.warmup_steps && step >= rc.warmup_steps) {
    f = 1.0 - static_cast<double>(step - rc.warmup_steps) / static_cast<double>(total_steps - rc.warmup_steps);
  }
  return static_cast<float>(rc.learning_rate * f);
}

inline std::string epoch_target(const Model& m, const Example& ex, const RunConfig& rc, int epoch, std::size_t index) {
  const Record r = rc.shuffle_epochs ? shuffle_pairs(ex.record, epoch_shuffle_seed(rc.seed, epoch, index)) : ex.record;
  return target_text(m, r);
}

inline Vocab build_run_vocab(const RunConfig& rc, const std::vector<Example>& train,
                             const std::vector<std::string>& slot_keys) {
  if (rc.merged_vocab_size == 0) return Vocab::characters(rc.digit_split);
  std::vector<std::string> corpus;
  Model probe;
  probe.prep = rc.preprocess();
  probe.format = rc.format;
  probe.shape = rc.shape;
  probe.slot_keys = slot_keys;
  for (const auto& ex : train) {
    corpus.push_back(preprocess_input(ex.input, probe.prep, slot_keys));
    corpus.push_back(target_text(probe, ex.record));
  }
  return build_vocab(corpus, rc.merged_vocab_size, rc.digit_split);
}

struct TrainHooks {
  std::ostream* progress = nullptr;  // human-readable progress, includes timings
  std::size_t dev_limit = 0;         // evaluate at most this many dev examples per epoch (0 = all)
  std::vector<float>* step_losses = nullptr;
};

inline TrainResult train(const RunConfig& rc, const std::vector<Example>& train_data,
                         const std::vector<Example>& dev_data = {}, const TrainHooks& hooks = {}) {
  rc.validate();
  if (train_data.empty()) throw TrainingError("training set is empty");
  TrainResult res;
  Model& m = res.model;
  m.prep = rc.preprocess();
  m.format = rc.format;
  m.shape = rc.shape;
  if (rc.slot_prefix) m.slot_keys = collect_keys(train_data);
  m.vocab = build_run_vocab(rc, train_data, m.slot_keys);
  m.cfg = rc.model;
  m.cfg.vocab_size = m.vocab.size();
  m.params = ModelParams::init(m.cfg, mix_seed({rc.seed, 0x494E4954ull}));

  // Validate every example up front so errors carry line numbers.
  std::vector<ChunkBatch> sources;
  for (std::size_t i = 0; i < train_data.size(); ++i) {
    try {
      const std::string t = target_text(m, train_data[i].record);
      if (target_ids(m, t).size() > static_cast<std::size_t>(m.cfg.max_target_len)) {
        throw TrainingError("target has " + std::to_string(target_ids(m, t).size()) +
                            " tokens, above max_target_len " + std::to_string(m.cfg.max_target_len));
      }
    } catch (const CodecError& e) {
      throw TrainingError("example " + std::to_string(i + 1) + ": record cannot be serialized: " + e.what());
    } catch (const TrainingError& e) {
      throw TrainingError("example " + std::to_string(i + 1) + ": " + e.what());
    }
    sources.push_back(prepare_source(m, train_data[i].input));
  }

  std::vector<Var> plist;
  for (const auto& [name, v] : m.params.named()) plist.push_back(v);
  AdamConfig ac;
  ac.lr = rc.learning_rate;
  ac.clip_norm = rc.clip_norm;
  Adam opt(plist, ac);

  std::vector<Example> dev = dev_data;
  if (hooks.dev_limit && dev.size() > hooks.dev_limit) dev.resize(hooks.dev_limit);
  double best_score = -1.0;
  std::vector<Tensor> best;
  std::size_t step = 0;
  const std::size_t total_steps = rc.max_steps ? rc.max_steps : static_cast<std::size_t>(rc.epochs) * train_data.size();
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= rc.epochs && step < total_steps; ++epoch) {
    EpochLog el;
    el.epoch = epoch;
    double loss_sum = 0.0;
    for (std::size_t idx : epoch_order(rc.seed, epoch, train_data.size())) {
      if (step >= total_steps) break;
      const std::vector<int> tgt = target_ids(m, epoch_target(m, train_data[idx], rc, epoch, idx));
      const ForwardContext ctx{true, m.cfg.dropout, mix_seed({rc.seed, 0x5354455000ull, step})};
      StepResult sr;
      try {
        sr = train_step(m.params, m.cfg, sources[idx], tgt,
                        rc.checkpoint ? CheckpointPlan::fig2(m.cfg, sources[idx].m)
                                      : CheckpointPlan::none(m.cfg, sources[idx].m),
                        ctx, false);
      } catch (const NumericError& e) {
        throw TrainingError("non-finite value at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                            ", example " + std::to_string(idx + 1) + ": " + e.what());
      }
      if (!std::isfinite(sr.loss)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                            ", example " + std::to_string(idx + 1));
      }
      opt.set_lr(scheduled_lr(rc, step, total_steps));
      opt.step();
      if (hooks.step_losses) hooks.step_losses->push_back(sr.loss);
      loss_sum += sr.loss;
      ++el.steps;
      ++step;
    }
    el.mean_loss = el.steps ? loss_sum / static_cast<double>(el.steps) : 0.0;
    double score = -static_cast<double>(epoch);  // without dev data the last epoch wins
    if (!dev.empty()) {
      const EvalReport er = evaluate(m, dev, rc.beam_size);
      el.has_dev = true;
      el.dev_exact = er.exact_match;
      el.dev_f1 = er.metrics.micro.f1;
      score = er.exact_match + 1e-3 * er.metrics.micro.f1;
    }
    if (dev.empty() || score > best_score) {
      best_score = score;
      res.best_epoch = epoch;
      best.clear();
      for (const auto& [name, v] : m.params.named()) best.push_back(v.value());
    }
    res.log.push_back(el);
    if (hooks.progress) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *hooks.progress << el.to_text() << " elapsed_s=" << secs << std::endl;
    }
  }
  const auto named = m.params.named();
  for (std::size_t k = 0; k < named.size(); ++k) named[k].second.node()->value = best[k];
  return res;
}

// ---------------------------------------------------------------------------
// Task datasets. Train and eval splits use disjoint derived seeds.

struct TaskData {
  std::vector<Example> train;
  std::vector<Example> eval;
};

inline std::vector<Example> generate_task(Task task, std::size_t n, std::uint64_t seed, Split split,
                                          std::size_t doc_len = 256,
                                          const std::vector<std::string>& fields = longdoc_fields()) {
  const std::uint64_t s = mix_seed({seed, split == Split::train ? 0x545241494Eull : 0x4556414Cull});
  switch (task) {
    case Task::dates: return gen_dates(n, s);
    case Task::names: return gen_names(n, s, split);
    case Task::numbers: return gen_numbers(n, s);
    case Task::longdoc: return gen_longdoc(n, s, doc_len, fields);
    case Task::custom: break;
  }
  throw ConfigError("task '" + task_name(task) + "' has no generator");
}

}  // namespace d2d
