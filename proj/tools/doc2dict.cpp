#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "doc2dict/pipeline.hpp"

using namespace d2d;

namespace {

void add_model_flags(CLI::App* app, RunConfig& rc) {
  app->add_option("--d-model", rc.model.d_model, "model width")->capture_default_str();
  app->add_option("--heads", rc.model.n_heads, "attention heads")->capture_default_str();
  app->add_option("--enc-layers", rc.model.n_enc_layers, "encoder layers")->capture_default_str();
  app->add_option("--dec-layers", rc.model.n_dec_layers, "decoder layers")->capture_default_str();
  app->add_option("--d-ff", rc.model.d_ff, "feed-forward width")->capture_default_str();
  app->add_option("-c,--chunk-size", rc.model.chunk_size, "tokens per chunk")->capture_default_str();
  app->add_option("-m,--max-chunks", rc.model.max_chunks, "chunks per document")->capture_default_str();
  app->add_option("--max-target-len", rc.model.max_target_len, "target tokens")->capture_default_str();
  app->add_option("--dropout", rc.model.dropout, "dropout rate")->capture_default_str();
}

void add_format_flags(CLI::App* app, std::string& format, std::string& shape) {
  app->add_option("--format", format, "json|xml|yaml|pyliteral")->capture_default_str();
  app->add_option("--shape", shape, "dict|tuples")->capture_default_str();
}

void write_report(const std::string& path, const std::string& text) {
  if (path.empty()) return;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

std::uint64_t seed_from_env(std::uint64_t fallback) {
  if (const char* s = std::getenv("D2D_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw ConfigError(std::string("D2D_SEED is not an unsigned integer: ") + s);
    }
  }
  return fallback;
}

std::string record_json(const Record& r) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& [k, v] : r.pairs) j.push_back(nlohmann::ordered_json::array({k, v.text}));
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"doc2dict: document to structured record generation"};
  app.require_subcommand(1);

  // gen-data
  std::string task_s = "dates", split_s = "train", out_path, fields_s;
  std::size_t n = 1000, doc_len = 256;
  std::uint64_t seed = 1;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset as JSONL");
  gen->add_option("--task", task_s, "dates|names|numbers|longdoc")->capture_default_str();
  gen->add_option("-n,--count", n, "examples")->capture_default_str();
  gen->add_option("--seed", seed, "generator seed")->capture_default_str();
  gen->add_option("--split", split_s, "train|eval")->capture_default_str();
  gen->add_option("--doc-len", doc_len, "longdoc characters")->capture_default_str();
  gen->add_option("--fields", fields_s, "longdoc fields, comma separated");
  gen->add_option("-o,--out", out_path, "output JSONL")->required();

  // train
  RunConfig rc;
  std::string format_s = "pyliteral", shape_s = "dict", rc_task = "custom-jsonl";
  bool no_shuffle = false, merged_digits = false;
  std::size_t dev_limit = 0;
  auto* tr = app.add_subcommand("train", "train a model on a JSONL dataset");
  tr->add_option("--task", rc_task, "task label recorded with the run")->capture_default_str();
  tr->add_option("--data", rc.train_path, "training JSONL")->required();
  tr->add_option("--dev", rc.eval_path, "development JSONL for epoch selection");
  tr->add_option("--dev-limit", dev_limit, "dev examples scored per epoch (0 = all)");
  tr->add_option("--model", rc.model_path, "output model file")->required();
  tr->add_option("--report", rc.report_path, "per-epoch metric log");
  tr->add_option("--epochs", rc.epochs, "epochs")->capture_default_str();
  tr->add_option("--max-steps", rc.max_steps, "stop after this many updates (0 = no cap)");
  tr->add_option("--lr", rc.learning_rate, "learning rate")->capture_default_str();
  tr->add_option("--clip", rc.clip_norm, "gradient norm clip (0 = off)")->capture_default_str();
  tr->add_option("--warmup", rc.warmup_steps, "linear warmup steps")->capture_default_str();
  tr->add_flag("--linear-decay", rc.linear_decay, "decay the learning rate linearly to 0 after warmup");
  tr->add_option("--seed", rc.seed, "run seed (D2D_SEED overrides)")->capture_default_str();
  tr->add_option("--beam", rc.beam_size, "beam size for dev decoding")->capture_default_str();
  tr->add_option("--vocab-size", rc.merged_vocab_size, "merged vocabulary size (0 = characters)");
  tr->add_flag("--lowercase", rc.lowercase, "lowercase source and targets");
  tr->add_flag("--strip-commas", rc.strip_commas, "remove commas after digits");
  tr->add_flag("--slot-prefix", rc.slot_prefix, "prepend expected keys to the input");
  tr->add_flag("--no-shuffle", no_shuffle, "keep record pair order fixed across epochs");
  tr->add_flag("--no-digit-split", merged_digits, "allow merged tokens to contain digits");
  tr->add_flag("--checkpoint", rc.checkpoint, "use the two-level checkpointing schedule");
  add_model_flags(tr, rc);
  add_format_flags(tr, format_s, shape_s);

  // predict
  std::string model_path, input_text, input_file;
  int beam = 1;
  std::size_t window = 0;
  auto* pr = app.add_subcommand("predict", "generate a record for one input");
  pr->add_option("--model", model_path, "model file")->required();
  auto* in_opt = pr->add_option("--input", input_text, "input text");
  pr->add_option("--input-file", input_file, "read input text from a file")->excludes(in_opt);
  pr->add_option("--beam", beam, "beam size")->capture_default_str();
  pr->add_option("--window-chunks", window, "read at most this many chunks (0 = model limit)");

  // eval
  std::string data_path, report_path;
  bool cased = false, macro = false;
  auto* ev = app.add_subcommand("eval", "score a model on a JSONL dataset");
  ev->add_option("--model", model_path, "model file")->required();
  ev->add_option("--data", data_path, "JSONL dataset")->required();
  ev->add_option("--beam", beam, "beam size")->capture_default_str();
  ev->add_option("--window-chunks", window, "read at most this many chunks (0 = model limit)");
  ev->add_option("--report", report_path, "write key=value report here");
  ev->add_flag("--cased", cased, "case-sensitive matching");
  ev->add_flag("--macro", macro, "headline macro F1 instead of micro");

  // align
  auto* al = app.add_subcommand("align", "fuzzy-align record values to their documents");
  al->add_option("--data", data_path, "JSONL dataset with optional reference spans")->required();
  al->add_option("--report", report_path, "write key=value report here");

  // cost
  std::size_t c = 512, m = 64, layers = 2, heads = 4, d = 128, target_len = 16;
  bool trace = false;
  auto* co = app.add_subcommand("cost", "attention cost of chunked encoding");
  co->add_option("-c,--chunk-size", c, "tokens per chunk")->capture_default_str();
  co->add_option("-m,--chunks", m, "chunks")->capture_default_str();
  co->add_option("--layers", layers, "encoder layers")->capture_default_str();
  co->add_option("--heads", heads, "heads")->capture_default_str();
  co->add_option("--d-model", d, "model width")->capture_default_str();
  co->add_flag("--trace-memory", trace, "run one checkpointed training step and report peak activations");
  co->add_option("--target-len", target_len, "target tokens for --trace-memory")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const Task task = parse_task(task_s);
      const Split split = split_s == "eval" ? Split::eval : Split::train;
      if (split_s != "train" && split_s != "eval") throw ConfigError("split must be train or eval");
      std::vector<std::string> fields = longdoc_fields();
      if (!fields_s.empty()) {
        fields.clear();
        std::stringstream ss(fields_s);
        for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
      }
      write_jsonl(out_path, generate_task(task, n, seed_from_env(seed), split, doc_len, fields));
      std::cout << "wrote " << n << " examples to " << out_path << '\n';
    } else if (tr->parsed()) {
      rc.task = parse_task(rc_task);
      rc.seed = seed_from_env(rc.seed);
      rc.shuffle_epochs = !no_shuffle;
      rc.digit_split = !merged_digits;
      const auto fmt = parse_format_name(format_s);
      const auto shp = parse_shape_name(shape_s);
      if (!fmt) throw ConfigError("unknown format '" + format_s + "'");
      if (!shp) throw ConfigError("unknown shape '" + shape_s + "'");
      rc.format = *fmt;
      rc.shape = *shp;
      rc.validate();
      rc.check_paths();
      const auto train_data = read_jsonl(rc.train_path);
      const auto dev_data = rc.eval_path.empty() ? std::vector<Example>{} : read_jsonl(rc.eval_path);
      TrainHooks hooks;
      hooks.progress = &std::cerr;
      hooks.dev_limit = dev_limit;
      const TrainResult res = train(rc, train_data, dev_data, hooks);
      save_model(res.model, rc.model_path);
      write_report(rc.report_path, res.log_text());
      std::cout << res.log_text();
    } else if (pr->parsed()) {
      const Model model = load_model(model_path);
      std::string text = input_text;
      if (!input_file.empty()) {
        std::ifstream f(input_file);
        if (!f) throw std::runtime_error("cannot read " + input_file);
        std::ostringstream ss;
        ss << f.rdbuf();
        text = ss.str();
      }
      const PredictResult p = predict(model, text, beam, window);
      std::cout << "raw=" << p.raw << "\nrecord=" << record_json(p.record)
                << "\nparse=" << (p.outcome.ok() ? "ok" : failure_name(*p.outcome.failure))
                << "\ntruncated_input=" << (p.truncated_input ? 1 : 0)
                << "\ntruncated_output=" << (p.truncated_output ? 1 : 0) << "\nchunks=" << p.chunks << '\n';
      if (!p.outcome.ok()) std::cout << "parse_message=" << p.outcome.message << '\n';
    } else if (ev->parsed()) {
      const Model model = load_model(model_path);
      const auto data = read_jsonl(data_path);
      const EvalReport rep = evaluate(model, data, beam, cased, macro ? Averaging::macro : Averaging::micro, window);
      const std::string text = rep.to_text();
      write_report(report_path, text);
      std::cout << text;
    } else if (al->parsed()) {
      const auto data = read_jsonl(data_path);
      AlignmentReport rep;
      for (const auto& ex : data) {
        for (const auto& [k, v] : ex.record.pairs) {
          if (v.text.empty()) continue;
          const auto automatic = fuzzy_align(v.text, ex.input);
          std::vector<Span> gold;
          for (const auto& s : ex.spans) {
            if (s.key == k) gold.push_back({s.start, s.end, ex.input.substr(s.start, s.end - s.start)});
          }
          accumulate_alignment(rep, k, automatic, gold);
        }
      }
      write_report(report_path, rep.to_text());
      std::cout << rep.to_table();
    } else if (co->parsed()) {
      const CostReport cr = attention_cost(c, m, layers, heads, d);
      std::cout << cr.to_text();
      if (trace) {
        ModelConfig cfg;
        cfg.chunk_size = static_cast<int>(c);
        cfg.max_chunks = static_cast<int>(m);
        cfg.n_enc_layers = cfg.n_dec_layers = static_cast<int>(layers);
        cfg.n_heads = static_cast<int>(heads);
        cfg.d_model = static_cast<int>(d);
        cfg.d_ff = 4 * cfg.d_model;
        cfg.max_target_len = static_cast<int>(target_len);
        cfg.dropout = 0.0f;
        cfg.validate();
        const ModelParams params = ModelParams::init(cfg, seed_from_env(1));
        std::vector<int> doc(c * m);
        for (std::size_t i = 0; i < doc.size(); ++i) doc[i] = Vocab::kFirstLearned + static_cast<int>(i % 90);
        const ChunkBatch batch = chunk_document(doc, c, m);
        const std::vector<int> target(target_len, Vocab::kFirstLearned + 40);
        const StepResult sr = train_step(params, cfg, batch, target, CheckpointPlan::fig2(cfg, m), ForwardContext{},
                                         false);
        const PeakModel pm = peak_activation_model(cfg, m, target_len, false);
        std::cout << sr.trace.to_text() << "predicted_peak_live_activations=" << pm.peak << '\n';
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
