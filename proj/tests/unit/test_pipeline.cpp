#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "doc2dict/pipeline.hpp"

namespace d2d {
namespace {

RunConfig tiny_config() {
  RunConfig rc;
  rc.model.d_model = 32;
  rc.model.n_heads = 2;
  rc.model.n_enc_layers = 1;
  rc.model.n_dec_layers = 1;
  rc.model.d_ff = 64;
  rc.model.chunk_size = 16;
  rc.model.max_chunks = 2;
  rc.model.max_target_len = 48;
  rc.model.dropout = 0.0f;
  rc.learning_rate = 3e-3f;
  return rc;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("d2d_pipeline_" + name)).string();
}

Model untrained(const RunConfig& rc, std::uint64_t seed = 3) {
  Model m;
  m.cfg = rc.model;
  m.params = ModelParams::init(m.cfg, seed);
  return m;
}

TEST(Persistence, RoundTripIsByteIdentical) {
  const RunConfig rc = tiny_config();
  Model m = untrained(rc);
  m.slot_keys = {"party", "term"};
  m.prep.lowercase = true;
  m.format = Format::yaml;
  const std::string a = serialize_model(m);
  EXPECT_EQ(a.substr(0, 4), "D2D1");
  const Model back = deserialize_model(a);
  EXPECT_EQ(serialize_model(back), a);
  EXPECT_EQ(back.slot_keys, m.slot_keys);
  EXPECT_TRUE(back.prep.lowercase);
  EXPECT_EQ(back.format, Format::yaml);
  EXPECT_TRUE(back.cfg == m.cfg);
  const auto na = m.params.named(), nb = back.params.named();
  ASSERT_EQ(na.size(), nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) {
    ASSERT_EQ(na[i].second.size(), nb[i].second.size());
    EXPECT_EQ(std::memcmp(na[i].second.value().ptr(), nb[i].second.value().ptr(), na[i].second.size() * 4), 0);
  }
  const std::string path = temp_path("rt.d2d");
  save_model(m, path);
  EXPECT_EQ(serialize_model(load_model(path)), a);
  std::filesystem::remove(path);
}

TEST(Persistence, TruncatedAndCorruptFilesFailCleanly) {
  const std::string a = serialize_model(untrained(tiny_config()));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, a.size() / 2, a.size() - 1}) {
    EXPECT_THROW(deserialize_model(std::string_view(a).substr(0, cut)), ModelFileError) << cut;
  }
  std::string bad = a;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_model(bad), ModelFileError);
  bad = a;
  bad[4] = 9;  // version
  EXPECT_THROW(deserialize_model(bad), ModelFileError);
  EXPECT_THROW(deserialize_model(a + "x"), ModelFileError);
  EXPECT_THROW(load_model(temp_path("does_not_exist.d2d")), ModelFileError);
}

TEST(Persistence, MismatchedConfigNamesTensor) {
  const RunConfig rc = tiny_config();
  const std::string a = serialize_model(untrained(rc));
  ModelConfig other = rc.model;
  other.d_ff = 96;
  try {
    deserialize_model(a, &other);
    FAIL() << "expected an error";
  } catch (const ModelFileError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.0.ffn.w1"), std::string::npos) << e.what();
  }
  other = rc.model;
  other.dropout = 0.3f;
  try {
    deserialize_model(a, &other);
    FAIL() << "expected an error";
  } catch (const ModelFileError& e) {
    EXPECT_NE(std::string(e.what()).find("dropout"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(deserialize_model(a, &rc.model));
}

TEST(Shuffle, TargetsChangeAcrossEpochsCanonicalFormFixed) {
  const RunConfig rc = tiny_config();
  const Model m = untrained(rc);
  const auto docs = gen_longdoc(1, 5, 128, longdoc_fields());
  std::set<std::string> seen;
  for (int epoch = 1; epoch <= 8; ++epoch) {
    const std::string t = epoch_target(m, docs[0], rc, epoch, 0);
    seen.insert(t);
    const auto back = parse(t, m.format, m.shape);
    ASSERT_TRUE(back.ok());
    EXPECT_TRUE(canonically_equal(*back.record, docs[0].record));
  }
  EXPECT_GT(seen.size(), 1u);
  RunConfig fixed = rc;
  fixed.shuffle_epochs = false;
  EXPECT_EQ(epoch_target(m, docs[0], fixed, 1, 0), epoch_target(m, docs[0], fixed, 2, 0));
}

TEST(Shuffle, EpochOrderIsAPermutation) {
  auto o = epoch_order(1, 1, 50);
  EXPECT_NE(o, epoch_order(1, 2, 50));
  EXPECT_EQ(o, epoch_order(1, 1, 50));
  std::sort(o.begin(), o.end());
  for (std::size_t i = 0; i < o.size(); ++i) EXPECT_EQ(o[i], i);
}

TEST(Predict, UnparseableGenerationYieldsEmptyRecord) {
  const Model m = untrained(tiny_config());
  const PredictResult p = predict(m, "some input");
  EXPECT_FALSE(p.outcome.ok());
  EXPECT_TRUE(p.record.pairs.empty());
  EXPECT_TRUE(p.as_prediction().parse_failed);
}

TEST(Predict, LongInputReportsTruncation) {
  const Model m = untrained(tiny_config());
  EXPECT_TRUE(predict(m, std::string(100, 'a')).truncated_input);
  EXPECT_FALSE(predict(m, std::string(20, 'a')).truncated_input);
  EXPECT_TRUE(predict(m, std::string(20, 'a'), 1, 1).truncated_input);
  EXPECT_EQ(predict(m, std::string(20, 'a'), 1, 1).chunks, 1u);
}

TEST(Train, OverfitSingleExampleThenPredict) {
  RunConfig rc = tiny_config();
  rc.epochs = 150;
  const std::vector<Example> data = {{"Paid 1,250.00 to ACME", single_field("amount", "1250.00"), {}}};
  const TrainResult res = train(rc, data);
  const PredictResult p = predict(res.model, data[0].input);
  EXPECT_EQ(p.raw, "{'amount': '1250.00'}");
  ASSERT_TRUE(p.outcome.ok());
  EXPECT_TRUE(canonically_equal(p.record, data[0].record));
  const EvalReport er = evaluate(res.model, data);
  EXPECT_EQ(er.exact_match, 1.0);
  EXPECT_EQ(er.metrics.micro.f1, 1.0);
}

TEST(Train, DeterministicWeightsAndLog) {
  RunConfig rc = tiny_config();
  rc.epochs = 2;
  const auto data = gen_dates(20, 1);
  const auto dev = gen_dates(5, 2);
  const TrainResult a = train(rc, data, dev);
  const TrainResult b = train(rc, data, dev);
  EXPECT_EQ(a.log_text(), b.log_text());
  EXPECT_EQ(serialize_model(a.model), serialize_model(b.model));
  rc.seed = 2;
  EXPECT_NE(serialize_model(train(rc, data, dev).model), serialize_model(a.model));
}

TEST(Train, CheckpointingKeepsLosses) {
  RunConfig rc = tiny_config();
  rc.model.dropout = 0.1f;
  rc.model.max_target_len = 128;
  rc.model.max_chunks = 4;
  rc.max_steps = 12;
  const auto data = gen_longdoc(12, 3, 64, longdoc_fields());
  std::vector<float> direct, ckpt;
  TrainHooks h;
  h.step_losses = &direct;
  train(rc, data, {}, h);
  rc.checkpoint = true;
  h.step_losses = &ckpt;
  train(rc, data, {}, h);
  ASSERT_EQ(direct.size(), 12u);
  ASSERT_EQ(ckpt.size(), 12u);
  EXPECT_EQ(direct[0], ckpt[0]);
  for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_NEAR(direct[i], ckpt[i], 1e-4 * std::abs(direct[i]));
}

TEST(Train, TogglesApplyToSourceAndTarget) {
  RunConfig rc = tiny_config();
  rc.lowercase = true;
  rc.strip_commas = true;
  rc.slot_prefix = true;
  rc.max_steps = 1;
  const std::vector<Example> data = {{"Total 1,000.00 ACME", single_field("amount", "1,000.00 ACME"), {}}};
  const TrainResult res = train(rc, data);
  EXPECT_EQ(res.model.slot_keys, std::vector<std::string>{"amount"});
  EXPECT_EQ(target_text(res.model, data[0].record), "{'amount': '1000.00 acme'}");
  const ChunkBatch b = prepare_source(res.model, data[0].input);
  EXPECT_EQ(res.model.vocab.detokenize(unchunk(b)), "slots: amount\ntotal 1000.00 acme");
}

TEST(Train, RejectsBadInputs) {
  RunConfig rc = tiny_config();
  EXPECT_THROW(train(rc, {}), TrainingError);
  rc.model.max_target_len = 8;
  const std::vector<Example> data = {{"x", single_field("amount", "1250.00"), {}}};
  try {
    train(rc, data);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("example 1"), std::string::npos);
  }
  rc = tiny_config();
  rc.beam_size = 0;
  EXPECT_THROW(train(rc, data), ConfigError);
  rc = tiny_config();
  rc.train_path = temp_path("missing.jsonl");
  EXPECT_THROW(rc.check_paths(), ConfigError);
}

TEST(Train, MergedVocabularyRespectsDigitSplit) {
  RunConfig rc = tiny_config();
  rc.merged_vocab_size = 160;
  rc.max_steps = 1;
  const auto data = gen_numbers(200, 4);
  const TrainResult split = train(rc, data);
  rc.digit_split = false;
  const TrainResult merged = train(rc, data);
  auto digit_merges = [](const Vocab& v) {
    int n = 0;
    for (int id = Vocab::kFirstLearned; id < v.size(); ++id) {
      const std::string& s = v.surface(id);
      if (s.size() > 1 && std::any_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) ++n;
    }
    return n;
  };
  EXPECT_EQ(digit_merges(split.model.vocab), 0);
  EXPECT_GT(digit_merges(merged.model.vocab), 0);
  EXPECT_EQ(split.model.cfg.vocab_size, split.model.vocab.size());
}

TEST(Tasks, GeneratedSplitsAreDisjoint) {
  const auto a = generate_task(Task::dates, 50, 1, Split::train);
  const auto b = generate_task(Task::dates, 50, 1, Split::eval);
  EXPECT_NE(a[0].input + a[1].input, b[0].input + b[1].input);
  EXPECT_EQ(parse_task("longdoc"), Task::longdoc);
  EXPECT_THROW(parse_task("poems"), ConfigError);
  EXPECT_THROW(generate_task(Task::custom, 1, 1, Split::train), ConfigError);
}

}  // namespace
}  // namespace d2d
