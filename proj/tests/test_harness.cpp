#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "jea/harness.hpp"

using namespace jea;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("jea_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::string> small_flags(const fs::path& out, const std::string& id) {
  return {"run.id=" + id,
          "run.output_dir=" + out.string(),
          "model.image_size=16",
          "model.patch_size=4",
          "model.embed_dim=16",
          "model.depth=1",
          "model.num_heads=2",
          "model.head_hidden_dim=16",
          "model.head_bottleneck_dim=8",
          "model.num_prototypes=16",
          "augment.global_size=16",
          "augment.local_size=8",
          "augment.n_local=2",
          "augment.crop_mode_resize_to=20",
          "data.n_samples=32",
          "data.pool_size=200",
          "data.n_val=30",
          "train.batch_size=4",
          "train.total_steps=6",
          "train.warmup_steps=2",
          "train.teacher_temp_warmup_steps=2",
          "eval.interval=0.5",
          "eval.probe_train_size=40",
          "eval.probe_epochs=2",
          "eval.knn_k=5",
          "eval.invariance_images=4",
          "eval.invariance_views=2"};
}

std::string read(const fs::path& p) { return read_text_file(p); }

// metrics.csv without the wallclock column.
std::string metrics_numbers(const fs::path& p) {
  std::istringstream in(read(p));
  std::string line, out;
  while (std::getline(in, line)) {
    auto cols = detail::split(line, ',');
    cols.erase(cols.begin() + 8);
    for (const auto& c : cols) out += c + ",";
    out += "\n";
  }
  return out;
}

}  // namespace

TEST(Config, UnknownKeyAndBadValuesAreRejected) {
  EXPECT_THROW(load_config_flags({"--train.bogus=1"}), ConfigError);
  try {
    load_config_flags({"--train.bogus=1"});
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown key: train.bogus"), std::string::npos);
  }
  EXPECT_THROW(load_config_flags({"--train.batch_size=abc"}), ConfigError);
  EXPECT_THROW(load_config_flags({"--train.lr=-1"}), ConfigError);
  EXPECT_THROW(load_config_flags({"--mode=sideways"}), ConfigError);
  EXPECT_THROW(parse_config_text("just words\n"), ConfigError);
}

TEST(Config, FlagsOverrideFileAndPresetsApplyFirst) {
  const auto dir = scratch("cfg");
  std::ofstream(dir / "a.cfg") << "# comment\nmodel.preset=tiny\ntrain.lr=0.1\nmodel.embed_dim=32\n";
  const auto c = load_config(dir / "a.cfg", {"--train.lr=0.2"});
  EXPECT_EQ(c.train.lr, 0.2);
  EXPECT_EQ(c.model.embed_dim, 32u);
  EXPECT_EQ(c.model.depth, 4u);
  // Round trip through the resolved text.
  const auto again = resolve_config(parse_config_text(config_text(c)));
  EXPECT_EQ(config_text(again), config_text(c));
  EXPECT_EQ(config_hash(again), config_hash(c));
  fs::remove_all(dir);
}

TEST(Config, HashIgnoresIdAndLocation) {
  auto a = load_config_flags({"--run.id=x"}), b = load_config_flags({"--run.id=y", "--run.output_dir=/tmp/elsewhere"});
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_NE(config_hash(a), config_hash(load_config_flags({"--train.seed=1"})));
}

TEST(Results, CsvRoundTripAndBadHeader) {
  std::vector<ResultRow> rows{{"r", "original", 10, 0, "tiny", "knn_acc", "0.5"},
                              {"r", "original", 10, 4, "tiny", "inv_normalized_sim", "undefined"}};
  EXPECT_EQ(parse_results_csv(results_csv(rows)), rows);
  EXPECT_THROW(parse_results_csv("a,b\n"), FormatError);
  EXPECT_EQ(format_metric(std::nan("")), "undefined");
}

TEST(Harness, EvalScheduleIncludesStartIntervalsAndEnd) {
  auto c = load_config_flags({"--train.total_steps=10", "--eval.interval=0.3"});
  EXPECT_EQ(eval_steps(c), (std::vector<std::size_t>{0, 3, 6, 9, 10}));
  c.eval.at_start = false;
  EXPECT_EQ(eval_steps(c).front(), 3u);
}

TEST(Harness, IdenticalConfigGivesByteIdenticalResults) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  const auto ra = run_experiment(load_config_flags(small_flags(a, "run")));
  const auto rb = run_experiment(load_config_flags(small_flags(b, "run")));
  EXPECT_NE(ra.status, "failed");
  EXPECT_EQ(ra.rows.size(), 12u);
  EXPECT_EQ(read(a / "run" / "results.csv"), read(b / "run" / "results.csv"));
  EXPECT_EQ(metrics_numbers(a / "run" / "metrics.csv"), metrics_numbers(b / "run" / "metrics.csv"));
  EXPECT_EQ(read(a / "run" / "provenance.csv"), read(b / "run" / "provenance.csv"));
  // A finished run is reused, not recomputed.
  EXPECT_TRUE(run_experiment(load_config_flags(small_flags(a, "run"))).skipped);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Harness, ResumeMatchesStraightThrough) {
  const auto a = scratch("resume_a"), b = scratch("resume_b");
  run_experiment(load_config_flags(small_flags(a, "run")));
  RunOptions stop;
  stop.stop_after_step = 3;
  const auto partial = run_experiment(load_config_flags(small_flags(b, "run")), stop);
  EXPECT_EQ(partial.status, "interrupted");
  EXPECT_FALSE(fs::exists(b / "run" / "status.txt"));
  // Simulate a crash after more steps were logged than checkpointed.
  std::ofstream(b / "run" / "metrics.csv", std::ios::app) << "3,0,0,0,0,0,0,0,0,0\n4,0,0,0,0,0,0,0,0,0\n";
  const auto resumed = run_experiment(load_config_flags(small_flags(b, "run")));
  EXPECT_NE(resumed.status, "interrupted");
  EXPECT_FALSE(resumed.skipped);
  EXPECT_EQ(read(a / "run" / "results.csv"), read(b / "run" / "results.csv"));
  EXPECT_EQ(metrics_numbers(a / "run" / "metrics.csv"), metrics_numbers(b / "run" / "metrics.csv"));
  const auto ca = checkpoint_load(*detail::latest_checkpoint(a / "run"));
  const auto cb = checkpoint_load(*detail::latest_checkpoint(b / "run"));
  EXPECT_EQ(params_checksum(ca.student), params_checksum(cb.student));
  EXPECT_EQ(params_checksum(ca.teacher), params_checksum(cb.teacher));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Harness, ChangedConfigDoesNotReuseRun) {
  const auto a = scratch("changed");
  auto flags = small_flags(a, "run");
  flags.push_back("train.total_steps=2");
  flags.push_back("eval.interval=1");
  run_experiment(load_config_flags(flags));
  flags.push_back("train.seed=5");
  EXPECT_FALSE(run_experiment(load_config_flags(flags)).skipped);
  fs::remove_all(a);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const auto dir = scratch("ckpt");
  ModelConfig mc;
  mc.image_size = 8;
  mc.embed_dim = 8;
  mc.depth = 1;
  mc.num_heads = 2;
  mc.head_hidden_dim = 8;
  mc.head_bottleneck_dim = 4;
  mc.num_prototypes = 6;
  auto st = init_train_state(mc, 3);
  st.step = 17;
  st.dino_center[2] = 0.25f;
  checkpoint_save(st, dir / "c", {{"config_hash", "abc"}});
  CheckpointInfo info;
  const auto back = checkpoint_load(dir / "c", &info);
  EXPECT_EQ(back.step, 17u);
  EXPECT_EQ(info.extra.at("config_hash"), "abc");
  EXPECT_EQ(params_checksum(back.student), params_checksum(st.student));
  EXPECT_EQ(back.dino_center, st.dino_center);

  // Flipped byte in a blob.
  fs::copy(dir / "c", dir / "flip");
  {
    std::fstream f(dir / "flip" / "teacher.patch_weight.f32", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5);
    f.put('\x7f');
  }
  EXPECT_THROW(checkpoint_load(dir / "flip"), CorruptionError);

  // Truncated blob.
  fs::copy(dir / "c", dir / "short");
  fs::resize_file(dir / "short" / "dino_center.f32", 8);
  EXPECT_THROW(checkpoint_load(dir / "short"), CorruptionError);

  // Missing manifest.
  fs::copy(dir / "c", dir / "nomanifest");
  fs::remove(dir / "nomanifest" / "manifest.txt");
  EXPECT_THROW(checkpoint_load(dir / "nomanifest"), CorruptionError);

  // Future format version.
  fs::copy(dir / "c", dir / "future");
  {
    auto text = read(dir / "future" / "manifest.txt");
    text.replace(text.find("format_version=") + 15, 1, "9");
    std::ofstream(dir / "future" / "manifest.txt") << text;
  }
  EXPECT_THROW(checkpoint_load(dir / "future"), MigrationError);
  fs::remove_all(dir);
}

TEST(Grid, CellsIdsAndReport) {
  const auto out = scratch("grid");
  std::string text = "grid.mode=original,crop\ngrid.n_samples=24,32\n";
  for (const auto& f : small_flags(out, "g")) text += f + "\n";
  text += "train.total_steps=2\neval.interval=1\n";
  const auto g = parse_grid_spec(text);
  const auto cells = grid_cells(g);
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[0].run_id, "g-original-n24-s2-desk");
  EXPECT_EQ(cells[1].run_id, "g-crop-n24-s2-desk");
  EXPECT_EQ(cells[3].data.n_samples, 32u);
  EXPECT_EQ(run_directory(cells[0]), out / "g" / "g-original-n24-s2-desk");

  const auto runs = run_grid(g);
  ASSERT_EQ(runs.size(), 4u);
  for (const auto& r : runs) EXPECT_NE(r.status, "failed") << r.error;
  const auto gaps = read(out / "g" / "gaps.csv");
  EXPECT_EQ(std::count(gaps.begin(), gaps.end(), '\n'), 3);
  const auto summary = read(out / "g" / "summary.csv");
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 1 + 4 * 4);
  // Re-reporting from disk gives the same summary.
  fs::remove(out / "g" / "summary.csv");
  report_directory(out / "g");
  EXPECT_EQ(read(out / "g" / "summary.csv"), summary);
  fs::remove_all(out);
}

TEST(Grid, FailedCellIsRecordedAndOthersRun) {
  const auto out = scratch("grid_fail");
  std::string text = "grid.n_samples=2,32\n";
  for (const auto& f : small_flags(out, "g")) text += f + "\n";
  text += "train.total_steps=2\neval.interval=1\n";
  const auto runs = run_grid(parse_grid_spec(text));
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_EQ(runs[0].status, "failed");
  EXPECT_NE(runs[0].error.find("batch_size"), std::string::npos);
  EXPECT_NE(runs[1].status, "failed");
  EXPECT_NE(read(out / "g" / "summary.csv").find(",error,"), std::string::npos);
  fs::remove_all(out);
}

TEST(Grid, UnknownGridKeyIsAConfigError) {
  EXPECT_THROW(parse_grid_spec("grid.colour=red\n"), ConfigError);
  EXPECT_THROW(parse_grid_spec("grid.mode=original,diagonal\n"), ConfigError);
}

TEST(Grid, EmptyReportIsAnError) { EXPECT_THROW(write_report({}, fs::temp_directory_path()), HarnessError); }

TEST(Selector, SyntheticAndErrors) {
  const auto d = load_dataset_selector("synthetic:50:20");
  EXPECT_EQ(d.train.size(), 50u);
  EXPECT_EQ(d.val.size(), 20u);
  EXPECT_THROW(load_dataset_selector("imagenet"), ConfigError);
  EXPECT_THROW(load_dataset_selector("cifar:onlyone"), ConfigError);
}
