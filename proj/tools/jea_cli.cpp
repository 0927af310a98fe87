#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "jea/harness.hpp"

namespace {

int cmd_train(const std::string& config, const std::vector<std::string>& overrides, bool fresh) {
  const jea::RunConfig cfg = config.empty() ? jea::load_config_flags(overrides) : jea::load_config(config, overrides);
  jea::RunOptions opt;
  opt.resume = !fresh;
  opt.log = &std::cerr;
  const jea::RunRecord r = jea::run_experiment(cfg, opt);
  std::cout << "run " << r.run_id << ": " << r.status << (r.skipped ? " (already complete)" : "") << "\n"
            << "directory: " << r.dir.string() << "\n";
  for (const auto& row : r.rows)
    if (row.step == cfg.train.total_steps) std::cout << row.metric << " = " << row.value << "\n";
  return 0;
}

int cmd_grid(const std::string& spec_path, bool fresh) {
  const jea::GridSpec g = jea::load_grid_spec(spec_path);
  jea::RunOptions opt;
  opt.resume = !fresh;
  opt.log = &std::cerr;
  const auto runs = jea::run_grid(g, opt);
  std::size_t failed = 0;
  for (const auto& r : runs) {
    std::cout << r.run_id << ": " << r.status << (r.error.empty() ? "" : " (" + r.error + ")") << "\n";
    failed += r.status == "failed";
  }
  std::cout << "report: " << jea::grid_directory(g).string() << "\n";
  return failed ? 1 : 0;
}

int cmd_eval(const std::string& ckpt, const std::string& selector, std::size_t epochs, std::size_t k,
             std::uint64_t seed) {
  const jea::TrainState st = jea::checkpoint_load(ckpt);
  const jea::ProbeData d = jea::load_dataset_selector(selector, seed);
  const auto tr = jea::extract_features(st.teacher, d.train, "train");
  const auto va = jea::extract_features(st.teacher, d.val, "val");
  jea::ProbeConfig pc;
  pc.epochs = epochs;
  pc.seed = seed;
  const auto lin = jea::linear_probe(tr, va, pc);
  const auto knn = jea::knn_probe(tr, va, std::min(k, tr.size()));
  std::cout << "step " << st.step << "  n_train " << lin.n_train << "  n_val " << lin.n_val << "\n"
            << "linear_probe_acc = " << lin.accuracy << "  (train " << lin.train_accuracy << ")\n"
            << "knn_acc = " << knn.accuracy << "\n";
  return 0;
}

int cmd_invariance(const std::string& ckpt, const std::string& selector, const std::string& mode, std::size_t images,
                   std::size_t views, std::uint64_t seed) {
  const jea::TrainState st = jea::checkpoint_load(ckpt);
  const jea::ProbeData d = jea::load_dataset_selector(selector, seed);
  std::vector<jea::Image> imgs;
  for (auto i : jea::pick_class_balanced(d.val, images)) imgs.push_back(d.val.image(i));
  jea::AugmentationConfig aug;
  aug.mode = jea::parse_mode(mode);
  aug.global_size = st.model().image_size;
  const auto rep = jea::invariance_metric(st.teacher, imgs, aug, views, seed);
  std::cout << "images " << rep.n_images << "  views " << rep.n_views << "\n"
            << "mean_pos_cos = " << rep.mean_pos_cos << "\n"
            << "mean_neg_cos = " << rep.mean_neg_cos << "  std_neg_cos = " << rep.std_neg_cos << "\n"
            << "normalized_sim = " << (rep.normalized_defined ? std::to_string(rep.normalized_sim) : "undefined")
            << "\n";
  return 0;
}

int cmd_report(const std::string& dir) {
  const auto runs = jea::report_directory(dir);
  std::cout << runs.size() << " runs; wrote summary.csv, tidy.csv, gaps.csv in " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  jea::tune_allocator();
  CLI::App app{"Joint-embedding SSL experiments on small images"};
  app.require_subcommand(1);

  std::string config, spec, ckpt, dir, selector = "synthetic", mode = "original";
  std::vector<std::string> overrides;
  bool fresh = false;
  std::size_t epochs = 100, k = 20, images = 100, views = 16;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "train one run (resumes if interrupted)");
  train->add_option("--config", config, "key=value config file");
  train->add_flag("--fresh", fresh, "discard any previous output of this run");
  train->allow_extras();

  auto* grid = app.add_subcommand("grid", "run every cell of a grid spec, then write the report");
  grid->add_option("--spec", spec, "grid spec file")->required();
  grid->add_flag("--fresh", fresh, "discard previous outputs");

  auto* eval = app.add_subcommand("eval", "linear and k-NN probes on a checkpoint's teacher");
  eval->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  eval->add_option("--dataset", selector, "synthetic[:n_train[:n_val]] or cifar:<train,...>:<test>");
  eval->add_option("--epochs", epochs, "linear probe epochs");
  eval->add_option("--k", k, "k-NN neighbours");
  eval->add_option("--seed", seed, "seed");

  auto* inv = app.add_subcommand("invariance", "augmentation invariance of a checkpoint's teacher");
  inv->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  inv->add_option("--dataset", selector, "images are drawn from the validation split");
  inv->add_option("--mode", mode, "augmentation mode for the views");
  inv->add_option("--images", images, "number of images");
  inv->add_option("--views", views, "views per image");
  inv->add_option("--seed", seed, "seed");

  auto* report = app.add_subcommand("report", "rebuild summary tables from finished runs");
  report->add_option("--dir", dir, "directory holding run directories")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) {
      overrides = train->remaining();
      return cmd_train(config, overrides, fresh);
    }
    if (*grid) return cmd_grid(spec, fresh);
    if (*eval) return cmd_eval(ckpt, selector, epochs, k, seed);
    if (*inv) return cmd_invariance(ckpt, selector, mode, images, views, seed);
    if (*report) return cmd_report(dir);
  } catch (const jea::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
