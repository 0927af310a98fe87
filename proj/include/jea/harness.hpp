#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "jea/checkpoint.hpp"
#include "jea/config.hpp"
#include "jea/evaluation.hpp"
#include "jea/trainer.hpp"

namespace jea {

// Training allocates and frees many large activation buffers per step; keep
// them on the heap instead of fresh mmap pages.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

struct ResultRow {
  std::string run_id;
  std::string mode;
  std::size_t n_samples = 0;
  std::size_t step = 0;
  std::string model;
  std::string metric;
  std::string value;
  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

inline constexpr const char* kResultsHeader = "run_id,mode,n_samples,step,model,metric,value";

inline std::string results_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << kResultsHeader << '\n';
  for (const auto& r : rows)
    os << r.run_id << ',' << r.mode << ',' << r.n_samples << ',' << r.step << ',' << r.model << ',' << r.metric << ','
       << r.value << '\n';
  return os.str();
}

namespace detail {
inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}
}  // namespace detail

inline std::vector<ResultRow> parse_results_csv(const std::string& text) {
  std::vector<ResultRow> rows;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      if (line != kResultsHeader) throw FormatError("results: unexpected header", 0);
      header = false;
      continue;
    }
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 7) throw HarnessError("results: malformed row: " + line);
    rows.push_back({f[0], f[1], std::stoull(f[2]), std::stoull(f[3]), f[4], f[5], f[6]});
  }
  return rows;
}

struct RunData {
  Dataset train;
  Dataset probe_train;
  Dataset val;
  std::vector<Image> invariance_images;
};

inline RunData load_run_data(const RunConfig& c) {
  RunData d;
  if (c.data.source == "synthetic") {
    const SyntheticSpec spec = c.data.synthetic_spec();
    d.train = synth_generate_indices(spec, nested_subsample_indices(c.data.pool_size, c.data.n_samples, c.data.seed));
    d.probe_train =
        synth_generate_indices(spec, nested_subsample_indices(c.data.pool_size, c.eval.probe_train_size, c.data.seed));
    std::vector<std::size_t> val_idx(c.data.n_val);
    std::iota(val_idx.begin(), val_idx.end(), c.data.pool_size);
    d.val = synth_generate_indices(spec, val_idx);
  } else {
    const Dataset full = load_cifar_binary(detail::split(c.data.train_paths, ','));
    d.train = c.data.n_samples == 0 || c.data.n_samples >= full.size() ? full
                                                                       : subsample(full, c.data.n_samples, c.data.seed);
    d.probe_train = subsample(full, std::min(c.eval.probe_train_size, full.size()), c.data.seed);
    const Dataset val_full = load_cifar_binary(c.data.val_path);
    d.val = c.data.n_val == 0 || c.data.n_val >= val_full.size() ? val_full
                                                                 : subsample(val_full, c.data.n_val, c.data.seed);
  }
  for (auto i : pick_class_balanced(d.val, c.eval.invariance_images)) d.invariance_images.push_back(d.val.image(i));
  return d;
}

// Steps after which the teacher is evaluated: optionally 0, every interval of
// the run, and the final step.
inline std::vector<std::size_t> eval_steps(const RunConfig& c) {
  std::set<std::size_t> s;
  const std::size_t total = c.train.total_steps;
  if (c.eval.at_start || total == 0) s.insert(0);
  for (std::size_t k = 1;; ++k) {
    const auto at = static_cast<std::size_t>(std::llround(static_cast<double>(k) * c.eval.interval * static_cast<double>(total)));
    if (at >= total) break;
    if (at > 0) s.insert(at);
  }
  s.insert(total);
  return {s.begin(), s.end()};
}

inline std::string format_metric(double v) {
  return std::isfinite(v) ? detail::format_double(v) : std::string("undefined");
}

inline std::vector<ResultRow> evaluate_model(const ModelParams<float>& teacher, const RunConfig& c, const RunData& d,
                                             std::size_t step) {
  const FeatureTable tr = extract_features(teacher, d.probe_train, "train");
  const FeatureTable va = extract_features(teacher, d.val, "val");
  ProbeConfig pc;
  pc.epochs = c.eval.probe_epochs;
  pc.lr = c.eval.probe_lr;
  pc.batch_size = c.eval.probe_batch_size;
  pc.seed = c.train.seed;
  const ProbeResult lin = linear_probe(tr, va, pc);
  const ProbeResult knn = knn_probe(tr, va, std::min(c.eval.knn_k, tr.size()));
  AugmentationConfig inv_aug = c.augment;
  inv_aug.mode = AugmentationMode::Original;
  const InvarianceReport inv =
      invariance_metric(teacher, d.invariance_images, inv_aug, c.eval.invariance_views, c.train.seed);
  auto row = [&](const char* metric, double v) {
    return ResultRow{c.run_id, std::string(mode_name(c.augment.mode)), c.data.n_samples, step, c.model_preset, metric,
                     format_metric(v)};
  };
  return {row("linear_probe_acc", lin.accuracy), row("knn_acc", knn.accuracy),
          row("inv_mean_pos_cos", inv.mean_pos_cos),
          row("inv_normalized_sim", inv.normalized_defined ? inv.normalized_sim : std::nan(""))};
}

struct RunRecord {
  std::string run_id;
  std::string status;  // ok | collapsed | failed
  std::string error;
  RunConfig config;
  std::vector<ResultRow> rows;
  std::filesystem::path dir;
  bool skipped = false;
  std::size_t collapsed_steps = 0;
};

struct RunOptions {
  bool resume = true;
  std::ostream* log = nullptr;
  // Stop (as if interrupted) once this many steps are done and checkpointed.
  std::optional<std::size_t> stop_after_step;
};

namespace detail {

inline std::map<std::string, std::string> read_kv_file(const std::filesystem::path& p) {
  std::map<std::string, std::string> kv;
  std::istringstream in(read_text_file(p));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir) {
  const auto root = dir / "checkpoints";
  if (!std::filesystem::exists(root)) return std::nullopt;
  std::optional<std::filesystem::path> best;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (!e.is_directory() || !std::filesystem::exists(e.path() / "manifest.txt")) continue;
    if (!best || e.path().filename() > best->filename()) best = e.path();
  }
  return best;
}

inline std::string step_dir_name(std::size_t step) {
  std::ostringstream os;
  os << "step-" << std::setw(9) << std::setfill('0') << step;
  return os.str();
}

// Keeps the header and rows with step < `step`.
inline std::string truncate_metrics(const std::string& text, std::size_t step) {
  std::istringstream in(text);
  std::string line, out;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      out += line + "\n";
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) < step) out += line + "\n";
  }
  return out;
}

inline std::size_t count_collapsed(const std::string& metrics_text) {
  std::istringstream in(metrics_text);
  std::string line;
  std::size_t n = 0;
  std::getline(in, line);
  while (std::getline(in, line))
    if (!line.empty() && line.back() == '1') ++n;
  return n;
}

}  // namespace detail

inline RunRecord load_finished_run(const std::filesystem::path& dir) {
  RunRecord r;
  r.dir = dir;
  r.config = resolve_config(parse_config_text(read_text_file(dir / "config.txt"), (dir / "config.txt").string()));
  r.run_id = r.config.run_id;
  const auto st = detail::read_kv_file(dir / "status.txt");
  r.status = st.count("status") ? st.at("status") : "unknown";
  r.collapsed_steps = st.count("collapsed_steps") ? std::stoull(st.at("collapsed_steps")) : 0;
  if (st.count("error")) r.error = st.at("error");
  if (std::filesystem::exists(dir / "results.csv")) r.rows = parse_results_csv(read_text_file(dir / "results.csv"));
  return r;
}

// Trains to total_steps, evaluating at each eval_steps() point. Output files
// in the run directory: config.txt, metrics.csv, results.csv, provenance.csv,
// status.txt (written last) and checkpoints/step-N (latest only). A finished
// run with the same config is returned without recomputation; an unfinished
// one resumes from its latest checkpoint.
inline RunRecord run_experiment(const RunConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path dir = run_directory(cfg);
  const std::string hash = hex64(config_hash(cfg));
  RunRecord rec;
  rec.run_id = cfg.run_id;
  rec.config = cfg;
  rec.dir = dir;
  std::ostream* log = opt.log;

  if (opt.resume && fs::exists(dir / "status.txt")) {
    const auto st = detail::read_kv_file(dir / "status.txt");
    if (st.count("config_hash") && st.at("config_hash") == hash && st.count("status") && st.at("status") != "failed") {
      RunRecord done = load_finished_run(dir);
      done.skipped = true;
      return done;
    }
  }
  if (!opt.resume && fs::exists(dir)) fs::remove_all(dir);
  fs::remove(dir / "status.txt");
  fs::create_directories(dir);
  write_file_atomic(dir / "config.txt", config_text(cfg));

  const RunData data = load_run_data(cfg);
  if (data.train.size() < cfg.train.batch_size) throw ConfigError("train.batch_size exceeds the training set size");
  if (cfg.train.ibot_weight > 0.0 && mask_target_count(cfg.train.mask_ratio, cfg.model.grid() * cfg.model.grid()) == 0 &&
      log)
    *log << "warning: ibot_weight > 0 but mask_ratio yields empty mask plans; the iBOT term contributes 0\n";

  TrainState st;
  std::vector<ResultRow> rows;
  std::string metrics_text = "";
  bool resumed = false;
  if (opt.resume) {
    if (auto ck = detail::latest_checkpoint(dir)) {
      CheckpointInfo info;
      TrainState loaded = checkpoint_load(*ck, &info);
      if (info.extra.count("config_hash") && info.extra.at("config_hash") == hash) {
        st = std::move(loaded);
        resumed = true;
        if (fs::exists(dir / "results.csv"))
          for (auto& r : parse_results_csv(read_text_file(dir / "results.csv")))
            if (r.step <= st.step) rows.push_back(std::move(r));
        if (fs::exists(dir / "metrics.csv"))
          metrics_text = detail::truncate_metrics(read_text_file(dir / "metrics.csv"), st.step);
        if (log) *log << cfg.run_id << ": resuming from step " << st.step << "\n";
      }
    }
  }
  if (!resumed) {
    if (fs::exists(dir / "checkpoints")) fs::remove_all(dir / "checkpoints");
    st = init_train_state(cfg.model, cfg.train.seed);
    std::ostringstream h;
    write_metrics_header(h);
    metrics_text = h.str();
  }
  if (metrics_text.empty()) {
    std::ostringstream h;
    write_metrics_header(h);
    metrics_text = h.str();
  }
  write_file_atomic(dir / "metrics.csv", metrics_text);
  std::size_t collapsed_steps = detail::count_collapsed(metrics_text);

  const auto evals = eval_steps(cfg);
  auto is_eval = [&](std::size_t s) { return std::binary_search(evals.begin(), evals.end(), s); };
  auto checkpoint = [&]() {
    const fs::path target = dir / "checkpoints" / detail::step_dir_name(st.step);
    checkpoint_save(st, target, {{"config_hash", hash}, {"run_id", cfg.run_id}});
    for (const auto& e : fs::directory_iterator(dir / "checkpoints"))
      if (e.path() != target) fs::remove_all(e.path());
  };
  auto evaluate = [&]() {
    const auto t0 = std::chrono::steady_clock::now();
    for (auto& r : evaluate_model(st.teacher, cfg, data, st.step)) rows.push_back(std::move(r));
    write_file_atomic(dir / "results.csv", results_csv(rows));
    checkpoint();
    if (log) {
      *log << cfg.run_id << ": eval @" << st.step;
      for (auto it = rows.end() - 4; it != rows.end(); ++it) *log << ' ' << it->metric << '=' << it->value;
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *log << " (" << std::llround(secs * 10.0) / 10.0 << "s)\n";
    }
  };

  if (!resumed && is_eval(0)) evaluate();

  std::ofstream metrics(dir / "metrics.csv", std::ios::app);
  StepBatcher batcher(data.train.size(), cfg.train.batch_size, cfg.train.seed);
  double window = 0.0;
  while (st.step < cfg.train.total_steps) {
    if (opt.stop_after_step && st.step >= *opt.stop_after_step) {
      rec.status = "interrupted";
      rec.rows = rows;
      return rec;
    }
    const std::size_t step = st.step;
    const TrainBatch batch = make_batch(data.train, batcher.at(step), cfg.augment, cfg.model, cfg.train, step);
    if (step < cfg.eval.provenance_steps) {
      std::ostringstream prov;
      if (step == 0) prov << "step,sample,view,kind,x,y,w,h,jitter,brightness,contrast,saturation,hue,gray,blur_sigma,flip,solarize,threshold\n";
      for (std::size_t k = 0; k < batch.views.size(); ++k) {
        std::ostringstream rec_os;
        write_provenance(rec_os, batch.sample_ids[k], batch.views[k]);
        std::istringstream lines(rec_os.str());
        std::string l;
        while (std::getline(lines, l)) prov << step << ',' << l << '\n';
      }
      std::ofstream pf(dir / "provenance.csv", step == 0 ? std::ios::trunc : std::ios::app);
      pf << prov.str();
    }
    const StepMetrics m = train_step(st, batch, cfg.train);
    write_metrics_row(metrics, m);
    metrics.flush();
    collapsed_steps += m.collapsed;
    window += m.wallclock_s;
    if (log && cfg.eval.log_every && (st.step % cfg.eval.log_every == 0)) {
      *log << cfg.run_id << ": step " << st.step << "/" << cfg.train.total_steps << " dino " << m.dino_loss << " ibot "
           << m.ibot_loss << " H_t " << m.teacher_entropy << " |g| " << m.grad_norm << " ("
           << window / static_cast<double>(cfg.eval.log_every) << " s/step)\n";
      window = 0.0;
    }
    if (is_eval(st.step)) evaluate();
  }
  metrics.close();

  rec.collapsed_steps = collapsed_steps;
  rec.status = static_cast<double>(collapsed_steps) > 0.1 * static_cast<double>(cfg.train.total_steps) ? "collapsed"
                                                                                                      : "ok";
  rec.rows = rows;
  std::ostringstream status;
  status << "status=" << rec.status << "\nconfig_hash=" << hash << "\ncollapsed_steps=" << collapsed_steps << "\n";
  write_file_atomic(dir / "status.txt", status.str());
  return rec;
}

// ---------------------------------------------------------------------------
// Grids and reports

struct GridSpec {
  ConfigEntries base;
  std::vector<std::string> modes;
  std::vector<std::size_t> n_samples;
  std::vector<std::size_t> total_steps;
  std::vector<std::string> model_presets;
};

// Same key=value format as run configs; `grid.mode`, `grid.n_samples`,
// `grid.total_steps` and `grid.model_preset` take comma-separated lists.
inline GridSpec parse_grid_spec(const std::string& text, const std::string& origin = "grid") {
  GridSpec g;
  for (auto& [k, v] : parse_config_text(text, origin)) {
    auto list = [&] {
      std::vector<std::string> out;
      for (auto& s : detail::split(v, ',')) {
        auto t = detail::trim(s);
        if (!t.empty()) out.push_back(t);
      }
      return out;
    };
    if (k == "grid.mode") {
      for (auto& s : list()) {
        parse_mode(s);
        g.modes.push_back(s);
      }
    } else if (k == "grid.n_samples") {
      for (auto& s : list()) g.n_samples.push_back(detail::parse_value<std::size_t>(k, s));
    } else if (k == "grid.total_steps") {
      for (auto& s : list()) g.total_steps.push_back(detail::parse_value<std::size_t>(k, s));
    } else if (k == "grid.model_preset") {
      g.model_presets = list();
    } else if (k.rfind("grid.", 0) == 0) {
      throw ConfigError("unknown key: " + k);
    } else {
      g.base.emplace_back(k, v);
    }
  }
  resolve_config(g.base);
  return g;
}

inline GridSpec load_grid_spec(const std::filesystem::path& path) {
  return parse_grid_spec(read_text_file(path), path.string());
}

// Cartesian product, model preset outermost and mode innermost. Each cell
// lives under <base output_dir>/<base run id>/<cell id>.
inline std::vector<RunConfig> grid_cells(const GridSpec& g) {
  const RunConfig base = resolve_config(g.base);
  auto or_base = [](auto list, auto value) {
    if (list.empty()) list.push_back(value);
    return list;
  };
  const auto models = or_base(g.model_presets, base.model_preset);
  const auto steps = or_base(g.total_steps, base.train.total_steps);
  const auto sizes = or_base(g.n_samples, base.data.n_samples);
  const auto modes = or_base(g.modes, std::string(mode_name(base.augment.mode)));
  std::vector<RunConfig> cells;
  std::set<std::string> ids;
  for (const auto& mp : models)
    for (auto s : steps)
      for (auto n : sizes)
        for (const auto& mode : modes) {
          ConfigEntries e = g.base;
          e.emplace_back("model.preset", mp);
          e.emplace_back("train.total_steps", std::to_string(s));
          e.emplace_back("data.n_samples", std::to_string(n));
          e.emplace_back("mode", mode);
          const std::string id = base.run_id + "-" + mode + "-n" + std::to_string(n) + "-s" + std::to_string(s) + "-" + mp;
          e.emplace_back("run.id", id);
          e.emplace_back("run.output_dir", (std::filesystem::path(base.output_dir) / base.run_id).string());
          if (!ids.insert(id).second) throw ConfigError("grid: duplicate cell id " + id);
          cells.push_back(resolve_config(e));
        }
  return cells;
}

inline std::filesystem::path grid_directory(const GridSpec& g) {
  const RunConfig base = resolve_config(g.base);
  std::filesystem::path p = base.output_dir;
  if (p.is_relative()) p = output_root() / p;
  return p / base.run_id;
}

namespace detail {
inline int mode_rank(const std::string& m) {
  try {
    return static_cast<int>(parse_mode(m));
  } catch (const ConfigError&) {
    return 99;
  }
}
inline std::string csv_safe(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}
}  // namespace detail

// Writes into `dir`:
//   summary.csv  run_id,mode,n_samples,steps,model,metric,value,status
//                one row per (run, metric) at the run's final step
//   tidy.csv     mode,n_samples,steps,model,metric,value over every eval step,
//                sorted by those keys (mode in its canonical order)
//   gaps.csv     model,steps,n_samples,original,crop,gap of final linear-probe
//                accuracy, for each setting where both modes ran
inline void write_report(std::vector<RunRecord> runs, const std::filesystem::path& dir) {
  if (runs.empty()) throw HarnessError("write_report: empty summary");
  // Same order however the runs were collected.
  std::stable_sort(runs.begin(), runs.end(), [](const RunRecord& a, const RunRecord& b) {
    const auto key = [](const RunRecord& r) {
      return std::make_tuple(r.config.model_preset, r.config.train.total_steps, r.config.data.n_samples,
                             detail::mode_rank(std::string(mode_name(r.config.augment.mode))), r.run_id);
    };
    return key(a) < key(b);
  });
  std::filesystem::create_directories(dir);
  std::ostringstream summary;
  summary << "run_id,mode,n_samples,steps,model,metric,value,status\n";
  struct Tidy {
    int rank;
    std::string mode;
    std::size_t n, steps;
    std::string model, metric, value;
  };
  std::vector<Tidy> tidy;
  std::map<std::tuple<std::string, std::size_t, std::size_t>, std::map<std::string, std::string>> finals;
  for (const auto& r : runs) {
    const auto& c = r.config;
    const std::string mode(mode_name(c.augment.mode));
    bool any = false;
    for (const auto& row : r.rows) {
      tidy.push_back({detail::mode_rank(row.mode), row.mode, row.n_samples, row.step, row.model, row.metric, row.value});
      if (row.step != c.train.total_steps) continue;
      any = true;
      summary << r.run_id << ',' << row.mode << ',' << row.n_samples << ',' << c.train.total_steps << ',' << row.model
              << ',' << row.metric << ',' << row.value << ',' << r.status << '\n';
      if (row.metric == "linear_probe_acc")
        finals[{row.model, c.train.total_steps, row.n_samples}][row.mode] = row.value;
    }
    if (!any)
      summary << r.run_id << ',' << mode << ',' << c.data.n_samples << ',' << c.train.total_steps << ','
              << c.model_preset << ",error," << detail::csv_safe(r.error.empty() ? r.status : r.error) << ','
              << r.status << '\n';
  }
  std::sort(tidy.begin(), tidy.end(), [](const Tidy& a, const Tidy& b) {
    return std::tie(a.rank, a.mode, a.n, a.steps, a.model, a.metric) <
           std::tie(b.rank, b.mode, b.n, b.steps, b.model, b.metric);
  });
  std::ostringstream t;
  t << "mode,n_samples,steps,model,metric,value\n";
  for (const auto& x : tidy)
    t << x.mode << ',' << x.n << ',' << x.steps << ',' << x.model << ',' << x.metric << ',' << x.value << '\n';
  std::ostringstream gaps;
  gaps << "model,steps,n_samples,original,crop,gap\n";
  for (const auto& [key, by_mode] : finals) {
    auto o = by_mode.find("original"), c = by_mode.find("crop");
    if (o == by_mode.end() || c == by_mode.end()) continue;
    const double gap = std::stod(o->second) - std::stod(c->second);
    gaps << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ',' << o->second << ','
         << c->second << ',' << detail::format_double(gap) << '\n';
  }
  write_file_atomic(dir / "summary.csv", summary.str());
  write_file_atomic(dir / "tidy.csv", t.str());
  write_file_atomic(dir / "gaps.csv", gaps.str());
}

// Runs every cell (finished cells are reused, failures recorded), then
// writes the report next to the cells.
inline std::vector<RunRecord> run_grid(const GridSpec& g, const RunOptions& opt = {}) {
  std::vector<RunRecord> out;
  for (const auto& cell : grid_cells(g)) {
    try {
      out.push_back(run_experiment(cell, opt));
    } catch (const std::exception& e) {
      RunRecord r;
      r.run_id = cell.run_id;
      r.config = cell;
      r.status = "failed";
      r.error = e.what();
      r.dir = run_directory(cell);
      if (opt.log) *opt.log << cell.run_id << ": failed: " << e.what() << "\n";
      try {
        std::ostringstream s;
        s << "status=failed\nerror=" << detail::csv_safe(e.what()) << "\n";
        write_file_atomic(r.dir / "status.txt", s.str());
      } catch (...) {
      }
      out.push_back(std::move(r));
    }
  }
  write_report(out, grid_directory(g));
  return out;
}

// Collects every finished run directory below `dir` and reports on them.
inline std::vector<RunRecord> report_directory(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> found;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "status.txt" &&
        std::filesystem::exists(e.path().parent_path() / "config.txt"))
      found.push_back(e.path().parent_path());
  std::sort(found.begin(), found.end());
  std::vector<RunRecord> runs;
  for (const auto& p : found) runs.push_back(load_finished_run(p));
  write_report(runs, dir);
  return runs;
}

struct ProbeData {
  Dataset train;
  Dataset val;
};

// `synthetic[:n_train[:n_val]]` or `cifar:<train files, comma separated>:<test file>`.
inline ProbeData load_dataset_selector(const std::string& sel, std::uint64_t seed = 0) {
  const auto parts = detail::split(sel, ':');
  if (parts.empty()) throw ConfigError("empty dataset selector");
  ProbeData d;
  if (parts[0] == "synthetic") {
    if (parts.size() > 3) throw ConfigError("dataset selector: expected synthetic[:n_train[:n_val]], got '" + sel + "'");
    DataConfig dc;
    dc.seed = seed;
    const std::size_t n_train = parts.size() > 1 ? detail::parse_value<std::size_t>("n_train", parts[1]) : 5000;
    const std::size_t n_val = parts.size() > 2 ? detail::parse_value<std::size_t>("n_val", parts[2]) : dc.n_val;
    if (n_train > dc.pool_size) throw ConfigError("dataset selector: n_train exceeds the pool size");
    const SyntheticSpec spec = dc.synthetic_spec();
    d.train = synth_generate_indices(spec, nested_subsample_indices(dc.pool_size, n_train, seed));
    std::vector<std::size_t> val_idx(n_val);
    std::iota(val_idx.begin(), val_idx.end(), dc.pool_size);
    d.val = synth_generate_indices(spec, val_idx);
  } else if (parts[0] == "cifar") {
    if (parts.size() != 3) throw ConfigError("dataset selector: expected cifar:<train,...>:<test>, got '" + sel + "'");
    d.train = load_cifar_binary(detail::split(parts[1], ','));
    d.val = load_cifar_binary(parts[2]);
  } else {
    throw ConfigError("dataset selector: unknown source '" + parts[0] + "' (expected synthetic or cifar)");
  }
  return d;
}

}  // namespace jea
