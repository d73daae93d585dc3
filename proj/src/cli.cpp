#include "anomseg/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "anomseg/checkpoint.hpp"
#include "anomseg/config.hpp"
#include "anomseg/datagen.hpp"
#include "anomseg/metrics.hpp"
#include "anomseg/svg_plot.hpp"
#include "anomseg/trainer.hpp"

namespace anomseg::cli {

namespace fs = std::filesystem;

namespace {

fs::path resolve_out(const std::string& out) {
  fs::path p(out);
  const char* root = std::getenv("ANOMSEG_OUTPUT_ROOT");
  if (root && *root && p.is_relative()) return fs::path(root) / p;
  return p;
}

void write_snapshot(const fs::path& dir, const std::string& name,
                    const std::vector<std::pair<std::string, std::string>>& kv) {
  fs::create_directories(dir);
  std::ofstream out(dir / name);
  if (!out) throw IoError("cannot write " + (dir / name).string());
  for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

datagen::SceneSpec scene_spec_from_file(const fs::path& path) {
  datagen::SceneSpec spec;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scene spec file: " + path.string());
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    try {
      if (key == "height") spec.height = std::stoi(value);
      else if (key == "width") spec.width = std::stoi(value);
      else if (key == "num_background_classes") spec.num_background_classes = std::stoi(value);
      else if (key == "rng_seed") spec.rng_seed = std::stoull(value);
      else if (key == "anomaly_shapes") {
        spec.anomaly_shapes.clear();
        std::istringstream ss(value);
        std::string tok;
        while (std::getline(ss, tok, ','))
          spec.anomaly_shapes.push_back(datagen::shape_from_string(trim(tok)));
      } else {
        throw ConfigError("scene spec: unknown field '" + key + "'");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("scene spec: bad value for field '" + key + "': " + value);
    }
  }
  spec.validate();
  return spec;
}

std::string shapes_to_string(const std::vector<datagen::ShapeKind>& shapes) {
  std::string s;
  for (size_t i = 0; i < shapes.size(); ++i) {
    if (i) s += ",";
    s += datagen::to_string(shapes[i]);
  }
  return s;
}

datagen::Dataset load_data_dir(const std::string& dir) {
  fs::path p(dir);
  if (!fs::exists(p)) throw ConfigError("data directory not found: " + dir);
  return datagen::read_dataset(p);
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& out, const std::string& spec_file, long count, uint64_t seed) {
  datagen::SceneSpec spec;
  if (!spec_file.empty()) spec = scene_spec_from_file(spec_file);
  spec.validate();
  if (count < 1) throw ConfigError("--count must be >= 1");
  fs::path out_dir = resolve_out(out);

  std::vector<datagen::Sample> samples;
  for (long i = 0; i < count; ++i)
    samples.push_back(datagen::synth_voidclass(spec, seed + static_cast<uint64_t>(i)));
  for (long i = 0; i < count; ++i)
    samples.push_back(datagen::synth_anomalymix(spec, seed + static_cast<uint64_t>(i)));
  datagen::write_dataset(samples, out_dir, spec);

  write_snapshot(out_dir, "resolved_synth.cfg",
                 {{"height", std::to_string(spec.height)},
                  {"width", std::to_string(spec.width)},
                  {"num_background_classes", std::to_string(spec.num_background_classes)},
                  {"anomaly_shapes", shapes_to_string(spec.anomaly_shapes)},
                  {"rng_seed", std::to_string(spec.rng_seed)},
                  {"count", std::to_string(count)},
                  {"seed", std::to_string(seed)}});
  std::cout << "wrote " << samples.size() << " samples to " << out_dir.string() << "\n";
  return 0;
}

int cmd_train(const std::string& data, const std::string& config, const std::string& out,
              const std::vector<std::string>& overrides, const std::string& resume) {
  datagen::Dataset ds = load_data_dir(data);
  fs::path out_dir = resolve_out(out);

  train::TrainerState st;
  if (!resume.empty()) {
    if (!config.empty() || !overrides.empty())
      throw ConfigError("--resume uses the checkpoint's config; drop --config/--override");
    if (!fs::exists(resume)) throw ConfigError("checkpoint not found: " + resume);
    st = train::load_checkpoint(resume);
    if (st.net_cfg.in_h != ds.manifest.spec.height || st.net_cfg.in_w != ds.manifest.spec.width)
      throw ConfigError("checkpoint input size does not match the dataset");
  } else {
    train::TrainConfig cfg =
        config.empty() ? train::TrainConfig::from_overrides(overrides)
                       : train::TrainConfig::from_file(config, overrides);
    if (cfg.num_classes < ds.manifest.spec.num_background_classes)
      throw ConfigError("num_classes must cover the dataset's background classes");
    st = train::TrainerState::create(cfg, ds.manifest.spec.height, ds.manifest.spec.width);
  }

  train::RunResult res = train::train_run(st, ds, out_dir);
  std::cout << "trained " << res.reports.size() << " iterations, checkpoint at "
            << res.final_checkpoint.string() << "\n";
  return 0;
}

void write_eval_outputs(const fs::path& out_dir, const metrics::EvalReport& rep,
                        const std::vector<metrics::EvalPair>& pairs) {
  fs::create_directories(out_dir);
  {
    std::ofstream j(out_dir / "eval_report.json");
    if (!j) throw IoError("cannot write eval_report.json");
    j << metrics::report_to_json(rep);
  }
  {
    std::ofstream c(out_dir / "eval_report.csv");
    if (!c) throw IoError("cannot write eval_report.csv");
    c << metrics::report_to_csv(rep);
  }
  {
    std::ofstream p(out_dir / "pr_points.csv");
    if (!p) throw IoError("cannot write pr_points.csv");
    p << "recall,precision\n";
    for (const metrics::PrPoint& pt : metrics::pr_curve(pairs))
      p << fmt_g17(pt.recall) << "," << fmt_g17(pt.precision) << "\n";
  }
}

int cmd_eval(const std::string& data, const std::string& checkpoint, const std::string& out) {
  datagen::Dataset ds = load_data_dir(data);
  if (!fs::exists(checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint);
  train::TrainerState st = train::load_checkpoint(checkpoint);
  fs::path out_dir = resolve_out(out);

  std::vector<metrics::EvalPair> pairs;
  for (const datagen::Sample& s : ds.samples)
    pairs.push_back({train::score_sample(st, s), s.gt});
  metrics::EvalReport rep = train::evaluate_dataset(st, ds);

  write_eval_outputs(out_dir, rep, pairs);
  write_snapshot(out_dir, "resolved_eval.cfg",
                 {{"data", data}, {"checkpoint", checkpoint}});
  std::cout << "ap_pct " << rep.ap * 100.0 << " fpr95_pct " << rep.fpr95 * 100.0 << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct AblationRow {
  std::string label;
  bool single_v = false, single_a = false;
  bool oda = false, fda = false, dls = false, pcl = false, cpcl = false, as = false;
};

const std::vector<AblationRow>& ablation_rows() {
  static const std::vector<AblationRow> rows = {
      {"voidclass", true, false, false, false, false, false, false, false},
      {"anomalymix", false, true, false, false, false, false, false, false},
      {"mix", false, false, false, false, false, false, false, false},
      {"multi_oda", false, false, true, false, false, false, false, false},
      {"multi_oda_fda", false, false, true, true, false, false, false, false},
      {"multi_mdat", false, false, true, true, true, false, false, false},
      {"mdat_pcl", false, false, true, true, true, true, false, false},
      {"mdat_cpcl", false, false, true, true, true, false, true, false},
      {"mdat_cacl", false, false, true, true, true, false, true, true},
  };
  return rows;
}

datagen::Dataset filter_domain(const datagen::Dataset& ds, Domain d) {
  datagen::Dataset out;
  out.manifest.format_version = ds.manifest.format_version;
  out.manifest.generator = ds.manifest.generator;
  out.manifest.spec = ds.manifest.spec;
  bool aligned = ds.manifest.samples.size() == ds.samples.size();
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    if (ds.samples[i].domain != d) continue;
    out.samples.push_back(ds.samples[i]);
    if (aligned) out.manifest.samples.push_back(ds.manifest.samples[i]);
  }
  return out;
}

// Held-out evaluation triple: in-domain V, in-domain A, and a shifted domain
// with fresh palettes, unseen shape families and style-consistent anomalies.
struct EvalSets {
  datagen::Dataset eval_v, eval_a, shifted;
};

datagen::SceneSpec shifted_spec(const datagen::SceneSpec& base, int max_classes) {
  datagen::SceneSpec s = base;
  s.num_background_classes = std::min(base.num_background_classes + 1, max_classes);
  std::vector<datagen::ShapeKind> all = {datagen::ShapeKind::disk, datagen::ShapeKind::rectangle,
                                         datagen::ShapeKind::triangle, datagen::ShapeKind::blob};
  std::vector<datagen::ShapeKind> unseen;
  for (datagen::ShapeKind k : all)
    if (std::find(base.anomaly_shapes.begin(), base.anomaly_shapes.end(), k) ==
        base.anomaly_shapes.end())
      unseen.push_back(k);
  if (!unseen.empty()) s.anomaly_shapes = unseen;
  s.rng_seed = base.rng_seed ^ 0x736869667465644cULL;
  return s;
}

EvalSets make_eval_sets(const datagen::SceneSpec& train_spec, int max_classes, long count,
                        uint64_t seed_base) {
  EvalSets sets;
  datagen::SceneSpec shifted = shifted_spec(train_spec, max_classes);
  for (long i = 0; i < count; ++i) {
    uint64_t s = seed_base + static_cast<uint64_t>(i);
    sets.eval_v.samples.push_back(datagen::synth_voidclass(train_spec, s));
    sets.eval_a.samples.push_back(datagen::synth_anomalymix(train_spec, s));
    sets.shifted.samples.push_back(datagen::synth_voidclass(shifted, s));
  }
  sets.eval_v.manifest.spec = train_spec;
  sets.eval_a.manifest.spec = train_spec;
  sets.shifted.manifest.spec = shifted;
  return sets;
}

std::string pct2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  if (n == 0) return 0.0;
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_ablate(const std::string& data, const std::string& out, const std::string& seeds_csv,
               const std::string& config, const std::vector<std::string>& overrides,
               long eval_count) {
  datagen::Dataset ds = load_data_dir(data);
  fs::path out_dir = resolve_out(out);
  fs::create_directories(out_dir);

  std::vector<uint64_t> seeds;
  {
    std::istringstream ss(seeds_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = trim(tok);
      if (tok.empty()) continue;
      try {
        seeds.push_back(std::stoull(tok));
      } catch (const std::exception&) {
        throw ConfigError("--seeds: bad seed '" + tok + "'");
      }
    }
  }
  if (seeds.empty()) throw ConfigError("--seeds must list at least one seed");

  train::TrainConfig base = config.empty() ? train::TrainConfig::from_overrides(overrides)
                                           : train::TrainConfig::from_file(config, overrides);
  if (base.num_classes < ds.manifest.spec.num_background_classes + 1)
    throw ConfigError("ablation needs num_classes >= dataset classes + 1 for the shifted domain");

  EvalSets evals = make_eval_sets(ds.manifest.spec, base.num_classes, eval_count,
                                  1ULL << 40);
  datagen::Dataset only_v = filter_domain(ds, Domain::V);
  datagen::Dataset only_a = filter_domain(ds, Domain::A);

  std::ofstream per_seed(out_dir / "ablation_per_seed.csv");
  per_seed << "row,seed,ap_eval_v,fpr95_eval_v,ap_eval_a,fpr95_eval_a,ap_shifted,fpr95_shifted\n";

  struct RowResult {
    std::vector<double> ap[3], fpr[3];
  };
  std::vector<RowResult> results(ablation_rows().size());

  for (size_t ri = 0; ri < ablation_rows().size(); ++ri) {
    const AblationRow& row = ablation_rows()[ri];
    for (uint64_t seed : seeds) {
      train::TrainConfig cfg = base;
      cfg.oda = row.oda;
      cfg.fda = row.fda;
      cfg.dls = row.dls;
      cfg.pcl = row.pcl;
      cfg.cpcl = row.cpcl;
      cfg.as = row.as;
      cfg.seed = seed;
      cfg.validate();

      const datagen::Dataset& train_ds = row.single_v ? only_v : row.single_a ? only_a : ds;
      fs::path run_dir = out_dir / ("row_" + row.label) / ("seed_" + std::to_string(seed));
      train::TrainerState st =
          train::TrainerState::create(cfg, ds.manifest.spec.height, ds.manifest.spec.width);
      train::train_run(st, train_ds, run_dir);

      const datagen::Dataset* eval_sets[3] = {&evals.eval_v, &evals.eval_a, &evals.shifted};
      double ap[3], fpr[3];
      for (int e = 0; e < 3; ++e) {
        metrics::EvalReport rep = train::evaluate_dataset(st, *eval_sets[e]);
        ap[e] = rep.ap;
        fpr[e] = rep.fpr95;
        results[ri].ap[e].push_back(rep.ap);
        results[ri].fpr[e].push_back(rep.fpr95);
      }
      per_seed << row.label << "," << seed;
      for (int e = 0; e < 3; ++e) per_seed << "," << pct2(ap[e]) << "," << pct2(fpr[e]);
      per_seed << "\n";
    }
  }

  std::ofstream table(out_dir / "ablation.csv");
  table << "row,oda,fda,dls,pcl,cpcl,as,"
           "ap_eval_v,fpr95_eval_v,ap_eval_a,fpr95_eval_a,ap_shifted,fpr95_shifted\n";
  for (size_t ri = 0; ri < ablation_rows().size(); ++ri) {
    const AblationRow& row = ablation_rows()[ri];
    table << row.label << "," << row.oda << "," << row.fda << "," << row.dls << "," << row.pcl
          << "," << row.cpcl << "," << row.as;
    for (int e = 0; e < 3; ++e)
      table << "," << pct2(median(results[ri].ap[e])) << "," << pct2(median(results[ri].fpr[e]));
    table << "\n";
  }

  write_snapshot(out_dir, "resolved_ablate.cfg",
                 {{"data", data},
                  {"seeds", seeds_csv},
                  {"eval_count", std::to_string(eval_count)},
                  {"base_config", base.serialize()}});
  std::cout << "ablation table written to " << (out_dir / "ablation.csv").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) t.header.push_back(tok);
  }
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::istringstream ss(line);
    std::string tok;
    std::vector<double> row;
    while (std::getline(ss, tok, ',')) row.push_back(std::stod(tok));
    t.rows.push_back(std::move(row));
  }
  return t;
}

long column_of(const CsvTable& t, const std::string& name) {
  for (size_t i = 0; i < t.header.size(); ++i)
    if (t.header[i] == name) return static_cast<long>(i);
  throw IoError("csv column not found: " + name);
}

int cmd_plot(const std::string& run, const std::string& out) {
  fs::path run_dir(run);
  if (!fs::exists(run_dir)) throw ConfigError("run directory not found: " + run);
  fs::path out_dir = resolve_out(out);
  fs::create_directories(out_dir);
  bool plotted = false;

  fs::path loss_csv = run_dir / "loss.csv";
  if (fs::exists(loss_csv)) {
    CsvTable t = read_csv(loss_csv);
    long it_col = column_of(t, "iteration");
    auto series_of = [&](const std::string& col) {
      plot::Series s;
      s.label = col;
      long c = column_of(t, col);
      for (const auto& row : t.rows) {
        s.x.push_back(row[static_cast<size_t>(it_col)]);
        s.y.push_back(row[static_cast<size_t>(c)]);
      }
      return s;
    };
    plot::write_svg(out_dir / "loss_curve.svg", "training loss",
                    {series_of("l_total"), series_of("l_ce")});
    plotted = true;

    // schedules from their closed forms over the full horizon
    fs::path cfg_path = run_dir / "resolved_config.cfg";
    if (fs::exists(cfg_path) && !t.rows.empty()) {
      train::TrainConfig cfg = train::TrainConfig::from_file(cfg_path);
      long max_i = static_cast<long>(t.rows.back()[static_cast<size_t>(it_col)]) + 1;
      std::ofstream tau_csv(out_dir / "tau_schedule.csv");
      tau_csv << "iteration,tau\n";
      std::ofstream lr_csv(out_dir / "lr_schedule.csv");
      lr_csv << "iteration,lr\n";
      plot::Series tau_s{"tau", {}, {}}, lr_s{"lr", {}, {}};
      for (long i = 0; i <= max_i; ++i) {
        double tau = cfg.dls ? cfg.tau_base - (cfg.tau_base - 0.5) * static_cast<double>(i) /
                                                  static_cast<double>(max_i)
                             : cfg.tau_base;
        double lr = train::poly_lr(i, max_i, cfg.lr, cfg.poly_power);
        tau_csv << i << "," << fmt_g17(tau) << "\n";
        lr_csv << i << "," << fmt_g17(lr) << "\n";
        tau_s.x.push_back(static_cast<double>(i));
        tau_s.y.push_back(tau);
        lr_s.x.push_back(static_cast<double>(i));
        lr_s.y.push_back(lr);
      }
      plot::write_svg(out_dir / "tau_schedule.svg", "domain label smoothing schedule", {tau_s});
      plot::write_svg(out_dir / "lr_schedule.svg", "learning rate schedule", {lr_s});
    }
  }

  fs::path pr_csv = run_dir / "pr_points.csv";
  if (fs::exists(pr_csv)) {
    CsvTable t = read_csv(pr_csv);
    plot::Series s{"precision-recall", {}, {}};
    long rc = column_of(t, "recall"), pc = column_of(t, "precision");
    for (const auto& row : t.rows) {
      s.x.push_back(row[static_cast<size_t>(rc)]);
      s.y.push_back(row[static_cast<size_t>(pc)]);
    }
    plot::write_svg(out_dir / "pr_curve.svg", "precision-recall", {s});
    plotted = true;
  }

  if (!plotted)
    throw ConfigError("no plottable artifacts (loss.csv or pr_points.csv) in " + run);
  write_snapshot(out_dir, "resolved_plot.cfg", {{"run", run}});
  std::cout << "plots written to " << out_dir.string() << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"anomaly-segmentation training toolkit"};
  app.require_subcommand(1);

  std::string out, spec_file, data, config, checkpoint, resume, run_dir, seeds = "1,2,3";
  std::vector<std::string> overrides;
  long count = 8;
  uint64_t seed = 0;
  long eval_count = 16;

  CLI::App* synth = app.add_subcommand("synth", "generate a two-domain toy dataset");
  synth->add_option("--out", out)->required();
  synth->add_option("--spec", spec_file);
  synth->add_option("--count", count, "samples per domain");
  synth->add_option("--seed", seed);

  CLI::App* train_cmd = app.add_subcommand("train", "train on a generated dataset");
  train_cmd->add_option("--data", data)->required();
  train_cmd->add_option("--config", config);
  train_cmd->add_option("--out", out)->required();
  train_cmd->add_option("--override", overrides, "key=value config overrides");
  train_cmd->add_option("--resume", resume, "checkpoint to resume from");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--data", data)->required();
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--out", out)->required();

  CLI::App* ablate = app.add_subcommand("ablate", "run the switch-matrix ablation sweep");
  ablate->add_option("--data", data)->required();
  ablate->add_option("--out", out)->required();
  ablate->add_option("--seeds", seeds, "comma-separated seeds");
  ablate->add_option("--config", config, "base config file");
  ablate->add_option("--override", overrides, "key=value overrides for the base config");
  ablate->add_option("--eval-count", eval_count, "samples per evaluation set");

  CLI::App* plot = app.add_subcommand("plot", "emit figures from run artifacts");
  plot->add_option("--run", run_dir)->required();
  plot->add_option("--out", out)->required();

  std::vector<const char*> argv;
  argv.push_back("anomseg");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(out, spec_file, count, seed);
    if (train_cmd->parsed()) return cmd_train(data, config, out, overrides, resume);
    if (eval_cmd->parsed()) return cmd_eval(data, checkpoint, out);
    if (ablate->parsed()) return cmd_ablate(data, out, seeds, config, overrides, eval_count);
    if (plot->parsed()) return cmd_plot(run_dir, out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const MetricError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace anomseg::cli
