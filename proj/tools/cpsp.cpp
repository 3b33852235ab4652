// cpsp: pretrain, run, sweep, ablate, plot and replay from the command line.
// Exit codes: 0 success, 2 configuration error, 3 data error, 1 runtime abort.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cpsprompt/errors.hpp"
#include "cpsprompt/runner.hpp"
#include "cpsprompt/tensor.hpp"

namespace fs = std::filesystem;
using namespace cpsp;

namespace {

struct Flags {
  std::string config;
  std::string method, reduction_ratio, temperature, phase_ratio, epochs, tasks, seeds, out, workers;
  std::string axis, values;
  std::vector<std::string> sets;
  std::string csv, svg, x, y;
  std::string run_dir;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "Config file (key = value lines or resolved JSON)");
  cmd->add_option("--method", f.method, "cps, pd, topk, full or sgd_naive");
  cmd->add_option("--reduction-ratio", f.reduction_ratio, "Fraction of patch tokens dropped in training");
  cmd->add_option("--temperature", f.temperature, "Sampling temperature");
  cmd->add_option("--phase-ratio", f.phase_ratio, "Share of epochs in the prompt phase");
  cmd->add_option("--epochs", f.epochs, "Epochs per task");
  cmd->add_option("--tasks", f.tasks, "Number of tasks in the stream");
  cmd->add_option("--seeds", f.seeds, "Seeds: 0,1,2 or 0..9");
  cmd->add_option("--out", f.out, "Output directory (default $CPSP_OUT_DIR or cpsp_out)");
  cmd->add_option("--workers", f.workers, "Parallel runs");
  cmd->add_option("--set", f.sets, "Any config key as key=value (repeatable)");
}

runner::RunConfig resolve(const Flags& f, const std::string& command) {
  runner::Overrides o;
  o.emplace_back("command", command);
  auto put = [&](const char* key, const std::string& v) {
    if (!v.empty()) o.emplace_back(key, v);
  };
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    o.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  put("method", f.method);
  put("train.reduction_ratio", f.reduction_ratio);
  put("train.temperature", f.temperature);
  put("train.phase_ratio", f.phase_ratio);
  put("train.epochs", f.epochs);
  put("stream.tasks", f.tasks);
  put("seeds", f.seeds);
  put("out", f.out);
  put("workers", f.workers);
  put("sweep.axis", f.axis);
  put("sweep.values", f.values);
  put("plot.x", f.x);
  put("plot.y", f.y);
  return runner::resolve(f.config.empty() ? std::nullopt : std::optional<fs::path>(f.config), o);
}

void echo_config(const runner::RunConfig& c) {
  fs::create_directories(c.out_dir);
  std::ofstream os(fs::path(c.out_dir) / "config.json");
  if (!os) throw DataError("cannot write " + (fs::path(c.out_dir) / "config.json").string());
  os << c.to_json().dump(2) << "\n";
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

void print_means(const std::vector<runner::SummaryRow>& rows) {
  struct Agg {
    double acc = 0, fgt = 0, peak = 0, macs = 0;
    std::size_t n = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, Agg> agg;
  for (const auto& r : rows) {
    const std::string key = r.axis == "none" || r.axis == "r" ? r.method : r.method + " " + r.axis + "=" + std::to_string(r.value);
    if (!agg.count(key)) order.push_back(key);
    auto& a = agg[key];
    a.acc += r.acc;
    a.fgt += r.fgt.value_or(0.0);
    a.peak += static_cast<double>(r.peak_live_elements);
    a.macs += r.macs_per_step;
    a.n++;
  }
  std::printf("%-24s %8s %8s %14s %14s %5s\n", "variant", "ACC", "FGT", "peak_elems", "MACs/step", "runs");
  for (const auto& k : order) {
    const auto& a = agg[k];
    const double n = static_cast<double>(a.n);
    std::printf("%-24s %8.4f %8.4f %14.0f %14.4g %5zu\n", k.c_str(), a.acc / n, a.fgt / n, a.peak / n, a.macs / n, a.n);
  }
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Prompt-based continual learning with critical patch sampling"};
  app.require_subcommand(1);
  Flags f;

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the backbone and save it under <out>/backbone");
  add_common(pretrain, f);
  auto* run = app.add_subcommand("run", "Train the task stream once per seed");
  add_common(run, f);
  auto* sweep = app.add_subcommand("sweep", "Sweep r, tau or lambda");
  add_common(sweep, f);
  sweep->add_option("--axis", f.axis, "r, tau or lambda");
  sweep->add_option("--values", f.values, "Comma-separated axis values");
  auto* ablate = app.add_subcommand("ablate", "full, pd, cps, pd+dpct and cps+dpct at one r");
  add_common(ablate, f);
  auto* plot = app.add_subcommand("plot", "Render a summary CSV as an SVG line chart");
  plot->add_option("csv", f.csv, "Summary CSV")->required();
  plot->add_option("--svg", f.svg, "Output SVG (default: next to the CSV)");
  plot->add_option("--x", f.x, "x column (default value)");
  plot->add_option("--y", f.y, "y column (default acc)");
  plot->add_option("--config", f.config, "Config file");
  auto* replay = app.add_subcommand("replay", "Rerun a run directory and compare its accuracy matrix");
  replay->add_option("run_dir", f.run_dir, "Run directory holding config.json and result.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (pretrain->parsed()) {
      const auto c = resolve(f, "pretrain");
      echo_config(c);
      const auto rep = runner::pretrain_to(c, fs::path(c.out_dir) / "backbone", log_line);
      std::printf("pretrained backbone: %zu epochs, train accuracy %.4f\n", rep.epochs, rep.train_accuracy);
    } else if (run->parsed() || sweep->parsed() || ablate->parsed()) {
      const std::string cmd = run->parsed() ? "run" : sweep->parsed() ? "sweep" : "ablate";
      const auto c = resolve(f, cmd);
      echo_config(c);
      const auto jobs = cmd == "run" ? runner::plan_run(c) : cmd == "sweep" ? runner::plan_sweep(c) : runner::plan_ablate(c);
      const auto rows = runner::execute(c, jobs, log_line);
      print_means(rows);
      std::printf("summary: %s\n", (fs::path(c.out_dir) / "summary.csv").string().c_str());
    } else if (plot->parsed()) {
      const auto c = resolve(f, "plot");
      const auto rows = runner::read_csv(f.csv);
      const fs::path svg = f.svg.empty() ? fs::path(f.csv).replace_extension(".svg") : fs::path(f.svg);
      const std::string doc = runner::render_svg(rows, c.plot_x, c.plot_y);
      std::ofstream os(svg, std::ios::binary);
      if (!os) throw DataError("cannot write " + svg.string());
      os << doc;
      std::printf("chart: %s\n", svg.string().c_str());
    } else if (replay->parsed()) {
      const fs::path dir(f.run_dir);
      std::ifstream is(dir / "result.json");
      if (!is) throw DataError("missing " + (dir / "result.json").string());
      nlohmann::json stored;
      try {
        stored = nlohmann::json::parse(is);
      } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed result.json: " + std::string(e.what()));
      }
      const auto res = runner::replay(dir, log_line);
      const bool same = res.accuracy.to_json() == stored.at("accuracy");
      std::printf("replay %s: accuracy matrix %s\n", dir.string().c_str(), same ? "identical" : "DIFFERS");
      return same ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
