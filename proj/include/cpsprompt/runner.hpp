#pragma once

// Batch experiment orchestration behind the cpsp command line: configuration
// resolution, run directories, summary CSV and SVG charts.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cpsprompt/harness.hpp"
#include "cpsprompt/vit.hpp"

namespace cpsp::runner {

struct RunConfig {
  std::string command = "run";
  std::string method = "cps";
  harness::SyntheticSpec stream;
  std::string stream_path;  // load a dumped stream instead of generating one
  vit::BackboneConfig backbone;
  std::string checkpoint;   // pretrained backbone stem; empty means pretrain
  harness::PretrainConfig pretrain;
  harness::Hyper hyper;
  std::vector<std::uint64_t> seeds{0};
  std::string out_dir;
  std::size_t workers = 1;
  std::string sweep_axis = "r";
  std::vector<double> sweep_values{0.2, 0.4, 0.6, 0.8};
  std::string plot_x = "value";
  std::string plot_y = "acc";

  RunConfig();
  // Range checks; the message names the offending key. ConfigError.
  void validate() const;
  // Nested resolved form; reading it back through resolve() gives an equal config.
  nlohmann::json to_json() const;
};

using Overrides = std::vector<std::pair<std::string, std::string>>;

// Every accepted dotted key, in resolved-JSON order.
std::vector<std::string> config_keys();
// Sets one dotted key from its text form. ConfigError on an unknown key or
// unparsable value.
void apply(RunConfig& config, const std::string& key, const std::string& value);

// `key = value` lines with `#` comments; `[section]` prefixes later keys with
// "section.". A file whose first non-blank character is `{` is read as JSON
// (as written by to_json). ConfigError on malformed input.
Overrides read_config_file(const std::filesystem::path& path);
Overrides parse_config_text(const std::string& text);

// Defaults, then the file, then the overrides; validated. The output
// directory falls back to CPSP_OUT_DIR and then "cpsp_out".
RunConfig resolve(const std::optional<std::filesystem::path>& file, const Overrides& overrides);

std::vector<std::uint64_t> parse_seeds(const std::string& text);  // "0,3,5" or "0..9"

// One summary CSV row. Absent metrics are written as empty cells.
struct SummaryRow {
  std::string run_id;
  std::string method;
  std::string axis;
  double value = 0.0;
  std::uint64_t seed = 0;
  double acc = 0.0;
  std::optional<double> fgt;
  std::optional<double> hit_rate;
  std::size_t peak_live_elements = 0;
  std::size_t predicted_peak = 0;
  std::uint64_t total_macs = 0;
  double macs_per_step = 0.0;
  double wall_time_s = 0.0;

  friend bool operator==(const SummaryRow&, const SummaryRow&) = default;
};

// Header row starts with "schema=1"; values round-trip exactly.
std::string csv_header();
std::string to_csv(const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> parse_csv(const std::string& text);  // DataError
std::vector<SummaryRow> read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);

// Numeric CSV column by name ("value", "acc", "peak_live_elements", ...).
double column(const SummaryRow& row, const std::string& name);  // ConfigError on unknown names

// Line chart: one polyline per method label, y averaged over rows sharing x.
// Byte-identical output for identical input.
std::string render_svg(const std::vector<SummaryRow>& rows, const std::string& x, const std::string& y);

// Stream, pretrained backbone and its frozen views for a config.
struct Workspace {
  harness::Stream stream;
  vit::Backbone backbone;
  harness::StreamCache cache;
};

using Log = std::function<void(const std::string&)>;

// Generates (or loads) the stream, then loads `checkpoint`, reuses
// <out>/backbone when its manifest matches, or pretrains and saves there.
Workspace prepare_workspace(const RunConfig& config, const Log& log = {});
harness::PretrainReport pretrain_to(const RunConfig& config, const std::filesystem::path& stem, const Log& log = {});

// One run_sequence per job, on `workers` threads. Each job writes
// <out>/<run_id>/{config.json, trace.jsonl, result.json}; the returned rows
// (also written to <out>/summary.csv) keep the job order.
struct Job {
  std::string run_id;
  std::string label;
  std::string axis;
  double value = 0.0;
  RunConfig config;  // single seed
};

std::vector<Job> plan_run(const RunConfig& config);
std::vector<Job> plan_sweep(const RunConfig& config);
// full, pd, cps, pd+dpct, cps+dpct at the configured r; single-phase variants
// use phase ratio 1.
std::vector<Job> plan_ablate(const RunConfig& config);

std::vector<SummaryRow> execute(const RunConfig& config, const std::vector<Job>& jobs, const Log& log = {});
std::vector<SummaryRow> execute(const Workspace& ws, const RunConfig& config, const std::vector<Job>& jobs,
                                const Log& log = {});

// Rebuilds the job of a run directory's config.json and reruns it.
harness::RunResult replay(const std::filesystem::path& run_dir, const Log& log = {});

}  // namespace cpsp::runner
