#include "cpsprompt/runner.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "cpsprompt/checkpoint.hpp"
#include "cpsprompt/cps.hpp"
#include "cpsprompt/errors.hpp"

namespace cpsp::runner {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double to_double(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size()) {
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  }
  return v;
}

std::uint64_t to_uint(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

bool to_bool(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

std::vector<std::string> list_items(const std::string& text) {
  std::string s = trim(text);
  if (s.size() >= 2 && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  for (const auto& item : split(s, ',')) out.push_back(trim(item));
  return out;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<json(const RunConfig&)> get;
};

template <class T>
Field size_field(std::string key, T RunConfig::*outer, std::size_t T::*member) {
  return {key, [=](RunConfig& c, const std::string& v) { c.*outer.*member = static_cast<std::size_t>(to_uint(key, v)); },
          [=](const RunConfig& c) { return json(c.*outer.*member); }};
}

template <class T>
Field real_field(std::string key, T RunConfig::*outer, double T::*member) {
  return {key, [=](RunConfig& c, const std::string& v) { c.*outer.*member = to_double(key, v); },
          [=](const RunConfig& c) { return json(c.*outer.*member); }};
}

const std::vector<Field>& fields() {
  using harness::Hyper;
  using harness::PretrainConfig;
  using harness::SyntheticSpec;
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back({"command", [](RunConfig& c, const std::string& v) { c.command = trim(v); },
                 [](const RunConfig& c) { return json(c.command); }});
    f.push_back({"method", [](RunConfig& c, const std::string& v) { c.method = trim(v); },
                 [](const RunConfig& c) { return json(c.method); }});
    f.push_back({"seeds", [](RunConfig& c, const std::string& v) { c.seeds = parse_seeds(v); },
                 [](const RunConfig& c) { return json(c.seeds); }});
    f.push_back({"out", [](RunConfig& c, const std::string& v) { c.out_dir = trim(v); },
                 [](const RunConfig& c) { return json(c.out_dir); }});
    f.push_back({"workers", [](RunConfig& c, const std::string& v) { c.workers = to_uint("workers", v); },
                 [](const RunConfig& c) { return json(c.workers); }});

    f.push_back({"stream.path", [](RunConfig& c, const std::string& v) { c.stream_path = trim(v); },
                 [](const RunConfig& c) { return json(c.stream_path); }});
    f.push_back(size_field("stream.grid_side", &RunConfig::stream, &SyntheticSpec::grid_side));
    f.push_back(size_field("stream.patch_dim", &RunConfig::stream, &SyntheticSpec::patch_dim));
    f.push_back(size_field("stream.classes_per_task", &RunConfig::stream, &SyntheticSpec::classes_per_task));
    f.push_back(size_field("stream.tasks", &RunConfig::stream, &SyntheticSpec::num_tasks));
    f.push_back(size_field("stream.signature_size", &RunConfig::stream, &SyntheticSpec::signature_size));
    f.push_back(real_field("stream.signal_noise", &RunConfig::stream, &SyntheticSpec::signal_noise));
    f.push_back(real_field("stream.background_noise", &RunConfig::stream, &SyntheticSpec::background_noise));
    f.push_back(size_field("stream.train_per_class", &RunConfig::stream, &SyntheticSpec::train_per_class));
    f.push_back(size_field("stream.test_per_class", &RunConfig::stream, &SyntheticSpec::test_per_class));
    f.push_back(size_field("stream.pretrain_classes", &RunConfig::stream, &SyntheticSpec::pretrain_classes));
    f.push_back({"stream.seed", [](RunConfig& c, const std::string& v) { c.stream.seed = to_uint("stream.seed", v); },
                 [](const RunConfig& c) { return json(c.stream.seed); }});

    f.push_back(size_field("backbone.layers", &RunConfig::backbone, &vit::BackboneConfig::layers));
    f.push_back(size_field("backbone.dim", &RunConfig::backbone, &vit::BackboneConfig::dim));
    f.push_back(size_field("backbone.heads", &RunConfig::backbone, &vit::BackboneConfig::heads));
    f.push_back(size_field("backbone.mlp_ratio", &RunConfig::backbone, &vit::BackboneConfig::mlp_ratio));
    f.push_back({"backbone.checkpoint", [](RunConfig& c, const std::string& v) { c.checkpoint = trim(v); },
                 [](const RunConfig& c) { return json(c.checkpoint); }});

    f.push_back(size_field("pretrain.max_epochs", &RunConfig::pretrain, &PretrainConfig::max_epochs));
    f.push_back(real_field("pretrain.target_accuracy", &RunConfig::pretrain, &PretrainConfig::target_accuracy));
    f.push_back(real_field("pretrain.min_accuracy", &RunConfig::pretrain, &PretrainConfig::min_accuracy));
    f.push_back(size_field("pretrain.batch_size", &RunConfig::pretrain, &PretrainConfig::batch_size));
    f.push_back(real_field("pretrain.lr", &RunConfig::pretrain, &PretrainConfig::lr));
    f.push_back({"pretrain.seed",
                 [](RunConfig& c, const std::string& v) { c.pretrain.seed = to_uint("pretrain.seed", v); },
                 [](const RunConfig& c) { return json(c.pretrain.seed); }});

    f.push_back(real_field("train.reduction_ratio", &RunConfig::hyper, &Hyper::reduction_ratio));
    f.push_back(real_field("train.temperature", &RunConfig::hyper, &Hyper::temperature));
    f.push_back(real_field("train.phase_ratio", &RunConfig::hyper, &Hyper::phase_ratio));
    f.push_back(size_field("train.epochs", &RunConfig::hyper, &Hyper::epochs));
    f.push_back(size_field("train.batch_size", &RunConfig::hyper, &Hyper::batch_size));
    f.push_back(real_field("train.lr", &RunConfig::hyper, &Hyper::lr));
    f.push_back({"train.log_indices",
                 [](RunConfig& c, const std::string& v) { c.hyper.log_indices = to_bool("train.log_indices", v); },
                 [](const RunConfig& c) { return json(c.hyper.log_indices); }});
    f.push_back({"train.log_ops", [](RunConfig& c, const std::string& v) { c.hyper.log_ops = to_bool("train.log_ops", v); },
                 [](const RunConfig& c) { return json(c.hyper.log_ops); }});

    f.push_back({"pool.prompt_length",
                 [](RunConfig& c, const std::string& v) { c.hyper.pool.prompt_length = to_uint("pool.prompt_length", v); },
                 [](const RunConfig& c) { return json(c.hyper.pool.prompt_length); }});
    f.push_back({"pool.quota", [](RunConfig& c, const std::string& v) { c.hyper.pool.quota = to_uint("pool.quota", v); },
                 [](const RunConfig& c) { return json(c.hyper.pool.quota); }});
    f.push_back({"pool.layers",
                 [](RunConfig& c, const std::string& v) {
                   c.hyper.pool.layers.clear();
                   for (const auto& item : list_items(v)) c.hyper.pool.layers.push_back(to_uint("pool.layers", item));
                 },
                 [](const RunConfig& c) { return json(c.hyper.pool.layers); }});
    f.push_back({"pool.freeze_old",
                 [](RunConfig& c, const std::string& v) { c.hyper.pool.freeze_old = to_bool("pool.freeze_old", v); },
                 [](const RunConfig& c) { return json(c.hyper.pool.freeze_old); }});
    f.push_back({"pool.init_std",
                 [](RunConfig& c, const std::string& v) { c.hyper.pool.prompt_init_std = to_double("pool.init_std", v); },
                 [](const RunConfig& c) { return json(c.hyper.pool.prompt_init_std); }});

    f.push_back({"sweep.axis", [](RunConfig& c, const std::string& v) { c.sweep_axis = trim(v); },
                 [](const RunConfig& c) { return json(c.sweep_axis); }});
    f.push_back({"sweep.values",
                 [](RunConfig& c, const std::string& v) {
                   c.sweep_values.clear();
                   for (const auto& item : list_items(v)) c.sweep_values.push_back(to_double("sweep.values", item));
                 },
                 [](const RunConfig& c) { return json(c.sweep_values); }});
    f.push_back({"plot.x", [](RunConfig& c, const std::string& v) { c.plot_x = trim(v); },
                 [](const RunConfig& c) { return json(c.plot_x); }});
    f.push_back({"plot.y", [](RunConfig& c, const std::string& v) { c.plot_y = trim(v); },
                 [](const RunConfig& c) { return json(c.plot_y); }});
    return f;
  }();
  return all;
}

// Leaves of a JSON object as dotted keys with text values.
void flatten(const json& j, const std::string& prefix, Overrides& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
    return;
  }
  if (j.is_array()) {
    std::string s;
    for (const auto& item : j) {
      if (!s.empty()) s += ",";
      s += item.is_string() ? item.get<std::string>() : item.dump();
    }
    out.emplace_back(prefix, s);
  } else if (j.is_string()) {
    out.emplace_back(prefix, j.get<std::string>());
  } else if (j.is_null()) {
    throw ConfigError(prefix + ": null value");
  } else {
    out.emplace_back(prefix, j.dump());
  }
}

json spec_meta(const RunConfig& c) {
  return {{"stream", c.stream.to_json()},
          {"backbone",
           {{"layers", c.backbone.layers},
            {"dim", c.backbone.dim},
            {"heads", c.backbone.heads},
            {"mlp_ratio", c.backbone.mlp_ratio},
            {"grid_side", c.backbone.grid_side},
            {"patch_dim", c.backbone.patch_dim}}},
          {"pretrain",
           {{"max_epochs", c.pretrain.max_epochs},
            {"target_accuracy", c.pretrain.target_accuracy},
            {"min_accuracy", c.pretrain.min_accuracy},
            {"batch_size", c.pretrain.batch_size},
            {"lr", c.pretrain.lr},
            {"seed", c.pretrain.seed}}}};
}

std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string format_exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

RunConfig::RunConfig() {
  if (const char* env = std::getenv("CPSP_OUT_DIR"); env && *env) out_dir = env;
  else out_dir = "cpsp_out";
}

void RunConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  try {
    harness::parse_method(method);
  } catch (const ConfigError&) {
    fail("method", "unknown method '" + method + "' (cps, pd, topk, full, sgd_naive)");
  }
  if (command != "run" && command != "sweep" && command != "ablate" && command != "pretrain" && command != "plot")
    fail("command", "unknown command '" + command + "'");
  if (seeds.empty()) fail("seeds", "need at least one seed");
  if (workers < 1) fail("workers", "must be >= 1");
  if (out_dir.empty()) fail("out", "must not be empty");

  const double r = hyper.reduction_ratio;
  if (!(r >= 0.0 && r < 1.0)) fail("train.reduction_ratio", "must lie in [0, 1)");
  if (cps::budget(stream.num_patches(), r) < 1) fail("train.reduction_ratio", "keeps no patch");
  if (!(hyper.temperature > 0.0)) fail("train.temperature", "must be > 0");
  if (!(hyper.phase_ratio >= 0.0 && hyper.phase_ratio <= 1.0)) fail("train.phase_ratio", "must lie in [0, 1]");
  if (hyper.epochs < 1) fail("train.epochs", "must be >= 1");
  if (hyper.batch_size < 1) fail("train.batch_size", "must be >= 1");
  if (!(hyper.lr > 0.0)) fail("train.lr", "must be > 0");

  if (pretrain.max_epochs < 1) fail("pretrain.max_epochs", "must be >= 1");
  if (pretrain.batch_size < 1) fail("pretrain.batch_size", "must be >= 1");
  if (!(pretrain.lr > 0.0)) fail("pretrain.lr", "must be > 0");
  if (!(pretrain.min_accuracy >= 0.0 && pretrain.min_accuracy <= 1.0)) fail("pretrain.min_accuracy", "must lie in [0, 1]");
  if (!(pretrain.target_accuracy >= 0.0 && pretrain.target_accuracy <= 1.0))
    fail("pretrain.target_accuracy", "must lie in [0, 1]");

  if (sweep_axis != "r" && sweep_axis != "tau" && sweep_axis != "lambda")
    fail("sweep.axis", "must be r, tau or lambda");
  for (double v : sweep_values) {
    if (sweep_axis == "r" && !(v >= 0.0 && v < 1.0 && cps::budget(stream.num_patches(), v) >= 1))
      fail("sweep.values", "reduction ratio " + format_g(v) + " outside [0, 1) or keeps no patch");
    if (sweep_axis == "tau" && !(v > 0.0)) fail("sweep.values", "temperature " + format_g(v) + " must be > 0");
    if (sweep_axis == "lambda" && !(v >= 0.0 && v <= 1.0))
      fail("sweep.values", "phase ratio " + format_g(v) + " outside [0, 1]");
  }

  try {
    stream.validate();
  } catch (const ContractError& e) {
    fail("stream", e.what());
  }
  vit::BackboneConfig bb = backbone;
  bb.grid_side = stream.grid_side;
  bb.patch_dim = stream.patch_dim;
  try {
    bb.validate();
  } catch (const ContractError& e) {
    fail("backbone", e.what());
  }
  try {
    hyper.pool.validate(bb);
  } catch (const ContractError& e) {
    fail("pool", e.what());
  }
  if (stream.pretrain_classes < 2) fail("stream.pretrain_classes", "must be >= 2");
}

json RunConfig::to_json() const {
  json out = json::object();
  for (const Field& f : fields()) {
    json* node = &out;
    const auto parts = split(f.key, '.');
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    (*node)[parts.back()] = f.get(*this);
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const Field& f : fields()) k.push_back(f.key);
  return k;
}

void apply(RunConfig& config, const std::string& key, const std::string& value) {
  for (const Field& f : fields()) {
    if (f.key == key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown key '" + key + "'");
}

Overrides parse_config_text(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  Overrides out;
  if (first != std::string::npos && text[first] == '{') {
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config: malformed JSON: ") + e.what());
    }
    flatten(j, "", out);
    return out;
  }
  std::istringstream is(text);
  std::string line, section;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
  }
  return out;
}

Overrides read_config_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

RunConfig resolve(const std::optional<fs::path>& file, const Overrides& overrides) {
  RunConfig c;
  if (file) {
    for (const auto& [k, v] : read_config_file(*file)) apply(c, k, v);
  }
  for (const auto& [k, v] : overrides) apply(c, k, v);
  c.validate();
  return c;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& item : list_items(text)) {
    if (const auto dots = item.find(".."); dots != std::string::npos) {
      const auto lo = to_uint("seeds", item.substr(0, dots)), hi = to_uint("seeds", item.substr(dots + 2));
      if (hi < lo) throw ConfigError("seeds: empty range '" + item + "'");
      for (auto s = lo; s <= hi; ++s) out.push_back(s);
    } else {
      out.push_back(to_uint("seeds", item));
    }
  }
  if (out.empty()) throw ConfigError("seeds: need at least one seed");
  return out;
}

// ---------------------------------------------------------------------------
// CSV

std::string csv_header() {
  return "schema=1,run_id,method,axis,value,seed,acc,fgt,hit_rate,peak_live_elements,predicted_peak,total_macs,"
         "macs_per_step,wall_time_s";
}

std::string to_csv(const std::vector<SummaryRow>& rows) {
  std::string out = csv_header() + "\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_exact(*v) : std::string(); };
  for (const auto& r : rows) {
    for (const std::string* s : {&r.run_id, &r.method, &r.axis})
      if (s->find_first_of(",\"\n") != std::string::npos) throw ContractError("csv: field '" + *s + "' needs quoting");
    out += "1," + r.run_id + "," + r.method + "," + r.axis + "," + format_exact(r.value) + "," +
           std::to_string(r.seed) + "," + format_exact(r.acc) + "," + opt(r.fgt) + "," + opt(r.hit_rate) + "," +
           std::to_string(r.peak_live_elements) + "," + std::to_string(r.predicted_peak) + "," +
           std::to_string(r.total_macs) + "," + format_exact(r.macs_per_step) + "," + format_exact(r.wall_time_s) +
           "\n";
  }
  return out;
}

std::vector<SummaryRow> parse_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw DataError("csv: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != csv_header()) throw DataError("csv: unexpected header (need schema=1)");
  std::vector<SummaryRow> rows;
  for (std::size_t lineno = 2; std::getline(is, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    const std::string where = "csv line " + std::to_string(lineno);
    if (cells.size() != 14) throw DataError(where + ": expected 14 cells, got " + std::to_string(cells.size()));
    if (cells[0] != "1") throw DataError(where + ": unknown schema '" + cells[0] + "'");
    try {
      SummaryRow r;
      r.run_id = cells[1];
      r.method = cells[2];
      r.axis = cells[3];
      r.value = to_double("value", cells[4]);
      r.seed = to_uint("seed", cells[5]);
      r.acc = to_double("acc", cells[6]);
      if (!cells[7].empty()) r.fgt = to_double("fgt", cells[7]);
      if (!cells[8].empty()) r.hit_rate = to_double("hit_rate", cells[8]);
      r.peak_live_elements = to_uint("peak_live_elements", cells[9]);
      r.predicted_peak = to_uint("predicted_peak", cells[10]);
      r.total_macs = to_uint("total_macs", cells[11]);
      r.macs_per_step = to_double("macs_per_step", cells[12]);
      r.wall_time_s = to_double("wall_time_s", cells[13]);
      rows.push_back(std::move(r));
    } catch (const ConfigError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return rows;
}

std::vector<SummaryRow> read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_csv(ss.str());
}

void write_csv(const fs::path& path, const std::vector<SummaryRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << to_csv(rows);
}

double column(const SummaryRow& r, const std::string& name) {
  if (name == "value") return r.value;
  if (name == "seed") return static_cast<double>(r.seed);
  if (name == "acc") return r.acc;
  if (name == "fgt") return r.fgt.value_or(0.0);
  if (name == "hit_rate") return r.hit_rate.value_or(0.0);
  if (name == "peak_live_elements") return static_cast<double>(r.peak_live_elements);
  if (name == "predicted_peak") return static_cast<double>(r.predicted_peak);
  if (name == "total_macs") return static_cast<double>(r.total_macs);
  if (name == "macs_per_step") return r.macs_per_step;
  if (name == "wall_time_s") return r.wall_time_s;
  throw ConfigError("plot: unknown column '" + name + "'");
}

// ---------------------------------------------------------------------------
// SVG

std::string render_svg(const std::vector<SummaryRow>& rows, const std::string& x, const std::string& y) {
  constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 150, kTop = 20, kBottom = 50;
  constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

  // method -> x -> (sum, count)
  std::map<std::string, std::map<double, std::pair<double, std::size_t>>> series;
  for (const auto& r : rows) {
    auto& cell = series[r.method][column(r, x)];
    cell.first += column(r, y);
    cell.second++;
  }
  if (rows.empty()) {
    column(SummaryRow{}, x);
    column(SummaryRow{}, y);
  }
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& [m, pts] : series) {
    for (const auto& [px, acc] : pts) {
      const double py = acc.first / static_cast<double>(acc.second);
      if (first) x0 = x1 = px, y0 = y1 = py, first = false;
      x0 = std::min(x0, px), x1 = std::max(x1, px), y0 = std::min(y0, py), y1 = std::max(y1, py);
    }
  }
  auto widen = [](double& lo, double& hi) {
    if (hi - lo < 1e-12) {
      const double pad = std::max(0.5, std::abs(lo) * 0.1);
      lo -= pad, hi += pad;
    }
  };
  widen(x0, x1);
  widen(y0, y1);
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto sx = [&](double v) { return kLeft + (v - x0) / (x1 - x0) * pw; };
  auto sy = [&](double v) { return kTop + ph - (v - y0) / (y1 - y0) * ph; };

  std::string out;
  char buf[256];
  auto emit = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof buf, fmt, args...);
    out += buf;
  };
  emit("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n", kW, kH,
       kW, kH);
  emit("<rect width=\"%.0f\" height=\"%.0f\" fill=\"white\"/>\n", kW, kH);
  out += "<g stroke=\"black\" stroke-width=\"1\">\n";
  emit("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\"/>\n", kLeft, kTop + ph, kLeft + pw, kTop + ph);
  emit("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\"/>\n", kLeft, kTop, kLeft, kTop + ph);
  for (int i = 0; i <= 4; ++i) {
    const double tx = x0 + (x1 - x0) * i / 4.0, ty = y0 + (y1 - y0) * i / 4.0;
    emit("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\"/>\n", sx(tx), kTop + ph, sx(tx), kTop + ph + 5);
    emit("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\"/>\n", kLeft - 5, sy(ty), kLeft, sy(ty));
  }
  out += "</g>\n<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int i = 0; i <= 4; ++i) {
    const double tx = x0 + (x1 - x0) * i / 4.0, ty = y0 + (y1 - y0) * i / 4.0;
    emit("<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"middle\">%.4g</text>\n", sx(tx), kTop + ph + 18, tx);
    emit("<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"end\">%.4g</text>\n", kLeft - 8, sy(ty) + 4, ty);
  }
  emit("<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"middle\">%s</text>\n", kLeft + pw / 2, kH - 10, x.c_str());
  emit("<text x=\"15\" y=\"%.2f\" text-anchor=\"middle\" transform=\"rotate(-90 15 %.2f)\">%s</text>\n", kTop + ph / 2,
       kTop + ph / 2, y.c_str());
  out += "</g>\n";

  std::size_t k = 0;
  for (const auto& [m, pts] : series) {
    const char* color = kPalette[k % std::size(kPalette)];
    std::string poly;
    for (const auto& [px, acc] : pts) {
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", poly.empty() ? "" : " ", sx(px),
                    sy(acc.first / static_cast<double>(acc.second)));
      poly += buf;
    }
    emit("<g class=\"series\" data-method=\"%s\">\n", m.c_str());
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + poly + "\"/>\n";
    for (const auto& [px, acc] : pts)
      emit("<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n", sx(px), sy(acc.first / static_cast<double>(acc.second)),
           color);
    const double ly = kTop + 10 + 18.0 * static_cast<double>(k);
    emit("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"%s\" stroke-width=\"2\"/>\n", kW - kRight + 15,
         ly, kW - kRight + 35, ly, color);
    emit("<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"11\">%s</text>\n", kW - kRight + 40, ly + 4,
         m.c_str());
    out += "</g>\n";
    ++k;
  }
  out += "</svg>\n";
  return out;
}

// ---------------------------------------------------------------------------
// Runs

namespace {

vit::BackboneConfig backbone_for(const RunConfig& c, const harness::SyntheticSpec& spec) {
  vit::BackboneConfig bb = c.backbone;
  bb.grid_side = spec.grid_side;
  bb.patch_dim = spec.patch_dim;
  return bb;
}

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

std::string dir_name(std::string s) {
  for (char& ch : s)
    if (ch == '+') ch = '_';
  return s;
}

}  // namespace

harness::PretrainReport pretrain_to(const RunConfig& config, const fs::path& stem, const Log& log) {
  harness::Stream stream =
      config.stream_path.empty() ? harness::generate_stream(config.stream) : harness::load_stream(config.stream_path);
  RunConfig c = config;
  c.stream = stream.spec;
  c.backbone = backbone_for(config, stream.spec);
  Rng init = Rng::stream(c.pretrain.seed, {21});
  vit::Backbone bb(c.backbone, init);
  say(log, "pretraining backbone on " + std::to_string(stream.spec.pretrain_classes) + " classes");
  const auto rep = harness::pretrain_backbone(bb, stream.pretrain, stream.spec.pretrain_classes, c.pretrain);
  say(log, "pretraining reached " + format_g(rep.train_accuracy) + " after " + std::to_string(rep.epochs) + " epochs");
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  json meta = spec_meta(c);
  meta["epochs"] = rep.epochs;
  meta["train_accuracy"] = rep.train_accuracy;
  const auto params = std::as_const(bb).parameters();
  io::save_checkpoint(stem, params, meta);
  return rep;
}

Workspace prepare_workspace(const RunConfig& config, const Log& log) {
  harness::Stream stream =
      config.stream_path.empty() ? harness::generate_stream(config.stream) : harness::load_stream(config.stream_path);
  RunConfig c = config;
  c.stream = stream.spec;
  c.backbone = backbone_for(config, stream.spec);
  Rng init = Rng::stream(c.pretrain.seed, {21});
  vit::Backbone bb(c.backbone, init);

  fs::path stem = config.checkpoint;
  if (stem.empty()) {
    stem = fs::path(config.out_dir) / "backbone";
    bool reuse = false;
    if (fs::exists(stem.string() + ".json")) {
      const auto meta = io::load_checkpoint(stem).meta;
      const json want = spec_meta(c);
      reuse = meta.value("stream", json()) == want["stream"] && meta.value("backbone", json()) == want["backbone"] &&
              meta.value("pretrain", json()) == want["pretrain"];
    }
    if (!reuse) pretrain_to(c, stem, log);
    else say(log, "reusing pretrained backbone " + stem.string());
  }
  auto params = bb.parameters();
  io::restore(io::load_checkpoint(stem), params);
  say(log, "preparing frozen views");
  harness::StreamCache cache = harness::prepare_stream(bb, stream);
  return Workspace{std::move(stream), std::move(bb), std::move(cache)};
}

std::vector<Job> plan_run(const RunConfig& config) {
  std::vector<Job> jobs;
  for (auto seed : config.seeds) {
    Job j{config.method + "-s" + std::to_string(seed), config.method, "none", 0.0, config};
    j.config.command = "run";
    j.config.seeds = {seed};
    jobs.push_back(std::move(j));
  }
  return jobs;
}

std::vector<Job> plan_sweep(const RunConfig& config) {
  std::vector<Job> jobs;
  for (double v : config.sweep_values) {
    for (auto seed : config.seeds) {
      Job j{config.method + "-" + config.sweep_axis + format_g(v) + "-s" + std::to_string(seed), config.method,
            config.sweep_axis, v, config};
      j.config.command = "run";
      j.config.seeds = {seed};
      if (config.sweep_axis == "r") j.config.hyper.reduction_ratio = v;
      if (config.sweep_axis == "tau") j.config.hyper.temperature = v;
      if (config.sweep_axis == "lambda") j.config.hyper.phase_ratio = v;
      jobs.push_back(std::move(j));
    }
  }
  return jobs;
}

std::vector<Job> plan_ablate(const RunConfig& config) {
  struct Variant {
    const char* label;
    const char* method;
    bool split;
  };
  const Variant variants[] = {
      {"full", "full", false}, {"pd", "pd", false}, {"cps", "cps", false}, {"pd+dpct", "pd", true}, {"cps+dpct", "cps", true}};
  std::vector<Job> jobs;
  for (const auto& v : variants) {
    for (auto seed : config.seeds) {
      Job j{dir_name(v.label) + "-s" + std::to_string(seed), v.label, "r", config.hyper.reduction_ratio, config};
      j.config.command = "run";
      j.config.method = v.method;
      j.config.seeds = {seed};
      if (!v.split) j.config.hyper.phase_ratio = 1.0;
      jobs.push_back(std::move(j));
    }
  }
  return jobs;
}

std::vector<SummaryRow> execute(const RunConfig& config, const std::vector<Job>& jobs, const Log& log) {
  const Workspace ws = prepare_workspace(config, log);
  return execute(ws, config, jobs, log);
}

std::vector<SummaryRow> execute(const Workspace& ws, const RunConfig& config, const std::vector<Job>& jobs,
                                const Log& log) {
  const fs::path out(config.out_dir);
  fs::create_directories(out);
  std::vector<SummaryRow> rows(jobs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex mu;

  auto work = [&] {
    while (!failed) {
      const std::size_t i = next++;
      if (i >= jobs.size()) return;
      const Job& job = jobs[i];
      try {
        const std::uint64_t seed = job.config.seeds.at(0);
        const auto res = harness::run_sequence(harness::parse_method(job.config.method), ws.stream, ws.backbone,
                                               ws.cache, job.config.hyper, seed);
        const fs::path dir = out / job.run_id;
        fs::create_directories(dir);
        {
          std::ofstream os(dir / "config.json");
          if (!os) throw DataError("cannot write " + (dir / "config.json").string());
          os << job.config.to_json().dump(2) << "\n";
        }
        res.trace.write(dir / "trace.jsonl");
        json result = {{"accuracy", res.accuracy.to_json()},
                       {"acc", res.acc()},
                       {"resources", res.resources.to_json()},
                       {"task_classes", res.task_classes}};
        if (auto f = res.fgt()) result["fgt"] = *f;
        if (auto h = res.mean_hit_rate()) result["hit_rate"] = *h;
        {
          std::ofstream os(dir / "result.json");
          if (!os) throw DataError("cannot write " + (dir / "result.json").string());
          os << result.dump(2) << "\n";
        }
        SummaryRow& r = rows[i];
        r.run_id = job.run_id;
        r.method = job.label;
        r.axis = job.axis;
        r.value = job.value;
        r.seed = seed;
        r.acc = res.acc();
        r.fgt = res.fgt();
        r.hit_rate = res.mean_hit_rate();
        r.peak_live_elements = res.resources.peak_live_elements;
        r.predicted_peak = res.resources.predicted_peak;
        r.total_macs = res.resources.total_macs;
        const std::size_t steps = res.resources.prompt_phase.steps + res.resources.classifier_phase.steps;
        r.macs_per_step = steps ? static_cast<double>(res.resources.total_macs) / static_cast<double>(steps) : 0.0;
        r.wall_time_s = res.resources.wall_time_s;
        std::lock_guard lock(mu);
        say(log, job.run_id + ": acc " + format_g(r.acc) + (r.fgt ? " fgt " + format_g(*r.fgt) : std::string()) +
                     " (" + format_g(r.wall_time_s) + " s)");
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  const std::size_t n = std::min<std::size_t>(std::max<std::size_t>(config.workers, 1), std::max<std::size_t>(jobs.size(), 1));
  if (n == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work);
  }
  if (error) std::rethrow_exception(error);
  write_csv(out / "summary.csv", rows);
  return rows;
}

harness::RunResult replay(const fs::path& run_dir, const Log& log) {
  const RunConfig c = resolve(run_dir / "config.json", {});
  if (c.seeds.size() != 1) throw ConfigError("seeds: a run directory holds exactly one seed");
  const Workspace ws = prepare_workspace(c, log);
  return harness::run_sequence(harness::parse_method(c.method), ws.stream, ws.backbone, ws.cache, c.hyper, c.seeds[0]);
}

}  // namespace cpsp::runner
