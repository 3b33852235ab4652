#pragma once

// Class-incremental protocol on a synthetic planted-signature stream.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpsprompt/accounting.hpp"
#include "cpsprompt/prompt_pool.hpp"
#include "cpsprompt/trainer.hpp"
#include "cpsprompt/vit.hpp"

namespace cpsp::harness {

struct SyntheticSpec {
  std::size_t grid_side = 8;
  std::size_t patch_dim = 16;
  std::size_t classes_per_task = 4;
  std::size_t num_tasks = 5;
  std::size_t signature_size = 8;
  double signal_noise = 0.5;      // eta: noise on planted patches
  double background_noise = 0.5;  // epsilon: noise on every patch
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t pretrain_classes = 16;
  std::uint64_t seed = 0;

  std::size_t num_patches() const { return grid_side * grid_side; }
  std::size_t task_classes() const { return classes_per_task * num_tasks; }
  void validate() const;  // ContractError
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

struct Dataset {
  std::vector<Tensor> grids;  // [N x patch_dim] each
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  void append(const Dataset& other);
};

struct Stream {
  SyntheticSpec spec;
  Dataset pretrain;                     // labels 0..pretrain_classes-1
  std::vector<Dataset> train_by_class;  // task classes, labels 0..task_classes-1
  std::vector<Dataset> test_by_class;
  std::vector<std::vector<std::size_t>> signatures;           // task class -> sorted patch positions
  std::vector<std::vector<std::size_t>> pretrain_signatures;  // pretrain class -> sorted patch positions
};

// Background N(0, eps^2) on every patch; at the class's signature positions a
// fixed per-class template plus N(0, eta^2). Deterministic in spec.seed.
Stream generate_stream(const SyntheticSpec& spec);

// Binary dump: stream.json manifest (spec, labels, signatures) with grids as
// little-endian f64 in pretrain.bin, train.bin, test.bin.
void save_stream(const Stream& stream, const std::filesystem::path& dir);
Stream load_stream(const std::filesystem::path& dir);

// Task t's classes under the class order drawn for `seed`.
std::vector<std::vector<int>> task_classes(const SyntheticSpec& spec, std::uint64_t seed);

class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t tasks = 0);

  std::size_t tasks() const { return tasks_; }
  // 0-based: accuracy on task i after training task t, i <= t.
  void set(std::size_t t, std::size_t i, double value);
  double at(std::size_t t, std::size_t i) const;
  bool has(std::size_t t, std::size_t i) const;
  std::size_t occupancy() const;
  nlohmann::json to_json() const;
  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
  std::size_t tasks_;
  std::vector<double> values_;
  std::vector<bool> present_;
};

// ACC_T over row T (1-based T); an incomplete row is a ContractError.
double acc_metric(const AccuracyMatrix& a, std::size_t T);
// Mean over i < T of the drop from the best earlier accuracy on task i to the
// final one. Absent for T = 1.
std::optional<double> fgt_metric(const AccuracyMatrix& a, std::size_t T);
// |sampled intersect signature| / min(k, sigma); positions are 0-based.
double hit_rate(std::span<const std::size_t> sampled, std::span<const std::size_t> signature);

struct PretrainConfig {
  std::size_t max_epochs = 40;
  double target_accuracy = 0.95;
  double min_accuracy = 0.60;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  std::size_t epochs = 0;
  double train_accuracy = 0.0;
};

// Trains backbone plus a temporary head; throws TrainingError below
// min_accuracy and ContractError with fewer than two classes.
PretrainReport pretrain_backbone(vit::Backbone& backbone, const Dataset& data, std::size_t classes,
                                 const PretrainConfig& config);

enum class Method { cps, pd, topk, full, sgd_naive };
const char* method_name(Method m);
Method parse_method(const std::string& name);  // ConfigError

struct Hyper {
  double reduction_ratio = 0.4;
  double temperature = 0.1;
  double phase_ratio = 0.4;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  pool::PoolConfig pool;
  bool log_indices = false;
  bool log_ops = false;
};

// Frozen-backbone views of every class's train and test samples.
struct StreamCache {
  std::vector<train::PreparedSet> train_by_class;
  std::vector<train::PreparedSet> test_by_class;
};
StreamCache prepare_stream(const vit::Backbone& backbone, const Stream& stream);

struct RunResult {
  AccuracyMatrix accuracy;
  train::RunTrace trace;
  accounting::ResourceReport resources;
  std::vector<std::vector<int>> task_classes;
  double hit_rate_sum = 0.0;
  std::size_t hit_rate_count = 0;

  double acc() const { return acc_metric(accuracy, accuracy.tasks()); }
  std::optional<double> fgt() const { return fgt_metric(accuracy, accuracy.tasks()); }
  std::optional<double> mean_hit_rate() const;
};

// Trains the stream's tasks in order and evaluates on full sequences after
// each. `cache` must come from `pretrained` (unused by sgd_naive).
RunResult run_sequence(Method method, const Stream& stream, const vit::Backbone& pretrained,
                       const StreamCache& cache, const Hyper& hyper, std::uint64_t seed);

}  // namespace cpsp::harness
