#pragma once

// Two-phase per-task optimization: sparse-input prompt+classifier training,
// then full-input classifier alignment with the pool frozen.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpsprompt/autodiff.hpp"
#include "cpsprompt/cps.hpp"
#include "cpsprompt/prompt_pool.hpp"
#include "cpsprompt/vit.hpp"

namespace cpsp::train {

struct PhasePlan {
  std::size_t total_epochs = 0;
  double phase_ratio = 0.0;
  std::size_t prompt_epochs = 0;

  std::size_t classifier_epochs() const { return total_epochs - prompt_epochs; }
};

// prompt_epochs = floor(lambda * E), with a 1e-9 slack for decimal lambdas.
PhasePlan plan_phases(std::size_t total_epochs, double phase_ratio);

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  struct Moments {
    Tensor m, v;
    std::uint64_t step = 0;
  };
  AdamConfig config;
  double base_lr = 1e-3;
  std::size_t schedule_step = 0;
  std::size_t schedule_total = 0;
  std::map<const ad::Parameter*, Moments> moments;
};

// Bias-corrected Adam on each parameter's current grad. Moments are created on
// first use; a parameter whose shape changed since is a DimensionError.
void adam_step(OptimizerState& state, std::span<ad::Parameter* const> params, double lr);

enum class Selection { critical, uniform, topk, full };
const char* selection_name(Selection s);

// Frozen-backbone views of a dataset: full token sequences and query-pass
// outputs per sample. The backbone is frozen for every prompt method, so these
// are computed once and reused by every epoch and run.
struct PreparedSet {
  std::vector<vit::TokenSequence> tokens;
  std::vector<vit::QueryResult> queries;
  std::vector<int> labels;
  std::uint64_t query_macs_per_sample = 0;

  std::size_t size() const { return labels.size(); }
  PreparedSet subset(std::span<const std::size_t> rows) const;
  PreparedSet relabeled(std::span<const int> label_map) const;
};

PreparedSet prepare(const vit::Backbone& backbone, std::span<const Tensor> grids, std::span<const int> labels);

struct TrainConfig {
  std::size_t epochs = 20;
  double phase_ratio = 0.4;
  std::size_t batch_size = 16;
  double base_lr = 1e-3;
  Selection selection = Selection::critical;
  cps::CpsConfig cps;
  bool log_indices = false;
  bool log_ops = false;
  // Phase 2 sees a frozen pool and backbone, so each sample's class feature is
  // fixed; computing it once per task gives the same steps. Reported MACs and
  // live elements stay those of the uncached step. Ignored when log_ops is set.
  bool cache_frozen_features = true;
  // Called after every epoch with its index and phase (1 or 2).
  std::function<void(std::size_t epoch, std::size_t phase)> on_epoch_end;
};

// JSON-lines run record: one line per mini-batch and one per epoch.
class RunTrace {
 public:
  void add(nlohmann::json line) { lines_.push_back(std::move(line)); }
  const std::vector<nlohmann::json>& lines() const { return lines_; }
  void write(const std::filesystem::path& path) const;
  static RunTrace read(const std::filesystem::path& path);

 private:
  std::vector<nlohmann::json> lines_;
};

struct PhaseStats {
  std::size_t epochs = 0;
  std::size_t steps = 0;
  std::size_t peak_live_elements = 0;
  std::uint64_t macs = 0;        // forward + backward through the tape
  std::uint64_t query_macs = 0;  // frozen query passes feeding this phase
};

struct TaskReport {
  PhaseStats prompt_phase;
  PhaseStats classifier_phase;
  std::vector<double> epoch_loss;
};

struct PromptModel {
  vit::Backbone& backbone;
  pool::PromptPool& pool;
  vit::Classifier& head;
};

// Called with the dataset row and the chosen patch positions of each sample.
using SelectionHook = std::function<void(std::size_t row, std::span<const std::size_t> positions)>;

// Stream derivation: batch order from (seed, 1, task, epoch), patch selection
// from (seed, 2, task, epoch, batch).
TaskReport train_task(const PreparedSet& data, const std::vector<bool>& allowed, PromptModel& model,
                      const TrainConfig& config, std::size_t task, std::uint64_t seed, RunTrace* trace = nullptr,
                      const SelectionHook& hook = {});

// Naive fine-tuning of backbone and head on raw grids (single phase).
TaskReport train_task_finetune(std::span<const Tensor> grids, std::span<const int> labels,
                               const std::vector<bool>& allowed, vit::Backbone& backbone, vit::Classifier& head,
                               const TrainConfig& config, std::size_t task, std::uint64_t seed,
                               RunTrace* trace = nullptr);

// Epoch-wise shuffled order; shared by every trainer.
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed, std::size_t task, std::size_t epoch);

}  // namespace cpsp::train
