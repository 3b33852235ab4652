#pragma once

// Closed-form model of the activations the tape retains for one training step,
// written against the retention policy in autodiff.hpp, plus run-level
// resource reports.

#include <cstddef>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "cpsprompt/autodiff.hpp"
#include "cpsprompt/vit.hpp"

namespace cpsp::accounting {

struct ActivationModel {
  vit::BackboneConfig backbone;
  std::size_t batch = 16;
  std::size_t prompt_length = 8;
  std::vector<std::size_t> injected_layers{0, 1};
  std::size_t components = 2;  // pool size M
  std::size_t classes = 20;    // classifier width C
};

// Elements retained after the forward of one step over `n_tokens` tokens per
// sample (class token included). `trainable` is a mask of ad::Group bits; the
// prompt path is live only while the prompt group is trainable and a prefix is
// injected. With the backbone trainable the step is a prompt-free fine-tune
// over full sequences from raw grids, and n_tokens must be N + 1.
std::size_t predict_activations(std::size_t n_tokens, const ActivationModel& model, ad::GroupMask trainable);

struct MacCount {
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;
  std::uint64_t total() const { return forward + backward; }
};
MacCount count_macs(const ad::Tape& tape);

struct PhaseResources {
  std::size_t steps = 0;
  std::size_t peak_live_elements = 0;
  std::size_t predicted_peak = 0;
  std::uint64_t macs = 0;
  std::uint64_t query_macs = 0;
};

struct ResourceReport {
  std::size_t peak_live_elements = 0;
  std::size_t predicted_peak = 0;
  std::uint64_t total_macs = 0;  // tape MACs plus query passes
  double wall_time_s = 0.0;
  PhaseResources prompt_phase;
  PhaseResources classifier_phase;

  // Folds one phase of one task into the report.
  void add(PhaseResources& into, std::size_t steps, std::size_t peak, std::size_t predicted, std::uint64_t macs,
           std::uint64_t query_macs);
  nlohmann::json to_json() const;
};

}  // namespace cpsp::accounting
