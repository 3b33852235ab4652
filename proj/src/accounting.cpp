#include "cpsprompt/accounting.hpp"

#include <algorithm>

#include "cpsprompt/errors.hpp"

namespace cpsp::accounting {

using ad::Group;

namespace {

// One encoder block whose input already requires grad. m = keys per query
// row (n plus any prefix).
std::size_t live_block(std::size_t b, std::size_t n, std::size_t m, const vit::BackboneConfig& c) {
  const std::size_t d = c.dim, h = c.heads, hid = c.hidden();
  const std::size_t ln = b * n * (d + 1);
  const std::size_t attn = b * n * d + 2 * b * m * d + b * h * n * m;
  return ln + attn + ln + b * n * hid;
}

// The first block reached by a prompt gradient: only the prefix requires
// grad, so LN1 and the projections record nothing.
std::size_t entry_block(std::size_t b, std::size_t n, std::size_t m, const vit::BackboneConfig& c) {
  const std::size_t d = c.dim, h = c.heads, hid = c.hidden();
  return b * n * d + 2 * b * m * d + b * h * n * m + b * n * (d + 1) + b * n * hid;
}

std::size_t finetune_step(const ActivationModel& am) {
  const auto& c = am.backbone;
  const std::size_t b = am.batch, n = c.num_patches() + 1, d = c.dim, hid = c.hidden();
  std::size_t total = b * c.num_patches() * c.patch_dim;  // raw grids kept by the patch projection
  const std::size_t per_block = b * n * (d + 1)            // LN1
                                + b * n * d                // LN1 output shared by q/k/v
                                + 3 * b * n * d + b * c.heads * n * n  // attention
                                + b * n * d                // output projection input
                                + b * n * (d + 1)          // LN2
                                + b * n * d                // MLP input
                                + 2 * b * n * hid;         // gelu input, MLP hidden
  total += c.layers * per_block;
  total += b * n * (d + 1) + b * d + b * am.classes;
  return total;
}

}  // namespace

std::size_t predict_activations(std::size_t n_tokens, const ActivationModel& am, ad::GroupMask trainable) {
  if (n_tokens < 1) throw ContractError("predict_activations: n_tokens must be >= 1");
  const auto& c = am.backbone;
  const std::size_t b = am.batch, d = c.dim;
  if (ad::has(trainable, Group::backbone)) {
    if (n_tokens != c.num_patches() + 1) throw ContractError("predict_activations: fine-tuning uses full sequences");
    return finetune_step(am);
  }
  const bool classifier = ad::has(trainable, Group::classifier);
  const bool prompt = ad::has(trainable, Group::prompt) && am.prompt_length > 0 && !am.injected_layers.empty();
  std::size_t total = 0;
  if (prompt) {
    const std::size_t first = *std::min_element(am.injected_layers.begin(), am.injected_layers.end());
    for (std::size_t l = first; l < c.layers; ++l) {
      const bool injected =
          std::find(am.injected_layers.begin(), am.injected_layers.end(), l) != am.injected_layers.end();
      const std::size_t m = n_tokens + (injected ? am.prompt_length : 0);
      total += l == first ? entry_block(b, n_tokens, m, c) : live_block(b, n_tokens, m, c);
    }
    total += b * n_tokens * (d + 1);   // final LN
    total += b * d + b * am.components;  // query features and component weights
  }
  if (classifier) total += b * d;          // class-token features kept by the head
  if (prompt || classifier) total += b * am.classes;  // softmax of the loss
  return total;
}

MacCount count_macs(const ad::Tape& tape) { return {tape.forward_macs(), tape.backward_macs()}; }

void ResourceReport::add(PhaseResources& into, std::size_t steps, std::size_t peak, std::size_t predicted,
                         std::uint64_t macs, std::uint64_t query_macs) {
  into.steps += steps;
  into.peak_live_elements = std::max(into.peak_live_elements, peak);
  into.predicted_peak = std::max(into.predicted_peak, predicted);
  into.macs += macs;
  into.query_macs += query_macs;
  peak_live_elements = std::max(peak_live_elements, peak);
  predicted_peak = std::max(predicted_peak, predicted);
  total_macs += macs + query_macs;
}

nlohmann::json ResourceReport::to_json() const {
  auto phase = [](const PhaseResources& p) {
    return nlohmann::json{{"steps", p.steps},
                          {"peak_live_elements", p.peak_live_elements},
                          {"predicted_peak", p.predicted_peak},
                          {"macs", p.macs},
                          {"query_macs", p.query_macs}};
  };
  return {{"peak_live_elements", peak_live_elements},
          {"predicted_peak", predicted_peak},
          {"total_macs", total_macs},
          {"wall_time_s", wall_time_s},
          {"prompt_phase", phase(prompt_phase)},
          {"classifier_phase", phase(classifier_phase)}};
}

}  // namespace cpsp::accounting
