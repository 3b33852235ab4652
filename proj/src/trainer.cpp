#include "cpsprompt/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>

#include "cpsprompt/errors.hpp"

namespace cpsp::train {

using ad::Group;
using nlohmann::json;

PhasePlan plan_phases(std::size_t total_epochs, double phase_ratio) {
  if (total_epochs < 1) throw ContractError("plan_phases: E must be >= 1");
  if (!(phase_ratio >= 0.0 && phase_ratio <= 1.0)) throw ContractError("plan_phases: phase ratio must be in [0, 1]");
  PhasePlan p{total_epochs, phase_ratio, 0};
  p.prompt_epochs = std::min(
      total_epochs, static_cast<std::size_t>(std::floor(phase_ratio * static_cast<double>(total_epochs) + 1e-9)));
  return p;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (step > total_steps) throw ContractError("cosine_lr: step beyond schedule");
  if (total_steps == 0) return base_lr;
  return base_lr * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

void adam_step(OptimizerState& state, std::span<ad::Parameter* const> params, double lr) {
  const AdamConfig& c = state.config;
  for (ad::Parameter* p : params) {
    if (p->grad.shape() != p->value.shape()) {
      throw DimensionError("adam_step: gradient of " + p->name + " has shape " + shape_str(p->grad.shape()));
    }
    auto [it, fresh] = state.moments.try_emplace(p);
    auto& mom = it->second;
    if (fresh) {
      mom.m = Tensor(p->value.shape());
      mom.v = Tensor(p->value.shape());
    } else if (mom.m.shape() != p->value.shape()) {
      throw DimensionError("adam_step: " + p->name + " changed shape to " + shape_str(p->value.shape()));
    }
    ++mom.step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(mom.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(mom.step));
    double* w = p->value.ptr();
    const double* g = p->grad.ptr();
    double* m = mom.m.ptr();
    double* v = mom.v.ptr();
    for (std::size_t i = 0; i < p->numel(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1, vh = v[i] / bc2;
      w[i] -= lr * mh / (std::sqrt(vh) + c.eps);
    }
  }
}

const char* selection_name(Selection s) {
  switch (s) {
    case Selection::critical: return "critical";
    case Selection::uniform: return "uniform";
    case Selection::topk: return "topk";
    case Selection::full: return "full";
  }
  return "?";
}

PreparedSet PreparedSet::subset(std::span<const std::size_t> rows) const {
  PreparedSet out;
  out.query_macs_per_sample = query_macs_per_sample;
  for (std::size_t r : rows) {
    out.tokens.push_back(tokens.at(r));
    out.queries.push_back(queries.at(r));
    out.labels.push_back(labels.at(r));
  }
  return out;
}

PreparedSet PreparedSet::relabeled(std::span<const int> label_map) const {
  PreparedSet out = *this;
  for (int& l : out.labels) l = label_map[static_cast<std::size_t>(l)];
  return out;
}

PreparedSet prepare(const vit::Backbone& backbone, std::span<const Tensor> grids, std::span<const int> labels) {
  if (grids.size() != labels.size()) throw DimensionError("prepare: grids and labels differ in length");
  PreparedSet out;
  out.labels.assign(labels.begin(), labels.end());
  out.tokens.reserve(grids.size());
  for (const auto& g : grids) out.tokens.push_back(backbone.embed(g));
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < grids.size(); s += kChunk) {
    const std::size_t e = std::min(grids.size(), s + kChunk);
    auto q = backbone.query_forward_batch(std::span<const vit::TokenSequence>(out.tokens).subspan(s, e - s));
    for (auto& r : q) out.queries.push_back(std::move(r));
  }
  // MACs of one query pass: embedding plus encoder over the full sequence.
  const auto& c = backbone.config();
  const std::uint64_t n = c.num_patches() + 1, d = c.dim, m = c.hidden();
  out.query_macs_per_sample =
      (n - 1) * c.patch_dim * d + c.layers * (4 * n * d * d + 2 * n * n * d + 2 * n * d * m);
  return out;
}

void RunTrace::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& l : lines_) os << l.dump() << '\n';
}

RunTrace RunTrace::read(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  RunTrace t;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      t.add(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError("malformed trace line: " + std::string(e.what()));
    }
  }
  return t;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed, std::size_t task, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::stream(seed, {1, task, epoch});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

namespace {

std::vector<std::size_t> select_positions(const vit::QueryResult& q, const TrainConfig& cfg, std::size_t k, Rng& rng) {
  const std::size_t n = q.trace.cls_to_patch.size();
  switch (cfg.selection) {
    case Selection::critical:
      return cps::sample_without_replacement(
          cps::to_distribution(cps::critical_scores(q.trace), cfg.cps.temperature), k, rng);
    case Selection::topk:
      return cps::top_k(cps::to_distribution(cps::critical_scores(q.trace), cfg.cps.temperature), k);
    case Selection::uniform:
      return cps::uniform_sample(n, k, rng);
    case Selection::full: {
      std::vector<std::size_t> all(n);
      std::iota(all.begin(), all.end(), 0);
      return all;
    }
  }
  return {};
}

std::vector<ad::Parameter*> concat(std::vector<ad::Parameter*> a, const std::vector<ad::Parameter*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

void zero_grads(std::span<ad::Parameter* const> ps) {
  for (auto* p : ps) p->zero_grad();
}

struct StepLog {
  std::size_t task, phase, epoch, batch;
  double loss, lr;
  std::size_t peak;
  std::uint64_t macs, query_macs;
};

json step_json(const StepLog& s) {
  return json{{"task", s.task},   {"phase", s.phase}, {"epoch", s.epoch},
              {"batch", s.batch}, {"loss", s.loss},   {"lr", s.lr},
              {"live_elements_peak", s.peak},         {"macs", s.macs},
              {"query_macs", s.query_macs}};
}

struct FrozenFeatures {
  std::vector<Tensor> rows;  // per sample [D], data order
  std::uint64_t macs_per_sample = 0;
};

FrozenFeatures frozen_features(const PreparedSet& data, PromptModel& model, std::size_t chunk) {
  const std::size_t d = model.backbone.config().dim;
  FrozenFeatures out;
  std::uint64_t macs = 0;
  for (std::size_t lo = 0; lo < data.size(); lo += chunk) {
    const std::size_t hi = std::min(data.size(), lo + chunk);
    Tensor zq({hi - lo, d});
    for (std::size_t i = lo; i < hi; ++i) std::copy_n(data.queries[i].z_q.ptr(), d, zq.ptr() + (i - lo) * d);
    ad::Tape tape;
    vit::PromptPrefix prefix = model.pool.compose(tape, tape.constant(std::move(zq)));
    const std::span<const vit::TokenSequence> seqs(data.tokens.data() + lo, hi - lo);
    const ad::Var f = vit::prompt_features(tape, model.backbone, seqs, &prefix);
    for (std::size_t i = lo; i < hi; ++i) {
      Tensor row({d});
      std::copy_n(f.value().ptr() + (i - lo) * d, d, row.ptr());
      out.rows.push_back(std::move(row));
    }
    macs += tape.forward_macs();
  }
  // Every op in the frozen pass scales linearly with the batch.
  out.macs_per_sample = macs / data.size();
  return out;
}

[[noreturn]] void abort_numeric(const NumericError& e, std::size_t task, std::size_t phase, std::size_t epoch,
                                std::size_t batch) {
  throw NumericError("training aborted at task " + std::to_string(task) + ", phase " + std::to_string(phase) +
                     ", epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ": " + e.what());
}

}  // namespace

TaskReport train_task(const PreparedSet& data, const std::vector<bool>& allowed, PromptModel& model,
                      const TrainConfig& cfg, std::size_t task, std::uint64_t seed, RunTrace* trace,
                      const SelectionHook& hook) {
  if (data.size() == 0) throw ContractError("train_task: empty task");
  if (cfg.batch_size < 1) throw ContractError("train_task: batch size must be >= 1");
  const std::size_t n_patches = model.backbone.config().num_patches();
  if (cfg.selection != Selection::full) cfg.cps.validate(n_patches);
  const std::size_t k = cfg.selection == Selection::full ? n_patches : cfg.cps.budget(n_patches);
  const PhasePlan plan = plan_phases(cfg.epochs, cfg.phase_ratio);
  const std::size_t batches = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t d = model.backbone.config().dim;

  OptimizerState opt;
  opt.base_lr = cfg.base_lr;
  opt.schedule_total = plan.total_epochs * batches;

  auto prompt_params = concat(model.pool.parameters(), model.head.parameters());
  auto head_params = model.head.parameters();
  zero_grads(prompt_params);

  TaskReport report;
  const bool was_frozen = model.pool.frozen();
  const bool use_cache = cfg.cache_frozen_features && !cfg.log_ops;
  std::optional<FrozenFeatures> cached;
  for (std::size_t epoch = 0; epoch < plan.total_epochs; ++epoch) {
    const bool prompt_phase = epoch < plan.prompt_epochs;
    const std::size_t phase = prompt_phase ? 1 : 2;
    PhaseStats& stats = prompt_phase ? report.prompt_phase : report.classifier_phase;
    model.pool.set_frozen(prompt_phase ? was_frozen : true);
    if (!prompt_phase && use_cache && !cached) {
      try {
        cached = frozen_features(data, model, 64);
      } catch (const NumericError& e) {
        abort_numeric(e, task, phase, epoch, 0);
      }
    }
    const auto order = shuffled_order(data.size(), seed, task, epoch);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(data.size(), lo + cfg.batch_size);
      const std::size_t bs = hi - lo;
      Rng rng = Rng::stream(seed, {2, task, epoch, b});
      Tensor zq({bs, d});
      std::vector<vit::TokenSequence> seqs;
      std::vector<int> labels;
      json picked = json::array();
      for (std::size_t i = lo; i < hi; ++i) {
        const std::size_t row = order[i];
        const auto& q = data.queries[row];
        std::copy_n(q.z_q.ptr(), d, zq.ptr() + (i - lo) * d);
        labels.push_back(data.labels[row]);
        if (prompt_phase && cfg.selection != Selection::full) {
          auto pos = select_positions(q, cfg, k, rng);
          if (hook) hook(row, pos);
          if (cfg.log_indices) {
            json idx = json::array();
            for (std::size_t p : pos) idx.push_back(cps::orig_index_of(p));
            picked.push_back(idx);
          }
          seqs.push_back(cps::assemble_positions(data.tokens[row], pos));
        } else if (!cached) {
          seqs.push_back(data.tokens[row]);
        }
      }

      const double lr = cosine_lr(opt.schedule_step, opt.schedule_total, cfg.base_lr);
      ad::Tape tape;
      tape.enable_op_log(cfg.log_ops);
      double loss_value = 0.0;
      std::size_t peak = 0;
      std::uint64_t frozen_macs = 0;
      try {
        ad::Var logits;
        if (cached) {
          Tensor feats({bs, d});
          for (std::size_t i = lo; i < hi; ++i) std::copy_n(cached->rows[order[i]].ptr(), d, feats.ptr() + (i - lo) * d);
          frozen_macs = bs * cached->macs_per_sample;
          logits = model.head.forward(tape, tape.constant(std::move(feats)), true);
        } else {
          vit::PromptPrefix prefix = model.pool.compose(tape, tape.constant(std::move(zq)));
          const auto trainable = prompt_phase && !model.pool.frozen()
                                     ? vit::TrainableSet::of({Group::prompt, Group::classifier})
                                     : vit::TrainableSet::of({Group::classifier});
          logits = vit::prompt_forward(tape, model.backbone, model.head, seqs, &prefix, trainable);
        }
        ad::Var loss = ad::cross_entropy(tape, logits, labels, &allowed);
        loss_value = loss.value()[0];
        peak = tape.peak_live_elements();
        tape.backward(loss);
      } catch (const NumericError& e) {
        abort_numeric(e, task, phase, epoch, b);
      }
      if (prompt_phase && !model.pool.frozen()) {
        model.pool.mask_gradients();
        adam_step(opt, prompt_params, lr);
      } else {
        adam_step(opt, head_params, lr);
      }
      zero_grads(prompt_params);
      ++opt.schedule_step;

      const std::uint64_t macs = frozen_macs + tape.forward_macs() + tape.backward_macs();
      const std::uint64_t qmacs = bs * data.query_macs_per_sample;
      stats.steps++;
      stats.peak_live_elements = std::max(stats.peak_live_elements, peak);
      stats.macs += macs;
      stats.query_macs += qmacs;
      loss_sum += loss_value * static_cast<double>(bs);
      if (trace) {
        json line = step_json({task, phase, epoch, b, loss_value, lr, peak, macs, qmacs});
        if (cfg.log_indices && prompt_phase) line["indices"] = std::move(picked);
        if (cfg.log_ops) line["ops"] = tape.op_log();
        trace->add(std::move(line));
      }
    }
    stats.epochs++;
    const double mean_loss = loss_sum / static_cast<double>(data.size());
    report.epoch_loss.push_back(mean_loss);
    if (trace) trace->add(json{{"task", task}, {"phase", phase}, {"epoch", epoch}, {"epoch_loss", mean_loss}});
    if (cfg.on_epoch_end) cfg.on_epoch_end(epoch, phase);
  }
  model.pool.set_frozen(was_frozen);
  return report;
}

TaskReport train_task_finetune(std::span<const Tensor> grids, std::span<const int> labels,
                               const std::vector<bool>& allowed, vit::Backbone& backbone, vit::Classifier& head,
                               const TrainConfig& cfg, std::size_t task, std::uint64_t seed, RunTrace* trace) {
  if (grids.empty()) throw ContractError("train_task_finetune: empty task");
  if (grids.size() != labels.size()) throw DimensionError("train_task_finetune: grids and labels differ");
  const std::size_t batches = (grids.size() + cfg.batch_size - 1) / cfg.batch_size;
  OptimizerState opt;
  opt.base_lr = cfg.base_lr;
  opt.schedule_total = cfg.epochs * batches;
  auto params = concat(backbone.parameters(), head.parameters());
  zero_grads(params);

  TaskReport report;
  PhaseStats& stats = report.prompt_phase;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_order(grids.size(), seed, task, epoch);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(grids.size(), lo + cfg.batch_size);
      std::vector<const Tensor*> batch;
      std::vector<int> y;
      for (std::size_t i = lo; i < hi; ++i) {
        batch.push_back(&grids[order[i]]);
        y.push_back(labels[order[i]]);
      }
      const double lr = cosine_lr(opt.schedule_step, opt.schedule_total, cfg.base_lr);
      ad::Tape tape;
      tape.enable_op_log(cfg.log_ops);
      double loss_value = 0.0;
      std::size_t peak = 0;
      try {
        ad::Var logits = vit::backbone_forward(tape, backbone, head, batch, true);
        ad::Var loss = ad::cross_entropy(tape, logits, y, &allowed);
        loss_value = loss.value()[0];
        peak = tape.peak_live_elements();
        tape.backward(loss);
      } catch (const NumericError& e) {
        abort_numeric(e, task, 1, epoch, b);
      }
      adam_step(opt, params, lr);
      zero_grads(params);
      ++opt.schedule_step;
      const std::uint64_t macs = tape.forward_macs() + tape.backward_macs();
      stats.steps++;
      stats.peak_live_elements = std::max(stats.peak_live_elements, peak);
      stats.macs += macs;
      loss_sum += loss_value * static_cast<double>(hi - lo);
      if (trace) {
        json line = step_json({task, 1, epoch, b, loss_value, lr, peak, macs, 0});
        if (cfg.log_ops) line["ops"] = tape.op_log();
        trace->add(std::move(line));
      }
    }
    stats.epochs++;
    const double mean_loss = loss_sum / static_cast<double>(grids.size());
    report.epoch_loss.push_back(mean_loss);
    if (trace) trace->add(json{{"task", task}, {"phase", 1}, {"epoch", epoch}, {"epoch_loss", mean_loss}});
  }
  return report;
}

}  // namespace cpsp::train
