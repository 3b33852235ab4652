#include "cpsprompt/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "cpsprompt/checkpoint.hpp"
#include "cpsprompt/cps.hpp"
#include "cpsprompt/errors.hpp"

namespace cpsp::harness {

using nlohmann::json;
namespace fs = std::filesystem;

void SyntheticSpec::validate() const {
  if (grid_side < 1 || patch_dim < 1) throw ContractError("stream: grid_side and patch_dim must be >= 1");
  if (signature_size < 1 || signature_size > num_patches()) {
    throw ContractError("stream: signature size " + std::to_string(signature_size) + " must lie in [1, " +
                        std::to_string(num_patches()) + "]");
  }
  if (classes_per_task < 1 || num_tasks < 1) throw ContractError("stream: need at least one task and class");
  if (train_per_class < 1 || test_per_class < 1) throw ContractError("stream: need samples per class");
  if (signal_noise < 0.0 || background_noise < 0.0) throw ContractError("stream: noise levels must be >= 0");
}

json SyntheticSpec::to_json() const {
  return {{"grid_side", grid_side},
          {"patch_dim", patch_dim},
          {"classes_per_task", classes_per_task},
          {"num_tasks", num_tasks},
          {"signature_size", signature_size},
          {"signal_noise", signal_noise},
          {"background_noise", background_noise},
          {"train_per_class", train_per_class},
          {"test_per_class", test_per_class},
          {"pretrain_classes", pretrain_classes},
          {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const json& j) {
  SyntheticSpec s;
  s.grid_side = j.at("grid_side");
  s.patch_dim = j.at("patch_dim");
  s.classes_per_task = j.at("classes_per_task");
  s.num_tasks = j.at("num_tasks");
  s.signature_size = j.at("signature_size");
  s.signal_noise = j.at("signal_noise");
  s.background_noise = j.at("background_noise");
  s.train_per_class = j.at("train_per_class");
  s.test_per_class = j.at("test_per_class");
  s.pretrain_classes = j.at("pretrain_classes");
  s.seed = j.at("seed");
  return s;
}

void Dataset::append(const Dataset& other) {
  grids.insert(grids.end(), other.grids.begin(), other.grids.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

namespace {

struct ClassModel {
  std::vector<std::size_t> signature;
  std::vector<Tensor> templates;  // one [patch_dim] vector per signature position
};

ClassModel draw_class(const SyntheticSpec& s, Rng& rng) {
  ClassModel c;
  c.signature = cps::uniform_sample(s.num_patches(), s.signature_size, rng);
  std::sort(c.signature.begin(), c.signature.end());
  for (std::size_t i = 0; i < s.signature_size; ++i) {
    Tensor t({s.patch_dim});
    for (double& v : t.data()) v = rng.normal();
    c.templates.push_back(std::move(t));
  }
  return c;
}

Dataset draw_samples(const SyntheticSpec& s, const ClassModel& c, int label, std::size_t count, Rng& rng) {
  Dataset d;
  for (std::size_t n = 0; n < count; ++n) {
    Tensor g({s.num_patches(), s.patch_dim});
    for (double& v : g.data()) v = s.background_noise * rng.normal();
    for (std::size_t i = 0; i < c.signature.size(); ++i) {
      double* row = g.ptr() + c.signature[i] * s.patch_dim;
      for (std::size_t j = 0; j < s.patch_dim; ++j) row[j] += c.templates[i][j] + s.signal_noise * rng.normal();
    }
    d.grids.push_back(std::move(g));
    d.labels.push_back(label);
  }
  return d;
}

}  // namespace

Stream generate_stream(const SyntheticSpec& spec) {
  spec.validate();
  Stream st;
  st.spec = spec;
  for (std::size_t c = 0; c < spec.pretrain_classes; ++c) {
    Rng rng = Rng::stream(spec.seed, {10, c});
    ClassModel cm = draw_class(spec, rng);
    st.pretrain.append(draw_samples(spec, cm, static_cast<int>(c), spec.train_per_class, rng));
    st.pretrain_signatures.push_back(cm.signature);
  }
  for (std::size_t c = 0; c < spec.task_classes(); ++c) {
    Rng rng = Rng::stream(spec.seed, {11, c});
    ClassModel cm = draw_class(spec, rng);
    st.train_by_class.push_back(draw_samples(spec, cm, static_cast<int>(c), spec.train_per_class, rng));
    st.test_by_class.push_back(draw_samples(spec, cm, static_cast<int>(c), spec.test_per_class, rng));
    st.signatures.push_back(cm.signature);
  }
  return st;
}

namespace {

void write_grids(const fs::path& path, const std::vector<const Dataset*>& sets) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto* d : sets)
    for (const auto& g : d->grids) io::write_f64(os, g.data());
}

std::vector<const Dataset*> pointers(const std::vector<Dataset>& v) {
  std::vector<const Dataset*> out;
  for (const auto& d : v) out.push_back(&d);
  return out;
}

void read_grids(const fs::path& path, std::vector<Dataset*> sets, const SyntheticSpec& s,
                const std::vector<std::vector<int>>& labels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  for (std::size_t k = 0; k < sets.size(); ++k) {
    sets[k]->labels = labels.at(k);
    for (std::size_t n = 0; n < labels[k].size(); ++n) {
      Tensor g({s.num_patches(), s.patch_dim});
      io::read_f64(is, g.data());
      sets[k]->grids.push_back(std::move(g));
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing data in " + path.string());
}

}  // namespace

void save_stream(const Stream& st, const fs::path& dir) {
  fs::create_directories(dir);
  auto labels = [](const std::vector<Dataset>& v) {
    json a = json::array();
    for (const auto& d : v) a.push_back(d.labels);
    return a;
  };
  json manifest{{"format", "cpsp-stream"},
                {"version", 1},
                {"spec", st.spec.to_json()},
                {"pretrain_labels", st.pretrain.labels},
                {"train_labels", labels(st.train_by_class)},
                {"test_labels", labels(st.test_by_class)},
                {"signatures", st.signatures},
                {"pretrain_signatures", st.pretrain_signatures}};
  write_grids(dir / "pretrain.bin", {&st.pretrain});
  write_grids(dir / "train.bin", pointers(st.train_by_class));
  write_grids(dir / "test.bin", pointers(st.test_by_class));
  std::ofstream(dir / "stream.json") << manifest.dump(1) << '\n';
}

Stream load_stream(const fs::path& dir) {
  std::ifstream is(dir / "stream.json");
  if (!is) throw DataError("missing " + (dir / "stream.json").string());
  try {
    const json m = json::parse(is);
    if (m.value("format", "") != "cpsp-stream") throw DataError("not a stream dump: " + dir.string());
    Stream st;
    st.spec = SyntheticSpec::from_json(m.at("spec"));
    st.spec.validate();
    st.signatures = m.at("signatures").get<std::vector<std::vector<std::size_t>>>();
    st.pretrain_signatures = m.at("pretrain_signatures").get<std::vector<std::vector<std::size_t>>>();
    const auto train_labels = m.at("train_labels").get<std::vector<std::vector<int>>>();
    const auto test_labels = m.at("test_labels").get<std::vector<std::vector<int>>>();
    st.train_by_class.resize(train_labels.size());
    st.test_by_class.resize(test_labels.size());
    read_grids(dir / "pretrain.bin", {&st.pretrain}, st.spec, {m.at("pretrain_labels").get<std::vector<int>>()});
    std::vector<Dataset*> tr, te;
    for (auto& d : st.train_by_class) tr.push_back(&d);
    for (auto& d : st.test_by_class) te.push_back(&d);
    read_grids(dir / "train.bin", tr, st.spec, train_labels);
    read_grids(dir / "test.bin", te, st.spec, test_labels);
    return st;
  } catch (const json::exception& e) {
    throw DataError("malformed stream manifest: " + std::string(e.what()));
  }
}

std::vector<std::vector<int>> task_classes(const SyntheticSpec& spec, std::uint64_t seed) {
  std::vector<int> order(spec.task_classes());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng = Rng::stream(seed, {3});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<int>> out(spec.num_tasks);
  for (std::size_t t = 0; t < spec.num_tasks; ++t)
    out[t].assign(order.begin() + static_cast<std::ptrdiff_t>(t * spec.classes_per_task),
                  order.begin() + static_cast<std::ptrdiff_t>((t + 1) * spec.classes_per_task));
  return out;
}

AccuracyMatrix::AccuracyMatrix(std::size_t tasks)
    : tasks_(tasks), values_(tasks * tasks, 0.0), present_(tasks * tasks, false) {}

void AccuracyMatrix::set(std::size_t t, std::size_t i, double value) {
  if (t >= tasks_ || i > t) throw IndexError("accuracy matrix: entry (" + std::to_string(t) + ", " +
                                             std::to_string(i) + ") outside the lower triangle");
  if (!(value >= 0.0 && value <= 1.0)) throw ContractError("accuracy matrix: value outside [0, 1]");
  values_[t * tasks_ + i] = value;
  present_[t * tasks_ + i] = true;
}

double AccuracyMatrix::at(std::size_t t, std::size_t i) const {
  if (!has(t, i)) throw ContractError("accuracy matrix: entry (" + std::to_string(t) + ", " + std::to_string(i) +
                                      ") not recorded");
  return values_[t * tasks_ + i];
}

bool AccuracyMatrix::has(std::size_t t, std::size_t i) const {
  return t < tasks_ && i <= t && present_[t * tasks_ + i];
}

std::size_t AccuracyMatrix::occupancy() const {
  return static_cast<std::size_t>(std::count(present_.begin(), present_.end(), true));
}

json AccuracyMatrix::to_json() const {
  json rows = json::array();
  for (std::size_t t = 0; t < tasks_; ++t) {
    json row = json::array();
    for (std::size_t i = 0; i <= t; ++i) row.push_back(has(t, i) ? json(values_[t * tasks_ + i]) : json());
    rows.push_back(row);
  }
  return rows;
}

double acc_metric(const AccuracyMatrix& a, std::size_t T) {
  if (T < 1 || T > a.tasks()) throw ContractError("acc_metric: T out of range");
  double sum = 0.0;
  for (std::size_t i = 0; i < T; ++i) {
    if (!a.has(T - 1, i)) throw ContractError("acc_metric: row " + std::to_string(T) + " incomplete");
    sum += a.at(T - 1, i);
  }
  return sum / static_cast<double>(T);
}

std::optional<double> fgt_metric(const AccuracyMatrix& a, std::size_t T) {
  if (T < 2) return std::nullopt;
  if (T > a.tasks()) throw ContractError("fgt_metric: T out of range");
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < T; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t t = i; t + 1 < T; ++t) best = std::max(best, a.at(t, i));
    sum += best - a.at(T - 1, i);
  }
  return sum / static_cast<double>(T - 1);
}

double hit_rate(std::span<const std::size_t> sampled, std::span<const std::size_t> signature) {
  if (sampled.empty() || signature.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t s : sampled) hits += std::find(signature.begin(), signature.end(), s) != signature.end();
  return static_cast<double>(hits) / static_cast<double>(std::min(sampled.size(), signature.size()));
}

namespace {

std::size_t argmax_allowed(const double* row, std::size_t c, const std::vector<bool>& allowed) {
  std::size_t best = c;
  for (std::size_t j = 0; j < c; ++j)
    if (allowed[j] && (best == c || row[j] > row[best])) best = j;
  return best;
}

}  // namespace

PretrainReport pretrain_backbone(vit::Backbone& backbone, const Dataset& data, std::size_t classes,
                                 const PretrainConfig& cfg) {
  if (classes < 2) throw ContractError("pretrain_backbone: needs at least two classes");
  if (data.size() == 0) throw ContractError("pretrain_backbone: empty data");
  Rng init = Rng::stream(cfg.seed, {20});
  vit::Classifier head(backbone.config().dim, classes, init);
  std::vector<ad::Parameter*> params = backbone.parameters();
  for (auto* p : head.parameters()) params.push_back(p);
  for (auto* p : params) p->zero_grad();
  const std::vector<bool> allowed(classes, true);
  const std::size_t batches = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  train::OptimizerState opt;
  opt.base_lr = cfg.lr;

  PretrainReport rep;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto order = train::shuffled_order(data.size(), cfg.seed, 1000, epoch);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(data.size(), lo + cfg.batch_size);
      std::vector<const Tensor*> grids;
      std::vector<int> labels;
      for (std::size_t i = lo; i < hi; ++i) {
        grids.push_back(&data.grids[order[i]]);
        labels.push_back(data.labels[order[i]]);
      }
      ad::Tape tape;
      ad::Var logits = vit::backbone_forward(tape, backbone, head, grids, true);
      for (std::size_t i = 0; i < labels.size(); ++i)
        correct += argmax_allowed(logits.value().ptr() + i * classes, classes, allowed) ==
                   static_cast<std::size_t>(labels[i]);
      tape.backward(ad::cross_entropy(tape, logits, labels));
      train::adam_step(opt, params,
                       train::cosine_lr(epoch * batches + b, cfg.max_epochs * batches, cfg.lr));
      for (auto* p : params) p->zero_grad();
    }
    rep.epochs = epoch + 1;
    rep.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    if (rep.train_accuracy >= cfg.target_accuracy) break;
  }
  if (rep.train_accuracy < cfg.min_accuracy) {
    throw TrainingError("pretraining reached only " + std::to_string(rep.train_accuracy) + " train accuracy after " +
                        std::to_string(rep.epochs) + " epochs (need " + std::to_string(cfg.min_accuracy) +
                        "); check the stream noise levels and backbone size");
  }
  return rep;
}

const char* method_name(Method m) {
  switch (m) {
    case Method::cps: return "cps";
    case Method::pd: return "pd";
    case Method::topk: return "topk";
    case Method::full: return "full";
    case Method::sgd_naive: return "sgd_naive";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::cps, Method::pd, Method::topk, Method::full, Method::sgd_naive})
    if (name == method_name(m)) return m;
  throw ConfigError("unknown method '" + name + "'");
}

StreamCache prepare_stream(const vit::Backbone& backbone, const Stream& stream) {
  StreamCache cache;
  for (const auto& d : stream.train_by_class) cache.train_by_class.push_back(train::prepare(backbone, d.grids, d.labels));
  for (const auto& d : stream.test_by_class) cache.test_by_class.push_back(train::prepare(backbone, d.grids, d.labels));
  return cache;
}

std::optional<double> RunResult::mean_hit_rate() const {
  if (hit_rate_count == 0) return std::nullopt;
  return hit_rate_sum / static_cast<double>(hit_rate_count);
}

namespace {

train::PreparedSet merge(const std::vector<train::PreparedSet>& by_class, const std::vector<int>& classes) {
  train::PreparedSet out;
  for (int c : classes) {
    const auto& s = by_class.at(static_cast<std::size_t>(c));
    out.query_macs_per_sample = s.query_macs_per_sample;
    out.tokens.insert(out.tokens.end(), s.tokens.begin(), s.tokens.end());
    out.queries.insert(out.queries.end(), s.queries.begin(), s.queries.end());
    out.labels.insert(out.labels.end(), s.labels.begin(), s.labels.end());
  }
  return out;
}

Dataset merge(const std::vector<Dataset>& by_class, const std::vector<int>& classes) {
  Dataset out;
  for (int c : classes) out.append(by_class.at(static_cast<std::size_t>(c)));
  return out;
}

constexpr std::size_t kEvalBatch = 50;

double evaluate_prompt(train::PromptModel& model, const train::PreparedSet& test, const std::vector<bool>& seen) {
  const std::size_t d = model.backbone.config().dim, c = model.head.classes();
  const bool was_frozen = model.pool.frozen();
  model.pool.set_frozen(true);
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < test.size(); lo += kEvalBatch) {
    const std::size_t hi = std::min(test.size(), lo + kEvalBatch);
    Tensor zq({hi - lo, d});
    for (std::size_t i = lo; i < hi; ++i) std::copy_n(test.queries[i].z_q.ptr(), d, zq.ptr() + (i - lo) * d);
    ad::Tape tape;
    vit::PromptPrefix prefix = model.pool.compose(tape, tape.constant(std::move(zq)));
    ad::Var logits = vit::prompt_forward(tape, model.backbone, model.head,
                                         std::span<const vit::TokenSequence>(test.tokens).subspan(lo, hi - lo),
                                         &prefix, vit::TrainableSet::none());
    for (std::size_t i = lo; i < hi; ++i)
      correct += argmax_allowed(logits.value().ptr() + (i - lo) * c, c, seen) ==
                 static_cast<std::size_t>(test.labels[i]);
  }
  model.pool.set_frozen(was_frozen);
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

double evaluate_finetune(vit::Backbone& backbone, vit::Classifier& head, const Dataset& test,
                         const std::vector<bool>& seen) {
  const std::size_t c = head.classes();
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < test.size(); lo += kEvalBatch) {
    const std::size_t hi = std::min(test.size(), lo + kEvalBatch);
    std::vector<const Tensor*> grids;
    for (std::size_t i = lo; i < hi; ++i) grids.push_back(&test.grids[i]);
    ad::Tape tape;
    ad::Var logits = vit::backbone_forward(tape, backbone, head, grids, false);
    for (std::size_t i = lo; i < hi; ++i)
      correct += argmax_allowed(logits.value().ptr() + (i - lo) * c, c, seen) ==
                 static_cast<std::size_t>(test.labels[i]);
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

std::vector<bool> class_mask(std::size_t total, const std::vector<std::vector<int>>& tasks, std::size_t first,
                             std::size_t last) {
  std::vector<bool> m(total, false);
  for (std::size_t t = first; t <= last; ++t)
    for (int c : tasks[t]) m[static_cast<std::size_t>(c)] = true;
  return m;
}

train::TrainConfig train_config(Method method, const Hyper& h, std::uint64_t seed) {
  train::TrainConfig tc;
  tc.epochs = h.epochs;
  tc.batch_size = h.batch_size;
  tc.base_lr = h.lr;
  tc.phase_ratio = h.phase_ratio;
  tc.cps = cps::CpsConfig{h.temperature, h.reduction_ratio, seed};
  tc.log_indices = h.log_indices;
  tc.log_ops = h.log_ops;
  switch (method) {
    case Method::cps: tc.selection = train::Selection::critical; break;
    case Method::pd: tc.selection = train::Selection::uniform; break;
    case Method::topk: tc.selection = train::Selection::topk; break;
    case Method::full:
    case Method::sgd_naive:
      tc.selection = train::Selection::full;
      tc.cps.reduction_ratio = 0.0;
      tc.phase_ratio = 1.0;
      break;
  }
  return tc;
}

}  // namespace

RunResult run_sequence(Method method, const Stream& stream, const vit::Backbone& pretrained, const StreamCache& cache,
                       const Hyper& hyper, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const SyntheticSpec& spec = stream.spec;
  const auto& bc = pretrained.config();
  if (bc.num_patches() != spec.num_patches() || bc.patch_dim != spec.patch_dim) {
    throw ContractError("run_sequence: backbone grid does not match the stream");
  }
  const std::size_t total_classes = spec.task_classes();
  const train::TrainConfig tc = train_config(method, hyper, seed);
  if (tc.selection != train::Selection::full) tc.cps.validate(spec.num_patches());

  RunResult res;
  res.accuracy = AccuracyMatrix(spec.num_tasks);
  res.task_classes = task_classes(spec, seed);

  Rng init = Rng::stream(seed, {4});
  vit::Backbone backbone = pretrained;
  vit::Classifier head(bc.dim, total_classes, init);
  hyper.pool.validate(bc);
  pool::PromptPool pool(hyper.pool, bc.dim);
  train::PromptModel model{backbone, pool, head};

  accounting::ActivationModel am;
  am.backbone = bc;
  am.prompt_length = hyper.pool.prompt_length;
  am.injected_layers = hyper.pool.layers;
  am.classes = total_classes;

  for (std::size_t t = 0; t < spec.num_tasks; ++t) {
    const auto allowed_now = class_mask(total_classes, res.task_classes, t, t);
    const auto seen = class_mask(total_classes, res.task_classes, 0, t);
    if (method == Method::sgd_naive) {
      const Dataset data = merge(stream.train_by_class, res.task_classes[t]);
      auto rep = train::train_task_finetune(data.grids, data.labels, seen, backbone, head, tc, t, seed, &res.trace);
      am.batch = std::min(tc.batch_size, data.size());
      const ad::GroupMask all = ad::bit(ad::Group::backbone) | ad::bit(ad::Group::classifier);
      res.resources.add(res.resources.prompt_phase, rep.prompt_phase.steps, rep.prompt_phase.peak_live_elements,
                        accounting::predict_activations(bc.num_patches() + 1, am, all), rep.prompt_phase.macs, 0);
      for (std::size_t i = 0; i <= t; ++i)
        res.accuracy.set(t, i, evaluate_finetune(backbone, head, merge(stream.test_by_class, res.task_classes[i]), seen));
      continue;
    }

    pool.expand_for_task(t, init);
    const train::PreparedSet data = merge(cache.train_by_class, res.task_classes[t]);
    const auto& signatures = stream.signatures;
    train::SelectionHook hook = [&](std::size_t row, std::span<const std::size_t> pos) {
      res.hit_rate_sum += hit_rate(pos, signatures.at(static_cast<std::size_t>(data.labels[row])));
      ++res.hit_rate_count;
    };
    auto rep = train::train_task(data, allowed_now, model, tc, t, seed, &res.trace, hook);

    am.batch = std::min(tc.batch_size, data.size());
    am.components = pool.components();
    const std::size_t k = tc.selection == train::Selection::full ? spec.num_patches() : tc.cps.budget(spec.num_patches());
    const ad::GroupMask p1 = ad::bit(ad::Group::prompt) | ad::bit(ad::Group::classifier);
    const ad::GroupMask p2 = ad::bit(ad::Group::classifier);
    if (rep.prompt_phase.steps > 0) {
      res.resources.add(res.resources.prompt_phase, rep.prompt_phase.steps, rep.prompt_phase.peak_live_elements,
                        accounting::predict_activations(k + 1, am, p1), rep.prompt_phase.macs,
                        rep.prompt_phase.query_macs);
    }
    if (rep.classifier_phase.steps > 0) {
      res.resources.add(res.resources.classifier_phase, rep.classifier_phase.steps,
                        rep.classifier_phase.peak_live_elements,
                        accounting::predict_activations(spec.num_patches() + 1, am, p2), rep.classifier_phase.macs,
                        rep.classifier_phase.query_macs);
    }
    for (std::size_t i = 0; i <= t; ++i)
      res.accuracy.set(t, i, evaluate_prompt(model, merge(cache.test_by_class, res.task_classes[i]), seen));
  }
  res.resources.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace cpsp::harness
