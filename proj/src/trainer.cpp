#include "clsd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "clsd/errors.hpp"
#include "clsd/metrics.hpp"

namespace clsd {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0,1)");
  if (!(adam.eps > 0.0)) throw ConfigError("Adam eps must be > 0");
  loss.validate();
}

void adam_step(std::span<double> params, std::span<const double> grads, OptimizerState& state, double lr,
               const AdamConfig& adam, const std::vector<bool>* frozen) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractViolation("adam_step: parameter, gradient and moment sizes differ");
  if (frozen && frozen->size() != params.size()) throw ContractViolation("adam_step: frozen mask size differs");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i]))
      throw TrainingAborted("non-finite gradient at parameter " + std::to_string(i) + " on step " +
                            std::to_string(state.step + 1));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(adam.beta1, t);
  const double bc2 = 1.0 - std::pow(adam.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (frozen && (*frozen)[i]) continue;
    const double g = grads[i];
    double& m = state.m[i];
    double& v = state.v[i];
    m = adam.beta1 * m + (1.0 - adam.beta1) * g;
    v = adam.beta2 * v + (1.0 - adam.beta2) * g * g;
    params[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + adam.eps);
  }
}

std::size_t warmup_epochs(double warmup_fraction, std::size_t epochs) {
  // Guard against 1/3 * 9 = 3.0000000000000004 style round-up.
  const double raw = warmup_fraction * static_cast<double>(epochs);
  const double nearest = std::round(raw);
  const double boundary = std::abs(raw - nearest) < 1e-9 ? nearest : std::ceil(raw);
  return std::min(epochs, static_cast<std::size_t>(boundary));
}

void write_report_csv(const RunReport& report, std::ostream& out) {
  out << "epoch,phase,train_logloss,test_auc,test_logloss\n";
  char buf[160];
  for (const auto& e : report.epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.6f,%.6f,%.6f\n", e.epoch, std::string(to_string(e.phase)).c_str(),
                  e.train_logloss, e.test_auc, e.test_logloss);
    out << buf;
  }
}

void write_report_csv(const RunReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_report_csv(report, out);
}

ModelSpec model_spec_for(const FieldSchema& schema, const TrainConfig& config) {
  const bool distills = warmup_epochs(config.loss.warmup_fraction, config.epochs) < config.epochs;
  return make_spec(schema, config.backbone, distills && config.loss.uses_adgate(),
                   distills && config.loss.uses_aux_head());
}

TrainState initial_state(const FieldSchema& schema, const TrainConfig& config) {
  TrainState s;
  s.params = init_params(model_spec_for(schema, config), config.seed);
  s.optimizer = OptimizerState(s.params.size());
  s.next_epoch = 0;
  return s;
}

namespace {

std::vector<bool> warmup_mask(const ModelParams& params) {
  std::vector<bool> frozen(params.size(), false);
  const auto& L = params.layout;
  for (std::size_t i = L.adgate_begin; i < L.adgate_end; ++i) frozen[i] = true;
  if (L.aux.out) {
    for (std::size_t i = 0; i < L.aux.weight.size; ++i) frozen[L.aux.weight.offset + i] = true;
    frozen[L.aux.bias.offset] = true;
  }
  return frozen;
}

std::string batch_dump(const Batch& batch, std::span<const double> p, std::size_t limit = 8) {
  std::ostringstream os;
  for (std::size_t i = 0; i < std::min(limit, batch.size()); ++i) {
    os << "\n  row " << batch.rows()[i] << " label=" << int(batch[i].label) << " p=" << p[i] << " features=";
    for (auto id : batch[i].feature_ids) os << id << ' ';
  }
  return os.str();
}

}  // namespace

TrainResult train(const Corpus& train_corpus, const Corpus& test_corpus, TrainState state, const TrainConfig& config,
                  TrainObserver* observer) {
  config.validate();
  if (train_corpus.size() == 0) throw ContractViolation("training corpus is empty");
  if (state.params.spec.cardinalities != train_corpus.schema.cardinalities)
    throw ContractViolation("model and corpus schemas differ");
  if (state.optimizer.m.size() != state.params.size()) throw ContractViolation("optimizer state does not match model");

  const std::size_t boundary = warmup_epochs(config.loss.warmup_fraction, config.epochs);
  const bool distills = boundary < config.epochs;
  if (distills && config.loss.uses_adgate() && !state.params.spec.adgate)
    throw ConfigError("loss needs an AdGate but the model has none");
  if (distills && config.loss.uses_aux_head() && !state.params.spec.aux_head)
    throw ConfigError("loss needs an auxiliary head but the model has none");

  LossConfig warm_loss = config.loss;
  warm_loss.variant = LossVariant::ori;
  const auto frozen_in_warmup = warmup_mask(state.params);

  ModelParams& params = state.params;
  std::vector<double> grad(params.size());
  std::vector<double> p, p_local, served, dwell;
  std::vector<std::uint8_t> y;
  std::vector<double> test_served;
  std::vector<std::uint8_t> test_labels;
  for (const auto& r : test_corpus.records) test_labels.push_back(r.label);

  TrainResult result;
  for (std::size_t epoch = state.next_epoch; epoch < config.epochs; ++epoch) {
    const Phase phase = epoch < boundary ? Phase::warmup : Phase::distill;
    const LossConfig& loss = phase == Phase::warmup ? warm_loss : config.loss;
    const bool gate = phase == Phase::distill && loss.uses_adgate();
    const bool aux = phase == Phase::distill && loss.uses_aux_head();
    const bool teach = phase == Phase::distill && loss.uses_teacher();
    const std::vector<bool>* frozen = phase == Phase::warmup ? &frozen_in_warmup : nullptr;

    const EpochBatches batches(train_corpus, config.batch_size, config.seed, epoch);
    double ll_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < batches.count(); ++b) {
      const Batch batch = batches[b];
      const std::size_t n = batch.size();

      TeacherScore teacher;
      if (teach) {
        if (observer) observer->on_teacher(epoch, b, params);
        teacher = teacher_scores(params, batch, phase);
      }

      const auto trace = forward(params, batch, {.adgate = gate, .aux = aux});
      p.resize(n);
      served.resize(n);
      y.resize(n);
      dwell.resize(n);
      p_local.resize(gate ? n : 0);
      for (std::size_t i = 0; i < n; ++i) {
        p[i] = predict(trace.backbone_logit[i]);
        y[i] = batch[i].label;
        dwell[i] = batch[i].dwell_time;
        if (gate) p_local[i] = predict(trace.adgate_logit[i]);
        served[i] = gate ? std::clamp(p[i] + p_local[i], kProbEpsilon, 1.0 - kProbEpsilon) : p[i];
      }

      LossInputs in;
      in.p = p;
      in.p_local = p_local;
      in.y = y;
      in.teacher = teacher.p_teacher;
      in.dwell_time = dwell;
      in.aux = trace.aux_output;
      const LossResult loss_value = evaluate_loss(loss, in);
      if (!std::isfinite(loss_value.value)) {
        throw TrainingAborted("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                              batch_dump(batch, p));
      }
      ll_sum += logloss(served, y) * static_cast<double>(n);
      seen += n;

      std::fill(grad.begin(), grad.end(), 0.0);
      backward_into(params, trace, {loss_value.d_backbone, loss_value.d_adgate, loss_value.d_aux}, GradTarget::both,
                    grad);
      try {
        adam_step(params.values, grad, state.optimizer, config.learning_rate, config.adam, frozen);
      } catch (const TrainingAborted& e) {
        throw TrainingAborted(std::string(e.what()) + " (epoch " + std::to_string(epoch) + " batch " +
                              std::to_string(b) + ")" + batch_dump(batch, p));
      }
      if (observer) observer->on_step(epoch, b, params);
    }

    EpochReport row;
    row.epoch = epoch;
    row.phase = phase;
    row.train_logloss = ll_sum / static_cast<double>(seen);
    if (test_corpus.size() > 0) {
      // The AdGate only joins the served prediction once it is trained.
      test_served = phase == Phase::distill && config.loss.uses_adgate() ? served_predictions(params, test_corpus)
                                                                         : backbone_predictions(params, test_corpus);
      row.test_logloss = logloss(test_served, test_labels);
      try {
        row.test_auc = auc(test_served, test_labels);
      } catch (const MetricError&) {
        row.test_auc = NAN;
      }
    } else {
      row.test_auc = NAN;
      row.test_logloss = NAN;
    }
    result.report.epochs.push_back(row);
    state.next_epoch = epoch + 1;
    if (observer && observer->stop_after_epoch(epoch)) break;
  }
  result.state = std::move(state);
  return result;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const TrainState& state, std::ostream& out) {
  write_params(state.params, out, false);
  const double step = static_cast<double>(state.optimizer.step);
  const double next_epoch = static_cast<double>(state.next_epoch);
  write_section(out, "adam.step", std::span<const double>(&step, 1));
  write_section(out, "adam.m", state.optimizer.m);
  write_section(out, "adam.v", state.optimizer.v);
  write_section(out, "trainer.next_epoch", std::span<const double>(&next_epoch, 1));
  out << "end\n";
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  save_checkpoint(state, out);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

TrainState load_checkpoint(std::istream& in) {
  const auto file = read_checkpoint_sections(in);
  ModelParams params = params_from_sections(file);
  auto section = [&](const char* name, std::size_t expect) -> const std::vector<double>& {
    const auto* v = file.find(name);
    if (!v) throw ParseError(0, std::string("checkpoint missing section '") + name + "'");
    if (v->size() != expect) throw ParseError(0, std::string("section '") + name + "' has the wrong size");
    return *v;
  };
  auto whole = [](double x, const char* name) {
    if (!(x >= 0.0) || x != std::floor(x)) throw ParseError(0, std::string("section '") + name + "' is not a count");
    return static_cast<std::uint64_t>(x);
  };
  TrainState state;
  state.optimizer.step = whole(section("adam.step", 1)[0], "adam.step");
  state.optimizer.m = section("adam.m", params.size());
  state.optimizer.v = section("adam.v", params.size());
  state.next_epoch = static_cast<std::size_t>(whole(section("trainer.next_epoch", 1)[0], "trainer.next_epoch"));
  state.params = std::move(params);
  return state;
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return load_checkpoint(in);
}

}  // namespace clsd
