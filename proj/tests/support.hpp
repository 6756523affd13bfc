#pragma once

// Shared helpers for the unit and acceptance binaries.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "clsd/corpus.hpp"
#include "clsd/model.hpp"
#include "clsd/objective.hpp"
#include "clsd/random.hpp"

namespace clsd::testing {

/// user_id 4, item_id 5, user_group 3, item_attr 3.
inline FieldSchema tiny_schema() {
  return {{4, 5, 3, 3}, {FieldRole::user_id, FieldRole::item_id, FieldRole::user_group, FieldRole::item_attr}};
}

/// `n` random records over `schema`, at least one positive and one negative.
inline Corpus random_corpus(const FieldSchema& schema, std::size_t n, Rng& rng) {
  Corpus c;
  c.schema = schema;
  const std::size_t gf = *schema.find(FieldRole::user_group);
  for (std::size_t r = 0; r < n; ++r) {
    SampleRecord rec;
    for (auto card : schema.cardinalities) rec.feature_ids.push_back(static_cast<std::uint32_t>(rng.below(card)));
    rec.group_id = rec.feature_ids[gf];
    rec.label = r == 0 ? 1 : r == 1 ? 0 : static_cast<std::uint8_t>(rng.bernoulli(0.5));
    if (rec.label) rec.dwell_time = rng.uniform(0.0, 200.0);
    rec.latent_confidence = rng.uniform();
    c.records.push_back(rec);
  }
  return c;
}

/// One gradient-check problem: a model, a batch, frozen teacher scores, a loss.
struct GradInstance {
  ModelParams params;
  Corpus corpus;
  std::vector<std::size_t> rows;
  std::vector<double> teacher;
  LossConfig loss;

  Batch batch() const { return Batch(corpus, rows); }
  bool gate() const { return loss.uses_adgate(); }
  bool aux() const { return loss.uses_aux_head(); }
};

/// Loss of `inst` evaluated at `params`; fills the trace and loss result if asked.
inline double instance_loss(const GradInstance& inst, const ModelParams& params, ForwardTrace* trace_out = nullptr,
                            LossResult* result_out = nullptr) {
  const Batch batch = inst.batch();
  ForwardTrace trace = forward(params, batch, {.adgate = inst.gate(), .aux = inst.aux()});
  const std::size_t n = batch.size();
  std::vector<double> p(n), p_local, dwell(n);
  std::vector<std::uint8_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = predict(trace.backbone_logit[i]);
    y[i] = batch[i].label;
    dwell[i] = batch[i].dwell_time;
    if (inst.gate()) p_local.push_back(predict(trace.adgate_logit[i]));
  }
  LossInputs in{p, p_local, y, inst.teacher, dwell, trace.aux_output};
  LossResult result = evaluate_loss(inst.loss, in);
  const double value = result.value;
  if (trace_out) *trace_out = std::move(trace);
  if (result_out) *result_out = std::move(result);
  return value;
}

/// Smallest |pre-activation| over every ReLU in the trace.
inline double relu_margin(const ForwardTrace& t) {
  double m = INFINITY;
  for (const auto& layer : t.mlp_pre)
    for (double v : layer) m = std::min(m, std::abs(v));
  for (const auto& layer : t.adgate_hidden_pre)
    for (double v : layer) m = std::min(m, std::abs(v));
  return m;
}

/// Random instance with parameters large enough to exercise every term.
/// Resamples until every ReLU input and the clsd clamp are at least 1e-3 away
/// from their kinks, so a step of 1e-4 never crosses one.
inline GradInstance make_grad_instance(Backbone backbone, LossVariant variant, std::uint64_t seed,
                                       std::size_t batch_size = 6) {
  Rng rng(derive_seed(seed, 0x6ad));
  for (;;) {
    GradInstance inst;
    inst.loss.variant = variant;
    inst.loss.alpha = rng.uniform(0.25, 1.5);
    inst.loss.focal_gamma = rng.uniform(0.5, 3.0);
    inst.loss.dt_weight_cap = 3.0;
    inst.loss.mtl_weight = rng.uniform(0.1, 2.0);
    inst.corpus = random_corpus(tiny_schema(), batch_size, rng);
    for (std::size_t i = 0; i < batch_size; ++i) inst.rows.push_back(i);
    for (std::size_t i = 0; i < batch_size; ++i) inst.teacher.push_back(rng.uniform());
    if (!inst.loss.uses_teacher()) inst.teacher.clear();

    ModelSpec spec = make_spec(inst.corpus.schema, backbone, inst.loss.uses_adgate(), inst.loss.uses_aux_head());
    inst.params = ModelParams(spec);
    for (double& v : inst.params.values) v = rng.uniform(-0.5, 0.5);
    if (spec.adgate) {
      // Keep p + p_local mostly below 1 so the clamp does not hide the gradient.
      inst.params.values[inst.params.layout.adgate.back().bias.offset] = rng.uniform(-3.0, -1.5);
      inst.params.values[inst.params.layout.bias.offset] = rng.uniform(-1.5, -0.5);
    }

    ForwardTrace trace;
    instance_loss(inst, inst.params, &trace);
    if (relu_margin(trace) < 1e-3) continue;
    bool near_clamp = false;
    if (trace.has_adgate()) {
      for (std::size_t i = 0; i < trace.n; ++i) {
        const double q = predict(trace.backbone_logit[i]) + predict(trace.adgate_logit[i]);
        if (std::abs(q - (1.0 - kProbEpsilon)) < 1e-3) near_clamp = true;
      }
    }
    if (near_clamp) continue;
    return inst;
  }
}

struct GradCheck {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double worst_rel = 0.0;  // over entries above the absolute floor
};

/// Central differences on every flat parameter. An entry passes when the
/// relative error is within `rel` or the absolute error within `floor`.
inline GradCheck check_gradients(const GradInstance& inst, double h = 1e-4, double rel = 1e-4, double floor = 1e-7) {
  ForwardTrace trace;
  LossResult loss;
  instance_loss(inst, inst.params, &trace, &loss);
  const auto analytic = backward(inst.params, trace, {loss.d_backbone, loss.d_adgate, loss.d_aux});

  GradCheck out;
  ModelParams probe = inst.params;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const double x = probe.values[k];
    probe.values[k] = x + h;
    const double up = instance_loss(inst, probe);
    probe.values[k] = x - h;
    const double down = instance_loss(inst, probe);
    probe.values[k] = x;
    const double numeric = (up - down) / (2.0 * h);
    const double abs_err = std::abs(numeric - analytic[k]);
    const double scale = std::max(std::abs(numeric), std::abs(analytic[k]));
    const double rel_err = scale > 0.0 ? abs_err / scale : 0.0;
    ++out.checked;
    if (abs_err > floor) out.worst_rel = std::max(out.worst_rel, rel_err);
    if (abs_err > floor && rel_err > rel) ++out.failures;
  }
  return out;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("clsd_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace clsd::testing
