#include "clsd/objective.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "clsd/errors.hpp"

namespace clsd {

namespace {

constexpr double kDwellScaleSeconds = 30.0;

thread_local std::uint64_t g_teacher_forwards = 0;

void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw ContractViolation(std::string(what) + ": length " + std::to_string(b) + " does not match batch length " +
                            std::to_string(a));
}

double nll_term(double p, std::uint8_t y) { return y ? -std::log(p) : -std::log(1.0 - p); }

}  // namespace

std::string_view to_string(LossVariant v) {
  switch (v) {
    case LossVariant::ori: return "ori";
    case LossVariant::global: return "global";
    case LossVariant::clsd: return "clsd";
    case LossVariant::focal: return "focal";
    case LossVariant::dt_reweight: return "dt_reweight";
    case LossVariant::mtl: return "mtl";
  }
  return "?";
}

LossVariant parse_loss_variant(std::string_view text) {
  if (text == "ori") return LossVariant::ori;
  if (text == "global") return LossVariant::global;
  if (text == "clsd") return LossVariant::clsd;
  if (text == "focal") return LossVariant::focal;
  if (text == "dt_reweight" || text == "dt-reweight") return LossVariant::dt_reweight;
  if (text == "mtl") return LossVariant::mtl;
  throw ConfigError("unknown loss '" + std::string(text) + "'");
}

std::string_view to_string(Phase p) { return p == Phase::warmup ? "warmup" : "clsd"; }

void LossConfig::validate() const {
  if (!std::isfinite(alpha) || alpha < 0.0) throw ConfigError("alpha must be finite and >= 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must lie in [0,1]");
  if (!(epsilon > 0.0 && epsilon < 0.5)) throw ConfigError("epsilon must lie in (0, 0.5)");
  if (!(focal_gamma >= 0.0)) throw ConfigError("focal_gamma must be >= 0");
  if (!(dt_weight_cap > 0.0)) throw ConfigError("dt_weight_cap must be > 0");
  if (!(mtl_weight >= 0.0)) throw ConfigError("mtl_weight must be >= 0");
}

LossResult loss_ori(Reals p, Labels y) {
  require_same_size(p.size(), y.size(), "labels");
  LossResult r;
  r.d_backbone.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    r.value += nll_term(p[i], y[i]);
    r.d_backbone[i] = p[i] - static_cast<double>(y[i]);
  }
  return r;
}

LossResult loss_global(Reals p, Labels y, Reals teacher) {
  require_same_size(p.size(), y.size(), "labels");
  require_same_size(p.size(), teacher.size(), "teacher scores");
  LossResult r;
  r.d_backbone.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double t = teacher[i];
    if (!(t >= 0.0 && t <= 1.0)) throw ContractViolation("teacher score outside [0,1]");
    if (y[i]) {
      const double w = 1.0 + t;
      r.value -= w * std::log(p[i]);
      r.d_backbone[i] = -w * (1.0 - p[i]);
    } else {
      r.value -= std::log(1.0 - p[i]);
      r.d_backbone[i] = p[i];
    }
  }
  return r;
}

LossResult loss_clsd(Reals p, Reals p_local, Labels y, Reals teacher, double alpha, double epsilon) {
  if (!std::isfinite(alpha) || alpha < 0.0) throw ConfigError("alpha must be finite and >= 0");
  require_same_size(p.size(), y.size(), "labels");
  const bool gate = !p_local.empty();
  if (gate) require_same_size(p.size(), p_local.size(), "p_local");
  const bool weighted = alpha != 0.0;
  if (weighted) require_same_size(p.size(), teacher.size(), "teacher scores");

  LossResult r;
  r.d_backbone.resize(p.size());
  if (gate) r.d_adgate.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    double w = 1.0;
    if (weighted) {
      const double t = teacher[i];
      if (!(t >= 0.0 && t <= 1.0)) throw ContractViolation("teacher score outside [0,1]");
      w = 1.0 + alpha * t;
    }
    const double pl = gate ? p_local[i] : 0.0;
    const double raw = p[i] + pl;
    const bool clamped = raw < epsilon || raw > 1.0 - epsilon;
    const double q = std::clamp(raw, epsilon, 1.0 - epsilon);
    double dq = 0.0;
    if (y[i]) {
      r.value -= w * std::log(q);
      dq = -w / q;
    } else {
      r.value -= std::log(1.0 - q);
      dq = 1.0 / (1.0 - q);
    }
    if (clamped) dq = 0.0;
    r.d_backbone[i] = dq * p[i] * (1.0 - p[i]);
    if (gate) r.d_adgate[i] = dq * pl * (1.0 - pl);
  }
  return r;
}

LossResult loss_focal(Reals p, Labels y, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("focal gamma must be >= 0");
  require_same_size(p.size(), y.size(), "labels");
  LossResult r;
  r.d_backbone.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i];
    if (y[i]) {
      const double m = std::pow(1.0 - pi, gamma);
      const double lp = std::log(pi);
      r.value -= m * lp;
      r.d_backbone[i] = gamma * pi * m * lp - m * (1.0 - pi);
    } else {
      const double m = std::pow(pi, gamma);
      const double lq = std::log(1.0 - pi);
      r.value -= m * lq;
      r.d_backbone[i] = -gamma * m * (1.0 - pi) * lq + m * pi;
    }
  }
  return r;
}

double dwell_weight(double dwell_time, double cap) {
  return std::min(1.0 + std::log1p(dwell_time / kDwellScaleSeconds), cap);
}

LossResult loss_dt_reweight(Reals p, Labels y, Reals dwell_time, double cap) {
  if (!(cap > 0.0)) throw ConfigError("dwell weight cap must be > 0");
  require_same_size(p.size(), y.size(), "labels");
  require_same_size(p.size(), dwell_time.size(), "dwell times");
  LossResult r;
  r.d_backbone.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (dwell_time[i] < 0.0) throw ContractViolation("negative dwell time");
    if (y[i]) {
      const double w = dwell_weight(dwell_time[i], cap);
      r.value -= w * std::log(p[i]);
      r.d_backbone[i] = -w * (1.0 - p[i]);
    } else {
      r.value -= std::log(1.0 - p[i]);
      r.d_backbone[i] = p[i];
    }
  }
  return r;
}

LossResult loss_mtl(Reals p, Labels y, Reals dwell_time, Reals predicted_dwell, double mtl_weight) {
  if (!(mtl_weight >= 0.0)) throw ConfigError("mtl_weight must be >= 0");
  LossResult r = loss_ori(p, y);
  require_same_size(p.size(), dwell_time.size(), "dwell times");
  require_same_size(p.size(), predicted_dwell.size(), "predicted dwell");
  r.d_aux.assign(p.size(), 0.0);
  std::size_t positives = 0;
  for (auto label : y) positives += label;
  if (positives == 0) return r;
  const double scale = mtl_weight / static_cast<double>(positives);
  double sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!y[i]) continue;
    const double diff = predicted_dwell[i] - std::log1p(dwell_time[i]);
    sq += diff * diff;
    r.d_aux[i] = 2.0 * scale * diff;
  }
  r.value += scale * sq;
  return r;
}

LossResult evaluate_loss(const LossConfig& c, const LossInputs& in) {
  switch (c.variant) {
    case LossVariant::ori: return loss_ori(in.p, in.y);
    case LossVariant::global: return loss_global(in.p, in.y, in.teacher);
    case LossVariant::clsd: return loss_clsd(in.p, in.p_local, in.y, in.teacher, c.alpha, c.epsilon);
    case LossVariant::focal: return loss_focal(in.p, in.y, c.focal_gamma);
    case LossVariant::dt_reweight: return loss_dt_reweight(in.p, in.y, in.dwell_time, c.dt_weight_cap);
    case LossVariant::mtl: return loss_mtl(in.p, in.y, in.dwell_time, in.aux, c.mtl_weight);
  }
  throw ConfigError("unknown loss variant");
}

std::vector<double> positive_weights(const LossConfig& c, const LossInputs& in) {
  std::vector<double> w(in.y.size(), 1.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!in.y[i]) continue;
    switch (c.variant) {
      case LossVariant::ori:
      case LossVariant::mtl: break;
      case LossVariant::global: w[i] = 1.0 + in.teacher[i]; break;
      case LossVariant::clsd: w[i] = c.alpha == 0.0 ? 1.0 : 1.0 + c.alpha * in.teacher[i]; break;
      case LossVariant::focal: w[i] = std::pow(1.0 - in.p[i], c.focal_gamma); break;
      case LossVariant::dt_reweight: w[i] = dwell_weight(in.dwell_time[i], c.dt_weight_cap); break;
    }
  }
  return w;
}

// ---------------------------------------------------------------------------

TeacherScore teacher_scores(const ModelParams& snapshot, const Batch& batch, Phase phase) {
  if (phase == Phase::warmup) throw ContractViolation("no teacher exists during warm-up");
  ++g_teacher_forwards;
  const auto trace = forward(snapshot, batch);
  TeacherScore t;
  t.p_teacher.resize(trace.n);
  for (std::size_t i = 0; i < trace.n; ++i) t.p_teacher[i] = predict(trace.backbone_logit[i]);
  return t;
}

std::uint64_t teacher_forward_count() { return g_teacher_forwards; }

}  // namespace clsd
