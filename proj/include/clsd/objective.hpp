#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "clsd/corpus.hpp"
#include "clsd/model.hpp"

namespace clsd {

enum class LossVariant { ori, global, clsd, focal, dt_reweight, mtl };

std::string_view to_string(LossVariant v);
/// Accepts both `dt_reweight` and `dt-reweight`.
LossVariant parse_loss_variant(std::string_view text);

struct LossConfig {
  LossVariant variant = LossVariant::ori;
  double alpha = 1.0;                  // scale on the teacher confidence (clsd)
  double warmup_fraction = 1.0 / 3.0;  // share of epochs trained on the plain log-loss
  double epsilon = kProbEpsilon;
  double focal_gamma = 2.0;
  double dt_weight_cap = 3.0;
  double mtl_weight = 1.0;

  /// Throws ConfigError on out-of-range hyperparameters.
  void validate() const;

  /// The variant trains an AdGate after warm-up.
  bool uses_adgate() const { return variant == LossVariant::clsd; }
  /// The variant reads teacher scores after warm-up.
  bool uses_teacher() const {
    return variant == LossVariant::global || (variant == LossVariant::clsd && alpha != 0.0);
  }
  bool uses_aux_head() const { return variant == LossVariant::mtl; }
};

/// Scalar loss plus per-sample derivatives w.r.t. each model output.
/// Gradient vectors are empty when the loss does not depend on that output.
struct LossResult {
  double value = 0.0;
  std::vector<double> d_backbone;
  std::vector<double> d_adgate;
  std::vector<double> d_aux;
};

using Labels = std::span<const std::uint8_t>;
using Reals = std::span<const double>;

/// Negative log-likelihood. d/dlogit = p - y.
LossResult loss_ori(Reals p, Labels y);

/// Positives weighted by (1 + t); t is a detached teacher score in [0,1].
LossResult loss_global(Reals p, Labels y, Reals teacher);

/// (1 + alpha t) y log q + (1 - y) log(1 - q) with q = clamp(p + p_local).
/// An empty `p_local` means the AdGate is disabled (q = p).
LossResult loss_clsd(Reals p, Reals p_local, Labels y, Reals teacher, double alpha, double epsilon = kProbEpsilon);

LossResult loss_focal(Reals p, Labels y, double gamma);

/// Positive weight min(1 + ln(1 + dwell / 30 s), cap).
LossResult loss_dt_reweight(Reals p, Labels y, Reals dwell_time, double cap);
double dwell_weight(double dwell_time, double cap);

/// loss_ori + mtl_weight * mean over positives of (aux - ln(1 + dwell))^2.
LossResult loss_mtl(Reals p, Labels y, Reals dwell_time, Reals predicted_dwell, double mtl_weight);

/// Everything a loss might read for one batch.
struct LossInputs {
  Reals p;
  Reals p_local;
  Labels y;
  Reals teacher;
  Reals dwell_time;
  Reals aux;
};

/// Dispatches on `config.variant`. Inputs a variant does not read may be empty.
LossResult evaluate_loss(const LossConfig& config, const LossInputs& in);

/// Effective per-sample weight on the positive log term (1 for negatives).
std::vector<double> positive_weights(const LossConfig& config, const LossInputs& in);

// ---------------------------------------------------------------------------
// Teacher

enum class Phase { warmup, distill };

std::string_view to_string(Phase p);

/// Detached per-sample confidence from the backbone alone.
struct TeacherScore {
  std::vector<double> p_teacher;
};

/// Forward pass of the backbone with `snapshot`; no gradient flows back.
/// Throws ContractViolation during warm-up, when no teacher exists.
TeacherScore teacher_scores(const ModelParams& snapshot, const Batch& batch, Phase phase);

/// Number of teacher forward passes executed by this thread so far.
std::uint64_t teacher_forward_count();

}  // namespace clsd
