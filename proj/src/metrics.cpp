#include "clsd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "clsd/errors.hpp"

namespace clsd {

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // Positions i..j-1 share the mean of ranks i+1..j.
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t r = i; r < j; ++r) ranks[order[r]] = rank;
    i = j;
  }
  return ranks;
}

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ContractViolation("auc: scores and labels differ in length");
  std::size_t pos = 0;
  for (auto y : labels) pos += y ? 1 : 0;
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw MetricError("AUC is undefined without both classes");
  const auto ranks = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i)
    if (labels[i]) rank_sum += ranks[i];
  const double p = static_cast<double>(pos);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(neg));
}

double logloss(std::span<const double> p, std::span<const std::uint8_t> labels) {
  if (p.size() != labels.size()) throw ContractViolation("logloss: lengths differ");
  if (p.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbEpsilon, 1.0 - kProbEpsilon);
    s -= labels[i] ? std::log(q) : std::log(1.0 - q);
  }
  return s / static_cast<double>(p.size());
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ContractViolation("spearman: lengths differ");
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mean = 0.5 * static_cast<double>(n + 1);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = rx[i] - mean;
    const double b = ry[i] - mean;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------

double GroupStats::teacher_spread() const {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& r : rows) {
    if (!r.mean_teacher_score) continue;
    lo = std::min(lo, *r.mean_teacher_score);
    hi = std::max(hi, *r.mean_teacher_score);
  }
  return hi >= lo ? hi - lo : 0.0;
}

std::size_t GroupStats::teacher_inversions() const {
  std::size_t inversions = 0;
  std::optional<double> prev;
  for (const auto& r : rows) {
    if (!r.mean_teacher_score) continue;
    if (prev && *r.mean_teacher_score < *prev) ++inversions;
    prev = r.mean_teacher_score;
  }
  return inversions;
}

double GroupStats::calibration_gap() const {
  double gap = 0.0;
  for (const auto& r : rows) {
    if (!r.ctr || !r.mean_teacher_score) continue;
    const double served = *r.mean_teacher_score + r.mean_p_local.value_or(0.0);
    gap = std::max(gap, std::abs(served - *r.ctr));
  }
  return gap;
}

GroupStats group_stats(const Corpus& corpus, const ModelParams& params) {
  const std::uint32_t groups = corpus.schema.group_count();
  const auto teacher = backbone_predictions(params, corpus);
  const auto local = local_predictions(params, corpus);

  std::vector<std::size_t> count(groups, 0), clicks(groups, 0);
  std::vector<double> teacher_sum(groups, 0.0), local_sum(groups, 0.0);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto g = corpus.records[i].group_id;
    ++count[g];
    clicks[g] += corpus.records[i].label;
    teacher_sum[g] += teacher[i];
    if (!local.empty()) local_sum[g] += local[i];
  }

  GroupStats stats;
  double max_ctr = 0.0;
  for (std::uint32_t g = 0; g < groups; ++g) {
    GroupRow row;
    row.group_id = g;
    row.count = count[g];
    if (count[g] > 0) {
      const double n = static_cast<double>(count[g]);
      row.ctr = static_cast<double>(clicks[g]) / n;
      row.mean_teacher_score = teacher_sum[g] / n;
      if (!local.empty()) row.mean_p_local = local_sum[g] / n;
      max_ctr = std::max(max_ctr, *row.ctr);
    }
    stats.rows.push_back(row);
  }
  if (max_ctr > 0.0) {
    for (auto& row : stats.rows)
      if (row.ctr) row.ctr_normalized = *row.ctr / max_ctr;
  }
  return stats;
}

void write_group_stats_csv(const GroupStats& stats, std::ostream& out) {
  out << "group_id,count,ctr,ctr_normalized,mean_teacher_score,mean_p_local\n";
  auto field = [&](const std::optional<double>& v) {
    if (!v) {
      out << ",-";
      return;
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, ",%.6f", *v);
    out << buf;
  };
  for (const auto& r : stats.rows) {
    out << r.group_id << ',' << r.count;
    field(r.ctr);
    field(r.ctr_normalized);
    field(r.mean_teacher_score);
    field(r.mean_p_local);
    out << '\n';
  }
}

void write_group_stats_csv(const GroupStats& stats, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_group_stats_csv(stats, out);
}

// ---------------------------------------------------------------------------

double confidence_recovery(const Corpus& corpus, std::span<const double> positive_scores) {
  std::vector<double> latents;
  for (const auto& r : corpus.records) {
    if (!r.label) continue;
    if (!r.latent_confidence) throw MetricError("corpus carries no latent confidence");
    latents.push_back(*r.latent_confidence);
  }
  if (latents.size() < 10) throw MetricError("confidence recovery needs at least 10 positives");
  if (positive_scores.size() != latents.size())
    throw ContractViolation("expected one score per positive record");
  return spearman(positive_scores, latents);
}

double confidence_recovery(const Corpus& corpus, const ModelParams& params) {
  const auto all = backbone_predictions(params, corpus);
  std::vector<double> scores;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (corpus.records[i].label) scores.push_back(all[i]);
  return confidence_recovery(corpus, scores);
}

}  // namespace clsd
