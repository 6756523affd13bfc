#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "clsd/corpus.hpp"
#include "clsd/model.hpp"

namespace clsd {

/// Mann-Whitney AUC with average ranks for ties.
/// Throws MetricError unless both classes are present.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Mean negative log-likelihood; probabilities are clamped to [eps, 1 - eps].
double logloss(std::span<const double> p, std::span<const std::uint8_t> labels);

/// 1-based ranks, ties averaged.
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman rank correlation (Pearson on average ranks). 0 if either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

struct GroupRow {
  std::uint32_t group_id = 0;
  std::size_t count = 0;
  std::optional<double> ctr;
  std::optional<double> ctr_normalized;  // ctr / max group ctr
  std::optional<double> mean_teacher_score;
  std::optional<double> mean_p_local;
};

struct GroupStats {
  std::vector<GroupRow> rows;  // ordered by group_id, one per group in the schema

  /// max - min of mean teacher score over non-empty groups.
  double teacher_spread() const;
  /// Adjacent decreases of mean teacher score in group order.
  std::size_t teacher_inversions() const;
  /// max over groups of |mean served prediction - ctr|.
  double calibration_gap() const;
};

/// Per-group CTR and mean backbone prediction (plus mean p_local with an AdGate).
GroupStats group_stats(const Corpus& corpus, const ModelParams& params);

void write_group_stats_csv(const GroupStats& stats, std::ostream& out);
void write_group_stats_csv(const GroupStats& stats, const std::filesystem::path& path);

/// Spearman correlation between teacher scores and latent confidence over the
/// corpus positives. `positive_scores[j]` belongs to the j-th positive record.
/// Throws MetricError with fewer than 10 positives or missing latents.
double confidence_recovery(const Corpus& corpus, std::span<const double> positive_scores);

/// Convenience: teacher scores from `params` over the positives of `corpus`.
double confidence_recovery(const Corpus& corpus, const ModelParams& params);

}  // namespace clsd
