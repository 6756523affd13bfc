#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clsd/corpus.hpp"
#include "clsd/model.hpp"
#include "clsd/trainer.hpp"

namespace clsd {

/// A grid arm: a loss variant, or one half of the clsd objective.
/// global_only trains the weighted loss without an AdGate; local_only trains
/// the clsd loss with alpha forced to 0.
enum class GridVariant { ori, global, clsd, focal, dt_reweight, mtl, global_only, local_only };

std::string_view to_string(GridVariant v);
GridVariant parse_grid_variant(std::string_view text);

/// Whether the arm's training run depends on alpha.
bool reads_alpha(GridVariant v);

inline const std::vector<double> kDefaultAlphas{0.0, 0.25, 0.5, 0.75, 1.0, 1.25};
inline const std::vector<std::uint64_t> kDefaultSeeds{1, 2, 3, 4, 5};

struct ExperimentGrid {
  std::vector<Backbone> backbones{Backbone::deepfm};
  std::vector<GridVariant> variants;
  std::vector<double> alphas{1.0};
  std::vector<std::uint64_t> seeds = kDefaultSeeds;

  /// Throws ConfigError on an empty axis, a non-finite alpha, or repeated seeds.
  void validate() const;
  std::size_t size() const { return backbones.size() * variants.size() * alphas.size() * seeds.size(); }
};

/// `base` with the cell's backbone, seed, loss variant and alpha applied.
TrainConfig cell_config(const TrainConfig& base, Backbone backbone, GridVariant variant, double alpha,
                        std::uint64_t seed);

struct GridRow {
  Backbone backbone = Backbone::deepfm;
  GridVariant variant = GridVariant::ori;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  double auc = 0.0;
  std::string status = "ok";  // "ok" or "error: <message>"

  bool ok() const { return status == "ok"; }
};

struct SummaryRow {
  Backbone backbone = Backbone::deepfm;
  GridVariant variant = GridVariant::ori;
  double alpha = 0.0;
  std::size_t n = 0;  // successful seeds
  double mean_auc = 0.0;
  double std_auc = 0.0;  // sample std; 0 when n < 2
  std::optional<double> p_vs_ori;  // paired over seeds where both cells succeeded
};

struct GridResult {
  std::vector<GridRow> rows;  // backbone-major, then variant, alpha, seed (grid order)
  std::vector<SummaryRow> summary;

  /// Summary cell for (backbone, variant, alpha), if present.
  const SummaryRow* find(Backbone backbone, GridVariant variant, double alpha) const;
};

/// Two-sided p-value of the paired t-test on a[i] - b[i]. Empty when fewer
/// than two pairs. Identical samples give 1, a constant nonzero shift gives 0.
std::optional<double> paired_t_pvalue(std::span<const double> a, std::span<const double> b);

std::vector<SummaryRow> summarize(const std::vector<GridRow>& rows);

/// Parallel worker count: CLSD_THREADS if set and positive, else the hardware count.
std::size_t thread_cap();

/// Sees each finished training run; calls are serialized but arrive in completion order.
using RunHook = std::function<void(const TrainConfig&, const TrainResult&)>;

/// Runs every cell. Cells whose training runs coincide (arms that ignore alpha)
/// train once. A failing cell is recorded in its status and the grid goes on.
/// Output order never depends on `threads`.
GridResult run_grid(const ExperimentGrid& grid, const Corpus& train, const Corpus& test, const TrainConfig& base,
                    std::size_t threads = thread_cap(), const RunHook& on_run = {});

void write_grid_csv(const std::vector<GridRow>& rows, std::ostream& out);
void write_summary_csv(const std::vector<SummaryRow>& summary, std::ostream& out);

// ---------------------------------------------------------------------------
// Grid file: flat `key = value` lines, '#' starts a comment.

struct GridFile {
  ExperimentGrid grid;
  TrainConfig base;
  std::optional<std::filesystem::path> corpus;  // dataset directory; else generate from `gen`
  GenConfig gen;
};

/// Throws ConfigError on an unknown key, a repeated key, or a bad value.
GridFile parse_grid_file(std::istream& in);
GridFile parse_grid_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Single run

inline constexpr std::string_view kReportFile = "report.csv";
inline constexpr std::string_view kCheckpointFile = "model.ckpt";

/// Trains from `start` (fresh state when empty) and writes report.csv and
/// model.ckpt under `out_dir`, creating it if needed.
RunReport run_single(const Corpus& train, const Corpus& test, const TrainConfig& config,
                     const std::filesystem::path& out_dir, std::optional<TrainState> start = std::nullopt);

}  // namespace clsd
