#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clsd/corpus.hpp"

namespace clsd {

enum class Backbone { lr, fm, deepfm };

std::string_view to_string(Backbone b);
Backbone parse_backbone(std::string_view text);

/// Probability clamp used everywhere a log is taken.
inline constexpr double kProbEpsilon = 1e-7;

double sigmoid(double logit);

/// sigma(logit) clamped to [eps, 1 - eps].
double predict(double logit);

/// Architecture of a model instance. Shapes are fully determined by this struct.
struct ModelSpec {
  Backbone backbone = Backbone::deepfm;
  std::vector<std::uint32_t> cardinalities;  // per field
  std::uint32_t groups = 1;                  // AdGate one-hot width
  std::size_t embedding_dim = 8;
  std::vector<std::size_t> mlp_hidden{32, 16};
  bool adgate = false;
  std::vector<std::size_t> adgate_hidden{8};
  bool aux_head = false;  // dwell-time regression head for the MTL objective

  std::size_t field_count() const { return cardinalities.size(); }
  std::size_t feature_count() const;
  bool has_embeddings() const { return backbone != Backbone::lr; }
  bool has_mlp() const { return backbone == Backbone::deepfm; }
  /// Width of the representation the auxiliary head reads.
  std::size_t shared_width() const;

  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

/// Spec with default dims for `schema`.
ModelSpec make_spec(const FieldSchema& schema, Backbone backbone, bool adgate = false, bool aux_head = false);

/// Contiguous slice of the flat parameter vector.
struct Block {
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Dense layer stored row-major: weight is out x in.
struct LayerBlocks {
  Block weight;
  Block bias;
  std::size_t in = 0;
  std::size_t out = 0;
};

struct Layout {
  Block embeddings;
  Block first_order;
  std::vector<LayerBlocks> mlp;
  std::vector<LayerBlocks> adgate;
  LayerBlocks aux;
  Block bias;
  std::vector<std::size_t> field_offsets;
  std::size_t total = 0;

  /// First flat index that belongs to the AdGate (== adgate_end when absent).
  std::size_t adgate_begin = 0;
  std::size_t adgate_end = 0;

  bool is_adgate(std::size_t flat) const { return flat >= adgate_begin && flat < adgate_end; }

  /// (name, block) pairs in checkpoint order.
  std::vector<std::pair<std::string, Block>> sections() const;
};

Layout make_layout(const ModelSpec& spec);

/// Backbone + AdGate (+ aux head) parameters, addressable by one flat index.
struct ModelParams {
  ModelSpec spec;
  Layout layout;
  std::vector<double> values;

  ModelParams() = default;
  explicit ModelParams(ModelSpec s);

  std::size_t size() const { return values.size(); }
  std::span<double> block(Block b) { return std::span<double>(values).subspan(b.offset, b.size); }
  std::span<const double> block(Block b) const {
    return std::span<const double>(values).subspan(b.offset, b.size);
  }

  bool operator==(const ModelParams& o) const { return spec == o.spec && values == o.values; }
};

/// Initial p_local: the AdGate output bias starts at logit(kAdGateInitProb).
inline constexpr double kAdGateInitProb = 0.01;

/// Uniform in [-scale, scale], except the AdGate output bias (see above).
/// Backbone, AdGate, and aux head draw from separate streams, so adding a
/// component leaves the backbone draw unchanged.
ModelParams init_params(const ModelSpec& spec, std::uint64_t seed, double scale = 0.01);

/// FNV-1a over the raw parameter bytes.
std::uint64_t params_hash(const ModelParams& params);

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardTrace {
  std::size_t n = 0;
  std::vector<std::size_t> feature_index;  // n x k global feature rows
  std::vector<std::uint32_t> group;        // n
  std::vector<double> fm_sum;              // n x d  (fm, deepfm)
  std::vector<std::vector<double>> mlp_pre;  // per hidden layer: n x width (pre-activation)
  std::vector<std::vector<double>> adgate_hidden_pre;  // per AdGate hidden layer
  std::vector<double> backbone_logit;      // n
  std::vector<double> adgate_logit;        // n, empty when the gate was not run
  std::vector<double> aux_output;          // n, empty when the aux head was not run

  bool has_adgate() const { return !adgate_logit.empty(); }
  bool has_aux() const { return !aux_output.empty(); }
};

struct ForwardOptions {
  bool adgate = false;
  bool aux = false;
};

/// Backbone logits for every sample (plus AdGate/aux outputs when requested).
ForwardTrace forward(const ModelParams& params, const Batch& batch, ForwardOptions opts = {});

/// AdGate only: depends on group_id alone.
ForwardTrace adgate_forward(const ModelParams& params, const Batch& batch);

enum class GradTarget { backbone, adgate, both };

/// Per-sample d(loss)/d(output). Empty spans are treated as zero.
struct Upstream {
  std::span<const double> backbone;
  std::span<const double> adgate;
  std::span<const double> aux;
};

/// Exact gradient in the flat ModelParams indexing. Components not selected by
/// `target` get zero gradient. The aux head belongs to the backbone side.
std::vector<double> backward(const ModelParams& params, const ForwardTrace& trace, const Upstream& upstream,
                             GradTarget target = GradTarget::both);

/// Accumulating form; `grad` must have params.size() entries.
void backward_into(const ModelParams& params, const ForwardTrace& trace, const Upstream& upstream,
                   GradTarget target, std::span<double> grad);

/// Backbone-only predictions over a whole corpus (the teacher view).
std::vector<double> backbone_predictions(const ModelParams& params, const Corpus& corpus);

/// p_local per record; empty when the model has no AdGate.
std::vector<double> local_predictions(const ModelParams& params, const Corpus& corpus);

/// Served prediction: clamp(p + p_local) when the model has an AdGate, else p.
std::vector<double> served_predictions(const ModelParams& params, const Corpus& corpus);

// ---------------------------------------------------------------------------
// Checkpoint text (CLSDCKPT v1)

inline constexpr std::string_view kCheckpointMagic = "CLSDCKPT v1";

/// Line 2 of a checkpoint: backbone tag and dims.
std::string spec_line(const ModelSpec& spec);
ModelSpec parse_spec_line(std::string_view line);

/// Writes `name count` followed by the values (17 significant digits) on one line.
void write_section(std::ostream& out, std::string_view name, std::span<const double> values);

/// Header + parameter sections. With `terminate == false` the end marker is
/// left off so a caller can append further sections.
void write_params(const ModelParams& params, std::ostream& out, bool terminate = true);
void write_params(const ModelParams& params, const std::filesystem::path& path);

/// Parsed checkpoint: spec plus every named section in file order.
struct CheckpointSections {
  ModelSpec spec;
  std::vector<std::pair<std::string, std::vector<double>>> sections;

  const std::vector<double>* find(std::string_view name) const;
};

/// Throws ParseError on version mismatch, truncation, or malformed numbers.
CheckpointSections read_checkpoint_sections(std::istream& in);

/// Builds params from the model sections; extra sections are ignored.
ModelParams params_from_sections(const CheckpointSections& file);

ModelParams read_params(std::istream& in);
ModelParams read_params(const std::filesystem::path& path);

}  // namespace clsd
