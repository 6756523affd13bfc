#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace clsd {

enum class FieldRole { user_id, item_id, user_group, item_attr, context };

std::string_view to_string(FieldRole role);
FieldRole parse_field_role(std::string_view text);

/// Multi-field categorical layout x = [x_1 ... x_k].
struct FieldSchema {
  std::vector<std::uint32_t> cardinalities;
  std::vector<FieldRole> roles;

  std::size_t field_count() const { return cardinalities.size(); }

  /// Index of the first field carrying `role`, if any.
  std::optional<std::size_t> find(FieldRole role) const;

  /// Number of distinct group ids, i.e. the cardinality of the first user_group field.
  std::uint32_t group_count() const;

  /// Throws SchemaError unless the field/role invariants hold.
  void validate() const;

  bool operator==(const FieldSchema&) const = default;
};

struct SampleRecord {
  std::vector<std::uint32_t> feature_ids;
  std::uint8_t label = 0;
  double dwell_time = 0.0;
  std::uint32_t group_id = 0;
  /// Ground-truth click confidence; only synthetic corpora carry it.
  std::optional<double> latent_confidence;

  bool operator==(const SampleRecord&) const = default;
};

enum class Split { train, test };

struct Corpus {
  FieldSchema schema;
  std::vector<SampleRecord> records;
  Split split = Split::train;

  std::size_t size() const { return records.size(); }
  std::size_t positives() const;

  /// Throws SchemaError if any record does not conform to the schema.
  void validate() const;

  bool operator==(const Corpus&) const = default;
};

// ---------------------------------------------------------------------------
// Synthetic generation

struct GenConfig {
  std::uint32_t users = 500;
  std::uint32_t items = 200;
  std::uint32_t groups = 5;
  std::uint64_t records = 100000;       // train records
  std::uint64_t test_records = 20000;   // generated after the train records
  double clickbait_rate = 0.2;
  double group_ctr_slope = 0.3;
  std::uint64_t seed = 2024;

  std::uint32_t categories = 16;   // item_attr cardinality
  std::uint32_t contexts = 4;      // context cardinality
  std::uint32_t factor_dim = 8;    // hidden user/item factor dimension
  double dwell_noise = 0.5;        // sigma of the lognormal dwell multiplier

  // Click model: p(click) = base_ctr + affinity_gain * affinity + group bias
  // (+ clickbait_boost on clickbait items), clamped to [0,1].
  double base_ctr = 0.02;
  double affinity_gain = 0.6;
  double clickbait_boost = 0.2;
  // affinity = sigmoid(affinity_scale * <u, v> / sqrt(dim) + item bias + affinity_shift)
  double affinity_scale = 3.0;
  double affinity_shift = -1.5;
};

/// Hidden generation state that never reaches the corpus file.
struct GroundTruth {
  std::vector<bool> clickbait_items;
  std::vector<double> train_affinity;  // per train record, before the clickbait cap
  std::vector<double> test_affinity;
  std::vector<double> train_click_prob;  // per train record
  std::vector<double> test_click_prob;
};

struct GeneratedData {
  Corpus train;
  Corpus test;
  GroundTruth truth;
};

/// Schema emitted by the generator: user_id, item_id, user_group, item_attr, context.
FieldSchema generated_schema(const GenConfig& config);

GeneratedData generate_with_truth(const GenConfig& config);

/// Train and test corpora; deterministic in `config`.
inline std::pair<Corpus, Corpus> generate(const GenConfig& config) {
  auto data = generate_with_truth(config);
  return {std::move(data.train), std::move(data.test)};
}

// ---------------------------------------------------------------------------
// Text format (CLSDCORPUS v1)

void write_corpus(const Corpus& corpus, std::ostream& out);
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);

/// The file carries no split tag; the caller states which split it holds.
Corpus read_corpus(std::istream& in, Split split = Split::train);
Corpus read_corpus(const std::filesystem::path& path, Split split = Split::train);

/// A generated dataset directory holds train.clsd and test.clsd.
std::filesystem::path split_path(const std::filesystem::path& dir, Split split);
void write_dataset(const Corpus& train, const Corpus& test, const std::filesystem::path& dir);
std::pair<Corpus, Corpus> read_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Batching

inline constexpr std::size_t kDefaultBatchSize = 256;

/// Read-only window onto a corpus: a run of row indices.
class Batch {
 public:
  Batch(const Corpus& corpus, std::span<const std::size_t> rows) : corpus_(&corpus), rows_(rows) {}

  std::size_t size() const { return rows_.size(); }
  const SampleRecord& operator[](std::size_t i) const { return corpus_->records[rows_[i]]; }
  const Corpus& corpus() const { return *corpus_; }
  std::span<const std::size_t> rows() const { return rows_; }

 private:
  const Corpus* corpus_;
  std::span<const std::size_t> rows_;
};

/// Deterministic permutation of [0, n) for (shuffle_seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t shuffle_seed, std::uint64_t epoch);

/// One epoch of batches over a corpus. Owns the permutation; batches view it.
class EpochBatches {
 public:
  EpochBatches(const Corpus& corpus, std::size_t batch_size, std::uint64_t shuffle_seed,
               std::uint64_t epoch);

  std::size_t count() const;
  Batch operator[](std::size_t b) const;

 private:
  const Corpus* corpus_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
};

/// Identity-ordered batch covering the whole corpus.
std::vector<std::size_t> all_rows(const Corpus& corpus);

}  // namespace clsd
