#include "clsd/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "clsd/errors.hpp"
#include "clsd/random.hpp"

namespace clsd {

namespace {

constexpr std::string_view kMagic = "CLSDCORPUS v1";

constexpr double kClickbaitConfidenceCap = 0.2;
constexpr double kMinContentSeconds = 30.0;
constexpr double kMaxContentSeconds = 300.0;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double round_to(double x, double scale) { return std::round(x * scale) / scale; }

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename T>
T parse_uint(std::string_view tok, std::size_t line, const char* what) {
  T value{};
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw ParseError(line, std::string("bad ") + what + " '" + std::string(tok) + "'");
  return value;
}

double parse_real(std::string_view tok, std::size_t line, const char* what) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(value))
    throw ParseError(line, std::string("bad ") + what + " '" + std::string(tok) + "'");
  return value;
}

}  // namespace

std::string_view to_string(FieldRole role) {
  switch (role) {
    case FieldRole::user_id: return "user_id";
    case FieldRole::item_id: return "item_id";
    case FieldRole::user_group: return "user_group";
    case FieldRole::item_attr: return "item_attr";
    case FieldRole::context: return "context";
  }
  return "?";
}

FieldRole parse_field_role(std::string_view text) {
  for (auto role : {FieldRole::user_id, FieldRole::item_id, FieldRole::user_group,
                    FieldRole::item_attr, FieldRole::context}) {
    if (to_string(role) == text) return role;
  }
  throw SchemaError("unknown field role '" + std::string(text) + "'");
}

std::optional<std::size_t> FieldSchema::find(FieldRole role) const {
  auto it = std::find(roles.begin(), roles.end(), role);
  if (it == roles.end()) return std::nullopt;
  return static_cast<std::size_t>(it - roles.begin());
}

std::uint32_t FieldSchema::group_count() const {
  auto g = find(FieldRole::user_group);
  if (!g) throw SchemaError("schema has no user_group field");
  return cardinalities[*g];
}

void FieldSchema::validate() const {
  if (cardinalities.empty()) throw SchemaError("schema has no fields");
  if (cardinalities.size() != roles.size())
    throw SchemaError("cardinality list and role list differ in length");
  for (std::size_t f = 0; f < cardinalities.size(); ++f) {
    if (cardinalities[f] == 0) throw SchemaError("field " + std::to_string(f) + " has zero cardinality");
  }
  auto count = [&](FieldRole r) { return std::count(roles.begin(), roles.end(), r); };
  if (count(FieldRole::user_id) != 1) throw SchemaError("schema needs exactly one user_id field");
  if (count(FieldRole::item_id) != 1) throw SchemaError("schema needs exactly one item_id field");
  if (count(FieldRole::user_group) < 1) throw SchemaError("schema needs a user_group field");
}

std::size_t Corpus::positives() const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const SampleRecord& r) { return r.label == 1; }));
}

void Corpus::validate() const {
  schema.validate();
  const std::size_t k = schema.field_count();
  const std::uint32_t groups = schema.group_count();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto where = "record " + std::to_string(i) + ": ";
    if (r.feature_ids.size() != k) throw SchemaError(where + "wrong number of features");
    for (std::size_t f = 0; f < k; ++f) {
      if (r.feature_ids[f] >= schema.cardinalities[f])
        throw SchemaError(where + "feature " + std::to_string(f) + " id " +
                          std::to_string(r.feature_ids[f]) + " out of cardinality " +
                          std::to_string(schema.cardinalities[f]));
    }
    if (r.label > 1) throw SchemaError(where + "label must be 0 or 1");
    if (r.group_id >= groups) throw SchemaError(where + "group_id out of range");
    if (!(r.dwell_time >= 0.0)) throw SchemaError(where + "negative dwell time");
    if (r.label == 0 && r.dwell_time != 0.0) throw SchemaError(where + "dwell time on a non-click");
    if (r.latent_confidence && !(*r.latent_confidence >= 0.0 && *r.latent_confidence <= 1.0))
      throw SchemaError(where + "latent confidence outside [0,1]");
  }
}

// ---------------------------------------------------------------------------

FieldSchema generated_schema(const GenConfig& c) {
  FieldSchema s;
  s.cardinalities = {c.users, c.items, c.groups, c.categories, c.contexts};
  s.roles = {FieldRole::user_id, FieldRole::item_id, FieldRole::user_group, FieldRole::item_attr,
             FieldRole::context};
  return s;
}

GeneratedData generate_with_truth(const GenConfig& c) {
  if (c.clickbait_rate < 0.0 || c.clickbait_rate > 1.0)
    throw ConfigError("clickbait_rate must lie in [0,1]");
  if (c.factor_dim == 0) throw ConfigError("factor_dim must be positive");
  FieldSchema schema = generated_schema(c);
  schema.validate();
  if (c.records == 0) throw ConfigError("records must be positive");
  if (c.records < c.users) throw ConfigError("records < users: insufficient user coverage");

  const std::size_t dim = c.factor_dim;
  const double inv_sqrt_dim = 1.0 / std::sqrt(static_cast<double>(dim));
  Rng world(derive_seed(c.seed, 1));

  std::vector<double> centers(static_cast<std::size_t>(c.categories) * dim);
  for (auto& v : centers) v = world.normal();

  std::vector<std::uint32_t> user_group(c.users);
  std::vector<double> user_factor(static_cast<std::size_t>(c.users) * dim);
  for (std::uint32_t u = 0; u < c.users; ++u) {
    user_group[u] = static_cast<std::uint32_t>(world.below(c.groups));
    for (std::size_t d = 0; d < dim; ++d) user_factor[u * dim + d] = world.normal();
  }

  std::vector<std::uint32_t> item_category(c.items);
  std::vector<double> item_factor(static_cast<std::size_t>(c.items) * dim);
  std::vector<double> item_bias(c.items);
  std::vector<double> content_length(c.items);
  for (std::uint32_t i = 0; i < c.items; ++i) {
    item_category[i] = static_cast<std::uint32_t>(world.below(c.categories));
    for (std::size_t d = 0; d < dim; ++d)
      item_factor[i * dim + d] = 0.8 * centers[item_category[i] * dim + d] + 0.6 * world.normal();
    item_bias[i] = world.normal(0.0, 0.5);
    content_length[i] = world.uniform(kMinContentSeconds, kMaxContentSeconds);
  }

  // Exactly round(rate * items) clickbait items, chosen by partial shuffle.
  std::vector<bool> clickbait(c.items, false);
  {
    std::vector<std::uint32_t> ids(c.items);
    std::iota(ids.begin(), ids.end(), 0u);
    const auto n_bait = static_cast<std::size_t>(std::llround(c.clickbait_rate * c.items));
    for (std::size_t j = 0; j < n_bait; ++j) {
      const auto pick = j + world.below(c.items - j);
      std::swap(ids[j], ids[pick]);
      clickbait[ids[j]] = true;
    }
  }

  const double group_step = c.groups > 1 ? c.group_ctr_slope / static_cast<double>(c.groups - 1) : 0.0;

  Rng events(derive_seed(c.seed, 2));
  auto make_records = [&](std::uint64_t n, Corpus& out, std::vector<double>& affinities,
                          std::vector<double>& click_probs) {
    out.schema = schema;
    out.records.reserve(n);
    affinities.reserve(n);
    for (std::uint64_t r = 0; r < n; ++r) {
      const auto u = static_cast<std::uint32_t>(events.below(c.users));
      const auto i = static_cast<std::uint32_t>(events.below(c.items));
      const auto ctx = static_cast<std::uint32_t>(events.below(c.contexts));
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += user_factor[u * dim + d] * item_factor[i * dim + d];
      const double affinity = sigmoid(c.affinity_scale * dot * inv_sqrt_dim + item_bias[i] + c.affinity_shift);
      const std::uint32_t g = user_group[u];

      double click_p = c.base_ctr + c.affinity_gain * affinity + group_step * g;
      double confidence = affinity;
      if (clickbait[i]) {
        click_p += c.clickbait_boost;
        confidence = std::min(confidence, kClickbaitConfidenceCap);
      }
      click_p = std::clamp(click_p, 0.0, 1.0);

      SampleRecord rec;
      rec.feature_ids = {u, i, g, item_category[i], ctx};
      rec.group_id = g;
      rec.label = events.bernoulli(click_p) ? 1 : 0;
      rec.latent_confidence = round_to(confidence, 1e6);
      if (rec.label == 1) {
        const double noise = events.lognormal(0.0, c.dwell_noise);
        rec.dwell_time = round_to(content_length[i] * confidence * noise, 1e3);
      }
      affinities.push_back(affinity);
      click_probs.push_back(click_p);
      out.records.push_back(std::move(rec));
    }
  };

  GeneratedData data;
  data.train.split = Split::train;
  data.test.split = Split::test;
  make_records(c.records, data.train, data.truth.train_affinity, data.truth.train_click_prob);
  make_records(c.test_records, data.test, data.truth.test_affinity, data.truth.test_click_prob);
  data.truth.clickbait_items = std::move(clickbait);
  return data;
}

// ---------------------------------------------------------------------------

void write_corpus(const Corpus& corpus, std::ostream& out) {
  corpus.validate();
  const auto& s = corpus.schema;
  out << kMagic << '\n' << "fields " << s.field_count() << '\n';
  for (std::size_t f = 0; f < s.field_count(); ++f) out << (f ? " " : "") << s.cardinalities[f];
  out << '\n';
  for (std::size_t f = 0; f < s.field_count(); ++f) out << (f ? " " : "") << to_string(s.roles[f]);
  out << '\n';
  char buf[64];
  for (const auto& r : corpus.records) {
    std::snprintf(buf, sizeof buf, "%u %.3f %u ", static_cast<unsigned>(r.label), r.dwell_time,
                  static_cast<unsigned>(r.group_id));
    out << buf;
    if (r.latent_confidence) {
      std::snprintf(buf, sizeof buf, "%.6f", *r.latent_confidence);
      out << buf;
    } else {
      out << '-';
    }
    for (auto id : r.feature_ids) out << ' ' << id;
    out << '\n';
  }
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_corpus(corpus, out);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Corpus read_corpus(std::istream& in, Split split) {
  Corpus corpus;
  corpus.split = split;
  std::string line;
  std::size_t lineno = 0;
  auto next_line = [&](const char* expect) {
    if (!std::getline(in, line)) throw ParseError(lineno + 1, std::string("missing ") + expect);
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
  };

  next_line("header");
  if (line != kMagic) throw ParseError(lineno, "expected '" + std::string(kMagic) + "'");

  next_line("field count");
  auto toks = split_ws(line);
  if (toks.size() != 2 || toks[0] != "fields") throw ParseError(lineno, "expected 'fields k'");
  const auto k = parse_uint<std::size_t>(toks[1], lineno, "field count");

  next_line("cardinalities");
  toks = split_ws(line);
  if (toks.size() != k) throw ParseError(lineno, "expected " + std::to_string(k) + " cardinalities");
  for (auto t : toks) corpus.schema.cardinalities.push_back(parse_uint<std::uint32_t>(t, lineno, "cardinality"));

  next_line("roles");
  toks = split_ws(line);
  if (toks.size() != k) throw ParseError(lineno, "expected " + std::to_string(k) + " roles");
  for (auto t : toks) corpus.schema.roles.push_back(parse_field_role(t));
  corpus.schema.validate();
  const std::uint32_t groups = corpus.schema.group_count();

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    toks = split_ws(line);
    if (toks.size() != 4 + k)
      throw ParseError(lineno, "expected " + std::to_string(4 + k) + " columns, got " + std::to_string(toks.size()));
    SampleRecord r;
    const auto label = parse_uint<unsigned>(toks[0], lineno, "label");
    if (label > 1) throw ParseError(lineno, "label must be 0 or 1");
    r.label = static_cast<std::uint8_t>(label);
    r.dwell_time = parse_real(toks[1], lineno, "dwell time");
    if (r.dwell_time < 0.0) throw ParseError(lineno, "negative dwell time");
    if (r.label == 0 && r.dwell_time != 0.0) throw ParseError(lineno, "dwell time on a non-click");
    r.group_id = parse_uint<std::uint32_t>(toks[2], lineno, "group id");
    if (r.group_id >= groups) throw SchemaError("line " + std::to_string(lineno) + ": group id out of range");
    if (toks[3] != "-") {
      const double conf = parse_real(toks[3], lineno, "confidence");
      if (conf < 0.0 || conf > 1.0) throw ParseError(lineno, "confidence outside [0,1]");
      r.latent_confidence = conf;
    }
    r.feature_ids.reserve(k);
    for (std::size_t f = 0; f < k; ++f) {
      const auto id = parse_uint<std::uint32_t>(toks[4 + f], lineno, "feature id");
      if (id >= corpus.schema.cardinalities[f])
        throw SchemaError("line " + std::to_string(lineno) + ": feature " + std::to_string(f) + " id " +
                          std::to_string(id) + " out of cardinality " +
                          std::to_string(corpus.schema.cardinalities[f]));
      r.feature_ids.push_back(id);
    }
    corpus.records.push_back(std::move(r));
  }
  return corpus;
}

Corpus read_corpus(const std::filesystem::path& path, Split split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_corpus(in, split);
}

std::filesystem::path split_path(const std::filesystem::path& dir, Split split) {
  return dir / (split == Split::train ? "train.clsd" : "test.clsd");
}

void write_dataset(const Corpus& train, const Corpus& test, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_corpus(train, split_path(dir, Split::train));
  write_corpus(test, split_path(dir, Split::test));
}

std::pair<Corpus, Corpus> read_dataset(const std::filesystem::path& dir) {
  auto train = read_corpus(split_path(dir, Split::train), Split::train);
  auto test = read_corpus(split_path(dir, Split::test), Split::test);
  if (!(train.schema == test.schema)) throw SchemaError("train and test schemas differ");
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t shuffle_seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(shuffle_seed, 0x5eed0000ULL + epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

EpochBatches::EpochBatches(const Corpus& corpus, std::size_t batch_size, std::uint64_t shuffle_seed,
                           std::uint64_t epoch)
    : corpus_(&corpus), batch_size_(batch_size), order_(epoch_order(corpus.size(), shuffle_seed, epoch)) {
  if (batch_size == 0) throw ContractViolation("batch_size must be at least 1");
}

std::size_t EpochBatches::count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

Batch EpochBatches::operator[](std::size_t b) const {
  const std::size_t begin = b * batch_size_;
  const std::size_t end = std::min(order_.size(), begin + batch_size_);
  return Batch(*corpus_, std::span<const std::size_t>(order_).subspan(begin, end - begin));
}

std::vector<std::size_t> all_rows(const Corpus& corpus) {
  std::vector<std::size_t> rows(corpus.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

}  // namespace clsd
