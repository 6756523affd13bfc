#include "clsd/runner.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "clsd/errors.hpp"

namespace clsd {

namespace {

constexpr std::pair<GridVariant, std::string_view> kVariantNames[] = {
    {GridVariant::ori, "ori"},
    {GridVariant::global, "global"},
    {GridVariant::clsd, "clsd"},
    {GridVariant::focal, "focal"},
    {GridVariant::dt_reweight, "dt_reweight"},
    {GridVariant::mtl, "mtl"},
    {GridVariant::global_only, "global_only"},
    {GridVariant::local_only, "local_only"},
};

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split_list(std::string_view s) {
  std::vector<std::string_view> out;
  while (true) {
    const auto comma = s.find(',');
    const auto item = trim(s.substr(0, comma));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end)
    throw ConfigError("grid file: bad value '" + std::string(text) + "' for " + std::string(key));
  return value;
}

std::string sanitize(std::string_view message) {
  std::string out(message.substr(0, message.find('\n')));
  std::replace(out.begin(), out.end(), ',', ';');
  return out;
}

std::string format_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

}  // namespace

std::string_view to_string(GridVariant v) {
  for (const auto& [value, name] : kVariantNames)
    if (value == v) return name;
  return "?";
}

GridVariant parse_grid_variant(std::string_view text) {
  if (text == "dt-reweight") return GridVariant::dt_reweight;
  for (const auto& [value, name] : kVariantNames)
    if (name == text) return value;
  throw ConfigError("unknown variant '" + std::string(text) + "'");
}

bool reads_alpha(GridVariant v) { return v == GridVariant::clsd; }

void ExperimentGrid::validate() const {
  if (backbones.empty()) throw ConfigError("grid has no backbones");
  if (variants.empty()) throw ConfigError("grid has no variants");
  if (alphas.empty()) throw ConfigError("grid has no alphas");
  if (seeds.empty()) throw ConfigError("grid has no seeds");
  for (double a : alphas)
    if (!std::isfinite(a) || a < 0.0) throw ConfigError("grid alpha must be finite and >= 0");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("grid seeds must be distinct");
}

TrainConfig cell_config(const TrainConfig& base, Backbone backbone, GridVariant variant, double alpha,
                        std::uint64_t seed) {
  TrainConfig c = base;
  c.backbone = backbone;
  c.seed = seed;
  switch (variant) {
    case GridVariant::ori: c.loss.variant = LossVariant::ori; break;
    case GridVariant::global:
    case GridVariant::global_only: c.loss.variant = LossVariant::global; break;
    case GridVariant::clsd: c.loss.variant = LossVariant::clsd; break;
    case GridVariant::focal: c.loss.variant = LossVariant::focal; break;
    case GridVariant::dt_reweight: c.loss.variant = LossVariant::dt_reweight; break;
    case GridVariant::mtl: c.loss.variant = LossVariant::mtl; break;
    case GridVariant::local_only: c.loss.variant = LossVariant::clsd; break;
  }
  c.loss.alpha = variant == GridVariant::local_only ? 0.0 : variant == GridVariant::clsd ? alpha : base.loss.alpha;
  return c;
}

const SummaryRow* GridResult::find(Backbone backbone, GridVariant variant, double alpha) const {
  for (const auto& s : summary)
    if (s.backbone == backbone && s.variant == variant && s.alpha == alpha) return &s;
  return nullptr;
}

std::optional<double> paired_t_pvalue(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractViolation("paired_t_pvalue: sample sizes differ");
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) return mean == 0.0 ? 1.0 : 0.0;
  const double t = mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

std::vector<SummaryRow> summarize(const std::vector<GridRow>& rows) {
  // Cells in first-appearance order; per cell, seed -> auc of successful runs.
  using Key = std::tuple<Backbone, GridVariant, double>;
  std::vector<Key> order;
  std::map<Key, std::map<std::uint64_t, double>> cells;
  for (const auto& r : rows) {
    const Key k{r.backbone, r.variant, r.alpha};
    if (!cells.count(k)) order.push_back(k);
    auto& cell = cells[k];
    if (r.ok()) cell[r.seed] = r.auc;
  }

  std::vector<SummaryRow> out;
  for (const auto& k : order) {
    const auto& cell = cells[k];
    SummaryRow s;
    std::tie(s.backbone, s.variant, s.alpha) = k;
    s.n = cell.size();
    for (const auto& [seed, v] : cell) s.mean_auc += v;
    if (s.n) s.mean_auc /= static_cast<double>(s.n);
    if (s.n >= 2) {
      double ss = 0.0;
      for (const auto& [seed, v] : cell) ss += (v - s.mean_auc) * (v - s.mean_auc);
      s.std_auc = std::sqrt(ss / static_cast<double>(s.n - 1));
    }
    const Key base{s.backbone, GridVariant::ori, s.alpha};
    if (s.variant != GridVariant::ori && cells.count(base)) {
      std::vector<double> a, b;
      for (const auto& [seed, v] : cell) {
        const auto& ori = cells[base];
        if (auto it = ori.find(seed); it != ori.end()) {
          a.push_back(v);
          b.push_back(it->second);
        }
      }
      s.p_vs_ori = paired_t_pvalue(a, b);
    }
    out.push_back(s);
  }
  return out;
}

std::size_t thread_cap() {
  if (const char* env = std::getenv("CLSD_THREADS")) {
    const std::string_view text(env);
    std::size_t n = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), n);
    if (ec == std::errc() && ptr == text.data() + text.size() && n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

GridResult run_grid(const ExperimentGrid& grid, const Corpus& train_corpus, const Corpus& test_corpus,
                    const TrainConfig& base, std::size_t threads, const RunHook& on_run) {
  grid.validate();

  // Rows in grid order, each pointing at a distinct training job.
  struct Job {
    TrainConfig config;
    double auc = 0.0;
    std::string status = "ok";
  };
  std::vector<Job> jobs;
  std::map<std::string, std::size_t> job_index;
  GridResult result;
  std::vector<std::size_t> row_job;
  for (Backbone bb : grid.backbones)
    for (GridVariant v : grid.variants)
      for (double alpha : grid.alphas)
        for (std::uint64_t seed : grid.seeds) {
          GridRow row;
          row.backbone = bb;
          row.variant = v;
          row.alpha = alpha;
          row.seed = seed;
          result.rows.push_back(row);
          const TrainConfig c = cell_config(base, bb, v, alpha, seed);
          std::ostringstream key;
          key << to_string(bb) << ' ' << to_string(c.loss.variant) << ' ' << format_real(c.loss.alpha) << ' ' << seed;
          auto [it, fresh] = job_index.try_emplace(key.str(), jobs.size());
          if (fresh) jobs.push_back({c});
          row_job.push_back(it->second);
        }

  std::atomic<std::size_t> next{0};
  std::mutex hook_mutex;
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      try {
        const TrainResult run = train(train_corpus, test_corpus, jobs[j].config);
        jobs[j].auc = run.report.final_auc();
        if (std::isnan(jobs[j].auc)) jobs[j].status = "error: test AUC undefined";
        if (on_run) {
          const std::lock_guard lock(hook_mutex);
          on_run(jobs[j].config, run);
        }
      } catch (const std::exception& e) {
        jobs[j].status = "error: " + sanitize(e.what());
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, jobs.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }

  for (std::size_t r = 0; r < result.rows.size(); ++r) {
    const Job& job = jobs[row_job[r]];
    result.rows[r].auc = job.auc;
    result.rows[r].status = job.status;
  }
  result.summary = summarize(result.rows);
  return result;
}

void write_grid_csv(const std::vector<GridRow>& rows, std::ostream& out) {
  out << "backbone,variant,alpha,seed,auc,status\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f", r.auc);
    out << to_string(r.backbone) << ',' << to_string(r.variant) << ',' << format_real(r.alpha) << ',' << r.seed
        << ',' << (r.ok() ? buf : "-") << ',' << r.status << '\n';
  }
}

void write_summary_csv(const std::vector<SummaryRow>& summary, std::ostream& out) {
  out << "backbone,variant,alpha,n,mean_auc,std_auc,p_vs_ori\n";
  char buf[128];
  for (const auto& s : summary) {
    out << to_string(s.backbone) << ',' << to_string(s.variant) << ',' << format_real(s.alpha) << ',' << s.n << ',';
    if (s.n) {
      std::snprintf(buf, sizeof buf, "%.6f,%.6f", s.mean_auc, s.std_auc);
      out << buf;
    } else {
      out << "-,-";
    }
    out << ',';
    if (s.p_vs_ori) {
      std::snprintf(buf, sizeof buf, "%.6g", *s.p_vs_ori);
      out << buf;
    } else {
      out << '-';
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

GridFile parse_grid_file(std::istream& in) {
  GridFile f;
  std::set<std::string> seen;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("grid file line " + std::to_string(line_no) + ": expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("grid file: repeated key " + key);
    if (value.empty()) throw ConfigError("grid file: empty value for " + key);

    if (key == "backbones") {
      f.grid.backbones.clear();
      for (auto item : split_list(value)) f.grid.backbones.push_back(parse_backbone(item));
    } else if (key == "variants") {
      for (auto item : split_list(value)) f.grid.variants.push_back(parse_grid_variant(item));
    } else if (key == "alphas") {
      f.grid.alphas.clear();
      for (auto item : split_list(value)) f.grid.alphas.push_back(parse_number<double>(key, item));
    } else if (key == "seeds") {
      f.grid.seeds.clear();
      for (auto item : split_list(value)) f.grid.seeds.push_back(parse_number<std::uint64_t>(key, item));
    } else if (key == "epochs") {
      f.base.epochs = parse_number<std::size_t>(key, value);
    } else if (key == "lr") {
      f.base.learning_rate = parse_number<double>(key, value);
    } else if (key == "batch") {
      f.base.batch_size = parse_number<std::size_t>(key, value);
    } else if (key == "warmup_frac") {
      f.base.loss.warmup_fraction = parse_number<double>(key, value);
    } else if (key == "alpha") {
      f.base.loss.alpha = parse_number<double>(key, value);
    } else if (key == "focal_gamma") {
      f.base.loss.focal_gamma = parse_number<double>(key, value);
    } else if (key == "dt_cap") {
      f.base.loss.dt_weight_cap = parse_number<double>(key, value);
    } else if (key == "mtl_weight") {
      f.base.loss.mtl_weight = parse_number<double>(key, value);
    } else if (key == "corpus") {
      f.corpus = std::filesystem::path(std::string(value));
    } else if (key == "gen.users") {
      f.gen.users = parse_number<std::uint32_t>(key, value);
    } else if (key == "gen.items") {
      f.gen.items = parse_number<std::uint32_t>(key, value);
    } else if (key == "gen.groups") {
      f.gen.groups = parse_number<std::uint32_t>(key, value);
    } else if (key == "gen.records") {
      f.gen.records = parse_number<std::uint64_t>(key, value);
    } else if (key == "gen.test_records") {
      f.gen.test_records = parse_number<std::uint64_t>(key, value);
    } else if (key == "gen.clickbait_rate") {
      f.gen.clickbait_rate = parse_number<double>(key, value);
    } else if (key == "gen.group_ctr_slope") {
      f.gen.group_ctr_slope = parse_number<double>(key, value);
    } else if (key == "gen.seed") {
      f.gen.seed = parse_number<std::uint64_t>(key, value);
    } else {
      throw ConfigError("grid file: unknown key " + key);
    }
  }
  f.grid.validate();
  f.base.validate();
  return f;
}

GridFile parse_grid_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open grid file " + path.string());
  return parse_grid_file(in);
}

RunReport run_single(const Corpus& train_corpus, const Corpus& test_corpus, const TrainConfig& config,
                     const std::filesystem::path& out_dir, std::optional<TrainState> start) {
  config.validate();
  TrainState state = start ? std::move(*start) : initial_state(train_corpus.schema, config);
  auto result = train(train_corpus, test_corpus, std::move(state), config);
  std::filesystem::create_directories(out_dir);
  write_report_csv(result.report, out_dir / kReportFile);
  save_checkpoint(result.state, out_dir / kCheckpointFile);
  return result.report;
}

}  // namespace clsd
