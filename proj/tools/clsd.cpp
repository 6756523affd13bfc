#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "clsd/corpus.hpp"
#include "clsd/errors.hpp"
#include "clsd/metrics.hpp"
#include "clsd/model.hpp"
#include "clsd/runner.hpp"
#include "clsd/trainer.hpp"

namespace {

using namespace clsd;

// Exit codes.
constexpr int kUsage = 2;
constexpr int kBadInput = 3;
constexpr int kAborted = 4;

struct TrainFlags {
  std::string backbone = "deepfm";
  std::string loss = "ori";
  TrainConfig config;

  void add_to(CLI::App& app, bool with_loss) {
    app.add_option("--backbone", backbone, "lr | fm | deepfm")->capture_default_str();
    if (with_loss) {
      app.add_option("--loss", loss, "ori | global | clsd | focal | dt-reweight | mtl")->capture_default_str();
      app.add_option("--alpha", config.loss.alpha, "teacher weight scale")->capture_default_str();
    }
    app.add_option("--warmup-frac", config.loss.warmup_fraction, "share of epochs on the plain log-loss")
        ->capture_default_str();
    app.add_option("--epochs", config.epochs)->capture_default_str();
    app.add_option("--lr", config.learning_rate)->capture_default_str();
    app.add_option("--batch", config.batch_size)->capture_default_str();
    app.add_option("--focal-gamma", config.loss.focal_gamma)->capture_default_str();
    app.add_option("--dt-cap", config.loss.dt_weight_cap, "dwell weight cap")->capture_default_str();
    app.add_option("--mtl-weight", config.loss.mtl_weight)->capture_default_str();
  }

  TrainConfig resolve() const {
    TrainConfig c = config;
    c.backbone = parse_backbone(backbone);
    c.loss.variant = parse_loss_variant(loss);
    c.validate();
    return c;
  }
};

void print_summary(const std::vector<SummaryRow>& summary) { write_summary_csv(summary, std::cout); }

void write_file(const std::filesystem::path& path, auto&& writer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  writer(out);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Click-confidence self-distillation CTR lab"};
  app.require_subcommand(1);

  // gen-data
  GenConfig gen;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic train/test corpus");
  gen_cmd->add_option("--users", gen.users)->capture_default_str();
  gen_cmd->add_option("--items", gen.items)->capture_default_str();
  gen_cmd->add_option("--groups", gen.groups)->capture_default_str();
  gen_cmd->add_option("--records", gen.records, "train records")->capture_default_str();
  gen_cmd->add_option("--test-records", gen.test_records)->capture_default_str();
  gen_cmd->add_option("--clickbait-rate", gen.clickbait_rate)->capture_default_str();
  gen_cmd->add_option("--group-ctr-slope", gen.group_ctr_slope)->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
  gen_cmd->add_option("--out", gen_out, "dataset directory")->required();

  // train
  TrainFlags train_flags;
  std::string train_corpus, train_out, train_resume;
  std::uint64_t train_seed = 1;
  auto* train_cmd = app.add_subcommand("train", "train one model; writes report.csv and model.ckpt");
  train_cmd->add_option("--corpus", train_corpus, "dataset directory")->required();
  train_flags.add_to(*train_cmd, true);
  train_cmd->add_option("--seed", train_seed)->capture_default_str();
  train_cmd->add_option("--out-dir", train_out)->required();
  train_cmd->add_option("--resume", train_resume, "continue from a checkpoint");

  // eval
  std::string eval_corpus, eval_ckpt, eval_split = "test";
  auto* eval_cmd = app.add_subcommand("eval", "AUC and logloss of a checkpoint");
  eval_cmd->add_option("--corpus", eval_corpus, "dataset directory")->required();
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--split", eval_split, "train | test")->capture_default_str();

  // ablate
  std::string grid_file, ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "run an experiment grid");
  ablate_cmd->add_option("--grid-file", grid_file, "key = value grid description")->required();
  ablate_cmd->add_option("--out-dir", ablate_out)->required();

  // sweep-alpha
  TrainFlags sweep_flags;
  std::string sweep_corpus, sweep_out;
  std::vector<double> sweep_alphas = kDefaultAlphas;
  std::vector<std::uint64_t> sweep_seeds = kDefaultSeeds;
  auto* sweep_cmd = app.add_subcommand("sweep-alpha", "clsd over a list of alphas and seeds");
  sweep_cmd->add_option("--corpus", sweep_corpus, "dataset directory")->required();
  sweep_flags.add_to(*sweep_cmd, false);
  sweep_cmd->add_option("--alphas", sweep_alphas)->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--seeds", sweep_seeds)->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--out-dir", sweep_out)->required();

  // analyze-groups
  std::string groups_corpus, groups_ckpt, groups_out, groups_split = "train";
  auto* groups_cmd = app.add_subcommand("analyze-groups", "per-group CTR and mean predictions");
  groups_cmd->add_option("--corpus", groups_corpus, "dataset directory")->required();
  groups_cmd->add_option("--checkpoint", groups_ckpt)->required();
  groups_cmd->add_option("--out", groups_out, "CSV path")->required();
  groups_cmd->add_option("--split", groups_split, "train | test")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  auto pick_split = [](const std::pair<Corpus, Corpus>& data, const std::string& split) -> const Corpus& {
    if (split == "train") return data.first;
    if (split == "test") return data.second;
    throw ConfigError("--split must be train or test");
  };

  try {
    if (*gen_cmd) {
      auto [train, test] = generate(gen);
      write_dataset(train, test, gen_out);
      std::printf("wrote %zu train and %zu test records to %s\n", train.size(), test.size(), gen_out.c_str());
    } else if (*train_cmd) {
      TrainConfig config = train_flags.resolve();
      config.seed = train_seed;
      const auto [train, test] = read_dataset(train_corpus);
      std::optional<TrainState> start;
      if (!train_resume.empty()) start = load_checkpoint(std::filesystem::path(train_resume));
      const RunReport report = run_single(train, test, config, train_out, std::move(start));
      std::printf("final test AUC %.6f\n", report.final_auc());
    } else if (*eval_cmd) {
      const auto data = read_dataset(eval_corpus);
      const Corpus& corpus = pick_split(data, eval_split);
      const ModelParams params = read_params(std::filesystem::path(eval_ckpt));
      const auto p = served_predictions(params, corpus);
      std::vector<std::uint8_t> y;
      for (const auto& r : corpus.records) y.push_back(r.label);
      std::printf("auc %.6f\nlogloss %.6f\n", auc(p, y), logloss(p, y));
    } else if (*ablate_cmd) {
      const GridFile file = parse_grid_file(std::filesystem::path(grid_file));
      const auto [train, test] = file.corpus ? read_dataset(*file.corpus) : generate(file.gen);
      const GridResult result = run_grid(file.grid, train, test, file.base);
      std::filesystem::create_directories(ablate_out);
      const std::filesystem::path dir(ablate_out);
      write_file(dir / "grid.csv", [&](std::ostream& o) { write_grid_csv(result.rows, o); });
      write_file(dir / "summary.csv", [&](std::ostream& o) { write_summary_csv(result.summary, o); });
      print_summary(result.summary);
    } else if (*sweep_cmd) {
      const TrainConfig base = sweep_flags.resolve();
      ExperimentGrid grid;
      grid.backbones = {base.backbone};
      grid.variants = {GridVariant::clsd};
      grid.alphas = sweep_alphas;
      grid.seeds = sweep_seeds;
      const auto [train, test] = read_dataset(sweep_corpus);
      const GridResult result = run_grid(grid, train, test, base);
      std::filesystem::create_directories(sweep_out);
      const std::filesystem::path dir(sweep_out);
      write_file(dir / "grid.csv", [&](std::ostream& o) { write_grid_csv(result.rows, o); });
      write_file(dir / "summary.csv", [&](std::ostream& o) { write_summary_csv(result.summary, o); });
      print_summary(result.summary);
      const SummaryRow* best = nullptr;
      for (const auto& s : result.summary)
        if (s.n && (!best || s.mean_auc > best->mean_auc)) best = &s;
      if (best) std::printf("best alpha %g (mean AUC %.6f)\n", best->alpha, best->mean_auc);
    } else if (*groups_cmd) {
      const auto data = read_dataset(groups_corpus);
      const ModelParams params = read_params(std::filesystem::path(groups_ckpt));
      const GroupStats stats = group_stats(pick_split(data, groups_split), params);
      write_group_stats_csv(stats, std::filesystem::path(groups_out));
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return kBadInput;
  } catch (const SchemaError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return kBadInput;
  } catch (const TrainingAborted& e) {
    std::fprintf(stderr, "training aborted: %s\n", e.what());
    return kAborted;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
