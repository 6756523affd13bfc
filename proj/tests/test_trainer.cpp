#include <doctest.h>

#include <cmath>
#include <sstream>

#include "clsd/errors.hpp"
#include "clsd/trainer.hpp"
#include "support.hpp"

using namespace clsd;

namespace {

const std::pair<Corpus, Corpus>& small_data() {
  static const auto data = [] {
    GenConfig g;
    g.users = 100;
    g.items = 60;
    g.records = 3000;
    g.test_records = 600;
    return generate(g);
  }();
  return data;
}

TrainConfig small_config(LossVariant v, std::size_t epochs = 3) {
  TrainConfig c;
  c.epochs = epochs;
  c.seed = 5;
  c.loss.variant = v;
  return c;
}

std::string checkpoint_bytes(const TrainState& s) {
  std::ostringstream out;
  save_checkpoint(s, out);
  return out.str();
}

class Recorder : public TrainObserver {
 public:
  std::vector<std::size_t> teacher_epochs;
  std::uint64_t last_hash = 0;
  std::size_t stale = 0;
  std::size_t steps = 0;

  explicit Recorder(std::uint64_t initial_hash) : last_hash(initial_hash) {}

  void on_teacher(std::size_t epoch, std::size_t, const ModelParams& snapshot) override {
    teacher_epochs.push_back(epoch);
    if (params_hash(snapshot) != last_hash) ++stale;
  }
  void on_step(std::size_t, std::size_t, const ModelParams& params) override {
    last_hash = params_hash(params);
    ++steps;
  }
};

}  // namespace

TEST_CASE("adam_step") {
  AdamConfig adam;

  SUBCASE("zero gradient leaves parameters alone") {
    std::vector<double> p{0.3, -0.2};
    OptimizerState s(2);
    adam_step(p, std::vector<double>{0.0, 0.0}, s, 0.003);
    CHECK(p == std::vector<double>{0.3, -0.2});
    CHECK(s.step == 1);
  }

  SUBCASE("first step moves by about lr") {
    for (double g : {1e-3, 0.5, -7.0}) {
      std::vector<double> p{1.0};
      OptimizerState s(1);
      adam_step(p, std::vector<double>{g}, s, 0.003);
      const double delta = std::abs(p[0] - 1.0);
      CHECK(delta <= 0.003);
      CHECK(delta >= 0.99 * 0.003);
    }
  }

  SUBCASE("three steps against the recurrence") {
    const double grads[3] = {0.4, -1.3, 0.05};
    double x = 0.7, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
      const double g = grads[t - 1];
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1.0 - std::pow(0.9, t));
      const double vh = v / (1.0 - std::pow(0.999, t));
      x -= 0.003 * mh / (std::sqrt(vh) + 1e-8);
    }
    std::vector<double> p{0.7};
    OptimizerState s(1);
    for (double g : grads) adam_step(p, std::vector<double>{g}, s, 0.003, adam);
    CHECK(std::abs(p[0] - x) <= 1e-12);
    CHECK(s.step == 3);
  }

  SUBCASE("frozen entries keep their values and moments") {
    std::vector<double> p{1.0, 1.0};
    OptimizerState s(2);
    const std::vector<bool> frozen{false, true};
    adam_step(p, std::vector<double>{1.0, 1.0}, s, 0.01, adam, &frozen);
    CHECK(p[0] != 1.0);
    CHECK(p[1] == 1.0);
    CHECK(s.m[1] == 0.0);
  }

  SUBCASE("non-finite gradient aborts before touching anything") {
    std::vector<double> p{1.0, 2.0};
    OptimizerState s(2);
    CHECK_THROWS_AS(adam_step(p, std::vector<double>{0.1, NAN}, s, 0.01), TrainingAborted);
    CHECK(p == std::vector<double>{1.0, 2.0});
    CHECK(s.step == 0);
  }
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.learning_rate == 0.003);
  CHECK(c.batch_size == 256);
  TrainConfig bad = c;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.loss.warmup_fraction = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("warm-up boundary") {
  CHECK(warmup_epochs(1.0 / 3.0, 9) == 3);
  CHECK(warmup_epochs(1.0 / 3.0, 6) == 2);
  CHECK(warmup_epochs(1.0 / 3.0, 4) == 2);
  CHECK(warmup_epochs(0.0, 5) == 0);
  CHECK(warmup_epochs(1.0, 5) == 5);

  const auto& [train_c, test_c] = small_data();
  const auto report = train(train_c, test_c, small_config(LossVariant::clsd, 9)).report;
  REQUIRE(report.epochs.size() == 9);
  for (std::size_t e = 0; e < 9; ++e) CHECK(report.epochs[e].phase == (e < 3 ? Phase::warmup : Phase::distill));
}

TEST_CASE("full warm-up reproduces the plain baseline byte for byte") {
  const auto& [train_c, test_c] = small_data();
  TrainConfig ori = small_config(LossVariant::ori);
  ori.loss.warmup_fraction = 1.0;
  const std::string base = checkpoint_bytes(train(train_c, test_c, ori).state);
  for (auto v : {LossVariant::global, LossVariant::clsd, LossVariant::mtl}) {
    TrainConfig c = ori;
    c.loss.variant = v;
    CHECK(checkpoint_bytes(train(train_c, test_c, c).state) == base);
  }
}

TEST_CASE("training is deterministic") {
  const auto& [train_c, test_c] = small_data();
  const auto c = small_config(LossVariant::clsd);
  const auto a = train(train_c, test_c, c);
  const auto b = train(train_c, test_c, c);
  CHECK(a.report == b.report);
  CHECK(checkpoint_bytes(a.state) == checkpoint_bytes(b.state));
}

TEST_CASE("checkpoints") {
  const auto& [train_c, test_c] = small_data();
  const TrainConfig c = small_config(LossVariant::clsd, 4);
  const auto full = train(train_c, test_c, c);
  const std::string bytes = checkpoint_bytes(full.state);

  SUBCASE("save, load, save") {
    std::istringstream in(bytes);
    CHECK(checkpoint_bytes(load_checkpoint(in)) == bytes);
  }

  SUBCASE("resume at an epoch boundary matches the uninterrupted run") {
    struct Stopper : TrainObserver {
      std::size_t last;
      explicit Stopper(std::size_t e) : last(e) {}
      bool stop_after_epoch(std::size_t epoch) override { return epoch == last; }
    };
    for (std::size_t stop : {0, 1, 2}) {
      Stopper stopper(stop);
      const auto head = train(train_c, test_c, initial_state(train_c.schema, c), c, &stopper);
      REQUIRE(head.state.next_epoch == stop + 1);
      std::istringstream in(checkpoint_bytes(head.state));
      const auto tail = train(train_c, test_c, load_checkpoint(in), c);
      CHECK(checkpoint_bytes(tail.state) == bytes);
      auto joined = head.report.epochs;
      joined.insert(joined.end(), tail.report.epochs.begin(), tail.report.epochs.end());
      CHECK(joined == full.report.epochs);
    }
  }

  SUBCASE("truncated file leaves no state") {
    for (std::size_t cut : {bytes.size() / 4, bytes.size() / 2, bytes.size() - 4}) {
      std::istringstream in(bytes.substr(0, cut));
      CHECK_THROWS_AS(load_checkpoint(in), ParseError);
    }
  }

  SUBCASE("version mismatch") {
    std::istringstream in("CLSDCKPT v0" + bytes.substr(bytes.find('\n')));
    CHECK_THROWS_AS(load_checkpoint(in), ParseError);
  }
}

TEST_CASE("warm-up purity and teacher freshness") {
  const auto& [train_c, test_c] = small_data();
  const TrainConfig c = small_config(LossVariant::clsd, 6);
  const TrainState start = initial_state(train_c.schema, c);
  Recorder rec(params_hash(start.params));
  const std::uint64_t before = teacher_forward_count();
  const auto result = train(train_c, test_c, start, c, &rec);
  const std::uint64_t used = teacher_forward_count() - before;

  const std::size_t per_epoch = EpochBatches(train_c, c.batch_size, c.seed, 0).count();
  const std::size_t boundary = warmup_epochs(c.loss.warmup_fraction, c.epochs);
  CHECK(used == per_epoch * (c.epochs - boundary));
  CHECK(rec.teacher_epochs.size() == used);
  for (auto e : rec.teacher_epochs) CHECK(e >= boundary);
  CHECK(rec.stale == 0);
  CHECK(rec.steps == per_epoch * c.epochs);

  // alpha = 0 has no teacher at all.
  TrainConfig local = c;
  local.loss.alpha = 0.0;
  const std::uint64_t before_local = teacher_forward_count();
  train(train_c, test_c, local);
  CHECK(teacher_forward_count() == before_local);
}

TEST_CASE("report CSV") {
  RunReport r;
  r.epochs.push_back({0, Phase::warmup, 0.5, 0.61, 0.52});
  r.epochs.push_back({1, Phase::distill, 0.45, 0.625, 0.5});
  std::ostringstream out;
  write_report_csv(r, out);
  CHECK(out.str() ==
        "epoch,phase,train_logloss,test_auc,test_logloss\n"
        "0,warmup,0.500000,0.610000,0.520000\n"
        "1,clsd,0.450000,0.625000,0.500000\n");
}

TEST_CASE("training lowers the objective each variant optimises") {
  static const auto data = generate(GenConfig{});
  const Corpus& train_c = data.first;

  // Reported train logloss is the plain loss of the served prediction.
  for (auto v : {LossVariant::ori, LossVariant::global, LossVariant::clsd, LossVariant::focal, LossVariant::mtl}) {
    TrainConfig c;
    c.epochs = 3;
    c.loss.variant = v;
    const auto report = train(train_c, data.second, c).report;
    CAPTURE(to_string(v));
    CHECK(report.epochs.back().train_logloss < report.epochs.front().train_logloss);
  }

  // Upweighting long dwells can raise the plain logloss, so score the weighted objective itself.
  TrainConfig c;
  c.epochs = 3;
  c.loss.variant = LossVariant::dt_reweight;
  std::vector<std::uint8_t> y;
  std::vector<double> dwell;
  for (const auto& r : train_c.records) {
    y.push_back(r.label);
    dwell.push_back(r.dwell_time);
  }
  const auto objective = [&](const ModelParams& params) {
    const std::vector<double> p = backbone_predictions(params, train_c);
    LossInputs in;
    in.p = p;
    in.y = y;
    in.dwell_time = dwell;
    return evaluate_loss(c.loss, in).value;
  };
  const double before = objective(initial_state(train_c.schema, c).params);
  const double after = objective(train(train_c, data.second, c).state.params);
  CHECK(after < before);
}
