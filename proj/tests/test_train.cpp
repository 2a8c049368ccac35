#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "oracles.hpp"
#include "sit/checkpoint.hpp"
#include "sit/error.hpp"
#include "sit/metrics.hpp"
#include "sit/synthetic.hpp"
#include "sit/train.hpp"

using namespace sit;

namespace {

const Icosphere& ico3() {
  static const Icosphere ico = build_icosphere(3);
  return ico;
}

Dataset small_data(int n, std::uint64_t seed = 42) {
  Rng rng(seed);
  return gen_synthetic(ico3(), n, rng);
}

SiTConfig small_config(const Dataset& d) {
  SiTConfig c;
  c.layers = 1;
  c.heads = 2;
  c.dim = 16;
  c.mlp = 32;
  c.patches = d.table->patch_count;
  c.vertices = d.table->patch_vertices;
  c.channels = d.channels();
  return c;
}

TrainConfig quick(long iterations) {
  TrainConfig t;
  t.iterations = iterations;
  t.batch_size = 4;
  t.seed = 5;
  return t;
}

std::vector<Matrix<float>> snapshot(const SiTModel<float>& m) {
  std::vector<Matrix<float>> out;
  for_each_parameter(m.params, [&](const std::string&, const Matrix<float>& x) { out.push_back(x); });
  return out;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sit_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("training configuration text") {
  std::istringstream in(
      "# optimiser\n"
      "optimizer = sgd\n"
      "lr = 0.05   # trailing comment\n"
      "batch_size=8\n"
      "\n"
      "sampler = adaptive\n"
      "augment = true\n");
  const TrainConfig c = parse_train_config(in);
  CHECK(c.optimizer == OptimizerKind::sgd);
  CHECK(c.lr == 0.05);
  CHECK(c.batch_size == 8);
  CHECK(c.sampler == SamplerKind::adaptive);
  CHECK(c.augment);

  std::ostringstream text;
  for (const auto& [k, v] : train_config_entries(c)) text << k << " = " << v << "\n";
  std::istringstream again(text.str());
  const TrainConfig d = parse_train_config(again);
  CHECK(train_config_entries(d) == train_config_entries(c));

  TrainConfig t;
  CHECK_THROWS_AS(apply_train_setting(t, "learning_rate", "1"), ConfigurationError);
  CHECK_THROWS_AS(apply_train_setting(t, "lr", "fast"), ConfigurationError);
  CHECK_THROWS_AS(apply_train_setting(t, "optimizer", "rmsprop"), ConfigurationError);
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ConfigurationError);
  std::istringstream bad("lr 0.1\n");
  CHECK_THROWS_AS(parse_train_config(bad), ParseError);
}

TEST_CASE("adaptive sampler balances categories") {
  std::vector<int> cats;
  for (int k = 0; k < 10; ++k) cats.push_back(0);
  for (int k = 0; k < 70; ++k) cats.push_back(1);
  for (int k = 0; k < 110; ++k) cats.push_back(2);
  AdaptiveSampler s(cats, Rng(1));
  CHECK(s.category_count() == 3);
  int hits[3] = {0, 0, 0};
  for (int i = 0; i < 30000; ++i) ++hits[cats[s.next()]];
  for (int h : hits) CHECK(std::abs(h / 30000.0 - 1.0 / 3.0) < 0.02);

  AdaptiveSampler one(std::vector<int>(5, 0), Rng(2));
  std::set<std::size_t> seen;
  for (int i = 0; i < 500; ++i) seen.insert(one.next());
  CHECK(seen.size() == 5);

  AdaptiveSampler a(cats, Rng(3)), b(cats, Rng(3)), c(cats, Rng(4));
  std::vector<std::size_t> xa, xb, xc;
  for (int i = 0; i < 50; ++i) {
    xa.push_back(a.next());
    xb.push_back(b.next());
    xc.push_back(c.next());
  }
  CHECK(xa == xb);
  CHECK(xa != xc);

  CHECK_THROWS(AdaptiveSampler(std::vector<int>{0, 2, 2}, Rng(0)));
  CHECK_THROWS(AdaptiveSampler(std::vector<int>{}, Rng(0)));

  // Every example is reached within 100 * n draws.
  std::vector<int> covered(cats.size(), 0);
  AdaptiveSampler d(cats, Rng(5));
  for (std::size_t i = 0; i < 100 * cats.size(); ++i) covered[d.next()] = 1;
  CHECK(std::count(covered.begin(), covered.end(), 1) == static_cast<long>(cats.size()));

  ShuffleSampler sh(7, Rng(6));
  std::vector<std::size_t> epoch;
  for (int i = 0; i < 7; ++i) epoch.push_back(sh.next());
  std::sort(epoch.begin(), epoch.end());
  CHECK(epoch == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6});
}

TEST_CASE("a zero learning rate leaves the parameters unchanged") {
  const Dataset data = small_data(6);
  Rng rng(1);
  auto model = init_model<float>(small_config(data), rng);
  const auto before = snapshot(model);
  for (auto opt : {OptimizerKind::sgd, OptimizerKind::adam}) {
    TrainConfig t = quick(3);
    t.optimizer = opt;
    t.lr = 0.0;
    const auto history = train_loop(model, data, t);
    CHECK(history.size() == 3);
    CHECK(snapshot(model) == before);
  }
}

TEST_CASE("training is reproducible") {
  const Dataset data = small_data(8);
  auto run = [&](int workers) {
    Rng rng(1);
    auto model = init_model<float>(small_config(data), rng);
    TrainConfig t = quick(6);
    t.workers = workers;
    t.augment = true;
    t.angle_cap = 10.0;
    static const RotationAugmentation aug(ico3(), 10.0);
    TrainContext ctx;
    ctx.augmentation = &aug;
    auto history = train_loop(model, data, t, ctx);
    return std::make_pair(history, snapshot(model));
  };
  const auto a = run(1);
  const auto b = run(1);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  const auto c = run(3);
  const auto d = run(3);
  CHECK(c.first == d.first);
  CHECK(c.second == d.second);
  for (double l : a.first) CHECK(std::isfinite(l));
}

TEST_CASE("a non-finite loss names the iteration") {
  Dataset data = small_data(4);
  for (auto& e : data.examples) e.target = std::nan("");
  Rng rng(1);
  auto model = init_model<float>(small_config(data), rng);
  try {
    train_loop(model, data, quick(3));
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(e.iteration() == 1);
    CHECK(std::string(e.what()).find("iteration 1") != std::string::npos);
  }
}

TEST_CASE("masked patch pretraining") {
  const Dataset data = small_data(6);
  Rng rng(1);
  SiTConfig c = small_config(data);
  c.mpp = true;
  auto model = init_model<float>(c, rng);
  const auto before = model.params;
  TrainConfig t = quick(40);
  t.lr = 3e-3;
  const auto history = pretrain_mpp(model, data, t);
  REQUIRE(history.size() == 40);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 4; ++i) {
    first += history[i];
    last += history[36 + i];
  }
  CHECK(last < first);
  CHECK(model.params.embed.weight != before.embed.weight);
  CHECK(model.params.mpp_decoder.weight != before.mpp_decoder.weight);
  CHECK(model.params.head_out.weight == before.head_out.weight);
  CHECK(model.params.head_hidden.weight == before.head_hidden.weight);

  SiTModel<float> plain = init_model<float>(small_config(data), rng);
  CHECK_THROWS(pretrain_mpp(plain, data, t));
}

TEST_CASE("augmented sequences keep their shape") {
  const Dataset data = small_data(2);
  const RotationAugmentation aug(ico3(), 10.0);
  Rng rng(3);
  for (int k = 0; k < 5; ++k) {
    const auto seq = data.sequence(0, aug.table(aug.draw(rng)));
    CHECK(seq.data.rows() == data.table->patch_count);
    CHECK(seq.data.cols() == data.table->patch_vertices * data.channels());
    CHECK(seq.data.allFinite());
  }
}

TEST_CASE("checkpoint interval") {
  const Dataset data = small_data(4);
  Rng rng(1);
  auto model = init_model<float>(small_config(data), rng);
  TrainConfig t = quick(5);
  t.checkpoint_interval = 2;
  t.checkpoint_dir = scratch_dir("interval");
  train_loop(model, data, t);
  CHECK(std::filesystem::exists(t.checkpoint_dir / "iter_000002" / "manifest.txt"));
  CHECK(std::filesystem::exists(t.checkpoint_dir / "iter_000004" / "weights.bin"));
  CHECK_FALSE(std::filesystem::exists(t.checkpoint_dir / "iter_000005"));
  const auto final_model = load_checkpoint(t.checkpoint_dir / "final");
  CHECK(snapshot(final_model) == snapshot(model));
}

TEST_CASE("evaluation metrics") {
  CHECK(mean_absolute_error({1, 2, 3}, {2, 2, 5}) == doctest::Approx(1.0));
  CHECK(pearson_r({1, 2, 3, 4}, {2, 4, 6, 8}) == doctest::Approx(1.0));
  CHECK(pearson_r({1, 2, 3, 4}, {8, 6, 4, 2}) == doctest::Approx(-1.0));
  CHECK(std::isnan(pearson_r({1, 1, 1}, {1, 2, 3})));
  CHECK_THROWS_AS(mean_absolute_error({}, {}), ArgumentError);
  CHECK_THROWS_AS(mean_absolute_error({1}, {1, 2}), ArgumentError);

  CHECK(roc_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(roc_auc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}) == 0.0);
  CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5);
  CHECK(roc_auc({0.1, 0.5, 0.5, 0.9}, {0, 0, 1, 1}) == doctest::Approx(0.875));
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), ArgumentError);
  Rng rng(4);
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 4000; ++i) {
    s.push_back(rng.uniform());
    y.push_back(static_cast<int>(rng.uniform_index(2)));
  }
  CHECK(std::abs(roc_auc(s, y) - 0.5) < 0.03);

  const std::string lines = metrics_jsonl({{"mae", 0.5, "test", 3}, {"r", std::nan(""), "test", 3}});
  std::istringstream in(lines);
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  REQUIRE(rows.size() == 2);
  CHECK(rows[0]["metric"] == "mae");
  CHECK(rows[0]["value"] == 0.5);
  CHECK(rows[0]["split"] == "test");
  CHECK(rows[0]["seed"] == 3);
  CHECK(rows[1]["value"].is_null());
}

TEST_CASE("evaluation over a dataset") {
  const Dataset data = small_data(5);
  Rng rng(1);
  const auto model = init_model<float>(small_config(data), rng);
  const Evaluation a = evaluate(model, data);
  const Evaluation b = evaluate(model, data, 3);
  CHECK(a.predictions == b.predictions);
  CHECK(a.targets == data.targets());
  CHECK(std::isfinite(a.metric("mse")));
  CHECK(std::isfinite(a.metric("mae")));
  CHECK_THROWS(a.metric("auc"));

  Dataset cls = as_classification(data);
  SiTConfig c = small_config(cls);
  c.head_kind = HeadKind::classification;
  const auto classifier = init_model<float>(c, rng);
  const Evaluation e = evaluate(classifier, cls);
  CHECK(e.metric("accuracy") >= 0.0);
  for (double p : e.predictions) CHECK((p >= 0.0 && p <= 1.0));
}

TEST_CASE("synthetic data") {
  const Dataset a = small_data(10, 7);
  const Dataset b = small_data(10, 7);
  const Dataset c = small_data(10, 8);
  CHECK(a.size() == 10);
  CHECK(a.channels() == 4);
  CHECK(a.table->patch_count == 320);
  CHECK(a.table->patch_vertices == 6);
  CHECK(a.targets() == b.targets());
  CHECK(a.examples[3].field.values == b.examples[3].field.values);
  CHECK(a.targets() != c.targets());
  a.validate();
  for (const auto& e : as_classification(a).examples) CHECK((e.target == 0.0 || e.target == 1.0));

  // The target is the Y10 coefficient; the z-weighted mean of channel 0 recovers it.
  const Icosphere& ico = ico3();
  const auto& v = ico.mesh.vertices;
  const Eigen::Vector3d z(0, 0, 1);
  const double y10 = spherical_harmonics(z)(kSyntheticTargetBasis);
  CHECK(y10 > 0.0);
  std::vector<double> estimate;
  for (const auto& e : a.examples) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += e.field.values(static_cast<Eigen::Index>(i), 0) * v[i].z();
    estimate.push_back(s);
  }
  CHECK(pearson_r(estimate, a.targets()) > 0.9);

  Rng low(1);
  CHECK_THROWS(gen_synthetic(build_icosphere(1), 3, low));
}

TEST_CASE("a linear readout of patch means learns the synthetic target") {
  // Least squares on the channel-0 patch means of ico4 fields.
  const Icosphere ico = build_icosphere(4);
  Rng rng(9);
  const Dataset data = gen_synthetic(ico, 800, rng);
  const int n_train = 600;
  const int p = data.table->patch_count;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(data.size()), p + 1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto seq = data.sequence(i);
    for (int k = 0; k < p; ++k) {
      double s = 0.0;
      for (int j = 0; j < seq.patch_vertices; ++j) s += seq.data(k, j * seq.channels);
      x(static_cast<Eigen::Index>(i), k) = s / seq.patch_vertices;
    }
    x(static_cast<Eigen::Index>(i), p) = 1.0;
  }
  const auto targets = data.targets();
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(targets.data(), static_cast<Eigen::Index>(targets.size()));
  const Eigen::VectorXd w = x.topRows(n_train).completeOrthogonalDecomposition().solve(y.head(n_train));
  const Eigen::VectorXd pred = x.bottomRows(x.rows() - n_train) * w;
  std::vector<double> pv(pred.data(), pred.data() + pred.size());
  std::vector<double> tv(targets.begin() + n_train, targets.end());
  CHECK(pearson_r(pv, tv) > 0.9);
}
