#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "sit/checkpoint.hpp"
#include "sit/error.hpp"
#include "sit/model.hpp"
#include "sit/profiles.hpp"

using namespace sit;
using Md = Matrix<double>;

namespace {

/// Count by summing the sizes of an explicit tensor list.
std::size_t listed_parameters(const SiTConfig& c) {
  std::vector<std::pair<long, long>> shapes;
  const long d = c.dim, pd = c.patch_dim();
  shapes.push_back({d, pd});
  shapes.push_back({1, d});
  shapes.push_back({1, d});
  shapes.push_back({c.patches + 1, d});
  for (int l = 0; l < c.layers; ++l) {
    for (int i = 0; i < 2; ++i) shapes.push_back({1, d});
    for (int i = 0; i < 3; ++i) shapes.push_back({d, d});
    shapes.push_back({d, d});
    shapes.push_back({1, d});
    for (int i = 0; i < 2; ++i) shapes.push_back({1, d});
    shapes.push_back({c.mlp, d});
    shapes.push_back({1, c.mlp});
    shapes.push_back({d, c.mlp});
    shapes.push_back({1, d});
  }
  shapes.push_back({1, d});
  shapes.push_back({1, d});
  long last = d;
  if (c.hidden_width() > 0) {
    shapes.push_back({c.hidden_width(), d});
    shapes.push_back({1, c.hidden_width()});
    last = c.hidden_width();
  }
  shapes.push_back({c.outputs(), last});
  shapes.push_back({1, c.outputs()});
  if (c.mpp) {
    shapes.push_back({pd, d});
    shapes.push_back({1, pd});
    shapes.push_back({1, d});
  }
  if (c.deconfound) {
    shapes.push_back({d, 1});
    shapes.push_back({1, d});
  }
  std::size_t total = 0;
  for (auto [r, k] : shapes) total += static_cast<std::size_t>(r * k);
  return total;
}

Md random_patches(const SiTConfig& c, Rng& rng) { return oracle::random_matrix(c.patches, c.patch_dim(), rng); }

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sit_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("parameter counts") {
  for (const auto& name : profile_names()) {
    const SiTConfig c = profile(name);
    CHECK(parameter_count(c) == listed_parameters(c));
  }
  CHECK(parameter_count(profile("sit-tiny-ico")) == 5548609);
  CHECK(parameter_count(profile("sit-small-ico")) == 21787777);
  CHECK(parameter_count(profile("sit-tiny-hcp")) == 8809345);

  Rng rng(1);
  SiTConfig c = oracle::toy_config();
  for (int mask = 0; mask < 16; ++mask) {
    c.mpp = mask & 1;
    c.deconfound = mask & 2;
    c.head_hidden = (mask & 4) ? 0 : -1;
    c.head_kind = (mask & 8) ? HeadKind::classification : HeadKind::regression;
    c.classes = 3;
    const auto model = init_model<float>(c, rng);
    CHECK(model.parameter_total() == parameter_count(c));
    CHECK(parameter_count(c) == listed_parameters(c));
  }
  c = oracle::toy_config();
  c.heads = 3;
  CHECK_THROWS_AS(parameter_count(c), ConfigurationError);
}

TEST_CASE("initialisation") {
  Rng rng(2);
  const auto model = init_model<double>(profile("sit-narrow-ico"), rng);
  for_each_parameter(model.params, [&](const std::string& name, const Md& m) {
    if (name.ends_with(".gain")) {
      CHECK(m.isOnes(0));
    } else if (name.ends_with(".bias") || name.ends_with(".shift")) {
      CHECK(m.isZero(0));
    } else {
      CHECK(m.cwiseAbs().maxCoeff() <= 0.04);
    }
  });
}

TEST_CASE("embedding") {
  Rng rng(3);
  const SiTConfig c = profile("sit-tiny-ico");
  auto model = init_model<double>(c, rng);
  const Md patches = random_patches(c, rng);
  Rng r(1);
  const Md x = embed_sequence(patches, model, ForwardOptions{}, r);
  CHECK(x.rows() == 321);
  CHECK(x.cols() == 192);

  model.params.embed.weight.setZero();
  model.params.pos.setZero();
  const Md y = embed_sequence(patches, model, ForwardOptions{}, r);
  CHECK(y.row(0) == model.params.token.row(0));
  CHECK(y.bottomRows(320).isZero(0));

  CHECK_THROWS_AS(embed_sequence(Md(Md::Zero(10, 612)), model, ForwardOptions{}, r), ShapeError);
}

TEST_CASE("forward in evaluation mode is deterministic") {
  Rng rng(4);
  SiTConfig c = oracle::toy_config();
  c.dropout_embed = 0.3;
  c.dropout_ffn = 0.3;
  const auto model = oracle::random_model(c, rng);
  const Md patches = random_patches(c, rng);
  Rng r1(10), r2(99);
  const auto a = forward(model, patches, ForwardOptions{}, r1);
  const auto b = forward(model, patches, ForwardOptions{}, r2);
  CHECK(a.prediction == b.prediction);

  ForwardOptions train;
  train.training = true;
  Rng r3(10), r4(10), r5(11);
  const auto t1 = forward(model, patches, train, r3);
  const auto t2 = forward(model, patches, train, r4);
  const auto t3 = forward(model, patches, train, r5);
  CHECK(t1.prediction == t2.prediction);
  CHECK(t1.prediction != t3.prediction);
}

TEST_CASE("self-attention sublayer") {
  Rng rng(5);
  SiTConfig c = oracle::toy_config();
  auto model = oracle::random_model(c, rng);
  const auto& block = model.params.blocks[0];

  SUBCASE("a single token attends only to itself") {
    std::vector<Eigen::MatrixXd> maps;
    Rng r(0);
    (void)mhsa_forward(oracle::random_matrix(1, c.dim, rng), block, c, false, r, static_cast<BlockCache<double>*>(nullptr), &maps);
    REQUIRE(maps.size() == 2);
    for (const auto& a : maps) CHECK(a(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  }

  SUBCASE("attention rows are stochastic") {
    std::vector<Eigen::MatrixXd> maps;
    Rng r(0);
    (void)mhsa_forward(oracle::random_matrix(7, c.dim, rng, 3.0), block, c, false, r, static_cast<BlockCache<double>*>(nullptr), &maps);
    for (const auto& a : maps) {
      CHECK((a.array() >= 0.0).all());
      CHECK((a.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    }
  }

  SUBCASE("sublayer gradients") {
    c.patches = 2;
    Md x = oracle::random_matrix(3, c.dim, rng);
    const Md w = oracle::random_matrix(3, c.dim, rng);
    BlockParams<double> blk = block;
    auto f_attn = [&] {
      Rng r(0);
      return (mhsa_forward(x, blk, c, false, r).array() * w.array()).sum();
    };
    auto f_ffn = [&] {
      Rng r(0);
      return (ffn_forward(x, blk, c, false, r).array() * w.array()).sum();
    };
    BlockCache<double> cache;
    Rng r(0);
    (void)mhsa_forward(x, blk, c, false, r, &cache);
    BlockParams<double> g_attn = zero_params<double>(c).blocks[0];
    const Md dx = mhsa_backward(w, blk, c, cache, g_attn);
    const auto flat = [](const Md& m) { return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(m.data(), m.size())); };
    CHECK(oracle::rel_error(flat(dx), oracle::central_differences(x, oracle::all_entries(x), 1e-5, f_attn)) < 1e-6);
    CHECK(oracle::rel_error(flat(g_attn.wq.weight),
                            oracle::central_differences(blk.wq.weight, oracle::all_entries(blk.wq.weight), 1e-5, f_attn)) <
          1e-6);
    CHECK(oracle::rel_error(flat(g_attn.wout.bias),
                            oracle::central_differences(blk.wout.bias, oracle::all_entries(blk.wout.bias), 1e-5, f_attn)) <
          1e-6);

    BlockCache<double> fcache;
    Rng r2(0);
    (void)ffn_forward(x, blk, c, false, r2, &fcache);
    BlockParams<double> g_ffn = zero_params<double>(c).blocks[0];
    const Md dz = ffn_backward(w, blk, fcache, g_ffn);
    CHECK(oracle::rel_error(flat(dz), oracle::central_differences(x, oracle::all_entries(x), 1e-5, f_ffn)) < 1e-6);
    CHECK(oracle::rel_error(flat(g_ffn.ffn1.weight),
                            oracle::central_differences(blk.ffn1.weight, oracle::all_entries(blk.ffn1.weight), 1e-5, f_ffn)) <
          1e-6);
  }

  SUBCASE("zero feed-forward weights give the identity") {
    BlockParams<double> blk = block;
    blk.ffn2.weight.setZero();
    blk.ffn2.bias.setZero();
    const Md z = oracle::random_matrix(5, c.dim, rng);
    Rng r(0);
    CHECK(ffn_forward(z, blk, c, false, r) == z);
  }
}

TEST_CASE("full-model gradients over 100 seeds") {
  double worst = 0.0;
  std::string where;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SiTConfig c = oracle::toy_config();
    const auto objective = static_cast<oracle::Objective>(seed % 3);
    c.dropout_embed = seed % 2 ? 0.2 : 0.0;
    c.dropout_ffn = seed % 4 < 2 ? 0.2 : 0.0;
    c.deconfound = seed % 5 < 2;
    c.head_hidden = seed % 7 == 0 ? 0 : -1;
    if (objective == oracle::Objective::classification) {
      c.head_kind = HeadKind::classification;
      c.classes = 3;
    }
    c.mpp = objective == oracle::Objective::mpp;
    const auto r = oracle::check_model_gradients(c, seed, objective, 6);
    if (r.worst > worst) {
      worst = r.worst;
      where = r.worst_tensor;
    }
  }
  MESSAGE("worst relative error " << worst << " in " << where);
  CHECK(worst < 1e-4);
}

TEST_CASE("masked patch corruption") {
  Rng rng(6);
  const auto plan = draw_mpp_corruption(320, 0.5, rng);
  CHECK(plan.selected() == 160);
  CHECK(draw_mpp_corruption(7, 0.5, rng).selected() == 4);
  CHECK(draw_mpp_corruption(320, 1.0, rng).selected() == 320);
  CHECK_THROWS_AS(draw_mpp_corruption(320, 0.0, rng), ArgumentError);
  CHECK_THROWS_AS(draw_mpp_corruption(320, 1.5, rng), ArgumentError);
  CHECK_THROWS_AS(draw_mpp_corruption(3, 0.01, rng), ArgumentError);
  for (int i = 0; i < plan.patch_count(); ++i) {
    const bool selected = plan.kind[i] != CorruptionKind::none;
    CHECK(selected == bool(plan.mask[i]));
    CHECK((plan.kind[i] == CorruptionKind::swap) == (plan.source[i] >= 0));
  }

  std::size_t counts[4] = {0, 0, 0, 0};
  Rng trials(7);
  for (int t = 0; t < 10000; ++t) {
    const auto p = draw_mpp_corruption(20, 0.5, trials);
    for (auto k : p.kind) ++counts[static_cast<int>(k)];
  }
  const double total = double(counts[1] + counts[2] + counts[3]);
  CHECK(total == 100000.0);
  CHECK(std::abs(counts[1] / total - 0.8) < 0.02);
  CHECK(std::abs(counts[2] / total - 0.1) < 0.02);
  CHECK(std::abs(counts[3] / total - 0.1) < 0.02);

  const Md emb = oracle::random_matrix(20, 8, rng);
  const Md token = oracle::random_matrix(1, 8, rng);
  const auto p = draw_mpp_corruption(20, 0.5, rng);
  const Md out = apply_mpp_corruption(emb, p, token);
  for (int i = 0; i < 20; ++i) {
    switch (p.kind[i]) {
      case CorruptionKind::none:
      case CorruptionKind::keep: CHECK(out.row(i) == emb.row(i)); break;
      case CorruptionKind::mask_token: CHECK(out.row(i) == token.row(0)); break;
      case CorruptionKind::swap: CHECK(out.row(i) == emb.row(p.source[i])); break;
    }
  }
}

TEST_CASE("masked patch loss") {
  Rng rng(8);
  const Md target = oracle::random_matrix(6, 5, rng);
  std::vector<char> mask = {1, 0, 1, 0, 0, 1};
  CHECK(mpp_loss(target, target, mask) == 0.0);
  Md garbage = target;
  garbage.row(1).setConstant(1e6);
  garbage.row(4).setConstant(-3.0);
  CHECK(mpp_loss(garbage, target, mask) == 0.0);
  const Md twos = Md::Constant(6, 5, 2.0), zeros = Md::Zero(6, 5);
  CHECK(mpp_loss(twos, zeros, mask) == 4.0);
  const Md g = mpp_loss_grad(twos, zeros, mask);
  CHECK(g.row(1).isZero(0));
  CHECK(g(0, 0) == doctest::Approx(2.0 * 2.0 / 15.0));
  CHECK_THROWS_AS(mpp_loss(twos, zeros, std::vector<char>(6, 0)), ArgumentError);
  CHECK_THROWS_AS(mpp_loss(twos, zeros, std::vector<char>(5, 1)), ShapeError);
}

TEST_CASE("deconfounding embedder") {
  Rng rng(9);
  SiTConfig c = oracle::toy_config();
  c.deconfound = true;
  auto model = oracle::random_model(c, rng);

  const BatchStats constant = batch_stats({61.0, 61.0, 61.0});
  CHECK(constant.var == 0.0);
  const Md e = deconfound_embed(61.0, model, &constant);
  CHECK(e.cols() == c.dim);
  CHECK((e - model.params.confound_fc.bias).cwiseAbs().maxCoeff() == 0.0);

  const Md patches = random_patches(c, rng);
  Rng r(0);
  ForwardOptions eval;
  eval.confound = 40.0;
  CHECK_THROWS_AS(forward(model, patches, eval, r), StateError);
  initialize_confound_stats(model.confound, {30.0, 40.0, 50.0});
  const auto with_a = forward(model, patches, eval, r);
  eval.confound = 45.0;
  const auto with_b = forward(model, patches, eval, r);
  CHECK(with_a.prediction != with_b.prediction);

  SiTConfig plain = c;
  plain.deconfound = false;
  SiTModel<double> off{plain, model.params, {}};
  off.params.confound_fc = {};
  const auto baseline = forward(off, patches, ForwardOptions{}, r);
  CHECK(baseline.prediction != with_a.prediction);
  ForwardOptions ignored;
  ignored.confound = 40.0;
  CHECK(forward(off, patches, ignored, r).prediction == baseline.prediction);

  ConfoundStats s;
  update_running_stats(s, {2.0, 4.0});
  CHECK(s.initialized);
  update_running_stats(s, {12.0, 14.0});
  CHECK(s.running_mean == doctest::Approx(3.0));
  CHECK(s.running_var == doctest::Approx(5.0));
}

TEST_CASE("the prediction depends on patch order") {
  Rng rng(10);
  const SiTConfig c = oracle::toy_config();
  const auto model = oracle::random_model(c, rng);
  const Md patches = random_patches(c, rng);
  Md swapped = patches;
  swapped.row(0).swap(swapped.row(3));
  Rng r(0);
  const double a = forward(model, patches, ForwardOptions{}, r).prediction(0, 0);
  const double b = forward(model, swapped, ForwardOptions{}, r).prediction(0, 0);
  CHECK(std::abs(a - b) > 1e-9);
}

TEST_CASE("checkpoints") {
  Rng rng(11);
  SiTConfig c = oracle::toy_config();
  c.deconfound = true;
  c.mpp = true;
  auto model = cast_model<float>(oracle::random_model(c, rng));
  initialize_confound_stats(model.confound, {1.0, 2.0, 4.0});
  const auto dir = scratch_dir("ckpt");
  save_checkpoint(model, dir);
  const auto back = load_checkpoint(dir);
  CHECK(back.config == model.config);
  CHECK(back.confound == model.confound);
  std::vector<Matrix<float>> a, b;
  for_each_parameter(model.params, [&](const std::string&, const Matrix<float>& m) { a.push_back(m); });
  for_each_parameter(back.params, [&](const std::string&, const Matrix<float>& m) { b.push_back(m); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  CHECK(load_checkpoint_config(dir) == c);

  SUBCASE("tampered manifest") {
    std::ifstream in(dir / "manifest.txt");
    std::stringstream text;
    text << in.rdbuf();
    in.close();
    std::string s = text.str();
    const auto at = s.find("dim 8");
    REQUIRE(at != std::string::npos);
    s.replace(at, 5, "dim 10");
    std::ofstream(dir / "manifest.txt") << s;
    CHECK_THROWS_AS(load_checkpoint(dir), ValidationError);
  }
  SUBCASE("truncated blob") {
    const auto size = std::filesystem::file_size(dir / "weights.bin");
    std::filesystem::resize_file(dir / "weights.bin", size - 4);
    CHECK_THROWS_AS(load_checkpoint(dir), ValidationError);
  }
  SUBCASE("missing directory") { CHECK_THROWS_AS(load_checkpoint(dir / "absent"), IoError); }
}
