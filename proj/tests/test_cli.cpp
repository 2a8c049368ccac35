#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "sit/checkpoint.hpp"
#include "sit/mesh_io.hpp"
#include "sit/patching.hpp"
#include "sit/synthetic.hpp"

namespace fs = std::filesystem;
using namespace sit;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

/// Runs the sit binary with `args`; stderr is folded into the captured output.
Result sit_run(const std::string& args) {
  const std::string cmd = std::string(SIT_CLI_PATH) + " -q " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path workdir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("sit_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

/// Manifest without its time fields.
nlohmann::json timeless(const fs::path& p) {
  auto j = nlohmann::json::parse(slurp(p));
  j.erase("started");
  j.erase("finished");
  j.erase("wall_seconds");
  return j;
}

const std::string kSmallModel = "--profile sit-narrow-ico --model layers=1 --model dim=16 --model mlp=32";
const std::string kSmallData = "--synthetic 6 --ico-order 3 --data-seed 4";

}  // namespace

TEST_CASE("cli: icosphere") {
  const fs::path d = workdir("ico");
  auto r = sit_run("icosphere --order 0 --out " + (d / "ico0.surf").string());
  CHECK(r.code == 0);
  CHECK(r.out.find("12 vertices") != std::string::npos);
  CHECK(load_tri_mesh(d / "ico0.surf").vertex_count() == 12);
  CHECK(fs::exists(d / "ico0.surf.run.json"));

  r = sit_run("icosphere --order 6 --out " + (d / "ico6.surf").string());
  CHECK(r.code == 0);
  CHECK(load_tri_mesh(d / "ico6.surf").vertex_count() == 40962);

  CHECK(sit_run("icosphere --order 3").code == 2);
  CHECK(sit_run("icosphere --order x --out a.surf").code == 2);
  CHECK(sit_run("").code == 2);
  CHECK(sit_run("frobnicate").code == 2);
  CHECK(sit_run("icosphere --order 12 --out " + (d / "big.surf").string()).code == 4);
}

TEST_CASE("cli: patch tables") {
  const fs::path d = workdir("patch");
  REQUIRE(sit_run("icosphere --order 6 --out " + (d / "ico6.surf").string()).code == 0);
  REQUIRE(sit_run("icosphere --order 2 --out " + (d / "ico2.surf").string()).code == 0);
  auto r = sit_run("patch --fine " + (d / "ico6.surf").string() + " --coarse " + (d / "ico2.surf").string() +
                   " --out " + (d / "ico.patches").string());
  CHECK(r.code == 0);
  std::istringstream head(slurp(d / "ico.patches"));
  std::string magic, version;
  int n = 0, v = 0;
  head >> magic >> version >> n >> v;
  CHECK(magic == "PATCHTABLE");
  CHECK(n == 320);
  CHECK(v == 153);

  save_mesh(make_quad_grid(2, 2), d / "control.surf");
  save_pairing({{0, 1}, {2, 3}}, d / "pairs.txt");
  r = sit_run("patch --control " + (d / "control.surf").string() + " --pairs " + (d / "pairs.txt").string() +
              " --out " + (d / "quad.patches").string());
  CHECK(r.code == 0);
  const PatchTable quad = load_patch_table(d / "quad.patches");
  CHECK(quad.patch_count == 2);
  CHECK(quad.patch_vertices == 50);

  save_pairing({{0, 1}, {1, 3}}, d / "bad_pairs.txt");
  r = sit_run("patch --control " + (d / "control.surf").string() + " --pairs " + (d / "bad_pairs.txt").string() +
              " --out " + (d / "bad.patches").string());
  CHECK(r.code == 4);
  CHECK(sit_run("patch --fine " + (d / "missing.surf").string() + " --coarse " + (d / "ico2.surf").string() +
                " --out " + (d / "x.patches").string())
            .code == 4);
  CHECK(sit_run("patch --out " + (d / "x.patches").string()).code == 2);
}

TEST_CASE("cli: resampling") {
  const fs::path d = workdir("resample");
  const Icosphere src = build_icosphere(3);
  Rng rng(1);
  const Dataset data = gen_synthetic(src, 1, rng);
  save_mesh(with_field(src.mesh, data.examples[0].field), d / "field.surf");
  REQUIRE(sit_run("icosphere --order 3 --out " + (d / "src.surf").string()).code == 0);
  REQUIRE(sit_run("icosphere --order 4 --out " + (d / "dst.surf").string()).code == 0);
  const std::string base = "resample --src " + (d / "src.surf").string() + " --dst " + (d / "dst.surf").string() +
                           " --field " + (d / "field.surf").string();
  REQUIRE(sit_run(base + " --out " + (d / "plain.surf").string()).code == 0);
  REQUIRE(sit_run(base + " --rotate x:0 --out " + (d / "rot0.surf").string()).code == 0);
  REQUIRE(sit_run(base + " --rotate z:15 --out " + (d / "rot15.surf").string()).code == 0);
  const TriMesh plain = load_tri_mesh(d / "plain.surf");
  const TriMesh rot0 = load_tri_mesh(d / "rot0.surf");
  const TriMesh rot15 = load_tri_mesh(d / "rot15.surf");
  REQUIRE(plain.channels.size() == 4);
  REQUIRE(rot0.channels.size() == 4);
  CHECK(plain.vertex_count() == 2562);
  double worst = 0.0, moved = 0.0;
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < plain.vertex_count(); ++i) {
      worst = std::max(worst, double(std::abs(plain.channels[c].values[i] - rot0.channels[c].values[i])));
      moved = std::max(moved, double(std::abs(plain.channels[c].values[i] - rot15.channels[c].values[i])));
    }
  }
  CHECK(worst < 1e-6);
  CHECK(moved > 1e-2);
  CHECK(sit_run(base + " --rotate w:5 --out " + (d / "bad.surf").string()).code != 0);
  CHECK(sit_run(base + " --rotate x --out " + (d / "bad.surf").string()).code == 2);
}

TEST_CASE("cli: parameter counts") {
  auto r = sit_run("info --profile sit-tiny-ico");
  CHECK(r.code == 0);
  CHECK(r.out.find("parameters = 5548609") != std::string::npos);
  r = sit_run("info --profile sit-small-ico");
  CHECK(r.out.find("parameters = 21787777") != std::string::npos);
  const fs::path d = workdir("info");
  std::ofstream(d / "model.cfg") << "profile = sit-tiny-ico\nchannels = 115\n";
  r = sit_run("info --model-config " + (d / "model.cfg").string());
  CHECK(r.code == 0);
  CHECK(r.out.find("parameters = 8809345") != std::string::npos);
  CHECK(sit_run("info --profile nope").code == 2);
  CHECK(sit_run("info --model heads=5").code == 2);
  CHECK(sit_run("info --model " + std::string("bogus=1")).code == 2);
}

TEST_CASE("cli: training runs") {
  const fs::path d = workdir("train");
  const std::string common = "train " + kSmallModel + " " + kSmallData + " --iterations 4 --batch-size 3 --seed 9";

  SUBCASE("a zero learning rate saves the initial weights") {
    REQUIRE(sit_run(common + " --lr 0 --out " + (d / "lr0").string()).code == 0);
    CHECK(slurp(d / "lr0/checkpoints/init/weights.bin") == slurp(d / "lr0/checkpoints/final/weights.bin"));
  }

  SUBCASE("identical runs produce identical files") {
    REQUIRE(sit_run(common + " --out " + (d / "a").string()).code == 0);
    REQUIRE(sit_run(common + " --out " + (d / "b").string()).code == 0);
    for (const char* f : {"metrics.jsonl", "loss_history.tsv", "checkpoints/final/weights.bin",
                          "checkpoints/final/manifest.txt"}) {
      CHECK(slurp(d / "a" / f) == slurp(d / "b" / f));
    }
    CHECK(slurp(d / "a/checkpoints/init/weights.bin") != slurp(d / "a/checkpoints/final/weights.bin"));
    auto ma = timeless(d / "a/run_manifest.json");
    auto mb = timeless(d / "b/run_manifest.json");
    CHECK(ma["command"] == "train");
    CHECK(ma["seed"] == 9);
    CHECK(ma["config"]["train"]["lr"] == "0.001");
    CHECK(ma["outputs"].size() >= 3);
    ma.erase("argv");
    mb.erase("argv");
    ma.erase("outputs");
    mb.erase("outputs");
    // Only the output location may differ.
    CHECK(ma["config"]["train"]["checkpoint_dir"] == (d / "a/checkpoints").string());
    ma["config"]["train"].erase("checkpoint_dir");
    mb["config"]["train"].erase("checkpoint_dir");
    CHECK(ma == mb);
  }

  SUBCASE("the default output directory comes from the environment") {
    setenv("SIT_OUTPUT_DIR", (d / "env").string().c_str(), 1);
    CHECK(sit_run(common).code == 0);
    unsetenv("SIT_OUTPUT_DIR");
    CHECK(fs::exists(d / "env/metrics.jsonl"));
    CHECK(fs::exists(d / "env/run_manifest.json"));
  }

  SUBCASE("pretraining, warm start, evaluation and attention") {
    const std::string pre = "pretrain " + kSmallModel + " " + kSmallData + " --iterations 3 --batch-size 2";
    REQUIRE(sit_run(pre + " --out " + (d / "pre").string()).code == 0);
    CHECK(load_checkpoint_config(d / "pre/checkpoints/final").mpp);
    const auto r = sit_run(common + " --init " + (d / "pre/checkpoints/final").string() + " --out " +
                           (d / "ft").string());
    REQUIRE(r.code == 0);
    const auto pre_model = load_checkpoint(d / "pre/checkpoints/final");
    const auto ft_init = load_checkpoint(d / "ft/checkpoints/init");
    CHECK(ft_init.params.embed.weight == pre_model.params.embed.weight);
    CHECK_FALSE(ft_init.config.mpp);

    const std::string ck = (d / "ft/checkpoints/final").string();
    REQUIRE(sit_run("eval --checkpoint " + ck + " " + kSmallData + " --out " + (d / "ev").string()).code == 0);
    const std::string metrics = slurp(d / "ev/metrics.jsonl");
    CHECK(metrics.find("\"mae\"") != std::string::npos);
    CHECK(metrics.find("\"split\":\"eval\"") != std::string::npos);

    REQUIRE(sit_run("attend --checkpoint " + ck + " " + kSmallData + " --example 2 --out " + (d / "att").string())
                .code == 0);
    const TriMesh att = load_tri_mesh(d / "att/attention.surf");
    CHECK(att.channels.size() == 3);
    CHECK(fs::exists(d / "att/attention_manifest.json"));
    CHECK(sit_run("attend --checkpoint " + ck + " " + kSmallData + " --example 99 --out " + (d / "att2").string())
              .code == 2);
    CHECK(sit_run("eval --checkpoint " + (d / "nothing").string() + " " + kSmallData).code == 4);
  }

  SUBCASE("a non-finite loss exits with the numeric code") {
    const Icosphere ico = build_icosphere(3);
    Rng rng(2);
    const Dataset data = gen_synthetic(ico, 2, rng);
    save_mesh(with_field(ico.mesh, data.examples[0].field), d / "ex0.surf");
    save_mesh(with_field(ico.mesh, data.examples[1].field), d / "ex1.surf");
    save_patch_table(*data.table, d / "table.txt");
    std::ofstream(d / "data.txt") << "ex0.surf nan\nex1.surf 1.0\n";
    const auto r = sit_run("train " + kSmallModel + " --data " + (d / "data.txt").string() + " --table " +
                           (d / "table.txt").string() + " --iterations 3 --batch-size 2 --out " + (d / "nan").string());
    CHECK(r.code == 3);
    CHECK(r.out.find("iteration 1") != std::string::npos);
  }

  SUBCASE("usage errors") {
    CHECK(sit_run("train " + kSmallModel + " --iterations 2").code == 2);
    CHECK(sit_run("train --synthetic 2 --data x.txt").code == 2);
    CHECK(sit_run(common + " --optimizer rmsprop").code == 2);
    CHECK(sit_run(common + " --train bogus=1 --out " + (d / "u").string()).code == 2);
  }
}
