// sit: command-line driver for meshes, patching, resampling, training and
// attention export. Exit codes: 0 ok, 2 usage, 3 numeric failure, 4 I/O or
// validation failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>
#include <fmt/ostream.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sit/attention.hpp"
#include "sit/checkpoint.hpp"
#include "sit/error.hpp"
#include "sit/mesh_io.hpp"
#include "sit/metrics.hpp"
#include "sit/profiles.hpp"
#include "sit/synthetic.hpp"
#include "sit/text_io.hpp"
#include "sit/train.hpp"

#ifndef SIT_VERSION
#define SIT_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace sit;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitFailure = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a(std::istream& in, std::uint64_t h = 0xcbf29ce484222325ULL) {
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

/// FNV-1a of a file, or of every file under a directory in path order.
std::string content_hash(const fs::path& path) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::recursive_directory_iterator(path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot open '{}' for hashing", f.string()));
    h = fnv1a(in, h);
  }
  return fmt::format("fnv1a64:{:016x}", h);
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path default_output_dir() {
  if (const char* env = std::getenv("SIT_OUTPUT_DIR"); env && *env) return env;
  return "sit_out";
}

/// One per run: what was asked, what was read, what was written.
class RunManifest {
 public:
  RunManifest(std::string command, int argc, char** argv) : start_(std::chrono::steady_clock::now()) {
    doc_["command"] = std::move(command);
    doc_["argv"] = std::vector<std::string>(argv, argv + argc);
    doc_["config"] = json::object();
    doc_["seed"] = nullptr;
    doc_["inputs"] = json::array();
    doc_["outputs"] = json::array();
    doc_["started"] = utc_now();
  }

  void config(const std::string& section, const std::vector<std::pair<std::string, std::string>>& entries) {
    json& s = doc_["config"][section];
    for (const auto& [k, v] : entries) s[k] = v;
  }
  void seed(std::uint64_t s) { doc_["seed"] = s; }
  void input(const fs::path& p) { doc_["inputs"].push_back({{"path", p.string()}, {"hash", content_hash(p)}}); }
  void output(const fs::path& p) { doc_["outputs"].push_back(p.string()); }
  void set(const std::string& key, json value) { doc_[key] = std::move(value); }

  /// Writes the manifest to `path`, or to stderr when `path` is empty.
  void write(const fs::path& path) {
    doc_["finished"] = utc_now();
    doc_["wall_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    doc_["versions"] = {{"sit", SIT_VERSION},
                        {"eigen", fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION, EIGEN_MINOR_VERSION)},
                        {"compiler", __VERSION__},
                        {"checkpoint_format", "SITCHECKPOINT v1"}};
    if (path.empty()) {
      std::cerr << doc_.dump(2) << "\n";
      return;
    }
    auto out = open_output(path);
    out << doc_.dump(2) << "\n";
  }

 private:
  json doc_;
  std::chrono::steady_clock::time_point start_;
};

fs::path sidecar(const fs::path& out) { return fs::path(out.string() + ".run.json"); }

FeatureField field_from_quad(const QuadMesh& mesh) {
  FieldMatrix values(static_cast<Eigen::Index>(mesh.vertex_count()), static_cast<Eigen::Index>(mesh.channels.size()));
  std::vector<std::string> names;
  for (std::size_t c = 0; c < mesh.channels.size(); ++c) {
    names.push_back(mesh.channels[c].name);
    for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
      values(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(c)) = mesh.channels[c].values[v];
    }
  }
  return make_field(fingerprint(mesh), std::move(values), std::move(names));
}

FeatureField load_field(const fs::path& path) {
  const AnyMesh mesh = load_mesh(path);
  if (const auto* tri = std::get_if<TriMesh>(&mesh)) return field_from_mesh(*tri);
  return field_from_quad(std::get<QuadMesh>(mesh));
}

// ---------------------------------------------------------------------------
// Data sources shared by the learning commands.

struct DataOptions {
  int synthetic = 0;
  int ico_order = 6;
  std::uint64_t data_seed = 0;
  bool classification = false;
  fs::path manifest;
  fs::path table;
};

void add_data_options(CLI::App* cmd, DataOptions& d) {
  auto* syn = cmd->add_option("--synthetic", d.synthetic, "Generate this many synthetic examples")->check(CLI::PositiveNumber);
  cmd->add_option("--ico-order", d.ico_order, "Icosphere order of synthetic data")->check(CLI::Range(2, 8));
  cmd->add_option("--data-seed", d.data_seed, "Seed of the synthetic data");
  cmd->add_flag("--classification", d.classification, "Use the sign of the synthetic target as a binary label");
  auto* man = cmd->add_option("--data", d.manifest, "Dataset manifest: lines of 'mesh target [confound=x] [category=k]'");
  cmd->add_option("--table", d.table, "Patch table for --data");
  syn->excludes(man);
}

struct LoadedData {
  Dataset data;
  std::optional<Icosphere> ico;  // synthetic carrier
};

Dataset read_manifest(const fs::path& path, const fs::path& table_path, RunManifest& run) {
  if (table_path.empty()) throw UsageError("--data needs --table");
  Dataset d;
  d.table = std::make_shared<PatchTable>(load_patch_table(table_path));
  run.input(table_path);
  run.input(path);
  auto in = open_input(path);
  LineReader reader(in);
  std::vector<std::string_view> tok;
  while (reader.try_tokens(tok)) {
    if (tok.front().starts_with('#')) continue;
    if (tok.size() < 2) reader.fail("expected 'mesh target [confound=x] [category=k]'");
    Example e;
    fs::path mesh(tok[0]);
    if (mesh.is_relative()) mesh = path.parent_path() / mesh;
    e.target = reader.parse<double>(tok[1]);
    for (std::size_t i = 2; i < tok.size(); ++i) {
      if (tok[i].starts_with("confound=")) e.confound = reader.parse<double>(tok[i].substr(9));
      else if (tok[i].starts_with("category=")) e.category = reader.parse<int>(tok[i].substr(9));
      else reader.fail(fmt::format("unknown field '{}'", tok[i]));
    }
    e.field = load_field(mesh);
    run.input(mesh);
    d.examples.push_back(std::move(e));
  }
  if (d.examples.empty()) throw ValidationError(fmt::format("dataset manifest '{}' lists no examples", path.string()));
  d.validate();
  return d;
}

LoadedData load_data(const DataOptions& o, RunManifest& run) {
  LoadedData out;
  if (o.synthetic > 0) {
    out.ico = build_icosphere(o.ico_order);
    Rng rng(o.data_seed);
    out.data = gen_synthetic(*out.ico, o.synthetic, rng);
    if (o.classification) out.data = as_classification(std::move(out.data));
    run.set("data", {{"synthetic", o.synthetic},
                     {"ico_order", o.ico_order},
                     {"data_seed", o.data_seed},
                     {"classification", o.classification}});
  } else if (!o.manifest.empty()) {
    out.data = read_manifest(o.manifest, o.table, run);
  } else {
    throw UsageError("no data: give --synthetic N or --data MANIFEST");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model configuration from profile, settings file and flags.

struct ModelOptions {
  std::string profile = "sit-tiny-ico";
  fs::path config;
  std::vector<std::string> set;
  bool deconfound = false;
};

void add_model_options(CLI::App* cmd, ModelOptions& m) {
  cmd->add_option("--profile", m.profile, "Built-in model profile")
      ->check(CLI::IsMember(profile_names()))
      ->capture_default_str();
  cmd->add_option("--model-config", m.config, "Model settings file (key = value)");
  cmd->add_option("--model", m.set, "Model setting override key=value (repeatable)");
  cmd->add_flag("--deconfound", m.deconfound, "Add the confound embedding");
}

std::pair<std::string, std::string> split_setting(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw UsageError(fmt::format("expected key=value, got '{}'", text));
  return {trim(text.substr(0, eq)), trim(text.substr(eq + 1))};
}

SiTConfig model_config(const ModelOptions& m, RunManifest* run) {
  SiTConfig c = profile(m.profile);
  if (!m.config.empty()) {
    c = load_model_config(m.config, c);
    if (run) run->input(m.config);
  }
  for (const auto& s : m.set) {
    const auto [k, v] = split_setting(s);
    apply_model_setting(c, k, v);
  }
  if (m.deconfound) c.deconfound = true;
  return c;
}

/// Sequence shape and task come from the data.
void fit_to_data(SiTConfig& c, const Dataset& d) {
  c.patches = d.table->patch_count;
  c.vertices = d.table->patch_vertices;
  c.channels = d.channels();
  c.validate();
}

// ---------------------------------------------------------------------------
// Training options.

struct TrainOptions {
  fs::path config;
  std::vector<std::string> set;
  std::optional<double> lr;
  std::optional<long> iterations;
  std::optional<int> batch_size;
  std::optional<std::string> optimizer;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> sampler;
  std::optional<long> checkpoint_interval;
  bool augment = false;
  int workers = 1;
  fs::path init;
  fs::path out;
};

void add_train_options(CLI::App* cmd, TrainOptions& t) {
  cmd->add_option("--train-config", t.config, "Training settings file (key = value)");
  cmd->add_option("--train", t.set, "Training setting override key=value (repeatable)");
  cmd->add_option("--lr", t.lr, "Learning rate");
  cmd->add_option("--iterations", t.iterations, "Iteration budget");
  cmd->add_option("--batch-size", t.batch_size, "Examples per iteration");
  cmd->add_option("--optimizer", t.optimizer, "sgd or adam")->check(CLI::IsMember({"sgd", "adam"}));
  cmd->add_option("--seed", t.seed, "Training seed");
  cmd->add_option("--sampler", t.sampler, "shuffle or adaptive")->check(CLI::IsMember({"shuffle", "adaptive"}));
  cmd->add_option("--checkpoint-interval", t.checkpoint_interval, "Checkpoint every this many iterations");
  cmd->add_flag("--augment", t.augment, "Random rotation augmentation");
  cmd->add_option("--workers", t.workers, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--out", t.out, "Output directory (default $SIT_OUTPUT_DIR or ./sit_out)");
}

TrainConfig train_config(const TrainOptions& t, RunManifest& run) {
  TrainConfig c;
  if (!t.config.empty()) {
    c = load_train_config(t.config);
    run.input(t.config);
  }
  for (const auto& s : t.set) {
    const auto [k, v] = split_setting(s);
    apply_train_setting(c, k, v);
  }
  if (t.lr) c.lr = *t.lr;
  if (t.iterations) c.iterations = *t.iterations;
  if (t.batch_size) c.batch_size = *t.batch_size;
  if (t.optimizer) apply_train_setting(c, "optimizer", *t.optimizer);
  if (t.seed) c.seed = *t.seed;
  if (t.sampler) apply_train_setting(c, "sampler", *t.sampler);
  if (t.checkpoint_interval) c.checkpoint_interval = *t.checkpoint_interval;
  if (t.augment) c.augment = true;
  c.workers = t.workers;
  return c;
}

void write_history(const std::vector<double>& history, const fs::path& path) {
  auto out = open_output(path);
  out << "iteration\tloss\n";
  for (std::size_t i = 0; i < history.size(); ++i) fmt::print(out, "{}\t{:.17g}\n", i + 1, history[i]);
}

/// Copies every tensor of `source` whose name and shape match into `target`,
/// except the prediction head. Encoder tensors must all be present.
void warm_start(SiTModel<float>& target, const SiTModel<float>& source) {
  std::vector<std::pair<std::string, const Matrix<float>*>> src;
  for_each_parameter(source.params, [&](const std::string& n, const Matrix<float>& m) { src.emplace_back(n, &m); });
  for_each_parameter(target.params, [&](const std::string& name, Matrix<float>& m) {
    if (name.starts_with("head.")) return;
    for (const auto& [n, s] : src) {
      if (n != name) continue;
      if (s->rows() != m.rows() || s->cols() != m.cols()) {
        throw ValidationError(fmt::format("warm start: tensor '{}' is {}x{} in the checkpoint but {}x{} here", name,
                                          s->rows(), s->cols(), m.rows(), m.cols()));
      }
      m = *s;
      return;
    }
    if (!name.starts_with("mpp.") && !name.starts_with("confound.")) {
      throw ValidationError(fmt::format("warm start: checkpoint lacks tensor '{}'", name));
    }
  });
  if (target.config.deconfound && source.config.deconfound) target.confound = source.confound;
}

std::vector<MetricRecord> records(const Evaluation& e, const std::string& split, std::uint64_t seed) {
  std::vector<MetricRecord> out;
  for (const auto& [k, v] : e.metrics) out.push_back({k, v, split, seed});
  return out;
}

int run_learning(bool pretrain, const ModelOptions& mo, const DataOptions& dopt, const TrainOptions& to,
                 const fs::path& manifest_path, int argc, char** argv) {
  RunManifest run(pretrain ? "pretrain" : "train", argc, argv);
  const fs::path out = to.out.empty() ? default_output_dir() : to.out;
  const LoadedData loaded = load_data(dopt, run);
  const Dataset& data = loaded.data;

  SiTConfig mc = model_config(mo, &run);
  fit_to_data(mc, data);
  if (dopt.classification) {
    mc.head_kind = HeadKind::classification;
    mc.classes = 2;
  }
  if (pretrain) mc.mpp = true;
  TrainConfig tc = train_config(to, run);
  if (pretrain) tc.loss = LossKind::mpp;
  else if (tc.loss == LossKind::mse && mc.head_kind == HeadKind::classification) tc.loss = LossKind::cross_entropy;
  tc.checkpoint_dir = out / "checkpoints";
  tc.validate();
  mc.validate();
  run.config("model", model_config_entries(mc));
  run.config("train", train_config_entries(tc));
  run.seed(tc.seed);

  Rng init_rng = Rng(tc.seed).substream(0x1417);
  SiTModel<float> model = init_model<float>(mc, init_rng);
  if (!to.init.empty()) {
    run.input(to.init);
    warm_start(model, load_checkpoint(to.init));
  }
  if (mc.deconfound && !model.confound.initialized) initialize_confound_stats(model.confound, data.confounds());

  save_checkpoint(model, tc.checkpoint_dir / "init");
  std::optional<RotationAugmentation> aug;
  TrainContext ctx;
  if (tc.augment) {
    if (!loaded.ico) throw UsageError("--augment needs icosphere data (use --synthetic)");
    aug.emplace(*loaded.ico, tc.angle_cap);
    ctx.augmentation = &*aug;
  }
  const long every = std::max(1L, tc.iterations / 10);
  ctx.on_iteration = [&](long it, double loss) {
    if (it % every == 0 || it == tc.iterations) spdlog::info("iteration {} loss {:.6g}", it, loss);
  };
  const auto history = pretrain ? pretrain_mpp(model, data, tc, ctx) : train_loop(model, data, tc, ctx);

  fs::create_directories(out);
  write_history(history, out / "loss_history.tsv");
  run.output(out / "loss_history.tsv");
  run.output(tc.checkpoint_dir);
  std::vector<MetricRecord> metrics;
  if (pretrain) {
    metrics.push_back({"mpp_loss_first", history.front(), "train", tc.seed});
    metrics.push_back({"mpp_loss_last", history.back(), "train", tc.seed});
  } else {
    metrics = records(evaluate(model, data, tc.workers), "train", tc.seed);
  }
  write_metrics(metrics, out / "metrics.jsonl");
  run.output(out / "metrics.jsonl");
  for (const auto& m : metrics) fmt::print("{} {:.6g}\n", m.metric, m.value);
  run.write(manifest_path.empty() ? out / "run_manifest.json" : manifest_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surface vision transformer toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", SIT_VERSION);
  fs::path manifest_path;
  bool quiet = false;
  app.add_option("--manifest", manifest_path, "Where to write the run manifest")->expected(1);
  app.add_flag("-q,--quiet", quiet, "Only warnings and errors on stderr");

  // icosphere
  auto* ico_cmd = app.add_subcommand("icosphere", "Write an icosphere mesh");
  int ico_order = 0;
  fs::path ico_out;
  ico_cmd->add_option("--order", ico_order, "Subdivision order")->required();
  ico_cmd->add_option("--out", ico_out, "Output mesh")->required();

  // patch
  auto* patch_cmd = app.add_subcommand("patch", "Build a patch table");
  fs::path p_fine, p_coarse, p_control, p_pairs, p_out;
  auto* opt_fine = patch_cmd->add_option("--fine", p_fine, "Fine icosphere mesh");
  auto* opt_coarse = patch_cmd->add_option("--coarse", p_coarse, "Coarse icosphere mesh");
  auto* opt_control = patch_cmd->add_option("--control", p_control, "Quad control mesh (subdivided twice)");
  auto* opt_pairs = patch_cmd->add_option("--pairs", p_pairs, "Element pairing file");
  patch_cmd->add_option("--out", p_out, "Output patch table")->required();
  opt_fine->needs(opt_coarse);
  opt_coarse->needs(opt_fine);
  opt_control->excludes(opt_fine);
  opt_pairs->needs(opt_control);

  // resample
  auto* res_cmd = app.add_subcommand("resample", "Resample a field between spherical meshes");
  fs::path r_src, r_dst, r_field, r_out;
  std::string r_rotate;
  res_cmd->add_option("--src", r_src, "Source mesh")->required();
  res_cmd->add_option("--dst", r_dst, "Destination mesh")->required();
  res_cmd->add_option("--field", r_field, "Mesh file whose channels are the field on --src")->required();
  res_cmd->add_option("--out", r_out, "Destination mesh with the resampled channels")->required();
  res_cmd->add_option("--rotate", r_rotate, "Rotate the field first, e.g. x:10");

  // learning
  ModelOptions pre_m, train_m, info_m;
  DataOptions pre_d, train_d, eval_d, att_d;
  TrainOptions pre_t, train_t;
  auto* pre_cmd = app.add_subcommand("pretrain", "Masked patch prediction pretraining");
  add_model_options(pre_cmd, pre_m);
  add_data_options(pre_cmd, pre_d);
  add_train_options(pre_cmd, pre_t);
  auto* train_cmd = app.add_subcommand("train", "Supervised training");
  add_model_options(train_cmd, train_m);
  add_data_options(train_cmd, train_d);
  add_train_options(train_cmd, train_t);
  train_cmd->add_option("--init", train_t.init, "Checkpoint whose encoder initialises the model");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  fs::path e_ckpt, e_out;
  std::string e_split = "eval";
  int e_workers = 1;
  eval_cmd->add_option("--checkpoint", e_ckpt, "Checkpoint directory")->required();
  add_data_options(eval_cmd, eval_d);
  eval_cmd->add_option("--split", e_split, "Split label in the metrics file")->capture_default_str();
  eval_cmd->add_option("--workers", e_workers, "Worker threads")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--out", e_out, "Output directory");

  auto* att_cmd = app.add_subcommand("attend", "Export attention rollout maps");
  fs::path a_ckpt, a_mesh, a_out;
  std::size_t a_example = 0;
  std::vector<int> a_heads;
  int a_first = 0, a_last = -1;
  std::optional<double> a_confound;
  att_cmd->add_option("--checkpoint", a_ckpt, "Checkpoint directory")->required();
  add_data_options(att_cmd, att_d);
  att_cmd->add_option("--example", a_example, "Example index")->capture_default_str();
  att_cmd->add_option("--mesh", a_mesh, "Carrier mesh for --data");
  att_cmd->add_option("--heads", a_heads, "Heads to export individually (default all)");
  att_cmd->add_option("--first-layer", a_first, "First layer of the rollout")->capture_default_str();
  att_cmd->add_option("--last-layer", a_last, "Last layer of the rollout (-1: final)")->capture_default_str();
  att_cmd->add_option("--confound", a_confound, "Confound value for deconfounded models");
  att_cmd->add_option("--out", a_out, "Output directory");

  auto* info_cmd = app.add_subcommand("info", "Print a configuration and its parameter count");
  add_model_options(info_cmd, info_m);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);
  spdlog::set_pattern("%^%l%$: %v");

  try {
    if (*ico_cmd) {
      RunManifest run("icosphere", argc, argv);
      const Icosphere ico = build_icosphere(ico_order);
      save_mesh(ico.mesh, ico_out);
      run.output(ico_out);
      run.set("result", {{"vertices", ico.mesh.vertex_count()}, {"faces", ico.mesh.face_count()}});
      fmt::print("{} vertices {} faces\n", ico.mesh.vertex_count(), ico.mesh.face_count());
      run.write(manifest_path.empty() ? sidecar(ico_out) : manifest_path);
    } else if (*patch_cmd) {
      RunManifest run("patch", argc, argv);
      PatchTable table;
      if (!p_fine.empty()) {
        table = build_ico_patch_table(load_tri_mesh(p_fine), load_tri_mesh(p_coarse));
        run.input(p_fine);
        run.input(p_coarse);
      } else if (!p_control.empty()) {
        const QuadMesh control = load_quad_mesh(p_control);
        const QuadMesh fine = catmull_clark(catmull_clark(control));
        run.input(p_control);
        std::optional<std::vector<ElementPair>> pairs;
        if (!p_pairs.empty()) {
          pairs = load_pairing(p_pairs);
          run.input(p_pairs);
        }
        table = build_quad_patch_table(control, fine, pairs);
        const fs::path fine_out = fs::path(p_out.string() + ".fine.surf");
        save_mesh(fine, fine_out);
        run.output(fine_out);
      } else {
        throw UsageError("patch needs --fine and --coarse, or --control");
      }
      save_patch_table(table, p_out);
      run.output(p_out);
      run.set("result", {{"patches", table.patch_count}, {"vertices", table.patch_vertices}});
      fmt::print("{} patches of {} vertices\n", table.patch_count, table.patch_vertices);
      run.write(manifest_path.empty() ? sidecar(p_out) : manifest_path);
    } else if (*res_cmd) {
      RunManifest run("resample", argc, argv);
      const TriMesh src = load_tri_mesh(r_src);
      const TriMesh dst = load_tri_mesh(r_dst);
      FeatureField field = field_from_mesh(load_tri_mesh(r_field));
      run.input(r_src);
      run.input(r_dst);
      run.input(r_field);
      if (field.vertex_count() != static_cast<Eigen::Index>(src.vertex_count())) {
        throw ValidationError(fmt::format("--field has {} vertices but --src has {}", field.vertex_count(),
                                          src.vertex_count()));
      }
      field.carrier_id = fingerprint(src);
      ResampleTable table;
      if (r_rotate.empty()) {
        table = build_resample_table(src, dst);
      } else {
        const auto colon = r_rotate.find(':');
        if (colon == std::string::npos) throw UsageError("--rotate expects axis:degrees");
        const Axis axis = parse_axis(r_rotate.substr(0, colon));
        const double degrees = parse_setting<double>("--rotate", r_rotate.substr(colon + 1));
        // f_rot(v) = f(R^-1 v): look up each destination vertex rotated back.
        const Eigen::Matrix3d inv = rotation_matrix(axis, degrees).transpose();
        std::vector<Eigen::Vector3d> points;
        points.reserve(dst.vertex_count());
        for (const auto& v : dst.vertices) points.push_back(inv * v.cast<double>());
        table = build_resample_table(src, points, fingerprint(dst));
      }
      const FeatureField out = apply_resample(field, table);
      save_mesh(with_field(dst, out), r_out);
      run.output(r_out);
      fmt::print("{} vertices x {} channels\n", out.vertex_count(), out.channel_count());
      run.write(manifest_path.empty() ? sidecar(r_out) : manifest_path);
    } else if (*pre_cmd) {
      return run_learning(true, pre_m, pre_d, pre_t, manifest_path, argc, argv);
    } else if (*train_cmd) {
      return run_learning(false, train_m, train_d, train_t, manifest_path, argc, argv);
    } else if (*eval_cmd) {
      RunManifest run("eval", argc, argv);
      const fs::path out = e_out.empty() ? default_output_dir() : e_out;
      const SiTModel<float> model = load_checkpoint(e_ckpt);
      run.input(e_ckpt);
      run.config("model", model_config_entries(model.config));
      const LoadedData loaded = load_data(eval_d, run);
      const Evaluation ev = evaluate(model, loaded.data, e_workers);
      const auto metrics = records(ev, e_split, eval_d.data_seed);
      write_metrics(metrics, out / "metrics.jsonl");
      run.output(out / "metrics.jsonl");
      {
        auto pred = open_output(out / "predictions.tsv");
        pred << "index\tprediction\ttarget\n";
        for (std::size_t i = 0; i < ev.predictions.size(); ++i) {
          fmt::print(pred, "{}\t{:.9g}\t{:.9g}\n", i, ev.predictions[i], ev.targets[i]);
        }
      }
      run.output(out / "predictions.tsv");
      for (const auto& m : metrics) fmt::print("{} {:.6g}\n", m.metric, m.value);
      run.write(manifest_path.empty() ? out / "run_manifest.json" : manifest_path);
    } else if (*att_cmd) {
      RunManifest run("attend", argc, argv);
      const fs::path out = a_out.empty() ? default_output_dir() : a_out;
      const SiTModel<float> model = load_checkpoint(a_ckpt);
      run.input(a_ckpt);
      const LoadedData loaded = load_data(att_d, run);
      if (a_example >= loaded.data.size()) {
        throw UsageError(fmt::format("--example {} but the dataset has {} examples", a_example, loaded.data.size()));
      }
      TriMesh carrier;
      if (!a_mesh.empty()) {
        carrier = load_tri_mesh(a_mesh);
        run.input(a_mesh);
      } else if (loaded.ico) {
        carrier = loaded.ico->mesh;
      } else {
        throw UsageError("attend with --data needs --mesh");
      }
      ExportOptions opts;
      opts.heads = a_heads;
      opts.layers = {a_first, a_last};
      opts.confound = a_confound ? a_confound : loaded.data.examples[a_example].confound;
      const auto res = export_maps(model, loaded.data.sequence(a_example), *loaded.data.table, carrier, out, opts);
      run.output(res.mesh_path);
      run.output(res.manifest_path);
      fmt::print("wrote {} ({})\n", res.mesh_path.string(), fmt::join(res.channels, ", "));
      run.write(manifest_path.empty() ? out / "run_manifest.json" : manifest_path);
    } else if (*info_cmd) {
      RunManifest run("info", argc, argv);
      const SiTConfig c = model_config(info_m, &run);
      c.validate();
      run.config("model", model_config_entries(c));
      const std::size_t count = parameter_count(c);
      run.set("result", {{"parameters", count}});
      for (const auto& [k, v] : model_config_entries(c)) fmt::print("{} = {}\n", k, v);
      fmt::print("parameters = {}\n", count);
      run.write(manifest_path);
    }
  } catch (const UsageError& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return kExitUsage;
  } catch (const NumericError& e) {
    fmt::print(stderr, "{}\n", e.what());
    return kExitNumeric;
  } catch (const Error& e) {
    fmt::print(stderr, "{}\n", e.what());
    return (e.kind() == ErrorKind::configuration || e.kind() == ErrorKind::argument) ? kExitUsage : kExitFailure;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitFailure;
  }
  return 0;
}
