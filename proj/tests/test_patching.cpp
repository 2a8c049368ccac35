#include <doctest.h>

#include <set>
#include <sstream>

#include "oracles.hpp"
#include "sit/error.hpp"
#include "sit/patching.hpp"

using namespace sit;

namespace {

FeatureField random_field(const std::string& carrier, std::size_t vertices, int channels, std::uint64_t seed) {
  Rng rng(seed);
  FieldMatrix v(static_cast<Eigen::Index>(vertices), channels);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(rng.normal());
  return make_field(carrier, v);
}

const Icosphere& ico6() {
  static const Icosphere ico = build_icosphere(6);
  return ico;
}

const PatchTable& ico_table() {
  static const PatchTable table = build_ico_patch_table(ico6(), build_icosphere(2));
  return table;
}

}  // namespace

TEST_CASE("ico6 / ico2 patch table") {
  const auto& t = ico_table();
  CHECK(t.patch_count == 320);
  CHECK(t.patch_vertices == 153);
  CHECK(t.indices.size() == 48960);
  const std::set<std::int32_t> all(t.indices.begin(), t.indices.end());
  CHECK(all.size() == 40962);

  const auto hist = oracle::multiplicity_histogram(t.indices, 40962);
  CHECK(hist.size() == 4);
  CHECK(hist.at(1) == 33600);
  CHECK(hist.at(2) == 7200);
  CHECK(hist.at(5) == 12);
  CHECK(hist.at(6) == 150);
  // 48960 = 40962 + 7200 + 48 + 750
  CHECK(hist.at(2) * 1 + hist.at(5) * 4 + hist.at(6) * 5 == 7200 + 48 + 750);
  CHECK(vertex_multiplicity(t) == [&] {
    std::vector<int> m(40962, 0);
    for (auto i : t.indices) ++m[static_cast<std::size_t>(i)];
    return m;
  }());
}

TEST_CASE("ico patch rows follow the triangular grid") {
  const auto coarse = build_icosphere(2);
  const auto& fine = ico6();
  const auto& t = ico_table();
  const int n = 16;
  for (int f = 0; f < t.patch_count; f += 37) {
    const auto row = t.row(f);
    const auto& c = coarse.mesh.faces[static_cast<std::size_t>(f)];
    CHECK(row[0] == c[0]);
    CHECK(row[static_cast<std::size_t>(n * (n + 1) / 2)] == c[1]);
    CHECK(row.back() == c[2]);
    // Row r, column s sits at A + r/n (B - A) + s/n (C - B) before projection.
    const Eigen::Vector3d a = coarse.mesh.vertices[c[0]].cast<double>();
    const Eigen::Vector3d b = coarse.mesh.vertices[c[1]].cast<double>();
    const Eigen::Vector3d cc = coarse.mesh.vertices[c[2]].cast<double>();
    std::size_t k = 0;
    for (int r = 0; r <= n; ++r) {
      for (int s = 0; s <= r; ++s, ++k) {
        const Eigen::Vector3d planar = a + (double(r) / n) * (b - a) + (double(s) / n) * (cc - b);
        const Eigen::Vector3d got = fine.mesh.vertices[row[k]].cast<double>();
        CHECK(got.dot(planar.normalized()) > 0.9999);
      }
    }
  }
}

TEST_CASE("ico patching rejects meshes without common lineage") {
  auto other = build_icosphere(4).mesh;
  std::swap(other.faces[0], other.faces[100]);
  CHECK_THROWS_AS(build_ico_patch_table(other, build_icosphere(2).mesh), StructuralError);
  auto shifted = build_icosphere(4).mesh;
  shifted.vertices[0] = shifted.vertices[1];
  CHECK_THROWS_AS(build_ico_patch_table(shifted, build_icosphere(2).mesh), StructuralError);
  CHECK_THROWS_AS(build_ico_patch_table(build_icosphere(2), build_icosphere(3)), StructuralError);
}

TEST_CASE("quad element grids") {
  const auto control = make_quad_grid(1, 1);
  const auto fine = catmull_clark(catmull_clark(control));
  const auto t = build_quad_patch_table(control, fine);
  CHECK(t.patch_count == 1);
  CHECK(t.patch_vertices == 25);
  const auto row = t.row(0);
  CHECK(std::set<std::int32_t>(row.begin(), row.end()).size() == 25);
  CHECK(row[0] == control.faces[0][0]);
  CHECK(row[4] == control.faces[0][1]);
  CHECK(row[24] == control.faces[0][2]);
  CHECK(row[20] == control.faces[0][3]);
  // Along a row the position moves monotonically from corner 0 towards corner 1.
  const Eigen::Vector3f dir = control.vertices[control.faces[0][1]] - control.vertices[control.faces[0][0]];
  const Eigen::Vector3f up = control.vertices[control.faces[0][3]] - control.vertices[control.faces[0][0]];
  for (int r = 0; r < 5; ++r) {
    for (int s = 0; s < 4; ++s) {
      CHECK((fine.vertices[row[r * 5 + s + 1]] - fine.vertices[row[r * 5 + s]]).dot(dir) > 0.0f);
      CHECK((fine.vertices[row[(s + 1) * 5 + r]] - fine.vertices[row[s * 5 + r]]).dot(up) > 0.0f);
    }
  }
}

TEST_CASE("paired quad patches") {
  const auto control = make_quad_grid(2, 2);
  const auto fine = catmull_clark(catmull_clark(control));
  const std::vector<ElementPair> pairs = {{0, 1}, {2, 3}};
  const auto t = build_quad_patch_table(control, fine, pairs);
  CHECK(t.patch_count == 2);
  CHECK(t.patch_vertices == 50);
  CHECK(std::set<std::int32_t>(t.indices.begin(), t.indices.end()).size() == fine.vertex_count());
  CHECK(fine.vertex_count() == 81);

  CHECK_THROWS_AS(build_quad_patch_table(control, fine, std::vector<ElementPair>{{0, 1}, {1, 2}}), ValidationError);
  try {
    (void)build_quad_patch_table(control, fine, std::vector<ElementPair>{{0, 1}});
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("2, 3") != std::string::npos);
  }
  CHECK_THROWS_AS(build_quad_patch_table(control, fine, std::vector<ElementPair>{{0, 1}, {2, 9}}), ValidationError);
}

TEST_CASE("354 elements pair into 177 rows of 50") {
  const auto control = make_quad_grid(2, 177);
  const auto fine = catmull_clark(catmull_clark(control));
  std::vector<ElementPair> pairs;
  for (std::int32_t i = 0; i < 177; ++i) pairs.emplace_back(2 * i, 2 * i + 1);
  const auto t = build_quad_patch_table(control, fine, pairs);
  CHECK(t.patch_count == 177);
  CHECK(t.patch_vertices == 50);
}

TEST_CASE("sequence extraction") {
  const auto& t = ico_table();
  const auto field = random_field(t.carrier_id, 40962, 4, 1);
  const auto seq = extract_sequence(field, t);
  CHECK(seq.data.rows() == 320);
  CHECK(seq.data.cols() == 612);
  for (int r = 0; r < 320; r += 31) {
    for (int k = 0; k < 153; k += 7) {
      for (int c = 0; c < 4; ++c) CHECK(seq.data(r, k * 4 + c) == field.values(t.row(r)[static_cast<std::size_t>(k)], c));
    }
  }

  const auto constant = make_field(t.carrier_id, FieldMatrix::Constant(40962, 4, 7.5f));
  CHECK((extract_sequence(constant, t).data.array() == 7.5f).all());

  const auto wide = random_field(t.carrier_id, 40962, 115, 2);
  CHECK(extract_sequence(wide, t).data.cols() == 17595);

  CHECK_THROWS_AS(extract_sequence(random_field("other", 40962, 4, 1), t), ShapeError);
  CHECK_THROWS_AS(extract_sequence(random_field(t.carrier_id, 100, 4, 1), t), ShapeError);
}

TEST_CASE("gather and scatter are consistent") {
  const auto ico = build_icosphere(4);
  const auto t = build_ico_patch_table(ico, build_icosphere(2));
  const auto field = random_field(t.carrier_id, ico.mesh.vertex_count(), 3, 5);
  const auto seq = extract_sequence(field, t);
  const auto back = scatter_sequence(seq, t);
  CHECK((back.values - field.values).cwiseAbs().maxCoeff() < 1e-6f);
  CHECK((extract_sequence(back, t).data - seq.data).cwiseAbs().maxCoeff() < 1e-6f);

  // An inconsistent sequence (different values on shared vertices) becomes
  // consistent after one scatter, and stays fixed afterwards.
  PatchSequence noisy = seq;
  Rng rng(3);
  for (Eigen::Index i = 0; i < noisy.data.size(); ++i) noisy.data.data()[i] += static_cast<float>(rng.normal());
  const auto once = extract_sequence(scatter_sequence(noisy, t), t);
  const auto twice = extract_sequence(scatter_sequence(once, t), t);
  CHECK((once.data - twice.data).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("channel permutation permutes sequence columns blockwise") {
  const auto ico = build_icosphere(3);
  const auto t = build_ico_patch_table(ico, build_icosphere(2));
  const auto field = random_field(t.carrier_id, ico.mesh.vertex_count(), 3, 8);
  const std::array<int, 3> perm = {2, 0, 1};
  FieldMatrix permuted(field.values.rows(), 3);
  for (int c = 0; c < 3; ++c) permuted.col(c) = field.values.col(perm[c]);
  const auto a = extract_sequence(field, t);
  const auto b = extract_sequence(make_field(t.carrier_id, permuted), t);
  for (int k = 0; k < t.patch_vertices; ++k) {
    for (int c = 0; c < 3; ++c) CHECK(b.data.col(k * 3 + c) == a.data.col(k * 3 + perm[c]));
  }
}

TEST_CASE("patch tables and pairings round-trip through text") {
  const auto t = build_ico_patch_table(build_icosphere(4), build_icosphere(2));
  std::stringstream s;
  write_patch_table(s, t);
  const auto back = read_patch_table(s);
  CHECK(back.patch_count == t.patch_count);
  CHECK(back.patch_vertices == t.patch_vertices);
  CHECK(back.indices == t.indices);

  std::stringstream header("PATCHTABLE v1 2 3\n0 1 2\n3 4\n");
  CHECK_THROWS_AS(read_patch_table(header), ParseError);

  std::stringstream pairs("0 1\n2 3\n");
  CHECK(read_pairing(pairs) == std::vector<ElementPair>{{0, 1}, {2, 3}});
}
