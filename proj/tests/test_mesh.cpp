#include <doctest.h>

#include "cvaenf/hierarchy.hpp"
#include "cvaenf/mesh_io.hpp"
#include "cvaenf/primitives.hpp"
#include "scratch.hpp"

#include <Eigen/Eigenvalues>

#include <fstream>
#include <numbers>
#include <random>

using namespace cvaenf;
using std::numbers::pi;

namespace {

Positions random_positions(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Positions p(n, 3);
  for (Index i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) p(i, c) = g(rng);
  return p;
}

Eigen::MatrixXd dense(const SparseOperator& op) { return Eigen::MatrixXd(op); }

}  // namespace

TEST_CASE("topology rejects bad faces and derives sorted unique edges") {
  CHECK_THROWS_AS(TriangleTopology(3, {{0, 1, 3}}), MeshError);
  CHECK_THROWS_AS(TriangleTopology(3, {{0, 1, 1}}), MeshError);
  CHECK_THROWS_AS(TriangleTopology(3, {{-1, 1, 2}}), MeshError);
  const TriangleTopology t(4, {{0, 1, 2}, {2, 1, 3}});
  const std::vector<Edge> expected = {{0, 1}, {0, 2}, {1, 2}, {1, 3}, {2, 3}};
  CHECK(t.edges() == expected);
  CHECK(t == TriangleTopology(4, {{0, 1, 2}, {2, 1, 3}}));
  CHECK_THROWS_AS(SurfaceMesh(std::make_shared<const TriangleTopology>(t), Positions::Zero(3, 3)), MeshError);
}

TEST_CASE("unit cube volume is exactly 1") {
  const SurfaceMesh cube = make_cube(1.0);
  CHECK(cube.n_vertices() == 8);
  CHECK(cube.topology().n_faces() == 12);
  CHECK(enclosed_volume(cube) == 1.0);
}

TEST_CASE("icosphere volumes approach the sphere") {
  const SurfaceMesh ico0 = make_icosphere(1.0, 0);
  CHECK(ico0.n_vertices() == 12);
  CHECK(ico0.topology().n_faces() == 20);
  CHECK(enclosed_volume(make_icosphere(1.0, 4)) == doctest::Approx(4.0 * pi / 3.0).epsilon(0.01));
  CHECK(enclosed_volume(make_icosphere(2.0, 4)) == doctest::Approx(32.0 * pi / 3.0).epsilon(0.01));
  CHECK_THROWS(make_icosphere(1.0, 7));
}

TEST_CASE("enclosed volume is translation invariant and cubic in scale") {
  const SurfaceMesh ico = make_icosphere(1.3, 2);
  const double v = enclosed_volume(ico);
  Positions moved = ico.positions();
  moved.rowwise() += Eigen::RowVector3d(100, -50, 3);
  CHECK(std::abs(enclosed_volume(moved, ico.topology()) - v) / v < 1e-9);
  for (double s : {0.1, 2.5, 17.0}) {
    const double vs = enclosed_volume(Positions(ico.positions() * s), ico.topology());
    CHECK(std::abs(vs - s * s * s * v) / (s * s * s * v) < 1e-9);
  }
  CHECK_THROWS_AS(enclosed_volume(Positions::Zero(3, 3), TriangleTopology(3, {})), MeshError);
}

TEST_CASE("myocardial volume of nested solids") {
  CHECK(myocardial_volume(make_cube(2.0), make_cube(1.0)) == 7.0);
  const SurfaceMesh ico = make_icosphere(1.0, 3);
  CHECK(myocardial_volume(ico, ico) == 0.0);
  CHECK(myocardial_volume(make_icosphere(2.0, 4), make_icosphere(1.0, 4)) ==
        doctest::Approx(4.0 * pi / 3.0 * 7.0).epsilon(0.01));
}

TEST_CASE("mean vertex distance") {
  const SurfaceMesh ico = make_icosphere(1.0, 1);
  CHECK(mean_vertex_distance(ico, ico) == 0.0);
  Positions shifted = ico.positions();
  shifted.col(0).array() += 3.0;
  CHECK(mean_vertex_distance(ico, ico.with_positions(shifted)) == 3.0);

  const Positions a = random_positions(10, 1), b = random_positions(10, 2), c = random_positions(10, 3);
  double brute = 0;
  for (Index i = 0; i < 10; ++i) brute += std::sqrt((a.row(i) - b.row(i)).squaredNorm());
  CHECK(mean_vertex_distance(a, b) == doctest::Approx(brute / 10).epsilon(1e-14));
  CHECK(mean_vertex_distance(a, b) == mean_vertex_distance(b, a));
  CHECK(mean_vertex_distance(a, c) <= mean_vertex_distance(a, b) + mean_vertex_distance(b, c) + 1e-12);
  CHECK_THROWS_AS(mean_vertex_distance(ico, make_icosphere(1.0, 0)), MeshError);
}

TEST_CASE("triangle inequality holds on random triples") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Positions a = random_positions(20, 3 * s), b = random_positions(20, 3 * s + 1),
                    c = random_positions(20, 3 * s + 2);
    CHECK(mean_vertex_distance(a, c) <= mean_vertex_distance(a, b) + mean_vertex_distance(b, c) + 1e-12);
  }
}

TEST_CASE("scaled Laplacian closed forms") {
  // With lambda_max = 2 the rescaling gives L - I = -D^-1/2 A D^-1/2.
  SUBCASE("triangle graph") {
    const TriangleTopology t(3, {{0, 1, 2}});
    const Eigen::MatrixXd L = dense(scaled_laplacian(t));
    for (int i = 0; i < 3; ++i) {
      CHECK(L(i, i) == doctest::Approx(0.0));
      for (int j = 0; j < 3; ++j)
        if (i != j) CHECK(L(i, j) == doctest::Approx(-0.5));
    }
  }
  SUBCASE("isolated vertex gives a zero row") {
    const TriangleTopology t(4, {{0, 1, 2}});
    const Eigen::MatrixXd L = dense(scaled_laplacian(t));
    CHECK(L.row(3).norm() == 0.0);
    CHECK(L.col(3).norm() == 0.0);
  }
  SUBCASE("two triangles sharing an edge") {
    const TriangleTopology t(4, {{0, 1, 2}, {2, 1, 3}});
    const Eigen::MatrixXd L = dense(scaled_laplacian(t));
    // degrees: 0:2, 1:3, 2:3, 3:2
    CHECK(L(0, 1) == doctest::Approx(-1.0 / std::sqrt(6.0)));
    CHECK(L(1, 2) == doctest::Approx(-1.0 / 3.0));
    CHECK(L(0, 3) == 0.0);
  }
}

TEST_CASE("scaled Laplacian is symmetric with spectral radius at most 1") {
  for (int s : {0, 1, 2}) {
    const SurfaceMesh ico = make_icosphere(1.0, s);
    const Eigen::MatrixXd L = dense(scaled_laplacian(ico.topology()));
    CHECK((L - L.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::VectorXd v = Eigen::VectorXd::LinSpaced(L.rows(), 1.0, 2.0);
    double rho = 0;
    for (int it = 0; it < 500; ++it) {
      const Eigen::VectorXd w = L * v;
      rho = w.norm() / v.norm();
      v = w / w.norm();
    }
    CHECK(rho <= 1.0 + 1e-9);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(L);
    CHECK(eig.eigenvalues().cwiseAbs().maxCoeff() <= 1.0 + 1e-9);
  }
}

TEST_CASE("sampling hierarchy on a 642-vertex icosphere") {
  const SurfaceMesh ico = make_icosphere(1.0, 3);
  REQUIRE(ico.n_vertices() == 642);
  const SamplingHierarchy h = build_sampling_hierarchy(ico.topology_ptr(), ico.positions(), 4, 2);
  REQUIRE(h.levels.size() == 3);
  CHECK(std::abs(h.n_vertices(1) - 161) <= 1);
  CHECK(std::abs(h.n_vertices(2) - 41) <= 1);
  for (Index k = 0; k < 2; ++k) {
    const MeshLevel& lv = h.levels[k];
    CHECK(lv.down.rows() == h.n_vertices(k + 1));
    CHECK(lv.down.cols() == h.n_vertices(k));
    CHECK(lv.up.rows() == lv.down.cols());
    CHECK(lv.up.cols() == lv.down.rows());
    const Eigen::MatrixXd D = dense(lv.down), U = dense(lv.up);
    for (Index r = 0; r < D.rows(); ++r) {
      CHECK((D.row(r).array() != 0).count() == 1);
      CHECK(D.row(r).sum() == 1.0);
    }
    for (Index r = 0; r < U.rows(); ++r) {
      CHECK((U.row(r).array() != 0).count() <= 3);
      CHECK(std::abs(U.row(r).sum() - 1.0) < 1e-9);
    }
  }
  const Positions round_trip = h.levels[0].up * (h.levels[0].down * ico.positions());
  const double edge = mean_edge_length(ico.positions(), ico.topology());
  CHECK((round_trip - ico.positions()).rowwise().norm().maxCoeff() < edge);
}

TEST_CASE("sampling hierarchy preconditions and determinism") {
  const SurfaceMesh ico = make_icosphere(1.0, 1);
  CHECK_THROWS_AS(build_sampling_hierarchy(ico.topology_ptr(), ico.positions(), 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(build_sampling_hierarchy(ico.topology_ptr(), ico.positions(), 4, 3), MeshError);
  const SamplingHierarchy a = build_sampling_hierarchy(ico.topology_ptr(), ico.positions(), 2, 2);
  const SamplingHierarchy b = build_sampling_hierarchy(ico.topology_ptr(), ico.positions(), 2, 2);
  for (std::size_t k = 0; k < a.levels.size(); ++k) {
    CHECK(*a.levels[k].topology == *b.levels[k].topology);
    CHECK(dense(a.levels[k].up) == dense(b.levels[k].up));
  }
}

TEST_CASE("hierarchy save and load round trip") {
  const SurfaceMesh ico = make_icosphere(1.0, 2);
  const SamplingHierarchy h = build_sampling_hierarchy(ico.topology_ptr(), ico.positions(), 4, 2);
  const auto dir = scratch::dir("hierarchy");
  save_hierarchy(h, dir);
  const SamplingHierarchy g = load_hierarchy(dir);
  REQUIRE(g.levels.size() == h.levels.size());
  CHECK(g.factor == h.factor);
  for (std::size_t k = 0; k < h.levels.size(); ++k) {
    CHECK(*g.levels[k].topology == *h.levels[k].topology);
    CHECK((dense(g.levels[k].down) - dense(h.levels[k].down)).norm() == 0.0);
    CHECK((dense(g.levels[k].up) - dense(h.levels[k].up)).norm() == 0.0);
    CHECK((dense(g.levels[k].scaled_laplacian) - dense(h.levels[k].scaled_laplacian)).norm() == 0.0);
  }
}

TEST_CASE("mesh files round trip") {
  const auto dir = scratch::dir("mesh_io");
  for (const char* name : {"cube.off", "cube.ply"}) {
    SurfaceMesh cube = make_cube(1.0);
    cube = cube.with_positions(cube.positions() + random_positions(8, 4) * 0.01);
    save_mesh(cube, dir / name);
    const SurfaceMesh back = load_mesh(dir / name);
    CHECK(back.topology() == cube.topology());
    CHECK((back.positions() - cube.positions()).cwiseAbs().maxCoeff() < 1e-6);
    const SurfaceMesh shared = load_mesh(dir / name, cube.topology_ptr());
    CHECK(shared.topology_ptr() == cube.topology_ptr());
  }
}

TEST_CASE("malformed mesh files are rejected") {
  const auto dir = scratch::dir("mesh_bad");
  std::ofstream(dir / "oob.off") << "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n";
  CHECK_THROWS_AS(load_mesh(dir / "oob.off"), MeshError);
  std::ofstream(dir / "header.off") << "OFFX\n3 1 0\n";
  CHECK_THROWS_AS(load_mesh(dir / "header.off"), MeshError);
  std::ofstream(dir / "quad.ply") << "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\n"
                                     "property float z\nelement face 1\nproperty list uchar int vertex_indices\n"
                                     "end_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
  try {
    load_mesh(dir / "quad.ply");
    FAIL("quad face accepted");
  } catch (const MeshError& e) {
    CHECK(std::string(e.what()).find("non-triangle face") != std::string::npos);
  }
  CHECK_THROWS(load_mesh(dir / "missing.off"));
}
