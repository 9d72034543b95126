#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "advmesh/geometry.hpp"
#include "advmesh/mesh_io.hpp"
#include "oracles.hpp"

using namespace advmesh;

namespace {

// 3x3 vertex grid in the z = 0 plane, two triangles per cell.
TriMesh flat_grid() {
  TriMesh m;
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) m.vertices.push_back({double(x), double(y), 0.0});
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      const std::uint32_t a = y * 3 + x, b = a + 1, c = a + 3, d = a + 4;
      m.faces.push_back({a, b, d});
      m.faces.push_back({a, d, c});
    }
  m.colors.assign(m.vertices.size(), {0.5, 0.5, 0.5});
  return m;
}

Displacement random_displacement(oracle::Gen& g, std::size_t n, double scale) {
  Displacement d(n);
  for (auto& v : d) v = g.vec(-scale, scale);
  return d;
}

}  // namespace

TEST_CASE("icosphere counts") {
  const TriMesh m0 = make_icosphere(0, 1.0);
  CHECK(m0.vertex_count() == 12);
  CHECK(m0.face_count() == 20);

  const TriMesh m2 = make_icosphere(2, 0.4);
  CHECK(m2.vertex_count() == 162);
  CHECK(m2.face_count() == 320);

  for (int s = 0; s <= 4; ++s) {
    const TriMesh m = make_icosphere(s, 1.3);
    CHECK(euler_characteristic(m) == 2);
    CHECK(unique_edges(m).size() * 2 == m.face_count() * 3);
    for (const auto& v : m.vertices) CHECK(norm(v) == doctest::Approx(1.3).epsilon(1e-12));
    for (const auto& c : m.colors) CHECK(c == Vec3{0.5, 0.5, 0.5});
    CHECK_NOTHROW(m.validate());
  }
}

TEST_CASE("icosphere is deterministic and guarded") {
  const TriMesh a = make_icosphere(3, 0.4), b = make_icosphere(3, 0.4);
  CHECK(a.vertices == b.vertices);
  CHECK(a.faces == b.faces);
  CHECK_THROWS_AS(make_icosphere(7, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(make_icosphere(-1, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(make_icosphere(1, 0.0), std::invalid_argument);
}

TEST_CASE("rigid transform invariants") {
  oracle::Gen g(5);
  for (int i = 0; i < 50; ++i) {
    const RigidTransform t = RigidTransform::from_yaw(g.uniform(-10, 10), g.vec(-5, 5));
    const Mat3 rtr = t.rotation.transposed() * t.rotation;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) CHECK(rtr(r, c) == doctest::Approx(r == c ? 1.0 : 0.0).epsilon(1e-12));
    CHECK(t.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    const auto m = t.matrix();
    CHECK(m[12] == 0.0);
    CHECK(m[13] == 0.0);
    CHECK(m[14] == 0.0);
    CHECK(m[15] == 1.0);
    const Vec3 p = g.vec(-3, 3);
    const Vec3 back = t.inverse().apply(t.apply(p));
    CHECK(norm(back - p) < 1e-12);
  }
}

TEST_CASE("apply_deformation examples") {
  const TriMesh base = make_icosphere(1, 0.4);
  const Displacement zero(base.vertex_count());

  SUBCASE("identity") {
    const TriMesh out = apply_deformation(base, zero, RigidTransform::identity());
    CHECK(out.vertices == base.vertices);
    CHECK(out.faces == base.faces);
    CHECK(out.colors == base.colors);
  }
  SUBCASE("pure translation") {
    const TriMesh out = apply_deformation(base, zero, RigidTransform::from_yaw(0.0, {0, 0, 2}));
    for (std::size_t i = 0; i < base.vertex_count(); ++i) {
      CHECK(out.vertices[i].x == base.vertices[i].x);
      CHECK(out.vertices[i].y == base.vertices[i].y);
      CHECK(out.vertices[i].z == base.vertices[i].z + 2.0);
    }
  }
  SUBCASE("quarter turn against a hand rotation") {
    oracle::Gen g(17);
    const Displacement d = random_displacement(g, base.vertex_count(), 0.2);
    const TriMesh out = apply_deformation(base, d, RigidTransform::from_yaw(std::numbers::pi / 2, {}));
    for (std::size_t i = 0; i < base.vertex_count(); ++i) {
      const Vec3 want = oracle::rotate_z_by_hand(std::numbers::pi / 2, base.vertices[i] + d[i]);
      CHECK(norm(out.vertices[i] - want) < 1e-12);
    }
  }
  SUBCASE("length mismatch") {
    CHECK_THROWS_AS(apply_deformation(base, Displacement(3), RigidTransform::identity()), std::invalid_argument);
  }
}

TEST_CASE("apply_deformation is affine in the displacement") {
  const TriMesh base = make_icosphere(1, 0.4);
  oracle::Gen g(23);
  for (int trial = 0; trial < 20; ++trial) {
    const Displacement d1 = random_displacement(g, base.vertex_count(), 0.3);
    const Displacement d2 = random_displacement(g, base.vertex_count(), 0.3);
    const double a = g.uniform(-2, 2), b = g.uniform(-2, 2);
    const RigidTransform t = RigidTransform::from_yaw(g.uniform(-3, 3), g.vec(-10, 10));
    Displacement mix(base.vertex_count());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * d1[i] + b * d2[i];
    const TriMesh out = apply_deformation(base, mix, t);
    for (std::size_t i = 0; i < mix.size(); ++i) {
      const Vec3 want = t.apply(base.vertices[i]) + a * t.apply_direction(d1[i]) + b * t.apply_direction(d2[i]);
      CHECK(norm(out.vertices[i] - want) < 1e-11);
    }
  }
}

TEST_CASE("deformation_backward is the transpose of the forward map") {
  const TriMesh base = make_icosphere(1, 0.4);
  oracle::Gen g(29);
  const RigidTransform t = RigidTransform::from_yaw(g.uniform(-3, 3), g.vec(-4, 4));
  const Displacement d = random_displacement(g, base.vertex_count(), 0.2);
  std::vector<Vec3> w(base.vertex_count());
  for (auto& v : w) v = g.vec(-1, 1);
  // f(d) = sum_i w_i . v_i(d)
  std::vector<Vec3> grad(base.vertex_count());
  deformation_backward(t, w, grad);
  std::vector<double> x;
  for (const auto& v : d) x.insert(x.end(), {v.x, v.y, v.z});
  auto f = [&](const std::vector<double>& xs) {
    Displacement dd(d.size());
    for (std::size_t i = 0; i < dd.size(); ++i) dd[i] = {xs[3 * i], xs[3 * i + 1], xs[3 * i + 2]};
    const TriMesh out = apply_deformation(base, dd, t);
    double s = 0.0;
    for (std::size_t i = 0; i < dd.size(); ++i) s += dot(w[i], out.vertices[i]);
    return s;
  };
  const auto numeric = oracle::central_diff(f, x, 1e-5);
  std::vector<double> analytic;
  for (const auto& v : grad) analytic.insert(analytic.end(), {v.x, v.y, v.z});
  CHECK(oracle::max_rel_error(analytic, numeric) < 1e-8);
}

TEST_CASE("laplacian deltas") {
  SUBCASE("flat grid interior vertex") {
    const TriMesh m = flat_grid();
    const auto deltas = laplacian_deltas(m);
    CHECK(norm(deltas[4]) < 1e-15);
  }
  SUBCASE("linear in scale") {
    TriMesh m = make_icosphere(1, 1.0);
    oracle::Gen g(3);
    for (auto& v : m.vertices) v += g.vec(-0.1, 0.1);
    const auto d1 = laplacian_deltas(m);
    const double s = 2.75;
    for (auto& v : m.vertices) v *= s;
    const auto d2 = laplacian_deltas(m);
    for (std::size_t i = 0; i < d1.size(); ++i) CHECK(norm(d2[i] - s * d1[i]) < 1e-12);
  }
  SUBCASE("icosahedron vertex by neighbor enumeration") {
    const TriMesh m = make_icosphere(0, 1.0);
    const auto deltas = laplacian_deltas(m);
    for (std::size_t i = 0; i < m.vertex_count(); ++i) {
      std::set<std::uint32_t> nbrs;
      for (const auto& f : m.faces)
        for (int k = 0; k < 3; ++k)
          if (f[k] == i) {
            nbrs.insert(f[(k + 1) % 3]);
            nbrs.insert(f[(k + 2) % 3]);
          }
      CHECK(nbrs.size() == 5);
      Vec3 mean;
      for (auto j : nbrs) mean += m.vertices[j];
      mean = mean / double(nbrs.size());
      CHECK(norm(deltas[i] - (m.vertices[i] - mean)) < 1e-12);
    }
  }
  SUBCASE("isolated vertex gets zero") {
    TriMesh m = flat_grid();
    m.vertices.push_back({5, 5, 5});
    m.colors.push_back({0, 0, 0});
    const auto deltas = laplacian_deltas(m);
    CHECK(deltas.back() == Vec3{});
  }
}

TEST_CASE("laplacian loss") {
  CHECK(laplacian_loss(flat_grid()) > 0.0);  // boundary vertices are off-centroid

  TriMesh m = make_icosphere(1, 1.0);
  const auto deltas = laplacian_deltas(m);
  double sum = 0.0;
  for (const auto& d : deltas) sum += d.x * d.x + d.y * d.y + d.z * d.z;
  CHECK(laplacian_loss(m) == doctest::Approx(sum).epsilon(1e-14));

  const double base_loss = laplacian_loss(m);
  TriMesh scaled = m;
  for (auto& v : scaled.vertices) v *= 3.0;
  CHECK(laplacian_loss(scaled) == doctest::Approx(9.0 * base_loss).epsilon(1e-12));

  oracle::Gen g(41);
  for (int trial = 0; trial < 10; ++trial) {
    TriMesh moved = m;
    for (auto& v : moved.vertices) v += g.vec(-0.05, 0.05);
    const double before = laplacian_loss(moved);
    const Vec3 shift = g.vec(-100, 100);
    for (auto& v : moved.vertices) v += shift;
    CHECK(laplacian_loss(moved) == doctest::Approx(before).epsilon(1e-8));
  }
}

TEST_CASE("laplacian loss gradient matches central differences") {
  TriMesh m = make_icosphere(1, 0.4);
  oracle::Gen g(43);
  for (auto& v : m.vertices) v += g.vec(-0.05, 0.05);
  const auto grad = laplacian_loss_grad(m);
  std::vector<double> x, analytic;
  for (std::size_t i = 0; i < m.vertex_count(); ++i) {
    x.insert(x.end(), {m.vertices[i].x, m.vertices[i].y, m.vertices[i].z});
    analytic.insert(analytic.end(), {grad[i].x, grad[i].y, grad[i].z});
  }
  auto f = [&](const std::vector<double>& xs) {
    TriMesh mm = m;
    for (std::size_t i = 0; i < mm.vertex_count(); ++i) mm.vertices[i] = {xs[3 * i], xs[3 * i + 1], xs[3 * i + 2]};
    return laplacian_loss(mm);
  };
  CHECK(oracle::max_rel_error(analytic, oracle::central_diff(f, x, 1e-6)) < 1e-7);
}

TEST_CASE("clamp_extents") {
  const TriMesh base = make_icosphere(2, 0.4);
  const Extents limits{0.8, 0.8, 0.8};

  SUBCASE("in-bounds displacement is bit-identical") {
    oracle::Gen g(47);
    Displacement d = random_displacement(g, base.vertex_count(), 0.0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = -0.3 * base.vertices[i];
    const Displacement c = clamp_extents(d, base, limits);
    CHECK(c == d);
  }
  SUBCASE("one vertex pushed past the x limit") {
    Displacement d(base.vertex_count());
    d[5] = {1.0, 0.0, 0.0};
    const Displacement c = clamp_extents(d, base, limits);
    CHECK(base.vertices[5].x + c[5].x == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(c[5].y == 0.0);
    CHECK(c[5].z == 0.0);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (i != 5) CHECK(c[i] == d[i]);
  }
  SUBCASE("idempotent and never grows an extent") {
    oracle::Gen g(53);
    for (int trial = 0; trial < 30; ++trial) {
      const Extents lim{g.uniform(0.2, 1.5), g.uniform(0.2, 1.5), g.uniform(0.2, 1.5)};
      const Displacement d = random_displacement(g, base.vertex_count(), 1.0);
      const Displacement c1 = clamp_extents(d, base, lim);
      const Displacement c2 = clamp_extents(c1, base, lim);
      CHECK(c1 == c2);
      std::vector<Vec3> before, after;
      for (std::size_t i = 0; i < d.size(); ++i) {
        before.push_back(base.vertices[i] + d[i]);
        after.push_back(base.vertices[i] + c1[i]);
      }
      const Extents eb = bounding_extents(before), ea = bounding_extents(after);
      CHECK(ea.x <= eb.x + 1e-12);
      CHECK(ea.y <= eb.y + 1e-12);
      CHECK(ea.z <= eb.z + 1e-12);
      CHECK(ea.x <= lim.x + 1e-12);
      CHECK(ea.y <= lim.y + 1e-12);
      CHECK(ea.z <= lim.z + 1e-12);
    }
  }
}

TEST_CASE("roof_pose") {
  Box3D car;
  car.center = {0, 0, 0};
  car.height = 1.5;
  car.yaw = 0.0;
  const RigidTransform t = roof_pose(car, 0.4);
  CHECK(t.translation.x == 0.0);
  CHECK(t.translation.y == 0.0);
  CHECK(t.translation.z == doctest::Approx(1.15).epsilon(1e-15));

  car.yaw = std::numbers::pi / 2;
  const Vec3 x_world = roof_pose(car, 0.4).apply_direction({1, 0, 0});
  CHECK(norm(x_world - Vec3{0, 1, 0}) < 1e-15);

  oracle::Gen g(59);
  for (int trial = 0; trial < 20; ++trial) {
    Box3D a = g.box(20.0);
    Box3D b = a;
    b.yaw = g.uniform(-3, 3);
    const RigidTransform ta = roof_pose(a, 0.4), tb = roof_pose(b, 0.4);
    CHECK(ta.translation == tb.translation);
    const Mat3 delta = tb.rotation * ta.rotation.transposed();
    const Mat3 want = Mat3::rotation_z(b.yaw - a.yaw);
    for (int k = 0; k < 9; ++k) CHECK(delta.m[k] == doctest::Approx(want.m[k]).epsilon(1e-12));

    const TriMesh mesh = apply_deformation(make_icosphere(2, 0.4), Displacement(162), ta);
    double lowest = 1e9;
    for (const auto& v : mesh.vertices) lowest = std::min(lowest, v.z);
    CHECK(lowest >= a.top_z() - 1e-6);
  }
}

TEST_CASE("PLY round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "advmesh_test_geometry";
  std::filesystem::create_directories(dir);
  TriMesh m = make_icosphere(2, 0.4);
  oracle::Gen g(61);
  for (auto& v : m.vertices) v += g.vec(-0.1, 0.1);
  for (auto& c : m.colors) c = {color_to_byte(g.uniform(0, 1)) / 255.0, 0.0, 1.0};
  for (auto fmt : {PlyFormat::Ascii, PlyFormat::BinaryLittleEndian}) {
    const auto path = dir / (fmt == PlyFormat::Ascii ? "a.ply" : "b.ply");
    write_ply(path, m, fmt);
    const TriMesh r = read_ply(path);
    CHECK(r.vertices == m.vertices);
    CHECK(r.faces == m.faces);
    for (std::size_t i = 0; i < m.colors.size(); ++i) CHECK(norm(r.colors[i] - m.colors[i]) < 1e-12);
  }
  std::filesystem::remove_all(dir);
}
