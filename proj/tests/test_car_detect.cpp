#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "carvemap/car_detect.hpp"

using namespace carvemap;

namespace {

const GroundHeightFn kFlatGround = [](double, double) { return 0.0; };

/// Trapezoid-profile car blob: hood ramp, flat roof, trunk ramp. Returns
/// surface-sampled points.
std::vector<Vec3> make_car_blob(const Vec2& center, double yaw, double length = 4.5,
                                double width = 1.8, double height = 1.5,
                                double ramp_len = 1.5, double base = 0.2) {
  const Vec2 u_axis(std::cos(yaw), std::sin(yaw));
  const Vec2 v_axis(-std::sin(yaw), std::cos(yaw));
  auto roof = [&](double u) {
    const double from_front = u + length / 2;
    const double from_back = length / 2 - u;
    double h = height;
    if (from_front < ramp_len) h = height * from_front / ramp_len;
    if (from_back < ramp_len) h = std::min(h, height * from_back / ramp_len);
    return std::max(h, base);
  };
  std::vector<Vec3> pts;
  const double step = 0.08;
  for (double u = -length / 2; u <= length / 2; u += step) {
    for (double v = -width / 2; v <= width / 2; v += step) {
      const Vec2 xy = center + u_axis * u + v_axis * v;
      pts.emplace_back(xy.x(), xy.y(), roof(u));  // top surface
    }
    // Side walls.
    for (double z = base; z <= roof(u); z += step) {
      for (double s : {-width / 2, width / 2}) {
        const Vec2 xy = center + u_axis * u + v_axis * s;
        pts.emplace_back(xy.x(), xy.y(), z);
      }
    }
  }
  return pts;
}

double hull_volume(const TriangleMesh& mesh) {
  double v = 0;
  for (const auto& f : mesh.faces) {
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    v += a.dot(b.cross(c)) / 6.0;
  }
  return v;
}

size_t hull_edge_count(const TriangleMesh& mesh) {
  std::set<std::pair<int, int>> edges;
  for (const auto& f : mesh.faces)
    for (int c = 0; c < 3; ++c) {
      auto mm = std::minmax(f[c], f[(c + 1) % 3]);
      edges.insert({mm.first, mm.second});
    }
  return edges.size();
}

}  // namespace

TEST_CASE("rasterize_candidates: blobs, walls and the closure bridge distance") {
  SECTION("car-height blob forms one region") {
    const auto blob = make_car_blob(Vec2(0, 0), 0.0);
    const auto regions = rasterize_candidates(blob, kFlatGround);
    CHECK(regions.regions.size() == 1);
  }

  SECTION("3 m wall cells are emptied") {
    std::vector<Vec3> wall;
    for (double x = 0; x <= 6; x += 0.05)
      for (double z = 0; z <= 3.0; z += 0.05) wall.emplace_back(x, 0.0, z);
    const auto regions = rasterize_candidates(wall, kFlatGround);
    CHECK(regions.regions.empty());
  }

  SECTION("blobs 0.5 m apart stay separate; 0.1 m gaps close") {
    auto two = make_car_blob(Vec2(0, 0), 0.0, 2.0, 1.0, 1.2, 0.6);
    const auto second = make_car_blob(Vec2(0, 1.5 + 0.01), 0.0, 2.0, 1.0, 1.2, 0.6);
    // centers 1.51 apart, widths 1.0 -> gap 0.51 m
    two.insert(two.end(), second.begin(), second.end());
    CHECK(rasterize_candidates(two, kFlatGround).regions.size() == 2);

    auto close_pair = make_car_blob(Vec2(0, 0), 0.0, 2.0, 1.0, 1.2, 0.6);
    const auto nearby = make_car_blob(Vec2(0, 1.1), 0.0, 2.0, 1.0, 1.2, 0.6);
    // gap 0.1 m = one cell: the 3x3 closure bridges it
    close_pair.insert(close_pair.end(), nearby.begin(), nearby.end());
    CHECK(rasterize_candidates(close_pair, kFlatGround).regions.size() == 1);
  }
}

TEST_CASE("box_filter: template arithmetic") {
  CarDetectOptions opt;
  OrientedBox car;
  car.length = 4.5;
  car.width = 1.8;
  double rho = 0;
  CHECK(box_filter(car, opt, &rho));
  CHECK(rho == Catch::Approx(std::sqrt(2.25 * 2.25 + 0.9 * 0.9)));
  CHECK(rho == Catch::Approx(2.4233).margin(1e-3));

  OrientedBox lamp_row;  // 12 x 1 m: aspect fails
  lamp_row.length = 12.0;
  lamp_row.width = 1.0;
  CHECK_FALSE(box_filter(lamp_row, opt));

  OrientedBox pillar;  // 1 x 1 m: rho fails
  pillar.length = 1.0;
  pillar.width = 1.0;
  CHECK_FALSE(box_filter(pillar, opt, &rho));
  CHECK(rho == Catch::Approx(std::sqrt(0.5)).margin(1e-9));
}

TEST_CASE("min_area_rect recovers a rotated rectangle") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (double yaw : {0.0, 0.3, 1.1, 2.0}) {
    const Vec2 u(std::cos(yaw), std::sin(yaw));
    const Vec2 v(-std::sin(yaw), std::cos(yaw));
    std::vector<Vec2> pts;
    for (int i = 0; i < 400; ++i) {
      const double a = (uni(rng) - 0.5) * 4.5;
      const double b = (uni(rng) - 0.5) * 1.8;
      pts.push_back(Vec2(3, -2) + u * a + v * b);
    }
    // Pin the corners so the box dimensions are exact.
    for (double sa : {-2.25, 2.25})
      for (double sb : {-0.9, 0.9}) pts.push_back(Vec2(3, -2) + u * sa + v * sb);
    const OrientedBox box = min_area_rect(pts);
    CHECK(box.length == Catch::Approx(4.5).margin(1e-9));
    CHECK(box.width == Catch::Approx(1.8).margin(1e-9));
    CHECK((box.center - Vec2(3, -2)).norm() < 1e-9);
  }
}

TEST_CASE("silhouette_filter: trapezoid passes, rectangle and wedge fail") {
  CarDetectOptions opt;

  SECTION("trapezoid silhouette with 45-degree ramps passes") {
    const auto blob = make_car_blob(Vec2(0, 0), 0.0);
    std::vector<int> members(blob.size());
    for (size_t i = 0; i < blob.size(); ++i) members[i] = static_cast<int>(i);
    OrientedBox box;
    box.center = Vec2(0, 0);
    box.length = 4.5;
    box.width = 1.8;
    box.yaw = 0.0;
    const auto stats = silhouette_filter(blob, members, box, kFlatGround, opt);
    INFO("bins " << stats.bin_angle[0] << " " << stats.bin_angle[1] << " "
                 << stats.bin_angle[2]);
    CHECK(stats.pass);
    // Brute-force slope oracle: the hood ramp rises `height/ramp_len`, i.e.
    // one cell per column; the mean over the first third dips because the
    // flat roof enters the bin.
    CHECK(stats.bin_angle[0] > opt.ramp_angle);
    CHECK(std::abs(stats.bin_angle[1]) < 0.2);
    CHECK(stats.bin_angle[2] < -opt.ramp_angle);
  }

  SECTION("rectangular silhouette fails: bins 1 and 3 are not ramps") {
    std::vector<Vec3> rect;
    for (double u = -2.25; u <= 2.25; u += 0.08)
      for (double z = 0.2; z <= 1.5; z += 0.08) {
        rect.emplace_back(u, -0.9, z);
        rect.emplace_back(u, 0.9, z);
      }
    std::vector<int> members(rect.size());
    for (size_t i = 0; i < rect.size(); ++i) members[i] = static_cast<int>(i);
    OrientedBox box;
    box.length = 4.5;
    box.width = 1.8;
    const auto stats = silhouette_filter(rect, members, box, kFlatGround, opt);
    CHECK_FALSE(stats.pass);
    CHECK(std::abs(stats.bin_angle[0]) < opt.ramp_angle);
  }

  SECTION("monotone wedge fails: bin 3 does not descend") {
    std::vector<Vec3> wedge;
    for (double u = -2.25; u <= 2.25; u += 0.05) {
      const double top = 0.1 + (u + 2.25);  // 45-degree monotone rise
      for (double z = 0.1; z <= top; z += 0.05) {
        wedge.emplace_back(u, -0.9, z);
        wedge.emplace_back(u, 0.9, z);
      }
    }
    std::vector<int> members(wedge.size());
    for (size_t i = 0; i < wedge.size(); ++i) members[i] = static_cast<int>(i);
    OrientedBox box;
    box.length = 4.5;
    box.width = 1.8;
    const auto stats = silhouette_filter(wedge, members, box, kFlatGround, opt);
    CHECK_FALSE(stats.pass);
    CHECK(stats.bin_angle[0] > opt.ramp_angle);   // ascends fine
    CHECK(stats.bin_angle[2] > -opt.ramp_angle);  // but never descends
  }

  SECTION("degenerate silhouette with fewer than 3 columns fails") {
    std::vector<Vec3> tiny = {{0, 0, 0.5}, {0.05, 0, 0.6}, {0.02, 0.1, 0.4}};
    OrientedBox box;
    box.length = 0.1;
    box.width = 0.1;
    CHECK_FALSE(silhouette_filter(tiny, {0, 1, 2}, box, kFlatGround, opt).pass);
  }
}

TEST_CASE("detect_cars: labeled scene with cars, wall and tree") {
  std::vector<Vec3> cloud;
  std::vector<int> car_points;

  const auto car1 = make_car_blob(Vec2(0, 0), 0.4);
  const auto car2 = make_car_blob(Vec2(10, 6), -1.0);
  for (const auto& p : car1) {
    car_points.push_back(static_cast<int>(cloud.size()));
    cloud.push_back(p);
  }
  for (const auto& p : car2) {
    car_points.push_back(static_cast<int>(cloud.size()));
    cloud.push_back(p);
  }
  // 3 m wall along y.
  for (double y = -8; y <= 8; y += 0.05)
    for (double z = 0; z <= 3.0; z += 0.05) cloud.emplace_back(-6.0, y, z);
  // Tree: trunk + canopy above 2.2 m covering its footprint.
  for (double z = 0; z <= 4.0; z += 0.05) cloud.emplace_back(6.0, -5.0, z);
  for (double dx = -1.0; dx <= 1.0; dx += 0.1)
    for (double dy = -1.0; dy <= 1.0; dy += 0.1)
      for (double z = 2.5; z <= 4.0; z += 0.25) cloud.emplace_back(6.0 + dx, -5.0 + dy, z);

  const CarDetection det = detect_cars(cloud, kFlatGround);
  REQUIRE(det.cars.size() == 2);

  // Clusters are pairwise disjoint and removed+kept covers the input.
  std::vector<char> seen(cloud.size(), 0);
  size_t removed = 0;
  for (const auto& car : det.cars) {
    for (int i : car.member_points) {
      CHECK(seen[i] == 0);
      seen[i] = 1;
      ++removed;
    }
  }
  for (int i : det.kept) {
    CHECK(seen[i] == 0);
    seen[i] = 1;
  }
  CHECK(removed + det.kept.size() == cloud.size());

  // The detected members are car points (the blobs were fully removed).
  std::set<int> car_set(car_points.begin(), car_points.end());
  size_t members_in_cars = 0, members_total = 0;
  for (const auto& car : det.cars)
    for (int i : car.member_points) {
      ++members_total;
      members_in_cars += car_set.count(i);
    }
  CHECK(members_in_cars == members_total);
  CHECK(members_total >= car_set.size() * 95 / 100);
}

TEST_CASE("detect_cars: no cars leaves the cloud unchanged") {
  std::vector<Vec3> cloud;
  for (double y = -4; y <= 4; y += 0.1)
    for (double z = 0; z <= 3.0; z += 0.1) cloud.emplace_back(0.0, y, z);
  const CarDetection det = detect_cars(cloud, kFlatGround);
  CHECK(det.cars.empty());
  CHECK(det.kept.size() == cloud.size());
}

TEST_CASE("detect_cars: long car accepted while rho stays under the bound") {
  // 5.4 m long car: rho = sqrt(2.7^2 + 1.0^2) ~ 2.88 < 5.5, ratio 0.37.
  const auto blob = make_car_blob(Vec2(0, 0), 0.2, 5.4, 2.0, 1.5, 1.8);
  const CarDetection det = detect_cars(blob, kFlatGround);
  REQUIRE(det.cars.size() == 1);
  CHECK(det.cars[0].rho < 5.5);
  CHECK(det.cars[0].length == Catch::Approx(5.4).margin(0.3));
}

TEST_CASE("convex_hull_3d: known hulls") {
  SECTION("tetrahedron") {
    const std::vector<Vec3> tet = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    const TriangleMesh hull = convex_hull_3d(tet);
    CHECK(hull.vertices.size() == 4);
    CHECK(hull.faces.size() == 4);
    CHECK(hull.manifold);
  }

  SECTION("cube corners with interior points") {
    std::vector<Vec3> pts;
    for (int x = 0; x <= 1; ++x)
      for (int y = 0; y <= 1; ++y)
        for (int z = 0; z <= 1; ++z) pts.emplace_back(x, y, z);
    std::mt19937_64 rng(33);
    std::uniform_real_distribution<double> uni(0.05, 0.95);
    for (int i = 0; i < 60; ++i) pts.emplace_back(uni(rng), uni(rng), uni(rng));
    const TriangleMesh hull = convex_hull_3d(pts);
    CHECK(hull.vertices.size() == 8);
    CHECK(hull_volume(hull) == Catch::Approx(1.0).margin(1e-9));
    // Euler characteristic of a sphere-topology hull.
    CHECK(hull.vertices.size() - hull_edge_count(hull) + hull.faces.size() == 2);
  }

  SECTION("coplanar input errors") {
    std::vector<Vec3> flat;
    for (int i = 0; i < 10; ++i) flat.emplace_back(i * 0.3, i * i * 0.1, 0.0);
    CHECK_THROWS_AS(convex_hull_3d(flat), Error);
    CHECK_THROWS_AS(convex_hull_3d({{0, 0, 0}, {1, 1, 1}, {2, 2, 2}}), Error);
  }
}

TEST_CASE("convex_hull_3d: random blob containment and Euler property") {
  std::mt19937_64 rng(34);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Vec3> pts;
    for (int i = 0; i < 200; ++i)
      pts.emplace_back(gauss(rng) * 2.0, gauss(rng), gauss(rng) * 0.5);
    const TriangleMesh hull = convex_hull_3d(pts);
    CHECK(hull.manifold);
    CHECK(hull.vertices.size() - hull_edge_count(hull) + hull.faces.size() == 2);

    // Every input point on or inside every face plane.
    double worst = 0;
    for (const auto& f : hull.faces) {
      const Vec3 n = face_normal(hull, static_cast<int>(&f - hull.faces.data()));
      const double offset = n.dot(hull.vertices[f[0]]);
      for (const auto& p : pts) worst = std::max(worst, n.dot(p) - offset);
    }
    CHECK(worst < 1e-9);
  }
}
