#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "carvemap/ground_seg.hpp"
#include "carvemap/ingest.hpp"
#include "carvemap/motion_dst.hpp"
#include "test_util.hpp"

using namespace carvemap;

namespace {

EvidenceMass random_mass(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  double a = uni(rng), b = uni(rng), c = uni(rng);
  const double s = a + b + c;
  if (s <= 0) return EvidenceMass::vacuous();
  return {a / s, b / s, c / s};
}

bool mass_close(const EvidenceMass& a, const EvidenceMass& b, double tol = 1e-9) {
  return std::abs(a.empty - b.empty) < tol && std::abs(a.occupied - b.occupied) < tol &&
         std::abs(a.unknown - b.unknown) < tol;
}

/// Aligned scans of the room scene using ground-truth poses.
std::vector<AlignedScan> aligned_room_scans(const SyntheticScene& scene,
                                            std::vector<std::vector<uint8_t>>* gt_labels) {
  std::vector<AlignedScan> scans;
  for (int t = 0; t < scene.timesteps; ++t) {
    const SimulatedScan sim = simulate_scan(scene, t, scene.lidar, scene.lidar.max_range);
    AlignedScan scan;
    scan.id = t;
    scan.points = sim.points_world;
    scan.raw_indices.resize(sim.points_world.size());
    for (size_t i = 0; i < scan.raw_indices.size(); ++i) scan.raw_indices[i] = static_cast<int>(i);
    scan.pose = sim.sensor_pose;
    scan.sensor_center = sim.sensor_pose.translation;
    scans.push_back(std::move(scan));
    if (gt_labels) gt_labels->push_back(sim.moving);
  }
  return scans;
}

/// Ground segmentation over the union of all scans (the pipeline's view),
/// mapped back to per-scan candidate lists of non-ground points.
std::vector<std::vector<int>> non_ground_candidates(const std::vector<AlignedScan>& scans) {
  std::vector<Vec3> merged;
  std::vector<std::pair<size_t, int>> owner;
  for (size_t k = 0; k < scans.size(); ++k)
    for (size_t i = 0; i < scans[k].points.size(); ++i) {
      merged.push_back(scans[k].points[i]);
      owner.emplace_back(k, static_cast<int>(i));
    }
  const auto seg = segment_ground(merged, scans.front().sensor_center);
  std::vector<std::vector<int>> candidates(scans.size());
  for (int idx : seg.non_ground) candidates[owner[idx].first].push_back(owner[idx].second);
  return candidates;
}

}  // namespace

TEST_CASE("beam_evidence rule table") {
  const Ray beam{Vec3(0, 0, 0), Vec3(10, 0, 0)};
  const double gate = 0.01, eps = 0.1;

  const EvidenceMass at = beam_evidence(Vec3(10, 0, 0), beam, gate, eps);
  CHECK(mass_close(at, {0.0, 0.9, 0.1}));

  const EvidenceMass before = beam_evidence(Vec3(5, 0, 0), beam, gate, eps);
  CHECK(mass_close(before, {0.9, 0.0, 0.1}));

  const EvidenceMass perp = beam_evidence(Vec3(0, 5, 0), beam, gate, eps);
  CHECK(mass_close(perp, {0.0, 0.0, 1.0}));

  const EvidenceMass behind = beam_evidence(Vec3(12, 0, 0), beam, gate, eps);
  CHECK(mass_close(behind, {0.0, 0.0, 1.0}));

  // Range-tolerance boundaries.
  CHECK(beam_evidence(Vec3(9.95, 0, 0), beam, gate, eps).occupied == 0.9);
  CHECK(beam_evidence(Vec3(9.85, 0, 0), beam, gate, eps).empty == 0.9);

  CHECK_THROWS_AS(beam_evidence(Vec3(1, 0, 0), Ray{Vec3(0, 0, 0), Vec3(0, 0, 0)}, gate, eps),
                  Error);
}

TEST_CASE("combine: closed-form Dempster arithmetic") {
  std::mt19937_64 rng(21);
  const EvidenceMass x = random_mass(rng);
  const auto [with_vacuous, k0] = combine(x, EvidenceMass::vacuous());
  CHECK(mass_close(with_vacuous, x));
  CHECK(k0 == 0.0);

  const EvidenceMass e{0.9, 0.0, 0.1};
  const auto [ee, k1] = combine(e, e);
  CHECK(mass_close(ee, {0.99, 0.0, 0.01}));
  CHECK(k1 == 0.0);

  const EvidenceMass o{0.0, 0.9, 0.1};
  const auto [eo, k2] = combine(e, o);
  CHECK(k2 == Catch::Approx(0.81));
  CHECK(eo.empty == Catch::Approx(0.09 / 0.19));
  CHECK(eo.occupied == Catch::Approx(0.09 / 0.19));
  CHECK(eo.unknown == Catch::Approx(0.01 / 0.19));

  CHECK_THROWS_AS(combine({1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}), Error);
}

TEST_CASE("combine is commutative and associative and keeps the simplex") {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 200; ++trial) {
    const EvidenceMass a = random_mass(rng), b = random_mass(rng), c = random_mass(rng);
    const auto ab = combine(a, b).first;
    const auto ba = combine(b, a).first;
    CHECK(mass_close(ab, ba));
    const auto ab_c = combine(ab, c).first;
    const auto a_bc = combine(a, combine(b, c).first).first;
    CHECK(mass_close(ab_c, a_bc, 1e-9));
    CHECK(ab_c.valid());
  }
}

TEST_CASE("beam evidence outputs satisfy the simplex invariant") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> uni(-10.0, 10.0);
  for (int trial = 0; trial < 500; ++trial) {
    const Ray beam{Vec3(uni(rng), uni(rng), uni(rng)), Vec3(uni(rng), uni(rng), uni(rng))};
    if (beam.length() < 1e-6) continue;
    const Vec3 p(uni(rng), uni(rng), uni(rng));
    CHECK(beam_evidence(p, beam, 0.02, 0.1).valid());
  }
}

TEST_CASE("classify_point: static wall, departed object, single observation") {
  // Five scans of a wall grid at x = 8, sensors stepping along y.
  std::vector<AlignedScan> scans;
  for (int k = 0; k < 5; ++k) {
    AlignedScan scan;
    scan.id = k;
    scan.sensor_center = Vec3(0, -0.4 + 0.2 * k, 0);
    for (double y = -3; y <= 3; y += 0.05)
      for (double z = -1; z <= 1; z += 0.05) scan.points.emplace_back(8.0, y, z);
    scan.pose.translation = scan.sensor_center;
    scans.push_back(std::move(scan));
  }
  MotionOptions opt;
  opt.angular_gate = 0.004;  // roughly half the 0.05/8 grid spacing

  std::vector<BeamIndex> indices;
  for (const auto& s : scans) indices.emplace_back(s, opt.angular_gate);

  SECTION("wall point occupied in every scan stays static") {
    const MotionLabel label = classify_point(Vec3(8.0, 0.0, 0.0), 2, scans, indices, opt);
    CHECK_FALSE(label.moving);
    CHECK(label.conflict < 0.1);
  }

  SECTION("object point seen empty by later scans is moving") {
    // The object stood at (5,0,0) during scan 0; scans 1..4 look through that
    // location onto the wall behind.
    const MotionLabel label = classify_point(Vec3(5.0, 0.0, 0.0), 0, scans, indices, opt);
    CHECK(label.moving);
    CHECK(label.conflict > 0.8);
  }

  SECTION("point with vacuous evidence elsewhere stays static") {
    // Outside every other scan's angular support.
    const MotionLabel label = classify_point(Vec3(-5.0, 40.0, 0.0), 0, scans, indices, opt);
    CHECK_FALSE(label.moving);
    CHECK(label.conflict == 0.0);
  }
}

TEST_CASE("label_cloud: all-static scene has zero moving points") {
  // Sphere room: every beam hits the sphere wall near-perpendicularly, so no
  // beam undercuts another scan's point.
  SyntheticScene scene;
  scene.timesteps = 5;
  scene.static_objects.push_back(
      make_object(make_uv_sphere(Vec3(0, 0, 0), 5.0, 24, 36), "constant", 0.5, 3));
  scene.sensor_trajectory =
      testutil::line_trajectory(Vec3(-0.4, -0.2, 0), Vec3(0.4, 0.2, 0), 4.0);
  scene.lidar.n_azimuth = 240;
  scene.lidar.n_elevation = 60;
  scene.lidar.fov_up = 0.6;
  scene.lidar.fov_down = -0.6;

  auto scans = aligned_room_scans(scene, nullptr);
  std::vector<std::vector<int>> candidates(scans.size());
  for (size_t k = 0; k < scans.size(); ++k)
    for (size_t i = 0; i < scans[k].points.size(); ++i)
      candidates[k].push_back(static_cast<int>(i));

  const auto labels = label_cloud(scans, candidates);
  size_t moving = 0;
  for (const auto& per_scan : labels)
    for (const auto& l : per_scan) moving += l.moving;
  CHECK(moving == 0);
}

TEST_CASE("label_cloud: single-scan window is all static") {
  SyntheticScene scene = testutil::make_room_scene(false, true, 1);
  auto scans = aligned_room_scans(scene, nullptr);
  std::vector<std::vector<int>> candidates(1);
  for (size_t i = 0; i < scans[0].points.size(); ++i) candidates[0].push_back(static_cast<int>(i));
  const auto labels = label_cloud(scans, candidates);
  for (const auto& l : labels[0]) CHECK_FALSE(l.moving);
}

TEST_CASE("label_cloud: crossing sphere is detected") {
  SyntheticScene scene = testutil::make_room_scene(false, true, 5);
  std::vector<std::vector<uint8_t>> gt;
  auto scans = aligned_room_scans(scene, &gt);

  // Candidates: non-ground points, as in the pipeline.
  const auto candidates = non_ground_candidates(scans);

  const auto labels = label_cloud(scans, candidates);

  size_t moving_total = 0, moving_hit = 0, static_total = 0, static_fp = 0;
  for (size_t k = 0; k < scans.size(); ++k) {
    for (size_t c = 0; c < candidates[k].size(); ++c) {
      const bool gt_moving = gt[k][candidates[k][c]] != 0;
      const bool predicted = labels[k][c].moving;
      if (gt_moving) {
        ++moving_total;
        moving_hit += predicted;
      } else {
        ++static_total;
        static_fp += predicted;
      }
    }
  }
  REQUIRE(moving_total > 200);
  INFO("recall " << static_cast<double>(moving_hit) / moving_total << " fp "
                 << static_cast<double>(static_fp) / static_total);
  CHECK(static_cast<double>(moving_hit) / moving_total >= 0.9);
  CHECK(static_cast<double>(static_fp) / static_total <= 0.05);
}

TEST_CASE("label_cloud: raising the threshold never increases moving counts") {
  SyntheticScene scene = testutil::make_room_scene(false, true, 4);
  scene.lidar.n_azimuth = 180;
  scene.lidar.n_elevation = 32;
  auto scans = aligned_room_scans(scene, nullptr);
  const auto candidates = non_ground_candidates(scans);

  size_t prev = std::numeric_limits<size_t>::max();
  for (double threshold : {0.3, 0.5, 0.7, 0.9}) {
    MotionOptions opt;
    opt.conflict_threshold = threshold;
    const auto labels = label_cloud(scans, candidates, opt);
    size_t moving = 0;
    for (const auto& per_scan : labels)
      for (const auto& l : per_scan) moving += l.moving;
    CHECK(moving <= prev);
    prev = moving;
  }
}

TEST_CASE("classification is invariant under a joint rigid transform") {
  SyntheticScene scene = testutil::make_room_scene(false, true, 3);
  scene.lidar.n_azimuth = 150;
  scene.lidar.n_elevation = 24;
  auto scans = aligned_room_scans(scene, nullptr);
  std::vector<std::vector<int>> candidates(scans.size());
  for (size_t k = 0; k < scans.size(); ++k)
    for (size_t i = 0; i < scans[k].points.size(); i += 7)
      candidates[k].push_back(static_cast<int>(i));

  MotionOptions opt;
  opt.angular_gate = 0.012;
  const auto labels = label_cloud(scans, candidates, opt);

  RigidTransform rt;
  rt.rotation = Eigen::AngleAxisd(0.7, Vec3(1, 2, 3).normalized()).toRotationMatrix();
  rt.translation = Vec3(11, -4, 2);
  auto moved = scans;
  for (auto& s : moved) {
    for (auto& p : s.points) p = rt.apply(p);
    s.sensor_center = rt.apply(s.sensor_center);
  }
  const auto labels2 = label_cloud(moved, candidates, opt);
  for (size_t k = 0; k < labels.size(); ++k) {
    REQUIRE(labels[k].size() == labels2[k].size());
    for (size_t c = 0; c < labels[k].size(); ++c) {
      CHECK(labels[k][c].moving == labels2[k][c].moving);
      CHECK(labels[k][c].conflict == Catch::Approx(labels2[k][c].conflict).margin(1e-9));
    }
  }
}
