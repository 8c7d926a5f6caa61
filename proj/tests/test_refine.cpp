#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "carvemap/ingest.hpp"
#include "carvemap/refine.hpp"
#include "test_util.hpp"

using namespace carvemap;

namespace {

/// Textured wall scene: wall in the z = depth plane, cameras near the origin
/// looking along +z. When `oversized` the wall extends beyond every frustum
/// (no silhouettes in the images).
struct WallScene {
  SyntheticScene scene;
  TriangleMesh wall;
  std::vector<CameraView> views;
};

WallScene make_wall_scene(int grid, bool oversized, const std::vector<Vec3>& camera_centers,
                          int img_w = 320, int img_h = 240, double focal = 220.0) {
  WallScene out;
  const double depth = 3.0;
  const double half_w = oversized ? 5.0 : 1.6;
  const double half_h = oversized ? 4.0 : 1.2;
  out.wall = make_grid_mesh(Vec3(-half_w, -half_h, depth), Vec3(2 * half_w, 0, 0),
                            Vec3(0, 2 * half_h, 0), grid, grid);
  out.scene.timesteps = 1;
  out.scene.sensor_trajectory = testutil::static_trajectory(Vec3(0, 0, 0));
  out.scene.static_objects.push_back(make_object(out.wall, "hash", 0.5, 42));

  for (const auto& c : camera_centers) {
    CameraView view;
    view.fx = view.fy = focal;
    view.cx = img_w / 2.0;
    view.cy = img_h / 2.0;
    view.pose.rotation = Mat3::Identity();
    view.pose.translation = -c;  // world -> camera, identity rotation
    view.image = GrayImage(img_w, img_h);
    view.image = render_view(out.scene, view, 0);
    view.moving_mask = BinaryMask(img_w, img_h);
    out.views.push_back(std::move(view));
  }
  return out;
}

size_t connected_mask_components(const BinaryMask& mask) {
  std::vector<int> comp(mask.bits.size(), -1);
  int n = 0;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.get(x, y) || comp[y * mask.width + x] >= 0) continue;
      std::vector<std::pair<int, int>> stack{{x, y}};
      comp[y * mask.width + x] = n;
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx, ny = cy + dy;
            if (!mask.in_bounds(nx, ny) || !mask.get(nx, ny)) continue;
            if (comp[ny * mask.width + nx] >= 0) continue;
            comp[ny * mask.width + nx] = n;
            stack.emplace_back(nx, ny);
          }
      }
      ++n;
    }
  }
  return n;
}

}  // namespace

TEST_CASE("build_moving_mask: impulse equals brute-force morphology") {
  CameraView view;
  view.fx = view.fy = 100;
  view.cx = 50;
  view.cy = 50;
  view.image = GrayImage(101, 101);

  SECTION("no moving points gives an all-false mask") {
    const BinaryMask mask = build_moving_mask(view, {});
    CHECK(mask.count() == 0);
  }

  SECTION("single impulse at the principal point") {
    // A point on the optical axis projects to (50,50).
    const BinaryMask mask = build_moving_mask(view, {Vec3(0, 0, 2)});

    // Brute-force composition on the impulse.
    BinaryMask expected(101, 101);
    expected.set(50, 50, true);
    expected = dilate_box(expected, 5);
    expected = dilate_disk(expected, 10);
    expected = erode_disk(expected, 7);
    REQUIRE(mask.bits.size() == expected.bits.size());
    CHECK(mask.bits == expected.bits);
    CHECK(mask.count() > 0);
    CHECK(mask.get(50, 50));
  }

  SECTION("two projected points 4 px apart fuse into one blob") {
    // Points at depth 2 with x spaced to land 4 px apart.
    const BinaryMask mask = build_moving_mask(view, {Vec3(0, 0, 2), Vec3(0.08, 0, 2)});
    CHECK(connected_mask_components(mask) == 1);
  }
}

TEST_CASE("reproject: self-pair identity on the domain") {
  WallScene ws = make_wall_scene(8, true, {Vec3(0, 0, 0)});
  const Reprojection rep = reproject(ws.wall, ws.views[0], ws.views[0]);
  size_t on_domain = 0;
  double worst = 0;
  for (int y = 0; y < rep.image.height; ++y)
    for (int x = 0; x < rep.image.width; ++x) {
      if (!rep.omega.get(x, y)) continue;
      ++on_domain;
      worst = std::max(worst, std::abs(rep.image.at(x, y) - ws.views[0].image.at(x, y)));
    }
  REQUIRE(on_domain > 10000);
  CHECK(worst < 1e-6);
}

TEST_CASE("reproject: fronto-parallel wall matches the analytic homography") {
  const double baseline = 0.3, depth = 3.0, focal = 220.0;
  WallScene ws = make_wall_scene(8, true, {Vec3(0, 0, 0), Vec3(baseline, 0, 0)});
  const Reprojection rep = reproject(ws.wall, ws.views[0], ws.views[1]);

  // For a wall at constant depth and a pure horizontal baseline the warp is a
  // constant disparity shift.
  const double disparity = focal * baseline / depth;
  size_t checked = 0;
  double worst = 0;
  for (int y = 1; y < rep.image.height - 1; ++y) {
    for (int x = 1; x < rep.image.width - 1; ++x) {
      if (!rep.omega.get(x, y)) continue;
      const double u_j = x - disparity;
      if (u_j < 0 || u_j > ws.views[1].image.width - 1) continue;
      const double expected = ws.views[1].image.sample(u_j, y);
      worst = std::max(worst, std::abs(rep.image.at(x, y) - expected));
      ++checked;
    }
  }
  REQUIRE(checked > 10000);
  CHECK(worst < 1e-3);
}

TEST_CASE("reproject: mesh behind the cameras yields an empty domain") {
  WallScene ws = make_wall_scene(4, true, {Vec3(0, 0, 0), Vec3(0.3, 0, 0)});
  TriangleMesh behind = ws.wall;
  for (auto& v : behind.vertices) v.z() = -3.0;
  const Reprojection rep = reproject(behind, ws.views[0], ws.views[1]);
  CHECK(rep.omega.count() == 0);
}

TEST_CASE("photo_error: identities and flat-region convention") {
  std::mt19937_64 rng(51);
  std::uniform_real_distribution<double> uni(0.1, 0.9);
  GrayImage img(41, 31);
  for (auto& v : img.data) v = uni(rng);
  const BinaryMask all(41, 31, true);

  SECTION("identical images have zero energy") {
    const PhotoError err = photo_error(img, img, all, 5);
    CHECK(err.energy == Catch::Approx(0.0).margin(1e-9));
  }

  SECTION("affine intensity rescale keeps zero energy") {
    GrayImage scaled = img;
    for (auto& v : scaled.data) v = 0.5 * v + 0.05;
    const PhotoError err = photo_error(img, scaled, all, 5);
    CHECK(err.energy == Catch::Approx(0.0).margin(1e-9));
  }

  SECTION("flat windows contribute nothing") {
    GrayImage flat(41, 31, 0.5);
    const PhotoError err = photo_error(flat, img, all, 5);
    CHECK(err.energy == 0.0);
    CHECK(err.valid_centers == 0);
  }
}

TEST_CASE("photo_error: derivative matches finite differences") {
  std::mt19937_64 rng(52);
  std::uniform_real_distribution<double> uni(0.1, 0.9);
  GrayImage a(25, 25), b(25, 25);
  for (auto& v : a.data) v = uni(rng);
  for (size_t i = 0; i < b.data.size(); ++i) b.data[i] = 0.7 * a.data[i] + 0.2 * uni(rng);
  const BinaryMask all(25, 25, true);
  const PhotoError err = photo_error(a, b, all, 5);

  const double h = 1e-6;
  std::uniform_int_distribution<int> pick(0, 24);
  for (int trial = 0; trial < 40; ++trial) {
    const int x = pick(rng), y = pick(rng);
    GrayImage plus = b, minus = b;
    plus.at(x, y) += h;
    minus.at(x, y) -= h;
    const double fd = (photo_error(a, plus, all, 5).energy -
                       photo_error(a, minus, all, 5).energy) / (2 * h);
    const double an = err.d_second.at(x, y);
    const double scale = std::max({std::abs(fd), std::abs(an), 1e-6});
    INFO("pixel " << x << "," << y << " fd " << fd << " an " << an);
    CHECK(std::abs(fd - an) / scale < 1e-4);
  }
}

TEST_CASE("photo_gradient matches finite differences of the energy") {
  // Oversized textured wall so the images contain no silhouettes; slight
  // vertex perturbation so the gradient is nonzero.
  WallScene ws = make_wall_scene(8, true, {Vec3(0, 0, 0), Vec3(0.4, 0.1, 0)});
  TriangleMesh mesh = ws.wall;
  std::mt19937_64 rng(53);
  std::normal_distribution<double> gauss(0.0, 0.02);
  for (auto& v : mesh.vertices) v.z() += gauss(rng);

  RefineConfig config;
  config.patch_half_width = 5;
  const auto pairs = select_view_pairs(ws.views, config.pairs);
  double energy = 0;
  const auto gradient = photo_gradient(mesh, ws.views, pairs, config, &energy);
  REQUIRE(energy > 0);

  const double h = 1e-5;
  size_t ok = 0, tested = 0;
  for (size_t v = 0; v < mesh.vertices.size(); ++v) {
    Vec3 fd;
    for (int axis = 0; axis < 3; ++axis) {
      TriangleMesh plus = mesh, minus = mesh;
      plus.vertices[v][axis] += h;
      minus.vertices[v][axis] -= h;
      fd[axis] = (photo_energy(plus, ws.views, pairs, config.patch_half_width) -
                  photo_energy(minus, ws.views, pairs, config.patch_half_width)) /
                 (2 * h);
    }
    const double scale = std::max({fd.norm(), gradient[v].norm()});
    if (scale < 1e-8) continue;  // no photometric support (outside both images)
    ++tested;
    if ((fd - gradient[v]).norm() / scale <= 1e-2) ++ok;
  }
  REQUIRE(tested >= 40);
  INFO("gradient agreement " << ok << "/" << tested);
  CHECK(static_cast<double>(ok) / tested >= 0.95);
}

TEST_CASE("mask soundness: masked pixels contribute exactly zero") {
  WallScene ws = make_wall_scene(6, true, {Vec3(0, 0, 0), Vec3(0.4, 0, 0)});
  TriangleMesh mesh = ws.wall;
  std::mt19937_64 rng(54);
  std::normal_distribution<double> gauss(0.0, 0.02);
  for (auto& v : mesh.vertices) v.z() += gauss(rng);

  RefineConfig config;
  const auto pairs = select_view_pairs(ws.views, config.pairs);
  double e0 = 0;
  const auto g0 = photo_gradient(mesh, ws.views, pairs, config, &e0);

  SECTION("toggling an unmasked pixel changes energy and gradient") {
    auto views = ws.views;
    views[0].moving_mask.set(views[0].width() / 2, views[0].height() / 2, true);
    double e1 = 0;
    const auto g1 = photo_gradient(mesh, views, pairs, config, &e1);
    CHECK(e1 != e0);
    double diff = 0;
    for (size_t v = 0; v < g0.size(); ++v) diff += (g1[v] - g0[v]).norm();
    CHECK(diff > 0);
  }

  SECTION("intensity changes under the mask have no effect") {
    auto views = ws.views;
    // Mask a block in view 0 and scribble over the masked image region.
    for (int y = 100; y < 130; ++y)
      for (int x = 140; x < 180; ++x) views[0].moving_mask.set(x, y, true);
    double e1 = 0;
    const auto g1 = photo_gradient(mesh, views, pairs, config, &e1);

    auto scribbled = views;
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (int y = 100; y < 130; ++y)
      for (int x = 140; x < 180; ++x) scribbled[0].image.at(x, y) = uni(rng);
    double e2 = 0;
    const auto g2 = photo_gradient(mesh, scribbled, pairs, config, &e2);
    CHECK(e2 == e1);
    for (size_t v = 0; v < g1.size(); ++v) CHECK((g2[v] - g1[v]).norm() == 0.0);
  }
}

TEST_CASE("umbrella_step properties") {
  SECTION("vertex at the centroid of a symmetric ring stays put") {
    TriangleMesh mesh;
    mesh.vertices.push_back(Vec3(0, 0, 0));  // center
    const int n = 6;
    for (int i = 0; i < n; ++i) {
      const double a = 2 * M_PI * i / n;
      mesh.vertices.emplace_back(std::cos(a), std::sin(a), 0.0);
    }
    for (int i = 0; i < n; ++i) mesh.faces.push_back({0, 1 + i, 1 + (i + 1) % n});
    const auto rings = mesh.vertex_one_rings();
    const auto disp = umbrella_step(mesh, rings, 1.0);
    CHECK(disp[0].norm() < 1e-12);
  }

  SECTION("displaced vertex returns to the ring mean at lambda 1") {
    TriangleMesh mesh;
    mesh.vertices.push_back(Vec3(0, 0, 0.37));
    const int n = 6;
    for (int i = 0; i < n; ++i) {
      const double a = 2 * M_PI * i / n;
      mesh.vertices.emplace_back(std::cos(a), std::sin(a), 0.0);
    }
    for (int i = 0; i < n; ++i) mesh.faces.push_back({0, 1 + i, 1 + (i + 1) % n});
    const auto rings = mesh.vertex_one_rings();
    const auto disp = umbrella_step(mesh, rings, 1.0);
    CHECK((disp[0] - Vec3(0, 0, -0.37)).norm() < 1e-12);
  }

  SECTION("repeated smoothing never increases the deviation from a plane") {
    TriangleMesh mesh = make_grid_mesh(Vec3(0, 0, 0), Vec3(4, 0, 0), Vec3(0, 4, 0), 10, 10);
    std::mt19937_64 rng(55);
    std::normal_distribution<double> gauss(0.0, 0.05);
    for (auto& v : mesh.vertices) v.z() += gauss(rng);
    const auto rings = mesh.vertex_one_rings();
    double prev = std::numeric_limits<double>::max();
    for (int iter = 0; iter < 20; ++iter) {
      double worst = 0;
      for (const auto& v : mesh.vertices) worst = std::max(worst, std::abs(v.z()));
      CHECK(worst <= prev + 1e-12);
      prev = worst;
      const auto disp = umbrella_step(mesh, rings, 1.0);
      for (size_t i = 0; i < mesh.vertices.size(); ++i) mesh.vertices[i] += disp[i];
    }
  }

  SECTION("isolated vertex gets zero displacement") {
    TriangleMesh mesh;
    mesh.vertices = {Vec3(5, 5, 5), Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
    mesh.faces = {{1, 2, 3}};
    const auto rings = mesh.vertex_one_rings();
    CHECK(umbrella_step(mesh, rings, 1.0)[0].norm() == 0.0);
  }
}

TEST_CASE("refine: photoconsistent input barely moves") {
  WallScene ws = make_wall_scene(8, true, {Vec3(0, 0, 0), Vec3(0.4, 0, 0)});
  RefineConfig config;
  config.iterations = 5;
  config.smooth = 0.0;  // isolate the photometric term
  const RefineResult result = refine(ws.wall, ws.views, config);
  CHECK_FALSE(result.aborted);
  double worst = 0;
  for (size_t v = 0; v < ws.wall.vertices.size(); ++v)
    worst = std::max(worst, (result.mesh.vertices[v] - ws.wall.vertices[v]).norm());
  CHECK(worst < 1e-4);
}

TEST_CASE("refine: recovers a noise-perturbed wall") {
  // Wall fully visible from three cameras; photometric + umbrella descent
  // must cut the mean surface error at least in half.
  WallScene ws = make_wall_scene(12, false,
                                 {Vec3(0, 0, 0), Vec3(0.5, 0.1, 0), Vec3(-0.4, -0.1, 0)},
                                 400, 300, 260.0);
  TriangleMesh noisy = ws.wall;
  std::mt19937_64 rng(56);
  std::normal_distribution<double> gauss(0.0, 0.05);
  for (auto& v : noisy.vertices) v.z() += gauss(rng);

  const auto samples = sample_surface(ws.wall, 4000, 3);
  auto mean_error = [&](const TriangleMesh& m) {
    const TriangleBvh bvh(m);
    double sum = 0;
    for (const auto& s : samples) sum += bvh.nearest_distance(s);
    return sum / samples.size();
  };
  const double before = mean_error(noisy);
  REQUIRE(before > 0.02);

  RefineConfig config;
  config.iterations = 30;
  config.step = 0.02;
  config.smooth = 0.3;
  const RefineResult result = refine(noisy, ws.views, config);
  CHECK_FALSE(result.aborted);
  const double after = mean_error(result.mesh);
  INFO("mean error " << before << " -> " << after);
  CHECK(after <= 0.5 * before);

  // Energy trace is non-increasing across accepted iterations.
  for (size_t i = 1; i < result.energy_trace.size(); ++i)
    CHECK(result.energy_trace[i] <= result.energy_trace[i - 1] + 1e-12);
}
