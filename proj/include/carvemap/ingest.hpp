#pragma once

#include <json.hpp>

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "carvemap/core.hpp"
#include "carvemap/image_io.hpp"
#include "carvemap/mesh_io.hpp"
#include "carvemap/parallel.hpp"
#include "carvemap/raster.hpp"
#include "carvemap/spatial.hpp"

namespace carvemap {

// ---------------------------------------------------------------------------
// Dataset loading (KITTI-like layout)
//
//   scans/NNNNNN.bin   little-endian float32 x,y,z,reflectance quadruples
//   images/NNNNNN.png  (or .pgm) grayscale frames
//   calib.txt          "K: fx fy cx cy" and "Tr_lidar_cam:" 12 row-major floats
//   poses.txt          optional, one world<-sensor 3x4 row-major pose per line

struct RawScan {
  std::vector<Vec3> points;      // sensor frame
  std::vector<int> raw_indices;  // index in the file before NaN filtering
};

struct Calibration {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  RigidTransform lidar_to_cam;
};

struct Dataset {
  std::vector<RawScan> scans;
  std::vector<GrayImage> frames;
  Calibration calib;
  std::vector<RigidTransform> gt_poses;  // empty if poses.txt absent
  size_t nan_dropped = 0;
};

namespace ingest_detail {

inline std::vector<std::filesystem::path> sorted_files(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline RigidTransform parse_pose_row(const std::vector<double>& v) {
  if (v.size() != 12) throw Error("pose line must have 12 values");
  RigidTransform t;
  t.rotation << v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10];
  t.translation = Vec3(v[3], v[7], v[11]);
  return t;
}

}  // namespace ingest_detail

inline RawScan read_scan_bin(const std::string& path, size_t* nan_dropped = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read scan file: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % (4 * sizeof(float)) != 0)
    throw Error("cannot read scan file (bad size): " + path);
  const size_t n = bytes.size() / (4 * sizeof(float));
  const float* f = reinterpret_cast<const float*>(bytes.data());
  RawScan scan;
  scan.points.reserve(n);
  scan.raw_indices.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const Vec3 p(f[4 * i], f[4 * i + 1], f[4 * i + 2]);
    if (!is_finite(p)) {
      if (nan_dropped) ++*nan_dropped;
      continue;
    }
    scan.points.push_back(p);
    scan.raw_indices.push_back(static_cast<int>(i));
  }
  return scan;
}

inline void write_scan_bin(const std::string& path, const std::vector<Vec3>& points) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write scan file: " + path);
  for (const auto& p : points) {
    const float row[4] = {static_cast<float>(p.x()), static_cast<float>(p.y()),
                          static_cast<float>(p.z()), 0.0f};
    out.write(reinterpret_cast<const char*>(row), sizeof(row));
  }
}

inline Calibration read_calib(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("calibration not found: " + path);
  Calibration calib;
  bool have_k = false, have_tr = false;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "K:") {
      ss >> calib.fx >> calib.fy >> calib.cx >> calib.cy;
      have_k = true;
    } else if (tag == "Tr_lidar_cam:") {
      std::vector<double> v(12);
      for (double& x : v) ss >> x;
      calib.lidar_to_cam = ingest_detail::parse_pose_row(v);
      have_tr = true;
    }
  }
  if (!have_k || !have_tr) throw Error("calibration incomplete: " + path);
  return calib;
}

inline std::vector<RigidTransform> read_poses(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read poses: " + path);
  std::vector<RigidTransform> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<double> v;
    double x;
    while (ss >> x) v.push_back(x);
    poses.push_back(ingest_detail::parse_pose_row(v));
  }
  return poses;
}

inline void write_poses(const std::string& path, const std::vector<RigidTransform>& poses) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write poses: " + path);
  char buf[64];
  for (const auto& p : poses) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) {
        const double v = c < 3 ? p.rotation(r, c) : p.translation[r];
        std::snprintf(buf, sizeof(buf), "%.12g", v);
        out << buf << (r == 2 && c == 3 ? "" : " ");
      }
    }
    out << "\n";
  }
}

inline Dataset load_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  const fs::path base(root);
  Dataset ds;
  ds.calib = read_calib((base / "calib.txt").string());

  const auto scan_files = ingest_detail::sorted_files(base / "scans");
  const auto image_files = ingest_detail::sorted_files(base / "images");
  if (scan_files.empty()) throw Error("no scans found under " + root);
  if (scan_files.size() != image_files.size())
    throw Error("scan/image count mismatch: " + std::to_string(scan_files.size()) + " vs " +
                std::to_string(image_files.size()));

  for (const auto& f : scan_files) ds.scans.push_back(read_scan_bin(f.string(), &ds.nan_dropped));
  for (const auto& f : image_files) ds.frames.push_back(read_gray_image(f.string()));

  if (fs::exists(base / "poses.txt")) {
    ds.gt_poses = read_poses((base / "poses.txt").string());
    if (ds.gt_poses.size() != ds.scans.size())
      throw Error("poses.txt entry count does not match scan count");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Keyframed rigid trajectory; translation is interpolated linearly and
/// rotation by quaternion slerp between surrounding keys.
struct Trajectory {
  std::vector<double> times;
  std::vector<RigidTransform> keys;

  RigidTransform at(double t) const {
    if (keys.empty()) throw Error("trajectory has no keys");
    if (keys.size() == 1 || t <= times.front()) return keys.front();
    if (t >= times.back()) return keys.back();
    size_t hi = 1;
    while (times[hi] < t) ++hi;
    const size_t lo = hi - 1;
    const double span = times[hi] - times[lo];
    const double a = span > 0 ? (t - times[lo]) / span : 0.0;
    RigidTransform out;
    out.translation = (1 - a) * keys[lo].translation + a * keys[hi].translation;
    Eigen::Quaterniond qa(keys[lo].rotation), qb(keys[hi].rotation);
    out.rotation = qa.slerp(a, qb).toRotationMatrix();
    return out;
  }

  bool covers(double t0, double t1) const {
    return !times.empty() && times.front() <= t0 && times.back() >= t1;
  }
};

/// Spherical lidar ray fan. Azimuth spans the full circle, elevation spans
/// [fov_down, fov_up]; angles in radians.
struct LidarModel {
  int n_azimuth = 360;
  int n_elevation = 32;
  double fov_up = 0.26;
  double fov_down = -0.45;
  double max_range = 80.0;
  double noise_sigma = 0.0;

  double azimuth_step() const { return 2.0 * M_PI / n_azimuth; }
  double elevation_step() const {
    return n_elevation > 1 ? (fov_up - fov_down) / (n_elevation - 1) : 0.0;
  }

  /// Direction of beam (ia, ie) in the sensor frame.
  Vec3 direction(int ia, int ie) const {
    const double az = ia * azimuth_step();
    const double el = n_elevation > 1 ? fov_down + ie * elevation_step()
                                      : 0.5 * (fov_down + fov_up);
    return Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
  }
};

struct SceneObject {
  TriangleMesh mesh;
  std::vector<double> face_albedo;
};

struct MovingObject {
  SceneObject object;
  Trajectory trajectory;
};

struct SyntheticScene {
  std::vector<SceneObject> static_objects;
  std::vector<MovingObject> moving_objects;
  Trajectory sensor_trajectory;
  LidarModel lidar;
  // Pinhole camera rigidly mounted on the sensor.
  double cam_fx = 500, cam_fy = 500, cam_cx = 320, cam_cy = 240;
  int cam_width = 640, cam_height = 480;
  RigidTransform lidar_to_cam;
  int timesteps = 1;

  /// Union of the static geometry (the reconstruction target).
  TriangleMesh ground_truth_mesh() const {
    TriangleMesh out;
    for (const auto& obj : static_objects) {
      const int base = static_cast<int>(out.vertices.size());
      out.vertices.insert(out.vertices.end(), obj.mesh.vertices.begin(), obj.mesh.vertices.end());
      for (const auto& f : obj.mesh.faces)
        out.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
    }
    return out;
  }

  CameraView camera_at(double t) const {
    CameraView view;
    view.fx = cam_fx;
    view.fy = cam_fy;
    view.cx = cam_cx;
    view.cy = cam_cy;
    view.pose = lidar_to_cam * sensor_trajectory.at(t).inverse();
    view.image = GrayImage(cam_width, cam_height);
    return view;
  }
};

/// Deterministic per-face albedo in [0.15, 0.85]; gives the photometric terms
/// gradient signal that a constant-albedo scene would not.
inline double hash_albedo(uint64_t seed, uint64_t face) {
  uint64_t x = seed * 0x9e3779b97f4a7c15ull + face + 1;
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return 0.15 + 0.7 * (static_cast<double>(x >> 11) / 9007199254740992.0);
}

inline SceneObject make_object(TriangleMesh mesh, const std::string& albedo_mode,
                               double albedo_value, uint64_t seed) {
  SceneObject obj;
  obj.face_albedo.resize(mesh.faces.size());
  if (albedo_mode == "constant") {
    std::fill(obj.face_albedo.begin(), obj.face_albedo.end(), albedo_value);
  } else {  // "hash"
    for (size_t i = 0; i < obj.face_albedo.size(); ++i)
      obj.face_albedo[i] = hash_albedo(seed, i);
  }
  obj.mesh = std::move(mesh);
  return obj;
}

// --- procedural meshes for scenes and tests -------------------------------

inline TriangleMesh make_box_mesh(const Vec3& center, const Vec3& size, bool inward = false) {
  const Vec3 h = 0.5 * size;
  TriangleMesh m;
  m.vertices = {center + Vec3(-h.x(), -h.y(), -h.z()), center + Vec3(h.x(), -h.y(), -h.z()),
                center + Vec3(h.x(), h.y(), -h.z()),   center + Vec3(-h.x(), h.y(), -h.z()),
                center + Vec3(-h.x(), -h.y(), h.z()),  center + Vec3(h.x(), -h.y(), h.z()),
                center + Vec3(h.x(), h.y(), h.z()),    center + Vec3(-h.x(), h.y(), h.z())};
  // Outward-facing winding.
  const int quads[6][4] = {{0, 3, 2, 1}, {4, 5, 6, 7}, {0, 1, 5, 4},
                           {2, 3, 7, 6}, {1, 2, 6, 5}, {3, 0, 4, 7}};
  for (const auto& q : quads) {
    if (!inward) {
      m.faces.push_back({q[0], q[1], q[2]});
      m.faces.push_back({q[0], q[2], q[3]});
    } else {
      m.faces.push_back({q[0], q[2], q[1]});
      m.faces.push_back({q[0], q[3], q[2]});
    }
  }
  return m;
}

inline TriangleMesh make_uv_sphere(const Vec3& center, double radius, int n_lat = 12,
                                   int n_lon = 18) {
  TriangleMesh m;
  m.vertices.push_back(center + Vec3(0, 0, radius));   // north pole
  for (int i = 1; i < n_lat; ++i) {
    const double phi = M_PI * i / n_lat;
    for (int j = 0; j < n_lon; ++j) {
      const double th = 2 * M_PI * j / n_lon;
      m.vertices.push_back(center + radius * Vec3(std::sin(phi) * std::cos(th),
                                                  std::sin(phi) * std::sin(th), std::cos(phi)));
    }
  }
  m.vertices.push_back(center + Vec3(0, 0, -radius));  // south pole
  const int south = static_cast<int>(m.vertices.size()) - 1;
  auto ring = [&](int i, int j) { return 1 + (i - 1) * n_lon + (j % n_lon); };
  for (int j = 0; j < n_lon; ++j) m.faces.push_back({0, ring(1, j), ring(1, j + 1)});
  for (int i = 1; i < n_lat - 1; ++i) {
    for (int j = 0; j < n_lon; ++j) {
      m.faces.push_back({ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)});
      m.faces.push_back({ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)});
    }
  }
  for (int j = 0; j < n_lon; ++j) m.faces.push_back({south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)});
  return m;
}

/// Planar grid in the plane spanned by (u_axis, v_axis) through origin_corner.
inline TriangleMesh make_grid_mesh(const Vec3& origin_corner, const Vec3& u_axis,
                                   const Vec3& v_axis, int nu, int nv) {
  TriangleMesh m;
  for (int j = 0; j <= nv; ++j)
    for (int i = 0; i <= nu; ++i)
      m.vertices.push_back(origin_corner + u_axis * (static_cast<double>(i) / nu) +
                           v_axis * (static_cast<double>(j) / nv));
  auto vid = [&](int i, int j) { return j * (nu + 1) + i; };
  for (int j = 0; j < nv; ++j) {
    for (int i = 0; i < nu; ++i) {
      m.faces.push_back({vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)});
      m.faces.push_back({vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)});
    }
  }
  return m;
}

// --- simulation ------------------------------------------------------------

struct SimulatedScan {
  std::vector<Vec3> points_sensor;  // sensor-frame coordinates
  std::vector<Vec3> points_world;
  std::vector<uint8_t> moving;      // ground-truth label per point
  RigidTransform sensor_pose;       // world <- sensor
};

namespace ingest_detail {

struct SceneGeometry {
  // Meshes instantiated at one timestep, with BVHs and albedo lookups.
  std::vector<TriangleMesh> meshes;
  std::vector<std::vector<double>> albedo;
  std::vector<uint8_t> is_moving;
  std::vector<TriangleBvh> bvhs;
};

inline SceneGeometry instantiate(const SyntheticScene& scene, double t) {
  SceneGeometry geo;
  for (const auto& obj : scene.static_objects) {
    geo.meshes.push_back(obj.mesh);
    geo.albedo.push_back(obj.face_albedo);
    geo.is_moving.push_back(0);
  }
  for (const auto& mov : scene.moving_objects) {
    const RigidTransform pose = mov.trajectory.at(t);
    TriangleMesh m = mov.object.mesh;
    for (auto& v : m.vertices) v = pose.apply(v);
    geo.meshes.push_back(std::move(m));
    geo.albedo.push_back(mov.object.face_albedo);
    geo.is_moving.push_back(1);
  }
  geo.bvhs.reserve(geo.meshes.size());
  for (const auto& m : geo.meshes) geo.bvhs.emplace_back(m);
  return geo;
}

}  // namespace ingest_detail

/// Cast the lidar fan at one timestep. Each beam keeps its first intersection
/// with the static-or-moving geometry; hits on moving objects are labeled.
inline SimulatedScan simulate_scan(const SyntheticScene& scene, int timestep,
                                   const LidarModel& lidar, double max_range) {
  if (timestep < 0 || timestep >= scene.timesteps) throw Error("simulate_scan: timestep out of range");
  const auto geo = ingest_detail::instantiate(scene, timestep);
  SimulatedScan out;
  out.sensor_pose = scene.sensor_trajectory.at(timestep);
  const Vec3 origin = out.sensor_pose.translation;

  const size_t n_rays = static_cast<size_t>(lidar.n_azimuth) * lidar.n_elevation;
  std::vector<Vec3> hits(n_rays, Vec3::Zero());
  std::vector<int8_t> hit_kind(n_rays, -1);  // -1 miss, 0 static, 1 moving

  parallel_chunks(n_rays, [&](size_t begin, size_t end) {
    for (size_t k = begin; k < end; ++k) {
      const int ia = static_cast<int>(k) / lidar.n_elevation;
      const int ie = static_cast<int>(k) % lidar.n_elevation;
      const Vec3 dir = out.sensor_pose.rotation * lidar.direction(ia, ie);
      double best_t = max_range;
      int best_obj = -1;
      for (size_t m = 0; m < geo.bvhs.size(); ++m) {
        if (auto hit = geo.bvhs[m].raycast(origin, dir, best_t)) {
          best_t = hit->t;
          best_obj = static_cast<int>(m);
        }
      }
      if (best_obj >= 0) {
        hits[k] = origin + best_t * dir;
        hit_kind[k] = geo.is_moving[best_obj] ? 1 : 0;
      }
    }
  });

  // Optional Gaussian range noise, deterministic per timestep.
  std::mt19937_64 rng(0xc0ffee123456789ull + static_cast<uint64_t>(timestep));
  std::normal_distribution<double> gauss(0.0, 1.0);
  const RigidTransform world_to_sensor = out.sensor_pose.inverse();
  for (size_t k = 0; k < n_rays; ++k) {
    // The noise draw happens for every beam so that beam order never shifts
    // the RNG stream consumed by later beams.
    const double dn = lidar.noise_sigma > 0 ? gauss(rng) * lidar.noise_sigma : 0.0;
    if (hit_kind[k] < 0) continue;
    Vec3 p = hits[k];
    if (dn != 0.0) p += (p - origin).normalized() * dn;
    out.points_world.push_back(p);
    out.points_sensor.push_back(world_to_sensor.apply(p));
    out.moving.push_back(hit_kind[k] == 1 ? 1 : 0);
  }
  return out;
}

/// Lambertian-flat rendering: each pixel takes the albedo of the nearest
/// surface; the background stays 0.
inline GrayImage render_view(const SyntheticScene& scene, const CameraView& view, int timestep) {
  const auto geo = ingest_detail::instantiate(scene, timestep);
  // Merge into one mesh so a single z-buffer resolves the occlusions.
  TriangleMesh merged;
  std::vector<double> merged_albedo;
  for (size_t m = 0; m < geo.meshes.size(); ++m) {
    const int base = static_cast<int>(merged.vertices.size());
    merged.vertices.insert(merged.vertices.end(), geo.meshes[m].vertices.begin(),
                           geo.meshes[m].vertices.end());
    for (size_t fi = 0; fi < geo.meshes[m].faces.size(); ++fi) {
      const auto& f = geo.meshes[m].faces[fi];
      merged.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
      merged_albedo.push_back(geo.albedo[m][fi]);
    }
  }
  const RasterBuffers buf = rasterize(merged, view);
  GrayImage img(view.width(), view.height());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (buf.hit(x, y)) img.at(x, y) = merged_albedo[buf.face[buf.index(x, y)]];
  return img;
}

/// Area-weighted uniform sampling of a mesh surface (deterministic).
inline std::vector<Vec3> sample_surface(const TriangleMesh& mesh, size_t n, uint64_t seed = 7) {
  std::vector<double> cumulative;
  cumulative.reserve(mesh.faces.size());
  double total = 0;
  for (const auto& f : mesh.faces) {
    total += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
    cumulative.push_back(total);
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const double r = uni(rng) * total;
    const size_t fi = std::lower_bound(cumulative.begin(), cumulative.end(), r) -
                      cumulative.begin();
    const auto& f = mesh.faces[std::min(fi, mesh.faces.size() - 1)];
    double a = uni(rng), b = uni(rng);
    if (a + b > 1) {
      a = 1 - a;
      b = 1 - b;
    }
    out.push_back((1 - a - b) * mesh.vertices[f[0]] + a * mesh.vertices[f[1]] +
                  b * mesh.vertices[f[2]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene description files (JSON; meshes referenced as OBJ paths)

inline RigidTransform transform_from_json(const nlohmann::json& j) {
  RigidTransform t;
  if (j.contains("translation")) {
    const auto& v = j["translation"];
    t.translation = Vec3(v[0], v[1], v[2]);
  }
  if (j.contains("rotation")) {
    const auto& v = j["rotation"];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) t.rotation(r, c) = v[3 * r + c];
  }
  return t;
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory traj;
  for (const auto& key : j) {
    traj.times.push_back(key.value("t", 0.0));
    traj.keys.push_back(transform_from_json(key));
  }
  return traj;
}

inline SyntheticScene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open scene file: " + path);
  nlohmann::json j;
  in >> j;
  const std::filesystem::path base = std::filesystem::path(path).parent_path();

  SyntheticScene scene;
  scene.timesteps = j.value("timesteps", 1);
  if (j.contains("lidar")) {
    const auto& l = j["lidar"];
    scene.lidar.n_azimuth = l.value("n_azimuth", scene.lidar.n_azimuth);
    scene.lidar.n_elevation = l.value("n_elevation", scene.lidar.n_elevation);
    scene.lidar.fov_up = l.value("fov_up_deg", scene.lidar.fov_up * 180.0 / M_PI) * M_PI / 180.0;
    scene.lidar.fov_down =
        l.value("fov_down_deg", scene.lidar.fov_down * 180.0 / M_PI) * M_PI / 180.0;
    scene.lidar.max_range = l.value("max_range", scene.lidar.max_range);
    scene.lidar.noise_sigma = l.value("noise_sigma", 0.0);
  }
  if (j.contains("camera")) {
    const auto& c = j["camera"];
    scene.cam_fx = c.value("fx", scene.cam_fx);
    scene.cam_fy = c.value("fy", scene.cam_fy);
    scene.cam_cx = c.value("cx", scene.cam_cx);
    scene.cam_cy = c.value("cy", scene.cam_cy);
    scene.cam_width = c.value("width", scene.cam_width);
    scene.cam_height = c.value("height", scene.cam_height);
    if (c.contains("lidar_to_cam")) {
      std::vector<double> v = c["lidar_to_cam"].get<std::vector<double>>();
      scene.lidar_to_cam = ingest_detail::parse_pose_row(v);
    }
  }
  uint64_t albedo_seed = j.value("albedo_seed", 1);
  auto load_object = [&](const nlohmann::json& o, uint64_t seed) {
    TriangleMesh mesh = read_obj((base / o["obj"].get<std::string>()).string());
    return make_object(std::move(mesh), o.value("albedo", "hash"), o.value("albedo_value", 0.5),
                       seed);
  };
  uint64_t seed = albedo_seed;
  for (const auto& o : j.value("static", nlohmann::json::array()))
    scene.static_objects.push_back(load_object(o, seed++));
  for (const auto& o : j.value("moving", nlohmann::json::array())) {
    MovingObject mov;
    mov.object = load_object(o, seed++);
    mov.trajectory = trajectory_from_json(o["trajectory"]);
    scene.moving_objects.push_back(std::move(mov));
  }
  if (!j.contains("sensor_trajectory")) throw Error("scene file lacks sensor_trajectory");
  scene.sensor_trajectory = trajectory_from_json(j["sensor_trajectory"]);
  for (const auto& mov : scene.moving_objects)
    if (!mov.trajectory.covers(0, scene.timesteps - 1))
      throw Error("moving object trajectory does not cover all timesteps");
  if (!scene.sensor_trajectory.covers(0, scene.timesteps - 1))
    throw Error("sensor trajectory does not cover all timesteps");
  return scene;
}

/// Materialize a synthetic scene as an on-disk dataset in the KITTI-like
/// layout, together with ground-truth artifacts under gt/ (surface mesh,
/// surface samples, per-scan moving labels).
inline void write_synth_dataset(const SyntheticScene& scene, const std::string& outdir,
                                size_t gt_samples = 60000) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(outdir) / "scans");
  fs::create_directories(fs::path(outdir) / "images");
  fs::create_directories(fs::path(outdir) / "gt" / "labels");

  std::ofstream calib((fs::path(outdir) / "calib.txt").string());
  calib << "K: " << scene.cam_fx << " " << scene.cam_fy << " " << scene.cam_cx << " "
        << scene.cam_cy << "\n";
  calib << "Tr_lidar_cam:";
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      calib << " "
            << (c < 3 ? scene.lidar_to_cam.rotation(r, c) : scene.lidar_to_cam.translation[r]);
  calib << "\n";
  calib.close();

  std::vector<RigidTransform> poses;
  char name[32];
  for (int t = 0; t < scene.timesteps; ++t) {
    const SimulatedScan scan = simulate_scan(scene, t, scene.lidar, scene.lidar.max_range);
    poses.push_back(scan.sensor_pose);
    std::snprintf(name, sizeof(name), "%06d", t);
    write_scan_bin((fs::path(outdir) / "scans" / (std::string(name) + ".bin")).string(),
                   scan.points_sensor);
    CameraView view = scene.camera_at(t);
    view.image = render_view(scene, view, t);
    write_png((fs::path(outdir) / "images" / (std::string(name) + ".png")).string(), view.image);
    std::ofstream labels((fs::path(outdir) / "gt" / "labels" / (std::string(name) + ".txt")).string());
    for (uint8_t m : scan.moving) labels << int(m) << "\n";
  }
  write_poses((fs::path(outdir) / "poses.txt").string(), poses);

  const TriangleMesh gt = scene.ground_truth_mesh();
  write_ply((fs::path(outdir) / "gt" / "surface.ply").string(), gt);
  write_ply_points((fs::path(outdir) / "gt" / "surface_samples.ply").string(),
                   sample_surface(gt, gt_samples));
}

}  // namespace carvemap
