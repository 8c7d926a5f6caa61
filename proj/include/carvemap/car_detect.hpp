#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include "carvemap/core.hpp"

namespace carvemap {

struct CarDetectOptions {
  double cell = 0.1;          // occupancy grid resolution, meters
  double height_cutoff = 2.2; // cells containing taller points are emptied
  double rho_min = 1.5;       // circumscribing radius bounds, meters
  double rho_max = 5.5;
  double ratio_min = 1.2 / 5.0;  // width/length bounds
  double ratio_max = 3.5 / 5.0;
  double ramp_angle = M_PI / 6;  // first/third silhouette bins
  double flat_angle = M_PI / 3;  // middle bin magnitude bound
};

/// Detected parked-car cluster: member points plus the oriented footprint.
struct CarCluster {
  std::vector<int> member_points;  // indices into the input cloud
  Vec2 center = Vec2::Zero();
  double length = 0.0;  // >= width
  double width = 0.0;
  double yaw = 0.0;     // orientation of the length axis
  double rho = 0.0;     // circumscribing radius

  Vec2 long_axis() const { return {std::cos(yaw), std::sin(yaw)}; }
};

using GroundHeightFn = std::function<double(double, double)>;

// ---------------------------------------------------------------------------
// Occupancy grid rasterization

struct CandidateRegions {
  double cell = 0.1;
  std::vector<std::vector<int>> regions;  // member point indices per region
};

/// Project the cloud on the ground plane into cell x cell bins, drop every
/// cell containing a point above the height cutoff, close small gaps with a
/// 3x3 morphological closure and return the 8-connected regions.
inline CandidateRegions rasterize_candidates(const std::vector<Vec3>& cloud,
                                             const GroundHeightFn& ground_height,
                                             const CarDetectOptions& opt = {}) {
  CandidateRegions out;
  out.cell = opt.cell;
  if (cloud.empty()) return out;

  std::map<std::pair<int64_t, int64_t>, std::vector<int>> cells;
  std::set<std::pair<int64_t, int64_t>> too_tall;
  for (size_t i = 0; i < cloud.size(); ++i) {
    const std::pair<int64_t, int64_t> key{
        static_cast<int64_t>(std::floor(cloud[i].x() / opt.cell)),
        static_cast<int64_t>(std::floor(cloud[i].y() / opt.cell))};
    cells[key].push_back(static_cast<int>(i));
    const double h = cloud[i].z() - ground_height(cloud[i].x(), cloud[i].y());
    if (h > opt.height_cutoff) too_tall.insert(key);
  }
  for (const auto& key : too_tall) cells.erase(key);
  if (cells.empty()) return out;

  // Dense bitmap over the occupied bounding box (1-cell border for the
  // morphology).
  int64_t x0 = cells.begin()->first.first, x1 = x0;
  int64_t y0 = cells.begin()->first.second, y1 = y0;
  for (const auto& [key, idx] : cells) {
    x0 = std::min(x0, key.first);
    x1 = std::max(x1, key.first);
    y0 = std::min(y0, key.second);
    y1 = std::max(y1, key.second);
  }
  const int w = static_cast<int>(x1 - x0 + 3);
  const int h = static_cast<int>(y1 - y0 + 3);
  std::vector<uint8_t> bitmap(static_cast<size_t>(w) * h, 0);
  auto at = [&](std::vector<uint8_t>& img, int x, int y) -> uint8_t& {
    return img[static_cast<size_t>(y) * w + x];
  };
  for (const auto& [key, idx] : cells)
    at(bitmap, static_cast<int>(key.first - x0 + 1), static_cast<int>(key.second - y0 + 1)) = 1;

  // 3x3 closure: dilation then erosion.
  auto morph = [&](const std::vector<uint8_t>& src, bool dilate) {
    std::vector<uint8_t> dst(src.size(), 0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        bool hit = !dilate;
        for (int dy = -1; dy <= 1 && (dilate ? !hit : hit); ++dy) {
          for (int dx = -1; dx <= 1 && (dilate ? !hit : hit); ++dx) {
            const int nx = x + dx, ny = y + dy;
            const bool v = nx >= 0 && nx < w && ny >= 0 && ny < h &&
                           src[static_cast<size_t>(ny) * w + nx] != 0;
            if (dilate && v) hit = true;
            if (!dilate && !v) hit = false;
          }
        }
        dst[static_cast<size_t>(y) * w + x] = hit ? 1 : 0;
      }
    }
    return dst;
  };
  std::vector<uint8_t> closed = morph(morph(bitmap, true), false);

  // 8-connected components over the closed bitmap; member points come from
  // the original (pre-closure) cells.
  std::vector<int> component(closed.size(), -1);
  int n_components = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (closed[static_cast<size_t>(y) * w + x] == 0 ||
          component[static_cast<size_t>(y) * w + x] >= 0)
        continue;
      const int id = n_components++;
      std::deque<std::pair<int, int>> queue{{x, y}};
      component[static_cast<size_t>(y) * w + x] = id;
      while (!queue.empty()) {
        const auto [cx, cy] = queue.front();
        queue.pop_front();
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx, ny = cy + dy;
            if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
            const size_t ni = static_cast<size_t>(ny) * w + nx;
            if (closed[ni] == 0 || component[ni] >= 0) continue;
            component[ni] = id;
            queue.emplace_back(nx, ny);
          }
        }
      }
    }
  }

  out.regions.assign(n_components, {});
  for (const auto& [key, idx] : cells) {
    const int x = static_cast<int>(key.first - x0 + 1);
    const int y = static_cast<int>(key.second - y0 + 1);
    const int id = component[static_cast<size_t>(y) * w + x];
    if (id >= 0)
      out.regions[id].insert(out.regions[id].end(), idx.begin(), idx.end());
  }
  // Drop regions that lost all member cells (pure closure fill).
  out.regions.erase(std::remove_if(out.regions.begin(), out.regions.end(),
                                   [](const std::vector<int>& r) { return r.empty(); }),
                    out.regions.end());
  for (auto& r : out.regions) std::sort(r.begin(), r.end());
  return out;
}

// ---------------------------------------------------------------------------
// Oriented bounding box (rotating calipers over the 2D convex hull)

inline std::vector<Vec2> convex_hull_2d(std::vector<Vec2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const Vec2& a, const Vec2& b) { return a == b; }),
            pts.end());
  if (pts.size() < 3) return pts;
  auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  std::vector<Vec2> hull(2 * pts.size());
  size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  const size_t lower = k + 1;
  for (auto it = pts.rbegin(); it != pts.rend(); ++it) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], *it) <= 0) --k;
    hull[k++] = *it;
  }
  hull.resize(k - 1);
  return hull;
}

struct OrientedBox {
  Vec2 center = Vec2::Zero();
  double length = 0.0;  // >= width
  double width = 0.0;
  double yaw = 0.0;
};

/// Minimum-area oriented rectangle of a 2D point set. One side of the optimal
/// rectangle is collinear with a hull edge.
inline OrientedBox min_area_rect(const std::vector<Vec2>& pts) {
  if (pts.empty()) throw Error("min_area_rect: empty region");
  const std::vector<Vec2> hull = convex_hull_2d(pts);
  OrientedBox best;
  double best_area = std::numeric_limits<double>::max();
  const size_t n = hull.size();
  if (n == 1) {
    best.center = hull[0];
    return best;
  }
  for (size_t i = 0; i < n; ++i) {
    const Vec2 e = hull[(i + 1) % n] - hull[i];
    const double len = e.norm();
    if (len < 1e-12) continue;
    const Vec2 u = e / len;
    const Vec2 v(-u.y(), u.x());
    double u0 = std::numeric_limits<double>::max(), u1 = -u0;
    double v0 = u0, v1 = -u0;
    for (const auto& p : hull) {
      const Vec2 d = p - hull[i];
      u0 = std::min(u0, d.dot(u));
      u1 = std::max(u1, d.dot(u));
      v0 = std::min(v0, d.dot(v));
      v1 = std::max(v1, d.dot(v));
    }
    const double a = (u1 - u0) * (v1 - v0);
    if (a < best_area) {
      best_area = a;
      const Vec2 center = hull[i] + u * (0.5 * (u0 + u1)) + v * (0.5 * (v0 + v1));
      double du = u1 - u0, dv = v1 - v0;
      double yaw = std::atan2(u.y(), u.x());
      if (dv > du) {
        std::swap(du, dv);
        yaw = std::atan2(v.y(), v.x());
      }
      best.center = center;
      best.length = du;
      best.width = dv;
      best.yaw = yaw;
    }
  }
  if (best_area == std::numeric_limits<double>::max()) {
    // Degenerate (collinear) set: length along the segment, zero width.
    best.center = 0.5 * (hull.front() + hull.back());
    best.length = (hull.back() - hull.front()).norm();
    best.width = 0.0;
    const Vec2 d = hull.back() - hull.front();
    best.yaw = std::atan2(d.y(), d.x());
  }
  return best;
}

/// Footprint gate: circumscribing radius and aspect ratio within the car
/// template bounds.
inline bool box_filter(const OrientedBox& box, const CarDetectOptions& opt, double* rho_out = nullptr) {
  const double rho = std::hypot(0.5 * box.length, 0.5 * box.width);
  if (rho_out) *rho_out = rho;
  if (!(rho > opt.rho_min && rho < opt.rho_max)) return false;
  if (box.length <= 0.0) return false;
  const double ratio = box.width / box.length;
  return ratio > opt.ratio_min && ratio < opt.ratio_max;
}

// ---------------------------------------------------------------------------
// Silhouette filter

struct SilhouetteStats {
  double bin_angle[3] = {0, 0, 0};
  int columns = 0;
  bool pass = false;
};

/// Side-profile test. Points are projected onto the vertical plane spanned by
/// the box's longest axis: columns run along the length, rows along the
/// height above ground. The rasterized convex hull's column heights form
/// gamma; the discrete derivative of gamma, split into three equal bins, must
/// show an ascending ramp, a near-flat top and a descending ramp.
inline SilhouetteStats silhouette_filter(const std::vector<Vec3>& cloud,
                                         const std::vector<int>& members,
                                         const OrientedBox& box,
                                         const GroundHeightFn& ground_height,
                                         const CarDetectOptions& opt = {}) {
  SilhouetteStats stats;
  const Vec2 axis(std::cos(box.yaw), std::sin(box.yaw));
  std::vector<Vec2> profile;  // (along-length, height) pairs
  profile.reserve(members.size());
  for (int i : members) {
    const Vec3& p = cloud[i];
    const double u = (Vec2(p.x(), p.y()) - box.center).dot(axis);
    const double v = p.z() - ground_height(p.x(), p.y());
    profile.emplace_back(u, v);
  }
  const std::vector<Vec2> hull = convex_hull_2d(profile);
  if (hull.size() < 3) return stats;

  double u_min = hull[0].x(), u_max = hull[0].x();
  for (const auto& p : hull) {
    u_min = std::min(u_min, p.x());
    u_max = std::max(u_max, p.x());
  }
  const int n_cols = static_cast<int>(std::ceil((u_max - u_min) / opt.cell));
  if (n_cols < 3) return stats;

  // gamma: cells per column covered by the hull, by scanline intersection at
  // the column center.
  std::vector<double> gamma(n_cols, 0.0);
  for (int c = 0; c < n_cols; ++c) {
    const double u = u_min + (c + 0.5) * opt.cell;
    double v_lo = std::numeric_limits<double>::max();
    double v_hi = std::numeric_limits<double>::lowest();
    const size_t n = hull.size();
    for (size_t i = 0; i < n; ++i) {
      const Vec2& a = hull[i];
      const Vec2& b = hull[(i + 1) % n];
      if ((a.x() <= u && b.x() >= u) || (b.x() <= u && a.x() >= u)) {
        const double span = b.x() - a.x();
        const double t = std::abs(span) < 1e-12 ? 0.0 : (u - a.x()) / span;
        const double v = a.y() + t * (b.y() - a.y());
        v_lo = std::min(v_lo, v);
        v_hi = std::max(v_hi, v);
        if (std::abs(span) < 1e-12) {
          v_lo = std::min({v_lo, a.y(), b.y()});
          v_hi = std::max({v_hi, a.y(), b.y()});
        }
      }
    }
    if (v_hi >= v_lo) gamma[c] = std::floor((v_hi - v_lo) / opt.cell) + 1.0;
  }

  // Discrete derivative, three equal bins, per-bin mean slope angle. Cells
  // are square, so one gamma step per column is a 45-degree slope.
  const int n_d = n_cols - 1;
  if (n_d < 3) return stats;
  stats.columns = n_cols;
  for (int bin = 0; bin < 3; ++bin) {
    const int begin = bin * n_d / 3;
    const int end = (bin + 1) * n_d / 3;
    double mean = 0.0;
    for (int i = begin; i < end; ++i) mean += gamma[i + 1] - gamma[i];
    mean /= std::max(1, end - begin);
    stats.bin_angle[bin] = std::atan(mean);
  }
  stats.pass = stats.bin_angle[0] >= opt.ramp_angle &&
               std::abs(stats.bin_angle[1]) <= opt.flat_angle &&
               stats.bin_angle[2] <= -opt.ramp_angle;
  return stats;
}

// ---------------------------------------------------------------------------
// Full detector

struct CarDetection {
  std::vector<CarCluster> cars;
  std::vector<int> kept;  // cloud indices not belonging to any car
};

/// Grid / footprint / silhouette cascade. Returns the accepted clusters and
/// the cloud indices that remain after removing their member points.
inline CarDetection detect_cars(const std::vector<Vec3>& cloud,
                                const GroundHeightFn& ground_height,
                                const CarDetectOptions& opt = {}) {
  CarDetection out;
  const CandidateRegions regions = rasterize_candidates(cloud, ground_height, opt);
  std::vector<char> removed(cloud.size(), 0);
  for (const auto& region : regions.regions) {
    std::vector<Vec2> footprint;
    footprint.reserve(region.size());
    for (int i : region) footprint.emplace_back(cloud[i].x(), cloud[i].y());
    const OrientedBox box = min_area_rect(footprint);
    double rho = 0.0;
    if (!box_filter(box, opt, &rho)) continue;
    if (!silhouette_filter(cloud, region, box, ground_height, opt).pass) continue;
    CarCluster cluster;
    cluster.member_points = region;
    cluster.center = box.center;
    cluster.length = box.length;
    cluster.width = box.width;
    cluster.yaw = box.yaw;
    cluster.rho = rho;
    for (int i : region) removed[i] = 1;
    out.cars.push_back(std::move(cluster));
  }
  for (size_t i = 0; i < cloud.size(); ++i)
    if (!removed[i]) out.kept.push_back(static_cast<int>(i));
  return out;
}

// ---------------------------------------------------------------------------
// 3D convex hull (incremental, for car cluster replacement)

/// Watertight triangulated convex hull of a point set. Throws for degenerate
/// (coplanar) input.
inline TriangleMesh convex_hull_3d(const std::vector<Vec3>& points) {
  const size_t n = points.size();
  if (n < 4) throw Error("convex_hull_3d: need at least 4 points");

  // Scale-aware epsilon.
  Vec3 lo = points[0], hi = points[0];
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double eps = std::max((hi - lo).norm(), 1e-9) * 1e-10;

  // Initial simplex from extreme points.
  size_t i0 = 0, i1 = 0;
  for (size_t i = 1; i < n; ++i) {
    if (points[i].x() < points[i0].x()) i0 = i;
    if (points[i].x() > points[i1].x()) i1 = i;
  }
  if ((points[i1] - points[i0]).norm() < eps) throw Error("convex_hull_3d: degenerate input");
  size_t i2 = i0;
  double best = -1;
  for (size_t i = 0; i < n; ++i) {
    const double d = (points[i] - points[i0]).cross(points[i1] - points[i0]).norm();
    if (d > best) {
      best = d;
      i2 = i;
    }
  }
  if (best < eps) throw Error("convex_hull_3d: degenerate input");
  const Vec3 plane_n = (points[i1] - points[i0]).cross(points[i2] - points[i0]).normalized();
  size_t i3 = i0;
  best = -1;
  for (size_t i = 0; i < n; ++i) {
    const double d = std::abs(plane_n.dot(points[i] - points[i0]));
    if (d > best) {
      best = d;
      i3 = i;
    }
  }
  if (best < eps) throw Error("convex_hull_3d: degenerate input");

  struct Face {
    std::array<int, 3> v;
    Vec3 normal;
    double offset;
    bool alive = true;
    std::vector<int> outside;
  };
  std::vector<Face> faces;
  auto make_face = [&](int a, int b, int c, const Vec3& interior) {
    Face f;
    f.v = {a, b, c};
    f.normal = (points[b] - points[a]).cross(points[c] - points[a]);
    const double len = f.normal.norm();
    if (len > 0) f.normal /= len;
    f.offset = f.normal.dot(points[a]);
    if (f.normal.dot(interior) > f.offset) {  // orient outward
      std::swap(f.v[1], f.v[2]);
      f.normal = -f.normal;
      f.offset = -f.offset;
    }
    return f;
  };

  const Vec3 interior =
      (points[i0] + points[i1] + points[i2] + points[i3]) / 4.0;
  const int a = static_cast<int>(i0), b = static_cast<int>(i1), c = static_cast<int>(i2),
            d = static_cast<int>(i3);
  faces.push_back(make_face(a, b, c, interior));
  faces.push_back(make_face(a, b, d, interior));
  faces.push_back(make_face(a, c, d, interior));
  faces.push_back(make_face(b, c, d, interior));

  auto assign_outside = [&](const std::vector<int>& candidates) {
    for (int pi : candidates) {
      double best_d = eps;
      int best_f = -1;
      for (size_t fi = 0; fi < faces.size(); ++fi) {
        if (!faces[fi].alive) continue;
        const double dist = faces[fi].normal.dot(points[pi]) - faces[fi].offset;
        if (dist > best_d) {
          best_d = dist;
          best_f = static_cast<int>(fi);
        }
      }
      if (best_f >= 0) faces[best_f].outside.push_back(pi);
    }
  };
  std::vector<int> all(n);
  for (size_t i = 0; i < n; ++i) all[i] = static_cast<int>(i);
  assign_outside(all);

  // Furthest-point insertion until every face's outside set is empty.
  for (int guard = 0; guard < static_cast<int>(4 * n + 16); ++guard) {
    int src = -1;
    for (size_t fi = 0; fi < faces.size(); ++fi) {
      if (faces[fi].alive && !faces[fi].outside.empty()) {
        src = static_cast<int>(fi);
        break;
      }
    }
    if (src < 0) break;
    const Face& sf = faces[src];
    int apex = sf.outside[0];
    double best_d = -1;
    for (int pi : sf.outside) {
      const double dist = sf.normal.dot(points[pi]) - sf.offset;
      if (dist > best_d) {
        best_d = dist;
        apex = pi;
      }
    }

    // Visible faces and horizon.
    std::vector<int> visible;
    std::vector<int> orphans;
    for (size_t fi = 0; fi < faces.size(); ++fi) {
      if (!faces[fi].alive) continue;
      if (faces[fi].normal.dot(points[apex]) - faces[fi].offset > eps) {
        visible.push_back(static_cast<int>(fi));
        orphans.insert(orphans.end(), faces[fi].outside.begin(), faces[fi].outside.end());
        faces[fi].outside.clear();
      }
    }
    std::map<std::pair<int, int>, std::pair<int, int>> edge_use;  // sorted edge -> (dir a,b)
    std::set<int> visible_set(visible.begin(), visible.end());
    std::vector<std::pair<int, int>> horizon;  // directed edges of visible region boundary
    for (int fi : visible) {
      for (int e = 0; e < 3; ++e) {
        const int va = faces[fi].v[e];
        const int vb = faces[fi].v[(e + 1) % 3];
        const auto key = std::minmax(va, vb);
        auto it = edge_use.find({key.first, key.second});
        if (it == edge_use.end())
          edge_use[{key.first, key.second}] = {va, vb};
        else
          edge_use.erase(it);  // interior edge of the visible region
      }
    }
    for (const auto& [key, dir] : edge_use) horizon.push_back(dir);
    for (int fi : visible) faces[fi].alive = false;

    for (const auto& [va, vb] : horizon)
      faces.push_back(make_face(va, vb, apex, interior));
    // Reassign orphans (apex itself lands inside and drops out).
    assign_outside(orphans);
  }

  // Compact into a mesh.
  TriangleMesh mesh;
  std::map<int, int> remap;
  for (const auto& f : faces) {
    if (!f.alive) continue;
    std::array<int, 3> tri;
    for (int k = 0; k < 3; ++k) {
      auto [it, inserted] = remap.try_emplace(f.v[k], static_cast<int>(mesh.vertices.size()));
      if (inserted) mesh.vertices.push_back(points[f.v[k]]);
      tri[k] = it->second;
    }
    mesh.faces.push_back(tri);
  }
  std::string reason;
  mesh.manifold = verify_manifold(mesh, &reason);
  return mesh;
}

inline TriangleMesh convex_hull_3d(const std::vector<Vec3>& cloud, const CarCluster& cluster) {
  std::vector<Vec3> pts;
  pts.reserve(cluster.member_points.size());
  for (int i : cluster.member_points) pts.push_back(cloud[i]);
  return convex_hull_3d(pts);
}

}  // namespace carvemap
