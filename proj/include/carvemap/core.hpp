#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace carvemap {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat23 = Eigen::Matrix<double, 2, 3>;

/// Error type thrown for all contract violations in the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline bool is_finite(const Vec3& v) {
  return std::isfinite(v.x()) && std::isfinite(v.y()) && std::isfinite(v.z());
}

// ---------------------------------------------------------------------------
// Rays and rigid motions

/// Segment from a sensor (or camera) center to a measured point. The space it
/// crosses is evidence of emptiness.
struct Ray {
  Vec3 origin;
  Vec3 target;

  Vec3 direction() const { return (target - origin).normalized(); }
  double length() const { return (target - origin).norm(); }
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(rotation.transpose() * translation);
    return inv;
  }

  /// Composition: (a * b).apply(p) == a.apply(b.apply(p)).
  RigidTransform operator*(const RigidTransform& other) const {
    RigidTransform out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  bool is_valid(double tol = 1e-9) const {
    const Mat3 rrt = rotation * rotation.transpose();
    return (rrt - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol;
  }
};

// ---------------------------------------------------------------------------
// Images

/// Grayscale image with intensities normalized to [0,1]. 8-bit sources are
/// divided by 255 at load time. Pixel (x,y) is addressed column-first within a
/// row-major buffer; continuous coordinates place (0,0) at the center of the
/// top-left pixel.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  GrayImage() = default;
  GrayImage(int w, int h, double fill = 0.0)
      : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

  bool empty() const { return width == 0 || height == 0; }
  double& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
  double at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }

  bool in_bounds(const Vec2& uv) const {
    return uv.x() >= 0.0 && uv.x() <= width - 1.0 && uv.y() >= 0.0 && uv.y() <= height - 1.0;
  }

  /// Bilinear sample at continuous pixel coordinates; coordinates are clamped
  /// to the valid interpolation domain.
  double sample(double u, double v) const {
    u = std::clamp(u, 0.0, static_cast<double>(width - 1));
    v = std::clamp(v, 0.0, static_cast<double>(height - 1));
    const int x0 = std::min(static_cast<int>(u), width - 2 >= 0 ? width - 2 : 0);
    const int y0 = std::min(static_cast<int>(v), height - 2 >= 0 ? height - 2 : 0);
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const double fu = u - x0;
    const double fv = v - y0;
    return (1 - fu) * (1 - fv) * at(x0, y0) + fu * (1 - fv) * at(x1, y0) +
           (1 - fu) * fv * at(x0, y1) + fu * fv * at(x1, y1);
  }

  /// Exact derivative of `sample` with respect to (u,v) inside a bilinear cell.
  Vec2 sample_gradient(double u, double v) const {
    u = std::clamp(u, 0.0, static_cast<double>(width - 1));
    v = std::clamp(v, 0.0, static_cast<double>(height - 1));
    const int x0 = std::min(static_cast<int>(u), width - 2 >= 0 ? width - 2 : 0);
    const int y0 = std::min(static_cast<int>(v), height - 2 >= 0 ? height - 2 : 0);
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const double fu = u - x0;
    const double fv = v - y0;
    const double du = (1 - fv) * (at(x1, y0) - at(x0, y0)) + fv * (at(x1, y1) - at(x0, y1));
    const double dv = (1 - fu) * (at(x0, y1) - at(x0, y0)) + fu * (at(x1, y1) - at(x1, y0));
    return {du, dv};
  }
};

/// Boolean per-pixel mask paired with an image of the same dimensions.
struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(int w, int h, bool fill = false)
      : width(w), height(h), bits(static_cast<size_t>(w) * h, fill ? 1 : 0) {}

  bool empty() const { return width == 0 || height == 0; }
  void set(int x, int y, bool v) { bits[static_cast<size_t>(y) * width + x] = v ? 1 : 0; }
  bool get(int x, int y) const { return bits[static_cast<size_t>(y) * width + x] != 0; }
  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }

  /// Mask lookup at continuous pixel coordinates (nearest pixel); out-of-frame
  /// queries report unmasked.
  bool get_nearest(double u, double v) const {
    const int x = static_cast<int>(std::lround(u));
    const int y = static_cast<int>(std::lround(v));
    if (!in_bounds(x, y)) return false;
    return get(x, y);
  }

  size_t count() const {
    size_t n = 0;
    for (uint8_t b : bits) n += b != 0;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Camera

/// Pinhole camera with known intrinsics, a world-to-camera pose, a grayscale
/// image and the mask of moving-object pixels in that image.
struct CameraView {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;
  RigidTransform pose;  // world -> camera
  GrayImage image;
  BinaryMask moving_mask;

  int width() const { return image.width; }
  int height() const { return image.height; }

  Vec3 center() const { return pose.inverse().translation; }
};

/// Pinhole projection. Returns nullopt for points at or behind the camera
/// plane (Zc <= 0).
inline std::optional<Vec2> project(const CameraView& view, const Vec3& p) {
  const Vec3 pc = view.pose.apply(p);
  if (pc.z() <= 0.0) return std::nullopt;
  return Vec2(view.fx * pc.x() / pc.z() + view.cx, view.fy * pc.y() / pc.z() + view.cy);
}

/// Analytic 2x3 derivative of `project` with respect to the world coordinates
/// of p. Throws on degenerate depth.
inline Mat23 projection_jacobian(const CameraView& view, const Vec3& p) {
  const Vec3 pc = view.pose.apply(p);
  if (pc.z() <= 1e-9) throw Error("projection_jacobian: degenerate depth");
  const double iz = 1.0 / pc.z();
  Mat23 d_pix_d_pc;
  d_pix_d_pc << view.fx * iz, 0.0, -view.fx * pc.x() * iz * iz,
                0.0, view.fy * iz, -view.fy * pc.y() * iz * iz;
  return d_pix_d_pc * view.pose.rotation;
}

// ---------------------------------------------------------------------------
// Triangle meshes

/// Indexed triangle surface. `manifold` is a verified flag, not a promise:
/// call verify_manifold to establish it.
struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  bool manifold = false;

  bool empty() const { return faces.empty(); }

  /// One-ring vertex adjacency (sorted, unique neighbors per vertex).
  std::vector<std::vector<int>> vertex_one_rings() const {
    std::vector<std::set<int>> rings(vertices.size());
    for (const auto& f : faces) {
      rings[f[0]].insert(f[1]); rings[f[0]].insert(f[2]);
      rings[f[1]].insert(f[0]); rings[f[1]].insert(f[2]);
      rings[f[2]].insert(f[0]); rings[f[2]].insert(f[1]);
    }
    std::vector<std::vector<int>> out(vertices.size());
    for (size_t i = 0; i < rings.size(); ++i) out[i].assign(rings[i].begin(), rings[i].end());
    return out;
  }

  std::vector<std::vector<int>> vertex_incident_faces() const {
    std::vector<std::vector<int>> out(vertices.size());
    for (size_t fi = 0; fi < faces.size(); ++fi)
      for (int c = 0; c < 3; ++c) out[faces[fi][c]].push_back(static_cast<int>(fi));
    return out;
  }
};

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

/// Unit normal of a face, oriented by the stored winding. Throws for
/// degenerate (zero-area) faces.
inline Vec3 face_normal(const TriangleMesh& mesh, int face) {
  const auto& f = mesh.faces[face];
  const Vec3& a = mesh.vertices[f[0]];
  const Vec3& b = mesh.vertices[f[1]];
  const Vec3& c = mesh.vertices[f[2]];
  const Vec3 n = (b - a).cross(c - a);
  const double len = n.norm();
  if (0.5 * len < 1e-12) throw Error("face_normal: degenerate face");
  return n / len;
}

/// Area-weighted vertex normals, renormalized. Vertices without incident
/// faces get a zero normal.
inline std::vector<Vec3> vertex_normals(const TriangleMesh& mesh) {
  std::vector<Vec3> normals(mesh.vertices.size(), Vec3::Zero());
  for (const auto& f : mesh.faces) {
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    const Vec3 n = (b - a).cross(c - a);  // |n| = 2 * area
    for (int k = 0; k < 3; ++k) normals[f[k]] += n;
  }
  for (auto& n : normals) {
    const double len = n.norm();
    if (len > 0.0) n /= len;
  }
  return normals;
}

/// Point on a mesh surface identified by face + barycentric coordinates.
struct SurfacePoint {
  int face = -1;
  Vec3 barycentric = Vec3::Zero();
  Vec3 position = Vec3::Zero();
  Vec3 normal = Vec3::Zero();
};

inline SurfacePoint surface_point(const TriangleMesh& mesh, int face, const Vec3& bary) {
  const auto& f = mesh.faces[face];
  SurfacePoint sp;
  sp.face = face;
  sp.barycentric = bary;
  sp.position = bary[0] * mesh.vertices[f[0]] + bary[1] * mesh.vertices[f[1]] +
                bary[2] * mesh.vertices[f[2]];
  sp.normal = face_normal(mesh, face);
  return sp;
}

/// Exact Euclidean distance from a point to a closed triangle (interior, edge
/// or vertex region). Region decomposition after Eberly.
inline double point_to_triangle_distance(const Vec3& p, const Vec3& v0, const Vec3& v1,
                                         const Vec3& v2) {
  const Vec3 diff = p - v0;
  const Vec3 edge0 = v1 - v0;
  const Vec3 edge1 = v2 - v0;
  const double a00 = edge0.dot(edge0);
  const double a01 = edge0.dot(edge1);
  const double a11 = edge1.dot(edge1);
  const double b0 = -diff.dot(edge0);
  const double b1 = -diff.dot(edge1);
  const double det = std::max(a00 * a11 - a01 * a01, 0.0);
  double t0 = a01 * b1 - a11 * b0;
  double t1 = a01 * b0 - a00 * b1;

  if (t0 + t1 <= det) {
    if (t0 < 0) {
      if (t1 < 0) {  // region 4
        if (b0 < 0) {
          t1 = 0;
          t0 = (-b0 >= a00) ? 1 : -b0 / a00;
        } else {
          t0 = 0;
          t1 = (b1 >= 0) ? 0 : ((-b1 >= a11) ? 1 : -b1 / a11);
        }
      } else {  // region 3
        t0 = 0;
        t1 = (b1 >= 0) ? 0 : ((-b1 >= a11) ? 1 : -b1 / a11);
      }
    } else if (t1 < 0) {  // region 5
      t1 = 0;
      t0 = (b0 >= 0) ? 0 : ((-b0 >= a00) ? 1 : -b0 / a00);
    } else {  // region 0 (interior)
      const double inv_det = 1.0 / det;
      t0 *= inv_det;
      t1 *= inv_det;
    }
  } else {
    if (t0 < 0) {  // region 2
      const double tmp0 = a01 + b0;
      const double tmp1 = a11 + b1;
      if (tmp1 > tmp0) {
        const double numer = tmp1 - tmp0;
        const double denom = a00 - 2 * a01 + a11;
        t0 = (numer >= denom) ? 1 : numer / denom;
        t1 = 1 - t0;
      } else {
        t0 = 0;
        t1 = (tmp1 <= 0) ? 1 : ((b1 >= 0) ? 0 : -b1 / a11);
      }
    } else if (t1 < 0) {  // region 6
      const double tmp0 = a01 + b1;
      const double tmp1 = a00 + b0;
      if (tmp1 > tmp0) {
        const double numer = tmp1 - tmp0;
        const double denom = a00 - 2 * a01 + a11;
        t1 = (numer >= denom) ? 1 : numer / denom;
        t0 = 1 - t1;
      } else {
        t1 = 0;
        t0 = (tmp1 <= 0) ? 1 : ((b0 >= 0) ? 0 : -b0 / a00);
      }
    } else {  // region 1
      const double numer = a11 + b1 - a01 - b0;
      if (numer <= 0) {
        t0 = 0;
      } else {
        const double denom = a00 - 2 * a01 + a11;
        t0 = (numer >= denom) ? 1 : numer / denom;
      }
      t1 = 1 - t0;
    }
  }
  return (v0 + t0 * edge0 + t1 * edge1 - p).norm();
}

inline double point_to_triangle_distance(const Vec3& p, const TriangleMesh& mesh, int face) {
  const auto& f = mesh.faces[face];
  return point_to_triangle_distance(p, mesh.vertices[f[0]], mesh.vertices[f[1]],
                                    mesh.vertices[f[2]]);
}

// ---------------------------------------------------------------------------
// Manifold verification

/// Checks the 2-manifold contract: face indices in range, no degenerate
/// faces, every edge bounding exactly 1 or 2 faces, and every vertex's
/// incident faces forming a single fan (open path or closed cycle).
/// Runs per connected component, so multi-component meshes are accepted when
/// every component is manifold.
inline bool verify_manifold(const TriangleMesh& mesh, std::string* reason = nullptr) {
  auto fail = [&](const std::string& why) {
    if (reason) *reason = why;
    return false;
  };
  const int nv = static_cast<int>(mesh.vertices.size());
  std::map<std::pair<int, int>, int> edge_count;
  for (size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const auto& f = mesh.faces[fi];
    for (int c = 0; c < 3; ++c) {
      if (f[c] < 0 || f[c] >= nv) return fail("face index out of range");
    }
    if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) return fail("repeated vertex in face");
    if (triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]) < 1e-12)
      return fail("degenerate face");
    for (int c = 0; c < 3; ++c) {
      const int a = f[c], b = f[(c + 1) % 3];
      auto key = std::minmax(a, b);
      if (++edge_count[{key.first, key.second}] > 2) return fail("edge bounds more than 2 faces");
    }
  }

  // Vertex fan condition: the incident faces of each vertex, glued along the
  // edges at that vertex, must form a single path or cycle.
  const auto incident = mesh.vertex_incident_faces();
  for (int v = 0; v < nv; ++v) {
    const auto& fs = incident[v];
    if (fs.empty()) continue;
    // Map opposite edge endpoints -> local face indices.
    std::map<int, std::vector<int>> by_other;  // other vertex -> faces at v using edge (v,other)
    for (int local = 0; local < static_cast<int>(fs.size()); ++local) {
      const auto& f = mesh.faces[fs[local]];
      for (int c = 0; c < 3; ++c) {
        if (f[c] == v) {
          by_other[f[(c + 1) % 3]].push_back(local);
          by_other[f[(c + 2) % 3]].push_back(local);
          break;
        }
      }
    }
    for (const auto& [other, locals] : by_other) {
      if (locals.size() > 2) return fail("vertex umbrella branches");
    }
    // Connectivity: walk the fan graph (faces adjacent when sharing an edge at v).
    std::vector<int> degree(fs.size(), 0);
    std::vector<std::vector<int>> adj(fs.size());
    for (const auto& [other, locals] : by_other) {
      if (locals.size() == 2) {
        adj[locals[0]].push_back(locals[1]);
        adj[locals[1]].push_back(locals[0]);
        ++degree[locals[0]];
        ++degree[locals[1]];
      }
    }
    std::vector<char> seen(fs.size(), 0);
    std::vector<int> stack = {0};
    seen[0] = 1;
    size_t reached = 1;
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      for (int nb : adj[cur]) {
        if (!seen[nb]) {
          seen[nb] = 1;
          ++reached;
          stack.push_back(nb);
        }
      }
    }
    if (reached != fs.size()) return fail("vertex fan not connected");
    for (size_t i = 0; i < fs.size(); ++i) {
      if (degree[i] > 2) return fail("vertex fan branches");
    }
  }
  if (reason) reason->clear();
  return true;
}

}  // namespace carvemap
