#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "carvemap/core.hpp"

namespace carvemap {

/// Per-pixel rasterization result for one view: camera-space depth, hit face
/// and perspective-correct barycentric coordinates of the hit point.
struct RasterBuffers {
  int width = 0;
  int height = 0;
  std::vector<float> depth;   // +inf where no hit
  std::vector<int> face;      // -1 where no hit
  std::vector<Vec3> bary;

  RasterBuffers() = default;
  RasterBuffers(int w, int h)
      : width(w),
        height(h),
        depth(static_cast<size_t>(w) * h, std::numeric_limits<float>::infinity()),
        face(static_cast<size_t>(w) * h, -1),
        bary(static_cast<size_t>(w) * h, Vec3::Zero()) {}

  size_t index(int x, int y) const { return static_cast<size_t>(y) * width + x; }
  bool hit(int x, int y) const { return face[index(x, y)] >= 0; }
};

namespace raster_detail {

struct ClipVertex {
  Vec3 cam;   // camera-space position
  Vec3 bary;  // barycentric w.r.t. the original triangle
};

/// Clip a camera-space triangle against the near plane z = z_near
/// (Sutherland-Hodgman on a single plane). Returns 0, 3 or 4 vertices.
inline int clip_near(const std::array<ClipVertex, 3>& tri, double z_near,
                     std::array<ClipVertex, 4>& out) {
  int n = 0;
  for (int i = 0; i < 3; ++i) {
    const ClipVertex& a = tri[i];
    const ClipVertex& b = tri[(i + 1) % 3];
    const bool a_in = a.cam.z() > z_near;
    const bool b_in = b.cam.z() > z_near;
    if (a_in) out[n++] = a;
    if (a_in != b_in) {
      const double t = (z_near - a.cam.z()) / (b.cam.z() - a.cam.z());
      ClipVertex v;
      v.cam = a.cam + t * (b.cam - a.cam);
      v.bary = a.bary + t * (b.bary - a.bary);
      out[n++] = v;
    }
  }
  return n;
}

}  // namespace raster_detail

/// Z-buffer rasterization of a mesh into a view. Barycentrics are
/// perspective-correct, so `bary * face vertices` reconstructs the world-space
/// hit point of each pixel ray.
inline RasterBuffers rasterize(const TriangleMesh& mesh, const CameraView& view,
                               double z_near = 1e-3) {
  using raster_detail::ClipVertex;
  RasterBuffers buf(view.width(), view.height());
  if (buf.width == 0 || buf.height == 0) return buf;

  auto shade = [&](const ClipVertex& a, const ClipVertex& b, const ClipVertex& c, int face_id) {
    // Screen positions.
    auto to_screen = [&](const Vec3& cam) {
      return Vec2(view.fx * cam.x() / cam.z() + view.cx, view.fy * cam.y() / cam.z() + view.cy);
    };
    const Vec2 pa = to_screen(a.cam), pb = to_screen(b.cam), pc = to_screen(c.cam);
    const double area = (pb - pa).x() * (pc - pa).y() - (pb - pa).y() * (pc - pa).x();
    if (std::abs(area) < 1e-12) return;
    const double inv_area = 1.0 / area;

    const int x0 = std::max(0, static_cast<int>(std::floor(std::min({pa.x(), pb.x(), pc.x()}))));
    const int x1 = std::min(buf.width - 1,
                            static_cast<int>(std::ceil(std::max({pa.x(), pb.x(), pc.x()}))));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min({pa.y(), pb.y(), pc.y()}))));
    const int y1 = std::min(buf.height - 1,
                            static_cast<int>(std::ceil(std::max({pa.y(), pb.y(), pc.y()}))));
    if (x0 > x1 || y0 > y1) return;

    const double iza = 1.0 / a.cam.z(), izb = 1.0 / b.cam.z(), izc = 1.0 / c.cam.z();
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const Vec2 p(x, y);
        double wa = ((pb - p).x() * (pc - p).y() - (pb - p).y() * (pc - p).x()) * inv_area;
        double wb = ((pc - p).x() * (pa - p).y() - (pc - p).y() * (pa - p).x()) * inv_area;
        double wc = 1.0 - wa - wb;
        if (wa < 0 || wb < 0 || wc < 0) continue;
        // Perspective-correct interpolation via 1/z weighting.
        const double iz = wa * iza + wb * izb + wc * izc;
        const double z = 1.0 / iz;
        const size_t pix = buf.index(x, y);
        if (z >= buf.depth[pix]) continue;
        const double ba = wa * iza * z, bb = wb * izb * z, bc = wc * izc * z;
        const Vec3 bary = ba * a.bary + bb * b.bary + bc * c.bary;
        buf.depth[pix] = static_cast<float>(z);
        buf.face[pix] = face_id;
        buf.bary[pix] = bary;
      }
    }
  };

  for (size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const auto& f = mesh.faces[fi];
    std::array<ClipVertex, 3> tri;
    for (int c = 0; c < 3; ++c) {
      tri[c].cam = view.pose.apply(mesh.vertices[f[c]]);
      tri[c].bary = Vec3::Zero();
      tri[c].bary[c] = 1.0;
    }
    std::array<ClipVertex, 4> clipped;
    const int n = raster_detail::clip_near(tri, z_near, clipped);
    if (n < 3) continue;
    for (int k = 2; k < n; ++k) shade(clipped[0], clipped[k - 1], clipped[k], static_cast<int>(fi));
  }
  return buf;
}

/// World-space hit point of a raster pixel.
inline Vec3 raster_point(const RasterBuffers& buf, const TriangleMesh& mesh, int x, int y) {
  const size_t pix = buf.index(x, y);
  const auto& f = mesh.faces[buf.face[pix]];
  const Vec3& b = buf.bary[pix];
  return b[0] * mesh.vertices[f[0]] + b[1] * mesh.vertices[f[1]] + b[2] * mesh.vertices[f[2]];
}

}  // namespace carvemap
