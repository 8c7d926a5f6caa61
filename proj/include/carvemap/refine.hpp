#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "carvemap/core.hpp"
#include "carvemap/parallel.hpp"
#include "carvemap/raster.hpp"

namespace carvemap {

// ---------------------------------------------------------------------------
// Binary mask morphology

inline BinaryMask dilate_box(const BinaryMask& mask, int half) {
  BinaryMask out(mask.width, mask.height);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.get(x, y)) continue;
      for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx)
          if (out.in_bounds(x + dx, y + dy)) out.set(x + dx, y + dy, true);
    }
  return out;
}

namespace refine_detail {

inline std::vector<std::pair<int, int>> disk_offsets(int radius) {
  std::vector<std::pair<int, int>> out;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) out.emplace_back(dx, dy);
  return out;
}

}  // namespace refine_detail

inline BinaryMask dilate_disk(const BinaryMask& mask, int radius) {
  const auto offsets = refine_detail::disk_offsets(radius);
  BinaryMask out(mask.width, mask.height);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.get(x, y)) continue;
      for (const auto& [dx, dy] : offsets)
        if (out.in_bounds(x + dx, y + dy)) out.set(x + dx, y + dy, true);
    }
  return out;
}

inline BinaryMask erode_disk(const BinaryMask& mask, int radius) {
  const auto offsets = refine_detail::disk_offsets(radius);
  BinaryMask out(mask.width, mask.height);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      bool all = true;
      for (const auto& [dx, dy] : offsets) {
        const int nx = x + dx, ny = y + dy;
        // Pixels outside the frame count as unset.
        if (!mask.in_bounds(nx, ny) || !mask.get(nx, ny)) {
          all = false;
          break;
        }
      }
      out.set(x, y, all);
    }
  return out;
}

/// Moving-object mask for one view: project the moving lidar points, then
/// grow the sparse dots with an 11x11 box, a 10 px disk dilation and a 7 px
/// disk erosion (a closing that bridges gaps between projected points).
inline BinaryMask build_moving_mask(const CameraView& view, const std::vector<Vec3>& moving_points) {
  BinaryMask mask(view.width(), view.height());
  for (const auto& p : moving_points) {
    const auto uv = project(view, p);
    if (!uv) continue;
    const int x = static_cast<int>(std::lround(uv->x()));
    const int y = static_cast<int>(std::lround(uv->y()));
    if (mask.in_bounds(x, y)) mask.set(x, y, true);
  }
  if (moving_points.empty()) return mask;
  mask = dilate_box(mask, 5);  // all-ones 11x11 kernel
  mask = dilate_disk(mask, 10);
  mask = erode_disk(mask, 7);
  return mask;
}

// ---------------------------------------------------------------------------
// Reprojection through the mesh

/// I_ij: image of camera j warped into camera i through the surface, with
/// the domain mask Omega (hit exists, lands inside frame j, unoccluded in j)
/// and camera-j pixel positions for the gradient chain rule.
struct Reprojection {
  GrayImage image;          // I_ij
  BinaryMask omega;         // reprojection domain
  BinaryMask moving_j;      // camera-j moving mask seen through the surface
  RasterBuffers raster;     // view-i rasterization of the mesh
  std::vector<Vec2> pixel_in_j;  // x_j per view-i pixel (valid where omega)
};

inline Reprojection reproject(const TriangleMesh& mesh, const CameraView& view_i,
                              const CameraView& view_j,
                              const RasterBuffers* raster_j_hint = nullptr) {
  Reprojection out;
  out.raster = rasterize(mesh, view_i);
  const RasterBuffers raster_j = raster_j_hint ? *raster_j_hint : rasterize(mesh, view_j);
  out.image = GrayImage(view_i.width(), view_i.height());
  out.omega = BinaryMask(view_i.width(), view_i.height());
  out.moving_j = BinaryMask(view_i.width(), view_i.height());
  out.pixel_in_j.assign(static_cast<size_t>(view_i.width()) * view_i.height(), Vec2::Zero());

  for (int y = 0; y < view_i.height(); ++y) {
    for (int x = 0; x < view_i.width(); ++x) {
      if (!out.raster.hit(x, y)) continue;
      const Vec3 p = raster_point(out.raster, mesh, x, y);
      const auto uv = project(view_j, p);
      if (!uv) continue;
      if (!(uv->x() >= 0 && uv->x() <= view_j.width() - 1 && uv->y() >= 0 &&
            uv->y() <= view_j.height() - 1))
        continue;
      // Occlusion in view j: depth of p against the j z-buffer.
      const double depth_j = view_j.pose.apply(p).z();
      const int jx = static_cast<int>(std::lround(uv->x()));
      const int jy = static_cast<int>(std::lround(uv->y()));
      if (!raster_j.hit(jx, jy)) continue;
      const double zbuf = raster_j.depth[raster_j.index(jx, jy)];
      if (depth_j > zbuf + std::max(0.015 * zbuf, 5e-3)) continue;  // occluded
      const size_t pix = out.raster.index(x, y);
      out.omega.set(x, y, true);
      out.image.at(x, y) = view_j.image.sample(uv->x(), uv->y());
      out.pixel_in_j[pix] = *uv;
      // Conservative mask transport: if any bilinear tap of the sample falls
      // on a masked pixel, the reprojected pixel is masked. This keeps
      // masked intensities from leaking into the energy through
      // interpolation.
      if (!view_j.moving_mask.empty()) {
        const int jx0 = static_cast<int>(uv->x());
        const int jy0 = static_cast<int>(uv->y());
        bool masked = false;
        for (int dy = 0; dy <= 1 && !masked; ++dy)
          for (int dx = 0; dx <= 1 && !masked; ++dx)
            if (view_j.moving_mask.in_bounds(jx0 + dx, jy0 + dy) &&
                view_j.moving_mask.get(jx0 + dx, jy0 + dy))
              masked = true;
        if (masked) out.moving_j.set(x, y, true);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// ZNCC photometric error over masked patch windows

namespace refine_detail {

/// Summed-area table with a validity channel, for O(1) masked window sums.
class MaskedIntegral {
 public:
  MaskedIntegral(const GrayImage& values, const BinaryMask& valid)
      : w_(values.width), h_(values.height), table_((w_ + 1) * (h_ + 1), 0.0) {
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x)
        table_[idx(x + 1, y + 1)] = (valid.get(x, y) ? values.at(x, y) : 0.0) +
                                    table_[idx(x, y + 1)] + table_[idx(x + 1, y)] -
                                    table_[idx(x, y)];
  }

  /// Inclusive window sum, clamped to the frame.
  double sum(int x0, int y0, int x1, int y1) const {
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    x1 = std::min(x1, w_ - 1);
    y1 = std::min(y1, h_ - 1);
    if (x0 > x1 || y0 > y1) return 0.0;
    return table_[idx(x1 + 1, y1 + 1)] - table_[idx(x0, y1 + 1)] - table_[idx(x1 + 1, y0)] +
           table_[idx(x0, y0)];
  }

 private:
  size_t idx(int x, int y) const { return static_cast<size_t>(y) * (w_ + 1) + x; }
  int w_, h_;
  std::vector<double> table_;
};

}  // namespace refine_detail

/// E_photo contribution of one image pair plus the derivative of the total
/// error with respect to the second image at every pixel.
struct PhotoError {
  double energy = 0.0;
  GrayImage d_second;     // dE/dB per pixel (0 outside the masked domain)
  size_t valid_centers = 0;
};

/// err(p) = 1 - ZNCC over the (2*half+1)^2 window of valid pixels around p.
/// Valid means inside Omega and outside both moving masks; masked pixels are
/// excluded from windows entirely, so they contribute exactly zero to the
/// energy and to the derivative. Windows with near-zero variance in either
/// image contribute zero (flat-region convention).
inline PhotoError photo_error(const GrayImage& first, const GrayImage& second,
                              const BinaryMask& valid, int half) {
  using refine_detail::MaskedIntegral;
  const int w = first.width, h = first.height;
  PhotoError out;
  out.d_second = GrayImage(w, h);
  if (second.width != w || second.height != h) throw Error("photo_error: image size mismatch");

  GrayImage aa(w, h), bb(w, h), ab(w, h), ones(w, h, 1.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double a = first.at(x, y), b = second.at(x, y);
      aa.at(x, y) = a * a;
      bb.at(x, y) = b * b;
      ab.at(x, y) = a * b;
    }
  const MaskedIntegral in(ones, valid), ia(first, valid), ib(second, valid), iaa(aa, valid),
      ibb(bb, valid), iab(ab, valid);

  const int full = (2 * half + 1) * (2 * half + 1);
  const int min_count = std::max(5, full / 2);
  // Textureless-window cutoff. The lower edge must exceed the summed-area
  // rounding noise (~1e-10 at these image sizes); the gate ramps linearly to
  // keep the energy continuous as windows gain or lose texture.
  const double var_eps = 1e-6;
  auto gate = [var_eps](double variance) {
    return std::clamp((variance - var_eps) / var_eps, 0.0, 1.0);
  };

  // Per-center linear coefficients of d err/dB(q) = c1*A(q) + c2*B(q) + c3.
  GrayImage c1(w, h), c2(w, h), c3(w, h);
  BinaryMask center_ok(w, h);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!valid.get(x, y)) continue;
      const int x0 = x - half, x1 = x + half, y0 = y - half, y1 = y + half;
      const double n = in.sum(x0, y0, x1, y1);
      if (n < min_count) continue;
      const double sa = ia.sum(x0, y0, x1, y1), sb = ib.sum(x0, y0, x1, y1);
      const double saa = std::max(iaa.sum(x0, y0, x1, y1) - sa * sa / n, 0.0);
      const double sbb = std::max(ibb.sum(x0, y0, x1, y1) - sb * sb / n, 0.0);
      const double sab = iab.sum(x0, y0, x1, y1) - sa * sb / n;
      const double w_a = gate(saa);
      const double w_b = gate(sbb);
      if (w_a <= 0.0 || w_b <= 0.0) continue;  // flat window
      const double denom = std::sqrt(saa * sbb);
      const double zncc = sab / denom;
      const double err = 1.0 - zncc;
      out.energy += w_a * w_b * err;
      ++out.valid_centers;
      // d zncc / dB(q) = (A(q)-mean_a)/denom - sab*(B(q)-mean_b)/(denom*sbb),
      // plus the gate term via d sbb/dB(q) = 2*(B(q)-mean_b).
      const double k1 = 1.0 / denom;
      const double k2 = sab / (denom * sbb);
      const double dw_b = (sbb > var_eps && sbb < 2 * var_eps) ? 1.0 / var_eps : 0.0;
      c1.at(x, y) = w_a * w_b * (-k1);
      c2.at(x, y) = w_a * (w_b * k2 + 2.0 * err * dw_b);
      c3.at(x, y) = w_a * (w_b * (k1 * (sa / n) - k2 * (sb / n)) -
                           2.0 * err * dw_b * (sb / n));
      center_ok.set(x, y, true);
    }
  }

  // dE/dB(q) = sum over centers p with q in W(p): c1_p*A(q)+c2_p*B(q)+c3_p.
  const MaskedIntegral ic1(c1, center_ok), ic2(c2, center_ok), ic3(c3, center_ok);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!valid.get(x, y)) continue;  // masked pixels take no derivative
      const int x0 = x - half, x1 = x + half, y0 = y - half, y1 = y + half;
      const double s1 = ic1.sum(x0, y0, x1, y1);
      const double s2 = ic2.sum(x0, y0, x1, y1);
      const double s3 = ic3.sum(x0, y0, x1, y1);
      out.d_second.at(x, y) = s1 * first.at(x, y) + s2 * second.at(x, y) + s3;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vertex gradient (chain rule through the reprojection)

struct RefineConfig {
  int patch_half_width = 5;
  double step = 0.02;       // meters per unit gradient
  int iterations = 30;
  double smooth = 0.3;      // umbrella weight lambda_s
  int pairs = 2;            // camera-pair selection window
  double grazing_cos = 0.05;
  double min_step = 1e-5;
};

/// Nearest-view pairing by camera center distance: ordered pairs (i, j).
inline std::vector<std::pair<int, int>> select_view_pairs(const std::vector<CameraView>& views,
                                                          int pairs_per_view) {
  std::vector<std::pair<int, int>> out;
  for (size_t i = 0; i < views.size(); ++i) {
    std::vector<std::pair<double, int>> by_dist;
    for (size_t j = 0; j < views.size(); ++j) {
      if (i == j) continue;
      by_dist.emplace_back((views[i].center() - views[j].center()).norm(), static_cast<int>(j));
    }
    std::sort(by_dist.begin(), by_dist.end());
    for (int k = 0; k < std::min<int>(pairs_per_view, by_dist.size()); ++k)
      out.emplace_back(static_cast<int>(i), by_dist[k].second);
  }
  return out;
}

namespace refine_detail {

inline BinaryMask domain_mask(const Reprojection& rep, const CameraView& view_i) {
  BinaryMask valid = rep.omega;
  for (int y = 0; y < valid.height; ++y)
    for (int x = 0; x < valid.width; ++x) {
      if (!valid.get(x, y)) continue;
      if (!view_i.moving_mask.empty() && view_i.moving_mask.get(x, y)) valid.set(x, y, false);
      if (rep.moving_j.get(x, y)) valid.set(x, y, false);
    }
  return valid;
}

}  // namespace refine_detail

/// E_photo over all selected pairs of views for the current mesh.
inline double photo_energy(const TriangleMesh& mesh, const std::vector<CameraView>& views,
                           const std::vector<std::pair<int, int>>& pairs, int patch_half) {
  std::vector<double> energies(pairs.size(), 0.0);
  parallel_for(pairs.size(), [&](size_t k) {
    const auto& [i, j] = pairs[k];
    const Reprojection rep = reproject(mesh, views[i], views[j]);
    const BinaryMask valid = refine_detail::domain_mask(rep, views[i]);
    energies[k] = photo_error(views[i].image, rep.image, valid, patch_half).energy;
  });
  double total = 0.0;
  for (double e : energies) total += e;  // fixed order: deterministic
  return total;
}

/// dE_photo/dX per vertex (Eq. of the masked photoconsistency gradient:
/// per-pixel error derivative, image gradient of the source view, projection
/// Jacobian and the ray direction, distributed barycentrically onto the hit
/// face and oriented along the face normal).
inline std::vector<Vec3> photo_gradient(const TriangleMesh& mesh,
                                        const std::vector<CameraView>& views,
                                        const std::vector<std::pair<int, int>>& pairs,
                                        const RefineConfig& config, double* energy_out = nullptr) {
  std::vector<std::vector<Vec3>> partial(pairs.size());
  std::vector<double> energies(pairs.size(), 0.0);

  parallel_for(pairs.size(), [&](size_t k) {
    auto& grad = partial[k];
    grad.assign(mesh.vertices.size(), Vec3::Zero());
    const auto& [i, j] = pairs[k];
    const CameraView& vi = views[i];
    const CameraView& vj = views[j];
    const Reprojection rep = reproject(mesh, vi, vj);
    const BinaryMask valid = refine_detail::domain_mask(rep, vi);
    const PhotoError err = photo_error(vi.image, rep.image, valid, config.patch_half_width);
    energies[k] = err.energy;

    const Vec3 center_i = vi.center();
    for (int y = 0; y < vi.height(); ++y) {
      for (int x = 0; x < vi.width(); ++x) {
        const double d_err = err.d_second.at(x, y);
        if (d_err == 0.0 || !valid.get(x, y)) continue;
        const size_t pix = rep.raster.index(x, y);
        const int face = rep.raster.face[pix];
        if (face < 0) continue;
        const Vec3& bary = rep.raster.bary[pix];
        const Vec3 p = raster_point(rep.raster, mesh, x, y);
        Vec3 normal;
        try {
          normal = face_normal(mesh, face);
        } catch (const Error&) {
          continue;  // degenerate face mid-descent
        }
        const Vec3 dir = (p - center_i).normalized();
        const double grazing = normal.dot(dir);
        if (std::abs(grazing) < config.grazing_cos) continue;

        const Vec2& xj = rep.pixel_in_j[pix];
        const Vec2 grad_j = vj.image.sample_gradient(xj.x(), xj.y());
        Mat23 jac;
        try {
          jac = projection_jacobian(vj, p);
        } catch (const Error&) {
          continue;
        }
        const Vec2 jd = jac * dir;
        const double f_ij = grad_j.dot(jd);
        const Vec3 contribution = (d_err * f_ij / grazing) * normal;
        const auto& fv = mesh.faces[face];
        for (int c = 0; c < 3; ++c) grad[fv[c]] += bary[c] * contribution;
      }
    }
  });

  std::vector<Vec3> total(mesh.vertices.size(), Vec3::Zero());
  double energy = 0.0;
  for (size_t k = 0; k < pairs.size(); ++k) {  // fixed order: deterministic
    energy += energies[k];
    for (size_t v = 0; v < total.size(); ++v) total[v] += partial[k][v];
  }
  if (energy_out) *energy_out = energy;
  return total;
}

// ---------------------------------------------------------------------------
// Umbrella smoothing and the descent loop

/// Vertices on open boundaries (an incident edge with a single face). The
/// umbrella pulls such vertices inward and shrinks the surface, so they are
/// excluded from smoothing.
inline std::vector<char> boundary_vertices(const TriangleMesh& mesh) {
  std::map<std::pair<int, int>, int> edge_faces;
  for (const auto& f : mesh.faces)
    for (int c = 0; c < 3; ++c) {
      const auto key = std::minmax(f[c], f[(c + 1) % 3]);
      ++edge_faces[{key.first, key.second}];
    }
  std::vector<char> boundary(mesh.vertices.size(), 0);
  for (const auto& [edge, count] : edge_faces) {
    if (count == 1) {
      boundary[edge.first] = 1;
      boundary[edge.second] = 1;
    }
  }
  return boundary;
}

/// lambda_s * (mean of one-ring neighbors - vertex) for interior vertices.
/// Isolated and open-boundary vertices stay put.
inline std::vector<Vec3> umbrella_step(const TriangleMesh& mesh,
                                       const std::vector<std::vector<int>>& one_rings,
                                       double lambda_s,
                                       const std::vector<char>* boundary = nullptr) {
  std::vector<Vec3> out(mesh.vertices.size(), Vec3::Zero());
  for (size_t v = 0; v < mesh.vertices.size(); ++v) {
    const auto& ring = one_rings[v];
    if (ring.empty()) continue;
    if (boundary && (*boundary)[v]) continue;
    Vec3 mean = Vec3::Zero();
    for (int nb : ring) mean += mesh.vertices[nb];
    mean /= static_cast<double>(ring.size());
    out[v] = lambda_s * (mean - mesh.vertices[v]);
  }
  return out;
}

inline double umbrella_magnitude(const TriangleMesh& mesh,
                                 const std::vector<std::vector<int>>& one_rings,
                                 const std::vector<char>* boundary = nullptr) {
  double total = 0.0;
  for (size_t v = 0; v < mesh.vertices.size(); ++v) {
    const auto& ring = one_rings[v];
    if (ring.empty()) continue;
    if (boundary && (*boundary)[v]) continue;
    Vec3 mean = Vec3::Zero();
    for (int nb : ring) mean += mesh.vertices[nb];
    mean /= static_cast<double>(ring.size());
    total += (mean - mesh.vertices[v]).squaredNorm();
  }
  return total;
}

struct RefineResult {
  TriangleMesh mesh;
  std::vector<double> energy_trace;  // E_photo after every accepted iteration
  bool aborted = false;              // degenerate geometry encountered
  int accepted_iterations = 0;
};

/// Gradient descent on the photometric energy with umbrella smoothing and
/// backtracking: a step is accepted only if E_photo does not increase and
/// the combined objective (E_photo + smooth * umbrella magnitude) does not
/// increase; otherwise the step is halved. Stops after config.iterations
/// accepted steps or when the step drops under config.min_step.
inline RefineResult refine(const TriangleMesh& mesh, const std::vector<CameraView>& views,
                           const RefineConfig& config = {}) {
  RefineResult result;
  result.mesh = mesh;
  if (views.size() < 2) {
    result.energy_trace.clear();
    return result;
  }
  const auto pairs = select_view_pairs(views, config.pairs);
  const auto one_rings = result.mesh.vertex_one_rings();
  const auto boundary = boundary_vertices(result.mesh);

  double step = config.step;
  double energy = 0.0;
  std::vector<Vec3> gradient = photo_gradient(result.mesh, views, pairs, config, &energy);
  double smooth_mag = umbrella_magnitude(result.mesh, one_rings, &boundary);
  result.energy_trace.push_back(energy);

  for (int iter = 0; iter < config.iterations && step >= config.min_step; ++iter) {
    const std::vector<Vec3> smoothing =
        umbrella_step(result.mesh, one_rings, config.smooth, &boundary);

    bool accepted = false;
    while (step >= config.min_step) {
      TriangleMesh trial = result.mesh;
      for (size_t v = 0; v < trial.vertices.size(); ++v)
        trial.vertices[v] += -step * gradient[v] + (step / config.step) * smoothing[v];

      // Vertex motion cannot break connectivity, but it can collapse faces.
      bool degenerate = false;
      for (const auto& f : trial.faces) {
        if (triangle_area(trial.vertices[f[0]], trial.vertices[f[1]], trial.vertices[f[2]]) <
            1e-12) {
          degenerate = true;
          break;
        }
      }
      if (degenerate) {
        result.aborted = true;
        return result;
      }

      const double trial_energy = photo_energy(trial, views, pairs, config.patch_half_width);
      const double trial_smooth = umbrella_magnitude(trial, one_rings, &boundary);
      const double objective = energy + config.smooth * smooth_mag;
      const double trial_objective = trial_energy + config.smooth * trial_smooth;
      if (trial_energy <= energy && trial_objective <= objective) {
        result.mesh = std::move(trial);
        energy = trial_energy;
        smooth_mag = trial_smooth;
        accepted = true;
        ++result.accepted_iterations;
        result.energy_trace.push_back(energy);
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    gradient = photo_gradient(result.mesh, views, pairs, config, nullptr);
  }
  return result;
}

}  // namespace carvemap
