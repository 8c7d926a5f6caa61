#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "carvemap/core.hpp"
#include "carvemap/parallel.hpp"
#include "carvemap/spatial.hpp"

namespace carvemap {

/// One scan aligned into the world frame. Points keep their index into the
/// raw scan so ground-truth labels can be carried across filtering.
struct AlignedScan {
  int id = 0;
  std::vector<Vec3> points;      // world frame
  std::vector<int> raw_indices;  // provenance into the raw scan
  Vec3 sensor_center = Vec3::Zero();
  RigidTransform pose;  // world <- sensor

  Ray ray(size_t i) const { return {sensor_center, points[i]}; }
};

struct IcpOptions {
  int max_iterations = 50;
  double residual_change_tol = 1e-5;  // meters, on the mean residual
  double max_correspondence = 1.0;    // meters
  double min_inlier_ratio = 0.3;
  int normal_neighbors = 12;
};

namespace registration_detail {

/// PCA plane normals from the k nearest neighbors of each reference point.
inline std::vector<Vec3> estimate_normals(const KdTree3& tree, int k) {
  std::vector<Vec3> normals(tree.size(), Vec3::UnitZ());
  parallel_for(tree.size(), [&](size_t i) {
    const auto nn = tree.knn(tree.point(static_cast<int>(i)), k);
    if (nn.size() < 3) return;
    Vec3 mean = Vec3::Zero();
    for (int j : nn) mean += tree.point(j);
    mean /= static_cast<double>(nn.size());
    Mat3 cov = Mat3::Zero();
    for (int j : nn) {
      const Vec3 d = tree.point(j) - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    normals[i] = eig.eigenvectors().col(0);  // smallest eigenvalue
  });
  return normals;
}

inline RigidTransform exp_se3(const Eigen::Matrix<double, 6, 1>& xi) {
  // xi = [rotation vector; translation]
  const Vec3 w = xi.head<3>();
  RigidTransform t;
  const double angle = w.norm();
  if (angle < 1e-12) {
    t.rotation = Mat3::Identity();
  } else {
    t.rotation = Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
  }
  t.translation = xi.tail<3>();
  return t;
}

}  // namespace registration_detail

/// Point-to-plane ICP aligning `source` onto `reference`, starting from
/// `initial`. Returns the world<-source transform. Throws Error on
/// registration failure (< min_inlier_ratio inlier correspondences at
/// convergence).
inline RigidTransform align_scan(const std::vector<Vec3>& source,
                                 const std::vector<Vec3>& reference,
                                 const RigidTransform& initial, const IcpOptions& opt = {}) {
  if (source.size() < 100 || reference.size() < 100)
    throw Error("align_scan: clouds must have at least 100 points");
  const KdTree3 tree(reference);
  const auto normals = registration_detail::estimate_normals(tree, opt.normal_neighbors);

  RigidTransform current = initial;
  double prev_mean_residual = std::numeric_limits<double>::max();
  double inlier_ratio = 0.0;

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    // Correspondences in deterministic index order.
    std::vector<Vec3> src_pts(source.size());
    std::vector<int> corr(source.size(), -1);
    parallel_for(source.size(), [&](size_t i) {
      const Vec3 p = current.apply(source[i]);
      src_pts[i] = p;
      double dist = 0;
      const int j = tree.nearest(p, &dist);
      if (j >= 0 && dist <= opt.max_correspondence) corr[i] = j;
    });

    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    double residual_sum = 0;
    size_t inliers = 0;
    for (size_t i = 0; i < source.size(); ++i) {
      if (corr[i] < 0) continue;
      const Vec3& p = src_pts[i];
      const Vec3& q = tree.point(corr[i]);
      const Vec3& n = normals[corr[i]];
      const double r = n.dot(p - q);
      Eigen::Matrix<double, 6, 1> jac;
      jac.head<3>() = p.cross(n);
      jac.tail<3>() = n;
      h += jac * jac.transpose();
      g += jac * r;
      residual_sum += std::abs(r);
      ++inliers;
    }
    inlier_ratio = static_cast<double>(inliers) / source.size();
    if (inliers < 6) break;

    const double mean_residual = residual_sum / inliers;
    if (std::abs(prev_mean_residual - mean_residual) < opt.residual_change_tol) {
      prev_mean_residual = mean_residual;
      break;
    }
    prev_mean_residual = mean_residual;

    // Levenberg-style damping keeps the step stable on thin geometry.
    h.diagonal().array() += 1e-6 * h.diagonal().maxCoeff() + 1e-12;
    const Eigen::Matrix<double, 6, 1> delta = h.ldlt().solve(-g);
    current = registration_detail::exp_se3(delta) * current;
  }

  if (inlier_ratio < opt.min_inlier_ratio)
    throw Error("registration failure: inlier ratio " + std::to_string(inlier_ratio));
  return current;
}

/// Keeps exactly the points within `max_range` of the sensor center.
inline AlignedScan range_filter(const AlignedScan& scan, double max_range = 30.0) {
  AlignedScan out;
  out.id = scan.id;
  out.sensor_center = scan.sensor_center;
  out.pose = scan.pose;
  for (size_t i = 0; i < scan.points.size(); ++i) {
    if ((scan.points[i] - scan.sensor_center).norm() <= max_range) {
      out.points.push_back(scan.points[i]);
      out.raw_indices.push_back(i < scan.raw_indices.size() ? scan.raw_indices[i]
                                                            : static_cast<int>(i));
    }
  }
  return out;
}

/// Voxel-grid downsampling result: one centroid per occupied voxel, each
/// carrying the ray (sensor origin + raw index) of the nearest original point
/// in its voxel.
struct DownsampledCloud {
  std::vector<Vec3> points;          // voxel centroids
  std::vector<int> source_indices;   // nearest original point per centroid
  double voxel_edge = 0.0;
};

namespace registration_detail {

inline DownsampledCloud voxelize(const std::vector<Vec3>& cloud, double edge) {
  std::map<std::tuple<int64_t, int64_t, int64_t>, std::vector<int>> cells;
  for (size_t i = 0; i < cloud.size(); ++i) {
    const auto key = std::make_tuple(static_cast<int64_t>(std::floor(cloud[i].x() / edge)),
                                     static_cast<int64_t>(std::floor(cloud[i].y() / edge)),
                                     static_cast<int64_t>(std::floor(cloud[i].z() / edge)));
    cells[key].push_back(static_cast<int>(i));
  }
  DownsampledCloud out;
  out.voxel_edge = edge;
  out.points.reserve(cells.size());
  out.source_indices.reserve(cells.size());
  for (const auto& [key, members] : cells) {
    Vec3 centroid = Vec3::Zero();
    for (int i : members) centroid += cloud[i];
    centroid /= static_cast<double>(members.size());
    int nearest = members.front();
    double best = std::numeric_limits<double>::max();
    for (int i : members) {
      const double d = (cloud[i] - centroid).squaredNorm();
      if (d < best) {
        best = d;
        nearest = i;
      }
    }
    out.points.push_back(centroid);
    out.source_indices.push_back(nearest);
  }
  return out;
}

}  // namespace registration_detail

/// Voxel-grid downsampling to approximately `fraction` of the input size. The
/// voxel edge is bisected until the output lands within +-20% of the target;
/// if the discrete voxel counts never reach that band the finest-edge result
/// is returned (so sparse clouds that cannot be reduced pass through).
inline DownsampledCloud downsample(const std::vector<Vec3>& cloud, double fraction = 0.01) {
  if (fraction <= 0.0 || fraction > 1.0) throw Error("downsample: fraction must be in (0,1]");
  DownsampledCloud out;
  if (cloud.empty()) return out;

  Vec3 lo = cloud.front(), hi = cloud.front();
  for (const auto& p : cloud) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double diag = std::max((hi - lo).norm(), 1e-9);
  const double target = fraction * static_cast<double>(cloud.size());

  double e_lo = diag * 1e-6;  // finest edge: virtually no merging
  double e_hi = diag;         // coarsest edge: everything in a few voxels
  DownsampledCloud finest = registration_detail::voxelize(cloud, e_lo);
  if (static_cast<double>(finest.points.size()) <= target * 1.2) return finest;

  for (int iter = 0; iter < 48; ++iter) {
    const double e_mid = std::sqrt(e_lo * e_hi);  // bisect in log space
    DownsampledCloud cand = registration_detail::voxelize(cloud, e_mid);
    const double n = static_cast<double>(cand.points.size());
    if (n >= target * 0.8 && n <= target * 1.2) return cand;
    if (n > target)
      e_lo = e_mid;
    else
      e_hi = e_mid;
  }
  // Band unreachable: the discrete voxel counts jump across it. Return the
  // finest-resolution result so sparse clouds pass through undamaged.
  return finest;
}

/// Downsample an aligned scan, preserving per-point sensor rays.
inline AlignedScan downsample_scan(const AlignedScan& scan, double fraction = 0.01) {
  const DownsampledCloud ds = downsample(scan.points, fraction);
  AlignedScan out;
  out.id = scan.id;
  out.sensor_center = scan.sensor_center;
  out.pose = scan.pose;
  out.points = ds.points;
  out.raw_indices.reserve(ds.source_indices.size());
  for (int src : ds.source_indices)
    out.raw_indices.push_back(src < static_cast<int>(scan.raw_indices.size())
                                  ? scan.raw_indices[src]
                                  : src);
  return out;
}

}  // namespace carvemap
