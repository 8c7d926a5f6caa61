#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <queue>
#include <vector>

#include "carvemap/core.hpp"

namespace carvemap {

// ---------------------------------------------------------------------------
// Kd-tree over 3D points (median split, immutable after build)

class KdTree3 {
 public:
  KdTree3() = default;
  explicit KdTree3(std::vector<Vec3> points) : points_(std::move(points)) {
    indices_.resize(points_.size());
    std::iota(indices_.begin(), indices_.end(), 0);
    nodes_.reserve(points_.size() * 2);
    if (!points_.empty()) root_ = build(0, points_.size());
  }

  size_t size() const { return points_.size(); }
  const Vec3& point(int i) const { return points_[i]; }

  /// Index of the nearest point, or -1 for an empty tree.
  int nearest(const Vec3& q, double* dist_out = nullptr) const {
    if (points_.empty()) return -1;
    int best = -1;
    double best_sq = std::numeric_limits<double>::max();
    nearest_rec(root_, q, best, best_sq);
    if (dist_out) *dist_out = std::sqrt(best_sq);
    return best;
  }

  /// k nearest neighbors, sorted by ascending distance.
  std::vector<int> knn(const Vec3& q, int k) const {
    std::priority_queue<std::pair<double, int>> heap;  // max-heap on distance
    knn_rec(root_, q, k, heap);
    std::vector<int> out(heap.size());
    for (int i = static_cast<int>(heap.size()) - 1; i >= 0; --i) {
      out[i] = heap.top().second;
      heap.pop();
    }
    return out;
  }

  std::vector<int> radius(const Vec3& q, double r) const {
    std::vector<int> out;
    radius_rec(root_, q, r * r, out);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  struct Node {
    int index = -1;  // point index
    int axis = 0;
    int left = -1, right = -1;
  };

  int build(size_t begin, size_t end) {
    if (begin >= end) return -1;
    Vec3 lo = points_[indices_[begin]], hi = lo;
    for (size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[indices_[i]]);
      hi = hi.cwiseMax(points_[indices_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const size_t mid = begin + (end - begin) / 2;
    std::nth_element(indices_.begin() + begin, indices_.begin() + mid, indices_.begin() + end,
                     [this, axis](int a, int b) { return points_[a][axis] < points_[b][axis]; });
    Node node;
    node.index = indices_[mid];
    node.axis = axis;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    const int left = build(begin, mid);
    const int right = build(mid + 1, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void nearest_rec(int node_id, const Vec3& q, int& best, double& best_sq) const {
    if (node_id < 0) return;
    const Node& node = nodes_[node_id];
    const Vec3& p = points_[node.index];
    const double d_sq = (p - q).squaredNorm();
    if (d_sq < best_sq) {
      best_sq = d_sq;
      best = node.index;
    }
    const double delta = q[node.axis] - p[node.axis];
    const int near = delta < 0 ? node.left : node.right;
    const int far = delta < 0 ? node.right : node.left;
    nearest_rec(near, q, best, best_sq);
    if (delta * delta < best_sq) nearest_rec(far, q, best, best_sq);
  }

  void knn_rec(int node_id, const Vec3& q, int k,
               std::priority_queue<std::pair<double, int>>& heap) const {
    if (node_id < 0) return;
    const Node& node = nodes_[node_id];
    const Vec3& p = points_[node.index];
    const double d_sq = (p - q).squaredNorm();
    if (static_cast<int>(heap.size()) < k) {
      heap.emplace(d_sq, node.index);
    } else if (d_sq < heap.top().first) {
      heap.pop();
      heap.emplace(d_sq, node.index);
    }
    const double delta = q[node.axis] - p[node.axis];
    const int near = delta < 0 ? node.left : node.right;
    const int far = delta < 0 ? node.right : node.left;
    knn_rec(near, q, k, heap);
    if (static_cast<int>(heap.size()) < k || delta * delta < heap.top().first)
      knn_rec(far, q, k, heap);
  }

  void radius_rec(int node_id, const Vec3& q, double r_sq, std::vector<int>& out) const {
    if (node_id < 0) return;
    const Node& node = nodes_[node_id];
    const Vec3& p = points_[node.index];
    if ((p - q).squaredNorm() <= r_sq) out.push_back(node.index);
    const double delta = q[node.axis] - p[node.axis];
    const int near = delta < 0 ? node.left : node.right;
    const int far = delta < 0 ? node.right : node.left;
    radius_rec(near, q, r_sq, out);
    if (delta * delta <= r_sq) radius_rec(far, q, r_sq, out);
  }

  std::vector<Vec3> points_;
  std::vector<int> indices_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// ---------------------------------------------------------------------------
// AABB hierarchy over triangles: nearest-triangle distance and ray casting.
// Branch-and-bound pruning only skips provably farther subtrees, so the
// returned minimum distance equals the exhaustive one.

struct RayHit {
  double t = std::numeric_limits<double>::max();  // parameter along the ray direction
  int face = -1;
  Vec3 barycentric = Vec3::Zero();
};

class TriangleBvh {
 public:
  TriangleBvh() = default;
  explicit TriangleBvh(const TriangleMesh& mesh) : mesh_(&mesh) {
    const size_t n = mesh.faces.size();
    face_ids_.resize(n);
    std::iota(face_ids_.begin(), face_ids_.end(), 0);
    centroids_.resize(n);
    for (size_t i = 0; i < n; ++i) {
      const auto& f = mesh.faces[i];
      centroids_[i] =
          (mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0;
    }
    nodes_.reserve(2 * n + 1);
    if (n > 0) root_ = build(0, n);
  }

  /// Distance from p to the nearest triangle of the mesh; optionally reports
  /// which face realizes it.
  double nearest_distance(const Vec3& p, int* face_out = nullptr) const {
    double best = std::numeric_limits<double>::max();
    int best_face = -1;
    if (root_ >= 0) nearest_rec(root_, p, best, best_face);
    if (face_out) *face_out = best_face;
    return best;
  }

  /// First intersection of the ray origin + t * dir with the mesh, t in
  /// (t_min, t_max). Returns nullopt on miss.
  std::optional<RayHit> raycast(const Vec3& origin, const Vec3& dir, double t_max,
                                double t_min = 1e-9) const {
    RayHit hit;
    hit.t = t_max;
    bool found = false;
    if (root_ >= 0) raycast_rec(root_, origin, dir, t_min, hit, found);
    if (!found) return std::nullopt;
    return hit;
  }

 private:
  struct Node {
    Vec3 lo, hi;
    int left = -1, right = -1;
    int begin = 0, end = 0;  // leaf range into face_ids_
    bool leaf = false;
  };

  static constexpr int kLeafSize = 4;

  int build(size_t begin, size_t end) {
    Node node;
    node.lo = Vec3::Constant(std::numeric_limits<double>::max());
    node.hi = Vec3::Constant(std::numeric_limits<double>::lowest());
    for (size_t i = begin; i < end; ++i) {
      const auto& f = mesh_->faces[face_ids_[i]];
      for (int c = 0; c < 3; ++c) {
        node.lo = node.lo.cwiseMin(mesh_->vertices[f[c]]);
        node.hi = node.hi.cwiseMax(mesh_->vertices[f[c]]);
      }
    }
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin <= kLeafSize) {
      nodes_[id].leaf = true;
      nodes_[id].begin = static_cast<int>(begin);
      nodes_[id].end = static_cast<int>(end);
      return id;
    }
    int axis = 0;
    (node.hi - node.lo).maxCoeff(&axis);
    const size_t mid = begin + (end - begin) / 2;
    std::nth_element(face_ids_.begin() + begin, face_ids_.begin() + mid,
                     face_ids_.begin() + end, [this, axis](int a, int b) {
                       return centroids_[a][axis] < centroids_[b][axis];
                     });
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  double box_distance_sq(const Node& node, const Vec3& p) const {
    double d = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double lo = node.lo[c] - p[c];
      const double hi = p[c] - node.hi[c];
      const double v = std::max({lo, hi, 0.0});
      d += v * v;
    }
    return d;
  }

  void nearest_rec(int node_id, const Vec3& p, double& best, int& best_face) const {
    const Node& node = nodes_[node_id];
    if (box_distance_sq(node, p) >= best * best) return;
    if (node.leaf) {
      for (int i = node.begin; i < node.end; ++i) {
        const int fi = face_ids_[i];
        const double d = point_to_triangle_distance(p, *mesh_, fi);
        if (d < best) {
          best = d;
          best_face = fi;
        }
      }
      return;
    }
    // Visit the closer child first for tighter pruning.
    const double dl = box_distance_sq(nodes_[node.left], p);
    const double dr = box_distance_sq(nodes_[node.right], p);
    if (dl <= dr) {
      nearest_rec(node.left, p, best, best_face);
      nearest_rec(node.right, p, best, best_face);
    } else {
      nearest_rec(node.right, p, best, best_face);
      nearest_rec(node.left, p, best, best_face);
    }
  }

  static bool box_hit(const Node& node, const Vec3& o, const Vec3& inv_dir, double t_min,
                      double t_max) {
    for (int c = 0; c < 3; ++c) {
      double t0 = (node.lo[c] - o[c]) * inv_dir[c];
      double t1 = (node.hi[c] - o[c]) * inv_dir[c];
      if (inv_dir[c] < 0.0) std::swap(t0, t1);
      t_min = std::max(t_min, t0);
      t_max = std::min(t_max, t1);
      if (t_max < t_min) return false;
    }
    return true;
  }

  /// Moller-Trumbore.
  bool triangle_hit(int fi, const Vec3& o, const Vec3& dir, double t_min, RayHit& hit) const {
    const auto& f = mesh_->faces[fi];
    const Vec3& v0 = mesh_->vertices[f[0]];
    const Vec3 e1 = mesh_->vertices[f[1]] - v0;
    const Vec3 e2 = mesh_->vertices[f[2]] - v0;
    const Vec3 pvec = dir.cross(e2);
    const double det = e1.dot(pvec);
    if (std::abs(det) < 1e-14) return false;
    const double inv_det = 1.0 / det;
    const Vec3 tvec = o - v0;
    const double u = tvec.dot(pvec) * inv_det;
    if (u < -1e-12 || u > 1.0 + 1e-12) return false;
    const Vec3 qvec = tvec.cross(e1);
    const double v = dir.dot(qvec) * inv_det;
    if (v < -1e-12 || u + v > 1.0 + 1e-12) return false;
    const double t = e2.dot(qvec) * inv_det;
    if (t <= t_min || t >= hit.t) return false;
    hit.t = t;
    hit.face = fi;
    hit.barycentric = Vec3(1.0 - u - v, u, v);
    return true;
  }

  void raycast_rec(int node_id, const Vec3& o, const Vec3& dir, double t_min, RayHit& hit,
                   bool& found) const {
    const Node& node = nodes_[node_id];
    const Vec3 inv_dir(1.0 / dir.x(), 1.0 / dir.y(), 1.0 / dir.z());
    if (!box_hit(node, o, inv_dir, t_min, hit.t)) return;
    if (node.leaf) {
      for (int i = node.begin; i < node.end; ++i) {
        if (triangle_hit(face_ids_[i], o, dir, t_min, hit)) found = true;
      }
      return;
    }
    raycast_rec(node.left, o, dir, t_min, hit, found);
    raycast_rec(node.right, o, dir, t_min, hit, found);
  }

  const TriangleMesh* mesh_ = nullptr;
  std::vector<int> face_ids_;
  std::vector<Vec3> centroids_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace carvemap
