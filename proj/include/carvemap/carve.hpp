#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <queue>
#include <random>
#include <set>
#include <vector>

#include "carvemap/core.hpp"
#include "carvemap/parallel.hpp"

namespace carvemap {

namespace carve_detail {

/// (b-a) x (c-a) . (d-a): positive when d lies on the normal side of (a,b,c).
inline double orient3d(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return (b - a).cross(c - a).dot(d - a);
}

/// Scale-aware zero filter for orient3d.
inline double orient3d_eps(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  const double m = (b - a).norm() * (c - a).norm() * (d - a).norm();
  return 1e-13 * m;
}

/// Sign of the insphere determinant with a magnitude estimate for the zero
/// filter. For a positively oriented tet (a,b,c,d), positive means p lies
/// strictly inside the circumsphere.
inline double insphere(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d,
                       const Vec3& p, double* magnitude = nullptr) {
  const Vec3 ap = a - p, bp = b - p, cp = c - p, dp = d - p;
  const double aw = ap.squaredNorm(), bw = bp.squaredNorm(), cw = cp.squaredNorm(),
               dw = dp.squaredNorm();
  auto minor = [](const Vec3& x, const Vec3& y, const Vec3& z, double& mag) {
    const double t0 = x.x() * (y.y() * z.z() - y.z() * z.y());
    const double t1 = x.y() * (y.x() * z.z() - y.z() * z.x());
    const double t2 = x.z() * (y.x() * z.y() - y.y() * z.x());
    mag = std::abs(t0) + std::abs(t1) + std::abs(t2);
    return t0 - t1 + t2;
  };
  double m0, m1, m2, m3;
  const double d0 = minor(bp, cp, dp, m0);
  const double d1 = minor(ap, cp, dp, m1);
  const double d2 = minor(ap, bp, dp, m2);
  const double d3 = minor(ap, bp, cp, m3);
  if (magnitude) *magnitude = aw * m0 + bw * m1 + cw * m2 + dw * m3;
  return aw * d0 - bw * d1 + cw * d2 - dw * d3;
}

}  // namespace carve_detail

struct CarveDiagnostics {
  size_t n_vertices = 0;
  size_t n_tets = 0;
  size_t n_free = 0;
  size_t n_matter = 0;
  size_t rays_total = 0;
  size_t rays_skipped = 0;
  size_t duplicate_points = 0;
};

/// 3D Delaunay triangulation with per-tetrahedron ray-vote counts and the
/// free/matter labeling used for visibility-consistent surface extraction.
/// Vertices are the (jittered) cloud points plus 8 far bounding-box corners,
/// so every sensor-to-point ray stays inside the complex.
class TetrahedralComplex {
 public:
  struct Tetra {
    std::array<int, 4> v{-1, -1, -1, -1};
    std::array<int, 4> nbr{-1, -1, -1, -1};  // neighbor opposite v[i]
    int votes = 0;
    bool alive = false;
    bool free_region = false;
  };

  /// Bowyer-Watson incremental construction. `hull_hint` points are included
  /// in the bounding box (not as vertices) so ray origins stay interior.
  TetrahedralComplex(const std::vector<Vec3>& cloud,
                     const std::vector<Vec3>& hull_hint = {}, uint64_t jitter_seed = 1234,
                     double jitter = 1e-6) {
    if (cloud.size() < 5) throw Error("build_triangulation: need at least 5 points");

    // Deterministic jitter avoids exactly degenerate configurations (grids,
    // collinear scans) without symbolic perturbation.
    std::mt19937_64 rng(jitter_seed);
    std::uniform_real_distribution<double> uni(-jitter, jitter);
    std::vector<Vec3> pts(cloud.size());
    for (size_t i = 0; i < cloud.size(); ++i)
      pts[i] = cloud[i] + Vec3(uni(rng), uni(rng), uni(rng));

    Vec3 lo = pts[0], hi = pts[0];
    for (const auto& p : pts) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    for (const auto& p : hull_hint) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    const Vec3 center = 0.5 * (lo + hi);
    const double half = 2.5 * std::max({hi.x() - lo.x(), hi.y() - lo.y(), hi.z() - lo.z(),
                                        1.0}) + 10.0;

    // Cube corners; bit k of the index selects +half along axis k.
    vertices_.reserve(8 + pts.size());
    for (int corner = 0; corner < 8; ++corner) {
      Vec3 c = center;
      for (int axis = 0; axis < 3; ++axis)
        c[axis] += (corner >> axis) & 1 ? half : -half;
      vertices_.push_back(c);
    }
    n_box_vertices_ = 8;

    // Kuhn subdivision of the cube: six tets sharing the 0-7 diagonal.
    const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    for (const auto& perm : perms) {
      std::array<int, 4> tet;
      int corner = 0;
      tet[0] = 0;
      for (int k = 0; k < 3; ++k) {
        corner |= 1 << perm[k];
        tet[k + 1] = corner;
      }
      add_tet(tet);
    }
    rebuild_adjacency();

    int hint = first_alive();
    for (const auto& p : pts) {
      hint = insert(p, hint);
    }
    diagnostics_.n_vertices = vertices_.size();
    diagnostics_.n_tets = alive_count();
  }

  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::vector<Tetra>& tets() const { return tets_; }
  const CarveDiagnostics& diagnostics() const { return diagnostics_; }

  size_t alive_count() const {
    size_t n = 0;
    for (const auto& t : tets_) n += t.alive;
    return n;
  }

  /// Brute-force structural validation (tests): orientation, adjacency
  /// symmetry and the empty-circumsphere property.
  bool validate(std::string* reason = nullptr, double sphere_tol = 1e-9) const {
    auto fail = [&](const std::string& why) {
      if (reason) *reason = why;
      return false;
    };
    for (size_t ti = 0; ti < tets_.size(); ++ti) {
      const Tetra& t = tets_[ti];
      if (!t.alive) continue;
      if (carve_detail::orient3d(vertices_[t.v[0]], vertices_[t.v[1]], vertices_[t.v[2]],
                                 vertices_[t.v[3]]) <= 0)
        return fail("non-positive tetrahedron orientation");
      for (int f = 0; f < 4; ++f) {
        const int nb = t.nbr[f];
        if (nb < 0) continue;
        if (!tets_[nb].alive) return fail("neighbor points to dead tet");
        bool found = false;
        for (int g = 0; g < 4; ++g)
          if (tets_[nb].nbr[g] == static_cast<int>(ti)) found = true;
        if (!found) return fail("asymmetric adjacency");
      }
      // Empty circumsphere against every vertex (quadratic; tests only).
      for (size_t vi = 0; vi < vertices_.size(); ++vi) {
        bool is_corner = false;
        for (int k = 0; k < 4; ++k)
          if (t.v[k] == static_cast<int>(vi)) is_corner = true;
        if (is_corner) continue;
        double magnitude = 0.0;
        const double det =
            carve_detail::insphere(vertices_[t.v[0]], vertices_[t.v[1]], vertices_[t.v[2]],
                                   vertices_[t.v[3]], vertices_[vi], &magnitude);
        if (det > sphere_tol * std::max(magnitude, 1.0))
          return fail("circumsphere violation");
      }
    }
    if (reason) reason->clear();
    return true;
  }

  // -- vote casting ---------------------------------------------------------

  /// Walk each ray from origin to target through the complex, incrementing
  /// every tetrahedron the open segment crosses with positive length. The
  /// walk is facet-to-facet; numerical stalls relocate and continue, rays
  /// that cannot be traced are counted as skipped.
  void cast_votes(const std::vector<Ray>& rays) {
    diagnostics_.rays_total += rays.size();
    const size_t n = rays.size();
    if (n == 0) return;

    const int workers = std::max(1, std::min<int>(effective_threads(), static_cast<int>(n)));
    std::vector<std::vector<int>> worker_votes(workers);
    std::vector<size_t> worker_skipped(workers, 0);
    const size_t chunk = (n + workers - 1) / workers;

    parallel_for(workers, [&](size_t w) {
      std::vector<int>& votes = worker_votes[w];
      votes.assign(tets_.size(), 0);
      int hint = first_alive();
      Vec3 last_origin(std::numeric_limits<double>::max(), 0, 0);
      int origin_tet = -1;
      const size_t begin = w * chunk;
      const size_t end = std::min(begin + chunk, n);
      for (size_t i = begin; i < end; ++i) {
        const Ray& ray = rays[i];
        if ((ray.origin - last_origin).squaredNorm() != 0.0) {
          origin_tet = locate(ray.origin, hint);
          last_origin = ray.origin;
        }
        if (origin_tet < 0 || !trace_ray(ray, origin_tet, votes)) ++worker_skipped[w];
        if (origin_tet >= 0) hint = origin_tet;
      }
    });

    // Deterministic merge in worker order.
    for (int w = 0; w < workers; ++w) {
      for (size_t t = 0; t < tets_.size(); ++t) tets_[t].votes += worker_votes[w][t];
      diagnostics_.rays_skipped += worker_skipped[w];
    }
  }

  /// Brute-force vote oracle: clips the segment against every alive
  /// tetrahedron independently. Counts must equal the traversal's.
  std::vector<int> brute_force_votes(const std::vector<Ray>& rays) const {
    std::vector<int> votes(tets_.size(), 0);
    for (const auto& ray : rays) {
      for (size_t ti = 0; ti < tets_.size(); ++ti) {
        if (!tets_[ti].alive) continue;
        double t_in = 0.0, t_out = 1.0;
        int exit_facet = -1;
        if (clip_segment(static_cast<int>(ti), ray.origin, ray.target, t_in, t_out, exit_facet) &&
            t_out - t_in > kMinOverlap)
          ++votes[ti];
      }
    }
    return votes;
  }

  // -- labeling and extraction ----------------------------------------------

  /// Free/matter labeling with manifold-preserving region growing, then
  /// extraction of the oriented boundary surface (normals into free space).
  TriangleMesh label_and_extract(int vote_threshold = 1) {
    // Reset any previous labeling.
    for (auto& t : tets_) t.free_region = false;

    // Seed: highest-vote provisionally-free tet (lowest id on ties).
    int seed = -1;
    int best_votes = vote_threshold - 1;
    for (size_t ti = 0; ti < tets_.size(); ++ti) {
      if (!tets_[ti].alive) continue;
      if (tets_[ti].votes > best_votes) {
        best_votes = tets_[ti].votes;
        seed = static_cast<int>(ti);
      }
    }
    if (seed < 0) throw Error("label_and_extract: no visibility evidence");

    // Highest votes first; ties resolved by id for determinism.
    using Entry = std::pair<int, int>;  // (votes, -id)
    std::priority_queue<Entry> queue;
    tets_[seed].free_region = true;
    auto push_neighbors = [&](int ti) {
      for (int f = 0; f < 4; ++f) {
        const int nb = tets_[ti].nbr[f];
        if (nb >= 0 && tets_[nb].alive && !tets_[nb].free_region &&
            tets_[nb].votes >= vote_threshold)
          queue.emplace(tets_[nb].votes, -nb);
      }
    };
    push_neighbors(seed);
    while (!queue.empty()) {
      const int ti = -queue.top().second;
      queue.pop();
      if (tets_[ti].free_region) continue;
      tets_[ti].free_region = true;
      if (region_is_manifold_at(ti)) {
        push_neighbors(ti);
      } else {
        tets_[ti].free_region = false;  // rejected; retried when the front moves
      }
    }

    diagnostics_.n_free = 0;
    for (const auto& t : tets_)
      if (t.alive && t.free_region) ++diagnostics_.n_free;
    diagnostics_.n_matter = alive_count() - diagnostics_.n_free;

    return extract_boundary();
  }

  /// Boundary facets between free and matter tetrahedra, oriented with the
  /// normal pointing into free space.
  TriangleMesh extract_boundary() const {
    TriangleMesh mesh;
    std::map<int, int> remap;
    for (size_t ti = 0; ti < tets_.size(); ++ti) {
      const Tetra& t = tets_[ti];
      if (!t.alive || !t.free_region) continue;
      for (int f = 0; f < 4; ++f) {
        const int nb = t.nbr[f];
        if (nb < 0 || !tets_[nb].alive || tets_[nb].free_region) continue;
        const std::array<int, 3> facet = facet_vertices(static_cast<int>(ti), f);
        std::array<int, 3> tri;
        for (int k = 0; k < 3; ++k) {
          auto [it, inserted] = remap.try_emplace(facet[k], static_cast<int>(mesh.vertices.size()));
          if (inserted) mesh.vertices.push_back(vertices_[facet[k]]);
          tri[k] = it->second;
        }
        mesh.faces.push_back(tri);
      }
    }
    std::string reason;
    mesh.manifold = verify_manifold(mesh, &reason);
    return mesh;
  }

  /// Facet opposite local vertex f, ordered so that the face normal points
  /// toward that vertex (into the tetrahedron). Valid for positively
  /// oriented tets, which add_tet guarantees.
  std::array<int, 3> facet_vertices(int ti, int f) const {
    static const int order[4][3] = {{1, 3, 2}, {0, 2, 3}, {0, 3, 1}, {0, 1, 2}};
    const Tetra& t = tets_[ti];
    return {t.v[order[f][0]], t.v[order[f][1]], t.v[order[f][2]]};
  }

 private:
  static constexpr double kMinOverlap = 1e-9;

  int first_alive() const {
    for (size_t i = 0; i < tets_.size(); ++i)
      if (tets_[i].alive) return static_cast<int>(i);
    return -1;
  }

  int add_tet(const std::array<int, 4>& v) {
    std::array<int, 4> tet = v;
    if (carve_detail::orient3d(vertices_[tet[0]], vertices_[tet[1]], vertices_[tet[2]],
                               vertices_[tet[3]]) < 0)
      std::swap(tet[2], tet[3]);
    Tetra t;
    t.v = tet;
    t.alive = true;
    int id;
    if (!free_slots_.empty()) {
      id = free_slots_.back();
      free_slots_.pop_back();
      tets_[id] = t;
    } else {
      id = static_cast<int>(tets_.size());
      tets_.push_back(t);
    }
    return id;
  }

  void rebuild_adjacency() {
    std::map<std::array<int, 3>, std::pair<int, int>> facets;
    for (size_t ti = 0; ti < tets_.size(); ++ti) {
      if (!tets_[ti].alive) continue;
      for (int f = 0; f < 4; ++f) {
        std::array<int, 3> key;
        int k = 0;
        for (int c = 0; c < 4; ++c)
          if (c != f) key[k++] = tets_[ti].v[c];
        std::sort(key.begin(), key.end());
        auto it = facets.find(key);
        if (it == facets.end()) {
          facets[key] = {static_cast<int>(ti), f};
        } else {
          tets_[ti].nbr[f] = it->second.first;
          tets_[it->second.first].nbr[it->second.second] = static_cast<int>(ti);
        }
      }
    }
  }

  /// Signed volume coordinates of p w.r.t. facet f of tet ti; positive means
  /// p on the interior side.
  double facet_side(int ti, int f, const Vec3& p) const {
    const auto fv = facet_vertices(ti, f);
    return carve_detail::orient3d(vertices_[fv[0]], vertices_[fv[1]], vertices_[fv[2]], p);
  }

  /// Point location by orientation walk.
  int locate(const Vec3& p, int hint) const {
    int cur = (hint >= 0 && hint < static_cast<int>(tets_.size()) && tets_[hint].alive)
                  ? hint
                  : first_alive();
    if (cur < 0) return -1;
    const size_t max_steps = 8 * tets_.size() + 64;
    int step = 0;
    for (size_t iter = 0; iter < max_steps; ++iter) {
      int next = -1;
      for (int k = 0; k < 4; ++k) {
        const int f = (k + step) % 4;
        if (facet_side(cur, f, p) < 0) {
          next = tets_[cur].nbr[f];
          break;
        }
      }
      if (next == -1) {
        // Either inside (no negative side) or outside the hull.
        bool inside = true;
        for (int f = 0; f < 4; ++f)
          if (facet_side(cur, f, p) < 0) inside = false;
        return inside ? cur : -1;
      }
      cur = next;
      ++step;
    }
    return -1;
  }

  /// Clip segment [o,t] against tet ti. Returns false when the overlap is
  /// empty. exit_facet is the facet realizing t_out (-1 if the segment ends
  /// inside).
  bool clip_segment(int ti, const Vec3& o, const Vec3& t, double& t_in, double& t_out,
                    int& exit_facet) const {
    t_in = 0.0;
    t_out = 1.0;
    exit_facet = -1;
    for (int f = 0; f < 4; ++f) {
      const auto fv = facet_vertices(ti, f);
      const Vec3& a = vertices_[fv[0]];
      const Vec3 n = (vertices_[fv[1]] - a).cross(vertices_[fv[2]] - a);
      const double s0 = n.dot(o - a);
      const double s1 = n.dot(t - a);
      if (s0 >= 0 && s1 >= 0) continue;
      if (s0 < 0 && s1 < 0) return false;
      const double tau = s0 / (s0 - s1);
      if (s0 >= 0 && s1 < 0) {  // exiting
        if (tau < t_out) {
          t_out = tau;
          exit_facet = f;
        }
      } else {  // entering
        t_in = std::max(t_in, tau);
      }
    }
    return t_out > t_in;
  }

  bool trace_ray(const Ray& ray, int start_tet, std::vector<int>& votes) const {
    int cur = start_tet;
    double progressed = 0.0;
    const size_t max_steps = 4 * tets_.size() + 64;
    int relocations = 0;
    int stalled = 0;
    for (size_t iter = 0; iter < max_steps; ++iter) {
      double t_in = 0, t_out = 1;
      int exit_facet = -1;
      const bool overlap =
          clip_segment(cur, ray.origin, ray.target, t_in, t_out, exit_facet);
      const bool no_progress = overlap && t_out <= progressed && ++stalled > 8;
      if (!overlap || t_out < progressed - 1e-9 || no_progress) {
        // Numerical stall: relocate slightly past the current progress.
        if (++relocations > 4) return false;
        stalled = 0;
        const double t_next = std::min(progressed + 1e-7, 1.0);
        const Vec3 probe = ray.origin + t_next * (ray.target - ray.origin);
        cur = locate(probe, cur);
        if (cur < 0) return false;
        continue;
      }
      if (t_out > progressed) stalled = 0;
      if (t_out - std::max(t_in, 0.0) > kMinOverlap) ++votes[cur];
      if (t_out >= 1.0 - 1e-12 || exit_facet < 0) return true;  // reached the target
      progressed = std::max(progressed, t_out);
      const int next = tets_[cur].nbr[exit_facet];
      if (next < 0 || !tets_[next].alive) return false;  // left the complex
      cur = next;
    }
    return false;
  }

  // -- incremental insertion --------------------------------------------------

  int insert(const Vec3& p, int hint) {
    const int located = locate(p, hint);
    if (located < 0) throw Error("build_triangulation: point outside the bounding complex");

    // Duplicate guard.
    for (int k = 0; k < 4; ++k) {
      if ((vertices_[tets_[located].v[k]] - p).squaredNorm() < 1e-24) {
        ++diagnostics_.duplicate_points;
        return located;
      }
    }

    const int pid = static_cast<int>(vertices_.size());
    vertices_.push_back(p);

    // Conflict region: BFS over tets whose circumsphere contains p.
    std::vector<int> conflict;
    std::set<int> in_conflict;
    std::deque<int> bfs{located};
    in_conflict.insert(located);
    while (!bfs.empty()) {
      const int ti = bfs.front();
      bfs.pop_front();
      conflict.push_back(ti);
      for (int f = 0; f < 4; ++f) {
        const int nb = tets_[ti].nbr[f];
        if (nb < 0 || in_conflict.count(nb)) continue;
        double magnitude = 0;
        const Tetra& t = tets_[nb];
        const double det =
            carve_detail::insphere(vertices_[t.v[0]], vertices_[t.v[1]], vertices_[t.v[2]],
                                   vertices_[t.v[3]], p, &magnitude);
        if (det > 1e-13 * std::max(magnitude, 1.0)) {
          in_conflict.insert(nb);
          bfs.push_back(nb);
        }
      }
    }

    // Cavity boundary; enforce star-shapedness w.r.t. p by absorbing tets
    // whose boundary facet is not clearly visible from p.
    struct BoundaryFacet {
      std::array<int, 3> v;  // ordered toward the cavity interior
      int outer;             // neighbor tet outside the cavity (-1 = hull)
      int outer_facet;
    };
    std::vector<BoundaryFacet> boundary;
    for (int repair = 0;; ++repair) {
      if (repair > 64) throw Error("build_triangulation: cavity repair failed");
      boundary.clear();
      bool grown = false;
      for (size_t ci = 0; ci < conflict.size() && !grown; ++ci) {
        const int ti = conflict[ci];
        for (int f = 0; f < 4; ++f) {
          const int nb = tets_[ti].nbr[f];
          if (nb >= 0 && in_conflict.count(nb)) continue;
          const auto fv = facet_vertices(ti, f);
          const double side = carve_detail::orient3d(vertices_[fv[0]], vertices_[fv[1]],
                                                     vertices_[fv[2]], p);
          const double eps = carve_detail::orient3d_eps(vertices_[fv[0]], vertices_[fv[1]],
                                                        vertices_[fv[2]], p);
          if (side <= eps) {
            // Not star-shaped here: absorb the outer tet and restart.
            if (nb < 0) throw Error("build_triangulation: cavity reached the hull");
            in_conflict.insert(nb);
            conflict.push_back(nb);
            grown = true;
            break;
          }
          int outer_facet = -1;
          if (nb >= 0)
            for (int g = 0; g < 4; ++g)
              if (tets_[nb].nbr[g] == ti) outer_facet = g;
          boundary.push_back({fv, nb, outer_facet});
        }
      }
      if (!grown) break;
    }

    for (int ti : conflict) {
      tets_[ti].alive = false;
      free_slots_.push_back(ti);
    }

    // Fill the cavity with tets (facet, p); wire adjacency through the shared
    // edges of the cavity boundary.
    std::map<std::pair<int, int>, std::pair<int, int>> open_edges;  // edge -> (tet, facet)
    int last_created = -1;
    for (const auto& bf : boundary) {
      const int nt = add_tet({bf.v[0], bf.v[1], bf.v[2], pid});
      last_created = nt;
      // facet 3 (opposite p) faces the outer tet.
      tets_[nt].nbr[3] = bf.outer;
      if (bf.outer >= 0) tets_[bf.outer].nbr[bf.outer_facet] = nt;
      // Internal facets: opposite v[k] shares edge (other two boundary verts).
      for (int k = 0; k < 3; ++k) {
        const int e0 = bf.v[(k + 1) % 3];
        const int e1 = bf.v[(k + 2) % 3];
        const auto key = std::minmax(e0, e1);
        auto it = open_edges.find({key.first, key.second});
        if (it == open_edges.end()) {
          open_edges[{key.first, key.second}] = {nt, k};
        } else {
          tets_[nt].nbr[k] = it->second.first;
          tets_[it->second.first].nbr[it->second.second] = nt;
          open_edges.erase(it);
        }
      }
    }
    if (!open_edges.empty()) throw Error("build_triangulation: cavity fill left open edges");
    return last_created;
  }

  // -- manifold-preserving growth ---------------------------------------------

  /// All alive tets incident to vertex v reachable from `start` through
  /// facets containing v (the full star, since stars are facet-connected in
  /// a triangulated convex region).
  void vertex_star(int v, int start, std::vector<int>& star) const {
    star.clear();
    std::set<int> seen{start};
    std::deque<int> bfs{start};
    while (!bfs.empty()) {
      const int ti = bfs.front();
      bfs.pop_front();
      star.push_back(ti);
      for (int f = 0; f < 4; ++f) {
        if (tets_[ti].v[f] == v) continue;  // facet opposite v does not contain v
        const int nb = tets_[ti].nbr[f];
        if (nb < 0 || !tets_[nb].alive || seen.count(nb)) continue;
        seen.insert(nb);
        bfs.push_back(nb);
      }
    }
  }

  /// Local 2-manifold test of the free-region boundary around tet ti (which
  /// was just tentatively added): every edge of ti must carry 0 or 2 boundary
  /// facets and every vertex's boundary facets must form a single closed fan.
  bool region_is_manifold_at(int ti) const {
    const Tetra& t = tets_[ti];

    // Edge condition via the ring of tets around each of the 6 edges.
    for (int e0 = 0; e0 < 3; ++e0) {
      for (int e1 = e0 + 1; e1 < 4; ++e1) {
        const int u = t.v[e0], w = t.v[e1];
        // Walk around the edge (u,w). Membership sequence around the ring.
        std::vector<char> ring;
        int cur = ti, from = -1;
        bool open_ended = false;
        for (size_t guard = 0; guard < tets_.size() + 2; ++guard) {
          ring.push_back(tets_[cur].free_region ? 1 : 0);
          // The two facets of cur containing edge (u,w) are those opposite
          // the other two vertices.
          int exits[2], n_exits = 0;
          for (int k = 0; k < 4; ++k)
            if (tets_[cur].v[k] != u && tets_[cur].v[k] != w) exits[n_exits++] = k;
          int go = -1;
          for (int k = 0; k < n_exits; ++k) {
            const int nb = tets_[cur].nbr[exits[k]];
            if (nb != from) go = exits[k];
          }
          // Prefer not going back where we came from; at the start pick any.
          if (from == -1) go = exits[0];
          const int nb = tets_[cur].nbr[go];
          if (nb < 0 || !tets_[nb].alive) {
            open_ended = true;
            break;
          }
          if (nb == ti && guard > 0) break;  // closed the ring
          from = cur;
          cur = nb;
          if (cur == ti) break;
        }
        if (open_ended) {
          // Walk the other direction to complete the path.
          std::vector<char> other;
          int cur2 = ti, from2 = -1;
          // First step: choose the exit not taken initially.
          for (size_t guard = 0; guard < tets_.size() + 2; ++guard) {
            int exits[2], n_exits = 0;
            for (int k = 0; k < 4; ++k)
              if (tets_[cur2].v[k] != u && tets_[cur2].v[k] != w) exits[n_exits++] = k;
            int go = -1;
            if (from2 == -1) {
              go = exits[1];
            } else {
              for (int k = 0; k < n_exits; ++k)
                if (tets_[cur2].nbr[exits[k]] != from2) go = exits[k];
            }
            const int nb = tets_[cur2].nbr[go];
            if (nb < 0 || !tets_[nb].alive) break;
            other.push_back(tets_[nb].free_region ? 1 : 0);
            from2 = cur2;
            cur2 = nb;
          }
          // Path: outside | other(reversed) | ti..ring | outside.
          std::vector<char> path;
          path.push_back(0);
          for (auto it = other.rbegin(); it != other.rend(); ++it) path.push_back(*it);
          for (char c : ring) path.push_back(c);
          path.push_back(0);
          int transitions = 0;
          for (size_t i = 0; i + 1 < path.size(); ++i)
            if (path[i] != path[i + 1]) ++transitions;
          if (transitions != 0 && transitions != 2) return false;
        } else {
          int transitions = 0;
          for (size_t i = 0; i < ring.size(); ++i)
            if (ring[i] != ring[(i + 1) % ring.size()]) ++transitions;
          if (transitions != 0 && transitions != 2) return false;
        }
      }
    }

    // Vertex condition: boundary facets incident to each vertex of ti must
    // form a single fan (cycle, or path when the star touches the hull).
    std::vector<int> star;
    for (int c = 0; c < 4; ++c) {
      const int v = t.v[c];
      vertex_star(v, ti, star);
      // Link edges: for each boundary facet at v, the edge between its two
      // non-v vertices.
      std::map<std::pair<int, int>, int> link_degree_edges;
      std::map<int, int> link_vertex_degree;
      int n_facets = 0;
      for (int s : star) {
        if (!tets_[s].free_region) continue;
        for (int f = 0; f < 4; ++f) {
          if (tets_[s].v[f] == v) continue;  // facet must contain v
          const int nb = tets_[s].nbr[f];
          if (nb >= 0 && tets_[nb].alive && tets_[nb].free_region) continue;
          // Boundary facet containing v.
          ++n_facets;
          int others[2], no = 0;
          for (int k = 0; k < 4; ++k)
            if (k != f && tets_[s].v[k] != v) others[no++] = tets_[s].v[k];
          const auto key = std::minmax(others[0], others[1]);
          ++link_degree_edges[{key.first, key.second}];
          ++link_vertex_degree[others[0]];
          ++link_vertex_degree[others[1]];
        }
      }
      if (n_facets == 0) continue;
      // Each link vertex on at most two boundary facets.
      int odd = 0;
      for (const auto& [lv, deg] : link_vertex_degree) {
        if (deg > 2) return false;
        if (deg == 1) ++odd;
      }
      if (odd != 0 && odd != 2) return false;
      // Connectivity of the facet fan: facets adjacent when sharing a link
      // vertex; walk via union-find over link vertices.
      std::map<int, int> parent;
      std::function<int(int)> find = [&](int x) {
        auto it = parent.find(x);
        if (it == parent.end() || it->second == x) return x;
        return it->second = find(it->second);
      };
      for (const auto& [edge, count] : link_degree_edges) {
        parent.try_emplace(edge.first, edge.first);
        parent.try_emplace(edge.second, edge.second);
        const int ra = find(edge.first), rb = find(edge.second);
        if (ra != rb) parent[ra] = rb;
      }
      std::set<int> roots;
      for (const auto& [lv, deg] : link_vertex_degree) roots.insert(find(lv));
      if (roots.size() > 1) return false;
    }
    return true;
  }

  std::vector<Vec3> vertices_;
  std::vector<Tetra> tets_;
  std::vector<int> free_slots_;
  int n_box_vertices_ = 0;
  CarveDiagnostics diagnostics_;
};

/// Disjoint union of the scene mesh with car hull meshes; vertex indices are
/// re-based and the manifold flag re-verified per component.
inline TriangleMesh merge_car_hulls(const TriangleMesh& scene,
                                    const std::vector<TriangleMesh>& hulls) {
  TriangleMesh out = scene;
  for (const auto& hull : hulls) {
    const int base = static_cast<int>(out.vertices.size());
    out.vertices.insert(out.vertices.end(), hull.vertices.begin(), hull.vertices.end());
    for (const auto& f : hull.faces) out.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
  }
  out.manifold = verify_manifold(out);
  return out;
}

}  // namespace carvemap
