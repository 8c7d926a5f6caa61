#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <vector>

#include "carvemap/core.hpp"

namespace carvemap {

struct GroundSegOptions {
  double cell_size = 0.5;   // meters
  double max_step = 0.15;   // height continuity between neighboring cells
  double point_band = 0.20; // a point is ground when within this of its cell height
};

/// 2D height grid used for ground classification. Cells are keyed on the XY
/// plane; `classified` cells form a single connected component grown from the
/// seed cell under the sensor.
struct GroundGrid {
  double cell_size = 0.5;
  std::pair<int64_t, int64_t> seed;
  struct Cell {
    double height = std::numeric_limits<double>::max();  // lowest point z
    bool classified = false;
  };
  std::map<std::pair<int64_t, int64_t>, Cell> cells;

  std::pair<int64_t, int64_t> key(double x, double y) const {
    return {static_cast<int64_t>(std::floor(x / cell_size)),
            static_cast<int64_t>(std::floor(y / cell_size))};
  }

  /// Ground height under (x,y): the cell's height if classified, otherwise
  /// the height of the nearest classified cell in a small ring search,
  /// otherwise fallback.
  double height_at(double x, double y, double fallback = 0.0) const {
    const auto k = key(x, y);
    auto it = cells.find(k);
    if (it != cells.end() && it->second.classified) return it->second.height;
    for (int radius = 1; radius <= 8; ++radius) {
      double best = std::numeric_limits<double>::max();
      bool found = false;
      for (int dx = -radius; dx <= radius; ++dx) {
        for (int dy = -radius; dy <= radius; ++dy) {
          if (std::max(std::abs(dx), std::abs(dy)) != radius) continue;
          auto nit = cells.find({k.first + dx, k.second + dy});
          if (nit != cells.end() && nit->second.classified) {
            found = true;
            best = std::min(best, nit->second.height);
          }
        }
      }
      if (found) return best;
    }
    return fallback;
  }
};

struct GroundSegmentation {
  std::vector<int> ground;      // indices into the input cloud
  std::vector<int> non_ground;  // complement, in input order
  GroundGrid grid;
};

/// Seeded region growing over a height grid. The seed is the cell containing
/// the sensor's ground projection; a cell joins the ground set when its
/// lowest-point height is within max_step of its nearest already-classified
/// neighbor. A point is ground when its cell is classified and its height
/// stays within point_band of the cell height. Output index sets partition
/// the input.
inline GroundSegmentation segment_ground(const std::vector<Vec3>& cloud,
                                         const Vec3& sensor_center,
                                         const GroundSegOptions& opt = {}) {
  if (cloud.empty()) throw Error("segment_ground: empty cloud");
  GroundSegmentation out;
  out.grid.cell_size = opt.cell_size;
  auto& cells = out.grid.cells;

  std::map<std::pair<int64_t, int64_t>, std::vector<int>> members;
  for (size_t i = 0; i < cloud.size(); ++i) {
    const auto k = out.grid.key(cloud[i].x(), cloud[i].y());
    auto& cell = cells[k];
    cell.height = std::min(cell.height, cloud[i].z());
    members[k].push_back(static_cast<int>(i));
  }

  const auto seed = out.grid.key(sensor_center.x(), sensor_center.y());
  out.grid.seed = seed;
  if (cells.find(seed) == cells.end())
    throw Error("segment_ground: no ground under sensor");

  // Breadth-first growth with re-testing: a cell rejected once is revisited
  // when a new neighbor becomes classified, so the final set is the fixpoint
  // of the height-continuity rule.
  cells[seed].classified = true;
  std::deque<std::pair<int64_t, int64_t>> queue;
  auto push_neighbors = [&](const std::pair<int64_t, int64_t>& k) {
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy) {
        if (dx == 0 && dy == 0) continue;
        const std::pair<int64_t, int64_t> nk{k.first + dx, k.second + dy};
        auto it = cells.find(nk);
        if (it != cells.end() && !it->second.classified) queue.push_back(nk);
      }
  };
  push_neighbors(seed);
  while (!queue.empty()) {
    const auto k = queue.front();
    queue.pop_front();
    auto& cell = cells[k];
    if (cell.classified) continue;
    double nearest_gap = std::numeric_limits<double>::max();
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy) {
        if (dx == 0 && dy == 0) continue;
        auto it = cells.find({k.first + dx, k.second + dy});
        if (it != cells.end() && it->second.classified)
          nearest_gap = std::min(nearest_gap, std::abs(cell.height - it->second.height));
      }
    if (nearest_gap <= opt.max_step) {
      cell.classified = true;
      push_neighbors(k);
    }
  }

  for (const auto& [k, idxs] : members) {
    const auto& cell = cells[k];
    for (int i : idxs) {
      if (cell.classified && std::abs(cloud[i].z() - cell.height) <= opt.point_band)
        out.ground.push_back(i);
      else
        out.non_ground.push_back(i);
    }
  }
  // Restore input order (members map iterates in cell-key order).
  std::sort(out.ground.begin(), out.ground.end());
  std::sort(out.non_ground.begin(), out.non_ground.end());
  return out;
}

/// Union of the pipeline cloud with previously removed ground points; rays
/// are preserved because both sides carry their own origin indices.
template <typename PointVec>
inline PointVec restore_ground(const PointVec& non_ground, const PointVec& ground) {
  PointVec out = non_ground;
  out.insert(out.end(), ground.begin(), ground.end());
  return out;
}

}  // namespace carvemap
