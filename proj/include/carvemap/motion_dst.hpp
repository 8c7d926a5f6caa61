#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "carvemap/core.hpp"
#include "carvemap/parallel.hpp"
#include "carvemap/registration.hpp"

namespace carvemap {

/// Belief mass over {empty, occupied, unknown} for one point w.r.t. laser
/// evidence. Invariant: components nonnegative, summing to 1.
struct EvidenceMass {
  double empty = 0.0;
  double occupied = 0.0;
  double unknown = 1.0;

  static EvidenceMass vacuous() { return {0.0, 0.0, 1.0}; }
  static EvidenceMass certain_occupied() { return {0.0, 1.0, 0.0}; }

  bool valid(double tol = 1e-9) const {
    return empty >= -tol && occupied >= -tol && unknown >= -tol &&
           std::abs(empty + occupied + unknown - 1.0) <= tol;
  }
};

struct MotionLabel {
  bool moving = false;
  double conflict = 0.0;  // K
};

struct MotionOptions {
  double mass = 0.9;                // lambda assigned to the evidenced state
  double range_tolerance = 0.1;     // meters around the beam endpoint
  double angular_gate = 0.0;        // theta_b, radians; <= 0 derives half the
                                    // beam spacing from the scans
  int window = 5;                   // scans compared on each side
  double conflict_threshold = 0.5;  // K above which a point is moving
  double saturation = 0.01;        // stop folding a scan once unknown < this
};

/// Visibility rule for one beam: vacuous outside the angular gate; otherwise
/// empty before the return, occupied at the return, unknown behind it.
inline EvidenceMass beam_evidence(const Vec3& point, const Ray& beam, double angular_gate,
                                  double range_tolerance, double mass = 0.9) {
  const double beam_len = beam.length();
  if (beam_len <= 0.0) throw Error("beam_evidence: zero-length beam");
  const Vec3 to_point = point - beam.origin;
  const double r_p = to_point.norm();
  if (r_p <= 0.0) return EvidenceMass::vacuous();
  const double cos_angle = to_point.dot(beam.target - beam.origin) / (r_p * beam_len);
  if (cos_angle < std::cos(angular_gate)) return EvidenceMass::vacuous();

  if (r_p < beam_len - range_tolerance) return {mass, 0.0, 1.0 - mass};
  if (r_p <= beam_len + range_tolerance) return {0.0, mass, 1.0 - mass};
  return EvidenceMass::vacuous();
}

/// Dempster's rule of combination on the {empty, occupied} frame with
/// ignorance mass. Returns the combined mass and the conflict kappa.
inline std::pair<EvidenceMass, double> combine(const EvidenceMass& a, const EvidenceMass& b) {
  const double kappa = a.empty * b.occupied + a.occupied * b.empty;
  if (kappa >= 1.0 - 1e-12) throw Error("combine: total conflict");
  const double norm = 1.0 - kappa;
  EvidenceMass out;
  out.empty = (a.empty * b.empty + a.empty * b.unknown + a.unknown * b.empty) / norm;
  out.occupied = (a.occupied * b.occupied + a.occupied * b.unknown + a.unknown * b.occupied) / norm;
  out.unknown = (a.unknown * b.unknown) / norm;
  return {out, kappa};
}

/// Angular hash of a scan's beams around its sensor center, for constant-time
/// lookup of the beams pointing near a query direction.
class BeamIndex {
 public:
  BeamIndex() = default;
  BeamIndex(const AlignedScan& scan, double bin_size) : scan_(&scan), bin_(std::max(bin_size, 1e-4)) {
    n_az_ = std::max(1, static_cast<int>(std::ceil(2.0 * M_PI / bin_)));
    n_el_ = std::max(1, static_cast<int>(std::ceil(M_PI / bin_)));
    bins_.resize(static_cast<size_t>(n_az_) * n_el_);
    for (size_t i = 0; i < scan.points.size(); ++i) {
      const Vec3 d = scan.points[i] - scan.sensor_center;
      bins_[bin_of(d)].push_back(static_cast<int>(i));
    }
    // Per-beam range spread across the nearest angular neighbors (gate
    // independent: beam grids are often anisotropic and the next elevation
    // ring can lie outside the gate while still measuring the same surface).
    // On oblique surfaces the spread tracks how fast the measured range
    // changes within one beam spacing, which is the uncertainty of using
    // this beam as occupancy evidence for nearby directions.
    spread_.assign(scan.points.size(), 0.0);
    std::vector<Vec3> dirs(scan.points.size(), Vec3::UnitX());
    std::vector<double> ranges(scan.points.size(), 0.0);
    for (size_t i = 0; i < scan.points.size(); ++i) {
      const Vec3 d = scan.points[i] - scan.sensor_center;
      const double r = d.norm();
      ranges[i] = r;
      if (r > 0) dirs[i] = d / r;
    }
    const KdTree3 dir_tree(dirs);
    for (size_t i = 0; i < scan.points.size(); ++i) {
      double lo = ranges[i], hi = ranges[i];
      for (int nb : dir_tree.knn(dirs[i], 5)) {
        lo = std::min(lo, ranges[nb]);
        hi = std::max(hi, ranges[nb]);
      }
      spread_[i] = hi - lo;
    }
  }

  double beam_spread(int i) const { return spread_[i]; }

  /// Beams whose direction lies within one bin of the query direction.
  void collect(const Vec3& dir, std::vector<int>& out) const {
    out.clear();
    const double r = dir.norm();
    if (r <= 0.0) return;
    const double el = std::asin(std::clamp(dir.z() / r, -1.0, 1.0));
    const double az = std::atan2(dir.y(), dir.x());
    const int ia = az_bin(az);
    const int ie = el_bin(el);
    // Azimuth bins shrink near the poles; widen the search accordingly.
    const int az_reach = std::min(
        n_az_ / 2, 1 + static_cast<int>(1.0 / std::max(std::cos(el), 2.0 / n_az_)));
    for (int de = -1; de <= 1; ++de) {
      const int e = ie + de;
      if (e < 0 || e >= n_el_) continue;
      for (int da = -az_reach; da <= az_reach; ++da) {
        const int a = (ia + da % n_az_ + n_az_) % n_az_;
        const auto& bin = bins_[static_cast<size_t>(e) * n_az_ + a];
        out.insert(out.end(), bin.begin(), bin.end());
      }
    }
  }

 private:
  int az_bin(double az) const {
    int b = static_cast<int>(std::floor((az + M_PI) / (2.0 * M_PI) * n_az_));
    return std::clamp(b, 0, n_az_ - 1);
  }
  int el_bin(double el) const {
    int b = static_cast<int>(std::floor((el + M_PI / 2) / M_PI * n_el_));
    return std::clamp(b, 0, n_el_ - 1);
  }
  size_t bin_of(const Vec3& d) const {
    const double r = d.norm();
    const double el = r > 0 ? std::asin(std::clamp(d.z() / r, -1.0, 1.0)) : 0.0;
    const double az = std::atan2(d.y(), d.x());
    return static_cast<size_t>(el_bin(el)) * n_az_ + az_bin(az);
  }

  const AlignedScan* scan_ = nullptr;
  double bin_ = 0.01;
  int n_az_ = 1, n_el_ = 1;
  std::vector<std::vector<int>> bins_;
  std::vector<double> spread_;
};

/// Default angular gate derived from the scan itself: the median angle
/// between a beam and its nearest angular neighbor. A gate of one beam
/// spacing keeps the nearest beam of a query direction inside the gate for
/// almost every direction; narrower gates leave directions with no gated
/// beam and silently lose evidence. Used when MotionOptions.angular_gate is
/// not set explicitly.
inline double auto_angular_gate(const AlignedScan& scan, size_t sample_cap = 4000) {
  if (scan.points.size() < 2) return 0.01;
  // A contiguous block keeps the scan's local angular structure; strided
  // sampling would inflate the measured spacing.
  std::vector<Vec3> dirs;
  const size_t n = std::min(scan.points.size(), sample_cap);
  const size_t offset = (scan.points.size() - n) / 2;
  for (size_t i = offset; i < offset + n; ++i) {
    const Vec3 d = scan.points[i] - scan.sensor_center;
    const double len = d.norm();
    if (len > 0) dirs.push_back(d / len);
  }
  if (dirs.size() < 2) return 0.01;
  KdTree3 tree(dirs);
  std::vector<double> gaps;
  gaps.reserve(dirs.size());
  for (const auto& d : dirs) {
    const auto nn = tree.knn(d, 2);  // first hit is the direction itself
    if (nn.size() < 2) continue;
    const double chord = (dirs[nn[1]] - d).norm();
    gaps.push_back(2.0 * std::asin(std::clamp(chord / 2.0, 0.0, 1.0)));
  }
  if (gaps.empty()) return 0.01;
  std::nth_element(gaps.begin(), gaps.begin() + gaps.size() / 2, gaps.end());
  return gaps[gaps.size() / 2];
}

/// Classify one point of scan `own` against the other scans of the window.
/// Each other scan's beams are folded by Dempster's rule into a per-scan
/// occupancy mass; the conflict K is the largest disagreement between that
/// mass and the point's own occupied state.
inline MotionLabel classify_point(const Vec3& point, size_t own,
                                  const std::vector<AlignedScan>& scans,
                                  const std::vector<BeamIndex>& indices,
                                  const MotionOptions& opt = {}) {
  MotionLabel label;
  std::vector<int> gated;
  for (size_t i = 0; i < scans.size(); ++i) {
    if (i == own) continue;
    if (std::abs(static_cast<long>(i) - static_cast<long>(own)) > opt.window) continue;
    const AlignedScan& scan = scans[i];
    indices[i].collect(point - scan.sensor_center, gated);
    if (gated.empty()) continue;
    std::sort(gated.begin(), gated.end());  // deterministic fold order

    // The angular gate spans a surface patch whose range varies with the
    // incidence angle; on oblique surfaces a fixed band would turn that
    // variation into false "empty" evidence. Per beam, widen the tolerance
    // to the beam's own neighborhood range spread (bounded at 5x the base
    // tolerance so true departures keep conflicting).
    EvidenceMass acc = EvidenceMass::vacuous();
    for (int b : gated) {
      const double tolerance =
          std::clamp(indices[i].beam_spread(b), opt.range_tolerance,
                     5.0 * opt.range_tolerance);
      const EvidenceMass ev =
          beam_evidence(point, scan.ray(b), opt.angular_gate, tolerance, opt.mass);
      if (ev.unknown == 1.0) continue;
      acc = combine(acc, ev).first;
      if (acc.unknown < opt.saturation) break;  // evidence saturated
    }
    // Conflict of the aggregated mass with own-state "occupied": kappa
    // reduces to the aggregated empty mass.
    label.conflict = std::max(label.conflict, acc.empty);
  }
  label.moving = label.conflict > opt.conflict_threshold;
  return label;
}

/// Motion labels for selected candidate points of every scan in the window.
/// `candidates[k]` lists point indices of scan k (typically its non-ground
/// points). Pure function of the aligned scans; parallelizes over points.
inline std::vector<std::vector<MotionLabel>> label_cloud(
    const std::vector<AlignedScan>& scans, const std::vector<std::vector<int>>& candidates,
    MotionOptions opt = {}) {
  if (scans.size() != candidates.size())
    throw Error("label_cloud: candidate list per scan required");
  if (opt.angular_gate <= 0.0) {
    double gate = 0.0;
    for (const auto& s : scans) gate = std::max(gate, auto_angular_gate(s));
    opt.angular_gate = gate > 0 ? gate : 0.01;
  }
  std::vector<BeamIndex> indices;
  indices.reserve(scans.size());
  for (const auto& s : scans) indices.emplace_back(s, std::max(opt.angular_gate, 1e-4));

  std::vector<std::vector<MotionLabel>> labels(scans.size());
  for (size_t k = 0; k < scans.size(); ++k) {
    labels[k].resize(candidates[k].size());
    const auto& scan = scans[k];
    const auto& cand = candidates[k];
    auto& out = labels[k];
    parallel_chunks(cand.size(), [&](size_t begin, size_t end) {
      for (size_t c = begin; c < end; ++c)
        out[c] = classify_point(scan.points[cand[c]], k, scans, indices, opt);
    });
  }
  return labels;
}

}  // namespace carvemap
