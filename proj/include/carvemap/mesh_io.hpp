#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "carvemap/core.hpp"

namespace carvemap {

// ---------------------------------------------------------------------------
// OBJ

inline void write_obj(const std::string& path, const TriangleMesh& mesh) {
  std::ofstream out(path);
  if (!out) throw Error("write_obj: cannot open " + path);
  char buf[128];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
    out << buf;
  }
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
}

inline TriangleMesh read_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("read_obj: cannot open " + path);
  TriangleMesh mesh;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      Vec3 v;
      ss >> v.x() >> v.y() >> v.z();
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        // "i", "i/t", "i/t/n", "i//n" forms; indices may be negative.
        const size_t slash = tok.find('/');
        int i = std::stoi(slash == std::string::npos ? tok : tok.substr(0, slash));
        if (i < 0) i = static_cast<int>(mesh.vertices.size()) + i + 1;
        idx.push_back(i - 1);
      }
      for (size_t k = 2; k < idx.size(); ++k)  // fan-triangulate polygons
        mesh.faces.push_back({idx[0], idx[k - 1], idx[k]});
    }
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// PLY (binary little endian), vertices + faces, optional per-vertex gray color

inline void write_ply(const std::string& path, const TriangleMesh& mesh,
                      const std::vector<double>* vertex_gray = nullptr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_ply: cannot open " + path);
  out << "ply\nformat binary_little_endian 1.0\n";
  out << "element vertex " << mesh.vertices.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  if (vertex_gray)
    out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element face " << mesh.faces.size() << "\n";
  out << "property list uchar int vertex_indices\n";
  out << "end_header\n";
  for (size_t i = 0; i < mesh.vertices.size(); ++i) {
    const float xyz[3] = {static_cast<float>(mesh.vertices[i].x()),
                          static_cast<float>(mesh.vertices[i].y()),
                          static_cast<float>(mesh.vertices[i].z())};
    out.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    if (vertex_gray) {
      const double g = std::clamp((*vertex_gray)[i], 0.0, 1.0);
      const uint8_t c = static_cast<uint8_t>(std::lround(g * 255.0));
      const uint8_t rgb[3] = {c, c, c};
      out.write(reinterpret_cast<const char*>(rgb), sizeof(rgb));
    }
  }
  for (const auto& f : mesh.faces) {
    const uint8_t n = 3;
    out.write(reinterpret_cast<const char*>(&n), 1);
    const int32_t idx[3] = {f[0], f[1], f[2]};
    out.write(reinterpret_cast<const char*>(idx), sizeof(idx));
  }
}

inline TriangleMesh read_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_ply: cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line != "ply") throw Error("read_ply: not a PLY file: " + path);
  size_t n_vertices = 0, n_faces = 0;
  bool has_color = false;
  bool binary_le = false;
  std::string element;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "format") {
      std::string fmt;
      ss >> fmt;
      binary_le = (fmt == "binary_little_endian");
    } else if (tag == "element") {
      std::string name;
      size_t count;
      ss >> name >> count;
      element = name;
      if (name == "vertex") n_vertices = count;
      if (name == "face") n_faces = count;
    } else if (tag == "property" && element == "vertex") {
      std::string type, name;
      ss >> type >> name;
      if (name == "red") has_color = true;
    } else if (tag == "end_header") {
      break;
    }
  }
  if (!binary_le) throw Error("read_ply: only binary little endian supported");
  TriangleMesh mesh;
  mesh.vertices.resize(n_vertices);
  for (size_t i = 0; i < n_vertices; ++i) {
    float xyz[3];
    in.read(reinterpret_cast<char*>(xyz), sizeof(xyz));
    if (has_color) in.ignore(3);
    mesh.vertices[i] = Vec3(xyz[0], xyz[1], xyz[2]);
  }
  mesh.faces.reserve(n_faces);
  for (size_t i = 0; i < n_faces; ++i) {
    uint8_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 1);
    std::vector<int32_t> idx(n);
    in.read(reinterpret_cast<char*>(idx.data()), n * sizeof(int32_t));
    for (size_t k = 2; k < idx.size(); ++k) mesh.faces.push_back({idx[0], idx[k - 1], idx[k]});
  }
  if (!in) throw Error("read_ply: truncated data: " + path);
  return mesh;
}

// ---------------------------------------------------------------------------
// Point clouds as PLY (vertices only)

inline void write_ply_points(const std::string& path, const std::vector<Vec3>& points) {
  TriangleMesh m;
  m.vertices = points;
  write_ply(path, m);
}

inline std::vector<Vec3> read_ply_points(const std::string& path) {
  return read_ply(path).vertices;
}

}  // namespace carvemap
