#include "advmesh/mesh_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace advmesh {
namespace {

static_assert(std::endian::native == std::endian::little, "binary I/O assumes a little-endian host");

enum class PropType { Float32, Float64, UInt8, Int32, UInt32 };

struct Property {
  std::string name;
  PropType type;
};

PropType parse_type(const std::string& t) {
  if (t == "float" || t == "float32") return PropType::Float32;
  if (t == "double" || t == "float64") return PropType::Float64;
  if (t == "uchar" || t == "uint8") return PropType::UInt8;
  if (t == "int" || t == "int32") return PropType::Int32;
  if (t == "uint" || t == "uint32") return PropType::UInt32;
  throw std::runtime_error("ply: unsupported property type '" + t + "'");
}

std::size_t type_size(PropType t) {
  switch (t) {
    case PropType::Float32: return 4;
    case PropType::Float64: return 8;
    case PropType::UInt8: return 1;
    case PropType::Int32:
    case PropType::UInt32: return 4;
  }
  return 0;
}

double read_binary(std::istream& in, PropType t) {
  char buf[8];
  in.read(buf, static_cast<std::streamsize>(type_size(t)));
  if (!in) throw std::runtime_error("ply: truncated binary body");
  switch (t) {
    case PropType::Float32: { float v; std::memcpy(&v, buf, 4); return v; }
    case PropType::Float64: { double v; std::memcpy(&v, buf, 8); return v; }
    case PropType::UInt8: return static_cast<unsigned char>(buf[0]);
    case PropType::Int32: { std::int32_t v; std::memcpy(&v, buf, 4); return v; }
    case PropType::UInt32: { std::uint32_t v; std::memcpy(&v, buf, 4); return v; }
  }
  return 0.0;
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace

std::uint8_t color_to_byte(double c) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0));
}

void write_ply(const std::filesystem::path& path, const TriMesh& mesh, PlyFormat format) {
  mesh.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "ply\n"
      << (format == PlyFormat::Ascii ? "format ascii 1.0\n" : "format binary_little_endian 1.0\n")
      << "element vertex " << mesh.vertices.size() << "\n"
      << "property double x\nproperty double y\nproperty double z\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      << "element face " << mesh.faces.size() << "\n"
      << "property list uchar int vertex_indices\n"
      << "end_header\n";
  if (format == PlyFormat::Ascii) {
    char buf[128];
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
      const auto& v = mesh.vertices[i];
      const auto& c = mesh.colors[i];
      std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %u %u %u\n", v.x, v.y, v.z,
                    color_to_byte(c.x), color_to_byte(c.y), color_to_byte(c.z));
      out << buf;
    }
    for (const auto& f : mesh.faces) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
  } else {
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
      const auto& v = mesh.vertices[i];
      const auto& c = mesh.colors[i];
      put(out, v.x);
      put(out, v.y);
      put(out, v.z);
      put(out, color_to_byte(c.x));
      put(out, color_to_byte(c.y));
      put(out, color_to_byte(c.z));
    }
    for (const auto& f : mesh.faces) {
      put<std::uint8_t>(out, 3);
      for (auto idx : f) put(out, static_cast<std::int32_t>(idx));
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

TriMesh read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "ply") throw std::runtime_error(path.string() + ": not a ply file");

  bool binary = false;
  std::size_t n_vertices = 0, n_faces = 0;
  std::vector<Property> vprops;
  PropType list_count = PropType::UInt8, list_index = PropType::Int32;
  std::string current;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "binary_little_endian") {
        binary = true;
      } else if (fmt != "ascii") {
        throw std::runtime_error(path.string() + ": unsupported ply format " + fmt);
      }
    } else if (key == "element") {
      std::size_t n = 0;
      ls >> current >> n;
      if (current == "vertex") n_vertices = n;
      if (current == "face") n_faces = n;
    } else if (key == "property") {
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string ct, it, name;
        ls >> ct >> it >> name;
        list_count = parse_type(ct);
        list_index = parse_type(it);
      } else if (current == "vertex") {
        std::string name;
        ls >> name;
        vprops.push_back({name, parse_type(type)});
      }
    } else if (key == "end_header") {
      break;
    }
  }

  TriMesh mesh;
  mesh.vertices.resize(n_vertices);
  mesh.colors.assign(n_vertices, Vec3{0.5, 0.5, 0.5});
  std::vector<double> row(vprops.size());
  for (std::size_t i = 0; i < n_vertices; ++i) {
    if (binary) {
      for (std::size_t k = 0; k < vprops.size(); ++k) row[k] = read_binary(in, vprops[k].type);
    } else {
      for (std::size_t k = 0; k < vprops.size(); ++k) {
        std::string tok;
        if (!(in >> tok)) throw std::runtime_error(path.string() + ": truncated vertex list");
        row[k] = std::strtod(tok.c_str(), nullptr);
      }
    }
    for (std::size_t k = 0; k < vprops.size(); ++k) {
      const auto& name = vprops[k].name;
      if (name == "x") mesh.vertices[i].x = row[k];
      else if (name == "y") mesh.vertices[i].y = row[k];
      else if (name == "z") mesh.vertices[i].z = row[k];
      else if (name == "red") mesh.colors[i].x = row[k] / 255.0;
      else if (name == "green") mesh.colors[i].y = row[k] / 255.0;
      else if (name == "blue") mesh.colors[i].z = row[k] / 255.0;
    }
  }
  mesh.faces.resize(n_faces);
  for (std::size_t f = 0; f < n_faces; ++f) {
    double count = 0;
    std::array<double, 3> idx{};
    if (binary) {
      count = read_binary(in, list_count);
      if (count != 3) throw std::runtime_error(path.string() + ": only triangle faces are supported");
      for (auto& v : idx) v = read_binary(in, list_index);
    } else {
      if (!(in >> count)) throw std::runtime_error(path.string() + ": truncated face list");
      if (count != 3) throw std::runtime_error(path.string() + ": only triangle faces are supported");
      for (auto& v : idx) in >> v;
    }
    for (int k = 0; k < 3; ++k) mesh.faces[f][k] = static_cast<std::uint32_t>(idx[k]);
  }
  mesh.validate();
  return mesh;
}

void write_obj(const std::filesystem::path& path, const TriMesh& mesh) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  char buf[128];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", v.x, v.y, v.z);
    out << buf;
  }
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

}  // namespace advmesh
