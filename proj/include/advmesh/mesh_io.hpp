#pragma once

#include <filesystem>

#include "advmesh/geometry.hpp"

namespace advmesh {

enum class PlyFormat { Ascii, BinaryLittleEndian };

// Vertex positions are stored as doubles so they round-trip exactly; colors
// are quantized to unsigned bytes (red, green, blue).
void write_ply(const std::filesystem::path& path, const TriMesh& mesh,
               PlyFormat format = PlyFormat::BinaryLittleEndian);
TriMesh read_ply(const std::filesystem::path& path);

void write_obj(const std::filesystem::path& path, const TriMesh& mesh);

std::uint8_t color_to_byte(double c);

}  // namespace advmesh
