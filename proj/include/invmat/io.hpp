#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace invmat {

using Json = nlohmann::json;

// Single-file artifact container: 8-byte magic, u64 manifest length, manifest
// JSON bytes, u64 float count, raw float32 blob. All integers little-endian.
struct Container {
  Json manifest;
  std::vector<float> blob;
};

void write_container(const std::string& path, const std::string& magic,
                     const Json& manifest, const std::vector<float>& blob);
Container read_container(const std::string& path, const std::string& magic);

inline constexpr char kDatasetMagic[] = "INVMDS01";
inline constexpr char kWeightsMagic[] = "INVMWT01";
inline constexpr char kSamplesMagic[] = "INVMSP01";

// Shortest exact decimal form used in CSV output.
std::string fmt_g17(double v);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace invmat
