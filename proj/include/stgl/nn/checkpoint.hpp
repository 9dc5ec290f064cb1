#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "stgl/nn/layers.hpp"

namespace stgl {

// CRC-32 (zlib polynomial).
std::uint32_t crc32_of(std::span<const unsigned char> bytes, std::uint32_t seed = 0);
std::string sha256_hex(std::span<const unsigned char> bytes);

// Writes via a sibling temp file and rename so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes);

} // namespace stgl

namespace stgl::nn {

// Named f64 arrays plus a JSON header. File layout: "STCK", u32 version,
// u64 header length, header JSON, u32 array count, then per array u32 name
// length, name, u64 count, f64 values; trailing CRC-32 of all prior bytes.
struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, std::vector<double>> arrays;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void export_state(Module& module, const std::string& prefix, Checkpoint& ckpt);
void import_state(Module& module, const std::string& prefix, const Checkpoint& ckpt);

// SHA-256 over parameter and buffer names and values.
std::string fingerprint(Module& module);

} // namespace stgl::nn
