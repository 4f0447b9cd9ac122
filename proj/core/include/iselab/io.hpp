#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace iselab {

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

std::vector<std::string> read_lines(const std::string& path);

std::uint64_t fnv1a64(const void* bytes, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string fnv1a64_hex(const std::string& bytes);

}  // namespace iselab
