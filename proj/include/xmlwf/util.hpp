#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace xmlwf {

/// Shortest decimal text that parses back to exactly `value`.
std::string format_real(double value);

/// Strict parse of a finite real; the whole token must be consumed.
std::optional<double> parse_real(std::string_view text);

std::string sha256_hex(std::string_view bytes);
std::vector<unsigned char> sha256_raw(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string utc_now_iso8601();

/// Runs body(i) for i in [0, n) on up to `workers` threads. Results must be
/// written by index; the first exception (lowest index) is rethrown.
void parallel_for(std::size_t n, unsigned workers,
                  const std::function<void(std::size_t)>& body);

unsigned default_workers();

}  // namespace xmlwf
