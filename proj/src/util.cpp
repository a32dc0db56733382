#include "xmlwf/util.hpp"

#include <openssl/evp.h>

#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "xmlwf/error.hpp"

namespace xmlwf {

const char* to_string(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::MissingTarget: return "MissingTarget";
    case Errc::ParseError: return "ParseError";
    case Errc::NonBinaryTarget: return "NonBinaryTarget";
    case Errc::EmptyData: return "EmptyData";
    case Errc::DegenerateSplit: return "DegenerateSplit";
    case Errc::TooFewPerClass: return "TooFewPerClass";
    case Errc::NaNWithoutImputer: return "NaNWithoutImputer";
    case Errc::SingleClassTrain: return "SingleClassTrain";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::BadMagic: return "BadMagic";
    case Errc::UnsupportedVersion: return "UnsupportedVersion";
    case Errc::TruncatedBlob: return "TruncatedBlob";
    case Errc::HashMismatch: return "HashMismatch";
    case Errc::OneClassAUC: return "OneClassAUC";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::EmptyGrid: return "EmptyGrid";
    case Errc::EmptySpace: return "EmptySpace";
    case Errc::BadSlug: return "BadSlug";
    case Errc::Conflict: return "Conflict";
    case Errc::StoreIO: return "StoreIO";
    case Errc::StateError: return "StateError";
    case Errc::NotFound: return "NotFound";
    case Errc::TooManyFeatures: return "TooManyFeatures";
    case Errc::SingularSystem: return "SingularSystem";
    case Errc::EmptySelection: return "EmptySelection";
    case Errc::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

std::string format_real(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, end);
}

std::optional<double> parse_real(std::string_view text) {
  if (text.empty()) return std::nullopt;
  // from_chars rejects a leading '+', accept it as CSV writers emit it.
  if (text.front() == '+') text.remove_prefix(1);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  if (!std::isfinite(value)) return std::nullopt;
  return value;
}

std::vector<unsigned char> sha256_raw(std::string_view bytes) {
  std::vector<unsigned char> digest(EVP_MAX_MD_SIZE);
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(),
                 nullptr) != 1) {
    throw Error(Errc::InvalidArgument, "sha256 failed");
  }
  digest.resize(len);
  return digest;
}

std::string sha256_hex(std::string_view bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char c : sha256_raw(bytes)) {
    out.push_back(kHex[c >> 4]);
    out.push_back(kHex[c & 0xf]);
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::NotFound, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::StoreIO, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error(Errc::StoreIO, "short write " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(Errc::StoreIO, "rename failed for " + path.string() + ": " + ec.message());
}

std::string utc_now_iso8601() {
  using namespace std::chrono;
  const auto now = system_clock::now();
  const auto secs = time_point_cast<seconds>(now);
  const auto micros = duration_cast<microseconds>(now - secs).count();
  const std::time_t t = system_clock::to_time_t(secs);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d.%06ldZ",
                tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min,
                tm.tm_sec, static_cast<long>(micros));
  return buf;
}

unsigned default_workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

void parallel_for(std::size_t n, unsigned workers,
                  const std::function<void(std::size_t)>& body) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto count = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  std::vector<std::thread> threads;
  threads.reserve(count);
  for (unsigned t = 0; t < count; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace xmlwf
