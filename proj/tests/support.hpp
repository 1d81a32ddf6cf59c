#pragma once

#include <array>
#include <atomic>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include "olivine/image.hpp"
#include "olivine/rng.hpp"

namespace olivine::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("olivine_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Image random_image(Rng& rng, std::size_t w, std::size_t h, std::size_t c) {
  Image img(w, h, c);
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

// Exhaustive Otsu: class statistics from raw pixels for every t, the
// textbook sigma_b^2 expression, first maximum wins. -1 when every t gives
// an empty class.
inline int otsu_oracle(const Image& gray) {
  int best_t = -1;
  double best = -1.0;
  const double total = static_cast<double>(gray.pixels.size());
  for (int t = 0; t < 256; ++t) {
    std::uint64_t n0 = 0, n1 = 0, s0 = 0, s1 = 0;
    for (std::uint8_t v : gray.pixels) {
      if (v <= t) {
        ++n0;
        s0 += v;
      } else {
        ++n1;
        s1 += v;
      }
    }
    if (n0 == 0 || n1 == 0) continue;
    const double w0 = static_cast<double>(n0) / total;
    const double w1 = static_cast<double>(n1) / total;
    const double m0 = static_cast<double>(s0) / static_cast<double>(n0);
    const double m1 = static_cast<double>(s1) / static_cast<double>(n1);
    const double var = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (var > best) {
      best = var;
      best_t = t;
    }
  }
  return best_t;
}

struct CommandResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

// Runs a shell command, capturing both streams.
inline CommandResult run_command(const std::string& command) {
  CommandResult r;
  FILE* pipe = ::popen((command + " 2>&1").c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

inline std::string quote(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

}  // namespace olivine::testing
