#pragma once

// Reference implementations used only by tests. They deliberately share no
// code with the library paths they check.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace oracle {

/// Bitwise reflected CRC-32 (poly 0xEDB88320), no tables.
inline std::uint32_t crc32(const std::vector<std::uint8_t>& bytes) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::uint8_t b : bytes) {
    crc ^= b;
    for (int k = 0; k < 8; ++k) {
      crc = (crc & 1u) ? (crc >> 1) ^ 0xEDB88320u : crc >> 1;
    }
  }
  return crc ^ 0xFFFFFFFFu;
}

struct Stats {
  double mean = 0, stddev = 0, min = 0, max = 0, p50 = 0, p95 = 0;
};

/// Brute force: two-pass mean/variance, percentiles by counting how many
/// samples lie at or below each candidate (smallest x with count >= p*n).
inline Stats brute_stats(const std::vector<double>& xs) {
  Stats s;
  const double n = static_cast<double>(xs.size());
  double sum = 0;
  for (double x : xs) sum += x;
  s.mean = sum / n;
  double ss = 0;
  for (double x : xs) ss += (x - s.mean) * (x - s.mean);
  s.stddev = xs.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  s.min = xs[0];
  s.max = xs[0];
  for (double x : xs) {
    s.min = std::min(s.min, x);
    s.max = std::max(s.max, x);
  }
  auto pct = [&](double p) {
    double best = s.max;
    for (double cand : xs) {
      std::size_t at_or_below = 0;
      for (double x : xs) at_or_below += x <= cand ? 1 : 0;
      if (static_cast<double>(at_or_below) >= p / 100.0 * n - 1e-9 && cand < best) best = cand;
    }
    return best;
  };
  s.p50 = pct(50);
  s.p95 = pct(95);
  return s;
}

inline std::vector<std::uint8_t> random_bytes(std::size_t n, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::vector<std::uint8_t> out(n);
  for (auto& b : out) b = static_cast<std::uint8_t>(rng());
  return out;
}

template <typename Pred>
bool eventually(Pred pred, std::chrono::milliseconds timeout,
                std::chrono::milliseconds step = std::chrono::milliseconds(10)) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < deadline) {
    if (pred()) return true;
    std::this_thread::sleep_for(step);
  }
  return pred();
}

}  // namespace oracle
