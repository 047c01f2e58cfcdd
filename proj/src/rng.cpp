#include "sefa/rng.hpp"

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace sefa {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t s = base;
  std::uint64_t a = splitmix64(s);
  std::uint64_t t = a ^ (stream * 0xd1342543de82ef95ULL + 0x632be59bd9b4e019ULL);
  return splitmix64(t);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  // Rejection sampling keeps the result exactly uniform.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

double Rng::normal() {
  const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void Rng::fill_normal(std::span<float> out) {
  const auto half = static_cast<Eigen::Index>((out.size() + 1) / 2);
  if (half == 0) return;
  // Eigen-owned buffers are aligned, so vectorized math never depends on the address of `out`.
  thread_local Eigen::ArrayXf a, b;
  a.resize(half);
  b.resize(half);
  // Each 64-bit draw yields one 24-bit uniform for the radius and one for the angle.
  for (Eigen::Index k = 0; k < half; ++k) {
    const std::uint64_t x = engine_();
    a[k] = static_cast<float>((x >> 40) + 1) * 0x1.0p-24f;
    b[k] = static_cast<float>((x >> 8) & 0xffffffULL) * 0x1.0p-24f;
  }
  a = (-2.0f * a.log()).sqrt();
  b *= 2.0f * std::numbers::pi_v<float>;
  const Eigen::ArrayXf first = a * b.cos();
  const Eigen::ArrayXf second = a * b.sin();
  const auto rest = static_cast<Eigen::Index>(out.size()) - half;
  std::copy(first.data(), first.data() + half, out.begin());
  std::copy(second.data(), second.data() + rest, out.begin() + half);
}

void Rng::fill_normal(std::span<double> out) {
  for (double& v : out) v = normal();
}

}  // namespace sefa
