#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace sefa {

/// One step of the splitmix64 generator; advances `state`.
std::uint64_t splitmix64(std::uint64_t& state);

/// Independent seed for sub-stream `stream` of `base`. Adding new streams
/// never changes the value of existing ones.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

/// 64-bit FNV-1a hash of a byte string.
std::uint64_t fnv1a64(std::string_view bytes);

/// Seeded deterministic generator. The engine output sequence of
/// std::mt19937_64 is fixed by the standard; every distribution on top of it
/// is implemented here so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1).
  double uniform();

  /// Uniform integer in [0, n). n must be positive.
  std::size_t uniform_index(std::size_t n);

  double normal();

  /// Fills `out` with standard normal draws (Box-Muller, float precision).
  void fill_normal(std::span<float> out);
  void fill_normal(std::span<double> out);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace sefa
