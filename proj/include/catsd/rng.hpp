#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace catsd {

// Deterministic random stream. The engine (mt19937_64) is fully specified by
// the standard; the distributions here are hand-rolled because the <random>
// distribution classes are implementation-defined and would break
// byte-identical reproducibility across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // [0, 1)
  double uniform();
  // [lo, hi)
  double uniform(double lo, double hi);
  // {0, 1, ..., n-1}, n >= 1
  std::uint64_t uniform_int(std::uint64_t n);
  // standard normal, Box-Muller
  double normal();
  double normal(double mean, double stddev);
  bool bernoulli(double p);

  // Independent child stream. Distinct stream ids give decorrelated streams;
  // derivation is pure so parallel consumers can be seeded identically to a
  // serial run.
  Rng derive(std::uint64_t stream_id) const;

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

// SplitMix64 mixing step, used for seed derivation.
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace catsd
