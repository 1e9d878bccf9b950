#pragma once

#include <cstdint>
#include <random>

namespace readmit {

// Deterministic random source. All randomness in a run flows from one root
// seed; independent substreams are derived with child(). The uniform/normal
// transforms are implemented here (not std::*_distribution) so that byte
// streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  // [0, 1)
  double uniform01();
  double uniform(double lo, double hi);
  // standard normal via Box-Muller, one spare cached
  double normal();
  // inclusive bounds
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p);

  // Deterministic substream; children with distinct ids are independent.
  Rng child(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer, used for seed derivation and content hashing
std::uint64_t mix64(std::uint64_t x);

}  // namespace readmit
