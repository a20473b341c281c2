// SPDX-License-Identifier: Apache-2.0
//
// Deterministic random number generator (xoshiro256++ seeded via splitmix64).
// Self-contained so that streams are reproducible across platforms and
// library versions. State serializes into checkpoints.

#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace vikdf {

class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);
  // Standard normal via Box-Muller (one spare cached).
  double normal();
  double normal(double mean, double stddev);
  // Derive an independent child stream; advances this stream.
  Rng split();

  // In-place Fisher-Yates shuffle of [0, n) index arrays and similar.
  template <typename T>
  void shuffle(T* data, std::size_t n) {
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      T tmp = data[i - 1];
      data[i - 1] = data[j];
      data[j] = tmp;
    }
  }

  // State serialization: 4 state words, spare flag, spare value bits.
  struct State {
    std::array<std::uint64_t, 4> s;
    bool has_spare;
    std::uint64_t spare_bits;
  };
  State state() const;
  void set_state(const State& st);

 private:
  std::array<std::uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vikdf
