#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace maesn {

/// Named substream of a single experiment seed. Streams are keyed by
/// (seed, label, a, b) so that e.g. task sampling, latent draws and action
/// noise never interleave, which keeps runs identical for any worker count.
class RngStream {
 public:
  RngStream(uint64_t seed, std::string_view label, uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](uint64_t x) {
      h ^= x;
      h *= 0x100000001b3ull;
      h ^= h >> 29;
      h *= 0xbf58476d1ce4e5b9ull;
      h ^= h >> 32;
    };
    mix(seed);
    for (char c : label) mix(static_cast<uint64_t>(static_cast<unsigned char>(c)));
    mix(a + 0x9e3779b97f4a7c15ull);
    mix(b + 0x94d049bb133111ebull);
    gen_.seed(h);
  }

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  long uniform_int(long n) {  // [0, n)
    return static_cast<long>(uniform() * static_cast<double>(n));
  }

  /// Standard normal via Box-Muller; exactly one fresh pair per two calls,
  /// independent of the platform's std::normal_distribution internals.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double th = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace maesn
