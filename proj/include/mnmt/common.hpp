#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mnmt {

// Error taxonomy. The CLI maps these onto exit codes:
//   config_error -> 2, data_error -> 3, numeric_error -> 4, resume_error -> 5.
// contract_error signals API misuse (caller bug) and is not given a
// dedicated exit code.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct config_error : error {
  using error::error;
};
struct data_error : error {
  using error::error;
};
struct numeric_error : error {
  using error::error;
};
struct resume_error : error {
  using error::error;
};
struct contract_error : error {
  using error::error;
};
struct dimension_error : contract_error {
  using contract_error::contract_error;
};
struct index_error : contract_error {
  using contract_error::contract_error;
};
struct format_error : data_error {
  using data_error::data_error;
};
struct corruption_error : data_error {
  using data_error::data_error;
};

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t hash_u64(uint64_t x) {
  uint64_t s = x;
  return splitmix64(s);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return hash_u64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a_bytes(const void* p, size_t n) {
  uint64_t h = 0xcbf29ce484222325ULL;
  const unsigned char* b = static_cast<const unsigned char*>(p);
  for (size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic RNG. Hand-rolled so streams are identical across standard
// library implementations, which std::*_distribution does not guarantee.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // warm up so nearby seeds decorrelate
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, two uniforms per sample, no cached state.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // uniform integer in [0, n)
  int64_t below(int64_t n) {
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  template <class V>
  void shuffle(V& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = below(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  uint64_t state_;
};

// Derives an independent stream from a base seed and a tag, so draws do not
// depend on the order unrelated streams are consumed in.
inline Rng stream_rng(uint64_t seed, std::string_view tag) {
  return Rng(hash_combine(seed, fnv1a(tag)));
}

inline Rng stream_rng(uint64_t seed, std::string_view tag, uint64_t index) {
  return Rng(hash_combine(hash_combine(seed, fnv1a(tag)), index));
}

}  // namespace mnmt
