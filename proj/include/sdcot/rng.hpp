#pragma once

#include <cstdint>
#include <string>

namespace sdcot {

// Counter-based deterministic random stream. Draw i of a stream is a pure
// function of (seed, label, i): streams with distinct labels are independent,
// and consumers can be reordered without perturbing each other's sequences.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string label);

  std::uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  int uniform_int(int n);                 // [0, n)
  bool bernoulli(double p);
  double normal();                        // standard normal, Box-Muller

  // Child stream with label "<label>/<sublabel>" and counter 0.
  RngStream derive(const std::string& sublabel) const;

  std::uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::string label_;
  std::uint64_t label_hash_;
  std::uint64_t counter_ = 0;
};

// FNV-1a, used for rng labels and config/file digests.
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(const std::string& s);

}  // namespace sdcot
