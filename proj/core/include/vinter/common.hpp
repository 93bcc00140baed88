#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace vinter {

using Shape = std::vector<std::size_t>;

// Error taxonomy shared by every module. All are runtime_errors so callers
// that only care about "it failed" can catch the base.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Incompatible tensor shapes (messages name both shapes).
struct DimensionError : Error {
    using Error::Error;
};
// Out-of-range id or position.
struct IndexError : Error {
    using Error::Error;
};
// A caller violated an operation's precondition.
struct ContractError : Error {
    using Error::Error;
};
// Invalid or inconsistent configuration.
struct ConfigError : Error {
    using Error::Error;
};
// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};
// File I/O and format failures.
struct IoError : Error {
    using Error::Error;
};

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

// Seeded RNG with hand-rolled distributions so that every draw is a pure
// function of the seed, independent of the standard library's
// distribution internals. mt19937_64 itself is fully specified.
class Rng {
  public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    // Uniform in [lo, hi).
    double uniform(double lo, double hi);
    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_int(std::uint64_t n);
    // Standard normal via Box-Muller (spare cached).
    double normal();

    // Derives an independent generator from this generator's seed and a
    // stream id. Depends only on (seed, stream), not on draws consumed.
    Rng child(std::uint64_t stream) const;

    std::uint64_t seed() const { return seed_; }

  private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

// Writes bytes to `path` via a temp file in the same directory plus an
// atomic rename, so failures never leave a partial file behind.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace vinter
