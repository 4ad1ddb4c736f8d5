#include "uqseg/rng.hpp"

namespace uqseg {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

Rng Rng::substream(std::string_view name) const { return Rng(splitmix64(seed_ ^ fnv1a64(name))); }

Rng Rng::substream(std::uint64_t index) const {
  return Rng(splitmix64(seed_ + 0x632be59bd9b4e019ULL * (index + 1)));
}

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double Rng::uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

double Rng::uniform_open() {
  double u = 0.0;
  do {
    u = uniform();
  } while (u <= 0.0);
  return u;
}

double Rng::normal() { return normal_(engine_); }

double Rng::normal(double mean, double sd) { return mean + sd * normal_(engine_); }

bool Rng::bernoulli(double p) { return uniform() < p; }

std::uint64_t Rng::below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }

}  // namespace uqseg
