#include "encforge/random.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "encforge/errors.hpp"

namespace encforge {
namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string hex128(unsigned __int128 v) {
  char buf[33];
  std::snprintf(buf, sizeof(buf), "%016llx%016llx", static_cast<unsigned long long>(v >> 64),
                static_cast<unsigned long long>(v));
  return buf;
}

unsigned __int128 parse_hex128(const std::string& s) {
  if (s.size() != 32) throw InputError("bad rng state encoding");
  unsigned __int128 v = 0;
  for (char c : s) {
    int d;
    if (c >= '0' && c <= '9') d = c - '0';
    else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
    else throw InputError("bad rng state encoding");
    v = (v << 4) | static_cast<unsigned>(d);
  }
  return v;
}

}  // namespace

Pcg64Dxsm::Pcg64Dxsm(std::uint64_t seed, std::uint64_t stream) {
  // Expand the 64-bit seed and stream into 128-bit initstate/initseq.
  std::uint64_t s = seed;
  std::uint64_t t = stream ^ 0x5851f42d4c957f2dULL;
  uint128 initstate = (static_cast<uint128>(splitmix64(s)) << 64) | splitmix64(s);
  uint128 initseq = (static_cast<uint128>(splitmix64(t)) << 64) | splitmix64(t);
  // Standard PCG set-seq initialization.
  state_ = 0;
  inc_ = (initseq << 1) | 1;
  step();
  state_ += initstate;
  step();
}

Pcg64Dxsm Pcg64Dxsm::from_state(uint128 state, uint128 increment) {
  Pcg64Dxsm rng{RawTag{}};
  rng.state_ = state;
  rng.inc_ = increment | 1;
  return rng;
}

Pcg64Dxsm::result_type Pcg64Dxsm::operator()() {
  uint128 old = state_;
  step();
  std::uint64_t hi = static_cast<std::uint64_t>(old >> 64);
  std::uint64_t lo = static_cast<std::uint64_t>(old) | 1;
  hi ^= hi >> 32;
  hi *= kCheapMultiplier;
  hi ^= hi >> 48;
  hi *= lo;
  return hi;
}

std::uint64_t Pcg64Dxsm::below(std::uint64_t bound) {
  if (bound == 0) return 0;
  uint128 m = static_cast<uint128>((*this)()) * bound;
  auto low = static_cast<std::uint64_t>(m);
  if (low < bound) {
    std::uint64_t threshold = (0 - bound) % bound;
    while (low < threshold) {
      m = static_cast<uint128>((*this)()) * bound;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

double Pcg64Dxsm::uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

double Pcg64Dxsm::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

std::string Pcg64Dxsm::serialize() const {
  char spare[32];
  std::snprintf(spare, sizeof(spare), "%a", spare_);
  return hex128(state_) + ":" + hex128(inc_) + ":" + (has_spare_ ? "1" : "0") + ":" + spare;
}

Pcg64Dxsm Pcg64Dxsm::deserialize(const std::string& text) {
  if (text.size() < 68 || text[32] != ':' || text[65] != ':' || text[67] != ':') {
    throw InputError("bad rng state encoding");
  }
  Pcg64Dxsm rng = from_state(parse_hex128(text.substr(0, 32)), parse_hex128(text.substr(33, 32)));
  rng.has_spare_ = text[66] == '1';
  rng.spare_ = std::strtod(text.c_str() + 68, nullptr);
  return rng;
}

Pcg64Dxsm derive_rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index) {
  std::uint64_t x = seed ^ (purpose * 0xd1342543de82ef95ULL);
  std::uint64_t mixed = splitmix64(x) ^ index;
  return Pcg64Dxsm(mixed, purpose * 0x9e3779b97f4a7c15ULL + index);
}

}  // namespace encforge
