#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace hubmpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

// Half-hour control grid: all energy integrals use this step.
inline constexpr double kStepHours = 0.5;

struct Span {
  int offset = 0;
  int size = 0;
  int end() const { return offset + size; }
  bool contains(int i) const { return i >= offset && i < end(); }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_finite(const Vec& v, const std::string& what) {
  if (!v.allFinite()) throw std::invalid_argument(what + " contains non-finite values");
}

inline void require_finite(const Mat& m, const std::string& what) {
  if (!m.allFinite()) throw std::invalid_argument(what + " contains non-finite values");
}

inline double pos_part(double x) { return x > 0.0 ? x : 0.0; }

// Deterministic splitmix64; used wherever reproducible jitter is needed so
// results do not depend on libstdc++'s distribution internals.
struct SplitMix64 {
  std::uint64_t state;
  explicit SplitMix64(std::uint64_t seed) : state(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  // uniform in [0,1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(next() % static_cast<std::uint64_t>(hi - lo + 1));
  }
};

}  // namespace hubmpc
