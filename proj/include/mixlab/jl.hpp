#pragma once

// Johnson-Lindenstrauss dimension estimate: m points embed in n dimensions
// with pairwise distances preserved within 1 +/- eps whenever
// n > 8 ln(m) / eps^2.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>

#include "mixlab/errors.hpp"

namespace mixlab {

struct JLQuery {
  double m = 0.0;
  double eps = 1.0;
  double bound = 0.0;              // 8 ln(m) / eps^2
  std::uint64_t n_min = 0;         // smallest integer n > bound
  std::uint64_t lnm_rounded = 0;   // 8 round(ln m) / eps^2 with ln m rounded to an integer first
};

inline void jl_validate(double m, double eps) {
  if (!(m >= 2.0) || !std::isfinite(m)) throw ConfigError("jl: m must be a finite count of at least 2");
  if (!(eps > 0.0 && eps <= 1.0)) throw ConfigError("jl: eps must lie in (0, 1]");
}

inline double jl_bound(double m, double eps) {
  jl_validate(m, eps);
  return 8.0 * std::log(m) / (eps * eps);
}

inline std::uint64_t jl_min_dim(double m, double eps) { return static_cast<std::uint64_t>(std::floor(jl_bound(m, eps))) + 1; }

inline JLQuery jl_query(double m, double eps) {
  JLQuery q;
  q.m = m;
  q.eps = eps;
  q.bound = jl_bound(m, eps);
  q.n_min = static_cast<std::uint64_t>(std::floor(q.bound)) + 1;
  q.lnm_rounded = static_cast<std::uint64_t>(std::llround(8.0 * std::round(std::log(m)) / (eps * eps)));
  return q;
}

inline std::string jl_csv_header() { return "m,eps,bound,n_min,lnm_rounded"; }

inline std::string jl_csv_row(const JLQuery& q) {
  std::ostringstream os;
  os.precision(17);
  os << q.m << ',' << q.eps << ',' << q.bound << ',' << q.n_min << ',' << q.lnm_rounded;
  return os.str();
}

}  // namespace mixlab
