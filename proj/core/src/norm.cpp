#include "gbnlab/norm.hpp"

#include <algorithm>
#include <cmath>

#include "gbnlab/error.hpp"

namespace gbnlab {

std::string to_string(Norm norm) {
  switch (norm) {
    case Norm::L1:
      return "L1";
    case Norm::L2:
      return "L2";
    case Norm::Linf:
      return "Linf";
  }
  return "Linf";
}

Norm parse_norm(const std::string& text) {
  if (text == "L1" || text == "l1") return Norm::L1;
  if (text == "L2" || text == "l2") return Norm::L2;
  if (text == "Linf" || text == "linf") return Norm::Linf;
  throw UsageError("unknown norm '" + text + "' (l1|l2|linf)");
}

double lp_norm(std::span<const double> v, Norm norm) {
  double acc = 0.0;
  switch (norm) {
    case Norm::L1:
      for (double x : v) acc += std::abs(x);
      return acc;
    case Norm::L2:
      for (double x : v) acc += x * x;
      return std::sqrt(acc);
    case Norm::Linf:
      for (double x : v) acc = std::max(acc, std::abs(x));
      return acc;
  }
  return acc;
}

}  // namespace gbnlab
