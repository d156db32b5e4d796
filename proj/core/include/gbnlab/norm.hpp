#pragma once

#include <span>
#include <string>

namespace gbnlab {

// Perturbation norm family.
enum class Norm { L1, L2, Linf };

std::string to_string(Norm norm);
Norm parse_norm(const std::string& text);
double lp_norm(std::span<const double> v, Norm norm);

}  // namespace gbnlab
