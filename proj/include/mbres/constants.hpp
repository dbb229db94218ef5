#pragma once

namespace mbres::constants {

// SI defining constants (2019 redefinition) and CODATA-2018 values.
inline constexpr double k_B = 1.380649e-23;         // J/K (exact)
inline constexpr double hbar = 1.054571817e-34;     // J*s
inline constexpr double e_charge = 1.602176634e-19; // C (exact)

inline constexpr double pi = 3.14159265358979323846;
inline constexpr double euler_gamma = 0.57721566490153286061;

// Weak-coupling BCS ratio Delta0 / (k_B * T_c).
inline constexpr double bcs_gap_ratio = 1.764;

} // namespace mbres::constants
