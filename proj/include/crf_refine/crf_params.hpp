#pragma once

#include <cstddef>

namespace crf_refine {

// Parameters of the two-kernel Potts pairwise term.
//
//   psi_p(i, j) = w1 * exp(-|p_i - p_j|^2 / (2 sigma_alpha^2) - |I_i - I_j|^2 / (2 sigma_beta^2))
//               + w2 * exp(-|p_i - p_j|^2 / (2 sigma_gamma^2))
//
// Defaults are the tuned lung-CT values: appearance kernel only (w2 = 0),
// ten mean-field iterations. sigma_gamma is inert while w2 == 0.
struct CrfParams {
  double w1 = 3.0;
  double w2 = 0.0;
  double sigma_alpha = 5.0;   // pixels
  double sigma_beta = 26.0;   // intensity units, 0..255 scale
  double sigma_gamma = 3.0;   // pixels
  std::size_t iterations = 10;

  // Throws InvalidParameter unless every sigma > 0 and both weights >= 0.
  void validate() const;

  friend bool operator==(const CrfParams&, const CrfParams&) = default;
};

}  // namespace crf_refine
