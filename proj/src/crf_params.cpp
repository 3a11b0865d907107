#include "crf_refine/crf_params.hpp"

#include <cmath>

#include "crf_refine/error.hpp"

namespace crf_refine {

void CrfParams::validate() const {
  if (!(sigma_alpha > 0.0) || !(sigma_beta > 0.0) || !(sigma_gamma > 0.0))
    throw InvalidParameter("kernel bandwidths must be > 0");
  if (!(w1 >= 0.0) || !(w2 >= 0.0)) throw InvalidParameter("kernel weights must be >= 0");
  if (!std::isfinite(w1) || !std::isfinite(w2) || !std::isfinite(sigma_alpha) ||
      !std::isfinite(sigma_beta) || !std::isfinite(sigma_gamma))
    throw InvalidParameter("kernel parameters must be finite");
}

}  // namespace crf_refine
