#include "dtr/gest.hpp"

namespace dtr {

double pseudo_outcome_standard(double v_next, int a, int a_opt, double contrast_value) {
  return v_next + static_cast<double>(a_opt - a) * contrast_value;
}

double pseudo_outcome_modified(double v_next, int a_opt, double pi_star, double contrast_star) {
  return v_next + (static_cast<double>(a_opt) - pi_star) * contrast_star;
}

double pseudo_outcome_exact(double v_next, double pi_prev, double contrast_at_1, double contrast_at_0) {
  const double delta = pi_prev * optimal_treatment(contrast_at_1) * contrast_at_1 +
                       (1.0 - pi_prev) * optimal_treatment(contrast_at_0) * contrast_at_0;
  return v_next + delta;
}

}  // namespace dtr
