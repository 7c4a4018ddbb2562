#include "gramsmear/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace gramsmear::ad {

namespace {

double loss_value(const LossFn& fn, const ParamStore<double>& params) {
  Tape<double> tape;
  const Var loss = fn(tape, params);
  return tape.value(loss)[0];
}

}  // namespace

GradCheckReport grad_check(const LossFn& fn, ParamStore<double>& params, double eps, double tol, double floor) {
  Tape<double> tape;
  const Var loss = fn(tape, params);
  const auto analytic = tape.backward(loss, params);

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params.mutable_values(p);
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double orig = values[k];
      const double up = orig + eps;
      const double down = orig - eps;
      values[k] = up;
      const double f_up = loss_value(fn, params);
      values[k] = down;
      const double f_down = loss_value(fn, params);
      values[k] = orig;
      // divide by the step actually taken after rounding
      const double numeric = (f_up - f_down) / (up - down);
      const double a = analytic[p][k];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.checked;
      if (rel > report.max_rel_error || report.checked == 1) {
        report.max_rel_error = rel;
        report.worst_parameter = params.name(p);
        report.worst_index = k;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace gramsmear::ad
