#include "ppg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ppg/errors.hpp"
#include "ppg/rng.hpp"

namespace ppg {

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& t : tensors) m = std::max(m, t.max_rel_error);
  return m;
}

bool GradCheckReport::passed() const { return finite && diagnostic.empty() && max_rel_error() < tolerance; }

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  if (!diagnostic.empty()) os << "diagnostic: " << diagnostic << '\n';
  for (const auto& t : tensors) {
    os << "  " << t.name << ": coords=" << t.coords_checked << " max_rel=" << t.max_rel_error
       << " max_abs=" << t.max_abs_error;
    if (t.max_rel_error >= tolerance)
      os << " worst[" << t.worst_index << "] analytic=" << t.worst_analytic << " numeric=" << t.worst_numeric;
    os << '\n';
  }
  return os.str();
}

namespace {
double eval_scalar(const std::function<Tensor()>& f) {
  NoGradScope no_grad;
  const Tensor y = f();
  if (y.numel() != 1) throw ContractError("finite_difference_check: f must return a single value");
  return y.item();
}
}  // namespace

GradCheckReport finite_difference_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& wrt,
                                        const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ContractError("finite_difference_check: eps must be positive");
  GradCheckReport report;
  report.tolerance = options.tolerance;

  std::vector<bool> saved_flags;
  std::vector<std::vector<double>> saved_grads;
  for (const auto& nt : wrt) {
    Tensor t = nt.tensor;
    saved_flags.push_back(t.requires_grad());
    saved_grads.emplace_back(t.grad().begin(), t.grad().end());
    t.set_requires_grad(true);
    t.zero_grad();
  }
  auto restore = [&] {
    for (std::size_t i = 0; i < wrt.size(); ++i) {
      Tensor t = wrt[i].tensor;
      t.set_requires_grad(saved_flags[i]);
      t.impl()->grad = saved_grads[i];
    }
  };

  std::vector<std::vector<double>> analytic(wrt.size());
  {
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = f();
    }
    if (y.numel() != 1) {
      restore();
      throw ContractError("finite_difference_check: f must return a single value");
    }
    if (!std::isfinite(y.item())) {
      report.finite = false;
      report.diagnostic = "f(x) is not finite (" + std::to_string(y.item()) + ")";
      restore();
      return report;
    }
    if (y.requires_grad()) tape.backward(y);
    for (std::size_t i = 0; i < wrt.size(); ++i) {
      const Tensor& t = wrt[i].tensor;
      if (t.has_grad())
        analytic[i].assign(t.grad().begin(), t.grad().end());
      else
        analytic[i].assign(t.numel(), 0.0);
    }
  }

  Rng rng(options.seed);
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    Tensor t = wrt[i].tensor;
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_tensor > 0 && coords.size() > options.max_coords_per_tensor) {
      rng.shuffle(coords);
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    TensorCheck tc;
    tc.name = wrt[i].name;
    auto data = t.mutable_data();
    for (std::size_t c : coords) {
      const double orig = data[c];
      data[c] = orig + options.eps;
      const double fp = eval_scalar(f);
      data[c] = orig - options.eps;
      const double fm = eval_scalar(f);
      data[c] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.finite = false;
        report.diagnostic = "non-finite f while perturbing " + tc.name + "[" + std::to_string(c) + "]";
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * options.eps);
      const double a = analytic[i][c];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), options.denom_floor});
      tc.max_abs_error = std::max(tc.max_abs_error, abs_err);
      if (rel > tc.max_rel_error || tc.coords_checked == 0) {
        if (rel >= tc.max_rel_error) {
          tc.max_rel_error = rel;
          tc.worst_index = c;
          tc.worst_analytic = a;
          tc.worst_numeric = numeric;
        }
      }
      ++tc.coords_checked;
    }
    report.tensors.push_back(tc);
  }
  restore();
  return report;
}

GradCheckReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                        const GradCheckOptions& options) {
  return finite_difference_check([&] { return f(x); }, {NamedTensor{"x", x}}, options);
}

}  // namespace ppg
