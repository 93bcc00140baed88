#include "vinter/tensor.hpp"

#include <cmath>

namespace vinter {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() {
    return g_grad_enabled;
}

void set_grad_enabled(bool on) {
    g_grad_enabled = on;
}

FiniteDiffReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                   const std::map<std::string, Tensor<double>>& params,
                                   double eps) {
    if (eps <= 0) throw ContractError("finite_diff_check: eps must be > 0");

    auto value_of = [&f]() {
        NoGradGuard no_grad;
        const double v = f().item();
        if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss value");
        return v;
    };

    Tensor<double> loss = f();
    if (!std::isfinite(loss.item())) {
        throw NumericError("finite_diff_check: non-finite loss value");
    }
    GradMap<double> analytic = backward(loss, params);

    FiniteDiffReport report;
    for (const auto& [name, p] : params) {
        auto& values = const_cast<Tensor<double>&>(p).data();
        const auto& grads = analytic.at(name).data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double fp = value_of();
            values[i] = saved - eps;
            const double fm = value_of();
            values[i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = grads[i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            const double rel = std::fabs(a - numeric) / denom;
            ++report.checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

}  // namespace vinter
