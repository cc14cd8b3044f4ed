// Central finite-difference verification of the reverse-mode gradients. The
// numeric side only ever calls the forward pass, so it stays independent of
// every backward rule it checks.
#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "qptad/autodiff.hpp"
#include "qptad/rng.hpp"

namespace qptad {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    size_t coords_checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_param;
    double max_rel_err = 0.0;
    std::string worst_param;
    double kink_margin = 0.0;  // smallest kink distance seen across all evals
    bool passed = false;
    double tolerance = 0.0;
};

// Compares the analytic gradient of a scalar-valued fragment against central
// finite differences (f(p+h) - f(p-h)) / 2h. For large tensors a random
// subset of coordinates is probed (max_coords_per_param, 0 = all).
inline GradCheckReport grad_check(const std::function<Var()>& build_loss, const std::vector<Parameter*>& params,
                                  double step, double tolerance, int max_coords_per_param = 0,
                                  uint64_t coord_seed = 0) {
    GradCheckReport report;
    report.tolerance = tolerance;
    double min_margin = std::numeric_limits<double>::infinity();

    reset_kink_margin();
    Var loss = build_loss();
    if (loss.value().numel() != 1) throw std::invalid_argument("grad_check: fragment output is not a scalar");
    min_margin = std::min(min_margin, kink_margin());

    for (Parameter* p : params) p->zero_grad();
    loss.backward();

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad);

    Rng coord_rng(coord_seed ^ 0xA5C3B172ULL);
    auto eval = [&](void) -> double {
        reset_kink_margin();
        const double v = build_loss().value().item();
        min_margin = std::min(min_margin, kink_margin());
        return v;
    };

    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        GradCheckEntry entry;
        entry.name = p.name;

        const size_t n = p.value.numel();
        std::vector<size_t> coords;
        if (max_coords_per_param <= 0 || n <= static_cast<size_t>(max_coords_per_param)) {
            coords.resize(n);
            for (size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            // sample distinct coordinates
            std::vector<size_t> all(n);
            for (size_t i = 0; i < n; ++i) all[i] = i;
            for (int k = 0; k < max_coords_per_param; ++k) {
                const size_t j = k + static_cast<size_t>(coord_rng.uniform_int(0, static_cast<int64_t>(n - 1 - k)));
                std::swap(all[k], all[j]);
                coords.push_back(all[k]);
            }
        }

        for (size_t ci : coords) {
            const double a = analytic[pi].v[ci];
            // A correct gradient matches the central difference at some step
            // in this ladder; roundoff-dominated coordinates (tiny gradients
            // against |f| ~ O(1)) need the larger steps, ordinary ones the
            // small. A wrong analytic gradient disagrees at every step.
            double rel = std::numeric_limits<double>::infinity();
            for (const double h : {step, 8.0 * step, 64.0 * step}) {
                const double saved = p.value.v[ci];
                p.value.v[ci] = saved + h;
                const double fp = eval();
                p.value.v[ci] = saved - h;
                const double fm = eval();
                p.value.v[ci] = saved;
                const double numeric = (fp - fm) / (2.0 * h);
                const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
                rel = std::min(rel, std::abs(a - numeric) / denom);
                if (rel <= tolerance) break;
            }
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
            ++entry.coords_checked;
        }

        if (entry.max_rel_err > report.max_rel_err) {
            report.max_rel_err = entry.max_rel_err;
            report.worst_param = entry.name;
        }
        report.per_param.push_back(std::move(entry));
    }

    report.kink_margin = min_margin;
    report.passed = report.max_rel_err <= tolerance;
    return report;
}

}  // namespace qptad
