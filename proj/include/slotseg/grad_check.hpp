#pragma once

#include <functional>
#include <string>
#include <vector>

#include "slotseg/autodiff.hpp"

namespace slotseg {

struct GradCheckItem {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    bool finite = true;
};

struct GradCheckReport {
    std::vector<GradCheckItem> items;
    double worst_rel_err = 0.0;
    std::string worst_name;
    bool all_finite = true;

    bool passed(double tol) const { return all_finite && worst_rel_err < tol; }
};

// Relative error with an absolute floor: tiny gradients are compared against
// the floor instead of each other, which keeps finite-difference noise from
// producing spurious failures near zero.
inline double rel_err(double a, double n, double floor_ = 1e-5) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor_});
}

// Verifies analytic gradients of a scalar-valued builder against central
// finite differences, parameter scalar by parameter scalar.
//
// `build` must construct the loss on the given graph, reading parameters from
// `reg` via Graph::param. It is invoked once with gradients enabled and then
// 2 * total_scalars times on gradient-free graphs with perturbed parameters;
// it must be deterministic (draw any noise outside and capture it).
inline GradCheckReport grad_check(ParamRegistry& reg,
                                  const std::function<Var(Graph&)>& build, double h = 1e-5,
                                  double floor_ = 1e-5) {
    GradBuffer analytic;
    analytic.init_like(reg);
    {
        Graph g(true);
        Var loss = build(g);
        g.backward(loss);
        g.export_grads(analytic);
    }
    auto eval = [&]() {
        Graph g(false);
        Var loss = build(g);
        const Tensor& t = g.value(loss);
        if (t.size() != 1) throw ShapeError("grad_check: builder must return a scalar");
        return t.v[0];
    };
    GradCheckReport report;
    for (int p = 0; p < reg.count(); ++p) {
        GradCheckItem item;
        item.name = reg.name(p);
        Tensor& val = reg.value(p);
        for (size_t i = 0; i < val.v.size(); ++i) {
            const double orig = val.v[i];
            val.v[i] = orig + h;
            const double fp = eval();
            val.v[i] = orig - h;
            const double fm = eval();
            val.v[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic.g[static_cast<size_t>(p)].v[i];
            if (!std::isfinite(numeric) || !std::isfinite(a)) {
                item.finite = false;
                report.all_finite = false;
                continue;
            }
            item.max_rel_err = std::max(item.max_rel_err, rel_err(a, numeric, floor_));
            item.max_abs_err = std::max(item.max_abs_err, std::abs(a - numeric));
        }
        if (item.max_rel_err > report.worst_rel_err) {
            report.worst_rel_err = item.max_rel_err;
            report.worst_name = item.name;
        }
        report.items.push_back(std::move(item));
    }
    return report;
}

}  // namespace slotseg
