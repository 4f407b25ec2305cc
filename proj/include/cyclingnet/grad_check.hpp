#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cyclingnet/autograd.hpp"
#include "cyclingnet/tensor.hpp"

namespace cyclingnet {

struct GradCheckOptions {
    double tolerance = 1e-4;
    double step = 1e-4;
    /// Coordinates probed per tensor; negative means exhaustive.
    int max_coords_per_tensor = -1;
    std::uint64_t coord_seed = 0;
    /// Relative-error denominator floor; keeps near-zero gradients from
    /// inflating the ratio.
    double denom_floor = 1e-6;
    /// Test hook: applied to the analytic gradients before comparison.
    std::function<void(const std::vector<Parameter<double>*>&)> perturb_analytic;
};

struct GradCheckReport {
    bool pass = true;
    double max_rel_error = 0.0;
    std::string worst;
    std::size_t coords_checked = 0;
};

/// Core checker: compares the analytic gradients of externally owned
/// parameters against 64-bit central finite differences of the loss.
///
/// `compute_gradients` must zero and refill every target's grad at the
/// current values; `loss_value` must return the scalar loss at the current
/// values. Both must be deterministic functions of the parameter values
/// (fixed dropout seeds, same mode).
template <typename BackwardFn, typename LossFn>
GradCheckReport grad_check_params(const std::vector<Parameter<double>*>& targets,
                                  BackwardFn&& compute_gradients, LossFn&& loss_value,
                                  const GradCheckOptions& opt = {}) {
    compute_gradients();
    if (opt.perturb_analytic) opt.perturb_analytic(targets);

    GradCheckReport report;
    Rng coord_rng(opt.coord_seed);
    const double h = opt.step;
    for (Parameter<double>* p : targets) {
        std::vector<std::size_t> coords;
        if (opt.max_coords_per_tensor < 0 ||
            p->value.size() <= static_cast<std::size_t>(opt.max_coords_per_tensor)) {
            coords.resize(p->value.size());
            for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        } else {
            coords.reserve(opt.max_coords_per_tensor);
            for (int k = 0; k < opt.max_coords_per_tensor; ++k)
                coords.push_back(static_cast<std::size_t>(coord_rng.next() % p->value.size()));
        }
        for (std::size_t ci : coords) {
            const double saved = p->value[ci];
            p->value[ci] = saved + h;
            const double f_plus = loss_value();
            p->value[ci] = saved - h;
            const double f_minus = loss_value();
            p->value[ci] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * h);
            const double analytic = p->grad[ci];
            const double denom =
                std::max({std::abs(analytic), std::abs(numeric), opt.denom_floor});
            const double rel = std::abs(analytic - numeric) / denom;
            ++report.coords_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = p->name + "[" + std::to_string(ci) + "] analytic=" +
                               std::to_string(analytic) + " numeric=" + std::to_string(numeric);
            }
        }
    }
    report.pass = report.max_rel_error <= opt.tolerance;
    return report;
}

/// Convenience form for single operations: owns the given input tensors as
/// Parameters, hands `build` a fresh tape plus one leaf per input (in order),
/// and checks the gradients of every input against finite differences.
/// `build` must be a deterministic map from the leaf values to a scalar loss.
template <typename BuildFn>
GradCheckReport grad_check(std::vector<Parameter<double>> inputs, BuildFn&& build,
                           const GradCheckOptions& opt = {}) {
    using Var = typename Tape<double>::Var;
    std::vector<Parameter<double>*> targets;
    for (auto& p : inputs) targets.push_back(&p);

    auto run = [&](bool backward) {
        Tape<double> tape;
        std::vector<Var> leaves;
        leaves.reserve(inputs.size());
        for (auto& p : inputs) {
            if (backward) p.zero_grad();
            leaves.push_back(tape.leaf(p));
        }
        const Var loss = build(tape, leaves);
        if (backward) tape.backward(loss);
        return tape.value(loss)[0];
    };
    return grad_check_params(
        targets, [&] { run(true); }, [&] { return run(false); }, opt);
}

}  // namespace cyclingnet
