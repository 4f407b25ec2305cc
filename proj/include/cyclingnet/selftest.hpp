#pragma once

#include <chrono>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "cyclingnet/grad_check.hpp"
#include "cyclingnet/network.hpp"
#include "cyclingnet/optical_flow.hpp"
#include "cyclingnet/pipeline.hpp"
#include "cyclingnet/trainer.hpp"

namespace cyclingnet {

// ----- synthetic inputs -----

/// Smooth random texture: four low-frequency waves around 0.5 whose
/// directions are spread over distinct angle bins, so the motion is
/// observable in every direction (no aperture degeneracy). `shift`
/// translates the continuous signal, making integer shifts exact.
inline Image smooth_texture(int n, std::uint64_t seed, double shift_x = 0.0,
                            double shift_y = 0.0) {
    Rng rng(seed);
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::vector<Wave> waves;
    double amp_sum = 0.0;
    for (int k = 0; k < 4; ++k) {
        Wave w;
        const double angle = k * M_PI / 4.0 + rng.uniform(0.05, M_PI / 4.0 - 0.05);
        const double cycles = rng.uniform(1.0, 3.0);
        w.fx = cycles * std::cos(angle);
        w.fy = cycles * std::sin(angle);
        w.phase = rng.uniform(0.0, 2.0 * M_PI);
        w.amp = rng.uniform(0.5, 1.0);
        amp_sum += w.amp;
        waves.push_back(w);
    }
    for (Wave& w : waves) w.amp *= 0.45 / amp_sum;

    Image img(n, n, 1);
    const double two_pi_over_n = 2.0 * M_PI / n;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double v = 0.5;
            for (const Wave& w : waves)
                v += w.amp * std::sin(two_pi_over_n * (w.fx * (x - shift_x) + w.fy * (y - shift_y)) +
                                      w.phase);
            img.at(y, x, 0) = static_cast<float>(v);
        }
    return img;
}

namespace detail {

template <typename T>
Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline Parameter<double> rand_param(const std::string& name, Shape shape, Rng& rng,
                                    double lo = -1.0, double hi = 1.0) {
    return Parameter<double>(name, random_tensor<double>(std::move(shape), rng, lo, hi));
}

/// Random projection of a tensor Var to a scalar so every output coordinate
/// contributes to the checked loss.
inline typename Tape<double>::Var project(Tape<double>& tape, typename Tape<double>::Var y,
                                          Rng& rng) {
    Tensor<double> r(tape.shape(y));
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = rng.uniform(-1.0, 1.0);
    return tape.sum_all(tape.mul(y, tape.constant(std::move(r))));
}

inline void merge_report(GradCheckReport& acc, const GradCheckReport& rep) {
    if (rep.max_rel_error > acc.max_rel_error) {
        acc.max_rel_error = rep.max_rel_error;
        acc.worst = rep.worst;
    }
    acc.pass = acc.pass && rep.pass;
    acc.coords_checked += rep.coords_checked;
}

}  // namespace detail

// ----- gradient-check suites (one worst-case report over N seeds) -----

inline GradCheckReport check_conv2d_gradients(int seeds, double perturbation = 0.0) {
    GradCheckReport worst;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(1000 + s);
        std::vector<Parameter<double>> inputs;
        inputs.push_back(detail::rand_param("input", {6, 6, 2}, rng));
        inputs.push_back(detail::rand_param("kernels", {3, 3, 2, 2}, rng, -0.7, 0.7));
        inputs.push_back(detail::rand_param("bias", {2}, rng, -0.3, 0.3));
        const std::size_t stride = 1 + s % 2;
        Rng proj_rng(rng.next());
        GradCheckOptions opt;
        if (perturbation != 0.0)
            opt.perturb_analytic = [perturbation](const std::vector<Parameter<double>*>& ps) {
                for (auto* p : ps)
                    for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += perturbation;
            };
        auto rep = grad_check(
            std::move(inputs),
            [&](Tape<double>& t, const std::vector<Tape<double>::Var>& v) {
                Rng r = proj_rng;
                return detail::project(t, t.conv2d(v[0], v[1], v[2], stride), r);
            },
            opt);
        detail::merge_report(worst, rep);
    }
    return worst;
}

inline GradCheckReport check_max_pool_gradients(int seeds) {
    GradCheckReport worst;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(2000 + s);
        // distinct values inside every 2x2 window: shuffled well-separated
        // levels plus small noise, so the finite-difference step cannot flip
        // any argmax
        Tensor<double> input(Shape{6, 6, 3});
        for (std::size_t oy = 0; oy < 3; ++oy)
            for (std::size_t ox = 0; ox < 3; ++ox)
                for (std::size_t c = 0; c < 3; ++c) {
                    double levels[4] = {0.2, 0.4, 0.6, 0.8};
                    for (int i = 3; i > 0; --i)
                        std::swap(levels[i], levels[rng.next() % (i + 1)]);
                    int k = 0;
                    for (std::size_t py = 0; py < 2; ++py)
                        for (std::size_t px = 0; px < 2; ++px)
                            input[input.idx3(oy * 2 + py, ox * 2 + px, c)] =
                                levels[k++] + rng.uniform(0.0, 0.05);
                }
        std::vector<Parameter<double>> inputs;
        inputs.emplace_back("input", std::move(input));
        Rng proj_rng(rng.next());
        auto rep = grad_check(std::move(inputs),
                              [&](Tape<double>& t, const std::vector<Tape<double>::Var>& v) {
                                  Rng r = proj_rng;
                                  return detail::project(t, t.max_pool2d(v[0], 2), r);
                              });
        detail::merge_report(worst, rep);
    }
    return worst;
}

inline GradCheckReport check_batch_norm_gradients(int seeds) {
    GradCheckReport worst;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(3000 + s);
        std::vector<Parameter<double>> inputs;
        inputs.push_back(detail::rand_param("x", {4, 5}, rng));
        inputs.push_back(detail::rand_param("gamma", {5}, rng, 0.5, 1.5));
        inputs.push_back(detail::rand_param("beta", {5}, rng, -0.5, 0.5));
        Rng proj_rng(rng.next());
        auto rep = grad_check(std::move(inputs),
                              [&](Tape<double>& t, const std::vector<Tape<double>::Var>& v) {
                                  Tensor<double> mm(Shape{5}), mv(Shape{5},
                                                                  std::vector<double>(5, 1.0));
                                  Rng r = proj_rng;
                                  return detail::project(
                                      t,
                                      t.batch_norm(v[0], v[1], v[2], mm, mv, Mode::train, 0.99,
                                                   0.001),
                                      r);
                              });
        detail::merge_report(worst, rep);
    }
    return worst;
}

inline GradCheckReport check_dense_gradients(int seeds) {
    GradCheckReport worst;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(4000 + s);
        std::vector<Parameter<double>> inputs;
        inputs.push_back(detail::rand_param("x", {3, 7}, rng));
        inputs.push_back(detail::rand_param("w", {7, 4}, rng, -0.7, 0.7));
        inputs.push_back(detail::rand_param("b", {4}, rng, -0.3, 0.3));
        Rng proj_rng(rng.next());
        auto rep = grad_check(
            std::move(inputs), [&](Tape<double>& t, const std::vector<Tape<double>::Var>& v) {
                Rng r = proj_rng;
                return detail::project(t, t.add_bias(t.matmul(v[0], v[1]), v[2]), r);
            });
        detail::merge_report(worst, rep);
    }
    return worst;
}

inline GradCheckReport check_lstm_cell_gradients(int seeds, LstmCandidate candidate) {
    GradCheckReport worst;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(5000 + s);
        std::vector<Parameter<double>> inputs;
        inputs.push_back(detail::rand_param("x", {2, 3}, rng));
        inputs.push_back(detail::rand_param("h_prev", {2, 4}, rng, -0.8, 0.8));
        inputs.push_back(detail::rand_param("s_prev", {2, 4}, rng, -0.8, 0.8));
        const char* gates[4] = {"f", "g", "c", "q"};
        for (const char* g : gates) {
            inputs.push_back(detail::rand_param(std::string("U_") + g, {3, 4}, rng, -0.7, 0.7));
            inputs.push_back(detail::rand_param(std::string("W_") + g, {4, 4}, rng, -0.7, 0.7));
            inputs.push_back(detail::rand_param(std::string("b_") + g, {4}, rng, -0.3, 0.3));
        }
        Rng proj_rng(rng.next());
        auto rep = grad_check(
            std::move(inputs), [&](Tape<double>& t, const std::vector<Tape<double>::Var>& v) {
                LstmCellVars<double> p;
                p.forget = {v[3], v[4], v[5]};
                p.input = {v[6], v[7], v[8]};
                p.cell = {v[9], v[10], v[11]};
                p.output = {v[12], v[13], v[14]};
                auto [h, cell] = lstm_cell(t, v[0], v[1], v[2], p, candidate);
                Rng r = proj_rng;
                return t.add(detail::project(t, h, r), detail::project(t, cell, r));
            });
        detail::merge_report(worst, rep);
    }
    return worst;
}

inline GradCheckReport check_attention_gradients(int seeds, AttentionMode mode) {
    GradCheckReport worst;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(6000 + s);
        std::vector<Parameter<double>> inputs;
        inputs.push_back(detail::rand_param("seq", {2, 3, 4}, rng));
        if (mode == AttentionMode::table_count) {
            inputs.push_back(detail::rand_param("score_w", {4, 4}, rng, -0.7, 0.7));
            inputs.push_back(detail::rand_param("score_b", {1}, rng, -0.3, 0.3));
        } else {
            inputs.push_back(detail::rand_param("w_t", {4, 2}, rng, -0.7, 0.7));
            inputs.push_back(detail::rand_param("w_x", {4, 2}, rng, -0.7, 0.7));
            inputs.push_back(detail::rand_param("b_h", {2}, rng, -0.3, 0.3));
            inputs.push_back(detail::rand_param("w_a", {2, 1}, rng, -0.7, 0.7));
            inputs.push_back(detail::rand_param("b_a", {1}, rng, -0.3, 0.3));
        }
        Rng proj_rng(rng.next());
        auto rep = grad_check(
            std::move(inputs), [&](Tape<double>& t, const std::vector<Tape<double>::Var>& v) {
                Rng r = proj_rng;
                if (mode == AttentionMode::table_count)
                    return detail::project(
                        t, self_attention_table(t, v[0], AttentionTableVars<double>{v[1], v[2]}),
                        r);
                return detail::project(
                    t,
                    self_attention_paper(
                        t, v[0], AttentionPaperVars<double>{v[1], v[2], v[3], v[4], v[5]}),
                    r);
            });
        detail::merge_report(worst, rep);
    }
    return worst;
}

/// End-to-end gradients of the shrunken model (binary cross-entropy loss on
/// a 2-sample batch, dropout active with a fixed mask seed). Coordinates are
/// sampled per tensor; different seeds sample different coordinates.
inline GradCheckReport check_full_model_gradients(int seeds, int coords_per_tensor = 8) {
    GradCheckReport worst;
    for (int s = 0; s < seeds; ++s) {
        ModelConfig cfg = ModelConfig::shrunken();
        cfg.seed = 7000 + s;
        Model<double> model = build_model<double>(cfg);
        Rng rng(7100 + s);
        Tensor<double> x(Shape{2, cfg.input_h, cfg.input_w, cfg.input_c});
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(0.1, 0.9);
        const std::vector<double> targets{1.0, 0.0};
        const std::uint64_t mask_seed = rng.next();

        std::vector<Parameter<double>*> trainable;
        for (auto* p : model.parameters())
            if (p->trainable) trainable.push_back(p);

        auto run = [&](bool backward) {
            Tape<double> tape;
            Rng dropout_rng(mask_seed);
            if (backward)
                for (auto* p : trainable) p->zero_grad();
            const auto out = model.forward(tape, tape.constant(x), Mode::train, &dropout_rng);
            const auto loss = tape.bce_loss(out, targets);
            if (backward) tape.backward(loss);
            return tape.value(loss)[0];
        };

        GradCheckOptions opt;
        opt.tolerance = 1e-3;
        // smaller step than the per-op checks: a coarse step makes the
        // central difference stride across ReLU kinks and max-pool argmax
        // flips somewhere in the deep stack (the quotient converges to the
        // analytic value as the step shrinks); 64-bit roundoff at 1e-6 is
        // still only ~1e-10
        opt.step = 1e-6;
        opt.max_coords_per_tensor = coords_per_tensor;
        opt.coord_seed = 7200 + s;
        auto rep = grad_check_params(
            trainable, [&] { run(true); }, [&] { return run(false); }, opt);
        detail::merge_report(worst, rep);
    }
    return worst;
}

// ----- oracle checks -----

struct OracleResult {
    bool pass = true;
    std::string detail;
};

/// Identical frames must produce (numerically) zero flow.
inline OracleResult check_flow_zero_motion(const FlowParams& params = {}) {
    OracleResult result;
    const Image frame = smooth_texture(64, 99);
    const FlowField flow = estimate_flow(frame, frame, params);
    float max_mag = 0.0f;
    for (std::size_t i = 0; i < flow.u.size(); ++i)
        max_mag = std::max(max_mag, std::hypot(flow.u[i], flow.v[i]));
    result.pass = max_mag < 1e-3f;
    result.detail = "max |flow| = " + std::to_string(max_mag) + " (tolerance 1e-3)";
    return result;
}

/// Integer translations of smooth 64x64 textures: the mean interior flow
/// must land within 0.5 px of the true shift.
inline OracleResult check_flow_shift_oracle(const FlowParams& params = {}) {
    const std::pair<int, int> shifts[] = {{3, 0}, {0, 3},  {-3, 2}, {5, -5},
                                          {-4, 0}, {2, 2}, {0, -5}, {-1, 4}};
    const int n = 64, margin = 12;
    OracleResult result;
    double worst = 0.0;
    std::string worst_case;
    int case_i = 0;
    for (const auto& [sx, sy] : shifts) {
        const Image prev = smooth_texture(n, 500 + case_i);
        const Image next = smooth_texture(n, 500 + case_i, sx, sy);
        const FlowField flow = estimate_flow(prev, next, params);
        double err_sum = 0.0;
        std::size_t count = 0;
        for (int y = margin; y < n - margin; ++y)
            for (int x = margin; x < n - margin; ++x) {
                const std::size_t id = flow.idx(y, x);
                err_sum += std::hypot(flow.u[id] - sx, flow.v[id] - sy);
                ++count;
            }
        const double mean_err = err_sum / count;
        if (mean_err > worst) {
            worst = mean_err;
            worst_case = "(" + std::to_string(sx) + "," + std::to_string(sy) + ")";
        }
        ++case_i;
    }
    result.pass = worst < 0.5;
    result.detail =
        "worst mean interior error " + std::to_string(worst) + " px at shift " + worst_case +
        " (tolerance 0.5)";
    return result;
}

/// The fused composite must equal rgb/2 + sum(flows)/8 to 32-bit rounding,
/// and all-ones inputs must map exactly to all-ones.
inline OracleResult check_fusion_exactness(int trials = 1000) {
    OracleResult result;
    Rng rng(808);
    double max_err = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        const int h = 16, w = 16;
        Image rgb(h, w, 3);
        std::array<Image, 4> flows{Image(h, w, 3), Image(h, w, 3), Image(h, w, 3),
                                   Image(h, w, 3)};
        for (std::size_t i = 0; i < rgb.size(); ++i) {
            rgb.data[i] = static_cast<float>(rng.uniform(0.0, 1.0));
            for (auto& f : flows) f.data[i] = static_cast<float>(rng.uniform(0.0, 1.0));
        }
        const Image fused =
            fuse_images(rgb, {&flows[0], &flows[1], &flows[2], &flows[3]});
        for (std::size_t i = 0; i < fused.size(); ++i) {
            const double want = rgb.data[i] * 0.5 +
                                (static_cast<double>(flows[0].data[i]) + flows[1].data[i] +
                                 flows[2].data[i] + flows[3].data[i]) /
                                    8.0;
            max_err = std::max(max_err, std::abs(fused.data[i] - want));
            if (fused.data[i] < 0.0f || fused.data[i] > 1.0f) {
                result.pass = false;
                result.detail = "fused value out of [0,1]";
                return result;
            }
        }
    }
    Image ones(4, 4, 3, 1.0f);
    const Image fused_ones = fuse_images(ones, {&ones, &ones, &ones, &ones});
    bool ones_exact = true;
    for (float v : fused_ones.data) ones_exact = ones_exact && v == 1.0f;
    result.pass = max_err < 1e-6 && ones_exact;
    result.detail = "max deviation " + std::to_string(max_err) +
                    (ones_exact ? ", all-ones exact" : ", all-ones NOT exact");
    return result;
}

inline OracleResult check_golden_table() {
    OracleResult result;
    Model<float> model = build_model<float>(ModelConfig{});
    const auto diffs = golden_diff(model);
    result.pass = diffs.empty();
    result.detail = diffs.empty()
                        ? "all layer shapes and parameter counts match; totals " +
                              std::to_string(model.trainable_param_count()) + " / " +
                              std::to_string(model.non_trainable_param_count())
                        : std::to_string(diffs.size()) + " mismatches, first: " + diffs.front();
    return result;
}

// ----- aggregated suite -----

struct SelftestOptions {
    int seeds = 20;
    /// Test hook: offsets the analytic conv2d gradients so the harness's
    /// failure path can be exercised deliberately.
    double conv_grad_perturbation = 0.0;
};

struct SelftestCheck {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct SelftestReport {
    std::vector<SelftestCheck> checks;
    double seconds = 0.0;
    bool all_pass() const {
        for (const auto& c : checks)
            if (!c.pass) return false;
        return true;
    }
};

/// Runs the full property suite: gradient checks for every differentiable
/// operation and the shrunken end-to-end model, the published-table golden
/// check, the optical-flow oracles, and fusion exactness.
inline SelftestReport run_selftest(const SelftestOptions& opt = {}, std::ostream* log = nullptr) {
    SelftestReport report;
    const auto t0 = std::chrono::steady_clock::now();
    auto add = [&](const std::string& name, bool pass, const std::string& detail) {
        report.checks.push_back({name, pass, detail});
        if (log)
            (*log) << (pass ? "[PASS] " : "[FAIL] ") << name << " - " << detail << "\n";
    };
    auto add_grad = [&](const std::string& name, const GradCheckReport& rep) {
        add(name, rep.pass,
            "max rel error " + std::to_string(rep.max_rel_error) + " over " +
                std::to_string(rep.coords_checked) + " coords" +
                (rep.pass ? "" : " (worst: " + rep.worst + ")"));
    };

    add_grad("grad_conv2d", check_conv2d_gradients(opt.seeds, opt.conv_grad_perturbation));
    add_grad("grad_max_pool2d", check_max_pool_gradients(opt.seeds));
    add_grad("grad_batch_norm", check_batch_norm_gradients(opt.seeds));
    add_grad("grad_dense", check_dense_gradients(opt.seeds));
    add_grad("grad_lstm_cell_tanh", check_lstm_cell_gradients(opt.seeds, LstmCandidate::tanh));
    add_grad("grad_lstm_cell_sigmoid",
             check_lstm_cell_gradients(opt.seeds, LstmCandidate::sigmoid));
    add_grad("grad_attention_table",
             check_attention_gradients(opt.seeds, AttentionMode::table_count));
    add_grad("grad_attention_paper",
             check_attention_gradients(opt.seeds, AttentionMode::paper_eq));
    add_grad("grad_full_model", check_full_model_gradients(opt.seeds));

    const auto golden = check_golden_table();
    add("golden_table", golden.pass, golden.detail);
    const auto zero = check_flow_zero_motion();
    add("flow_zero_motion", zero.pass, zero.detail);
    const auto shift = check_flow_shift_oracle();
    add("flow_shift_oracle", shift.pass, shift.detail);
    const auto fusion = check_fusion_exactness();
    add("fusion_exactness", fusion.pass, fusion.detail);

    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log)
        (*log) << (report.all_pass() ? "selftest passed" : "selftest FAILED") << " ("
               << report.checks.size() << " checks, " << report.seconds << " s)\n";
    return report;
}

}  // namespace cyclingnet
