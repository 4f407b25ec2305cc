// Command-line front end: flow extraction, fusion preview, training,
// evaluation, per-clip prediction, model summary, and the self-test suite.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "cyclingnet/config.hpp"
#include "cyclingnet/network.hpp"
#include "cyclingnet/pipeline.hpp"
#include "cyclingnet/selftest.hpp"
#include "cyclingnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace cyclingnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUnexpected = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitCheck = 4;

/// Flags shared by every subcommand; translated into config overrides so the
/// precedence is always defaults < config file < command line.
struct CommonFlags {
    std::string config_file;
    std::string manifest, cache, weights, out;
    std::uint64_t seed = 0;
    int threads = 0;
    double threshold = -1.0;
    bool seed_set = false, threads_set = false, threshold_set = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "config file of dotted keys");
        cmd->add_option("--manifest", manifest, "clip manifest path");
        cmd->add_option("--cache", cache, "flow cache directory");
        cmd->add_option("--weights", weights, "weight file path");
        cmd->add_option("--out", out, "output directory");
        cmd->add_option("--seed", seed, "global seed")->trigger_on_parse()
            ->each([this](const std::string&) { seed_set = true; });
        cmd->add_option("--threads", threads, "worker cap (1 = fully deterministic)")
            ->each([this](const std::string&) { threads_set = true; });
        cmd->add_option("--threshold", threshold, "decision threshold")
            ->each([this](const std::string&) { threshold_set = true; });
    }

    RunConfig resolve() const {
        std::map<std::string, std::string> overrides;
        if (!manifest.empty()) overrides["paths.manifest"] = manifest;
        if (!cache.empty()) overrides["paths.flow_cache"] = cache;
        if (!weights.empty()) overrides["paths.weights"] = weights;
        if (!out.empty()) overrides["paths.out_dir"] = out;
        if (seed_set) overrides["seed"] = std::to_string(seed);
        if (threads_set) overrides["threads"] = std::to_string(threads);
        if (threshold_set) overrides["train.threshold"] = std::to_string(threshold);
        if (config_file.empty()) return RunConfig::resolve(nullptr, overrides);
        const fs::path p = config_file;
        return RunConfig::resolve(&p, overrides);
    }
};

void echo_config(const RunConfig& cfg, bool write_out_dir = false) {
    std::cout << "# resolved configuration\n" << cfg.echo() << "# end configuration\n";
    if (write_out_dir) cfg.write_echo(cfg.out_dir);
}

std::vector<ClipManifest> load_clips(const RunConfig& cfg) {
    if (cfg.manifest.empty())
        throw ConfigError("no manifest given (set paths.manifest or --manifest)");
    return load_manifest(cfg.manifest);
}

void print_metrics(const MetricsReport& m, const std::string& title) {
    std::printf("%s\n", title.c_str());
    std::printf("  accuracy            %.4f\n", m.accuracy);
    std::printf("  precision           %.4f\n", m.precision);
    std::printf("  recall              %.4f\n", m.recall);
    std::printf("  false_positive_rate %.4f\n", m.false_positive_rate);
    std::printf("  f1                  %.4f\n", m.f1);
    std::printf("  loss                %.4f\n", m.loss);
    std::printf("  counts              TP=%lld TN=%lld FP=%lld FN=%lld\n", m.counts.tp,
                m.counts.tn, m.counts.fp, m.counts.fn);
}

int cmd_flow(const RunConfig& cfg, bool emit_color) {
    echo_config(cfg);
    const auto clips = load_clips(cfg);
    std::size_t computed = 0, skipped = 0, failed = 0;
    for (const ClipManifest& clip : clips) {
        try {
            const auto stats =
                ensure_flows(clip, cfg.flow_cache, cfg.flow, static_cast<int>(cfg.model.input_h),
                             static_cast<int>(cfg.model.input_w), emit_color);
            computed += stats.computed;
            skipped += stats.skipped;
            std::printf("clip %-20s computed %zu, fresh %zu\n", clip.clip_id.c_str(),
                        stats.computed, stats.skipped);
        } catch (const DataError& e) {
            std::fprintf(stderr, "clip %s: %s\n", clip.clip_id.c_str(), e.what());
            ++failed;
        }
    }
    std::printf("flow cache: %zu computed, %zu fresh, %zu clips failed\n", computed, skipped,
                failed);
    return failed == 0 ? kExitOk : kExitData;
}

int cmd_fuse(const RunConfig& cfg, const std::string& only_clip) {
    echo_config(cfg, true);
    const auto clips = load_clips(cfg);
    DatasetBuilder data(clips, cfg.flow_cache, cfg.flow, static_cast<int>(cfg.model.input_h),
                        static_cast<int>(cfg.model.input_w), cfg.train.batch_size);
    data.verify_cache();
    std::size_t written = 0;
    for (std::size_t ci = 0; ci < data.clips().size(); ++ci) {
        const ClipManifest& clip = data.clips()[ci];
        if (!only_clip.empty() && clip.clip_id != only_clip) continue;
        const fs::path dir = cfg.out_dir / "fused" / clip.clip_id;
        fs::create_directories(dir);
        for (std::size_t t = 4; t < clip.frame_count; ++t) {
            const FusedSample s = data.sample({ci, t});
            char name[32];
            std::snprintf(name, sizeof name, "%06zu.ppm", t);
            write_image(dir / name, tensor_to_image(s.x));
            ++written;
        }
    }
    std::printf("wrote %zu fused composites under %s\n", written,
                (cfg.out_dir / "fused").string().c_str());
    return kExitOk;
}

int cmd_train(const RunConfig& cfg) {
    echo_config(cfg, true);
    const auto clips = load_clips(cfg);
    DatasetBuilder data(clips, cfg.flow_cache, cfg.flow, static_cast<int>(cfg.model.input_h),
                        static_cast<int>(cfg.model.input_w), cfg.train.batch_size);
    data.verify_cache();
    Model<float> model = build_model<float>(cfg.model);
    std::printf("training %s (%zu trainable parameters) on %zu samples\n",
                variant_name(cfg.model.variant), model.trainable_param_count(),
                data.split().train.size());
    const TrainState state = train(model, data, cfg.train);
    fs::create_directories(cfg.out_dir);
    write_history_csv(cfg.out_dir / "history.csv", state.history);
    fs::create_directories(fs::absolute(cfg.weights).parent_path());
    save_weights(model, cfg.weights);
    std::printf("trained %zu epochs (best epoch %d%s); weights -> %s, history -> %s\n",
                state.history.size(), state.best_epoch,
                state.stopped_early ? ", stopped early" : "", cfg.weights.string().c_str(),
                (cfg.out_dir / "history.csv").string().c_str());
    if (!data.split().val.empty()) {
        const EvalResult ev =
            evaluate(model, data, data.split().val, cfg.train.batch_size, cfg.train.threshold);
        print_metrics(ev.metrics, "validation metrics @ threshold " +
                                      std::to_string(cfg.train.threshold));
    }
    return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& split_name_arg, bool sweep) {
    echo_config(cfg, true);
    const auto clips = load_clips(cfg);
    DatasetBuilder data(clips, cfg.flow_cache, cfg.flow, static_cast<int>(cfg.model.input_h),
                        static_cast<int>(cfg.model.input_w), cfg.train.batch_size);
    data.verify_cache();
    Model<float> model = build_model<float>(cfg.model);
    load_weights(model, cfg.weights);
    const Split split = parse_split(split_name_arg);
    const auto& refs = split == Split::train ? data.split().train
                      : split == Split::val  ? data.split().val
                                             : data.split().test;
    if (refs.empty()) throw DataError("split '" + split_name_arg + "' has no samples");
    const EvalResult ev = evaluate(model, data, refs, cfg.train.batch_size, cfg.train.threshold);
    print_metrics(ev.metrics,
                  "metrics on " + split_name_arg + " @ threshold " +
                      std::to_string(cfg.train.threshold));
    fs::create_directories(cfg.out_dir);
    const fs::path pred_path = cfg.out_dir / ("predictions_" + split_name_arg + ".csv");
    write_predictions_csv(pred_path, ev.predictions, true);
    std::printf("predictions -> %s\n", pred_path.string().c_str());
    if (sweep) {
        const auto rows = threshold_sweep(ev.predictions);
        const fs::path sweep_path = cfg.out_dir / ("sweep_" + split_name_arg + ".csv");
        std::ofstream out(sweep_path);
        out << "threshold,accuracy,precision,recall,false_positive_rate,f1\n";
        std::printf("threshold  acc     prec    recall  fpr     f1\n");
        for (const auto& [t, m] : rows) {
            std::printf("%.2f       %.4f  %.4f  %.4f  %.4f  %.4f\n", t, m.accuracy, m.precision,
                        m.recall, m.false_positive_rate, m.f1);
            char line[160];
            std::snprintf(line, sizeof line, "%.2f,%.6f,%.6f,%.6f,%.6f,%.6f\n", t, m.accuracy,
                          m.precision, m.recall, m.false_positive_rate, m.f1);
            out << line;
        }
        std::printf("sweep -> %s\n", sweep_path.string().c_str());
    }
    return kExitOk;
}

int cmd_predict(const RunConfig& cfg, const std::string& clip_dir) {
    echo_config(cfg, true);
    Model<float> model = build_model<float>(cfg.model);
    load_weights(model, cfg.weights);
    const fs::path dir = clip_dir;
    const std::string clip_id = dir.filename().string();
    const auto records = predict_clip(model, dir, clip_id, cfg.flow, cfg.train.threshold);
    fs::create_directories(cfg.out_dir);
    const fs::path pred_path = cfg.out_dir / "predictions.csv";
    write_predictions_csv(pred_path, records, false);
    if (records.empty()) {
        std::printf("warning: clip '%s' has fewer than 5 readable frames; no predictions\n",
                    clip_id.c_str());
        return kExitOk;
    }
    std::printf("%zu records -> %s\n", records.size(), pred_path.string().c_str());
    const auto intervals = predicted_intervals(records);
    std::printf("%zu predicted near-miss interval(s)\n", intervals.size());
    for (const auto& [a, b] : intervals)
        std::printf("  frames %zu..%zu\n", a, b);
    return kExitOk;
}

int cmd_summary(const RunConfig& cfg, bool golden) {
    echo_config(cfg);
    Model<float> model = build_model<float>(cfg.model);
    std::cout << model.summary_text();
    if (golden) {
        const auto diffs = golden_diff(model);
        if (!diffs.empty()) {
            std::fprintf(stderr, "golden check FAILED (%zu differences):\n", diffs.size());
            for (const std::string& d : diffs) std::fprintf(stderr, "  %s\n", d.c_str());
            return kExitCheck;
        }
        std::printf("golden check passed: totals %zu trainable / %zu non-trainable\n",
                    model.trainable_param_count(), model.non_trainable_param_count());
    }
    return kExitOk;
}

int cmd_selftest(const RunConfig& cfg, int seeds, double perturb_conv) {
    echo_config(cfg);
    SelftestOptions opt;
    opt.seeds = seeds;
    opt.conv_grad_perturbation = perturb_conv;
    const SelftestReport report = run_selftest(opt, &std::cout);
    return report.all_pass() ? kExitOk : kExitCheck;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CyclingNet: cycling near-miss detection from bike-mounted video"};
    app.require_subcommand(1);

    std::function<int()> action;

    auto* flow = app.add_subcommand("flow", "compute and cache optical flow for a manifest");
    auto flow_flags = std::make_shared<CommonFlags>();
    flow_flags->attach(flow);
    auto flow_color = std::make_shared<bool>(false);
    flow->add_flag("--emit-color", *flow_color, "also write colorized flow images");
    flow->callback([&action, flow_flags, flow_color] {
        action = [flow_flags, flow_color] {
            return cmd_flow(flow_flags->resolve(), *flow_color);
        };
    });

    auto* fuse = app.add_subcommand("fuse", "write fused composites as images (debug)");
    auto fuse_flags = std::make_shared<CommonFlags>();
    fuse_flags->attach(fuse);
    auto fuse_clip = std::make_shared<std::string>();
    fuse->add_option("--clip", *fuse_clip, "restrict to one clip id");
    fuse->callback([&action, fuse_flags, fuse_clip] {
        action = [fuse_flags, fuse_clip] { return cmd_fuse(fuse_flags->resolve(), *fuse_clip); };
    });

    auto* train_cmd = app.add_subcommand("train", "train a model on the manifest's train split");
    auto train_flags = std::make_shared<CommonFlags>();
    train_flags->attach(train_cmd);
    train_cmd->callback([&action, train_flags] {
        action = [train_flags] { return cmd_train(train_flags->resolve()); };
    });

    auto* eval_cmd = app.add_subcommand("eval", "evaluate saved weights on a split");
    auto eval_flags = std::make_shared<CommonFlags>();
    eval_flags->attach(eval_cmd);
    auto eval_split = std::make_shared<std::string>("test");
    auto eval_sweep = std::make_shared<bool>(false);
    eval_cmd->add_option("--split", *eval_split, "train|val|test (default test)");
    eval_cmd->add_flag("--sweep", *eval_sweep, "also sweep thresholds 0.05..0.95");
    eval_cmd->callback([&action, eval_flags, eval_split, eval_sweep] {
        action = [eval_flags, eval_split, eval_sweep] {
            return cmd_eval(eval_flags->resolve(), *eval_split, *eval_sweep);
        };
    });

    auto* predict = app.add_subcommand("predict", "per-frame predictions for one clip directory");
    auto predict_flags = std::make_shared<CommonFlags>();
    predict_flags->attach(predict);
    auto predict_dir = std::make_shared<std::string>();
    predict->add_option("clip_dir", *predict_dir, "directory of numbered frames")->required();
    predict->callback([&action, predict_flags, predict_dir] {
        action = [predict_flags, predict_dir] {
            return cmd_predict(predict_flags->resolve(), *predict_dir);
        };
    });

    auto* summary = app.add_subcommand("summary", "print the layer table");
    auto summary_flags = std::make_shared<CommonFlags>();
    summary_flags->attach(summary);
    auto summary_golden = std::make_shared<bool>(false);
    summary->add_flag("--golden", *summary_golden,
                      "check the table against the published layer structure");
    summary->callback([&action, summary_flags, summary_golden] {
        action = [summary_flags, summary_golden] {
            return cmd_summary(summary_flags->resolve(), *summary_golden);
        };
    });

    auto* selftest = app.add_subcommand("selftest", "run the full property suite");
    auto selftest_flags = std::make_shared<CommonFlags>();
    selftest_flags->attach(selftest);
    auto selftest_seeds = std::make_shared<int>(20);
    auto selftest_perturb = std::make_shared<double>(0.0);
    selftest->add_option("--seeds", *selftest_seeds, "random seeds per gradient check");
    selftest->add_option("--perturb-conv-grad", *selftest_perturb,
                         "test hook: offset analytic conv gradients")
        ->group("");
    selftest->callback([&action, selftest_flags, selftest_seeds, selftest_perturb] {
        action = [selftest_flags, selftest_seeds, selftest_perturb] {
            return cmd_selftest(selftest_flags->resolve(), *selftest_seeds, *selftest_perturb);
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        return action();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const CheckError& e) {
        std::fprintf(stderr, "check failure: %s\n", e.what());
        return kExitCheck;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUnexpected;
    }
}
