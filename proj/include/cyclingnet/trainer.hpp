#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "cyclingnet/errors.hpp"
#include "cyclingnet/network.hpp"
#include "cyclingnet/pipeline.hpp"
#include "cyclingnet/tensor.hpp"

namespace cyclingnet {

enum class Monitor { val, train };

inline Monitor parse_monitor(const std::string& s) {
    if (s == "val") return Monitor::val;
    if (s == "train") return Monitor::train;
    throw ConfigError("unknown monitor '" + s + "' (want val|train)");
}

struct TrainConfig {
    float learning_rate = 0.001f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon_adam = 1e-8f;
    int max_epochs = 100;
    int early_stop_patience = 20;
    std::size_t batch_size = 64;
    float threshold = 0.5f;
    std::uint64_t seed = 42;
    Monitor monitor = Monitor::val;
    float positive_weight = 1.0f;  // >1 upweights near-miss samples
    bool augment_flip = false;
    bool augment_scale = false;

    void validate() const {
        if (learning_rate < 0.0f) throw ConfigError("learning_rate must be >= 0");
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (early_stop_patience < 1 || early_stop_patience >= max_epochs)
            throw ConfigError("early_stop_patience must lie in [1, max_epochs)");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(threshold > 0.0f && threshold < 1.0f))
            throw ConfigError("threshold must lie in (0, 1)");
    }
};

/// Scalar binary cross-entropy with the 1e-7 probability clamp.
inline double binary_cross_entropy(double y, int t) {
    const double p = std::clamp(y, 1e-7, 1.0 - 1e-7);
    return -(t * std::log(p) + (1 - t) * std::log(1.0 - p));
}

// ----- metrics -----

struct ConfusionCounts {
    long long tp = 0, tn = 0, fp = 0, fn = 0;
    long long total() const { return tp + tn + fp + fn; }
    void add(int label, int predicted) {
        if (label == 1)
            predicted == 1 ? ++tp : ++fn;
        else
            predicted == 1 ? ++fp : ++tn;
    }
};

struct MetricsReport {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double false_positive_rate = 0.0;
    double f1 = 0.0;
    double loss = 0.0;
    ConfusionCounts counts;
};

inline double f1_score(double precision, double recall) {
    return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

inline MetricsReport metrics_from_counts(const ConfusionCounts& c, double loss = 0.0) {
    MetricsReport r;
    r.counts = c;
    r.loss = loss;
    const double total = static_cast<double>(c.total());
    r.accuracy = total > 0 ? (c.tp + c.tn) / total : 0.0;
    r.precision = c.tp + c.fp > 0 ? static_cast<double>(c.tp) / (c.tp + c.fp) : 0.0;
    r.recall = c.tp + c.fn > 0 ? static_cast<double>(c.tp) / (c.tp + c.fn) : 0.0;
    r.false_positive_rate = c.fp + c.tn > 0 ? static_cast<double>(c.fp) / (c.fp + c.tn) : 0.0;
    r.f1 = f1_score(r.precision, r.recall);
    return r;
}

// ----- Adam -----

/// First/second moment buffers per trainable parameter plus the shared step
/// counter for bias correction.
template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m, v;
    long long step = 0;

    void init(const std::vector<Parameter<T>*>& params) {
        m.clear();
        v.clear();
        for (const Parameter<T>* p : params) {
            m.emplace_back(p->value.shape());
            v.emplace_back(p->value.shape());
        }
        step = 0;
    }
};

/// One bias-corrected Adam update from the gradients currently stored in the
/// parameters. Non-trainable parameters are skipped.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state,
               const TrainConfig& config) {
    if (state.m.size() != params.size()) state.init(params);
    ++state.step;
    const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
    const T lr = static_cast<T>(config.learning_rate);
    const T eps = static_cast<T>(config.epsilon_adam);
    const T bc1 = T(1) - static_cast<T>(std::pow(config.beta1, state.step));
    const T bc2 = T(1) - static_cast<T>(std::pow(config.beta2, state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter<T>& p = *params[i];
        if (!p.trainable) continue;
        Tensor<T>& m = state.m[i];
        Tensor<T>& v = state.v[i];
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const T g = p.grad[j];
            m[j] = b1 * m[j] + (T(1) - b1) * g;
            v[j] = b2 * v[j] + (T(1) - b2) * g * g;
            const T mhat = m[j] / bc1;
            const T vhat = v[j] / bc2;
            p.value[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ----- early stopping -----

/// Tracks the monitored loss; stops after `patience` consecutive epochs
/// without strict improvement. The first observation always improves.
class EarlyStopper {
public:
    explicit EarlyStopper(int patience) : patience_(patience) {}

    /// Returns true when `loss` strictly improves on the best seen.
    bool observe(double loss) {
        if (loss < best_) {
            best_ = loss;
            since_improvement_ = 0;
            return true;
        }
        ++since_improvement_;
        return false;
    }

    bool should_stop() const { return since_improvement_ >= patience_; }
    double best() const { return best_; }
    int epochs_since_improvement() const { return since_improvement_; }

private:
    int patience_;
    double best_ = std::numeric_limits<double>::infinity();
    int since_improvement_ = 0;
};

// ----- training loop -----

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0, train_acc = 0.0;
    double val_loss = 0.0, val_acc = 0.0;
};

struct TrainState {
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_monitored_loss = std::numeric_limits<double>::infinity();
    bool stopped_early = false;
};

namespace detail {

struct BatchEval {
    double loss_sum = 0.0;
    long long correct = 0;
    long long count = 0;
};

template <typename T>
void eval_batch_outputs(const std::vector<T>& probs, const std::vector<float>& labels,
                        float threshold, BatchEval& acc) {
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const int pred = probs[i] >= threshold ? 1 : 0;
        const int label = labels[i] > 0.5f ? 1 : 0;
        acc.loss_sum += binary_cross_entropy(probs[i], label);
        acc.correct += pred == label;
        ++acc.count;
    }
}

}  // namespace detail

/// Mean loss and accuracy of a model over fixed-order batches (infer mode).
inline std::pair<double, double> evaluate_loss_acc(Model<float>& model,
                                                   const DatasetBuilder& data,
                                                   const std::vector<SampleRef>& refs,
                                                   std::size_t batch_size, float threshold) {
    detail::BatchEval acc;
    for (const Batch& batch : data.batches(refs, batch_size)) {
        const auto probs = model.predict(batch.x, Mode::infer);
        detail::eval_batch_outputs(probs, batch.labels, threshold, acc);
    }
    return {acc.count ? acc.loss_sum / acc.count : 0.0,
            acc.count ? static_cast<double>(acc.correct) / acc.count : 0.0};
}

/// Trains with Adam and early stopping on the monitored loss; restores the
/// best-epoch weights before returning. Seeded and single-threaded, so a
/// fixed seed reproduces the whole trajectory.
inline TrainState train(Model<float>& model, const DatasetBuilder& data,
                        const TrainConfig& config) {
    config.validate();
    const DatasetSplit& split = data.split();
    if (split.train.empty()) throw std::invalid_argument("train: empty training split");
    if (config.monitor == Monitor::val && split.val.empty())
        throw std::invalid_argument("train: empty validation split (monitor=val)");

    auto params = model.parameters();
    AdamState<float> adam;
    adam.init(params);
    Rng dropout_rng(Rng(config.seed).fork(1).next());
    Rng augment_rng(Rng(config.seed).fork(2).next());
    const AugmentConfig aug{config.augment_flip, config.augment_scale};
    const bool use_aug = config.augment_flip || config.augment_scale;

    EarlyStopper stopper(config.early_stop_patience);
    TrainState state;
    std::vector<Tensor<float>> best_values;
    auto snapshot = [&] {
        best_values.clear();
        for (const Parameter<float>* p : params) best_values.push_back(p->value);
    };

    std::vector<float> weights;
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const auto order = data.shuffled_train(config.seed + static_cast<std::uint64_t>(epoch));
        detail::BatchEval train_eval;
        for (Batch& batch : data.batches(order, config.batch_size, use_aug ? &aug : nullptr,
                                         use_aug ? &augment_rng : nullptr)) {
            for (Parameter<float>* p : params) p->zero_grad();
            Tape<float> tape;
            const auto out =
                model.forward(tape, tape.constant(std::move(batch.x)), Mode::train, &dropout_rng);
            weights.clear();
            if (config.positive_weight != 1.0f)
                for (float l : batch.labels)
                    weights.push_back(l > 0.5f ? config.positive_weight : 1.0f);
            const auto loss = tape.bce_loss(out, batch.labels, weights);
            const double loss_val = tape.value(loss)[0];
            if (!std::isfinite(loss_val))
                throw std::runtime_error("train: non-finite loss at epoch " +
                                         std::to_string(epoch));
            tape.backward(loss);
            adam_step(params, adam, config);
            detail::eval_batch_outputs(tape.value(out).values(), batch.labels, config.threshold,
                                       train_eval);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = train_eval.count ? train_eval.loss_sum / train_eval.count : 0.0;
        rec.train_acc =
            train_eval.count ? static_cast<double>(train_eval.correct) / train_eval.count : 0.0;
        if (!split.val.empty())
            std::tie(rec.val_loss, rec.val_acc) =
                evaluate_loss_acc(model, data, split.val, config.batch_size, config.threshold);
        state.history.push_back(rec);

        const double monitored =
            config.monitor == Monitor::val ? rec.val_loss : rec.train_loss;
        if (stopper.observe(monitored)) {
            state.best_epoch = epoch;
            state.best_monitored_loss = monitored;
            snapshot();
        }
        if (stopper.should_stop()) {
            state.stopped_early = true;
            break;
        }
    }

    if (!best_values.empty())
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
    return state;
}

inline void write_history_csv(const std::filesystem::path& path,
                              const std::vector<EpochRecord>& history) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write history file: " + path.string());
    out << "epoch,train_loss,train_acc,val_loss,val_acc\n";
    char line[160];
    for (const EpochRecord& r : history) {
        std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.6f,%.6f\n", r.epoch, r.train_loss,
                      r.train_acc, r.val_loss, r.val_acc);
        out << line;
    }
}

// ----- evaluation and prediction -----

struct PredictionRecord {
    std::string clip_id;
    std::size_t frame_index = 0;
    double probability = 0.0;
    int predicted = 0;
    int label = -1;  // -1 = unknown
};

struct EvalResult {
    MetricsReport metrics;
    std::vector<PredictionRecord> predictions;
};

/// Classifies every sample of a split at `threshold` (probability >= threshold
/// predicts a near miss) and fills the confusion-derived metrics.
inline EvalResult evaluate(Model<float>& model, const DatasetBuilder& data,
                           const std::vector<SampleRef>& refs, std::size_t batch_size,
                           double threshold) {
    EvalResult result;
    ConfusionCounts counts;
    double loss_sum = 0.0;
    for (const Batch& batch : data.batches(refs, batch_size)) {
        const auto probs = model.predict(batch.x, Mode::infer);
        for (std::size_t i = 0; i < probs.size(); ++i) {
            const int label = batch.labels[i] > 0.5f ? 1 : 0;
            const int pred = probs[i] >= threshold ? 1 : 0;
            counts.add(label, pred);
            loss_sum += binary_cross_entropy(probs[i], label);
            const ClipManifest& clip = data.clips()[batch.refs[i].clip];
            result.predictions.push_back(
                {clip.clip_id, batch.refs[i].frame_index, probs[i], pred, label});
        }
    }
    result.metrics =
        metrics_from_counts(counts, counts.total() ? loss_sum / counts.total() : 0.0);
    return result;
}

/// Metrics for the same prediction set at each threshold in [lo, hi].
inline std::vector<std::pair<double, MetricsReport>> threshold_sweep(
    const std::vector<PredictionRecord>& predictions, double lo = 0.05, double hi = 0.95,
    double step = 0.05) {
    std::vector<std::pair<double, MetricsReport>> out;
    for (double t = lo; t <= hi + 1e-9; t += step) {
        ConfusionCounts counts;
        for (const PredictionRecord& p : predictions)
            counts.add(p.label, p.probability >= t ? 1 : 0);
        out.emplace_back(t, metrics_from_counts(counts));
    }
    return out;
}

inline void write_predictions_csv(const std::filesystem::path& path,
                                  const std::vector<PredictionRecord>& records,
                                  bool with_labels) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write predictions file: " + path.string());
    out << (with_labels ? "clip_id,frame_index,probability,predicted,label\n"
                        : "clip_id,frame_index,probability,predicted\n");
    char line[192];
    for (const PredictionRecord& r : records) {
        if (with_labels)
            std::snprintf(line, sizeof line, "%s,%zu,%.6f,%d,%d\n", r.clip_id.c_str(),
                          r.frame_index, r.probability, r.predicted, r.label);
        else
            std::snprintf(line, sizeof line, "%s,%zu,%.6f,%d\n", r.clip_id.c_str(), r.frame_index,
                          r.probability, r.predicted);
        out << line;
    }
}

/// Per-frame inference over a bare clip directory: frames are resized, the
/// N-1 flows computed in memory, and fused composites classified from frame
/// index 4 onward. Clips shorter than 5 frames yield no records.
inline std::vector<PredictionRecord> predict_clip(Model<float>& model,
                                                  const std::filesystem::path& clip_dir,
                                                  const std::string& clip_id,
                                                  const FlowParams& params, double threshold) {
    const int H = static_cast<int>(model.config.input_h);
    const int W = static_cast<int>(model.config.input_w);
    std::vector<Image> frames;
    for (std::size_t i = 0;; ++i) {
        const auto p = find_frame(clip_dir, i);
        if (!p) break;
        frames.push_back(resize_frame(read_image(*p), H, W));
    }
    std::vector<PredictionRecord> records;
    if (frames.size() < 5) return records;

    std::vector<Image> colors;  // colors[t-1] is the flow into frame t
    for (std::size_t t = 1; t < frames.size(); ++t)
        colors.push_back(flow_to_color(estimate_flow(frames[t - 1], frames[t], params)));

    for (std::size_t t = 4; t < frames.size(); ++t) {
        const std::array<const Image*, 4> flows{&colors[t - 1], &colors[t - 2], &colors[t - 3],
                                                &colors[t - 4]};
        const Image fused = fuse_images(frames[t], flows);
        Tensor<float> batch(Shape{1, static_cast<std::size_t>(H), static_cast<std::size_t>(W), 3},
                            fused.data);
        const auto probs = model.predict(batch, Mode::infer);
        records.push_back({clip_id, t, probs[0], probs[0] >= threshold ? 1 : 0, -1});
    }
    return records;
}

/// Contiguous runs of predicted near-miss frames as [first, last] intervals.
inline std::vector<std::pair<std::size_t, std::size_t>> predicted_intervals(
    const std::vector<PredictionRecord>& records) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const PredictionRecord& r : records) {
        if (r.predicted != 1) continue;
        if (!out.empty() && out.back().second + 1 == r.frame_index)
            out.back().second = r.frame_index;
        else
            out.emplace_back(r.frame_index, r.frame_index);
    }
    return out;
}

}  // namespace cyclingnet
