#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cyclingnet/autograd.hpp"
#include "cyclingnet/errors.hpp"
#include "cyclingnet/tensor.hpp"

namespace cyclingnet {

enum class Variant { cnn, cnn_lstm, sa_cnn_lstm, sa_bi_cnn_lstm };
enum class AttentionMode { paper_eq, table_count };
enum class LstmCandidate { tanh, sigmoid };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::cnn: return "cnn";
        case Variant::cnn_lstm: return "cnn_lstm";
        case Variant::sa_cnn_lstm: return "sa_cnn_lstm";
        default: return "sa_bi_cnn_lstm";
    }
}

inline Variant parse_variant(const std::string& s) {
    if (s == "cnn") return Variant::cnn;
    if (s == "cnn_lstm") return Variant::cnn_lstm;
    if (s == "sa_cnn_lstm") return Variant::sa_cnn_lstm;
    if (s == "sa_bi_cnn_lstm") return Variant::sa_bi_cnn_lstm;
    throw ConfigError("unknown variant '" + s + "'");
}

inline const char* attention_mode_name(AttentionMode m) {
    return m == AttentionMode::paper_eq ? "paper_eq" : "table_count";
}

inline AttentionMode parse_attention_mode(const std::string& s) {
    if (s == "paper_eq") return AttentionMode::paper_eq;
    if (s == "table_count") return AttentionMode::table_count;
    throw ConfigError("unknown attention mode '" + s + "'");
}

inline const char* candidate_name(LstmCandidate c) {
    return c == LstmCandidate::tanh ? "tanh" : "sigmoid";
}

inline LstmCandidate parse_candidate(const std::string& s) {
    if (s == "tanh") return LstmCandidate::tanh;
    if (s == "sigmoid") return LstmCandidate::sigmoid;
    throw ConfigError("unknown lstm candidate '" + s + "'");
}

struct ConvSpec {
    std::size_t filters, kh, kw, stride;
};

/// A conv block: convolutions, then optionally max-pool and batch-norm.
struct BlockSpec {
    std::vector<ConvSpec> convs;
    bool pool = true;
    bool norm = true;
};

struct ModelConfig {
    Variant variant = Variant::sa_bi_cnn_lstm;
    AttentionMode attention_mode = AttentionMode::table_count;
    LstmCandidate lstm_candidate = LstmCandidate::tanh;
    std::size_t lstm_hidden = 512;     // per direction
    std::size_t attention_units = 512; // paper_eq mode only
    std::size_t dense1 = 256;
    std::size_t dense2 = 64;
    double dropout = 0.3;
    std::uint64_t seed = 42;
    std::size_t input_h = 240, input_w = 320, input_c = 3;
    std::vector<BlockSpec> blocks = cyclingnet_blocks();
    double bn_momentum = 0.99;
    double bn_epsilon = 0.001;

    /// The published conv stack. Strides are 2,2,2,1,1 (the printed output
    /// shapes force stride 1 for the last two convolutions).
    static std::vector<BlockSpec> cyclingnet_blocks() {
        return {
            BlockSpec{{{24, 5, 5, 2}, {36, 5, 5, 2}}, true, true},
            BlockSpec{{{48, 5, 5, 2}, {64, 3, 3, 1}}, true, true},
            BlockSpec{{{128, 3, 3, 1}}, true, true},
        };
    }

    /// Desk-scale configuration with the same layer types on a 24x32 input;
    /// used by the end-to-end gradient check and the synthetic training runs.
    static ModelConfig shrunken(Variant v = Variant::sa_bi_cnn_lstm) {
        ModelConfig c;
        c.variant = v;
        c.input_h = 24;
        c.input_w = 32;
        c.lstm_hidden = 24;
        c.attention_units = 16;
        c.dense1 = 16;
        c.dense2 = 8;
        c.blocks = {
            BlockSpec{{{8, 3, 3, 2}, {12, 3, 3, 1}}, true, true},
            BlockSpec{{{16, 3, 3, 2}}, false, true},
        };
        return c;
    }
};

// ----- recurrent and attention building blocks -----

template <typename T>
struct LstmGateVars {
    typename Tape<T>::Var u, w, b;  // input weights, recurrent weights, bias
};

template <typename T>
struct LstmCellVars {
    LstmGateVars<T> forget, input, cell, output;
};

/// One LSTM step. Gates are sigmoid-activated affine maps of (x_t, h_prev);
/// the state update is s_t = f * s_prev + g * candidate(affine) and the
/// output h_t = tanh(s_t) * q. The candidate activation is tanh by default,
/// with a sigmoid mode preserving the literal update rule.
template <typename T>
std::pair<typename Tape<T>::Var, typename Tape<T>::Var> lstm_cell(
    Tape<T>& tape, typename Tape<T>::Var x, typename Tape<T>::Var h_prev,
    typename Tape<T>::Var s_prev, const LstmCellVars<T>& p, LstmCandidate candidate) {
    auto affine = [&](const LstmGateVars<T>& g) {
        return tape.add_bias(tape.add(tape.matmul(x, g.u), tape.matmul(h_prev, g.w)), g.b);
    };
    const auto f = tape.sigmoid(affine(p.forget));
    const auto g = tape.sigmoid(affine(p.input));
    const auto q = tape.sigmoid(affine(p.output));
    const auto cand_pre = affine(p.cell);
    const auto cand =
        candidate == LstmCandidate::tanh ? tape.tanh_act(cand_pre) : tape.sigmoid(cand_pre);
    const auto s = tape.add(tape.mul(f, s_prev), tape.mul(g, cand));
    const auto h = tape.mul(tape.tanh_act(s), q);
    return {h, s};
}

/// Runs one direction over a (B, T, F) sequence from zero initial states;
/// returns per-step hidden states (B, T, H). `reverse` scans t = T-1..0 but
/// still writes step t of the output.
template <typename T>
typename Tape<T>::Var lstm_sequence(Tape<T>& tape, typename Tape<T>::Var seq,
                                    const LstmCellVars<T>& p, std::size_t hidden,
                                    LstmCandidate candidate, bool reverse = false) {
    const Shape& s = tape.shape(seq);
    if (s.size() != 3) throw std::invalid_argument("lstm_sequence: expected (B, T, F) input");
    const std::size_t B = s[0], steps = s[1];
    auto h = tape.constant(Tensor<T>(Shape{B, hidden}));
    auto cell = tape.constant(Tensor<T>(Shape{B, hidden}));
    std::vector<typename Tape<T>::Var> outputs(steps);
    for (std::size_t i = 0; i < steps; ++i) {
        const std::size_t t = reverse ? steps - 1 - i : i;
        auto [h_t, s_t] = lstm_cell(tape, tape.slice_step(seq, t), h, cell, p, candidate);
        h = h_t;
        cell = s_t;
        outputs[t] = h_t;
    }
    return tape.stack_steps(outputs);
}

/// Bidirectional pass: per-step concatenation of the forward and backward
/// hidden states, (B, T, F) -> (B, T, 2H).
template <typename T>
typename Tape<T>::Var bilstm(Tape<T>& tape, typename Tape<T>::Var seq,
                             const LstmCellVars<T>& fwd, const LstmCellVars<T>& bwd,
                             std::size_t hidden, LstmCandidate candidate) {
    const auto f = lstm_sequence(tape, seq, fwd, hidden, candidate, false);
    const auto b = lstm_sequence(tape, seq, bwd, hidden, candidate, true);
    return tape.concat_last(f, b);
}

template <typename T>
struct AttentionTableVars {
    typename Tape<T>::Var score_w;  // (d, d)
    typename Tape<T>::Var score_b;  // scalar
};

template <typename T>
struct AttentionPaperVars {
    typename Tape<T>::Var w_t, w_x;  // (d, u)
    typename Tape<T>::Var b_h;       // (u)
    typename Tape<T>::Var w_a;       // (u, 1)
    typename Tape<T>::Var b_a;       // scalar
};

/// Bilinear scores e[t,t'] = x_t . M x_t' + b, softmax over t', contexts
/// l_t = sum_t' a[t,t'] x_t'. Input and output are (B, T, d).
template <typename T>
typename Tape<T>::Var self_attention_table(Tape<T>& tape, typename Tape<T>::Var seq,
                                           const AttentionTableVars<T>& p) {
    const auto projected = tape.matmul(seq, p.score_w);           // (B, T, d)
    auto scores = tape.bmm_nt(projected, seq);                    // (B, T, T)
    scores = tape.add_scalar_param(scores, p.score_b);
    const auto attn = tape.softmax_last(scores);
    return tape.bmm_nn(attn, seq);
}

/// Additive form: h[t,t'] = tanh(x_t W_t + x_t' W_x + b_h), squashed through
/// a sigmoid-activated linear probe, then softmax over t' and the same
/// context sum as the bilinear mode.
template <typename T>
typename Tape<T>::Var self_attention_paper(Tape<T>& tape, typename Tape<T>::Var seq,
                                           const AttentionPaperVars<T>& p) {
    const Shape& s = tape.shape(seq);
    const std::size_t B = s[0], steps = s[1];
    const auto pt = tape.matmul(seq, p.w_t);                      // (B, T, u)
    const auto px = tape.matmul(seq, p.w_x);                      // (B, T, u)
    auto hidden = tape.pairwise_sum(pt, px);                      // (B, T, T, u)
    hidden = tape.tanh_act(tape.add_bias(hidden, p.b_h));
    auto scores = tape.matmul(hidden, p.w_a);                     // (B, T, T, 1)
    scores = tape.reshape(scores, Shape{B, steps, steps});
    scores = tape.sigmoid(tape.add_scalar_param(scores, p.b_a));
    const auto attn = tape.softmax_last(scores);
    return tape.bmm_nn(attn, seq);
}

// ----- layers -----

/// Layers register their Parameters at construction; they are built in place
/// behind unique_ptr and never relocated, so the registered addresses stay
/// valid for the model's lifetime.
template <typename T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual typename Tape<T>::Var apply(Tape<T>& tape, typename Tape<T>::Var x, Mode mode,
                                        Rng* rng) = 0;

    const std::vector<Parameter<T>*>& params() const { return params_; }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto* p : params_) n += p->value.size();
        return n;
    }
    std::size_t trainable_param_count() const {
        std::size_t n = 0;
        for (const auto* p : params_)
            if (p->trainable) n += p->value.size();
        return n;
    }

    std::string name;
    Shape out_shape;  // per sample, no batch axis

protected:
    std::vector<Parameter<T>*> params_;
};

namespace detail {

template <typename T>
Parameter<T> make_weight(const std::string& name, Shape shape, std::size_t fan_in, Rng& seeds) {
    return Parameter<T>(name, he_normal_init<T>(std::move(shape), fan_in, seeds.next()));
}

template <typename T>
Parameter<T> make_const(const std::string& name, Shape shape, T fill, bool trainable = true) {
    return Parameter<T>(name, Tensor<T>::full(std::move(shape), fill), trainable);
}

}  // namespace detail

template <typename T>
class Conv2DLayer final : public Layer<T> {
public:
    Conv2DLayer(const std::string& nm, std::size_t in_c, const ConvSpec& spec, bool relu,
                Rng& seeds)
        : spec_(spec), relu_(relu),
          kernel_(detail::make_weight<T>(nm + "/kernel", Shape{spec.kh, spec.kw, in_c, spec.filters},
                                         spec.kh * spec.kw * in_c, seeds)),
          bias_(detail::make_const<T>(nm + "/bias", Shape{spec.filters}, T(0))) {
        this->name = nm;
        this->params_ = {&kernel_, &bias_};
    }

    typename Tape<T>::Var apply(Tape<T>& tape, typename Tape<T>::Var x, Mode, Rng*) override {
        auto y = tape.conv2d(x, tape.leaf(kernel_), tape.leaf(bias_), spec_.stride);
        return relu_ ? tape.relu(y) : y;
    }

private:
    ConvSpec spec_;
    bool relu_;
    Parameter<T> kernel_, bias_;
};

template <typename T>
class MaxPoolLayer final : public Layer<T> {
public:
    explicit MaxPoolLayer(const std::string& nm, std::size_t pool = 2) : pool_(pool) {
        this->name = nm;
    }
    typename Tape<T>::Var apply(Tape<T>& tape, typename Tape<T>::Var x, Mode, Rng*) override {
        return tape.max_pool2d(x, pool_);
    }

private:
    std::size_t pool_;
};

template <typename T>
class BatchNormLayer final : public Layer<T> {
public:
    BatchNormLayer(const std::string& nm, std::size_t channels, double momentum, double epsilon)
        : momentum_(static_cast<T>(momentum)), epsilon_(static_cast<T>(epsilon)),
          gamma_(detail::make_const<T>(nm + "/gamma", Shape{channels}, T(1))),
          beta_(detail::make_const<T>(nm + "/beta", Shape{channels}, T(0))),
          moving_mean_(detail::make_const<T>(nm + "/moving_mean", Shape{channels}, T(0), false)),
          moving_var_(detail::make_const<T>(nm + "/moving_variance", Shape{channels}, T(1), false)) {
        this->name = nm;
        this->params_ = {&gamma_, &beta_, &moving_mean_, &moving_var_};
    }

    typename Tape<T>::Var apply(Tape<T>& tape, typename Tape<T>::Var x, Mode mode, Rng*) override {
        return tape.batch_norm(x, tape.leaf(gamma_), tape.leaf(beta_), moving_mean_.value,
                               moving_var_.value, mode, momentum_, epsilon_);
    }

private:
    T momentum_, epsilon_;
    Parameter<T> gamma_, beta_, moving_mean_, moving_var_;
};

template <typename T>
class ReshapeLayer final : public Layer<T> {
public:
    ReshapeLayer(const std::string& nm, Shape per_sample) : target_(std::move(per_sample)) {
        this->name = nm;
    }
    typename Tape<T>::Var apply(Tape<T>& tape, typename Tape<T>::Var x, Mode, Rng*) override {
        Shape s{tape.shape(x)[0]};
        s.insert(s.end(), target_.begin(), target_.end());
        return tape.reshape(x, std::move(s));
    }

private:
    Shape target_;
};

template <typename T>
class FlattenLayer final : public Layer<T> {
public:
    explicit FlattenLayer(const std::string& nm) { this->name = nm; }
    typename Tape<T>::Var apply(Tape<T>& tape, typename Tape<T>::Var x, Mode, Rng*) override {
        const Shape& s = tape.shape(x);
        std::size_t n = 1;
        for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
        return tape.reshape(x, Shape{s[0], n});
    }
};

template <typename T>
class DropoutLayer final : public Layer<T> {
public:
    DropoutLayer(const std::string& nm, double rate) : rate_(rate) { this->name = nm; }
    typename Tape<T>::Var apply(Tape<T>& tape, typename Tape<T>::Var x, Mode mode,
                                Rng* rng) override {
        if (mode == Mode::train && rate_ > 0.0) {
            if (!rng) throw std::logic_error("dropout in train mode requires an rng");
            return tape.dropout(x, rate_, mode, *rng);
        }
        Rng unused(0);
        return tape.dropout(x, rate_, Mode::infer, unused);
    }

private:
    double rate_;
};

enum class Activation { none, relu, sigmoid };

template <typename T>
class DenseLayer final : public Layer<T> {
public:
    DenseLayer(const std::string& nm, std::size_t in, std::size_t out, Activation act, Rng& seeds)
        : act_(act),
          weight_(detail::make_weight<T>(nm + "/kernel", Shape{in, out}, in, seeds)),
          bias_(detail::make_const<T>(nm + "/bias", Shape{out}, T(0))) {
        this->name = nm;
        this->params_ = {&weight_, &bias_};
    }

    typename Tape<T>::Var apply(Tape<T>& tape, typename Tape<T>::Var x, Mode, Rng*) override {
        auto y = tape.add_bias(tape.matmul(x, tape.leaf(weight_)), tape.leaf(bias_));
        switch (act_) {
            case Activation::relu: return tape.relu(y);
            case Activation::sigmoid: return tape.sigmoid(y);
            default: return y;
        }
    }

private:
    Activation act_;
    Parameter<T> weight_, bias_;
};

/// One direction's parameter set: four gates of (U, W, b). The forget-gate
/// bias starts at 1 (standard memory stabilizer); everything else follows
/// the global He-normal scheme.
template <typename T>
struct LstmDirection {
    LstmDirection(const std::string& prefix, std::size_t input_dim, std::size_t hidden, Rng& seeds) {
        const char* gates[4] = {"f", "g", "c", "q"};
        for (int i = 0; i < 4; ++i) {
            u[i] = detail::make_weight<T>(prefix + "/U_" + gates[i], Shape{input_dim, hidden},
                                          input_dim, seeds);
            w[i] = detail::make_weight<T>(prefix + "/W_" + gates[i], Shape{hidden, hidden}, hidden,
                                          seeds);
            b[i] = detail::make_const<T>(prefix + "/b_" + gates[i], Shape{hidden},
                                         i == 0 ? T(1) : T(0));
        }
    }

    LstmCellVars<T> vars(Tape<T>& tape) {
        auto gate = [&](int i) {
            return LstmGateVars<T>{tape.leaf(u[i]), tape.leaf(w[i]), tape.leaf(b[i])};
        };
        return LstmCellVars<T>{gate(0), gate(1), gate(2), gate(3)};
    }

    void collect(std::vector<Parameter<T>*>& out) {
        for (int i = 0; i < 4; ++i) {
            out.push_back(&u[i]);
            out.push_back(&w[i]);
            out.push_back(&b[i]);
        }
    }

    Parameter<T> u[4], w[4], b[4];
};

template <typename T>
class LstmLayer final : public Layer<T> {
public:
    LstmLayer(const std::string& nm, std::size_t input_dim, std::size_t hidden, bool bidirectional,
              LstmCandidate candidate, Rng& seeds)
        : hidden_(hidden), candidate_(candidate) {
        this->name = nm;
        fwd_ = std::make_unique<LstmDirection<T>>(
            bidirectional ? nm + "/forward" : nm, input_dim, hidden, seeds);
        if (bidirectional)
            bwd_ = std::make_unique<LstmDirection<T>>(nm + "/backward", input_dim, hidden, seeds);
        fwd_->collect(this->params_);
        if (bwd_) bwd_->collect(this->params_);
    }

    typename Tape<T>::Var apply(Tape<T>& tape, typename Tape<T>::Var x, Mode, Rng*) override {
        if (bwd_) return bilstm(tape, x, fwd_->vars(tape), bwd_->vars(tape), hidden_, candidate_);
        return lstm_sequence(tape, x, fwd_->vars(tape), hidden_, candidate_, false);
    }

private:
    std::size_t hidden_;
    LstmCandidate candidate_;
    std::unique_ptr<LstmDirection<T>> fwd_, bwd_;
};

template <typename T>
class AttentionLayer final : public Layer<T> {
public:
    AttentionLayer(const std::string& nm, std::size_t d, std::size_t units, AttentionMode mode,
                   Rng& seeds)
        : mode_(mode) {
        this->name = nm;
        if (mode == AttentionMode::table_count) {
            score_w_ = detail::make_weight<T>(nm + "/score_w", Shape{d, d}, d, seeds);
            score_b_ = detail::make_const<T>(nm + "/score_b", Shape{1}, T(0));
            this->params_ = {&score_w_, &score_b_};
        } else {
            w_t_ = detail::make_weight<T>(nm + "/W_t", Shape{d, units}, d, seeds);
            w_x_ = detail::make_weight<T>(nm + "/W_x", Shape{d, units}, d, seeds);
            b_h_ = detail::make_const<T>(nm + "/b_h", Shape{units}, T(0));
            w_a_ = detail::make_weight<T>(nm + "/W_a", Shape{units, 1}, units, seeds);
            b_a_ = detail::make_const<T>(nm + "/b_a", Shape{1}, T(0));
            this->params_ = {&w_t_, &w_x_, &b_h_, &w_a_, &b_a_};
        }
    }

    typename Tape<T>::Var apply(Tape<T>& tape, typename Tape<T>::Var x, Mode, Rng*) override {
        if (mode_ == AttentionMode::table_count)
            return self_attention_table(
                tape, x, AttentionTableVars<T>{tape.leaf(score_w_), tape.leaf(score_b_)});
        return self_attention_paper(
            tape, x,
            AttentionPaperVars<T>{tape.leaf(w_t_), tape.leaf(w_x_), tape.leaf(b_h_),
                                  tape.leaf(w_a_), tape.leaf(b_a_)});
    }

private:
    AttentionMode mode_;
    Parameter<T> score_w_, score_b_, w_t_, w_x_, b_h_, w_a_, b_a_;
};

// ----- model -----

struct SummaryRow {
    std::string name;
    Shape shape;  // per sample
    std::size_t params = 0;
};

template <typename T>
class Model {
public:
    ModelConfig config;
    std::vector<std::unique_ptr<Layer<T>>> layers;

    Shape input_shape() const { return {config.input_h, config.input_w, config.input_c}; }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& l : layers)
            out.insert(out.end(), l->params().begin(), l->params().end());
        return out;
    }

    std::size_t trainable_param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l->trainable_param_count();
        return n;
    }
    std::size_t non_trainable_param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l->param_count() - l->trainable_param_count();
        return n;
    }

    /// Forward over a (B, H, W, C) batch; returns a (B, 1) probability Var.
    /// `rng` drives dropout masks and is required in train mode. `trace`,
    /// when given, receives each layer's batched output shape.
    typename Tape<T>::Var forward(Tape<T>& tape, typename Tape<T>::Var x, Mode mode, Rng* rng,
                                  std::vector<std::pair<std::string, Shape>>* trace = nullptr) {
        const Shape& s = tape.shape(x);
        if (s.size() != 4 || s[1] != config.input_h || s[2] != config.input_w ||
            s[3] != config.input_c)
            throw std::invalid_argument("forward: expected (B, " + std::to_string(config.input_h) +
                                        ", " + std::to_string(config.input_w) + ", " +
                                        std::to_string(config.input_c) + ") input, got " +
                                        shape_str(s));
        auto v = x;
        for (auto& l : layers) {
            v = l->apply(tape, v, mode, rng);
            if (trace) trace->emplace_back(l->name, tape.shape(v));
        }
        return v;
    }

    /// Convenience inference: builds a private tape and returns per-sample
    /// probabilities.
    std::vector<T> predict(const Tensor<T>& batch, Mode mode = Mode::infer, Rng* rng = nullptr) {
        Tape<T> tape;
        const auto out = forward(tape, tape.constant(batch), mode, rng);
        return tape.value(out).values();
    }

    std::vector<SummaryRow> summary_rows() const {
        std::vector<SummaryRow> rows;
        rows.push_back({"input", input_shape(), 0});
        for (const auto& l : layers) rows.push_back({l->name, l->out_shape, l->param_count()});
        return rows;
    }

    /// Plain-text summary, one tab-separated row per layer plus totals.
    std::string summary_text() const {
        std::ostringstream os;
        os << "layer\toutput_shape\tparams\n";
        for (const auto& row : summary_rows()) {
            os << row.name << "\t(None";
            for (std::size_t e : row.shape) os << ", " << e;
            os << ")\t" << row.params << "\n";
        }
        os << "total_trainable\t\t" << trainable_param_count() << "\n";
        os << "total_non_trainable\t\t" << non_trainable_param_count() << "\n";
        return os.str();
    }
};

template <typename T = float>
Model<T> build_model(const ModelConfig& config) {
    if (config.lstm_hidden == 0 || config.dense1 == 0 || config.dense2 == 0)
        throw ConfigError("build_model: layer widths must be positive");
    if (config.blocks.empty()) throw ConfigError("build_model: empty conv stack");

    Model<T> model;
    model.config = config;
    Rng seeds(config.seed);

    std::size_t h = config.input_h, w = config.input_w, c = config.input_c;
    std::size_t conv_i = 0, pool_i = 0, norm_i = 0, drop_i = 0;
    auto add = [&](std::unique_ptr<Layer<T>> layer, Shape out) {
        layer->out_shape = std::move(out);
        model.layers.push_back(std::move(layer));
    };

    for (const BlockSpec& block : config.blocks) {
        for (const ConvSpec& spec : block.convs) {
            if (spec.kh > h || spec.kw > w)
                throw ConfigError("build_model: conv kernel exceeds input extents");
            const std::string nm = "conv2d_" + std::to_string(++conv_i);
            add(std::make_unique<Conv2DLayer<T>>(nm, c, spec, true, seeds),
                Shape{(h - spec.kh) / spec.stride + 1, (w - spec.kw) / spec.stride + 1,
                      spec.filters});
            h = (h - spec.kh) / spec.stride + 1;
            w = (w - spec.kw) / spec.stride + 1;
            c = spec.filters;
        }
        if (block.pool) {
            if (h < 2 || w < 2) throw ConfigError("build_model: extents too small to pool");
            const std::string nm = "max_pooling2d_" + std::to_string(++pool_i);
            add(std::make_unique<MaxPoolLayer<T>>(nm, 2), Shape{h / 2, w / 2, c});
            h /= 2;
            w /= 2;
        }
        if (block.norm) {
            const std::string nm = "batch_normalization_" + std::to_string(++norm_i);
            add(std::make_unique<BatchNormLayer<T>>(nm, c, config.bn_momentum, config.bn_epsilon),
                Shape{h, w, c});
        }
    }

    std::size_t flat_in = 0;
    if (config.variant == Variant::cnn) {
        add(std::make_unique<FlattenLayer<T>>("flatten"), Shape{h * w * c});
        flat_in = h * w * c;
    } else {
        const std::size_t steps = h * w;
        add(std::make_unique<ReshapeLayer<T>>("reshape", Shape{steps, c}), Shape{steps, c});

        const bool bi = config.variant == Variant::sa_bi_cnn_lstm;
        const std::size_t seq_width = bi ? 2 * config.lstm_hidden : config.lstm_hidden;
        const std::string lstm_name = bi ? "bidirectional_1" : "lstm_1";
        add(std::make_unique<LstmLayer<T>>(lstm_name, c, config.lstm_hidden, bi,
                                           config.lstm_candidate, seeds),
            Shape{steps, seq_width});

        if (config.variant == Variant::sa_cnn_lstm || config.variant == Variant::sa_bi_cnn_lstm)
            add(std::make_unique<AttentionLayer<T>>("attention", seq_width,
                                                    config.attention_units,
                                                    config.attention_mode, seeds),
                Shape{steps, seq_width});

        add(std::make_unique<DropoutLayer<T>>("dropout_" + std::to_string(++drop_i),
                                              config.dropout),
            Shape{steps, seq_width});
        add(std::make_unique<FlattenLayer<T>>("flatten"), Shape{steps * seq_width});
        flat_in = steps * seq_width;
    }

    add(std::make_unique<DenseLayer<T>>("dense_1", flat_in, config.dense1, Activation::relu, seeds),
        Shape{config.dense1});
    add(std::make_unique<DropoutLayer<T>>("dropout_" + std::to_string(++drop_i), config.dropout),
        Shape{config.dense1});
    add(std::make_unique<DenseLayer<T>>("dense_2", config.dense1, config.dense2, Activation::relu,
                                        seeds),
        Shape{config.dense2});
    add(std::make_unique<DropoutLayer<T>>("dropout_" + std::to_string(++drop_i), config.dropout),
        Shape{config.dense2});
    add(std::make_unique<DenseLayer<T>>("dense_3", config.dense2, 1, Activation::sigmoid, seeds),
        Shape{1});
    return model;
}

// ----- golden reference (published layer table) -----

/// Expected (shape, parameter count) per layer for the default
/// configuration, keyed by layer name, plus the published totals.
inline const std::vector<SummaryRow>& golden_table() {
    static const std::vector<SummaryRow> rows = {
        {"input", {240, 320, 3}, 0},
        {"conv2d_1", {118, 158, 24}, 1824},
        {"conv2d_2", {57, 77, 36}, 21636},
        {"max_pooling2d_1", {28, 38, 36}, 0},
        {"batch_normalization_1", {28, 38, 36}, 144},
        {"conv2d_3", {12, 17, 48}, 43248},
        {"conv2d_4", {10, 15, 64}, 27712},
        {"max_pooling2d_2", {5, 7, 64}, 0},
        {"batch_normalization_2", {5, 7, 64}, 256},
        {"conv2d_5", {3, 5, 128}, 73856},
        {"max_pooling2d_3", {1, 2, 128}, 0},
        {"batch_normalization_3", {1, 2, 128}, 512},
        {"reshape", {2, 128}, 0},
        {"bidirectional_1", {2, 1024}, 2625536},
        {"attention", {2, 1024}, 1048577},
        {"dropout_1", {2, 1024}, 0},
        {"flatten", {2048}, 0},
        {"dense_1", {256}, 524544},
        {"dropout_2", {256}, 0},
        {"dense_2", {64}, 16448},
        {"dropout_3", {64}, 0},
        {"dense_3", {1}, 65},
    };
    return rows;
}

inline constexpr std::size_t kGoldenTrainableParams = 4383902;
inline constexpr std::size_t kGoldenNonTrainableParams = 456;

/// Compares a model against the golden table by layer name. Returns one
/// line per mismatch; empty means an exact reproduction.
template <typename T>
std::vector<std::string> golden_diff(const Model<T>& model) {
    std::vector<std::string> diffs;
    std::map<std::string, SummaryRow> actual;
    for (const SummaryRow& row : model.summary_rows()) actual[row.name] = row;
    for (const SummaryRow& want : golden_table()) {
        auto it = actual.find(want.name);
        if (it == actual.end()) {
            diffs.push_back(want.name + ": missing (expected shape " + shape_str(want.shape) +
                            ", " + std::to_string(want.params) + " params)");
            continue;
        }
        if (it->second.shape != want.shape)
            diffs.push_back(want.name + ": shape " + shape_str(it->second.shape) + " != expected " +
                            shape_str(want.shape));
        if (it->second.params != want.params)
            diffs.push_back(want.name + ": params " + std::to_string(it->second.params) +
                            " != expected " + std::to_string(want.params));
        actual.erase(it);
    }
    for (const auto& [name, row] : actual)
        diffs.push_back(name + ": unexpected layer (shape " + shape_str(row.shape) + ", " +
                        std::to_string(row.params) + " params)");
    if (model.trainable_param_count() != kGoldenTrainableParams)
        diffs.push_back("total trainable " + std::to_string(model.trainable_param_count()) +
                        " != expected " + std::to_string(kGoldenTrainableParams));
    if (model.non_trainable_param_count() != kGoldenNonTrainableParams)
        diffs.push_back("total non-trainable " + std::to_string(model.non_trainable_param_count()) +
                        " != expected " + std::to_string(kGoldenNonTrainableParams));
    return diffs;
}

// ----- weight store -----
// Format: magic "CYNW", u16 version, u32 entry count, then per entry:
// u16 name length, name bytes, u8 rank, u32 dims, raw little-endian float32.

inline constexpr std::uint16_t kWeightFormatVersion = 1;
static_assert(std::endian::native == std::endian::little,
              "weight/flow file writers assume a little-endian host");

template <typename T>
void save_weights(Model<T>& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write weight file: " + path.string());
    const auto params = model.parameters();
    out.write("CYNW", 4);
    const std::uint16_t version = kWeightFormatVersion;
    out.write(reinterpret_cast<const char*>(&version), 2);
    const std::uint32_t count = static_cast<std::uint32_t>(params.size());
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (const Parameter<T>* p : params) {
        const std::uint16_t name_len = static_cast<std::uint16_t>(p->name.size());
        out.write(reinterpret_cast<const char*>(&name_len), 2);
        out.write(p->name.data(), name_len);
        const std::uint8_t rank = static_cast<std::uint8_t>(p->value.rank());
        out.write(reinterpret_cast<const char*>(&rank), 1);
        for (std::size_t d : p->value.shape()) {
            const std::uint32_t dim = static_cast<std::uint32_t>(d);
            out.write(reinterpret_cast<const char*>(&dim), 4);
        }
        if constexpr (std::is_same_v<T, float>) {
            out.write(reinterpret_cast<const char*>(p->value.data()),
                      static_cast<std::streamsize>(p->value.size() * 4));
        } else {
            std::vector<float> tmp(p->value.size());
            for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = static_cast<float>(p->value[i]);
            out.write(reinterpret_cast<const char*>(tmp.data()),
                      static_cast<std::streamsize>(tmp.size() * 4));
        }
    }
    if (!out) throw DataError("short write on weight file: " + path.string());
}

/// Loads a weight file into a model of matching architecture. The whole file
/// is staged and validated first, so a rejected load leaves the model
/// untouched.
template <typename T>
void load_weights(Model<T>& model, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open weight file: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "CYNW", 4) != 0)
        throw DataError("weight file format error (bad magic): " + path.string());
    std::uint16_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 2);
    if (!in || version != kWeightFormatVersion)
        throw DataError("weight file version " + std::to_string(version) + " unsupported (want " +
                        std::to_string(kWeightFormatVersion) + "): " + path.string());
    std::uint32_t count = 0;
    in.read(reinterpret_cast<char*>(&count), 4);
    if (!in) throw DataError("truncated weight file: " + path.string());

    std::map<std::string, std::pair<Shape, std::vector<float>>> staged;
    for (std::uint32_t e = 0; e < count; ++e) {
        std::uint16_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), 2);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        std::uint8_t rank = 0;
        in.read(reinterpret_cast<char*>(&rank), 1);
        if (!in) throw DataError("truncated weight file: " + path.string());
        Shape shape(rank);
        for (std::uint8_t d = 0; d < rank; ++d) {
            std::uint32_t dim = 0;
            in.read(reinterpret_cast<char*>(&dim), 4);
            shape[d] = dim;
        }
        if (!in) throw DataError("truncated weight file: " + path.string());
        std::vector<float> data(numel(shape));
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * 4));
        if (in.gcount() != static_cast<std::streamsize>(data.size() * 4))
            throw DataError("truncated weight file: " + path.string());
        if (!staged.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)))
                 .second)
            throw DataError("duplicate entry in weight file: " + path.string());
    }

    auto params = model.parameters();
    if (params.size() != staged.size())
        throw DataError("weight file has " + std::to_string(staged.size()) + " entries, model has " +
                        std::to_string(params.size()));
    for (Parameter<T>* p : params) {
        auto it = staged.find(p->name);
        if (it == staged.end())
            throw DataError("weight file missing entry '" + p->name + "'");
        if (it->second.first != p->value.shape())
            throw DataError("shape mismatch for '" + p->name + "': file " +
                            shape_str(it->second.first) + ", model " + shape_str(p->value.shape()));
    }
    for (Parameter<T>* p : params) {
        const auto& data = staged[p->name].second;
        for (std::size_t i = 0; i < data.size(); ++i) p->value[i] = static_cast<T>(data[i]);
    }
}

}  // namespace cyclingnet
