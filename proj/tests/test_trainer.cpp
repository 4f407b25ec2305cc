#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cyclingnet/pipeline.hpp"
#include "cyclingnet/trainer.hpp"
#include "testutil.hpp"

using namespace cyclingnet;
namespace fs = std::filesystem;

TEST_CASE("binary cross-entropy closed forms") {
    CHECK(binary_cross_entropy(1.0 - 1e-9, 1) < 1e-6);
    CHECK(binary_cross_entropy(0.5, 1) == Catch::Approx(std::log(2.0)).margin(1e-6));
    CHECK(binary_cross_entropy(0.5, 0) == Catch::Approx(std::log(2.0)).margin(1e-6));
    // the clamp keeps the loss finite at the boundary
    CHECK(std::isfinite(binary_cross_entropy(0.0, 1)));
    CHECK(std::isfinite(binary_cross_entropy(1.0, 0)));
}

TEST_CASE("adam optimizer") {
    TrainConfig cfg;
    SECTION("first step with a constant gradient moves by about the learning rate") {
        Parameter<float> w("w", Tensor<float>::full({1}, 5.0f));
        w.grad[0] = 0.3f;
        AdamState<float> state;
        adam_step<float>({&w}, state, cfg);
        CHECK(std::abs(5.0f - w.value[0]) == Catch::Approx(cfg.learning_rate).epsilon(1e-4));
    }
    SECTION("zero gradient leaves the parameter unchanged") {
        Parameter<float> w("w", Tensor<float>::full({3}, 1.5f));
        AdamState<float> state;
        adam_step<float>({&w}, state, cfg);
        for (std::size_t i = 0; i < 3; ++i) CHECK(w.value[i] == 1.5f);
    }
    SECTION("non-trainable parameters never move") {
        Parameter<float> frozen("m", Tensor<float>::full({2}, 0.7f), false);
        frozen.grad.fill(1.0f);
        AdamState<float> state;
        adam_step<float>({&frozen}, state, cfg);
        for (std::size_t i = 0; i < 2; ++i) CHECK(frozen.value[i] == 0.7f);
    }
    SECTION("a scalar quadratic converges: (w-3)^2, 2000 steps at lr 0.01") {
        TrainConfig fast = cfg;
        fast.learning_rate = 0.01f;
        Parameter<float> w("w", Tensor<float>(Shape{1}));
        AdamState<float> state;
        for (int step = 0; step < 2000; ++step) {
            w.zero_grad();
            w.grad[0] = 2.0f * (w.value[0] - 3.0f);
            adam_step<float>({&w}, state, fast);
        }
        CHECK(std::abs(w.value[0] - 3.0f) < 1e-2);
    }
}

TEST_CASE("early stopping rule") {
    SECTION("constant loss stops after 1 + patience observations") {
        EarlyStopper stopper(20);
        int epochs = 0;
        for (int e = 1; e <= 100; ++e) {
            stopper.observe(0.5);
            epochs = e;
            if (stopper.should_stop()) break;
        }
        CHECK(epochs == 21);
    }
    SECTION("strictly improving loss never stops") {
        EarlyStopper stopper(20);
        double loss = 1.0;
        for (int e = 1; e <= 100; ++e) {
            CHECK(stopper.observe(loss));
            loss *= 0.99;
        }
        CHECK_FALSE(stopper.should_stop());
    }
    SECTION("improvement resets the counter") {
        EarlyStopper stopper(3);
        stopper.observe(1.0);
        stopper.observe(1.0);
        stopper.observe(1.0);
        CHECK(stopper.epochs_since_improvement() == 2);
        stopper.observe(0.5);
        CHECK(stopper.epochs_since_improvement() == 0);
        CHECK_FALSE(stopper.should_stop());
    }
}

TEST_CASE("metrics from confusion counts") {
    SECTION("worked example") {
        ConfusionCounts c{50, 40, 5, 5};
        const MetricsReport m = metrics_from_counts(c);
        CHECK(m.accuracy == Catch::Approx(0.9));
        CHECK(m.precision == Catch::Approx(10.0 / 11.0));
        CHECK(m.recall == Catch::Approx(10.0 / 11.0));
        CHECK(m.false_positive_rate == Catch::Approx(1.0 / 9.0));
    }
    SECTION("published test-row consistency: F1(0.842, 0.927) = 0.883") {
        CHECK(f1_score(0.842, 0.927) == Catch::Approx(0.883).margin(0.001));
    }
    SECTION("perfect predictions") {
        const MetricsReport m = metrics_from_counts(ConfusionCounts{10, 20, 0, 0});
        CHECK(m.accuracy == 1.0);
        CHECK(m.false_positive_rate == 0.0);
        CHECK(m.f1 == 1.0);
    }
    SECTION("identities on random counts") {
        Rng rng(31);
        for (int trial = 0; trial < 50; ++trial) {
            ConfusionCounts c{static_cast<long long>(rng.next() % 100),
                              static_cast<long long>(rng.next() % 100),
                              static_cast<long long>(rng.next() % 100),
                              static_cast<long long>(rng.next() % 100)};
            if (c.total() == 0) continue;
            const MetricsReport m = metrics_from_counts(c);
            CHECK(m.accuracy * c.total() == Catch::Approx(c.tp + c.tn).margin(1e-6));
            if (c.fp + c.tn > 0) {
                const double specificity = static_cast<double>(c.tn) / (c.fp + c.tn);
                CHECK(m.false_positive_rate + specificity == Catch::Approx(1.0).margin(1e-9));
            }
            if (m.precision + m.recall > 0)
                CHECK(m.f1 == Catch::Approx(2 * m.precision * m.recall /
                                            (m.precision + m.recall)).margin(1e-9));
        }
    }
    SECTION("degenerate denominators define zero, not NaN") {
        const MetricsReport m = metrics_from_counts(ConfusionCounts{0, 10, 0, 0});
        CHECK(m.precision == 0.0);
        CHECK(m.recall == 0.0);
        CHECK(m.f1 == 0.0);
    }
}

TEST_CASE("threshold sweep properties") {
    Rng rng(32);
    std::vector<PredictionRecord> preds;
    for (int i = 0; i < 400; ++i) {
        PredictionRecord r;
        r.probability = rng.uniform(0.0, 1.0);
        r.label = rng.uniform(0.0, 1.0) < 0.3 ? 1 : 0;
        preds.push_back(r);
    }
    const auto rows = threshold_sweep(preds);
    REQUIRE(rows.size() == 19);
    SECTION("raising the threshold never increases recall") {
        for (std::size_t i = 1; i < rows.size(); ++i)
            CHECK(rows[i].second.recall <= rows[i - 1].second.recall + 1e-12);
    }
    SECTION("an all-positive predictor on 11.5%-positive data") {
        std::vector<PredictionRecord> all_pos;
        for (int i = 0; i < 10000; ++i) {
            PredictionRecord r;
            r.probability = 0.99;
            r.label = i < 1150 ? 1 : 0;
            all_pos.push_back(r);
        }
        ConfusionCounts c;
        for (const auto& r : all_pos) c.add(r.label, r.probability >= 0.5 ? 1 : 0);
        const MetricsReport m = metrics_from_counts(c);
        CHECK(m.recall == 1.0);
        CHECK(m.precision == Catch::Approx(0.115).margin(1e-6));
    }
}

TEST_CASE("prediction intervals") {
    auto rec = [](std::size_t idx, int pred) {
        PredictionRecord r;
        r.clip_id = "c";
        r.frame_index = idx;
        r.predicted = pred;
        return r;
    };
    SECTION("alternating predictions yield single-frame intervals") {
        const std::vector<PredictionRecord> rs{rec(4, 0), rec(5, 1), rec(6, 0), rec(7, 1)};
        const auto iv = predicted_intervals(rs);
        REQUIRE(iv.size() == 2);
        CHECK(iv[0] == std::pair<std::size_t, std::size_t>{5, 5});
        CHECK(iv[1] == std::pair<std::size_t, std::size_t>{7, 7});
    }
    SECTION("runs merge") {
        const std::vector<PredictionRecord> rs{rec(4, 1), rec(5, 1), rec(6, 1), rec(7, 0)};
        const auto iv = predicted_intervals(rs);
        REQUIRE(iv.size() == 1);
        CHECK(iv[0] == std::pair<std::size_t, std::size_t>{4, 6});
    }
    SECTION("all-negative predictions give no intervals") {
        CHECK(predicted_intervals({rec(4, 0), rec(5, 0)}).empty());
    }
}

TEST_CASE("loss monotonicity on a single-parameter logistic probe") {
    // full-batch training of p = sigmoid(w x) on separable scalar data
    Parameter<float> w("w", Tensor<float>(Shape{1, 1}));
    const std::vector<float> xs{-2.0f, -1.0f, 1.0f, 2.0f};
    const std::vector<float> ts{0.0f, 0.0f, 1.0f, 1.0f};
    TrainConfig cfg;
    cfg.learning_rate = 0.01f;
    AdamState<float> state;
    double prev_loss = std::numeric_limits<double>::infinity();
    for (int epoch = 0; epoch < 60; ++epoch) {
        Tape<float> tape;
        const auto x = tape.constant(Tensor<float>(Shape{4, 1}, std::vector<float>(xs)));
        const auto p = tape.sigmoid(tape.matmul(x, tape.leaf(w)));
        const auto loss = tape.bce_loss(p, ts);
        const double value = tape.value(loss)[0];
        CHECK(value <= prev_loss + 1e-6);
        prev_loss = value;
        w.zero_grad();
        tape.backward(loss);
        adam_step<float>({&w}, state, cfg);
    }
    CHECK(prev_loss < std::log(2.0));
}

TEST_CASE("training loop on the synthetic corpus") {
    testutil::TempDir tmp("trainloop");
    const auto manifest_path = testutil::write_small_corpus(tmp.path());
    const auto clips = load_manifest(manifest_path);
    FlowParams params;
    for (const auto& clip : clips)
        ensure_flows(clip, tmp.path() / "cache", params, 24, 32, false);
    DatasetBuilder data(clips, tmp.path() / "cache", params, 24, 32, 4);
    data.verify_cache();

    SECTION("constant validation loss stops after exactly 1 + patience epochs") {
        ModelConfig mc = ModelConfig::shrunken();
        mc.seed = 11;
        Model<float> model = build_model<float>(mc);
        TrainConfig tc;
        tc.learning_rate = 0.0f;  // frozen parameters: constant loss
        tc.max_epochs = 40;
        tc.early_stop_patience = 20;
        tc.batch_size = 4;
        const TrainState state = train(model, data, tc);
        CHECK(state.history.size() == 21);
        CHECK(state.stopped_early);
        CHECK(state.best_epoch == 1);
    }
    SECTION("training is seed-reproducible") {
        auto run_once = [&] {
            ModelConfig mc = ModelConfig::shrunken();
            mc.seed = 12;
            Model<float> model = build_model<float>(mc);
            TrainConfig tc;
            tc.learning_rate = 0.002f;
            tc.max_epochs = 4;
            tc.early_stop_patience = 3;
            tc.batch_size = 4;
            tc.seed = 12;
            return train(model, data, tc).history;
        };
        const auto a = run_once();
        const auto b = run_once();
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].train_loss == b[i].train_loss);
            CHECK(a[i].val_loss == b[i].val_loss);
        }
    }
    SECTION("empty training split is rejected") {
        std::vector<ClipManifest> val_only(1, clips[1]);
        DatasetBuilder d2(val_only, tmp.path() / "cache", params, 24, 32, 4);
        ModelConfig mc = ModelConfig::shrunken();
        Model<float> model = build_model<float>(mc);
        CHECK_THROWS_AS(train(model, d2, TrainConfig{}), std::invalid_argument);
    }
    SECTION("evaluate fills the confusion matrix against the manifest labels") {
        ModelConfig mc = ModelConfig::shrunken();
        mc.seed = 13;
        Model<float> model = build_model<float>(mc);
        const EvalResult ev = evaluate(model, data, data.split().test, 4, 0.5);
        CHECK(ev.metrics.counts.total() ==
              static_cast<long long>(data.split().test.size()));
        CHECK(ev.predictions.size() == data.split().test.size());
        for (const auto& p : ev.predictions) {
            CHECK(p.probability > 0.0);
            CHECK(p.probability < 1.0);
            CHECK(p.frame_index >= 4);
        }
    }
    SECTION("history csv is written with the documented header") {
        std::vector<EpochRecord> hist{{1, 0.5, 0.6, 0.4, 0.7}};
        write_history_csv(tmp.path() / "h.csv", hist);
        std::ifstream in(tmp.path() / "h.csv");
        std::string line;
        std::getline(in, line);
        CHECK(line == "epoch,train_loss,train_acc,val_loss,val_acc");
        std::getline(in, line);
        CHECK(line == "1,0.500000,0.600000,0.400000,0.700000");
    }
}

TEST_CASE("predict over a clip directory") {
    testutil::TempDir tmp("predict");
    ModelConfig mc = ModelConfig::shrunken();
    mc.seed = 14;
    Model<float> model = build_model<float>(mc);
    FlowParams params;

    SECTION("a 10-frame clip yields 6 records from index 4") {
        const fs::path dir = tmp.path() / "clip10";
        fs::create_directories(dir);
        for (int t = 0; t < 10; ++t) {
            char name[16];
            std::snprintf(name, sizeof name, "%06d.ppm", t);
            write_image(dir / name, testutil::square_frame(4 * t, 16));
        }
        const auto records = predict_clip(model, dir, "clip10", params, 0.5);
        REQUIRE(records.size() == 6);
        for (std::size_t i = 0; i < records.size(); ++i) {
            CHECK(records[i].frame_index == i + 4);
            CHECK(records[i].probability > 0.0);
            CHECK(records[i].probability < 1.0);
        }
    }
    SECTION("identical frames give identical probabilities") {
        const fs::path dir = tmp.path() / "static";
        fs::create_directories(dir);
        for (int t = 0; t < 8; ++t) {
            char name[16];
            std::snprintf(name, sizeof name, "%06d.ppm", t);
            write_image(dir / name, testutil::square_frame(20, 16));
        }
        const auto records = predict_clip(model, dir, "static", params, 0.5);
        REQUIRE(records.size() == 4);
        for (const auto& r : records)
            CHECK(r.probability == Catch::Approx(records[0].probability).margin(1e-7));
    }
    SECTION("clips shorter than 5 frames yield no records") {
        const fs::path dir = tmp.path() / "short";
        fs::create_directories(dir);
        for (int t = 0; t < 4; ++t) {
            char name[16];
            std::snprintf(name, sizeof name, "%06d.ppm", t);
            write_image(dir / name, testutil::square_frame(10, 16));
        }
        CHECK(predict_clip(model, dir, "short", params, 0.5).empty());
    }
}
