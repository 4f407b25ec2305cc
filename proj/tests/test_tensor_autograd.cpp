#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cyclingnet/autograd.hpp"
#include "cyclingnet/grad_check.hpp"
#include "cyclingnet/selftest.hpp"
#include "cyclingnet/tensor.hpp"

using namespace cyclingnet;
using Var = Tape<float>::Var;

namespace {

double sample_std(const Tensor<float>& t) {
    double mean = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) mean += t[i];
    mean /= t.size();
    double var = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) var += (t[i] - mean) * (t[i] - mean);
    return std::sqrt(var / t.size());
}

Tensor<float> random_uniform(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    Rng rng(seed);
    Tensor<float> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

}  // namespace

TEST_CASE("he_normal_init statistics and determinism") {
    const auto big = he_normal_init<float>({1000000}, 2, 7);
    CHECK(sample_std(big) == Catch::Approx(1.0).margin(0.02));

    const auto again = he_normal_init<float>({1000000}, 2, 7);
    CHECK(big.values() == again.values());  // bitwise

    const auto conv1 = he_normal_init<float>({1000000}, 75, 11);
    CHECK(sample_std(conv1) == Catch::Approx(std::sqrt(2.0 / 75.0)).epsilon(0.02));

    CHECK_THROWS_AS(he_normal_init<float>({4}, 0, 1), std::invalid_argument);
}

TEST_CASE("conv2d output extents match the published stack") {
    Tape<float> tape;
    const auto in = tape.constant(random_uniform({240, 320, 3}, 1));
    const auto k = tape.constant(random_uniform({5, 5, 3, 24}, 2, -0.1f, 0.1f));
    const auto b = tape.constant(Tensor<float>(Shape{24}));
    const auto out = tape.conv2d(in, k, b, 2);
    CHECK(tape.shape(out) == Shape{118, 158, 24});

    const auto in2 = tape.constant(random_uniform({12, 17, 48}, 3));
    const auto k2 = tape.constant(random_uniform({3, 3, 48, 64}, 4, -0.1f, 0.1f));
    const auto b2 = tape.constant(Tensor<float>(Shape{64}));
    CHECK(tape.shape(tape.conv2d(in2, k2, b2, 1)) == Shape{10, 15, 64});
}

TEST_CASE("conv2d identity kernel and error paths") {
    Tape<float> tape;
    const auto in = tape.constant(random_uniform({4, 5, 1}, 5));
    const auto k = tape.constant(Tensor<float>(Shape{1, 1, 1, 1}, std::vector<float>{1.0f}));
    const auto b = tape.constant(Tensor<float>(Shape{1}));
    const auto out = tape.conv2d(in, k, b, 1);
    CHECK(tape.value(out).values() == tape.value(in).values());

    const auto small = tape.constant(random_uniform({2, 2, 1}, 6));
    const auto big_k = tape.constant(random_uniform({3, 3, 1, 1}, 7));
    CHECK_THROWS_AS(tape.conv2d(small, big_k, b, 1), std::invalid_argument);
}

TEST_CASE("max_pool2d extents, window maximum, odd trailing edge") {
    Tape<float> tape;
    CHECK(tape.shape(tape.max_pool2d(tape.constant(random_uniform({57, 77, 36}, 8)), 2)) ==
          Shape{28, 38, 36});
    CHECK(tape.shape(tape.max_pool2d(tape.constant(random_uniform({3, 5, 128}, 9)), 2)) ==
          Shape{1, 2, 128});

    const auto win = tape.constant(
        Tensor<float>(Shape{2, 2, 1}, std::vector<float>{1.0f, 2.0f, 3.0f, 4.0f}));
    CHECK(tape.value(tape.max_pool2d(win, 2))[0] == 4.0f);
}

TEST_CASE("batch_norm matches the closed forms") {
    SECTION("infer mode with unit moving statistics divides by sqrt(1.001)") {
        Tape<float> tape;
        const auto x = tape.constant(random_uniform({3, 4}, 10));
        const auto gamma = tape.constant(Tensor<float>::full({4}, 1.0f));
        const auto beta = tape.constant(Tensor<float>(Shape{4}));
        Tensor<float> mm(Shape{4});
        Tensor<float> mv = Tensor<float>::full({4}, 1.0f);
        const auto y = tape.batch_norm(x, gamma, beta, mm, mv, Mode::infer, 0.99f, 0.001f);
        for (std::size_t i = 0; i < tape.value(y).size(); ++i)
            CHECK(tape.value(y)[i] ==
                  Catch::Approx(tape.value(x)[i] / std::sqrt(1.001f)).margin(1e-6));
    }
    SECTION("train mode on a {-1,+1} batch normalizes to about -/+0.9995") {
        Tape<float> tape;
        const auto x =
            tape.constant(Tensor<float>(Shape{2, 1}, std::vector<float>{-1.0f, 1.0f}));
        const auto gamma = tape.constant(Tensor<float>::full({1}, 1.0f));
        const auto beta = tape.constant(Tensor<float>(Shape{1}));
        Tensor<float> mm(Shape{1});
        Tensor<float> mv = Tensor<float>::full({1}, 1.0f);
        const auto y = tape.batch_norm(x, gamma, beta, mm, mv, Mode::train, 0.99f, 0.001f);
        CHECK(tape.value(y)[0] == Catch::Approx(-0.9995).margin(1e-4));
        CHECK(tape.value(y)[1] == Catch::Approx(0.9995).margin(1e-4));
        // moving statistics: m <- 0.99*m + 0.01*batch_stat
        CHECK(mm[0] == Catch::Approx(0.0).margin(1e-7));
        CHECK(mv[0] == Catch::Approx(0.99 * 1.0 + 0.01 * 1.0).margin(1e-6));
    }
}

TEST_CASE("dense affine map basics") {
    Tape<float> tape;
    const auto x = tape.constant(random_uniform({2, 6}, 12));
    const auto w = tape.constant(Tensor<float>(Shape{6, 3}));
    const auto b = tape.constant(Tensor<float>(Shape{3}));
    const auto y = tape.add_bias(tape.matmul(x, w), b);
    for (std::size_t i = 0; i < tape.value(y).size(); ++i) CHECK(tape.value(y)[i] == 0.0f);

    const auto bad_w = tape.constant(Tensor<float>(Shape{5, 3}));
    CHECK_THROWS_AS(tape.matmul(x, bad_w), std::invalid_argument);
}

TEST_CASE("activations") {
    Tape<float> tape;
    const auto x = tape.constant(Tensor<float>(Shape{2}, std::vector<float>{-3.0f, 3.0f}));
    const auto r = tape.relu(x);
    CHECK(tape.value(r)[0] == 0.0f);
    CHECK(tape.value(r)[1] == 3.0f);

    const auto z = tape.constant(Tensor<float>(Shape{1}, std::vector<float>{0.0f}));
    CHECK(tape.value(tape.sigmoid(z))[0] == Catch::Approx(0.5));

    const auto c = tape.constant(Tensor<float>::full({5}, 3.7f));
    const auto sm = tape.value(tape.softmax_last(c));
    for (std::size_t i = 0; i < 5; ++i) CHECK(sm[i] == Catch::Approx(0.2).margin(1e-6));

    const auto rows = tape.constant(random_uniform({7, 9}, 13, -4.0f, 4.0f));
    const auto smr = tape.value(tape.softmax_last(rows));
    for (std::size_t r2 = 0; r2 < 7; ++r2) {
        double sum = 0.0;
        for (std::size_t k = 0; k < 9; ++k) {
            sum += smr[r2 * 9 + k];
            CHECK(smr[r2 * 9 + k] > 0.0f);
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("dropout contract") {
    Rng rng(77);
    SECTION("infer mode and rate zero are the identity") {
        Tape<float> tape;
        const auto x = tape.constant(random_uniform({50}, 14));
        CHECK(tape.value(tape.dropout(x, 0.3, Mode::infer, rng)).values() ==
              tape.value(x).values());
        CHECK(tape.value(tape.dropout(x, 0.0, Mode::train, rng)).values() ==
              tape.value(x).values());
    }
    SECTION("inverted scaling preserves the mean within 1%") {
        Tape<float> tape;
        const auto ones = tape.constant(Tensor<float>::full({1000000}, 1.0f));
        const auto y = tape.value(tape.dropout(ones, 0.3, Mode::train, rng));
        double mean = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) mean += y[i];
        mean /= y.size();
        CHECK(mean == Catch::Approx(1.0).epsilon(0.01));
    }
    SECTION("same seed gives the same mask") {
        Tape<float> t1, t2;
        Rng r1(123), r2(123);
        const auto x1 = t1.constant(random_uniform({64}, 15));
        const auto x2 = t2.constant(random_uniform({64}, 15));
        CHECK(t1.value(t1.dropout(x1, 0.3, Mode::train, r1)).values() ==
              t2.value(t2.dropout(x2, 0.3, Mode::train, r2)).values());
    }
    SECTION("rate outside [0,1) is rejected") {
        Tape<float> tape;
        const auto x = tape.constant(random_uniform({4}, 16));
        CHECK_THROWS_AS(tape.dropout(x, 1.0, Mode::train, rng), std::invalid_argument);
        CHECK_THROWS_AS(tape.dropout(x, -0.1, Mode::train, rng), std::invalid_argument);
    }
}

TEST_CASE("backward basics") {
    SECTION("loss = sum(x) gives an all-ones gradient") {
        Parameter<float> x("x", random_uniform({3, 4}, 17));
        Tape<float> tape;
        const auto loss = tape.sum_all(tape.leaf(x));
        tape.backward(loss);
        for (std::size_t i = 0; i < x.grad.size(); ++i) CHECK(x.grad[i] == 1.0f);
    }
    SECTION("loss = sigmoid(w.x) at w=0 gives gradient 0.25*x") {
        Parameter<float> w("w", Tensor<float>(Shape{4, 1}));
        const Tensor<float> xval = random_uniform({1, 4}, 18);
        Tape<float> tape;
        const auto x = tape.constant(xval);
        const auto loss = tape.sum_all(tape.sigmoid(tape.matmul(x, tape.leaf(w))));
        tape.backward(loss);
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(w.grad[i] == Catch::Approx(0.25f * xval[i]).margin(1e-6));
    }
    SECTION("non-scalar loss is rejected") {
        Tape<float> tape;
        const auto x = tape.constant(random_uniform({3}, 19));
        CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
    }
    SECTION("a tape replays only once") {
        Parameter<float> x("x", random_uniform({2}, 20));
        Tape<float> tape;
        const auto loss = tape.sum_all(tape.leaf(x));
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
    }
}

TEST_CASE("gradient checks per operation (oracle: 64-bit central differences)") {
    CHECK(check_conv2d_gradients(4).pass);
    CHECK(check_max_pool_gradients(4).pass);
    CHECK(check_batch_norm_gradients(4).pass);
    CHECK(check_dense_gradients(4).pass);
}

TEST_CASE("relu gradient away from the kink") {
    Rng rng(21);
    std::vector<Parameter<double>> inputs;
    Tensor<double> x(Shape{40});
    for (std::size_t i = 0; i < x.size(); ++i) {
        double v = rng.uniform(0.1, 1.0);
        if (rng.next() % 2 == 0) v = -v;  // bounded away from 0 by 0.1
        x[i] = v;
    }
    inputs.emplace_back("x", std::move(x));
    const auto rep = grad_check(std::move(inputs),
                                [](Tape<double>& t, const std::vector<Tape<double>::Var>& v) {
                                    Rng r(99);
                                    Tensor<double> proj(t.shape(v[0]));
                                    for (std::size_t i = 0; i < proj.size(); ++i)
                                        proj[i] = r.uniform(-1.0, 1.0);
                                    return t.sum_all(t.mul(t.relu(v[0]), t.constant(proj)));
                                });
    CHECK(rep.pass);
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("dropout expectation property over many draws") {
    // empirical mean of train-mode output converges to the input value
    Rng rng(22);
    Tape<float> tape;
    const auto x = tape.constant(Tensor<float>::full({256}, 0.8f));
    std::vector<double> mean(256, 0.0);
    const int draws = 2000;
    for (int d = 0; d < draws; ++d) {
        Tape<float> t2;
        const auto x2 = t2.constant(tape.value(x));
        const auto y = t2.value(t2.dropout(x2, 0.3, Mode::train, rng));
        for (std::size_t i = 0; i < 256; ++i) mean[i] += y[i];
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < 256; ++i)
        worst = std::max(worst, std::abs(mean[i] / draws - 0.8));
    CHECK(worst < 0.05);
}

TEST_CASE("tensor shape bookkeeping") {
    CHECK_THROWS_AS(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), std::invalid_argument);
    CHECK_THROWS_AS(Tensor<float>(Shape{0, 3}), std::invalid_argument);
    const Tensor<float> t(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    CHECK_THROWS_AS(t.reshaped({4, 2}), std::invalid_argument);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
    CHECK(t.reshaped({6}).values() == t.values());
}
