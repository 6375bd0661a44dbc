#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "simclip/errors.hpp"
#include "simclip/ndgrad.hpp"
#include "support.hpp"

using namespace simclip;
using namespace simclip::nd;
using Catch::Approx;
using simclip::testing::check_gradients;
using simclip::testing::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

/// sum(y * r) for a fixed random r, so every output entry gets a distinct weight.
Tensor weighted_sum(Tape& tape, const Tensor& y, const Tensor& r) { return sum(tape, hadamard(tape, y, r)); }

}  // namespace

TEST_CASE("affine forward examples") {
    Tape tape;
    auto y = affine(tape, Tensor::constant({1, 2}, {1, 2}), Tensor::constant({2, 2}, {1, 0, 0, 1}),
                    Tensor::constant({2}, {0, 0}));
    CHECK(values(y) == std::vector<double>{1, 2});

    y = affine(tape, Tensor::constant({1, 2}, {1, 1}), Tensor::constant({2, 2}, {2, 3, 4, 5}),
               Tensor::constant({2}, {1, 1}));
    CHECK(values(y) == std::vector<double>{7, 9});
}

TEST_CASE("affine bias gradient of sum is all ones") {
    Tape tape;
    auto bias = Tensor::parameter({3}, {0.1, 0.2, 0.3});
    auto x = Tensor::constant({2, 2}, {1, 2, 3, 4});
    auto w = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    tape.backward(sum(tape, affine(tape, x, w, bias)));
    // Two rows, so each bias entry receives 1 per row.
    CHECK(bias.grad().size() == 3);
    for (double g : bias.grad()) CHECK(g == 2.0);

    Tape single;
    auto b1 = Tensor::parameter({2}, {0, 0});
    single.backward(sum(single, affine(single, Tensor::constant({1, 2}, {1, 1}), Tensor::constant({2, 2}, {2, 3, 4, 5}), b1)));
    for (double g : b1.grad()) CHECK(g == 1.0);
}

TEST_CASE("affine shape mismatch names both shapes") {
    Tape tape;
    try {
        affine(tape, Tensor::zeros({2, 3}), Tensor::zeros({4, 5}), Tensor::zeros({5}));
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,5]") != std::string::npos);
    }
}

TEST_CASE("elementwise examples") {
    Tape tape;
    auto v = Tensor::constant({1, 3}, {0.5, -1.5, 2.0});
    CHECK(values(abs_diff(tape, v, v)) == std::vector<double>{0, 0, 0});
    CHECK(values(hadamard(tape, Tensor::constant({1, 2}, {0.6, 0.8}), Tensor::constant({1, 2}, {0.6, 0.8})))[0] ==
          Approx(0.36).margin(1e-15));
    CHECK(values(hadamard(tape, Tensor::constant({1, 2}, {0.6, 0.8}), Tensor::constant({1, 2}, {0.6, 0.8})))[1] ==
          Approx(0.64).margin(1e-15));
    CHECK(values(abs_diff(tape, Tensor::constant({1, 2}, {1, -2}), Tensor::constant({1, 2}, {3, 1}))) ==
          std::vector<double>{2, 3});
    CHECK(values(sub(tape, Tensor::constant({1, 2}, {1, -2}), Tensor::constant({1, 2}, {3, 1}))) ==
          std::vector<double>{-2, -3});
    CHECK_THROWS_AS(hadamard(tape, Tensor::zeros({1, 2}), Tensor::zeros({2, 1})), DimensionError);
}

TEST_CASE("abs subgradient at zero is zero") {
    Tape tape;
    auto a = Tensor::parameter({1, 2}, {1.0, 2.0});
    auto b = Tensor::parameter({1, 2}, {1.0, 0.0});
    tape.backward(sum(tape, abs_diff(tape, a, b)));
    REQUIRE(a.grad().size() == 2);
    CHECK(a.grad()[0] == 0.0);
    CHECK(a.grad()[1] == 1.0);
    CHECK(b.grad()[1] == -1.0);
}

TEST_CASE("concat_features examples and slicing") {
    Tape tape;
    std::vector<Tensor> two{Tensor::constant({1, 1}, {1}), Tensor::constant({1, 1}, {2})};
    CHECK(values(concat_features(tape, two)) == std::vector<double>{1, 2});

    Rng rng{3};
    std::vector<Tensor> four;
    for (int i = 0; i < 4; ++i) four.push_back(random_tensor(rng, {3, 5}, false));
    auto joined = concat_features(tape, four);
    CHECK(joined.shape() == Shape{3, 20});
    for (std::size_t i = 0; i < 4; ++i) CHECK(values(slice_features(tape, joined, 5 * i, 5)) == values(four[i]));

    CHECK_THROWS_AS(concat_features(tape, std::vector<Tensor>{}), DimensionError);
    std::vector<Tensor> mismatched{Tensor::zeros({1, 2}), Tensor::zeros({2, 2})};
    CHECK_THROWS_AS(concat_features(tape, mismatched), DimensionError);
}

TEST_CASE("concat backward routes ones to each parent") {
    Tape tape;
    auto a = Tensor::parameter({1, 1}, {1});
    auto b = Tensor::parameter({1, 1}, {2});
    std::vector<Tensor> parts{a, b};
    tape.backward(sum(tape, concat_features(tape, parts)));
    CHECK(a.grad()[0] == 1.0);
    CHECK(b.grad()[0] == 1.0);
}

TEST_CASE("l2_normalize examples") {
    Tape tape;
    auto y = l2_normalize(tape, Tensor::constant({1, 2}, {3, 4}));
    CHECK(y.data()[0] == Approx(0.6).margin(1e-15));
    CHECK(y.data()[1] == Approx(0.8).margin(1e-15));
    CHECK(values(l2_normalize(tape, Tensor::constant({1, 2}, {0.6, 0.8})))[1] == Approx(0.8).margin(1e-15));
    CHECK(values(l2_normalize(tape, Tensor::constant({1, 3}, {0, 0, 0}))) == std::vector<double>{0, 0, 0});

    Rng rng{11};
    for (int trial = 0; trial < 50; ++trial) {
        const double scale = std::pow(10.0, rng.uniform(-6.0, 3.0));
        auto x = random_tensor(rng, {4, 7}, false, scale);
        auto out = l2_normalize(tape, x);
        for (std::size_t r = 0; r < 4; ++r) {
            double in_sq = 0.0, out_sq = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                in_sq += x.at(r, c) * x.at(r, c);
                out_sq += out.at(r, c) * out.at(r, c);
            }
            if (std::sqrt(in_sq) >= 1e-6) CHECK(std::abs(std::sqrt(out_sq) - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("layer_norm examples") {
    Tape tape;
    auto ones = Tensor::constant({3}, {1, 1, 1});
    auto zeros = Tensor::constant({3}, {0, 0, 0});
    CHECK(values(layer_norm(tape, Tensor::constant({1, 3}, {2, 2, 2}), ones, zeros)) == std::vector<double>{0, 0, 0});

    auto y = layer_norm(tape, Tensor::constant({1, 2}, {-1, 1}), Tensor::constant({2}, {1, 1}),
                        Tensor::constant({2}, {0, 0}), 1e-300);
    CHECK(y.data()[0] == Approx(-1.0).margin(1e-12));
    CHECK(y.data()[1] == Approx(1.0).margin(1e-12));

    auto shift = Tensor::constant({3}, {0.5, -1, 2});
    CHECK(values(layer_norm(tape, Tensor::constant({2, 3}, {1, 5, 2, -3, 0, 7}), Tensor::constant({3}, {0, 0, 0}),
                            shift)) == std::vector<double>{0.5, -1, 2, 0.5, -1, 2});
}

TEST_CASE("gelu examples") {
    Tape tape;
    auto y = gelu(tape, Tensor::constant({1, 3}, {0, 10, -10}));
    CHECK(y.data()[0] == 0.0);
    CHECK(std::abs(y.data()[1] - 10.0) <= 1e-6);
    CHECK(std::abs(y.data()[2]) <= 1e-6);
    // x * Phi(x) at x = 1.
    CHECK(values(gelu(tape, Tensor::constant({1, 1}, {1})))[0] == Approx(0.8413447460685429).epsilon(1e-14));
}

TEST_CASE("dropout identities and errors") {
    Tape tape;
    Rng rng{5};
    auto x = random_tensor(rng, {4, 6}, true);
    CHECK(dropout(tape, x, 0.7, Mode::eval, rng).same_storage(x));
    CHECK(dropout(tape, x, 0.0, Mode::train, rng).same_storage(x));
    CHECK_THROWS_AS(dropout(tape, x, 1.0, Mode::train, rng), ConfigError);
    CHECK_THROWS_AS(dropout(tape, x, -0.1, Mode::eval, rng), ConfigError);
}

TEST_CASE("dropout preserves the mean in expectation") {
    Rng rng{42};
    auto x = Tensor::constant({1, 4}, {1.0, 2.0, 0.5, 3.0});
    const double input_mean = (1.0 + 2.0 + 0.5 + 3.0) / 4.0;
    double total = 0.0;
    constexpr int kDraws = 10000;
    for (int i = 0; i < kDraws; ++i) {
        Tape tape;
        auto y = dropout(tape, x, 0.5, Mode::train, rng);
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK((y.data()[c] == 0.0 || y.data()[c] == 2.0 * x.data()[c]));
            total += y.data()[c];
        }
    }
    CHECK(std::abs(total / (4.0 * kDraws) - input_mean) <= 0.02 * input_mean);
}

TEST_CASE("dropout masks depend only on the generator") {
    auto x = Tensor::constant({2, 8}, std::vector<double>(16, 1.0));
    Rng a{9}, b{9};
    Tape ta, tb;
    CHECK(values(dropout(ta, x, 0.3, Mode::train, a)) == values(dropout(tb, x, 0.3, Mode::train, b)));
}

TEST_CASE("backward examples") {
    Tape tape;
    auto x = Tensor::parameter({2}, {1, 2});
    tape.backward(sum(tape, x));
    REQUIRE(x.grad().size() == 2);
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1});

    Tape sq;
    auto z = Tensor::parameter({2}, {1, 2});
    sq.backward(sum(sq, hadamard(sq, z, z)));
    CHECK(std::vector<double>(z.grad().begin(), z.grad().end()) == std::vector<double>{2, 4});
}

TEST_CASE("backward contract errors") {
    Tape tape;
    auto x = Tensor::parameter({1, 2}, {1, 2});
    auto y = gelu(tape, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
    Tape other;
    auto s = sum(other, x);
    CHECK_THROWS_AS(tape.backward(s), ContractError);
}

TEST_CASE("two backward passes double leaf grads") {
    Tape tape;
    Rng rng{17};
    auto w = random_tensor(rng, {3, 2}, true);
    auto x = random_tensor(rng, {4, 3}, false);
    auto b = random_tensor(rng, {2}, true);
    auto loss = sum(tape, gelu(tape, affine(tape, x, w, b)));
    tape.backward(loss);
    const std::vector<double> once(w.grad().begin(), w.grad().end());
    tape.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("non-finite values are rejected") {
    Tape tape;
    CHECK_THROWS_AS(Tensor::constant({1}, {std::nan("")}), NumericError);
    auto big = Tensor::constant({1, 1}, {1e300});
    CHECK_THROWS_AS(hadamard(tape, big, big), NumericError);
}

TEST_CASE("every primitive matches finite differences at random points") {
    Rng rng{2024};
    for (int point = 0; point < 10; ++point) {
        auto x = random_tensor(rng, {3, 4}, true);
        auto y = random_tensor(rng, {3, 4}, true);
        auto r = random_tensor(rng, {3, 4}, false);
        auto w = random_tensor(rng, {4, 5}, true);
        auto b = random_tensor(rng, {5}, true);
        auto r5 = random_tensor(rng, {3, 5}, false);
        auto gain = random_tensor(rng, {4}, true);
        auto shift = random_tensor(rng, {4}, true);
        auto r8 = random_tensor(rng, {3, 8}, false);
        auto r2 = random_tensor(rng, {3, 2}, false);

        const auto affine_check = check_gradients(
            [&](Tape& t) { return weighted_sum(t, affine(t, x, w, b), r5); }, {x, w, b});
        const auto abs_check = check_gradients(
            [&](Tape& t) { return weighted_sum(t, abs_diff(t, x, y), r); }, {x, y});
        const auto prod_check = check_gradients(
            [&](Tape& t) { return weighted_sum(t, hadamard(t, x, y), r); }, {x, y});
        const auto sub_check = check_gradients(
            [&](Tape& t) { return weighted_sum(t, sub(t, x, y), r); }, {x, y});
        const auto concat_check = check_gradients(
            [&](Tape& t) {
                std::vector<Tensor> parts{x, y};
                return weighted_sum(t, concat_features(t, parts), r8);
            },
            {x, y});
        const auto slice_check = check_gradients(
            [&](Tape& t) { return weighted_sum(t, slice_features(t, x, 1, 2), r2); }, {x});
        const auto l2_check = check_gradients(
            [&](Tape& t) { return weighted_sum(t, l2_normalize(t, x), r); }, {x});
        const auto ln_check = check_gradients(
            [&](Tape& t) { return weighted_sum(t, layer_norm(t, x, gain, shift), r); }, {x, gain, shift});
        const auto gelu_check = check_gradients([&](Tape& t) { return weighted_sum(t, gelu(t, x), r); }, {x});
        const auto sum_check = check_gradients([&](Tape& t) { return sum(t, x); }, {x});

        INFO("point " << point);
        CHECK(affine_check.max_rel_error < 1e-4);
        CHECK(abs_check.max_rel_error < 1e-4);
        CHECK(prod_check.max_rel_error < 1e-4);
        CHECK(sub_check.max_rel_error < 1e-4);
        CHECK(concat_check.max_rel_error < 1e-4);
        CHECK(slice_check.max_rel_error < 1e-4);
        CHECK(l2_check.max_rel_error < 1e-4);
        CHECK(ln_check.max_rel_error < 1e-4);
        CHECK(gelu_check.max_rel_error < 1e-4);
        CHECK(sum_check.max_rel_error < 1e-4);
    }
}

TEST_CASE("dropout gradient matches finite differences under a fixed mask") {
    Rng rng{8};
    auto x = random_tensor(rng, {3, 6}, true);
    auto r = random_tensor(rng, {3, 6}, false);
    const auto check = check_gradients(
        [&](Tape& t) {
            Rng mask{123};
            return weighted_sum(t, dropout(t, x, 0.4, Mode::train, mask), r);
        },
        {x});
    CHECK(check.max_rel_error < 1e-4);
}

TEST_CASE("adam examples") {
    SECTION("zero gradient leaves parameters unchanged") {
        auto p = Tensor::parameter({3}, {1, -2, 3});
        Adam adam({p});
        for (int i = 0; i < 5; ++i) adam.step(1e-2);
        CHECK(values(p) == std::vector<double>{1, -2, 3});
    }
    SECTION("first step with unit gradient moves by about lr") {
        auto p = Tensor::parameter({1}, {0.5});
        Adam adam({p});
        p.mutable_grad()[0] = 1.0;
        adam.step(1e-3);
        CHECK(p.data()[0] == Approx(0.5 - 1e-3).margin(1e-10));
        CHECK(adam.steps_taken() == 1);
    }
    SECTION("identical runs are bit-identical") {
        auto run = [] {
            Rng rng{77};
            auto p = random_tensor(rng, {4}, true);
            Adam adam({p});
            for (int s = 0; s < 20; ++s) {
                for (auto& g : p.mutable_grad()) g = rng.normal();
                adam.step(1e-2);
            }
            return values(p);
        };
        CHECK(run() == run());
    }
    SECTION("non-positive learning rate is a configuration error") {
        auto p = Tensor::parameter({1}, {0});
        Adam adam({p});
        CHECK_THROWS_AS(adam.step(0.0), ConfigError);
        CHECK_THROWS_AS(adam.step(-1.0), ConfigError);
    }
    SECTION("only trainable leaves are accepted") {
        CHECK_THROWS_AS(Adam({Tensor::constant({1}, {0})}), ContractError);
    }
}
