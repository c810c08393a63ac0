#include "simts/training.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace simts;
using namespace simts::test;
namespace fs = std::filesystem;

namespace {

TrainConfig sgd_config(double lr, double momentum, double wd) {
    TrainConfig cfg;
    cfg.learning_rate = lr;
    cfg.momentum = momentum;
    cfg.weight_decay = wd;
    return cfg;
}

double step_scalar(double theta, double grad, const TrainConfig& cfg, VelocityMap& v) {
    std::vector<Tensor> params{Tensor::parameter({1}, {theta}, "w")};
    sgd_step(params, GradMap{{"w", {grad}}}, v, cfg);
    return params[0].data()[0];
}

TrainConfig tiny_train_config(std::size_t epochs, std::uint64_t seed = 0) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg.window_len = 16;
    cfg.history_len = 8;
    return cfg;
}

std::vector<WindowSample> tiny_data(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<WindowSample> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(random_sample(rng, 2, 8, 8));
    return out;
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "simts_training_tests";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("sgd examples") {
    VelocityMap v;
    CHECK(step_scalar(1.0, 2.0, sgd_config(0.1, 0.0, 0.0), v) == doctest::Approx(0.8).epsilon(1e-15));

    v.clear();
    CHECK(step_scalar(2.0, 0.0, sgd_config(0.1, 0.0, 0.5), v) == doctest::Approx(1.9).epsilon(1e-15));

    v.clear();
    const auto cfg = sgd_config(0.1, 0.9, 0.0);
    const double t1 = step_scalar(0.0, 1.0, cfg, v);
    const double t2 = step_scalar(t1, 1.0, cfg, v);
    CHECK(t1 == doctest::Approx(-0.1).epsilon(1e-15));
    CHECK(t2 == doctest::Approx(-0.29).epsilon(1e-15));
}

TEST_CASE("weight decay shrinks every parameter by 1 - lr*wd") {
    std::mt19937_64 rng(1);
    SimTSModel model = init_params(tiny_config(), 1);
    randomize_biases(model, rng);
    auto params = model.parameters();
    const auto before = flat_params(params);
    VelocityMap v;
    const auto cfg = sgd_config(0.01, 0.0, 0.3);
    sgd_step(params, GradMap{}, v, cfg);
    const auto after = flat_params(params);
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(after[i] == doctest::Approx(before[i] * (1.0 - 0.01 * 0.3)).epsilon(1e-14));
}

TEST_CASE("momentum sgd descends a quadratic bowl") {
    // f(θ) = ½ Σ c_i (θ_i − t_i)², minimum at t.
    const std::vector<double> c{1.0, 4.0, 0.5}, target{1.0, -2.0, 3.0};
    std::vector<Tensor> params{Tensor::parameter({3}, {0.0, 0.0, 0.0}, "theta")};
    VelocityMap v;
    const auto cfg = sgd_config(0.05, 0.9, 0.0);
    for (int step = 0; step < 500; ++step) {
        const auto th = params[0].data();
        std::vector<double> g(3);
        for (std::size_t i = 0; i < 3; ++i) g[i] = c[i] * (th[i] - target[i]);
        sgd_step(params, GradMap{{"theta", g}}, v, cfg);
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(params[0].data()[i] == doctest::Approx(target[i]).epsilon(1e-6));
}

TEST_CASE("sgd rejects non-finite gradients and names the parameter") {
    std::vector<Tensor> params{Tensor::parameter({2}, {0.0, 0.0}, "encoder.projection.bias")};
    VelocityMap v;
    try {
        sgd_step(params, GradMap{{"encoder.projection.bias", {1.0, std::nan("")}}}, v, sgd_config(0.1, 0.9, 0.0));
        FAIL("expected an error");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("encoder.projection.bias") != std::string::npos);
    }
    CHECK(params[0].data()[0] == 0.0);
}

TEST_CASE("sgd from accumulated grads matches sgd from a gradient map") {
    Tensor x = Tensor::parameter({2}, {0.5, -1.0}, "x");
    Tensor y = Tensor::parameter({2}, {2.0, 3.0}, "y");
    Tensor x2 = Tensor::parameter({2}, {0.5, -1.0}, "x");
    Tensor y2 = Tensor::parameter({2}, {2.0, 3.0}, "y");
    std::vector<Tensor> by_grad{x, y}, by_map{x2, y2};
    VelocityMap v1, v2;
    const auto cfg = sgd_config(0.1, 0.9, 0.01);
    for (int step = 0; step < 3; ++step) {
        x.zero_grad();
        accumulate_grad(sum(mul(x, x)));  // y gets no gradient, only decay
        sgd_step(by_grad, v1, cfg);
        const GradMap g = backward(sum(mul(x2, x2)));
        sgd_step(by_map, g, v2, cfg);
    }
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(x.data()[i] == x2.data()[i]);
        CHECK(y.data()[i] == y2.data()[i]);
    }
}

TEST_CASE("training gradients keep the stop-gradient") {
    // The batch loss used by train(), differentiated, against a frozen-future oracle.
    std::mt19937_64 rng(2);
    SimTSModel model = init_params(tiny_config(), 2);
    randomize_biases(model, rng);
    const auto batch = tiny_data(3, 3);
    const GradMap grads = backward(batch_loss(model, batch, LossVariant::simts));

    auto params = model.parameters();
    const auto theta = flat_params(params);
    const auto oracle = frozen_future_loss(model, params, batch);
    const auto numeric = numeric_gradient(oracle, theta, 1e-6);
    set_flat_params(params, theta);
    std::size_t off = 0;
    for (const auto& p : params) {
        CHECK(max_rel_diff(grads.at(p.name()), std::span<const double>(numeric).subspan(off, p.numel())) < 1e-5);
        off += p.numel();
    }
}

TEST_CASE("zero epochs and zero learning rate leave the model unchanged") {
    const auto data = tiny_data(5, 4);
    SimTSModel model = init_params(tiny_config(), 3);
    const auto before = flat_params(model.parameters());
    CHECK(train(data, model, tiny_train_config(0)).empty());
    CHECK(flat_params(model.parameters()) == before);

    auto cfg = tiny_train_config(3);
    cfg.learning_rate = 0.0;
    CHECK(train(data, model, cfg).size() == 3);
    CHECK(flat_params(model.parameters()) == before);
}

TEST_CASE("train needs data") {
    SimTSModel model = init_params(tiny_config(), 3);
    CHECK_THROWS(train({}, model, tiny_train_config(1)));
}

TEST_CASE("training is deterministic") {
    const auto data = tiny_data(10, 5);
    for (auto variant : {LossVariant::simts, LossVariant::infonce}) {
        auto cfg = tiny_train_config(3, 11);
        cfg.batch_size = 4;
        cfg.variant = variant;
        SimTSModel a = init_params(tiny_config(), 7), b = init_params(tiny_config(), 7);
        const auto la = train(data, a, cfg), lb = train(data, b, cfg);
        CHECK(la == lb);
        CHECK(flat_params(a.parameters()) == flat_params(b.parameters()));
    }
}

TEST_CASE("epoch order is a seeded permutation") {
    const auto a = epoch_order(50, 1, 0);
    CHECK(a == epoch_order(50, 1, 0));
    CHECK(a != epoch_order(50, 1, 1));
    CHECK(a != epoch_order(50, 2, 0));
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("noise-free periodic data is learnable") {
    const auto data = periodic_windows();
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.window_len = 64;
    cfg.history_len = 32;
    SimTSModel model = init_params(trainability_config(), 0);
    const auto history = train(data, model, cfg);
    REQUIRE(history.size() == 50);
    CHECK(history.back() < -0.8);
    double prev = 1e300;
    for (std::size_t i = 0; i + 10 <= history.size(); ++i) {
        double avg = 0.0;
        for (std::size_t j = i; j < i + 10; ++j) avg += history[j];
        avg /= 10.0;
        CHECK(avg <= prev);
        prev = avg;
    }
}

TEST_CASE("checkpoint round-trip is bitwise") {
    const auto data = tiny_data(6, 6);
    auto cfg = tiny_train_config(2, 3);
    cfg.batch_size = 4;
    SimTSModel model = init_params(tiny_config(), 8);
    TrainState state;
    train(data, model, cfg, state);

    Checkpoint ckpt = make_checkpoint(model, cfg, state);
    ckpt.metadata["dataset"] = "unit";
    const auto path = scratch("roundtrip.stsc");
    save_checkpoint(path, ckpt);
    const Checkpoint back = load_checkpoint(path);
    CHECK(back.epoch == 2);
    CHECK(back.loss_history == state.loss_history);
    CHECK(back.metadata.at("dataset") == "unit");
    CHECK(checkpoint_config_text(back) == checkpoint_config_text(ckpt));

    const SimTSModel restored = restore_model(back);
    CHECK(flat_params(restored.parameters()) == flat_params(model.parameters()));
    CHECK(restore_state(back).velocity == state.velocity);

    // Saving the loaded checkpoint reproduces the file byte for byte.
    const auto again = scratch("roundtrip2.stsc");
    save_checkpoint(again, back);
    std::ifstream f1(path, std::ios::binary), f2(again, std::ios::binary);
    const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
}

TEST_CASE("corrupt and mismatched checkpoints are rejected") {
    SimTSModel model = init_params(tiny_config(), 9);
    const auto path = scratch("good.stsc");
    save_checkpoint(path, make_checkpoint(model, tiny_train_config(1), TrainState{}));
    std::ifstream in(path, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), {});

    const auto truncated = scratch("truncated.stsc");
    std::ofstream(truncated, std::ios::binary) << bytes.substr(0, bytes.size() - 17);
    try {
        load_checkpoint(truncated);
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }

    // Format version follows the 4-byte magic as a little-endian u32.
    std::string bumped = bytes;
    bumped[4] = static_cast<char>(Checkpoint::format_version + 1);
    const auto future = scratch("future.stsc");
    std::ofstream(future, std::ios::binary) << bumped;
    try {
        load_checkpoint(future);
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }

    CHECK_THROWS_AS(load_checkpoint(scratch("missing.stsc")), CheckpointError);
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run") {
    const auto data = tiny_data(9, 10);
    auto cfg = tiny_train_config(3, 5);
    cfg.batch_size = 4;

    SimTSModel straight = init_params(tiny_config(), 12);
    TrainState straight_state;
    train(data, straight, cfg, straight_state);

    auto first = cfg;
    first.epochs = 2;
    SimTSModel partial = init_params(tiny_config(), 12);
    TrainState partial_state;
    train(data, partial, first, partial_state);
    const auto path = scratch("resume.stsc");
    save_checkpoint(path, make_checkpoint(partial, first, partial_state));

    const Checkpoint ckpt = load_checkpoint(path);
    SimTSModel resumed = restore_model(ckpt);
    TrainState resumed_state = restore_state(ckpt);
    train(data, resumed, cfg, resumed_state);

    CHECK(flat_params(resumed.parameters()) == flat_params(straight.parameters()));
    CHECK(resumed_state.loss_history == straight_state.loss_history);
}

}
