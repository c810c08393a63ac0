#include "simts/model.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace simts;
using namespace simts::test;

namespace {

// Plain-loop reference encoder, written without the tensor library.
std::vector<double> reference_encode(const SimTSModel& m, const std::vector<double>& x, std::size_t channels,
                                     std::size_t len) {
    const auto& e = m.config.encoder;
    const std::size_t dp = e.projection_dim, latent = e.latent_dim;
    std::vector<double> h(dp * len);
    const auto pw = m.encoder.projection_weight.data();
    const auto pb = m.encoder.projection_bias.data();
    for (std::size_t o = 0; o < dp; ++o)
        for (std::size_t t = 0; t < len; ++t) {
            double acc = pb[o];
            for (std::size_t c = 0; c < channels; ++c) acc += pw[o * channels + c] * x[c * len + t];
            h[o * len + t] = std::max(0.0, acc);
        }
    const std::size_t scales = m.encoder.scale_weights.size();
    std::vector<double> z(latent * len, 0.0);
    for (std::size_t s = 0; s < scales; ++s) {
        const auto w = m.encoder.scale_weights[s].data();
        const auto b = m.encoder.scale_biases[s].data();
        const std::size_t k = std::size_t{1} << s;
        for (std::size_t o = 0; o < latent; ++o)
            for (std::size_t t = 0; t < len; ++t) {
                double acc = b[o];
                for (std::size_t i = 0; i < dp; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        // tap j looks back k−1−j steps; positions before 0 are zero padding
                        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(k - 1);
                        if (src >= 0) acc += w[(o * dp + i) * k + j] * h[i * len + static_cast<std::size_t>(src)];
                    }
                z[o * len + t] += acc / static_cast<double>(scales);
            }
    }
    return z;
}

double cosine_oracle(std::span<const double> a, std::span<const double> b, std::size_t rows, std::size_t cols) {
    double total = 0.0;
    for (std::size_t t = 0; t < cols; ++t) {
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t r = 0; r < rows; ++r) {
            ab += a[r * cols + t] * b[r * cols + t];
            aa += a[r * cols + t] * a[r * cols + t];
            bb += b[r * cols + t] * b[r * cols + t];
        }
        total += ab / (std::max(std::sqrt(aa), 1e-8) * std::max(std::sqrt(bb), 1e-8));
    }
    return -total / static_cast<double>(cols);
}

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_SUITE("simts_model") {

TEST_CASE("default configuration shapes") {
    ModelConfig cfg;
    cfg.encoder.in_channels = 7;
    CHECK(cfg.encoder.num_scales() == 8);
    for (std::size_t i = 0; i < 8; ++i) CHECK(cfg.encoder.kernel_size(i) == (std::size_t{1} << i));

    const SimTSModel model = init_params(cfg, 0);
    REQUIRE(model.encoder.scale_weights.size() == 8);
    for (std::size_t i = 0; i < 8; ++i)
        CHECK(model.encoder.scale_weights[i].shape() == Shape{320, 64, std::size_t{1} << i});
    CHECK(model.encoder.projection_weight.shape() == Shape{64, 7, 1});

    std::mt19937_64 rng(1);
    const WindowSample s = random_sample(rng, 7, 201, 201);
    NoGradGuard g;
    const Tensor zh = encode(model.encoder, history_tensor(s));
    CHECK(zh.shape() == Shape{320, 201});
    const Tensor pred = predict_future(model.predictor, encode_last(model.encoder, history_tensor(s)), 201);
    CHECK(pred.shape() == Shape{320, 201});
    CHECK(encode(model.encoder, future_tensor(s)).shape() == Shape{320, 201});
}

TEST_CASE("scale count is floor(log2 K) + 1") {
    for (std::size_t k = 1; k <= 300; ++k) {
        EncoderConfig e;
        e.history_len = k;
        CHECK(e.num_scales() == static_cast<std::size_t>(std::floor(std::log2(static_cast<double>(k)))) + 1);
    }
}

TEST_CASE("encode matches the reference loops") {
    std::mt19937_64 rng(2);
    const ModelConfig cfg = tiny_config(3, 13, 5, 6, 4);
    SimTSModel model = init_params(cfg, 7);
    randomize_biases(model, rng);
    const auto x = random_values(rng, 3 * 13);
    NoGradGuard g;
    const Tensor z = encode(model.encoder, Tensor::constant({3, 13}, x));
    const auto expected = reference_encode(model, x, 3, 13);
    CHECK(max_rel_diff(z.data(), expected) < 1e-12);

    const Tensor last = encode_last(model.encoder, Tensor::constant({3, 13}, x));
    for (std::size_t o = 0; o < 6; ++o) CHECK(std::abs(last.data()[o] - expected[o * 13 + 12]) < 1e-12);
}

TEST_CASE("encoder is causal") {
    std::mt19937_64 rng(3);
    const ModelConfig cfg = tiny_config(2, 16, 4, 8, 4);
    SimTSModel model = init_params(cfg, 1);
    randomize_biases(model, rng);
    auto x = random_values(rng, 2 * 16);
    NoGradGuard g;
    const Tensor before = encode(model.encoder, Tensor::constant({2, 16}, x));
    for (std::size_t tau = 0; tau < 16; ++tau) {
        auto y = x;
        y[tau] += 3.0;
        y[16 + tau] -= 2.0;
        const Tensor after = encode(model.encoder, Tensor::constant({2, 16}, y));
        for (std::size_t o = 0; o < 8; ++o)
            for (std::size_t t = 0; t < tau; ++t) CHECK(after.at(o * 16 + t) == before.at(o * 16 + t));
    }
}

TEST_CASE("zero input with zero biases encodes to zero") {
    const SimTSModel model = init_params(tiny_config(), 4);
    NoGradGuard g;
    const Tensor z = encode(model.encoder, Tensor::zeros({2, 8}));
    for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("predictor output shape, zero weights and purity") {
    std::mt19937_64 rng(5);
    SimTSModel model = init_params(tiny_config(2, 8, 6, 8, 4), 5);
    const Tensor z = Tensor::constant({8}, random_values(rng, 8));
    NoGradGuard g;
    const Tensor a = predict_future(model.predictor, z, 6);
    const Tensor b = predict_future(model.predictor, z, 6);
    CHECK(a.shape() == Shape{8, 6});
    CHECK(to_vec(a) == to_vec(b));

    for (auto d = model.predictor.output_weight.mutable_data(); auto& v : d) v = 0.0;
    const auto bias = random_values(rng, 48);
    std::copy(bias.begin(), bias.end(), model.predictor.output_bias.mutable_data().begin());
    const Tensor c = predict_future(model.predictor, z, 6);
    // Row-major reshape: entry (r, t) is bias[r * 6 + t].
    for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t t = 0; t < 6; ++t) CHECK(c.at(r * 6 + t) == bias[r * 6 + t]);
}

TEST_CASE("cosine loss examples") {
    std::mt19937_64 rng(6);
    const auto a = random_values(rng, 12);
    std::vector<double> neg(a);
    for (auto& v : neg) v = -v;
    NoGradGuard g;
    const Tensor ta = Tensor::constant({3, 4}, a);
    CHECK(cosine_loss(ta, ta).item() == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(cosine_loss(ta, Tensor::constant({3, 4}, neg)).item() == doctest::Approx(1.0).epsilon(1e-12));

    const Tensor e1 = Tensor::constant({2, 1}, {1.0, 0.0});
    const Tensor e2 = Tensor::constant({2, 1}, {0.0, 5.0});
    CHECK(cosine_loss(e1, e2).item() == 0.0);

    std::vector<double> scaled(a);
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= 3.7 + static_cast<double>(i % 4);
    const auto b = random_values(rng, 12);
    const Tensor tb = Tensor::constant({3, 4}, b);
    // Scaling a whole column leaves its cosine unchanged.
    std::vector<double> col_scaled(a);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t t = 0; t < 4; ++t) col_scaled[r * 4 + t] *= 0.5 + static_cast<double>(t);
    CHECK(cosine_loss(Tensor::constant({3, 4}, col_scaled), tb).item() ==
          doctest::Approx(cosine_loss(ta, tb).item()).epsilon(1e-12));
    CHECK(cosine_loss(ta, tb).item() == doctest::Approx(cosine_oracle(a, b, 3, 4)).epsilon(1e-12));
    CHECK_THROWS(cosine_loss(ta, Tensor::constant({4, 3}, b)));
}

TEST_CASE("encode_last_each matches encode_last per input") {
    std::mt19937_64 rng(13);
    SimTSModel model = init_params(tiny_config(), 6);
    randomize_biases(model, rng);
    std::vector<Tensor> inputs;
    for (std::size_t len : {3, 8, 12}) inputs.push_back(Tensor::constant({2, len}, random_values(rng, 2 * len)));
    NoGradGuard g;
    const auto each = encode_last_each(model.encoder, inputs);
    REQUIRE(each.size() == inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i)
        CHECK(to_vec(each[i]) == to_vec(encode_last(model.encoder, inputs[i])));
}

TEST_CASE("batch loss is the mean of the step losses") {
    std::mt19937_64 rng(12);
    SimTSModel model = init_params(tiny_config(), 4);
    randomize_biases(model, rng);
    std::vector<WindowSample> batch;
    for (int i = 0; i < 5; ++i) batch.push_back(random_sample(rng, 2, 8, 8));
    for (auto v : {LossVariant::simts, LossVariant::no_stop_gradient, LossVariant::rev_stop_gradient}) {
        NoGradGuard g;
        double mean_step = 0.0;
        for (const auto& s : batch) mean_step += simts_step_loss(model, s, v).item() / 5.0;
        CHECK(batch_loss(model, batch, v).item() == doctest::Approx(mean_step).epsilon(1e-12));
    }
}

TEST_CASE("step losses stay within [-1, 1]") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        SimTSModel model = init_params(tiny_config(), rng());
        randomize_biases(model, rng);
        const WindowSample s = random_sample(rng, 2, 8, 8);
        for (auto v : {LossVariant::simts, LossVariant::no_stop_gradient, LossVariant::rev_stop_gradient}) {
            NoGradGuard g;
            const double loss = simts_step_loss(model, s, v).item();
            CHECK(loss >= -1.0 - 1e-12);
            CHECK(loss <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("stop-gradient: encoder gradient equals the frozen-future oracle") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 3; ++trial) {
        SimTSModel model = init_params(tiny_config(), rng());
        randomize_biases(model, rng);
        const WindowSample s = random_sample(rng, 2, 8, 8);
        auto params = model.parameters();
        const GradMap grads = backward(simts_step_loss(model, s, LossVariant::simts));

        std::vector<double> future_code;
        {
            NoGradGuard g;
            future_code = to_vec(encode(model.encoder, future_tensor(s)));
        }
        const auto theta = flat_params(params);
        auto frozen_loss = [&](const std::vector<double>& flat) {
            set_flat_params(params, flat);
            NoGradGuard g;
            const Tensor pred = predict_future(model.predictor, encode_last(model.encoder, history_tensor(s)), 8);
            return cosine_oracle(pred.data(), future_code, 8, 8);
        };
        const auto numeric = numeric_gradient(frozen_loss, theta, 1e-6);
        set_flat_params(params, theta);

        std::size_t off = 0;
        for (const auto& p : model.encoder_parameters()) {
            const auto it = grads.find(p.name());
            REQUIRE(it != grads.end());
            CHECK(max_rel_diff(it->second, std::span<const double>(numeric).subspan(off, p.numel())) < 1e-5);
            off += p.numel();
        }
    }
}

TEST_CASE("without stop-gradient the future branch contributes") {
    std::mt19937_64 rng(9);
    SimTSModel model = init_params(tiny_config(), 3);
    randomize_biases(model, rng);
    const WindowSample s = random_sample(rng, 2, 8, 8);
    const GradMap stopped = backward(simts_step_loss(model, s, LossVariant::simts));
    const GradMap full = backward(simts_step_loss(model, s, LossVariant::no_stop_gradient));
    double diff = 0.0;
    for (const auto& p : model.encoder_parameters()) {
        const auto& a = stopped.at(p.name());
        const auto& b = full.at(p.name());
        for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
    }
    CHECK(diff > 1e-6);

    // The predictor sees identical inputs either way.
    for (const auto* p : {&model.predictor.hidden_weight, &model.predictor.output_weight})
        CHECK(max_rel_diff(stopped.at(p->name()), full.at(p->name())) < 1e-12);
}

TEST_CASE("reverse stop-gradient leaves the predictor input constant") {
    std::mt19937_64 rng(10);
    SimTSModel model = init_params(tiny_config(), 4);
    randomize_biases(model, rng);
    const WindowSample s = random_sample(rng, 2, 8, 8);
    const GradMap rev = backward(simts_step_loss(model, s, LossVariant::rev_stop_gradient));
    const GradMap full = backward(simts_step_loss(model, s, LossVariant::no_stop_gradient));
    const GradMap stopped = backward(simts_step_loss(model, s, LossVariant::simts));
    // Encoder gradient under rev = full − (history part) = full − stopped.
    for (const auto& p : model.encoder_parameters()) {
        const auto& r = rev.contains(p.name()) ? rev.at(p.name()) : std::vector<double>(p.numel(), 0.0);
        std::vector<double> expected(p.numel());
        for (std::size_t i = 0; i < expected.size(); ++i)
            expected[i] = full.at(p.name())[i] - stopped.at(p.name())[i];
        CHECK(max_rel_diff(r, expected) < 1e-10);
    }
}

TEST_CASE("InfoNCE matches a direct computation") {
    std::mt19937_64 rng(11);
    SimTSModel model = init_params(tiny_config(), 5);
    randomize_biases(model, rng);
    std::vector<WindowSample> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(random_sample(rng, 2, 8, 8));

    NoGradGuard g;
    std::vector<std::vector<double>> pred, code;
    auto unit_columns = [](std::vector<double> v, std::size_t rows, std::size_t cols) {
        for (std::size_t t = 0; t < cols; ++t) {
            double n = 0;
            for (std::size_t r = 0; r < rows; ++r) n += v[r * cols + t] * v[r * cols + t];
            n = std::max(std::sqrt(n), 1e-8);
            for (std::size_t r = 0; r < rows; ++r) v[r * cols + t] /= n;
        }
        return v;
    };
    for (const auto& s : batch) {
        pred.push_back(unit_columns(
            to_vec(predict_future(model.predictor, encode_last(model.encoder, history_tensor(s)), 8)), 8, 8));
        code.push_back(unit_columns(to_vec(encode(model.encoder, future_tensor(s))), 8, 8));
    }
    double total = 0.0;
    for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t t = 0; t < 8; ++t) {
            std::vector<double> scores(4);
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t r = 0; r < 8; ++r) scores[i] += pred[j][r * 8 + t] * code[i][r * 8 + t];
            double denom = 0.0;
            for (double sc : scores) denom += std::exp(sc);
            total += -std::log(std::exp(scores[j]) / denom);
        }
    const double expected = total / 32.0;
    const double got = infonce_batch_loss(model, batch).item();
    CHECK(got == doctest::Approx(expected).epsilon(1e-12));
    CHECK(got >= 0.0);
}

TEST_CASE("InfoNCE small batches") {
    std::mt19937_64 rng(12);
    SimTSModel model = init_params(tiny_config(), 6);
    const std::vector<WindowSample> one{random_sample(rng, 2, 8, 8)};
    NoGradGuard g;
    CHECK(std::abs(infonce_batch_loss(model, one).item()) < 1e-15);

    // Two identical samples: every score pair is equal, so the loss is log 2.
    const std::vector<WindowSample> twins{one[0], one[0]};
    CHECK(infonce_batch_loss(model, twins).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("InfoNCE two-sample closed form") {
    // Positive score 1 and negative score 0 give −log(e / (e + 1)).
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    const Tensor pred = Tensor::constant({2, 1}, {1.0, 0.0});
    const Tensor pos = Tensor::constant({2, 1}, {1.0, 0.0});
    const Tensor neg = Tensor::constant({2, 1}, {0.0, 1.0});
    const std::vector<Tensor> scores{column_dots(pred, pos), column_dots(pred, neg)};
    const Tensor loss = sub(logsumexp_rows(stack_rows(scores)), scores[0]);
    CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("initialization is deterministic and bounded") {
    ModelConfig cfg;
    cfg.encoder.in_channels = 7;
    const SimTSModel a = init_params(cfg, 42);
    const SimTSModel b = init_params(cfg, 42);
    const SimTSModel c = init_params(cfg, 43);
    const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(to_vec(pa[i]) == to_vec(pb[i]));
        any_diff = any_diff || to_vec(pa[i]) != to_vec(pc[i]);
    }
    CHECK(any_diff);

    // Scale 0 weight: 320 × 64 × 1, fans 64 and 320.
    CHECK(xavier_bound(64, 320) == doctest::Approx(std::sqrt(6.0 / 384.0)));
    for (const auto& p : pa) {
        if (p.rank() == 1) {
            for (double v : p.data()) CHECK(v == 0.0);
            continue;
        }
        const auto& s = p.shape();
        const std::size_t k = s.size() == 3 ? s[2] : 1;
        const double bound = xavier_bound(s[1] * k, s[0] * k);
        double worst = 0.0;
        for (double v : p.data()) worst = std::max(worst, std::abs(v));
        CHECK(worst <= bound);
        CHECK(worst > 0.5 * bound);
    }
}

TEST_CASE("full-size forward and backward give finite gradients") {
    ModelConfig cfg;
    cfg.encoder.in_channels = 7;
    const SimTSModel model = init_params(cfg, 1);
    std::mt19937_64 rng(13);
    const WindowSample s = random_sample(rng, 7, 201, 201);
    const Tensor loss = simts_step_loss(model, s, LossVariant::simts);
    CHECK(std::isfinite(loss.item()));
    const GradMap grads = backward(loss);
    for (const auto& p : model.parameters()) {
        const auto it = grads.find(p.name());
        REQUIRE(it != grads.end());
        CHECK(std::all_of(it->second.begin(), it->second.end(), [](double g) { return std::isfinite(g); }));
    }
}

TEST_CASE("variant names round-trip") {
    for (auto v : {LossVariant::simts, LossVariant::no_stop_gradient, LossVariant::rev_stop_gradient,
                   LossVariant::infonce})
        CHECK(parse_variant(to_string(v)) == v);
    CHECK_THROWS(parse_variant("simsiam"));
}

}
