#include "simts/gradcheck.hpp"

#include "simts/model.hpp"
#include "simts/tensor.hpp"

namespace simts {

namespace {

constexpr double kStep = 1e-6;

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> out(n);
    for (auto& v : out) v = dist(rng);
    return out;
}

Tensor random_param(std::mt19937_64& rng, Shape shape, const std::string& name) {
    const auto n = shape_numel(shape);
    return Tensor::parameter(std::move(shape), uniform(rng, n), name);
}

// Random projection to a scalar so every output entry contributes to the check.
Tensor project_to_scalar(const Tensor& t, const Tensor& probe) { return sum(mul(t, probe)); }

std::size_t draw(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double check_unary(std::mt19937_64& rng, Shape shape, const std::function<Tensor(const Tensor&)>& op,
                   double lo = -1.0, double hi = 1.0) {
    const auto n = shape_numel(shape);
    const Tensor x = Tensor::parameter(shape, uniform(rng, n, lo, hi), "x");
    const Tensor y0 = [&] {
        NoGradGuard g;
        return op(x);
    }();
    const Tensor probe = Tensor::constant(y0.shape(), uniform(rng, y0.numel()));
    const std::vector<Tensor> inputs{x};
    return grad_check([&](std::span<const Tensor> a) { return project_to_scalar(op(a[0]), probe); }, inputs, kStep);
}

SimTSModel tiny_model(std::mt19937_64& rng) {
    ModelConfig cfg;
    cfg.encoder = {.in_channels = 2, .projection_dim = 4, .latent_dim = 8, .history_len = 8};
    cfg.future_len = 8;
    SimTSModel model = init_params(cfg, rng());
    // Non-zero biases exercise the bias gradients as well.
    for (auto& p : model.parameters()) {
        if (p.rank() != 1) continue;
        auto d = p.mutable_data();
        const auto values = uniform(rng, d.size(), -0.1, 0.1);
        std::copy(values.begin(), values.end(), d.begin());
    }
    return model;
}

WindowSample tiny_sample(std::mt19937_64& rng) {
    WindowSample s;
    s.channels = 2;
    s.history_len = 8;
    s.future_len = 8;
    s.history = uniform(rng, 16);
    s.future = uniform(rng, 16);
    return s;
}

using ModelLoss = std::function<Tensor(const SimTSModel&)>;

// `reference` recomputes the loss with stopped branches frozen at their values
// for the unperturbed parameters.
double check_model_loss(const SimTSModel& model, const ModelLoss& loss, const ModelLoss& reference) {
    const auto params = model.parameters();
    return grad_check([&](std::span<const Tensor>) { return loss(model); },
                      [&](std::span<const Tensor>) { return reference(model); }, params, kStep);
}

Tensor frozen(const Tensor& t) {
    const auto d = t.data();
    return Tensor::constant(t.shape(), std::vector<double>(d.begin(), d.end()));
}

double check_step_loss(std::mt19937_64& rng, LossVariant variant) {
    const WindowSample sample = tiny_sample(rng);
    const SimTSModel model = tiny_model(rng);
    Tensor history_code, future_code;
    {
        NoGradGuard g;
        history_code = frozen(encode_last(model.encoder, history_tensor(sample)));
        future_code = frozen(encode(model.encoder, future_tensor(sample)));
    }
    const ModelLoss reference = [&](const SimTSModel& m) {
        const Tensor z_last = variant == LossVariant::rev_stop_gradient
                                  ? history_code
                                  : encode_last(m.encoder, history_tensor(sample));
        const Tensor z_future =
            variant == LossVariant::simts ? future_code : encode(m.encoder, future_tensor(sample));
        return cosine_loss(predict_future(m.predictor, z_last, sample.future_len), z_future);
    };
    return check_model_loss(model, [&](const SimTSModel& m) { return simts_step_loss(m, sample, variant); },
                            reference);
}

double check_infonce(std::mt19937_64& rng) {
    std::vector<WindowSample> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(tiny_sample(rng));
    const SimTSModel model = tiny_model(rng);
    std::vector<Tensor> targets;
    {
        NoGradGuard g;
        for (const auto& s : batch)
            targets.push_back(frozen(l2_normalize_columns(encode(model.encoder, future_tensor(s)))));
    }
    const ModelLoss reference = [&](const SimTSModel& m) {
        std::vector<Tensor> per_sample;
        for (std::size_t j = 0; j < batch.size(); ++j) {
            const Tensor pred = l2_normalize_columns(
                predict_future(m.predictor, encode_last(m.encoder, history_tensor(batch[j])), batch[j].future_len));
            std::vector<Tensor> scores;
            for (const auto& t : targets) scores.push_back(column_dots(pred, t));
            per_sample.push_back(sub(logsumexp_rows(stack_rows(scores)), scores[j]));
        }
        return mean(stack_rows(per_sample));
    };
    return check_model_loss(model, [&](const SimTSModel& m) { return infonce_batch_loss(m, batch); }, reference);
}

}  // namespace

std::vector<GradCheckCase> default_gradcheck_cases() {
    std::vector<GradCheckCase> cases;
    cases.push_back({"conv1d", [](std::mt19937_64& rng) {
                         const std::size_t cin = draw(rng, 1, 3), cout = draw(rng, 1, 3), k = draw(rng, 1, 5),
                                           len = draw(rng, 1, 9);
                         const std::vector<Tensor> in{random_param(rng, {cin, len}, "x"),
                                                      random_param(rng, {cout, cin, k}, "w"),
                                                      random_param(rng, {cout}, "b")};
                         const Tensor probe = Tensor::constant({cout, len}, uniform(rng, cout * len));
                         return grad_check([&](std::span<const Tensor> a) {
                             return project_to_scalar(conv1d(a[0], a[1], a[2]), probe);
                         }, in, kStep);
                     }});
    cases.push_back({"conv1d_last", [](std::mt19937_64& rng) {
                         const std::size_t cin = draw(rng, 1, 3), cout = draw(rng, 1, 3), k = draw(rng, 1, 8),
                                           len = draw(rng, 1, 9);
                         const std::vector<Tensor> in{random_param(rng, {cin, len}, "x"),
                                                      random_param(rng, {cout, cin, k}, "w"),
                                                      random_param(rng, {cout}, "b")};
                         const Tensor probe = Tensor::constant({cout}, uniform(rng, cout));
                         return grad_check([&](std::span<const Tensor> a) {
                             return project_to_scalar(conv1d_last(a[0], a[1], a[2]), probe);
                         }, in, kStep);
                     }});
    cases.push_back({"linear", [](std::mt19937_64& rng) {
                         const std::size_t m = draw(rng, 1, 5), n = draw(rng, 1, 5);
                         const std::vector<Tensor> in{random_param(rng, {n}, "x"), random_param(rng, {m, n}, "w"),
                                                      random_param(rng, {m}, "b")};
                         const Tensor probe = Tensor::constant({m}, uniform(rng, m));
                         return grad_check([&](std::span<const Tensor> a) {
                             return project_to_scalar(linear(a[0], a[1], a[2]), probe);
                         }, in, kStep);
                     }});
    cases.push_back({"linear_rows", [](std::mt19937_64& rng) {
                         const std::size_t rows = draw(rng, 1, 4), m = draw(rng, 1, 5), n = draw(rng, 1, 5);
                         const std::vector<Tensor> in{random_param(rng, {rows, n}, "x"),
                                                      random_param(rng, {m, n}, "w"), random_param(rng, {m}, "b")};
                         const Tensor probe = Tensor::constant({rows, m}, uniform(rng, rows * m));
                         return grad_check([&](std::span<const Tensor> a) {
                             return project_to_scalar(linear_rows(a[0], a[1], a[2]), probe);
                         }, in, kStep);
                     }});
    cases.push_back({"merge_kernels", [](std::mt19937_64& rng) {
                         const std::size_t count = draw(rng, 1, 4), cout = draw(rng, 1, 3), cin = draw(rng, 1, 3);
                         std::vector<Tensor> in;
                         std::size_t widest = 0;
                         for (std::size_t i = 0; i < count; ++i) {
                             const std::size_t k = draw(rng, 1, 5);
                             widest = std::max(widest, k);
                             in.push_back(random_param(rng, {cout, cin, k}, "w"));
                         }
                         const Tensor probe = Tensor::constant({cout, cin, widest}, uniform(rng, cout * cin * widest));
                         return grad_check([&](std::span<const Tensor> a) {
                             return project_to_scalar(merge_kernels(a), probe);
                         }, in, kStep);
                     }});
    cases.push_back({"relu", [](std::mt19937_64& rng) {
                         // Inputs kept at least 0.1 away from the kink.
                         const std::size_t n = draw(rng, 1, 12);
                         std::vector<double> x = uniform(rng, n, 0.1, 1.0);
                         for (auto& v : x)
                             if (rng() % 2) v = -v;
                         const std::vector<Tensor> in{Tensor::parameter({n}, x, "x")};
                         const Tensor probe = Tensor::constant({n}, uniform(rng, n));
                         return grad_check([&](std::span<const Tensor> a) { return project_to_scalar(relu(a[0]), probe); },
                                           in, kStep);
                     }});
    cases.push_back({"mean_over", [](std::mt19937_64& rng) {
                         const std::size_t count = draw(rng, 1, 4), n = draw(rng, 1, 6);
                         std::vector<Tensor> in;
                         for (std::size_t i = 0; i < count; ++i) in.push_back(random_param(rng, {n}, "x"));
                         const Tensor probe = Tensor::constant({n}, uniform(rng, n));
                         return grad_check([&](std::span<const Tensor> a) { return project_to_scalar(mean_over(a), probe); },
                                           in, kStep);
                     }});
    cases.push_back({"l2_normalize_columns", [](std::mt19937_64& rng) {
                         return check_unary(rng, {draw(rng, 1, 5), draw(rng, 1, 5)},
                                            [](const Tensor& x) { return l2_normalize_columns(x, 1e-8); });
                     }});
    cases.push_back({"reshape", [](std::mt19937_64& rng) {
                         const std::size_t r = draw(rng, 1, 4), c = draw(rng, 1, 4);
                         return check_unary(rng, {r * c}, [r, c](const Tensor& x) { return reshape(x, {r, c}); });
                     }});
    cases.push_back({"scale", [](std::mt19937_64& rng) {
                         return check_unary(rng, {draw(rng, 1, 6)}, [](const Tensor& x) { return scale(x, -2.5); });
                     }});
    cases.push_back({"sum", [](std::mt19937_64& rng) {
                         return check_unary(rng, {draw(rng, 1, 6)}, [](const Tensor& x) { return sum(x); });
                     }});
    cases.push_back({"mean", [](std::mt19937_64& rng) {
                         return check_unary(rng, {draw(rng, 1, 6)}, [](const Tensor& x) { return mean(x); });
                     }});
    cases.push_back({"logsumexp_rows", [](std::mt19937_64& rng) {
                         return check_unary(rng, {draw(rng, 1, 5), draw(rng, 1, 5)},
                                            [](const Tensor& x) { return logsumexp_rows(x); }, -3.0, 3.0);
                     }});
    auto binary = [](const char* name, Tensor (*op)(const Tensor&, const Tensor&), bool matrix) {
        return GradCheckCase{name, [op, matrix](std::mt19937_64& rng) {
                                 const Shape shape = matrix ? Shape{draw(rng, 1, 4), draw(rng, 1, 4)}
                                                            : Shape{draw(rng, 1, 6)};
                                 const std::vector<Tensor> in{random_param(rng, shape, "a"),
                                                              random_param(rng, shape, "b")};
                                 const Tensor out0 = [&] {
                                     NoGradGuard g;
                                     return op(in[0], in[1]);
                                 }();
                                 const Tensor probe = Tensor::constant(out0.shape(), uniform(rng, out0.numel()));
                                 return grad_check([&](std::span<const Tensor> a) {
                                     return project_to_scalar(op(a[0], a[1]), probe);
                                 }, in, kStep);
                             }};
    };
    cases.push_back(binary("add", &add, false));
    cases.push_back(binary("sub", &sub, false));
    cases.push_back(binary("mul", &mul, false));
    cases.push_back(binary("column_dots", &column_dots, true));
    cases.push_back({"stack_rows", [](std::mt19937_64& rng) {
                         const std::size_t count = draw(rng, 1, 4), n = draw(rng, 1, 5);
                         std::vector<Tensor> in;
                         for (std::size_t i = 0; i < count; ++i) in.push_back(random_param(rng, {n}, "x"));
                         const Tensor probe = Tensor::constant({count, n}, uniform(rng, count * n));
                         return grad_check([&](std::span<const Tensor> a) { return project_to_scalar(stack_rows(a), probe); },
                                           in, kStep);
                     }});
    cases.push_back({"select_row", [](std::mt19937_64& rng) {
                         const std::size_t rows = draw(rng, 1, 4), row = draw(rng, 0, rows - 1);
                         return check_unary(rng, {rows, draw(rng, 1, 5)},
                                            [row](const Tensor& x) { return select_row(x, row); });
                     }});
    cases.push_back({"cosine_loss", [](std::mt19937_64& rng) {
                         const Shape shape{draw(rng, 1, 5), draw(rng, 1, 5)};
                         const std::vector<Tensor> in{random_param(rng, shape, "pred"),
                                                      random_param(rng, shape, "target")};
                         return grad_check([](std::span<const Tensor> a) { return cosine_loss(a[0], a[1]); }, in, kStep);
                     }});
    for (auto variant : {LossVariant::simts, LossVariant::no_stop_gradient, LossVariant::rev_stop_gradient}) {
        cases.push_back({"simts_loss[" + to_string(variant) + "]",
                         [variant](std::mt19937_64& rng) { return check_step_loss(rng, variant); }});
    }
    cases.push_back({"infonce_loss", check_infonce});
    return cases;
}

std::vector<GradCheckResult> run_gradcheck(std::uint64_t seed, const std::vector<GradCheckCase>& cases) {
    std::vector<GradCheckResult> results;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        std::seed_seq seq{seed, static_cast<std::uint64_t>(i)};
        std::mt19937_64 rng(seq);
        results.push_back({cases[i].name, cases[i].run(rng)});
    }
    return results;
}

}  // namespace simts
