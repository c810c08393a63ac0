#include "simts/model.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>

namespace simts {

std::size_t EncoderConfig::num_scales() const {
    std::size_t m = 0;
    while ((std::size_t{1} << m) <= history_len) ++m;
    return m;
}

void EncoderConfig::validate() const {
    if (in_channels == 0 || projection_dim == 0 || latent_dim == 0 || history_len == 0)
        throw std::invalid_argument("EncoderConfig: all dimensions must be >= 1");
}

std::string to_string(LossVariant v) {
    switch (v) {
        case LossVariant::simts: return "simts";
        case LossVariant::no_stop_gradient: return "no_stop_gradient";
        case LossVariant::rev_stop_gradient: return "rev_stop_gradient";
        case LossVariant::infonce: return "infonce";
    }
    return "unknown";
}

LossVariant parse_variant(const std::string& name) {
    for (auto v : {LossVariant::simts, LossVariant::no_stop_gradient, LossVariant::rev_stop_gradient,
                   LossVariant::infonce})
        if (to_string(v) == name) return v;
    throw std::invalid_argument("unknown loss variant '" + name +
                                "' (expected simts, no_stop_gradient, rev_stop_gradient or infonce)");
}

std::vector<Tensor> SimTSModel::encoder_parameters() const {
    std::vector<Tensor> out{encoder.projection_weight, encoder.projection_bias};
    for (std::size_t i = 0; i < encoder.scale_weights.size(); ++i) {
        out.push_back(encoder.scale_weights[i]);
        out.push_back(encoder.scale_biases[i]);
    }
    return out;
}

std::vector<Tensor> SimTSModel::parameters() const {
    auto out = encoder_parameters();
    out.insert(out.end(), {predictor.hidden_weight, predictor.hidden_bias, predictor.output_weight,
                           predictor.output_bias});
    return out;
}

double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

SimTSModel init_params(const ModelConfig& config, std::uint64_t seed) {
    const auto& enc = config.encoder;
    enc.validate();
    if (config.future_len == 0) throw std::invalid_argument("init_params: future_len must be >= 1");

    std::mt19937_64 rng(seed);
    auto uniform_weight = [&rng](Shape shape, std::size_t fan_in, std::size_t fan_out, std::string name) {
        const double a = xavier_bound(fan_in, fan_out);
        std::uniform_real_distribution<double> dist(-a, a);
        std::vector<double> data(shape_numel(shape));
        for (auto& v : data) v = dist(rng);
        return Tensor::parameter(std::move(shape), std::move(data), std::move(name));
    };
    auto zero_bias = [](std::size_t n, std::string name) {
        return Tensor::parameter({n}, std::vector<double>(n, 0.0), std::move(name));
    };

    SimTSModel model;
    model.config = config;
    const std::size_t c = enc.in_channels, dp = enc.projection_dim, dz = enc.latent_dim;
    model.encoder.projection_weight = uniform_weight({dp, c, 1}, c, dp, "encoder.projection.weight");
    model.encoder.projection_bias = zero_bias(dp, "encoder.projection.bias");
    for (std::size_t i = 0; i < enc.num_scales(); ++i) {
        const std::size_t k = enc.kernel_size(i);
        const std::string prefix = "encoder.scale" + std::to_string(i);
        model.encoder.scale_weights.push_back(uniform_weight({dz, dp, k}, dp * k, dz * k, prefix + ".weight"));
        model.encoder.scale_biases.push_back(zero_bias(dz, prefix + ".bias"));
    }
    const std::size_t out_dim = dz * config.future_len;
    model.predictor.hidden_weight = uniform_weight({dz, dz}, dz, dz, "predictor.hidden.weight");
    model.predictor.hidden_bias = zero_bias(dz, "predictor.hidden.bias");
    model.predictor.output_weight = uniform_weight({out_dim, dz}, dz, out_dim, "predictor.output.weight");
    model.predictor.output_bias = zero_bias(out_dim, "predictor.output.bias");
    return model;
}

namespace {

// Averaging causal convs over one input is a single causal conv with the
// averaged, right-aligned kernel, so each encoder pass runs one conv.
struct MergedEncoder {
    Tensor projection_weight, projection_bias, kernel, bias;
};

MergedEncoder merge(const EncoderParams& params) {
    return {params.projection_weight, params.projection_bias, merge_kernels(params.scale_weights),
            mean_over(params.scale_biases)};
}

Tensor project(const MergedEncoder& enc, const Tensor& x) {
    if (x.rank() != 2 || x.dim(0) != enc.projection_weight.dim(1))
        throw std::invalid_argument("encode: input " + shape_str(x.shape()) + " does not match " +
                                    std::to_string(enc.projection_weight.dim(1)) + " encoder input channels");
    return relu(conv1d(x, enc.projection_weight, enc.projection_bias));
}

Tensor encode(const MergedEncoder& enc, const Tensor& x) { return conv1d(project(enc, x), enc.kernel, enc.bias); }

Tensor encode_last(const MergedEncoder& enc, const Tensor& x) {
    return conv1d_last(project(enc, x), enc.kernel, enc.bias);
}

void check_predictor(const PredictorParams& params, std::size_t horizon) {
    const std::size_t latent = params.hidden_weight.dim(0);
    if (params.output_weight.dim(0) != latent * horizon)
        throw std::invalid_argument("predict_future: predictor emits " + std::to_string(params.output_weight.dim(0)) +
                                    " values, horizon " + std::to_string(horizon) + " needs " +
                                    std::to_string(latent * horizon));
}

}  // namespace

Tensor encode(const EncoderParams& params, const Tensor& x) { return encode(merge(params), x); }

Tensor encode_last(const EncoderParams& params, const Tensor& x) { return encode_last(merge(params), x); }

std::vector<Tensor> encode_last_each(const EncoderParams& params, std::span<const Tensor> inputs) {
    const MergedEncoder enc = merge(params);
    std::vector<Tensor> out;
    out.reserve(inputs.size());
    for (const auto& x : inputs) out.push_back(encode_last(enc, x));
    return out;
}

Tensor predict_future(const PredictorParams& params, const Tensor& z_last, std::size_t horizon) {
    check_predictor(params, horizon);
    const std::size_t latent = params.hidden_weight.dim(0);
    const Tensor hidden = relu(linear(z_last, params.hidden_weight, params.hidden_bias));
    return reshape(linear(hidden, params.output_weight, params.output_bias), {latent, horizon});
}

Tensor cosine_loss(const Tensor& pred, const Tensor& target, double eps) {
    if (pred.shape() != target.shape())
        throw std::invalid_argument("cosine_loss: prediction " + shape_str(pred.shape()) + " and target " +
                                    shape_str(target.shape()) + " differ");
    const Tensor dots = column_dots(l2_normalize_columns(pred, eps), l2_normalize_columns(target, eps));
    return scale(mean(dots), -1.0);
}

Tensor history_tensor(const WindowSample& s) {
    return Tensor::constant({s.channels, s.history_len}, s.history);
}

Tensor future_tensor(const WindowSample& s) {
    return Tensor::constant({s.channels, s.future_len}, s.future);
}

namespace {

void check_sample(const SimTSModel& model, const WindowSample& s) {
    const auto& cfg = model.config;
    if (s.channels != cfg.encoder.in_channels || s.future_len != cfg.future_len)
        throw std::invalid_argument("sample with " + std::to_string(s.channels) + " channels and future length " +
                                    std::to_string(s.future_len) + " does not match model (" +
                                    std::to_string(cfg.encoder.in_channels) + " channels, future length " +
                                    std::to_string(cfg.future_len) + ")");
}

}  // namespace

namespace {

// History codes and predictions for a whole batch: one matrix product per
// predictor layer, so the large output weight is read once per batch.
struct BatchForward {
    MergedEncoder encoder;
    std::vector<Tensor> predicted;
};

BatchForward forward_batch(const SimTSModel& model, std::span<const WindowSample> batch, bool track_history) {
    BatchForward fw{merge(model.encoder), {}};
    std::vector<Tensor> codes;
    codes.reserve(batch.size());
    {
        std::optional<NoGradGuard> frozen;
        if (!track_history) frozen.emplace();
        for (const auto& s : batch) {
            check_sample(model, s);
            codes.push_back(encode_last(fw.encoder, history_tensor(s)));
        }
    }
    const auto& pred = model.predictor;
    const std::size_t latent = pred.hidden_weight.dim(0), horizon = model.config.future_len;
    check_predictor(pred, horizon);
    const Tensor hidden = relu(linear_rows(stack_rows(codes), pred.hidden_weight, pred.hidden_bias));
    const Tensor out = linear_rows(hidden, pred.output_weight, pred.output_bias);
    for (std::size_t i = 0; i < batch.size(); ++i)
        fw.predicted.push_back(reshape(select_row(out, i), {latent, horizon}));
    return fw;
}

Tensor future_code(const MergedEncoder& enc, const WindowSample& s, bool track) {
    if (track) return encode(enc, future_tensor(s));
    NoGradGuard frozen;
    return encode(enc, future_tensor(s));
}

std::vector<Tensor> step_losses(const SimTSModel& model, std::span<const WindowSample> batch, LossVariant variant) {
    const BatchForward fw = forward_batch(model, batch, variant != LossVariant::rev_stop_gradient);
    std::vector<Tensor> losses;
    losses.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Tensor target = future_code(fw.encoder, batch[i], variant != LossVariant::simts);
        losses.push_back(cosine_loss(fw.predicted[i], target));
    }
    return losses;
}

}  // namespace

Tensor simts_step_loss(const SimTSModel& model, const WindowSample& sample, LossVariant variant) {
    if (variant == LossVariant::infonce)
        throw std::invalid_argument("simts_step_loss: infonce is a batch loss, use infonce_batch_loss");
    return step_losses(model, {&sample, 1}, variant).front();
}

Tensor infonce_batch_loss(const SimTSModel& model, std::span<const WindowSample> batch) {
    if (batch.empty()) throw std::invalid_argument("infonce_batch_loss: empty batch");
    const BatchForward fw = forward_batch(model, batch, true);
    std::vector<Tensor> predicted, encoded;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        predicted.push_back(l2_normalize_columns(fw.predicted[i]));
        NoGradGuard frozen;
        encoded.push_back(l2_normalize_columns(encode(fw.encoder, future_tensor(batch[i]))));
    }
    std::vector<Tensor> per_sample;
    for (std::size_t j = 0; j < batch.size(); ++j) {
        std::vector<Tensor> scores;
        for (std::size_t i = 0; i < batch.size(); ++i) scores.push_back(column_dots(predicted[j], encoded[i]));
        // −log(exp(s⁺)/Σ exp(s_i)) = logsumexp(s) − s⁺ per timestamp
        per_sample.push_back(sub(logsumexp_rows(stack_rows(scores)), scores[j]));
    }
    return mean(stack_rows(per_sample));
}

Tensor batch_loss(const SimTSModel& model, std::span<const WindowSample> batch, LossVariant variant) {
    if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
    if (variant == LossVariant::infonce) return infonce_batch_loss(model, batch);
    return mean_over(step_losses(model, batch, variant));
}

}  // namespace simts
