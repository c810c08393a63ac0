#pragma once

#include "simts/datasets.hpp"
#include "simts/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace simts {

struct EncoderConfig {
    std::size_t in_channels = 7;
    std::size_t projection_dim = 64;
    std::size_t latent_dim = 320;
    std::size_t history_len = 201;

    /// floor(log2 K) + 1
    std::size_t num_scales() const;
    std::size_t kernel_size(std::size_t scale) const { return std::size_t{1} << scale; }
    void validate() const;
};

struct ModelConfig {
    EncoderConfig encoder;
    std::size_t future_len = 201;  // T − K
};

struct EncoderParams {
    Tensor projection_weight;  // D_p × C × 1
    Tensor projection_bias;    // D_p
    std::vector<Tensor> scale_weights;  // scale i: C′ × D_p × 2^i
    std::vector<Tensor> scale_biases;   // C′
};

/// Two-layer MLP on the last history column; output reshaped row-major to C′×(T−K).
struct PredictorParams {
    Tensor hidden_weight;  // C′ × C′
    Tensor hidden_bias;
    Tensor output_weight;  // (C′·(T−K)) × C′
    Tensor output_bias;
};

enum class LossVariant { simts, no_stop_gradient, rev_stop_gradient, infonce };

std::string to_string(LossVariant v);
LossVariant parse_variant(const std::string& name);

struct SimTSModel {
    ModelConfig config;
    EncoderParams encoder;
    PredictorParams predictor;

    /// All learnable tensors in a fixed order (encoder first).
    std::vector<Tensor> parameters() const;
    std::vector<Tensor> encoder_parameters() const;
};

/// Xavier-uniform weights (a = sqrt(6/(fan_in+fan_out)), fan counts include
/// the kernel width), zero biases. Deterministic in the seed.
SimTSModel init_params(const ModelConfig& config, std::uint64_t seed);

double xavier_bound(std::size_t fan_in, std::size_t fan_out);

/// Z = mean_i scale_conv_i(relu(projection(x))) for x of shape C×L; Z is C′×L and causal.
Tensor encode(const EncoderParams& params, const Tensor& x);

/// Last column of encode(params, x), shape {C′}, without computing the others.
Tensor encode_last(const EncoderParams& params, const Tensor& x);

/// encode_last over several inputs, sharing the merged scale kernel.
std::vector<Tensor> encode_last_each(const EncoderParams& params, std::span<const Tensor> inputs);

Tensor predict_future(const PredictorParams& params, const Tensor& z_last, std::size_t horizon);

/// Negative mean cosine similarity between matching columns, in [−1, 1].
Tensor cosine_loss(const Tensor& pred, const Tensor& target, double eps = 1e-8);

/// Loss of one (history, future) sample under a non-contrastive variant.
Tensor simts_step_loss(const SimTSModel& model, const WindowSample& sample, LossVariant variant);

/// InfoNCE over a batch: other samples' encoded futures at the same timestamp act as negatives.
Tensor infonce_batch_loss(const SimTSModel& model, std::span<const WindowSample> batch);

/// Mean loss over a batch for any variant.
Tensor batch_loss(const SimTSModel& model, std::span<const WindowSample> batch, LossVariant variant);

Tensor history_tensor(const WindowSample& sample);
Tensor future_tensor(const WindowSample& sample);

}  // namespace simts
