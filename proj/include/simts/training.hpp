#pragma once

#include "simts/datasets.hpp"
#include "simts/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace simts {

struct TrainConfig {
    double learning_rate = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0001;
    std::size_t epochs = 500;
    std::size_t batch_size = 8;
    LossVariant variant = LossVariant::simts;
    std::uint64_t seed = 0;
    std::size_t window_len = 402;   // T
    std::size_t history_len = 201;  // K
    std::size_t stride = 1;

    void validate() const;
};

/// Momentum buffers keyed by parameter name; absent entries count as zero.
using VelocityMap = std::map<std::string, std::vector<double>>;

/// Classic momentum SGD with the L2 term folded into the gradient:
/// g' = g + wd·θ;  v ← μ·v + g';  θ ← θ − lr·v.
/// Parameters without an entry in `grads` are treated as having zero gradient.
void sgd_step(std::span<Tensor> params, const GradMap& grads, VelocityMap& velocity, const TrainConfig& cfg);

/// Same update with each parameter's accumulated grad() as the gradient.
void sgd_step(std::span<Tensor> params, VelocityMap& velocity, const TrainConfig& cfg);

struct TrainState {
    VelocityMap velocity;
    std::size_t epoch = 0;  // completed epochs
    std::vector<double> loss_history;
};

/// Called after every epoch with (epoch index, mean loss).
using EpochCallback = std::function<void(std::size_t, double)>;

/// Runs cfg.epochs − state.epoch further epochs over `data`. Each epoch
/// reshuffles with a generator seeded by (cfg.seed, epoch), so a resumed run
/// reproduces an uninterrupted one exactly.
void train(const std::vector<WindowSample>& data, SimTSModel& model, const TrainConfig& cfg, TrainState& state,
           const EpochCallback& on_epoch = {});

/// Convenience wrapper starting from a fresh state; returns the per-epoch mean losses.
std::vector<double> train(const std::vector<WindowSample>& data, SimTSModel& model, const TrainConfig& cfg);

/// Sample order used for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    static constexpr std::uint32_t format_version = 1;

    ModelConfig model_config;
    TrainConfig train_config;
    std::size_t epoch = 0;
    std::vector<double> loss_history;
    /// Extra text entries written into the config block (e.g. dataset metadata).
    std::map<std::string, std::string> metadata;
    /// Parameters, then momentum buffers under "velocity/<name>".
    std::vector<std::pair<std::string, Tensor>> tensors;
};

Checkpoint make_checkpoint(const SimTSModel& model, const TrainConfig& cfg, const TrainState& state);
/// Rebuilds the model and optimizer state stored in a checkpoint.
SimTSModel restore_model(const Checkpoint& ckpt);
TrainState restore_state(const Checkpoint& ckpt);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// The canonical text block: sorted "key=value" lines.
std::string checkpoint_config_text(const Checkpoint& ckpt);

}  // namespace simts
