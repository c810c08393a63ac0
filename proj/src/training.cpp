#include "simts/training.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace simts {

void TrainConfig::validate() const {
    // lr = 0 is accepted so that a run can be replayed as a fixed point.
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (history_len == 0 || history_len >= window_len)
        throw std::invalid_argument("TrainConfig: need 0 < history_len < window_len");
    if (stride == 0) throw std::invalid_argument("TrainConfig: stride must be >= 1");
}

namespace {

using ConstArray = Eigen::Map<const Eigen::ArrayXd>;

// Gradient per parameter, empty when it has none.
template <typename GradOf>
void momentum_update(std::span<Tensor> params, GradOf grad_of, VelocityMap& velocity, const TrainConfig& cfg) {
    for (auto& p : params) {
        const std::span<const double> g = grad_of(p);
        if (g.empty()) continue;
        if (g.size() != p.numel())
            throw std::invalid_argument("sgd_step: gradient for '" + p.name() + "' has wrong size");
        if (!ConstArray(g.data(), static_cast<Eigen::Index>(g.size())).allFinite())
            throw std::runtime_error("sgd_step: non-finite gradient in parameter '" + p.name() + "'");
    }
    for (auto& p : params) {
        const std::span<const double> g = grad_of(p);
        auto& v = velocity[p.name()];
        if (v.empty()) v.assign(p.numel(), 0.0);
        const auto data = p.mutable_data();
        Eigen::Map<Eigen::ArrayXd> theta(data.data(), static_cast<Eigen::Index>(data.size()));
        Eigen::Map<Eigen::ArrayXd> vel(v.data(), theta.size());
        if (!g.empty())
            vel = cfg.momentum * vel + (ConstArray(g.data(), theta.size()) + cfg.weight_decay * theta);
        else
            vel = cfg.momentum * vel + cfg.weight_decay * theta;
        theta -= cfg.learning_rate * vel;
    }
}

}  // namespace

void sgd_step(std::span<Tensor> params, const GradMap& grads, VelocityMap& velocity, const TrainConfig& cfg) {
    momentum_update(
        params,
        [&grads](const Tensor& p) -> std::span<const double> {
            const auto found = grads.find(p.name());
            if (found == grads.end()) return {};
            return found->second;
        },
        velocity, cfg);
}

void sgd_step(std::span<Tensor> params, VelocityMap& velocity, const TrainConfig& cfg) {
    momentum_update(params, [](const Tensor& p) { return p.grad(); }, velocity, cfg);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0x51475}};
    std::mt19937_64 rng(seq);
    // Fisher-Yates with an explicit bounded draw keeps the order identical across standard libraries.
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

void train(const std::vector<WindowSample>& data, SimTSModel& model, const TrainConfig& cfg, TrainState& state,
           const EpochCallback& on_epoch) {
    cfg.validate();
    if (cfg.epochs == 0) return;
    if (data.empty()) throw std::invalid_argument("train: no training samples");

    auto params = model.parameters();
    for (; state.epoch < cfg.epochs; ++state.epoch) {
        const auto order = epoch_order(data.size(), cfg.seed, state.epoch);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<WindowSample> batch;
            batch.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i) batch.push_back(data[order[i]]);

            for (auto& p : params) p.zero_grad();
            const Tensor loss = batch_loss(model, batch, cfg.variant);
            accumulate_grad(loss);
            sgd_step(params, state.velocity, cfg);
            total += loss.item();
            ++batches;
        }
        const double epoch_loss = total / static_cast<double>(batches);
        state.loss_history.push_back(epoch_loss);
        if (on_epoch) on_epoch(state.epoch, epoch_loss);
    }
}

std::vector<double> train(const std::vector<WindowSample>& data, SimTSModel& model, const TrainConfig& cfg) {
    TrainState state;
    train(data, model, cfg, state);
    return state.loss_history;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'T', 'S', 'C'};
constexpr const char* kVelocityPrefix = "velocity/";

std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& key) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw CheckpointError("checkpoint: bad value '" + s + "' for key '" + key + "'");
    return v;
}

std::uint64_t parse_uint(const std::string& s, const std::string& key) {
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw CheckpointError("checkpoint: bad value '" + s + "' for key '" + key + "'");
    return v;
}

template <typename T>
void put(std::string& out, T value) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
        std::reverse(bytes.begin(), bytes.end());
        out.append(bytes.data(), bytes.size());
    } else {
        char bytes[sizeof(T)];
        std::memcpy(bytes, &value, sizeof(T));
        out.append(bytes, sizeof(T));
    }
}

class Reader {
public:
    explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

    bool done() const { return pos_ == bytes_.size(); }
    std::size_t offset() const { return pos_; }

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        T value;
        if constexpr (std::endian::native == std::endian::big) {
            std::array<char, sizeof(T)> raw;
            std::memcpy(raw.data(), bytes_.data() + pos_, sizeof(T));
            std::reverse(raw.begin(), raw.end());
            value = std::bit_cast<T>(raw);
        } else {
            std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        }
        pos_ += sizeof(T);
        return value;
    }

    std::string get_bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n)
            throw CheckpointError("corrupt checkpoint: truncated " + std::string(what) + " at offset " +
                                  std::to_string(pos_) + " (need " + std::to_string(n) + " bytes, " +
                                  std::to_string(bytes_.size() - pos_) + " left)");
    }

    std::string bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

Checkpoint make_checkpoint(const SimTSModel& model, const TrainConfig& cfg, const TrainState& state) {
    Checkpoint ckpt;
    ckpt.model_config = model.config;
    ckpt.train_config = cfg;
    ckpt.epoch = state.epoch;
    ckpt.loss_history = state.loss_history;
    for (const auto& p : model.parameters()) ckpt.tensors.emplace_back(p.name(), detach(p));
    for (const auto& p : model.parameters()) {
        const auto found = state.velocity.find(p.name());
        if (found == state.velocity.end()) continue;
        ckpt.tensors.emplace_back(kVelocityPrefix + p.name(), Tensor::constant(p.shape(), found->second));
    }
    return ckpt;
}

SimTSModel restore_model(const Checkpoint& ckpt) {
    SimTSModel model = init_params(ckpt.model_config, 0);
    std::map<std::string, const Tensor*> stored;
    for (const auto& [name, t] : ckpt.tensors) stored[name] = &t;
    for (auto& p : model.parameters()) {
        const auto found = stored.find(p.name());
        if (found == stored.end()) throw CheckpointError("checkpoint is missing parameter '" + p.name() + "'");
        if (found->second->shape() != p.shape())
            throw CheckpointError("checkpoint parameter '" + p.name() + "' has shape " +
                                  shape_str(found->second->shape()) + ", model expects " + shape_str(p.shape()));
        std::ranges::copy(found->second->data(), p.mutable_data().begin());
    }
    return model;
}

TrainState restore_state(const Checkpoint& ckpt) {
    TrainState state;
    state.epoch = ckpt.epoch;
    state.loss_history = ckpt.loss_history;
    const std::string prefix = kVelocityPrefix;
    for (const auto& [name, t] : ckpt.tensors)
        if (name.starts_with(prefix))
            state.velocity[name.substr(prefix.size())] = {t.data().begin(), t.data().end()};
    return state;
}

std::string checkpoint_config_text(const Checkpoint& ckpt) {
    std::map<std::string, std::string> kv;
    const auto& enc = ckpt.model_config.encoder;
    kv["encoder.in_channels"] = std::to_string(enc.in_channels);
    kv["encoder.projection_dim"] = std::to_string(enc.projection_dim);
    kv["encoder.latent_dim"] = std::to_string(enc.latent_dim);
    kv["encoder.history_len"] = std::to_string(enc.history_len);
    kv["model.future_len"] = std::to_string(ckpt.model_config.future_len);
    const auto& tc = ckpt.train_config;
    kv["train.learning_rate"] = fmt_double(tc.learning_rate);
    kv["train.momentum"] = fmt_double(tc.momentum);
    kv["train.weight_decay"] = fmt_double(tc.weight_decay);
    kv["train.epochs"] = std::to_string(tc.epochs);
    kv["train.batch_size"] = std::to_string(tc.batch_size);
    kv["train.variant"] = to_string(tc.variant);
    kv["train.seed"] = std::to_string(tc.seed);
    kv["train.window_len"] = std::to_string(tc.window_len);
    kv["train.history_len"] = std::to_string(tc.history_len);
    kv["train.stride"] = std::to_string(tc.stride);
    kv["state.epoch"] = std::to_string(ckpt.epoch);
    std::string losses;
    for (std::size_t i = 0; i < ckpt.loss_history.size(); ++i)
        losses += (i ? " " : "") + fmt_double(ckpt.loss_history[i]);
    kv["state.loss_history"] = losses;
    for (const auto& [k, v] : ckpt.metadata) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
            throw std::invalid_argument("checkpoint metadata may not contain '=' in keys or newlines");
        kv["meta." + k] = v;
    }
    std::string text;
    for (const auto& [k, v] : kv) text += k + "=" + v + "\n";
    return text;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::string out(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, Checkpoint::format_version);
    const std::string text = checkpoint_config_text(ckpt);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    for (const auto& [name, t] : ckpt.tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) put<std::uint64_t>(out, e);
        for (double v : t.data()) put<double>(out, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream buf;
    buf << f.rdbuf();
    Reader in(buf.str());

    if (in.get_bytes(4, "magic") != std::string(kMagic, sizeof kMagic))
        throw CheckpointError("corrupt checkpoint: bad magic at offset 0 in " + path.string());
    const auto version = in.get<std::uint32_t>("format version");
    if (version != Checkpoint::format_version)
        throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(Checkpoint::format_version) + ")");
    const auto text_len = in.get<std::uint32_t>("config length");
    const std::string text = in.get_bytes(text_len, "config block");

    std::map<std::string, std::string> kv;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw CheckpointError("corrupt checkpoint: malformed config line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto value = [&](const std::string& key) -> const std::string& {
        const auto found = kv.find(key);
        if (found == kv.end()) throw CheckpointError("corrupt checkpoint: missing config key '" + key + "'");
        return found->second;
    };

    Checkpoint ckpt;
    auto& enc = ckpt.model_config.encoder;
    enc.in_channels = parse_uint(value("encoder.in_channels"), "encoder.in_channels");
    enc.projection_dim = parse_uint(value("encoder.projection_dim"), "encoder.projection_dim");
    enc.latent_dim = parse_uint(value("encoder.latent_dim"), "encoder.latent_dim");
    enc.history_len = parse_uint(value("encoder.history_len"), "encoder.history_len");
    ckpt.model_config.future_len = parse_uint(value("model.future_len"), "model.future_len");
    auto& tc = ckpt.train_config;
    tc.learning_rate = parse_double(value("train.learning_rate"), "train.learning_rate");
    tc.momentum = parse_double(value("train.momentum"), "train.momentum");
    tc.weight_decay = parse_double(value("train.weight_decay"), "train.weight_decay");
    tc.epochs = parse_uint(value("train.epochs"), "train.epochs");
    tc.batch_size = parse_uint(value("train.batch_size"), "train.batch_size");
    try {
        tc.variant = parse_variant(value("train.variant"));
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
    }
    tc.seed = parse_uint(value("train.seed"), "train.seed");
    tc.window_len = parse_uint(value("train.window_len"), "train.window_len");
    tc.history_len = parse_uint(value("train.history_len"), "train.history_len");
    tc.stride = parse_uint(value("train.stride"), "train.stride");
    ckpt.epoch = parse_uint(value("state.epoch"), "state.epoch");
    std::istringstream losses(value("state.loss_history"));
    for (std::string tok; losses >> tok;) ckpt.loss_history.push_back(parse_double(tok, "state.loss_history"));
    for (const auto& [k, v] : kv)
        if (k.starts_with("meta.")) ckpt.metadata[k.substr(5)] = v;

    while (!in.done()) {
        const auto name_len = in.get<std::uint32_t>("record name length");
        std::string name = in.get_bytes(name_len, "record name");
        const auto rank = in.get<std::uint32_t>("record rank");
        if (rank == 0 || rank > 8)
            throw CheckpointError("corrupt checkpoint: record '" + name + "' has rank " + std::to_string(rank) +
                                  " at offset " + std::to_string(in.offset()));
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(in.get<std::uint64_t>("record extent"));
        const std::size_t n = shape_numel(shape);
        if (n == 0 || n > (std::size_t{1} << 34))
            throw CheckpointError("corrupt checkpoint: record '" + name + "' has shape " + shape_str(shape) +
                                  " at offset " + std::to_string(in.offset()));
        std::vector<double> data(n);
        for (auto& v : data) v = in.get<double>("record values");
        ckpt.tensors.emplace_back(std::move(name), Tensor::constant(std::move(shape), std::move(data)));
    }
    return ckpt;
}

}  // namespace simts
