#include "simts/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace simts {

namespace {

void check_split_length(const TimeSeries& split, std::size_t history_len, std::size_t horizon) {
    if (history_len == 0 || horizon == 0) throw std::invalid_argument("extract_features: K and L must be >= 1");
    if (split.length < history_len + horizon)
        throw DataError("split of length " + std::to_string(split.length) + " is too short: history " +
                        std::to_string(history_len) + " + horizon " + std::to_string(horizon) + " needs at least " +
                        std::to_string(history_len + horizon) + " steps");
}

Matrix future_targets(const TimeSeries& split, std::size_t history_len, std::size_t horizon) {
    const std::size_t n = forecast_window_count(split.length, history_len, horizon);
    const std::size_t c = split.channels();
    Matrix y(n, horizon * c);
    for (std::size_t row = 0; row < n; ++row) {
        const std::size_t first = row + history_len;  // first future step
        for (std::size_t step = 0; step < horizon; ++step)
            for (std::size_t ch = 0; ch < c; ++ch) y(row, step * c + ch) = split.at(ch, first + step);
    }
    return y;
}

std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace

std::size_t forecast_window_count(std::size_t split_len, std::size_t history_len, std::size_t horizon) {
    return split_len < history_len + horizon ? 0 : split_len - history_len - horizon + 1;
}

FeatureSet extract_features(const SimTSModel& model, const TimeSeries& split, std::size_t history_len,
                            std::size_t horizon) {
    check_split_length(split, history_len, horizon);
    if (split.channels() != model.config.encoder.in_channels)
        throw std::invalid_argument("extract_features: split has " + std::to_string(split.channels()) +
                                    " channels, encoder expects " + std::to_string(model.config.encoder.in_channels));
    const std::size_t n = forecast_window_count(split.length, history_len, horizon);
    const std::size_t latent = model.config.encoder.latent_dim;

    NoGradGuard no_grad;
    FeatureSet out;
    out.features.resize(n, latent);
    constexpr std::size_t chunk = 256;
    for (std::size_t first = 0; first < n; first += chunk) {
        std::vector<Tensor> histories;
        for (std::size_t row = first; row < std::min(n, first + chunk); ++row)
            histories.push_back(Tensor::constant({split.channels(), history_len}, split.window(row, history_len)));
        const auto codes = encode_last_each(model.encoder, histories);
        for (std::size_t i = 0; i < codes.size(); ++i)
            for (std::size_t j = 0; j < latent; ++j) out.features(first + i, j) = codes[i].at(j);
    }
    out.targets = future_targets(split, history_len, horizon);
    return out;
}

FeatureSet extract_window_mean_features(const TimeSeries& split, std::size_t history_len, std::size_t horizon) {
    check_split_length(split, history_len, horizon);
    const std::size_t n = forecast_window_count(split.length, history_len, horizon);
    const std::size_t c = split.channels();
    FeatureSet out;
    out.features.resize(n, c);
    for (std::size_t row = 0; row < n; ++row)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t t = row; t < row + history_len; ++t) acc += split.at(ch, t);
            out.features(row, ch) = acc / static_cast<double>(history_len);
        }
    out.targets = future_targets(split, history_len, horizon);
    return out;
}

Matrix RidgeModel::predict(const Matrix& features) const {
    Matrix out = features * weights;
    out.rowwise() += intercept;
    return out;
}

const std::vector<double>& default_alpha_grid() {
    static const std::vector<double> grid{0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000};
    return grid;
}

namespace {

struct Centered {
    Matrix x, y;
    Eigen::RowVectorXd x_mean, y_mean;
};

Centered center(const Matrix& features, const Matrix& targets) {
    if (features.rows() == 0 || features.rows() != targets.rows())
        throw std::invalid_argument("ridge: need matching, non-empty feature (" + std::to_string(features.rows()) +
                                    " rows) and target (" + std::to_string(targets.rows()) + " rows) matrices");
    Centered c;
    c.x_mean = features.colwise().mean();
    c.y_mean = targets.colwise().mean();
    c.x = features.rowwise() - c.x_mean;
    c.y = targets.rowwise() - c.y_mean;
    return c;
}

RidgeModel solve_centered(const Centered& c, const Matrix& gram, const Matrix& cross, double alpha) {
    if (!(alpha > 0.0)) throw std::invalid_argument("ridge: alpha must be > 0");
    Matrix system = gram;
    system.diagonal().array() += alpha;
    Eigen::LLT<Matrix> llt(system);
    if (llt.info() != Eigen::Success) throw std::runtime_error("ridge: Cholesky factorization failed");
    RidgeModel model;
    model.alpha = alpha;
    model.weights = llt.solve(cross);
    if (!model.weights.allFinite()) throw std::runtime_error("ridge: solution is not finite");
    model.intercept = c.y_mean - c.x_mean * model.weights;
    return model;
}

}  // namespace

RidgeModel solve_ridge(const Matrix& features, const Matrix& targets, double alpha) {
    const Centered c = center(features, targets);
    const Matrix gram = c.x.transpose() * c.x;
    const Matrix cross = c.x.transpose() * c.y;
    return solve_centered(c, gram, cross, alpha);
}

double normal_equation_residual(const RidgeModel& model, const Matrix& features, const Matrix& targets) {
    const Centered c = center(features, targets);
    Matrix system = c.x.transpose() * c.x;
    system.diagonal().array() += model.alpha;
    const Matrix cross = c.x.transpose() * c.y;
    const double denom = cross.norm();
    const double num = (system * model.weights - cross).norm();
    return denom > 0.0 ? num / denom : num;
}

RidgeModel fit_ridge(const Matrix& train_features, const Matrix& train_targets, const Matrix& val_features,
                     const Matrix& val_targets, const std::vector<double>& alpha_grid) {
    if (alpha_grid.empty()) throw std::invalid_argument("fit_ridge: empty alpha grid");
    for (double a : alpha_grid)
        if (!(a > 0.0)) throw std::invalid_argument("fit_ridge: alpha values must be > 0");
    const Centered c = center(train_features, train_targets);
    const Matrix gram = c.x.transpose() * c.x;
    const Matrix cross = c.x.transpose() * c.y;

    RidgeModel best;
    double best_mse = 0.0;
    bool have_best = false;
    for (double alpha : alpha_grid) {
        RidgeModel candidate = solve_centered(c, gram, cross, alpha);
        const double mse = metrics(candidate.predict(val_features), val_targets).mse;
        if (!have_best || mse < best_mse || (mse == best_mse && alpha > best.alpha)) {
            best = std::move(candidate);
            best_mse = mse;
            have_best = true;
        }
    }
    return best;
}

ForecastMetrics metrics(const Matrix& pred, const Matrix& truth) {
    if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
        throw std::invalid_argument("metrics: prediction is " + std::to_string(pred.rows()) + "x" +
                                    std::to_string(pred.cols()) + ", truth is " + std::to_string(truth.rows()) + "x" +
                                    std::to_string(truth.cols()));
    if (pred.size() == 0) throw std::invalid_argument("metrics: empty input");
    const auto diff = (pred - truth).array();
    ForecastMetrics m;
    m.mse = diff.square().mean();
    m.mae = diff.abs().mean();
    m.n_windows = static_cast<std::size_t>(pred.rows());
    return m;
}

std::vector<std::size_t> default_horizons(const std::string& dataset_name) {
    std::string stem = std::filesystem::path(dataset_name).stem().string();
    for (auto& ch : stem) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (stem == "ettm1" || stem == "ettm2") return {24, 48, 96, 288, 672};
    return {24, 48, 168, 336, 720};
}

std::vector<ProtocolRow> run_protocol(const SimTSModel& model, const Splits& normalized,
                                      const std::vector<std::size_t>& horizons, FeatureKind kind) {
    if (horizons.empty()) throw std::invalid_argument("run_protocol: no horizons");
    const std::size_t k = model.config.encoder.history_len;
    auto features = [&](const TimeSeries& split, std::size_t horizon) {
        return kind == FeatureKind::encoder_last_column ? extract_features(model, split, k, horizon)
                                                        : extract_window_mean_features(split, k, horizon);
    };
    std::vector<ProtocolRow> rows;
    for (std::size_t horizon : horizons) {
        const FeatureSet train = features(normalized.train, horizon);
        const FeatureSet val = features(normalized.val, horizon);
        const FeatureSet test = features(normalized.test, horizon);
        const RidgeModel ridge = fit_ridge(train.features, train.targets, val.features, val.targets);
        ProtocolRow row;
        row.metrics = metrics(ridge.predict(test.features), test.targets);
        row.metrics.horizon = horizon;
        row.alpha = ridge.alpha;
        rows.push_back(row);
    }
    return rows;
}

std::string results_csv_header() { return "dataset,mode,variant,horizon,mse,mae,n_windows,alpha,seed"; }

std::string results_csv_line(const ResultRecord& r) {
    return r.dataset + "," + r.mode + "," + r.variant + "," + std::to_string(r.row.metrics.horizon) + "," +
           fmt_double(r.row.metrics.mse) + "," + fmt_double(r.row.metrics.mae) + "," +
           std::to_string(r.row.metrics.n_windows) + "," + fmt_double(r.row.alpha) + "," + std::to_string(r.seed);
}

void write_results_csv(const std::filesystem::path& path, const std::vector<ResultRecord>& records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write results file " + path.string());
    out << results_csv_header() << '\n';
    for (const auto& r : records) out << results_csv_line(r) << '\n';
    if (!out) throw DataError("failed writing results file " + path.string());
}

}  // namespace simts
