#pragma once

#include "simts/datasets.hpp"
#include "simts/model.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace simts {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Design matrix and targets for one split: one row per forecast origin.
struct FeatureSet {
    Matrix features;  // n × C′
    Matrix targets;   // n × (L·C), timestamp-major: [t0 c0, t0 c1, …, t1 c0, …]
};

/// Rows for every origin t with history [t−K+1, t] and future [t+1, t+L] inside
/// the split, stride 1. Features are the last-column encoding z_K of the history.
FeatureSet extract_features(const SimTSModel& model, const TimeSeries& split, std::size_t history_len,
                            std::size_t horizon);

/// Same windows, with the per-channel mean of the raw history as features.
FeatureSet extract_window_mean_features(const TimeSeries& split, std::size_t history_len, std::size_t horizon);

/// Number of rows extract_features yields: len − K − L + 1.
std::size_t forecast_window_count(std::size_t split_len, std::size_t history_len, std::size_t horizon);

struct RidgeModel {
    Matrix weights;                 // C′ × (L·C_out); predictions = X·W + intercept
    Eigen::RowVectorXd intercept;   // L·C_out
    double alpha = 1.0;

    Matrix predict(const Matrix& features) const;
};

const std::vector<double>& default_alpha_grid();

/// Closed-form ridge for one α: W = (X̃ᵀX̃ + αI)⁻¹X̃ᵀỸ on centered data.
RidgeModel solve_ridge(const Matrix& features, const Matrix& targets, double alpha);

/// ‖(X̃ᵀX̃+αI)W − X̃ᵀỸ‖ / ‖X̃ᵀỸ‖ for a fitted model.
double normal_equation_residual(const RidgeModel& model, const Matrix& features, const Matrix& targets);

/// Fits every α on train and keeps the one with the lowest validation MSE
/// (ties go to the larger α).
RidgeModel fit_ridge(const Matrix& train_features, const Matrix& train_targets, const Matrix& val_features,
                     const Matrix& val_targets, const std::vector<double>& alpha_grid = default_alpha_grid());

struct ForecastMetrics {
    double mse = 0.0;
    double mae = 0.0;
    std::size_t horizon = 0;
    std::size_t n_windows = 0;
};

ForecastMetrics metrics(const Matrix& pred, const Matrix& truth);

/// Horizon grid used for a dataset: the 15-minute ETT sets get {24,48,96,288,672}.
std::vector<std::size_t> default_horizons(const std::string& dataset_name);

struct ProtocolRow {
    ForecastMetrics metrics;
    double alpha = 0.0;
};

enum class FeatureKind { encoder_last_column, raw_window_mean };

/// Per horizon: features on the three (already normalized) splits, α chosen
/// on validation, metrics on test.
std::vector<ProtocolRow> run_protocol(const SimTSModel& model, const Splits& normalized,
                                      const std::vector<std::size_t>& horizons,
                                      FeatureKind kind = FeatureKind::encoder_last_column);

struct ResultRecord {
    std::string dataset;
    std::string mode;
    std::string variant;
    std::uint64_t seed = 0;
    ProtocolRow row;
};

/// Results CSV: dataset,mode,variant,horizon,mse,mae,n_windows,alpha,seed
void write_results_csv(const std::filesystem::path& path, const std::vector<ResultRecord>& records);
std::string results_csv_header();
std::string results_csv_line(const ResultRecord& record);

}  // namespace simts
