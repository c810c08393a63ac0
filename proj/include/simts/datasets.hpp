#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace simts {

/// Raised for malformed or unusable input data (bad CSV cells, series too short).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// C×T matrix of observations, stored feature-major: values[c * length + t].
struct TimeSeries {
    std::vector<double> values;
    std::vector<std::string> feature_names;
    std::vector<std::string> timestamps;  // empty when the source had no datetime column
    std::size_t length = 0;

    std::size_t channels() const { return feature_names.size(); }
    double at(std::size_t channel, std::size_t t) const { return values[channel * length + t]; }
    double& at(std::size_t channel, std::size_t t) { return values[channel * length + t]; }

    /// Columns [begin, begin + count) as a new series.
    TimeSeries slice(std::size_t begin, std::size_t count) const;
    /// Columns [t0, t0 + count) of every channel, flattened channel-major.
    std::vector<double> window(std::size_t t0, std::size_t count) const;
};

struct CsvSchema {
    /// Excluded from values and kept as timestamps. When unset, a first column
    /// headed "date" (any case) is treated as the datetime column.
    std::optional<std::string> datetime_column;
    /// When set, only this column is kept (univariate mode).
    std::optional<std::string> target_column;
};

TimeSeries load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});

/// Writes header + rows; values use shortest round-trip formatting so that
/// load_csv reproduces them bit for bit.
void write_csv(const std::filesystem::path& path, const TimeSeries& ts,
               const std::string& datetime_column = "date");

struct SplitSpec {
    double train_ratio = 0.6;
    double val_ratio = 0.2;
    double test_ratio = 0.2;
};

struct Splits {
    TimeSeries train;
    TimeSeries val;
    TimeSeries test;
};

/// Chronological partition: floor(train·T) / floor(val·T) / remainder.
Splits split(const TimeSeries& ts, const SplitSpec& spec = {});

struct NormStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

NormStats fit_norm(const TimeSeries& train);
TimeSeries apply_norm(const TimeSeries& ts, const NormStats& stats);
TimeSeries invert_norm(const TimeSeries& ts, const NormStats& stats);

/// One training sample: history C×K and future C×(T−K), channel-major.
struct WindowSample {
    std::vector<double> history;
    std::vector<double> future;
    std::size_t channels = 0;
    std::size_t history_len = 0;
    std::size_t future_len = 0;
    std::size_t origin = 0;
};

std::vector<WindowSample> make_windows(const TimeSeries& ts, std::size_t window_len = 402,
                                       std::size_t history_len = 201, std::size_t stride = 1);

struct SynthConfig {
    std::size_t n_features = 1;
    std::size_t length = 1000;
    /// Sinusoid periods for each feature; a feature with no entry gets {24}.
    std::vector<std::vector<double>> periods;
    double noise_std = 0.0;
    std::uint64_t seed = 0;
};

/// Per-feature sum of sinusoids with seeded amplitudes/phases plus Gaussian noise.
TimeSeries synth_series(const SynthConfig& config);
/// The same series without the noise term.
TimeSeries synth_series_clean(const SynthConfig& config);

}  // namespace simts
