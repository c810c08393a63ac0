#include "simts/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace simts {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        fields.push_back(trim(line.substr(start, comma == std::string_view::npos ? comma : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return fields;
}

bool iequals(std::string_view a, std::string_view b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
               return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
           });
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// Proleptic Gregorian civil date from days since 1970-01-01.
void civil_from_days(long long z, int& y, unsigned& m, unsigned& d) {
    z += 719468;
    const long long era = (z >= 0 ? z : z - 146096) / 146097;
    const auto doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const long long yy = static_cast<long long>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp < 10 ? mp + 3 : mp - 9;
    y = static_cast<int>(yy + (m <= 2));
}

// Hourly timestamps starting 2016-07-01 00:00:00.
std::vector<std::string> hourly_timestamps(std::size_t n) {
    constexpr long long start_day = 16983;  // 2016-07-01
    std::vector<std::string> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        int y;
        unsigned m, d;
        civil_from_days(start_day + static_cast<long long>(i / 24), y, m, d);
        char buf[32];
        std::snprintf(buf, sizeof buf, "%04d-%02u-%02u %02zu:00:00", y, m, d, i % 24);
        out.emplace_back(buf);
    }
    return out;
}

}  // namespace

TimeSeries TimeSeries::slice(std::size_t begin, std::size_t count) const {
    if (begin + count > length)
        throw std::out_of_range("TimeSeries::slice: [" + std::to_string(begin) + ", " +
                                std::to_string(begin + count) + ") exceeds length " + std::to_string(length));
    TimeSeries out;
    out.feature_names = feature_names;
    out.length = count;
    out.values = window(begin, count);
    if (!timestamps.empty())
        out.timestamps.assign(timestamps.begin() + static_cast<std::ptrdiff_t>(begin),
                              timestamps.begin() + static_cast<std::ptrdiff_t>(begin + count));
    return out;
}

std::vector<double> TimeSeries::window(std::size_t t0, std::size_t count) const {
    std::vector<double> out;
    out.reserve(channels() * count);
    for (std::size_t c = 0; c < channels(); ++c) {
        const auto row = values.begin() + static_cast<std::ptrdiff_t>(c * length + t0);
        out.insert(out.end(), row, row + static_cast<std::ptrdiff_t>(count));
    }
    return out;
}

TimeSeries load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open CSV file " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw DataError(path.string() + ": missing header row");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    std::vector<std::string> header;
    for (auto field : split_fields(line)) header.emplace_back(field);

    auto find_column = [&](const std::string& name) -> std::size_t {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw DataError(path.string() + ": column '" + name + "' not found in header");
    };

    std::optional<std::size_t> date_col;
    if (schema.datetime_column)
        date_col = find_column(*schema.datetime_column);
    else if (!header.empty() && iequals(header[0], "date"))
        date_col = 0;

    std::vector<std::size_t> value_cols;
    if (schema.target_column) {
        value_cols.push_back(find_column(*schema.target_column));
        if (date_col && value_cols[0] == *date_col)
            throw DataError(path.string() + ": target column '" + *schema.target_column + "' is the datetime column");
    } else {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (!date_col || i != *date_col) value_cols.push_back(i);
    }
    if (value_cols.empty()) throw DataError(path.string() + ": no value columns");

    TimeSeries ts;
    for (auto i : value_cols) ts.feature_names.emplace_back(header[i]);
    std::vector<std::vector<double>> columns(value_cols.size());

    std::size_t row = 0;  // 1-based data row number in messages
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        ++row;
        const auto fields = split_fields(line);
        if (fields.size() != header.size())
            throw DataError(path.string() + ": row " + std::to_string(row) + " has " +
                            std::to_string(fields.size()) + " fields, header has " +
                            std::to_string(header.size()));
        if (date_col) ts.timestamps.emplace_back(fields[*date_col]);
        for (std::size_t k = 0; k < value_cols.size(); ++k) {
            const auto cell = fields[value_cols[k]];
            double v = 0.0;
            const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (cell.empty() || res.ec != std::errc() || res.ptr != cell.data() + cell.size() ||
                !std::isfinite(v)) {
                throw DataError(path.string() + ": row " + std::to_string(row) + ", column '" +
                                header[value_cols[k]] + "': cannot parse '" +
                                std::string(cell) + "' as a finite real");
            }
            columns[k].push_back(v);
        }
    }
    if (row == 0) throw DataError(path.string() + ": no data rows");

    ts.length = row;
    ts.values.reserve(columns.size() * row);
    for (const auto& col : columns) ts.values.insert(ts.values.end(), col.begin(), col.end());
    return ts;
}

void write_csv(const std::filesystem::path& path, const TimeSeries& ts, const std::string& datetime_column) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write CSV file " + path.string());
    const bool with_dates = !ts.timestamps.empty();
    if (with_dates) out << datetime_column;
    for (std::size_t c = 0; c < ts.channels(); ++c) out << (c || with_dates ? "," : "") << ts.feature_names[c];
    out << '\n';
    for (std::size_t t = 0; t < ts.length; ++t) {
        if (with_dates) out << ts.timestamps[t];
        for (std::size_t c = 0; c < ts.channels(); ++c)
            out << (c || with_dates ? "," : "") << format_double(ts.at(c, t));
        out << '\n';
    }
    if (!out) throw DataError("failed writing CSV file " + path.string());
}

Splits split(const TimeSeries& ts, const SplitSpec& spec) {
    if (ts.length < 10)
        throw DataError("split: series length " + std::to_string(ts.length) + " is below the minimum of 10");
    if (!(spec.train_ratio > 0 && spec.val_ratio > 0 && spec.test_ratio > 0) ||
        std::abs(spec.train_ratio + spec.val_ratio + spec.test_ratio - 1.0) > 1e-9)
        throw std::invalid_argument("split: ratios must be positive and sum to 1");
    const auto n = static_cast<double>(ts.length);
    // The small epsilon keeps e.g. 0.6*10 from flooring to 5 through representation error.
    const auto n_train = static_cast<std::size_t>(std::floor(spec.train_ratio * n + 1e-9));
    const auto n_val = static_cast<std::size_t>(std::floor(spec.val_ratio * n + 1e-9));
    return {ts.slice(0, n_train), ts.slice(n_train, n_val),
            ts.slice(n_train + n_val, ts.length - n_train - n_val)};
}

NormStats fit_norm(const TimeSeries& train) {
    NormStats stats;
    const auto n = static_cast<double>(train.length);
    for (std::size_t c = 0; c < train.channels(); ++c) {
        double mu = 0.0;
        for (std::size_t t = 0; t < train.length; ++t) mu += train.at(c, t);
        mu /= n;
        double var = 0.0;
        for (std::size_t t = 0; t < train.length; ++t) var += (train.at(c, t) - mu) * (train.at(c, t) - mu);
        const double sd = std::sqrt(var / n);
        stats.mean.push_back(mu);
        stats.stddev.push_back(sd > 0.0 ? sd : 1.0);
    }
    return stats;
}

TimeSeries apply_norm(const TimeSeries& ts, const NormStats& stats) {
    if (stats.mean.size() != ts.channels())
        throw DataError("apply_norm: stats have " + std::to_string(stats.mean.size()) + " features, series has " +
                        std::to_string(ts.channels()));
    TimeSeries out = ts;
    for (std::size_t c = 0; c < ts.channels(); ++c)
        for (std::size_t t = 0; t < ts.length; ++t) out.at(c, t) = (ts.at(c, t) - stats.mean[c]) / stats.stddev[c];
    return out;
}

TimeSeries invert_norm(const TimeSeries& ts, const NormStats& stats) {
    TimeSeries out = ts;
    for (std::size_t c = 0; c < ts.channels(); ++c)
        for (std::size_t t = 0; t < ts.length; ++t) out.at(c, t) = ts.at(c, t) * stats.stddev[c] + stats.mean[c];
    return out;
}

std::vector<WindowSample> make_windows(const TimeSeries& ts, std::size_t window_len, std::size_t history_len,
                                       std::size_t stride) {
    if (history_len == 0 || history_len >= window_len)
        throw std::invalid_argument("make_windows: need 0 < K < T, got K=" + std::to_string(history_len) +
                                    ", T=" + std::to_string(window_len));
    if (stride == 0) throw std::invalid_argument("make_windows: stride must be >= 1");
    if (ts.length < window_len)
        throw DataError("make_windows: series length " + std::to_string(ts.length) +
                        " is shorter than the window length " + std::to_string(window_len));
    std::vector<WindowSample> samples;
    samples.reserve((ts.length - window_len) / stride + 1);
    for (std::size_t origin = 0; origin + window_len <= ts.length; origin += stride) {
        WindowSample s;
        s.channels = ts.channels();
        s.history_len = history_len;
        s.future_len = window_len - history_len;
        s.origin = origin;
        s.history = ts.window(origin, history_len);
        s.future = ts.window(origin + history_len, s.future_len);
        samples.push_back(std::move(s));
    }
    return samples;
}

namespace {

TimeSeries synth_impl(const SynthConfig& config, bool with_noise) {
    if (config.n_features == 0 || config.length == 0)
        throw std::invalid_argument("synth_series: n_features and length must be >= 1");
    std::vector<std::vector<double>> periods(config.n_features);
    double longest = 0.0;
    for (std::size_t f = 0; f < config.n_features; ++f) {
        periods[f] = f < config.periods.size() && !config.periods[f].empty() ? config.periods[f]
                                                                              : std::vector<double>{24.0};
        for (double p : periods[f]) {
            if (!(p > 0)) throw std::invalid_argument("synth_series: periods must be positive");
            longest = std::max(longest, p);
        }
    }
    if (static_cast<double>(config.length) < 2.0 * longest)
        throw std::invalid_argument("synth_series: length must be at least twice the longest period");

    std::seed_seq shape_seed{config.seed, std::uint64_t{0x5eed}};
    std::mt19937_64 shape_rng(shape_seed);
    std::uniform_real_distribution<double> amp(0.5, 1.5);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::seed_seq noise_seed{config.seed, std::uint64_t{0x2015e}};
    std::mt19937_64 noise_rng(noise_seed);
    std::normal_distribution<double> noise(0.0, config.noise_std > 0 ? config.noise_std : 1.0);

    TimeSeries ts;
    ts.length = config.length;
    ts.values.assign(config.n_features * config.length, 0.0);
    for (std::size_t f = 0; f < config.n_features; ++f) {
        ts.feature_names.push_back("x" + std::to_string(f));
        for (double p : periods[f]) {
            const double a = amp(shape_rng), ph = phase(shape_rng);
            for (std::size_t t = 0; t < config.length; ++t)
                ts.at(f, t) += a * std::sin(2.0 * std::numbers::pi * std::fmod(static_cast<double>(t), p) / p + ph);
        }
    }
    if (with_noise && config.noise_std > 0)
        for (auto& v : ts.values) v += noise(noise_rng);
    ts.timestamps = hourly_timestamps(config.length);
    return ts;
}

}  // namespace

TimeSeries synth_series(const SynthConfig& config) { return synth_impl(config, true); }
TimeSeries synth_series_clean(const SynthConfig& config) { return synth_impl(config, false); }

}  // namespace simts
