#include "simts/cli.hpp"

#include "simts/datasets.hpp"
#include "simts/evaluation.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace simts::cli {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string dashed(std::string key) {
    std::replace(key.begin(), key.end(), '_', '-');
    return key;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, sep);) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T value{};
    const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
    if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size())
        throw UsageError("invalid value '" + text + "' for key '" + key + "'");
    return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw UsageError("invalid boolean '" + text + "' for key '" + key + "'");
}

std::filesystem::path default_out_dir() {
    if (const char* env = std::getenv("SIMTS_OUT_DIR"); env && *env) return env;
    return "simts_out";
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& history) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << "epoch,mean_loss\n";
    for (std::size_t i = 0; i < history.size(); ++i) out << i + 1 << ',' << fmt_double(history[i]) << '\n';
}

void write_svg_chart(const std::filesystem::path& path, const std::string& title, const std::vector<std::string>& labels,
                     const std::vector<double>& values, bool bars) {
    constexpr double width = 640, height = 360, margin = 48;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || values.empty()) return;
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    double lo = bars ? std::min(0.0, *lo_it) : *lo_it, hi = *hi_it;
    if (hi == lo) hi = lo + 1.0;
    const double plot_w = width - 2 * margin, plot_h = height - 2 * margin;
    auto y_of = [&](double v) { return margin + plot_h * (hi - v) / (hi - lo); };
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << margin << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n"
        << "<text x=\"4\" y=\"" << margin << "\" font-size=\"10\">" << fmt_double(hi) << "</text>\n"
        << "<text x=\"4\" y=\"" << height - margin << "\" font-size=\"10\">" << fmt_double(lo) << "</text>\n";
    const double step = plot_w / static_cast<double>(std::max<std::size_t>(values.size(), 1));
    if (bars) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double x = margin + step * static_cast<double>(i) + step * 0.15;
            const double y = y_of(values[i]);
            out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << step * 0.7 << "\" height=\""
                << y_of(lo) - y << "\" fill=\"steelblue\"/>\n"
                << "<text x=\"" << x << "\" y=\"" << height - margin + 14 << "\" font-size=\"10\">" << labels[i]
                << "</text>\n";
        }
    } else {
        out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
        const double dx = values.size() > 1 ? plot_w / static_cast<double>(values.size() - 1) : 0.0;
        for (std::size_t i = 0; i < values.size(); ++i)
            out << margin + dx * static_cast<double>(i) << ',' << y_of(values[i]) << ' ';
        out << "\"/>\n";
    }
    out << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Shared pipeline
// ---------------------------------------------------------------------------

struct PreparedData {
    TimeSeries raw;
    Splits normalized;
};

std::string resolved_mode(const RunConfig& cfg, const std::string& fallback = "multivariate") {
    return cfg.mode.empty() ? fallback : cfg.mode;
}

PreparedData prepare_dataset(const std::string& path, const std::string& mode, const std::string& target) {
    if (path.empty()) throw UsageError("missing required key 'dataset'");
    if (!std::filesystem::exists(path)) throw DataError("dataset file not found: " + path);
    CsvSchema schema;
    if (mode == "univariate") schema.target_column = target;
    PreparedData data;
    data.raw = load_csv(path, schema);
    const Splits raw_splits = split(data.raw);
    const NormStats stats = fit_norm(raw_splits.train);
    data.normalized = {apply_norm(raw_splits.train, stats), apply_norm(raw_splits.val, stats),
                       apply_norm(raw_splits.test, stats)};
    return data;
}

struct TrainedModel {
    SimTSModel model;
    TrainState state;
    TrainConfig config;
};

TrainedModel train_on(const RunConfig& cfg, const PreparedData& data, LossVariant variant, std::ostream& out) {
    TrainConfig tc = cfg.train;
    tc.variant = variant;
    ModelConfig mc;
    mc.encoder = {.in_channels = data.raw.channels(),
                  .projection_dim = cfg.projection_dim,
                  .latent_dim = cfg.latent_dim,
                  .history_len = tc.history_len};
    mc.future_len = tc.window_len - tc.history_len;
    const auto samples = make_windows(data.normalized.train, tc.window_len, tc.history_len, tc.stride);
    TrainedModel result{init_params(mc, tc.seed), {}, tc};
    train(samples, result.model, tc, result.state, [&](std::size_t epoch, double loss) {
        out << "[" << to_string(variant) << "] epoch " << epoch + 1 << "/" << tc.epochs << " loss "
            << fmt_double(loss) << '\n';
    });
    return result;
}

Checkpoint checkpoint_for(const TrainedModel& t, const RunConfig& cfg, const std::string& mode) {
    Checkpoint ckpt = make_checkpoint(t.model, t.config, t.state);
    ckpt.metadata["dataset_path"] = cfg.dataset;
    ckpt.metadata["mode"] = mode;
    ckpt.metadata["target"] = cfg.target;
    return ckpt;
}

std::string dataset_label(const std::string& path) { return std::filesystem::path(path).stem().string(); }

std::vector<std::size_t> horizons_for(const RunConfig& cfg, const std::string& dataset) {
    return cfg.horizons.empty() ? default_horizons(dataset) : cfg.horizons;
}

std::vector<ResultRecord> evaluate(const SimTSModel& model, const PreparedData& data, const std::string& dataset,
                                   const std::string& mode, LossVariant variant, std::uint64_t seed,
                                   const std::vector<std::size_t>& horizons) {
    if (data.raw.channels() != model.config.encoder.in_channels)
        throw CompatibilityError("dataset has " + std::to_string(data.raw.channels()) + " channels, checkpoint expects " +
                                 std::to_string(model.config.encoder.in_channels));
    std::vector<ResultRecord> records;
    for (const auto& row : run_protocol(model, data.normalized, horizons)) {
        if (row.metrics.mae > std::sqrt(row.metrics.mse) * (1 + 1e-12))
            throw std::logic_error("metrics violate mae <= sqrt(mse)");
        records.push_back({dataset_label(dataset), mode, to_string(variant), seed, row});
    }
    return records;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys{
        "dataset",  "mode",   "target",     "learning_rate",  "momentum",   "weight_decay", "epochs",
        "batch_size", "variant", "variants", "seed",          "window",     "history",      "stride",
        "projection_dim", "latent_dim", "horizons", "out", "plot",        "checkpoint",   "features",
        "length",   "periods", "noise"};
    return keys;
}

std::map<std::string, std::string> parse_config_text(const std::string& text, const std::string& origin) {
    std::map<std::string, std::string> values;
    std::istringstream lines(text);
    std::string line;
    std::size_t lineno = 0;
    const auto& keys = config_keys();
    while (std::getline(lines, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::replace(key.begin(), key.end(), '-', '_');
        if (std::find(keys.begin(), keys.end(), key) == keys.end())
            throw UsageError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
        values[key] = trim(line.substr(eq + 1));
    }
    return values;
}

RunConfig build_run_config(const std::map<std::string, std::string>& values) {
    RunConfig cfg;
    cfg.mode.clear();
    cfg.out_dir = default_out_dir();
    for (const auto& [key, v] : values) {
        if (key == "dataset") cfg.dataset = v;
        else if (key == "mode") {
            if (v != "univariate" && v != "multivariate")
                throw UsageError("invalid value '" + v + "' for key 'mode' (univariate|multivariate)");
            cfg.mode = v;
        } else if (key == "target") cfg.target = v;
        else if (key == "learning_rate") cfg.train.learning_rate = parse_number<double>(key, v);
        else if (key == "momentum") cfg.train.momentum = parse_number<double>(key, v);
        else if (key == "weight_decay") cfg.train.weight_decay = parse_number<double>(key, v);
        else if (key == "epochs") cfg.train.epochs = parse_number<std::size_t>(key, v);
        else if (key == "batch_size") cfg.train.batch_size = parse_number<std::size_t>(key, v);
        else if (key == "seed") cfg.train.seed = parse_number<std::uint64_t>(key, v);
        else if (key == "window") cfg.train.window_len = parse_number<std::size_t>(key, v);
        else if (key == "history") cfg.train.history_len = parse_number<std::size_t>(key, v);
        else if (key == "stride") cfg.train.stride = parse_number<std::size_t>(key, v);
        else if (key == "projection_dim") cfg.projection_dim = parse_number<std::size_t>(key, v);
        else if (key == "latent_dim") cfg.latent_dim = parse_number<std::size_t>(key, v);
        else if (key == "out") cfg.out_dir = v;
        else if (key == "plot") cfg.plot = parse_bool(key, v);
        else if (key == "checkpoint") cfg.checkpoint = v;
        else if (key == "features") cfg.synth_features = parse_number<std::size_t>(key, v);
        else if (key == "length") cfg.synth_length = parse_number<std::size_t>(key, v);
        else if (key == "noise") cfg.synth_noise = parse_number<double>(key, v);
        else if (key == "horizons") {
            for (const auto& h : split_list(v, ',')) {
                const auto horizon = parse_number<std::size_t>(key, h);
                if (horizon == 0) throw UsageError("horizons must be >= 1");
                cfg.horizons.push_back(horizon);
            }
        } else if (key == "variant" || key == "variants") {
            for (const auto& name : split_list(v, ',')) {
                try {
                    cfg.variants.push_back(parse_variant(name));
                } catch (const std::invalid_argument& e) {
                    throw UsageError(std::string(e.what()) + " for key '" + key + "'");
                }
            }
        } else if (key == "periods") {
            for (const auto& group : split_list(v, ';')) {
                std::vector<double> periods;
                for (const auto& p : split_list(group, ',')) periods.push_back(parse_number<double>(key, p));
                cfg.synth_periods.push_back(periods);
            }
        } else {
            throw UsageError("unknown config key '" + key + "'");
        }
    }
    if (!cfg.variants.empty()) cfg.train.variant = cfg.variants.front();
    if (cfg.synth_periods.size() == 1 && cfg.synth_features > 1)
        cfg.synth_periods.assign(cfg.synth_features, cfg.synth_periods.front());
    try {
        cfg.train.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (cfg.projection_dim == 0 || cfg.latent_dim == 0) throw UsageError("projection_dim and latent_dim must be >= 1");
    return cfg;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& cfg, std::ostream& out) {
    const std::string mode = resolved_mode(cfg);
    const PreparedData data = prepare_dataset(cfg.dataset, mode, cfg.target);
    std::filesystem::create_directories(cfg.out_dir);
    const TrainedModel trained = train_on(cfg, data, cfg.train.variant, out);
    save_checkpoint(cfg.out_dir / "checkpoint.stsc", checkpoint_for(trained, cfg, mode));
    write_loss_csv(cfg.out_dir / "loss_history.csv", trained.state.loss_history);
    if (cfg.plot) {
        std::vector<std::string> labels(trained.state.loss_history.size());
        write_svg_chart(cfg.out_dir / "loss_curve.svg", "training loss (" + to_string(cfg.train.variant) + ")", labels,
                        trained.state.loss_history, false);
    }
    out << "wrote " << (cfg.out_dir / "checkpoint.stsc").string() << " and "
        << (cfg.out_dir / "loss_history.csv").string() << '\n';
    return kOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
    if (cfg.checkpoint.empty()) throw UsageError("missing required key 'checkpoint'");
    if (!std::filesystem::exists(cfg.checkpoint)) throw DataError("checkpoint not found: " + cfg.checkpoint);
    const Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
    const SimTSModel model = restore_model(ckpt);

    auto meta = [&](const std::string& key) {
        const auto found = ckpt.metadata.find(key);
        return found == ckpt.metadata.end() ? std::string{} : found->second;
    };
    RunConfig eff = cfg;
    if (eff.dataset.empty()) eff.dataset = meta("dataset_path");
    const std::string mode = resolved_mode(cfg, meta("mode").empty() ? "multivariate" : meta("mode"));
    const std::string target = cfg.target;
    const PreparedData data = prepare_dataset(eff.dataset, mode, target);
    const auto horizons = horizons_for(cfg, eff.dataset);
    const auto records = evaluate(model, data, eff.dataset, mode, ckpt.train_config.variant, ckpt.train_config.seed,
                                  horizons);
    std::filesystem::create_directories(cfg.out_dir);
    write_results_csv(cfg.out_dir / "results.csv", records);
    if (cfg.plot) {
        std::vector<std::string> labels;
        std::vector<double> mses;
        for (const auto& r : records) {
            labels.push_back(std::to_string(r.row.metrics.horizon));
            mses.push_back(r.row.metrics.mse);
        }
        write_svg_chart(cfg.out_dir / "mse_by_horizon.svg", "test MSE by horizon", labels, mses, true);
    }
    for (const auto& r : records) out << results_csv_line(r) << '\n';
    return kOk;
}

int cmd_ablate(const RunConfig& cfg, std::ostream& out) {
    if (cfg.variants.size() < 2) throw UsageError("ablate needs at least two entries in 'variants'");
    const std::string mode = resolved_mode(cfg);
    const PreparedData data = prepare_dataset(cfg.dataset, mode, cfg.target);
    const auto horizons = horizons_for(cfg, cfg.dataset);
    std::filesystem::create_directories(cfg.out_dir);

    std::vector<ResultRecord> all;
    std::vector<std::string> summaries;
    for (const auto variant : cfg.variants) {
        const TrainedModel trained = train_on(cfg, data, variant, out);
        const auto dir = cfg.out_dir / to_string(variant);
        std::filesystem::create_directories(dir);
        save_checkpoint(dir / "checkpoint.stsc", checkpoint_for(trained, cfg, mode));
        write_loss_csv(dir / "loss_history.csv", trained.state.loss_history);
        const auto records = evaluate(trained.model, data, cfg.dataset, mode, variant, cfg.train.seed, horizons);
        double mse = 0.0, mae = 0.0;
        for (const auto& r : records) {
            mse += r.row.metrics.mse;
            mae += r.row.metrics.mae;
        }
        const auto n = static_cast<double>(records.size());
        summaries.push_back("variant=" + to_string(variant) + " avg_mse=" + fmt_double(mse / n) +
                            " avg_mae=" + fmt_double(mae / n));
        all.insert(all.end(), records.begin(), records.end());
    }
    write_results_csv(cfg.out_dir / "ablation_results.csv", all);
    for (const auto& s : summaries) out << s << '\n';
    return kOk;
}

int cmd_gradcheck(std::uint64_t seed, const std::vector<GradCheckCase>& cases, std::ostream& out) {
    bool ok = true;
    for (const auto& r : run_gradcheck(seed, cases)) {
        const bool pass = r.max_rel_error < kGradCheckTolerance;
        ok = ok && pass;
        out << r.name << " max_rel_error=" << fmt_double(r.max_rel_error) << (pass ? " ok" : " FAIL") << '\n';
    }
    out << (ok ? "gradcheck passed" : "gradcheck FAILED") << '\n';
    return ok ? kOk : kCheckFailed;
}

int cmd_synth(const RunConfig& cfg, std::ostream& out) {
    SynthConfig sc;
    sc.n_features = cfg.synth_features;
    sc.length = cfg.synth_length;
    sc.periods = cfg.synth_periods;
    sc.noise_std = cfg.synth_noise;
    sc.seed = cfg.train.seed;
    TimeSeries ts;
    try {
        ts = synth_series(sc);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    std::filesystem::path path = cfg.out_dir;
    if (path.extension() != ".csv") {
        std::filesystem::create_directories(path);
        path /= "synth.csv";
    } else if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    write_csv(path, ts);
    out << "wrote " << path.string() << " (" << ts.length << " rows, " << ts.channels() << " features)\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"SimTS: self-supervised time-series representations for forecasting"};
    app.require_subcommand(1, 1);

    struct Sub {
        CLI::App* app;
        std::string config_path;
        std::map<std::string, std::string> flags;
        bool plot = false;
    };
    std::map<std::string, Sub> subs;
    const std::vector<std::pair<std::string, std::string>> commands{
        {"train", "Train a SimTS encoder on a CSV dataset"},
        {"eval", "Evaluate a checkpoint with the ridge forecasting protocol"},
        {"ablate", "Train and evaluate several loss variants with a shared config"},
        {"synth", "Write a synthetic sum-of-sinusoids CSV"}};
    for (const auto& [name, help] : commands) {
        Sub& s = subs[name];
        s.app = app.add_subcommand(name, help);
        s.app->add_option("--config", s.config_path, "key=value config file");
        for (const auto& key : config_keys()) {
            if (key == "plot") continue;
            s.app->add_option("--" + dashed(key), s.flags[key], "override '" + key + "'");
        }
        s.app->add_flag("--plot", s.plot, "write SVG plots");
    }
    std::uint64_t gradcheck_seed = 0;
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    gradcheck->add_option("--seed", gradcheck_seed, "random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "simts: " << e.what() << '\n';
        return kUsage;
    }

    try {
        if (gradcheck->parsed()) return cmd_gradcheck(gradcheck_seed, default_gradcheck_cases(), out);

        for (auto& [name, s] : subs) {
            if (!s.app->parsed()) continue;
            std::map<std::string, std::string> values;
            if (!s.config_path.empty()) {
                std::ifstream f(s.config_path);
                if (!f) throw DataError("cannot read config file " + s.config_path);
                std::stringstream buf;
                buf << f.rdbuf();
                values = parse_config_text(buf.str(), s.config_path);
            }
            for (const auto& key : config_keys()) {
                if (key == "plot") continue;
                if (s.app->get_option("--" + dashed(key))->count() > 0) values[key] = s.flags[key];
            }
            if (s.plot) values["plot"] = "true";
            const RunConfig cfg = build_run_config(values);
            if (name == "train") return cmd_train(cfg, out);
            if (name == "eval") return cmd_eval(cfg, out);
            if (name == "ablate") return cmd_ablate(cfg, out);
            if (name == "synth") return cmd_synth(cfg, out);
        }
        return kUsage;
    } catch (const UsageError& e) {
        err << "simts: " << e.what() << '\n';
        return kUsage;
    } catch (const CompatibilityError& e) {
        err << "simts: " << e.what() << '\n';
        return kIncompatible;
    } catch (const DataError& e) {
        err << "simts: " << e.what() << '\n';
        return kDataError;
    } catch (const CheckpointError& e) {
        err << "simts: " << e.what() << '\n';
        return kDataError;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "simts: " << e.what() << '\n';
        return kDataError;
    } catch (const std::invalid_argument& e) {
        err << "simts: " << e.what() << '\n';
        return kIncompatible;
    } catch (const std::exception& e) {
        err << "simts: " << e.what() << '\n';
        return kDataError;
    }
}

}  // namespace simts::cli
