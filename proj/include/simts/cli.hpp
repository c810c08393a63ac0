#pragma once

#include "simts/gradcheck.hpp"
#include "simts/training.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace simts::cli {

enum ExitCode : int {
    kOk = 0,
    kCheckFailed = 1,
    kUsage = 2,
    kDataError = 3,
    kIncompatible = 4,
};

/// Bad command line or config file; message names the offending key.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dataset/checkpoint shapes that cannot be combined.
class CompatibilityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    std::string dataset;
    std::string mode;  // "univariate" or "multivariate"; empty means multivariate or the checkpoint's mode
    std::string target = "OT";
    TrainConfig train;
    std::size_t projection_dim = 64;
    std::size_t latent_dim = 320;
    std::vector<std::size_t> horizons;  // empty: dataset default
    std::vector<LossVariant> variants;
    std::filesystem::path out_dir;
    std::string checkpoint;
    bool plot = false;

    // synth
    std::size_t synth_features = 1;
    std::size_t synth_length = 1000;
    std::vector<std::vector<double>> synth_periods;
    double synth_noise = 0.0;
};

/// Keys accepted in config files; flags use the same names with '-' for '_'.
const std::vector<std::string>& config_keys();

/// Flat key=value text; '#' starts a comment. Unknown keys raise UsageError.
std::map<std::string, std::string> parse_config_text(const std::string& text, const std::string& origin);

/// Typed view of merged key/values. Malformed values raise UsageError.
RunConfig build_run_config(const std::map<std::string, std::string>& values);

int cmd_train(const RunConfig& cfg, std::ostream& out);
int cmd_eval(const RunConfig& cfg, std::ostream& out);
int cmd_ablate(const RunConfig& cfg, std::ostream& out);
int cmd_gradcheck(std::uint64_t seed, const std::vector<GradCheckCase>& cases, std::ostream& out);
int cmd_synth(const RunConfig& cfg, std::ostream& out);

/// Entry point shared by the executable and tests; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace simts::cli
