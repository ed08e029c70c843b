#pragma once

#include <exception>
#include <string>
#include <vector>

#include "json.hpp"

#include "josa/model.hpp"
#include "josa/optim.hpp"
#include "josa/synth.hpp"

namespace josa {

// Exit codes, one per error class.
enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitConfig = 2,
    kExitPathMissing = 3,
    kExitDivergence = 4,
    kExitDegenerate = 5,
    kExitContainer = 6,
    kExitCheckFailed = 7,
};

int exit_code_for(const std::exception &e);

struct AblateSettings {
    std::vector<std::string> variants{"full", "shared", "fixed_atlas"};
    // Share of fit.epochs run at half resolution in every ablation fit.
    double coarse_fraction = 0.5;
    bool clean_reference = true;
};

// Everything a run can be configured with. JSON layout: one object per
// section (hyperparams, fit, synth, register, ablate).
struct RunConfig {
    Hyperparams hp;
    FitConfig fit;
    SynthConfig synth;
    RegisterConfig reg;
    AblateSettings ablate;

    // Copies hp into fit and reg and validates every section.
    void resolve();
};

// Throws ConfigError on unknown sections or keys and on mistyped values.
RunConfig parse_run_config(const nlohmann::json &j);
nlohmann::json to_json(const RunConfig &cfg);

// One line per key: "section.key  default  description".
std::string config_help();

int run_cli(int argc, char **argv);
int run_cli(const std::vector<std::string> &args);

} // namespace josa
