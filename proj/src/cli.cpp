#include "josa/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "josa/errors.hpp"
#include "josa/eval.hpp"
#include "josa/io.hpp"
#include "josa/parallel.hpp"

namespace josa {

using nlohmann::json;

int exit_code_for(const std::exception &e) {
    if (dynamic_cast<const ConfigError *>(&e)) {
        return kExitConfig;
    }
    if (dynamic_cast<const PathMissingError *>(&e) || dynamic_cast<const fs::filesystem_error *>(&e)) {
        return kExitPathMissing;
    }
    if (dynamic_cast<const DivergenceError *>(&e)) {
        return kExitDivergence;
    }
    if (dynamic_cast<const DegenerateDataError *>(&e) || dynamic_cast<const NonFiniteError *>(&e) ||
        dynamic_cast<const ShapeMismatchError *>(&e) || dynamic_cast<const DimensionError *>(&e) ||
        dynamic_cast<const IdMismatchError *>(&e) || dynamic_cast<const TooFewSamplesError *>(&e)) {
        return kExitDegenerate;
    }
    if (dynamic_cast<const ContainerError *>(&e)) {
        return kExitContainer;
    }
    return kExitFailure;
}

namespace {

struct Key {
    std::string section;
    std::string name;
    std::string doc;
    std::function<json(const RunConfig &)> get;
    std::function<void(RunConfig &, const json &)> set;
};

template <typename T>
Key bind(std::string section, std::string name, std::string doc, std::function<T &(RunConfig &)> ref) {
    Key k;
    k.section = std::move(section);
    k.name = std::move(name);
    k.doc = std::move(doc);
    k.get = [ref](const RunConfig &c) {
        RunConfig tmp = c;
        return json(ref(tmp));
    };
    k.set = [ref](RunConfig &c, const json &j) { ref(c) = j.get<T>(); };
    return k;
}

#define JOSA_KEY(T, section, name, doc, expr) bind<T>(section, name, doc, [](RunConfig &c) -> T & { return expr; })

const std::vector<Key> &keys() {
    static const std::vector<Key> table = [] {
        std::vector<Key> k;
        k.push_back(JOSA_KEY(double, "hyperparams", "lambda_joint", "smoothness weight of the joint field", c.hp.lambda_joint));
        k.push_back(JOSA_KEY(double, "hyperparams", "lambda_geom", "smoothness weight of the geometric field", c.hp.lambda_geom));
        k.push_back(JOSA_KEY(double, "hyperparams", "lambda_func", "smoothness weight of the functional field", c.hp.lambda_func));
        k.push_back(JOSA_KEY(double, "hyperparams", "alpha_joint", "centrality weight on the cohort-mean joint displacement", c.hp.alpha_joint));
        k.push_back(JOSA_KEY(double, "hyperparams", "w_func", "functional data-term weight (w_func + w_geom = 1)", c.hp.w_func));
        k.push_back(JOSA_KEY(double, "hyperparams", "w_geom", "geometric data-term weight", c.hp.w_geom));
        k.push_back(JOSA_KEY(double, "hyperparams", "sigma_aug_deform", "augmentation displacement std, px", c.hp.sigma_aug_deform));
        k.push_back(JOSA_KEY(double, "hyperparams", "sigma_noise_geom", "augmentation noise std, geometric channels", c.hp.sigma_noise_geom));
        k.push_back(JOSA_KEY(double, "hyperparams", "sigma_noise_func", "augmentation noise std, functional channels", c.hp.sigma_noise_func));
        k.push_back(JOSA_KEY(double, "hyperparams", "aug_smoothing_px", "augmentation velocity smoothing, px", c.hp.aug_smoothing_px));
        k.push_back(JOSA_KEY(int, "hyperparams", "steps", "scaling-and-squaring steps", c.hp.steps));

        k.push_back(JOSA_KEY(int, "fit", "batch_size", "subjects per batch", c.fit.batch_size));
        k.push_back(JOSA_KEY(int, "fit", "epochs", "passes over the cohort", c.fit.epochs));
        k.push_back(JOSA_KEY(std::uint64_t, "fit", "seed", "shuffling, split and atlas-init seed", c.fit.seed));
        k.push_back(JOSA_KEY(double, "fit", "lr0", "schedule: initial learning rate", c.fit.schedule.lr0));
        k.push_back(JOSA_KEY(double, "fit", "lr_floor", "schedule: rate reached after decay_epochs", c.fit.schedule.lr_floor));
        k.push_back(JOSA_KEY(int, "fit", "decay_epochs", "schedule: length of the linear decay", c.fit.schedule.decay_epochs));
        k.push_back(JOSA_KEY(double, "fit", "plateau_factor", "schedule: factor per plateau event", c.fit.schedule.plateau_factor));
        k.push_back(JOSA_KEY(int, "fit", "plateau_patience", "schedule: epochs without improvement per event", c.fit.schedule.plateau_patience));
        k.push_back(JOSA_KEY(double, "fit", "lr_scale", "Adam step = schedule lr * lr_scale (pixel units)", c.fit.lr_scale));
        k.push_back(JOSA_KEY(double, "fit", "atlas_lr_scale", "atlas step relative to the velocity step", c.fit.atlas_lr_scale));
        {
            Key f;
            f.section = "fit";
            f.name = "fixed_lr";
            f.doc = "constant Adam step overriding the schedule (null = schedule)";
            f.get = [](const RunConfig &c) { return c.fit.fixed_lr ? json(*c.fit.fixed_lr) : json(nullptr); };
            f.set = [](RunConfig &c, const json &j) {
                c.fit.fixed_lr = j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
            };
            k.push_back(f);
        }
        {
            Key f;
            f.section = "fit";
            f.name = "atlas_init";
            f.doc = "\"noise\" (N(0, atlas_init_std)) or \"group_mean\"";
            f.get = [](const RunConfig &c) {
                return json(c.fit.atlas_init == AtlasInit::GroupMean ? "group_mean" : "noise");
            };
            f.set = [](RunConfig &c, const json &j) {
                const std::string s = j.get<std::string>();
                if (s == "noise") {
                    c.fit.atlas_init = AtlasInit::Noise;
                } else if (s == "group_mean") {
                    c.fit.atlas_init = AtlasInit::GroupMean;
                } else {
                    throw ConfigError("fit.atlas_init must be \"noise\" or \"group_mean\", got \"" + s + "\"");
                }
            };
            k.push_back(f);
        }
        k.push_back(JOSA_KEY(double, "fit", "atlas_init_std", "std of the noise atlas", c.fit.atlas_init_std));
        k.push_back(JOSA_KEY(bool, "fit", "separate_fields", "false: function follows the geometric field", c.fit.separate_fields));
        k.push_back(JOSA_KEY(bool, "fit", "augment", "random deformation + noise per epoch", c.fit.augment));
        k.push_back(JOSA_KEY(bool, "fit", "standardize_inputs", "median/std standardization of every channel", c.fit.standardize_inputs));
        k.push_back(JOSA_KEY(double, "fit", "val_fraction", "fraction held out of the atlas update", c.fit.val_fraction));
        k.push_back(JOSA_KEY(int, "fit", "coarse_epochs", "leading epochs at half resolution (0 = single level)", c.fit.coarse_epochs));

        k.push_back(JOSA_KEY(int, "synth", "n_subjects", "cohort size", c.synth.n_subjects));
        k.push_back(JOSA_KEY(int, "synth", "height", "grid rows", c.synth.height));
        k.push_back(JOSA_KEY(int, "synth", "width", "grid columns", c.synth.width));
        k.push_back(JOSA_KEY(int, "synth", "geom_channels", "geometric channels", c.synth.geom_channels));
        k.push_back(JOSA_KEY(int, "synth", "func_channels", "functional channels", c.synth.func_channels));
        k.push_back(JOSA_KEY(double, "synth", "joint_std", "joint velocity std, px", c.synth.joint_std));
        k.push_back(JOSA_KEY(double, "synth", "geom_std", "geometric velocity std, px", c.synth.geom_std));
        k.push_back(JOSA_KEY(double, "synth", "func_std", "functional velocity std, px", c.synth.func_std));
        k.push_back(JOSA_KEY(double, "synth", "smoothing_px", "velocity prior smoothing, px", c.synth.smoothing_px));
        k.push_back(JOSA_KEY(double, "synth", "noise_geom", "observation noise, geometric", c.synth.noise_geom));
        k.push_back(JOSA_KEY(double, "synth", "noise_func", "observation noise, functional", c.synth.noise_func));
        k.push_back(JOSA_KEY(int, "synth", "geom_order", "highest harmonic order of geometric channels", c.synth.geom_order));
        k.push_back(JOSA_KEY(int, "synth", "blob_count", "functional blobs per channel", c.synth.blob_count));
        k.push_back(JOSA_KEY(double, "synth", "blob_sigma_px", "blob width, px", c.synth.blob_sigma_px));
        k.push_back(JOSA_KEY(double, "synth", "offset_fraction", "fraction of subjects with modality offsets", c.synth.offset_fraction));
        k.push_back(JOSA_KEY(std::uint64_t, "synth", "seed", "cohort seed", c.synth.seed));

        k.push_back(JOSA_KEY(int, "register", "iterations", "Adam iterations per subject", c.reg.iterations));
        k.push_back(JOSA_KEY(double, "register", "lr", "initial Adam step, decays to 0.1x", c.reg.lr));
        k.push_back(JOSA_KEY(bool, "register", "separate_fields", "optimize the geometric field too", c.reg.separate_fields));

        k.push_back(JOSA_KEY(std::vector<std::string>, "ablate", "variants", "subset of full, shared, fixed_atlas", c.ablate.variants));
        k.push_back(JOSA_KEY(double, "ablate", "coarse_fraction", "share of fit.epochs at half resolution in ablation fits", c.ablate.coarse_fraction));
        k.push_back(JOSA_KEY(bool, "ablate", "clean_reference", "score on noise-free renderings when truth exists", c.ablate.clean_reference));
        return k;
    }();
    return table;
}

#undef JOSA_KEY

} // namespace

void RunConfig::resolve() {
    hp.validate();
    fit.hp = hp;
    reg.hp = hp;
    fit.validate();
    synth.validate();
    if (reg.iterations < 0 || !(reg.lr > 0.0)) {
        throw ConfigError("register: iterations must be >= 0 and lr > 0");
    }
    for (const auto &v : ablate.variants) {
        if (v != "full" && v != "shared" && v != "fixed_atlas") {
            throw ConfigError("ablate.variants: unknown variant \"" + v + "\"");
        }
    }
    if (!(ablate.coarse_fraction >= 0.0 && ablate.coarse_fraction <= 1.0)) {
        throw ConfigError("ablate.coarse_fraction must lie in [0, 1]");
    }
}

RunConfig parse_run_config(const json &j) {
    if (!j.is_object()) {
        throw ConfigError("config: top level must be an object");
    }
    RunConfig cfg;
    for (const auto &[section, body] : j.items()) {
        bool known_section = false;
        for (const auto &k : keys()) {
            known_section = known_section || k.section == section;
        }
        if (!known_section) {
            throw ConfigError("config: unknown section \"" + section + "\"");
        }
        if (!body.is_object()) {
            throw ConfigError("config: section \"" + section + "\" must be an object");
        }
        for (const auto &[name, value] : body.items()) {
            const Key *key = nullptr;
            for (const auto &k : keys()) {
                if (k.section == section && k.name == name) {
                    key = &k;
                }
            }
            if (!key) {
                throw ConfigError("config: unknown key \"" + section + "." + name + "\" (see --help for the list)");
            }
            try {
                key->set(cfg, value);
            } catch (const json::exception &e) {
                throw ConfigError("config: bad value for \"" + section + "." + name + "\": " + e.what());
            }
        }
    }
    cfg.resolve();
    return cfg;
}

json to_json(const RunConfig &cfg) {
    json j = json::object();
    for (const auto &k : keys()) {
        j[k.section][k.name] = k.get(cfg);
    }
    return j;
}

std::string config_help() {
    const RunConfig defaults;
    std::ostringstream os;
    os << "Config keys (JSON: {\"section\": {\"key\": value}}), with defaults:\n";
    for (const auto &k : keys()) {
        std::string name = k.section + "." + k.name;
        std::string def = k.get(defaults).dump();
        os << "  " << std::left << std::setw(30) << name << std::setw(24) << def << k.doc << "\n";
    }
    return os.str();
}

namespace {

class RunLog {
public:
    RunLog(const fs::path &dir, bool quiet) : quiet_(quiet) {
        if (!dir.empty()) {
            fs::create_directories(dir);
            file_.open(dir / "log.txt", std::ios::trunc);
        }
    }

    void line(const std::string &s) {
        if (file_) {
            file_ << s << "\n";
            file_.flush();
        }
        if (!quiet_) {
            std::cout << s << "\n";
            std::cout.flush();
        }
    }

private:
    std::ofstream file_;
    bool quiet_;
};

std::string fmt(const char *f, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

struct Common {
    std::string config;
    int threads = 0;
    bool quiet = false;
    std::vector<std::string> args;
};

RunConfig load_config(const Common &c) {
    if (c.config.empty()) {
        RunConfig cfg;
        cfg.resolve();
        return cfg;
    }
    if (!fs::exists(c.config)) {
        throw PathMissingError("config file " + c.config + " does not exist");
    }
    return parse_run_config(read_json(c.config));
}

int thread_count(const Common &c) { return c.threads > 0 ? c.threads : default_threads(); }

void echo_config(const fs::path &dir, const std::string &command, const RunConfig &cfg, const Common &c,
                 const json &extra = json::object()) {
    json j;
    j["command"] = command;
    j["arguments"] = c.args;
    j["threads"] = thread_count(c);
    j["config"] = to_json(cfg);
    for (const auto &[k, v] : extra.items()) {
        j[k] = v;
    }
    write_json(dir / "config.json", j);
}

void require_dir(const std::string &path, const char *what) {
    if (!fs::is_directory(path)) {
        throw PathMissingError(std::string(what) + " " + path + " does not exist");
    }
}

void require_file(const std::string &path, const char *what) {
    if (!fs::is_regular_file(path)) {
        throw PathMissingError(std::string(what) + " " + path + " does not exist");
    }
}

void dump_images(const fs::path &dir, const std::string &stem, const Field &f) {
    for (int c = 0; c < f.channels(); ++c) {
        write_pgm16(dir / (stem + "_c" + std::to_string(c) + ".pgm"), f, c);
    }
}

double max_of(const std::vector<double> &x) {
    double m = 0.0;
    for (double v : x) {
        m = std::max(m, v);
    }
    return m;
}

int cmd_synth(const Common &c, const std::string &out, std::optional<std::uint64_t> seed) {
    RunConfig cfg = load_config(c);
    if (seed) {
        cfg.synth.seed = *seed;
    }
    cfg.resolve();
    RunLog log(out, c.quiet);
    const Cohort cohort = make_cohort(cfg.synth);
    write_cohort(out, cohort);
    echo_config(out, "synth", cfg, c);
    dump_images(out, "truth/atlas_geom", cohort.atlas.geom);
    dump_images(out, "truth/atlas_func", cohort.atlas.func);
    log.line("synth: wrote " + std::to_string(cohort.subjects.size()) + " subjects to " + out);
    return kExitOk;
}

int cmd_fit(const Common &c, const std::string &cohort_dir, const std::string &out, std::optional<int> epochs,
            std::optional<std::uint64_t> seed) {
    RunConfig cfg = load_config(c);
    require_dir(cohort_dir, "cohort directory");
    if (epochs) {
        cfg.fit.epochs = *epochs;
    }
    if (seed) {
        cfg.fit.seed = *seed;
    }
    cfg.resolve();
    cfg.fit.threads = thread_count(c);
    RunLog log(out, c.quiet);
    echo_config(out, "fit", cfg, c, {{"cohort", cohort_dir}});

    std::vector<SubjectRecord> subjects = load_observations(cohort_dir);
    log.line("fit: " + std::to_string(subjects.size()) + " subjects, " + std::to_string(cfg.fit.epochs) +
             " epochs, " + std::to_string(cfg.fit.threads) + " threads");
    const int every = std::max(1, cfg.fit.epochs / 20);
    cfg.fit.on_epoch = [&](const EpochRecord &e) {
        if (e.epoch % every == 0 || e.epoch + 1 == cfg.fit.epochs) {
            log.line("epoch " + std::to_string(e.epoch) + " loss " + fmt("%.6g", e.loss.total) + " val " +
                     fmt("%.6g", e.validation_loss) + " lr " + fmt("%.3g", e.lr) + " grid " +
                     std::to_string(e.grid_height) + " t " + fmt("%.1fs", e.wall_seconds));
        }
    };
    const FitResult res = fit(std::move(subjects), cfg.fit);

    save_atlas(fs::path(out) / "atlas.josa", res.atlas);
    dump_images(out, "atlas_geom", res.atlas.geom);
    dump_images(out, "atlas_func", res.atlas.func);
    json negjac = json::array();
    double worst = 0.0;
    for (const auto &s : res.subjects) {
        save_subject(fs::path(out) / "subjects" / (s.id + ".josa"), s);
        const double a = jacobian_negative_fraction(integrate(s.v_joint, cfg.hp.steps));
        const double b = jacobian_negative_fraction(integrate(s.v_geom, cfg.hp.steps));
        const double d = jacobian_negative_fraction(integrate(s.v_func, cfg.hp.steps));
        worst = std::max({worst, a, b, d});
        negjac.push_back({{"id", s.id}, {"joint", a}, {"geom", b}, {"func", d}});
    }
    json report = to_json(res.report);
    report["final_loss"] = res.report.epochs.back().loss.total;
    report["negative_jacobian"] = negjac;
    report["max_negative_jacobian"] = worst;
    write_json(fs::path(out) / "report.json", report);
    write_fit_csv(fs::path(out) / "fit.csv", res.report);
    log.line("fit: initial loss " + fmt("%.6g", res.report.initial_loss) + ", final loss " +
             fmt("%.6g", res.report.epochs.back().loss.total) + ", max negative-jacobian fraction " +
             fmt("%.4g", worst));
    return kExitOk;
}

int cmd_register(const Common &c, const std::string &subject, const std::string &atlas_path, const std::string &out) {
    RunConfig cfg = load_config(c);
    require_file(subject, "subject file");
    require_file(atlas_path, "atlas file");
    RunLog log(out, c.quiet);
    echo_config(out, "register", cfg, c, {{"subject", subject}, {"atlas", atlas_path}});
    // Only the geometric channels are read; functional data never enters inference.
    const auto tensors = read_container(subject);
    Field geom = to_field(find_tensor(tensors, "geom"));
    const Atlas atlas = load_atlas(atlas_path);
    if (cfg.fit.standardize_inputs) {
        geom = standardize(geom);
    }
    const Registration r = register_subject(geom, atlas, cfg.reg);
    write_container(fs::path(out) / "registration.josa",
                    {to_tensor("v_joint", r.v_joint.v), to_tensor("v_geom", r.v_geom.v),
                     to_tensor("v_func", r.v_func.v), to_tensor("u_joint", r.joint.u), to_tensor("u_geom", r.geom.u),
                     to_tensor("u_func", r.func.u),
                     to_tensor("geom_in_atlas_space", to_atlas_space(geom, r.v_geom, r.v_joint, cfg.hp.steps))});
    write_json(fs::path(out) / "report.json", to_json(r.diagnostics));
    log.line("register: geometric loss " + fmt("%.6g", r.diagnostics.initial_geom_loss) + " -> " +
             fmt("%.6g", r.diagnostics.final_geom_loss));
    return kExitOk;
}

std::vector<SubjectRecord> reference_images(const RunConfig &cfg, const std::string &cohort_dir,
                                            const std::vector<SubjectRecord> &order, RunLog &log) {
    if (!cfg.ablate.clean_reference) {
        return {};
    }
    const auto truth = load_truth_files(cohort_dir);
    if (!truth) {
        log.line("no ground truth in the cohort; scoring the observed images");
        return {};
    }
    std::vector<SubjectRecord> clean = render_clean(*truth);
    std::vector<SubjectRecord> ordered;
    for (const auto &s : order) {
        auto it = std::find_if(clean.begin(), clean.end(), [&](const SubjectRecord &r) { return r.id == s.id; });
        if (it == clean.end()) {
            throw IdMismatchError("ground truth has no subject " + s.id);
        }
        ordered.push_back(*it);
    }
    log.line("scoring noise-free renderings of the ground truth");
    return ordered;
}

void write_eval_outputs(const fs::path &out, const EvalReport &rep) {
    write_json(out / "report.json", to_json(rep));
    write_eval_csv(out / "eval.csv", rep);
    std::vector<Tensor> means;
    for (const auto &v : rep.variants) {
        means.push_back(to_tensor(v.name + "_group_mean_geom", v.group_mean_geom));
        dump_images(out, v.name + "_group_mean_geom", v.group_mean_geom);
        if (!v.group_mean_func.empty()) {
            means.push_back(to_tensor(v.name + "_group_mean_func", v.group_mean_func));
            dump_images(out, v.name + "_group_mean_func", v.group_mean_func);
        }
    }
    write_container(out / "group_means.josa", means);
}

void log_variant(RunLog &log, const VariantReport &v) {
    log.line(v.name + ": median improvement geom " + fmt("%.4f", median_of(v.geom_improvement)) + " (p " +
             fmt("%.3g", v.geom_test.p_value) + "), func " + fmt("%.4f", median_of(v.func_improvement)) + " (p " +
             fmt("%.3g", v.func_test.p_value) + "), max negative-jacobian " +
             fmt("%.4g", std::max({max_of(v.negjac_joint), max_of(v.negjac_geom), max_of(v.negjac_func)})));
}

int cmd_eval(const Common &c, const std::string &cohort_dir, const std::string &run_dir, const std::string &out) {
    RunConfig cfg = load_config(c);
    require_dir(cohort_dir, "cohort directory");
    require_dir(run_dir, "run directory");
    RunLog log(out, c.quiet);
    echo_config(out, "eval", cfg, c, {{"cohort", cohort_dir}, {"run", run_dir}});
    const json run_report = read_json(fs::path(run_dir) / "report.json");
    FitResult fitted;
    fitted.report.separate_fields = run_report.value("separate_fields", true);
    for (const auto &s : load_observations(cohort_dir)) {
        fitted.subjects.push_back(load_subject(fs::path(run_dir) / "subjects" / (s.id + ".josa"), s.id));
    }
    const auto ref = reference_images(cfg, cohort_dir, fitted.subjects, log);
    EvalReport rep;
    rep.variants.push_back(evaluate_fit(fitted, "run", cfg.hp.steps, ref.empty() ? nullptr : &ref));
    rep.seconds = rep.variants.back().seconds;
    write_eval_outputs(out, rep);
    log_variant(log, rep.variants.back());
    return kExitOk;
}

int cmd_ablate(const Common &c, const std::string &cohort_dir, const std::string &out) {
    RunConfig cfg = load_config(c);
    require_dir(cohort_dir, "cohort directory");
    RunLog log(out, c.quiet);
    echo_config(out, "ablate", cfg, c, {{"cohort", cohort_dir}});
    AblationConfig ac;
    ac.fit = cfg.fit;
    ac.fit.coarse_epochs = static_cast<int>(std::lround(cfg.ablate.coarse_fraction * cfg.fit.epochs));
    ac.fit.threads = thread_count(c);
    auto has = [&](const char *v) {
        return std::find(cfg.ablate.variants.begin(), cfg.ablate.variants.end(), v) != cfg.ablate.variants.end();
    };
    ac.full = has("full");
    ac.shared = has("shared");
    ac.fixed_atlas = has("fixed_atlas");
    const auto subjects = load_observations(cohort_dir);
    const auto ref = reference_images(cfg, cohort_dir, subjects, log);
    log.line("ablate: " + std::to_string(subjects.size()) + " subjects");
    const EvalReport rep = ablate(subjects, ac, ref.empty() ? nullptr : &ref);
    write_eval_outputs(out, rep);
    for (const auto &v : rep.variants) {
        log_variant(log, v);
    }
    for (const auto &cmp : rep.comparisons) {
        log.line(cmp.name + ": median delta " + fmt("%.4f", cmp.median_delta) + ", one-tailed Wilcoxon p " +
                 fmt("%.3g", cmp.test.p_value));
    }
    return kExitOk;
}

GridSpec parse_grid(const std::string &s) {
    const auto x = s.find('x');
    try {
        if (x == std::string::npos) {
            throw std::invalid_argument(s);
        }
        std::size_t used_h = 0;
        std::size_t used_w = 0;
        const int h = std::stoi(s.substr(0, x), &used_h);
        const int w = std::stoi(s.substr(x + 1), &used_w);
        if (used_h != x || used_w != s.size() - x - 1) {
            throw std::invalid_argument(s);
        }
        return make_grid(h, w);
    } catch (const DimensionError &e) {
        throw ConfigError(std::string("--grid: ") + e.what());
    } catch (const std::exception &) {
        throw ConfigError("--grid expects HxW, e.g. 8x16; got \"" + s + "\"");
    }
}

int cmd_check_grad(const Common &c, const std::string &grid, std::uint64_t seed, int subjects, double h, double tol,
                   const std::string &out) {
    const GridSpec g = parse_grid(grid);
    RunLog log(out, c.quiet);
    const GradientCheckReport r = check_gradients(g, subjects, seed, h);
    for (const auto &cls : r.classes) {
        log.line("  " + cls.name + ": " + std::to_string(cls.components) + " components, max relative error " +
                 fmt("%.3e", cls.max_relative_error));
    }
    log.line("max relative error " + fmt("%.3e", r.max_relative_error) + " (tolerance " + fmt("%.1e", tol) + ", " +
             fmt("%.2fs", r.seconds) + ")");
    if (!out.empty()) {
        json j = to_json(r);
        j["grid"] = grid;
        j["seed"] = seed;
        j["subjects"] = subjects;
        j["tolerance"] = tol;
        write_json(fs::path(out) / "report.json", j);
    }
    return r.max_relative_error <= tol ? kExitOk : kExitCheckFailed;
}

int cmd_check_likelihood(const Common &c, const std::vector<double> &sigmas, long trials, std::uint64_t seed,
                         double tol, const std::string &out) {
    RunLog log(out, c.quiet);
    json all = json::array();
    bool ok = true;
    for (double s : sigmas) {
        const LikelihoodReport r = verify_marginal_likelihood(s, trials, seed);
        ok = ok && r.relative_error <= tol;
        log.line("sigma " + fmt("%g", s) + ": empirical variance " + fmt("%.5f", r.empirical_variance) +
                 ", expected " + fmt("%.5f", r.expected_variance) + ", relative error " +
                 fmt("%.4f", r.relative_error));
        all.push_back(to_json(r));
    }
    if (!out.empty()) {
        write_json(fs::path(out) / "report.json", {{"results", all}, {"tolerance", tol}, {"seed", seed}});
    }
    return ok ? kExitOk : kExitCheckFailed;
}

} // namespace

int run_cli(int argc, char **argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run_cli(args);
}

int run_cli(const std::vector<std::string> &args_in) {
    CLI::App app{"josa: joint registration of geometric and functional spherical maps with atlas estimation"};
    app.require_subcommand(1);
    app.footer("\n" + config_help() +
               "\nExit codes: 0 ok, 1 other error, 2 config, 3 missing path, 4 divergence, 5 degenerate data,\n"
               "6 container format, 7 check failed. --threads defaults to $JOSA_THREADS, else all cores.");

    Common common;
    common.args = args_in;
    auto add_common = [&](CLI::App *sub) {
        sub->add_option("--config", common.config, "JSON config file");
        sub->add_option("--threads", common.threads, "worker threads (results do not depend on it)");
        sub->add_flag("--quiet", common.quiet, "log to the run directory only");
    };

    std::string out, cohort, run, subject, atlas, grid = "8x16";
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs;
    std::uint64_t check_seed = 1;
    int check_subjects = 2;
    double h = 1e-4, grad_tol = 1e-4, lik_tol = 0.05;
    std::vector<double> sigmas{0.5, 1.0};
    long trials = 10000;

    auto *synth = app.add_subcommand("synth", "generate a synthetic cohort directory");
    add_common(synth);
    synth->add_option("--out", out, "cohort directory")->required();
    synth->add_option("--seed", seed, "overrides synth.seed");

    auto *fitc = app.add_subcommand("fit", "estimate the atlas and every subject's deformations");
    add_common(fitc);
    fitc->add_option("--cohort", cohort, "cohort directory")->required();
    fitc->add_option("--out", out, "run directory")->required();
    fitc->add_option("--epochs", epochs, "overrides fit.epochs");
    fitc->add_option("--seed", seed, "overrides fit.seed");

    auto *reg = app.add_subcommand("register", "register one subject to a fitted atlas from geometry alone");
    add_common(reg);
    reg->add_option("--subject", subject, "subject container")->required();
    reg->add_option("--atlas", atlas, "atlas container")->required();
    reg->add_option("--out", out, "output directory")->required();

    auto *ev = app.add_subcommand("eval", "score a fitted run against its cohort");
    add_common(ev);
    ev->add_option("--cohort", cohort, "cohort directory")->required();
    ev->add_option("--run", run, "run directory written by fit")->required();
    ev->add_option("--out", out, "output directory")->required();

    auto *abl = app.add_subcommand("ablate", "fit full, shared-field and fixed-atlas variants and compare");
    add_common(abl);
    abl->add_option("--cohort", cohort, "cohort directory")->required();
    abl->add_option("--out", out, "output directory")->required();

    auto *cg = app.add_subcommand("check-grad", "compare analytic gradients with central differences");
    add_common(cg);
    cg->add_option("--grid", grid, "grid HxW")->capture_default_str();
    cg->add_option("--seed", check_seed, "instance seed")->capture_default_str();
    cg->add_option("--subjects", check_subjects, "subjects in the batch")->capture_default_str();
    cg->add_option("--step", h, "finite-difference step h")->capture_default_str();
    cg->add_option("--tolerance", grad_tol, "maximum relative error")->capture_default_str();
    cg->add_option("--out", out, "optional report directory");

    auto *cl = app.add_subcommand("check-likelihood", "Monte-Carlo check of the two-stage noise variance");
    add_common(cl);
    cl->add_option("--sigma", sigmas, "noise std values")->capture_default_str();
    cl->add_option("--trials", trials, "Monte-Carlo trials")->capture_default_str();
    cl->add_option("--seed", check_seed, "seed")->capture_default_str();
    cl->add_option("--tolerance", lik_tol, "maximum relative error")->capture_default_str();
    cl->add_option("--out", out, "optional report directory");

    std::vector<std::string> rev(args_in.rbegin(), args_in.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*synth) {
            return cmd_synth(common, out, seed);
        }
        if (*fitc) {
            return cmd_fit(common, cohort, out, epochs, seed);
        }
        if (*reg) {
            return cmd_register(common, subject, atlas, out);
        }
        if (*ev) {
            return cmd_eval(common, cohort, run, out);
        }
        if (*abl) {
            return cmd_ablate(common, cohort, out);
        }
        if (*cg) {
            return cmd_check_grad(common, grid, check_seed, check_subjects, h, grad_tol, out);
        }
        if (*cl) {
            return cmd_check_likelihood(common, sigmas, trials, check_seed, lik_tol, out);
        }
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return kExitFailure;
}

} // namespace josa
