#include <algorithm>
#include <cmath>

#include "doctest.h"

#include "josa/errors.hpp"
#include "josa/model.hpp"
#include "josa/optim.hpp"
#include "josa/random_field.hpp"
#include "josa/synth.hpp"

using namespace josa;

namespace {

SynthConfig small_synth(int n = 6) {
    SynthConfig cfg;
    cfg.n_subjects = n;
    cfg.height = 32;
    cfg.width = 64;
    cfg.smoothing_px = 4.0;
    cfg.joint_std = 2.0;
    cfg.geom_std = 0.8;
    cfg.func_std = 0.8;
    cfg.blob_sigma_px = 3.0;
    return cfg;
}

double max_abs_all(const BatchGradient &g) {
    double m = std::max(max_abs(g.atlas_geom), max_abs(g.atlas_func));
    for (const auto &s : g.subjects) {
        m = std::max({m, max_abs(s.v_joint), max_abs(s.v_geom), max_abs(s.v_func)});
    }
    return m;
}

bool same_report(const FitReport &a, const FitReport &b) {
    if (a.epochs.size() != b.epochs.size() || a.initial_loss != b.initial_loss || a.train_ids != b.train_ids) {
        return false;
    }
    for (std::size_t e = 0; e < a.epochs.size(); ++e) {
        const EpochRecord &x = a.epochs[e];
        const EpochRecord &y = b.epochs[e];
        if (x.loss.total != y.loss.total || x.loss.geom != y.loss.geom || x.loss.func != y.loss.func ||
            x.validation_loss != y.validation_loss || x.lr != y.lr || x.plateau_events != y.plateau_events) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("learning rate schedule") {
    CHECK(lr_at(0, 0) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(lr_at(250, 0) == doctest::Approx(5.5e-4).epsilon(1e-12));
    CHECK(lr_at(500, 0) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(900, 0) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(600, 2) == doctest::Approx(1e-4 * 0.81).epsilon(1e-12));
    double prev = lr_at(0, 0);
    for (int e = 1; e < 700; ++e) {
        const double cur = lr_at(e, e / 300);
        CHECK(cur <= prev);
        prev = cur;
    }
}

TEST_CASE("plateau tracker counts stale windows past the decay phase") {
    Schedule s;
    s.decay_epochs = 10;
    s.plateau_patience = 5;
    PlateauTracker t(s);
    int events = 0;
    for (int e = 0; e < 10; ++e) {
        events = t.observe(e, 1.0);
    }
    CHECK(events == 0);
    for (int e = 10; e < 30; ++e) {
        events = t.observe(e, 1.0); // never improves
    }
    CHECK(events == 4);
    events = t.observe(30, 0.5);
    CHECK(events == 4);
}

TEST_CASE("adam update matches a hand computation") {
    std::vector<double> p{1.0, -2.0};
    AdamState st;
    const double lr = 0.1;
    adam_update(p, std::vector<double>{0.5, -0.1}, st, lr);
    CHECK(st.step == 1);
    // First step: bias-corrected m/sqrt(v) = g/|g|.
    CHECK(p[0] == doctest::Approx(1.0 - lr * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(-2.0 + lr * 0.1 / (0.1 + 1e-8)).epsilon(1e-14));
    const std::vector<double> p1 = p;
    adam_update(p, std::vector<double>{0.2, 0.3}, st, lr);
    const double m0 = 0.9 * (0.1 * 0.5) + 0.1 * 0.2, v0 = 0.999 * (0.001 * 0.25) + 0.001 * 0.04;
    const double m1 = 0.9 * (0.1 * -0.1) + 0.1 * 0.3, v1 = 0.999 * (0.001 * 0.01) + 0.001 * 0.09;
    const double c1 = 1.0 - 0.81, c2 = 1.0 - 0.999 * 0.999;
    CHECK(p[0] == doctest::Approx(p1[0] - lr * (m0 / c1) / (std::sqrt(v0 / c2) + 1e-8)).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(p1[1] - lr * (m1 / c1) / (std::sqrt(v1 / c2) + 1e-8)).epsilon(1e-12));
    CHECK(st.m.size() == 2);
    CHECK(st.step == 2);
}

TEST_CASE("gradients vanish at the global minimum") {
    const GridSpec g = make_grid(16, 32);
    Rng rng(3);
    const Atlas atlas{gaussian_smooth(white_noise(2, g, rng), 2.0), gaussian_smooth(white_noise(1, g, rng), 2.0)};
    std::vector<SubjectRecord> batch{make_subject("a", atlas.geom, atlas.func), make_subject("b", atlas.geom, atlas.func)};
    const BatchGradient bg = loss_and_grad(batch, atlas, Hyperparams{});
    CHECK(bg.loss.total == 0.0);
    CHECK(max_abs_all(bg) == 0.0);
}

TEST_CASE("analytic gradient matches central differences, one subject one channel") {
    const GradientCheckReport r = check_gradients(make_grid(8, 16), 1, 7, 1e-4, 1);
    CHECK(r.classes.size() == 5);
    for (const auto &c : r.classes) {
        INFO(c.name);
        CHECK(c.max_relative_error <= 1e-4);
        CHECK(c.max_abs_gradient > 0.0);
    }
}

TEST_CASE("analytic gradient matches central differences, several subjects and channels") {
    for (std::uint64_t seed : {1u, 2u}) {
        const GradientCheckReport r = check_gradients(make_grid(8, 16), 2, seed);
        CHECK(r.classes.size() == 8);
        CHECK(r.max_relative_error <= 1e-4);
    }
}

TEST_CASE("analytic gradient matches central differences with tied fields") {
    const GradientCheckReport r = check_gradients(make_grid(8, 16), 2, 4, 1e-4, 2, false);
    CHECK(r.max_relative_error <= 1e-4);
    for (const auto &c : r.classes) {
        if (c.name.ends_with("v_func")) {
            CHECK(c.max_abs_gradient == 0.0);
        }
    }
}

TEST_CASE("functional term has no gradient with respect to the geometric velocity") {
    const SynthConfig cfg = small_synth(3);
    const Cohort cohort = make_cohort(cfg);
    std::vector<SubjectRecord> batch = observations(cohort);
    for (std::size_t k = 0; k < batch.size(); ++k) {
        batch[k].v_joint = cohort.subjects[k].truth.v_joint;
        batch[k].v_geom = cohort.subjects[k].truth.v_geom;
        batch[k].v_func = cohort.subjects[k].truth.v_func;
    }
    Hyperparams only_func;
    only_func.w_func = 1.0;
    only_func.w_geom = 0.0;
    only_func.lambda_joint = only_func.lambda_geom = only_func.lambda_func = 0.0;
    only_func.alpha_joint = 0.0;
    const BatchGradient bg = loss_and_grad(batch, cohort.atlas, only_func);
    CHECK(bg.loss.func > 0.0);
    for (const auto &s : bg.subjects) {
        CHECK(max_abs(s.v_geom) == 0.0);
        CHECK(max_abs(s.v_func) > 0.0);
    }
    // And with the full objective, dropping func leaves d/dv_g bitwise unchanged.
    const BatchGradient full = loss_and_grad(batch, cohort.atlas, Hyperparams{});
    for (auto &s : batch) {
        s.func.reset();
    }
    const BatchGradient nofunc = loss_and_grad(batch, cohort.atlas, Hyperparams{});
    for (std::size_t k = 0; k < batch.size(); ++k) {
        CHECK(full.subjects[k].v_geom == nofunc.subjects[k].v_geom);
    }
}

TEST_CASE("thread count does not change gradients") {
    const SynthConfig cfg = small_synth(5);
    const Cohort cohort = make_cohort(cfg);
    const std::vector<SubjectRecord> batch = observations(cohort);
    GradientOptions one, four;
    four.threads = 4;
    const BatchGradient a = loss_and_grad(batch, cohort.atlas, Hyperparams{}, one);
    const BatchGradient b = loss_and_grad(batch, cohort.atlas, Hyperparams{}, four);
    CHECK(a.loss.total == b.loss.total);
    CHECK(a.atlas_geom == b.atlas_geom);
    CHECK(a.atlas_func == b.atlas_func);
    for (std::size_t k = 0; k < batch.size(); ++k) {
        CHECK(a.subjects[k].v_joint == b.subjects[k].v_joint);
    }
}

TEST_CASE("fit config validation") {
    FitConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = FitConfig{};
    cfg.coarse_epochs = cfg.epochs + 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = FitConfig{};
    cfg.hp.w_func = 0.9;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(fit({}, FitConfig{}), DegenerateDataError);
}

TEST_CASE("full-batch descent with a small learning rate") {
    const SynthConfig scfg = small_synth(4);
    const Cohort cohort = make_cohort(scfg);
    FitConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 4;
    cfg.val_fraction = 0.0;
    cfg.fixed_lr = 1e-4;
    cfg.augment = false;
    const FitResult r = fit(observations(cohort), cfg);
    REQUIRE(r.report.epochs.size() == 20);
    // Epoch records are taken before that epoch's update; epoch 0 is the start.
    CHECK(r.report.epochs[0].loss.total == doctest::Approx(r.report.initial_loss).epsilon(1e-12));
    for (std::size_t e = 1; e < r.report.epochs.size(); ++e) {
        CHECK(r.report.epochs[e].loss.total <= r.report.epochs[e - 1].loss.total);
    }
    CHECK(r.report.epochs.back().loss.total < r.report.epochs[0].loss.total);
}

TEST_CASE("same seed gives a bitwise identical fit, regardless of threads") {
    const SynthConfig scfg = small_synth(6);
    const Cohort cohort = make_cohort(scfg);
    FitConfig cfg;
    cfg.epochs = 15;
    cfg.batch_size = 3;
    const FitResult a = fit(observations(cohort), cfg);
    const FitResult b = fit(observations(cohort), cfg);
    cfg.threads = 3;
    const FitResult c = fit(observations(cohort), cfg);
    CHECK(same_report(a.report, b.report));
    CHECK(same_report(a.report, c.report));
    CHECK(a.atlas.geom == b.atlas.geom);
    CHECK(a.atlas.geom == c.atlas.geom);
    CHECK(a.subjects[2].v_joint.v == c.subjects[2].v_joint.v);
    cfg.threads = 1;
    cfg.seed = 2;
    const FitResult d = fit(observations(cohort), cfg);
    CHECK_FALSE(same_report(a.report, d.report));
}

TEST_CASE("degenerate cohort: atlas becomes the common image, velocities stay near zero") {
    const SynthConfig scfg = small_synth(6);
    const Atlas truth = make_atlas(scfg);
    std::vector<SubjectRecord> subjects;
    for (int k = 0; k < 6; ++k) {
        subjects.push_back(make_subject("s" + std::to_string(k), truth.geom, truth.func));
    }
    FitConfig cfg;
    cfg.epochs = 300;
    cfg.batch_size = 1;
    const FitResult r = fit(subjects, cfg);
    const Field target_geom = standardize(truth.geom);
    const Field target_func = standardize(truth.func);
    const double rel_geom = std::sqrt(weighted_norm_sq(r.atlas.geom - target_geom, AreaWeights(scfg.grid())) /
                                      weighted_norm_sq(target_geom, AreaWeights(scfg.grid())));
    const double rel_func = std::sqrt(weighted_norm_sq(r.atlas.func - target_func, AreaWeights(scfg.grid())) /
                                      weighted_norm_sq(target_func, AreaWeights(scfg.grid())));
    MESSAGE("relative atlas error geom " << rel_geom << " func " << rel_func);
    CHECK(rel_geom < 0.05);
    CHECK(rel_func < 0.05);
    double worst = 0.0;
    for (const auto &s : r.subjects) {
        worst = std::max({worst, max_abs(integrate(s.v_joint).u), max_abs(integrate(s.v_geom).u),
                          max_abs(integrate(s.v_func).u)});
    }
    MESSAGE("max displacement " << worst);
    CHECK(worst < 0.2);
}

TEST_CASE("fit on a 16-subject synthetic cohort drops below 10% of the initial loss") {
    const SynthConfig scfg; // 16 subjects, 64x128
    const Cohort cohort = make_cohort(scfg);
    FitConfig cfg;
    cfg.epochs = 300;
    cfg.coarse_epochs = 150;
    const FitResult r = fit(observations(cohort), cfg);
    const double final_loss = total_loss(r.subjects, r.atlas, cfg.hp).total;
    MESSAGE("initial " << r.report.initial_loss << " final " << final_loss);
    CHECK(final_loss < 0.1 * r.report.initial_loss);
    for (const auto &s : r.subjects) {
        CHECK(jacobian_negative_fraction(integrate(s.v_joint)) <= 0.01);
        CHECK(jacobian_negative_fraction(compose(integrate(s.v_geom), integrate(s.v_joint))) <= 0.01);
    }
}

TEST_CASE("register: subject equal to the atlas stays at identity") {
    const SynthConfig scfg = small_synth();
    const Atlas atlas = make_atlas(scfg);
    const Registration r = register_subject(atlas.geom, atlas, RegisterConfig{});
    CHECK(max_abs(r.joint.u) < 0.2);
    CHECK(max_abs(r.geom.u) < 0.2);
    CHECK(max_abs(r.func.u) < 0.2);
}

TEST_CASE("register recovers a smooth warp of the atlas") {
    const SynthConfig scfg = small_synth();
    const Atlas atlas = make_atlas(scfg);
    const GridSpec g = scfg.grid();
    const AreaWeights w(g);
    Rng rng(12);
    const VelocityField v_true = smooth_random_velocity(g, 4.0, 1.5, w, rng);
    const Field subject = warp(atlas.geom, integrate(v_true));
    const Registration r = register_subject(subject, atlas, RegisterConfig{});
    const SvfPair id = exponentiate(VelocityField::zeros(g), kDefaultSteps);
    const double before = data_loss(subject, atlas.geom, id, id, w);
    const double after = data_loss(subject, atlas.geom, exponentiate(r.v_geom, kDefaultSteps),
                                   exponentiate(r.v_joint, kDefaultSteps), w);
    MESSAGE("geometric data loss " << before << " -> " << after);
    CHECK(after <= 0.1 * before);
    CHECK(r.diagnostics.final_geom_loss < r.diagnostics.initial_geom_loss);
    CHECK(r.diagnostics.negative_jacobian_joint <= 0.01);
}

TEST_CASE("register output depends on geometry only") {
    const SynthConfig scfg = small_synth(2);
    const Cohort cohort = make_cohort(scfg);
    SubjectRecord s = cohort.subjects[0].record;
    SubjectRecord poisoned = s;
    for (double &x : poisoned.func->values()) {
        x = 1e6;
    }
    RegisterConfig cfg;
    cfg.iterations = 50;
    const Registration a = register_subject(s.geom, cohort.atlas, cfg);
    const Registration b = register_subject(poisoned.geom, cohort.atlas, cfg);
    CHECK(a.v_joint.v == b.v_joint.v);
    CHECK(a.v_geom.v == b.v_geom.v);
    CHECK(a.v_func.v == b.v_func.v);
    CHECK(a.diagnostics.final_loss == b.diagnostics.final_loss);
}
