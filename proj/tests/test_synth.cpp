#include <cmath>

#include "doctest.h"

#include "josa/errors.hpp"
#include "josa/optim.hpp"
#include "josa/random_field.hpp"
#include "josa/synth.hpp"

using namespace josa;

namespace {

double weighted_corr(const Field &a, const Field &b, const AreaWeights &w) {
    double total = 0.0;
    for (int c = 0; c < a.channels(); ++c) {
        double sw = 0, ma = 0, mb = 0;
        for (int i = 0; i < a.height(); ++i) {
            for (int j = 0; j < a.width(); ++j) {
                sw += w.row(i);
                ma += w.row(i) * a.at(c, i, j);
                mb += w.row(i) * b.at(c, i, j);
            }
        }
        ma /= sw;
        mb /= sw;
        double sab = 0, saa = 0, sbb = 0;
        for (int i = 0; i < a.height(); ++i) {
            for (int j = 0; j < a.width(); ++j) {
                const double x = a.at(c, i, j) - ma, y = b.at(c, i, j) - mb;
                sab += w.row(i) * x * y;
                saa += w.row(i) * x * x;
                sbb += w.row(i) * y * y;
            }
        }
        total += sab / std::sqrt(saa * sbb);
    }
    return total / a.channels();
}

double mean_pairwise(const std::vector<Field> &imgs, const AreaWeights &w) {
    double s = 0.0;
    int n = 0;
    for (std::size_t a = 0; a < imgs.size(); ++a) {
        for (std::size_t b = a + 1; b < imgs.size(); ++b) {
            s += weighted_corr(imgs[a], imgs[b], w);
            ++n;
        }
    }
    return s / n;
}

void check_standardized(const Field &f) {
    for (int c = 0; c < f.channels(); ++c) {
        const auto ch = f.channel(c);
        std::vector<double> v(ch.begin(), ch.end());
        double m = 0, q = 0;
        for (double x : v) {
            m += x;
            q += x * x;
        }
        m /= v.size();
        CHECK(std::abs(median(v)) < 1e-9);
        CHECK(std::sqrt(q / v.size() - m * m) == doctest::Approx(1.0).epsilon(1e-9));
    }
}

} // namespace

TEST_CASE("synth config validation") {
    SynthConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.geom_std = cfg.joint_std;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = SynthConfig{};
    cfg.n_subjects = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = SynthConfig{};
    cfg.noise_func = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = SynthConfig{};
    cfg.joint_std = cfg.geom_std = cfg.func_std = 0.0;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("atlas and cohort are pure functions of the seed") {
    SynthConfig cfg;
    cfg.n_subjects = 3;
    const Cohort a = make_cohort(cfg);
    const Cohort b = make_cohort(cfg);
    CHECK(a.atlas.geom == b.atlas.geom);
    CHECK(a.atlas.func == b.atlas.func);
    for (int k = 0; k < 3; ++k) {
        CHECK(a.subjects[k].record.id == b.subjects[k].record.id);
        CHECK(a.subjects[k].record.geom == b.subjects[k].record.geom);
        CHECK(*a.subjects[k].record.func == *b.subjects[k].record.func);
        CHECK(a.subjects[k].truth.v_joint.v == b.subjects[k].truth.v_joint.v);
    }
    cfg.seed = 2;
    CHECK_FALSE(make_atlas(cfg).geom == a.atlas.geom);
}

TEST_CASE("atlas channels are standardized") {
    SynthConfig cfg;
    const Atlas atlas = make_atlas(cfg);
    CHECK(atlas.geom.channels() == 2);
    CHECK(atlas.func.channels() == 1);
    check_standardized(atlas.geom);
    check_standardized(atlas.func);
}

TEST_CASE("zero blobs fall back to a latitude ramp") {
    SynthConfig cfg;
    cfg.blob_count = 0;
    const Atlas atlas = make_atlas(cfg);
    REQUIRE(atlas.func.all_finite());
    check_standardized(atlas.func);
    for (int i = 0; i < atlas.func.height(); ++i) {
        for (int j = 1; j < atlas.func.width(); ++j) {
            CHECK(atlas.func.at(0, i, j) == atlas.func.at(0, i, 0));
        }
        if (i > 0) {
            CHECK(atlas.func.at(0, i, 0) < atlas.func.at(0, i - 1, 0));
        }
    }
}

TEST_CASE("zero prior scales and zero noise reproduce the atlas") {
    SynthConfig cfg;
    cfg.n_subjects = 2;
    cfg.joint_std = cfg.geom_std = cfg.func_std = 0.0;
    cfg.noise_geom = cfg.noise_func = 0.0;
    const Cohort c = make_cohort(cfg);
    for (const auto &s : c.subjects) {
        CHECK(max_abs(s.record.geom - c.atlas.geom) <= 1e-12);
        CHECK(max_abs(*s.record.func - c.atlas.func) <= 1e-12);
    }
}

TEST_CASE("without modality offsets geometry and function share one field") {
    SynthConfig cfg;
    cfg.n_subjects = 3;
    cfg.offset_fraction = 0.0;
    cfg.noise_geom = cfg.noise_func = 0.0;
    const Cohort c = make_cohort(cfg);
    for (const auto &s : c.subjects) {
        CHECK(max_abs(s.truth.v_geom.v) == 0.0);
        CHECK(max_abs(s.truth.v_func.v) == 0.0);
        CHECK(max_abs(s.truth.v_joint.v) > 1.0);
        const DeformationField phi = integrate(s.truth.v_joint);
        CHECK(max_abs(s.record.geom - warp(c.atlas.geom, phi)) <= 1e-9);
        CHECK(max_abs(*s.record.func - warp(c.atlas.func, phi)) <= 1e-9);
    }
}

TEST_CASE("offset fraction controls how many subjects get modality fields") {
    SynthConfig cfg;
    cfg.n_subjects = 8;
    cfg.height = 16;
    cfg.width = 32;
    cfg.smoothing_px = 2.0;
    cfg.offset_fraction = 0.5;
    const Cohort c = make_cohort(cfg);
    int with = 0;
    for (const auto &s : c.subjects) {
        with += max_abs(s.truth.v_func.v) > 0.0 ? 1 : 0;
    }
    CHECK(with == 4);
    CHECK(c.subjects[0].record.id == "sub000");
}

TEST_CASE("joint deformation dominates modality deformations in every subject") {
    const Cohort c = make_cohort(SynthConfig{});
    const AreaWeights w(c.config.grid());
    for (const auto &s : c.subjects) {
        const double j = weighted_std(integrate(s.truth.v_joint).u, w);
        CHECK(j > weighted_std(integrate(s.truth.v_geom).u, w));
        CHECK(j > weighted_std(integrate(s.truth.v_func).u, w));
    }
}

TEST_CASE("ground-truth alignment raises pairwise correlation") {
    const Cohort c = make_cohort(SynthConfig{});
    const AreaWeights w(c.config.grid());
    std::vector<Field> raw_g, raw_f, aligned_g, aligned_f;
    for (const auto &s : c.subjects) {
        raw_g.push_back(s.record.geom);
        raw_f.push_back(*s.record.func);
        aligned_g.push_back(to_atlas_space(s.record.geom, s.truth.v_geom, s.truth.v_joint, kDefaultSteps));
        aligned_f.push_back(to_atlas_space(*s.record.func, s.truth.v_func, s.truth.v_joint, kDefaultSteps));
    }
    const double rg = mean_pairwise(raw_g, w), ag = mean_pairwise(aligned_g, w);
    const double rf = mean_pairwise(raw_f, w), af = mean_pairwise(aligned_f, w);
    MESSAGE("geom " << rg << " -> " << ag << ", func " << rf << " -> " << af);
    CHECK(rg < ag);
    CHECK(rf < af);
}

TEST_CASE("data loss at ground truth is the noise energy, below identity") {
    const Cohort c = make_cohort(SynthConfig{});
    const std::vector<SubjectRecord> clean = clean_images(c);
    const GridSpec g = c.config.grid();
    const AreaWeights w(g);
    const SvfPair id = exponentiate(VelocityField::zeros(g), kDefaultSteps);
    for (std::size_t k = 0; k < c.subjects.size(); ++k) {
        const SynthSubject &s = c.subjects[k];
        const SvfPair joint = exponentiate(s.truth.v_joint, kDefaultSteps);
        const SvfPair geom = exponentiate(s.truth.v_geom, kDefaultSteps);
        const SvfPair func = exponentiate(s.truth.v_func, kDefaultSteps);
        auto noise_energy = [&](const Field &obs, const Field &cl, const SvfPair &mod) {
            const Field n = obs - cl;
            return 0.5 * weighted_norm_sq(n, w) + 0.5 * weighted_norm_sq(warp(n, compose(joint.inverse, mod.inverse)), w);
        };
        const double lg = data_loss(s.record.geom, c.atlas.geom, geom, joint, w);
        const double lf = data_loss(*s.record.func, c.atlas.func, func, joint, w);
        CHECK(lg == doctest::Approx(noise_energy(s.record.geom, clean[k].geom, geom)).epsilon(0.2));
        CHECK(lf == doctest::Approx(noise_energy(*s.record.func, *clean[k].func, func)).epsilon(0.2));
        CHECK(lg < data_loss(s.record.geom, c.atlas.geom, id, id, w));
        CHECK(lf < data_loss(*s.record.func, c.atlas.func, id, id, w));
    }
}

TEST_CASE("observations carry no ground truth") {
    SynthConfig cfg;
    cfg.n_subjects = 2;
    const Cohort c = make_cohort(cfg);
    for (const auto &s : observations(c)) {
        CHECK(max_abs(s.v_joint.v) == 0.0);
        CHECK(max_abs(s.v_geom.v) == 0.0);
        CHECK(max_abs(s.v_func.v) == 0.0);
    }
}
