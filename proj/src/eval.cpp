#include "josa/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

#include "josa/deform.hpp"
#include "josa/errors.hpp"

namespace josa {

std::vector<double> corr_to_group_mean(const std::vector<Field> &images, const AreaWeights &weights, bool weighted) {
    if (images.size() < 2) {
        throw std::invalid_argument("corr_to_group_mean: need at least 2 images");
    }
    const Field &first = images.front();
    for (const auto &im : images) {
        require_same_shape(first, im, "corr_to_group_mean");
    }
    if (!first.on_grid(weights.grid())) {
        throw ShapeMismatchError("corr_to_group_mean: weights grid differs from images");
    }
    const int C = first.channels();
    const std::size_t P = first.grid().cells();
    const double n = static_cast<double>(images.size());

    std::vector<double> out(images.size(), 0.0);
    std::vector<double> mean(P);
    for (int c = 0; c < C; ++c) {
        std::fill(mean.begin(), mean.end(), 0.0);
        for (const auto &im : images) {
            const auto ch = im.channel(c);
            for (std::size_t p = 0; p < P; ++p) {
                mean[p] += ch[p];
            }
        }
        for (double &x : mean) {
            x /= n;
        }
        const auto wv = weights.values();
        auto wt = [&](std::size_t p) { return weighted ? wv[p] : 1.0; };
        double wsum = 0.0;
        double mu_m = 0.0;
        for (std::size_t p = 0; p < P; ++p) {
            wsum += wt(p);
            mu_m += wt(p) * mean[p];
        }
        mu_m /= wsum;
        double var_m = 0.0;
        for (std::size_t p = 0; p < P; ++p) {
            var_m += wt(p) * (mean[p] - mu_m) * (mean[p] - mu_m);
        }
        var_m /= wsum;

        std::vector<double> var_x(images.size());
        std::vector<double> cov(images.size());
        double avg_var = 0.0;
        for (std::size_t k = 0; k < images.size(); ++k) {
            const auto ch = images[k].channel(c);
            double mu = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
                mu += wt(p) * ch[p];
            }
            mu /= wsum;
            double vx = 0.0;
            double cv = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
                const double dx = ch[p] - mu;
                vx += wt(p) * dx * dx;
                cv += wt(p) * dx * (mean[p] - mu_m);
            }
            var_x[k] = vx / wsum;
            cov[k] = cv / wsum;
            avg_var += var_x[k] / n;
        }
        const double tiny = 1e-24 + 1e-20 * avg_var;
        if (var_m <= tiny) {
            throw DegenerateDataError("corr_to_group_mean: group mean has zero variance");
        }
        for (std::size_t k = 0; k < images.size(); ++k) {
            if (var_x[k] <= tiny) {
                throw DegenerateDataError("corr_to_group_mean: image " + std::to_string(k) + " has zero variance");
            }
            const double r = cov[k] / std::sqrt(var_x[k] * var_m);
            out[k] += std::clamp(r, -1.0, 1.0) / C;
        }
    }
    return out;
}

std::vector<double> improvement(const Correlations &before, const Correlations &after) {
    if (before.ids != after.ids || before.values.size() != before.ids.size() ||
        after.values.size() != after.ids.size()) {
        throw IdMismatchError("improvement: subject ids of before and after do not match");
    }
    std::vector<double> d(before.values.size());
    for (std::size_t k = 0; k < d.size(); ++k) {
        d[k] = after.values[k] - before.values[k];
    }
    return d;
}

WilcoxonResult wilcoxon_one_tailed(const std::vector<double> &deltas, WilcoxonMode mode) {
    std::vector<double> nz;
    for (double d : deltas) {
        if (!std::isfinite(d)) {
            throw NonFiniteError("wilcoxon: non-finite delta");
        }
        if (d != 0.0) {
            nz.push_back(d);
        }
    }
    const int n = static_cast<int>(nz.size());
    if (n < 5) {
        throw TooFewSamplesError("wilcoxon: need at least 5 nonzero deltas, got " + std::to_string(n));
    }
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return std::abs(nz[a]) < std::abs(nz[b]); });

    // Doubled mid-ranks keep everything integral.
    std::vector<int> rank2(n);
    double tie_term = 0.0;
    for (int a = 0; a < n;) {
        int b = a;
        while (b + 1 < n && std::abs(nz[order[b + 1]]) == std::abs(nz[order[a]])) {
            ++b;
        }
        for (int k = a; k <= b; ++k) {
            rank2[order[k]] = a + b + 2;
        }
        const double t = b - a + 1;
        tie_term += t * t * t - t;
        a = b + 1;
    }

    int w2 = 0;
    for (int k = 0; k < n; ++k) {
        if (nz[k] > 0.0) {
            w2 += rank2[k];
        }
    }

    WilcoxonResult res;
    res.statistic = 0.5 * w2;
    res.n_used = n;
    res.exact = mode == WilcoxonMode::Exact || (mode == WilcoxonMode::Auto && n <= 20);
    if (res.exact) {
        const int total = std::accumulate(rank2.begin(), rank2.end(), 0);
        std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
        count[0] = 1.0;
        int reach = 0;
        for (int r : rank2) {
            for (int s = reach; s >= 0; --s) {
                if (count[s] != 0.0) {
                    count[s + r] += count[s];
                }
            }
            reach += r;
        }
        double tail = 0.0;
        for (int s = w2; s <= total; ++s) {
            tail += count[s];
        }
        res.p_value = tail / std::ldexp(1.0, n);
    } else {
        const double nn = n;
        const double mean = nn * (nn + 1.0) / 4.0;
        const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
        const double z = (res.statistic - mean - 0.5) / std::sqrt(var);
        res.p_value = 0.5 * std::erfc(z / std::sqrt(2.0));
    }
    res.p_value = std::clamp(res.p_value, std::numeric_limits<double>::min(), 1.0);
    return res;
}

double median_of(std::vector<double> values) {
    if (values.empty()) {
        return 0.0;
    }
    return median(std::move(values));
}

namespace {

double rms(const Field &u, const AreaWeights &w) {
    return std::sqrt(weighted_norm_sq(u, w) / w.total());
}

WilcoxonResult test_or_default(const std::vector<double> &d) {
    try {
        return wilcoxon_one_tailed(d);
    } catch (const TooFewSamplesError &) {
        return WilcoxonResult{};
    }
}

} // namespace

VariantReport evaluate_fit(const FitResult &fitted, const std::string &name, int steps,
                           const std::vector<SubjectRecord> *reference) {
    const auto start = std::chrono::steady_clock::now();
    VariantReport rep;
    rep.name = name;
    rep.fit = fitted.report;
    const auto &subs = fitted.subjects;
    if (subs.size() < 2) {
        throw DegenerateDataError("evaluate_fit: need at least 2 subjects");
    }
    const GridSpec g = subs.front().geom.grid();
    const AreaWeights w(g);
    if (reference && reference->size() != subs.size()) {
        throw IdMismatchError("evaluate_fit: reference cohort size differs");
    }
    auto images = [&](std::size_t k) -> const SubjectRecord & {
        if (!reference) {
            return subs[k];
        }
        if ((*reference)[k].id != subs[k].id) {
            throw IdMismatchError("evaluate_fit: reference id " + (*reference)[k].id + " != " + subs[k].id);
        }
        return (*reference)[k];
    };
    bool have_func = true;
    for (std::size_t k = 0; k < subs.size(); ++k) {
        have_func = have_func && images(k).func.has_value();
    }

    std::vector<Field> geom_raw, geom_reg, func_raw, func_reg;
    Field mean_u(2, g);
    for (std::size_t k = 0; k < subs.size(); ++k) {
        const SubjectRecord &s = subs[k];
        const SubjectRecord &im = images(k);
        rep.ids.push_back(s.id);
        const DeformationField uj = integrate(s.v_joint, steps);
        const DeformationField ug = integrate(s.v_geom, steps);
        const DeformationField uf = integrate(s.v_func, steps);
        rep.negjac_joint.push_back(jacobian_negative_fraction(uj));
        rep.negjac_geom.push_back(jacobian_negative_fraction(ug));
        rep.negjac_func.push_back(jacobian_negative_fraction(uf));
        rep.mean_joint_norm += rms(uj.u, w) / static_cast<double>(subs.size());
        mean_u += uj.u;

        geom_raw.push_back(im.geom);
        geom_reg.push_back(to_atlas_space(im.geom, s.v_geom, s.v_joint, steps));
        if (have_func) {
            func_raw.push_back(*im.func);
            func_reg.push_back(
                to_atlas_space(*im.func, fitted.report.separate_fields ? s.v_func : s.v_geom, s.v_joint, steps));
        }
    }
    mean_u *= 1.0 / static_cast<double>(subs.size());
    rep.joint_mean_norm = rms(mean_u, w);

    auto group_mean = [&](const std::vector<Field> &ims) {
        Field m = ims.front();
        for (std::size_t k = 1; k < ims.size(); ++k) {
            m += ims[k];
        }
        m *= 1.0 / static_cast<double>(ims.size());
        return m;
    };

    rep.geom_before = corr_to_group_mean(geom_raw, w);
    rep.geom_after = corr_to_group_mean(geom_reg, w);
    rep.geom_improvement = improvement({rep.ids, rep.geom_before}, {rep.ids, rep.geom_after});
    rep.group_mean_geom = group_mean(geom_reg);
    rep.geom_test = test_or_default(rep.geom_improvement);
    if (have_func) {
        rep.func_before = corr_to_group_mean(func_raw, w);
        rep.func_after = corr_to_group_mean(func_reg, w);
        rep.func_improvement = improvement({rep.ids, rep.func_before}, {rep.ids, rep.func_after});
        rep.group_mean_func = group_mean(func_reg);
        rep.func_test = test_or_default(rep.func_improvement);
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

namespace {

Field roll_columns(const Field &f, int shift) {
    Field out(f.channels(), f.grid());
    const int W = f.width();
    for (int c = 0; c < f.channels(); ++c) {
        for (int i = 0; i < f.height(); ++i) {
            for (int j = 0; j < W; ++j) {
                out.at(c, i, (j + shift) % W) = f.at(c, i, j);
            }
        }
    }
    return out;
}

double weighted_dot(const Field &a, const Field &b, const AreaWeights &w) {
    const std::size_t P = a.grid().cells();
    const auto wv = w.values();
    double acc = 0.0;
    for (int c = 0; c < a.channels(); ++c) {
        const auto x = a.channel(c);
        const auto y = b.channel(c);
        for (std::size_t p = 0; p < P; ++p) {
            acc += wv[p] * x[p] * y[p];
        }
    }
    return acc;
}

} // namespace

Atlas rigid_group_mean(const std::vector<SubjectRecord> &subjects, int iterations) {
    if (subjects.empty()) {
        throw DegenerateDataError("rigid_group_mean: empty cohort");
    }
    const GridSpec g = subjects.front().geom.grid();
    const AreaWeights w(g);
    std::vector<Field> geom, func;
    std::vector<int> func_index(subjects.size(), -1);
    for (std::size_t k = 0; k < subjects.size(); ++k) {
        geom.push_back(standardize(subjects[k].geom));
        if (subjects[k].func) {
            func_index[k] = static_cast<int>(func.size());
            func.push_back(standardize(*subjects[k].func));
        }
    }
    std::vector<int> shift(subjects.size(), 0);
    auto mean_of = [&](const std::vector<Field> &ims, bool is_func) {
        Field m;
        int count = 0;
        for (std::size_t k = 0; k < subjects.size(); ++k) {
            const int idx = is_func ? func_index[k] : static_cast<int>(k);
            if (idx < 0) {
                continue;
            }
            Field r = roll_columns(ims[idx], shift[k]);
            if (count == 0) {
                m = std::move(r);
            } else {
                m += r;
            }
            ++count;
        }
        if (count > 0) {
            m *= 1.0 / count;
        }
        return m;
    };

    Field mean = mean_of(geom, false);
    for (int it = 0; it < iterations; ++it) {
        bool changed = false;
        for (std::size_t k = 0; k < subjects.size(); ++k) {
            int best = shift[k];
            double best_score = weighted_dot(roll_columns(geom[k], shift[k]), mean, w);
            for (int s = 0; s < g.width; ++s) {
                const double score = weighted_dot(roll_columns(geom[k], s), mean, w);
                if (score > best_score) {
                    best_score = score;
                    best = s;
                }
            }
            changed |= best != shift[k];
            shift[k] = best;
        }
        mean = mean_of(geom, false);
        if (!changed) {
            break;
        }
    }
    Atlas atlas;
    atlas.geom = mean;
    atlas.func = func.empty() ? Field(1, g) : mean_of(func, true);
    return atlas;
}

EvalReport ablate(const std::vector<SubjectRecord> &subjects, const AblationConfig &cfg,
                  const std::vector<SubjectRecord> *reference) {
    const auto start = std::chrono::steady_clock::now();
    EvalReport report;
    const int steps = cfg.fit.hp.steps;
    const VariantReport *full = nullptr;
    const VariantReport *shared = nullptr;
    const VariantReport *fixed = nullptr;
    report.variants.reserve(3);

    // Variant time covers the fit and its evaluation.
    auto run_variant = [&](const FitConfig &fc, const std::string &name, const std::optional<Atlas> &fixed_atlas) {
        const auto t0 = std::chrono::steady_clock::now();
        VariantReport v = evaluate_fit(fit(subjects, fc, fixed_atlas), name, steps, reference);
        v.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.variants.push_back(std::move(v));
    };
    if (cfg.full) {
        FitConfig fc = cfg.fit;
        fc.separate_fields = true;
        run_variant(fc, "full", std::nullopt);
    }
    if (cfg.shared) {
        FitConfig fc = cfg.fit;
        fc.separate_fields = false;
        run_variant(fc, "shared", std::nullopt);
    }
    if (cfg.fixed_atlas) {
        FitConfig fc = cfg.fit;
        fc.separate_fields = true;
        fc.atlas_init = AtlasInit::Fixed;
        run_variant(fc, "fixed_atlas", rigid_group_mean(subjects));
    }
    for (const auto &v : report.variants) {
        if (v.name == "full") {
            full = &v;
        } else if (v.name == "shared") {
            shared = &v;
        } else {
            fixed = &v;
        }
    }

    auto compare = [&](const VariantReport &a, const VariantReport &b, const std::string &channel) {
        Comparison cmp;
        cmp.name = a.name + "_vs_" + b.name + "_" + channel;
        cmp.better = a.name;
        cmp.worse = b.name;
        cmp.channel = channel;
        const auto &ia = channel == "geom" ? a.geom_improvement : a.func_improvement;
        const auto &ib = channel == "geom" ? b.geom_improvement : b.func_improvement;
        cmp.deltas = improvement({a.ids, ib}, {b.ids, ia});
        cmp.median_delta = median_of(cmp.deltas);
        cmp.test = test_or_default(cmp.deltas);
        report.comparisons.push_back(std::move(cmp));
    };
    if (full && shared && !full->func_improvement.empty()) {
        compare(*full, *shared, "func");
    }
    if (full && fixed) {
        compare(*full, *fixed, "geom");
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

} // namespace josa
