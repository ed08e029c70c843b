#include "josa/optim.hpp"

#include "bilinear.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "josa/errors.hpp"
#include "josa/parallel.hpp"
#include "josa/random_field.hpp"

namespace josa {

void adam_update(std::span<double> params, std::span<const double> grad, AdamState &state, double lr) {
    if (params.size() != grad.size()) {
        throw ShapeMismatchError("adam_update: parameter and gradient sizes differ");
    }
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
        state.step = 0;
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(AdamState::beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(AdamState::beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        const double g = grad[k];
        state.m[k] = AdamState::beta1 * state.m[k] + (1.0 - AdamState::beta1) * g;
        state.v[k] = AdamState::beta2 * state.v[k] + (1.0 - AdamState::beta2) * g * g;
        const double mhat = state.m[k] / c1;
        const double vhat = state.v[k] / c2;
        params[k] -= lr * mhat / (std::sqrt(vhat) + AdamState::eps);
    }
}

double Schedule::lr_at(int epoch, int plateau_events) const {
    if (epoch <= decay_epochs) {
        const double t = static_cast<double>(std::max(epoch, 0)) / decay_epochs;
        return lr0 + (lr_floor - lr0) * t;
    }
    return lr_floor * std::pow(plateau_factor, plateau_events);
}

double lr_at(int epoch, int plateau_events) { return Schedule{}.lr_at(epoch, plateau_events); }

int PlateauTracker::observe(int epoch, double validation_loss) {
    if (!have_best_ || validation_loss < best_) {
        best_ = validation_loss;
        have_best_ = true;
        stale_ = 0;
        return events_;
    }
    if (epoch < schedule_.decay_epochs) {
        return events_;
    }
    if (++stale_ >= schedule_.plateau_patience) {
        ++events_;
        stale_ = 0;
    }
    return events_;
}

namespace {

void weight_rows(Field &f, const AreaWeights &weights, double scale) {
    const int W = f.width();
    for (int c = 0; c < f.channels(); ++c) {
        auto plane = f.channel(c);
        for (int i = 0; i < f.height(); ++i) {
            const double s = scale * weights.row(i);
            double *row = plane.data() + static_cast<std::size_t>(i) * W;
            for (int j = 0; j < W; ++j) {
                row[j] *= s;
            }
        }
    }
}

struct FieldGrads {
    Field fwd;
    Field inv;

    explicit FieldGrads(const GridSpec &g) : fwd(2, g), inv(2, g) {}
};

// scale * (0.5 |S - A∘T|^2 + 0.5 |S∘T^-1 - A|^2) and its adjoints.
double data_term(const Field &subject, const Field &atlas, const SvfPair &modality, const SvfPair &joint,
                 const AreaWeights &weights, double scale, Field *g_atlas, FieldGrads &g_mod, FieldGrads &g_joint) {
    require_same_shape(subject, atlas, "data term");
    const GridSpec g = weights.grid();
    const DeformationField to_subject = compose(modality.forward, joint.forward);
    const DeformationField to_atlas = compose(joint.inverse, modality.inverse);

    Field r_subject = subject - warp(atlas, to_subject);
    Field r_atlas = warp(subject, to_atlas) - atlas;
    const double loss =
        0.5 * scale * (weighted_norm_sq(r_subject, weights) + weighted_norm_sq(r_atlas, weights));

    weight_rows(r_subject, weights, -scale);
    Field g_to_subject(2, g);
    warp_backward(atlas, to_subject, r_subject, g_atlas, &g_to_subject);
    compose_backward(modality.forward, joint.forward, g_to_subject, &g_mod.fwd, &g_joint.fwd);

    weight_rows(r_atlas, weights, scale);
    Field g_to_atlas(2, g);
    warp_backward(subject, to_atlas, r_atlas, nullptr, &g_to_atlas);
    if (g_atlas) {
        *g_atlas -= r_atlas;
    }
    compose_backward(joint.inverse, modality.inverse, g_to_atlas, &g_joint.inv, &g_mod.inv);
    return loss;
}

// lambda * |grad u|^2 and its adjoint.
double smoothness_term(const DeformationField &u, double lambda, const AreaWeights &weights, Field &g_u) {
    if (lambda == 0.0) {
        return 0.0;
    }
    Field grad = spatial_gradient(u.u);
    const double energy = weighted_norm_sq(grad, weights);
    weight_rows(grad, weights, 2.0 * lambda);
    spatial_gradient_backward(grad, g_u);
    return lambda * energy;
}

struct SubjectPass {
    IntegrationTape joint_fwd, joint_inv, geom_fwd, geom_inv, func_fwd, func_inv;
    SvfPair joint, geom, func;
    Field atlas_geom, atlas_func;
};

Field vjp(const IntegrationTape &fwd, const Field &g_fwd, const IntegrationTape *inv, const Field *g_inv) {
    Field g = integrate_backward(fwd, g_fwd);
    if (inv) {
        g -= integrate_backward(*inv, *g_inv);
    }
    return g;
}

} // namespace

BatchGradient loss_and_grad(std::span<const SubjectRecord *const> batch, const Atlas &atlas, const Hyperparams &hp,
                            const GradientOptions &options) {
    if (batch.empty()) {
        throw std::invalid_argument("loss_and_grad: empty batch");
    }
    if (!options.atlas_mask.empty() && options.atlas_mask.size() != batch.size()) {
        throw std::invalid_argument("loss_and_grad: atlas mask length differs from batch size");
    }
    const GridSpec grid = atlas.grid();
    const AreaWeights weights(grid);
    const std::size_t n = batch.size();
    const bool separate = options.loss.separate_fields;
    const int steps = hp.steps;

    for (const SubjectRecord *s : batch) {
        if (!s->geom.on_grid(grid) || s->geom.channels() != atlas.geom.channels()) {
            throw ShapeMismatchError("subject " + s->id + ": geometric channels do not match the atlas");
        }
        if (s->func && (!s->func->on_grid(grid) || s->func->channels() != atlas.func.channels())) {
            throw ShapeMismatchError("subject " + s->id + ": functional channels do not match the atlas");
        }
    }

    std::vector<SubjectPass> passes(n);
    BatchGradient out;
    out.subjects.resize(n);

    try {
        parallel_for(n, options.threads, [&](std::size_t k) {
            const SubjectRecord &s = *batch[k];
            SubjectPass &p = passes[k];
            p.joint.forward = integrate(s.v_joint, steps, p.joint_fwd);
            p.joint.inverse = integrate(negate(s.v_joint), steps, p.joint_inv);
            p.geom.forward = integrate(s.v_geom, steps, p.geom_fwd);
            p.geom.inverse = integrate(negate(s.v_geom), steps, p.geom_inv);
            if (separate) {
                p.func.forward = integrate(s.v_func, steps, p.func_fwd);
                if (s.func) {
                    p.func.inverse = integrate(negate(s.v_func), steps, p.func_inv);
                }
            }
        });

        Field mean_joint(2, grid);
        double centrality = 0.0;
        if (options.loss.centrality) {
            for (const auto &p : passes) {
                mean_joint += p.joint.forward.u;
            }
            mean_joint *= 1.0 / static_cast<double>(n);
            centrality = hp.alpha_joint * weighted_norm_sq(mean_joint, weights);
            weight_rows(mean_joint, weights, 2.0 * hp.alpha_joint / static_cast<double>(n));
        }

        parallel_for(n, options.threads, [&](std::size_t k) {
            const SubjectRecord &s = *batch[k];
            SubjectPass &p = passes[k];
            SubjectGradient &sg = out.subjects[k];
            const bool feeds_atlas = options.atlas_gradient && (options.atlas_mask.empty() || options.atlas_mask[k]);

            FieldGrads g_joint(grid), g_geom(grid), g_func(grid);
            Field *g_atlas_geom = nullptr;
            Field *g_atlas_func = nullptr;
            if (feeds_atlas) {
                p.atlas_geom = Field(atlas.geom.channels(), grid);
                g_atlas_geom = &p.atlas_geom;
                if (s.func) {
                    p.atlas_func = Field(atlas.func.channels(), grid);
                    g_atlas_func = &p.atlas_func;
                }
            }

            LossBreakdown &l = sg.loss;
            l.geom = data_term(s.geom, atlas.geom, p.geom, p.joint, weights, hp.w_geom, g_atlas_geom, g_geom,
                               g_joint);
            if (s.func) {
                // Without separate fields function rides on the geometric deformation.
                l.func = data_term(*s.func, atlas.func, separate ? p.func : p.geom, p.joint, weights, hp.w_func,
                                   g_atlas_func, separate ? g_func : g_geom, g_joint);
            }
            l.reg_joint = smoothness_term(p.joint.forward, hp.lambda_joint, weights, g_joint.fwd);
            l.reg_geom = smoothness_term(p.geom.forward, hp.lambda_geom, weights, g_geom.fwd);
            if (separate) {
                l.reg_func = smoothness_term(p.func.forward, hp.lambda_func, weights, g_func.fwd);
            }
            l.total = l.sum_terms();
            if (options.loss.centrality) {
                g_joint.fwd += mean_joint;
            }

            sg.v_joint = vjp(p.joint_fwd, g_joint.fwd, &p.joint_inv, &g_joint.inv);
            sg.v_geom = vjp(p.geom_fwd, g_geom.fwd, &p.geom_inv, &g_geom.inv);
            if (separate) {
                sg.v_func = s.func ? vjp(p.func_fwd, g_func.fwd, &p.func_inv, &g_func.inv)
                                   : vjp(p.func_fwd, g_func.fwd, nullptr, nullptr);
            } else {
                sg.v_func = Field(2, grid);
            }
            // Release tapes early; batches of 8 at full resolution add up.
            for (IntegrationTape *t : {&p.joint_fwd, &p.joint_inv, &p.geom_fwd, &p.geom_inv, &p.func_fwd, &p.func_inv}) {
                t->stages = {};
            }
        });

        out.atlas_geom = Field(atlas.geom.channels(), grid);
        out.atlas_func = Field(atlas.func.channels(), grid);
        for (std::size_t k = 0; k < n; ++k) {
            out.loss += out.subjects[k].loss;
            if (!passes[k].atlas_geom.empty()) {
                out.atlas_geom += passes[k].atlas_geom;
            }
            if (!passes[k].atlas_func.empty()) {
                out.atlas_func += passes[k].atlas_func;
            }
        }
        out.loss.centrality = centrality;
        out.loss.total = out.loss.sum_terms();
    } catch (const NonFiniteError &e) {
        throw DivergenceError(std::string("loss_and_grad: ") + e.what());
    }
    if (!std::isfinite(out.loss.total)) {
        throw DivergenceError("loss_and_grad: loss is not finite");
    }
    return out;
}

BatchGradient loss_and_grad(const std::vector<SubjectRecord> &batch, const Atlas &atlas, const Hyperparams &hp,
                            const GradientOptions &options) {
    std::vector<const SubjectRecord *> ptrs;
    ptrs.reserve(batch.size());
    for (const auto &s : batch) {
        ptrs.push_back(&s);
    }
    return loss_and_grad(std::span<const SubjectRecord *const>(ptrs), atlas, hp, options);
}

void FitConfig::validate() const {
    hp.validate();
    if (batch_size < 1) {
        throw ConfigError("batch_size must be >= 1");
    }
    if (epochs < 1) {
        throw ConfigError("epochs must be >= 1");
    }
    if (coarse_epochs < 0 || coarse_epochs >= epochs + 1) {
        throw ConfigError("coarse_epochs must lie in [0, epochs]");
    }
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
        throw ConfigError("val_fraction must lie in [0, 1)");
    }
    if (!(lr_scale > 0.0) || !(atlas_lr_scale > 0.0)) {
        throw ConfigError("lr_scale and atlas_lr_scale must be positive");
    }
    if (fixed_lr && !(*fixed_lr > 0.0)) {
        throw ConfigError("fixed_lr must be positive");
    }
    if (schedule.decay_epochs < 1 || schedule.plateau_patience < 1) {
        throw ConfigError("schedule epochs must be >= 1");
    }
}

namespace {

// 2x box average in latitude, [1/4 1/2 1/4] in longitude so that coarse
// samples stay centred on the coarse grid's cell positions.
Field downsample(const Field &f) {
    const int H = f.height() / 2;
    const int W = f.width() / 2;
    const int Wf = f.width();
    Field out(f.channels(), H, W);
    for (int c = 0; c < f.channels(); ++c) {
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                double acc = 0.0;
                for (int r = 2 * i; r <= 2 * i + 1; ++r) {
                    const int jm = (2 * j - 1 + Wf) % Wf;
                    acc += 0.25 * f.at(c, r, jm) + 0.5 * f.at(c, r, 2 * j) + 0.25 * f.at(c, r, 2 * j + 1);
                }
                out.at(c, i, j) = 0.5 * acc;
            }
        }
    }
    return out;
}

Field upsample(const Field &coarse, const GridSpec &fine, double value_scale, bool displacement) {
    Field out(coarse.channels(), fine);
    for (int c = 0; c < coarse.channels(); ++c) {
        for (int i = 0; i < fine.height; ++i) {
            for (int j = 0; j < fine.width; ++j) {
                const double r = 0.5 * (i + 0.5) - 0.5;
                const double col = 0.5 * j;
                out.at(c, i, j) = value_scale * (displacement ? sample_displacement(coarse, c, r, col)
                                                                : sample_bilinear(coarse, c, r, col));
            }
        }
    }
    return out;
}

struct SubjectOptState {
    AdamState joint, geom, func;
};

struct FitState {
    std::vector<SubjectRecord> subjects;
    Atlas atlas;
    std::vector<SubjectOptState> opt;
    AdamState atlas_geom_opt, atlas_func_opt;
};

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

} // namespace

FitResult fit(std::vector<SubjectRecord> subjects, const FitConfig &cfg, const std::optional<Atlas> &fixed_atlas) {
    cfg.validate();
    const std::size_t n = subjects.size();
    if (n < 2) {
        throw DegenerateDataError("fit needs at least 2 subjects");
    }
    const GridSpec grid = subjects.front().geom.grid();
    const int geom_channels = subjects.front().geom.channels();
    int func_channels = 0;
    for (auto &s : subjects) {
        if (!s.geom.on_grid(grid) || s.geom.channels() != geom_channels) {
            throw ShapeMismatchError("subject " + s.id + ": geometric data shape differs from the cohort");
        }
        if (s.func) {
            if (func_channels == 0) {
                func_channels = s.func->channels();
            }
            if (!s.func->on_grid(grid) || s.func->channels() != func_channels) {
                throw ShapeMismatchError("subject " + s.id + ": functional data shape differs from the cohort");
            }
        }
        if (cfg.standardize_inputs) {
            s.geom = standardize(s.geom);
            if (s.func) {
                s.func = standardize(*s.func);
            }
        }
        s.v_joint = VelocityField::zeros(grid);
        s.v_geom = VelocityField::zeros(grid);
        s.v_func = VelocityField::zeros(grid);
    }

    // Seeded train/validation split. Validation subjects keep their own
    // velocities but do not feed the atlas.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    {
        Rng split_rng(derive_seed(cfg.seed, 1));
        std::shuffle(order.begin(), order.end(), split_rng);
    }
    std::size_t n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(n)));
    n_val = std::min(n_val, n - 1);
    std::vector<bool> is_train(n, true);
    for (std::size_t k = 0; k < n_val; ++k) {
        is_train[order[k]] = false;
    }
    const bool train_has_func = [&] {
        for (std::size_t k = 0; k < n; ++k) {
            if (is_train[k] && subjects[k].func) {
                return true;
            }
        }
        return false;
    }();
    if (!train_has_func && cfg.atlas_init != AtlasInit::Fixed) {
        throw DegenerateDataError("fit: no training subject has functional data, functional atlas is unidentifiable");
    }

    FitResult result;
    result.report.separate_fields = cfg.separate_fields;
    for (std::size_t k = 0; k < n; ++k) {
        (is_train[k] ? result.report.train_ids : result.report.validation_ids).push_back(subjects[k].id);
    }

    FitState st;
    switch (cfg.atlas_init) {
    case AtlasInit::Noise: {
        Rng rng(derive_seed(cfg.seed, 2));
        st.atlas.geom = white_noise(geom_channels, grid, rng, cfg.atlas_init_std);
        st.atlas.func = white_noise(func_channels, grid, rng, cfg.atlas_init_std);
        break;
    }
    case AtlasInit::GroupMean: {
        st.atlas.geom = Field(geom_channels, grid);
        st.atlas.func = Field(func_channels, grid);
        int ng = 0;
        int nf = 0;
        for (std::size_t k = 0; k < n; ++k) {
            if (!is_train[k]) {
                continue;
            }
            st.atlas.geom += subjects[k].geom;
            ++ng;
            if (subjects[k].func) {
                st.atlas.func += *subjects[k].func;
                ++nf;
            }
        }
        st.atlas.geom *= 1.0 / ng;
        st.atlas.func *= 1.0 / nf;
        break;
    }
    case AtlasInit::Fixed:
        if (!fixed_atlas) {
            throw ConfigError("fit: fixed atlas mode needs an atlas");
        }
        if (!fixed_atlas->geom.on_grid(grid) || fixed_atlas->geom.channels() != geom_channels ||
            (func_channels > 0 && fixed_atlas->func.channels() != func_channels)) {
            throw ShapeMismatchError("fit: fixed atlas shape differs from the cohort");
        }
        st.atlas = *fixed_atlas;
        break;
    }
    st.subjects = std::move(subjects);
    st.opt.resize(n);

    const bool learn_atlas = cfg.atlas_init != AtlasInit::Fixed;
    const bool coarse = cfg.coarse_epochs > 0 && grid.height % 2 == 0 && grid.height / 2 >= 4 &&
                        grid.width % 4 == 0 && grid.width / 2 >= 8;

    // Working copies at coarse resolution share nothing with the fine state.
    FitState coarse_state;
    if (coarse) {
        coarse_state.opt.resize(n);
        coarse_state.atlas.geom = downsample(st.atlas.geom);
        coarse_state.atlas.func = downsample(st.atlas.func);
        for (const auto &s : st.subjects) {
            SubjectRecord c = make_subject(s.id, downsample(s.geom),
                                           s.func ? std::optional<Field>(downsample(*s.func)) : std::nullopt);
            coarse_state.subjects.push_back(std::move(c));
        }
    }

    {
        LossOptions lo;
        lo.separate_fields = cfg.separate_fields;
        result.report.initial_loss = total_loss(st.subjects, st.atlas, cfg.hp, lo).total;
    }

    PlateauTracker plateau(cfg.schedule);
    const auto start = std::chrono::steady_clock::now();
    GradientOptions gopts;
    gopts.loss.separate_fields = cfg.separate_fields;
    gopts.atlas_gradient = learn_atlas;
    gopts.threads = cfg.threads;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const bool in_coarse = coarse && epoch < cfg.coarse_epochs;
        if (coarse && epoch == cfg.coarse_epochs) {
            // Hand the coarse solution to the fine grid; Adam restarts.
            for (std::size_t k = 0; k < n; ++k) {
                st.subjects[k].v_joint = VelocityField(upsample(coarse_state.subjects[k].v_joint.v, grid, 2.0, true));
                st.subjects[k].v_geom = VelocityField(upsample(coarse_state.subjects[k].v_geom.v, grid, 2.0, true));
                st.subjects[k].v_func = VelocityField(upsample(coarse_state.subjects[k].v_func.v, grid, 2.0, true));
            }
            if (learn_atlas) {
                st.atlas.geom = upsample(coarse_state.atlas.geom, grid, 1.0, false);
                st.atlas.func = upsample(coarse_state.atlas.func, grid, 1.0, false);
            }
        }
        FitState &cur = in_coarse ? coarse_state : st;

        const double lr_sched = cfg.schedule.lr_at(epoch, plateau.events());
        const double lr = cfg.fixed_lr ? *cfg.fixed_lr : lr_sched * cfg.lr_scale;

        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        {
            Rng rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
            std::shuffle(perm.begin(), perm.end(), rng);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = cfg.fixed_lr ? *cfg.fixed_lr : lr_sched;
        rec.grid_height = cur.atlas.geom.height();
        double val_loss = 0.0;
        double train_loss = 0.0;

        for (std::size_t b0 = 0; b0 < n; b0 += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t b1 = std::min(n, b0 + static_cast<std::size_t>(cfg.batch_size));
            std::vector<SubjectRecord> augmented;
            std::vector<const SubjectRecord *> batch;
            std::vector<bool> mask;
            if (cfg.augment) {
                augmented.reserve(b1 - b0);
            }
            for (std::size_t k = b0; k < b1; ++k) {
                const std::size_t idx = perm[k];
                if (cfg.augment) {
                    const std::uint64_t s = derive_seed(derive_seed(cfg.seed, 3 + static_cast<std::uint64_t>(epoch)), idx);
                    augmented.push_back(augment(cur.subjects[idx], cfg.hp, s));
                    batch.push_back(&augmented.back());
                } else {
                    batch.push_back(&cur.subjects[idx]);
                }
                mask.push_back(is_train[idx]);
            }
            gopts.atlas_mask = mask;
            const BatchGradient bg =
                loss_and_grad(std::span<const SubjectRecord *const>(batch), cur.atlas, cfg.hp, gopts);
            rec.loss += bg.loss;
            for (std::size_t k = 0; k < batch.size(); ++k) {
                const std::size_t idx = perm[b0 + k];
                (is_train[idx] ? train_loss : val_loss) += bg.subjects[k].loss.total;
                SubjectRecord &s = cur.subjects[idx];
                SubjectOptState &o = cur.opt[idx];
                adam_update(s.v_joint.v.values(), bg.subjects[k].v_joint.values(), o.joint, lr);
                adam_update(s.v_geom.v.values(), bg.subjects[k].v_geom.values(), o.geom, lr);
                if (cfg.separate_fields) {
                    adam_update(s.v_func.v.values(), bg.subjects[k].v_func.values(), o.func, lr);
                }
            }
            if (learn_atlas) {
                adam_update(cur.atlas.geom.values(), bg.atlas_geom.values(), cur.atlas_geom_opt, lr * cfg.atlas_lr_scale);
                if (!cur.atlas.func.empty()) {
                    adam_update(cur.atlas.func.values(), bg.atlas_func.values(), cur.atlas_func_opt, lr * cfg.atlas_lr_scale);
                }
            }
        }
        rec.validation_loss = n_val > 0 ? val_loss : train_loss;
        if (!std::isfinite(rec.loss.total)) {
            throw DivergenceError("fit: loss became non-finite at epoch " + std::to_string(epoch));
        }
        rec.plateau_events = plateau.observe(epoch, rec.validation_loss);
        rec.wall_seconds = elapsed_seconds(start);
        result.report.epochs.push_back(rec);
        if (cfg.on_epoch) {
            cfg.on_epoch(rec);
        }
    }

    if (coarse && cfg.coarse_epochs >= cfg.epochs) {
        for (std::size_t k = 0; k < n; ++k) {
            st.subjects[k].v_joint = VelocityField(upsample(coarse_state.subjects[k].v_joint.v, grid, 2.0, true));
            st.subjects[k].v_geom = VelocityField(upsample(coarse_state.subjects[k].v_geom.v, grid, 2.0, true));
            st.subjects[k].v_func = VelocityField(upsample(coarse_state.subjects[k].v_func.v, grid, 2.0, true));
        }
        if (learn_atlas) {
            st.atlas.geom = upsample(coarse_state.atlas.geom, grid, 1.0, false);
            st.atlas.func = upsample(coarse_state.atlas.func, grid, 1.0, false);
        }
    }

    result.atlas = std::move(st.atlas);
    result.subjects = std::move(st.subjects);
    return result;
}

Registration register_subject(const Field &subject_geom, const Atlas &atlas, const RegisterConfig &cfg) {
    cfg.hp.validate();
    if (cfg.iterations < 0) {
        throw ConfigError("register: iterations must be >= 0");
    }
    SubjectRecord s = make_subject("register", subject_geom, std::nullopt);
    const GridSpec grid = atlas.grid();
    const AreaWeights weights(grid);

    GradientOptions opts;
    opts.loss.separate_fields = cfg.separate_fields;
    opts.loss.centrality = false;
    opts.atlas_gradient = false;

    const std::vector<const SubjectRecord *> batch{&s};
    AdamState oj, og, of;
    Registration out;
    for (int it = 0; it <= cfg.iterations; ++it) {
        const BatchGradient bg = loss_and_grad(std::span<const SubjectRecord *const>(batch), atlas, cfg.hp, opts);
        if (it == 0) {
            out.diagnostics.initial_loss = bg.loss.total;
        }
        out.diagnostics.final_loss = bg.loss.total;
        if (it == cfg.iterations) {
            break;
        }
        const double lr = cfg.lr * (1.0 - 0.9 * static_cast<double>(it) / std::max(1, cfg.iterations));
        adam_update(s.v_joint.v.values(), bg.subjects[0].v_joint.values(), oj, lr);
        adam_update(s.v_geom.v.values(), bg.subjects[0].v_geom.values(), og, lr);
        if (cfg.separate_fields) {
            adam_update(s.v_func.v.values(), bg.subjects[0].v_func.values(), of, lr);
        }
    }
    out.diagnostics.iterations = cfg.iterations;

    const SvfPair identity{DeformationField::identity(grid), DeformationField::identity(grid)};
    const SvfPair joint = exponentiate(s.v_joint, cfg.hp.steps);
    const SvfPair geom = exponentiate(s.v_geom, cfg.hp.steps);
    out.diagnostics.initial_geom_loss = data_loss(subject_geom, atlas.geom, identity, identity, weights);
    out.diagnostics.final_geom_loss = data_loss(subject_geom, atlas.geom, geom, joint, weights);
    out.joint = joint.forward;
    out.geom = geom.forward;
    out.func = integrate(s.v_func, cfg.hp.steps);
    out.diagnostics.negative_jacobian_joint = jacobian_negative_fraction(out.joint);
    out.diagnostics.negative_jacobian_geom = jacobian_negative_fraction(out.geom);
    out.diagnostics.negative_jacobian_func = jacobian_negative_fraction(out.func);
    out.v_joint = std::move(s.v_joint);
    out.v_geom = std::move(s.v_geom);
    out.v_func = std::move(s.v_func);
    return out;
}

Field to_atlas_space(const Field &image, const VelocityField &v_modality, const VelocityField &v_joint, int steps) {
    const DeformationField back = compose(invert(v_joint, steps), invert(v_modality, steps));
    return warp(image, back);
}

} // namespace josa

namespace josa {

GradientCheckReport check_gradients(const GridSpec &grid, int n_subjects, std::uint64_t seed, double h,
                                    int geom_channels, bool separate_fields) {
    if (geom_channels < 1) {
        throw std::invalid_argument("check_gradients: need at least one geometric channel");
    }
    const auto start = std::chrono::steady_clock::now();
    const AreaWeights weights(grid);
    Rng rng(seed);
    const double smoothing = std::max(1.0, grid.height / 6.0);

    Atlas atlas;
    atlas.geom = gaussian_smooth(white_noise(geom_channels, grid, rng), smoothing) * 3.0;
    atlas.func = gaussian_smooth(white_noise(1, grid, rng), smoothing) * 3.0;
    std::vector<SubjectRecord> batch;
    for (int k = 0; k < n_subjects; ++k) {
        Field geom = gaussian_smooth(white_noise(geom_channels, grid, rng), smoothing) * 3.0;
        Field func = gaussian_smooth(white_noise(1, grid, rng), smoothing) * 3.0;
        SubjectRecord s = make_subject("s" + std::to_string(k), std::move(geom), std::move(func));
        s.v_joint = smooth_random_velocity(grid, smoothing, 0.8, weights, rng);
        s.v_geom = smooth_random_velocity(grid, smoothing, 0.4, weights, rng);
        s.v_func = smooth_random_velocity(grid, smoothing, 0.4, weights, rng);
        batch.push_back(std::move(s));
    }
    Hyperparams hp;
    hp.alpha_joint = 0.5; // make the centrality term visible at this size

    GradientOptions options;
    options.loss.separate_fields = separate_fields;
    const BatchGradient analytic = loss_and_grad(batch, atlas, hp, options);

    GradientCheckReport report;
    report.h = h;

    auto traced_loss = [&](std::uint64_t &cells) {
        detail::cell_trace = {true, 0};
        const double loss = total_loss(batch, atlas, hp, options.loss).total;
        cells = detail::cell_trace.hash;
        detail::cell_trace = {};
        return loss;
    };
    // Central difference at h unless the stencil leaves the smooth piece
    // containing the base point; then the step shrinks until it does not.
    auto fd = [&](double &param) {
        const double saved = param;
        std::uint64_t base_cells = 0;
        traced_loss(base_cells);
        double step = h;
        for (;;) {
            std::uint64_t up_cells = 0;
            std::uint64_t down_cells = 0;
            param = saved + step;
            const double up = traced_loss(up_cells);
            param = saved - step;
            const double down = traced_loss(down_cells);
            param = saved;
            if ((up_cells == base_cells && down_cells == base_cells) || step < 1e-7) {
                if (step != h) {
                    ++report.reduced_steps;
                }
                return (up - down) / (2.0 * step);
            }
            step *= 0.25;
        }
    };

    auto check_class = [&](const std::string &name, std::span<double> params, std::span<const double> grad) {
        GradientClassError e;
        e.name = name;
        e.components = params.size();
        std::vector<double> numeric(params.size());
        for (std::size_t k = 0; k < params.size(); ++k) {
            numeric[k] = fd(params[k]);
            e.max_abs_gradient = std::max({e.max_abs_gradient, std::abs(numeric[k]), std::abs(grad[k])});
        }
        const double floor = 1e-3 * std::max(e.max_abs_gradient, 1e-300);
        for (std::size_t k = 0; k < params.size(); ++k) {
            const double diff = std::abs(grad[k] - numeric[k]);
            const double scale = std::max({std::abs(grad[k]), std::abs(numeric[k]), floor});
            e.max_abs_error = std::max(e.max_abs_error, diff);
            e.max_relative_error = std::max(e.max_relative_error, diff / scale);
        }
        report.max_relative_error = std::max(report.max_relative_error, e.max_relative_error);
        report.classes.push_back(e);
    };

    for (std::size_t k = 0; k < batch.size(); ++k) {
        const std::string tag = "subject" + std::to_string(k) + ".";
        check_class(tag + "v_joint", batch[k].v_joint.v.values(), analytic.subjects[k].v_joint.values());
        check_class(tag + "v_geom", batch[k].v_geom.v.values(), analytic.subjects[k].v_geom.values());
        check_class(tag + "v_func", batch[k].v_func.v.values(), analytic.subjects[k].v_func.values());
    }
    check_class("atlas.geom", atlas.geom.values(), analytic.atlas_geom.values());
    check_class("atlas.func", atlas.func.values(), analytic.atlas_func.values());
    report.seconds = elapsed_seconds(start);
    return report;
}

} // namespace josa
