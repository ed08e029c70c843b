#include "josa/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "josa/errors.hpp"
#include "josa/random_field.hpp"

namespace josa {

SubjectRecord make_subject(std::string id, Field geom, std::optional<Field> func) {
    SubjectRecord s;
    const GridSpec grid = geom.grid();
    s.id = std::move(id);
    s.geom = std::move(geom);
    if (func) {
        if (!func->on_grid(grid)) {
            throw ShapeMismatchError("subject " + s.id + ": functional and geometric grids differ");
        }
        s.func = std::move(func);
    }
    s.v_joint = VelocityField::zeros(grid);
    s.v_geom = VelocityField::zeros(grid);
    s.v_func = VelocityField::zeros(grid);
    return s;
}

void Hyperparams::validate() const {
    for (double x : {lambda_joint, lambda_geom, lambda_func, alpha_joint, w_func, w_geom, sigma_aug_deform,
                     sigma_noise_geom, sigma_noise_func, aug_smoothing_px}) {
        if (!(x >= 0.0) || !std::isfinite(x)) {
            throw ConfigError("hyperparameters must be finite and non-negative");
        }
    }
    if (std::abs(w_func + w_geom - 1.0) > 1e-9) {
        throw ConfigError("w_func + w_geom must equal 1");
    }
    if (steps < 1) {
        throw ConfigError("steps must be >= 1");
    }
}

double median(std::vector<double> values) {
    if (values.empty()) {
        throw DegenerateDataError("median of an empty set");
    }
    const std::size_t n = values.size();
    const auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
    std::nth_element(values.begin(), mid, values.end());
    const double upper = *mid;
    if (n % 2 == 1) {
        return upper;
    }
    const double lower = *std::max_element(values.begin(), mid);
    return 0.5 * (lower + upper);
}

Field standardize(const Field &features) {
    Field out = features;
    for (int c = 0; c < features.channels(); ++c) {
        const auto plane = features.channel(c);
        const double n = static_cast<double>(plane.size());
        double mean = 0.0;
        for (double x : plane) {
            mean += x;
        }
        mean /= n;
        double ss = 0.0;
        for (double x : plane) {
            ss += (x - mean) * (x - mean);
        }
        const double sd = std::sqrt(ss / n);
        if (!(sd >= 1e-12)) {
            throw DegenerateDataError("standardize: channel " + std::to_string(c) + " has zero standard deviation");
        }
        const double med = median(std::vector<double>(plane.begin(), plane.end()));
        for (double &x : out.channel(c)) {
            x = (x - med) / sd;
        }
    }
    return out;
}

SvfPair exponentiate(const VelocityField &v, int steps) { return {integrate(v, steps), invert(v, steps)}; }

double data_loss(const Field &subject_img, const Field &atlas_img, const SvfPair &modality, const SvfPair &joint,
                 const AreaWeights &weights) {
    require_same_shape(subject_img, atlas_img, "data_loss");
    const DeformationField to_subject = compose(modality.forward, joint.forward);
    const DeformationField to_atlas = compose(joint.inverse, modality.inverse);
    const Field subject_space = subject_img - warp(atlas_img, to_subject);
    const Field atlas_space = warp(subject_img, to_atlas) - atlas_img;
    return 0.5 * weighted_norm_sq(subject_space, weights) + 0.5 * weighted_norm_sq(atlas_space, weights);
}

double gradient_energy(const DeformationField &u, const AreaWeights &weights) {
    return weighted_norm_sq(spatial_gradient(u.u), weights);
}

double reg_loss(const DeformationField &u_joint, const DeformationField &u_geom, const DeformationField &u_func,
                const Hyperparams &hp, const AreaWeights &weights) {
    return hp.lambda_joint * gradient_energy(u_joint, weights) + hp.lambda_geom * gradient_energy(u_geom, weights) +
           hp.lambda_func * gradient_energy(u_func, weights);
}

double centrality_loss(const std::vector<DeformationField> &u_joint, double alpha, const AreaWeights &weights) {
    if (u_joint.empty()) {
        throw std::invalid_argument("centrality_loss: empty batch");
    }
    Field mean(2, weights.grid());
    for (const auto &u : u_joint) {
        mean += u.u;
    }
    mean *= 1.0 / static_cast<double>(u_joint.size());
    return alpha * weighted_norm_sq(mean, weights);
}

LossBreakdown &LossBreakdown::operator+=(const LossBreakdown &other) {
    geom += other.geom;
    func += other.func;
    reg_joint += other.reg_joint;
    reg_geom += other.reg_geom;
    reg_func += other.reg_func;
    centrality += other.centrality;
    total += other.total;
    return *this;
}

LossBreakdown total_loss(const std::vector<SubjectRecord> &batch, const Atlas &atlas, const Hyperparams &hp,
                         const LossOptions &options) {
    if (batch.empty()) {
        throw std::invalid_argument("total_loss: empty batch");
    }
    const GridSpec grid = atlas.grid();
    const AreaWeights weights(grid);
    LossBreakdown out;
    std::vector<DeformationField> joints;
    joints.reserve(batch.size());
    for (const auto &s : batch) {
        const SvfPair joint = exponentiate(s.v_joint, hp.steps);
        out.reg_joint += hp.lambda_joint * gradient_energy(joint.forward, weights);

        const SvfPair geom = exponentiate(s.v_geom, hp.steps);
        out.geom += hp.w_geom * data_loss(s.geom, atlas.geom, geom, joint, weights);
        out.reg_geom += hp.lambda_geom * gradient_energy(geom.forward, weights);
        if (options.separate_fields) {
            const DeformationField func_fwd = integrate(s.v_func, hp.steps);
            out.reg_func += hp.lambda_func * gradient_energy(func_fwd, weights);
            if (s.func) {
                const SvfPair func{func_fwd, invert(s.v_func, hp.steps)};
                out.func += hp.w_func * data_loss(*s.func, atlas.func, func, joint, weights);
            }
        } else if (s.func) {
            out.func += hp.w_func * data_loss(*s.func, atlas.func, geom, joint, weights);
        }
        joints.push_back(joint.forward);
    }
    if (options.centrality) {
        out.centrality = centrality_loss(joints, hp.alpha_joint, weights);
    }
    out.total = out.sum_terms();
    return out;
}

double physical_displacement_std(const DeformationField &phi, const AreaWeights &weights) {
    const GridSpec grid = phi.grid();
    Field phys = phi.u;
    for (int i = 0; i < grid.height; ++i) {
        const double st = std::sin(grid.theta(i));
        for (int j = 0; j < grid.width; ++j) {
            phys.at(1, i, j) *= st;
        }
    }
    return weighted_std(phys, weights);
}

DeformationField augment_deformation(const GridSpec &grid, const Hyperparams &hp, std::uint64_t seed) {
    if (hp.sigma_aug_deform <= 0.0) {
        return DeformationField::identity(grid);
    }
    Rng rng(derive_seed(seed, 0));
    const AreaWeights weights(grid);
    VelocityField v = smooth_random_velocity(grid, hp.aug_smoothing_px, hp.sigma_aug_deform, weights, rng);
    // sigma is the std of the displacement on the sphere: longitude component
    // times sin(theta). Integration is close to linear here, so a couple of
    // rescaling passes land on target.
    DeformationField phi = integrate(v, hp.steps);
    for (int pass = 0; pass < 3; ++pass) {
        const double s = physical_displacement_std(phi, weights);
        if (!(s > 0.0)) {
            break;
        }
        v.v *= hp.sigma_aug_deform / s;
        phi = integrate(v, hp.steps);
    }
    return phi;
}

SubjectRecord augment(const SubjectRecord &subject, const Hyperparams &hp, std::uint64_t seed) {
    SubjectRecord out = subject;
    const GridSpec grid = subject.geom.grid();
    if (hp.sigma_aug_deform > 0.0) {
        const DeformationField phi = augment_deformation(grid, hp, seed);
        out.geom = warp(out.geom, phi);
        if (out.func) {
            out.func = warp(*out.func, phi);
        }
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    if (hp.sigma_noise_geom > 0.0) {
        Rng rng(derive_seed(seed, 1));
        for (double &x : out.geom.values()) {
            x += hp.sigma_noise_geom * normal(rng);
        }
    }
    if (out.func && hp.sigma_noise_func > 0.0) {
        Rng rng(derive_seed(seed, 2));
        for (double &x : out.func->values()) {
            x += hp.sigma_noise_func * normal(rng);
        }
    }
    return out;
}

LikelihoodReport verify_marginal_likelihood(double sigma, long trials, std::uint64_t seed) {
    if (!(sigma > 0.0)) {
        throw std::invalid_argument("verify_marginal_likelihood: sigma must be positive");
    }
    if (trials < 1000) {
        throw std::invalid_argument("verify_marginal_likelihood: need at least 1000 trials");
    }
    const GridSpec grid = make_grid(4, 8);
    const AreaWeights weights(grid);
    Rng rng(seed);

    // A smooth atlas pushed through a random smooth joint field gives the mean.
    Field atlas(1, grid);
    for (int i = 0; i < grid.height; ++i) {
        for (int j = 0; j < grid.width; ++j) {
            atlas.at(0, i, j) = std::cos(grid.theta(i)) + 0.5 * std::sin(2.0 * grid.phi(j));
        }
    }
    const VelocityField v_joint = smooth_random_velocity(grid, 1.5, 0.5, weights, rng);
    const Field mean = warp(atlas, integrate(v_joint));
    const DeformationField phi_geom = DeformationField::identity(grid);

    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> sq(grid.cells(), 0.0);
    Field joint(1, grid);
    for (long t = 0; t < trials; ++t) {
        for (std::size_t p = 0; p < grid.cells(); ++p) {
            joint.channel(0)[p] = mean.channel(0)[p] + sigma * normal(rng);
        }
        const Field geom = warp(joint, phi_geom);
        for (std::size_t p = 0; p < grid.cells(); ++p) {
            const double obs = geom.channel(0)[p] + sigma * normal(rng);
            const double d = obs - mean.channel(0)[p];
            sq[p] += d * d;
        }
    }

    LikelihoodReport r;
    r.sigma = sigma;
    r.trials = trials;
    r.expected_variance = 2.0 * sigma * sigma;
    double pooled = 0.0;
    for (double s : sq) {
        const double var = s / static_cast<double>(trials);
        pooled += var;
        r.max_pixel_relative_error =
            std::max(r.max_pixel_relative_error, std::abs(var - r.expected_variance) / r.expected_variance);
    }
    r.empirical_variance = pooled / static_cast<double>(grid.cells());
    r.relative_error = std::abs(r.empirical_variance - r.expected_variance) / r.expected_variance;
    return r;
}

} // namespace josa
