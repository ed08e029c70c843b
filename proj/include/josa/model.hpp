#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "josa/deform.hpp"
#include "josa/field.hpp"
#include "josa/sphere_grid.hpp"

namespace josa {

// Population atlas: geometric and functional feature channels on one grid.
struct Atlas {
    Field geom;
    Field func;

    GridSpec grid() const { return geom.grid(); }
};

// One subject's observations and its three latent velocity fields.
struct SubjectRecord {
    std::string id;
    Field geom;
    std::optional<Field> func;
    VelocityField v_joint;
    VelocityField v_geom;
    VelocityField v_func;

    bool has_func() const { return func.has_value(); }
};

// Initialises the three velocities to zero on the subject's grid.
SubjectRecord make_subject(std::string id, Field geom, std::optional<Field> func);

struct Hyperparams {
    double lambda_joint = 0.1;
    double lambda_geom = 0.2;
    double lambda_func = 0.2;
    double alpha_joint = 1.0;
    double w_func = 0.7;
    double w_geom = 0.3;
    double sigma_aug_deform = 4.0;
    double sigma_noise_geom = 1.0;
    double sigma_noise_func = 6.0;
    double aug_smoothing_px = 8.0;
    int steps = kDefaultSteps;

    // Throws ConfigError on negative weights, data weights not summing to 1, or steps < 1.
    void validate() const;
};

// Per channel: (x - median) / std. Throws DegenerateDataError if a channel's
// std is below 1e-12.
Field standardize(const Field &features);

double median(std::vector<double> values);

// exp(v) together with exp(-v).
struct SvfPair {
    DeformationField forward;
    DeformationField inverse;
};

SvfPair exponentiate(const VelocityField &v, int steps);

// Symmetric data term for one modality: half the residual in subject space
// against the atlas pushed through modality∘joint, half the residual in atlas
// space against the subject pulled back through the inverse.
double data_loss(const Field &subject_img, const Field &atlas_img, const SvfPair &modality, const SvfPair &joint,
                 const AreaWeights &weights);

// sum over fields of lambda * ||grad u||^2 (area weighted, all components).
double reg_loss(const DeformationField &u_joint, const DeformationField &u_geom, const DeformationField &u_func,
                const Hyperparams &hp, const AreaWeights &weights);

double gradient_energy(const DeformationField &u, const AreaWeights &weights);

// alpha * ||mean_i u_i||^2. Throws std::invalid_argument on an empty batch.
double centrality_loss(const std::vector<DeformationField> &u_joint, double alpha, const AreaWeights &weights);

struct LossBreakdown {
    double geom = 0.0; // already multiplied by w_geom
    double func = 0.0; // already multiplied by w_func
    double reg_joint = 0.0;
    double reg_geom = 0.0;
    double reg_func = 0.0;
    double centrality = 0.0;
    double total = 0.0;

    double sum_terms() const { return geom + func + reg_joint + reg_geom + reg_func + centrality; }
    LossBreakdown &operator+=(const LossBreakdown &other);
};

struct LossOptions {
    // false: function follows the geometric deformation, v_func is unused.
    bool separate_fields = true;
    bool centrality = true;
};

LossBreakdown total_loss(const std::vector<SubjectRecord> &batch, const Atlas &atlas, const Hyperparams &hp,
                         const LossOptions &options = {});

// Area-weighted std of u with the longitude component scaled by sin(theta),
// i.e. displacement length on the sphere in row-pixel units.
double physical_displacement_std(const DeformationField &phi, const AreaWeights &weights);

// The deformation augment() applies for this seed.
DeformationField augment_deformation(const GridSpec &grid, const Hyperparams &hp, std::uint64_t seed);

// Random smooth deformation of all present channels followed by Gaussian
// noise per channel group. Velocities are left untouched.
SubjectRecord augment(const SubjectRecord &subject, const Hyperparams &hp, std::uint64_t seed);

struct LikelihoodReport {
    double sigma = 0.0;
    long trials = 0;
    double expected_variance = 0.0;
    double empirical_variance = 0.0;
    double relative_error = 0.0;
    double max_pixel_relative_error = 0.0;
};

// Monte-Carlo check of the marginal likelihood of the two-stage generative
// chain: I_j ~ N(phi_j∘A, sigma^2), I_g ~ N(phi_g∘I_j, sigma^2) with phi_g = Id
// must scatter about phi_j∘A with variance 2 sigma^2.
LikelihoodReport verify_marginal_likelihood(double sigma, long trials, std::uint64_t seed);

} // namespace josa
