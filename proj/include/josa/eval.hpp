#pragma once

#include <string>
#include <vector>

#include "josa/field.hpp"
#include "josa/model.hpp"
#include "josa/optim.hpp"
#include "josa/sphere_grid.hpp"

namespace josa {

// Pearson correlation of each image with the group mean, averaged over
// channels. Weighted mode applies area weights to means, variances and the
// covariance. Throws DegenerateDataError on zero variance.
std::vector<double> corr_to_group_mean(const std::vector<Field> &images, const AreaWeights &weights,
                                       bool weighted = true);

struct Correlations {
    std::vector<std::string> ids;
    std::vector<double> values;
};

// after - before per subject; throws IdMismatchError unless ids line up.
std::vector<double> improvement(const Correlations &before, const Correlations &after);

enum class WilcoxonMode { Auto, Exact, Normal };

struct WilcoxonResult {
    double statistic = 0.0; // W+, sum of ranks of positive deltas
    double p_value = 1.0;   // one-tailed, alternative: deltas tend to be > 0
    int n_used = 0;         // nonzero deltas
    bool exact = false;
};

// Signed-rank test with zero deltas dropped and mid-ranks for ties. Auto uses
// the exact null distribution up to 20 samples, otherwise the normal
// approximation with continuity and tie corrections. Throws
// TooFewSamplesError with fewer than 5 nonzero deltas.
WilcoxonResult wilcoxon_one_tailed(const std::vector<double> &deltas, WilcoxonMode mode = WilcoxonMode::Auto);

struct VariantReport {
    std::string name;
    std::vector<std::string> ids;
    std::vector<double> geom_before, geom_after, geom_improvement;
    std::vector<double> func_before, func_after, func_improvement;
    std::vector<double> negjac_joint, negjac_geom, negjac_func;
    Field group_mean_geom; // registered images, atlas space
    Field group_mean_func;
    WilcoxonResult geom_test;
    WilcoxonResult func_test;
    double mean_joint_norm = 0.0;  // mean over subjects of the weighted rms of u_j
    double joint_mean_norm = 0.0;  // weighted rms of the cohort-mean u_j
    double seconds = 0.0; // evaluate_fit: scoring only; ablate: fit plus scoring
    FitReport fit;
};

// Scores a fitted cohort: correlations of the native images and of the images
// pulled back into atlas space. `reference` optionally replaces the fitted
// images (same ids and order), e.g. noise-free renderings of a synthetic cohort.
VariantReport evaluate_fit(const FitResult &fitted, const std::string &name, int steps,
                           const std::vector<SubjectRecord> *reference = nullptr);

struct Comparison {
    std::string name;   // e.g. "full_vs_shared_func"
    std::string better; // variant expected to be ahead
    std::string worse;
    std::string channel; // "geom" or "func"
    std::vector<double> deltas;
    double median_delta = 0.0;
    WilcoxonResult test;
};

struct EvalReport {
    std::vector<VariantReport> variants;
    std::vector<Comparison> comparisons;
    double seconds = 0.0;
};

struct AblationConfig {
    FitConfig fit;
    bool full = true;
    bool shared = true;
    bool fixed_atlas = true;
};

// Rigidly aligns the cohort (rotation about the polar axis, integer column
// shifts) and averages the standardized images.
Atlas rigid_group_mean(const std::vector<SubjectRecord> &subjects, int iterations = 3);

// Fits each variant with the same seed and compares the paired improvements:
// full vs shared on function, full vs fixed-average atlas on geometry.
EvalReport ablate(const std::vector<SubjectRecord> &subjects, const AblationConfig &cfg,
                  const std::vector<SubjectRecord> *reference = nullptr);

double median_of(std::vector<double> values);

} // namespace josa
