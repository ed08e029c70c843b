#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "josa/deform.hpp"
#include "josa/field.hpp"
#include "josa/model.hpp"

namespace josa {

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;

    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double eps = 1e-8;
};

// One bias-corrected Adam update in place. Moments are allocated lazily.
void adam_update(std::span<double> params, std::span<const double> grad, AdamState &state, double lr);

// Linear decay from lr0 to lr_floor over decay_epochs, then a factor per
// plateau event.
struct Schedule {
    double lr0 = 1e-3;
    double lr_floor = 1e-4;
    int decay_epochs = 500;
    double plateau_factor = 0.9;
    int plateau_patience = 100;

    double lr_at(int epoch, int plateau_events) const;
};

double lr_at(int epoch, int plateau_events);

// Counts plateau events: `patience` consecutive epochs past the decay phase
// without a new best validation loss. The window restarts after each event.
class PlateauTracker {
public:
    explicit PlateauTracker(const Schedule &schedule) : schedule_(schedule) {}

    // Returns the number of events so far, including any triggered now.
    int observe(int epoch, double validation_loss);
    int events() const { return events_; }

private:
    Schedule schedule_;
    double best_ = 0.0;
    bool have_best_ = false;
    int stale_ = 0;
    int events_ = 0;
};

struct SubjectGradient {
    Field v_joint;
    Field v_geom;
    Field v_func;
    LossBreakdown loss; // centrality is reported on the batch only
};

struct BatchGradient {
    LossBreakdown loss;
    std::vector<SubjectGradient> subjects;
    Field atlas_geom;
    Field atlas_func;
};

struct GradientOptions {
    LossOptions loss;
    // Subjects whose data terms feed the atlas gradient; empty means all.
    std::vector<bool> atlas_mask;
    bool atlas_gradient = true;
    int threads = 1;
};

// Loss and exact gradients with respect to every velocity in the batch and
// every atlas channel. Throws DivergenceError on a non-finite loss.
BatchGradient loss_and_grad(std::span<const SubjectRecord *const> batch, const Atlas &atlas, const Hyperparams &hp,
                            const GradientOptions &options = {});
BatchGradient loss_and_grad(const std::vector<SubjectRecord> &batch, const Atlas &atlas, const Hyperparams &hp,
                            const GradientOptions &options = {});

struct EpochRecord {
    int epoch = 0;
    LossBreakdown loss;
    double validation_loss = 0.0;
    double lr = 0.0;
    int plateau_events = 0;
    int grid_height = 0;
    double wall_seconds = 0.0;
};

enum class AtlasInit { Noise, GroupMean, Fixed };

struct FitConfig {
    int batch_size = 8;
    int epochs = 300;
    std::uint64_t seed = 1;
    Hyperparams hp;
    Schedule schedule;
    // The schedule is expressed for network weights; direct per-pixel
    // parameters move lr * lr_scale per Adam step.
    double lr_scale = 100.0;
    // Atlas step relative to the velocity step.
    double atlas_lr_scale = 1.0;
    std::optional<double> fixed_lr;
    AtlasInit atlas_init = AtlasInit::Noise;
    double atlas_init_std = 0.01;
    bool separate_fields = true;
    bool augment = false;
    bool standardize_inputs = true;
    double val_fraction = 0.2;
    int coarse_epochs = 0;
    int threads = 1;
    // Called after every epoch; not part of the configuration.
    std::function<void(const EpochRecord &)> on_epoch;

    void validate() const;
};


struct FitReport {
    std::vector<EpochRecord> epochs;
    std::vector<std::string> train_ids;
    std::vector<std::string> validation_ids;
    bool separate_fields = true;
    // Full-resolution total loss at the initial parameters, before any update.
    double initial_loss = 0.0;
};

struct FitResult {
    Atlas atlas;
    std::vector<SubjectRecord> subjects; // inputs as used (standardized) with fitted velocities
    FitReport report;
};

// Alternating stochastic optimization of per-subject velocities and the atlas.
// `fixed_atlas` is required for AtlasInit::Fixed and ignored otherwise.
FitResult fit(std::vector<SubjectRecord> subjects, const FitConfig &cfg,
              const std::optional<Atlas> &fixed_atlas = std::nullopt);

struct RegisterConfig {
    Hyperparams hp;
    int iterations = 300;
    double lr = 0.05;
    bool separate_fields = true;
};

struct RegisterDiagnostics {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double initial_geom_loss = 0.0;
    double final_geom_loss = 0.0;
    int iterations = 0;
    double negative_jacobian_joint = 0.0;
    double negative_jacobian_geom = 0.0;
    double negative_jacobian_func = 0.0;
};

struct Registration {
    VelocityField v_joint;
    VelocityField v_geom;
    VelocityField v_func;
    DeformationField joint;
    DeformationField geom;
    DeformationField func;
    RegisterDiagnostics diagnostics;
};

// Fits the three velocities of one subject against a frozen atlas using the
// geometric data term and the smoothness priors only.
Registration register_subject(const Field &subject_geom, const Atlas &atlas, const RegisterConfig &cfg);

struct GradientClassError {
    std::string name;
    std::size_t components = 0;
    double max_relative_error = 0.0;
    double max_abs_error = 0.0;
    double max_abs_gradient = 0.0;
};

struct GradientCheckReport {
    double h = 0.0;
    // Components whose +-h stencil crossed a bilinear cell boundary and were
    // differenced with a smaller step instead.
    std::size_t reduced_steps = 0;
    std::vector<GradientClassError> classes;
    double max_relative_error = 0.0;
    double seconds = 0.0;
};

// Compares loss_and_grad against central differences of total_loss on a
// random instance: every velocity component of every subject and every atlas
// value. Relative error per component is |a - f| / max(|a|, |f|, floor) with
// floor = 1e-3 * the largest gradient magnitude in that class. The loss is
// piecewise smooth (bilinear cells); a stencil that straddles a cell boundary
// is retried with a smaller step. separate_fields=false checks the tied
// (function follows geometry) variant.
GradientCheckReport check_gradients(const GridSpec &grid, int n_subjects, std::uint64_t seed, double h = 1e-4,
                                    int geom_channels = 2, bool separate_fields = true);

// Pulls a subject image back into atlas space through (modality ∘ joint)^-1.
Field to_atlas_space(const Field &image, const VelocityField &v_modality, const VelocityField &v_joint, int steps);

} // namespace josa
