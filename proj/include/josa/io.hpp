#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "josa/eval.hpp"
#include "josa/field.hpp"
#include "josa/model.hpp"
#include "josa/optim.hpp"
#include "josa/synth.hpp"

namespace josa {

namespace fs = std::filesystem;

// Container layout, little-endian throughout:
//   "JOSA" | u16 version | u32 tensor count
//   per tensor: u8 dtype (1 = f32) | u8 rank | u32 dims[rank] | u16 name length | name
//               | u64 payload bytes | payload (row-major)
inline constexpr std::uint16_t kContainerVersion = 1;

struct ContainerError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CorruptContainerError : ContainerError {
    using ContainerError::ContainerError;
};
struct TruncatedContainerError : ContainerError {
    using ContainerError::ContainerError;
};
struct UnsupportedVersionError : ContainerError {
    using ContainerError::ContainerError;
};

struct Tensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

void write_container(const fs::path &path, const std::vector<Tensor> &tensors);
std::vector<Tensor> read_container(const fs::path &path);

const Tensor &find_tensor(const std::vector<Tensor> &tensors, const std::string &name);
const Tensor *find_tensor_opt(const std::vector<Tensor> &tensors, const std::string &name);

// Fields are stored as (channels, height, width) f32.
Tensor to_tensor(const std::string &name, const Field &f);
Field to_field(const Tensor &t);

void save_atlas(const fs::path &path, const Atlas &atlas);
Atlas load_atlas(const fs::path &path);

// Observations ("geom", optional "func") plus the three velocities.
void save_subject(const fs::path &path, const SubjectRecord &s);
SubjectRecord load_subject(const fs::path &path, const std::string &id);

void save_truth(const fs::path &path, const GroundTruth &truth);
GroundTruth load_truth(const fs::path &path);

// Cohort directory: manifest.json, subjects/<id>.josa, truth/atlas.josa,
// truth/<id>.josa. Fitting code only ever calls load_observations.
void write_cohort(const fs::path &dir, const Cohort &cohort);
std::vector<SubjectRecord> load_observations(const fs::path &dir);

struct CohortTruth {
    Atlas atlas;
    std::vector<std::string> ids;
    std::vector<GroundTruth> fields;
};
std::optional<CohortTruth> load_truth_files(const fs::path &dir);

// Noise-free renderings in the order of `ids`.
std::vector<SubjectRecord> render_clean(const CohortTruth &truth);

nlohmann::json to_json(const SynthConfig &cfg);
nlohmann::json to_json(const LossBreakdown &l);
nlohmann::json to_json(const FitReport &r);
nlohmann::json to_json(const VariantReport &v);
nlohmann::json to_json(const EvalReport &r);
nlohmann::json to_json(const WilcoxonResult &w);
nlohmann::json to_json(const GradientCheckReport &r);
nlohmann::json to_json(const LikelihoodReport &r);
nlohmann::json to_json(const RegisterDiagnostics &d);

void write_json(const fs::path &path, const nlohmann::json &j);
nlohmann::json read_json(const fs::path &path);

// One row per subject and variant.
void write_eval_csv(const fs::path &path, const EvalReport &report);
void write_fit_csv(const fs::path &path, const FitReport &report);

// 16-bit binary PGM of one channel, linearly mapped from [lo, hi]; by default
// the channel's own range.
void write_pgm16(const fs::path &path, const Field &f, int channel, std::optional<double> lo = std::nullopt,
                 std::optional<double> hi = std::nullopt);

} // namespace josa
