#include "josa/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "josa/errors.hpp"
#include "josa/random_field.hpp"

namespace josa {

using nlohmann::json;

namespace {

template <typename T>
void put_le(std::string &buf, T value) {
    for (std::size_t b = 0; b < sizeof(T); ++b) {
        buf.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * b)) & 0xff));
    }
}

void put_f32(std::string &buf, float x) {
    std::uint32_t bits;
    std::memcpy(&bits, &x, 4);
    put_le(buf, bits);
}

class Reader {
public:
    Reader(std::vector<unsigned char> bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

    template <typename T>
    T get() {
        need(sizeof(T), "header");
        std::uint64_t v = 0;
        for (std::size_t b = 0; b < sizeof(T); ++b) {
            v |= static_cast<std::uint64_t>(bytes_[pos_ + b]) << (8 * b);
        }
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }

    std::string get_string(std::size_t n) {
        need(n, "name");
        std::string s(reinterpret_cast<const char *>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void need(std::uint64_t n, const char *part) const {
        if (n > bytes_.size() - pos_) {
            throw TruncatedContainerError(what_ + ": truncated " + part + " (need " + std::to_string(n) +
                                          " bytes, " + std::to_string(bytes_.size() - pos_) + " left)");
        }
    }

    const unsigned char *here() const { return bytes_.data() + pos_; }
    void skip(std::size_t n) { pos_ += n; }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::vector<unsigned char> bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

void write_file_atomic(const fs::path &path, const std::string &data, std::ios::openmode mode = std::ios::binary) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, mode | std::ios::trunc);
        if (!out) {
            throw PathMissingError("cannot write " + tmp.string());
        }
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!out) {
            throw std::runtime_error("write failed: " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

std::vector<unsigned char> read_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw PathMissingError("cannot open " + path.string());
    }
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

} // namespace

void write_container(const fs::path &path, const std::vector<Tensor> &tensors) {
    std::string buf = "JOSA";
    put_le<std::uint16_t>(buf, kContainerVersion);
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
    for (const auto &t : tensors) {
        std::uint64_t count = 1;
        for (auto d : t.dims) {
            count *= d;
        }
        if (count != t.data.size()) {
            throw ShapeMismatchError("tensor " + t.name + ": dims do not match data length");
        }
        if (t.dims.size() > 255 || t.name.size() > 65535) {
            throw std::invalid_argument("tensor " + t.name + ": rank or name too long");
        }
        for (float x : t.data) {
            if (!std::isfinite(x)) {
                throw NonFiniteError("tensor " + t.name + ": non-finite value");
            }
        }
        put_le<std::uint8_t>(buf, 1);
        put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) {
            put_le<std::uint32_t>(buf, d);
        }
        put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(t.name.size()));
        buf += t.name;
        put_le<std::uint64_t>(buf, count * 4);
        for (float x : t.data) {
            put_f32(buf, x);
        }
    }
    write_file_atomic(path, buf);
}

std::vector<Tensor> read_container(const fs::path &path) {
    Reader r(read_file(path), path.string());
    r.need(4, "magic");
    if (std::memcmp(r.here(), "JOSA", 4) != 0) {
        throw CorruptContainerError(path.string() + ": bad magic, not a JOSA container");
    }
    r.skip(4);
    const auto version = r.get<std::uint16_t>();
    if (version != kContainerVersion) {
        throw UnsupportedVersionError(path.string() + ": container version " + std::to_string(version) +
                                      " is not supported (this build reads version " +
                                      std::to_string(kContainerVersion) + ")");
    }
    const auto n = r.get<std::uint32_t>();
    std::vector<Tensor> out;
    for (std::uint32_t k = 0; k < n; ++k) {
        Tensor t;
        const auto dtype = r.get<std::uint8_t>();
        if (dtype != 1) {
            throw CorruptContainerError(path.string() + ": unknown dtype code " + std::to_string(dtype));
        }
        const auto rank = r.get<std::uint8_t>();
        std::uint64_t count = 1;
        for (int d = 0; d < rank; ++d) {
            t.dims.push_back(r.get<std::uint32_t>());
            count *= t.dims.back();
            if (count > (std::uint64_t{1} << 40)) {
                throw CorruptContainerError(path.string() + ": implausible tensor size");
            }
        }
        t.name = r.get_string(r.get<std::uint16_t>());
        const auto payload = r.get<std::uint64_t>();
        if (payload != count * 4) {
            throw CorruptContainerError(path.string() + ": tensor " + t.name + " payload of " +
                                        std::to_string(payload) + " bytes does not match dims (" +
                                        std::to_string(count * 4) + ")");
        }
        r.need(payload, "payload");
        t.data.resize(count);
        const unsigned char *p = r.here();
        for (std::uint64_t i = 0; i < count; ++i) {
            const std::uint32_t bits = static_cast<std::uint32_t>(p[4 * i]) | (static_cast<std::uint32_t>(p[4 * i + 1]) << 8) |
                                       (static_cast<std::uint32_t>(p[4 * i + 2]) << 16) |
                                       (static_cast<std::uint32_t>(p[4 * i + 3]) << 24);
            std::memcpy(&t.data[i], &bits, 4);
        }
        r.skip(payload);
        out.push_back(std::move(t));
    }
    if (!r.done()) {
        throw CorruptContainerError(path.string() + ": trailing bytes after the last tensor");
    }
    return out;
}

const Tensor *find_tensor_opt(const std::vector<Tensor> &tensors, const std::string &name) {
    for (const auto &t : tensors) {
        if (t.name == name) {
            return &t;
        }
    }
    return nullptr;
}

const Tensor &find_tensor(const std::vector<Tensor> &tensors, const std::string &name) {
    const Tensor *t = find_tensor_opt(tensors, name);
    if (!t) {
        throw CorruptContainerError("container has no tensor named " + name);
    }
    return *t;
}

Tensor to_tensor(const std::string &name, const Field &f) {
    Tensor t;
    t.name = name;
    t.dims = {static_cast<std::uint32_t>(f.channels()), static_cast<std::uint32_t>(f.height()),
              static_cast<std::uint32_t>(f.width())};
    t.data.reserve(f.values().size());
    for (double x : f.values()) {
        t.data.push_back(static_cast<float>(x));
    }
    return t;
}

Field to_field(const Tensor &t) {
    int c = 1;
    int h = 0;
    int w = 0;
    if (t.dims.size() == 3) {
        c = static_cast<int>(t.dims[0]);
        h = static_cast<int>(t.dims[1]);
        w = static_cast<int>(t.dims[2]);
    } else if (t.dims.size() == 2) {
        h = static_cast<int>(t.dims[0]);
        w = static_cast<int>(t.dims[1]);
    } else {
        throw DimensionError("tensor " + t.name + ": expected rank 2 or 3");
    }
    make_grid(h, w);
    Field f(c, h, w);
    auto v = f.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = t.data[i];
    }
    return f;
}

void save_atlas(const fs::path &path, const Atlas &atlas) {
    write_container(path, {to_tensor("atlas_geom", atlas.geom), to_tensor("atlas_func", atlas.func)});
}

Atlas load_atlas(const fs::path &path) {
    const auto ts = read_container(path);
    Atlas a;
    a.geom = to_field(find_tensor(ts, "atlas_geom"));
    a.func = to_field(find_tensor(ts, "atlas_func"));
    if (!a.func.on_grid(a.geom.grid())) {
        throw ShapeMismatchError(path.string() + ": atlas channel groups on different grids");
    }
    return a;
}

void save_subject(const fs::path &path, const SubjectRecord &s) {
    std::vector<Tensor> ts{to_tensor("geom", s.geom)};
    if (s.func) {
        ts.push_back(to_tensor("func", *s.func));
    }
    ts.push_back(to_tensor("v_joint", s.v_joint.v));
    ts.push_back(to_tensor("v_geom", s.v_geom.v));
    ts.push_back(to_tensor("v_func", s.v_func.v));
    write_container(path, ts);
}

SubjectRecord load_subject(const fs::path &path, const std::string &id) {
    const auto ts = read_container(path);
    Field geom = to_field(find_tensor(ts, "geom"));
    std::optional<Field> func;
    if (const Tensor *t = find_tensor_opt(ts, "func")) {
        func = to_field(*t);
    }
    SubjectRecord s = make_subject(id, std::move(geom), std::move(func));
    if (const Tensor *t = find_tensor_opt(ts, "v_joint")) {
        s.v_joint = VelocityField(to_field(*t));
    }
    if (const Tensor *t = find_tensor_opt(ts, "v_geom")) {
        s.v_geom = VelocityField(to_field(*t));
    }
    if (const Tensor *t = find_tensor_opt(ts, "v_func")) {
        s.v_func = VelocityField(to_field(*t));
    }
    return s;
}

void save_truth(const fs::path &path, const GroundTruth &truth) {
    write_container(path, {to_tensor("true_v_joint", truth.v_joint.v), to_tensor("true_v_geom", truth.v_geom.v),
                           to_tensor("true_v_func", truth.v_func.v)});
}

GroundTruth load_truth(const fs::path &path) {
    const auto ts = read_container(path);
    return GroundTruth{VelocityField(to_field(find_tensor(ts, "true_v_joint"))),
                       VelocityField(to_field(find_tensor(ts, "true_v_geom"))),
                       VelocityField(to_field(find_tensor(ts, "true_v_func")))};
}

void write_cohort(const fs::path &dir, const Cohort &cohort) {
    fs::create_directories(dir / "subjects");
    fs::create_directories(dir / "truth");
    json manifest;
    manifest["format"] = "josa-cohort";
    manifest["version"] = 1;
    manifest["synth"] = to_json(cohort.config);
    json channels;
    channels["geom"] = json::array();
    for (int c = 0; c < cohort.atlas.geom.channels(); ++c) {
        channels["geom"].push_back(c % 2 == 0 ? "sulcal_depth_" + std::to_string(c / 2) : "curvature_" + std::to_string(c / 2));
    }
    channels["func"] = json::array();
    for (int c = 0; c < cohort.atlas.func.channels(); ++c) {
        channels["func"].push_back("task_contrast_" + std::to_string(c));
    }
    manifest["channels"] = channels;
    manifest["truth_atlas"] = "truth/atlas.josa";
    manifest["subjects"] = json::array();
    save_atlas(dir / "truth" / "atlas.josa", cohort.atlas);
    for (std::size_t k = 0; k < cohort.subjects.size(); ++k) {
        const auto &s = cohort.subjects[k];
        const std::string file = "subjects/" + s.record.id + ".josa";
        const std::string truth = "truth/" + s.record.id + ".josa";
        save_subject(dir / file, s.record);
        save_truth(dir / truth, s.truth);
        manifest["subjects"].push_back({{"id", s.record.id},
                                        {"file", file},
                                        {"truth", truth},
                                        {"seed", derive_seed(cohort.config.seed, 100 + static_cast<std::uint64_t>(k))}});
    }
    write_json(dir / "manifest.json", manifest);
}

namespace {

json read_manifest(const fs::path &dir) {
    if (!fs::is_directory(dir)) {
        throw PathMissingError("cohort directory " + dir.string() + " does not exist");
    }
    json m = read_json(dir / "manifest.json");
    if (m.value("format", "") != "josa-cohort" || !m.contains("subjects")) {
        throw ConfigError(dir.string() + "/manifest.json is not a cohort manifest");
    }
    return m;
}

} // namespace

std::vector<SubjectRecord> load_observations(const fs::path &dir) {
    const json m = read_manifest(dir);
    std::vector<SubjectRecord> out;
    for (const auto &e : m["subjects"]) {
        SubjectRecord s = load_subject(dir / e.at("file").get<std::string>(), e.at("id").get<std::string>());
        // Observations only; any velocities in the file are ignored.
        out.push_back(make_subject(s.id, std::move(s.geom), std::move(s.func)));
    }
    return out;
}

std::optional<CohortTruth> load_truth_files(const fs::path &dir) {
    const json m = read_manifest(dir);
    if (!m.contains("truth_atlas") || !fs::exists(dir / m["truth_atlas"].get<std::string>())) {
        return std::nullopt;
    }
    CohortTruth t;
    t.atlas = load_atlas(dir / m["truth_atlas"].get<std::string>());
    for (const auto &e : m["subjects"]) {
        if (!e.contains("truth") || !fs::exists(dir / e["truth"].get<std::string>())) {
            return std::nullopt;
        }
        t.ids.push_back(e.at("id").get<std::string>());
        t.fields.push_back(load_truth(dir / e["truth"].get<std::string>()));
    }
    return t;
}

std::vector<SubjectRecord> render_clean(const CohortTruth &truth) {
    Cohort c;
    c.atlas = truth.atlas;
    for (std::size_t k = 0; k < truth.ids.size(); ++k) {
        SynthSubject s;
        s.record.id = truth.ids[k];
        s.truth = truth.fields[k];
        c.subjects.push_back(std::move(s));
    }
    return clean_images(c);
}

json to_json(const SynthConfig &c) {
    return {{"n_subjects", c.n_subjects},   {"height", c.height},
            {"width", c.width},             {"geom_channels", c.geom_channels},
            {"func_channels", c.func_channels}, {"joint_std", c.joint_std},
            {"geom_std", c.geom_std},       {"func_std", c.func_std},
            {"smoothing_px", c.smoothing_px}, {"noise_geom", c.noise_geom},
            {"noise_func", c.noise_func},   {"geom_order", c.geom_order},
            {"blob_count", c.blob_count},   {"blob_sigma_px", c.blob_sigma_px},
            {"offset_fraction", c.offset_fraction}, {"seed", c.seed}};
}

json to_json(const LossBreakdown &l) {
    return {{"geom", l.geom},         {"func", l.func},         {"reg_joint", l.reg_joint},
            {"reg_geom", l.reg_geom}, {"reg_func", l.reg_func}, {"centrality", l.centrality},
            {"total", l.total}};
}

json to_json(const FitReport &r) {
    json epochs = json::array();
    for (const auto &e : r.epochs) {
        epochs.push_back({{"epoch", e.epoch},
                          {"loss", to_json(e.loss)},
                          {"validation_loss", e.validation_loss},
                          {"lr", e.lr},
                          {"plateau_events", e.plateau_events},
                          {"grid_height", e.grid_height},
                          {"wall_seconds", e.wall_seconds}});
    }
    return {{"initial_loss", r.initial_loss},
            {"separate_fields", r.separate_fields},
            {"train_ids", r.train_ids},
            {"validation_ids", r.validation_ids},
            {"epochs", epochs}};
}

json to_json(const WilcoxonResult &w) {
    return {{"statistic", w.statistic}, {"p_value", w.p_value}, {"n_used", w.n_used}, {"exact", w.exact}};
}

json to_json(const VariantReport &v) {
    return {{"name", v.name},
            {"ids", v.ids},
            {"geom_before", v.geom_before},
            {"geom_after", v.geom_after},
            {"geom_improvement", v.geom_improvement},
            {"func_before", v.func_before},
            {"func_after", v.func_after},
            {"func_improvement", v.func_improvement},
            {"negative_jacobian_joint", v.negjac_joint},
            {"negative_jacobian_geom", v.negjac_geom},
            {"negative_jacobian_func", v.negjac_func},
            {"geom_test", to_json(v.geom_test)},
            {"func_test", to_json(v.func_test)},
            {"mean_joint_norm", v.mean_joint_norm},
            {"joint_mean_norm", v.joint_mean_norm},
            {"seconds", v.seconds},
            {"fit", to_json(v.fit)}};
}

json to_json(const EvalReport &r) {
    json variants = json::array();
    for (const auto &v : r.variants) {
        variants.push_back(to_json(v));
    }
    json comps = json::array();
    for (const auto &c : r.comparisons) {
        comps.push_back({{"name", c.name},
                         {"better", c.better},
                         {"worse", c.worse},
                         {"channel", c.channel},
                         {"deltas", c.deltas},
                         {"median_delta", c.median_delta},
                         {"test", to_json(c.test)}});
    }
    return {{"variants", variants}, {"comparisons", comps}, {"seconds", r.seconds}};
}

json to_json(const GradientCheckReport &r) {
    json classes = json::array();
    for (const auto &c : r.classes) {
        classes.push_back({{"name", c.name},
                           {"components", c.components},
                           {"max_relative_error", c.max_relative_error},
                           {"max_abs_error", c.max_abs_error},
                           {"max_abs_gradient", c.max_abs_gradient}});
    }
    return {{"h", r.h},
            {"reduced_steps", r.reduced_steps},
            {"classes", classes},
            {"max_relative_error", r.max_relative_error},
            {"seconds", r.seconds}};
}

json to_json(const LikelihoodReport &r) {
    return {{"sigma", r.sigma},
            {"trials", r.trials},
            {"expected_variance", r.expected_variance},
            {"empirical_variance", r.empirical_variance},
            {"relative_error", r.relative_error},
            {"max_pixel_relative_error", r.max_pixel_relative_error}};
}

json to_json(const RegisterDiagnostics &d) {
    return {{"initial_loss", d.initial_loss},
            {"final_loss", d.final_loss},
            {"initial_geom_loss", d.initial_geom_loss},
            {"final_geom_loss", d.final_geom_loss},
            {"iterations", d.iterations},
            {"negative_jacobian_joint", d.negative_jacobian_joint},
            {"negative_jacobian_geom", d.negative_jacobian_geom},
            {"negative_jacobian_func", d.negative_jacobian_func}};
}

void write_json(const fs::path &path, const json &j) {
    write_file_atomic(path, j.dump(2) + "\n", std::ios::out);
}

json read_json(const fs::path &path) {
    std::ifstream in(path);
    if (!in) {
        throw PathMissingError("cannot open " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error &e) {
        throw ConfigError(path.string() + ": invalid JSON: " + e.what());
    }
}

void write_eval_csv(const fs::path &path, const EvalReport &report) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "variant,id,geom_before,geom_after,geom_improvement,func_before,func_after,func_improvement,"
          "negjac_joint,negjac_geom,negjac_func\n";
    for (const auto &v : report.variants) {
        for (std::size_t k = 0; k < v.ids.size(); ++k) {
            auto opt = [&](const std::vector<double> &x) {
                std::ostringstream s;
                s << std::setprecision(17);
                if (k < x.size()) {
                    s << x[k];
                }
                return s.str();
            };
            os << v.name << ',' << v.ids[k] << ',' << opt(v.geom_before) << ',' << opt(v.geom_after) << ','
               << opt(v.geom_improvement) << ',' << opt(v.func_before) << ',' << opt(v.func_after) << ','
               << opt(v.func_improvement) << ',' << opt(v.negjac_joint) << ',' << opt(v.negjac_geom) << ','
               << opt(v.negjac_func) << '\n';
        }
    }
    write_file_atomic(path, os.str(), std::ios::out);
}

void write_fit_csv(const fs::path &path, const FitReport &report) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "epoch,total,geom,func,reg_joint,reg_geom,reg_func,centrality,validation_loss,lr,plateau_events,"
          "grid_height,wall_seconds\n";
    for (const auto &e : report.epochs) {
        os << e.epoch << ',' << e.loss.total << ',' << e.loss.geom << ',' << e.loss.func << ',' << e.loss.reg_joint
           << ',' << e.loss.reg_geom << ',' << e.loss.reg_func << ',' << e.loss.centrality << ','
           << e.validation_loss << ',' << e.lr << ',' << e.plateau_events << ',' << e.grid_height << ','
           << e.wall_seconds << '\n';
    }
    write_file_atomic(path, os.str(), std::ios::out);
}

void write_pgm16(const fs::path &path, const Field &f, int channel, std::optional<double> lo, std::optional<double> hi) {
    if (channel < 0 || channel >= f.channels()) {
        throw DimensionError("write_pgm16: channel out of range");
    }
    const auto ch = f.channel(channel);
    double a = lo ? *lo : *std::min_element(ch.begin(), ch.end());
    double b = hi ? *hi : *std::max_element(ch.begin(), ch.end());
    if (!(b > a)) {
        b = a + 1.0;
    }
    std::string buf = "P5\n" + std::to_string(f.width()) + " " + std::to_string(f.height()) + "\n65535\n";
    for (double x : ch) {
        const double t = std::clamp((x - a) / (b - a), 0.0, 1.0);
        const auto v = static_cast<std::uint16_t>(std::lround(t * 65535.0));
        buf.push_back(static_cast<char>(v >> 8)); // PGM samples are big-endian
        buf.push_back(static_cast<char>(v & 0xff));
    }
    write_file_atomic(path, buf);
}

} // namespace josa
