#include "vb/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "vb/parallel.hpp"
#include "vb/rng.hpp"

namespace vb {

namespace {

using nlohmann::json;

constexpr double kPi = 3.14159265358979323846;
constexpr double kBrainBase = 0.35;       // nominal tissue intensity
constexpr double kBrainJitter = 0.04;     // case-level tissue intensity spread
constexpr double kTextureAmplitude = 0.15;
constexpr double kRimWidth = 1.5;         // voxels, measured inward from the surface

void validate(const PhantomConfig& cfg) {
    if (cfg.dims.d < 8 || cfg.dims.h < 8 || cfg.dims.w < 8)
        throw std::invalid_argument("phantom dims must be at least 8 voxels per axis");
    if (cfg.n_cases < 1) throw std::invalid_argument("n_cases must be positive");
    if (cfg.classes.empty()) throw std::invalid_argument("at least one class signature required");
    if (!(cfg.tumor_radius_min > 0.0) || cfg.tumor_radius_max < cfg.tumor_radius_min)
        throw std::invalid_argument("tumor radius range is invalid");
    if (cfg.noise_std < 0.0) throw std::invalid_argument("noise_std must be non-negative");
    if (cfg.brain_margin < 0.0 || cfg.brain_margin > 0.9)
        throw std::invalid_argument("brain_margin must lie in [0, 0.9]");
    if (cfg.bias_field_strength < 0.0)
        throw std::invalid_argument("bias_field_strength must be non-negative");
    if (cfg.max_offset_voxels < 0)
        throw std::invalid_argument("max_offset_voxels must be non-negative");
    const double min_semi = 0.5 * (1.0 - cfg.brain_margin) *
                            std::min({static_cast<double>(cfg.dims.d),
                                      static_cast<double>(cfg.dims.h),
                                      static_cast<double>(cfg.dims.w)});
    if (cfg.tumor_radius_max >= min_semi)
        throw std::invalid_argument("tumor radius does not fit inside the brain ellipsoid");
}

struct Ellipsoid {
    std::array<double, 3> center; // (d, i, j)
    std::array<double, 3> semi;   // semi-axes along (d, i, j)

    double norm_dist(double d, double i, double j) const {
        const double a = (d - center[0]) / semi[0];
        const double b = (i - center[1]) / semi[1];
        const double c = (j - center[2]) / semi[2];
        return std::sqrt(a * a + b * b + c * c);
    }
};

} // namespace

GeneratedCase generate_case(const PhantomConfig& cfg, int case_index) {
    validate(cfg);
    if (case_index < 0 || case_index >= cfg.n_cases)
        throw std::out_of_range("case index outside the cohort");
    const int k = static_cast<int>(cfg.classes.size());
    const int label = case_index % k;
    const ClassSignature& sig = cfg.classes[static_cast<std::size_t>(label)];

    Rng rng(mix(cfg.seed, "phantom-case", static_cast<std::uint64_t>(case_index)));

    Ellipsoid brain;
    brain.center = {cfg.dims.d / 2.0, cfg.dims.h / 2.0, cfg.dims.w / 2.0};
    brain.semi = {0.5 * (1.0 - cfg.brain_margin) * cfg.dims.d,
                  0.5 * (1.0 - cfg.brain_margin) * cfg.dims.h,
                  0.5 * (1.0 - cfg.brain_margin) * cfg.dims.w};
    if (cfg.max_offset_voxels > 0) {
        for (auto& c : brain.center)
            c += rng.uniform_int(-cfg.max_offset_voxels, cfg.max_offset_voxels);
    }

    const double radius = rng.uniform(cfg.tumor_radius_min, cfg.tumor_radius_max);
    const double min_semi = std::min({brain.semi[0], brain.semi[1], brain.semi[2]});

    // Place the lesion fully inside the brain: its centre must sit deep
    // enough that a ball of `radius` cannot poke through the surface.
    const double max_norm = 1.0 - (radius + 0.5) / min_semi;
    if (max_norm <= 0.0)
        throw std::invalid_argument("tumor radius does not fit inside the brain ellipsoid");
    std::array<double, 3> tumor{};
    for (int attempt = 0;; ++attempt) {
        if (attempt >= 1000)
            throw std::runtime_error("could not place a lesion inside the brain");
        for (int a = 0; a < 3; ++a)
            tumor[a] = brain.center[a] + rng.uniform(-1.0, 1.0) * brain.semi[a];
        if (brain.norm_dist(tumor[0], tumor[1], tumor[2]) <= max_norm) break;
    }

    const double case_mean = sig.intensity_mean + sig.intensity_std * rng.normal();
    const double tissue =
        std::clamp(kBrainBase + kBrainJitter * rng.normal(), 0.25, 0.45);

    // Optional multiplicative bias field: degree-2 polynomial in normalized
    // coordinates, zero-mean over the grid so overall brightness is kept.
    std::array<double, 10> bias_coef{};
    if (cfg.bias_field_strength > 0.0) {
        for (auto& c : bias_coef) c = rng.uniform(-1.0, 1.0) * cfg.bias_field_strength;
    }
    auto bias_at = [&](double nd, double ni, double nj) {
        return bias_coef[0] + bias_coef[1] * nd + bias_coef[2] * ni + bias_coef[3] * nj +
               bias_coef[4] * nd * ni + bias_coef[5] * nd * nj + bias_coef[6] * ni * nj +
               bias_coef[7] * nd * nd + bias_coef[8] * ni * ni + bias_coef[9] * nj * nj;
    };
    double bias_mean = 0.0;
    if (cfg.bias_field_strength > 0.0) {
        for (int d = 0; d < cfg.dims.d; ++d)
            for (int i = 0; i < cfg.dims.h; ++i)
                for (int j = 0; j < cfg.dims.w; ++j)
                    bias_mean += bias_at(2.0 * d / (cfg.dims.d - 1) - 1.0,
                                         2.0 * i / (cfg.dims.h - 1) - 1.0,
                                         2.0 * j / (cfg.dims.w - 1) - 1.0);
        bias_mean /= static_cast<double>(cfg.dims.numel());
    }

    std::vector<float> voxels(static_cast<std::size_t>(cfg.dims.numel()));
    std::vector<std::uint8_t> bits(voxels.size(), 0);
    std::size_t idx = 0;
    for (int d = 0; d < cfg.dims.d; ++d) {
        for (int i = 0; i < cfg.dims.h; ++i) {
            for (int j = 0; j < cfg.dims.w; ++j, ++idx) {
                double value = 0.0;
                const bool in_brain = brain.norm_dist(d, i, j) <= 1.0;
                if (in_brain) value = tissue;
                const double dd = d - tumor[0], di = i - tumor[1], dj = j - tumor[2];
                const double dist = std::sqrt(dd * dd + di * di + dj * dj);
                if (dist <= radius) {
                    bits[idx] = 1;
                    double v = case_mean;
                    const double f = sig.texture_frequency;
                    v += kTextureAmplitude * std::sin(2.0 * kPi * f * dd) *
                         std::sin(2.0 * kPi * f * di) * std::sin(2.0 * kPi * f * dj);
                    if (dist >= radius - kRimWidth) v += sig.rim_strength;
                    if (sig.heterogeneity > 0.0) v += sig.heterogeneity * rng.normal();
                    value = v;
                }
                if (cfg.bias_field_strength > 0.0) {
                    const double b = bias_at(2.0 * d / (cfg.dims.d - 1) - 1.0,
                                             2.0 * i / (cfg.dims.h - 1) - 1.0,
                                             2.0 * j / (cfg.dims.w - 1) - 1.0) -
                                     bias_mean;
                    value *= std::exp(b);
                }
                if (cfg.noise_std > 0.0) value += cfg.noise_std * rng.normal();
                voxels[idx] = static_cast<float>(value);
            }
        }
    }

    GeneratedCase out;
    char name[32];
    std::snprintf(name, sizeof(name), "case_%04d", case_index);
    out.record.case_id = name;
    out.record.class_label = label;
    out.record.volume_path = std::string("cases/") + name + ".vbv";
    out.record.gt_mask_path = std::string("cases/") + name + "_gt.vbm";
    out.volume = Volume(cfg.dims, Spacing{}, std::move(voxels));
    out.gt_mask = Mask(cfg.dims, Spacing{}, std::move(bits));
    out.tumor_radius = radius;
    out.tumor_center = tumor;
    return out;
}

std::vector<GeneratedCase> generate_cohort(const PhantomConfig& cfg, int jobs) {
    validate(cfg);
    std::vector<GeneratedCase> cases(static_cast<std::size_t>(cfg.n_cases));
    parallel_for(static_cast<std::size_t>(cfg.n_cases), jobs, [&](std::size_t i) {
        cases[i] = generate_case(cfg, static_cast<int>(i));
    });
    return cases;
}

CohortManifest write_cohort(const PhantomConfig& cfg, const std::string& out_dir, int jobs) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "cases");
    std::vector<GeneratedCase> cases = generate_cohort(cfg, jobs);
    CohortManifest manifest;
    manifest.k_classes = static_cast<int>(cfg.classes.size());
    manifest.generator_config_echo = phantom_config_to_json(cfg);
    for (const auto& c : cases) {
        save_volume(c.volume, (fs::path(out_dir) / c.record.volume_path).string());
        save_mask(c.gt_mask, (fs::path(out_dir) / c.record.gt_mask_path).string());
        manifest.cases.push_back(c.record);
    }
    save_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
    return manifest;
}

std::string manifest_to_json(const CohortManifest& m) {
    json j;
    j["k_classes"] = m.k_classes;
    j["generator_config_echo"] =
        m.generator_config_echo.empty() ? json::object() : json::parse(m.generator_config_echo);
    json cases = json::array();
    for (const auto& c : m.cases) {
        json e;
        e["case_id"] = c.case_id;
        e["class_label"] = c.class_label;
        e["volume_path"] = c.volume_path;
        e["gt_mask_path"] = c.gt_mask_path;
        cases.push_back(std::move(e));
    }
    j["cases"] = std::move(cases);
    return j.dump(2) + "\n";
}

CohortManifest manifest_from_json(const std::string& text) {
    const json j = json::parse(text);
    CohortManifest m;
    m.k_classes = j.at("k_classes").get<int>();
    if (j.contains("generator_config_echo"))
        m.generator_config_echo = j.at("generator_config_echo").dump();
    for (const auto& e : j.at("cases")) {
        CaseRecord c;
        c.case_id = e.at("case_id").get<std::string>();
        c.class_label = e.at("class_label").get<int>();
        c.volume_path = e.at("volume_path").get<std::string>();
        c.gt_mask_path = e.at("gt_mask_path").get<std::string>();
        m.cases.push_back(std::move(c));
    }
    if (m.k_classes < 1) throw std::invalid_argument("manifest k_classes must be positive");
    for (const auto& c : m.cases)
        if (c.class_label < 0 || c.class_label >= m.k_classes)
            throw std::invalid_argument("manifest class label out of range for " + c.case_id);
    return m;
}

CohortManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CohortManifest m = manifest_from_json(text);
    // Stored paths are manifest-relative; resolve them for the caller.
    const std::filesystem::path dir = std::filesystem::path(path).parent_path();
    for (auto& c : m.cases) {
        if (!std::filesystem::path(c.volume_path).is_absolute())
            c.volume_path = (dir / c.volume_path).string();
        if (!std::filesystem::path(c.gt_mask_path).is_absolute())
            c.gt_mask_path = (dir / c.gt_mask_path).string();
    }
    return m;
}

void save_manifest(const CohortManifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest " + path);
    out << manifest_to_json(m);
}

std::vector<ClassStats> class_separability_report(const std::vector<GeneratedCase>& cases) {
    if (cases.empty()) throw std::invalid_argument("no cases to report on");
    int k = 0;
    for (const auto& c : cases) k = std::max(k, c.record.class_label + 1);
    std::vector<ClassStats> stats(static_cast<std::size_t>(k));
    for (int label = 0; label < k; ++label) stats[static_cast<std::size_t>(label)].class_label = label;

    for (const auto& c : cases) {
        const auto& vol = c.volume.voxels();
        const auto& bits = c.gt_mask.bits();
        double sum = 0.0, sq = 0.0;
        std::int64_t n = 0;
        for (std::size_t i = 0; i < bits.size(); ++i) {
            if (!bits[i]) continue;
            sum += vol[i];
            sq += static_cast<double>(vol[i]) * vol[i];
            ++n;
        }
        if (n == 0) throw std::runtime_error("case has an empty lesion mask: " + c.record.case_id);
        const double mean = sum / static_cast<double>(n);
        const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);

        // Texture proxy: mean absolute forward difference between
        // neighbouring lesion voxels along each axis.
        const Dims dims = c.volume.dims();
        double grad_sum = 0.0;
        std::int64_t grad_n = 0;
        for (int d = 0; d < dims.d; ++d)
            for (int i = 0; i < dims.h; ++i)
                for (int j = 0; j < dims.w; ++j) {
                    if (!c.gt_mask(d, i, j)) continue;
                    const float v = c.volume(d, i, j);
                    if (d + 1 < dims.d && c.gt_mask(d + 1, i, j)) {
                        grad_sum += std::abs(c.volume(d + 1, i, j) - v);
                        ++grad_n;
                    }
                    if (i + 1 < dims.h && c.gt_mask(d, i + 1, j)) {
                        grad_sum += std::abs(c.volume(d, i + 1, j) - v);
                        ++grad_n;
                    }
                    if (j + 1 < dims.w && c.gt_mask(d, i, j + 1)) {
                        grad_sum += std::abs(c.volume(d, i, j + 1) - v);
                        ++grad_n;
                    }
                }

        auto& s = stats[static_cast<std::size_t>(c.record.class_label)];
        s.n_cases += 1;
        s.mean_intensity += mean;
        s.std_intensity += std::sqrt(var);
        s.mean_abs_gradient += grad_n > 0 ? grad_sum / static_cast<double>(grad_n) : 0.0;
        s.mean_tumor_voxels += static_cast<double>(n);
    }
    for (auto& s : stats) {
        if (s.n_cases == 0) continue;
        s.mean_intensity /= s.n_cases;
        s.std_intensity /= s.n_cases;
        s.mean_abs_gradient /= s.n_cases;
        s.mean_tumor_voxels /= s.n_cases;
    }
    return stats;
}

std::string class_stats_to_json(const std::vector<ClassStats>& stats) {
    json arr = json::array();
    for (const auto& s : stats) {
        json e;
        e["class_label"] = s.class_label;
        e["n_cases"] = s.n_cases;
        e["mean_intensity"] = s.mean_intensity;
        e["std_intensity"] = s.std_intensity;
        e["mean_abs_gradient"] = s.mean_abs_gradient;
        e["mean_tumor_voxels"] = s.mean_tumor_voxels;
        arr.push_back(std::move(e));
    }
    return arr.dump(2) + "\n";
}

std::string phantom_config_to_json(const PhantomConfig& cfg) {
    json j;
    j["dims"] = {cfg.dims.d, cfg.dims.h, cfg.dims.w};
    j["n_cases"] = cfg.n_cases;
    json classes = json::array();
    for (const auto& s : cfg.classes) {
        json e;
        e["intensity_mean"] = s.intensity_mean;
        e["intensity_std"] = s.intensity_std;
        e["texture_frequency"] = s.texture_frequency;
        e["rim_strength"] = s.rim_strength;
        e["heterogeneity"] = s.heterogeneity;
        classes.push_back(std::move(e));
    }
    j["classes"] = std::move(classes);
    j["tumor_radius_min"] = cfg.tumor_radius_min;
    j["tumor_radius_max"] = cfg.tumor_radius_max;
    j["noise_std"] = cfg.noise_std;
    j["brain_margin"] = cfg.brain_margin;
    j["seed"] = cfg.seed;
    j["bias_field_strength"] = cfg.bias_field_strength;
    j["max_offset_voxels"] = cfg.max_offset_voxels;
    return j.dump();
}

namespace {

void reject_unknown_keys(const json& j, const std::vector<std::string>& known,
                         const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw std::invalid_argument("unknown key '" + it.key() + "' in " + where);
    }
}

} // namespace

PhantomConfig phantom_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    PhantomConfig cfg;
    reject_unknown_keys(j,
                        {"dims", "n_cases", "classes", "tumor_radius_min", "tumor_radius_max",
                         "noise_std", "brain_margin", "seed", "bias_field_strength",
                         "max_offset_voxels"},
                        "phantom config");
    if (j.contains("dims")) {
        const auto d = j.at("dims");
        if (!d.is_array() || d.size() != 3)
            throw std::invalid_argument("phantom dims must be a 3-element array");
        cfg.dims = Dims{d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
    }
    if (j.contains("n_cases")) cfg.n_cases = j.at("n_cases").get<int>();
    if (j.contains("classes")) {
        cfg.classes.clear();
        for (const auto& e : j.at("classes")) {
            reject_unknown_keys(e,
                                {"intensity_mean", "intensity_std", "texture_frequency",
                                 "rim_strength", "heterogeneity"},
                                "class signature");
            ClassSignature s;
            if (e.contains("intensity_mean")) s.intensity_mean = e.at("intensity_mean").get<double>();
            if (e.contains("intensity_std")) s.intensity_std = e.at("intensity_std").get<double>();
            if (e.contains("texture_frequency"))
                s.texture_frequency = e.at("texture_frequency").get<double>();
            if (e.contains("rim_strength")) s.rim_strength = e.at("rim_strength").get<double>();
            if (e.contains("heterogeneity")) s.heterogeneity = e.at("heterogeneity").get<double>();
            cfg.classes.push_back(s);
        }
    }
    if (j.contains("tumor_radius_min")) cfg.tumor_radius_min = j.at("tumor_radius_min").get<double>();
    if (j.contains("tumor_radius_max")) cfg.tumor_radius_max = j.at("tumor_radius_max").get<double>();
    if (j.contains("noise_std")) cfg.noise_std = j.at("noise_std").get<double>();
    if (j.contains("brain_margin")) cfg.brain_margin = j.at("brain_margin").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("bias_field_strength"))
        cfg.bias_field_strength = j.at("bias_field_strength").get<double>();
    if (j.contains("max_offset_voxels")) cfg.max_offset_voxels = j.at("max_offset_voxels").get<int>();
    validate(cfg);
    return cfg;
}

} // namespace vb
