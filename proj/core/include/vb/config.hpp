#pragma once

#include <cstdint>
#include <string>

#include "vb/diagnoser.hpp"
#include "vb/localizer.hpp"
#include "vb/oracle.hpp"
#include "vb/phantom.hpp"
#include "vb/preprocess.hpp"

namespace vb {

// One declarative document driving every stage. Each section mirrors the
// owning module's config; unknown keys anywhere are rejected, and section
// errors cite the section name. Stage seeds are not taken from the file:
// the orchestrator derives every stage stream from master_seed, so one
// number reproduces the whole run.
struct RunConfig {
    PhantomConfig phantom;
    PreprocessConfig preprocess;
    std::string oracle_kind = "stub"; // "stub" | "remote"
    StubNoiseConfig stub_oracle;
    RemoteOracleConfig remote_oracle;
    PriorConfig localizer;
    DiagnoserConfig diagnoser;
    AugmentConfig augment;
    int k_folds = 5;
    std::string average_mode = "macro"; // macro | micro | weighted
    int saliency_export_cases = 4;      // cases given image dumps (report covers all)
    std::uint64_t master_seed = 1;
    std::string output_root = "out";
    int jobs = 1;

    void validate() const;

    // Overwrites every per-stage seed with a stream named after the stage
    // and derived from master_seed.
    void derive_stage_seeds();
};

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

} // namespace vb
