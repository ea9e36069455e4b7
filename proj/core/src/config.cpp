#include "vb/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "vb/rng.hpp"

namespace vb {

namespace {

using nlohmann::json;

// Re-parses one section through its module parser, prefixing any error with
// the section name so config mistakes are easy to locate.
template <typename Parser>
auto parse_section(const json& doc, const char* section, Parser parse)
    -> decltype(parse(std::string{})) {
    try {
        if (doc.contains(section)) return parse(doc.at(section).dump());
        return parse("{}");
    } catch (const std::exception& e) {
        throw std::invalid_argument("config section '" + std::string(section) +
                                    "': " + e.what());
    }
}

} // namespace

void RunConfig::validate() const {
    // The phantom/preprocess sections validate inside their JSON parsers;
    // the method-bearing configs are re-checked here to catch programmatic
    // mutation after load.
    localizer.validate();
    diagnoser.validate();
    augment.validate();
    if (oracle_kind != "stub" && oracle_kind != "remote")
        throw std::invalid_argument("config section 'oracle': kind must be stub or remote");
    if (k_folds < 2)
        throw std::invalid_argument("config section 'eval': k_folds must be >= 2");
    if (average_mode != "macro" && average_mode != "micro" && average_mode != "weighted")
        throw std::invalid_argument(
            "config section 'eval': average_mode must be macro, micro, or weighted");
    if (saliency_export_cases < 0)
        throw std::invalid_argument(
            "config section 'eval': saliency_export_cases must be >= 0");
    if (jobs < 1) throw std::invalid_argument("config: jobs must be >= 1");
    if (output_root.empty())
        throw std::invalid_argument("config: output_root must not be empty");
}

void RunConfig::derive_stage_seeds() {
    phantom.seed = mix(master_seed, "stage-phantom");
    stub_oracle.seed = mix(master_seed, "stage-oracle");
    localizer.seed = mix(master_seed, "stage-localizer");
    diagnoser.seed = mix(master_seed, "stage-diagnoser");
    augment.seed = mix(master_seed, "stage-augment");
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["phantom"] = json::parse(phantom_config_to_json(cfg.phantom));
    j["preprocess"] = json::parse(preprocess_config_to_json(cfg.preprocess));
    j["oracle"] = {{"kind", cfg.oracle_kind},
                   {"stub", json::parse(stub_noise_config_to_json(cfg.stub_oracle))},
                   {"remote", json::parse(remote_oracle_config_to_json(cfg.remote_oracle))}};
    j["localizer"] = json::parse(prior_config_to_json(cfg.localizer));
    j["diagnoser"] = json::parse(diagnoser_config_to_json(cfg.diagnoser));
    j["augment"] = json::parse(augment_config_to_json(cfg.augment));
    j["eval"] = {{"k_folds", cfg.k_folds},
                 {"average_mode", cfg.average_mode},
                 {"saliency_export_cases", cfg.saliency_export_cases}};
    j["master_seed"] = cfg.master_seed;
    j["output_root"] = cfg.output_root;
    j["jobs"] = cfg.jobs;
    return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const std::exception& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    static const char* known[] = {"phantom",  "preprocess", "oracle",      "localizer",
                                  "diagnoser", "augment",   "eval",        "master_seed",
                                  "output_root", "jobs"};
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok)
            throw std::invalid_argument("config: unknown section or key '" + it.key() +
                                        "'");
    }

    RunConfig cfg;
    cfg.phantom = parse_section(doc, "phantom", phantom_config_from_json);
    cfg.preprocess = parse_section(doc, "preprocess", preprocess_config_from_json);
    if (doc.contains("oracle")) {
        const json& o = doc.at("oracle");
        for (auto it = o.begin(); it != o.end(); ++it)
            if (it.key() != "kind" && it.key() != "stub" && it.key() != "remote")
                throw std::invalid_argument("config section 'oracle': unknown key '" +
                                            it.key() + "'");
        if (o.contains("kind")) cfg.oracle_kind = o.at("kind").get<std::string>();
        try {
            if (o.contains("stub"))
                cfg.stub_oracle = stub_noise_config_from_json(o.at("stub").dump());
            if (o.contains("remote"))
                cfg.remote_oracle = remote_oracle_config_from_json(o.at("remote").dump());
        } catch (const std::exception& e) {
            throw std::invalid_argument("config section 'oracle': " + std::string(e.what()));
        }
    }
    cfg.localizer = parse_section(doc, "localizer", prior_config_from_json);
    cfg.diagnoser = parse_section(doc, "diagnoser", diagnoser_config_from_json);
    cfg.augment = parse_section(doc, "augment", augment_config_from_json);
    if (doc.contains("eval")) {
        const json& e = doc.at("eval");
        for (auto it = e.begin(); it != e.end(); ++it)
            if (it.key() != "k_folds" && it.key() != "average_mode" &&
                it.key() != "saliency_export_cases")
                throw std::invalid_argument("config section 'eval': unknown key '" +
                                            it.key() + "'");
        if (e.contains("k_folds")) cfg.k_folds = e.at("k_folds").get<int>();
        if (e.contains("average_mode"))
            cfg.average_mode = e.at("average_mode").get<std::string>();
        if (e.contains("saliency_export_cases"))
            cfg.saliency_export_cases = e.at("saliency_export_cases").get<int>();
    }
    if (doc.contains("master_seed"))
        cfg.master_seed = doc.at("master_seed").get<std::uint64_t>();
    if (doc.contains("output_root"))
        cfg.output_root = doc.at("output_root").get<std::string>();
    if (doc.contains("jobs")) cfg.jobs = doc.at("jobs").get<int>();
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return run_config_from_json(buf.str());
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write config file: " + path);
    out << run_config_to_json(cfg);
}

} // namespace vb
