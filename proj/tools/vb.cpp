// vb: command-line front end wiring phantom generation, preprocessing,
// slice-oracle localization, masked-attention training, evaluation,
// ablation and saliency export into reproducible artifact stages under a
// single output root. Every stage echoes the effective configuration and
// lists the files it produced; all randomness derives from the master seed.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vb/config.hpp"
#include "vb/diagnoser.hpp"
#include "vb/eval.hpp"
#include "vb/localizer.hpp"
#include "vb/log.hpp"
#include "vb/nn/checkpoint.hpp"
#include "vb/oracle.hpp"
#include "vb/parallel.hpp"
#include "vb/phantom.hpp"
#include "vb/preprocess.hpp"
#include "vb/rng.hpp"
#include "vb/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string() + " for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << text;
    out.flush();
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

// Exclusive per-output-root lock so concurrent invocations cannot interleave
// partial artifacts. Created O_EXCL; removed on scope exit.
class OutputLock {
public:
    explicit OutputLock(const fs::path& root) {
        fs::create_directories(root);
        path_ = root / ".vb_lock";
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0) {
            if (errno == EEXIST)
                throw std::runtime_error(
                    "output root '" + root.string() +
                    "' is locked by another vb invocation (" + path_.string() +
                    "); remove the lock file if it is stale");
            throw std::runtime_error("cannot create lock file " + path_.string() + ": " +
                                     std::strerror(errno));
        }
        const std::string pid = std::to_string(::getpid()) + "\n";
        const ssize_t written = ::write(fd, pid.data(), pid.size());
        (void)written;
        ::close(fd);
        held_ = true;
    }
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;
    ~OutputLock() {
        if (held_) {
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }

private:
    fs::path path_;
    bool held_ = false;
};

void require_artifact(const fs::path& path, const std::string& producer) {
    if (!fs::exists(path))
        throw std::runtime_error("missing artifact " + path.string() + ": run `vb " +
                                 producer + "` first");
}

// Runs a stage body with a failure marker contract: any exception leaves
// <stage_dir>/FAILED holding the message, then propagates (non-zero exit).
void with_failure_marker(const fs::path& stage_dir, const std::function<void()>& body) {
    fs::create_directories(stage_dir);
    std::error_code ec;
    fs::remove(stage_dir / "FAILED", ec);
    try {
        body();
    } catch (const std::exception& e) {
        try {
            write_text_file(stage_dir / "FAILED", std::string(e.what()) + "\n");
        } catch (...) {
            // The marker is best-effort; the original error still propagates.
        }
        throw;
    }
}

// Every stage directory carries the effective config and a sorted listing of
// the files it holds, so a run can be audited and reproduced from any stage.
void write_stage_manifest(const fs::path& stage_dir, const vb::RunConfig& cfg) {
    write_text_file(stage_dir / "config_echo.json", vb::run_config_to_json(cfg));
    std::vector<std::string> names;
    for (const auto& entry : fs::recursive_directory_iterator(stage_dir)) {
        if (!entry.is_regular_file()) continue;
        std::string rel = fs::relative(entry.path(), stage_dir).generic_string();
        if (rel == "files.json") continue;
        names.push_back(std::move(rel));
    }
    std::sort(names.begin(), names.end());
    json j;
    j["files"] = names;
    write_text_file(stage_dir / "files.json", j.dump(2) + "\n");
}

struct ProcCase {
    std::string id;
    int label = 0;
    fs::path volume;
    fs::path brain_mask;
    fs::path gt_mask;
};

struct ProcManifest {
    std::vector<ProcCase> cases;
    int k_classes = 0;
};

ProcManifest load_proc_manifest(const fs::path& root) {
    const fs::path dir = root / "preprocess";
    const fs::path path = dir / "manifest.json";
    require_artifact(path, "preprocess");
    const json j = json::parse(read_text_file(path));
    ProcManifest out;
    out.k_classes = j.at("k_classes").get<int>();
    for (const json& c : j.at("cases")) {
        ProcCase pc;
        pc.id = c.at("case_id").get<std::string>();
        pc.label = c.at("class_label").get<int>();
        pc.volume = dir / c.at("volume").get<std::string>();
        pc.brain_mask = dir / c.at("brain_mask").get<std::string>();
        pc.gt_mask = dir / c.at("gt_mask").get<std::string>();
        out.cases.push_back(std::move(pc));
    }
    if (out.cases.empty()) throw std::runtime_error("preprocess manifest lists no cases");
    return out;
}

json overlap_to_json(const vb::MaskOverlap& o) {
    json j;
    j["intersection"] = o.intersection;
    j["union"] = o.union_size;
    j["pred_size"] = o.pred_size;
    j["gt_size"] = o.gt_size;
    j["iou"] = o.iou;
    j["recall"] = o.recall;
    j["precision"] = o.precision;
    return j;
}

// Scalar metrics averaged over folds, confusion summed — the same assembly
// the cross-validation runner uses for its own average.
vb::MetricReport average_fold_reports(const std::vector<vb::MetricReport>& reports, int k) {
    vb::MetricReport avg;
    if (reports.empty()) return avg;
    avg.mode = reports.front().mode;
    avg.confusion.k = k;
    avg.confusion.counts.assign(static_cast<std::size_t>(k) * k, 0);
    for (const vb::MetricReport& r : reports) {
        avg.accuracy += r.accuracy;
        avg.precision += r.precision;
        avg.recall += r.recall;
        avg.f1 += r.f1;
        for (std::size_t i = 0; i < avg.confusion.counts.size(); ++i)
            avg.confusion.counts[i] += r.confusion.counts[i];
    }
    const double n = static_cast<double>(reports.size());
    avg.accuracy /= n;
    avg.precision /= n;
    avg.recall /= n;
    avg.f1 /= n;
    return avg;
}

class Stages {
public:
    explicit Stages(vb::RunConfig cfg)
        : cfg_(std::move(cfg)), root_(cfg_.output_root) {}

    void phantom_gen() {
        const fs::path dir = root_ / "phantom";
        with_failure_marker(dir, [&] {
            vb::write_cohort(cfg_.phantom, dir.string(), cfg_.jobs);
            write_stage_manifest(dir, cfg_);
        });
    }

    void preprocess() {
        const fs::path dir = root_ / "preprocess";
        with_failure_marker(dir, [&] {
            const fs::path phantom_manifest = root_ / "phantom" / "manifest.json";
            require_artifact(phantom_manifest, "phantom-gen");
            const vb::CohortManifest manifest =
                vb::load_manifest(phantom_manifest.string());
            fs::create_directories(dir / "cases");

            struct Entry {
                json j;
            };
            std::vector<Entry> entries(manifest.cases.size());
            vb::parallel_for(manifest.cases.size(), cfg_.jobs, [&](std::size_t idx) {
                const vb::CaseRecord& rec = manifest.cases[idx];
                const vb::Volume raw =
                    vb::load_volume((root_ / "phantom" / rec.volume_path).string());
                const vb::Mask gt =
                    vb::load_mask((root_ / "phantom" / rec.gt_mask_path).string());
                const vb::PreprocessResult res =
                    vb::preprocess_pipeline(raw, cfg_.preprocess);
                const vb::Mask gt_registered = vb::apply_registration(gt, res.transform);

                const std::string vol_rel = "cases/" + rec.case_id + "_proc.vbv";
                const std::string brain_rel = "cases/" + rec.case_id + "_brain.vbm";
                const std::string gt_rel = "cases/" + rec.case_id + "_gt.vbm";
                vb::save_volume(res.volume, (dir / vol_rel).string());
                vb::save_mask(res.brain_mask, (dir / brain_rel).string());
                vb::save_mask(gt_registered, (dir / gt_rel).string());

                json c;
                c["case_id"] = rec.case_id;
                c["class_label"] = rec.class_label;
                c["volume"] = vol_rel;
                c["brain_mask"] = brain_rel;
                c["gt_mask"] = gt_rel;
                c["brain_threshold"] = res.brain_threshold;
                c["stage_log"] = res.stage_log;
                entries[idx].j = std::move(c);
            });

            json m;
            m["k_classes"] = manifest.k_classes;
            json cases = json::array();
            for (const Entry& e : entries) cases.push_back(e.j);
            m["cases"] = std::move(cases);
            write_text_file(dir / "manifest.json", m.dump(2) + "\n");
            write_stage_manifest(dir, cfg_);
        });
    }

    void localize(const std::string& oracle_override) {
        const fs::path dir = root_ / "localize";
        with_failure_marker(dir, [&] {
            const ProcManifest proc = load_proc_manifest(root_);
            fs::create_directories(dir / "cases");
            const std::string kind =
                oracle_override.empty() ? cfg_.oracle_kind : oracle_override;

            std::vector<json> rows(proc.cases.size());
            vb::parallel_for(proc.cases.size(), cfg_.jobs, [&](std::size_t idx) {
                const ProcCase& c = proc.cases[idx];
                const vb::Volume volume = vb::load_volume(c.volume.string());
                const vb::Mask gt = vb::load_mask(c.gt_mask.string());
                const vb::Mask brain = vb::load_mask(c.brain_mask.string());

                vb::PriorConfig lcfg = cfg_.localizer;
                lcfg.seed = vb::mix(cfg_.localizer.seed, "case", static_cast<std::uint64_t>(idx));
                std::unique_ptr<vb::BoxPredictor> predictor;
                if (kind == "stub") {
                    vb::StubNoiseConfig scfg = cfg_.stub_oracle;
                    scfg.seed =
                        vb::mix(cfg_.stub_oracle.seed, "case", static_cast<std::uint64_t>(idx));
                    predictor = std::make_unique<vb::StubPredictor>(gt, scfg);
                } else {
                    predictor = std::make_unique<vb::RemotePredictor>(cfg_.remote_oracle);
                }

                const vb::LocalizeResult res =
                    vb::localize_case(volume, *predictor, lcfg, &brain);
                const vb::Mask coarse = vb::binarize(res.prior, lcfg.tau_bin);

                const std::string prior_rel = "cases/" + c.id + "_prior.vbv";
                const std::string coarse_rel = "cases/" + c.id + "_coarse.vbm";
                const std::string refined_rel = "cases/" + c.id + "_refined.vbm";
                vb::save_volume(res.prior.volume(), (dir / prior_rel).string());
                vb::save_mask(coarse, (dir / coarse_rel).string());
                vb::save_mask(res.refined, (dir / refined_rel).string());

                json r;
                r["case_id"] = c.id;
                r["class_label"] = c.label;
                r["prior"] = prior_rel;
                r["coarse"] = coarse_rel;
                r["refined"] = refined_rel;
                r["fallback"] = res.fallback;
                r["failed_slices"] = res.failed_slices;
                r["warnings"] = res.warnings;
                r["coarse_overlap"] = overlap_to_json(vb::mask_overlap(coarse, gt));
                r["refined_overlap"] = overlap_to_json(vb::mask_overlap(res.refined, gt));
                rows[idx] = std::move(r);
            });

            double mean_coarse_recall = 0.0, mean_refined_recall = 0.0,
                   mean_refined_iou = 0.0;
            int fallback_count = 0;
            for (const json& r : rows) {
                mean_coarse_recall += r["coarse_overlap"]["recall"].get<double>();
                mean_refined_recall += r["refined_overlap"]["recall"].get<double>();
                mean_refined_iou += r["refined_overlap"]["iou"].get<double>();
                if (r["fallback"].get<bool>()) ++fallback_count;
            }
            const double n = static_cast<double>(rows.size());
            json report;
            report["oracle"] = kind;
            report["cases"] = rows;
            report["summary"] = {{"mean_coarse_recall", mean_coarse_recall / n},
                                 {"mean_refined_recall", mean_refined_recall / n},
                                 {"mean_refined_iou", mean_refined_iou / n},
                                 {"fallback_count", fallback_count},
                                 {"case_count", rows.size()}};
            write_text_file(dir / "report.json", report.dump(2) + "\n");
            write_stage_manifest(dir, cfg_);
        });
    }

    void train() {
        const fs::path dir = root_ / "train";
        with_failure_marker(dir, [&] {
            const ProcManifest proc = load_proc_manifest(root_);
            const std::vector<vb::DiagnoserCase> cases = load_diagnoser_cases(proc);
            const vb::FoldAssignment folds = ensure_folds(proc);

            const vb::CvResult cv =
                vb::run_cv(cases, folds, cfg_.diagnoser, cfg_.augment, cfg_.jobs);

            json fold_summaries = json::array();
            for (const vb::FoldOutcome& fo : cv.folds) {
                vb::DiagnoserConfig fold_cfg = cfg_.diagnoser;
                fold_cfg.seed = vb::mix(cfg_.diagnoser.seed, "cv-fold",
                                        static_cast<std::uint64_t>(fo.fold));
                const std::string ckpt = "fold_" + std::to_string(fo.fold) + ".vbc";
                vb::nn::save_checkpoint((dir / ckpt).string(), fo.training.params,
                                        vb::diagnoser_checkpoint_meta(fold_cfg));

                std::ostringstream lines;
                for (const vb::EpochLog& e : fo.training.epochs) {
                    json l;
                    l["epoch"] = e.epoch;
                    l["lr"] = e.lr;
                    l["loss"] = e.loss;
                    l["train_acc"] = e.train_acc;
                    lines << l.dump() << "\n";
                }
                write_text_file(dir / ("epochs_fold_" + std::to_string(fo.fold) + ".jsonl"),
                                lines.str());

                json s;
                s["fold"] = fo.fold;
                s["checkpoint"] = ckpt;
                s["epochs"] = fo.training.epochs.size();
                if (!fo.training.epochs.empty()) {
                    s["final_loss"] = fo.training.epochs.back().loss;
                    s["final_train_acc"] = fo.training.epochs.back().train_acc;
                }
                fold_summaries.push_back(std::move(s));
            }

            json summary;
            summary["completed"] = cv.completed;
            summary["diagnostics"] = cv.diagnostics;
            summary["folds"] = std::move(fold_summaries);
            write_text_file(dir / "summary.json", summary.dump(2) + "\n");
            write_stage_manifest(dir, cfg_);

            if (!cv.completed)
                throw std::runtime_error("training failed: " + cv.diagnostics);
        });
    }

    void evaluate() {
        const fs::path dir = root_ / "evaluate";
        with_failure_marker(dir, [&] {
            const ProcManifest proc = load_proc_manifest(root_);
            const std::vector<vb::DiagnoserCase> cases = load_diagnoser_cases(proc);
            const vb::FoldAssignment folds = load_folds();
            const vb::AverageMode mode = vb::average_mode_from_name(cfg_.average_mode);

            std::vector<vb::MetricReport> fold_reports;
            json per_fold = json::array();
            int k_classes = cfg_.diagnoser.k_classes;
            for (int f = 0; f < folds.k; ++f) {
                const fs::path ckpt = root_ / "train" / ("fold_" + std::to_string(f) + ".vbc");
                require_artifact(ckpt, "train");
                const vb::nn::LoadedCheckpoint loaded =
                    vb::nn::load_checkpoint(ckpt.string());
                const vb::DiagnoserConfig dcfg =
                    vb::diagnoser_config_from_checkpoint_meta(loaded.meta_json);
                k_classes = dcfg.k_classes;

                std::vector<int> preds, labels;
                std::vector<std::string> ids;
                for (std::size_t i = 0; i < cases.size(); ++i) {
                    if (folds.fold_of[i] != f) continue;
                    const vb::Prediction p = vb::predict_case(
                        loaded.params, dcfg, cases[i].volume, cases[i].mask);
                    preds.push_back(p.predicted);
                    labels.push_back(cases[i].label);
                    ids.push_back(cases[i].id);
                }
                const vb::MetricReport report =
                    vb::compute_metrics(preds, labels, dcfg.k_classes, mode);
                fold_reports.push_back(report);

                json fj;
                fj["fold"] = f;
                fj["test_ids"] = ids;
                fj["labels"] = labels;
                fj["predictions"] = preds;
                fj["metrics"] = json::parse(vb::metric_report_to_json(report));
                per_fold.push_back(std::move(fj));
            }

            const vb::MetricReport averaged = average_fold_reports(fold_reports, k_classes);
            json out;
            out["average_mode"] = cfg_.average_mode;
            out["averaged"] = json::parse(vb::metric_report_to_json(averaged));
            out["per_fold"] = std::move(per_fold);
            write_text_file(dir / "metrics.json", out.dump(2) + "\n");
            write_stage_manifest(dir, cfg_);
        });
    }

    void ablate() {
        const fs::path dir = root_ / "ablate";
        with_failure_marker(dir, [&] {
            const ProcManifest proc = load_proc_manifest(root_);
            const vb::FoldAssignment folds = ensure_folds(proc);

            std::vector<vb::AblationCaseInputs> inputs;
            inputs.reserve(proc.cases.size());
            for (const ProcCase& c : proc.cases) {
                const fs::path coarse = root_ / "localize" / "cases" / (c.id + "_coarse.vbm");
                const fs::path refined = root_ / "localize" / "cases" / (c.id + "_refined.vbm");
                require_artifact(coarse, "localize");
                require_artifact(refined, "localize");
                vb::AblationCaseInputs in;
                in.id = c.id;
                in.label = c.label;
                in.volume = vb::load_volume(c.volume.string());
                in.whole_brain = vb::load_mask(c.brain_mask.string());
                in.coarse = vb::load_mask(coarse.string());
                in.refined = vb::load_mask(refined.string());
                inputs.push_back(std::move(in));
            }

            const vb::AblationResult result =
                vb::run_ablation(inputs, folds, cfg_.diagnoser, cfg_.augment, cfg_.jobs);
            write_text_file(dir / "ablation.csv", vb::ablation_to_csv(result));
            write_text_file(dir / "ablation.json", vb::ablation_to_json(result));
            write_stage_manifest(dir, cfg_);

            for (std::size_t i = 0; i < result.runs.size(); ++i)
                if (!result.runs[i].completed)
                    throw std::runtime_error("ablation row " + std::to_string(i + 1) +
                                             " failed: " + result.runs[i].diagnostics);
        });
    }

    void saliency() {
        const fs::path dir = root_ / "saliency";
        with_failure_marker(dir, [&] {
            const ProcManifest proc = load_proc_manifest(root_);
            const std::vector<vb::DiagnoserCase> cases = load_diagnoser_cases(proc);
            const vb::FoldAssignment folds = load_folds();
            fs::create_directories(dir / "cases");

            std::vector<vb::nn::LoadedCheckpoint> checkpoints;
            std::vector<vb::DiagnoserConfig> configs;
            for (int f = 0; f < folds.k; ++f) {
                const fs::path ckpt = root_ / "train" / ("fold_" + std::to_string(f) + ".vbc");
                require_artifact(ckpt, "train");
                checkpoints.push_back(vb::nn::load_checkpoint(ckpt.string()));
                configs.push_back(
                    vb::diagnoser_config_from_checkpoint_meta(checkpoints.back().meta_json));
            }

            json rows = json::array();
            int exported = 0;
            int correct_total = 0;
            int focused_correct = 0;
            for (std::size_t i = 0; i < cases.size(); ++i) {
                const int f = folds.fold_of[i];
                const vb::nn::ParamStore& params = checkpoints[f].params;
                const vb::DiagnoserConfig& dcfg = configs[f];
                const vb::DiagnoserCase& c = cases[i];

                const vb::Prediction pred =
                    vb::predict_case(params, dcfg, c.volume, c.mask);
                const vb::GradCamResult cam =
                    vb::grad_cam3d(params, dcfg, c.volume, c.mask, pred.predicted);
                const vb::Mask gt = vb::load_mask(proc.cases[i].gt_mask.string());
                const vb::SaliencyFocus focus = vb::saliency_focus(cam.heatmap, gt);

                const bool correct = pred.predicted == c.label;
                if (correct) {
                    ++correct_total;
                    if (focus.mass_fraction >= 2.0 * focus.volume_fraction) ++focused_correct;
                }

                json r;
                r["case_id"] = c.id;
                r["fold"] = f;
                r["label"] = c.label;
                r["predicted"] = pred.predicted;
                r["correct"] = correct;
                r["mass_fraction"] = focus.mass_fraction;
                r["volume_fraction"] = focus.volume_fraction;
                r["ratio"] = focus.ratio;
                if (exported < cfg_.saliency_export_cases) {
                    const std::string heat_rel = "cases/" + c.id + "_heatmap.vbv";
                    const std::string pgm_rel = "cases/" + c.id + "_heatmap_mid.pgm";
                    const vb::Volume& heat = cam.heatmap.volume();
                    vb::save_volume(heat, (dir / heat_rel).string());
                    vb::save_slice_pgm(heat, heat.dims().d / 2, (dir / pgm_rel).string());
                    r["heatmap"] = heat_rel;
                    r["heatmap_mid_slice"] = pgm_rel;
                    ++exported;
                }
                rows.push_back(std::move(r));
            }

            json report;
            report["cases"] = std::move(rows);
            report["summary"] = {
                {"case_count", cases.size()},
                {"correct", correct_total},
                {"focused_correct", focused_correct},
                {"focused_fraction",
                 correct_total > 0 ? static_cast<double>(focused_correct) / correct_total
                                   : 0.0},
                {"exported_heatmaps", exported}};
            write_text_file(dir / "saliency_report.json", report.dump(2) + "\n");
            write_stage_manifest(dir, cfg_);
        });
    }

    void pipeline(const std::string& oracle_override) {
        phantom_gen();
        preprocess();
        localize(oracle_override);
        train();
        evaluate();
        ablate();
        saliency();

        const json metrics = json::parse(read_text_file(root_ / "evaluate" / "metrics.json"));
        const json ablation = json::parse(read_text_file(root_ / "ablate" / "ablation.json"));
        const json sal = json::parse(read_text_file(root_ / "saliency" / "saliency_report.json"));

        json rows = json::array();
        for (const json& r : ablation.at("rows")) {
            json e;
            e["row"] = r.at("row");
            e["name"] = r.at("name");
            e["accuracy"] = r.at("metrics").at("accuracy");
            e["f1_score"] = r.at("metrics").at("f1_score");
            rows.push_back(std::move(e));
        }

        json summary;
        summary["stages"] = {"phantom-gen", "preprocess", "localize", "train",
                             "evaluate",   "ablate",     "saliency"};
        summary["metrics"] = metrics.at("averaged");
        summary["average_mode"] = cfg_.average_mode;
        summary["ablation"] = std::move(rows);
        summary["ablation_csv"] = "ablate/ablation.csv";
        summary["saliency"] = sal.at("summary");
        write_text_file(root_ / "pipeline_summary.json", summary.dump(2) + "\n");
    }

private:
    // Fold assignment is created on demand (train/ablate) and then shared by
    // every later stage; evaluate/saliency require it to exist.
    vb::FoldAssignment ensure_folds(const ProcManifest& proc) {
        const fs::path path = root_ / "folds.json";
        if (fs::exists(path)) {
            vb::FoldAssignment folds = vb::fold_assignment_from_json(read_text_file(path));
            folds.validate();
            return folds;
        }
        vb::CohortManifest view;
        view.k_classes = proc.k_classes;
        for (const ProcCase& c : proc.cases) {
            vb::CaseRecord rec;
            rec.case_id = c.id;
            rec.class_label = c.label;
            view.cases.push_back(std::move(rec));
        }
        const vb::FoldAssignment folds =
            vb::stratified_kfold(view, cfg_.k_folds, vb::mix(cfg_.master_seed, "stage-folds"));
        write_text_file(path, vb::fold_assignment_to_json(folds));
        return folds;
    }

    vb::FoldAssignment load_folds() const {
        const fs::path path = root_ / "folds.json";
        require_artifact(path, "train");
        vb::FoldAssignment folds = vb::fold_assignment_from_json(read_text_file(path));
        folds.validate();
        return folds;
    }

    // Volume + refined localization mask + label for every case, in manifest
    // order (the order the fold assignment is keyed to).
    std::vector<vb::DiagnoserCase> load_diagnoser_cases(const ProcManifest& proc) const {
        std::vector<vb::DiagnoserCase> cases;
        cases.reserve(proc.cases.size());
        for (const ProcCase& c : proc.cases) {
            const fs::path refined = root_ / "localize" / "cases" / (c.id + "_refined.vbm");
            require_artifact(refined, "localize");
            vb::DiagnoserCase dc;
            dc.id = c.id;
            dc.label = c.label;
            dc.volume = vb::load_volume(c.volume.string());
            dc.mask = vb::load_mask(refined.string());
            cases.push_back(std::move(dc));
        }
        return cases;
    }

    vb::RunConfig cfg_;
    fs::path root_;
};

// Shared flags: every stage subcommand resolves its RunConfig the same way —
// optional config file, then --out/--seed/--jobs overrides, then stage-seed
// derivation from the master seed.
struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    int jobs = 1;
    CLI::Option* config_opt = nullptr;
    CLI::Option* out_opt = nullptr;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* jobs_opt = nullptr;

    void attach(CLI::App* cmd) {
        config_opt = cmd->add_option("--config", config_path,
                                     "Run configuration JSON (default: built-in defaults)")
                         ->check(CLI::ExistingFile);
        out_opt = cmd->add_option("--out", out_dir,
                                  "Output root (default: output_root from config, 'out')");
        seed_opt = cmd->add_option(
            "--seed", seed, "Master seed override (default: master_seed from config, 1)");
        jobs_opt = cmd->add_option("--jobs", jobs,
                                   "Worker threads (default: jobs from config, 1)");
    }

    vb::RunConfig resolve() const {
        vb::RunConfig cfg;
        if (config_opt->count() > 0) cfg = vb::load_run_config(config_path);
        if (out_opt->count() > 0) cfg.output_root = out_dir;
        if (seed_opt->count() > 0) cfg.master_seed = seed;
        if (jobs_opt->count() > 0) cfg.jobs = jobs;
        cfg.derive_stage_seeds();
        cfg.validate();
        return cfg;
    }
};

int run_predict(const std::string& checkpoint_path, const std::string& volume_path,
                const std::string& mask_path) {
    const vb::nn::LoadedCheckpoint loaded = vb::nn::load_checkpoint(checkpoint_path);
    const vb::DiagnoserConfig cfg =
        vb::diagnoser_config_from_checkpoint_meta(loaded.meta_json);
    const vb::Volume volume = vb::load_volume(volume_path);
    const vb::Mask mask = vb::load_mask(mask_path);
    const vb::Prediction pred = vb::predict_case(loaded.params, cfg, volume, mask);
    json out;
    out["predicted"] = pred.predicted;
    out["probs"] = pred.probs;
    std::cout << out.dump(2) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"vb: coarse-to-fine tumor localization and masked-attention "
                 "classification on synthetic MRI phantoms"};
    app.require_subcommand(1);

    struct StageCmd {
        CLI::App* cmd = nullptr;
        CommonOpts opts;
    };

    StageCmd phantom, preprocess, localize, train, evaluate, ablate, saliency, pipeline;
    phantom.cmd = app.add_subcommand("phantom-gen", "Generate the synthetic phantom cohort");
    preprocess.cmd = app.add_subcommand(
        "preprocess", "Brain-extract, bias-correct and register every case");
    localize.cmd = app.add_subcommand(
        "localize", "Run the slice oracle and build coarse + refined tumor masks");
    train.cmd = app.add_subcommand(
        "train", "Train the masked-attention classifier across all folds");
    evaluate.cmd = app.add_subcommand(
        "evaluate", "Score saved fold checkpoints on their test folds");
    ablate.cmd = app.add_subcommand(
        "ablate", "Run the five-row mask/attention ablation study");
    saliency.cmd = app.add_subcommand(
        "saliency", "Export 3D class-activation heatmaps and a focus report");
    pipeline.cmd = app.add_subcommand(
        "pipeline", "Run every stage end to end and write a final summary");
    for (StageCmd* sc : {&phantom, &preprocess, &localize, &train, &evaluate, &ablate,
                         &saliency, &pipeline})
        sc->opts.attach(sc->cmd);

    std::string oracle_override;
    localize.cmd
        ->add_option("--oracle", oracle_override,
                     "Oracle backend override: stub | remote (default: from config)")
        ->check(CLI::IsMember({"stub", "remote"}));
    std::string pipeline_oracle_override;
    pipeline.cmd
        ->add_option("--oracle", pipeline_oracle_override,
                     "Oracle backend override: stub | remote (default: from config)")
        ->check(CLI::IsMember({"stub", "remote"}));

    std::string predict_checkpoint, predict_volume, predict_mask;
    CLI::App* predict_cmd = app.add_subcommand(
        "predict", "Classify one volume with a saved checkpoint (no output root)");
    predict_cmd->add_option("--checkpoint", predict_checkpoint, "Checkpoint file (.vbc)")
        ->required()
        ->check(CLI::ExistingFile);
    predict_cmd->add_option("--volume", predict_volume, "Volume file (.vbv)")
        ->required()
        ->check(CLI::ExistingFile);
    predict_cmd->add_option("--mask", predict_mask, "Localization mask file (.vbm)")
        ->required()
        ->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (predict_cmd->parsed())
            return run_predict(predict_checkpoint, predict_volume, predict_mask);

        StageCmd* active = nullptr;
        for (StageCmd* sc : {&phantom, &preprocess, &localize, &train, &evaluate, &ablate,
                             &saliency, &pipeline})
            if (sc->cmd->parsed()) active = sc;
        if (active == nullptr) throw std::runtime_error("no subcommand selected");

        const vb::RunConfig cfg = active->opts.resolve();
        OutputLock lock(cfg.output_root);
        Stages stages(cfg);

        if (phantom.cmd->parsed()) stages.phantom_gen();
        else if (preprocess.cmd->parsed()) stages.preprocess();
        else if (localize.cmd->parsed()) stages.localize(oracle_override);
        else if (train.cmd->parsed()) stages.train();
        else if (evaluate.cmd->parsed()) stages.evaluate();
        else if (ablate.cmd->parsed()) stages.ablate();
        else if (saliency.cmd->parsed()) stages.saliency();
        else if (pipeline.cmd->parsed()) stages.pipeline(pipeline_oracle_override);
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
