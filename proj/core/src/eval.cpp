#include "vb/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "vb/log.hpp"
#include "vb/nn/tensor.hpp"
#include "vb/parallel.hpp"
#include "vb/rng.hpp"

namespace vb {

namespace {

using nlohmann::json;

} // namespace

void FoldAssignment::validate() const {
    if (k < 2) throw std::invalid_argument("fold assignment: k must be >= 2");
    if (case_ids.size() != fold_of.size())
        throw std::invalid_argument("fold assignment: case id / fold count mismatch");
    if (case_ids.empty())
        throw std::invalid_argument("fold assignment: empty assignment");
    for (int f : fold_of)
        if (f < 0 || f >= k)
            throw std::invalid_argument("fold assignment: fold index out of range");
    std::vector<std::string> sorted = case_ids;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw std::invalid_argument("fold assignment: duplicate case id");
}

std::string fold_assignment_to_json(const FoldAssignment& folds) {
    json j;
    j["k"] = folds.k;
    j["case_ids"] = folds.case_ids;
    j["fold_of"] = folds.fold_of;
    return j.dump(2) + "\n";
}

FoldAssignment fold_assignment_from_json(const std::string& text) {
    const json j = json::parse(text);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (it.key() != "k" && it.key() != "case_ids" && it.key() != "fold_of")
            throw std::invalid_argument("unknown key '" + it.key() +
                                        "' in fold assignment");
    FoldAssignment f;
    f.k = j.at("k").get<int>();
    f.case_ids = j.at("case_ids").get<std::vector<std::string>>();
    f.fold_of = j.at("fold_of").get<std::vector<int>>();
    f.validate();
    return f;
}

FoldAssignment stratified_kfold(const CohortManifest& manifest, int k,
                                std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument("stratified_kfold: k must be >= 2");
    if (manifest.cases.empty())
        throw std::invalid_argument("stratified_kfold: empty manifest");

    // Group manifest positions by class, preserving manifest order.
    std::vector<std::vector<int>> by_class;
    for (int pos = 0; pos < static_cast<int>(manifest.cases.size()); ++pos) {
        const int c = manifest.cases[static_cast<std::size_t>(pos)].class_label;
        if (c < 0) throw std::invalid_argument("stratified_kfold: negative class label");
        if (c >= static_cast<int>(by_class.size()))
            by_class.resize(static_cast<std::size_t>(c) + 1);
        by_class[static_cast<std::size_t>(c)].push_back(pos);
    }
    for (std::size_t c = 0; c < by_class.size(); ++c)
        if (!by_class[c].empty() && static_cast<int>(by_class[c].size()) < k)
            throw std::invalid_argument("stratified_kfold: class " + std::to_string(c) +
                                        " has " + std::to_string(by_class[c].size()) +
                                        " cases, fewer than k=" + std::to_string(k));

    FoldAssignment out;
    out.k = k;
    out.case_ids.reserve(manifest.cases.size());
    for (const CaseRecord& r : manifest.cases) out.case_ids.push_back(r.case_id);
    out.fold_of.assign(manifest.cases.size(), 0);

    for (std::size_t c = 0; c < by_class.size(); ++c) {
        std::vector<int>& members = by_class[c];
        if (members.empty()) continue;
        Rng rng(mix(seed, "kfold-class", static_cast<std::uint64_t>(c)));
        for (int i = static_cast<int>(members.size()) - 1; i > 0; --i)
            std::swap(members[static_cast<std::size_t>(i)],
                      members[static_cast<std::size_t>(rng.uniform_int(0, i))]);
        for (std::size_t r = 0; r < members.size(); ++r)
            out.fold_of[static_cast<std::size_t>(members[r])] =
                static_cast<int>(r % static_cast<std::size_t>(k));
    }
    out.validate();
    return out;
}

std::int64_t ConfusionMatrix::total() const {
    return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
}

std::int64_t ConfusionMatrix::trace() const {
    std::int64_t t = 0;
    for (int c = 0; c < k; ++c) t += at(c, c);
    return t;
}

const char* average_mode_name(AverageMode mode) {
    switch (mode) {
        case AverageMode::Macro: return "macro";
        case AverageMode::Micro: return "micro";
        case AverageMode::Weighted: return "weighted";
    }
    return "macro";
}

AverageMode average_mode_from_name(const std::string& name) {
    if (name == "macro") return AverageMode::Macro;
    if (name == "micro") return AverageMode::Micro;
    if (name == "weighted") return AverageMode::Weighted;
    throw std::invalid_argument("unknown averaging mode '" + name +
                                "' (expected macro, micro, or weighted)");
}

MetricReport compute_metrics(const std::vector<int>& preds,
                             const std::vector<int>& labels, int k, AverageMode mode) {
    if (preds.size() != labels.size())
        throw std::invalid_argument("compute_metrics: prediction/label length mismatch");
    if (k < 2) throw std::invalid_argument("compute_metrics: k must be >= 2");
    if (preds.empty()) throw std::invalid_argument("compute_metrics: empty input");
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] < 0 || preds[i] >= k || labels[i] < 0 || labels[i] >= k)
            throw std::out_of_range("compute_metrics: class value outside [0, k)");

    MetricReport r;
    r.mode = mode;
    r.confusion.k = k;
    r.confusion.counts.assign(static_cast<std::size_t>(k) * k, 0);
    for (std::size_t i = 0; i < preds.size(); ++i)
        ++r.confusion.counts[static_cast<std::size_t>(labels[i]) * k + preds[i]];

    const std::int64_t total = r.confusion.total();
    r.accuracy = static_cast<double>(r.confusion.trace()) / total;

    r.per_class_precision.assign(static_cast<std::size_t>(k), 0.0);
    r.per_class_recall.assign(static_cast<std::size_t>(k), 0.0);
    r.per_class_f1.assign(static_cast<std::size_t>(k), 0.0);
    std::vector<std::int64_t> support(static_cast<std::size_t>(k), 0);
    for (int c = 0; c < k; ++c) {
        std::int64_t tp = r.confusion.at(c, c);
        std::int64_t pred_pos = 0, true_pos = 0;
        for (int o = 0; o < k; ++o) {
            pred_pos += r.confusion.at(o, c);
            true_pos += r.confusion.at(c, o);
        }
        support[static_cast<std::size_t>(c)] = true_pos;
        if (pred_pos == 0)
            log_info("compute_metrics: class " + std::to_string(c) +
                     " never predicted; precision set to 0");
        const double p = pred_pos > 0 ? static_cast<double>(tp) / pred_pos : 0.0;
        const double rec = true_pos > 0 ? static_cast<double>(tp) / true_pos : 0.0;
        r.per_class_precision[static_cast<std::size_t>(c)] = p;
        r.per_class_recall[static_cast<std::size_t>(c)] = rec;
        r.per_class_f1[static_cast<std::size_t>(c)] =
            p + rec > 0.0 ? 2.0 * p * rec / (p + rec) : 0.0;
    }

    switch (mode) {
        case AverageMode::Macro: {
            r.precision = std::accumulate(r.per_class_precision.begin(),
                                          r.per_class_precision.end(), 0.0) / k;
            r.recall = std::accumulate(r.per_class_recall.begin(),
                                       r.per_class_recall.end(), 0.0) / k;
            r.f1 = std::accumulate(r.per_class_f1.begin(), r.per_class_f1.end(), 0.0) / k;
            break;
        }
        case AverageMode::Micro: {
            // Single-label multi-class: micro precision == recall == accuracy.
            r.precision = r.accuracy;
            r.recall = r.accuracy;
            r.f1 = r.accuracy;
            break;
        }
        case AverageMode::Weighted: {
            double p = 0.0, rec = 0.0, f1 = 0.0;
            for (int c = 0; c < k; ++c) {
                const double wgt = static_cast<double>(support[static_cast<std::size_t>(c)]) / total;
                p += wgt * r.per_class_precision[static_cast<std::size_t>(c)];
                rec += wgt * r.per_class_recall[static_cast<std::size_t>(c)];
                f1 += wgt * r.per_class_f1[static_cast<std::size_t>(c)];
            }
            r.precision = p;
            r.recall = rec;
            r.f1 = f1;
            break;
        }
    }
    return r;
}

namespace {

json metric_report_json(const MetricReport& r) {
    json j;
    j["accuracy"] = r.accuracy;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f1_score"] = r.f1;
    j["average_mode"] = average_mode_name(r.mode);
    j["per_class"] = {{"precision", r.per_class_precision},
                      {"recall", r.per_class_recall},
                      {"f1_score", r.per_class_f1}};
    json rows = json::array();
    for (int t = 0; t < r.confusion.k; ++t) {
        json row = json::array();
        for (int p = 0; p < r.confusion.k; ++p) row.push_back(r.confusion.at(t, p));
        rows.push_back(row);
    }
    j["confusion"] = rows;
    return j;
}

} // namespace

std::string metric_report_to_json(const MetricReport& report) {
    return metric_report_json(report).dump(2) + "\n";
}

CvResult run_cv(const std::vector<DiagnoserCase>& cases, const FoldAssignment& folds,
                const DiagnoserConfig& cfg, const AugmentConfig& aug, int jobs) {
    folds.validate();
    cfg.validate();
    aug.validate();
    if (cases.size() != folds.case_ids.size())
        throw std::invalid_argument("run_cv: case count does not match fold assignment");
    for (std::size_t i = 0; i < cases.size(); ++i)
        if (cases[i].id != folds.case_ids[i])
            throw std::invalid_argument(
                "run_cv: case order does not match fold assignment (case '" +
                cases[i].id + "' vs '" + folds.case_ids[i] + "')");

    struct FoldSlot {
        FoldOutcome outcome;
        bool diverged = false;
        std::string note;
    };
    std::vector<FoldSlot> slots(static_cast<std::size_t>(folds.k));

    parallel_for(folds.k, jobs, [&](int f) {
        std::vector<DiagnoserCase> train_split;
        std::vector<std::size_t> test_idx;
        for (std::size_t i = 0; i < cases.size(); ++i) {
            if (folds.fold_of[i] == f)
                test_idx.push_back(i);
            else
                train_split.push_back(cases[i]);
        }
        if (train_split.empty() || test_idx.empty())
            throw std::invalid_argument("run_cv: fold " + std::to_string(f) +
                                        " has an empty train or test split");

        DiagnoserConfig fold_cfg = cfg;
        fold_cfg.seed = mix(cfg.seed, "cv-fold", static_cast<std::uint64_t>(f));
        AugmentConfig fold_aug = aug;
        fold_aug.seed = mix(aug.seed, "cv-fold-aug", static_cast<std::uint64_t>(f));

        FoldSlot& slot = slots[static_cast<std::size_t>(f)];
        slot.outcome.fold = f;
        slot.outcome.training = train_diagnoser(train_split, fold_cfg, fold_aug);
        if (slot.outcome.training.diverged) {
            slot.diverged = true;
            slot.note = "fold " + std::to_string(f) + ": " +
                        slot.outcome.training.diagnostics;
            return;
        }
        for (std::size_t i : test_idx) {
            const DiagnoserCase& c = cases[i];
            const Prediction p =
                predict_case(slot.outcome.training.params, fold_cfg, c.volume, c.mask);
            slot.outcome.test_ids.push_back(c.id);
            slot.outcome.test_labels.push_back(c.label);
            slot.outcome.test_preds.push_back(p.predicted);
        }
        slot.outcome.metrics = compute_metrics(slot.outcome.test_preds,
                                               slot.outcome.test_labels, cfg.k_classes);
    });

    CvResult out;
    out.averaged.mode = AverageMode::Macro;
    out.averaged.confusion.k = cfg.k_classes;
    out.averaged.confusion.counts.assign(
        static_cast<std::size_t>(cfg.k_classes) * cfg.k_classes, 0);
    int completed = 0;
    for (FoldSlot& slot : slots) {
        if (slot.diverged) {
            out.completed = false;
            out.diagnostics += (out.diagnostics.empty() ? "" : "; ") + slot.note;
            continue;
        }
        ++completed;
        out.averaged.accuracy += slot.outcome.metrics.accuracy;
        out.averaged.precision += slot.outcome.metrics.precision;
        out.averaged.recall += slot.outcome.metrics.recall;
        out.averaged.f1 += slot.outcome.metrics.f1;
        for (std::size_t i = 0; i < out.averaged.confusion.counts.size(); ++i)
            out.averaged.confusion.counts[i] += slot.outcome.metrics.confusion.counts[i];
        out.folds.push_back(std::move(slot.outcome));
    }
    if (completed > 0) {
        out.averaged.accuracy /= completed;
        out.averaged.precision /= completed;
        out.averaged.recall /= completed;
        out.averaged.f1 /= completed;
    }
    return out;
}

std::string cv_result_to_json(const CvResult& result) {
    json j;
    j["completed"] = result.completed;
    if (!result.diagnostics.empty()) j["diagnostics"] = result.diagnostics;
    j["averaged"] = metric_report_json(result.averaged);
    json folds = json::array();
    for (const FoldOutcome& f : result.folds) {
        json e;
        e["fold"] = f.fold;
        e["metrics"] = metric_report_json(f.metrics);
        e["test_ids"] = f.test_ids;
        e["test_labels"] = f.test_labels;
        e["test_preds"] = f.test_preds;
        folds.push_back(e);
    }
    j["folds"] = folds;
    return j.dump(2) + "\n";
}

AblationResult run_ablation(const std::vector<AblationCaseInputs>& cases,
                            const FoldAssignment& folds, const DiagnoserConfig& base,
                            const AugmentConfig& aug, int jobs) {
    struct RowPlan {
        const char* name;
        const char* mask_source;
        bool use_mca;
        bool mask_input;
    };
    static const RowPlan plans[] = {
        {"whole-brain mask, no attention", "whole-brain", false, true},
        {"coarse mask, no attention", "coarse", false, true},
        {"coarse mask + attention", "coarse", true, false},
        {"refined mask, no attention", "refined", false, true},
        {"refined mask + attention", "refined", true, false},
    };

    AblationResult out;
    for (const RowPlan& plan : plans) {
        std::vector<DiagnoserCase> row_cases;
        row_cases.reserve(cases.size());
        for (const AblationCaseInputs& c : cases) {
            DiagnoserCase d;
            d.id = c.id;
            d.label = c.label;
            d.volume = c.volume;
            d.mask = plan.mask_source == std::string("whole-brain") ? c.whole_brain
                     : plan.mask_source == std::string("coarse")    ? c.coarse
                                                                    : c.refined;
            row_cases.push_back(std::move(d));
        }
        DiagnoserConfig cfg = base;
        cfg.use_mca = plan.use_mca;
        cfg.mask_input = plan.mask_input;

        CvResult run = run_cv(row_cases, folds, cfg, aug, jobs);
        AblationRow row;
        row.name = plan.name;
        row.mask_source = plan.mask_source;
        row.use_mca = plan.use_mca;
        row.mask_input = plan.mask_input;
        row.metrics = run.averaged;
        out.rows.push_back(std::move(row));
        out.runs.push_back(std::move(run));
    }
    return out;
}

std::string ablation_to_csv(const AblationResult& result) {
    std::ostringstream csv;
    csv << "row,mask,attention,precision,recall,f1_score,accuracy\n";
    csv.setf(std::ios::fixed);
    csv.precision(6);
    for (std::size_t i = 0; i < result.rows.size(); ++i) {
        const AblationRow& r = result.rows[i];
        csv << (i + 1) << ',' << r.mask_source << ',' << (r.use_mca ? "yes" : "no")
            << ',' << r.metrics.precision << ',' << r.metrics.recall << ','
            << r.metrics.f1 << ',' << r.metrics.accuracy << '\n';
    }
    return csv.str();
}

std::string ablation_to_json(const AblationResult& result) {
    json rows = json::array();
    for (std::size_t i = 0; i < result.rows.size(); ++i) {
        const AblationRow& r = result.rows[i];
        json e;
        e["row"] = i + 1;
        e["name"] = r.name;
        e["mask"] = r.mask_source;
        e["attention"] = r.use_mca;
        e["mask_input"] = r.mask_input;
        e["metrics"] = metric_report_json(r.metrics);
        rows.push_back(e);
    }
    json j;
    j["rows"] = rows;
    return j.dump(2) + "\n";
}

GradCamResult grad_cam3d(const nn::ParamStore& params, const DiagnoserConfig& cfg,
                         const Volume& volume, const Mask& mask, int target_class) {
    cfg.validate();
    if (target_class < 0 || target_class >= cfg.k_classes)
        throw std::out_of_range("grad_cam3d: target class outside [0, K)");

    const Volume input = cfg.mask_input ? apply_input_mask(volume, mask) : volume;
    const Dims fd = cfg.feature_dims(input.dims());
    const Volume fmask = mask_to_feature_res(mask, fd);

    nn::Tape tape;
    ForwardHandles f = diagnoser_forward(tape, params, cfg, input, fmask,
                                         /*training=*/false, /*dropout_seed=*/0);
    std::vector<double> pick(static_cast<std::size_t>(cfg.k_classes), 0.0);
    pick[static_cast<std::size_t>(target_class)] = 1.0;
    nn::Tensor target_logit = nn::weighted_sum(f.logits, pick);
    tape.backward(target_logit);

    const int c = cfg.feature_channels();
    const std::int64_t spatial = fd.numel();
    const std::vector<double>& fgrad = f.feature.grad();
    const std::vector<double>& fval = f.feature.value();

    GradCamResult out;
    out.channel_weights.assign(static_cast<std::size_t>(c), 0.0);
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::int64_t v = 0; v < spatial; ++v)
            s += fgrad[static_cast<std::size_t>(ch) * spatial + v];
        out.channel_weights[static_cast<std::size_t>(ch)] = s / static_cast<double>(spatial);
    }

    std::vector<float> heat(static_cast<std::size_t>(spatial), 0.0f);
    for (std::int64_t v = 0; v < spatial; ++v) {
        double s = 0.0;
        for (int ch = 0; ch < c; ++ch)
            s += out.channel_weights[static_cast<std::size_t>(ch)] *
                 fval[static_cast<std::size_t>(ch) * spatial + v];
        heat[static_cast<std::size_t>(v)] = static_cast<float>(std::max(0.0, s));
    }
    out.feature_heat = Volume(fd, volume.spacing(), heat);

    float lo = heat[0], hi = heat[0];
    for (float h : heat) {
        lo = std::min(lo, h);
        hi = std::max(hi, h);
    }
    std::vector<float> norm(heat.size(), 0.0f);
    if (hi > lo)
        for (std::size_t v = 0; v < heat.size(); ++v) norm[v] = (heat[v] - lo) / (hi - lo);
    const Volume feature_norm(fd, volume.spacing(), std::move(norm));
    out.heatmap = PriorMap(resample_nearest(feature_norm, volume.dims()));
    return out;
}

SaliencyFocus saliency_focus(const PriorMap& heatmap, const Mask& reference) {
    if (heatmap.dims() != reference.dims())
        throw std::invalid_argument("saliency_focus: dims differ");
    SaliencyFocus out;
    double total = 0.0, inside = 0.0;
    const std::vector<float>& h = heatmap.volume().voxels();
    for (std::size_t v = 0; v < h.size(); ++v) {
        total += h[v];
        if (reference.bits()[v]) inside += h[v];
    }
    out.mass_fraction = total > 0.0 ? inside / total : 0.0;
    out.volume_fraction =
        static_cast<double>(reference.count()) / static_cast<double>(reference.numel());
    out.ratio = out.volume_fraction > 0.0 && total > 0.0
                    ? out.mass_fraction / out.volume_fraction
                    : 0.0;
    return out;
}

} // namespace vb
