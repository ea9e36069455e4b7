// Cross-validation harness: stratified folds, metric computation against
// hand-worked fixtures, the five-row mask/attention study, and saliency maps.
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vb/diagnoser.hpp"
#include "vb/eval.hpp"
#include "vb/phantom.hpp"
#include "vb/rng.hpp"
#include "vb/volume.hpp"

namespace {

vb::CohortManifest toy_manifest(const std::vector<int>& labels) {
    vb::CohortManifest m;
    int k = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        vb::CaseRecord r;
        r.case_id = "case_" + std::to_string(i);
        r.class_label = labels[static_cast<std::size_t>(i)];
        r.volume_path = r.case_id + ".vbv";
        r.gt_mask_path = r.case_id + "_gt.vbm";
        k = std::max(k, labels[i] + 1);
        m.cases.push_back(std::move(r));
    }
    m.k_classes = k;
    return m;
}

// Tiny two-class cohort with a bright/dim centre cube (same construction as
// the classifier tests, small enough for multi-fold training in seconds).
std::vector<vb::DiagnoserCase> toy_cases(int n, vb::Dims dims = {8, 8, 8}) {
    std::vector<vb::DiagnoserCase> cases;
    for (int idx = 0; idx < n; ++idx) {
        const int label = idx % 2;
        vb::Rng rng(3000 + static_cast<std::uint64_t>(idx));
        vb::Volume v = vb::Volume::filled(dims, 0.1f);
        vb::Mask m = vb::Mask::filled(dims, 0);
        for (float& x : v.voxels()) x += 0.01f * static_cast<float>(rng.normal());
        const float lesion = label == 0 ? 0.9f : 0.35f;
        for (int d = 2; d < 6; ++d)
            for (int i = 2; i < 6; ++i)
                for (int j = 2; j < 6; ++j) {
                    v(d, i, j) = lesion + 0.01f * static_cast<float>(rng.normal());
                    m(d, i, j) = 1;
                }
        cases.push_back({"case_" + std::to_string(idx), std::move(v), std::move(m), label});
    }
    return cases;
}

vb::DiagnoserConfig tiny_config() {
    vb::DiagnoserConfig cfg;
    cfg.backbone = {{4, 2}, {8, 2}};
    cfg.mca_hidden = 4;
    cfg.k_classes = 2;
    cfg.epochs = 4;
    cfg.lr = 0.01;
    cfg.warm_restart_t0 = 4;
    cfg.dropout_p = 0.0;
    cfg.seed = 7;
    return cfg;
}

vb::AugmentConfig no_augment() {
    vb::AugmentConfig aug;
    aug.rot90_p = 0.0;
    aug.flip_p = 0.0;
    aug.noise_p = 0.0;
    aug.gamma_p = 0.0;
    return aug;
}

vb::FoldAssignment even_odd_folds(const std::vector<vb::DiagnoserCase>& cases) {
    vb::FoldAssignment folds;
    folds.k = 2;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        folds.case_ids.push_back(cases[i].id);
        folds.fold_of.push_back(static_cast<int>(i / 2) % 2);
    }
    return folds;
}

} // namespace

TEST_CASE("stratified folds partition every class with spread at most one") {
    // 23 cases over 3 classes: counts 8, 8, 7.
    std::vector<int> labels;
    for (int i = 0; i < 23; ++i) labels.push_back(i % 3);
    const vb::CohortManifest manifest = toy_manifest(labels);
    const vb::FoldAssignment folds = vb::stratified_kfold(manifest, 4, 99);
    folds.validate();
    CHECK(folds.k == 4);
    REQUIRE(folds.case_ids.size() == 23);
    REQUIRE(folds.fold_of.size() == 23);

    // Every case lands in exactly one fold (fold_of is total), and per-class
    // fold counts differ by at most one.
    std::map<int, std::vector<int>> per_class_fold_counts;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& counts = per_class_fold_counts[labels[i]];
        counts.resize(4, 0);
        ++counts[static_cast<std::size_t>(folds.fold_of[i])];
    }
    for (const auto& [cls, counts] : per_class_fold_counts) {
        CAPTURE(cls);
        const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
        CHECK(*hi - *lo <= 1);
    }

    SUBCASE("assignment is deterministic in the seed") {
        const vb::FoldAssignment again = vb::stratified_kfold(manifest, 4, 99);
        CHECK(again.fold_of == folds.fold_of);
        const vb::FoldAssignment other = vb::stratified_kfold(manifest, 4, 100);
        CHECK(other.fold_of != folds.fold_of);
    }
    SUBCASE("a class smaller than k is rejected") {
        std::vector<int> thin = labels;
        thin.push_back(3); // class 3 has a single case, k = 4
        CHECK_THROWS_AS(vb::stratified_kfold(toy_manifest(thin), 4, 1),
                        std::invalid_argument);
    }
    SUBCASE("k below 2 and empty manifests are rejected") {
        CHECK_THROWS_AS(vb::stratified_kfold(manifest, 1, 1), std::invalid_argument);
        CHECK_THROWS_AS(vb::stratified_kfold(vb::CohortManifest{}, 2, 1),
                        std::invalid_argument);
    }
}

TEST_CASE("fold assignment validation and JSON round-trip") {
    vb::FoldAssignment f;
    f.k = 3;
    f.case_ids = {"a", "b", "c", "d", "e", "f"};
    f.fold_of = {0, 1, 2, 0, 1, 2};
    f.validate();

    const vb::FoldAssignment back =
        vb::fold_assignment_from_json(vb::fold_assignment_to_json(f));
    CHECK(back.k == f.k);
    CHECK(back.case_ids == f.case_ids);
    CHECK(back.fold_of == f.fold_of);

    vb::FoldAssignment bad = f;
    bad.k = 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = f;
    bad.fold_of[2] = 3; // out of range for k = 3
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = f;
    bad.fold_of.pop_back();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = f;
    bad.case_ids[1] = "a"; // duplicate id
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK_THROWS_AS(vb::fold_assignment_from_json("{\"k\": 2, \"folds\": []}"),
                    std::invalid_argument);
}

TEST_CASE("compute_metrics reproduces the hand-worked two-class fixture") {
    // Confusion (rows = truth): [[3, 1], [2, 4]].
    std::vector<int> labels, preds;
    auto add = [&](int t, int p, int n) {
        for (int i = 0; i < n; ++i) {
            labels.push_back(t);
            preds.push_back(p);
        }
    };
    add(0, 0, 3);
    add(0, 1, 1);
    add(1, 0, 2);
    add(1, 1, 4);

    const vb::MetricReport macro = vb::compute_metrics(preds, labels, 2);
    CHECK(macro.confusion.at(0, 0) == 3);
    CHECK(macro.confusion.at(0, 1) == 1);
    CHECK(macro.confusion.at(1, 0) == 2);
    CHECK(macro.confusion.at(1, 1) == 4);
    CHECK(macro.confusion.total() == 10);
    CHECK(macro.confusion.trace() == 7);
    CHECK(macro.accuracy == doctest::Approx(0.7).epsilon(1e-15));
    // Class 0: P = 3/5, R = 3/4, F1 = 2/3. Class 1: P = 4/5, R = 2/3, F1 = 8/11.
    CHECK(macro.per_class_precision[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(macro.per_class_recall[0] == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(macro.per_class_f1[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(macro.per_class_precision[1] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(macro.per_class_recall[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(macro.per_class_f1[1] == doctest::Approx(8.0 / 11.0).epsilon(1e-15));
    CHECK(macro.precision == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(macro.recall == doctest::Approx((0.75 + 2.0 / 3.0) / 2.0).epsilon(1e-15));
    CHECK(macro.f1 == doctest::Approx(23.0 / 33.0).epsilon(1e-15));

    SUBCASE("micro averaging collapses to accuracy for single-label data") {
        const vb::MetricReport micro =
            vb::compute_metrics(preds, labels, 2, vb::AverageMode::Micro);
        CHECK(micro.precision == micro.accuracy);
        CHECK(micro.recall == micro.accuracy);
        CHECK(micro.f1 == micro.accuracy);
        CHECK(micro.accuracy == doctest::Approx(0.7).epsilon(1e-15));
    }
    SUBCASE("weighted averaging uses class support") {
        const vb::MetricReport w =
            vb::compute_metrics(preds, labels, 2, vb::AverageMode::Weighted);
        CHECK(w.precision == doctest::Approx(0.4 * 0.6 + 0.6 * 0.8).epsilon(1e-15));
        CHECK(w.recall == doctest::Approx(0.4 * 0.75 + 0.6 * 2.0 / 3.0).epsilon(1e-15));
        CHECK(w.f1 ==
              doctest::Approx(0.4 * 2.0 / 3.0 + 0.6 * 8.0 / 11.0).epsilon(1e-15));
    }
    SUBCASE("perfect predictions score one across the board") {
        const vb::MetricReport perfect =
            vb::compute_metrics({0, 1, 2, 0, 1, 2}, {0, 1, 2, 0, 1, 2}, 3);
        CHECK(perfect.accuracy == 1.0);
        CHECK(perfect.precision == 1.0);
        CHECK(perfect.recall == 1.0);
        CHECK(perfect.f1 == 1.0);
        for (double v : perfect.per_class_f1) CHECK(v == 1.0);
    }
    SUBCASE("a never-predicted class gets precision zero, not NaN") {
        const vb::MetricReport r = vb::compute_metrics({0, 0, 0, 0}, {0, 0, 1, 1}, 2);
        CHECK(r.per_class_precision[1] == 0.0);
        CHECK(r.per_class_recall[1] == 0.0);
        CHECK(r.per_class_f1[1] == 0.0);
        CHECK(std::isfinite(r.f1));
    }
    SUBCASE("malformed input is rejected") {
        CHECK_THROWS_AS(vb::compute_metrics({0, 1}, {0}, 2), std::invalid_argument);
        CHECK_THROWS_AS(vb::compute_metrics({}, {}, 2), std::invalid_argument);
        CHECK_THROWS_AS(vb::compute_metrics({0}, {0}, 1), std::invalid_argument);
        CHECK_THROWS_AS(vb::compute_metrics({2}, {0}, 2), std::out_of_range);
        CHECK_THROWS_AS(vb::compute_metrics({0}, {-1}, 2), std::out_of_range);
    }
    SUBCASE("averaging-mode names round-trip and reject unknowns") {
        CHECK(vb::average_mode_from_name("macro") == vb::AverageMode::Macro);
        CHECK(vb::average_mode_from_name("micro") == vb::AverageMode::Micro);
        CHECK(vb::average_mode_from_name("weighted") == vb::AverageMode::Weighted);
        CHECK(vb::average_mode_name(vb::AverageMode::Weighted) ==
              std::string("weighted"));
        CHECK_THROWS_AS(vb::average_mode_from_name("mean"), std::invalid_argument);
    }
}

TEST_CASE("run_cv: fold bookkeeping, averaging, and determinism") {
    const std::vector<vb::DiagnoserCase> cases = toy_cases(8);
    const vb::FoldAssignment folds = even_odd_folds(cases);
    const vb::DiagnoserConfig cfg = tiny_config();

    const vb::CvResult res = vb::run_cv(cases, folds, cfg, no_augment());
    CHECK(res.completed);
    REQUIRE(res.folds.size() == 2);

    // The two test splits partition the cohort exactly.
    std::set<std::string> seen;
    for (const vb::FoldOutcome& f : res.folds) {
        CHECK(f.test_ids.size() == 4);
        CHECK(f.metrics.confusion.total() == 4);
        for (const std::string& id : f.test_ids) CHECK(seen.insert(id).second);
    }
    CHECK(seen.size() == 8);

    // Averaged scalars are the mean over folds; confusions are summed.
    CHECK(res.averaged.accuracy ==
          doctest::Approx((res.folds[0].metrics.accuracy +
                           res.folds[1].metrics.accuracy) / 2.0).epsilon(1e-15));
    CHECK(res.averaged.confusion.total() == 8);

    SUBCASE("serial and threaded fold execution agree bit for bit") {
        const vb::CvResult par = vb::run_cv(cases, folds, cfg, no_augment(), 2);
        REQUIRE(par.folds.size() == res.folds.size());
        for (std::size_t f = 0; f < res.folds.size(); ++f) {
            CHECK(par.folds[f].test_preds == res.folds[f].test_preds);
            CHECK(par.folds[f].metrics.accuracy == res.folds[f].metrics.accuracy);
        }
        CHECK(par.averaged.accuracy == res.averaged.accuracy);
    }
    SUBCASE("case order must match the fold assignment") {
        std::vector<vb::DiagnoserCase> shuffled = cases;
        std::swap(shuffled[0], shuffled[1]);
        CHECK_THROWS_AS(vb::run_cv(shuffled, folds, cfg, no_augment()),
                        std::invalid_argument);
    }
    SUBCASE("case count must match the fold assignment") {
        std::vector<vb::DiagnoserCase> short_list(cases.begin(), cases.end() - 1);
        CHECK_THROWS_AS(vb::run_cv(short_list, folds, cfg, no_augment()),
                        std::invalid_argument);
    }
    SUBCASE("result serialisation carries folds and averages") {
        const std::string j = vb::cv_result_to_json(res);
        CHECK(j.find("\"completed\": true") != std::string::npos);
        CHECK(j.find("\"folds\"") != std::string::npos);
        CHECK(j.find("\"averaged\"") != std::string::npos);
        CHECK(j.find("case_0") != std::string::npos);
    }
}

TEST_CASE("run_cv quarantines diverged folds instead of failing the run") {
    const std::vector<vb::DiagnoserCase> cases = toy_cases(8);
    const vb::FoldAssignment folds = even_odd_folds(cases);
    vb::DiagnoserConfig cfg = tiny_config();
    cfg.epochs = 30;
    cfg.batch = 1;
    cfg.accum_steps = 1;
    cfg.lr = 1e10; // forces non-finite loss quickly
    cfg.weight_decay = 1.0;
    cfg.clip_norm = 1e9;

    const vb::CvResult res = vb::run_cv(cases, folds, cfg, no_augment());
    CHECK_FALSE(res.completed);
    CHECK_FALSE(res.diagnostics.empty());
    CHECK(res.folds.size() < 2); // diverged folds are excluded from the average
}

TEST_CASE("the five-row mask/attention study runs in fixed order") {
    const std::vector<vb::DiagnoserCase> base_cases = toy_cases(8);
    std::vector<vb::AblationCaseInputs> inputs;
    for (const vb::DiagnoserCase& c : base_cases) {
        vb::AblationCaseInputs in;
        in.id = c.id;
        in.label = c.label;
        in.volume = c.volume;
        in.whole_brain = vb::Mask::filled(c.volume.dims(), 1);
        in.coarse = c.mask;
        in.refined = c.mask;
        inputs.push_back(std::move(in));
    }
    const vb::FoldAssignment folds = even_odd_folds(base_cases);
    vb::DiagnoserConfig cfg = tiny_config();
    cfg.epochs = 2;

    const vb::AblationResult res = vb::run_ablation(inputs, folds, cfg, no_augment());
    REQUIRE(res.rows.size() == 5);
    REQUIRE(res.runs.size() == 5);

    const char* names[] = {"whole-brain mask, no attention", "coarse mask, no attention",
                           "coarse mask + attention", "refined mask, no attention",
                           "refined mask + attention"};
    const char* sources[] = {"whole-brain", "coarse", "coarse", "refined", "refined"};
    const bool attention[] = {false, false, true, false, true};
    for (std::size_t r = 0; r < 5; ++r) {
        CAPTURE(r);
        CHECK(res.rows[r].name == names[r]);
        CHECK(res.rows[r].mask_source == sources[r]);
        CHECK(res.rows[r].use_mca == attention[r]);
        CHECK(res.rows[r].mask_input == !attention[r]);
        CHECK(res.rows[r].metrics.accuracy >= 0.0);
        CHECK(res.rows[r].metrics.accuracy <= 1.0);
        CHECK(res.runs[r].folds.size() == 2);
    }

    SUBCASE("CSV rendering has the fixed header and one line per row") {
        const std::string csv = vb::ablation_to_csv(res);
        CHECK(csv.rfind("row,mask,attention,precision,recall,f1_score,accuracy\n", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
        CHECK(csv.find("1,whole-brain,no,") != std::string::npos);
        CHECK(csv.find("3,coarse,yes,") != std::string::npos);
        CHECK(csv.find("5,refined,yes,") != std::string::npos);
    }
    SUBCASE("JSON rendering carries the row plan") {
        const std::string j = vb::ablation_to_json(res);
        CHECK(j.find("whole-brain mask, no attention") != std::string::npos);
        CHECK(j.find("refined mask + attention") != std::string::npos);
    }
}

TEST_CASE("saliency maps: range, upsampling, and gradient provenance") {
    vb::DiagnoserConfig cfg = tiny_config();
    cfg.k_classes = 3;
    vb::nn::ParamStore params;
    vb::init_diagnoser_params(params, cfg);

    const vb::Dims dims{8, 8, 8};
    vb::Rng rng(404);
    std::vector<float> vals(static_cast<std::size_t>(dims.numel()));
    for (float& v : vals) v = 0.2f + 0.6f * static_cast<float>(rng.uniform());
    const vb::Volume volume(dims, vb::Spacing{}, std::move(vals));
    vb::Mask mask = vb::Mask::filled(dims, 0);
    for (int d = 2; d < 6; ++d)
        for (int i = 2; i < 6; ++i)
            for (int j = 2; j < 6; ++j) mask(d, i, j) = 1;

    const vb::GradCamResult cam = vb::grad_cam3d(params, cfg, volume, mask, 1);
    CHECK(cam.heatmap.dims() == dims);
    CHECK(cam.channel_weights.size() == 8);
    float lo = 1.0f, hi = 0.0f;
    for (float h : cam.heatmap.volume().voxels()) {
        lo = std::min(lo, h);
        hi = std::max(hi, h);
    }
    CHECK(lo >= 0.0f);
    CHECK(hi <= 1.0f);
    REQUIRE(hi > 0.0f); // non-degenerate for this seed
    CHECK(hi == 1.0f);  // min-max normalised
    CHECK(lo == 0.0f);

    SUBCASE("volume-resolution heatmap is block-constant at feature cells") {
        // Feature grid is 2x2x2, so the nearest-upsampled map is constant on
        // each 4^3 block.
        for (int bd = 0; bd < 2; ++bd)
            for (int bi = 0; bi < 2; ++bi)
                for (int bj = 0; bj < 2; ++bj) {
                    const float ref = cam.heatmap.volume()(bd * 4, bi * 4, bj * 4);
                    for (int d = 0; d < 4; ++d)
                        for (int i = 0; i < 4; ++i)
                            for (int j = 0; j < 4; ++j)
                                CHECK(cam.heatmap.volume()(bd * 4 + d, bi * 4 + i,
                                                           bj * 4 + j) == ref);
                }
    }
    SUBCASE("shifting the target-class bias leaves the heatmap untouched") {
        vb::nn::ParamStore shifted;
        vb::init_diagnoser_params(shifted, cfg);
        shifted.by_name("head.bias").value[1] += 5.0;
        const vb::GradCamResult cam2 = vb::grad_cam3d(shifted, cfg, volume, mask, 1);
        CHECK(cam2.heatmap.volume().voxels() == cam.heatmap.volume().voxels());
        CHECK(cam2.channel_weights == cam.channel_weights);
    }
    SUBCASE("a head that ignores the features yields an all-zero heatmap") {
        vb::nn::ParamStore blind;
        vb::init_diagnoser_params(blind, cfg);
        std::fill(blind.by_name("head.weight").value.begin(),
                  blind.by_name("head.weight").value.end(), 0.0);
        const vb::GradCamResult flat = vb::grad_cam3d(blind, cfg, volume, mask, 1);
        for (double w : flat.channel_weights) CHECK(w == 0.0);
        for (float h : flat.heatmap.volume().voxels()) CHECK(h == 0.0f);
        for (float h : flat.feature_heat.voxels()) CHECK(h == 0.0f);
    }
    SUBCASE("the target class must be in range") {
        CHECK_THROWS_AS(vb::grad_cam3d(params, cfg, volume, mask, 3), std::out_of_range);
        CHECK_THROWS_AS(vb::grad_cam3d(params, cfg, volume, mask, -1), std::out_of_range);
    }
}

TEST_CASE("saliency focus ratios from a hand-worked fixture") {
    const vb::Dims dims{1, 1, 4};
    const vb::PriorMap heat(vb::Volume(dims, vb::Spacing{}, {0.5f, 0.5f, 0.0f, 0.0f}));
    const vb::Mask ref(dims, vb::Spacing{}, {1, 0, 0, 0});
    const vb::SaliencyFocus f = vb::saliency_focus(heat, ref);
    CHECK(f.mass_fraction == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(f.volume_fraction == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(f.ratio == doctest::Approx(2.0).epsilon(1e-15));

    SUBCASE("degenerate inputs give zero ratios, not NaN") {
        const vb::PriorMap zero(vb::Volume::filled(dims, 0.0f));
        CHECK(vb::saliency_focus(zero, ref).mass_fraction == 0.0);
        CHECK(vb::saliency_focus(zero, ref).ratio == 0.0);
        const vb::Mask empty = vb::Mask::filled(dims, 0);
        CHECK(vb::saliency_focus(heat, empty).volume_fraction == 0.0);
        CHECK(vb::saliency_focus(heat, empty).ratio == 0.0);
    }
    SUBCASE("dimension mismatch throws") {
        const vb::Mask wrong = vb::Mask::filled({1, 1, 5}, 1);
        CHECK_THROWS_AS(vb::saliency_focus(heat, wrong), std::invalid_argument);
    }
    SUBCASE("a mask-concentrated heatmap scores the full ratio") {
        // All mass inside a quarter-volume mask: ratio = 1 / 0.25 = 4.
        const vb::PriorMap spike(vb::Volume(dims, vb::Spacing{}, {1.0f, 0.0f, 0.0f, 0.0f}));
        CHECK(vb::saliency_focus(spike, ref).ratio == doctest::Approx(4.0).epsilon(1e-15));
    }
}
