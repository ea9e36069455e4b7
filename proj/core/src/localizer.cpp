#include "vb/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include <nlohmann/json.hpp>

#include "vb/log.hpp"
#include "vb/rng.hpp"

namespace vb {

namespace {

using nlohmann::json;

std::int64_t flat_index(const Dims& dims, int d, int i, int j) {
    return (static_cast<std::int64_t>(d) * dims.h + i) * dims.w + j;
}

} // namespace

void PriorConfig::validate() const {
    auto in_unit = [](double v) { return v > 0.0 && v < 1.0; };
    if (!in_unit(tau_pos) || !in_unit(tau_neg) || !in_unit(tau_bin))
        throw std::invalid_argument("prior config: thresholds must lie in (0, 1)");
    if (!(tau_neg < tau_bin && tau_bin <= tau_pos))
        throw std::invalid_argument(
            "prior config: thresholds must satisfy tau_neg < tau_bin <= tau_pos");
    if (!(gaussian_sigma > 0.0))
        throw std::invalid_argument("prior config: gaussian_sigma must be positive");
    if (dilation_radius < 0)
        throw std::invalid_argument("prior config: dilation_radius must be >= 0");
    if (mlp_hidden <= 0)
        throw std::invalid_argument("prior config: mlp_hidden must be positive");
    if (mlp_epochs < 0)
        throw std::invalid_argument("prior config: mlp_epochs must be >= 0");
    if (neg_sample_ratio < 0.0)
        throw std::invalid_argument("prior config: neg_sample_ratio must be >= 0");
    if (!(mlp_lr > 0.0))
        throw std::invalid_argument("prior config: mlp_lr must be positive");
}

std::string prior_config_to_json(const PriorConfig& cfg) {
    json j;
    j["gaussian_sigma"] = cfg.gaussian_sigma;
    j["dilation_radius"] = cfg.dilation_radius;
    j["tau_pos"] = cfg.tau_pos;
    j["tau_neg"] = cfg.tau_neg;
    j["tau_bin"] = cfg.tau_bin;
    j["mlp_hidden"] = cfg.mlp_hidden;
    j["mlp_epochs"] = cfg.mlp_epochs;
    j["neg_sample_ratio"] = cfg.neg_sample_ratio;
    j["mlp_lr"] = cfg.mlp_lr;
    j["seed"] = cfg.seed;
    return j.dump();
}

PriorConfig prior_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    static const char* known[] = {"gaussian_sigma", "dilation_radius", "tau_pos",
                                  "tau_neg",        "tau_bin",         "mlp_hidden",
                                  "mlp_epochs",     "neg_sample_ratio", "mlp_lr",
                                  "seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok)
            throw std::invalid_argument("unknown key '" + it.key() +
                                        "' in localizer config");
    }
    PriorConfig cfg;
    if (j.contains("gaussian_sigma")) cfg.gaussian_sigma = j.at("gaussian_sigma").get<double>();
    if (j.contains("dilation_radius")) cfg.dilation_radius = j.at("dilation_radius").get<int>();
    if (j.contains("tau_pos")) cfg.tau_pos = j.at("tau_pos").get<double>();
    if (j.contains("tau_neg")) cfg.tau_neg = j.at("tau_neg").get<double>();
    if (j.contains("tau_bin")) cfg.tau_bin = j.at("tau_bin").get<double>();
    if (j.contains("mlp_hidden")) cfg.mlp_hidden = j.at("mlp_hidden").get<int>();
    if (j.contains("mlp_epochs")) cfg.mlp_epochs = j.at("mlp_epochs").get<int>();
    if (j.contains("neg_sample_ratio")) cfg.neg_sample_ratio = j.at("neg_sample_ratio").get<double>();
    if (j.contains("mlp_lr")) cfg.mlp_lr = j.at("mlp_lr").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.validate();
    return cfg;
}

VoxelFeature voxel_feature(const Volume& v, int d, int i, int j) {
    const Dims dims = v.dims();
    VoxelFeature f;
    f.intensity = v(d, i, j);
    double sum = 0.0, sum_sq = 0.0;
    int count = 0;
    for (int dd = std::max(0, d - 1); dd <= std::min(dims.d - 1, d + 1); ++dd)
        for (int ii = std::max(0, i - 1); ii <= std::min(dims.h - 1, i + 1); ++ii)
            for (int jj = std::max(0, j - 1); jj <= std::min(dims.w - 1, j + 1); ++jj) {
                const double x = v(dd, ii, jj);
                sum += x;
                sum_sq += x * x;
                ++count;
            }
    f.local_mean_3 = sum / count;
    f.local_std_3 = std::sqrt(std::max(0.0, sum_sq / count - f.local_mean_3 * f.local_mean_3));
    f.norm_coords = {static_cast<double>(d) / dims.d, static_cast<double>(i) / dims.h,
                     static_cast<double>(j) / dims.w};
    return f;
}

Volume stack_boxes(const std::vector<BoxPrediction>& preds, Dims dims) {
    Volume occ = Volume::filled(dims, 0.0f);
    for (const BoxPrediction& b : preds) {
        if (b.slice_index < 0 || b.slice_index >= dims.d)
            throw std::out_of_range("stack_boxes: slice_index " +
                                    std::to_string(b.slice_index) +
                                    " outside [0, " + std::to_string(dims.d) + ")");
        if (b.x0 < 0 || b.x1 > dims.w || b.y0 < 0 || b.y1 > dims.h || b.x0 >= b.x1 ||
            b.y0 >= b.y1)
            throw std::out_of_range("stack_boxes: box out of bounds or degenerate");
        for (int i = b.y0; i < b.y1; ++i)
            for (int j = b.x0; j < b.x1; ++j) occ(b.slice_index, i, j) = 1.0f;
    }
    return occ;
}

namespace detail {

std::vector<double> gaussian_kernel_1d(double sigma) {
    if (!(sigma > 0.0))
        throw std::invalid_argument("gaussian kernel: sigma must be positive");
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int t = -radius; t <= radius; ++t) {
        const double v = std::exp(-0.5 * (t / sigma) * (t / sigma));
        k[static_cast<std::size_t>(t + radius)] = v;
        total += v;
    }
    for (double& v : k) v /= total;
    return k;
}

Volume dilate_ball(const Volume& occupancy, int radius) {
    if (radius < 0) throw std::invalid_argument("dilate_ball: radius must be >= 0");
    const Dims dims = occupancy.dims();
    std::vector<std::uint8_t> cur(static_cast<std::size_t>(dims.numel()));
    for (std::size_t v = 0; v < cur.size(); ++v)
        cur[v] = occupancy.voxels()[v] != 0.0f ? 1 : 0;
    std::vector<std::uint8_t> next(cur.size());
    for (int step = 0; step < radius; ++step) {
        for (int d = 0; d < dims.d; ++d)
            for (int i = 0; i < dims.h; ++i)
                for (int j = 0; j < dims.w; ++j) {
                    const std::int64_t at = flat_index(dims, d, i, j);
                    std::uint8_t on = cur[static_cast<std::size_t>(at)];
                    if (!on && d > 0) on = cur[static_cast<std::size_t>(flat_index(dims, d - 1, i, j))];
                    if (!on && d + 1 < dims.d) on = cur[static_cast<std::size_t>(flat_index(dims, d + 1, i, j))];
                    if (!on && i > 0) on = cur[static_cast<std::size_t>(flat_index(dims, d, i - 1, j))];
                    if (!on && i + 1 < dims.h) on = cur[static_cast<std::size_t>(flat_index(dims, d, i + 1, j))];
                    if (!on && j > 0) on = cur[static_cast<std::size_t>(flat_index(dims, d, i, j - 1))];
                    if (!on && j + 1 < dims.w) on = cur[static_cast<std::size_t>(flat_index(dims, d, i, j + 1))];
                    next[static_cast<std::size_t>(at)] = on;
                }
        std::swap(cur, next);
    }
    Volume out = Volume::filled(dims, 0.0f, occupancy.spacing());
    for (std::size_t v = 0; v < cur.size(); ++v)
        out.voxels()[v] = cur[v] ? 1.0f : 0.0f;
    return out;
}

namespace {

// One zero-padded 1D convolution pass along the given axis (0=d, 1=i, 2=j),
// in double precision.
void smooth_axis(const Dims& dims, const std::vector<double>& kernel, int axis,
                 const std::vector<double>& in, std::vector<double>& out) {
    const int radius = static_cast<int>(kernel.size() / 2);
    const int extent = axis == 0 ? dims.d : axis == 1 ? dims.h : dims.w;
    for (int d = 0; d < dims.d; ++d)
        for (int i = 0; i < dims.h; ++i)
            for (int j = 0; j < dims.w; ++j) {
                const int pos = axis == 0 ? d : axis == 1 ? i : j;
                double acc = 0.0;
                const int lo = std::max(-radius, -pos);
                const int hi = std::min(radius, extent - 1 - pos);
                for (int t = lo; t <= hi; ++t) {
                    const std::int64_t src =
                        axis == 0 ? flat_index(dims, d + t, i, j)
                        : axis == 1 ? flat_index(dims, d, i + t, j)
                                    : flat_index(dims, d, i, j + t);
                    acc += kernel[static_cast<std::size_t>(t + radius)] *
                           in[static_cast<std::size_t>(src)];
                }
                out[static_cast<std::size_t>(flat_index(dims, d, i, j))] = acc;
            }
}

Volume from_double(const Dims& dims, const Spacing& spacing,
                   const std::vector<double>& vals) {
    std::vector<float> f(vals.size());
    for (std::size_t v = 0; v < vals.size(); ++v) f[v] = static_cast<float>(vals[v]);
    return Volume(dims, spacing, std::move(f));
}

} // namespace

Volume gaussian_smooth_separable(const Volume& v, double sigma) {
    const std::vector<double> kernel = gaussian_kernel_1d(sigma);
    const Dims dims = v.dims();
    std::vector<double> a(v.voxels().begin(), v.voxels().end());
    std::vector<double> b(a.size());
    smooth_axis(dims, kernel, 0, a, b);
    smooth_axis(dims, kernel, 1, b, a);
    smooth_axis(dims, kernel, 2, a, b);
    return from_double(dims, v.spacing(), b);
}

Volume gaussian_smooth_dense(const Volume& v, double sigma) {
    const std::vector<double> kernel = gaussian_kernel_1d(sigma);
    const int radius = static_cast<int>(kernel.size() / 2);
    const Dims dims = v.dims();
    std::vector<double> in(v.voxels().begin(), v.voxels().end());
    std::vector<double> out(in.size(), 0.0);
    for (int d = 0; d < dims.d; ++d)
        for (int i = 0; i < dims.h; ++i)
            for (int j = 0; j < dims.w; ++j) {
                double acc = 0.0;
                for (int td = -radius; td <= radius; ++td) {
                    if (d + td < 0 || d + td >= dims.d) continue;
                    for (int ti = -radius; ti <= radius; ++ti) {
                        if (i + ti < 0 || i + ti >= dims.h) continue;
                        for (int tj = -radius; tj <= radius; ++tj) {
                            if (j + tj < 0 || j + tj >= dims.w) continue;
                            const double wgt = kernel[static_cast<std::size_t>(td + radius)] *
                                               kernel[static_cast<std::size_t>(ti + radius)] *
                                               kernel[static_cast<std::size_t>(tj + radius)];
                            acc += wgt * in[static_cast<std::size_t>(
                                       flat_index(dims, d + td, i + ti, j + tj))];
                        }
                    }
                }
                out[static_cast<std::size_t>(flat_index(dims, d, i, j))] = acc;
            }
    return from_double(dims, v.spacing(), out);
}

nn::Tensor refine_mlp_loss(nn::Tape& tape, nn::Tensor x,
                           const std::vector<double>& targets, nn::Tensor w1,
                           nn::Tensor b1, nn::Tensor w2, nn::Tensor b2) {
    (void)tape; // all tensors already live on it; kept for call-site clarity
    const int n = x.shape().at(0);
    nn::Tensor hidden = nn::relu(nn::linear(x, w1, b1));
    nn::Tensor logits = nn::reshape(nn::linear(hidden, w2, b2), {n});
    return nn::bce_with_logits(logits, targets);
}

} // namespace detail

PriorMap smooth_and_dilate(const Volume& occupancy, const PriorConfig& cfg) {
    cfg.validate();
    Volume dilated = detail::dilate_ball(occupancy, cfg.dilation_radius);
    Volume smooth = detail::gaussian_smooth_separable(dilated, cfg.gaussian_sigma);
    float max_val = 0.0f;
    for (float v : smooth.voxels()) max_val = std::max(max_val, v);
    if (max_val > 0.0f)
        for (float& v : smooth.voxels()) v /= max_val;
    return PriorMap(std::move(smooth));
}

PseudoLabels extract_pseudo_labels(const PriorMap& prior, const PriorConfig& cfg) {
    cfg.validate();
    const std::vector<float>& vals = prior.volume().voxels();
    PseudoLabels out;
    std::vector<std::int64_t> neg_pool;
    for (std::size_t v = 0; v < vals.size(); ++v) {
        if (vals[v] > cfg.tau_pos)
            out.positives.push_back(static_cast<std::int64_t>(v));
        else if (vals[v] < cfg.tau_neg)
            neg_pool.push_back(static_cast<std::int64_t>(v));
    }
    if (out.positives.empty())
        throw LocalizationFailure("no prior voxel exceeds tau_pos=" +
                                  std::to_string(cfg.tau_pos));
    std::size_t want = static_cast<std::size_t>(std::llround(
        cfg.neg_sample_ratio * static_cast<double>(out.positives.size())));
    want = std::min(want, neg_pool.size());
    Rng rng(mix(cfg.seed, "pseudo-neg"));
    for (std::size_t k = 0; k < want; ++k) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(
            static_cast<int>(k), static_cast<int>(neg_pool.size()) - 1));
        std::swap(neg_pool[k], neg_pool[j]);
    }
    out.negatives.assign(neg_pool.begin(), neg_pool.begin() + static_cast<std::ptrdiff_t>(want));
    std::sort(out.negatives.begin(), out.negatives.end());
    return out;
}

double RefineModel::logit(const VoxelFeature& f) const {
    const std::array<double, VoxelFeature::kDim> x = f.flat();
    double out = b2[0];
    for (int k = 0; k < hidden; ++k) {
        double h = b1[static_cast<std::size_t>(k)];
        for (int j = 0; j < VoxelFeature::kDim; ++j)
            h += w1[static_cast<std::size_t>(k) * VoxelFeature::kDim + j] * x[static_cast<std::size_t>(j)];
        if (h > 0.0) out += w2[static_cast<std::size_t>(k)] * h;
    }
    return out;
}

double RefineModel::probability(const VoxelFeature& f) const {
    const double z = logit(f);
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

RefineModel train_refine_mlp(const Volume& volume, const PseudoLabels& labels,
                             const PriorConfig& cfg) {
    cfg.validate();
    if (labels.positives.empty() || labels.negatives.empty())
        throw std::invalid_argument("train_refine_mlp: both label sets must be non-empty");
    const Dims dims = volume.dims();
    const int n = static_cast<int>(labels.positives.size() + labels.negatives.size());

    std::vector<double> x;
    x.reserve(static_cast<std::size_t>(n) * VoxelFeature::kDim);
    std::vector<double> targets;
    targets.reserve(static_cast<std::size_t>(n));
    auto push_voxel = [&](std::int64_t flat, double target) {
        const int d = static_cast<int>(flat / (static_cast<std::int64_t>(dims.h) * dims.w));
        const std::int64_t rem = flat % (static_cast<std::int64_t>(dims.h) * dims.w);
        const int i = static_cast<int>(rem / dims.w);
        const int j = static_cast<int>(rem % dims.w);
        for (double v : voxel_feature(volume, d, i, j).flat()) x.push_back(v);
        targets.push_back(target);
    };
    for (std::int64_t v : labels.positives) push_voxel(v, 1.0);
    for (std::int64_t v : labels.negatives) push_voxel(v, 0.0);

    RefineModel model;
    model.hidden = cfg.mlp_hidden;
    model.w1.resize(static_cast<std::size_t>(cfg.mlp_hidden) * VoxelFeature::kDim);
    model.b1.assign(static_cast<std::size_t>(cfg.mlp_hidden), 0.0);
    model.w2.resize(static_cast<std::size_t>(cfg.mlp_hidden));
    model.b2.assign(1, 0.0);
    Rng rng(mix(cfg.seed, "refine-mlp-init"));
    const double s1 = std::sqrt(2.0 / VoxelFeature::kDim);
    for (double& w : model.w1) w = s1 * rng.normal();
    const double s2 = std::sqrt(2.0 / cfg.mlp_hidden);
    for (double& w : model.w2) w = s2 * rng.normal();

    for (int epoch = 0; epoch <= cfg.mlp_epochs; ++epoch) {
        nn::Tape tape;
        nn::Tensor tx = tape.constant({n, VoxelFeature::kDim}, x);
        nn::Tensor w1 = tape.leaf({cfg.mlp_hidden, VoxelFeature::kDim}, model.w1);
        nn::Tensor b1 = tape.leaf({cfg.mlp_hidden}, model.b1);
        nn::Tensor w2 = tape.leaf({1, cfg.mlp_hidden}, model.w2);
        nn::Tensor b2 = tape.leaf({1}, model.b2);
        nn::Tensor loss = detail::refine_mlp_loss(tape, tx, targets, w1, b1, w2, b2);
        const double loss_val = loss.value()[0];
        if (!std::isfinite(loss_val))
            throw std::runtime_error("refine MLP loss is not finite at epoch " +
                                     std::to_string(epoch) +
                                     "; config: " + prior_config_to_json(cfg));
        if (epoch == 0) model.initial_loss = loss_val;
        model.final_loss = loss_val;
        if (epoch == cfg.mlp_epochs) break;
        tape.backward(loss);
        auto apply = [&](std::vector<double>& p, const nn::Tensor& t) {
            const std::vector<double>& g = t.grad();
            for (std::size_t v = 0; v < p.size(); ++v) p[v] -= cfg.mlp_lr * g[v];
        };
        apply(model.w1, w1);
        apply(model.b1, b1);
        apply(model.w2, w2);
        apply(model.b2, b2);
    }
    return model;
}

Mask binarize(const PriorMap& prior, double tau) {
    const Dims dims = prior.dims();
    Mask m = Mask::filled(dims, 0, prior.volume().spacing());
    const std::vector<float>& vals = prior.volume().voxels();
    for (std::size_t v = 0; v < vals.size(); ++v)
        if (vals[v] > tau) m.bits()[v] = 1;
    return m;
}

Mask refine(const PriorMap& prior, const RefineModel& model, const Volume& volume,
            const PriorConfig& cfg) {
    cfg.validate();
    if (prior.dims() != volume.dims())
        throw std::invalid_argument("refine: prior and volume dims differ");
    if (model.hidden <= 0)
        throw std::invalid_argument("refine: model is untrained");
    Mask out = binarize(prior, cfg.tau_bin);
    const Dims dims = volume.dims();
    for (int d = 0; d < dims.d; ++d)
        for (int i = 0; i < dims.h; ++i)
            for (int j = 0; j < dims.w; ++j) {
                if (out(d, i, j)) continue;
                if (model.logit(voxel_feature(volume, d, i, j)) > 0.0)
                    out(d, i, j) = 1;
            }
    return out;
}

LocalizeResult localize_case(const Volume& volume, BoxPredictor& predictor,
                             const PriorConfig& cfg, const Mask* brain_mask) {
    cfg.validate();
    const Dims dims = volume.dims();
    if (brain_mask && brain_mask->dims() != dims)
        throw std::invalid_argument("localize_case: brain mask dims differ from volume");

    const SliceStack stack = axial_slices(volume);
    std::vector<BoxPrediction> boxes;
    LocalizeResult out;
    for (int d = 0; d < dims.d; ++d) {
        SlicePrediction sp =
            predictor.predict(stack.slices[static_cast<std::size_t>(d)], dims.h, dims.w, d);
        for (std::string& w : sp.warnings) out.warnings.push_back(std::move(w));
        if (sp.failed) {
            ++out.failed_slices;
            continue;
        }
        for (BoxPrediction b : sp.boxes) {
            b.slice_index = d;
            boxes.push_back(b);
        }
    }

    out.prior = smooth_and_dilate(stack_boxes(boxes, dims), cfg);
    try {
        const PseudoLabels labels = extract_pseudo_labels(out.prior, cfg);
        const RefineModel model = train_refine_mlp(volume, labels, cfg);
        out.refined = refine(out.prior, model, volume, cfg);
    } catch (const LocalizationFailure& e) {
        out.fallback = true;
        if (brain_mask) {
            out.refined = *brain_mask;
        } else {
            out.refined = Mask::filled(dims, 0, volume.spacing());
            for (std::size_t v = 0; v < volume.voxels().size(); ++v)
                out.refined.bits()[v] = volume.voxels()[v] != 0.0f ? 1 : 0;
        }
        out.warnings.push_back(std::string("fell back to whole-brain mask: ") + e.what());
        log_warn("localize_case: " + out.warnings.back());
    }
    return out;
}

MaskOverlap mask_overlap(const Mask& pred, const Mask& gt) {
    if (pred.dims() != gt.dims())
        throw std::invalid_argument("mask_overlap: dims differ");
    MaskOverlap o;
    for (std::size_t v = 0; v < pred.bits().size(); ++v) {
        const bool p = pred.bits()[v] != 0;
        const bool g = gt.bits()[v] != 0;
        o.pred_size += p;
        o.gt_size += g;
        o.intersection += p && g;
        o.union_size += p || g;
    }
    o.iou = o.union_size > 0 ? static_cast<double>(o.intersection) / o.union_size : 0.0;
    o.recall = o.gt_size > 0 ? static_cast<double>(o.intersection) / o.gt_size : 0.0;
    o.precision = o.pred_size > 0 ? static_cast<double>(o.intersection) / o.pred_size : 0.0;
    return o;
}

} // namespace vb
