#include "vb/diagnoser.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "vb/log.hpp"
#include "vb/nn/kernels.hpp"
#include "vb/rng.hpp"

namespace vb {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& j, std::initializer_list<const char*> known,
                         const char* what) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok)
            throw std::invalid_argument("unknown key '" + it.key() + "' in " + what);
    }
}

int argmax_lowest(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
    return best;
}

std::vector<float> to_float(const std::vector<double>& v) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
    return out;
}

} // namespace

void DiagnoserConfig::validate() const {
    if (backbone.empty())
        throw std::invalid_argument("diagnoser config: backbone must have >= 1 stage");
    for (const ConvStage& s : backbone)
        if (s.channels <= 0 || s.stride <= 0)
            throw std::invalid_argument(
                "diagnoser config: stage channels and stride must be positive");
    if (mca_hidden <= 0)
        throw std::invalid_argument("diagnoser config: mca_hidden must be positive");
    if (k_classes < 2)
        throw std::invalid_argument("diagnoser config: k_classes must be >= 2");
    if (epochs < 0) throw std::invalid_argument("diagnoser config: epochs must be >= 0");
    if (!(lr > 0.0)) throw std::invalid_argument("diagnoser config: lr must be positive");
    if (weight_decay < 0.0)
        throw std::invalid_argument("diagnoser config: weight_decay must be >= 0");
    if (warm_restart_t0 < 1)
        throw std::invalid_argument("diagnoser config: warm_restart_t0 must be >= 1");
    if (!(clip_norm > 0.0))
        throw std::invalid_argument("diagnoser config: clip_norm must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0)
        throw std::invalid_argument("diagnoser config: dropout_p must lie in [0, 1)");
    if (label_smooth < 0.0 || label_smooth >= 1.0)
        throw std::invalid_argument("diagnoser config: label_smooth must lie in [0, 1)");
    if (batch < 1 || accum_steps < 1)
        throw std::invalid_argument(
            "diagnoser config: batch and accum_steps must be >= 1");
    if (!(mask_eps > 0.0))
        throw std::invalid_argument("diagnoser config: mask_eps must be positive");
}

int DiagnoserConfig::total_stride() const {
    int t = 1;
    for (const ConvStage& s : backbone) t *= s.stride;
    return t;
}

int DiagnoserConfig::feature_channels() const { return backbone.back().channels; }

Dims DiagnoserConfig::feature_dims(Dims input) const {
    Dims cur = input;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
        const int s = backbone[i].stride;
        if (cur.d % s != 0 || cur.h % s != 0 || cur.w % s != 0)
            throw std::invalid_argument(
                "diagnoser: input dims not divisible by stage " + std::to_string(i) +
                " stride " + std::to_string(s));
        cur = {cur.d / s, cur.h / s, cur.w / s};
    }
    return cur;
}

std::string diagnoser_config_to_json(const DiagnoserConfig& cfg) {
    json j;
    json stages = json::array();
    for (const ConvStage& s : cfg.backbone)
        stages.push_back({{"channels", s.channels}, {"stride", s.stride}});
    j["backbone"] = stages;
    j["mca_hidden"] = cfg.mca_hidden;
    j["k_classes"] = cfg.k_classes;
    j["epochs"] = cfg.epochs;
    j["lr"] = cfg.lr;
    j["weight_decay"] = cfg.weight_decay;
    j["warm_restart_t0"] = cfg.warm_restart_t0;
    j["clip_norm"] = cfg.clip_norm;
    j["dropout_p"] = cfg.dropout_p;
    j["label_smooth"] = cfg.label_smooth;
    j["batch"] = cfg.batch;
    j["accum_steps"] = cfg.accum_steps;
    j["seed"] = cfg.seed;
    j["use_mca"] = cfg.use_mca;
    j["mask_input"] = cfg.mask_input;
    j["mask_eps"] = cfg.mask_eps;
    return j.dump();
}

DiagnoserConfig diagnoser_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    reject_unknown_keys(j,
                        {"backbone", "mca_hidden", "k_classes", "epochs", "lr",
                         "weight_decay", "warm_restart_t0", "clip_norm", "dropout_p",
                         "label_smooth", "batch", "accum_steps", "seed", "use_mca",
                         "mask_input", "mask_eps"},
                        "diagnoser config");
    DiagnoserConfig cfg;
    if (j.contains("backbone")) {
        cfg.backbone.clear();
        for (const auto& e : j.at("backbone")) {
            reject_unknown_keys(e, {"channels", "stride"}, "diagnoser backbone stage");
            ConvStage s;
            s.channels = e.at("channels").get<int>();
            s.stride = e.at("stride").get<int>();
            cfg.backbone.push_back(s);
        }
    }
    if (j.contains("mca_hidden")) cfg.mca_hidden = j.at("mca_hidden").get<int>();
    if (j.contains("k_classes")) cfg.k_classes = j.at("k_classes").get<int>();
    if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int>();
    if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
    if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("warm_restart_t0")) cfg.warm_restart_t0 = j.at("warm_restart_t0").get<int>();
    if (j.contains("clip_norm")) cfg.clip_norm = j.at("clip_norm").get<double>();
    if (j.contains("dropout_p")) cfg.dropout_p = j.at("dropout_p").get<double>();
    if (j.contains("label_smooth")) cfg.label_smooth = j.at("label_smooth").get<double>();
    if (j.contains("batch")) cfg.batch = j.at("batch").get<int>();
    if (j.contains("accum_steps")) cfg.accum_steps = j.at("accum_steps").get<int>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("use_mca")) cfg.use_mca = j.at("use_mca").get<bool>();
    if (j.contains("mask_input")) cfg.mask_input = j.at("mask_input").get<bool>();
    if (j.contains("mask_eps")) cfg.mask_eps = j.at("mask_eps").get<double>();
    cfg.validate();
    return cfg;
}

void AugmentConfig::validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(rot90_p) || !prob(flip_p) || !prob(noise_p) || !prob(gamma_p))
        throw std::invalid_argument("augment config: probabilities must lie in [0, 1]");
    if (noise_std < 0.0)
        throw std::invalid_argument("augment config: noise_std must be >= 0");
    if (!(gamma_lo > 0.0) || !(gamma_hi > 0.0) || gamma_lo > gamma_hi)
        throw std::invalid_argument(
            "augment config: gamma bounds must be positive with lo <= hi");
}

std::string augment_config_to_json(const AugmentConfig& cfg) {
    json j;
    j["rot90_p"] = cfg.rot90_p;
    j["flip_p"] = cfg.flip_p;
    j["noise_std"] = cfg.noise_std;
    j["noise_p"] = cfg.noise_p;
    j["gamma_lo"] = cfg.gamma_lo;
    j["gamma_hi"] = cfg.gamma_hi;
    j["gamma_p"] = cfg.gamma_p;
    j["seed"] = cfg.seed;
    return j.dump();
}

AugmentConfig augment_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    reject_unknown_keys(j,
                        {"rot90_p", "flip_p", "noise_std", "noise_p", "gamma_lo",
                         "gamma_hi", "gamma_p", "seed"},
                        "augment config");
    AugmentConfig cfg;
    if (j.contains("rot90_p")) cfg.rot90_p = j.at("rot90_p").get<double>();
    if (j.contains("flip_p")) cfg.flip_p = j.at("flip_p").get<double>();
    if (j.contains("noise_std")) cfg.noise_std = j.at("noise_std").get<double>();
    if (j.contains("noise_p")) cfg.noise_p = j.at("noise_p").get<double>();
    if (j.contains("gamma_lo")) cfg.gamma_lo = j.at("gamma_lo").get<double>();
    if (j.contains("gamma_hi")) cfg.gamma_hi = j.at("gamma_hi").get<double>();
    if (j.contains("gamma_p")) cfg.gamma_p = j.at("gamma_p").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.validate();
    return cfg;
}

namespace {

// One counter-clockwise quarter turn in the axial (i, j) plane; requires
// square slices so dims are preserved.
template <typename Grid>
Grid rotate_axial_once(const Grid& g) {
    const Dims dims = g.dims();
    Grid out = g;
    for (int d = 0; d < dims.d; ++d)
        for (int i = 0; i < dims.h; ++i)
            for (int j = 0; j < dims.w; ++j) out(d, i, j) = g(d, j, dims.w - 1 - i);
    return out;
}

template <typename Grid>
Grid flip_sagittal(const Grid& g) {
    const Dims dims = g.dims();
    Grid out = g;
    for (int d = 0; d < dims.d; ++d)
        for (int i = 0; i < dims.h; ++i)
            for (int j = 0; j < dims.w; ++j) out(d, i, j) = g(d, i, dims.w - 1 - j);
    return out;
}

} // namespace

AugmentResult augment(const Volume& v, const Mask& m, const AugmentConfig& cfg,
                      std::uint64_t draw_seed) {
    cfg.validate();
    if (v.dims() != m.dims())
        throw std::invalid_argument("augment: volume and mask dims differ");
    Rng rng(draw_seed);
    AugmentResult r;
    r.volume = v;
    r.mask = m;

    if (rng.uniform() < cfg.rot90_p) {
        if (v.dims().h != v.dims().w)
            throw std::invalid_argument(
                "augment: axial rotation requires square slices (h == w)");
        const int k = rng.uniform_int(1, 3);
        for (int t = 0; t < k; ++t) {
            r.volume = rotate_axial_once(r.volume);
            r.mask = rotate_axial_once(r.mask);
        }
        r.rotated = true;
        r.rot_quarter_turns = k;
    }

    if (rng.uniform() < cfg.flip_p) {
        r.volume = flip_sagittal(r.volume);
        r.mask = flip_sagittal(r.mask);
        r.flipped = true;
    }

    if (rng.uniform() < cfg.noise_p) {
        for (float& x : r.volume.voxels())
            x += static_cast<float>(cfg.noise_std * rng.normal());
        r.noised = true;
    }

    if (rng.uniform() < cfg.gamma_p) {
        r.gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi);
        float lo = r.volume.voxels()[0], hi = lo;
        for (float x : r.volume.voxels()) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        const float span = hi - lo;
        if (span > 0.0f)
            for (float& x : r.volume.voxels())
                x = lo + span * static_cast<float>(
                                    std::pow(static_cast<double>((x - lo) / span), r.gamma));
        r.gamma_adjusted = true;
    }
    return r;
}

Volume mask_to_feature_res(const Mask& m, Dims feature_dims) {
    const Dims in = m.dims();
    if (feature_dims.d <= 0 || feature_dims.h <= 0 || feature_dims.w <= 0)
        throw std::invalid_argument("mask_to_feature_res: feature dims must be positive");
    const bool divisible =
        in.d % feature_dims.d == 0 && in.h % feature_dims.h == 0 && in.w % feature_dims.w == 0;
    if (!divisible) {
        log_warn("mask_to_feature_res: dims not divisible, nearest resample fallback");
        const Mask r = resample_nearest(m, feature_dims);
        std::vector<float> vals(r.bits().begin(), r.bits().end());
        return Volume(feature_dims,
                      Spacing{m.spacing().d * in.d / feature_dims.d,
                              m.spacing().h * in.h / feature_dims.h,
                              m.spacing().w * in.w / feature_dims.w},
                      std::move(vals));
    }
    const int fd = in.d / feature_dims.d, fh = in.h / feature_dims.h,
              fw = in.w / feature_dims.w;
    const double block = static_cast<double>(fd) * fh * fw;
    std::vector<float> vals(static_cast<std::size_t>(feature_dims.numel()), 0.0f);
    for (int d = 0; d < feature_dims.d; ++d)
        for (int i = 0; i < feature_dims.h; ++i)
            for (int j = 0; j < feature_dims.w; ++j) {
                std::int64_t count = 0;
                for (int dd = d * fd; dd < (d + 1) * fd; ++dd)
                    for (int ii = i * fh; ii < (i + 1) * fh; ++ii)
                        for (int jj = j * fw; jj < (j + 1) * fw; ++jj)
                            count += m(dd, ii, jj);
                vals[(static_cast<std::size_t>(d) * feature_dims.h + i) * feature_dims.w +
                     j] = static_cast<float>(count / block);
            }
    return Volume(feature_dims,
                  Spacing{m.spacing().d * fd, m.spacing().h * fh, m.spacing().w * fw},
                  std::move(vals));
}

Volume apply_input_mask(const Volume& v, const Mask& m) {
    if (v.dims() != m.dims())
        throw std::invalid_argument("apply_input_mask: dims differ");
    Volume out = v;
    for (std::size_t i = 0; i < out.voxels().size(); ++i)
        if (!m.bits()[i]) out.voxels()[i] = 0.0f;
    return out;
}

void init_diagnoser_params(nn::ParamStore& params, const DiagnoserConfig& cfg) {
    cfg.validate();
    Rng rng(mix(cfg.seed, "diagnoser-init"));
    auto he_fill = [&](std::size_t count, int fan_in) {
        std::vector<double> v(count);
        const double s = std::sqrt(2.0 / fan_in);
        for (double& x : v) x = s * rng.normal();
        return v;
    };
    int cin = 1;
    for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
        const int co = cfg.backbone[i].channels;
        const std::string base = "backbone.stage" + std::to_string(i);
        params.add(base + ".weight", {co, cin, 3, 3, 3},
                   he_fill(static_cast<std::size_t>(co) * cin * 27, cin * 27));
        params.add(base + ".bias", {co}, std::vector<double>(static_cast<std::size_t>(co), 0.0));
        cin = co;
    }
    const int c = cin;
    if (cfg.use_mca) {
        params.add("mca.fc1.weight", {cfg.mca_hidden, c},
                   he_fill(static_cast<std::size_t>(cfg.mca_hidden) * c, c));
        params.add("mca.fc1.bias", {cfg.mca_hidden},
                   std::vector<double>(static_cast<std::size_t>(cfg.mca_hidden), 0.0));
        params.add("mca.fc2.weight", {c, cfg.mca_hidden},
                   he_fill(static_cast<std::size_t>(c) * cfg.mca_hidden, cfg.mca_hidden));
        params.add("mca.fc2.bias", {c}, std::vector<double>(static_cast<std::size_t>(c), 0.0));
    }
    params.add("head.weight", {cfg.k_classes, 2 * c},
               he_fill(static_cast<std::size_t>(cfg.k_classes) * 2 * c, 2 * c));
    params.add("head.bias", {cfg.k_classes},
               std::vector<double>(static_cast<std::size_t>(cfg.k_classes), 0.0));
}

ForwardHandles diagnoser_forward(nn::Tape& tape, const nn::ParamStore& params,
                                 const DiagnoserConfig& cfg, const Volume& volume,
                                 const Volume& feature_mask, bool training,
                                 std::uint64_t dropout_seed, int label) {
    cfg.validate();
    const Dims dims = volume.dims();
    const Dims fd = cfg.feature_dims(dims);
    if (feature_mask.dims() != fd)
        throw std::invalid_argument(
            "diagnoser_forward: feature mask is not at feature resolution");
    if (label >= cfg.k_classes)
        throw std::out_of_range("diagnoser_forward: label out of range");

    ForwardHandles out;
    auto bind = [&](const std::string& name) {
        const nn::NamedParam& p = params.by_name(name);
        nn::Tensor t = tape.leaf(p.shape, p.value);
        out.leaves.emplace_back(name, t);
        return t;
    };

    std::vector<double> x(volume.voxels().begin(), volume.voxels().end());
    nn::Tensor cur = tape.constant({1, 1, dims.d, dims.h, dims.w}, std::move(x));
    for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
        const std::string base = "backbone.stage" + std::to_string(i);
        nn::Tensor w = bind(base + ".weight");
        nn::Tensor b = bind(base + ".bias");
        cur = nn::relu(nn::bias_add(nn::conv3d(cur, w, cfg.backbone[i].stride, 1), b));
    }
    const int c = cfg.feature_channels();
    cur = nn::reshape(cur, {c, fd.d, fd.h, fd.w});
    nn::Tensor feat =
        nn::dropout(cur, cfg.dropout_p, mix(dropout_seed, "feature"), training);
    out.feature = feat;

    nn::Tensor global_branch = nn::gap(feat);
    nn::Tensor second_branch = global_branch;
    if (cfg.use_mca) {
        std::vector<double> mv(feature_mask.voxels().begin(), feature_mask.voxels().end());
        nn::Tensor m = tape.constant({fd.d, fd.h, fd.w}, std::move(mv));
        nn::Tensor z = nn::masked_avg_pool(feat, m, cfg.mask_eps);
        nn::Tensor w1 = bind("mca.fc1.weight");
        nn::Tensor b1 = bind("mca.fc1.bias");
        nn::Tensor w2 = bind("mca.fc2.weight");
        nn::Tensor b2 = bind("mca.fc2.bias");
        nn::ChannelGate gate = nn::channel_gate(feat, z, w1, b1, w2, b2);
        out.pooled = z;
        out.gate = gate.w;
        out.has_mca = true;
        second_branch = nn::gap(gate.f_att);
    }
    nn::Tensor fused = nn::concat(global_branch, second_branch);
    fused = nn::dropout(fused, cfg.dropout_p, mix(dropout_seed, "head"), training);
    nn::Tensor row = nn::reshape(fused, {1, 2 * c});
    nn::Tensor hw = bind("head.weight");
    nn::Tensor hb = bind("head.bias");
    out.logits = nn::linear(row, hw, hb);
    out.probs = nn::softmax(out.logits);
    if (label >= 0) {
        out.loss = nn::cross_entropy_smoothed(out.logits, {label}, cfg.label_smooth);
        out.has_loss = true;
    }
    return out;
}

TrainResult train_diagnoser(const std::vector<DiagnoserCase>& cases,
                            const DiagnoserConfig& cfg, const AugmentConfig& aug) {
    cfg.validate();
    aug.validate();
    if (cases.empty())
        throw std::invalid_argument("train_diagnoser: training split is empty");
    for (const DiagnoserCase& c : cases) {
        if (c.label < 0 || c.label >= cfg.k_classes)
            throw std::out_of_range("train_diagnoser: label out of range for case " + c.id);
        if (c.volume.dims() != c.mask.dims())
            throw std::invalid_argument(
                "train_diagnoser: volume/mask dims differ for case " + c.id);
    }

    TrainResult out;
    init_diagnoser_params(out.params, cfg);
    nn::AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    nn::AdamW opt(ocfg);
    nn::CosineWarmRestarts sched{cfg.lr, 0.0, cfg.warm_restart_t0};

    const int n = static_cast<int>(cases.size());
    const int effective = cfg.batch * cfg.accum_steps;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = sched.lr_at(epoch);
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(mix(cfg.seed, "train-shuffle", static_cast<std::uint64_t>(epoch)));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<std::size_t>(i)],
                      order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);

        double loss_sum = 0.0;
        int correct = 0;
        int pos = 0;
        while (pos < n) {
            const int group = std::min(effective, n - pos);
            out.params.zero_grads();
            for (int g = 0; g < group; ++g, ++pos) {
                const DiagnoserCase& c = cases[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])];
                const std::uint64_t draw =
                    static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(n) +
                    static_cast<std::uint64_t>(pos);
                const AugmentResult ar = augment(c.volume, c.mask, aug, mix(aug.seed, "augment", draw));
                const Volume input =
                    cfg.mask_input ? apply_input_mask(ar.volume, ar.mask) : ar.volume;
                const Volume fmask =
                    mask_to_feature_res(ar.mask, cfg.feature_dims(input.dims()));

                nn::Tape tape;
                ForwardHandles f =
                    diagnoser_forward(tape, out.params, cfg, input, fmask, true,
                                      mix(cfg.seed, "dropout", draw), c.label);
                const double lval = f.loss.value()[0];
                if (!std::isfinite(lval)) {
                    out.diverged = true;
                    out.diagnostics = "loss not finite at epoch " + std::to_string(epoch) +
                                      ", case " + c.id +
                                      "; params hold the last finite state";
                    log_warn("train_diagnoser: " + out.diagnostics);
                    return out;
                }
                loss_sum += lval;
                if (argmax_lowest(f.probs.value()) == c.label) ++correct;

                tape.backward(f.loss);
                const double scale = 1.0 / group;
                for (const auto& [name, leaf] : f.leaves) {
                    nn::NamedParam& p = out.params.by_name(name);
                    const std::vector<double>& g2 = leaf.grad();
                    for (std::size_t i = 0; i < p.grad.size(); ++i)
                        p.grad[i] += scale * g2[i];
                }
            }
            out.params.clip_grad_norm(cfg.clip_norm);
            opt.step(out.params, lr);
        }
        out.epochs.push_back(EpochLog{epoch, lr, loss_sum / n,
                                      static_cast<double>(correct) / n});
        log_debug("epoch " + std::to_string(epoch) + " lr=" + std::to_string(lr) +
                  " loss=" + std::to_string(loss_sum / n));
    }
    return out;
}

Prediction predict_case(const nn::ParamStore& params, const DiagnoserConfig& cfg,
                        const Volume& volume, const Mask& mask) {
    cfg.validate();
    if (volume.dims() != mask.dims())
        throw std::invalid_argument("predict_case: volume/mask dims differ");
    const Volume input = cfg.mask_input ? apply_input_mask(volume, mask) : volume;
    const Dims dims = input.dims();
    const Dims fd = cfg.feature_dims(dims);

    auto fetch = [&](const std::string& name, const nn::Shape& want) -> std::vector<float> {
        const nn::NamedParam& p = params.by_name(name);
        if (p.shape != want)
            throw std::invalid_argument("predict_case: checkpoint/config mismatch at " +
                                        name);
        return to_float(p.value);
    };

    std::vector<float> cur = input.voxels();
    int cin = 1;
    Dims cd = dims;
    for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
        const int co = cfg.backbone[i].channels;
        const std::string base = "backbone.stage" + std::to_string(i);
        const std::vector<float> w = fetch(base + ".weight", {co, cin, 3, 3, 3});
        const std::vector<float> b = fetch(base + ".bias", {co});
        const nn::detail::Conv3dShape s = nn::detail::Conv3dShape::make(
            1, cin, cd.d, cd.h, cd.w, co, 3, 3, 3, cfg.backbone[i].stride, 1);
        std::vector<float> next(static_cast<std::size_t>(co) * s.od * s.oh * s.ow);
        nn::detail::conv3d_forward_blocked(cur.data(), w.data(), next.data(), s);
        const std::int64_t spatial = static_cast<std::int64_t>(s.od) * s.oh * s.ow;
        for (int ch = 0; ch < co; ++ch)
            for (std::int64_t v = 0; v < spatial; ++v) {
                float& val = next[static_cast<std::size_t>(ch) * spatial + v];
                val = std::max(0.0f, val + b[static_cast<std::size_t>(ch)]);
            }
        cur = std::move(next);
        cin = co;
        cd = {s.od, s.oh, s.ow};
    }

    const int c = cin;
    const std::int64_t spatial = fd.numel();
    std::vector<float> g1(static_cast<std::size_t>(c));
    nn::detail::gap_forward(cur.data(), g1.data(), c, spatial);

    std::vector<float> fused(static_cast<std::size_t>(2 * c));
    std::copy(g1.begin(), g1.end(), fused.begin());
    if (cfg.use_mca) {
        const Volume fmask = mask_to_feature_res(mask, fd);
        std::vector<float> z(static_cast<std::size_t>(c));
        nn::detail::masked_avg_pool_forward(cur.data(), fmask.voxels().data(), z.data(), c,
                                            spatial, static_cast<float>(cfg.mask_eps));
        const std::vector<float> w1 = fetch("mca.fc1.weight", {cfg.mca_hidden, c});
        const std::vector<float> b1 = fetch("mca.fc1.bias", {cfg.mca_hidden});
        const std::vector<float> w2 = fetch("mca.fc2.weight", {c, cfg.mca_hidden});
        const std::vector<float> b2 = fetch("mca.fc2.bias", {c});
        std::vector<float> hidden(static_cast<std::size_t>(cfg.mca_hidden));
        nn::detail::linear_forward(z.data(), w1.data(), b1.data(), hidden.data(), 1, c,
                                   cfg.mca_hidden);
        for (float& h : hidden) h = std::max(0.0f, h);
        std::vector<float> gate(static_cast<std::size_t>(c));
        nn::detail::linear_forward(hidden.data(), w2.data(), b2.data(), gate.data(), 1,
                                   cfg.mca_hidden, c);
        for (int ch = 0; ch < c; ++ch)
            fused[static_cast<std::size_t>(c + ch)] =
                g1[static_cast<std::size_t>(ch)] *
                nn::detail::sigmoid_scalar(gate[static_cast<std::size_t>(ch)]);
    } else {
        std::copy(g1.begin(), g1.end(), fused.begin() + c);
    }

    const std::vector<float> hw = fetch("head.weight", {cfg.k_classes, 2 * c});
    const std::vector<float> hb = fetch("head.bias", {cfg.k_classes});
    std::vector<float> logits(static_cast<std::size_t>(cfg.k_classes));
    nn::detail::linear_forward(fused.data(), hw.data(), hb.data(), logits.data(), 1, 2 * c,
                               cfg.k_classes);
    std::vector<float> probs(static_cast<std::size_t>(cfg.k_classes));
    nn::detail::softmax_rows(logits.data(), probs.data(), 1, cfg.k_classes);

    Prediction p;
    p.probs.assign(probs.begin(), probs.end());
    p.predicted = argmax_lowest(p.probs);
    return p;
}

std::string diagnoser_checkpoint_meta(const DiagnoserConfig& cfg) {
    json m;
    m["format"] = "vb-diagnoser-v1";
    m["config"] = json::parse(diagnoser_config_to_json(cfg));
    return m.dump();
}

DiagnoserConfig diagnoser_config_from_checkpoint_meta(const std::string& meta_json) {
    const json m = json::parse(meta_json);
    if (!m.contains("format") || m.at("format").get<std::string>() != "vb-diagnoser-v1")
        throw std::invalid_argument(
            "checkpoint meta is not a vb-diagnoser-v1 record");
    return diagnoser_config_from_json(m.at("config").dump());
}

} // namespace vb
