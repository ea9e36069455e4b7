#include "vb/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace vb {

namespace {

using nlohmann::json;

float quantile_value(const std::vector<float>& values, double q) {
    if (values.empty()) throw std::invalid_argument("quantile of an empty volume");
    if (q < 0.0 || q > 1.0) throw std::invalid_argument("quantile must lie in [0, 1]");
    std::vector<float> sorted(values);
    const std::size_t idx = static_cast<std::size_t>(
        std::floor(q * static_cast<double>(sorted.size() - 1)));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(idx),
                     sorted.end());
    return sorted[idx];
}

// Monomial exponents (d, i, j) for all terms of total degree <= degree,
// in a fixed enumeration order.
std::vector<std::array<int, 3>> poly_terms(int degree) {
    std::vector<std::array<int, 3>> terms;
    for (int a = 0; a <= degree; ++a)
        for (int b = 0; a + b <= degree; ++b)
            for (int c = 0; a + b + c <= degree; ++c) terms.push_back({a, b, c});
    return terms;
}

double eval_terms(const std::vector<std::array<int, 3>>& terms,
                  const std::vector<double>& coef, double nd, double ni, double nj) {
    double acc = 0.0;
    for (std::size_t t = 0; t < terms.size(); ++t) {
        double m = coef[t];
        for (int e = 0; e < terms[t][0]; ++e) m *= nd;
        for (int e = 0; e < terms[t][1]; ++e) m *= ni;
        for (int e = 0; e < terms[t][2]; ++e) m *= nj;
        acc += m;
    }
    return acc;
}

// Solves the symmetric positive system from the normal equations by
// Gaussian elimination with partial pivoting; the systems here are tiny
// (<= 20 unknowns for degree 3).
std::vector<double> solve_dense(std::vector<std::vector<double>> a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        if (std::abs(a[pivot][col]) < 1e-12)
            throw std::runtime_error("bias field fit is rank-deficient");
        std::swap(a[col], a[pivot]);
        std::swap(b[col], b[pivot]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r][col] / a[col][col];
            if (f == 0.0) continue;
            for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n, 0.0);
    for (std::size_t r = n; r-- > 0;) {
        double acc = b[r];
        for (std::size_t c = r + 1; c < n; ++c) acc -= a[r][c] * x[c];
        x[r] = acc / a[r][r];
    }
    return x;
}

inline double norm_coord(int v, int n) {
    return n > 1 ? 2.0 * v / (n - 1) - 1.0 : 0.0;
}

inline int nearest_source(double pos, int n) {
    const int idx = static_cast<int>(std::ceil(pos - 0.5)); // ties toward lower index
    return idx < 0 || idx >= n ? -1 : idx;
}

} // namespace

BrainExtractResult brain_extract(const Volume& v, double quantile) {
    const float threshold = quantile_value(v.voxels(), quantile);
    const Dims dims = v.dims();
    const std::size_t n = static_cast<std::size_t>(dims.numel());

    std::vector<std::uint8_t> above(n, 0);
    std::size_t above_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (v.voxels()[i] > threshold) {
            above[i] = 1;
            ++above_count;
        }
    }
    if (above_count == 0) {
        float lo = v.voxels()[0], hi = v.voxels()[0];
        for (float f : v.voxels()) {
            lo = std::min(lo, f);
            hi = std::max(hi, f);
        }
        if (lo == hi) {
            // All-equal volume: values tie with the threshold and are kept.
            std::fill(above.begin(), above.end(), 1);
            above_count = n;
        } else {
            throw std::runtime_error("brain extraction: empty above-threshold set");
        }
    }

    // Label 6-connected components of the above set; keep every component
    // of maximal size (exact ties are all retained).
    std::vector<std::int32_t> label(n, -1);
    std::vector<std::int64_t> sizes;
    const int plane = dims.h * dims.w;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < n; ++start) {
        if (!above[start] || label[start] >= 0) continue;
        const std::int32_t comp = static_cast<std::int32_t>(sizes.size());
        sizes.push_back(0);
        stack.clear();
        stack.push_back(start);
        label[start] = comp;
        while (!stack.empty()) {
            const std::size_t cur = stack.back();
            stack.pop_back();
            ++sizes[comp];
            const int d = static_cast<int>(cur) / plane;
            const int rem = static_cast<int>(cur) % plane;
            const int i = rem / dims.w;
            const int j = rem % dims.w;
            const int nb_d[6] = {d - 1, d + 1, d, d, d, d};
            const int nb_i[6] = {i, i, i - 1, i + 1, i, i};
            const int nb_j[6] = {j, j, j, j, j - 1, j + 1};
            for (int t = 0; t < 6; ++t) {
                if (nb_d[t] < 0 || nb_d[t] >= dims.d || nb_i[t] < 0 || nb_i[t] >= dims.h ||
                    nb_j[t] < 0 || nb_j[t] >= dims.w)
                    continue;
                const std::size_t ni =
                    (static_cast<std::size_t>(nb_d[t]) * dims.h + nb_i[t]) * dims.w + nb_j[t];
                if (above[ni] && label[ni] < 0) {
                    label[ni] = comp;
                    stack.push_back(ni);
                }
            }
        }
    }
    const std::int64_t max_size = *std::max_element(sizes.begin(), sizes.end());

    BrainExtractResult out;
    std::vector<std::uint8_t> bits(n, 0);
    std::vector<float> masked(n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] >= 0 && sizes[static_cast<std::size_t>(label[i])] == max_size) {
            bits[i] = 1;
            masked[i] = v.voxels()[i];
        }
    }
    out.mask = Mask(dims, v.spacing(), std::move(bits));
    out.volume = Volume(dims, v.spacing(), std::move(masked));
    out.threshold = threshold;
    return out;
}

BiasCorrectResult bias_correct(const Volume& v, const Mask& mask, int degree) {
    if (degree < 0) throw std::invalid_argument("bias polynomial degree must be >= 0");
    if (!(v.dims() == mask.dims()))
        throw std::invalid_argument("bias correction: volume and mask dims differ");
    const Dims dims = v.dims();

    const auto terms = poly_terms(degree);
    const std::size_t nt = terms.size();

    // Gather masked voxels and their log-intensities.
    std::vector<std::array<double, 3>> coords;
    std::vector<double> logv;
    for (int d = 0; d < dims.d; ++d)
        for (int i = 0; i < dims.h; ++i)
            for (int j = 0; j < dims.w; ++j) {
                if (!mask(d, i, j)) continue;
                const float val = v(d, i, j);
                if (!(val > 0.0f))
                    throw std::invalid_argument(
                        "bias correction: non-positive voxel inside the mask");
                coords.push_back({norm_coord(d, dims.d), norm_coord(i, dims.h),
                                  norm_coord(j, dims.w)});
                logv.push_back(std::log(static_cast<double>(val)));
            }
    if (coords.size() < nt)
        throw std::runtime_error("bias field fit is rank-deficient: " +
                                 std::to_string(coords.size()) + " mask voxels for " +
                                 std::to_string(nt) + " terms");

    // Normal equations for least squares over the monomial basis.
    std::vector<std::vector<double>> ata(nt, std::vector<double>(nt, 0.0));
    std::vector<double> atb(nt, 0.0);
    std::vector<double> row(nt);
    for (std::size_t s = 0; s < coords.size(); ++s) {
        for (std::size_t t = 0; t < nt; ++t) {
            double m = 1.0;
            for (int e = 0; e < terms[t][0]; ++e) m *= coords[s][0];
            for (int e = 0; e < terms[t][1]; ++e) m *= coords[s][1];
            for (int e = 0; e < terms[t][2]; ++e) m *= coords[s][2];
            row[t] = m;
        }
        for (std::size_t a = 0; a < nt; ++a) {
            for (std::size_t b = a; b < nt; ++b) ata[a][b] += row[a] * row[b];
            atb[a] += row[a] * logv[s];
        }
    }
    for (std::size_t a = 0; a < nt; ++a)
        for (std::size_t b = 0; b < a; ++b) ata[a][b] = ata[b][a];

    std::vector<double> coef = solve_dense(std::move(ata), std::move(atb));

    // Zero-mean the fitted field over the mask so mean brightness is kept.
    double field_mean = 0.0;
    for (const auto& c : coords) field_mean += eval_terms(terms, coef, c[0], c[1], c[2]);
    field_mean /= static_cast<double>(coords.size());
    coef[0] -= field_mean; // constant term carries the normalization

    BiasCorrectResult out;
    std::vector<float> voxels = v.voxels();
    for (int d = 0; d < dims.d; ++d)
        for (int i = 0; i < dims.h; ++i)
            for (int j = 0; j < dims.w; ++j) {
                if (!mask(d, i, j)) continue;
                const double field = eval_terms(terms, coef, norm_coord(d, dims.d),
                                                norm_coord(i, dims.h), norm_coord(j, dims.w));
                const std::size_t idx =
                    (static_cast<std::size_t>(d) * dims.h + i) * dims.w + j;
                voxels[idx] = static_cast<float>(voxels[idx] / std::exp(field));
            }
    out.volume = Volume(dims, v.spacing(), std::move(voxels));
    out.field_coefficients = std::move(coef);
    return out;
}

std::array<double, 3> RegistrationTransform::to_source(int d, int i, int j) const {
    return {source_center[0] + (d - template_center[0]) / scale,
            source_center[1] + (i - template_center[1]) / scale,
            source_center[2] + (j - template_center[2]) / scale};
}

RegistrationTransform compute_registration(const Mask& mask, Dims template_dims,
                                           double bbox_fill) {
    if (template_dims.d < 1 || template_dims.h < 1 || template_dims.w < 1)
        throw std::invalid_argument("template dims must be positive");
    if (!(bbox_fill > 0.0) || bbox_fill > 1.0)
        throw std::invalid_argument("bbox fill fraction must lie in (0, 1]");
    const Dims dims = mask.dims();
    std::int64_t count = 0;
    double cd = 0.0, ci = 0.0, cj = 0.0;
    int lo_d = dims.d, hi_d = -1, lo_i = dims.h, hi_i = -1, lo_j = dims.w, hi_j = -1;
    for (int d = 0; d < dims.d; ++d)
        for (int i = 0; i < dims.h; ++i)
            for (int j = 0; j < dims.w; ++j) {
                if (!mask(d, i, j)) continue;
                ++count;
                cd += d;
                ci += i;
                cj += j;
                lo_d = std::min(lo_d, d);
                hi_d = std::max(hi_d, d);
                lo_i = std::min(lo_i, i);
                hi_i = std::max(hi_i, i);
                lo_j = std::min(lo_j, j);
                hi_j = std::max(hi_j, j);
            }
    if (count == 0) throw std::runtime_error("registration: empty mask");

    RegistrationTransform t;
    t.source_center = {cd / count, ci / count, cj / count};
    t.template_center = {(template_dims.d - 1) / 2.0, (template_dims.h - 1) / 2.0,
                         (template_dims.w - 1) / 2.0};
    t.template_dims = template_dims;
    const int ext_d = hi_d - lo_d + 1, ext_i = hi_i - lo_i + 1, ext_j = hi_j - lo_j + 1;
    if (ext_d == 1 && ext_i == 1 && ext_j == 1) {
        t.scale = 1.0; // degenerate single-voxel mask
    } else {
        const double s_d = bbox_fill * template_dims.d / ext_d;
        const double s_i = bbox_fill * template_dims.h / ext_i;
        const double s_j = bbox_fill * template_dims.w / ext_j;
        t.scale = std::min({s_d, s_i, s_j});
    }
    return t;
}

Volume apply_registration(const Volume& v, const RegistrationTransform& t) {
    const Dims in = v.dims();
    const Dims out_dims = t.template_dims;
    std::vector<float> out(static_cast<std::size_t>(out_dims.numel()), 0.0f);
    std::size_t idx = 0;
    for (int d = 0; d < out_dims.d; ++d)
        for (int i = 0; i < out_dims.h; ++i)
            for (int j = 0; j < out_dims.w; ++j, ++idx) {
                const auto src = t.to_source(d, i, j);
                const int sd = nearest_source(src[0], in.d);
                const int si = nearest_source(src[1], in.h);
                const int sj = nearest_source(src[2], in.w);
                if (sd < 0 || si < 0 || sj < 0) continue;
                out[idx] = v(sd, si, sj);
            }
    const float inv = static_cast<float>(1.0 / t.scale);
    return Volume(out_dims,
                  Spacing{v.spacing().d * inv, v.spacing().h * inv, v.spacing().w * inv},
                  std::move(out));
}

Mask apply_registration(const Mask& m, const RegistrationTransform& t) {
    const Dims in = m.dims();
    const Dims out_dims = t.template_dims;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(out_dims.numel()), 0);
    std::size_t idx = 0;
    for (int d = 0; d < out_dims.d; ++d)
        for (int i = 0; i < out_dims.h; ++i)
            for (int j = 0; j < out_dims.w; ++j, ++idx) {
                const auto src = t.to_source(d, i, j);
                const int sd = nearest_source(src[0], in.d);
                const int si = nearest_source(src[1], in.h);
                const int sj = nearest_source(src[2], in.w);
                if (sd < 0 || si < 0 || sj < 0) continue;
                out[idx] = m(sd, si, sj);
            }
    const float inv = static_cast<float>(1.0 / t.scale);
    return Mask(out_dims,
                Spacing{m.spacing().d * inv, m.spacing().h * inv, m.spacing().w * inv},
                std::move(out));
}

Volume register_to_template(const Volume& v, const Mask& mask, const PreprocessConfig& cfg) {
    return apply_registration(v, compute_registration(mask, cfg.template_dims, cfg.bbox_fill));
}

PreprocessResult preprocess_pipeline(const Volume& v, const PreprocessConfig& cfg) {
    PreprocessResult out;
    BrainExtractResult extracted;
    try {
        extracted = brain_extract(v, cfg.brain_quantile);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage brain_extract: ") + e.what());
    }
    {
        std::ostringstream os;
        os << "brain_extract: quantile=" << cfg.brain_quantile
           << " threshold=" << extracted.threshold << " mask_voxels=" << extracted.mask.count();
        out.stage_log.push_back(os.str());
    }

    BiasCorrectResult corrected;
    try {
        corrected = bias_correct(extracted.volume, extracted.mask, cfg.bias_poly_degree);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage bias_correct: ") + e.what());
    }
    {
        std::ostringstream os;
        os << "bias_correct: degree=" << cfg.bias_poly_degree
           << " terms=" << corrected.field_coefficients.size();
        out.stage_log.push_back(os.str());
    }

    try {
        out.transform = compute_registration(extracted.mask, cfg.template_dims, cfg.bbox_fill);
        out.volume = apply_registration(corrected.volume, out.transform);
        out.brain_mask = apply_registration(extracted.mask, out.transform);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage register_to_template: ") + e.what());
    }
    {
        std::ostringstream os;
        os << "register_to_template: scale=" << out.transform.scale << " centroid=("
           << out.transform.source_center[0] << "," << out.transform.source_center[1] << ","
           << out.transform.source_center[2] << ")";
        out.stage_log.push_back(os.str());
    }

    out.brain_threshold = extracted.threshold;
    out.bias_coefficients = corrected.field_coefficients;
    return out;
}

std::string preprocess_config_to_json(const PreprocessConfig& cfg) {
    json j;
    j["brain_quantile"] = cfg.brain_quantile;
    j["bias_poly_degree"] = cfg.bias_poly_degree;
    j["template_dims"] = {cfg.template_dims.d, cfg.template_dims.h, cfg.template_dims.w};
    j["bbox_fill"] = cfg.bbox_fill;
    return j.dump();
}

PreprocessConfig preprocess_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string k = it.key();
        if (k != "brain_quantile" && k != "bias_poly_degree" && k != "template_dims" &&
            k != "bbox_fill")
            throw std::invalid_argument("unknown key '" + k + "' in preprocess config");
    }
    PreprocessConfig cfg;
    if (j.contains("brain_quantile")) cfg.brain_quantile = j.at("brain_quantile").get<double>();
    if (j.contains("bias_poly_degree"))
        cfg.bias_poly_degree = j.at("bias_poly_degree").get<int>();
    if (j.contains("template_dims")) {
        const auto d = j.at("template_dims");
        if (!d.is_array() || d.size() != 3)
            throw std::invalid_argument("template_dims must be a 3-element array");
        cfg.template_dims = Dims{d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
    }
    if (j.contains("bbox_fill")) cfg.bbox_fill = j.at("bbox_fill").get<double>();
    if (cfg.brain_quantile < 0.0 || cfg.brain_quantile > 1.0)
        throw std::invalid_argument("brain_quantile must lie in [0, 1]");
    if (cfg.bias_poly_degree < 0 || cfg.bias_poly_degree > 3)
        throw std::invalid_argument("bias_poly_degree must lie in [0, 3]");
    if (!(cfg.bbox_fill > 0.0) || cfg.bbox_fill > 1.0)
        throw std::invalid_argument("bbox_fill must lie in (0, 1]");
    return cfg;
}

} // namespace vb
