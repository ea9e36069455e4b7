#include "vb/nn/tensor.hpp"

#include <cmath>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "vb/nn/kernels.hpp"
#include "vb/rng.hpp"

namespace vb::nn {

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require(bool ok, const char* op, const std::string& detail) {
    if (!ok) shape_error(op, detail);
}

Tape* same_tape(const char* op, std::initializer_list<Tensor> ts) {
    Tape* tape = nullptr;
    for (const Tensor& t : ts) {
        require(t.tape() != nullptr, op, "tensor handle is empty");
        if (!tape) tape = t.tape();
        require(t.tape() == tape, op, "tensors belong to different tapes");
    }
    return tape;
}

} // namespace

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
const std::vector<double>& Tensor::value() const { return tape_->node(id_).value; }
const std::vector<double>& Tensor::grad() const { return tape_->node(id_).grad; }
bool Tensor::tracked() const { return tape_->node(id_).tracked; }

Tensor Tape::make(Shape shape, std::vector<double> value, bool tracked, const char* op,
                  std::function<void()> backprop) {
    if (shape_numel(shape) != static_cast<std::int64_t>(value.size()))
        throw std::invalid_argument(std::string(op) + ": payload does not match shape " +
                                    shape_str(shape));
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.tracked = tracked;
    n.op = op;
    n.backprop = std::move(backprop);
    if (tracked) n.grad.assign(n.value.size(), 0.0);
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::constant(Shape shape, std::vector<double> value) {
    return make(std::move(shape), std::move(value), false, "constant", {});
}

Tensor Tape::leaf(Shape shape, std::vector<double> value) {
    return make(std::move(shape), std::move(value), true, "leaf", {});
}

void Tape::backward(Tensor loss) {
    if (backward_done_)
        throw std::logic_error("backward already ran on this tape");
    if (loss.tape() != this)
        throw std::invalid_argument("backward: loss lives on a different tape");
    Node& ln = node(loss.id());
    if (static_cast<std::int64_t>(ln.value.size()) != 1)
        throw std::invalid_argument("backward: loss must be scalar");
    if (!ln.tracked)
        throw std::invalid_argument("backward: loss does not depend on any tracked leaf");
    backward_done_ = true;
    ln.grad[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        if (n.tracked && n.backprop) n.backprop();
    }
}

// --- op helpers ----------------------------------------------------------

namespace {

bool any_tracked(std::initializer_list<Tensor> ts) {
    for (const Tensor& t : ts)
        if (t.tracked()) return true;
    return false;
}

} // namespace

Tensor conv3d(Tensor x, Tensor k, int stride, int pad) {
    Tape* t = same_tape("conv3d", {x, k});
    const Shape& xs = x.shape();
    const Shape& ks = k.shape();
    require(xs.size() == 5, "conv3d", "input must be [n,ci,d,h,w], got " + shape_str(xs));
    require(ks.size() == 5, "conv3d", "kernel must be [co,ci,kd,kh,kw], got " + shape_str(ks));
    require(xs[1] == ks[1], "conv3d", "channel mismatch between input and kernel");
    const auto s = detail::Conv3dShape::make(xs[0], xs[1], xs[2], xs[3], xs[4], ks[0], ks[2],
                                             ks[3], ks[4], stride, pad);
    require(s.valid() && s.od > 0 && s.oh > 0 && s.ow > 0, "conv3d",
            "kernel/stride/pad do not fit the input");
    std::vector<double> out(static_cast<std::size_t>(s.n) * s.co * s.od * s.oh * s.ow);
    detail::conv3d_forward_blocked(x.value().data(), k.value().data(), out.data(), s);
    const bool tracked = any_tracked({x, k});
    Tensor y = t->make({s.n, s.co, s.od, s.oh, s.ow}, std::move(out), tracked, "conv3d", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, xid = x.id(), kid = k.id(), yid = y.id(), s]() {
            const auto& g = t->node(yid).grad;
            auto& xn = t->node(xid);
            auto& kn = t->node(kid);
            if (xn.tracked)
                detail::conv3d_backward_input(g.data(), kn.value.data(), xn.grad.data(), s);
            if (kn.tracked)
                detail::conv3d_backward_kernel(xn.value.data(), g.data(), kn.grad.data(), s);
        };
    }
    return y;
}

Tensor bias_add(Tensor x, Tensor b) {
    Tape* t = same_tape("bias_add", {x, b});
    const Shape& xs = x.shape();
    require(xs.size() >= 2, "bias_add", "input rank must be >= 2, got " + shape_str(xs));
    require(b.shape().size() == 1 && b.shape()[0] == xs[1], "bias_add",
            "bias must be [channels] matching input axis 1");
    const int n = xs[0], c = xs[1];
    const std::int64_t spatial = shape_numel(xs) / (static_cast<std::int64_t>(n) * c);
    std::vector<double> out(x.value().size());
    const auto& xv = x.value();
    const auto& bv = b.value();
    std::size_t idx = 0;
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (std::int64_t si = 0; si < spatial; ++si, ++idx)
                out[idx] = xv[idx] + bv[ch];
    const bool tracked = any_tracked({x, b});
    Tensor y = t->make(xs, std::move(out), tracked, "bias_add", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, xid = x.id(), bid = b.id(), yid = y.id(), n, c,
                                    spatial]() {
            const auto& g = t->node(yid).grad;
            auto& xn = t->node(xid);
            auto& bn = t->node(bid);
            if (xn.tracked)
                for (std::size_t i = 0; i < g.size(); ++i) xn.grad[i] += g[i];
            if (bn.tracked) {
                std::size_t idx = 0;
                for (int i = 0; i < n; ++i)
                    for (int ch = 0; ch < c; ++ch)
                        for (std::int64_t si = 0; si < spatial; ++si, ++idx)
                            bn.grad[ch] += g[idx];
            }
        };
    }
    return y;
}

Tensor linear(Tensor x, Tensor w, Tensor b) {
    Tape* t = same_tape("linear", {x, w, b});
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    require(xs.size() == 2, "linear", "input must be [n,in], got " + shape_str(xs));
    require(ws.size() == 2 && ws[1] == xs[1], "linear",
            "weight must be [out,in] with in matching input");
    require(b.shape().size() == 1 && b.shape()[0] == ws[0], "linear", "bias must be [out]");
    const int n = xs[0], in = xs[1], out = ws[0];
    std::vector<double> yv(static_cast<std::size_t>(n) * out);
    detail::linear_forward(x.value().data(), w.value().data(), b.value().data(), yv.data(), n,
                           in, out);
    const bool tracked = any_tracked({x, w, b});
    Tensor y = t->make({n, out}, std::move(yv), tracked, "linear", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, xid = x.id(), wid = w.id(), bid = b.id(), yid = y.id(),
                                    n, in, out]() {
            const auto& g = t->node(yid).grad;
            auto& xn = t->node(xid);
            auto& wn = t->node(wid);
            auto& bn = t->node(bid);
            for (int i = 0; i < n; ++i) {
                const double* gr = g.data() + static_cast<std::size_t>(i) * out;
                if (xn.tracked) {
                    double* gx = xn.grad.data() + static_cast<std::size_t>(i) * in;
                    for (int o = 0; o < out; ++o) {
                        const double go = gr[o];
                        const double* wr = wn.value.data() + static_cast<std::size_t>(o) * in;
                        for (int c = 0; c < in; ++c) gx[c] += go * wr[c];
                    }
                }
                if (wn.tracked) {
                    const double* xr = xn.value.data() + static_cast<std::size_t>(i) * in;
                    for (int o = 0; o < out; ++o) {
                        const double go = gr[o];
                        double* gw = wn.grad.data() + static_cast<std::size_t>(o) * in;
                        for (int c = 0; c < in; ++c) gw[c] += go * xr[c];
                    }
                }
                if (bn.tracked)
                    for (int o = 0; o < out; ++o) bn.grad[o] += gr[o];
            }
        };
    }
    return y;
}

Tensor relu(Tensor x) {
    Tape* t = same_tape("relu", {x});
    std::vector<double> out(x.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > 0.0 ? x.value()[i] : 0.0;
    const bool tracked = x.tracked();
    Tensor y = t->make(x.shape(), std::move(out), tracked, "relu", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, xid = x.id(), yid = y.id()]() {
            const auto& g = t->node(yid).grad;
            auto& xn = t->node(xid);
            if (!xn.tracked) return;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xn.value[i] > 0.0) xn.grad[i] += g[i];
        };
    }
    return y;
}

Tensor sigmoid(Tensor x) {
    Tape* t = same_tape("sigmoid", {x});
    std::vector<double> out(x.value().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = detail::sigmoid_scalar(x.value()[i]);
    const bool tracked = x.tracked();
    Tensor y = t->make(x.shape(), std::move(out), tracked, "sigmoid", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, xid = x.id(), yid = y.id()]() {
            const auto& yn = t->node(yid);
            auto& xn = t->node(xid);
            if (!xn.tracked) return;
            for (std::size_t i = 0; i < yn.grad.size(); ++i) {
                const double s = yn.value[i];
                xn.grad[i] += yn.grad[i] * s * (1.0 - s);
            }
        };
    }
    return y;
}

Tensor softmax(Tensor x) {
    Tape* t = same_tape("softmax", {x});
    const Shape& xs = x.shape();
    require(xs.size() == 2, "softmax", "input must be [n,k], got " + shape_str(xs));
    const int n = xs[0], k = xs[1];
    std::vector<double> out(x.value().size());
    detail::softmax_rows(x.value().data(), out.data(), n, k);
    const bool tracked = x.tracked();
    Tensor y = t->make(xs, std::move(out), tracked, "softmax", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, xid = x.id(), yid = y.id(), n, k]() {
            const auto& yn = t->node(yid);
            auto& xn = t->node(xid);
            if (!xn.tracked) return;
            for (int i = 0; i < n; ++i) {
                const double* yr = yn.value.data() + static_cast<std::size_t>(i) * k;
                const double* gr = yn.grad.data() + static_cast<std::size_t>(i) * k;
                double dot = 0.0;
                for (int c = 0; c < k; ++c) dot += yr[c] * gr[c];
                double* gx = xn.grad.data() + static_cast<std::size_t>(i) * k;
                for (int c = 0; c < k; ++c) gx[c] += yr[c] * (gr[c] - dot);
            }
        };
    }
    return y;
}

Tensor gap(Tensor x) {
    Tape* t = same_tape("gap", {x});
    const Shape& xs = x.shape();
    require(xs.size() >= 2, "gap", "input must be [c, spatial...], got " + shape_str(xs));
    const int c = xs[0];
    const std::int64_t spatial = shape_numel(xs) / c;
    std::vector<double> out(static_cast<std::size_t>(c));
    detail::gap_forward(x.value().data(), out.data(), c, spatial);
    const bool tracked = x.tracked();
    Tensor y = t->make({c}, std::move(out), tracked, "gap", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, xid = x.id(), yid = y.id(), c, spatial]() {
            const auto& g = t->node(yid).grad;
            auto& xn = t->node(xid);
            if (!xn.tracked) return;
            for (int ch = 0; ch < c; ++ch) {
                const double gch = g[ch] / static_cast<double>(spatial);
                double* gx = xn.grad.data() + static_cast<std::size_t>(ch) * spatial;
                for (std::int64_t i = 0; i < spatial; ++i) gx[i] += gch;
            }
        };
    }
    return y;
}

Tensor masked_avg_pool(Tensor f, Tensor m, double eps) {
    Tape* t = same_tape("masked_avg_pool", {f, m});
    const Shape& fs = f.shape();
    const Shape& ms = m.shape();
    require(fs.size() >= 2, "masked_avg_pool", "features must be [c, spatial...]");
    require(ms.size() == fs.size() - 1, "masked_avg_pool",
            "mask rank must be feature rank minus the channel axis");
    for (std::size_t i = 0; i < ms.size(); ++i)
        require(ms[i] == fs[i + 1], "masked_avg_pool",
                "mask shape " + shape_str(ms) + " does not match features " + shape_str(fs));
    require(eps > 0.0, "masked_avg_pool", "eps must be positive");
    const int c = fs[0];
    const std::int64_t spatial = shape_numel(ms);
    std::vector<double> out(static_cast<std::size_t>(c));
    detail::masked_avg_pool_forward(f.value().data(), m.value().data(), out.data(), c, spatial,
                                    eps);
    const bool tracked = any_tracked({f, m});
    Tensor z = t->make({c}, std::move(out), tracked, "masked_avg_pool", {});
    if (tracked) {
        t->node(z.id()).backprop = [t, fid = f.id(), mid = m.id(), zid = z.id(), c, spatial,
                                    eps]() {
            const auto& zn = t->node(zid);
            auto& fn = t->node(fid);
            auto& mn = t->node(mid);
            double msum = 0.0;
            for (std::int64_t i = 0; i < spatial; ++i) msum += mn.value[i];
            const double denom = msum + eps;
            if (fn.tracked) {
                for (int ch = 0; ch < c; ++ch) {
                    const double gch = zn.grad[ch] / denom;
                    double* gf = fn.grad.data() + static_cast<std::size_t>(ch) * spatial;
                    for (std::int64_t i = 0; i < spatial; ++i) gf[i] += gch * mn.value[i];
                }
            }
            if (mn.tracked) {
                for (int ch = 0; ch < c; ++ch) {
                    const double gch = zn.grad[ch];
                    const double zch = zn.value[ch];
                    const double* fv = fn.value.data() + static_cast<std::size_t>(ch) * spatial;
                    for (std::int64_t i = 0; i < spatial; ++i)
                        mn.grad[i] += gch * (fv[i] - zch) / denom;
                }
            }
        };
    }
    return z;
}

Tensor channel_scale(Tensor f, Tensor w) {
    Tape* t = same_tape("channel_scale", {f, w});
    const Shape& fs = f.shape();
    require(fs.size() >= 1, "channel_scale", "features must be [c, spatial...]");
    require(w.shape().size() == 1 && w.shape()[0] == fs[0], "channel_scale",
            "weights must be [c] matching the channel axis");
    const int c = fs[0];
    const std::int64_t spatial = shape_numel(fs) / c;
    std::vector<double> out(f.value().size());
    for (int ch = 0; ch < c; ++ch) {
        const double wc = w.value()[static_cast<std::size_t>(ch)];
        const double* fr = f.value().data() + static_cast<std::size_t>(ch) * spatial;
        double* yr = out.data() + static_cast<std::size_t>(ch) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) yr[i] = fr[i] * wc;
    }
    const bool tracked = any_tracked({f, w});
    Tensor y = t->make(fs, std::move(out), tracked, "channel_scale", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, fid = f.id(), wid = w.id(), yid = y.id(), c,
                                    spatial]() {
            const auto& g = t->node(yid).grad;
            auto& fn = t->node(fid);
            auto& wn = t->node(wid);
            for (int ch = 0; ch < c; ++ch) {
                const double* gr = g.data() + static_cast<std::size_t>(ch) * spatial;
                if (fn.tracked) {
                    const double wc = wn.value[static_cast<std::size_t>(ch)];
                    double* gf = fn.grad.data() + static_cast<std::size_t>(ch) * spatial;
                    for (std::int64_t i = 0; i < spatial; ++i) gf[i] += gr[i] * wc;
                }
                if (wn.tracked) {
                    const double* fr = fn.value.data() + static_cast<std::size_t>(ch) * spatial;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < spatial; ++i) acc += gr[i] * fr[i];
                    wn.grad[static_cast<std::size_t>(ch)] += acc;
                }
            }
        };
    }
    return y;
}

Tensor concat(Tensor a, Tensor b) {
    Tape* t = same_tape("concat", {a, b});
    require(a.shape().size() == 1 && b.shape().size() == 1, "concat",
            "both inputs must be rank-1");
    std::vector<double> out;
    out.reserve(a.value().size() + b.value().size());
    out.insert(out.end(), a.value().begin(), a.value().end());
    out.insert(out.end(), b.value().begin(), b.value().end());
    const int na = a.shape()[0], nb = b.shape()[0];
    const bool tracked = any_tracked({a, b});
    Tensor y = t->make({na + nb}, std::move(out), tracked, "concat", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, aid = a.id(), bid = b.id(), yid = y.id(), na, nb]() {
            const auto& g = t->node(yid).grad;
            auto& an = t->node(aid);
            auto& bn = t->node(bid);
            if (an.tracked)
                for (int i = 0; i < na; ++i) an.grad[i] += g[i];
            if (bn.tracked)
                for (int i = 0; i < nb; ++i) bn.grad[i] += g[na + i];
        };
    }
    return y;
}

Tensor reshape(Tensor x, Shape shape) {
    Tape* t = same_tape("reshape", {x});
    require(shape_numel(shape) == shape_numel(x.shape()), "reshape",
            "element count mismatch between " + shape_str(x.shape()) + " and " +
                shape_str(shape));
    const bool tracked = x.tracked();
    Tensor y = t->make(std::move(shape), x.value(), tracked, "reshape", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, xid = x.id(), yid = y.id()]() {
            const auto& g = t->node(yid).grad;
            auto& xn = t->node(xid);
            if (!xn.tracked) return;
            for (std::size_t i = 0; i < g.size(); ++i) xn.grad[i] += g[i];
        };
    }
    return y;
}

Tensor dropout(Tensor x, double p, std::uint64_t seed, bool training) {
    Tape* t = same_tape("dropout", {x});
    require(p >= 0.0 && p < 1.0, "dropout", "p must lie in [0, 1)");
    if (!training || p == 0.0) {
        // Identity pass-through keeps graph structure uniform.
        const bool tracked = x.tracked();
        Tensor y = t->make(x.shape(), x.value(), tracked, "dropout", {});
        if (tracked) {
            t->node(y.id()).backprop = [t, xid = x.id(), yid = y.id()]() {
                const auto& g = t->node(yid).grad;
                auto& xn = t->node(xid);
                if (!xn.tracked) return;
                for (std::size_t i = 0; i < g.size(); ++i) xn.grad[i] += g[i];
            };
        }
        return y;
    }
    Rng rng(seed);
    const double scale = 1.0 / (1.0 - p);
    auto keep = std::make_shared<std::vector<std::uint8_t>>(x.value().size());
    std::vector<double> out(x.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool kept = rng.uniform() >= p;
        (*keep)[i] = kept ? 1 : 0;
        out[i] = kept ? x.value()[i] * scale : 0.0;
    }
    const bool tracked = x.tracked();
    Tensor y = t->make(x.shape(), std::move(out), tracked, "dropout", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, xid = x.id(), yid = y.id(), keep, scale]() {
            const auto& g = t->node(yid).grad;
            auto& xn = t->node(xid);
            if (!xn.tracked) return;
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*keep)[i]) xn.grad[i] += g[i] * scale;
        };
    }
    return y;
}

Tensor cross_entropy_smoothed(Tensor logits, const std::vector<int>& labels, double eps) {
    Tape* t = same_tape("cross_entropy_smoothed", {logits});
    const Shape& ls = logits.shape();
    require(ls.size() == 2, "cross_entropy_smoothed", "logits must be [n,k]");
    const int n = ls[0], k = ls[1];
    require(static_cast<int>(labels.size()) == n, "cross_entropy_smoothed",
            "label count must match batch size");
    require(eps >= 0.0 && eps < 1.0, "cross_entropy_smoothed", "eps must lie in [0, 1)");
    for (int lb : labels)
        require(lb >= 0 && lb < k, "cross_entropy_smoothed", "label out of range");
    // Smoothed target: 1-eps on the true class, eps/(k-1) on each other
    // class (k=1 degenerates to a hard target).
    const double off_target = k > 1 ? eps / (k - 1) : 0.0;
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * k);
    detail::softmax_rows(logits.value().data(), probs->data(), n, k);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* xr = logits.value().data() + static_cast<std::size_t>(i) * k;
        double mx = xr[0];
        for (int c = 1; c < k; ++c) mx = std::max(mx, xr[c]);
        double se = 0.0;
        for (int c = 0; c < k; ++c) se += std::exp(xr[c] - mx);
        const double lse = mx + std::log(se);
        double row = 0.0;
        for (int c = 0; c < k; ++c) {
            const double target =
                c == labels[static_cast<std::size_t>(i)] ? 1.0 - eps : off_target;
            row -= target * (xr[c] - lse);
        }
        loss += row;
    }
    loss /= n;
    const bool tracked = logits.tracked();
    Tensor y = t->make({1}, {loss}, tracked, "cross_entropy_smoothed", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, lid = logits.id(), yid = y.id(), labels, probs, eps,
                                    off_target, n, k]() {
            const double g = t->node(yid).grad[0];
            auto& ln = t->node(lid);
            if (!ln.tracked) return;
            for (int i = 0; i < n; ++i) {
                const double* pr = probs->data() + static_cast<std::size_t>(i) * k;
                double* gl = ln.grad.data() + static_cast<std::size_t>(i) * k;
                for (int c = 0; c < k; ++c) {
                    const double target =
                        c == labels[static_cast<std::size_t>(i)] ? 1.0 - eps : off_target;
                    gl[c] += g * (pr[c] - target) / n;
                }
            }
        };
    }
    return y;
}

Tensor bce_with_logits(Tensor logits, const std::vector<double>& targets) {
    Tape* t = same_tape("bce_with_logits", {logits});
    require(logits.shape().size() == 1, "bce_with_logits", "logits must be rank-1");
    const int n = logits.shape()[0];
    require(static_cast<int>(targets.size()) == n, "bce_with_logits",
            "target count must match logits");
    for (double y : targets)
        require(y >= 0.0 && y <= 1.0, "bce_with_logits", "targets must lie in [0, 1]");
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = logits.value()[static_cast<std::size_t>(i)];
        // log(1 + e^x) - x*y, rewritten to avoid overflow for |x| large.
        loss += std::max(x, 0.0) - x * targets[static_cast<std::size_t>(i)] +
                std::log1p(std::exp(-std::abs(x)));
    }
    loss /= n;
    const bool tracked = logits.tracked();
    Tensor y = t->make({1}, {loss}, tracked, "bce_with_logits", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, lid = logits.id(), yid = y.id(), targets, n]() {
            const double g = t->node(yid).grad[0];
            auto& ln = t->node(lid);
            if (!ln.tracked) return;
            for (int i = 0; i < n; ++i) {
                const double s = detail::sigmoid_scalar(ln.value[static_cast<std::size_t>(i)]);
                ln.grad[static_cast<std::size_t>(i)] +=
                    g * (s - targets[static_cast<std::size_t>(i)]) / n;
            }
        };
    }
    return y;
}

Tensor weighted_sum(Tensor x, const std::vector<double>& weights) {
    Tape* t = same_tape("weighted_sum", {x});
    require(weights.size() == x.value().size(), "weighted_sum",
            "weight count must match element count");
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * x.value()[i];
    const bool tracked = x.tracked();
    Tensor y = t->make({1}, {acc}, tracked, "weighted_sum", {});
    if (tracked) {
        t->node(y.id()).backprop = [t, xid = x.id(), yid = y.id(), weights]() {
            const double g = t->node(yid).grad[0];
            auto& xn = t->node(xid);
            if (!xn.tracked) return;
            for (std::size_t i = 0; i < weights.size(); ++i) xn.grad[i] += g * weights[i];
        };
    }
    return y;
}

ChannelGate channel_gate(Tensor f, Tensor z, Tensor w1, Tensor b1, Tensor w2, Tensor b2) {
    require(z.shape().size() == 1, "channel_gate", "pooled descriptor must be rank-1");
    const int c = z.shape()[0];
    require(f.shape().size() >= 1 && f.shape()[0] == c, "channel_gate",
            "feature channel axis must match descriptor length");
    Tensor h = relu(linear(reshape(z, {1, c}), w1, b1));
    Tensor w = sigmoid(reshape(linear(h, w2, b2), {c}));
    ChannelGate out;
    out.w = w;
    out.f_att = channel_scale(f, w);
    return out;
}

} // namespace vb::nn
