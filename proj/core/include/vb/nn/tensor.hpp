#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace vb::nn {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Lightweight handle into a Tape. Valid only while its tape is alive; a
// tape owns one forward/backward episode and is then discarded.
class Tensor {
public:
    Tensor() = default;

    const Shape& shape() const;
    const std::vector<double>& value() const;
    const std::vector<double>& grad() const; // zeros until backward() ran
    bool tracked() const;
    int id() const { return id_; }
    Tape* tape() const { return tape_; }

private:
    friend class Tape;
    Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Reverse-mode tape: records ops in construction (topological) order and
// replays them backwards once. 64-bit values throughout; the 32-bit
// inference path lives in kernels.hpp and does not touch the tape.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Untracked input (no gradient flows into it).
    Tensor constant(Shape shape, std::vector<double> value);
    // Tracked leaf (gradient accumulated during backward).
    Tensor leaf(Shape shape, std::vector<double> value);

    // Propagates d(loss)/d(node) to every tracked node. `loss` must be a
    // scalar on this tape. A tape runs backward at most once.
    void backward(Tensor loss);
    bool backward_done() const { return backward_done_; }

    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad; // allocated only when tracked
        bool tracked = false;
        const char* op = "leaf";
        std::function<void()> backprop; // adds into input grads
    };

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

    Tensor make(Shape shape, std::vector<double> value, bool tracked, const char* op,
                std::function<void()> backprop);

private:
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// --- differentiable ops -------------------------------------------------
// All ops validate shapes and throw std::invalid_argument on mismatch.

// x: [n, ci, d, h, w], k: [co, ci, kd, kh, kw] -> [n, co, od, oh, ow].
// Uses the blocked kernel; agreement with the reference kernel is a
// tested contract (see kernels.hpp).
Tensor conv3d(Tensor x, Tensor k, int stride, int pad);

// Adds b[c] across channel dim of x: [n, c, spatial...].
Tensor bias_add(Tensor x, Tensor b);

// x: [n, in], w: [out, in], b: [out] -> [n, out].
Tensor linear(Tensor x, Tensor w, Tensor b);

Tensor relu(Tensor x);
Tensor sigmoid(Tensor x);

// Row-wise softmax over [n, k].
Tensor softmax(Tensor x);

// Mean over spatial dims: [c, spatial...] -> [c].
Tensor gap(Tensor x);

// f: [c, d, h, w], m: [d, h, w] (0/1 weights) -> [c].
// z_c = sum(f_c * m) / (sum(m) + eps). Voxels with m == 0 contribute
// exactly nothing (0 * x followed by + 0.0 is exact in IEEE arithmetic).
Tensor masked_avg_pool(Tensor f, Tensor m, double eps = 1e-6);

// f: [c, spatial...] scaled per channel by w: [c].
Tensor channel_scale(Tensor f, Tensor w);

// 1-D concatenation [a] + [b] -> [a + b]; order of arguments preserved.
Tensor concat(Tensor a, Tensor b);

Tensor reshape(Tensor x, Shape shape);

// Training-mode dropout: keeps each element with probability 1-p and
// scales kept values by 1/(1-p); identity when training == false.
// The drop pattern is fully determined by `seed`.
Tensor dropout(Tensor x, double p, std::uint64_t seed, bool training);

// Label-smoothed cross entropy over logits [n, k]; targets are class
// indices. Smoothed target mass: 1 - eps on the true class, eps/(k-1) on
// each other class. Returns the mean over rows.
Tensor cross_entropy_smoothed(Tensor logits, const std::vector<int>& labels, double eps);

// Binary cross entropy on logits [n] against targets in [0, 1]; mean over
// rows, computed in the numerically stable log1p form.
Tensor bce_with_logits(Tensor logits, const std::vector<double>& targets);

// Scalar sum_i weights[i] * x[i] over the flattened tensor; the standard
// way tests scalarise a non-scalar output for gradient checking.
Tensor weighted_sum(Tensor x, const std::vector<double>& weights);

// Squeeze-style channel gate: w = sigmoid(w2 @ relu(w1 @ z + b1) + b2),
// returned alongside f_att = f scaled per channel by w.
struct ChannelGate {
    Tensor w;     // [c] gate values in (0, 1)
    Tensor f_att; // [c, spatial...] gated features
};
ChannelGate channel_gate(Tensor f, Tensor z, Tensor w1, Tensor b1, Tensor w2, Tensor b2);

} // namespace vb::nn
