#include "vb/nn/gradcheck.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace vb::nn {

namespace {

double eval_loss(const std::vector<GradCheckInput>& inputs,
                 const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& build) {
    Tape tape;
    std::vector<Tensor> ts;
    ts.reserve(inputs.size());
    for (const auto& in : inputs) ts.push_back(tape.constant(in.shape, in.value));
    Tensor loss = build(tape, ts);
    if (loss.value().size() != 1)
        throw std::invalid_argument("grad_check: build must return a scalar loss");
    return loss.value()[0];
}

} // namespace

GradCheckReport grad_check(
    const std::vector<GradCheckInput>& inputs,
    const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& build, double h,
    double abs_floor) {
    if (h <= 0.0) throw std::invalid_argument("grad_check: step size must be positive");

    // Analytic pass: every input becomes a tracked leaf.
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        std::vector<Tensor> ts;
        ts.reserve(inputs.size());
        for (const auto& in : inputs) ts.push_back(tape.leaf(in.shape, in.value));
        Tensor loss = build(tape, ts);
        if (loss.value().size() != 1)
            throw std::invalid_argument("grad_check: build must return a scalar loss");
        if (!std::isfinite(loss.value()[0]))
            throw std::runtime_error("grad_check: loss is not finite");
        tape.backward(loss);
        analytic.reserve(ts.size());
        for (const auto& t : ts) analytic.push_back(t.grad());
    }

    // Numeric pass: central differences, one element at a time.
    GradCheckReport report;
    std::vector<GradCheckInput> probe = inputs;
    for (std::size_t p = 0; p < probe.size(); ++p) {
        for (std::size_t e = 0; e < probe[p].value.size(); ++e) {
            const double keep = probe[p].value[e];
            probe[p].value[e] = keep + h;
            const double up = eval_loss(probe, build);
            probe[p].value[e] = keep - h;
            const double down = eval_loss(probe, build);
            probe[p].value[e] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[p][e];
            const double diff = std::abs(a - numeric);
            double rel = 0.0;
            if (diff > abs_floor) {
                const double denom = std::max(std::abs(a), std::abs(numeric));
                rel = denom > 0.0 ? diff / denom : std::numeric_limits<double>::infinity();
            }
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_input = static_cast<int>(p);
                report.worst_index = static_cast<std::int64_t>(e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

} // namespace vb::nn
