#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vb/nn/tensor.hpp"

namespace vb::nn {

// A named trainable parameter that persists across tape episodes. Each
// episode binds the value as a tracked leaf and accumulates the harvested
// leaf gradient into `grad`.
struct NamedParam {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
};

class ParamStore {
public:
    NamedParam& add(std::string name, Shape shape, std::vector<double> value);

    std::size_t size() const { return items_.size(); }
    NamedParam& at(std::size_t i) { return items_[i]; }
    const NamedParam& at(std::size_t i) const { return items_[i]; }
    NamedParam& by_name(const std::string& name);
    const NamedParam& by_name(const std::string& name) const;
    bool has(const std::string& name) const;

    void zero_grads();
    double grad_norm() const; // L2 norm over every gradient element

    // Scales all gradients by max_norm / norm when norm exceeds max_norm;
    // no-op otherwise. Returns the pre-clip norm.
    double clip_grad_norm(double max_norm);

private:
    std::vector<NamedParam> items_;
};

struct AdamWConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

// AdamW with decoupled weight decay:
//   p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    // `lr` overrides cfg.lr for this step (the schedule feeds it per epoch).
    void step(ParamStore& params, double lr);
    void step(ParamStore& params) { step(params, cfg_.lr); }

    std::int64_t steps_taken() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

// Cosine annealing with warm restarts and a fixed period: the learning
// rate returns to lr_max at epochs 0, period, 2*period, ...
struct CosineWarmRestarts {
    double lr_max = 5e-5;
    double lr_min = 0.0;
    int period = 10;

    double lr_at(int epoch) const;
};

} // namespace vb::nn
