#include "vb/nn/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace vb::nn {

NamedParam& ParamStore::add(std::string name, Shape shape, std::vector<double> value) {
    if (has(name)) throw std::invalid_argument("parameter already exists: " + name);
    if (shape_numel(shape) != static_cast<std::int64_t>(value.size()))
        throw std::invalid_argument("parameter payload does not match shape: " + name);
    NamedParam p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    p.value = std::move(value);
    p.grad.assign(p.value.size(), 0.0);
    items_.push_back(std::move(p));
    return items_.back();
}

NamedParam& ParamStore::by_name(const std::string& name) {
    for (auto& p : items_)
        if (p.name == name) return p;
    throw std::out_of_range("no such parameter: " + name);
}

const NamedParam& ParamStore::by_name(const std::string& name) const {
    for (const auto& p : items_)
        if (p.name == name) return p;
    throw std::out_of_range("no such parameter: " + name);
}

bool ParamStore::has(const std::string& name) const {
    for (const auto& p : items_)
        if (p.name == name) return true;
    return false;
}

void ParamStore::zero_grads() {
    for (auto& p : items_)
        for (double& g : p.grad) g = 0.0;
}

double ParamStore::grad_norm() const {
    double sq = 0.0;
    for (const auto& p : items_)
        for (double g : p.grad) sq += g * g;
    return std::sqrt(sq);
}

double ParamStore::clip_grad_norm(double max_norm) {
    if (max_norm <= 0.0) throw std::invalid_argument("clip threshold must be positive");
    const double norm = grad_norm();
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& p : items_)
            for (double& g : p.grad) g *= scale;
    }
    return norm;
}

void AdamW::step(ParamStore& params, double lr) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params.at(i).value.size(), 0.0);
            v_[i].assign(params.at(i).value.size(), 0.0);
        }
    }
    if (m_.size() != params.size())
        throw std::invalid_argument("optimizer state does not match parameter store");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params.at(i);
        auto& m = m_[i];
        auto& v = v_[i];
        if (m.size() != p.value.size())
            throw std::invalid_argument("optimizer state does not match parameter " + p.name);
        for (std::size_t e = 0; e < p.value.size(); ++e) {
            const double g = p.grad[e];
            m[e] = cfg_.beta1 * m[e] + (1.0 - cfg_.beta1) * g;
            v[e] = cfg_.beta2 * v[e] + (1.0 - cfg_.beta2) * g * g;
            const double m_hat = m[e] / bc1;
            const double v_hat = v[e] / bc2;
            p.value[e] -=
                lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay * p.value[e]);
        }
    }
}

double CosineWarmRestarts::lr_at(int epoch) const {
    if (period <= 0) throw std::invalid_argument("schedule period must be positive");
    if (epoch < 0) throw std::invalid_argument("epoch must be non-negative");
    const int t_cur = epoch % period;
    constexpr double pi = 3.14159265358979323846;
    return lr_min +
           0.5 * (lr_max - lr_min) * (1.0 + std::cos(pi * static_cast<double>(t_cur) / period));
}

} // namespace vb::nn
