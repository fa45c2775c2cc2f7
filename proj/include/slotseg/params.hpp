#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "slotseg/tensor.hpp"

namespace slotseg {

// Named parameter store. Indices are assigned in registration order and stay
// stable for the lifetime of the registry, so gradient buffers and optimizer
// state can be plain parallel arrays.
class ParamRegistry {
  public:
    int add(const std::string& name, Tensor init) {
        if (by_name_.count(name)) throw ConfigError("ParamRegistry: duplicate parameter '" + name + "'");
        const int idx = static_cast<int>(values_.size());
        by_name_[name] = idx;
        names_.push_back(name);
        values_.push_back(std::move(init));
        return idx;
    }

    bool has(const std::string& name) const { return by_name_.count(name) > 0; }

    int index(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw ConfigError("ParamRegistry: unknown parameter '" + name + "'");
        return it->second;
    }

    const std::string& name(int idx) const { return names_[static_cast<size_t>(idx)]; }
    Tensor& value(int idx) { return values_[static_cast<size_t>(idx)]; }
    const Tensor& value(int idx) const { return values_[static_cast<size_t>(idx)]; }
    Tensor& value(const std::string& name) { return values_[static_cast<size_t>(index(name))]; }
    const Tensor& value(const std::string& name) const {
        return values_[static_cast<size_t>(index(name))];
    }

    int count() const { return static_cast<int>(values_.size()); }

    int64_t total_scalars() const {
        int64_t n = 0;
        for (const auto& t : values_) n += t.size();
        return n;
    }

  private:
    std::map<std::string, int> by_name_;
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
};

// Per-parameter gradient accumulator aligned with a registry.
struct GradBuffer {
    std::vector<Tensor> g;

    void init_like(const ParamRegistry& reg) {
        g.clear();
        g.reserve(static_cast<size_t>(reg.count()));
        for (int i = 0; i < reg.count(); ++i) g.emplace_back(reg.value(i).shape);
    }

    void zero() {
        for (auto& t : g) std::fill(t.v.begin(), t.v.end(), 0.0);
    }

    void add(const GradBuffer& other) {
        if (other.g.size() != g.size()) throw ShapeError("GradBuffer::add: buffer count mismatch");
        for (size_t i = 0; i < g.size(); ++i) add_scaled(g[i], other.g[i]);
    }

    void scale(double s) {
        for (auto& t : g)
            for (double& x : t.v) x *= s;
    }

    bool all_finite() const {
        for (const auto& t : g)
            if (!t.all_finite()) return false;
        return true;
    }
};

// Adam with bias correction; no weight decay, no gradient clipping.
class AdamOptimizer {
  public:
    AdamOptimizer(const ParamRegistry& reg, double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (int i = 0; i < reg.count(); ++i) {
            m_.emplace_back(reg.value(i).shape);
            v_.emplace_back(reg.value(i).shape);
        }
    }

    void step(ParamRegistry& reg, const GradBuffer& grads) {
        if (static_cast<int>(m_.size()) != reg.count())
            throw ShapeError("AdamOptimizer::step: registry size changed");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (int i = 0; i < reg.count(); ++i) {
            Tensor& p = reg.value(i);
            const Tensor& gr = grads.g[static_cast<size_t>(i)];
            Tensor& m = m_[static_cast<size_t>(i)];
            Tensor& v = v_[static_cast<size_t>(i)];
            const size_t n = p.v.size();
            for (size_t j = 0; j < n; ++j) {
                const double g = gr.v[j];
                m.v[j] = beta1_ * m.v[j] + (1.0 - beta1_) * g;
                v.v[j] = beta2_ * v.v[j] + (1.0 - beta2_) * g * g;
                const double mhat = m.v[j] / bc1;
                const double vhat = v.v[j] / bc2;
                p.v[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    int64_t steps_taken() const { return t_; }
    const std::vector<Tensor>& first_moment() const { return m_; }
    const std::vector<Tensor>& second_moment() const { return v_; }

    // Restore optimizer state from a checkpoint.
    void restore(int64_t t, std::vector<Tensor> m, std::vector<Tensor> v) {
        if (m.size() != m_.size() || v.size() != v_.size())
            throw IoError("AdamOptimizer::restore: state tensor count mismatch");
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

    double learning_rate() const { return lr_; }

  private:
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace slotseg
