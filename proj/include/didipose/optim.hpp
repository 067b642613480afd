#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "didipose/tensor.hpp"

namespace didipose {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// AdamW with decoupled weight decay and bias correction:
//   m <- b1 m + (1-b1) g         v <- b2 v + (1-b2) g^2
//   p <- p - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * p )
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
        if (params.size() != grads.size())
            throw DimensionError("adamw_step: " + std::to_string(params.size()) + " params vs " +
                                 std::to_string(grads.size()) + " grads");
        if (m_.empty()) {
            for (const Tensor* p : params) {
                m_.emplace_back(p->shape());
                v_.emplace_back(p->shape());
            }
        }
        if (m_.size() != params.size()) throw DimensionError("adamw_step: parameter set changed size");
        ++step_count_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor& p = *params[k];
            const Tensor& g = grads[k];
            if (!p.same_shape(g))
                throw DimensionError("adamw_step: grad shape " + shape_str(g.shape()) +
                                     " does not match param " + shape_str(p.shape()));
            Tensor& m = m_[k];
            Tensor& v = v_[k];
            for (std::int64_t i = 0; i < p.size(); ++i) {
                m.mut()[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v.mut()[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p.mut()[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
            }
        }
    }

    std::int64_t step_count() const { return step_count_; }
    const AdamWConfig& config() const { return cfg_; }

    // Moment accessors for checkpointing/resume.
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    void restore(std::vector<Tensor> m, std::vector<Tensor> v, std::int64_t steps) {
        m_ = std::move(m);
        v_ = std::move(v);
        step_count_ = steps;
    }

private:
    AdamWConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::int64_t step_count_ = 0;
};

}  // namespace didipose
