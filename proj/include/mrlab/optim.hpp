#pragma once

#include <cmath>
#include <vector>

#include "mrlab/tensor.hpp"

namespace mrlab {

// Adam with bias correction and a constant learning rate.
class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
        if (params.size() != grads.size()) {
            throw ShapeError("Adam: " + std::to_string(params.size()) + " params vs " +
                             std::to_string(grads.size()) + " grads");
        }
        if (m_.empty()) {
            for (const Tensor* p : params) {
                m_.emplace_back(p->rows(), p->cols());
                v_.emplace_back(p->rows(), p->cols());
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Tensor& p = *params[pi];
            const Tensor& g = grads[pi];
            for (std::size_t i = 0; i < p.size(); ++i) {
                m_[pi][i] = beta1_ * m_[pi][i] + (1.0 - beta1_) * g[i];
                v_[pi][i] = beta2_ * v_[pi][i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = m_[pi][i] / bc1;
                const double vhat = v_[pi][i] / bc2;
                p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    std::size_t steps() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

} // namespace mrlab
