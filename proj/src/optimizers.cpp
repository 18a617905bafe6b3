#include <cmath>
#include <stdexcept>

#include "relsearch/train_eval.hpp"

namespace relsearch {

LossKind loss_kind_from_index(int index) {
    if (index < 0 || index >= kLossChoices) throw std::out_of_range("loss index " + std::to_string(index));
    return static_cast<LossKind>(index);
}

OptimizerKind optimizer_kind_from_index(int index) {
    if (index < 0 || index >= kOptChoices) {
        throw std::out_of_range("optimizer index " + std::to_string(index));
    }
    return static_cast<OptimizerKind>(index);
}

SchedulerKind scheduler_kind_from_index(int index) {
    if (index < 0 || index >= kSchedChoices) {
        throw std::out_of_range("scheduler index " + std::to_string(index));
    }
    return static_cast<SchedulerKind>(index);
}

const char* loss_kind_name(LossKind kind) {
    switch (kind) {
        case LossKind::Dice: return "dice";
        case LossKind::DiceSquared: return "dice_squared";
        case LossKind::CrossEntropy: return "ce";
        case LossKind::DiceCE: return "dice_ce";
        case LossKind::DiceFocal: return "dice_focal";
    }
    return "?";
}

const char* optimizer_kind_name(OptimizerKind kind) {
    switch (kind) {
        case OptimizerKind::Adam: return "adam";
        case OptimizerKind::SGD: return "sgd";
        case OptimizerKind::Momentum: return "momentum";
        case OptimizerKind::Nesterov: return "nesterov";
        case OptimizerKind::NovoGrad: return "novograd";
    }
    return "?";
}

const char* scheduler_kind_name(SchedulerKind kind) {
    return kind == SchedulerKind::Constant ? "constant" : "polynomial";
}

void Optimizer::step(ParamSet& params, double lr) {
    check_finite_gradients(params);
    auto& ps = params.tensors();
    if (m_.size() != ps.size()) {
        m_.clear();
        v_.clear();
        for (const auto& p : ps) {
            m_.push_back(zeros_like(p.value));
            if (kind_ == OptimizerKind::Adam) v_.push_back(zeros_like(p.value));
        }
        layer_v_.assign(ps.size(), 0.0);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t_));

    for (std::size_t k = 0; k < ps.size(); ++k) {
        Tensor& w = ps[k].value;
        const Tensor& g = ps[k].grad;
        if (g.numel() != w.numel()) {
            throw std::invalid_argument("gradient shape mismatch for " + ps[k].role);
        }
        Tensor& m = m_[k];
        const std::size_t n = w.numel();
        switch (kind_) {
            case OptimizerKind::Adam: {
                Tensor& v = v_[k];
                for (std::size_t i = 0; i < n; ++i) {
                    m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g[i];
                    v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
                    w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kOptEps);
                }
                break;
            }
            case OptimizerKind::SGD:
                for (std::size_t i = 0; i < n; ++i) w[i] -= lr * g[i];
                break;
            case OptimizerKind::Momentum:
                for (std::size_t i = 0; i < n; ++i) {
                    m[i] = kMomentum * m[i] + g[i];
                    w[i] -= lr * m[i];
                }
                break;
            case OptimizerKind::Nesterov:
                for (std::size_t i = 0; i < n; ++i) {
                    m[i] = kMomentum * m[i] + g[i];
                    w[i] -= lr * (g[i] + kMomentum * m[i]);
                }
                break;
            case OptimizerKind::NovoGrad: {
                double norm2 = 0.0;
                for (std::size_t i = 0; i < n; ++i) norm2 += g[i] * g[i];
                double& v = layer_v_[k];
                v = t_ == 1 ? norm2 : kNovoBeta2 * v + (1.0 - kNovoBeta2) * norm2;
                const double denom = std::sqrt(v) + kOptEps;
                for (std::size_t i = 0; i < n; ++i) {
                    m[i] = kNovoBeta1 * m[i] + g[i] / denom;
                    w[i] -= lr * m[i];
                }
                break;
            }
        }
    }
}

double lr_at(int sched_idx, double base_lr, long iter, long max_iter) {
    if (scheduler_kind_from_index(sched_idx) == SchedulerKind::Constant || max_iter <= 0) {
        return base_lr;
    }
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iter);
    return base_lr * std::pow(std::max(frac, 0.0), kPolyPower);
}

}  // namespace relsearch
