#include <cmath>
#include <stdexcept>

#include "relsearch/train_eval.hpp"

namespace relsearch {

namespace {

void check_pair(const Tensor& probs, const Tensor& onehot) {
    if (probs.shape != onehot.shape) {
        throw std::invalid_argument("shape-mismatch: prediction " + shape_to_string(probs.shape) +
                                    " vs target " + shape_to_string(onehot.shape));
    }
    if (probs.rank() < 2 || probs.dim(0) < 2) {
        throw std::invalid_argument("shape-mismatch: need [K >= 2, ...], got " +
                                    shape_to_string(probs.shape));
    }
}

Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

}  // namespace

namespace ad {

Var dice_loss(Tape& t, Var probs, const Tensor& onehot, bool squared) {
    const Tensor& p = t.value(probs);
    check_pair(p, onehot);
    const std::size_t k = p.dim(0);
    const std::size_t n = p.numel() / k;
    const double fg = static_cast<double>(k - 1);
    std::vector<double> inter(k, 0.0), denom(k, 0.0);
    double loss = 0.0;
    for (std::size_t c = 1; c < k; ++c) {
        const double* pc = p.data.data() + c * n;
        const double* gc = onehot.data.data() + c * n;
        double i_sum = 0.0, p_sum = 0.0, g_sum = 0.0;
        for (std::size_t v = 0; v < n; ++v) {
            i_sum += pc[v] * gc[v];
            p_sum += squared ? pc[v] * pc[v] : pc[v];
            g_sum += squared ? gc[v] * gc[v] : gc[v];
        }
        inter[c] = i_sum;
        denom[c] = p_sum + g_sum + kDiceEps;
        loss += 1.0 - (2.0 * i_sum + kDiceEps) / denom[c];
    }
    loss /= fg;
    return t.record(scalar(loss), {probs},
                    [probs, onehot, squared, k, n, fg, inter, denom](Tape& tp, Var self) {
                        const double g = tp.grad(self)[0];
                        const Tensor& p = tp.value(probs);
                        Tensor& gp = tp.grad(probs);
                        for (std::size_t c = 1; c < k; ++c) {
                            const double s = denom[c];
                            const double num = 2.0 * inter[c] + kDiceEps;
                            for (std::size_t v = 0; v < n; ++v) {
                                const std::size_t i = c * n + v;
                                const double dp = squared ? 2.0 * p[i] : 1.0;
                                gp[i] -= g / fg * (2.0 * onehot[i] / s - num * dp / (s * s));
                            }
                        }
                    });
}

Var cross_entropy_loss(Tape& t, Var probs, const Tensor& onehot) {
    return focal_loss(t, probs, onehot, 0.0);
}

Var focal_loss(Tape& t, Var probs, const Tensor& onehot, double gamma) {
    const Tensor& p = t.value(probs);
    check_pair(p, onehot);
    const double voxels = static_cast<double>(p.numel() / p.dim(0));
    double loss = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        if (onehot[i] == 0.0) continue;
        const double pc = std::max(p[i], kProbFloor);
        const double w = gamma == 0.0 ? 1.0 : std::pow(1.0 - p[i], gamma);
        loss -= onehot[i] * w * std::log(pc);
    }
    loss /= voxels;
    return t.record(scalar(loss), {probs}, [probs, onehot, gamma, voxels](Tape& tp, Var self) {
        const double g = tp.grad(self)[0] / voxels;
        const Tensor& p = tp.value(probs);
        Tensor& gp = tp.grad(probs);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            if (onehot[i] == 0.0 || p[i] <= kProbFloor) continue;
            double d = -1.0 / p[i];
            if (gamma != 0.0) {
                const double q = 1.0 - p[i];
                d = gamma * std::pow(q, gamma - 1.0) * std::log(p[i]) - std::pow(q, gamma) / p[i];
            }
            gp[i] += g * onehot[i] * d;
        }
    });
}

Var combined_loss(Tape& t, int loss_idx, Var probs, const Tensor& onehot) {
    switch (loss_kind_from_index(loss_idx)) {
        case LossKind::Dice:
            return dice_loss(t, probs, onehot, false);
        case LossKind::DiceSquared:
            return dice_loss(t, probs, onehot, true);
        case LossKind::CrossEntropy:
            return cross_entropy_loss(t, probs, onehot);
        case LossKind::DiceCE:
            return add(t, dice_loss(t, probs, onehot, false), cross_entropy_loss(t, probs, onehot));
        case LossKind::DiceFocal:
            return add(t, dice_loss(t, probs, onehot, false), focal_loss(t, probs, onehot));
    }
    throw std::out_of_range("loss index");
}

}  // namespace ad

namespace {

template <typename Fn>
double evaluate(const Tensor& probs, Fn fn) {
    Tape t;
    return t.value(fn(t, t.constant(probs)))[0];
}

}  // namespace

double dice_loss(const Tensor& probs, const Tensor& onehot, bool squared) {
    return evaluate(probs, [&](Tape& t, Var p) { return ad::dice_loss(t, p, onehot, squared); });
}

double cross_entropy_loss(const Tensor& probs, const Tensor& onehot) {
    return evaluate(probs, [&](Tape& t, Var p) { return ad::cross_entropy_loss(t, p, onehot); });
}

double focal_loss(const Tensor& probs, const Tensor& onehot, double gamma) {
    return evaluate(probs, [&](Tape& t, Var p) { return ad::focal_loss(t, p, onehot, gamma); });
}

double combined_loss(int loss_idx, const Tensor& probs, const Tensor& onehot) {
    return evaluate(probs,
                    [&](Tape& t, Var p) { return ad::combined_loss(t, loss_idx, p, onehot); });
}

}  // namespace relsearch
