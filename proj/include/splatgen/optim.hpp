#pragma once

#include <cmath>
#include <map>
#include <string>

#include "splatgen/nn.hpp"

namespace splatgen {
namespace nn {

// Decoupled weight decay Adam. Moments are keyed by parameter name and
// created on first step.
template <typename T>
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 4e-2;
    int64_t step_count = 0;

    std::map<std::string, Tensor<T>> m, v;

    void step(ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads, double lr) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (const auto& name : params.names) {
            Tensor<T>& p = params.at(name);
            auto git = grads.find(name);
            const Tensor<T>* g = git == grads.end() ? nullptr : &git->second;
            if (g && !g->all_finite())
                fail(ErrorCode::numeric, "adamw: non-finite gradient for parameter " + name);
            Tensor<T>& mv = m.try_emplace(name, Tensor<T>::zeros(p.shape)).first->second;
            Tensor<T>& vv = v.try_emplace(name, Tensor<T>::zeros(p.shape)).first->second;
            for (int64_t i = 0; i < p.numel(); ++i) {
                const double gi = g ? static_cast<double>((*g)[i]) : 0.0;
                const double mi = beta1 * static_cast<double>(mv[i]) + (1.0 - beta1) * gi;
                const double vi = beta2 * static_cast<double>(vv[i]) + (1.0 - beta2) * gi * gi;
                mv[i] = static_cast<T>(mi);
                vv[i] = static_cast<T>(vi);
                const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
                p[i] = static_cast<T>(static_cast<double>(p[i]) -
                                      lr * (update + weight_decay * static_cast<double>(p[i])));
            }
        }
    }
};

// Linear warmup to max_lr over `warmup` steps, then cosine decay to zero at
// total_steps.
inline double cosine_warmup_lr(int64_t step, int64_t warmup, double max_lr, int64_t total_steps) {
    if (step < 0) fail(ErrorCode::argument, "cosine_warmup_lr: negative step");
    if (warmup > 0 && step < warmup) return max_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= total_steps) return 0.0;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(std::max<int64_t>(1, total_steps - warmup));
    return max_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// Compares analytic tape gradients of a scalar-valued graph against central
// finite differences over every input coordinate. `build` must be a pure
// function of the leaf values.
template <typename F>
double grad_check(F&& build, std::vector<Tensor<double>> inputs, double step = 1e-4) {
    ad::Tape<double> tape;
    std::vector<ad::Val<double>> leaves;
    for (auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    ad::Val<double> root = build(tape, leaves);
    tape.backward(root);

    std::vector<Tensor<double>> analytic;
    for (auto& leaf : leaves) analytic.push_back(tape.grad(leaf.id));

    double worst = 0;
    for (size_t k = 0; k < inputs.size(); ++k) {
        for (int64_t i = 0; i < inputs[k].numel(); ++i) {
            const double orig = inputs[k][i];
            auto eval = [&](double x) {
                inputs[k][i] = x;
                ad::Tape<double> t2;
                std::vector<ad::Val<double>> l2;
                for (auto& t : inputs) l2.push_back(t2.leaf(t, false));
                return build(t2, l2).value()[0];
            };
            const double fp = eval(orig + step);
            const double fm = eval(orig - step);
            inputs[k][i] = orig;
            const double fd = (fp - fm) / (2 * step);
            const double a = analytic[k][i];
            worst = std::max(worst, std::abs(fd - a) / std::max({std::abs(fd), std::abs(a), 1e-6}));
        }
    }
    return worst;
}

}  // namespace nn
}  // namespace splatgen
