#pragma once

// SGD with Nesterov momentum, Adam, and AdamW (decoupled weight decay).
// Frozen parameters carry no state and are never touched.

#include <string>
#include <unordered_map>
#include <vector>

#include "densefew/errors.hpp"
#include "densefew/layers.hpp"
#include "densefew/tensor.hpp"

namespace densefew {

enum class OptKind { SgdNesterov, Adam, AdamW };

struct OptimizerConfig {
    OptKind kind = OptKind::SgdNesterov;
    double lr = 0.1;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    OptimizerConfig& config() { return cfg_; }

    // One update over all unfrozen params; grads must be populated.
    void step(const std::vector<ParamRef>& params) {
        ++t_;
        for (const auto& p : params) {
            Node& node = *p.var;
            if (!node.t.requires_grad) continue;  // frozen
            if (node.t.grad.size() != node.t.values.size())
                throw StateError("optimizer: missing gradient for parameter " + p.name);
            auto& slot = state_[&node];
            switch (cfg_.kind) {
                case OptKind::SgdNesterov: sgd_step(node, slot); break;
                case OptKind::Adam: adam_step(node, slot, false); break;
                case OptKind::AdamW: adam_step(node, slot, true); break;
            }
        }
    }

    void zero_grad(const std::vector<ParamRef>& params) {
        for (const auto& p : params) {
            Node& node = *p.var;
            if (!node.t.requires_grad) continue;
            node.ensure_grad();
            std::fill(node.t.grad.begin(), node.t.grad.end(), 0.0);
        }
    }

    std::int64_t steps() const { return t_; }

private:
    struct Slot {
        std::vector<double> m;  // momentum / first moment
        std::vector<double> v;  // second moment
    };

    void sgd_step(Node& node, Slot& slot) {
        if (slot.m.empty()) slot.m.assign(node.t.values.size(), 0.0);
        double mu = cfg_.momentum;
        for (std::size_t i = 0; i < node.t.values.size(); ++i) {
            double g = node.t.grad[i] + cfg_.weight_decay * node.t.values[i];
            slot.m[i] = mu * slot.m[i] + g;
            node.t.values[i] -= cfg_.lr * (g + mu * slot.m[i]);
        }
    }

    void adam_step(Node& node, Slot& slot, bool decoupled) {
        if (slot.m.empty()) {
            slot.m.assign(node.t.values.size(), 0.0);
            slot.v.assign(node.t.values.size(), 0.0);
        }
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < node.t.values.size(); ++i) {
            double g = node.t.grad[i];
            if (!decoupled) g += cfg_.weight_decay * node.t.values[i];
            slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g;
            slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g * g;
            double mhat = slot.m[i] / bc1;
            double vhat = slot.v[i] / bc2;
            if (decoupled) node.t.values[i] -= cfg_.lr * cfg_.weight_decay * node.t.values[i];
            node.t.values[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }

    OptimizerConfig cfg_;
    std::int64_t t_ = 0;
    std::unordered_map<Node*, Slot> state_;
};

}  // namespace densefew
