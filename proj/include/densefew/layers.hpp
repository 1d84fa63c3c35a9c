#pragma once

// Parameterized layers on top of the autodiff core: 2-D convolution with
// batch normalization, freezing, and named state collection for
// checkpointing and optimizers.

#include <string>
#include <utility>
#include <vector>

#include "densefew/rng.hpp"
#include "densefew/tensor.hpp"

namespace densefew {

struct ParamRef {
    std::string name;
    Var var;
};

// Named view of a persistent array (parameter or running statistic) for
// checkpoint serialization.
struct StateRef {
    std::string name;
    Shape shape;
    std::vector<double>* values;
};

inline void set_trainable(const Var& v, bool trainable) {
    v->t.requires_grad = trainable;
    v->needs_grad = trainable;
}

class Conv2dLayer {
public:
    Conv2dLayer() = default;

    // He-normal init: zero-mean, stddev sqrt(2 / fan_in)
    Conv2dLayer(std::int64_t kh, std::int64_t kw, std::int64_t cin, std::int64_t cout,
                std::int64_t stride, std::int64_t pad, Rng& rng)
        : stride_(stride), pad_(pad) {
        std::vector<double> w(static_cast<std::size_t>(kh * kw * cin * cout));
        double stddev = std::sqrt(2.0 / static_cast<double>(kh * kw * cin));
        for (auto& x : w) x = rng.normal(0.0, stddev);
        kernel_ = param({kh, kw, cin, cout}, std::move(w));
    }

    Var forward(const Var& x) const { return conv2d(x, kernel_, stride_, pad_); }

    void freeze() {
        frozen_ = true;
        set_trainable(kernel_, false);
    }
    bool frozen() const { return frozen_; }

    Var kernel() const { return kernel_; }
    std::int64_t out_channels() const { return kernel_->t.shape[3]; }

    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) const {
        out.push_back({prefix + ".weight", kernel_});
    }
    void collect_state(const std::string& prefix, std::vector<StateRef>& out) {
        out.push_back({prefix + ".weight", kernel_->t.shape, &kernel_->t.values});
    }

private:
    Var kernel_;
    std::int64_t stride_ = 1;
    std::int64_t pad_ = 0;
    bool frozen_ = false;
};

class BatchNormLayer {
public:
    BatchNormLayer() = default;

    explicit BatchNormLayer(std::int64_t channels, double momentum = 0.9, double epsilon = 1e-5)
        : momentum_(momentum), epsilon_(epsilon) {
        gamma_ = param({channels}, std::vector<double>(channels, 1.0));
        beta_ = param({channels}, std::vector<double>(channels, 0.0));
        running_mean_.assign(channels, 0.0);
        running_var_.assign(channels, 1.0);
    }

    // x: {n, h, w, c}. Train mode normalizes by batch statistics and updates
    // running stats; eval mode is a deterministic affine map from running
    // stats. Frozen layers always run in eval mode.
    Var forward(const Var& x) {
        const Shape& s = x->t.shape;
        if (s.size() != 4 || s[3] != static_cast<std::int64_t>(running_mean_.size()))
            throw ShapeError("batchnorm: input " + shape_str(s) + " vs " +
                             std::to_string(running_mean_.size()) + " channels");
        bool train = training_ && !frozen_;
        std::int64_t n = s[0], rows = s[0] * s[1] * s[2], c = s[3];
        if (train && n < 2) throw ArgumentError("batchnorm: train mode requires batch size >= 2");

        std::vector<double> mean(c, 0.0), var(c, 0.0);
        if (train) {
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t q = 0; q < c; ++q) mean[q] += x->t.values[i * c + q];
            for (std::int64_t q = 0; q < c; ++q) mean[q] /= static_cast<double>(rows);
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t q = 0; q < c; ++q) {
                    double d = x->t.values[i * c + q] - mean[q];
                    var[q] += d * d;
                }
            for (std::int64_t q = 0; q < c; ++q) var[q] /= static_cast<double>(rows);
            for (std::int64_t q = 0; q < c; ++q) {
                running_mean_[q] = momentum_ * running_mean_[q] + (1.0 - momentum_) * mean[q];
                running_var_[q] = momentum_ * running_var_[q] + (1.0 - momentum_) * var[q];
            }
        } else {
            mean = running_mean_;
            var = running_var_;
        }

        double eps = epsilon_;
        auto node = make_node("batchnorm", s, {x, gamma_, beta_}, [rows, c, train, eps](Node& self) {
            Node& X = *self.inputs[0];
            Node& G = *self.inputs[1];
            Node& B = *self.inputs[2];
            const double* mean = self.aux.data();
            const double* istd = self.aux.data() + c;
            if (X.needs_grad) X.ensure_grad();
            if (G.needs_grad) G.ensure_grad();
            if (B.needs_grad) B.ensure_grad();
            for (std::int64_t q = 0; q < c; ++q) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::int64_t i = 0; i < rows; ++i) {
                    double g = self.t.grad[i * c + q];
                    double xh = (X.t.values[i * c + q] - mean[q]) * istd[q];
                    sum_g += g;
                    sum_gx += g * xh;
                }
                if (G.needs_grad) G.t.grad[q] += sum_gx;
                if (B.needs_grad) B.t.grad[q] += sum_g;
                if (!X.needs_grad) continue;
                double gamma = G.t.values[q];
                if (train) {
                    double inv_n = 1.0 / static_cast<double>(rows);
                    for (std::int64_t i = 0; i < rows; ++i) {
                        double g = self.t.grad[i * c + q];
                        double xh = (X.t.values[i * c + q] - mean[q]) * istd[q];
                        X.t.grad[i * c + q] +=
                            gamma * istd[q] * (g - inv_n * sum_g - xh * inv_n * sum_gx);
                    }
                } else {
                    for (std::int64_t i = 0; i < rows; ++i)
                        X.t.grad[i * c + q] += self.t.grad[i * c + q] * gamma * istd[q];
                }
            }
        });
        node->aux.resize(2 * c);
        for (std::int64_t q = 0; q < c; ++q) {
            node->aux[q] = mean[q];
            node->aux[c + q] = 1.0 / std::sqrt(var[q] + epsilon_);
        }
        for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t q = 0; q < c; ++q) {
                double xh = (x->t.values[i * c + q] - node->aux[q]) * node->aux[c + q];
                node->t.values[i * c + q] = gamma_->t.values[q] * xh + beta_->t.values[q];
            }
        return node;
    }

    void set_training(bool training) { training_ = training; }
    bool training() const { return training_ && !frozen_; }

    void freeze() {
        frozen_ = true;
        set_trainable(gamma_, false);
        set_trainable(beta_, false);
    }
    bool frozen() const { return frozen_; }

    std::vector<double>& running_mean() { return running_mean_; }
    std::vector<double>& running_var() { return running_var_; }
    Var gamma() const { return gamma_; }
    Var beta() const { return beta_; }

    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) const {
        out.push_back({prefix + ".gamma", gamma_});
        out.push_back({prefix + ".beta", beta_});
    }
    void collect_state(const std::string& prefix, std::vector<StateRef>& out) {
        std::int64_t c = static_cast<std::int64_t>(running_mean_.size());
        out.push_back({prefix + ".gamma", gamma_->t.shape, &gamma_->t.values});
        out.push_back({prefix + ".beta", beta_->t.shape, &beta_->t.values});
        out.push_back({prefix + ".running_mean", {c}, &running_mean_});
        out.push_back({prefix + ".running_var", {c}, &running_var_});
    }

private:
    Var gamma_, beta_;
    std::vector<double> running_mean_, running_var_;
    double momentum_ = 0.9;
    double epsilon_ = 1e-5;
    bool training_ = true;
    bool frozen_ = false;
};

// conv + batchnorm + optional swish-1, the recipe shared by every block
struct ConvBnUnit {
    Conv2dLayer conv;
    BatchNormLayer bn;
    bool activate = true;

    ConvBnUnit() = default;
    ConvBnUnit(std::int64_t kh, std::int64_t kw, std::int64_t cin, std::int64_t cout,
               std::int64_t stride, std::int64_t pad, bool act, Rng& rng)
        : conv(kh, kw, cin, cout, stride, pad, rng), bn(cout), activate(act) {}

    Var forward(const Var& x) {
        Var y = bn.forward(conv.forward(x));
        return activate ? swish1(y) : y;
    }

    void set_training(bool t) { bn.set_training(t); }
    void freeze() {
        conv.freeze();
        bn.freeze();
    }
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) const {
        conv.collect_params(prefix, out);
        bn.collect_params(prefix + ".bn", out);
    }
    void collect_state(const std::string& prefix, std::vector<StateRef>& out) {
        conv.collect_state(prefix, out);
        bn.collect_state(prefix + ".bn", out);
    }
};

}  // namespace densefew
