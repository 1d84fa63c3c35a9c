#pragma once

// Neural implanting: widen a frozen base network with a parallel stream of
// small conv layers over its last stage, and train only the implants on a
// novel-class support set via leave-one-out subtasks.

#include <memory>
#include <string>
#include <vector>

#include "densefew/data.hpp"
#include "densefew/fewshot.hpp"
#include "densefew/models.hpp"
#include "densefew/optim.hpp"
#include "densefew/tensor.hpp"

namespace densefew {

struct ImplantSpec {
    std::int64_t channels = 16;
    std::int64_t layers = -1;  // -1: every conv layer of the last stage
};

class WidenedNetwork {
public:
    // The base network is frozen on construction; its stream stays
    // bit-identical to the un-widened network on any input.
    WidenedNetwork(std::shared_ptr<EmbeddingNetwork> base, const ImplantSpec& spec, Rng& rng)
        : base_(std::move(base)), channels_(spec.channels) {
        std::int64_t tail = base_->tail_layers();
        std::int64_t count = spec.layers < 0 ? tail : spec.layers;
        if (count < 0 || count > tail)
            throw ArgumentError("widen: " + std::to_string(spec.layers) + " implant layers for a " +
                                std::to_string(tail) + "-layer tail");
        if (count > 0 && spec.channels < 1)
            throw ArgumentError("widen: implant channels must be >= 1");
        offset_ = tail - count;
        base_->freeze();
        for (std::int64_t i = 0; i < count; ++i) {
            std::int64_t cin = base_->tail_tap_channels(offset_ + i) + (i > 0 ? channels_ : 0);
            implants_.emplace_back(3, 3, cin, channels_, 1, 1, true, rng);
        }
        set_training(false);
    }

    EmbeddingNetwork& base() { return *base_; }
    std::int64_t implant_channels() const { return implants_.empty() ? 0 : channels_; }
    std::int64_t implant_layers() const { return static_cast<std::int64_t>(implants_.size()); }
    std::int64_t out_channels() const { return base_->out_channels() + implant_channels(); }

    // Full widened forward: {n, h, w, c} -> {n, h', w', d + d'}.
    Var forward(const Var& images) {
        Var trunk = base_->forward_trunk(images);
        std::vector<Var> taps;
        Var base_out = base_->forward_tail(trunk, implants_.empty() ? nullptr : &taps);
        if (implants_.empty()) return base_out;
        return concat_lastdim(base_out, implant_stream(taps));
    }

    // Frozen-base byproducts for one batch, detached from the graph so that
    // stage-2 steps only rebuild the implant stream.
    struct BaseCache {
        std::vector<Var> taps;  // constants
        Var base_out;           // constant {n, h', w', d}
    };

    BaseCache compute_base_cache(const Var& images) {
        BaseCache cache;
        Var trunk = base_->forward_trunk(images);
        std::vector<Var> taps;
        Var base_out = base_->forward_tail(trunk, &taps);
        for (const auto& t : taps) cache.taps.push_back(constant(t->t.shape, t->t.values));
        cache.base_out = constant(base_out->t.shape, base_out->t.values);
        return cache;
    }

    // Implant-stream output {n, h', w', d'} from cached base activations.
    Var forward_implants(const BaseCache& cache) { return implant_stream(cache.taps); }

    void set_training(bool training) {
        for (auto& u : implants_) u.set_training(training);
    }

    void collect_params(std::vector<ParamRef>& out) const {
        for (std::size_t i = 0; i < implants_.size(); ++i)
            implants_[i].collect_params("implant/layer" + std::to_string(i + 1), out);
    }
    void collect_state(std::vector<StateRef>& out) {
        for (std::size_t i = 0; i < implants_.size(); ++i)
            implants_[i].collect_state("implant/layer" + std::to_string(i + 1), out);
    }

private:
    Var implant_stream(const std::vector<Var>& taps) {
        Var a = implants_[0].forward(taps[static_cast<std::size_t>(offset_)]);
        for (std::size_t i = 1; i < implants_.size(); ++i)
            a = implants_[i].forward(
                concat_lastdim(taps[static_cast<std::size_t>(offset_) + i], a));
        return maxpool2x2(a);
    }

    std::shared_ptr<EmbeddingNetwork> base_;
    std::vector<ConvBnUnit> implants_;
    std::int64_t channels_ = 16;
    std::int64_t offset_ = 0;
};

// Leave-one-out subtasks: Q_i = {i}, S_i = everything else. Deterministic,
// no sampling. Requires at least two supports per class.
struct LooSubtask {
    std::vector<std::int64_t> query;
    std::vector<std::int64_t> support;
};

inline std::vector<LooSubtask> loo_subtasks(const std::vector<std::int64_t>& labels,
                                            std::int64_t num_classes) {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (auto y : labels) {
        if (y < 0 || y >= num_classes)
            throw IndexError("loo_subtasks: label " + std::to_string(y));
        ++counts[static_cast<std::size_t>(y)];
    }
    for (std::int64_t j = 0; j < num_classes; ++j)
        if (counts[static_cast<std::size_t>(j)] < 2)
            throw ArgumentError(
                "loo_subtasks: class " + std::to_string(j) + " has " +
                std::to_string(counts[static_cast<std::size_t>(j)]) +
                " support example(s); leave-one-out training does not apply to the 1-shot scenario");
    std::int64_t n = static_cast<std::int64_t>(labels.size());
    std::vector<LooSubtask> tasks;
    tasks.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        LooSubtask t;
        t.query.push_back(i);
        for (std::int64_t j = 0; j < n; ++j)
            if (j != i) t.support.push_back(j);
        tasks.push_back(std::move(t));
    }
    return tasks;
}

enum class ImplantLoss { Pooled, Dense };

struct ImplantTrainConfig {
    std::int64_t epochs = 50;
    ImplantLoss loss = ImplantLoss::Pooled;
    double tau = 10.0;  // fixed, not trained
    OptimizerConfig opt{OptKind::AdamW, 1e-3, 0.9, 0.9, 0.999, 1e-8, 5e-4};
};

struct ImplantTrainLog {
    std::vector<double> epoch_loss;
};

// Stage-2 training: one AdamW step per leave-one-out subtask, subtasks in
// index order, prototypes recomputed from the current implants at every
// step. Only implant parameters move; the base stays frozen.
inline ImplantTrainLog train_implants(WidenedNetwork& net, const Dataset& ds,
                                      const std::vector<std::int64_t>& support_indices,
                                      const std::vector<std::int64_t>& support_labels,
                                      std::int64_t num_classes, const ImplantTrainConfig& cfg) {
    auto subtasks = loo_subtasks(support_labels, num_classes);
    Var tau = scalar_const(cfg.tau);
    Var images = ds.batch(support_indices);
    auto cache = net.compute_base_cache(images);
    std::int64_t n = static_cast<std::int64_t>(support_indices.size());

    std::vector<ParamRef> params;
    net.collect_params(params);
    Optimizer opt(cfg.opt);
    net.set_training(true);

    ImplantTrainLog log;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (const auto& task : subtasks) {
            Var imp = net.forward_implants(cache);  // {n, h', w', d'}
            Var base_pooled = global_avg_pool(cache.base_out);
            Var imp_pooled = global_avg_pool(imp);
            Var pooled_all = concat_lastdim(base_pooled, imp_pooled);  // {n, d + d'}
            std::vector<Var> pooled;
            pooled.reserve(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) pooled.push_back(select(pooled_all, i));

            Var loss;
            if (cfg.loss == ImplantLoss::Pooled) {
                loss = proto_cost(pooled, support_labels, task.support, task.query, num_classes,
                                  Similarity::Cosine, tau);
            } else {
                std::vector<Var> rows;
                rows.reserve(static_cast<std::size_t>(n));
                std::int64_t r = cache.base_out->t.shape[1] * cache.base_out->t.shape[2];
                for (std::int64_t i = 0; i < n; ++i) {
                    Var bi = reshape(select(cache.base_out, i), {r, cache.base_out->t.shape[3]});
                    Var ii = reshape(select(imp, i), {r, imp->t.shape[3]});
                    rows.push_back(concat_lastdim(bi, ii));
                }
                loss = proto_dense_cost(pooled, rows, support_labels, task.support, task.query,
                                        num_classes, tau);
            }
            if (!std::isfinite(loss->t.values[0]))
                throw NumericError("implant training loss is not finite");
            epoch_loss += loss->t.values[0];
            opt.zero_grad(params);
            backward(loss);
            opt.step(params);
        }
        log.epoch_loss.push_back(epoch_loss);
    }
    net.set_training(false);
    return log;
}

}  // namespace densefew
