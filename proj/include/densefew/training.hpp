#pragma once

// Stage-1 trainers: parametric cosine classification (dense or pooled loss)
// and episodic prototypical training. Runs are fully determined by the seed.

#include <memory>
#include <string>
#include <vector>

#include "densefew/data.hpp"
#include "densefew/fewshot.hpp"
#include "densefew/models.hpp"
#include "densefew/optim.hpp"
#include "densefew/rng.hpp"
#include "densefew/tensor.hpp"

namespace densefew {

enum class LossMode { Dense, Gap };

struct TrainConfig {
    std::int64_t iterations = 500;
    std::int64_t batch = 32;
    std::uint64_t seed = 17;
    double tau_init = 10.0;
    LossMode loss = LossMode::Dense;
    OptimizerConfig opt{OptKind::SgdNesterov, 0.1, 0.9, 0.9, 0.999, 1e-8, 0.0};
    // learning rate multiplied by 0.1 at these fractions of the run
    double decay_at[2] = {0.6, 0.8};
};

struct Stage1Result {
    Var weights;  // {c_base, d} cosine classifier bank
    Var tau;      // {1} temperature
    std::vector<double> loss_log;
    std::vector<std::int64_t> base_classes;  // dataset class id per bank row
};

// Remaps dataset labels of the base split to contiguous bank rows.
inline std::vector<std::int64_t> base_row_of(const std::vector<std::int64_t>& base_classes,
                                             std::int64_t num_classes) {
    std::vector<std::int64_t> row(static_cast<std::size_t>(num_classes), -1);
    for (std::size_t j = 0; j < base_classes.size(); ++j)
        row[static_cast<std::size_t>(base_classes[j])] = static_cast<std::int64_t>(j);
    return row;
}

inline Stage1Result stage1_train(EmbeddingNetwork& model, const Dataset& ds,
                                 const SplitManifest& split, const TrainConfig& cfg) {
    auto base_classes = split.classes_of(SplitName::Base);
    if (base_classes.size() < 2)
        throw ArgumentError("stage1_train: need at least 2 base classes, have " +
                            std::to_string(base_classes.size()));
    auto row = base_row_of(base_classes, ds.num_classes);
    std::vector<std::int64_t> pool;
    for (std::int64_t i = 0; i < ds.count; ++i)
        if (row[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])] >= 0)
            pool.push_back(i);
    for (auto cls : base_classes)
        if (ds.class_members(cls).empty())
            throw ArgumentError("stage1_train: base class " + std::to_string(cls) + " is empty");

    Rng root(cfg.seed);
    Rng init_rng = root.stream(1);
    std::int64_t c = static_cast<std::int64_t>(base_classes.size());
    std::int64_t d = model.out_channels();
    std::vector<double> w(static_cast<std::size_t>(c * d));
    for (auto& x : w) x = init_rng.normal(0.0, std::sqrt(2.0 / static_cast<double>(d)));
    Stage1Result result;
    result.weights = param({c, d}, std::move(w));
    result.tau = param({1}, {cfg.tau_init});
    result.base_classes = base_classes;

    std::vector<ParamRef> params;
    model.collect_params(params);
    params.push_back({"classifier.weights", result.weights});
    params.push_back({"classifier.tau", result.tau});
    Optimizer opt(cfg.opt);
    model.set_training(true);

    for (std::int64_t it = 0; it < cfg.iterations; ++it) {
        for (double frac : cfg.decay_at)
            if (cfg.opt.kind == OptKind::SgdNesterov &&
                it == static_cast<std::int64_t>(frac * static_cast<double>(cfg.iterations)))
                opt.config().lr *= 0.1;

        Rng it_rng = root.stream(100 + static_cast<std::uint64_t>(it));
        std::vector<std::int64_t> batch_idx;
        std::vector<std::int64_t> labels;
        for (std::int64_t b = 0; b < cfg.batch; ++b) {
            std::int64_t pick = pool[static_cast<std::size_t>(it_rng.below(pool.size()))];
            batch_idx.push_back(pick);
            labels.push_back(row[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(pick)])]);
        }

        Var maps = model.forward(ds.batch(batch_idx));
        Var loss;
        if (cfg.loss == LossMode::Dense) {
            std::int64_t r = maps->t.shape[1] * maps->t.shape[2];
            std::vector<Var> rows_batch;
            for (std::int64_t i = 0; i < cfg.batch; ++i)
                rows_batch.push_back(reshape(select(maps, i), {r, maps->t.shape[3]}));
            loss = dense_cost(rows_batch, labels, result.weights, result.tau);
        } else {
            Var pooled = global_avg_pool(maps);
            std::vector<Var> vecs;
            for (std::int64_t i = 0; i < cfg.batch; ++i) vecs.push_back(select(pooled, i));
            loss = flat_cost(vecs, labels, result.weights, result.tau);
        }
        double lv = loss->t.values[0];
        if (!std::isfinite(lv)) throw NumericError("stage-1 training loss is not finite");
        result.loss_log.push_back(lv);

        opt.zero_grad(params);
        backward(loss);
        opt.step(params);
        // tau stays positive
        if (result.tau->t.values[0] < 1e-3) result.tau->t.values[0] = 1e-3;
    }
    model.set_training(false);
    return result;
}

// Fraction of the given images whose argmax class matches their label,
// using the stage-1 classifier in eval mode.
inline double classifier_accuracy(EmbeddingNetwork& model, const Var& weights, const Var& tau,
                                  const Dataset& ds, const std::vector<std::int64_t>& indices,
                                  const std::vector<std::int64_t>& labels, LossMode mode) {
    model.set_training(false);
    std::int64_t correct = 0;
    const std::int64_t chunk = 32;
    for (std::size_t at = 0; at < indices.size(); at += chunk) {
        std::vector<std::int64_t> part(indices.begin() + static_cast<std::int64_t>(at),
                                       indices.begin() +
                                           std::min<std::int64_t>(static_cast<std::int64_t>(at) + chunk,
                                                                  static_cast<std::int64_t>(indices.size())));
        Var maps = model.forward(ds.batch(part));
        for (std::size_t i = 0; i < part.size(); ++i) {
            Var fm = select(maps, static_cast<std::int64_t>(i));
            std::int64_t pred;
            if (mode == LossMode::Dense) {
                Var rows = reshape(fm, {fm->t.shape[0] * fm->t.shape[1], fm->t.shape[2]});
                Var probs = predict_dense(rows, weights, tau);
                pred = argmax(probs->t.values);
            } else {
                Var pooled = pool_embedding(FeatureMap{fm}, PoolMode::GAP);
                Var probs = flat_classify(pooled, weights, tau);
                pred = argmax(probs->t.values);
            }
            if (pred == labels[at + i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

struct EpisodicConfig {
    std::int64_t way = 5;
    std::int64_t shot = 5;
    std::int64_t queries = 5;
    std::int64_t episodes = 100;
    std::uint64_t seed = 17;
    double tau = 10.0;  // fixed scale for the cosine episodic loss
    Similarity similarity = Similarity::Cosine;
    OptimizerConfig opt{OptKind::Adam, 1e-3, 0.9, 0.9, 0.999, 1e-8, 0.0};
};

struct EpisodicResult {
    std::vector<double> loss_log;
    std::vector<double> episode_accuracy;
};

// Episodic prototypical training on the base split: per episode, sample
// classes and examples, split into support and query, prototypes on the
// support, cross-entropy on the queries.
inline EpisodicResult episodic_stage1_train(EmbeddingNetwork& model, const Dataset& ds,
                                            const SplitManifest& split,
                                            const EpisodicConfig& cfg) {
    auto base_classes = split.classes_of(SplitName::Base);
    if (cfg.way > static_cast<std::int64_t>(base_classes.size()))
        throw ArgumentError("episodic training: way " + std::to_string(cfg.way) + " exceeds " +
                            std::to_string(base_classes.size()) + " base classes");
    for (auto cls : base_classes) {
        auto members = ds.class_members(cls);
        if (static_cast<std::int64_t>(members.size()) < cfg.shot + cfg.queries)
            throw ArgumentError("episodic training: class " + std::to_string(cls) +
                                " has too few examples for shot+queries");
    }
    Rng root(cfg.seed);
    std::vector<ParamRef> params;
    model.collect_params(params);
    Optimizer opt(cfg.opt);
    Var tau = scalar_const(cfg.tau);
    model.set_training(true);

    EpisodicResult result;
    for (std::int64_t ep = 0; ep < cfg.episodes; ++ep) {
        Rng ep_rng = root.stream(0xe0000 + static_cast<std::uint64_t>(ep));
        std::vector<std::int64_t> pool = base_classes;
        ep_rng.shuffle(pool);
        std::vector<std::int64_t> image_idx, labels, support, query;
        for (std::int64_t j = 0; j < cfg.way; ++j) {
            auto members = ds.class_members(pool[static_cast<std::size_t>(j)]);
            ep_rng.shuffle(members);
            for (std::int64_t s = 0; s < cfg.shot + cfg.queries; ++s) {
                std::int64_t local = static_cast<std::int64_t>(image_idx.size());
                image_idx.push_back(members[static_cast<std::size_t>(s)]);
                labels.push_back(j);
                (s < cfg.shot ? support : query).push_back(local);
            }
        }
        Var maps = model.forward(ds.batch(image_idx));
        Var pooled_all = global_avg_pool(maps);
        std::vector<Var> pooled;
        for (std::int64_t i = 0; i < pooled_all->t.shape[0]; ++i)
            pooled.push_back(select(pooled_all, i));
        Var loss = proto_cost(pooled, labels, support, query, cfg.way, cfg.similarity, tau);
        double lv = loss->t.values[0];
        if (!std::isfinite(lv)) throw NumericError("episodic training loss is not finite");
        result.loss_log.push_back(lv);

        // episode accuracy on the queries under the current parameters
        Var protos = compute_prototypes(pooled, labels, support, cfg.way);
        std::int64_t correct = 0;
        for (auto qi : query) {
            Var probs = proto_classify(pooled[static_cast<std::size_t>(qi)], protos,
                                       cfg.similarity, tau);
            if (argmax(probs->t.values) == labels[static_cast<std::size_t>(qi)]) ++correct;
        }
        result.episode_accuracy.push_back(static_cast<double>(correct) /
                                          static_cast<double>(query.size()));

        opt.zero_grad(params);
        backward(loss);
        opt.step(params);
    }
    model.set_training(false);
    return result;
}

}  // namespace densefew
