#pragma once

// Few-shot task sampling and the evaluation protocol: per-task accuracies,
// mean accuracy with a 95% confidence interval, and the base/novel/both
// benchmark variants.

#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "densefew/data.hpp"
#include "densefew/fewshot.hpp"
#include "densefew/models.hpp"
#include "densefew/rng.hpp"
#include "densefew/tensor.hpp"

namespace densefew {

struct FewShotTask {
    std::int64_t way = 0, shot = 0, queries_per_class = 0;
    std::vector<std::int64_t> task_classes;      // dataset class id per task label
    std::vector<std::int64_t> support_indices;   // dataset image indices
    std::vector<std::int64_t> support_labels;    // task labels in [0, way)
    std::vector<std::int64_t> query_indices;
    std::vector<std::int64_t> query_labels;
};

// Uniform sampling without replacement within the task; deterministic given
// the rng stream.
inline FewShotTask sample_task(const Dataset& ds, const std::vector<std::int64_t>& split_classes,
                               std::int64_t way, std::int64_t shot,
                               std::int64_t queries_per_class, Rng& rng) {
    if (way > static_cast<std::int64_t>(split_classes.size()))
        throw ArgumentError("sample_task: " + std::to_string(way) + "-way task from " +
                            std::to_string(split_classes.size()) + " classes");
    std::vector<std::int64_t> pool = split_classes;
    rng.shuffle(pool);
    FewShotTask task;
    task.way = way;
    task.shot = shot;
    task.queries_per_class = queries_per_class;
    for (std::int64_t j = 0; j < way; ++j) {
        std::int64_t cls = pool[static_cast<std::size_t>(j)];
        task.task_classes.push_back(cls);
        auto members = ds.class_members(cls);
        if (static_cast<std::int64_t>(members.size()) < shot + queries_per_class)
            throw ArgumentError("sample_task: class " + std::to_string(cls) + " has " +
                                std::to_string(members.size()) + " examples, need " +
                                std::to_string(shot + queries_per_class));
        rng.shuffle(members);
        for (std::int64_t s = 0; s < shot; ++s) {
            task.support_indices.push_back(members[static_cast<std::size_t>(s)]);
            task.support_labels.push_back(j);
        }
        for (std::int64_t q = 0; q < queries_per_class; ++q) {
            task.query_indices.push_back(members[static_cast<std::size_t>(shot + q)]);
            task.query_labels.push_back(j);
        }
    }
    return task;
}

// Text task file: header "way shot queries", then "support|query idx label".
inline void save_task(const FewShotTask& task, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open task file for writing: " + path);
    os << task.way << " " << task.shot << " " << task.queries_per_class << "\n";
    for (std::size_t i = 0; i < task.support_indices.size(); ++i)
        os << "support\t" << task.support_indices[i] << "\t" << task.support_labels[i] << "\n";
    for (std::size_t i = 0; i < task.query_indices.size(); ++i)
        os << "query\t" << task.query_indices[i] << "\t" << task.query_labels[i] << "\n";
}

inline FewShotTask load_task(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open task file: " + path);
    FewShotTask task;
    if (!(is >> task.way >> task.shot >> task.queries_per_class))
        throw FormatError("task file header malformed: " + path);
    std::string role;
    std::int64_t idx, label;
    while (is >> role >> idx >> label) {
        if (role == "support") {
            task.support_indices.push_back(idx);
            task.support_labels.push_back(label);
        } else if (role == "query") {
            task.query_indices.push_back(idx);
            task.query_labels.push_back(label);
        } else {
            throw FormatError("task file role '" + role + "' unknown in " + path);
        }
    }
    return task;
}

struct EvalReport {
    double mean = 0.0;
    double ci95 = 0.0;
    std::int64_t task_count = 0;
    std::vector<double> per_task;
};

// half-width = 1.96 * sigma / sqrt(T), sigma the Bessel-corrected sample
// standard deviation of per-task accuracies
inline EvalReport make_report(std::vector<double> per_task) {
    EvalReport rep;
    rep.per_task = std::move(per_task);
    rep.task_count = static_cast<std::int64_t>(rep.per_task.size());
    if (rep.task_count == 0) return rep;
    double sum = 0.0;
    for (double a : rep.per_task) sum += a;
    rep.mean = sum / static_cast<double>(rep.task_count);
    if (rep.task_count > 1) {
        double sq = 0.0;
        for (double a : rep.per_task) sq += (a - rep.mean) * (a - rep.mean);
        double sigma = std::sqrt(sq / static_cast<double>(rep.task_count - 1));
        rep.ci95 = 1.96 * sigma / std::sqrt(static_cast<double>(rep.task_count));
    }
    return rep;
}

inline void write_machine_report(const EvalReport& rep, std::ostream& os) {
    char buf[64];
    for (std::int64_t i = 0; i < rep.task_count; ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", rep.per_task[static_cast<std::size_t>(i)]);
        os << i << "\t" << buf << "\n";
    }
    std::snprintf(buf, sizeof(buf), "%.17g", rep.mean);
    os << "mean\t" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", rep.ci95);
    os << "ci95\t" << buf << "\n";
}

inline EvalReport parse_machine_report(std::istream& is) {
    std::vector<double> per_task;
    double mean = 0.0, ci = 0.0;
    std::string key;
    double value;
    while (is >> key >> value) {
        if (key == "mean") mean = value;
        else if (key == "ci95") ci = value;
        else per_task.push_back(value);
    }
    EvalReport rep = make_report(std::move(per_task));
    rep.mean = mean;
    rep.ci95 = ci;
    return rep;
}

enum class InferenceMode { Nearest, Dense };
enum class QueryPool { GAP, GMP, Dense };

struct EvalConfig {
    InferenceMode inference = InferenceMode::Nearest;
    PoolMode support_pool = PoolMode::GAP;
    QueryPool query_pool = QueryPool::GAP;
    double tau = 10.0;
    int threads = 1;
};

// Embeds a batch of images into {n, h', w', d}; shared read-only across
// evaluation threads.
using Embedder = std::function<Var(const Var& images)>;

inline double evaluate_task(const Embedder& embed_fn, const Dataset& ds, const FewShotTask& task,
                            const EvalConfig& cfg) {
    Var support_maps = embed_fn(ds.batch(task.support_indices));
    Var support_pooled = cfg.support_pool == PoolMode::GAP ? global_avg_pool(support_maps)
                                                           : global_max_pool(support_maps);
    std::vector<Var> pooled;
    for (std::int64_t i = 0; i < support_pooled->t.shape[0]; ++i)
        pooled.push_back(select(support_pooled, i));
    std::vector<std::int64_t> all(pooled.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int64_t>(i);
    Var protos = compute_prototypes(pooled, task.support_labels, all, task.way);

    Var query_maps = embed_fn(ds.batch(task.query_indices));
    std::int64_t correct = 0, total = static_cast<std::int64_t>(task.query_indices.size());
    Var tau = scalar_const(cfg.tau);
    for (std::int64_t i = 0; i < total; ++i) {
        Var fm = select(query_maps, i);  // {h', w', d}
        std::int64_t pred;
        if (cfg.inference == InferenceMode::Dense || cfg.query_pool == QueryPool::Dense) {
            Var rows = reshape(fm, {fm->t.shape[0] * fm->t.shape[1], fm->t.shape[2]});
            Var probs = predict_dense(rows, protos, tau);
            pred = argmax(probs->t.values);
        } else {
            Var pooled_q = pool_embedding(FeatureMap{fm},
                                          cfg.query_pool == QueryPool::GMP ? PoolMode::GMP
                                                                           : PoolMode::GAP);
            pred = predict_nearest(pooled_q, protos);
        }
        if (pred == task.query_labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

// Runs every task and aggregates; identical results for any thread count
// because tasks are pre-sampled and independent.
inline EvalReport evaluate(const Embedder& embed_fn, const Dataset& ds,
                           const std::vector<FewShotTask>& tasks, const EvalConfig& cfg) {
    std::vector<double> acc(tasks.size(), 0.0);
    int threads = std::max(1, cfg.threads);
    if (threads == 1) {
        for (std::size_t t = 0; t < tasks.size(); ++t)
            acc[t] = evaluate_task(embed_fn, ds, tasks[t], cfg);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        for (int w = 0; w < threads; ++w)
            pool.emplace_back([&]() {
                for (;;) {
                    std::size_t t = next.fetch_add(1);
                    if (t >= tasks.size()) return;
                    acc[t] = evaluate_task(embed_fn, ds, tasks[t], cfg);
                }
            });
        for (auto& th : pool) th.join();
    }
    return make_report(std::move(acc));
}

// "Both classes" protocol: the classifier bank is the stage-1 base weights
// with novel prototypes imprinted; queries come from held-out base images
// and from the task's novel queries.
struct BothQueryPool {
    std::vector<std::int64_t> base_indices;       // held-out base images
    std::vector<std::int64_t> base_class_rows;    // bank row of each base image
    std::int64_t per_task = 0;                    // base queries drawn per task
};

inline EvalReport evaluate_both(const Embedder& embed_fn, const Dataset& ds,
                                const Tensor& base_weights,
                                const std::vector<FewShotTask>& tasks,
                                const BothQueryPool& base_pool, const EvalConfig& cfg,
                                std::uint64_t seed) {
    std::int64_t c_base = base_weights.shape.empty() ? 0 : base_weights.shape[0];
    std::vector<double> acc(tasks.size(), 0.0);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const FewShotTask& task = tasks[t];
        Var support_maps = embed_fn(ds.batch(task.support_indices));
        Var support_pooled = cfg.support_pool == PoolMode::GAP ? global_avg_pool(support_maps)
                                                               : global_max_pool(support_maps);
        std::vector<Var> pooled;
        for (std::int64_t i = 0; i < support_pooled->t.shape[0]; ++i)
            pooled.push_back(select(support_pooled, i));
        std::vector<std::int64_t> all(pooled.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int64_t>(i);
        Var protos = compute_prototypes(pooled, task.support_labels, all, task.way);
        if (c_base > 0 && base_weights.shape[1] != protos->t.shape[1])
            throw ShapeError("evaluate_both: base weight depth " + shape_str(base_weights.shape) +
                             " vs prototype depth " + shape_str(protos->t.shape));
        Tensor bank = imprint(base_weights, Tensor(protos->t.shape, protos->t.values));
        Var bank_var = constant(bank.shape, bank.values);

        std::int64_t correct = 0, total = 0;
        auto classify = [&](std::int64_t img_idx, std::int64_t want_row) {
            Var fm = select(embed_fn(ds.batch({img_idx})), 0);
            Var pooled_q = pool_embedding(FeatureMap{fm}, cfg.support_pool);
            if (predict_nearest(pooled_q, bank_var) == want_row) ++correct;
            ++total;
        };
        for (std::size_t i = 0; i < task.query_indices.size(); ++i)
            classify(task.query_indices[i], c_base + task.query_labels[i]);
        if (base_pool.per_task > 0 && !base_pool.base_indices.empty()) {
            Rng rng = Rng(seed).stream(0xb0 + t);
            for (std::int64_t q = 0; q < base_pool.per_task; ++q) {
                std::size_t pick = static_cast<std::size_t>(
                    rng.below(base_pool.base_indices.size()));
                classify(base_pool.base_indices[pick], base_pool.base_class_rows[pick]);
            }
        }
        acc[t] = static_cast<double>(correct) / static_cast<double>(total);
    }
    return make_report(std::move(acc));
}

}  // namespace densefew
