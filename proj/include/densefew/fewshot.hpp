#pragma once

// Classifier mathematics: scaled cosine similarity, flat and dense cosine
// classifiers with their costs, prototypes, imprinting, inference rules, and
// class activation maps. Everything is graph-based and pure given its
// inputs, so gradients flow wherever an input requires them.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "densefew/models.hpp"
#include "densefew/tensor.hpp"

namespace densefew {

enum class Similarity { Cosine, NegSqEuclid };

// tau * <x_hat, y_hat> with Frobenius norms; operands may be vectors or
// equally-shaped tensors.
inline Var scaled_cosine(const Var& x, const Var& y, const Var& tau) {
    if (x->t.shape != y->t.shape)
        throw ShapeError("scaled_cosine: operand shapes " + shape_str(x->t.shape) + " vs " +
                         shape_str(y->t.shape));
    std::int64_t n = x->t.size();
    Var logits = cosine_logits(reshape(x, {1, n}), reshape(y, {1, n}), tau);
    return reshape(logits, {1});
}

// Eq-style flat classifier: softmax over scaled cosine similarities of one
// pooled embedding against every class weight row.
inline Var flat_classify(const Var& v, const Var& weights, const Var& tau) {
    std::int64_t d = v->t.size();
    Var logits = cosine_logits(reshape(v, {1, d}), weights, tau);
    return reshape(softmax_lastdim(logits), {weights->t.shape[0]});
}

// Dense classification map: per-location softmax over the shared cosine
// classifier. fm: {r, d}; output {r, c}, each row summing to 1.
inline Var dense_classify(const Var& fm_rows, const Var& weights, const Var& tau) {
    return softmax_lastdim(cosine_logits(fm_rows, weights, tau));
}

// Sum of per-location cross-entropies over a batch of feature maps.
inline Var dense_cost(const std::vector<Var>& fm_rows, const std::vector<std::int64_t>& labels,
                      const Var& weights, const Var& tau) {
    if (fm_rows.size() != labels.size())
        throw ArgumentError("dense_cost: " + std::to_string(fm_rows.size()) + " maps vs " +
                            std::to_string(labels.size()) + " labels");
    Var total = scalar_const(0.0);
    for (std::size_t i = 0; i < fm_rows.size(); ++i) {
        std::int64_t r = fm_rows[i]->t.shape[0];
        Var probs = dense_classify(fm_rows[i], weights, tau);
        std::vector<std::int64_t> y(static_cast<std::size_t>(r), labels[i]);
        total = add(total, cross_entropy_sum(probs, y));
    }
    return total;
}

// Flat (pooled) classification cost over a batch of d-vectors.
inline Var flat_cost(const std::vector<Var>& vecs, const std::vector<std::int64_t>& labels,
                     const Var& weights, const Var& tau) {
    if (vecs.size() != labels.size())
        throw ArgumentError("flat_cost: " + std::to_string(vecs.size()) + " vectors vs " +
                            std::to_string(labels.size()) + " labels");
    Var total = scalar_const(0.0);
    for (std::size_t i = 0; i < vecs.size(); ++i) {
        Var probs = flat_classify(vecs[i], weights, tau);
        total = add(total, cross_entropy(reshape(probs, {1, probs->t.size()}), labels[i]));
    }
    return total;
}

// Class prototypes: per-class mean of the support embeddings indexed by
// `support`. Returns {num_classes, d}; gradients flow into the embeddings.
inline Var compute_prototypes(const std::vector<Var>& embeddings,
                              const std::vector<std::int64_t>& labels,
                              const std::vector<std::int64_t>& support, std::int64_t num_classes) {
    std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(num_classes));
    for (auto i : support) {
        if (i < 0 || i >= static_cast<std::int64_t>(embeddings.size()))
            throw IndexError("compute_prototypes: support index " + std::to_string(i));
        std::int64_t y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= num_classes)
            throw IndexError("compute_prototypes: label " + std::to_string(y) + " out of " +
                             std::to_string(num_classes));
        by_class[static_cast<std::size_t>(y)].push_back(i);
    }
    std::vector<Var> rows;
    rows.reserve(static_cast<std::size_t>(num_classes));
    for (std::int64_t j = 0; j < num_classes; ++j) {
        const auto& members = by_class[static_cast<std::size_t>(j)];
        if (members.empty())
            throw ArgumentError("compute_prototypes: class " + std::to_string(j) +
                                " has no support examples");
        Var acc = embeddings[static_cast<std::size_t>(members[0])];
        for (std::size_t m = 1; m < members.size(); ++m)
            acc = add(acc, embeddings[static_cast<std::size_t>(members[m])]);
        // true division, so the prototype equals the direct per-element mean
        Var count = constant(acc->t.shape,
                             std::vector<double>(acc->t.values.size(),
                                                 static_cast<double>(members.size())));
        rows.push_back(div(acc, count));
    }
    return stack(rows);
}

// Prototype classifier (softmax over similarities). For cosine, tau scales
// the similarity; for negative squared Euclidean it is ignored.
inline Var proto_classify(const Var& v, const Var& protos, Similarity sim, const Var& tau) {
    if (sim == Similarity::Cosine) return flat_classify(v, protos, tau);
    Var logits = neg_sq_euclid_logits(v, protos);
    return reshape(softmax_lastdim(reshape(logits, {1, logits->t.size()})), {logits->t.size()});
}

// Episodic prototypical cost: prototypes from the support set, cross-entropy
// summed over the query set.
inline Var proto_cost(const std::vector<Var>& embeddings, const std::vector<std::int64_t>& labels,
                      const std::vector<std::int64_t>& support,
                      const std::vector<std::int64_t>& query, std::int64_t num_classes,
                      Similarity sim, const Var& tau) {
    Var protos = compute_prototypes(embeddings, labels, support, num_classes);
    Var total = scalar_const(0.0);
    for (auto i : query) {
        Var probs = proto_classify(embeddings[static_cast<std::size_t>(i)], protos, sim, tau);
        total = add(total, cross_entropy(reshape(probs, {1, probs->t.size()}),
                                         labels[static_cast<std::size_t>(i)]));
    }
    return total;
}

// Dense prototypical cost: per-location cross-entropy against prototypes,
// pooled prototypes but dense queries (stage-2 dense mode).
inline Var proto_dense_cost(const std::vector<Var>& pooled, const std::vector<Var>& fm_rows,
                            const std::vector<std::int64_t>& labels,
                            const std::vector<std::int64_t>& support,
                            const std::vector<std::int64_t>& query, std::int64_t num_classes,
                            const Var& tau) {
    Var protos = compute_prototypes(pooled, labels, support, num_classes);
    Var total = scalar_const(0.0);
    for (auto i : query) {
        const Var& rows = fm_rows[static_cast<std::size_t>(i)];
        std::int64_t r = rows->t.shape[0];
        Var probs = dense_classify(rows, protos, tau);
        std::vector<std::int64_t> y(static_cast<std::size_t>(r),
                                    labels[static_cast<std::size_t>(i)]);
        total = add(total, cross_entropy_sum(probs, y));
    }
    return total;
}

// Imprinting: append prototype rows to the class-weight bank. Base rows are
// preserved bit-exactly.
inline Tensor imprint(const Tensor& weights, const Tensor& protos) {
    if (weights.size() > 0 && weights.shape[1] != protos.shape[1])
        throw ShapeError("imprint: depth mismatch " + shape_str(weights.shape) + " vs " +
                         shape_str(protos.shape));
    std::int64_t c = weights.shape.empty() || weights.shape[0] == 0 ? 0 : weights.shape[0];
    std::int64_t d = protos.shape[1];
    std::vector<double> values = weights.values;
    values.insert(values.end(), protos.values.begin(), protos.values.end());
    return Tensor({c + protos.shape[0], d}, std::move(values));
}

// Lowest index wins on ties.
inline std::int64_t argmax(const std::vector<double>& v) {
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < static_cast<std::int64_t>(v.size()); ++i)
        if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
    return best;
}

// Nearest-prototype prediction on a pooled query embedding (cosine).
inline std::int64_t predict_nearest(const Var& pooled_query, const Var& protos) {
    Var logits = cosine_logits(reshape(pooled_query, {1, pooled_query->t.size()}), protos,
                               scalar_const(1.0));
    return argmax(logits->t.values);
}

// Dense soft-assignment prediction: average of per-location softmaxes.
inline Var predict_dense(const Var& fm_rows, const Var& protos, const Var& tau) {
    Var probs = dense_classify(fm_rows, protos, tau);  // {r, c}
    std::int64_t r = probs->t.shape[0];
    Var avg = select(probs, 0);
    for (std::int64_t k = 1; k < r; ++k) avg = add(avg, select(probs, k));
    return scale(avg, 1.0 / static_cast<double>(r));
}

// Class activation map: the class-j probability at every spatial location,
// reshaped back to the feature-map grid.
inline Var cam(const FeatureMap& fm, const Var& weights, const Var& tau, std::int64_t j) {
    std::int64_t c = weights->t.shape[0];
    if (j < 0 || j >= c)
        throw IndexError("cam: class " + std::to_string(j) + " out of " + std::to_string(c));
    Var probs = dense_classify(fm.rows(), weights, tau);  // {r, c}
    Var col = slice_lastdim(probs, j, j + 1);
    return reshape(col, {fm.h(), fm.w()});
}

// Rescales map values to 0..255 over its own range and writes a plain-text
// portable graymap. A constant map exports as all zeros.
inline void write_pgm(const std::string& path, const Var& map2d) {
    std::int64_t h = map2d->t.shape[0], w = map2d->t.shape[1];
    double lo = map2d->t.values[0], hi = map2d->t.values[0];
    for (double v : map2d->t.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    double span = hi > lo ? hi - lo : 1.0;
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open pgm for writing: " + path);
    os << "P2\n" << w << " " << h << "\n255\n";
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            int g = static_cast<int>(std::lround((map2d->t.values[y * w + x] - lo) / span * 255.0));
            os << g << (x + 1 == w ? "" : " ");
        }
        os << "\n";
    }
}

inline void write_csv_grid(const std::string& path, const Var& map2d) {
    std::int64_t h = map2d->t.shape[0], w = map2d->t.shape[1];
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open csv for writing: " + path);
    char buf[32];
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            std::snprintf(buf, sizeof(buf), "%.17g", map2d->t.values[y * w + x]);
            os << buf << (x + 1 == w ? "" : ",");
        }
        os << "\n";
    }
}

}  // namespace densefew
