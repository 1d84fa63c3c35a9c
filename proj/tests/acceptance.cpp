// Acceptance suite: one test per headline requirement, each printing a single
// pass/fail line so the whole run can be audited at a glance.

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "densefew/episodes.hpp"
#include "densefew/implant.hpp"
#include "densefew/model_io.hpp"
#include "densefew/training.hpp"
#include "grad_check.hpp"
#include "oracles.hpp"

using namespace densefew;
using densefew::testing::grad_max_rel_dev;

namespace {

void report(const char* criterion) {
    std::printf("[ACCEPTANCE] %s: %s\n", criterion,
                ::testing::Test::HasFailure() ? "FAIL" : "PASS");
    std::fflush(stdout);
}

Var rand_param(Rng& rng, Shape s, double lo = -2.0, double hi = 2.0) {
    std::int64_t n = 1;
    for (auto v : s) n *= v;
    std::vector<double> vals(static_cast<std::size_t>(n));
    for (auto& v : vals) v = rng.uniform(lo, hi);
    return param(std::move(s), std::move(vals));
}

std::vector<std::int64_t> iota_vec(std::int64_t n) {
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
    return v;
}

// Label-independent pseudo-random embedder (hash of pixel content), used for
// the chance-level calibration run. Pure and cheap.
Embedder hash_embedder() {
    return [](const Var& images) {
        std::int64_t n = images->t.shape[0];
        std::int64_t per = images->t.size() / n;
        std::vector<double> out(static_cast<std::size_t>(n * 8));
        for (std::int64_t i = 0; i < n; ++i) {
            std::uint64_t h = 1469598103934665603ull;
            for (std::int64_t p = 0; p < per; ++p) {
                std::uint64_t bits;
                double v = images->t.values[static_cast<std::size_t>(i * per + p)];
                std::memcpy(&bits, &v, 8);
                h = (h ^ bits) * 1099511628211ull;
            }
            Rng rng(h);
            for (int q = 0; q < 8; ++q)
                out[static_cast<std::size_t>(i * 8 + q)] = rng.normal(0.0, 1.0);
        }
        return constant({n, 1, 1, 8}, std::move(out));
    };
}

}  // namespace

// ---------------------------------------------------------------------------
// 1. Every differentiable op and every composite loss matches central finite
//    differences within 1e-4 relative error on >= 20 random instances each.

TEST(Acceptance, GradientOracle) {
    auto start = std::chrono::steady_clock::now();
    constexpr int kInstances = 20;
    constexpr double kTol = 1e-4;

    struct Case {
        const char* name;
        std::function<double(Rng&)> run;  // returns max relative deviation
    };

    auto binary = [](Var (*op)(const Var&, const Var&), bool positive_rhs) {
        return [op, positive_rhs](Rng& rng) {
            Shape s{2, 3};
            Var a = rand_param(rng, s);
            Var b = positive_rhs ? rand_param(rng, s, 0.5, 2.5) : rand_param(rng, s);
            return grad_max_rel_dev([&] { return sum(mul(op(a, b), op(a, b))); }, {a, b});
        };
    };
    auto unary = [](Var (*op)(const Var&), double lo, double hi) {
        return [op, lo, hi](Rng& rng) {
            Var a = rand_param(rng, {2, 3}, lo, hi);
            return grad_max_rel_dev([&] { return sum(mul(op(a), op(a))); }, {a});
        };
    };

    std::vector<Case> cases;
    cases.push_back({"add", binary(&add, false)});
    cases.push_back({"sub", binary(&sub, false)});
    cases.push_back({"mul", binary(&mul, false)});
    cases.push_back({"div", binary(&div, true)});
    cases.push_back({"sigmoid", unary(&sigmoid, -3.0, 3.0)});
    cases.push_back({"exp", unary(&exp_, -1.5, 1.5)});
    cases.push_back({"log", unary(&log_, 0.5, 3.0)});
    cases.push_back({"sqrt", unary(&sqrt_, 0.5, 3.0)});
    cases.push_back({"swish", unary(&swish1, -3.0, 3.0)});
    cases.push_back({"scale+neg", [](Rng& rng) {
                         Var a = rand_param(rng, {3});
                         return grad_max_rel_dev(
                             [&] { return sum(mul(scale(neg(a), 1.7), scale(neg(a), 1.7))); }, {a});
                     }});
    cases.push_back({"matmul", [](Rng& rng) {
                         Var a = rand_param(rng, {2, 4});
                         Var b = rand_param(rng, {4, 3});
                         return grad_max_rel_dev(
                             [&] { return sum(mul(matmul(a, b), matmul(a, b))); }, {a, b});
                     }});
    cases.push_back({"reshape+select+stack", [](Rng& rng) {
                         Var a = rand_param(rng, {2, 2, 3});
                         return grad_max_rel_dev(
                             [&] {
                                 Var s0 = select(a, 0);
                                 Var s1 = select(a, 1);
                                 Var st = stack({s1, s0});
                                 Var r = reshape(st, {4, 3});
                                 return sum(mul(r, r));
                             },
                             {a});
                     }});
    cases.push_back({"concat+slice", [](Rng& rng) {
                         Var a = rand_param(rng, {2, 3});
                         Var b = rand_param(rng, {2, 2});
                         return grad_max_rel_dev(
                             [&] {
                                 Var c = slice_lastdim(concat_lastdim(a, b), 1, 4);
                                 return sum(mul(c, c));
                             },
                             {a, b});
                     }});
    cases.push_back({"conv2d", [](Rng& rng) {
                         std::int64_t stride = 1 + static_cast<std::int64_t>(rng.below(2));
                         std::int64_t pad = static_cast<std::int64_t>(rng.below(2));
                         Var x = rand_param(rng, {2, 5, 5, 2});
                         Var k = rand_param(rng, {3, 3, 2, 3});
                         return grad_max_rel_dev(
                             [&] {
                                 Var y = conv2d(x, k, stride, pad);
                                 return sum(mul(y, y));
                             },
                             {x, k});
                     }});
    cases.push_back({"maxpool2x2", [](Rng& rng) {
                         Var x = rand_param(rng, {1, 4, 4, 2});
                         return grad_max_rel_dev(
                             [&] {
                                 Var y = maxpool2x2(x);
                                 return sum(mul(y, y));
                             },
                             {x});
                     }});
    cases.push_back({"global-avg-pool", [](Rng& rng) {
                         Var x = rand_param(rng, {2, 3, 3, 2});
                         return grad_max_rel_dev(
                             [&] {
                                 Var y = global_avg_pool(x);
                                 return sum(mul(y, y));
                             },
                             {x});
                     }});
    cases.push_back({"global-max-pool", [](Rng& rng) {
                         Var x = rand_param(rng, {2, 3, 3, 2});
                         return grad_max_rel_dev(
                             [&] {
                                 Var y = global_max_pool(x);
                                 return sum(mul(y, y));
                             },
                             {x});
                     }});
    cases.push_back({"softmax", [](Rng& rng) {
                         Var x = rand_param(rng, {3, 4});
                         return grad_max_rel_dev(
                             [&] {
                                 Var p = softmax_lastdim(x);
                                 return sum(mul(p, p));
                             },
                             {x});
                     }});
    cases.push_back({"cross-entropy", [](Rng& rng) {
                         Var x = rand_param(rng, {3, 4});
                         std::vector<std::int64_t> labels{
                             static_cast<std::int64_t>(rng.below(4)),
                             static_cast<std::int64_t>(rng.below(4)),
                             static_cast<std::int64_t>(rng.below(4))};
                         return grad_max_rel_dev(
                             [&] { return cross_entropy_sum(softmax_lastdim(x), labels); }, {x});
                     }});
    cases.push_back({"cosine-logits", [](Rng& rng) {
                         Var fm = rand_param(rng, {3, 4}, 0.2, 2.0);
                         Var w = rand_param(rng, {2, 4}, 0.2, 2.0);
                         Var tau = rand_param(rng, {1}, 1.0, 12.0);
                         return grad_max_rel_dev(
                             [&] {
                                 Var l = cosine_logits(fm, w, tau);
                                 return sum(mul(l, l));
                             },
                             {fm, w, tau});
                     }});
    cases.push_back({"neg-sq-euclid-logits", [](Rng& rng) {
                         Var x = rand_param(rng, {4});
                         Var protos = rand_param(rng, {3, 4});
                         return grad_max_rel_dev(
                             [&] {
                                 Var l = neg_sq_euclid_logits(x, protos);
                                 return sum(mul(l, l));
                             },
                             {x, protos});
                     }});

    // Composite few-shot losses: per-location classification loss, pooled
    // classification loss, prototype loss, prototype loss with per-location
    // queries.
    cases.push_back({"dense-loss", [](Rng& rng) {
                         Var fm0 = rand_param(rng, {4, 3}, 0.2, 2.0);
                         Var fm1 = rand_param(rng, {4, 3}, 0.2, 2.0);
                         Var w = rand_param(rng, {2, 3}, 0.2, 2.0);
                         Var tau = rand_param(rng, {1}, 2.0, 8.0);
                         return grad_max_rel_dev(
                             [&] { return dense_cost({fm0, fm1}, {0, 1}, w, tau); },
                             {fm0, fm1, w, tau});
                     }});
    cases.push_back({"pooled-loss", [](Rng& rng) {
                         Var v0 = rand_param(rng, {3}, 0.2, 2.0);
                         Var v1 = rand_param(rng, {3}, 0.2, 2.0);
                         Var w = rand_param(rng, {2, 3}, 0.2, 2.0);
                         Var tau = rand_param(rng, {1}, 2.0, 8.0);
                         return grad_max_rel_dev([&] { return flat_cost({v0, v1}, {0, 1}, w, tau); },
                                                 {v0, v1, w, tau});
                     }});
    cases.push_back({"prototype-loss", [](Rng& rng) {
                         std::vector<Var> emb;
                         for (int i = 0; i < 6; ++i) emb.push_back(rand_param(rng, {3}, 0.2, 2.0));
                         Var tau = rand_param(rng, {1}, 2.0, 8.0);
                         std::vector<std::int64_t> labels{0, 0, 0, 1, 1, 1};
                         std::vector<std::int64_t> support{0, 1, 3, 4}, query{2, 5};
                         std::vector<Var> leaves = emb;
                         leaves.push_back(tau);
                         return grad_max_rel_dev(
                             [&] {
                                 return proto_cost(emb, labels, support, query, 2,
                                                   Similarity::Cosine, tau);
                             },
                             leaves);
                     }});
    cases.push_back({"prototype-dense-loss", [](Rng& rng) {
                         std::vector<Var> rows;
                         for (int i = 0; i < 4; ++i) rows.push_back(rand_param(rng, {2, 3}, 0.2, 2.0));
                         Var tau = rand_param(rng, {1}, 2.0, 8.0);
                         std::vector<std::int64_t> labels{0, 0, 1, 1};
                         std::vector<std::int64_t> support{0, 2}, query{1, 3};
                         std::vector<Var> leaves = rows;
                         leaves.push_back(tau);
                         return grad_max_rel_dev(
                             [&] {
                                 // pooled embeddings rebuilt each evaluation so the
                                 // finite-difference probe sees leaf perturbations
                                 std::vector<Var> pooled;
                                 for (const auto& fm : rows)
                                     pooled.push_back(
                                         scale(add(select(fm, 0), select(fm, 1)), 0.5));
                                 return proto_dense_cost(pooled, rows, labels, support, query, 2,
                                                         tau);
                             },
                             leaves);
                     }});

    Rng root(4242);
    for (const auto& c : cases) {
        double worst = 0.0;
        for (int i = 0; i < kInstances; ++i) {
            Rng rng = root.stream(static_cast<std::uint64_t>(i) * 1000 +
                                  static_cast<std::uint64_t>(&c - cases.data()));
            worst = std::max(worst, c.run(rng));
        }
        EXPECT_LT(worst, kTol) << "op " << c.name;
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    EXPECT_LT(secs, 120.0);
    report("gradient-oracle");
}

// ---------------------------------------------------------------------------
// 2. On single-location feature maps, per-location classification reduces
//    bit-exactly to the pooled classifier, and per-location prototype
//    prediction reduces bit-exactly to plain prototype classification.

TEST(Acceptance, DenseFlatIdentityAtSingleLocation) {
    Rng rng(77);
    for (int inst = 0; inst < 20; ++inst) {
        Rng r = rng.stream(static_cast<std::uint64_t>(inst));
        std::int64_t d = 2 + static_cast<std::int64_t>(r.below(6));
        std::int64_t c = 2 + static_cast<std::int64_t>(r.below(4));
        Var v = rand_param(r, {d}, 0.2, 2.0);
        Var fm = reshape(v, {1, d});
        Var w = rand_param(r, {c, d}, 0.2, 2.0);
        Var tau = scalar_const(r.uniform(1.0, 12.0));
        Var dense = dense_classify(fm, w, tau);
        Var flat = flat_classify(v, w, tau);
        EXPECT_EQ(dense->t.values, flat->t.values);
        Var avg = predict_dense(fm, w, tau);
        Var proto = proto_classify(v, w, Similarity::Cosine, tau);
        EXPECT_EQ(avg->t.values, proto->t.values);
    }
    report("single-location-identity");
}

// ---------------------------------------------------------------------------
// 3. Per-location classification and averaged per-location prediction match
//    an independent nested-loop reimplementation within 1e-12.

TEST(Acceptance, DenseOracle) {
    Rng rng(88);
    for (int inst = 0; inst < 50; ++inst) {
        Rng r = rng.stream(static_cast<std::uint64_t>(inst));
        std::int64_t rr = 1 + static_cast<std::int64_t>(r.below(9));
        std::int64_t c = 2 + static_cast<std::int64_t>(r.below(4));
        std::int64_t d = 2 + static_cast<std::int64_t>(r.below(7));
        double tau_v = r.uniform(1.0, 12.0);
        Var fm = rand_param(r, {rr, d}, 0.2, 2.0);
        Var w = rand_param(r, {c, d}, 0.2, 2.0);
        Var tau = scalar_const(tau_v);
        auto probs = dense_classify(fm, w, tau)->t.values;
        auto expect = densefew::testing::dense_classify_oracle(fm->t.values, rr, d, w->t.values,
                                                               c, tau_v);
        ASSERT_EQ(probs.size(), expect.size());
        for (std::size_t i = 0; i < probs.size(); ++i) EXPECT_NEAR(probs[i], expect[i], 1e-12);
        auto avg = predict_dense(fm, w, tau)->t.values;
        auto avg_expect = densefew::testing::predict_dense_oracle(fm->t.values, rr, d,
                                                                  w->t.values, c, tau_v);
        for (std::size_t i = 0; i < avg.size(); ++i) EXPECT_NEAR(avg[i], avg_expect[i], 1e-12);
    }
    report("per-location-oracle");
}

// ---------------------------------------------------------------------------
// 4. Prototypes equal direct means; imprinting appends rows without touching
//    the existing bank; duplicating every support leaves prototypes unchanged.

TEST(Acceptance, PrototypeImprintOracle) {
    Rng rng(99);
    for (int inst = 0; inst < 20; ++inst) {
        Rng r = rng.stream(static_cast<std::uint64_t>(inst));
        std::int64_t c = 2 + static_cast<std::int64_t>(r.below(3));
        std::int64_t d = 2 + static_cast<std::int64_t>(r.below(5));
        std::int64_t shot = 2 + static_cast<std::int64_t>(r.below(3));
        std::vector<Var> emb;
        std::vector<std::int64_t> labels;
        std::vector<double> flat;
        for (std::int64_t j = 0; j < c; ++j)
            for (std::int64_t s = 0; s < shot; ++s) {
                Var e = rand_param(r, {d});
                emb.push_back(e);
                labels.push_back(j);
                flat.insert(flat.end(), e->t.values.begin(), e->t.values.end());
            }
        auto support = iota_vec(c * shot);
        Var protos = compute_prototypes(emb, labels, support, c);
        auto expect = densefew::testing::prototypes_oracle(flat, d, labels, support, c);
        EXPECT_EQ(protos->t.values, expect);

        // duplicated supports: same mean, exactly
        std::vector<Var> emb2 = emb;
        emb2.insert(emb2.end(), emb.begin(), emb.end());
        std::vector<std::int64_t> labels2 = labels;
        labels2.insert(labels2.end(), labels.begin(), labels.end());
        Var protos2 = compute_prototypes(emb2, labels2, iota_vec(2 * c * shot), c);
        for (std::size_t i = 0; i < protos->t.values.size(); ++i)
            EXPECT_NEAR(protos2->t.values[i], protos->t.values[i], 1e-15);

        // imprint preserves the existing rows bit-exactly
        Tensor bank = rand_param(r, {c + 1, d})->t;
        Tensor grown = imprint(bank, Tensor(protos->t.shape, protos->t.values));
        EXPECT_EQ(grown.shape, (Shape{2 * c + 1, d}));
        for (std::size_t i = 0; i < bank.values.size(); ++i)
            EXPECT_EQ(grown.values[i], bank.values[i]);
    }
    report("prototype-imprint-oracle");
}

// ---------------------------------------------------------------------------
// 5. Implanting never touches the base network: parameter checksum unchanged
//    after a full 50-epoch 16-channel training run, base-stream activations
//    bit-identical on 10 random inputs, leave-one-out family covers each
//    support exactly once, and 1-shot supports are rejected.

TEST(Acceptance, ImplantInvariants) {
    GlyphSpec gs;
    gs.classes = 5;
    gs.per_class = 2;
    gs.height = 16;
    gs.width = 16;
    gs.seed = 31;
    Dataset ds = generate_glyphs(gs);

    Rng mrng(41);
    auto base = std::make_shared<C128F>(ArchitectureConfig::c128f(8, 16, 16, 3), mrng);
    base->set_training(false);

    std::vector<StateRef> base_state;
    base->collect_state(base_state);
    std::uint64_t before = state_checksum(base_state);

    std::vector<std::vector<double>> ref_outputs;
    Rng in_rng(42);
    std::vector<Var> inputs;
    for (int i = 0; i < 10; ++i) {
        inputs.push_back(constant({1, 16, 16, 3},
                                  [&] {
                                      std::vector<double> v(16 * 16 * 3);
                                      for (auto& x : v) x = in_rng.uniform(-1.0, 1.0);
                                      return v;
                                  }()));
        ref_outputs.push_back(base->forward(inputs.back())->t.values);
    }

    Rng irng(43);
    WidenedNetwork net(base, ImplantSpec{16, -1}, irng);

    // 5-way 2-shot support set, trained for the full 50 epochs
    std::vector<std::int64_t> support = iota_vec(ds.count);
    std::vector<std::int64_t> labels = ds.labels;
    auto subtasks = loo_subtasks(labels, 5);
    EXPECT_EQ(subtasks.size(), static_cast<std::size_t>(ds.count));
    std::vector<std::int64_t> query_cover(static_cast<std::size_t>(ds.count), 0);
    for (const auto& t : subtasks) {
        ASSERT_EQ(t.query.size(), 1u);
        ++query_cover[static_cast<std::size_t>(t.query[0])];
        EXPECT_EQ(t.support.size(), static_cast<std::size_t>(ds.count - 1));
    }
    for (auto cnt : query_cover) EXPECT_EQ(cnt, 1);

    ImplantTrainConfig cfg;  // 16-channel, 50 epochs, AdamW defaults
    auto log = train_implants(net, ds, support, labels, 5, cfg);
    EXPECT_EQ(log.epoch_loss.size(), 50u);

    std::vector<StateRef> after_state;
    base->collect_state(after_state);
    EXPECT_EQ(state_checksum(after_state), before);

    for (int i = 0; i < 10; ++i) {
        Var widened = net.forward(inputs[static_cast<std::size_t>(i)]);
        std::int64_t d = base->out_channels();
        Var lead = slice_lastdim(widened, 0, d);
        EXPECT_EQ(lead->t.values, ref_outputs[static_cast<std::size_t>(i)]) << "input " << i;
    }

    // single-support classes are rejected up front
    std::vector<std::int64_t> one_shot{0, 1, 2, 3, 4};
    try {
        loo_subtasks(one_shot, 5);
        ADD_FAILURE() << "expected rejection of 1-shot supports";
    } catch (const ArgumentError& e) {
        EXPECT_NE(std::string(e.what()).find("1-shot"), std::string::npos);
    }
    report("implant-invariants");
}

// ---------------------------------------------------------------------------
// 6. The reported confidence half-width equals 1.96*sigma/sqrt(T) recomputed
//    externally from the per-task dump, and a label-independent model scores
//    20% +/- 2% on 5-way tasks over 2,000 tasks.

TEST(Acceptance, ConfidenceIntervalAndChanceCalibration) {
    GlyphSpec gs;
    gs.classes = 8;
    gs.per_class = 12;
    gs.height = 8;
    gs.width = 8;
    gs.seed = 51;
    Dataset ds = generate_glyphs(gs);
    std::vector<std::int64_t> classes = iota_vec(8);

    std::vector<FewShotTask> tasks;
    for (int t = 0; t < 2000; ++t) {
        Rng trng = Rng(51).stream(0x7a5c0000 + static_cast<std::uint64_t>(t));
        tasks.push_back(sample_task(ds, classes, 5, 1, 5, trng));
    }
    EvalConfig cfg;
    EvalReport rep = evaluate(hash_embedder(), ds, tasks, cfg);

    // external recomputation from the machine-readable dump
    std::stringstream ss;
    write_machine_report(rep, ss);
    std::vector<double> per_task;
    std::string key;
    double value;
    std::stringstream parse(ss.str());
    while (parse >> key >> value)
        if (key != "mean" && key != "ci95") per_task.push_back(value);
    ASSERT_EQ(per_task.size(), 2000u);
    double mean = 0.0;
    for (double a : per_task) mean += a;
    mean /= 2000.0;
    double sq = 0.0;
    for (double a : per_task) sq += (a - mean) * (a - mean);
    double half = 1.96 * std::sqrt(sq / 1999.0) / std::sqrt(2000.0);
    EXPECT_NEAR(rep.ci95, half, 1e-10);
    EXPECT_NEAR(rep.mean, mean, 1e-10);

    EXPECT_NEAR(rep.mean, 0.20, 0.02);
    report("confidence-interval-and-chance");
}

// ---------------------------------------------------------------------------
// 7. Desk-scale end-to-end run, fixed seed 17, width/8 ResNet-12 on a
//    synthetic 24-base / 8-novel glyph dataset: stage-1 training reaches
//    >= 90% base accuracy; 5-way 5-shot novel accuracy >= 60% with
//    nearest-prototype inference; implanting costs at most 1 point on the
//    same tasks. Whole run <= 15 minutes single-threaded.

TEST(Acceptance, EndToEndDeskScale) {
    auto start = std::chrono::steady_clock::now();

    GlyphSpec gs;
    gs.classes = 40;
    gs.per_class = 30;
    gs.height = 32;
    gs.width = 32;
    gs.seed = 17;
    Dataset ds = generate_glyphs(gs);
    SplitManifest sm = default_split(40, 24, 8, 8);

    Rng mrng = Rng(17).stream(0);
    auto model = std::make_shared<ResNet12>(ArchitectureConfig::resnet12(8, 32, 32, 3), mrng);

    TrainConfig tc;
    tc.iterations = 500;
    tc.batch = 32;
    tc.seed = 17;
    Stage1Result s1 = stage1_train(*model, ds, sm, tc);
    model->set_training(false);

    // (a) base training accuracy
    std::vector<std::int64_t> base_idx;
    for (auto cls : sm.classes_of(SplitName::Base))
        for (auto i : ds.class_members(cls)) base_idx.push_back(i);
    std::vector<std::int64_t> base_labels;
    {
        auto base_classes = sm.classes_of(SplitName::Base);
        for (auto i : base_idx) {
            auto it = std::find(base_classes.begin(), base_classes.end(),
                                ds.labels[static_cast<std::size_t>(i)]);
            base_labels.push_back(it - base_classes.begin());
        }
    }
    double base_acc = classifier_accuracy(*model, s1.weights, s1.tau, ds, base_idx, base_labels,
                                          LossMode::Dense);
    EXPECT_GE(base_acc, 0.90);

    // (b) novel 5-way 5-shot accuracy, nearest-prototype inference
    auto novel = sm.classes_of(SplitName::Novel);
    constexpr int kTasks = 20;
    std::vector<FewShotTask> tasks;
    for (int t = 0; t < kTasks; ++t) {
        Rng trng = Rng(17).stream(0x7a5c0000 + static_cast<std::uint64_t>(t));
        tasks.push_back(sample_task(ds, novel, 5, 5, 15, trng));
    }
    Embedder embed = [&](const Var& im) { return model->forward(im); };
    EvalConfig ec;
    EvalReport novel_rep = evaluate(embed, ds, tasks, ec);
    EXPECT_GE(novel_rep.mean, 0.60);

    // (c) per-task implanting must not cost more than one point on the
    //     exact same tasks
    std::vector<double> implanted(tasks.size(), 0.0);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        Rng irng = Rng(17).stream(1000 + t);
        WidenedNetwork net(model, ImplantSpec{16, -1}, irng);
        ImplantTrainConfig icfg;  // 50 epochs, 16 channels
        train_implants(net, ds, tasks[t].support_indices, tasks[t].support_labels, 5, icfg);
        Embedder wide = [&](const Var& im) { return net.forward(im); };
        implanted[t] = evaluate_task(wide, ds, tasks[t], ec);
    }
    EvalReport imp_rep = make_report(implanted);
    EXPECT_GE(imp_rep.mean, novel_rep.mean - 0.01);

    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    EXPECT_LE(secs, 900.0);
    std::printf("    base %.4f | novel %.4f +/- %.4f | implanted %.4f +/- %.4f | %.0fs\n",
                base_acc, novel_rep.mean, novel_rep.ci95, imp_rep.mean, imp_rep.ci95, secs);
    report("end-to-end-desk-scale");
}

// ---------------------------------------------------------------------------
// 8. Class activation maps are per-location probabilities: summed over all
//    classes they give the all-ones map within 1e-12, and the exported PGM
//    reproduces the same rescaled integers on reload.

TEST(Acceptance, CamNormalizationAndPgmRoundTrip) {
    Rng rng(61);
    std::int64_t h = 4, w = 5, d = 6, c = 3;
    Var fm_raw = rand_param(rng, {h, w, d}, 0.2, 2.0);
    FeatureMap fm{fm_raw};
    Var weights = rand_param(rng, {c, d}, 0.2, 2.0);
    Var tau = scalar_const(7.0);

    std::vector<double> total(static_cast<std::size_t>(h * w), 0.0);
    Var first;
    for (std::int64_t j = 0; j < c; ++j) {
        Var m = cam(fm, weights, tau, j);
        if (j == 0) first = m;
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += m->t.values[i];
    }
    for (double v : total) EXPECT_NEAR(v, 1.0, 1e-12);

    std::string path = ::testing::TempDir() + "acceptance_cam.pgm";
    write_pgm(path, first);
    std::ifstream is(path);
    std::string magic;
    std::int64_t pw, ph, maxv;
    is >> magic >> pw >> ph >> maxv;
    EXPECT_EQ(magic, "P2");
    EXPECT_EQ(pw, w);
    EXPECT_EQ(ph, h);
    EXPECT_EQ(maxv, 255);
    double lo = first->t.values[0], hi = first->t.values[0];
    for (double v : first->t.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    double span = hi > lo ? hi - lo : 1.0;
    for (std::size_t i = 0; i < first->t.values.size(); ++i) {
        int g;
        ASSERT_TRUE(is >> g);
        EXPECT_EQ(g, static_cast<int>(std::lround((first->t.values[i] - lo) / span * 255.0)));
    }
    std::remove(path.c_str());
    report("cam-normalization");
}
