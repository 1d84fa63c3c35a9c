#pragma once

// Command-line entry point: gen-data, train-stage1, implant, eval, cam.
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
// failure. Every run prints its resolved configuration and seed.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "densefew/data.hpp"
#include "densefew/episodes.hpp"
#include "densefew/fewshot.hpp"
#include "densefew/implant.hpp"
#include "densefew/model_io.hpp"
#include "densefew/models.hpp"
#include "densefew/training.hpp"

namespace densefew::cli {

inline void print_config(const std::string& cmd,
                         const std::vector<std::pair<std::string, std::string>>& kv) {
    std::cout << "command = " << cmd << "\n";
    for (const auto& [k, v] : kv) std::cout << k << " = " << v << "\n";
}

inline ArchitectureConfig parse_arch(const std::string& arch, std::int64_t width_div,
                                     std::int64_t resolution) {
    if (arch == "resnet12") return ArchitectureConfig::resnet12(width_div, resolution, resolution);
    if (arch == "c128f") return ArchitectureConfig::c128f(width_div, resolution, resolution);
    throw ArgumentError("unknown architecture '" + arch + "'");
}

inline SplitManifest proportional_split(std::int64_t classes) {
    std::int64_t base_n = classes * 3 / 5;
    std::int64_t val_n = classes / 5;
    return default_split(classes, base_n, val_n, classes - base_n - val_n);
}

// --------------------------------------------------------------------------

inline int cmd_gen_data(const std::string& out, const std::string& split_out,
                        std::int64_t classes, std::int64_t per_class, std::int64_t resolution,
                        double jitter, double noise, std::uint64_t seed) {
    print_config("gen-data", {{"classes", std::to_string(classes)},
                              {"per_class", std::to_string(per_class)},
                              {"resolution", std::to_string(resolution)},
                              {"jitter", std::to_string(jitter)},
                              {"noise", std::to_string(noise)},
                              {"seed", std::to_string(seed)},
                              {"out", out}});
    GlyphSpec spec;
    spec.classes = classes;
    spec.per_class = per_class;
    spec.height = spec.width = resolution;
    spec.jitter = jitter;
    spec.noise = noise;
    spec.seed = seed;
    Dataset ds = generate_glyphs(spec);
    save_dataset(ds, out);
    save_split(proportional_split(classes), split_out);
    std::cout << "wrote " << ds.count << " images to " << out << "\n";
    std::cout << "wrote split manifest to " << split_out << "\n";
    return 0;
}

inline int cmd_train_stage1(const std::string& data, const std::string& split_path,
                            const std::string& out, const std::string& loss,
                            const std::string& arch, std::int64_t width_div, std::int64_t iters,
                            std::int64_t batch, std::uint64_t seed, double tau_init,
                            const std::string& optimizer) {
    print_config("train-stage1",
                 {{"data", data},
                  {"split", split_path},
                  {"loss", loss},
                  {"arch", arch},
                  {"width_div", std::to_string(width_div)},
                  {"iters", std::to_string(iters)},
                  {"batch", std::to_string(batch)},
                  {"tau_init", std::to_string(tau_init)},
                  {"optimizer", optimizer},
                  {"seed", std::to_string(seed)},
                  {"out", out}});
    Dataset ds = load_dataset(data);
    SplitManifest split = load_split(split_path);
    ArchitectureConfig cfg = parse_arch(arch, width_div, ds.height);
    Rng rng = Rng(seed).stream(0);
    auto model = make_embedding(cfg, rng);

    if (loss == "episodic") {
        EpisodicConfig ec;
        ec.episodes = iters;
        ec.seed = seed;
        auto res = episodic_stage1_train(*model, ds, split, ec);
        std::cout << "final episode loss " << res.loss_log.back() << "\n";
        save_model(out, *model, nullptr, nullptr, ec.tau, seed);
    } else {
        TrainConfig tc;
        tc.iterations = iters;
        tc.batch = batch;
        tc.seed = seed;
        tc.tau_init = tau_init;
        tc.loss = loss == "dense" ? LossMode::Dense : LossMode::Gap;
        if (loss != "dense" && loss != "gap") throw ArgumentError("unknown loss '" + loss + "'");
        if (optimizer == "adam") tc.opt = {OptKind::Adam, 1e-3, 0.9, 0.9, 0.999, 1e-8, 0.0};
        else if (optimizer == "adamw") tc.opt = {OptKind::AdamW, 1e-3, 0.9, 0.9, 0.999, 1e-8, 5e-4};
        else if (optimizer != "sgd") throw ArgumentError("unknown optimizer '" + optimizer + "'");
        auto res = stage1_train(*model, ds, split, tc);
        Tensor weights(res.weights->t.shape, res.weights->t.values);
        save_model(out, *model, nullptr, &weights, res.tau->t.values[0], seed);
        std::cout << "final loss " << res.loss_log.back() << ", tau " << res.tau->t.values[0]
                  << "\n";
    }
    std::cout << "wrote checkpoint to " << out << "\n";
    return 0;
}

inline int cmd_implant(const std::string& model_path, const std::string& data,
                       const std::string& support_path, const std::string& out,
                       std::int64_t channels, std::int64_t epochs, const std::string& loss,
                       std::uint64_t seed) {
    print_config("implant", {{"model", model_path},
                             {"data", data},
                             {"support", support_path},
                             {"channels", std::to_string(channels)},
                             {"epochs", std::to_string(epochs)},
                             {"loss", loss},
                             {"seed", std::to_string(seed)},
                             {"out", out}});
    Dataset ds = load_dataset(data);
    LoadedModel m = load_model(model_path);
    if (m.widened) throw ArgumentError("model is already widened; implant from a base checkpoint");
    FewShotTask task = load_task(support_path);
    if (task.shot == 1)
        throw ArgumentError("implanting does not apply to the 1-shot scenario: "
                            "leave-one-out subtasks need at least 2 supports per class");

    ImplantSpec spec;
    spec.channels = channels;
    Rng rng = Rng(seed).stream(2);
    WidenedNetwork net(m.base, spec, rng);
    ImplantTrainConfig cfg;
    cfg.epochs = epochs;
    cfg.loss = loss == "dense" ? ImplantLoss::Dense : ImplantLoss::Pooled;
    if (loss != "dense" && loss != "pooled") throw ArgumentError("unknown loss '" + loss + "'");
    auto log = train_implants(net, ds, task.support_indices, task.support_labels, task.way, cfg);
    std::cout << "epoch 1 loss " << log.epoch_loss.front() << ", epoch " << epochs << " loss "
              << log.epoch_loss.back() << "\n";
    Tensor* weights = m.classifier_weights.size() > 0 ? &m.classifier_weights : nullptr;
    save_model(out, *m.base, &net, weights, m.tau, seed);
    std::cout << "wrote widened checkpoint to " << out << "\n";
    return 0;
}

inline int cmd_eval(const std::string& model_path, const std::string& data,
                    const std::string& split_path, std::int64_t way, std::int64_t shot,
                    std::int64_t queries, std::int64_t num_tasks, const std::string& inference,
                    const std::string& support_pool, const std::string& query_pool,
                    const std::string& protocol, int threads, std::uint64_t seed, double tau_flag,
                    const std::string& out) {
    print_config("eval", {{"model", model_path},
                          {"data", data},
                          {"split", split_path},
                          {"way", std::to_string(way)},
                          {"shot", std::to_string(shot)},
                          {"queries", std::to_string(queries)},
                          {"tasks", std::to_string(num_tasks)},
                          {"inference", inference},
                          {"support_pool", support_pool},
                          {"query_pool", query_pool},
                          {"protocol", protocol},
                          {"threads", std::to_string(threads)},
                          {"seed", std::to_string(seed)}});
    Dataset ds = load_dataset(data);
    SplitManifest split = load_split(split_path);
    LoadedModel m = load_model(model_path);

    EvalConfig cfg;
    cfg.inference = inference == "dense" ? InferenceMode::Dense : InferenceMode::Nearest;
    if (inference != "dense" && inference != "nearest")
        throw ArgumentError("unknown inference '" + inference + "'");
    cfg.support_pool = support_pool == "gmp" ? PoolMode::GMP : PoolMode::GAP;
    if (support_pool != "gap" && support_pool != "gmp")
        throw ArgumentError("unknown support pooling '" + support_pool + "'");
    if (query_pool == "gap") cfg.query_pool = QueryPool::GAP;
    else if (query_pool == "gmp") cfg.query_pool = QueryPool::GMP;
    else if (query_pool == "dense") cfg.query_pool = QueryPool::Dense;
    else throw ArgumentError("unknown query pooling '" + query_pool + "'");
    cfg.tau = tau_flag > 0.0 ? tau_flag : m.tau;
    cfg.threads = threads;

    SplitName source = protocol == "base" ? SplitName::Base : SplitName::Novel;
    auto classes = split.classes_of(source);
    Rng root(seed);
    std::vector<FewShotTask> tasks;
    for (std::int64_t t = 0; t < num_tasks; ++t) {
        Rng trng = root.stream(0x7a5c0000ull + static_cast<std::uint64_t>(t));
        tasks.push_back(sample_task(ds, classes, way, shot, queries, trng));
    }

    EvalReport rep;
    if (protocol == "both") {
        if (m.classifier_weights.size() == 0)
            throw ArgumentError("both-classes protocol needs a checkpoint with classifier weights");
        auto base_classes = split.classes_of(SplitName::Base);
        auto row = base_row_of(base_classes, ds.num_classes);
        BothQueryPool pool;
        pool.per_task = way * queries;
        for (std::int64_t i = 0; i < ds.count; ++i) {
            std::int64_t r = row[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])];
            if (r >= 0) {
                pool.base_indices.push_back(i);
                pool.base_class_rows.push_back(r);
            }
        }
        rep = evaluate_both(m.embedder(), ds, m.classifier_weights, tasks, pool, cfg, seed);
    } else if (protocol == "novel" || protocol == "base") {
        rep = evaluate(m.embedder(), ds, tasks, cfg);
    } else {
        throw ArgumentError("unknown protocol '" + protocol + "'");
    }

    std::printf("tasks %lld  mean %.4f  ci95 %.4f\n", static_cast<long long>(rep.task_count),
                rep.mean, rep.ci95);
    if (!out.empty()) {
        std::ofstream os(out);
        if (!os) throw FormatError("cannot open report for writing: " + out);
        write_machine_report(rep, os);
        std::cout << "wrote report to " << out << "\n";
    } else {
        write_machine_report(rep, std::cout);
    }
    return 0;
}

inline int cmd_cam(const std::string& model_path, const std::string& data, std::int64_t image,
                   std::int64_t cls, const std::string& format, const std::string& out) {
    print_config("cam", {{"model", model_path},
                         {"data", data},
                         {"image", std::to_string(image)},
                         {"class", std::to_string(cls)},
                         {"format", format},
                         {"out", out}});
    Dataset ds = load_dataset(data);
    LoadedModel m = load_model(model_path);
    if (m.classifier_weights.size() == 0)
        throw ArgumentError("cam needs a checkpoint with classifier weights");
    auto embed_fn = m.embedder();
    Var fm = select(embed_fn(ds.batch({image})), 0);
    Var weights = constant(m.classifier_weights.shape, m.classifier_weights.values);
    Var map = cam(FeatureMap{fm}, weights, scalar_const(m.tau), cls);
    if (format == "pgm") write_pgm(out, map);
    else if (format == "csv") write_csv_grid(out, map);
    else throw ArgumentError("unknown cam format '" + format + "'");
    std::cout << "wrote " << format << " map to " << out << "\n";
    return 0;
}

// --------------------------------------------------------------------------

inline int run(int argc, const char* const* argv) {
    CLI::App app{"few-shot dense classification and implanting toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "flat key = value configuration file");
    app.allow_config_extras(false);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic glyph dataset");
    std::int64_t classes = 40, per_class = 100, resolution = 32;
    double jitter = 0.04, noise = 0.02;
    std::uint64_t gen_seed = 17;
    std::string gen_out = "dataset.fslt", gen_split;
    gen->add_option("--classes", classes);
    gen->add_option("--per-class", per_class);
    gen->add_option("--resolution", resolution);
    gen->add_option("--jitter", jitter);
    gen->add_option("--noise", noise);
    gen->add_option("--seed", gen_seed)->envname("DENSEFEW_SEED");
    gen->add_option("--out", gen_out);
    gen->add_option("--split-out", gen_split);

    // train-stage1
    auto* tr = app.add_subcommand("train-stage1", "stage-1 representation learning");
    std::string tr_data, tr_split, tr_out = "model.fslc", tr_loss = "dense",
                tr_arch = "resnet12", tr_opt = "sgd";
    std::int64_t width_div = 8, iters = 500, batch = 32;
    double tau_init = 10.0;
    std::uint64_t tr_seed = 17;
    tr->add_option("--data", tr_data)->required();
    tr->add_option("--split", tr_split);
    tr->add_option("--out", tr_out);
    tr->add_option("--loss", tr_loss)->check(CLI::IsMember({"dense", "gap", "episodic"}));
    tr->add_option("--arch", tr_arch)->check(CLI::IsMember({"resnet12", "c128f"}));
    tr->add_option("--optimizer", tr_opt)->check(CLI::IsMember({"sgd", "adam", "adamw"}));
    tr->add_option("--width-div", width_div);
    tr->add_option("--iters", iters);
    tr->add_option("--batch", batch);
    tr->add_option("--tau-init", tau_init);
    tr->add_option("--seed", tr_seed)->envname("DENSEFEW_SEED");

    // implant
    auto* im = app.add_subcommand("implant", "stage-2 implant training on a support set");
    std::string im_model, im_data, im_support, im_out = "widened.fslc", im_loss = "pooled";
    std::int64_t channels = 16, epochs = 50;
    std::int64_t im_shot = 0;
    std::uint64_t im_seed = 17;
    im->add_option("--model", im_model)->required();
    im->add_option("--data", im_data)->required();
    im->add_option("--support", im_support)->required();
    im->add_option("--out", im_out);
    im->add_option("--channels", channels);
    im->add_option("--epochs", epochs);
    im->add_option("--shot", im_shot);  // optional sanity declaration of the task's shot count
    im->add_option("--loss", im_loss)->check(CLI::IsMember({"pooled", "dense"}));
    im->add_option("--seed", im_seed)->envname("DENSEFEW_SEED");

    // eval
    auto* ev = app.add_subcommand("eval", "few-shot evaluation over sampled tasks");
    std::string ev_model, ev_data, ev_split, ev_inference = "nearest", ev_spool = "gap",
                ev_qpool = "gap", ev_protocol = "novel", ev_out;
    std::int64_t way = 5, shot = 5, queries = 30, num_tasks = 600;
    int threads = 1;
    double ev_tau = 0.0;  // 0: use the stage-1 learned tau from the checkpoint
    std::uint64_t ev_seed = 17;
    ev->add_option("--model", ev_model)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--split", ev_split);
    ev->add_option("--way", way);
    ev->add_option("--shot", shot);
    ev->add_option("--queries", queries);
    ev->add_option("--tasks", num_tasks);
    ev->add_option("--inference", ev_inference)->check(CLI::IsMember({"nearest", "dense"}));
    ev->add_option("--support-pool", ev_spool)->check(CLI::IsMember({"gap", "gmp"}));
    ev->add_option("--query-pool", ev_qpool)->check(CLI::IsMember({"gap", "gmp", "dense"}));
    ev->add_option("--protocol", ev_protocol)->check(CLI::IsMember({"novel", "base", "both"}));
    ev->add_option("--threads", threads);
    ev->add_option("--tau", ev_tau);
    ev->add_option("--seed", ev_seed)->envname("DENSEFEW_SEED");
    ev->add_option("--out", ev_out);

    // cam
    auto* cm = app.add_subcommand("cam", "export a class activation map");
    std::string cm_model, cm_data, cm_format = "pgm", cm_out = "cam.pgm";
    std::int64_t cm_image = 0, cm_class = 0;
    cm->add_option("--model", cm_model)->required();
    cm->add_option("--data", cm_data)->required();
    cm->add_option("--image", cm_image);
    cm->add_option("--class", cm_class);
    cm->add_option("--format", cm_format)->check(CLI::IsMember({"pgm", "csv"}));
    cm->add_option("--out", cm_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            if (gen_split.empty()) gen_split = gen_out + ".split";
            return cmd_gen_data(gen_out, gen_split, classes, per_class, resolution, jitter, noise,
                                gen_seed);
        }
        if (tr->parsed()) {
            if (tr_split.empty()) tr_split = tr_data + ".split";
            return cmd_train_stage1(tr_data, tr_split, tr_out, tr_loss, tr_arch, width_div, iters,
                                    batch, tr_seed, tau_init, tr_opt);
        }
        if (im->parsed()) {
            if (im_shot == 1)
                throw ArgumentError("implanting does not apply to the 1-shot scenario: "
                                    "leave-one-out subtasks need at least 2 supports per class");
            return cmd_implant(im_model, im_data, im_support, im_out, channels, epochs, im_loss,
                               im_seed);
        }
        if (ev->parsed()) {
            if (ev_split.empty()) ev_split = ev_data + ".split";
            return cmd_eval(ev_model, ev_data, ev_split, way, shot, queries, num_tasks,
                            ev_inference, ev_spool, ev_qpool, ev_protocol, threads, ev_seed,
                            ev_tau, ev_out);
        }
        if (cm->parsed())
            return cmd_cam(cm_model, cm_data, cm_image, cm_class, cm_format, cm_out);
        return 1;
    } catch (const FormatError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
}

}  // namespace densefew::cli
