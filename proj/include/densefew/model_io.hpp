#pragma once

// Whole-model save/load on top of the checkpoint format. Embedding records
// are prefixed "base/", implant records "implant/", and the stage-1
// classifier bank is stored as "classifier/weights" with tau in the header.

#include <memory>
#include <string>
#include <vector>

#include "densefew/checkpoint.hpp"
#include "densefew/episodes.hpp"
#include "densefew/implant.hpp"
#include "densefew/models.hpp"
#include "densefew/rng.hpp"

namespace densefew {

struct LoadedModel {
    ArchitectureConfig cfg;
    std::shared_ptr<EmbeddingNetwork> base;
    std::unique_ptr<WidenedNetwork> widened;  // null for plain checkpoints
    Tensor classifier_weights;                // empty if absent
    double tau = 10.0;
    std::uint64_t seed = 0;

    // Batched feature-map embedder over the widened network when present.
    Embedder embedder() {
        if (widened) {
            WidenedNetwork* w = widened.get();
            return [w](const Var& images) { return w->forward(images); };
        }
        EmbeddingNetwork* b = base.get();
        return [b](const Var& images) { return b->forward(images); };
    }

    std::int64_t out_channels() const {
        return widened ? widened->out_channels() : base->out_channels();
    }
};

inline CheckpointMeta meta_from_config(const ArchitectureConfig& cfg) {
    CheckpointMeta meta;
    meta.arch = cfg.kind;
    for (int i = 0; i < 4; ++i)
        meta.block_channels[i] = static_cast<std::uint32_t>(cfg.block_channels[i]);
    meta.input_h = static_cast<std::uint32_t>(cfg.input_h);
    meta.input_w = static_cast<std::uint32_t>(cfg.input_w);
    meta.input_c = static_cast<std::uint32_t>(cfg.input_c);
    return meta;
}

inline ArchitectureConfig config_from_meta(const CheckpointMeta& meta) {
    ArchitectureConfig cfg;
    cfg.kind = meta.arch;
    for (int i = 0; i < 4; ++i) cfg.block_channels[i] = meta.block_channels[i];
    cfg.input_h = meta.input_h;
    cfg.input_w = meta.input_w;
    cfg.input_c = meta.input_c;
    return cfg;
}

inline void save_model(const std::string& path, EmbeddingNetwork& base,
                       WidenedNetwork* widened, const Tensor* classifier_weights, double tau,
                       std::uint64_t seed) {
    Checkpoint ckpt;
    ckpt.meta = meta_from_config(base.config());
    ckpt.meta.tau = tau;
    ckpt.meta.seed = seed;
    ckpt.meta.implant_channels =
        widened ? static_cast<std::uint32_t>(widened->implant_channels()) : 0;
    std::vector<StateRef> refs;
    base.collect_state(refs);
    capture_state(refs, "base/", ckpt);
    if (widened) {
        std::vector<StateRef> irefs;
        widened->collect_state(irefs);
        capture_state(irefs, "", ckpt);  // names already carry the implant/ prefix
    }
    if (classifier_weights && classifier_weights->size() > 0)
        ckpt.records.push_back(
            {"classifier/weights", classifier_weights->shape, classifier_weights->values});
    save_checkpoint(ckpt, path);
}

inline LoadedModel load_model(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    LoadedModel m;
    m.cfg = config_from_meta(ckpt.meta);
    m.tau = ckpt.meta.tau;
    m.seed = ckpt.meta.seed;
    Rng scratch(0);
    m.base = std::shared_ptr<EmbeddingNetwork>(make_embedding(m.cfg, scratch));
    {
        std::vector<StateRef> refs;
        m.base->collect_state(refs);
        for (auto& r : refs) r.name = "base/" + r.name;
        restore_state(ckpt, refs);
    }
    m.base->set_training(false);
    if (ckpt.meta.implant_channels > 0) {
        ImplantSpec spec;
        spec.channels = ckpt.meta.implant_channels;
        m.widened = std::make_unique<WidenedNetwork>(m.base, spec, scratch);
        std::vector<StateRef> refs;
        m.widened->collect_state(refs);
        restore_state(ckpt, refs);
        m.widened->set_training(false);
    }
    if (const CheckpointRecord* rec = ckpt.find("classifier/weights"))
        m.classifier_weights = Tensor(rec->shape, rec->values);
    return m;
}

// FNV-1a over a state snapshot; used to verify frozen parameters.
inline std::uint64_t state_checksum(const std::vector<StateRef>& refs) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix_bytes = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& r : refs) {
        mix_bytes(r.name.data(), r.name.size());
        mix_bytes(r.values->data(), r.values->size() * sizeof(double));
    }
    return h;
}

}  // namespace densefew
