#pragma once

// Embedding networks: a width-scalable ResNet-12 and the lighter C128F.
// Both map {n, h, w, c} image batches to {n, h', w', d} feature maps after
// four stages, each followed by 2x2 max-pooling. The last stage is exposed
// as an "implantable tail": forward_tail reports the base activations that
// an implant stream consumes.

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "densefew/checkpoint.hpp"
#include "densefew/layers.hpp"
#include "densefew/rng.hpp"
#include "densefew/tensor.hpp"

namespace densefew {

struct ArchitectureConfig {
    ArchId kind = ArchId::ResNet12;
    std::array<std::int64_t, 4> block_channels = {64, 128, 256, 512};
    std::int64_t input_h = 32, input_w = 32, input_c = 3;

    static ArchitectureConfig resnet12(std::int64_t width_div = 1, std::int64_t h = 32,
                                       std::int64_t w = 32, std::int64_t c = 3) {
        ArchitectureConfig cfg;
        cfg.kind = ArchId::ResNet12;
        cfg.block_channels = {64 / width_div, 128 / width_div, 256 / width_div, 512 / width_div};
        cfg.input_h = h;
        cfg.input_w = w;
        cfg.input_c = c;
        return cfg;
    }

    static ArchitectureConfig c128f(std::int64_t width_div = 1, std::int64_t h = 32,
                                    std::int64_t w = 32, std::int64_t c = 3) {
        ArchitectureConfig cfg;
        cfg.kind = ArchId::C128F;
        cfg.block_channels = {64 / width_div, 64 / width_div, 128 / width_div, 128 / width_div};
        cfg.input_h = h;
        cfg.input_w = w;
        cfg.input_c = c;
        return cfg;
    }
};

// Spatial feature map of one image: {h, w, d} values, viewed as r = h*w
// fibers of depth d.
struct FeatureMap {
    Var map;  // shape {h, w, d}
    std::int64_t h() const { return map->t.shape[0]; }
    std::int64_t w() const { return map->t.shape[1]; }
    std::int64_t d() const { return map->t.shape[2]; }
    std::int64_t r() const { return h() * w(); }
    Var rows() const { return reshape(map, {r(), d()}); }
};

enum class PoolMode { GAP, GMP };

class EmbeddingNetwork {
public:
    virtual ~EmbeddingNetwork() = default;

    // {n, h, w, c} -> {n, h', w', d}
    virtual Var forward(const Var& images) = 0;
    // everything before the implantable tail
    virtual Var forward_trunk(const Var& images) = 0;
    // the last stage; taps (when requested) receive the base-stream input of
    // each tail conv layer, in order
    virtual Var forward_tail(const Var& trunk_out, std::vector<Var>* taps) = 0;
    virtual std::int64_t tail_layers() const = 0;
    // base-stream channel count feeding tail layer i
    virtual std::int64_t tail_tap_channels(std::int64_t i) const = 0;

    virtual void set_training(bool training) = 0;
    virtual void freeze() = 0;
    virtual void collect_params(std::vector<ParamRef>& out) const = 0;
    virtual void collect_state(std::vector<StateRef>& out) = 0;

    const ArchitectureConfig& config() const { return config_; }
    std::int64_t out_channels() const { return config_.block_channels[3]; }

    void check_input(const Var& images) const {
        const Shape& s = images->t.shape;
        if (s.size() != 4 || s[1] != config_.input_h || s[2] != config_.input_w ||
            s[3] != config_.input_c)
            throw ShapeError("embedding input " + shape_str(s) + " does not match configured " +
                             std::to_string(config_.input_h) + "x" + std::to_string(config_.input_w) +
                             "x" + std::to_string(config_.input_c));
    }

protected:
    ArchitectureConfig config_;
};

// Residual block: three 3x3 conv layers with batch norm and swish-1, a 1x1
// conv shortcut adapting channels, add, swish, then 2x2 max-pool outside.
struct ResBlock {
    ConvBnUnit u1, u2;
    Conv2dLayer conv3;
    BatchNormLayer bn3;
    Conv2dLayer shortcut;
    BatchNormLayer bn_shortcut;

    ResBlock() = default;
    ResBlock(std::int64_t cin, std::int64_t cout, Rng& rng)
        : u1(3, 3, cin, cout, 1, 1, true, rng),
          u2(3, 3, cout, cout, 1, 1, true, rng),
          conv3(3, 3, cout, cout, 1, 1, rng),
          bn3(cout),
          shortcut(1, 1, cin, cout, 1, 0, rng),
          bn_shortcut(cout) {}

    // taps, when given, receives the post-activation outputs of the three
    // conv layers (conv3 tapped after batch norm, before the residual add)
    Var forward(const Var& x, std::vector<Var>* taps) {
        Var a1 = u1.forward(x);
        Var a2 = u2.forward(a1);
        Var a3 = bn3.forward(conv3.forward(a2));
        if (taps) {
            taps->push_back(a1);
            taps->push_back(a2);
            taps->push_back(a3);
        }
        Var sc = bn_shortcut.forward(shortcut.forward(x));
        return swish1(add(a3, sc));
    }

    void set_training(bool t) {
        u1.set_training(t);
        u2.set_training(t);
        bn3.set_training(t);
        bn_shortcut.set_training(t);
    }
    void freeze() {
        u1.freeze();
        u2.freeze();
        conv3.freeze();
        bn3.freeze();
        shortcut.freeze();
        bn_shortcut.freeze();
    }
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) const {
        u1.collect_params(prefix + ".conv1", out);
        u2.collect_params(prefix + ".conv2", out);
        conv3.collect_params(prefix + ".conv3", out);
        bn3.collect_params(prefix + ".conv3.bn", out);
        shortcut.collect_params(prefix + ".shortcut", out);
        bn_shortcut.collect_params(prefix + ".shortcut.bn", out);
    }
    void collect_state(const std::string& prefix, std::vector<StateRef>& out) {
        u1.collect_state(prefix + ".conv1", out);
        u2.collect_state(prefix + ".conv2", out);
        conv3.collect_state(prefix + ".conv3", out);
        bn3.collect_state(prefix + ".conv3.bn", out);
        shortcut.collect_state(prefix + ".shortcut", out);
        bn_shortcut.collect_state(prefix + ".shortcut.bn", out);
    }
};

class ResNet12 : public EmbeddingNetwork {
public:
    ResNet12(const ArchitectureConfig& cfg, Rng& rng) {
        config_ = cfg;
        std::int64_t cin = cfg.input_c;
        for (int b = 0; b < 4; ++b) {
            blocks_[b] = ResBlock(cin, cfg.block_channels[b], rng);
            cin = cfg.block_channels[b];
        }
    }

    Var forward(const Var& images) override { return forward_tail(forward_trunk(images), nullptr); }

    Var forward_trunk(const Var& images) override {
        check_input(images);
        Var x = images;
        for (int b = 0; b < 3; ++b) x = maxpool2x2(blocks_[b].forward(x, nullptr));
        return x;
    }

    Var forward_tail(const Var& trunk_out, std::vector<Var>* taps) override {
        std::vector<Var> inner;
        Var y = blocks_[3].forward(trunk_out, taps ? &inner : nullptr);
        if (taps) {
            // implant layer i consumes the base input of tail conv layer i
            taps->push_back(trunk_out);
            taps->push_back(inner[0]);
            taps->push_back(inner[1]);
        }
        return maxpool2x2(y);
    }

    std::int64_t tail_layers() const override { return 3; }
    std::int64_t tail_tap_channels(std::int64_t i) const override {
        return i == 0 ? config_.block_channels[2] : config_.block_channels[3];
    }

    void set_training(bool training) override {
        for (auto& b : blocks_) b.set_training(training);
    }
    void freeze() override {
        for (auto& b : blocks_) b.freeze();
    }
    void collect_params(std::vector<ParamRef>& out) const override {
        for (int b = 0; b < 4; ++b)
            blocks_[b].collect_params("block" + std::to_string(b + 1), out);
    }
    void collect_state(std::vector<StateRef>& out) override {
        for (int b = 0; b < 4; ++b) blocks_[b].collect_state("block" + std::to_string(b + 1), out);
    }

    ResBlock& block(int i) { return blocks_[i]; }

private:
    std::array<ResBlock, 4> blocks_;
};

class C128F : public EmbeddingNetwork {
public:
    C128F(const ArchitectureConfig& cfg, Rng& rng) {
        config_ = cfg;
        std::int64_t cin = cfg.input_c;
        for (int i = 0; i < 4; ++i) {
            units_[i] = ConvBnUnit(3, 3, cin, cfg.block_channels[i], 1, 1, true, rng);
            cin = cfg.block_channels[i];
        }
    }

    Var forward(const Var& images) override { return forward_tail(forward_trunk(images), nullptr); }

    Var forward_trunk(const Var& images) override {
        check_input(images);
        Var x = images;
        for (int i = 0; i < 3; ++i) x = maxpool2x2(units_[i].forward(x));
        return x;
    }

    Var forward_tail(const Var& trunk_out, std::vector<Var>* taps) override {
        if (taps) taps->push_back(trunk_out);
        return maxpool2x2(units_[3].forward(trunk_out));
    }

    std::int64_t tail_layers() const override { return 1; }
    std::int64_t tail_tap_channels(std::int64_t) const override { return config_.block_channels[2]; }

    void set_training(bool training) override {
        for (auto& u : units_) u.set_training(training);
    }
    void freeze() override {
        for (auto& u : units_) u.freeze();
    }
    void collect_params(std::vector<ParamRef>& out) const override {
        for (int i = 0; i < 4; ++i) units_[i].collect_params("conv" + std::to_string(i + 1), out);
    }
    void collect_state(std::vector<StateRef>& out) override {
        for (int i = 0; i < 4; ++i) units_[i].collect_state("conv" + std::to_string(i + 1), out);
    }

private:
    std::array<ConvBnUnit, 4> units_;
};

inline std::unique_ptr<EmbeddingNetwork> make_embedding(const ArchitectureConfig& cfg, Rng& rng) {
    switch (cfg.kind) {
        case ArchId::ResNet12: return std::make_unique<ResNet12>(cfg, rng);
        case ArchId::C128F: return std::make_unique<C128F>(cfg, rng);
    }
    throw ArgumentError("unknown architecture kind");
}

// Embeds a single image {h, w, c} into its spatial feature map.
inline FeatureMap embed(EmbeddingNetwork& model, const Var& image) {
    const Shape& s = image->t.shape;
    if (s.size() != 3) throw ShapeError("embed: expected rank-3 image, got " + shape_str(s));
    Var batched = reshape(image, {1, s[0], s[1], s[2]});
    Var out = model.forward(batched);
    return FeatureMap{reshape(out, {out->t.shape[1], out->t.shape[2], out->t.shape[3]})};
}

// Embeds a batch and returns one FeatureMap per image.
inline std::vector<FeatureMap> embed_batch(EmbeddingNetwork& model, const Var& images) {
    Var out = model.forward(images);
    std::int64_t n = out->t.shape[0];
    std::vector<FeatureMap> maps;
    maps.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
        maps.push_back(FeatureMap{select(out, i)});
    return maps;
}

// GAP = spatial mean per channel; GMP = spatial max per channel.
inline Var pool_embedding(const FeatureMap& fm, PoolMode mode) {
    Var batched = reshape(fm.map, {1, fm.h(), fm.w(), fm.d()});
    Var pooled = mode == PoolMode::GAP ? global_avg_pool(batched) : global_max_pool(batched);
    return reshape(pooled, {fm.d()});
}

}  // namespace densefew
