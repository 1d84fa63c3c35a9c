#include <gtest/gtest.h>

#include "densefew/models.hpp"
#include "densefew/rng.hpp"

using namespace densefew;

namespace {

Var random_images(std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t c, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(n * h * w * c));
    for (auto& x : v) x = rng.uniform(-1, 1);
    return constant({n, h, w, c}, std::move(v));
}

}  // namespace

TEST(Models, ResNet12DefaultMaps84To5x5x512) {
    Rng rng(1);
    ResNet12 net(ArchitectureConfig::resnet12(1, 84, 84, 3), rng);
    net.set_training(false);
    Var out = net.forward(random_images(1, 84, 84, 3, rng));
    EXPECT_EQ(out->t.shape, (Shape{1, 5, 5, 512}));
}

TEST(Models, ResNet12EighthWidthMaps32To2x2x64) {
    Rng rng(2);
    ResNet12 net(ArchitectureConfig::resnet12(8), rng);
    net.set_training(false);
    EXPECT_EQ(net.config().block_channels, (std::array<std::int64_t, 4>{8, 16, 32, 64}));
    Var out = net.forward(random_images(2, 32, 32, 3, rng));
    EXPECT_EQ(out->t.shape, (Shape{2, 2, 2, 64}));
    EXPECT_EQ(net.out_channels(), 64);
}

TEST(Models, C128FMaps84To5x5x128) {
    Rng rng(3);
    C128F net(ArchitectureConfig::c128f(1, 84, 84, 3), rng);
    net.set_training(false);
    Var out = net.forward(random_images(1, 84, 84, 3, rng));
    EXPECT_EQ(out->t.shape, (Shape{1, 5, 5, 128}));
}

TEST(Models, ResolutionMismatchRejected) {
    Rng rng(4);
    ResNet12 net(ArchitectureConfig::resnet12(8), rng);
    EXPECT_THROW(net.forward(random_images(1, 16, 16, 3, rng)), ShapeError);
    EXPECT_THROW(net.forward(random_images(1, 32, 32, 1, rng)), ShapeError);
}

TEST(Models, EvalForwardIsBitDeterministic) {
    Rng rng(5);
    ResNet12 net(ArchitectureConfig::resnet12(8), rng);
    net.set_training(false);
    Var x = random_images(1, 32, 32, 3, rng);
    Var y1 = net.forward(x);
    Var y2 = net.forward(x);
    EXPECT_EQ(y1->t.values, y2->t.values);
}

TEST(Models, TrunkPlusTailEqualsFullForward) {
    Rng rng(6);
    ResNet12 net(ArchitectureConfig::resnet12(8), rng);
    net.set_training(false);
    Var x = random_images(1, 32, 32, 3, rng);
    Var whole = net.forward(x);
    std::vector<Var> taps;
    Var split = net.forward_tail(net.forward_trunk(x), &taps);
    EXPECT_EQ(whole->t.values, split->t.values);
    ASSERT_EQ(taps.size(), 3u);
    EXPECT_EQ(taps[0]->t.shape[3], net.tail_tap_channels(0));  // trunk output, 32 channels
    EXPECT_EQ(taps[1]->t.shape[3], net.tail_tap_channels(1));
    EXPECT_EQ(taps[2]->t.shape[3], net.tail_tap_channels(2));
}

TEST(Models, C128FTailHasOneTap) {
    Rng rng(7);
    C128F net(ArchitectureConfig::c128f(8), rng);
    net.set_training(false);
    std::vector<Var> taps;
    Var x = random_images(1, 32, 32, 3, rng);
    net.forward_tail(net.forward_trunk(x), &taps);
    ASSERT_EQ(taps.size(), 1u);
    EXPECT_EQ(net.tail_layers(), 1);
    EXPECT_EQ(taps[0]->t.shape[3], net.tail_tap_channels(0));
}

TEST(Models, ResidualBlockMatchesConvPathShape) {
    Rng rng(8);
    ResBlock block(3, 10, rng);
    block.set_training(false);
    std::vector<Var> taps;
    Var y = block.forward(random_images(1, 8, 8, 3, rng), &taps);
    EXPECT_EQ(y->t.shape, (Shape{1, 8, 8, 10}));
    EXPECT_EQ(taps[2]->t.shape, y->t.shape);  // conv-path output shape
}

TEST(Models, EmbedSingleImageShape) {
    Rng rng(9);
    ResNet12 net(ArchitectureConfig::resnet12(8), rng);
    net.set_training(false);
    std::vector<double> img(32 * 32 * 3, 0.25);
    FeatureMap fm = embed(net, constant({32, 32, 3}, img));
    EXPECT_EQ(fm.h(), 2);
    EXPECT_EQ(fm.w(), 2);
    EXPECT_EQ(fm.d(), 64);
    EXPECT_EQ(fm.r(), 4);
    EXPECT_EQ(fm.rows()->t.shape, (Shape{4, 64}));
}

TEST(Models, EmbedBatchMatchesSingleEmbeds) {
    Rng rng(10);
    C128F net(ArchitectureConfig::c128f(8), rng);
    net.set_training(false);
    Var imgs = random_images(3, 32, 32, 3, rng);
    auto maps = embed_batch(net, imgs);
    ASSERT_EQ(maps.size(), 3u);
    for (std::int64_t i = 0; i < 3; ++i) {
        FeatureMap single = embed(net, select(imgs, i));
        EXPECT_EQ(maps[static_cast<std::size_t>(i)].map->t.values, single.map->t.values);
    }
}

TEST(Pooling, GapAndGmpExamples) {
    FeatureMap fm{constant({2, 1, 1}, {2, 4})};
    EXPECT_DOUBLE_EQ(pool_embedding(fm, PoolMode::GAP)->t.values[0], 3.0);
    EXPECT_DOUBLE_EQ(pool_embedding(fm, PoolMode::GMP)->t.values[0], 4.0);
}

TEST(Pooling, SingleLocationMapPoolsToItselfUnderBothModes) {
    FeatureMap fm{constant({1, 1, 3}, {0.5, -2.0, 7.0})};
    Var gap = pool_embedding(fm, PoolMode::GAP);
    Var gmp = pool_embedding(fm, PoolMode::GMP);
    EXPECT_EQ(gap->t.values, fm.map->t.values);
    EXPECT_EQ(gmp->t.values, fm.map->t.values);
}

TEST(Pooling, GapCommutesWithConstantShift) {
    Rng rng(11);
    std::vector<double> v(3 * 3 * 4);
    for (auto& x : v) x = rng.uniform(-1, 1);
    FeatureMap fm{constant({3, 3, 4}, v)};
    double c = 0.7531;
    std::vector<double> shifted = v;
    for (auto& x : shifted) x += c;
    FeatureMap fm2{constant({3, 3, 4}, shifted)};
    Var g1 = pool_embedding(fm, PoolMode::GAP);
    Var g2 = pool_embedding(fm2, PoolMode::GAP);
    for (std::size_t q = 0; q < 4; ++q) EXPECT_NEAR(g2->t.values[q], g1->t.values[q] + c, 1e-12);
}

TEST(Models, FactoryBuildsConfiguredKind) {
    Rng rng(12);
    auto r = make_embedding(ArchitectureConfig::resnet12(8), rng);
    auto c = make_embedding(ArchitectureConfig::c128f(8), rng);
    EXPECT_EQ(r->config().kind, ArchId::ResNet12);
    EXPECT_EQ(c->config().kind, ArchId::C128F);
    EXPECT_EQ(r->out_channels(), 64);
    EXPECT_EQ(c->out_channels(), 16);
}

TEST(Models, OddSpatialSizesFloorThroughPooling) {
    // 42x42 -> 21 -> 10 -> 5 -> 2 after four pools
    Rng rng(13);
    C128F net(ArchitectureConfig::c128f(8, 42, 42, 3), rng);
    net.set_training(false);
    Var out = net.forward(random_images(1, 42, 42, 3, rng));
    EXPECT_EQ(out->t.shape, (Shape{1, 2, 2, 16}));
}
