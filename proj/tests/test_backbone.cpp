#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "fscnn/backbone.hpp"
#include "test_util.hpp"

using namespace fscnn;

namespace {

template <class S>
std::map<std::string, std::vector<S>> param_map(Backbone<S>& bb) {
    std::map<std::string, std::vector<S>> out;
    for (auto& p : bb.params()) out[p.name] = *p.value;
    return out;
}

// Shifts start at exactly 0 and dead rows sit exactly on the relu kink;
// nudging every parameter makes central differences well-defined.
template <class S>
void jitter_params(Backbone<S>& bb, unsigned seed) {
    test::Rng rng(seed);
    std::uniform_real_distribution<double> d(0.02, 0.08);
    std::uniform_int_distribution<int> sign(0, 1);
    for (auto& p : bb.params())
        for (auto& v : *p.value) v += S((sign(rng) ? 1 : -1) * d(rng));
}

// Tiny spec for gradient-heavy tests: 4 stages, small channels.
BackboneSpec tiny_spec(bool focal, bool residual = false) {
    BackboneSpec spec;
    spec.in_channels = 2;
    spec.stem_channels = 2;
    const BlockStyle style = residual ? BlockStyle::residual_pair : BlockStyle::plain;
    spec.stages[0] = {2, 1, false, style, focal, false};
    spec.stages[1] = {3, 1, true, residual ? BlockStyle::plain : style, focal && !residual, false};
    spec.stages[2] = {3, 1, true, BlockStyle::plain, false, false};
    spec.stages[3] = {4, 1, true, BlockStyle::plain, false, false};
    if (residual) spec.stages[1] = {3, 1, true, BlockStyle::plain, false, false};
    spec.tau = 0.3;
    spec.attention = true;
    return spec;
}

} // namespace

TEST(BuildBackbone, PvrcnnPresetLayout) {
    auto spec = preset_pvrcnn(4);
    set_focal_stages(spec, {1, 2, 3});
    auto bb = build_backbone<float>(spec, 7);
    std::vector<std::string> names;
    for (auto& l : bb.layers) names.push_back(l->name);
    const std::vector<std::string> expect{
        "stem",
        "stage1.block0.focal",
        "stage2.down", "stage2.block0", "stage2.block1.focal",
        "stage3.down", "stage3.block0", "stage3.block1.focal",
        "stage4.down", "stage4.block0", "stage4.block1",
    };
    EXPECT_EQ(names, expect);
}

TEST(BuildBackbone, PvrcnnMultiModalFusesOnlyStage1) {
    auto spec = preset_pvrcnn(4);
    set_fusion_stages(spec, {1});
    auto bb = build_backbone<float>(spec, 7);
    std::vector<std::string> stack_params;
    for (auto& p : bb.params())
        if (p.name.find(".stack.") != std::string::npos) stack_params.push_back(p.name);
    ASSERT_FALSE(stack_params.empty());
    for (const auto& n : stack_params) EXPECT_EQ(n.rfind("stage1.block0.focal", 0), 0u) << n;
}

TEST(BuildBackbone, CenterpointPresetChannels) {
    auto spec = preset_centerpoint(5);
    auto bb = build_backbone<float>(spec, 3);
    auto params = param_map(bb);
    // residual blocks in every stage, channel ladder 16/16/32/64/128
    EXPECT_EQ(params.at("stem.w").size(), 27u * 5u * 16u);
    EXPECT_EQ(params.at("stage1.block0.w1").size(), 27u * 16u * 16u);
    EXPECT_EQ(params.at("stage2.down.w").size(), 27u * 16u * 32u);
    EXPECT_EQ(params.at("stage3.block1.w2").size(), 27u * 64u * 64u);
    EXPECT_EQ(params.at("stage4.block0.w1").size(), 27u * 128u * 128u);
}

TEST(BuildBackbone, SameSeedGivesByteIdenticalCheckpoints) {
    auto spec = preset_pvrcnn(4);
    set_focal_stages(spec, {1, 2, 3});
    auto a = build_backbone<float>(spec, 99);
    auto b = build_backbone<float>(spec, 99);
    std::ostringstream sa, sb;
    write_checkpoint(sa, a.to_checkpoint());
    write_checkpoint(sb, b.to_checkpoint());
    EXPECT_EQ(sa.str(), sb.str());
    auto c = build_backbone<float>(spec, 100);
    std::ostringstream sc;
    write_checkpoint(sc, c.to_checkpoint());
    EXPECT_NE(sa.str(), sc.str());
}

TEST(BuildBackbone, InvalidSpecsRejected) {
    auto spec = preset_pvrcnn(4);
    spec.stages[1].fusion_at_last_layer = true; // fusion without focal
    EXPECT_THROW(build_backbone<float>(spec, 1), std::invalid_argument);
    auto spec2 = preset_pvrcnn(4);
    spec2.stages[0].n_subm_blocks = 0;
    spec2.stages[0].focal_at_last_layer = true;
    EXPECT_THROW(build_backbone<float>(spec2, 1), std::invalid_argument);
    auto spec3 = preset_pvrcnn(0);
    EXPECT_THROW(build_backbone<float>(spec3, 1), std::invalid_argument);
}

TEST(BackboneParams, FocalOverheadIsExactlyTheBranch) {
    auto plain_spec = preset_pvrcnn(4);
    auto focal_spec = preset_pvrcnn(4);
    set_focal_stages(focal_spec, {1, 2, 3});
    auto plain = build_backbone<float>(plain_spec, 5);
    auto focal = build_backbone<float>(focal_spec, 5);
    const std::int64_t n_plain = plain.param_count();
    const std::int64_t n_focal = focal.param_count();
    // branch is a pointwise conv: 27*C_in weights + 27 bias per focal layer
    const std::int64_t expect_extra = (27 * 16 + 27) + (27 * 32 + 27) + (27 * 64 + 27);
    EXPECT_EQ(n_focal - n_plain, expect_extra);
    EXPECT_LT(double(n_focal - n_plain) / double(n_plain), 0.05);
}

TEST(BackboneForward, EmptyInputEmptyOutputZeroLoss) {
    auto spec = preset_pvrcnn(3);
    set_focal_stages(spec, {1, 2, 3});
    auto bb = build_backbone<double>(spec, 11);
    SparseTensor<double> t;
    t.spatial_shape = {16, 16, 16};
    t.batch_size = 1;
    t.features = Matrix<double>(0, 3);
    ForwardContext<double> ctx;
    std::vector<std::vector<GtBox>> boxes{{GtBox{}}};
    ctx.boxes = &boxes;
    auto out = bb.forward(t, ctx);
    EXPECT_EQ(out.size(), 0);
    EXPECT_EQ(ctx.objective_loss, 0.0);
}

TEST(BackboneForward, OutputStrideEightAndShape) {
    test::Rng rng(401);
    auto spec = preset_pvrcnn(3);
    auto bb = build_backbone<float>(spec, 13);
    auto t = test::random_tensor<float>(rng, {16, 16, 16}, 0.05, 3, 1);
    ForwardContext<float> ctx;
    auto out = bb.forward(t, ctx);
    EXPECT_EQ(out.stride, (Shape3{8, 8, 8}));
    EXPECT_EQ(out.spatial_shape, (Shape3{2, 2, 2}));
    EXPECT_EQ(out.channels(), 64);
    // diag trail covers every layer in order
    ASSERT_EQ(ctx.diags.size(), bb.layers.size());
    EXPECT_EQ(ctx.diags.front().name, "stem");
}

// Degeneracy composition oracle: with tau=0 and attention off, every focal
// layer acts as a regular stride-1 convolution; replay the whole network
// with library primitives and the backbone's own weights.
TEST(BackboneForward, TauZeroEqualsAllRegularReplay) {
    test::Rng rng(409);
    auto spec = preset_pvrcnn(3);
    set_focal_stages(spec, {1, 2, 3});
    spec.tau = 0.0;
    spec.attention = false;
    auto bb = build_backbone<double>(spec, 17);
    auto t = test::random_tensor<double>(rng, {12, 12, 12}, 0.04, 3, 1);
    ForwardContext<double> ctx;
    auto out = bb.forward(t, ctx);

    auto params = param_map(bb);
    auto conv_block = [&](const SparseTensor<double>& x, const std::string& base, const KernelSpec& ks,
                          std::int32_t c_in, std::int32_t c_out, const std::string& wname) {
        ConvWeights<double> w(ks.volume(), c_in, c_out, false);
        w.w = params.at(base + wname);
        auto map = ks.mode == ConvMode::submanifold ? submanifold_map(x, ks) : regular_map(x, ks);
        auto y = conv_forward(x, map, w);
        y = affine(y, params.at(base + ".scale"), params.at(base + ".shift"));
        return relu(y);
    };
    KernelSpec reg1 = regular_spec(3, 1, 1);
    auto cur = conv_block(t, "stem", submanifold_spec(3), 3, 16, ".w");
    cur = conv_block(cur, "stage1.block0.focal", reg1, 16, 16, ".w");
    cur = conv_block(cur, "stage2.down", regular_spec(3, 2, 1), 16, 32, ".w");
    cur = conv_block(cur, "stage2.block0", submanifold_spec(3), 32, 32, ".w");
    cur = conv_block(cur, "stage2.block1.focal", reg1, 32, 32, ".w");
    cur = conv_block(cur, "stage3.down", regular_spec(3, 2, 1), 32, 64, ".w");
    cur = conv_block(cur, "stage3.block0", submanifold_spec(3), 64, 64, ".w");
    cur = conv_block(cur, "stage3.block1.focal", reg1, 64, 64, ".w");
    cur = conv_block(cur, "stage4.down", regular_spec(3, 2, 1), 64, 64, ".w");
    cur = conv_block(cur, "stage4.block0", submanifold_spec(3), 64, 64, ".w");
    cur = conv_block(cur, "stage4.block1", submanifold_spec(3), 64, 64, ".w");

    ASSERT_EQ(out.coords, cur.coords);
    for (std::size_t i = 0; i < out.features.v.size(); ++i)
        EXPECT_LE(test::rel_err(out.features.v[i], cur.features.v[i], 1.0), 1e-10);
}

TEST(BackboneBackward, ZeroUpstreamNoBoxesGivesZeroGradients) {
    test::Rng rng(419);
    auto spec = tiny_spec(true);
    auto bb = build_backbone<double>(spec, 19);
    auto t = test::random_tensor<double>(rng, {6, 6, 6}, 0.2, 2, 1);
    ForwardContext<double> ctx;
    auto out = bb.forward(t, ctx);
    bb.zero_grad();
    Matrix<double> d_out(out.size(), out.channels());
    bb.backward(d_out);
    for (auto& p : bb.params())
        for (double g : *p.grad) EXPECT_EQ(g, 0.0);
}

TEST(BackboneBackward, MissingCacheIsStateError) {
    auto spec = tiny_spec(false);
    auto bb = build_backbone<double>(spec, 23);
    Matrix<double> d(0, 4);
    EXPECT_THROW(bb.backward(d), std::logic_error);
}

TEST(BackboneBackward, DetachedBranchGetsNoGradient) {
    test::Rng rng(431);
    auto spec = tiny_spec(true);
    spec.attention = false;
    spec.loss_weight = 0.0;
    auto bb = build_backbone<double>(spec, 29);
    auto t = test::random_tensor<double>(rng, {6, 6, 6}, 0.2, 2, 1);
    ForwardContext<double> ctx; // no boxes: no objective loss path either
    auto out = bb.forward(t, ctx);
    bb.zero_grad();
    Matrix<double> d_out(out.size(), out.channels(), 1.0);
    bb.backward(d_out);
    for (auto& p : bb.params()) {
        if (p.name.find("branch") == std::string::npos) continue;
        for (double g : *p.grad) EXPECT_EQ(g, 0.0) << p.name;
    }
}

// Full-network finite differences on a tiny instance, including the focal
// objective-loss path.
TEST(BackboneBackward, FullNetworkFiniteDifferences) {
    test::Rng rng(433);
    auto spec = tiny_spec(true);
    auto bb = build_backbone<double>(spec, 31);
    jitter_params(bb, 310);
    auto t = test::random_tensor<double>(rng, {4, 4, 4}, 0.4, 2, 1);
    std::vector<std::vector<GtBox>> boxes{{GtBox{{0.1, 0.1, 0.1}, {0.15, 0.15, 0.15}, 0.4}}};

    auto total_loss = [&]() {
        ForwardContext<double> ctx;
        ctx.boxes = &boxes;
        ctx.voxel_size = {0.05, 0.05, 0.05};
        auto out = bb.forward(t, ctx);
        double l = 0;
        for (double v : out.features.v) l += v * v;
        return l + ctx.objective_loss;
    };

    ForwardContext<double> ctx;
    ctx.boxes = &boxes;
    ctx.voxel_size = {0.05, 0.05, 0.05};
    auto out = bb.forward(t, ctx);
    bb.zero_grad();
    Matrix<double> d_out = out.features;
    for (auto& v : d_out.v) v *= 2.0;
    bb.backward(d_out);

    const double h = 1e-5;
    for (auto& p : bb.params()) {
        const std::size_t step = std::max<std::size_t>(1, p.value->size() / 6);
        for (std::size_t k = 0; k < p.value->size(); k += step) {
            const double orig = (*p.value)[k];
            (*p.value)[k] = orig + h;
            const double lp = total_loss();
            (*p.value)[k] = orig - h;
            const double lm = total_loss();
            (*p.value)[k] = orig;
            const double fd = (lp - lm) / (2 * h);
            EXPECT_LE(test::rel_err((*p.grad)[k], fd, 1e-2), 1e-5) << p.name << "[" << k << "]";
        }
    }
}

TEST(BackboneBackward, ResidualPairFiniteDifferences) {
    test::Rng rng(439);
    auto spec = tiny_spec(true, true);
    auto bb = build_backbone<double>(spec, 37);
    jitter_params(bb, 370);
    auto t = test::random_tensor<double>(rng, {4, 4, 4}, 0.4, 2, 1);

    auto total_loss = [&]() {
        ForwardContext<double> ctx;
        auto out = bb.forward(t, ctx);
        double l = 0;
        for (double v : out.features.v) l += v * v;
        return l;
    };

    ForwardContext<double> ctx;
    auto out = bb.forward(t, ctx);
    bb.zero_grad();
    Matrix<double> d_out = out.features;
    for (auto& v : d_out.v) v *= 2.0;
    bb.backward(d_out);

    const double h = 1e-5;
    for (auto& p : bb.params()) {
        const std::size_t step = std::max<std::size_t>(1, p.value->size() / 4);
        for (std::size_t k = 0; k < p.value->size(); k += step) {
            const double orig = (*p.value)[k];
            (*p.value)[k] = orig + h;
            const double lp = total_loss();
            (*p.value)[k] = orig - h;
            const double lm = total_loss();
            (*p.value)[k] = orig;
            const double fd = (lp - lm) / (2 * h);
            EXPECT_LE(test::rel_err((*p.grad)[k], fd, 1e-2), 1e-5) << p.name << "[" << k << "]";
        }
    }
}

TEST(BackboneDiagnostics, MonotoneUnderTau) {
    test::Rng rng(443);
    auto t = test::random_tensor<float>(rng, {12, 12, 12}, 0.05, 3, 1);
    std::vector<std::vector<std::int64_t>> outs_by_tau;
    for (double tau : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        auto spec = preset_pvrcnn(3);
        set_focal_stages(spec, {1, 2, 3});
        spec.tau = tau;
        auto bb = build_backbone<float>(spec, 41); // same seed: identical weights
        ForwardContext<float> ctx;
        bb.forward(t, ctx);
        std::vector<std::int64_t> outs;
        for (auto& d : ctx.diags) outs.push_back(d.n_out);
        outs_by_tau.push_back(std::move(outs));
    }
    for (std::size_t i = 1; i < outs_by_tau.size(); ++i)
        for (std::size_t l = 0; l < outs_by_tau[i].size(); ++l)
            EXPECT_LE(outs_by_tau[i][l], outs_by_tau[i - 1][l]) << "layer " << l;
}

TEST(BackboneStride, ForegroundLabelSurvivesDownsampling) {
    // a box much larger than a stride-8 voxel: a stride-1 foreground voxel's
    // ancestors remain foreground at stride 8
    auto spec = preset_pvrcnn(2);
    auto bb = build_backbone<float>(spec, 43);
    std::vector<Coord4> coords;
    Matrix<float> feats(8, 2, 1.0f);
    for (int i = 0; i < 8; ++i) coords.push_back({0, 6 + i % 2, 6 + (i / 2) % 2, 6 + i / 4});
    auto t = build<float>(coords, feats, {16, 16, 16}, 1);
    const std::array<double, 3> vs{0.1, 0.1, 0.1}, org{0, 0, 0};
    GtBox box;
    box.center = {0.65, 0.65, 0.65};
    box.size = {2.0, 2.0, 2.0};
    auto labels1 = voxel_targets(t, {box}, vs, org);
    for (auto l : labels1) ASSERT_EQ(l, 1);
    ForwardContext<float> ctx;
    auto out = bb.forward(t, ctx);
    ASSERT_EQ(out.stride, (Shape3{8, 8, 8}));
    auto labels8 = voxel_targets(out, {box}, vs, org);
    bool any = false;
    for (std::size_t i = 0; i < labels8.size(); ++i) {
        const Coord4& c = out.coords[i];
        // the voxel containing the original cluster center
        if (c.x == 0 && c.y == 0 && c.z == 0) {
            any = true;
            EXPECT_EQ(labels8[i], 1);
        }
    }
    EXPECT_TRUE(any);
}

TEST(BackboneCheckpoint, RoundTripPreservesOutputs) {
    test::Rng rng(449);
    auto spec = preset_pvrcnn(3);
    set_focal_stages(spec, {1, 2, 3});
    auto bb = build_backbone<float>(spec, 47);
    auto t = test::random_tensor<float>(rng, {10, 10, 10}, 0.06, 3, 1);
    ForwardContext<float> ctx1;
    auto out1 = bb.forward(t, ctx1);

    std::ostringstream os;
    write_checkpoint(os, bb.to_checkpoint());
    std::istringstream is(os.str());
    auto records = read_checkpoint(is);

    auto bb2 = build_backbone<float>(spec, 12345);
    bb2.load_checkpoint(records);
    ForwardContext<float> ctx2;
    auto out2 = bb2.forward(t, ctx2);
    EXPECT_EQ(out1.coords, out2.coords);
    EXPECT_EQ(out1.features.v, out2.features.v);

    // plain twin loads the same checkpoint, ignoring branch records
    auto plain = build_backbone<float>(preset_pvrcnn(3), 777);
    plain.load_checkpoint(records, true);
    EXPECT_THROW(plain.load_checkpoint(std::vector<CheckpointRecord>{}, false), std::invalid_argument);
}

TEST(BackboneFusion, FusedLayerRunsWithViews) {
    test::Rng rng(457);
    auto spec = tiny_spec(true);
    spec.stages[0].fusion_at_last_layer = true;
    spec.image_c_mid = 3;
    auto bb = build_backbone<double>(spec, 53);
    auto t = test::random_tensor<double>(rng, {6, 6, 6}, 0.2, 2, 1);

    std::vector<std::vector<RawImageView<double>>> views(1);
    RawImageView<double> view;
    view.image = Image<double>(8, 8, 3);
    std::uniform_real_distribution<double> val(0.0, 1.0);
    for (auto& v : view.image.v) v = val(rng);
    view.calib.p = {8, 0, 2, 0, 0, 8, 2, 0, 0, 0, 1, 0};
    views[0].push_back(std::move(view));

    ForwardContext<double> with_ctx, without_ctx;
    with_ctx.views = &views;
    with_ctx.voxel_size = {0.5, 0.5, 0.5};
    without_ctx.voxel_size = {0.5, 0.5, 0.5};
    auto out_with = bb.forward(t, with_ctx);
    auto out_without = bb.forward(t, without_ctx);
    // image features perturb the result (some voxel must project validly)
    bool differs = out_with.coords != out_without.coords;
    if (!differs)
        for (std::size_t i = 0; i < out_with.features.v.size() && !differs; ++i)
            differs = out_with.features.v[i] != out_without.features.v[i];
    EXPECT_TRUE(differs);

    // gradient smoke through the fused path
    bb.forward(t, with_ctx);
    bb.zero_grad();
    Matrix<double> d_out(out_with.size(), out_with.channels(), 0.5);
    bb.backward(d_out);
    bool any_stack_grad = false;
    for (auto& p : bb.params())
        if (p.name.find(".stack.") != std::string::npos)
            for (double g : *p.grad)
                if (g != 0.0) any_stack_grad = true;
    EXPECT_TRUE(any_stack_grad);
}
