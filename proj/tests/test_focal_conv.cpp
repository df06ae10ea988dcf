#include <gtest/gtest.h>

#include <cmath>

#include "fscnn/focal_conv.hpp"
#include "test_util.hpp"

using namespace fscnn;

namespace {

template <class S>
ImportanceMap<S> manual_importance(std::int64_t rows, std::int64_t cols, std::int32_t j0, S fill) {
    ImportanceMap<S> imp;
    imp.values = Matrix<S>(rows, cols, fill);
    imp.center_index = j0;
    return imp;
}

} // namespace

TEST(PredictImportance, ZeroWeightsGiveHalf) {
    test::Rng rng(201);
    auto t = test::random_tensor<double>(rng, {6, 6, 6}, 0.1, 3, 1);
    auto main_spec = submanifold_spec(3);
    auto sub = submanifold_map(t, main_spec);
    ConvWeights<double> branch(27, 3, 27, true);
    auto imp = predict_importance(t, sub, branch, main_spec);
    EXPECT_EQ(imp.center_index, 13);
    EXPECT_EQ(imp.values.rows, t.size());
    EXPECT_EQ(imp.values.cols, 27);
    for (double v : imp.values.v) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(PredictImportance, SaturatedBias) {
    test::Rng rng(203);
    auto t = test::random_tensor<double>(rng, {6, 6, 6}, 0.1, 2, 1);
    auto main_spec = submanifold_spec(3);
    auto sub = submanifold_map(t, main_spec);
    ConvWeights<double> branch(27, 2, 27, true);
    for (auto& b : branch.bias) b = 20.0;
    auto imp = predict_importance(t, sub, branch, main_spec);
    for (double v : imp.values.v) EXPECT_NEAR(v, 1.0, 1e-8);
}

TEST(PredictImportance, CompositionOracle) {
    test::Rng rng(207);
    auto t = test::random_tensor<double>(rng, {8, 8, 8}, 0.08, 3, 1);
    auto main_spec = submanifold_spec(3);
    auto sub = submanifold_map(t, main_spec);
    auto branch = test::random_weights<double>(rng, 27, 3, 27, true);
    auto imp = predict_importance(t, sub, branch, main_spec);
    auto logits = conv_forward(t, sub, branch);
    for (std::size_t i = 0; i < imp.values.v.size(); ++i)
        EXPECT_DOUBLE_EQ(imp.values.v[i], sigmoid(logits.features.v[i]));
}

TEST(PredictImportance, WrongChannelCountRejected) {
    test::Rng rng(209);
    auto t = test::random_tensor<double>(rng, {4, 4, 4}, 0.2, 2, 1);
    auto main_spec = submanifold_spec(3);
    auto sub = submanifold_map(t, main_spec);
    ConvWeights<double> branch(27, 2, 9, false);
    EXPECT_THROW(predict_importance(t, sub, branch, main_spec), std::invalid_argument);
}

TEST(SelectImportant, TauZeroKeepsEverything) {
    test::Rng rng(211);
    auto imp = manual_importance<double>(5, 27, 13, 0.0);
    std::uniform_real_distribution<double> val(0.01, 0.99);
    for (auto& v : imp.values.v) v = val(rng);
    auto sel = select_important(imp, 0.0);
    ASSERT_EQ(sel.important_rows.size(), 5u);
    for (const auto& shape : sel.dynamic_shapes) EXPECT_EQ(shape.size(), 27u);
}

TEST(SelectImportant, TauOneDropsEverythingBelowOne) {
    auto imp = manual_importance<double>(5, 27, 13, 0.97);
    auto sel = select_important(imp, 1.0);
    EXPECT_TRUE(sel.important_rows.empty());
}

TEST(SelectImportant, DirectPredicate) {
    auto imp = manual_importance<double>(1, 3, 1, 0.0);
    imp.values(0, 0) = 0.7;
    imp.values(0, 1) = 0.6; // center
    imp.values(0, 2) = 0.4;
    auto sel = select_important(imp, 0.5);
    ASSERT_EQ(sel.important_rows.size(), 1u);
    EXPECT_EQ(sel.dynamic_shapes[0], (std::vector<std::int32_t>{0, 1}));
}

TEST(SelectTopk, RatioOneKeepsAll) {
    auto imp = manual_importance<double>(4, 1, 0, 0.3);
    auto sel = select_topk(imp, 1.0);
    EXPECT_EQ(sel.important_rows, (std::vector<std::int32_t>{0, 1, 2, 3}));
}

TEST(SelectTopk, PicksLargestCenters) {
    auto imp = manual_importance<double>(4, 1, 0, 0.0);
    imp.values(0, 0) = 0.9;
    imp.values(1, 0) = 0.1;
    imp.values(2, 0) = 0.8;
    imp.values(3, 0) = 0.1;
    auto sel = select_topk(imp, 0.5);
    EXPECT_EQ(sel.important_rows, (std::vector<std::int32_t>{0, 2}));
}

TEST(SelectTopk, TieBreaksTowardLowerRow) {
    auto imp = manual_importance<double>(2, 1, 0, 0.5);
    auto sel = select_topk(imp, 0.5);
    EXPECT_EQ(sel.important_rows, (std::vector<std::int32_t>{0}));
}

TEST(FocalOutputCoords, NoImportantRowsIsSubmanifold) {
    test::Rng rng(223);
    auto t = test::random_tensor<double>(rng, {8, 8, 8}, 0.1, 1, 1);
    FocalSelection sel;
    auto coords = focal_output_coords(t, sel, submanifold_spec(3));
    EXPECT_EQ(coords, t.coords);
}

TEST(FocalOutputCoords, FullStampAroundOneImportantRow) {
    auto t = build<double>({{0, 4, 4, 4}, {0, 1, 1, 1}}, make_matrix<double>(2, 1, {1.0, 2.0}), {9, 9, 9}, 1);
    FocalSelection sel;
    // row 1 is (0,4,4,4) in canonical order
    sel.important_rows = {1};
    sel.dynamic_shapes.resize(1);
    for (std::int32_t j = 0; j < 27; ++j) sel.dynamic_shapes[0].push_back(j);
    auto coords = focal_output_coords(t, sel, submanifold_spec(3));
    EXPECT_EQ(coords.size(), 28u); // 27-stamp plus the far voxel
    CoordIndex idx(coords);
    for (std::int32_t dz = -1; dz <= 1; ++dz)
        for (std::int32_t dy = -1; dy <= 1; ++dy)
            for (std::int32_t dx = -1; dx <= 1; ++dx)
                EXPECT_TRUE(idx.lookup({0, 4 + dx, 4 + dy, 4 + dz}).has_value());
    EXPECT_TRUE(idx.lookup({0, 1, 1, 1}).has_value());
}

TEST(FocalOutputCoords, TauZeroEqualsRegularDilation) {
    test::Rng rng(227);
    for (int trial = 0; trial < 5; ++trial) {
        auto t = test::random_tensor<double>(rng, {10, 10, 10}, 0.06, 2, 1);
        auto main_spec = submanifold_spec(3);
        auto sub = submanifold_map(t, main_spec);
        auto branch = test::random_weights<double>(rng, 27, 2, 27, true);
        auto imp = predict_importance(t, sub, branch, main_spec);
        auto sel = select_important(imp, 0.0);
        auto coords = focal_output_coords(t, sel, main_spec);
        auto reg = regular_map(t, regular_spec(3, 1, 1));
        EXPECT_EQ(coords, reg.out_coords);
    }
}

TEST(FocalForward, TauZeroMatchesRegularConv) {
    test::Rng rng(229);
    auto t = test::random_tensor<double>(rng, {8, 8, 8}, 0.08, 3, 1);
    auto main_spec = submanifold_spec(3);
    auto w = test::random_weights<double>(rng, 27, 3, 2, true);
    auto branch = test::random_weights<double>(rng, 27, 3, 27, true);
    FocalConvOptions opt;
    opt.tau = 0.0;
    opt.attention = false;
    auto res = focal_forward(t, w, branch, main_spec, main_spec, opt);
    auto reg = regular_map(t, regular_spec(3, 1, 1));
    auto expect = conv_forward(t, reg, w);
    ASSERT_EQ(res.output.coords, expect.coords);
    for (std::size_t i = 0; i < expect.features.v.size(); ++i)
        EXPECT_NEAR(res.output.features.v[i], expect.features.v[i], 1e-6);
}

TEST(FocalForward, TauOneMatchesSubmanifoldConv) {
    test::Rng rng(233);
    auto t = test::random_tensor<double>(rng, {8, 8, 8}, 0.08, 3, 1);
    auto main_spec = submanifold_spec(3);
    auto w = test::random_weights<double>(rng, 27, 3, 2, true);
    auto branch = test::random_weights<double>(rng, 27, 3, 27, true);
    FocalConvOptions opt;
    opt.tau = 1.0;
    opt.attention = false;
    auto res = focal_forward(t, w, branch, main_spec, main_spec, opt);
    auto sub = submanifold_map(t, main_spec);
    auto expect = conv_forward(t, sub, w);
    ASSERT_EQ(res.output.coords, expect.coords);
    for (std::size_t i = 0; i < expect.features.v.size(); ++i)
        EXPECT_NEAR(res.output.features.v[i], expect.features.v[i], 1e-6);
}

TEST(FocalForward, SaturatedAttentionEqualsNoAttention) {
    test::Rng rng(239);
    auto t = test::random_tensor<double>(rng, {8, 8, 8}, 0.08, 2, 1);
    auto main_spec = submanifold_spec(3);
    auto w = test::random_weights<double>(rng, 27, 2, 2, true);
    ConvWeights<double> branch(27, 2, 27, true);
    for (auto& b : branch.bias) b = 40.0; // scores saturate to 1
    FocalConvOptions on, off;
    on.tau = 0.5;
    on.attention = true;
    off = on;
    off.attention = false;
    auto res_on = focal_forward(t, w, branch, main_spec, main_spec, on);
    auto res_off = focal_forward(t, w, branch, main_spec, main_spec, off);
    ASSERT_EQ(res_on.output.coords, res_off.output.coords);
    for (std::size_t i = 0; i < res_on.output.features.v.size(); ++i)
        EXPECT_NEAR(res_on.output.features.v[i], res_off.output.features.v[i], 1e-6);
}

TEST(FocalForward, MonotoneInTau) {
    test::Rng rng(241);
    auto t = test::random_tensor<double>(rng, {10, 10, 10}, 0.05, 2, 1);
    auto main_spec = submanifold_spec(3);
    auto w = test::random_weights<double>(rng, 27, 2, 2, false);
    auto branch = test::random_weights<double>(rng, 27, 2, 27, true);
    auto reg = regular_map(t, regular_spec(3, 1, 1));
    std::int64_t prev = -1;
    for (int step = 0; step <= 10; ++step) {
        FocalConvOptions opt;
        opt.tau = 0.1 * step;
        opt.attention = false;
        auto res = focal_forward(t, w, branch, main_spec, main_spec, opt);
        const std::int64_t n_out = res.output.size();
        EXPECT_GE(n_out, t.size());
        EXPECT_LE(n_out, reg.n_out);
        if (prev >= 0) EXPECT_LE(n_out, prev);
        prev = n_out;
        if (step == 0) EXPECT_EQ(n_out, reg.n_out);
        if (step == 10) EXPECT_EQ(n_out, t.size());
    }
}

TEST(FocalForward, DilationContainment) {
    test::Rng rng(251);
    auto t = test::random_tensor<double>(rng, {10, 10, 10}, 0.05, 2, 1);
    auto main_spec = submanifold_spec(3);
    auto w = test::random_weights<double>(rng, 27, 2, 2, false);
    auto branch = test::random_weights<double>(rng, 27, 2, 27, true);
    FocalConvOptions opt;
    opt.tau = 0.45;
    opt.attention = false;
    auto res = focal_forward(t, w, branch, main_spec, main_spec, opt);
    CoordIndex in_idx(t.coords);
    for (const Coord4& q : res.output.coords) {
        if (in_idx.lookup(q)) continue;
        bool near_important = false;
        for (std::size_t r = 0; r < res.selection.important_rows.size() && !near_important; ++r) {
            const Coord4& p = t.coords[std::size_t(res.selection.important_rows[r])];
            near_important = p.batch == q.batch && std::abs(p.x - q.x) <= 1 && std::abs(p.y - q.y) <= 1 &&
                             std::abs(p.z - q.z) <= 1;
        }
        EXPECT_TRUE(near_important);
    }
}

TEST(FocalForward, CenterPredicateIgnoresOtherChannels) {
    test::Rng rng(257);
    auto t = test::random_tensor<double>(rng, {6, 6, 6}, 0.15, 2, 1);
    auto main_spec = submanifold_spec(3);
    auto branch = test::random_weights<double>(rng, 27, 2, 27, true);
    auto sub = submanifold_map(t, main_spec);
    auto imp1 = predict_importance(t, sub, branch, main_spec);
    // shift every non-center logit by a constant
    auto shifted = branch;
    for (std::int32_t j = 0; j < 27; ++j) {
        if (j == 13) continue;
        shifted.bias[std::size_t(j)] += 3.0;
    }
    auto imp2 = predict_importance(t, sub, shifted, main_spec);
    auto sel1 = select_important(imp1, 0.5);
    auto sel2 = select_important(imp2, 0.5);
    EXPECT_EQ(sel1.important_rows, sel2.important_rows);
}

TEST(FocalForward, LiteralDynamicShapeNeverCreatesPositions) {
    test::Rng rng(263);
    auto t = test::random_tensor<double>(rng, {8, 8, 8}, 0.06, 2, 1);
    auto main_spec = submanifold_spec(3);
    auto w = test::random_weights<double>(rng, 27, 2, 2, false);
    auto branch = test::random_weights<double>(rng, 27, 2, 27, true);
    FocalConvOptions opt;
    opt.tau = 0.0;
    opt.attention = false;
    opt.restrict_to_input = true;
    auto res = focal_forward(t, w, branch, main_spec, main_spec, opt);
    EXPECT_EQ(res.output.coords, t.coords);
}

// End-to-end gradient through attention and the objective loss; selection is
// frozen away from thresholds so the finite-difference path stays smooth.
TEST(FocalBackward, FiniteDifferenceThroughAttentionAndLoss) {
    test::Rng rng(269);
    auto main_spec = submanifold_spec(3);
    for (int trial = 0; trial < 3; ++trial) {
        auto t = test::random_tensor<double>(rng, {5, 5, 5}, 0.15, 2, 1);
        auto w = test::random_weights<double>(rng, 27, 2, 2, true);
        auto branch = test::random_weights<double>(rng, 27, 2, 27, true);
        for (auto& v : branch.w) v *= 0.3;
        FocalConvOptions opt;
        opt.tau = 0.3; // scores sit near 0.5, far from the threshold
        opt.attention = true;

        std::vector<std::uint8_t> labels(std::size_t(t.size()));
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 3 == 0;
        FocalLossSpec loss_spec;

        auto full_loss = [&](const ConvWeights<double>& ww, const ConvWeights<double>& bb,
                             const SparseTensor<double>& in) {
            auto res = focal_forward(in, ww, bb, main_spec, main_spec, opt);
            double l = 0;
            for (double v : res.output.features.v) l += v * v;
            auto [obj, grad] = focal_loss(res.importance.center_scores(), labels, loss_spec);
            (void)grad;
            return l + loss_spec.loss_weight * obj;
        };

        auto res = focal_forward(t, w, branch, main_spec, main_spec, opt);
        Matrix<double> d_out = res.output.features;
        for (auto& v : d_out.v) v *= 2.0;
        auto [obj, d_scores] = focal_loss(res.importance.center_scores(), labels, loss_spec);
        (void)obj;
        for (auto& v : d_scores) v *= loss_spec.loss_weight;
        auto g = focal_backward(t, w, branch, res, d_out, d_scores);

        const double h = 1e-5;
        bool any_nonzero_branch_grad = false;
        for (std::size_t k = 0; k < branch.w.size(); k += 23) {
            ConvWeights<double> bp = branch, bm = branch;
            bp.w[k] += h;
            bm.w[k] -= h;
            const double fd = (full_loss(w, bp, t) - full_loss(w, bm, t)) / (2 * h);
            EXPECT_LE(test::rel_err(g.d_branch_w[k], fd, 1e-3), 1e-6);
            if (std::abs(g.d_branch_w[k]) > 1e-12) any_nonzero_branch_grad = true;
        }
        EXPECT_TRUE(any_nonzero_branch_grad);
        for (std::size_t k = 0; k < w.w.size(); k += 37) {
            ConvWeights<double> wp = w, wm = w;
            wp.w[k] += h;
            wm.w[k] -= h;
            const double fd = (full_loss(wp, branch, t) - full_loss(wm, branch, t)) / (2 * h);
            EXPECT_LE(test::rel_err(g.d_w[k], fd, 1e-3), 1e-6);
        }
        for (std::int64_t i = 0; i < t.size(); i += 2)
            for (std::int64_t c = 0; c < 2; ++c) {
                SparseTensor<double> tp = t, tm = t;
                tp.features(i, c) += h;
                tm.features(i, c) -= h;
                const double fd = (full_loss(w, branch, tp) - full_loss(w, branch, tm)) / (2 * h);
                EXPECT_LE(test::rel_err(g.d_input(i, c), fd, 1e-3), 1e-6);
            }
    }
}

TEST(VoxelTargets, BoxAroundVoxelCenter) {
    auto t = build<double>({{0, 2, 2, 2}}, make_matrix<double>(1, 1, {1.0}), {8, 8, 8}, 1);
    GtBox box;
    box.center = {0.25, 0.25, 0.25}; // voxel (2,2,2) center at voxel_size 0.1
    box.size = {0.3, 0.3, 0.3};
    auto labels = voxel_targets(t, {box}, {0.1, 0.1, 0.1}, {0.0, 0.0, 0.0});
    ASSERT_EQ(labels.size(), 1u);
    EXPECT_EQ(labels[0], 1);
}

TEST(VoxelTargets, EmptyBoxListAllZero) {
    test::Rng rng(271);
    auto t = test::random_tensor<double>(rng, {8, 8, 8}, 0.2, 1, 1);
    auto labels = voxel_targets(t, {}, {0.1, 0.1, 0.1}, {0.0, 0.0, 0.0});
    for (auto l : labels) EXPECT_EQ(l, 0);
}

// Independent geometry oracle with explicit rotation matrices.
TEST(VoxelTargets, MatchesRotationMatrixOracle) {
    test::Rng rng(277);
    std::uniform_real_distribution<double> cdist(0.0, 1.6);
    std::uniform_real_distribution<double> sdist(0.2, 0.8);
    std::uniform_real_distribution<double> ydist(-3.14, 3.14);
    auto t = test::random_tensor<double>(rng, {16, 16, 16}, 0.05, 1, 1);
    const std::array<double, 3> vs{0.1, 0.1, 0.1}, org{0.0, 0.0, 0.0};
    for (int trial = 0; trial < 100; ++trial) {
        GtBox box;
        box.center = {cdist(rng), cdist(rng), cdist(rng)};
        box.size = {sdist(rng), sdist(rng), sdist(rng)};
        box.yaw = ydist(rng);
        auto labels = voxel_targets(t, {box}, vs, org);
        for (std::int64_t i = 0; i < t.size(); ++i) {
            const Coord4& c = t.coords[std::size_t(i)];
            const double p[3] = {org[0] + (c.x + 0.5) * vs[0], org[1] + (c.y + 0.5) * vs[1],
                                 org[2] + (c.z + 0.5) * vs[2]};
            // rotate the offset into the box frame with an explicit matrix
            const double R[2][2] = {{std::cos(box.yaw), -std::sin(box.yaw)},
                                    {std::sin(box.yaw), std::cos(box.yaw)}};
            // inverse rotation = transpose
            const double dx = p[0] - box.center[0], dy = p[1] - box.center[1], dz = p[2] - box.center[2];
            const double lx = R[0][0] * dx + R[1][0] * dy;
            const double ly = R[0][1] * dx + R[1][1] * dy;
            const bool inside = std::abs(lx) <= box.size[0] / 2 && std::abs(ly) <= box.size[1] / 2 &&
                                std::abs(dz) <= box.size[2] / 2;
            EXPECT_EQ(labels[std::size_t(i)] == 1, inside);
        }
    }
}

TEST(FocalLoss, ConfidentCorrectIsNearZero) {
    auto [loss, grad] = focal_loss<double>({0.999999}, {1}, FocalLossSpec{});
    (void)grad;
    EXPECT_LE(loss, 1e-5);
}

TEST(FocalLoss, GammaZeroIsBce) {
    FocalLossSpec spec;
    spec.gamma = 0.0;
    auto [loss, grad] = focal_loss<double>({0.5}, {1}, spec);
    (void)grad;
    EXPECT_NEAR(loss, std::log(2.0), 1e-12);
    // against a hand-written BCE on a random batch
    test::Rng rng(281);
    std::uniform_real_distribution<double> pd(0.05, 0.95);
    std::vector<double> p(13);
    std::vector<std::uint8_t> y(13);
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = pd(rng);
        y[i] = i % 2;
    }
    auto [l2, g2] = focal_loss(p, y, spec);
    (void)g2;
    double bce = 0;
    for (std::size_t i = 0; i < p.size(); ++i) bce += y[i] ? -std::log(p[i]) : -std::log(1 - p[i]);
    bce /= double(p.size());
    EXPECT_NEAR(l2, bce, 1e-12);
}

TEST(FocalLoss, HandCaseGammaTwo) {
    auto [loss, grad] = focal_loss<double>({0.5}, {1}, FocalLossSpec{});
    (void)grad;
    EXPECT_NEAR(loss, 0.25 * std::log(2.0), 1e-12);
}

TEST(FocalLoss, EmptyInput) {
    auto [loss, grad] = focal_loss<double>({}, {}, FocalLossSpec{});
    EXPECT_EQ(loss, 0.0);
    EXPECT_TRUE(grad.empty());
}

TEST(FocalLoss, GradientMatchesFiniteDifferences) {
    test::Rng rng(283);
    std::uniform_real_distribution<double> pd(0.05, 0.95);
    for (int trial = 0; trial < 10; ++trial) {
        FocalLossSpec spec;
        spec.gamma = trial % 2 ? 2.0 : 1.3;
        std::vector<double> p(9);
        std::vector<std::uint8_t> y(9);
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] = pd(rng);
            y[i] = (i + trial) % 2;
        }
        auto [loss, grad] = focal_loss(p, y, spec);
        (void)loss;
        const double h = 1e-6;
        for (std::size_t i = 0; i < p.size(); ++i) {
            auto pp = p, pm = p;
            pp[i] += h;
            pm[i] -= h;
            const double fd = (focal_loss(pp, y, spec).first - focal_loss(pm, y, spec).first) / (2 * h);
            EXPECT_LE(test::rel_err(grad[i], fd, 1e-3), 1e-6);
        }
    }
}
