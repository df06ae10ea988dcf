#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "fscnn/kernel_map.hpp"
#include "fscnn/sparse_conv.hpp"
#include "fscnn/sparse_tensor.hpp"

namespace fscnn {

// Cubic importance map: one sigmoid score per (input row, kernel offset).
// Column `center_index` holds the center score I^p_0 that gates selection.
template <class S>
struct ImportanceMap {
    Matrix<S> values;
    std::int32_t center_index = 0;

    std::vector<S> center_scores() const {
        std::vector<S> out(std::size_t(values.rows));
        for (std::int64_t i = 0; i < values.rows; ++i) out[std::size_t(i)] = values(i, center_index);
        return out;
    }
};

// Result of important-input selection: the selected rows plus, per selected
// row, the kernel offsets it dilates into (its dynamic output shape).
struct FocalSelection {
    std::vector<std::int32_t> important_rows;              // sorted ascending
    std::vector<std::vector<std::int32_t>> dynamic_shapes; // parallel to important_rows
    double threshold = 0.5;
    std::optional<double> top_k_ratio;
};

// Yawed 3D box (full extents, rotation about Z) used as a supervision target.
struct GtBox {
    std::array<double, 3> center{0, 0, 0};
    std::array<double, 3> size{1, 1, 1};
    double yaw = 0;
};

struct FocalLossSpec {
    double gamma = 2.0;
    double loss_weight = 1.0;
};

// values = sigmoid(conv(input)); the branch conv must emit one channel per
// offset of the main kernel.
template <class S>
ImportanceMap<S> predict_importance(const SparseTensor<S>& input, const KernelMap& sub_map,
                                    const ConvWeights<S>& branch_weights, const KernelSpec& main_spec) {
    if (branch_weights.c_out != main_spec.volume())
        throw std::invalid_argument("predict_importance: branch must output one channel per kernel offset");
    if (sub_map.n_out != std::int32_t(input.size()))
        throw std::invalid_argument("predict_importance: sub_map must be a submanifold map of the input");
    auto logits = conv_forward(input, sub_map, branch_weights);
    ImportanceMap<S> imp;
    imp.center_index = center_offset_index(main_spec);
    imp.values = std::move(logits.features);
    for (S& v : imp.values.v) v = sigmoid(v);
    return imp;
}

// Threshold selection, Eq.-(7) style: row is important iff its center score
// meets tau (inclusive); per-offset dynamic shapes use the same threshold.
template <class S>
FocalSelection select_important(const ImportanceMap<S>& imp, double tau) {
    if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("select_important: tau outside [0,1]");
    FocalSelection sel;
    sel.threshold = tau;
    for (std::int64_t i = 0; i < imp.values.rows; ++i) {
        if (!(double(imp.values(i, imp.center_index)) >= tau)) continue;
        sel.important_rows.push_back(std::int32_t(i));
        std::vector<std::int32_t> shape;
        for (std::int64_t j = 0; j < imp.values.cols; ++j)
            if (double(imp.values(i, j)) >= tau) shape.push_back(std::int32_t(j));
        sel.dynamic_shapes.push_back(std::move(shape));
    }
    return sel;
}

// Top-k alternative: the ceil(ratio*N) largest center scores are important
// (ties resolved toward lower row index); dynamic shapes keep the fixed 0.5
// per-offset threshold.
template <class S>
FocalSelection select_topk(const ImportanceMap<S>& imp, double ratio) {
    if (!(ratio > 0.0) || ratio > 1.0) throw std::invalid_argument("select_topk: ratio outside (0,1]");
    const std::int64_t n = imp.values.rows;
    const std::int64_t keep = std::min<std::int64_t>(n, std::int64_t(std::ceil(ratio * double(n))));
    std::vector<std::int32_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
        return imp.values(a, imp.center_index) > imp.values(b, imp.center_index);
    });
    order.resize(std::size_t(keep));
    std::sort(order.begin(), order.end());

    FocalSelection sel;
    sel.threshold = 0.5;
    sel.top_k_ratio = ratio;
    for (std::int32_t row : order) {
        sel.important_rows.push_back(row);
        std::vector<std::int32_t> shape;
        for (std::int64_t j = 0; j < imp.values.cols; ++j)
            if (double(imp.values(row, j)) >= 0.5) shape.push_back(std::int32_t(j));
        sel.dynamic_shapes.push_back(std::move(shape));
    }
    return sel;
}

// Literal Eq.-(8) reading: additionally require the dilation target p+k to be
// an existing input position. Off by default (it forbids creating new
// positions); kept as a comparison knob.
template <class S>
void restrict_dynamic_shapes_to_input(FocalSelection& sel, const SparseTensor<S>& input,
                                      const std::vector<KernelOffset>& offsets) {
    const CoordIndex idx(input.coords);
    for (std::size_t r = 0; r < sel.important_rows.size(); ++r) {
        const Coord4& p = input.coords[std::size_t(sel.important_rows[r])];
        std::vector<std::int32_t> kept;
        for (std::int32_t j : sel.dynamic_shapes[r]) {
            const KernelOffset& k = offsets[std::size_t(j)];
            if (idx.lookup({p.batch, p.x + k.dx, p.y + k.dy, p.z + k.dz})) kept.push_back(j);
        }
        sel.dynamic_shapes[r] = std::move(kept);
    }
}

// Output set assembly, Eq. (6): importance-gated dilations of important rows
// (grid-clipped) unioned with every input position (unimportant rows pass
// through; important rows always retain their own position).
template <class S>
std::vector<Coord4> focal_output_coords(const SparseTensor<S>& input, const FocalSelection& sel,
                                        const KernelSpec& spec) {
    const auto offsets = offset_enumeration(spec);
    std::vector<Coord4> out = input.coords;
    for (std::size_t r = 0; r < sel.important_rows.size(); ++r) {
        const Coord4& p = input.coords[std::size_t(sel.important_rows[r])];
        for (std::int32_t j : sel.dynamic_shapes[r]) {
            const KernelOffset& k = offsets[std::size_t(j)];
            Coord4 q{p.batch, p.x + k.dx, p.y + k.dy, p.z + k.dz};
            if (in_bounds(q, input.spatial_shape)) out.push_back(q);
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

struct FocalConvOptions {
    double tau = 0.5;
    bool attention = true;
    bool topk = false;
    double top_k_ratio = 1.0;
    bool restrict_to_input = false; // literal Eq.-(8) comparison knob
};

template <class S>
struct FocalForwardResult {
    SparseTensor<S> output;
    ImportanceMap<S> importance;
    FocalSelection selection;
    KernelMap sub_map;
    KernelMap out_map;
    std::vector<S> attention_scales; // empty when attention is off
};

// The three-step focal pipeline: predict importance, select important inputs,
// generate the dynamic output set; then run the main convolution over an
// explicit-output rulebook. With attention on, each input row is scaled by
// its center score before the main convolution (the differentiable path).
template <class S>
FocalForwardResult<S> focal_forward(const SparseTensor<S>& input, const ConvWeights<S>& weights,
                                    const ConvWeights<S>& branch_weights, const KernelSpec& main_spec,
                                    const KernelSpec& branch_spec, const FocalConvOptions& opt) {
    main_spec.validate();
    if (main_spec.stride != Shape3{1, 1, 1} || !main_spec.odd_kernel())
        throw std::invalid_argument("focal_forward: main kernel must be odd with stride 1");

    FocalForwardResult<S> res;
    res.sub_map = submanifold_map(input, branch_spec);
    res.importance = predict_importance(input, res.sub_map, branch_weights, main_spec);
    res.selection = opt.topk ? select_topk(res.importance, opt.top_k_ratio)
                             : select_important(res.importance, opt.tau);
    const auto offsets = offset_enumeration(main_spec);
    if (opt.restrict_to_input) restrict_dynamic_shapes_to_input(res.selection, input, offsets);

    auto out_coords = focal_output_coords(input, res.selection, main_spec);
    KernelSpec explicit_spec = main_spec;
    explicit_spec.mode = ConvMode::explicit_output;
    res.out_map = explicit_output_map(input, out_coords, explicit_spec);

    if (opt.attention) {
        res.attention_scales = res.importance.center_scores();
        auto scaled = scale_rows(input, res.attention_scales);
        res.output = conv_forward(scaled, res.out_map, weights);
    } else {
        res.output = conv_forward(input, res.out_map, weights);
    }
    return res;
}

template <class S>
struct FocalGradients {
    Matrix<S> d_input;
    std::vector<S> d_w;
    std::vector<S> d_bias;
    std::vector<S> d_branch_w;
    std::vector<S> d_branch_bias;
};

// Reverse mode through the focal pipeline. Selection is a hard threshold and
// carries no gradient; the importance branch receives gradient through the
// attention multiplication and, when supplied, through the objective loss on
// center scores (`d_center_loss`, length N_in or empty).
template <class S>
FocalGradients<S> focal_backward(const SparseTensor<S>& input, const ConvWeights<S>& weights,
                                 const ConvWeights<S>& branch_weights, const FocalForwardResult<S>& res,
                                 const Matrix<S>& d_output, const std::vector<S>& d_center_loss = {}) {
    FocalGradients<S> g;
    const bool attention = !res.attention_scales.empty();

    ConvGradients<S> main_g;
    std::vector<S> d_center(std::size_t(input.size()), S(0));
    if (attention) {
        auto scaled = scale_rows(input, res.attention_scales);
        main_g = conv_backward(scaled, res.out_map, weights, d_output);
        auto sg = scale_rows_backward(input, res.attention_scales, main_g.d_input);
        g.d_input = std::move(sg.d_input);
        d_center = std::move(sg.d_scales);
    } else {
        main_g = conv_backward(input, res.out_map, weights, d_output);
        g.d_input = std::move(main_g.d_input);
    }
    g.d_w = std::move(main_g.d_w);
    g.d_bias = std::move(main_g.d_bias);

    if (!d_center_loss.empty()) {
        if (d_center_loss.size() != d_center.size())
            throw std::invalid_argument("focal_backward: d_center_loss length mismatch");
        for (std::size_t i = 0; i < d_center.size(); ++i) d_center[i] += d_center_loss[i];
    }

    // d(sigmoid) = v (1 - v); only the center column carries gradient.
    Matrix<S> d_logits(res.importance.values.rows, res.importance.values.cols);
    const std::int32_t j0 = res.importance.center_index;
    for (std::int64_t i = 0; i < d_logits.rows; ++i) {
        const S v = res.importance.values(i, j0);
        d_logits(i, j0) = d_center[std::size_t(i)] * v * (S(1) - v);
    }
    auto branch_g = conv_backward(input, res.sub_map, branch_weights, d_logits);
    g.d_branch_w = std::move(branch_g.d_w);
    g.d_branch_bias = std::move(branch_g.d_bias);
    for (std::size_t i = 0; i < g.d_input.v.size(); ++i) g.d_input.v[i] += branch_g.d_input.v[i];
    return g;
}

// Yawed-box containment: rotate the offset into the box frame by -yaw, then
// axis-aligned check with inclusive boundaries.
inline bool point_in_box(const std::array<double, 3>& p, const GtBox& b) {
    const double dx = p[0] - b.center[0], dy = p[1] - b.center[1], dz = p[2] - b.center[2];
    const double cy = std::cos(-b.yaw), sy = std::sin(-b.yaw);
    const double lx = cy * dx - sy * dy;
    const double ly = sy * dx + cy * dy;
    return std::abs(lx) <= b.size[0] / 2 && std::abs(ly) <= b.size[1] / 2 && std::abs(dz) <= b.size[2] / 2;
}

inline bool point_in_any_box(const std::array<double, 3>& p, const std::vector<GtBox>& boxes) {
    for (const GtBox& b : boxes)
        if (point_in_box(p, b)) return true;
    return false;
}

template <class S>
std::array<double, 3> voxel_center(const SparseTensor<S>& t, std::int64_t row,
                                   const std::array<double, 3>& voxel_size, const std::array<double, 3>& origin) {
    const Coord4& c = t.coords[std::size_t(row)];
    return {origin[0] + (double(c.x) + 0.5) * voxel_size[0] * double(t.stride[0]),
            origin[1] + (double(c.y) + 0.5) * voxel_size[1] * double(t.stride[1]),
            origin[2] + (double(c.z) + 0.5) * voxel_size[2] * double(t.stride[2])};
}

// Binary labels: 1 iff the voxel center lies inside any yawed box. Centers
// account for the tensor's accumulated stride.
template <class S>
std::vector<std::uint8_t> voxel_targets(const SparseTensor<S>& input, const std::vector<GtBox>& boxes,
                                        const std::array<double, 3>& voxel_size,
                                        const std::array<double, 3>& origin) {
    for (double v : voxel_size)
        if (!(v > 0)) throw std::invalid_argument("voxel_targets: voxel_size must be positive");
    std::vector<std::uint8_t> labels(std::size_t(input.size()), 0);
    for (std::int64_t i = 0; i < input.size(); ++i)
        labels[std::size_t(i)] = point_in_any_box(voxel_center(input, i, voxel_size, origin), boxes) ? 1 : 0;
    return labels;
}

// Batched variant: boxes are per batch index; rows of batches beyond the
// list get label 0.
template <class S>
std::vector<std::uint8_t> voxel_targets_batched(const SparseTensor<S>& input,
                                                const std::vector<std::vector<GtBox>>& boxes_per_batch,
                                                const std::array<double, 3>& voxel_size,
                                                const std::array<double, 3>& origin) {
    std::vector<std::uint8_t> labels(std::size_t(input.size()), 0);
    for (std::int64_t i = 0; i < input.size(); ++i) {
        const Coord4& c = input.coords[std::size_t(i)];
        if (std::size_t(c.batch) >= boxes_per_batch.size()) continue;
        labels[std::size_t(i)] = point_in_any_box(voxel_center(input, i, voxel_size, origin),
                                                  boxes_per_batch[std::size_t(c.batch)])
                                     ? 1
                                     : 0;
    }
    return labels;
}

// Objective loss, focal-loss form: L = (1/N) sum -(1-pbar)^gamma log(pbar)
// with pbar = p for positives and 1-p otherwise. Returns the analytic
// gradient w.r.t. the scores. Scores are clamped to [eps, 1-eps].
template <class S>
std::pair<S, std::vector<S>> focal_loss(const std::vector<S>& center_scores,
                                        const std::vector<std::uint8_t>& labels,
                                        const FocalLossSpec& spec) {
    if (center_scores.size() != labels.size())
        throw std::invalid_argument("focal_loss: score/label length mismatch");
    if (spec.gamma < 0) throw std::invalid_argument("focal_loss: gamma must be non-negative");
    const std::size_t n = center_scores.size();
    if (n == 0) return {S(0), {}};
    constexpr double eps = 1e-7;
    double total = 0;
    std::vector<S> d_scores(n, S(0));
    for (std::size_t i = 0; i < n; ++i) {
        const double p = std::clamp(double(center_scores[i]), eps, 1.0 - eps);
        const double pbar = labels[i] ? p : 1.0 - p;
        const double one_m = 1.0 - pbar;
        const double pow_g = std::pow(one_m, spec.gamma);
        total += -pow_g * std::log(pbar);
        // d/dpbar [-(1-pbar)^g log pbar] = g (1-pbar)^(g-1) log pbar - (1-pbar)^g / pbar
        const double pow_gm1 = spec.gamma == 0 ? 0.0 : std::pow(one_m, spec.gamma - 1.0);
        const double d_pbar = spec.gamma * pow_gm1 * std::log(pbar) - pow_g / pbar;
        d_scores[i] = S((labels[i] ? d_pbar : -d_pbar) / double(n));
    }
    return {S(total / double(n)), std::move(d_scores)};
}

// One-line diagnostic consumed by the CLI stats output.
inline std::string focal_diag_line(const std::string& name, std::int64_t n_in, std::int64_t n_imp,
                                   std::int64_t n_out, double tau) {
    std::ostringstream os;
    os << "layer=" << name << " n_in=" << n_in << " n_imp=" << n_imp << " n_out=" << n_out
       << " tau=" << tau;
    return os.str();
}

} // namespace fscnn
