#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "fscnn/checkpoint.hpp"
#include "fscnn/focal_conv.hpp"
#include "fscnn/image_fusion.hpp"
#include "fscnn/kernel_map.hpp"
#include "fscnn/sparse_conv.hpp"

namespace fscnn {

enum class BlockStyle { plain, residual_pair };

struct StageSpec {
    std::int32_t out_channels = 16;
    std::int32_t n_subm_blocks = 2;
    bool downsample = true;
    BlockStyle block_style = BlockStyle::plain;
    bool focal_at_last_layer = false;
    bool fusion_at_last_layer = false;
};

struct BackboneSpec {
    std::int32_t in_channels = 4;
    std::int32_t stem_channels = 16;
    std::array<StageSpec, 4> stages;
    double tau = 0.5;
    bool attention = true;
    double loss_weight = 1.0;
    std::int32_t branch_kernel = 1;
    bool topk = false;
    double top_k_ratio = 0.5;
    bool restrict_to_input = false;
    FusionScope fusion_scope = FusionScope::important;
    std::int32_t image_c_mid = 16;

    void validate() const {
        if (in_channels <= 0 || stem_channels <= 0) throw std::invalid_argument("backbone: channels must be positive");
        if (branch_kernel <= 0 || branch_kernel % 2 == 0)
            throw std::invalid_argument("backbone: branch kernel must be odd and positive");
        std::int32_t prev = stem_channels;
        for (std::size_t s = 0; s < 4; ++s) {
            const StageSpec& st = stages[s];
            if (st.out_channels <= 0) throw std::invalid_argument("backbone: stage channels must be positive");
            if (st.n_subm_blocks < 0) throw std::invalid_argument("backbone: negative block count");
            if (st.fusion_at_last_layer && !st.focal_at_last_layer)
                throw std::invalid_argument("backbone: fusion requires a focal layer");
            if (st.focal_at_last_layer && st.n_subm_blocks < 1)
                throw std::invalid_argument("backbone: focal layer needs at least one block in the stage");
            if (st.block_style == BlockStyle::residual_pair && !st.downsample && prev != st.out_channels)
                throw std::invalid_argument("backbone: residual stage needs matching channels");
            prev = st.out_channels;
        }
        if (tau < 0 || tau > 1) throw std::invalid_argument("backbone: tau outside [0,1]");
    }
};

// Channels {16,16,32,64,64}, submanifold block counts {1,2,2,2}, three
// stride-2 downsampling stages.
inline BackboneSpec preset_pvrcnn(std::int32_t in_channels = 4) {
    BackboneSpec spec;
    spec.in_channels = in_channels;
    spec.stem_channels = 16;
    spec.stages[0] = {16, 1, false, BlockStyle::plain, false, false};
    spec.stages[1] = {32, 2, true, BlockStyle::plain, false, false};
    spec.stages[2] = {64, 2, true, BlockStyle::plain, false, false};
    spec.stages[3] = {64, 2, true, BlockStyle::plain, false, false};
    return spec;
}

// Channels {16,16,32,64,128}, block counts {2,2,2,2}, residual pair blocks.
inline BackboneSpec preset_centerpoint(std::int32_t in_channels = 4) {
    BackboneSpec spec;
    spec.in_channels = in_channels;
    spec.stem_channels = 16;
    spec.stages[0] = {16, 2, false, BlockStyle::residual_pair, false, false};
    spec.stages[1] = {32, 2, true, BlockStyle::residual_pair, false, false};
    spec.stages[2] = {64, 2, true, BlockStyle::residual_pair, false, false};
    spec.stages[3] = {128, 2, true, BlockStyle::residual_pair, false, false};
    return spec;
}

inline BackboneSpec preset_by_name(const std::string& name, std::int32_t in_channels = 4) {
    if (name == "pvrcnn") return preset_pvrcnn(in_channels);
    if (name == "centerpoint") return preset_centerpoint(in_channels);
    throw std::invalid_argument("backbone: unknown preset '" + name + "'");
}

inline void set_focal_stages(BackboneSpec& spec, const std::vector<std::int32_t>& stages) {
    for (std::int32_t s : stages) {
        if (s < 1 || s > 4) throw std::invalid_argument("backbone: focal stage index outside 1..4");
        spec.stages[std::size_t(s - 1)].focal_at_last_layer = true;
    }
}

inline void set_fusion_stages(BackboneSpec& spec, const std::vector<std::int32_t>& stages) {
    for (std::int32_t s : stages) {
        if (s < 1 || s > 4) throw std::invalid_argument("backbone: fusion stage index outside 1..4");
        spec.stages[std::size_t(s - 1)].focal_at_last_layer = true;
        spec.stages[std::size_t(s - 1)].fusion_at_last_layer = true;
    }
}

template <class S>
struct ParamRef {
    std::string name;
    std::vector<S>* value = nullptr;
    std::vector<S>* grad = nullptr;
    std::vector<std::uint64_t> shape;
};

struct LayerDiag {
    std::string name;
    std::int64_t n_in = 0;
    std::int64_t n_imp = -1; // -1: not a focal layer
    std::int64_t n_out = 0;
    double tau = -1;
};

template <class S>
struct ForwardContext {
    const std::vector<std::vector<GtBox>>* boxes = nullptr;         // per batch index
    const std::vector<std::vector<RawImageView<S>>>* views = nullptr; // per batch index
    std::array<double, 3> voxel_size{0.05, 0.05, 0.1};
    std::array<double, 3> origin{0, 0, 0};
    TransformRecord transforms;

    double objective_loss = 0;
    double first_focal_recall = -1;
    std::vector<LayerDiag> diags;
};

namespace detail {

template <class S>
void init_uniform(std::mt19937_64& rng, std::vector<S>& v, double fan_in) {
    const double bound = 1.0 / std::sqrt(std::max(1.0, fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& x : v) x = S(dist(rng));
}

} // namespace detail

template <class S>
class Layer {
public:
    std::string name;
    virtual ~Layer() = default;
    virtual SparseTensor<S> forward(const SparseTensor<S>& x, ForwardContext<S>& ctx) = 0;
    virtual Matrix<S> backward(const Matrix<S>& d_out) = 0;
    virtual void collect_params(std::vector<ParamRef<S>>& out) = 0;
};

// conv (submanifold or strided regular) + per-channel affine + relu.
template <class S>
class ConvBlockLayer final : public Layer<S> {
public:
    ConvBlockLayer(std::string layer_name, const KernelSpec& spec, std::int32_t c_in, std::int32_t c_out,
                   std::mt19937_64& rng)
        : spec_(spec), conv_(spec.volume(), c_in, c_out, false) {
        this->name = std::move(layer_name);
        detail::init_uniform(rng, conv_.w, double(spec.volume()) * double(c_in));
        scale_.assign(std::size_t(c_out), S(1));
        shift_.assign(std::size_t(c_out), S(0));
        d_w_.assign(conv_.w.size(), S(0));
        d_scale_.assign(scale_.size(), S(0));
        d_shift_.assign(shift_.size(), S(0));
    }

    SparseTensor<S> forward(const SparseTensor<S>& x, ForwardContext<S>& ctx) override {
        in_ = x;
        map_ = spec_.mode == ConvMode::submanifold ? submanifold_map(x, spec_) : regular_map(x, spec_);
        conv_out_ = conv_forward(x, map_, conv_);
        pre_relu_ = affine(conv_out_, scale_, shift_);
        auto out = relu(pre_relu_);
        ctx.diags.push_back({this->name, x.size(), -1, out.size(), -1});
        return out;
    }

    Matrix<S> backward(const Matrix<S>& d_out) override {
        auto d_pre = relu_backward(pre_relu_, d_out);
        auto ag = affine_backward(conv_out_, scale_, d_pre);
        for (std::size_t i = 0; i < d_scale_.size(); ++i) {
            d_scale_[i] += ag.d_scale[i];
            d_shift_[i] += ag.d_shift[i];
        }
        auto cg = conv_backward(in_, map_, conv_, ag.d_input);
        for (std::size_t i = 0; i < d_w_.size(); ++i) d_w_[i] += cg.d_w[i];
        return std::move(cg.d_input);
    }

    void collect_params(std::vector<ParamRef<S>>& out) override {
        out.push_back({this->name + ".w", &conv_.w, &d_w_,
                       {std::uint64_t(conv_.volume), std::uint64_t(conv_.c_in), std::uint64_t(conv_.c_out)}});
        out.push_back({this->name + ".scale", &scale_, &d_scale_, {scale_.size()}});
        out.push_back({this->name + ".shift", &shift_, &d_shift_, {shift_.size()}});
    }

private:
    KernelSpec spec_;
    ConvWeights<S> conv_;
    std::vector<S> scale_, shift_;
    std::vector<S> d_w_, d_scale_, d_shift_;

    SparseTensor<S> in_, conv_out_, pre_relu_;
    KernelMap map_;
};

// Focal convolution core shared by the plain focal block, the fused focal
// block, and the second conv of residual blocks. Runs the fused path
// unconditionally; without camera views the image rows are zero, which is
// exactly the LIDAR-only focal convolution.
template <class S>
struct FocalUnit {
    std::string name;
    KernelSpec main_spec, branch_spec;
    ConvWeights<S> w, branch;
    FocalConvOptions opt;
    double loss_weight = 1.0;
    bool fusion = false;
    FusionScope scope = FusionScope::important;
    ImageStack<S> stack;

    std::vector<S> d_w, d_branch_w, d_branch_bias;
    ImageStackGradients<S> d_stack;

    FocalUnit(std::string unit_name, std::int32_t c_in, std::int32_t c_out, std::int32_t branch_kernel,
              const FocalConvOptions& options, double lw, bool with_fusion, FusionScope fusion_scope,
              std::int32_t image_c_mid, std::mt19937_64& rng)
        : name(std::move(unit_name)), opt(options), loss_weight(lw), fusion(with_fusion), scope(fusion_scope) {
        main_spec = submanifold_spec(3);
        branch_spec = submanifold_spec(branch_kernel);
        w = ConvWeights<S>(27, c_in, c_out, false);
        branch = ConvWeights<S>(branch_spec.volume(), c_in, 27, true);
        detail::init_uniform(rng, w.w, 27.0 * double(c_in));
        detail::init_uniform(rng, branch.w, double(branch_spec.volume()) * double(c_in));
        detail::init_uniform(rng, branch.bias, double(branch_spec.volume()) * double(c_in));
        if (fusion) {
            stack = ImageStack<S>(image_c_mid, c_in);
            detail::init_uniform(rng, stack.conv1.w, 27.0);
            for (auto& conv : stack.res_conv) detail::init_uniform(rng, conv.w, 9.0 * double(image_c_mid));
            detail::init_uniform(rng, stack.mlp_w.v, double(image_c_mid));
            detail::init_uniform(rng, stack.mlp_b, double(image_c_mid));
        }
        d_w.assign(this->w.w.size(), S(0));
        d_branch_w.assign(branch.w.size(), S(0));
        d_branch_bias.assign(branch.bias.size(), S(0));
        reset_stack_grads();
    }

    void reset_stack_grads() {
        if (!fusion) return;
        d_stack.d_conv1 = Conv2dWeights<S>(3, stack.c_mid, 3);
        for (auto& c : d_stack.d_res_conv) c = Conv2dWeights<S>(stack.c_mid, stack.c_mid, 3);
        d_stack.d_scale1.assign(std::size_t(stack.c_mid), S(0));
        d_stack.d_shift1.assign(std::size_t(stack.c_mid), S(0));
        for (auto& v : d_stack.d_res_scale) v.assign(std::size_t(stack.c_mid), S(0));
        for (auto& v : d_stack.d_res_shift) v.assign(std::size_t(stack.c_mid), S(0));
        d_stack.d_mlp_w = Matrix<S>(stack.mlp_w.rows, stack.mlp_w.cols);
        d_stack.d_mlp_b.assign(stack.mlp_b.size(), S(0));
    }

    struct PerBatchProjection {
        std::vector<std::int64_t> row_ids;
        ProjectionResult<S> proj;
    };

    SparseTensor<S> forward(const SparseTensor<S>& x, ForwardContext<S>& ctx) {
        in_ = x;
        use_fusion_ = fusion && ctx.views != nullptr && !ctx.views->empty();
        views_cache_.clear();
        stack_caches_.clear();
        proj_in_.clear();
        proj_out_.clear();

        Matrix<S> rows_in(x.size(), x.channels());
        if (use_fusion_) {
            views_cache_.resize(std::size_t(x.batch_size));
            stack_caches_.resize(std::size_t(x.batch_size));
            proj_in_.resize(std::size_t(x.batch_size));
            proj_out_.resize(std::size_t(x.batch_size));
            for (std::int32_t b = 0; b < x.batch_size; ++b) {
                if (std::size_t(b) >= ctx.views->size()) continue;
                const auto& raw = (*ctx.views)[std::size_t(b)];
                auto& cams = views_cache_[std::size_t(b)];
                auto& caches = stack_caches_[std::size_t(b)];
                caches.resize(raw.size());
                for (std::size_t v = 0; v < raw.size(); ++v) {
                    CameraView<S> cam;
                    cam.features = extract_image_features(raw[v].image, stack, &caches[v]);
                    cam.calib = raw[v].calib;
                    cams.push_back(std::move(cam));
                }
                if (cams.empty()) continue;
                auto& pb = proj_in_[std::size_t(b)];
                std::vector<Coord4> coords_b;
                for (std::int64_t i = 0; i < x.size(); ++i)
                    if (x.coords[std::size_t(i)].batch == b) {
                        pb.row_ids.push_back(i);
                        coords_b.push_back(x.coords[std::size_t(i)]);
                    }
                pb.proj = project_coords<S>(coords_b, x.stride, ctx.voxel_size, ctx.origin, ctx.transforms, cams);
                for (std::size_t r = 0; r < pb.row_ids.size(); ++r)
                    for (std::int64_t ch = 0; ch < x.channels(); ++ch)
                        rows_in(pb.row_ids[r], ch) = pb.proj.rows(std::int64_t(r), ch);
            }
        }

        res_ = fuse_focal_forward(x, w, branch, main_spec, branch_spec, opt, scope, rows_in,
                                  [&](const std::vector<Coord4>& out_coords) {
                                      Matrix<S> rows(std::int64_t(out_coords.size()), x.channels());
                                      if (!use_fusion_) return rows;
                                      for (std::int32_t b = 0; b < x.batch_size; ++b) {
                                          const auto& cams = views_cache_[std::size_t(b)];
                                          if (cams.empty()) continue;
                                          auto& pb = proj_out_[std::size_t(b)];
                                          std::vector<Coord4> coords_b;
                                          for (std::size_t i = 0; i < out_coords.size(); ++i)
                                              if (out_coords[i].batch == b) {
                                                  pb.row_ids.push_back(std::int64_t(i));
                                                  coords_b.push_back(out_coords[i]);
                                              }
                                          pb.proj = project_coords<S>(coords_b, x.stride, ctx.voxel_size,
                                                                      ctx.origin, ctx.transforms, cams);
                                          for (std::size_t r = 0; r < pb.row_ids.size(); ++r)
                                              for (std::int64_t ch = 0; ch < x.channels(); ++ch)
                                                  rows(pb.row_ids[r], ch) = pb.proj.rows(std::int64_t(r), ch);
                                      }
                                      return rows;
                                  });

        d_center_loss_.clear();
        last_loss = 0;
        if (ctx.boxes != nullptr) {
            const auto labels = voxel_targets_batched(x, *ctx.boxes, ctx.voxel_size, ctx.origin);
            const auto centers = res_.focal.importance.center_scores();
            FocalLossSpec ls;
            ls.loss_weight = loss_weight;
            auto [loss, d_scores] = focal_loss(centers, labels, ls);
            last_loss = double(loss);
            ctx.objective_loss += loss_weight * double(loss);
            d_center_loss_ = std::move(d_scores);
            for (auto& v : d_center_loss_) v *= S(loss_weight);
            if (ctx.first_focal_recall < 0) {
                std::int64_t fg = 0, hit = 0;
                for (std::size_t i = 0; i < labels.size(); ++i) {
                    if (!labels[i]) continue;
                    ++fg;
                    if (double(centers[i]) >= opt.tau) ++hit;
                }
                ctx.first_focal_recall = fg == 0 ? 1.0 : double(hit) / double(fg);
            }
        }
        ctx.diags.push_back({name, x.size(), std::int64_t(res_.focal.selection.important_rows.size()),
                             res_.focal.output.size(), opt.tau});
        return res_.focal.output;
    }

    Matrix<S> backward(const Matrix<S>& d_out) {
        auto g = fuse_focal_backward(in_, w, branch, res_, d_out, d_center_loss_);
        for (std::size_t i = 0; i < d_w.size(); ++i) d_w[i] += g.d_w[i];
        for (std::size_t i = 0; i < d_branch_w.size(); ++i) d_branch_w[i] += g.d_branch_w[i];
        for (std::size_t i = 0; i < d_branch_bias.size(); ++i) d_branch_bias[i] += g.d_branch_bias[i];
        if (use_fusion_) {
            for (std::int32_t b = 0; b < in_.batch_size; ++b) {
                const auto& cams = views_cache_[std::size_t(b)];
                if (cams.empty()) continue;
                std::vector<Image<S>> d_maps;
                auto scatter = [&](const PerBatchProjection& pb, const Matrix<S>& d_rows_full) {
                    Matrix<S> d_rows(std::int64_t(pb.row_ids.size()), d_rows_full.cols);
                    for (std::size_t r = 0; r < pb.row_ids.size(); ++r)
                        for (std::int64_t ch = 0; ch < d_rows_full.cols; ++ch)
                            d_rows(std::int64_t(r), ch) = d_rows_full(pb.row_ids[r], ch);
                    project_rows_backward(pb.proj, cams, d_rows, d_maps);
                };
                scatter(proj_out_[std::size_t(b)], g.d_image_rows_out);
                scatter(proj_in_[std::size_t(b)], g.d_image_rows_in);
                for (std::size_t v = 0; v < cams.size(); ++v) {
                    auto sg = image_stack_backward(stack, stack_caches_[std::size_t(b)][v], d_maps[v]);
                    accumulate_stack(sg);
                }
            }
        }
        return std::move(g.d_input);
    }

    void collect_params(std::vector<ParamRef<S>>& out) {
        out.push_back({name + ".w", &w.w, &d_w,
                       {std::uint64_t(w.volume), std::uint64_t(w.c_in), std::uint64_t(w.c_out)}});
        out.push_back({name + ".branch_w", &branch.w, &d_branch_w,
                       {std::uint64_t(branch.volume), std::uint64_t(branch.c_in), std::uint64_t(branch.c_out)}});
        out.push_back({name + ".branch_b", &branch.bias, &d_branch_bias, {branch.bias.size()}});
        if (fusion) {
            const auto u = [](std::size_t x) { return std::uint64_t(x); };
            out.push_back({name + ".stack.conv1", &stack.conv1.w, &d_stack.d_conv1.w,
                           {u(std::size_t(stack.c_mid)), 3, 3, 3}});
            out.push_back({name + ".stack.scale1", &stack.scale1, &d_stack.d_scale1, {u(stack.scale1.size())}});
            out.push_back({name + ".stack.shift1", &stack.shift1, &d_stack.d_shift1, {u(stack.shift1.size())}});
            for (int i = 0; i < 3; ++i) {
                const std::string base = name + ".stack.res" + std::to_string(i);
                out.push_back({base + ".w", &stack.res_conv[std::size_t(i)].w, &d_stack.d_res_conv[std::size_t(i)].w,
                               {u(std::size_t(stack.c_mid)), u(std::size_t(stack.c_mid)), 3, 3}});
                out.push_back({base + ".scale", &stack.res_scale[std::size_t(i)],
                               &d_stack.d_res_scale[std::size_t(i)], {u(stack.res_scale[std::size_t(i)].size())}});
                out.push_back({base + ".shift", &stack.res_shift[std::size_t(i)],
                               &d_stack.d_res_shift[std::size_t(i)], {u(stack.res_shift[std::size_t(i)].size())}});
            }
            out.push_back({name + ".stack.mlp_w", &stack.mlp_w.v, &d_stack.d_mlp_w.v,
                           {u(std::size_t(stack.mlp_w.rows)), u(std::size_t(stack.mlp_w.cols))}});
            out.push_back({name + ".stack.mlp_b", &stack.mlp_b, &d_stack.d_mlp_b, {u(stack.mlp_b.size())}});
        }
    }

    double last_loss = 0;

private:
    void accumulate_stack(const ImageStackGradients<S>& sg) {
        for (std::size_t i = 0; i < sg.d_conv1.w.size(); ++i) d_stack.d_conv1.w[i] += sg.d_conv1.w[i];
        for (int l = 0; l < 3; ++l) {
            for (std::size_t i = 0; i < sg.d_res_conv[std::size_t(l)].w.size(); ++i)
                d_stack.d_res_conv[std::size_t(l)].w[i] += sg.d_res_conv[std::size_t(l)].w[i];
            for (std::size_t i = 0; i < sg.d_res_scale[std::size_t(l)].size(); ++i) {
                d_stack.d_res_scale[std::size_t(l)][i] += sg.d_res_scale[std::size_t(l)][i];
                d_stack.d_res_shift[std::size_t(l)][i] += sg.d_res_shift[std::size_t(l)][i];
            }
        }
        for (std::size_t i = 0; i < sg.d_scale1.size(); ++i) {
            d_stack.d_scale1[i] += sg.d_scale1[i];
            d_stack.d_shift1[i] += sg.d_shift1[i];
        }
        for (std::size_t i = 0; i < sg.d_mlp_w.v.size(); ++i) d_stack.d_mlp_w.v[i] += sg.d_mlp_w.v[i];
        for (std::size_t i = 0; i < sg.d_mlp_b.size(); ++i) d_stack.d_mlp_b[i] += sg.d_mlp_b[i];
    }

    SparseTensor<S> in_;
    FusedFocalResult<S> res_;
    std::vector<S> d_center_loss_;
    bool use_fusion_ = false;
    std::vector<std::vector<CameraView<S>>> views_cache_;
    std::vector<std::vector<ImageStackCache<S>>> stack_caches_;
    std::vector<PerBatchProjection> proj_in_, proj_out_;
};

// Focal conv + affine + relu (the "last layer" substitution in plain stages).
template <class S>
class FocalBlockLayer final : public Layer<S> {
public:
    FocalBlockLayer(std::string layer_name, std::int32_t c_in, std::int32_t c_out, const BackboneSpec& spec,
                    bool with_fusion, std::mt19937_64& rng)
        : unit_(layer_name, c_in, c_out, spec.branch_kernel, make_options(spec), spec.loss_weight, with_fusion,
                spec.fusion_scope, spec.image_c_mid, rng) {
        this->name = std::move(layer_name);
        scale_.assign(std::size_t(c_out), S(1));
        shift_.assign(std::size_t(c_out), S(0));
        d_scale_.assign(scale_.size(), S(0));
        d_shift_.assign(shift_.size(), S(0));
    }

    static FocalConvOptions make_options(const BackboneSpec& spec) {
        FocalConvOptions opt;
        opt.tau = spec.tau;
        opt.attention = spec.attention;
        opt.topk = spec.topk;
        opt.top_k_ratio = spec.top_k_ratio;
        opt.restrict_to_input = spec.restrict_to_input;
        return opt;
    }

    SparseTensor<S> forward(const SparseTensor<S>& x, ForwardContext<S>& ctx) override {
        auto y = unit_.forward(x, ctx);
        conv_out_ = y;
        pre_relu_ = affine(y, scale_, shift_);
        return relu(pre_relu_);
    }

    Matrix<S> backward(const Matrix<S>& d_out) override {
        auto d_pre = relu_backward(pre_relu_, d_out);
        auto ag = affine_backward(conv_out_, scale_, d_pre);
        for (std::size_t i = 0; i < d_scale_.size(); ++i) {
            d_scale_[i] += ag.d_scale[i];
            d_shift_[i] += ag.d_shift[i];
        }
        return unit_.backward(ag.d_input);
    }

    void collect_params(std::vector<ParamRef<S>>& out) override {
        unit_.collect_params(out);
        out.push_back({this->name + ".scale", &scale_, &d_scale_, {scale_.size()}});
        out.push_back({this->name + ".shift", &shift_, &d_shift_, {shift_.size()}});
    }

    FocalUnit<S>& unit() { return unit_; }

private:
    FocalUnit<S> unit_;
    std::vector<S> scale_, shift_, d_scale_, d_shift_;
    SparseTensor<S> conv_out_, pre_relu_;
};

// Two conv-affine-relu layers with a residual connection (CenterPoint-style
// block): y = relu(aff2(conv2(relu(aff1(conv1 x)))) + x). When this block is
// the focal substitution point, conv2 is the focal unit and the residual is
// embedded into the dilated output set.
template <class S>
class ResidualBlockLayer final : public Layer<S> {
public:
    ResidualBlockLayer(std::string layer_name, std::int32_t channels, const BackboneSpec& spec, bool focal_second,
                       bool with_fusion, std::mt19937_64& rng)
        : spec_(submanifold_spec(3)), conv1_(27, channels, channels, false) {
        this->name = std::move(layer_name);
        detail::init_uniform(rng, conv1_.w, 27.0 * double(channels));
        scale1_.assign(std::size_t(channels), S(1));
        shift1_.assign(std::size_t(channels), S(0));
        if (focal_second) {
            focal2_ = std::make_unique<FocalUnit<S>>(this->name + ".focal", channels, channels, spec.branch_kernel,
                                                     FocalBlockLayer<S>::make_options(spec), spec.loss_weight,
                                                     with_fusion, spec.fusion_scope, spec.image_c_mid, rng);
        } else {
            conv2_ = ConvWeights<S>(27, channels, channels, false);
            detail::init_uniform(rng, conv2_.w, 27.0 * double(channels));
        }
        scale2_.assign(std::size_t(channels), S(1));
        shift2_.assign(std::size_t(channels), S(0));
        d_w1_.assign(conv1_.w.size(), S(0));
        d_w2_.assign(conv2_.w.size(), S(0));
        d_scale1_.assign(scale1_.size(), S(0));
        d_shift1_.assign(shift1_.size(), S(0));
        d_scale2_.assign(scale2_.size(), S(0));
        d_shift2_.assign(shift2_.size(), S(0));
    }

    SparseTensor<S> forward(const SparseTensor<S>& x, ForwardContext<S>& ctx) override {
        in_ = x;
        map1_ = submanifold_map(x, spec_);
        conv1_out_ = conv_forward(x, map1_, conv1_);
        pre_relu1_ = affine(conv1_out_, scale1_, shift1_);
        h1_ = relu(pre_relu1_);

        SparseTensor<S> z;
        if (focal2_) {
            conv2_out_ = focal2_->forward(h1_, ctx);
        } else {
            map2_ = submanifold_map(h1_, spec_);
            conv2_out_ = conv_forward(h1_, map2_, conv2_);
            ctx.diags.push_back({this->name, x.size(), -1, conv2_out_.size(), -1});
        }
        z = affine(conv2_out_, scale2_, shift2_);

        // residual embed: x rows land at their coordinates in the (possibly
        // dilated) output set
        embed_.assign(std::size_t(x.size()), -1);
        CoordIndex out_idx(z.coords);
        for (std::int64_t i = 0; i < x.size(); ++i) {
            auto o = out_idx.lookup(x.coords[std::size_t(i)]);
            embed_[std::size_t(i)] = o ? *o : -1;
            if (o)
                for (std::int64_t ch = 0; ch < x.channels(); ++ch)
                    z.features(std::int64_t(*o), ch) += x.features(i, ch);
        }
        pre_relu2_ = z;
        return relu(pre_relu2_);
    }

    Matrix<S> backward(const Matrix<S>& d_out) override {
        auto d_pre2 = relu_backward(pre_relu2_, d_out);
        Matrix<S> d_res(in_.size(), in_.channels());
        for (std::int64_t i = 0; i < in_.size(); ++i)
            if (embed_[std::size_t(i)] >= 0)
                for (std::int64_t ch = 0; ch < in_.channels(); ++ch)
                    d_res(i, ch) = d_pre2(embed_[std::size_t(i)], ch);
        auto ag2 = affine_backward(conv2_out_, scale2_, d_pre2);
        for (std::size_t i = 0; i < d_scale2_.size(); ++i) {
            d_scale2_[i] += ag2.d_scale[i];
            d_shift2_[i] += ag2.d_shift[i];
        }
        Matrix<S> d_h1;
        if (focal2_) {
            d_h1 = focal2_->backward(ag2.d_input);
        } else {
            auto cg2 = conv_backward(h1_, map2_, conv2_, ag2.d_input);
            for (std::size_t i = 0; i < d_w2_.size(); ++i) d_w2_[i] += cg2.d_w[i];
            d_h1 = std::move(cg2.d_input);
        }
        auto d_pre1 = relu_backward(pre_relu1_, d_h1);
        auto ag1 = affine_backward(conv1_out_, scale1_, d_pre1);
        for (std::size_t i = 0; i < d_scale1_.size(); ++i) {
            d_scale1_[i] += ag1.d_scale[i];
            d_shift1_[i] += ag1.d_shift[i];
        }
        auto cg1 = conv_backward(in_, map1_, conv1_, ag1.d_input);
        for (std::size_t i = 0; i < d_w1_.size(); ++i) d_w1_[i] += cg1.d_w[i];
        for (std::size_t i = 0; i < cg1.d_input.v.size(); ++i) cg1.d_input.v[i] += d_res.v[i];
        return std::move(cg1.d_input);
    }

    void collect_params(std::vector<ParamRef<S>>& out) override {
        out.push_back({this->name + ".w1", &conv1_.w, &d_w1_,
                       {std::uint64_t(conv1_.volume), std::uint64_t(conv1_.c_in), std::uint64_t(conv1_.c_out)}});
        out.push_back({this->name + ".scale1", &scale1_, &d_scale1_, {scale1_.size()}});
        out.push_back({this->name + ".shift1", &shift1_, &d_shift1_, {shift1_.size()}});
        if (focal2_) {
            focal2_->collect_params(out);
        } else {
            out.push_back({this->name + ".w2", &conv2_.w, &d_w2_,
                           {std::uint64_t(conv2_.volume), std::uint64_t(conv2_.c_in), std::uint64_t(conv2_.c_out)}});
        }
        out.push_back({this->name + ".scale2", &scale2_, &d_scale2_, {scale2_.size()}});
        out.push_back({this->name + ".shift2", &shift2_, &d_shift2_, {shift2_.size()}});
    }

    FocalUnit<S>* focal_unit() { return focal2_.get(); }

private:
    KernelSpec spec_;
    ConvWeights<S> conv1_, conv2_;
    std::unique_ptr<FocalUnit<S>> focal2_;
    std::vector<S> scale1_, shift1_, scale2_, shift2_;
    std::vector<S> d_w1_, d_w2_, d_scale1_, d_shift1_, d_scale2_, d_shift2_;

    SparseTensor<S> in_, conv1_out_, pre_relu1_, h1_, conv2_out_, pre_relu2_;
    KernelMap map1_, map2_;
    std::vector<std::int64_t> embed_;
};

template <class S>
class Backbone {
public:
    BackboneSpec spec;
    std::vector<std::unique_ptr<Layer<S>>> layers;

    SparseTensor<S> forward(const SparseTensor<S>& input, ForwardContext<S>& ctx) {
        if (input.stride != Shape3{1, 1, 1})
            throw std::invalid_argument("backbone: input must be at stride 1");
        SparseTensor<S> cur = input;
        for (auto& layer : layers) cur = layer->forward(cur, ctx);
        has_cache_ = true;
        return cur;
    }

    Matrix<S> backward(const Matrix<S>& d_output) {
        if (!has_cache_) throw std::logic_error("backbone: backward called without a cached forward pass");
        Matrix<S> d = d_output;
        for (auto it = layers.rbegin(); it != layers.rend(); ++it) d = (*it)->backward(d);
        return d;
    }

    std::vector<ParamRef<S>> params() {
        std::vector<ParamRef<S>> out;
        for (auto& layer : layers) layer->collect_params(out);
        return out;
    }

    void zero_grad() {
        for (auto& p : params())
            for (auto& g : *p.grad) g = S(0);
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        for (auto& p : params()) n += std::int64_t(p.value->size());
        return n;
    }

    std::vector<CheckpointRecord> to_checkpoint() {
        std::vector<CheckpointRecord> records;
        for (auto& p : params())
            records.push_back(make_record<S>(p.name, p.shape, p.value->data(), p.value->size()));
        return records;
    }

    void load_checkpoint(const std::vector<CheckpointRecord>& records, bool allow_missing = false) {
        std::unordered_map<std::string, const CheckpointRecord*> by_name;
        for (const auto& r : records) by_name[r.name] = &r;
        for (auto& p : params()) {
            auto it = by_name.find(p.name);
            if (it == by_name.end()) {
                if (allow_missing) continue;
                throw std::invalid_argument("checkpoint: missing record '" + p.name + "'");
            }
            auto values = record_values<S>(*it->second);
            if (values.size() != p.value->size())
                throw std::invalid_argument("checkpoint: size mismatch for '" + p.name + "'");
            *p.value = std::move(values);
        }
    }

private:
    bool has_cache_ = false;
};

template <class S>
Backbone<S> build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    Backbone<S> bb;
    bb.spec = spec;
    bb.layers.push_back(std::make_unique<ConvBlockLayer<S>>("stem", submanifold_spec(3), spec.in_channels,
                                                            spec.stem_channels, rng));
    std::int32_t c_prev = spec.stem_channels;
    for (std::size_t s = 0; s < 4; ++s) {
        const StageSpec& st = spec.stages[s];
        const std::string stage = "stage" + std::to_string(s + 1);
        if (st.downsample) {
            bb.layers.push_back(std::make_unique<ConvBlockLayer<S>>(stage + ".down", regular_spec(3, 2, 1), c_prev,
                                                                    st.out_channels, rng));
            c_prev = st.out_channels;
        }
        for (std::int32_t b = 0; b < st.n_subm_blocks; ++b) {
            const bool last = b == st.n_subm_blocks - 1;
            const std::string block = stage + ".block" + std::to_string(b);
            if (st.block_style == BlockStyle::plain) {
                if (last && st.focal_at_last_layer) {
                    bb.layers.push_back(std::make_unique<FocalBlockLayer<S>>(block + ".focal", c_prev,
                                                                             st.out_channels, spec,
                                                                             st.fusion_at_last_layer, rng));
                } else {
                    bb.layers.push_back(std::make_unique<ConvBlockLayer<S>>(block, submanifold_spec(3), c_prev,
                                                                            st.out_channels, rng));
                }
                c_prev = st.out_channels;
            } else {
                bb.layers.push_back(std::make_unique<ResidualBlockLayer<S>>(block, st.out_channels, spec,
                                                                            last && st.focal_at_last_layer,
                                                                            st.fusion_at_last_layer && last, rng));
                c_prev = st.out_channels;
            }
        }
    }
    return bb;
}

} // namespace fscnn
