#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include "fscnn/focal_conv.hpp"
#include "fscnn/matrix.hpp"
#include "fscnn/sparse_tensor.hpp"

namespace fscnn {

// Dense H x W x C raster, row-major HWC.
template <class S>
struct Image {
    std::int32_t h = 0, w = 0, c = 0;
    std::vector<S> v;

    Image() = default;
    Image(std::int32_t hh, std::int32_t ww, std::int32_t cc)
        : h(hh), w(ww), c(cc), v(std::size_t(hh) * std::size_t(ww) * std::size_t(cc), S(0)) {}

    S& at(std::int32_t y, std::int32_t x, std::int32_t ch) {
        return v[(std::size_t(y) * std::size_t(w) + std::size_t(x)) * std::size_t(c) + std::size_t(ch)];
    }
    const S& at(std::int32_t y, std::int32_t x, std::int32_t ch) const {
        return v[(std::size_t(y) * std::size_t(w) + std::size_t(x)) * std::size_t(c) + std::size_t(ch)];
    }
};

// ---------------------------------------------------------------------------
// Dense 2-D building blocks for the image feature stack.
// ---------------------------------------------------------------------------

template <class S>
struct Conv2dWeights {
    std::int32_t c_in = 0, c_out = 0, kh = 0, kw = 0;
    std::vector<S> w; // [co][ci][ky][kx]

    Conv2dWeights() = default;
    Conv2dWeights(std::int32_t ci, std::int32_t co, std::int32_t k)
        : c_in(ci), c_out(co), kh(k), kw(k),
          w(std::size_t(ci) * std::size_t(co) * std::size_t(k) * std::size_t(k), S(0)) {}

    std::size_t index(std::int32_t co, std::int32_t ci, std::int32_t ky, std::int32_t kx) const {
        return ((std::size_t(co) * std::size_t(c_in) + std::size_t(ci)) * std::size_t(kh) + std::size_t(ky)) *
                   std::size_t(kw) + std::size_t(kx);
    }
    S& at(std::int32_t co, std::int32_t ci, std::int32_t ky, std::int32_t kx) { return w[index(co, ci, ky, kx)]; }
    const S& at(std::int32_t co, std::int32_t ci, std::int32_t ky, std::int32_t kx) const {
        return w[index(co, ci, ky, kx)];
    }
};

template <class S>
Image<S> conv2d_forward(const Image<S>& in, const Conv2dWeights<S>& w, std::int32_t stride, std::int32_t pad) {
    if (in.c != w.c_in) throw std::invalid_argument("conv2d: channel mismatch");
    const std::int32_t oh = (in.h + 2 * pad - w.kh) / stride + 1;
    const std::int32_t ow = (in.w + 2 * pad - w.kw) / stride + 1;
    if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: image too small for kernel");
    Image<S> out(oh, ow, w.c_out);
    for (std::int32_t y = 0; y < oh; ++y)
        for (std::int32_t x = 0; x < ow; ++x)
            for (std::int32_t co = 0; co < w.c_out; ++co) {
                S acc = S(0);
                for (std::int32_t ky = 0; ky < w.kh; ++ky) {
                    const std::int32_t iy = y * stride + ky - pad;
                    if (iy < 0 || iy >= in.h) continue;
                    for (std::int32_t kx = 0; kx < w.kw; ++kx) {
                        const std::int32_t ix = x * stride + kx - pad;
                        if (ix < 0 || ix >= in.w) continue;
                        for (std::int32_t ci = 0; ci < w.c_in; ++ci)
                            acc += in.at(iy, ix, ci) * w.at(co, ci, ky, kx);
                    }
                }
                out.at(y, x, co) = acc;
            }
    return out;
}

template <class S>
struct Conv2dGradients {
    Image<S> d_input;
    std::vector<S> d_w;
};

template <class S>
Conv2dGradients<S> conv2d_backward(const Image<S>& in, const Conv2dWeights<S>& w, const Image<S>& d_out,
                                   std::int32_t stride, std::int32_t pad) {
    Conv2dGradients<S> g;
    g.d_input = Image<S>(in.h, in.w, in.c);
    g.d_w.assign(w.w.size(), S(0));
    for (std::int32_t y = 0; y < d_out.h; ++y)
        for (std::int32_t x = 0; x < d_out.w; ++x)
            for (std::int32_t co = 0; co < w.c_out; ++co) {
                const S dv = d_out.at(y, x, co);
                if (dv == S(0)) continue;
                for (std::int32_t ky = 0; ky < w.kh; ++ky) {
                    const std::int32_t iy = y * stride + ky - pad;
                    if (iy < 0 || iy >= in.h) continue;
                    for (std::int32_t kx = 0; kx < w.kw; ++kx) {
                        const std::int32_t ix = x * stride + kx - pad;
                        if (ix < 0 || ix >= in.w) continue;
                        for (std::int32_t ci = 0; ci < w.c_in; ++ci) {
                            g.d_w[w.index(co, ci, ky, kx)] += in.at(iy, ix, ci) * dv;
                            g.d_input.at(iy, ix, ci) += w.at(co, ci, ky, kx) * dv;
                        }
                    }
                }
            }
    return g;
}

template <class S>
struct MaxPoolResult {
    Image<S> out;
    std::vector<std::int64_t> argmax; // flat input element index per output element
};

// 2x2 max pool, stride 2, no padding; ties resolve to the first element in
// scan order so the backward pass is deterministic.
template <class S>
MaxPoolResult<S> maxpool2_forward(const Image<S>& in) {
    MaxPoolResult<S> r;
    r.out = Image<S>(in.h / 2, in.w / 2, in.c);
    r.argmax.assign(r.out.v.size(), 0);
    for (std::int32_t y = 0; y < r.out.h; ++y)
        for (std::int32_t x = 0; x < r.out.w; ++x)
            for (std::int32_t ch = 0; ch < in.c; ++ch) {
                S best = in.at(2 * y, 2 * x, ch);
                std::int64_t best_idx = (std::int64_t(2 * y) * in.w + 2 * x) * in.c + ch;
                for (std::int32_t dy = 0; dy < 2; ++dy)
                    for (std::int32_t dx = 0; dx < 2; ++dx) {
                        const S val = in.at(2 * y + dy, 2 * x + dx, ch);
                        if (val > best) {
                            best = val;
                            best_idx = (std::int64_t(2 * y + dy) * in.w + (2 * x + dx)) * in.c + ch;
                        }
                    }
                r.out.at(y, x, ch) = best;
                r.argmax[(std::size_t(y) * std::size_t(r.out.w) + std::size_t(x)) * std::size_t(in.c) +
                         std::size_t(ch)] = best_idx;
            }
    return r;
}

template <class S>
Image<S> maxpool2_backward(std::int32_t in_h, std::int32_t in_w, std::int32_t channels,
                           const std::vector<std::int64_t>& argmax, const Image<S>& d_out) {
    Image<S> d_in(in_h, in_w, channels);
    for (std::size_t i = 0; i < d_out.v.size(); ++i) d_in.v[std::size_t(argmax[i])] += d_out.v[i];
    return d_in;
}

template <class S>
Image<S> crop2d(const Image<S>& in, std::int32_t h, std::int32_t w) {
    if (h > in.h || w > in.w) throw std::invalid_argument("crop2d: crop larger than image");
    Image<S> out(h, w, in.c);
    for (std::int32_t y = 0; y < h; ++y)
        for (std::int32_t x = 0; x < w; ++x)
            for (std::int32_t ch = 0; ch < in.c; ++ch) out.at(y, x, ch) = in.at(y, x, ch);
    return out;
}

template <class S>
Image<S> crop2d_backward(const Image<S>& d_out, std::int32_t in_h, std::int32_t in_w) {
    Image<S> d_in(in_h, in_w, d_out.c);
    for (std::int32_t y = 0; y < d_out.h; ++y)
        for (std::int32_t x = 0; x < d_out.w; ++x)
            for (std::int32_t ch = 0; ch < d_out.c; ++ch) d_in.at(y, x, ch) = d_out.at(y, x, ch);
    return d_in;
}

template <class S>
Image<S> affine2d(const Image<S>& in, const std::vector<S>& scale, const std::vector<S>& shift) {
    Image<S> out = in;
    for (std::size_t i = 0; i < out.v.size(); ++i) {
        const std::size_t ch = i % std::size_t(in.c);
        out.v[i] = out.v[i] * scale[ch] + shift[ch];
    }
    return out;
}

template <class S>
Image<S> relu2d(const Image<S>& in) {
    Image<S> out = in;
    for (S& x : out.v) x = x > S(0) ? x : S(0);
    return out;
}

// Per-pixel linear map (the channel-reduction MLP).
template <class S>
Image<S> linear2d(const Image<S>& in, const Matrix<S>& w, const std::vector<S>& bias) {
    if (w.rows != in.c) throw std::invalid_argument("linear2d: weight rows mismatch");
    Image<S> out(in.h, in.w, std::int32_t(w.cols));
    for (std::int32_t y = 0; y < in.h; ++y)
        for (std::int32_t x = 0; x < in.w; ++x)
            for (std::int64_t co = 0; co < w.cols; ++co) {
                S acc = bias.empty() ? S(0) : bias[std::size_t(co)];
                for (std::int64_t ci = 0; ci < w.rows; ++ci) acc += in.at(y, x, std::int32_t(ci)) * w(ci, co);
                out.at(y, x, std::int32_t(co)) = acc;
            }
    return out;
}

// ---------------------------------------------------------------------------
// Image feature extraction stack: conv-affine-relu (stride 2) + max-pool to
// quarter resolution, a residual block of three conv-affine-relu layers, and
// a channel-reduction MLP to the sparse feature width.
// ---------------------------------------------------------------------------

template <class S>
struct ImageStack {
    std::int32_t c_mid = 16;
    std::int32_t c_out = 4;
    Conv2dWeights<S> conv1;                   // 3x3 stride 2
    std::array<Conv2dWeights<S>, 3> res_conv; // 3x3 stride 1
    std::vector<S> scale1, shift1;
    std::array<std::vector<S>, 3> res_scale, res_shift;
    Matrix<S> mlp_w;
    std::vector<S> mlp_b;

    ImageStack() = default;
    ImageStack(std::int32_t mid, std::int32_t out) : c_mid(mid), c_out(out) {
        conv1 = Conv2dWeights<S>(3, mid, 3);
        for (auto& c : res_conv) c = Conv2dWeights<S>(mid, mid, 3);
        scale1.assign(std::size_t(mid), S(1));
        shift1.assign(std::size_t(mid), S(0));
        for (auto& s : res_scale) s.assign(std::size_t(mid), S(1));
        for (auto& s : res_shift) s.assign(std::size_t(mid), S(0));
        mlp_w = Matrix<S>(mid, out);
        mlp_b.assign(std::size_t(out), S(0));
    }
};

// Feature map at exactly floor-quarter resolution of the source image.
template <class S>
struct ImageFeatureMap {
    Image<S> data;
    std::int32_t src_h = 0, src_w = 0;
};

template <class S>
struct ImageStackCache {
    Image<S> input;
    Image<S> conv1_out, aff1_out, relu1_out;
    MaxPoolResult<S> pool;
    Image<S> z0; // cropped pool output (residual block input)
    std::array<Image<S>, 3> res_in, res_conv_out, res_aff_out, res_relu_out;
    Image<S> block_out;
};

template <class S>
ImageFeatureMap<S> extract_image_features(const Image<S>& image, const ImageStack<S>& stack,
                                          ImageStackCache<S>* cache = nullptr) {
    if (image.h < 4 || image.w < 4) throw std::invalid_argument("extract_image_features: image smaller than 4x4");
    if (image.c != 3) throw std::invalid_argument("extract_image_features: expected 3-channel image");
    ImageStackCache<S> local;
    ImageStackCache<S>& c = cache ? *cache : local;
    c.input = image;
    c.conv1_out = conv2d_forward(image, stack.conv1, 2, 1);
    c.aff1_out = affine2d(c.conv1_out, stack.scale1, stack.shift1);
    c.relu1_out = relu2d(c.aff1_out);
    c.pool = maxpool2_forward(c.relu1_out);
    c.z0 = crop2d(c.pool.out, image.h / 4, image.w / 4);

    Image<S> cur = c.z0;
    for (int i = 0; i < 3; ++i) {
        c.res_in[std::size_t(i)] = cur;
        c.res_conv_out[std::size_t(i)] = conv2d_forward(cur, stack.res_conv[std::size_t(i)], 1, 1);
        c.res_aff_out[std::size_t(i)] =
            affine2d(c.res_conv_out[std::size_t(i)], stack.res_scale[std::size_t(i)], stack.res_shift[std::size_t(i)]);
        c.res_relu_out[std::size_t(i)] = relu2d(c.res_aff_out[std::size_t(i)]);
        cur = c.res_relu_out[std::size_t(i)];
    }
    c.block_out = cur;
    for (std::size_t i = 0; i < c.block_out.v.size(); ++i) c.block_out.v[i] += c.z0.v[i];

    ImageFeatureMap<S> fm;
    fm.data = linear2d(c.block_out, stack.mlp_w, stack.mlp_b);
    fm.src_h = image.h;
    fm.src_w = image.w;
    return fm;
}

template <class S>
struct ImageStackGradients {
    Conv2dWeights<S> d_conv1;
    std::array<Conv2dWeights<S>, 3> d_res_conv;
    std::vector<S> d_scale1, d_shift1;
    std::array<std::vector<S>, 3> d_res_scale, d_res_shift;
    Matrix<S> d_mlp_w;
    std::vector<S> d_mlp_b;
};

template <class S>
ImageStackGradients<S> image_stack_backward(const ImageStack<S>& stack, const ImageStackCache<S>& c,
                                            const Image<S>& d_feat) {
    ImageStackGradients<S> g;
    g.d_mlp_w = Matrix<S>(stack.mlp_w.rows, stack.mlp_w.cols);
    g.d_mlp_b.assign(stack.mlp_b.size(), S(0));

    Image<S> d_block(c.block_out.h, c.block_out.w, c.block_out.c);
    for (std::int32_t y = 0; y < d_feat.h; ++y)
        for (std::int32_t x = 0; x < d_feat.w; ++x)
            for (std::int64_t co = 0; co < stack.mlp_w.cols; ++co) {
                const S dv = d_feat.at(y, x, std::int32_t(co));
                g.d_mlp_b[std::size_t(co)] += dv;
                for (std::int64_t ci = 0; ci < stack.mlp_w.rows; ++ci) {
                    g.d_mlp_w(ci, co) += c.block_out.at(y, x, std::int32_t(ci)) * dv;
                    d_block.at(y, x, std::int32_t(ci)) += stack.mlp_w(ci, co) * dv;
                }
            }

    Image<S> d_z0 = d_block; // residual path
    Image<S> d_cur = d_block;
    for (int i = 2; i >= 0; --i) {
        const auto& aff_out = c.res_aff_out[std::size_t(i)];
        Image<S> d_aff = d_cur;
        for (std::size_t k = 0; k < d_aff.v.size(); ++k)
            if (!(aff_out.v[k] > S(0))) d_aff.v[k] = S(0);
        auto& dsc = g.d_res_scale[std::size_t(i)];
        auto& dsh = g.d_res_shift[std::size_t(i)];
        dsc.assign(std::size_t(stack.c_mid), S(0));
        dsh.assign(std::size_t(stack.c_mid), S(0));
        Image<S> d_conv_out = d_aff;
        const auto& conv_out = c.res_conv_out[std::size_t(i)];
        for (std::size_t k = 0; k < d_aff.v.size(); ++k) {
            const std::size_t ch = k % std::size_t(stack.c_mid);
            dsc[ch] += d_aff.v[k] * conv_out.v[k];
            dsh[ch] += d_aff.v[k];
            d_conv_out.v[k] = d_aff.v[k] * stack.res_scale[std::size_t(i)][ch];
        }
        auto cg = conv2d_backward(c.res_in[std::size_t(i)], stack.res_conv[std::size_t(i)], d_conv_out, 1, 1);
        g.d_res_conv[std::size_t(i)] = Conv2dWeights<S>(stack.c_mid, stack.c_mid, 3);
        g.d_res_conv[std::size_t(i)].w = std::move(cg.d_w);
        d_cur = std::move(cg.d_input);
    }
    for (std::size_t k = 0; k < d_cur.v.size(); ++k) d_cur.v[k] += d_z0.v[k];

    Image<S> d_pool_out = crop2d_backward(d_cur, c.pool.out.h, c.pool.out.w);
    Image<S> d_relu1 = maxpool2_backward(c.relu1_out.h, c.relu1_out.w, c.relu1_out.c, c.pool.argmax, d_pool_out);
    Image<S> d_aff1 = d_relu1;
    for (std::size_t k = 0; k < d_aff1.v.size(); ++k)
        if (!(c.aff1_out.v[k] > S(0))) d_aff1.v[k] = S(0);
    g.d_scale1.assign(std::size_t(stack.c_mid), S(0));
    g.d_shift1.assign(std::size_t(stack.c_mid), S(0));
    Image<S> d_conv1_out = d_aff1;
    for (std::size_t k = 0; k < d_aff1.v.size(); ++k) {
        const std::size_t ch = k % std::size_t(stack.c_mid);
        g.d_scale1[ch] += d_aff1.v[k] * c.conv1_out.v[k];
        g.d_shift1[ch] += d_aff1.v[k];
        d_conv1_out.v[k] = d_aff1.v[k] * stack.scale1[ch];
    }
    auto cg1 = conv2d_backward(c.input, stack.conv1, d_conv1_out, 2, 1);
    g.d_conv1 = Conv2dWeights<S>(3, stack.c_mid, 3);
    g.d_conv1.w = std::move(cg1.d_w);
    return g;
}

// ---------------------------------------------------------------------------
// Calibration, recorded point-cloud transforms, and voxel-to-pixel projection.
// ---------------------------------------------------------------------------

// 3x4 projection matrix, world meters -> homogeneous pixel coordinates.
struct CalibMatrix {
    std::array<double, 12> p{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};

    std::array<double, 3> project(const std::array<double, 3>& pt) const {
        std::array<double, 3> out;
        for (int r = 0; r < 3; ++r)
            out[std::size_t(r)] = p[std::size_t(4 * r)] * pt[0] + p[std::size_t(4 * r + 1)] * pt[1] +
                                  p[std::size_t(4 * r + 2)] * pt[2] + p[std::size_t(4 * r + 3)];
        return out;
    }
};

inline CalibMatrix read_calib(std::istream& is) {
    CalibMatrix m;
    for (auto& v : m.p)
        if (!(is >> v)) throw std::invalid_argument("calib: expected 12 whitespace-separated reals");
    return m;
}

inline CalibMatrix read_calib_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("calib: cannot open " + path);
    return read_calib(is);
}

struct FlipAxis { int axis = 0; };
struct ScaleBy { double factor = 1.0; };
struct RotateZ { double angle = 0.0; };
struct TranslateBy { std::array<double, 3> t{0, 0, 0}; };

using TransformStep = std::variant<FlipAxis, ScaleBy, RotateZ, TranslateBy>;

// Ordered invertible augmentations applied to the point cloud; projection
// reverses them (inverse steps, reverse order) to recover raw coordinates.
struct TransformRecord {
    std::vector<TransformStep> steps;

    static std::array<double, 3> apply_step(const TransformStep& s, std::array<double, 3> p, bool inverse) {
        if (const auto* f = std::get_if<FlipAxis>(&s)) {
            p[std::size_t(f->axis)] = -p[std::size_t(f->axis)];
        } else if (const auto* sc = std::get_if<ScaleBy>(&s)) {
            const double f2 = inverse ? 1.0 / sc->factor : sc->factor;
            for (auto& x : p) x *= f2;
        } else if (const auto* r = std::get_if<RotateZ>(&s)) {
            const double a = inverse ? -r->angle : r->angle;
            const double ca = std::cos(a), sa = std::sin(a);
            const double nx = ca * p[0] - sa * p[1];
            const double ny = sa * p[0] + ca * p[1];
            p[0] = nx;
            p[1] = ny;
        } else if (const auto* t = std::get_if<TranslateBy>(&s)) {
            for (int a = 0; a < 3; ++a) p[std::size_t(a)] += inverse ? -t->t[std::size_t(a)] : t->t[std::size_t(a)];
        }
        return p;
    }

    std::array<double, 3> apply(std::array<double, 3> p) const {
        for (const auto& s : steps) p = apply_step(s, p, false);
        return p;
    }

    std::array<double, 3> apply_inverse(std::array<double, 3> p) const {
        for (auto it = steps.rbegin(); it != steps.rend(); ++it) p = apply_step(*it, p, true);
        return p;
    }
};

template <class S>
struct CameraView {
    ImageFeatureMap<S> features;
    CalibMatrix calib;
};

// A view before feature extraction (what the harness loads from disk).
template <class S>
struct RawImageView {
    Image<S> image;
    CalibMatrix calib;
};

// One bilinear sample into a view's quarter-resolution feature map.
struct BilinearSample {
    std::int32_t view = -1; // -1: invalid row
    std::int32_t y0 = 0, x0 = 0;
    double fy = 0, fx = 0; // fractional offsets within the corner cell
};

template <class S>
struct ProjectionResult {
    Matrix<S> rows;
    std::vector<std::uint8_t> valid;
    std::vector<BilinearSample> samples;
};

namespace detail {

template <class S>
bool sample_view(const ImageFeatureMap<S>& fm, double u, double v, BilinearSample& out) {
    // pixel-center alignment at quarter resolution
    const double fu = u / 4.0 - 0.5;
    const double fv = v / 4.0 - 0.5;
    const std::int32_t hq = fm.data.h, wq = fm.data.w;
    if (!(fu >= 0.0 && fu <= double(wq - 1) && fv >= 0.0 && fv <= double(hq - 1))) return false;
    std::int32_t x0 = std::int32_t(std::floor(fu));
    std::int32_t y0 = std::int32_t(std::floor(fv));
    x0 = std::min(x0, std::max(wq - 2, 0));
    y0 = std::min(y0, std::max(hq - 2, 0));
    out.x0 = x0;
    out.y0 = y0;
    out.fx = fu - double(x0);
    out.fy = fv - double(y0);
    return true;
}

} // namespace detail

// Projects voxel centers (stride-aware) through the recorded-transform
// inverse and each view's calibration; the first view with positive depth
// and an in-bounds quarter-resolution pixel supplies bilinear features.
// Invalid rows get zero features and a false flag.
template <class S>
ProjectionResult<S> project_coords(const std::vector<Coord4>& coords, const Shape3& stride,
                                   const std::array<double, 3>& voxel_size, const std::array<double, 3>& origin,
                                   const TransformRecord& rec, const std::vector<CameraView<S>>& views) {
    const std::int32_t c = views.empty() ? 0 : views.front().features.data.c;
    ProjectionResult<S> res;
    res.rows = Matrix<S>(std::int64_t(coords.size()), c);
    res.valid.assign(coords.size(), 0);
    res.samples.assign(coords.size(), BilinearSample{});
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const Coord4& cd = coords[i];
        std::array<double, 3> p{origin[0] + (double(cd.x) + 0.5) * voxel_size[0] * double(stride[0]),
                                origin[1] + (double(cd.y) + 0.5) * voxel_size[1] * double(stride[1]),
                                origin[2] + (double(cd.z) + 0.5) * voxel_size[2] * double(stride[2])};
        p = rec.apply_inverse(p);
        for (std::size_t vi = 0; vi < views.size(); ++vi) {
            const auto hom = views[vi].calib.project(p);
            if (!(hom[2] > 0)) continue;
            const double u = hom[0] / hom[2];
            const double v = hom[1] / hom[2];
            BilinearSample smp;
            if (!detail::sample_view(views[vi].features, u, v, smp)) continue;
            smp.view = std::int32_t(vi);
            res.samples[i] = smp;
            res.valid[i] = 1;
            const Image<S>& fm = views[vi].features.data;
            const double w00 = (1 - smp.fy) * (1 - smp.fx), w01 = (1 - smp.fy) * smp.fx;
            const double w10 = smp.fy * (1 - smp.fx), w11 = smp.fy * smp.fx;
            const std::int32_t y1 = std::min(smp.y0 + 1, fm.h - 1);
            const std::int32_t x1 = std::min(smp.x0 + 1, fm.w - 1);
            for (std::int32_t ch = 0; ch < c; ++ch) {
                res.rows(std::int64_t(i), ch) =
                    S(w00 * double(fm.at(smp.y0, smp.x0, ch)) + w01 * double(fm.at(smp.y0, x1, ch)) +
                      w10 * double(fm.at(y1, smp.x0, ch)) + w11 * double(fm.at(y1, x1, ch)));
            }
            break;
        }
    }
    return res;
}

template <class S>
ProjectionResult<S> project_voxels(const SparseTensor<S>& t, const std::array<double, 3>& voxel_size,
                                   const std::array<double, 3>& origin, const TransformRecord& rec,
                                   const std::vector<CameraView<S>>& views) {
    return project_coords<S>(t.coords, t.stride, voxel_size, origin, rec, views);
}

// Scatters row gradients back into per-view feature-map gradients through the
// recorded bilinear weights.
template <class S>
void project_rows_backward(const ProjectionResult<S>& proj, const std::vector<CameraView<S>>& views,
                           const Matrix<S>& d_rows, std::vector<Image<S>>& d_feature_maps) {
    if (d_feature_maps.size() != views.size()) {
        d_feature_maps.clear();
        for (const auto& view : views)
            d_feature_maps.emplace_back(view.features.data.h, view.features.data.w, view.features.data.c);
    }
    for (std::size_t i = 0; i < proj.samples.size(); ++i) {
        if (!proj.valid[i]) continue;
        const BilinearSample& smp = proj.samples[i];
        Image<S>& dm = d_feature_maps[std::size_t(smp.view)];
        const std::int32_t y1 = std::min(smp.y0 + 1, dm.h - 1);
        const std::int32_t x1 = std::min(smp.x0 + 1, dm.w - 1);
        const double w00 = (1 - smp.fy) * (1 - smp.fx), w01 = (1 - smp.fy) * smp.fx;
        const double w10 = smp.fy * (1 - smp.fx), w11 = smp.fy * smp.fx;
        for (std::int32_t ch = 0; ch < dm.c; ++ch) {
            const S dv = d_rows(std::int64_t(i), ch);
            dm.at(smp.y0, smp.x0, ch) += S(w00) * dv;
            dm.at(smp.y0, x1, ch) += S(w01) * dv;
            dm.at(y1, smp.x0, ch) += S(w10) * dv;
            dm.at(y1, x1, ch) += S(w11) * dv;
        }
    }
}

// ---------------------------------------------------------------------------
// Fusion focal convolution: image rows are summed into the importance-branch
// input, and projected image features are added to output rows in scope.
// ---------------------------------------------------------------------------

enum class FusionScope { important, all };

template <class S>
struct FusedFocalResult {
    FocalForwardResult<S> focal;
    SparseTensor<S> branch_input;        // input features + image rows
    std::vector<std::uint8_t> fused_out; // out rows that received image features
};

// `sample_out_rows(coords) -> Matrix` supplies projected image features for
// the generated output set (rows in scope are fused by summation).
template <class S, class RowSampler>
FusedFocalResult<S> fuse_focal_forward(const SparseTensor<S>& input, const ConvWeights<S>& weights,
                                       const ConvWeights<S>& branch_weights, const KernelSpec& main_spec,
                                       const KernelSpec& branch_spec, const FocalConvOptions& opt,
                                       FusionScope scope, const Matrix<S>& image_rows_in,
                                       RowSampler&& sample_out_rows) {
    if (image_rows_in.rows != input.size() || image_rows_in.cols != input.channels())
        throw std::invalid_argument("fuse_focal_forward: image row shape mismatch");

    FusedFocalResult<S> res;
    res.branch_input = input;
    for (std::size_t i = 0; i < res.branch_input.features.v.size(); ++i)
        res.branch_input.features.v[i] += image_rows_in.v[i];

    // Focal pipeline with the fused branch input driving importance only.
    auto& f = res.focal;
    f.sub_map = submanifold_map(res.branch_input, branch_spec);
    f.importance = predict_importance(res.branch_input, f.sub_map, branch_weights, main_spec);
    f.selection = opt.topk ? select_topk(f.importance, opt.top_k_ratio)
                           : select_important(f.importance, opt.tau);
    const auto offsets = offset_enumeration(main_spec);
    if (opt.restrict_to_input) restrict_dynamic_shapes_to_input(f.selection, input, offsets);
    auto out_coords = focal_output_coords(input, f.selection, main_spec);
    KernelSpec explicit_spec = main_spec;
    explicit_spec.mode = ConvMode::explicit_output;
    f.out_map = explicit_output_map(input, out_coords, explicit_spec);
    if (opt.attention) {
        f.attention_scales = f.importance.center_scores();
        auto scaled = scale_rows(input, f.attention_scales);
        f.output = conv_forward(scaled, f.out_map, weights);
    } else {
        f.output = conv_forward(input, f.out_map, weights);
    }

    // Fusion scope: rows from the important-dilation part of the output set
    // (or every row under the "all" ablation).
    res.fused_out.assign(std::size_t(f.output.size()), scope == FusionScope::all ? 1 : 0);
    if (scope == FusionScope::important) {
        std::unordered_set<Coord4, Coord4Hash> dilated;
        for (std::size_t r = 0; r < f.selection.important_rows.size(); ++r) {
            const Coord4& p = input.coords[std::size_t(f.selection.important_rows[r])];
            for (std::int32_t j : f.selection.dynamic_shapes[r]) {
                const KernelOffset& k = offsets[std::size_t(j)];
                Coord4 q{p.batch, p.x + k.dx, p.y + k.dy, p.z + k.dz};
                if (in_bounds(q, input.spatial_shape)) dilated.insert(q);
            }
        }
        for (std::int64_t o = 0; o < f.output.size(); ++o)
            if (dilated.count(f.output.coords[std::size_t(o)])) res.fused_out[std::size_t(o)] = 1;
    }

    Matrix<S> out_rows = sample_out_rows(f.output.coords);
    if (out_rows.rows != f.output.size() || out_rows.cols != f.output.channels())
        throw std::invalid_argument("fuse_focal_forward: sampled output row shape mismatch");
    for (std::int64_t o = 0; o < f.output.size(); ++o) {
        if (!res.fused_out[std::size_t(o)]) continue;
        S* row = f.output.features.row(o);
        for (std::int64_t ch = 0; ch < f.output.channels(); ++ch) row[ch] += out_rows(o, ch);
    }
    return res;
}

template <class S>
struct FusedFocalGradients {
    Matrix<S> d_input;
    std::vector<S> d_w;
    std::vector<S> d_bias;
    std::vector<S> d_branch_w;
    std::vector<S> d_branch_bias;
    Matrix<S> d_image_rows_in;  // gradient into the input-side projected rows
    Matrix<S> d_image_rows_out; // gradient into the output-side projected rows
};

template <class S>
FusedFocalGradients<S> fuse_focal_backward(const SparseTensor<S>& input, const ConvWeights<S>& weights,
                                           const ConvWeights<S>& branch_weights, const FusedFocalResult<S>& res,
                                           const Matrix<S>& d_output, const std::vector<S>& d_center_loss = {}) {
    const auto& f = res.focal;
    FusedFocalGradients<S> g;

    // Output fusion is additive: fused rows pass their gradient to the image
    // side unchanged, and the full gradient continues into the convolution.
    g.d_image_rows_out = Matrix<S>(d_output.rows, d_output.cols);
    for (std::int64_t o = 0; o < d_output.rows; ++o)
        if (res.fused_out[std::size_t(o)])
            for (std::int64_t ch = 0; ch < d_output.cols; ++ch) g.d_image_rows_out(o, ch) = d_output(o, ch);

    ConvGradients<S> main_g;
    std::vector<S> d_center(std::size_t(input.size()), S(0));
    const bool attention = !f.attention_scales.empty();
    if (attention) {
        auto scaled = scale_rows(input, f.attention_scales);
        main_g = conv_backward(scaled, f.out_map, weights, d_output);
        auto sg = scale_rows_backward(input, f.attention_scales, main_g.d_input);
        g.d_input = std::move(sg.d_input);
        d_center = std::move(sg.d_scales);
    } else {
        main_g = conv_backward(input, f.out_map, weights, d_output);
        g.d_input = std::move(main_g.d_input);
    }
    g.d_w = std::move(main_g.d_w);
    g.d_bias = std::move(main_g.d_bias);

    if (!d_center_loss.empty())
        for (std::size_t i = 0; i < d_center.size(); ++i) d_center[i] += d_center_loss[i];

    Matrix<S> d_logits(f.importance.values.rows, f.importance.values.cols);
    const std::int32_t j0 = f.importance.center_index;
    for (std::int64_t i = 0; i < d_logits.rows; ++i) {
        const S v = f.importance.values(i, j0);
        d_logits(i, j0) = d_center[std::size_t(i)] * v * (S(1) - v);
    }
    auto branch_g = conv_backward(res.branch_input, f.sub_map, branch_weights, d_logits);
    g.d_branch_w = std::move(branch_g.d_w);
    g.d_branch_bias = std::move(branch_g.d_bias);
    // branch input = lidar features + image rows: gradient flows to both
    g.d_image_rows_in = branch_g.d_input;
    for (std::size_t i = 0; i < g.d_input.v.size(); ++i) g.d_input.v[i] += branch_g.d_input.v[i];
    return g;
}

// ---------------------------------------------------------------------------
// Ground-truth-sampling image alignment: paste a raster crop.
// ---------------------------------------------------------------------------

struct Rect {
    std::int32_t x = 0, y = 0, w = 0, h = 0;
};

template <class S>
void paste_box_crop(Image<S>& image, const Rect& region, const Image<S>& source_crop) {
    if (region.x < 0 || region.y < 0 || region.w < 0 || region.h < 0 || region.x + region.w > image.w ||
        region.y + region.h > image.h)
        throw std::out_of_range("paste_box_crop: region outside image");
    if (source_crop.h != region.h || source_crop.w != region.w || source_crop.c != image.c)
        throw std::out_of_range("paste_box_crop: source crop does not match region");
    for (std::int32_t y = 0; y < region.h; ++y)
        for (std::int32_t x = 0; x < region.w; ++x)
            for (std::int32_t ch = 0; ch < image.c; ++ch)
                image.at(region.y + y, region.x + x, ch) = source_crop.at(y, x, ch);
}

// ---------------------------------------------------------------------------
// PGM/PPM ingestion (P2/P3 ascii, P5/P6 binary), values scaled to [0,1].
// ---------------------------------------------------------------------------

namespace detail {

inline int next_pnm_int(std::istream& is) {
    int c = is.peek();
    while (c == '#' || std::isspace(c)) {
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else {
            is.get();
        }
        c = is.peek();
    }
    int value = 0;
    if (!(is >> value)) throw std::invalid_argument("pnm: truncated header");
    return value;
}

} // namespace detail

template <class S>
Image<S> read_pnm(std::istream& is) {
    std::string magic;
    if (!(is >> magic)) throw std::invalid_argument("pnm: missing magic");
    const bool gray = magic == "P2" || magic == "P5";
    const bool rgb = magic == "P3" || magic == "P6";
    if (!gray && !rgb) throw std::invalid_argument("pnm: unsupported magic '" + magic + "'");
    const bool binary = magic == "P5" || magic == "P6";
    const int w = detail::next_pnm_int(is);
    const int h = detail::next_pnm_int(is);
    const int maxval = detail::next_pnm_int(is);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw std::invalid_argument("pnm: unsupported dimensions or maxval");
    Image<S> img(h, w, 3);
    const int nc = gray ? 1 : 3;
    if (binary) {
        is.get(); // single whitespace after maxval
        std::vector<unsigned char> buf(std::size_t(w) * std::size_t(h) * std::size_t(nc));
        is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
        if (std::size_t(is.gcount()) != buf.size()) throw std::invalid_argument("pnm: truncated pixel data");
        for (std::int32_t y = 0; y < h; ++y)
            for (std::int32_t x = 0; x < w; ++x)
                for (std::int32_t ch = 0; ch < 3; ++ch) {
                    const std::size_t src = (std::size_t(y) * std::size_t(w) + std::size_t(x)) * std::size_t(nc) +
                                            std::size_t(gray ? 0 : ch);
                    img.at(y, x, ch) = S(double(buf[src]) / double(maxval));
                }
    } else {
        for (std::int32_t y = 0; y < h; ++y)
            for (std::int32_t x = 0; x < w; ++x)
                for (std::int32_t ch = 0; ch < nc; ++ch) {
                    const int value = detail::next_pnm_int(is);
                    if (gray)
                        for (std::int32_t k = 0; k < 3; ++k) img.at(y, x, k) = S(double(value) / double(maxval));
                    else
                        img.at(y, x, ch) = S(double(value) / double(maxval));
                }
    }
    return img;
}

template <class S>
Image<S> read_pnm_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("pnm: cannot open " + path);
    return read_pnm<S>(is);
}

template <class S>
void write_ppm(std::ostream& os, const Image<S>& img) {
    os << "P6\n" << img.w << ' ' << img.h << "\n255\n";
    for (std::int32_t y = 0; y < img.h; ++y)
        for (std::int32_t x = 0; x < img.w; ++x)
            for (std::int32_t ch = 0; ch < 3; ++ch) {
                const double v = std::clamp(double(img.at(y, x, ch % img.c)), 0.0, 1.0);
                os.put(char(std::lround(v * 255.0)));
            }
}

} // namespace fscnn
