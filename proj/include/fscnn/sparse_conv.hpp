#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fscnn/kernel_map.hpp"
#include "fscnn/sparse_tensor.hpp"

namespace fscnn {

// Convolution weights w[offset][c_in][c_out] plus optional bias. The offset
// axis indexes offset_enumeration of the owning KernelSpec.
template <class S>
struct ConvWeights {
    std::int32_t volume = 0;
    std::int32_t c_in = 0;
    std::int32_t c_out = 0;
    std::vector<S> w;
    std::vector<S> bias; // empty means no bias

    ConvWeights() = default;
    ConvWeights(std::int32_t vol, std::int32_t ci, std::int32_t co, bool with_bias = false)
        : volume(vol), c_in(ci), c_out(co),
          w(std::size_t(vol) * std::size_t(ci) * std::size_t(co), S(0)),
          bias(with_bias ? std::size_t(co) : 0, S(0)) {}

    std::size_t index(std::int32_t j, std::int32_t ci, std::int32_t co) const {
        return (std::size_t(j) * std::size_t(c_in) + std::size_t(ci)) * std::size_t(c_out) + std::size_t(co);
    }
    S& at(std::int32_t j, std::int32_t ci, std::int32_t co) { return w[index(j, ci, co)]; }
    const S& at(std::int32_t j, std::int32_t ci, std::int32_t co) const { return w[index(j, ci, co)]; }
    bool has_bias() const { return !bias.empty(); }
};

template <class S>
struct ConvGradients {
    std::vector<S> d_w;
    std::vector<S> d_bias;
    Matrix<S> d_input;
};

namespace detail {

template <class S>
void check_conv_operands(const SparseTensor<S>& input, const KernelMap& map, const ConvWeights<S>& weights) {
    if (std::int32_t(input.size()) != map.n_in)
        throw std::invalid_argument("conv: kernel map was built for a different input size");
    if (weights.volume != std::int32_t(map.pairs.size()))
        throw std::invalid_argument("conv: weight volume does not match kernel map");
    if (weights.c_in != input.channels())
        throw std::invalid_argument("conv: weight c_in does not match input channels");
}

} // namespace detail

// Gather-GEMM-scatter execution of the rulebook. Offsets run sequentially in
// ascending order; within one offset every output row appears at most once,
// so the pair loop is safe to parallelize and results are bit-identical for
// any thread count.
template <class S>
SparseTensor<S> conv_forward(const SparseTensor<S>& input, const KernelMap& map, const ConvWeights<S>& weights) {
    detail::check_conv_operands(input, map, weights);
    SparseTensor<S> out;
    out.coords = map.out_coords;
    out.spatial_shape = map.out_spatial_shape;
    out.stride = map.out_stride;
    out.batch_size = input.batch_size;
    out.features = Matrix<S>(map.n_out, weights.c_out);
    if (weights.has_bias()) {
        for (std::int32_t o = 0; o < map.n_out; ++o) {
            S* row = out.features.row(o);
            for (std::int32_t co = 0; co < weights.c_out; ++co) row[co] = weights.bias[std::size_t(co)];
        }
    }
    const std::int32_t c_in = weights.c_in, c_out = weights.c_out;
    for (std::size_t j = 0; j < map.pairs.size(); ++j) {
        const auto& list = map.pairs[j];
        const S* wj = weights.w.data() + weights.index(std::int32_t(j), 0, 0);
        const std::int64_t n = std::int64_t(list.size());
#pragma omp parallel for schedule(static) if (n * c_in * c_out > 4096)
        for (std::int64_t p = 0; p < n; ++p) {
            const auto [i, o] = list[std::size_t(p)];
            const S* in_row = input.features.row(i);
            S* out_row = out.features.row(o);
            for (std::int32_t co = 0; co < c_out; ++co) {
                S acc = S(0);
                for (std::int32_t ci = 0; ci < c_in; ++ci)
                    acc += in_row[ci] * wj[std::size_t(ci) * std::size_t(c_out) + std::size_t(co)];
                out_row[co] += acc;
            }
        }
    }
    return out;
}

// Reverse mode over the same pairs:
//   d_input[i] += d_out[o] . w[j]^T,  d_w[j] += in[i]^T (x) d_out[o],
//   d_bias = column sum of d_output.
// d_w entries are each reduced over pairs in list order so the result does
// not depend on thread count.
template <class S>
ConvGradients<S> conv_backward(const SparseTensor<S>& input, const KernelMap& map,
                               const ConvWeights<S>& weights, const Matrix<S>& d_output) {
    detail::check_conv_operands(input, map, weights);
    if (d_output.rows != map.n_out || d_output.cols != weights.c_out)
        throw std::invalid_argument("conv_backward: d_output shape mismatch");

    ConvGradients<S> g;
    g.d_w.assign(weights.w.size(), S(0));
    g.d_input = Matrix<S>(input.size(), weights.c_in);
    const std::int32_t c_in = weights.c_in, c_out = weights.c_out;

    for (std::size_t j = 0; j < map.pairs.size(); ++j) {
        const auto& list = map.pairs[j];
        const std::int64_t n = std::int64_t(list.size());
        const S* wj = weights.w.data() + weights.index(std::int32_t(j), 0, 0);
        S* gwj = g.d_w.data() + weights.index(std::int32_t(j), 0, 0);
#pragma omp parallel for schedule(static) if (n * c_in * c_out > 4096)
        for (std::int64_t p = 0; p < n; ++p) {
            const auto [i, o] = list[std::size_t(p)];
            const S* dout = d_output.row(o);
            S* din = g.d_input.row(i);
            for (std::int32_t ci = 0; ci < c_in; ++ci) {
                S acc = S(0);
                for (std::int32_t co = 0; co < c_out; ++co)
                    acc += dout[co] * wj[std::size_t(ci) * std::size_t(c_out) + std::size_t(co)];
                din[ci] += acc;
            }
        }
        const std::int64_t entries = std::int64_t(c_in) * std::int64_t(c_out);
#pragma omp parallel for schedule(static) if (entries > 64 && n > 16)
        for (std::int64_t e = 0; e < entries; ++e) {
            const std::int32_t ci = std::int32_t(e / c_out);
            const std::int32_t co = std::int32_t(e % c_out);
            S acc = S(0);
            for (std::int64_t p = 0; p < n; ++p) {
                const auto [i, o] = list[std::size_t(p)];
                acc += input.features(i, ci) * d_output(o, co);
            }
            gwj[std::size_t(e)] += acc;
        }
    }

    if (weights.has_bias()) {
        g.d_bias.assign(std::size_t(c_out), S(0));
        for (std::int32_t co = 0; co < c_out; ++co) {
            S acc = S(0);
            for (std::int64_t o = 0; o < d_output.rows; ++o) acc += d_output(o, co);
            g.d_bias[std::size_t(co)] = acc;
        }
    }
    return g;
}

// Naive full-grid convolution with the module's offset/stride conventions
// (input position = stride*q + k0 - pad, zero padding). Ground-truth
// comparator for every sparse execution path.
template <class S>
DenseGrid<S> dense_oracle(const DenseGrid<S>& input, const ConvWeights<S>& weights, const KernelSpec& spec) {
    spec.validate();
    if (weights.c_in != input.channels)
        throw std::invalid_argument("dense_oracle: channel mismatch");
    if (weights.volume != spec.volume())
        throw std::invalid_argument("dense_oracle: weight volume mismatch");
    const Shape3 out_shape = detail::conv_out_shape(input.shape, spec);
    check_dense_capacity(input.batch, weights.c_out, out_shape);
    DenseGrid<S> out(input.batch, weights.c_out, out_shape);

    const auto offsets = offset_enumeration(spec);
    const Shape3& k = spec.kernel_size;
    const Shape3 base{(k[0] - 1) / 2, (k[1] - 1) / 2, (k[2] - 1) / 2};

    for (std::int32_t b = 0; b < input.batch; ++b)
        for (std::int32_t qx = 0; qx < out_shape[0]; ++qx)
            for (std::int32_t qy = 0; qy < out_shape[1]; ++qy)
                for (std::int32_t qz = 0; qz < out_shape[2]; ++qz)
                    for (std::int32_t co = 0; co < weights.c_out; ++co) {
                        S acc = weights.has_bias() ? weights.bias[std::size_t(co)] : S(0);
                        for (std::size_t j = 0; j < offsets.size(); ++j) {
                            const KernelOffset& off = offsets[j];
                            const std::int32_t px = qx * spec.stride[0] + off.dx + base[0] - spec.padding[0];
                            const std::int32_t py = qy * spec.stride[1] + off.dy + base[1] - spec.padding[1];
                            const std::int32_t pz = qz * spec.stride[2] + off.dz + base[2] - spec.padding[2];
                            if (px < 0 || px >= input.shape[0] || py < 0 || py >= input.shape[1] ||
                                pz < 0 || pz >= input.shape[2])
                                continue;
                            for (std::int32_t ci = 0; ci < weights.c_in; ++ci)
                                acc += input.at(b, ci, px, py, pz) * weights.at(std::int32_t(j), ci, co);
                        }
                        out.at(b, co, qx, qy, qz) = acc;
                    }
    return out;
}

// ---------------------------------------------------------------------------
// Pointwise / rowwise ops with matching backwards.
// ---------------------------------------------------------------------------

template <class S>
SparseTensor<S> relu(const SparseTensor<S>& t) {
    SparseTensor<S> out = t;
    for (S& v : out.features.v) v = v > S(0) ? v : S(0);
    return out;
}

template <class S>
Matrix<S> relu_backward(const SparseTensor<S>& input, const Matrix<S>& d_output) {
    if (!input.features.same_shape(d_output))
        throw std::invalid_argument("relu_backward: shape mismatch");
    Matrix<S> d_in(d_output.rows, d_output.cols);
    for (std::size_t i = 0; i < d_in.v.size(); ++i)
        d_in.v[i] = input.features.v[i] > S(0) ? d_output.v[i] : S(0);
    return d_in;
}

// Scales each feature row by a per-row scalar.
template <class S>
SparseTensor<S> scale_rows(const SparseTensor<S>& t, const std::vector<S>& scales) {
    if (std::int64_t(scales.size()) != t.size())
        throw std::invalid_argument("scale_rows: scale count does not match rows");
    SparseTensor<S> out = t;
    for (std::int64_t i = 0; i < t.size(); ++i) {
        S* row = out.features.row(i);
        for (std::int64_t j = 0; j < t.channels(); ++j) row[j] *= scales[std::size_t(i)];
    }
    return out;
}

template <class S>
struct ScaleRowsGradients {
    Matrix<S> d_input;
    std::vector<S> d_scales;
};

template <class S>
ScaleRowsGradients<S> scale_rows_backward(const SparseTensor<S>& input, const std::vector<S>& scales,
                                          const Matrix<S>& d_output) {
    if (!input.features.same_shape(d_output))
        throw std::invalid_argument("scale_rows_backward: shape mismatch");
    ScaleRowsGradients<S> g;
    g.d_input = Matrix<S>(d_output.rows, d_output.cols);
    g.d_scales.assign(std::size_t(d_output.rows), S(0));
    for (std::int64_t i = 0; i < d_output.rows; ++i) {
        S acc = S(0);
        for (std::int64_t j = 0; j < d_output.cols; ++j) {
            g.d_input(i, j) = d_output(i, j) * scales[std::size_t(i)];
            acc += d_output(i, j) * input.features(i, j);
        }
        g.d_scales[std::size_t(i)] = acc;
    }
    return g;
}

// Elementwise sum; both operands must share the exact canonical coord set.
template <class S>
SparseTensor<S> add(const SparseTensor<S>& a, const SparseTensor<S>& b) {
    if (a.coords != b.coords || a.channels() != b.channels())
        throw std::invalid_argument("add: operands are not coordinate-aligned");
    SparseTensor<S> out = a;
    for (std::size_t i = 0; i < out.features.v.size(); ++i) out.features.v[i] += b.features.v[i];
    return out;
}

// Rowwise linear map (1x1 convolution): out = in * W + b.
template <class S>
SparseTensor<S> mlp(const SparseTensor<S>& t, const Matrix<S>& w, const std::vector<S>& bias) {
    if (w.rows != t.channels())
        throw std::invalid_argument("mlp: weight rows do not match input channels");
    if (!bias.empty() && std::int64_t(bias.size()) != w.cols)
        throw std::invalid_argument("mlp: bias size does not match output channels");
    SparseTensor<S> out = t;
    out.features = Matrix<S>(t.size(), w.cols);
    for (std::int64_t i = 0; i < t.size(); ++i) {
        const S* in_row = t.features.row(i);
        S* out_row = out.features.row(i);
        for (std::int64_t co = 0; co < w.cols; ++co) {
            S acc = bias.empty() ? S(0) : bias[std::size_t(co)];
            for (std::int64_t ci = 0; ci < w.rows; ++ci) acc += in_row[ci] * w(ci, co);
            out_row[co] = acc;
        }
    }
    return out;
}

template <class S>
struct MlpGradients {
    Matrix<S> d_input;
    Matrix<S> d_w;
    std::vector<S> d_bias;
};

template <class S>
MlpGradients<S> mlp_backward(const SparseTensor<S>& input, const Matrix<S>& w, const Matrix<S>& d_output) {
    if (d_output.rows != input.size() || d_output.cols != w.cols)
        throw std::invalid_argument("mlp_backward: d_output shape mismatch");
    MlpGradients<S> g;
    g.d_input = Matrix<S>(input.size(), w.rows);
    g.d_w = Matrix<S>(w.rows, w.cols);
    g.d_bias.assign(std::size_t(w.cols), S(0));
    for (std::int64_t i = 0; i < input.size(); ++i) {
        const S* dout = d_output.row(i);
        const S* in_row = input.features.row(i);
        S* din = g.d_input.row(i);
        for (std::int64_t ci = 0; ci < w.rows; ++ci) {
            S acc = S(0);
            for (std::int64_t co = 0; co < w.cols; ++co) acc += dout[co] * w(ci, co);
            din[ci] = acc;
        }
        for (std::int64_t ci = 0; ci < w.rows; ++ci)
            for (std::int64_t co = 0; co < w.cols; ++co) g.d_w(ci, co) += in_row[ci] * dout[co];
        for (std::int64_t co = 0; co < w.cols; ++co) g.d_bias[std::size_t(co)] += dout[co];
    }
    return g;
}

// Per-channel affine (scale + shift): the normalization-free stand-in for
// batch norm used throughout the backbone.
template <class S>
SparseTensor<S> affine(const SparseTensor<S>& t, const std::vector<S>& scale, const std::vector<S>& shift) {
    if (std::int64_t(scale.size()) != t.channels() || std::int64_t(shift.size()) != t.channels())
        throw std::invalid_argument("affine: parameter size does not match channels");
    SparseTensor<S> out = t;
    for (std::int64_t i = 0; i < t.size(); ++i) {
        S* row = out.features.row(i);
        for (std::int64_t j = 0; j < t.channels(); ++j)
            row[j] = row[j] * scale[std::size_t(j)] + shift[std::size_t(j)];
    }
    return out;
}

template <class S>
struct AffineGradients {
    Matrix<S> d_input;
    std::vector<S> d_scale;
    std::vector<S> d_shift;
};

template <class S>
AffineGradients<S> affine_backward(const SparseTensor<S>& input, const std::vector<S>& scale,
                                   const Matrix<S>& d_output) {
    if (!input.features.same_shape(d_output))
        throw std::invalid_argument("affine_backward: shape mismatch");
    AffineGradients<S> g;
    g.d_input = Matrix<S>(d_output.rows, d_output.cols);
    g.d_scale.assign(scale.size(), S(0));
    g.d_shift.assign(scale.size(), S(0));
    for (std::int64_t i = 0; i < d_output.rows; ++i)
        for (std::int64_t j = 0; j < d_output.cols; ++j) {
            g.d_input(i, j) = d_output(i, j) * scale[std::size_t(j)];
            g.d_scale[std::size_t(j)] += d_output(i, j) * input.features(i, j);
            g.d_shift[std::size_t(j)] += d_output(i, j);
        }
    return g;
}

template <class S>
S sigmoid(S x) {
    return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

} // namespace fscnn
