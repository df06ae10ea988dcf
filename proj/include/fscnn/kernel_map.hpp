#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fscnn/sparse_tensor.hpp"

namespace fscnn {

enum class ConvMode { submanifold, regular, explicit_output };

struct KernelSpec {
    Shape3 kernel_size{3, 3, 3};
    Shape3 stride{1, 1, 1};
    Shape3 padding{1, 1, 1};
    ConvMode mode = ConvMode::submanifold;

    std::int32_t volume() const { return kernel_size[0] * kernel_size[1] * kernel_size[2]; }

    bool odd_kernel() const {
        return kernel_size[0] % 2 == 1 && kernel_size[1] % 2 == 1 && kernel_size[2] % 2 == 1;
    }

    void validate() const {
        for (int a = 0; a < 3; ++a) {
            if (kernel_size[a] <= 0) throw std::invalid_argument("kernel_size must be positive");
            if (stride[a] <= 0) throw std::invalid_argument("stride must be positive");
            if (padding[a] < 0) throw std::invalid_argument("padding must be non-negative");
        }
        if (mode != ConvMode::regular) {
            if (!odd_kernel())
                throw std::invalid_argument("even kernel sizes are only permitted in regular mode");
            if (stride != Shape3{1, 1, 1})
                throw std::invalid_argument("submanifold/explicit-output mode requires stride 1");
        }
    }
};

inline KernelSpec submanifold_spec(std::int32_t k = 3) {
    return KernelSpec{{k, k, k}, {1, 1, 1}, {(k - 1) / 2, (k - 1) / 2, (k - 1) / 2}, ConvMode::submanifold};
}

inline KernelSpec regular_spec(std::int32_t k = 3, std::int32_t s = 1, std::int32_t p = 1) {
    return KernelSpec{{k, k, k}, {s, s, s}, {p, p, p}, ConvMode::regular};
}

// Offset from an output-centered position; components are the distance along
// each spatial axis. The stored form is centered: for odd K per axis the
// range is [-(K-1)/2, +(K-1)/2], for even K it is [-(K/2-1), K/2].
struct KernelOffset {
    std::int32_t dx = 0, dy = 0, dz = 0;
    friend bool operator==(const KernelOffset&, const KernelOffset&) = default;
};

// Enumerates kernel offsets in lexicographic (kz, ky, kx) order, kz outermost.
inline std::vector<KernelOffset> offset_enumeration(const KernelSpec& spec) {
    spec.validate();
    const Shape3& k = spec.kernel_size;
    Shape3 base{(k[0] - 1) / 2, (k[1] - 1) / 2, (k[2] - 1) / 2};
    std::vector<KernelOffset> offsets;
    offsets.reserve(std::size_t(spec.volume()));
    for (std::int32_t dz = -base[2]; dz < k[2] - base[2]; ++dz)
        for (std::int32_t dy = -base[1]; dy < k[1] - base[1]; ++dy)
            for (std::int32_t dx = -base[0]; dx < k[0] - base[0]; ++dx)
                offsets.push_back({dx, dy, dz});
    return offsets;
}

// Index of the (0,0,0) offset within offset_enumeration; defined for odd kernels.
inline std::int32_t center_offset_index(const KernelSpec& spec) {
    if (!spec.odd_kernel())
        throw std::invalid_argument("center offset requires odd kernel sizes");
    const Shape3& k = spec.kernel_size;
    return ((k[2] - 1) / 2 * k[1] + (k[1] - 1) / 2) * k[0] + (k[0] - 1) / 2;
}

// Rulebook: for every kernel offset, the list of (input row, output row)
// pairs it connects, plus the canonical output coordinate set. Execution
// follows the gather convention: the pair (i, o) at offset k means input i
// sits at position(o) + k (stride 1) and contributes through weight w_k.
struct KernelMap {
    std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> pairs; // [offset] -> (in,out)
    std::vector<Coord4> out_coords;
    Shape3 out_spatial_shape{0, 0, 0};
    Shape3 out_stride{1, 1, 1};
    std::int32_t n_in = 0;
    std::int32_t n_out = 0;
    KernelSpec spec;

    std::int64_t pair_count() const {
        std::int64_t n = 0;
        for (const auto& p : pairs) n += std::int64_t(p.size());
        return n;
    }
};

template <class S>
KernelMap submanifold_map(const SparseTensor<S>& input, const KernelSpec& spec) {
    spec.validate();
    if (spec.mode != ConvMode::submanifold)
        throw std::invalid_argument("submanifold_map requires submanifold mode");
    const auto offsets = offset_enumeration(spec);
    const CoordIndex idx(input.coords);

    KernelMap map;
    map.spec = spec;
    map.out_coords = input.coords;
    map.out_spatial_shape = input.spatial_shape;
    map.out_stride = input.stride;
    map.n_in = std::int32_t(input.size());
    map.n_out = map.n_in;
    map.pairs.resize(offsets.size());
    for (std::size_t j = 0; j < offsets.size(); ++j) {
        const KernelOffset& k = offsets[j];
        auto& list = map.pairs[j];
        for (std::int32_t o = 0; o < map.n_out; ++o) {
            const Coord4& q = input.coords[std::size_t(o)];
            Coord4 p{q.batch, q.x + k.dx, q.y + k.dy, q.z + k.dz};
            if (auto i = idx.lookup(p)) list.emplace_back(*i, o);
        }
    }
    return map;
}

namespace detail {

// Output-centric support arithmetic: input position = stride*q + k0 - pad,
// where k0 is the zero-based form of the offset.
inline Shape3 conv_out_shape(const Shape3& in, const KernelSpec& spec) {
    Shape3 out;
    for (int a = 0; a < 3; ++a) {
        const std::int32_t n = in[a] + 2 * spec.padding[a] - spec.kernel_size[a];
        out[a] = n >= 0 ? n / spec.stride[a] + 1 : 0;
    }
    return out;
}

} // namespace detail

template <class S>
KernelMap regular_map(const SparseTensor<S>& input, const KernelSpec& spec) {
    spec.validate();
    if (spec.mode != ConvMode::regular)
        throw std::invalid_argument("regular_map requires regular mode");
    const auto offsets = offset_enumeration(spec);
    const Shape3& k = spec.kernel_size;
    const Shape3 base{(k[0] - 1) / 2, (k[1] - 1) / 2, (k[2] - 1) / 2};
    const Shape3 out_shape = detail::conv_out_shape(input.spatial_shape, spec);

    // Scatter candidate outputs from every input, then canonicalize; this
    // stays O(N * |K^d|) regardless of grid volume.
    std::unordered_set<Coord4, Coord4Hash> out_set;
    out_set.reserve(std::size_t(input.size()) * offsets.size() / 2 + 8);
    for (const Coord4& p : input.coords) {
        for (const KernelOffset& off : offsets) {
            const Shape3 k0{off.dx + base[0], off.dy + base[1], off.dz + base[2]};
            Coord4 q{p.batch, 0, 0, 0};
            bool ok = true;
            const std::int32_t pos[3] = {p.x, p.y, p.z};
            std::int32_t qv[3];
            for (int a = 0; a < 3 && ok; ++a) {
                const std::int32_t numer = pos[a] + spec.padding[a] - k0[a];
                if (numer < 0 || numer % spec.stride[a] != 0) { ok = false; break; }
                qv[a] = numer / spec.stride[a];
                if (qv[a] >= out_shape[a]) ok = false;
            }
            if (!ok) continue;
            q.x = qv[0]; q.y = qv[1]; q.z = qv[2];
            out_set.insert(q);
        }
    }

    KernelMap map;
    map.spec = spec;
    map.out_coords.assign(out_set.begin(), out_set.end());
    std::sort(map.out_coords.begin(), map.out_coords.end());
    map.out_spatial_shape = out_shape;
    for (int a = 0; a < 3; ++a) map.out_stride[a] = input.stride[a] * spec.stride[a];
    map.n_in = std::int32_t(input.size());
    map.n_out = std::int32_t(map.out_coords.size());

    const CoordIndex in_idx(input.coords);
    map.pairs.resize(offsets.size());
    for (std::size_t j = 0; j < offsets.size(); ++j) {
        const KernelOffset& off = offsets[j];
        const Shape3 k0{off.dx + base[0], off.dy + base[1], off.dz + base[2]};
        auto& list = map.pairs[j];
        for (std::int32_t o = 0; o < map.n_out; ++o) {
            const Coord4& q = map.out_coords[std::size_t(o)];
            Coord4 p{q.batch,
                     q.x * spec.stride[0] + k0[0] - spec.padding[0],
                     q.y * spec.stride[1] + k0[1] - spec.padding[1],
                     q.z * spec.stride[2] + k0[2] - spec.padding[2]};
            if (!in_bounds(p, input.spatial_shape)) continue;
            if (auto i = in_idx.lookup(p)) list.emplace_back(*i, o);
        }
    }
    return map;
}

// Builds the rulebook against a caller-supplied output set (focal path).
template <class S>
KernelMap explicit_output_map(const SparseTensor<S>& input, const std::vector<Coord4>& out_coords,
                              const KernelSpec& spec) {
    spec.validate();
    if (spec.mode != ConvMode::explicit_output)
        throw std::invalid_argument("explicit_output_map requires explicit_output mode");
    for (std::size_t i = 0; i < out_coords.size(); ++i) {
        if (i > 0 && !(out_coords[i - 1] < out_coords[i]))
            throw std::invalid_argument("explicit_output_map: out_coords not in canonical order");
        detail::check_coord_bounds(out_coords[i], input.spatial_shape, input.batch_size);
    }
    const auto offsets = offset_enumeration(spec);
    const CoordIndex in_idx(input.coords);

    KernelMap map;
    map.spec = spec;
    map.out_coords = out_coords;
    map.out_spatial_shape = input.spatial_shape;
    map.out_stride = input.stride;
    map.n_in = std::int32_t(input.size());
    map.n_out = std::int32_t(out_coords.size());
    map.pairs.resize(offsets.size());
    for (std::size_t j = 0; j < offsets.size(); ++j) {
        const KernelOffset& k = offsets[j];
        auto& list = map.pairs[j];
        for (std::int32_t o = 0; o < map.n_out; ++o) {
            const Coord4& q = map.out_coords[std::size_t(o)];
            Coord4 p{q.batch, q.x + k.dx, q.y + k.dy, q.z + k.dz};
            if (auto i = in_idx.lookup(p)) list.emplace_back(*i, o);
        }
    }
    return map;
}

// Text dump consumed by golden-file tests: `k=<j> in=<i> out=<o>`, offsets
// ascending, pairs in (out,in) order within each offset.
inline std::string dump_kernel_map(const KernelMap& map) {
    std::ostringstream os;
    for (std::size_t j = 0; j < map.pairs.size(); ++j)
        for (const auto& [i, o] : map.pairs[j])
            os << "k=" << j << " in=" << i << " out=" << o << '\n';
    return os.str();
}

} // namespace fscnn
