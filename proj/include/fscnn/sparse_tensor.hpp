#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "fscnn/coord.hpp"
#include "fscnn/matrix.hpp"

namespace fscnn {

// Sparse voxel tensor: unique coordinates in canonical (batch,z,y,x) order
// plus an N x C feature matrix. `stride` is the accumulated downsampling
// factor relative to the stride-1 grid; spatial_shape is the extent of the
// tensor's own grid. Immutable by convention once built.
template <class S>
struct SparseTensor {
    std::vector<Coord4> coords;
    Matrix<S> features;
    Shape3 spatial_shape{1, 1, 1};
    Shape3 stride{1, 1, 1};
    std::int32_t batch_size = 1;

    std::int64_t size() const { return std::int64_t(coords.size()); }
    std::int64_t channels() const { return features.cols; }
};

class CoordIndex {
public:
    CoordIndex() = default;

    explicit CoordIndex(const std::vector<Coord4>& coords) {
        map_.reserve(coords.size() * 2);
        for (std::size_t i = 0; i < coords.size(); ++i)
            map_.emplace(coords[i], std::int32_t(i));
    }

    std::optional<std::int32_t> lookup(const Coord4& c) const {
        auto it = map_.find(c);
        if (it == map_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t size() const { return map_.size(); }

private:
    std::unordered_map<Coord4, std::int32_t, Coord4Hash> map_;
};

namespace detail {

inline void check_coord_bounds(const Coord4& c, const Shape3& shape, std::int32_t batch_size) {
    if (c.batch < 0 || c.batch >= batch_size)
        throw std::out_of_range("coordinate batch index out of range");
    if (!in_bounds(c, shape))
        throw std::out_of_range("coordinate outside spatial_shape");
}

} // namespace detail

// Canonicalizes (sorts, deduplicates) an arbitrary coordinate/feature list.
// Duplicate coordinates sum their feature rows; accumulation order follows
// the original row order within each duplicate group, so results are
// deterministic.
template <class S>
SparseTensor<S> build(std::vector<Coord4> coords, Matrix<S> features,
                      const Shape3& spatial_shape, std::int32_t batch_size,
                      const Shape3& stride = {1, 1, 1}) {
    if (std::int64_t(coords.size()) != features.rows)
        throw std::invalid_argument("build: feature row count does not match coordinate count");
    for (const Coord4& c : coords)
        detail::check_coord_bounds(c, spatial_shape, batch_size);

    std::vector<std::int32_t> perm(coords.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::sort(perm.begin(), perm.end(), [&](std::int32_t a, std::int32_t b) {
        if (coords[std::size_t(a)] == coords[std::size_t(b)]) return a < b;
        return coords[std::size_t(a)] < coords[std::size_t(b)];
    });

    SparseTensor<S> out;
    out.spatial_shape = spatial_shape;
    out.stride = stride;
    out.batch_size = batch_size;
    out.coords.reserve(coords.size());

    const std::int64_t c_cols = features.cols;
    Matrix<S> packed(std::int64_t(coords.size()), c_cols);
    std::int64_t n = 0;
    for (std::size_t k = 0; k < perm.size(); ++k) {
        const Coord4& c = coords[std::size_t(perm[k])];
        const S* src = features.row(perm[k]);
        if (n > 0 && out.coords[std::size_t(n - 1)] == c) {
            S* dst = packed.row(n - 1);
            for (std::int64_t j = 0; j < c_cols; ++j) dst[j] += src[j];
        } else {
            out.coords.push_back(c);
            S* dst = packed.row(n);
            for (std::int64_t j = 0; j < c_cols; ++j) dst[j] = src[j];
            ++n;
        }
    }
    packed.rows = n;
    packed.v.resize(std::size_t(n * c_cols));
    out.features = std::move(packed);
    return out;
}

template <class S>
CoordIndex index(const SparseTensor<S>& t) {
    return CoordIndex(t.coords);
}

// Dense 5-D array [batch, C, X, Y, Z], row-major in that axis order.
template <class S>
struct DenseGrid {
    std::int32_t batch = 0, channels = 0;
    Shape3 shape{0, 0, 0};
    std::vector<S> v;

    DenseGrid() = default;
    DenseGrid(std::int32_t b, std::int32_t c, const Shape3& sh)
        : batch(b), channels(c), shape(sh),
          v(std::size_t(b) * std::size_t(c) * std::size_t(sh[0]) * std::size_t(sh[1]) * std::size_t(sh[2]), S(0)) {}

    std::size_t idx(std::int32_t b, std::int32_t c, std::int32_t x, std::int32_t y, std::int32_t z) const {
        return ((((std::size_t(b) * std::size_t(channels) + std::size_t(c)) * std::size_t(shape[0]) + std::size_t(x)) *
                     std::size_t(shape[1]) + std::size_t(y)) * std::size_t(shape[2]) + std::size_t(z));
    }
    S& at(std::int32_t b, std::int32_t c, std::int32_t x, std::int32_t y, std::int32_t z) { return v[idx(b, c, x, y, z)]; }
    const S& at(std::int32_t b, std::int32_t c, std::int32_t x, std::int32_t y, std::int32_t z) const { return v[idx(b, c, x, y, z)]; }
};

inline void check_dense_capacity(std::int64_t batch, std::int64_t channels, const Shape3& shape) {
    const std::int64_t entries = batch * channels * std::int64_t(shape[0]) * std::int64_t(shape[1]) * std::int64_t(shape[2]);
    if (entries > (std::int64_t(1) << 24))
        throw std::length_error("dense materialization exceeds 2^24 entry guard");
}

template <class S>
DenseGrid<S> to_dense(const SparseTensor<S>& t) {
    check_dense_capacity(t.batch_size, t.channels(), t.spatial_shape);
    DenseGrid<S> g(t.batch_size, std::int32_t(t.channels()), t.spatial_shape);
    for (std::int64_t i = 0; i < t.size(); ++i) {
        const Coord4& c = t.coords[std::size_t(i)];
        const S* row = t.features.row(i);
        for (std::int64_t ch = 0; ch < t.channels(); ++ch)
            g.at(c.batch, std::int32_t(ch), c.x, c.y, c.z) = row[ch];
    }
    return g;
}

// Keeps positions with at least one nonzero channel; all-zero rows are
// indistinguishable from empty space in dense form.
template <class S>
SparseTensor<S> from_dense(const DenseGrid<S>& g, const Shape3& stride = {1, 1, 1}) {
    std::vector<Coord4> coords;
    std::vector<S> feats;
    for (std::int32_t b = 0; b < g.batch; ++b)
        for (std::int32_t z = 0; z < g.shape[2]; ++z)
            for (std::int32_t y = 0; y < g.shape[1]; ++y)
                for (std::int32_t x = 0; x < g.shape[0]; ++x) {
                    bool any = false;
                    for (std::int32_t c = 0; c < g.channels && !any; ++c)
                        any = g.at(b, c, x, y, z) != S(0);
                    if (!any) continue;
                    coords.push_back({b, x, y, z});
                    for (std::int32_t c = 0; c < g.channels; ++c)
                        feats.push_back(g.at(b, c, x, y, z));
                }
    Matrix<S> f(std::int64_t(coords.size()), g.channels);
    f.v = std::move(feats);
    return build<S>(std::move(coords), std::move(f), g.shape, g.batch, stride);
}

// ---------------------------------------------------------------------------
// SVOX-CSV voxel file format.
//   header: svox,v1,C=<c>,shape=<X>x<Y>x<Z>,batch=<B>
//   rows:   b,x,y,z,f1,...,fC
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
std::string format_scalar(S value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), double(value));
    return std::string(buf, res.ptr);
}

inline std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline std::int64_t parse_int(const std::string& s, const char* what) {
    std::int64_t value = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), value);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw std::invalid_argument(std::string("svox: bad integer field for ") + what + ": '" + s + "'");
    return value;
}

inline double parse_real(const std::string& s, const char* what) {
    double value = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), value);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw std::invalid_argument(std::string("svox: bad real field for ") + what + ": '" + s + "'");
    return value;
}

} // namespace detail

template <class S>
void write_svox(std::ostream& os, const SparseTensor<S>& t) {
    os << "svox,v1,C=" << t.channels() << ",shape=" << t.spatial_shape[0] << 'x'
       << t.spatial_shape[1] << 'x' << t.spatial_shape[2] << ",batch=" << t.batch_size << '\n';
    for (std::int64_t i = 0; i < t.size(); ++i) {
        const Coord4& c = t.coords[std::size_t(i)];
        os << c.batch << ',' << c.x << ',' << c.y << ',' << c.z;
        const S* row = t.features.row(i);
        for (std::int64_t j = 0; j < t.channels(); ++j)
            os << ',' << detail::format_scalar(row[j]);
        os << '\n';
    }
}

template <class S>
void write_svox_file(const std::string& path, const SparseTensor<S>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("svox: cannot open for writing: " + path);
    write_svox(os, t);
}

template <class S>
SparseTensor<S> read_svox(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::invalid_argument("svox: missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto fields = detail::split(line, ',');
    if (fields.size() != 5 || fields[0] != "svox" || fields[1] != "v1")
        throw std::invalid_argument("svox: bad header: '" + line + "'");
    if (fields[2].rfind("C=", 0) != 0 || fields[3].rfind("shape=", 0) != 0 || fields[4].rfind("batch=", 0) != 0)
        throw std::invalid_argument("svox: bad header fields: '" + line + "'");
    const std::int64_t c = detail::parse_int(fields[2].substr(2), "C");
    auto dims = detail::split(fields[3].substr(6), 'x');
    if (dims.size() != 3) throw std::invalid_argument("svox: bad shape field");
    Shape3 shape{std::int32_t(detail::parse_int(dims[0], "X")),
                 std::int32_t(detail::parse_int(dims[1], "Y")),
                 std::int32_t(detail::parse_int(dims[2], "Z"))};
    const std::int32_t batch = std::int32_t(detail::parse_int(fields[4].substr(6), "batch"));
    if (c < 0 || batch <= 0 || shape[0] <= 0 || shape[1] <= 0 || shape[2] <= 0)
        throw std::invalid_argument("svox: non-positive header dimensions");

    std::vector<Coord4> coords;
    std::vector<S> feats;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cols = detail::split(line, ',');
        if (std::int64_t(cols.size()) != 4 + c)
            throw std::invalid_argument("svox: wrong column count in row: '" + line + "'");
        Coord4 cd{std::int32_t(detail::parse_int(cols[0], "b")),
                  std::int32_t(detail::parse_int(cols[1], "x")),
                  std::int32_t(detail::parse_int(cols[2], "y")),
                  std::int32_t(detail::parse_int(cols[3], "z"))};
        coords.push_back(cd);
        for (std::int64_t j = 0; j < c; ++j)
            feats.push_back(S(detail::parse_real(cols[std::size_t(4 + j)], "feature")));
    }
    Matrix<S> f(std::int64_t(coords.size()), c);
    f.v = std::move(feats);
    return build<S>(std::move(coords), std::move(f), shape, batch);
}

template <class S>
SparseTensor<S> read_svox_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("svox: cannot open for reading: " + path);
    return read_svox<S>(is);
}

} // namespace fscnn
