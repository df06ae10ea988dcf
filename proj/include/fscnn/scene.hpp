#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "fscnn/focal_conv.hpp"
#include "fscnn/sparse_tensor.hpp"

namespace fscnn {

// ---------------------------------------------------------------------------
// Voxelization: points are binned by floor((p - origin) / voxel_size) and a
// voxel's feature row is the mean of its points' features. Out-of-grid
// points are dropped and counted.
// ---------------------------------------------------------------------------

template <class S>
struct VoxelizeResult {
    SparseTensor<S> tensor;
    std::int64_t dropped = 0;
};

template <class S>
VoxelizeResult<S> voxelize(const Matrix<S>& points, const std::array<double, 3>& voxel_size,
                           const std::array<double, 3>& origin, const Shape3& grid_shape) {
    for (double v : voxel_size)
        if (!(v > 0)) throw std::invalid_argument("voxelize: voxel_size must be positive");
    if (points.cols < 3) throw std::invalid_argument("voxelize: points need at least xyz columns");
    const std::int64_t c = points.cols - 3;

    struct Acc {
        std::vector<double> sum;
        std::int64_t count = 0;
    };
    std::unordered_map<Coord4, Acc, Coord4Hash> cells;
    std::int64_t dropped = 0;
    for (std::int64_t i = 0; i < points.rows; ++i) {
        Coord4 cd{0, 0, 0, 0};
        bool ok = true;
        for (int a = 0; a < 3 && ok; ++a) {
            const double idx = std::floor((double(points(i, a)) - origin[std::size_t(a)]) / voxel_size[std::size_t(a)]);
            if (idx < 0 || idx >= double(grid_shape[std::size_t(a)])) {
                ok = false;
                break;
            }
            (a == 0 ? cd.x : a == 1 ? cd.y : cd.z) = std::int32_t(idx);
        }
        if (!ok) {
            ++dropped;
            continue;
        }
        auto& acc = cells.try_emplace(cd).first->second;
        if (acc.sum.empty()) acc.sum.assign(std::size_t(c), 0.0);
        for (std::int64_t j = 0; j < c; ++j) acc.sum[std::size_t(j)] += double(points(i, 3 + j));
        ++acc.count;
    }

    std::vector<Coord4> coords;
    coords.reserve(cells.size());
    for (const auto& [cd, acc] : cells) coords.push_back(cd);
    std::sort(coords.begin(), coords.end());
    Matrix<S> feats(std::int64_t(coords.size()), c);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const Acc& acc = cells.at(coords[i]);
        for (std::int64_t j = 0; j < c; ++j)
            feats(std::int64_t(i), j) = S(acc.sum[std::size_t(j)] / double(acc.count));
    }
    VoxelizeResult<S> res;
    res.tensor = build<S>(std::move(coords), std::move(feats), grid_shape, 1);
    res.dropped = dropped;
    return res;
}

// ---------------------------------------------------------------------------
// Synthetic scenes: uniform background clutter plus per-box interior points.
// Point features: channel 0 is an intensity-like value drawn from disjoint
// ranges for background vs object points; remaining channels are U(0,1).
// ---------------------------------------------------------------------------

struct SceneBox {
    GtBox box;
    double density = 1.0; // expected points per voxel volume inside the box
};

struct SceneSpec {
    Shape3 grid_shape{16, 16, 16};
    std::array<double, 3> voxel_size{0.05, 0.05, 0.1};
    std::array<double, 3> origin{0, 0, 0};
    std::int64_t n_background = 200;
    std::vector<SceneBox> boxes;
    std::int32_t n_channels = 2; // feature channels per point
    std::uint64_t seed = 0;

    void validate() const {
        if (n_background < 0) throw std::invalid_argument("scene: negative background count");
        if (n_channels < 1) throw std::invalid_argument("scene: need at least one feature channel");
        for (const auto& b : boxes) {
            if (b.density < 0) throw std::invalid_argument("scene: negative density");
            for (double s : b.box.size)
                if (!(s > 0)) throw std::invalid_argument("scene: box size must be positive");
        }
    }
};

template <class S>
struct GeneratedScene {
    Matrix<S> points; // M x (3 + n_channels)
    std::vector<GtBox> boxes;
};

template <class S>
GeneratedScene<S> gen_scene(const SceneSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> bg_intensity(0.05, 0.4);
    std::uniform_real_distribution<double> fg_intensity(0.55, 0.95);

    const double voxel_volume = spec.voxel_size[0] * spec.voxel_size[1] * spec.voxel_size[2];
    std::vector<std::vector<S>> rows;

    for (std::int64_t i = 0; i < spec.n_background; ++i) {
        std::vector<S> row(std::size_t(3 + spec.n_channels));
        for (int a = 0; a < 3; ++a)
            row[std::size_t(a)] = S(spec.origin[std::size_t(a)] +
                                    unit(rng) * spec.voxel_size[std::size_t(a)] *
                                        double(spec.grid_shape[std::size_t(a)]));
        row[3] = S(bg_intensity(rng));
        for (std::int32_t ch = 1; ch < spec.n_channels; ++ch) row[std::size_t(3 + ch)] = S(unit(rng));
        rows.push_back(std::move(row));
    }

    std::vector<GtBox> boxes;
    for (const SceneBox& sb : spec.boxes) {
        boxes.push_back(sb.box);
        const double volume = sb.box.size[0] * sb.box.size[1] * sb.box.size[2];
        const std::int64_t n = std::llround(sb.density * volume / voxel_volume);
        const double cy = std::cos(sb.box.yaw), sy = std::sin(sb.box.yaw);
        for (std::int64_t i = 0; i < n; ++i) {
            const double lx = (unit(rng) - 0.5) * sb.box.size[0];
            const double ly = (unit(rng) - 0.5) * sb.box.size[1];
            const double lz = (unit(rng) - 0.5) * sb.box.size[2];
            std::vector<S> row(std::size_t(3 + spec.n_channels));
            row[0] = S(sb.box.center[0] + cy * lx - sy * ly);
            row[1] = S(sb.box.center[1] + sy * lx + cy * ly);
            row[2] = S(sb.box.center[2] + lz);
            row[3] = S(fg_intensity(rng));
            for (std::int32_t ch = 1; ch < spec.n_channels; ++ch) row[std::size_t(3 + ch)] = S(unit(rng));
            rows.push_back(std::move(row));
        }
    }

    GeneratedScene<S> out;
    out.points = Matrix<S>(std::int64_t(rows.size()), 3 + spec.n_channels);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) out.points(std::int64_t(i), std::int64_t(j)) = rows[i][j];
    out.boxes = std::move(boxes);
    return out;
}

// Stacks single-batch tensors into one batched tensor (batch index = slot).
template <class S>
SparseTensor<S> merge_batch(const std::vector<SparseTensor<S>>& tensors) {
    if (tensors.empty()) throw std::invalid_argument("merge_batch: empty list");
    std::vector<Coord4> coords;
    std::vector<S> feats;
    const std::int64_t c = tensors.front().channels();
    for (std::size_t b = 0; b < tensors.size(); ++b) {
        const auto& t = tensors[b];
        if (t.spatial_shape != tensors.front().spatial_shape || t.channels() != c ||
            t.stride != tensors.front().stride)
            throw std::invalid_argument("merge_batch: tensors are not layout-compatible");
        for (std::int64_t i = 0; i < t.size(); ++i) {
            Coord4 cd = t.coords[std::size_t(i)];
            cd.batch = std::int32_t(b);
            coords.push_back(cd);
            for (std::int64_t j = 0; j < c; ++j) feats.push_back(t.features(i, j));
        }
    }
    Matrix<S> f(std::int64_t(coords.size()), c);
    f.v = std::move(feats);
    return build<S>(std::move(coords), std::move(f), tensors.front().spatial_shape,
                    std::int32_t(tensors.size()), tensors.front().stride);
}

// ---------------------------------------------------------------------------
// ASCII PLY point export (positions plus optional extra float properties).
// ---------------------------------------------------------------------------

inline void write_ply(std::ostream& os, const std::vector<std::array<double, 3>>& points,
                      const std::vector<std::string>& extra_names = {},
                      const std::vector<std::vector<double>>& extra_cols = {}) {
    if (extra_names.size() != extra_cols.size())
        throw std::invalid_argument("ply: extra property name/column mismatch");
    os << "ply\nformat ascii 1.0\nelement vertex " << points.size()
       << "\nproperty float x\nproperty float y\nproperty float z\n";
    for (const auto& n : extra_names) os << "property float " << n << '\n';
    os << "end_header\n";
    char buf[64];
    auto put = [&](double v, char sep) {
        auto res = std::to_chars(buf, buf + sizeof(buf), v);
        os.write(buf, res.ptr - buf);
        os.put(sep);
    };
    for (std::size_t i = 0; i < points.size(); ++i) {
        put(points[i][0], ' ');
        put(points[i][1], ' ');
        put(points[i][2], extra_cols.empty() ? '\n' : ' ');
        for (std::size_t e = 0; e < extra_cols.size(); ++e)
            put(extra_cols[e][i], e + 1 == extra_cols.size() ? '\n' : ' ');
    }
}

// Minimal ASCII PLY reader: returns the vertex rows (all float properties).
inline std::vector<std::vector<double>> read_ply(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "ply") throw std::invalid_argument("ply: bad magic");
    std::int64_t n_vertices = -1;
    std::int64_t n_props = 0;
    while (std::getline(is, line)) {
        if (line == "end_header") break;
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "element") {
            std::string what;
            ls >> what >> n_vertices;
            if (what != "vertex") throw std::invalid_argument("ply: only vertex elements supported");
        } else if (tok == "property") {
            ++n_props;
        }
    }
    if (n_vertices < 0) throw std::invalid_argument("ply: missing vertex element");
    std::vector<std::vector<double>> rows;
    for (std::int64_t i = 0; i < n_vertices; ++i) {
        if (!std::getline(is, line)) throw std::invalid_argument("ply: truncated vertex data");
        std::istringstream ls(line);
        std::vector<double> row(static_cast<std::size_t>(n_props));
        for (auto& v : row)
            if (!(ls >> v)) throw std::invalid_argument("ply: bad vertex row");
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace fscnn
