#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <tuple>

namespace fscnn {

// A voxel location: batch index plus integer grid position. The canonical
// total order is lexicographic in (batch, z, y, x); every container of
// coordinates in this library is kept sorted in that order.
struct Coord4 {
    std::int32_t batch = 0;
    std::int32_t x = 0;
    std::int32_t y = 0;
    std::int32_t z = 0;

    friend bool operator==(const Coord4&, const Coord4&) = default;

    friend bool operator<(const Coord4& a, const Coord4& b) {
        return std::tie(a.batch, a.z, a.y, a.x) < std::tie(b.batch, b.z, b.y, b.x);
    }
};

struct Coord4Hash {
    std::size_t operator()(const Coord4& c) const {
        // splitmix64 over the packed components
        auto mix = [](std::uint64_t h) {
            h += 0x9e3779b97f4a7c15ull;
            h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
            h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
            return h ^ (h >> 31);
        };
        std::uint64_t lo = (std::uint64_t(std::uint32_t(c.batch)) << 32) | std::uint32_t(c.x);
        std::uint64_t hi = (std::uint64_t(std::uint32_t(c.y)) << 32) | std::uint32_t(c.z);
        return std::size_t(mix(lo ^ mix(hi)));
    }
};

using Shape3 = std::array<std::int32_t, 3>;

inline bool in_bounds(const Coord4& c, const Shape3& shape) {
    return c.x >= 0 && c.x < shape[0] &&
           c.y >= 0 && c.y < shape[1] &&
           c.z >= 0 && c.z < shape[2];
}

} // namespace fscnn
