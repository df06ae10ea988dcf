#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fscnn {

// Weight checkpoint container: magic "FSCW1", then ordered records of
// (name, shape, scalar width, row-major payload).
struct CheckpointRecord {
    std::string name;
    std::vector<std::uint64_t> shape;
    std::uint32_t scalar_width = 4;
    std::vector<std::uint8_t> payload;

    std::uint64_t element_count() const {
        std::uint64_t n = 1;
        for (std::uint64_t d : shape) n *= d;
        return n;
    }
};

template <class S>
CheckpointRecord make_record(const std::string& name, std::vector<std::uint64_t> shape, const S* data,
                             std::size_t count) {
    static_assert(sizeof(S) == 4 || sizeof(S) == 8, "scalar must be 32 or 64 bit");
    CheckpointRecord r;
    r.name = name;
    r.shape = std::move(shape);
    r.scalar_width = sizeof(S);
    r.payload.resize(count * sizeof(S));
    std::memcpy(r.payload.data(), data, r.payload.size());
    if (r.element_count() != count) throw std::invalid_argument("checkpoint: shape does not match element count");
    return r;
}

// Decodes a record's payload into S, converting across stored widths.
template <class S>
std::vector<S> record_values(const CheckpointRecord& r) {
    const std::uint64_t n = r.element_count();
    if (r.payload.size() != n * r.scalar_width) throw std::invalid_argument("checkpoint: corrupt payload size");
    std::vector<S> out(n);
    if (r.scalar_width == 4) {
        for (std::uint64_t i = 0; i < n; ++i) {
            float v;
            std::memcpy(&v, r.payload.data() + i * 4, 4);
            out[std::size_t(i)] = S(v);
        }
    } else if (r.scalar_width == 8) {
        for (std::uint64_t i = 0; i < n; ++i) {
            double v;
            std::memcpy(&v, r.payload.data() + i * 8, 8);
            out[std::size_t(i)] = S(v);
        }
    } else {
        throw std::invalid_argument("checkpoint: unsupported scalar width");
    }
    return out;
}

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::invalid_argument("checkpoint: truncated");
    return v;
}

} // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<CheckpointRecord>& records) {
    os.write("FSCW1", 5);
    detail::write_pod<std::uint64_t>(os, records.size());
    for (const auto& r : records) {
        detail::write_pod<std::uint32_t>(os, std::uint32_t(r.name.size()));
        os.write(r.name.data(), std::streamsize(r.name.size()));
        detail::write_pod<std::uint32_t>(os, std::uint32_t(r.shape.size()));
        for (std::uint64_t d : r.shape) detail::write_pod<std::uint64_t>(os, d);
        detail::write_pod<std::uint32_t>(os, r.scalar_width);
        detail::write_pod<std::uint64_t>(os, r.payload.size());
        os.write(reinterpret_cast<const char*>(r.payload.data()), std::streamsize(r.payload.size()));
    }
}

inline std::vector<CheckpointRecord> read_checkpoint(std::istream& is) {
    char magic[5];
    if (!is.read(magic, 5) || std::memcmp(magic, "FSCW1", 5) != 0)
        throw std::invalid_argument("checkpoint: bad magic (want FSCW1)");
    const std::uint64_t n = detail::read_pod<std::uint64_t>(is);
    std::vector<CheckpointRecord> records;
    records.reserve(std::size_t(n));
    for (std::uint64_t i = 0; i < n; ++i) {
        CheckpointRecord r;
        const std::uint32_t name_len = detail::read_pod<std::uint32_t>(is);
        r.name.resize(name_len);
        if (!is.read(r.name.data(), name_len)) throw std::invalid_argument("checkpoint: truncated name");
        const std::uint32_t ndims = detail::read_pod<std::uint32_t>(is);
        r.shape.resize(ndims);
        for (auto& d : r.shape) d = detail::read_pod<std::uint64_t>(is);
        r.scalar_width = detail::read_pod<std::uint32_t>(is);
        const std::uint64_t bytes = detail::read_pod<std::uint64_t>(is);
        r.payload.resize(std::size_t(bytes));
        if (!is.read(reinterpret_cast<char*>(r.payload.data()), std::streamsize(bytes)))
            throw std::invalid_argument("checkpoint: truncated payload");
        records.push_back(std::move(r));
    }
    return records;
}

inline void write_checkpoint_file(const std::string& path, const std::vector<CheckpointRecord>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    write_checkpoint(os, records);
}

inline std::vector<CheckpointRecord> read_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open for reading: " + path);
    return read_checkpoint(is);
}

} // namespace fscnn
