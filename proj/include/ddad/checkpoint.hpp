#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "ddad/backbone.hpp"
#include "ddad/error.hpp"

// Checkpoint layout (all integers little-endian):
//
//   "DDAD"                         magic, 4 bytes
//   u32 version                    currently 1
//   u8  kind                       0 = AE, 1 = AEU
//   config block:
//     u32 input_size, u32 kernel, u32 stride, u32 padding
//     u32 count, count x u32       encoder channels
//     u32 count, count x u32       fc dims
//     u32 count, count x u32       decoder channels
//     u64 seed
//   u32 record count
//   records:
//     u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 payload
//
// Batchnorm running statistics are ordinary records named
// "<layer>.running_mean" and "<layer>.running_var".

namespace ddad {

inline constexpr std::array<char, 4> kCheckpointMagic{'D', 'D', 'A', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    template <typename U>
    void le(U value) {
        std::uint64_t bits;
        if constexpr (std::is_same_v<U, float>) {
            bits = std::bit_cast<std::uint32_t>(value);
        } else {
            bits = static_cast<std::uint64_t>(value);
        }
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<unsigned char>(bits >> (8 * i)));
    }
    void u32_list(const std::vector<std::size_t>& values) {
        le(static_cast<std::uint32_t>(values.size()));
        for (std::size_t v : values) le(static_cast<std::uint32_t>(v));
    }
    const std::vector<unsigned char>& buffer() const { return buf_; }

private:
    std::vector<unsigned char> buf_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<unsigned char>& buf) : buf_(buf) {}

    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == buf_.size(); }

    void need(std::size_t n, const char* what) const {
        if (buf_.size() - pos_ < n) {
            throw FormatError("checkpoint truncated at offset " + std::to_string(pos_) + " while reading " + what);
        }
    }
    template <typename U>
    U le(const char* what) {
        need(sizeof(U), what);
        std::uint64_t bits = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
        pos_ += sizeof(U);
        if constexpr (std::is_same_v<U, float>) {
            return std::bit_cast<float>(static_cast<std::uint32_t>(bits));
        } else {
            return static_cast<U>(bits);
        }
    }
    std::string text(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::vector<std::size_t> u32_list(const char* what) {
        const std::size_t n = le<std::uint32_t>(what);
        need(n * 4, what);
        std::vector<std::size_t> values(n);
        for (auto& v : values) v = le<std::uint32_t>(what);
        return values;
    }

private:
    const std::vector<unsigned char>& buf_;
    std::size_t pos_ = 0;
};

template <typename T>
void write_record(ByteWriter& w, const std::string& name, const Shape& shape, std::span<const T> values) {
    if (name.size() > 0xFFFF) throw FormatError("checkpoint: record name too long");
    w.le(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le(static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) w.le(static_cast<std::uint32_t>(d));
    for (T v : values) w.le(static_cast<float>(v));
}

} // namespace detail

/// Serializes config, parameters and batchnorm running state.
template <typename T>
std::vector<unsigned char> encode_checkpoint(const BackboneNet<T>& net) {
    detail::ByteWriter w;
    const BackboneConfig& c = net.config();
    w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
    w.le(kCheckpointVersion);
    w.le(static_cast<std::uint8_t>(c.kind));
    w.le(static_cast<std::uint32_t>(c.input_size));
    w.le(static_cast<std::uint32_t>(c.kernel));
    w.le(static_cast<std::uint32_t>(c.stride));
    w.le(static_cast<std::uint32_t>(c.padding));
    w.u32_list(c.enc_channels);
    w.u32_list(c.fc_dims);
    w.u32_list(c.dec_channels);
    w.le(static_cast<std::uint64_t>(c.seed));

    const auto& params = net.parameters();
    const auto& norms = net.batchnorm_states();
    w.le(static_cast<std::uint32_t>(params.size() + 2 * norms.size()));
    for (const auto& p : params) detail::write_record<T>(w, p.name, p.value.shape(), p.value.data());
    for (const auto& bn : norms) {
        const Shape s{bn.state.running_mean.size()};
        detail::write_record<T>(w, bn.name + ".running_mean", s, bn.state.running_mean);
        detail::write_record<T>(w, bn.name + ".running_var", s, bn.state.running_var);
    }
    return w.buffer();
}

/// Parses a checkpoint. When `expected` is set, a different stored kind is
/// rejected. No network is returned unless the whole buffer is consistent.
template <typename T = float>
BackboneNet<T> decode_checkpoint(const std::vector<unsigned char>& bytes,
                                 std::optional<BackboneKind> expected = std::nullopt) {
    detail::ByteReader r(bytes);
    const std::string magic = r.text(4, "magic");
    if (magic != std::string(kCheckpointMagic.data(), 4)) throw FormatError("checkpoint: bad magic at offset 0");
    const auto version = r.le<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " at offset 4");
    }
    const std::size_t kind_offset = r.offset();
    const auto kind_byte = r.le<std::uint8_t>("kind");
    if (kind_byte > 1) throw FormatError("checkpoint: invalid kind byte at offset " + std::to_string(kind_offset));
    BackboneConfig config;
    config.kind = static_cast<BackboneKind>(kind_byte);
    if (expected && *expected != config.kind) {
        throw FormatError("checkpoint: kind mismatch, file holds " + std::string(name_of(config.kind)) +
                          " but " + std::string(name_of(*expected)) + " was expected");
    }
    config.input_size = r.le<std::uint32_t>("input_size");
    config.kernel = r.le<std::uint32_t>("kernel");
    config.stride = r.le<std::uint32_t>("stride");
    config.padding = r.le<std::uint32_t>("padding");
    config.enc_channels = r.u32_list("enc_channels");
    config.fc_dims = r.u32_list("fc_dims");
    config.dec_channels = r.u32_list("dec_channels");
    config.seed = r.le<std::uint64_t>("seed");
    try {
        config.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: invalid config block: ") + e.what());
    }

    BackboneNet<T> net(config);
    std::map<std::string, std::span<T>, std::less<>> targets;
    std::map<std::string, Shape, std::less<>> shapes;
    for (auto& p : net.parameters()) {
        targets.emplace(p.name, p.value.mutable_data());
        shapes.emplace(p.name, p.value.shape());
    }
    for (auto& bn : net.batchnorm_states()) {
        const Shape s{bn.state.running_mean.size()};
        targets.emplace(bn.name + ".running_mean", std::span<T>(bn.state.running_mean));
        targets.emplace(bn.name + ".running_var", std::span<T>(bn.state.running_var));
        shapes.emplace(bn.name + ".running_mean", s);
        shapes.emplace(bn.name + ".running_var", s);
    }

    const std::size_t count_offset = r.offset();
    const auto count = r.le<std::uint32_t>("record count");
    if (count != targets.size()) {
        throw FormatError("checkpoint: " + std::to_string(count) + " records at offset " +
                          std::to_string(count_offset) + ", architecture needs " + std::to_string(targets.size()));
    }
    std::map<std::string, bool, std::less<>> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t record_offset = r.offset();
        const auto name_len = r.le<std::uint16_t>("record name length");
        const std::string name = r.text(name_len, "record name");
        const auto it = targets.find(name);
        if (it == targets.end() || seen[name]) {
            throw FormatError("checkpoint: unexpected record '" + name + "' at offset " + std::to_string(record_offset));
        }
        seen[name] = true;
        const auto rank = r.le<std::uint8_t>("record rank");
        Shape shape(rank);
        for (auto& d : shape) d = r.le<std::uint32_t>("record dims");
        if (shape != shapes.at(name)) {
            throw FormatError("checkpoint: record '" + name + "' has shape " + to_string(shape) + ", expected " +
                              to_string(shapes.at(name)) + " (offset " + std::to_string(record_offset) + ")");
        }
        r.need(it->second.size() * 4, "record payload");
        for (T& v : it->second) v = static_cast<T>(r.le<float>("record payload"));
    }
    if (!r.at_end()) throw FormatError("checkpoint: trailing bytes at offset " + std::to_string(r.offset()));
    return net;
}

template <typename T>
void save_checkpoint(const BackboneNet<T>& net, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(net);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("checkpoint: write failed for " + path.string());
}

template <typename T = float>
BackboneNet<T> load_checkpoint(const std::filesystem::path& path,
                               std::optional<BackboneKind> expected = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint<T>(bytes, expected);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

} // namespace ddad
