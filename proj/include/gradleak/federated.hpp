#pragma once

// Honest side of a federated round: per-client gradients, aggregation, and
// the .glkb bundle format the aggregator (or an attacker) receives.
//
// .glkb layout, all integers little-endian:
//   "GLKB" | version u32 = 1 | spec digest u64 | client id u32 | round u32 |
//   tensor count u32 | per tensor: name length u16, UTF-8 name, rank u8,
//   rank x dim u64, numel x f64 (IEEE-754).

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "gradleak/model.hpp"

namespace gradleak {

struct GradientBundle {
    static constexpr std::uint32_t aggregate_client = 0xFFFFFFFFu;

    std::uint64_t spec_digest = 0;
    std::uint32_t client_id = 0;
    std::uint32_t round = 0;
    std::vector<NamedTensor> tensors; // flatten_params() order

    const Tensor& tensor(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t.value;
        throw ContractError("bundle has no tensor named '" + std::string(name) + "'");
    }

    bool has(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return true;
        return false;
    }

    friend bool operator==(const GradientBundle&, const GradientBundle&) = default;
};

/// Throws IncompatibleError unless `bundle` was produced under `params.spec`
/// with matching tensor names and shapes.
inline void check_compatible(const GradientBundle& bundle, const ModelParams& params) {
    const auto digest = spec_digest(params.spec);
    if (bundle.spec_digest != digest) {
        throw IncompatibleError("gradient bundle digest " + std::to_string(bundle.spec_digest) +
                                " does not match model spec digest " + std::to_string(digest));
    }
    const auto expected = flatten_params(params);
    if (expected.size() != bundle.tensors.size()) {
        throw IncompatibleError("gradient bundle holds " + std::to_string(bundle.tensors.size()) +
                                " tensors, model has " + std::to_string(expected.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& b = bundle.tensors[i];
        if (b.name != expected[i].name || b.value.shape() != expected[i].value.shape()) {
            throw IncompatibleError("gradient tensor '" + b.name + "' " +
                                    shape_string(b.value.shape()) + " does not match parameter '" +
                                    expected[i].name + "' " +
                                    shape_string(expected[i].value.shape()));
        }
    }
}

/// d loss / d p for every parameter p, for one private sample.
inline GradientBundle victim_gradient(const ModelParams& params, const Tensor& input,
                                      const Tensor& target_probs, std::uint32_t client_id = 0,
                                      std::uint32_t round = 0) {
    auto lg = forward_loss(params, input, target_probs);
    const auto grads = lg.graph.grad(lg.loss, lg.params);
    GradientBundle b{spec_digest(params.spec), client_id, round, {}};
    for (std::size_t i = 0; i < grads.size(); ++i) {
        b.tensors.push_back({lg.param_names[i], lg.graph.value(grads[i])});
    }
    return b;
}

enum class AggregateMode { mean, sum };

/// Element-wise mean (or sum) of client bundles. The result's client id is
/// GradientBundle::aggregate_client; its round is the first bundle's.
inline GradientBundle aggregate(std::span<const GradientBundle> bundles,
                                AggregateMode mode = AggregateMode::mean) {
    if (bundles.empty()) throw ContractError("aggregate: no bundles");
    const auto& first = bundles.front();
    GradientBundle out{first.spec_digest, GradientBundle::aggregate_client, first.round,
                       first.tensors};
    for (auto& t : out.tensors)
        for (auto& v : t.value.data()) v = 0.0;

    for (const auto& b : bundles) {
        if (b.spec_digest != first.spec_digest) {
            throw IncompatibleError("aggregate: bundle from client " + std::to_string(b.client_id) +
                                    " has a different spec digest");
        }
        if (b.tensors.size() != out.tensors.size()) {
            throw IncompatibleError("aggregate: bundles hold different tensor counts");
        }
        for (std::size_t i = 0; i < out.tensors.size(); ++i) {
            const auto& src = b.tensors[i];
            auto& dst = out.tensors[i];
            if (src.name != dst.name || src.value.shape() != dst.value.shape()) {
                throw IncompatibleError("aggregate: tensor '" + src.name + "' does not match '" +
                                        dst.name + "'");
            }
            for (std::size_t k = 0; k < src.value.numel(); ++k) dst.value[k] += src.value[k];
        }
    }
    if (mode == AggregateMode::mean) {
        const double n = static_cast<double>(bundles.size());
        for (auto& t : out.tensors)
            for (auto& v : t.value.data()) v /= n;
    }
    return out;
}

// ---- serialization ------------------------------------------------------------

namespace detail {

class ByteWriter {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        unsigned char raw[sizeof(T)];
        std::memcpy(raw, &v, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
        bytes_.insert(bytes_.end(), raw, raw + sizeof(T));
    }
    void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        unsigned char raw[sizeof(T)];
        std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
        T v;
        std::memcpy(&v, raw, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string get_string(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw ParseError(std::string("truncated bundle: expected ") + what, pos_);
        }
    }

    std::size_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline constexpr std::uint32_t bundle_format_version = 1;

inline std::vector<std::uint8_t> serialize_bundle(const GradientBundle& b) {
    detail::ByteWriter w;
    w.put_bytes("GLKB");
    w.put<std::uint32_t>(bundle_format_version);
    w.put<std::uint64_t>(b.spec_digest);
    w.put<std::uint32_t>(b.client_id);
    w.put<std::uint32_t>(b.round);
    if (b.tensors.size() > std::numeric_limits<std::uint32_t>::max()) {
        throw ContractError("serialize_bundle: too many tensors");
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.tensors.size()));
    for (const auto& t : b.tensors) {
        if (t.name.empty()) throw ContractError("serialize_bundle: empty tensor name");
        if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) {
            throw ContractError("serialize_bundle: tensor name too long");
        }
        if (t.value.rank() > std::numeric_limits<std::uint8_t>::max()) {
            throw ContractError("serialize_bundle: tensor rank too large");
        }
        w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
        w.put_bytes(t.name);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.value.rank()));
        for (auto d : t.value.shape()) w.put<std::uint64_t>(d);
        for (double v : t.value.data()) w.put<double>(v);
    }
    return w.take();
}

inline GradientBundle deserialize_bundle(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    if (r.get_string(4, "magic") != "GLKB") throw ParseError("bad bundle magic", 0);
    const auto version = r.get<std::uint32_t>("version");
    if (version != bundle_format_version) {
        throw ParseError("unsupported bundle version " + std::to_string(version), 4);
    }
    GradientBundle b;
    b.spec_digest = r.get<std::uint64_t>("spec digest");
    b.client_id = r.get<std::uint32_t>("client id");
    b.round = r.get<std::uint32_t>("round");
    const auto count = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_offset = r.offset();
        const auto name_len = r.get<std::uint16_t>("tensor name length");
        if (name_len == 0) throw ParseError("empty tensor name", name_offset);
        std::string name = r.get_string(name_len, "tensor name");
        const auto rank = r.get<std::uint8_t>("tensor rank");
        Shape shape;
        std::size_t numel = 1;
        for (std::uint8_t k = 0; k < rank; ++k) {
            const auto dim_offset = r.offset();
            const auto d = r.get<std::uint64_t>("dimension");
            if (d == 0) throw ParseError("zero tensor dimension", dim_offset);
            // Every element needs 8 bytes, so the element count can never
            // legitimately exceed remaining/8.
            if (d > r.remaining() / 8 || numel > (r.remaining() / 8) / d) {
                throw ParseError("tensor shape overflows remaining payload", dim_offset);
            }
            numel *= static_cast<std::size_t>(d);
            shape.push_back(static_cast<std::size_t>(d));
        }
        r.need(numel * 8, "tensor values");
        std::vector<double> values(numel);
        for (auto& v : values) v = r.get<double>("tensor value");
        b.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
    }
    if (r.remaining() != 0) throw ParseError("trailing bytes after bundle", r.offset());
    return b;
}

inline void write_bundle(const std::string& path, const GradientBundle& b) {
    const auto bytes = serialize_bundle(b);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing '" + path + "'");
}

inline GradientBundle read_bundle(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return deserialize_bundle(bytes);
}

} // namespace gradleak
