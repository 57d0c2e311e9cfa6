#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedlora/aggregation.hpp"
#include "fedlora/errors.hpp"
#include "fedlora/identity.hpp"
#include "fedlora/model.hpp"

namespace fedlora {

// Wire layout: [u32 BE frame length][frame], where
// frame = [u32 BE header length][UTF-8 JSON header][tensor block].
// Tensor values cross the wire as row-major little-endian f32.

enum class MessageKind {
    register_,
    register_ack,
    round_start,
    update,
    update_ack,
    round_complete,
    shutdown,
    error,
};

inline const char* message_kind_name(MessageKind k) {
    switch (k) {
    case MessageKind::register_: return "REGISTER";
    case MessageKind::register_ack: return "REGISTER_ACK";
    case MessageKind::round_start: return "ROUND_START";
    case MessageKind::update: return "UPDATE";
    case MessageKind::update_ack: return "UPDATE_ACK";
    case MessageKind::round_complete: return "ROUND_COMPLETE";
    case MessageKind::shutdown: return "SHUTDOWN";
    case MessageKind::error: return "ERROR";
    }
    return "?";
}

inline MessageKind message_kind_from_name(const std::string& name) {
    for (MessageKind k :
         {MessageKind::register_, MessageKind::register_ack, MessageKind::round_start,
          MessageKind::update, MessageKind::update_ack, MessageKind::round_complete,
          MessageKind::shutdown, MessageKind::error})
        if (name == message_kind_name(k)) return k;
    throw ProtocolError("unknown message kind: " + name);
}

inline bool kind_carries_tensors(MessageKind k) {
    return k == MessageKind::round_start || k == MessageKind::update;
}

struct TensorDescriptor {
    Target target = Target::q;
    char which = 'A';  // 'A' or 'B'
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;

    bool operator==(const TensorDescriptor&) const = default;
};

struct Message {
    MessageKind kind = MessageKind::shutdown;
    std::uint64_t round = 0;
    int sender_id = 0;
    nlohmann::json extra = nlohmann::json::object();  // kind-specific header keys
    std::vector<TensorDescriptor> manifest;
    Bytes tensor_payload;

    bool operator==(const Message&) const = default;
};

namespace detail {

inline void put_u32_be(Bytes& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_u32_be(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) |
           (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

constexpr std::size_t kMaxFrameBytes = 1u << 28;

} // namespace detail

inline nlohmann::json manifest_to_json(const std::vector<TensorDescriptor>& manifest) {
    nlohmann::json arr = nlohmann::json::array();
    for (const TensorDescriptor& d : manifest)
        arr.push_back({{"target", target_name(d.target)},
                       {"which", std::string(1, d.which)},
                       {"rows", d.rows},
                       {"cols", d.cols}});
    return arr;
}

inline std::vector<TensorDescriptor> manifest_from_json(const nlohmann::json& arr) {
    std::vector<TensorDescriptor> manifest;
    for (const auto& item : arr) {
        TensorDescriptor d;
        d.target = target_from_name(item.at("target").get<std::string>());
        const std::string which = item.at("which").get<std::string>();
        if (which != "A" && which != "B")
            throw ProtocolError("manifest: bad tensor name " + which);
        d.which = which[0];
        d.rows = item.at("rows").get<std::uint32_t>();
        d.cols = item.at("cols").get<std::uint32_t>();
        manifest.push_back(d);
    }
    return manifest;
}

inline std::size_t manifest_payload_bytes(const std::vector<TensorDescriptor>& manifest) {
    std::size_t total = 0;
    for (const TensorDescriptor& d : manifest)
        total += static_cast<std::size_t>(d.rows) * d.cols * 4;
    return total;
}

// Appends the matrix as little-endian f32, row-major. This is the only place
// values narrow below f64.
inline void pack_f32(const Matrix& m, Bytes& out) {
    for (std::size_t i = 0; i < m.size(); ++i) {
        const float f = static_cast<float>(m.data()[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        out.push_back(static_cast<std::uint8_t>(bits));
        out.push_back(static_cast<std::uint8_t>(bits >> 8));
        out.push_back(static_cast<std::uint8_t>(bits >> 16));
        out.push_back(static_cast<std::uint8_t>(bits >> 24));
    }
}

inline Matrix unpack_f32(const std::uint8_t* data, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(data[4 * i]) |
                                   (static_cast<std::uint32_t>(data[4 * i + 1]) << 8) |
                                   (static_cast<std::uint32_t>(data[4 * i + 2]) << 16) |
                                   (static_cast<std::uint32_t>(data[4 * i + 3]) << 24);
        float f;
        std::memcpy(&f, &bits, 4);
        m.data()[i] = static_cast<double>(f);
    }
    return m;
}

// Manifest order is fixed: targets ascending, A before B.
inline std::pair<std::vector<TensorDescriptor>, Bytes> pack_adapters(const AdapterSet& set) {
    std::vector<TensorDescriptor> manifest;
    Bytes block;
    for (const auto& [t, p] : set.pairs) {
        manifest.push_back({t, 'A', static_cast<std::uint32_t>(p.a.rows()),
                            static_cast<std::uint32_t>(p.a.cols())});
        pack_f32(p.a, block);
        manifest.push_back({t, 'B', static_cast<std::uint32_t>(p.b.rows()),
                            static_cast<std::uint32_t>(p.b.cols())});
        pack_f32(p.b, block);
    }
    return {std::move(manifest), std::move(block)};
}

inline AdapterSet unpack_adapters(const std::vector<TensorDescriptor>& manifest,
                                  const Bytes& block, std::size_t rank, double alpha,
                                  ScalingMode mode) {
    if (manifest_payload_bytes(manifest) != block.size())
        throw FramingError("adapters: tensor block length does not match manifest");
    AdapterSet set;
    set.scaling_mode = mode;
    std::size_t offset = 0;
    for (const TensorDescriptor& d : manifest) {
        AdapterPair& p = set.pairs[d.target];
        p.target = d.target;
        p.rank = rank;
        p.alpha = alpha;
        Matrix m = unpack_f32(block.data() + offset, d.rows, d.cols);
        offset += static_cast<std::size_t>(d.rows) * d.cols * 4;
        if (d.which == 'A')
            p.a = std::move(m);
        else
            p.b = std::move(m);
    }
    for (const auto& [t, p] : set.pairs)
        if (p.a.empty() || p.b.empty() || p.a.rows() != rank || p.b.cols() != rank)
            throw ProtocolError(std::string("adapters: incomplete pair for target ") +
                                target_name(t));
    return set;
}

// Exact bytes a client signs: round, client id, and sample count (u64 BE
// each) followed by the tensor block exactly as it crosses the wire.
inline Bytes canonical_update_bytes(std::uint64_t round, int client_id,
                                    std::uint64_t n_k, const Bytes& tensor_block) {
    Bytes out;
    out.reserve(24 + tensor_block.size());
    detail::put_u64_be(out, round);
    detail::put_u64_be(out, static_cast<std::uint64_t>(client_id));
    detail::put_u64_be(out, n_k);
    out.insert(out.end(), tensor_block.begin(), tensor_block.end());
    return out;
}

namespace detail {

inline void check_required_headers(const Message& msg) {
    if (msg.kind == MessageKind::update) {
        if (!msg.extra.contains("n_k") || !msg.extra.contains("signature"))
            throw ProtocolError("UPDATE requires n_k and signature headers");
    }
    if (msg.kind == MessageKind::round_start) {
        if (!msg.extra.contains("scaling_mode") || !msg.extra.contains("alpha") ||
            !msg.extra.contains("rank"))
            throw ProtocolError("ROUND_START requires scaling_mode, alpha and rank");
    }
    if (kind_carries_tensors(msg.kind)) {
        if (manifest_payload_bytes(msg.manifest) != msg.tensor_payload.size())
            throw FramingError("tensor payload length does not match the manifest");
    } else if (!msg.tensor_payload.empty() || !msg.manifest.empty()) {
        throw ProtocolError(std::string(message_kind_name(msg.kind)) +
                            " must not carry tensors");
    }
}

} // namespace detail

inline Bytes encode(const Message& msg) {
    detail::check_required_headers(msg);
    nlohmann::json header = msg.extra;
    header["kind"] = message_kind_name(msg.kind);
    header["round"] = msg.round;
    header["sender_id"] = msg.sender_id;
    if (kind_carries_tensors(msg.kind))
        header["tensor_manifest"] = manifest_to_json(msg.manifest);
    const std::string header_text = header.dump();

    Bytes frame;
    detail::put_u32_be(frame, static_cast<std::uint32_t>(header_text.size()));
    frame.insert(frame.end(), header_text.begin(), header_text.end());
    frame.insert(frame.end(), msg.tensor_payload.begin(), msg.tensor_payload.end());

    Bytes wire;
    detail::put_u32_be(wire, static_cast<std::uint32_t>(frame.size()));
    wire.insert(wire.end(), frame.begin(), frame.end());
    return wire;
}

inline Message decode(const Bytes& wire) {
    if (wire.size() < 4) throw FramingError("frame shorter than its length prefix");
    const std::size_t frame_len = detail::get_u32_be(wire.data());
    if (frame_len > detail::kMaxFrameBytes) throw FramingError("frame length too large");
    if (wire.size() != 4 + frame_len)
        throw FramingError("frame truncated: expected " + std::to_string(frame_len) +
                           " bytes, got " + std::to_string(wire.size() - 4));
    if (frame_len < 4) throw FramingError("frame missing header length");
    const std::size_t header_len = detail::get_u32_be(wire.data() + 4);
    if (header_len + 4 > frame_len) throw FramingError("header length exceeds frame");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(wire.begin() + 8,
                                       wire.begin() + 8 + static_cast<long>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FramingError(std::string("header is not valid JSON: ") + e.what());
    }

    Message msg;
    msg.kind = message_kind_from_name(header.at("kind").get<std::string>());
    msg.round = header.at("round").get<std::uint64_t>();
    msg.sender_id = header.at("sender_id").get<int>();
    if (header.contains("tensor_manifest"))
        msg.manifest = manifest_from_json(header.at("tensor_manifest"));
    msg.tensor_payload.assign(wire.begin() + 8 + static_cast<long>(header_len),
                              wire.end());

    header.erase("kind");
    header.erase("round");
    header.erase("sender_id");
    header.erase("tensor_manifest");
    msg.extra = std::move(header);

    detail::check_required_headers(msg);
    return msg;
}

// ---------------------------------------------------------------------------
// Adapter files reuse the frame layout with a standalone header, so the eval
// CLI reads the same bytes the wire carries.

inline void save_bytes(const std::string& path, const Bytes& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
}

inline Bytes load_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read " + path);
    return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline Bytes adapters_to_bytes(const AdapterSet& set) {
    if (set.pairs.empty()) throw InputError("adapters_to_bytes: empty adapter set");
    const AdapterPair& first = set.pairs.begin()->second;
    auto [manifest, block] = pack_adapters(set);
    nlohmann::json header = {{"format", "fedlora-adapters"},
                             {"rank", first.rank},
                             {"alpha", first.alpha},
                             {"scaling_mode", scaling_mode_name(set.scaling_mode)},
                             {"tensor_manifest", manifest_to_json(manifest)}};
    const std::string header_text = header.dump();
    Bytes frame;
    detail::put_u32_be(frame, static_cast<std::uint32_t>(header_text.size()));
    frame.insert(frame.end(), header_text.begin(), header_text.end());
    frame.insert(frame.end(), block.begin(), block.end());
    return frame;
}

inline void save_adapters(const std::string& path, const AdapterSet& set) {
    save_bytes(path, adapters_to_bytes(set));
}

inline AdapterSet load_adapters(const std::string& path) {
    const Bytes frame = load_bytes(path);
    if (frame.size() < 4) throw FramingError("adapter file shorter than header length");
    const std::size_t header_len = detail::get_u32_be(frame.data());
    if (header_len + 4 > frame.size())
        throw FramingError("adapter file header exceeds file size");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(frame.begin() + 4,
                                       frame.begin() + 4 + static_cast<long>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FramingError(std::string("adapter header is not valid JSON: ") + e.what());
    }
    if (header.value("format", "") != "fedlora-adapters")
        throw ProtocolError("not an adapter file: " + path);
    const Bytes block(frame.begin() + 4 + static_cast<long>(header_len), frame.end());
    return unpack_adapters(manifest_from_json(header.at("tensor_manifest")), block,
                           header.at("rank").get<std::size_t>(),
                           header.at("alpha").get<double>(),
                           scaling_mode_from_name(header.at("scaling_mode")));
}

// Round-trips an adapter set through the wire encoding; training resumes
// from exactly these values after any exchange.
inline AdapterSet quantize_adapters(const AdapterSet& set) {
    if (set.pairs.empty()) return set;
    auto [manifest, block] = pack_adapters(set);
    const AdapterPair& first = set.pairs.begin()->second;
    return unpack_adapters(manifest, block, first.rank, first.alpha, set.scaling_mode);
}

} // namespace fedlora
