#include "wsclip/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "wsclip/errors.hpp"

namespace wsclip {

namespace {

constexpr char kMagic[8] = {'W', 'S', 'C', 'K', 'P', 'T', '0', '\n'};
constexpr std::uint8_t kDtypeF64 = 0;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    explicit Reader(const std::string& b) : buf(b) {}

    void need(size_t n) const {
        if (pos + n > buf.size())
            throw IntegrityError("checkpoint: truncated file (need " + std::to_string(n) +
                                 " bytes at offset " + std::to_string(pos) + ")");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string out = buf.substr(pos, n);
        pos += n;
        return out;
    }
};

std::string payload_bytes(const Tensor& t) {
    std::string out;
    out.reserve(static_cast<size_t>(t.size()) * 8);
    for (double d : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(d));
    return out;
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "' for hashing");
    std::uint64_t h = 14695981039346656037ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    }
    return h;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string out(kMagic, sizeof(kMagic));
    put_u32(out, kCheckpointVersion);
    const std::string cfg = ckpt.config.to_text();
    put_u64(out, cfg.size());
    out += cfg;
    put_u64(out, ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        out += static_cast<char>(kDtypeF64);
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put_u64(out, static_cast<std::uint64_t>(d));
        const std::string payload = payload_bytes(t);
        out += payload;
        put_u64(out, fnv1a64(payload.data(), payload.size()));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw InputError("failed writing '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open '" + path + "' for reading");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r(buf);

    const std::string magic = r.bytes(sizeof(kMagic));
    if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0)
        throw FormatError("checkpoint: bad magic in '" + path + "'");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: file version " + std::to_string(version) +
                          ", reader supports version " + std::to_string(kCheckpointVersion));

    Checkpoint ckpt;
    const std::uint64_t cfg_len = r.u64();
    ckpt.config = KeyValueConfig::parse_string(r.bytes(cfg_len));

    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        const std::string name = r.bytes(name_len);
        const auto dtype = static_cast<std::uint8_t>(r.bytes(1)[0]);
        if (dtype != kDtypeF64)
            throw FormatError("checkpoint: tensor '" + name + "' has unknown dtype tag " +
                              std::to_string(dtype));
        const std::uint32_t rank = r.u32();
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d)
            shape.push_back(static_cast<std::int64_t>(r.u64()));
        const std::uint64_t count_elems = static_cast<std::uint64_t>(numel(shape));
        const std::string payload = r.bytes(count_elems * 8);
        const std::uint64_t stored = r.u64();
        const std::uint64_t computed = fnv1a64(payload.data(), payload.size());
        if (stored != computed)
            throw IntegrityError("checkpoint: checksum mismatch for tensor '" + name + "'");
        std::vector<double> values(count_elems);
        for (std::uint64_t e = 0; e < count_elems; ++e) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<std::uint64_t>(
                            static_cast<unsigned char>(payload[e * 8 + b]))
                        << (8 * b);
            values[e] = std::bit_cast<double>(bits);
        }
        ckpt.tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
    }
    if (r.pos != buf.size())
        throw IntegrityError("checkpoint: " + std::to_string(buf.size() - r.pos) +
                             " trailing bytes");
    return ckpt;
}

}  // namespace wsclip
