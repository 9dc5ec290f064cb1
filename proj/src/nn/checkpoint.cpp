#include "stgl/nn/checkpoint.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "stgl/error.hpp"

namespace stgl {

std::uint32_t crc32_of(std::span<const unsigned char> bytes, std::uint32_t seed) {
    uLong crc = seed;
    // zlib takes uInt lengths; feed in chunks.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
        crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
        off += n;
    }
    return static_cast<std::uint32_t>(crc);
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("SHA-256 digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

} // namespace stgl

namespace stgl::nn {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

constexpr char kMagic[4] = {'S', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::vector<unsigned char>& buf, const T& v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
}

class Reader {
public:
    Reader(std::span<const unsigned char> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <typename T>
    T get() {
        T v;
        std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
        return v;
    }

    std::span<const unsigned char> take(std::size_t n) {
        if (n > bytes_.size() - pos_) throw FormatError(what_ + ": truncated file");
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }

private:
    std::span<const unsigned char> bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::vector<unsigned char> buf(kMagic, kMagic + 4);
    put(buf, kVersion);
    const std::string header = ckpt.meta.dump();
    put(buf, static_cast<std::uint64_t>(header.size()));
    buf.insert(buf.end(), header.begin(), header.end());
    put(buf, static_cast<std::uint32_t>(ckpt.arrays.size()));
    for (const auto& [name, values] : ckpt.arrays) {
        put(buf, static_cast<std::uint32_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        put(buf, static_cast<std::uint64_t>(values.size()));
        const auto* p = reinterpret_cast<const unsigned char*>(values.data());
        buf.insert(buf.end(), p, p + values.size() * sizeof(double));
    }
    put(buf, crc32_of(buf));
    write_file_atomic(path, buf);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_all(path);
    const std::string what = path.string();
    Reader r(bytes, what);
    auto magic = r.take(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError(what + ": not a checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) {
        throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version));
    }
    if (bytes.size() < 4) throw FormatError(what + ": truncated file");
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (crc32_of(std::span(bytes).first(bytes.size() - 4)) != stored) {
        throw FormatError(what + ": checksum mismatch");
    }

    Checkpoint ckpt;
    const auto hlen = r.get<std::uint64_t>();
    auto h = r.take(hlen);
    ckpt.meta = nlohmann::json::parse(h.begin(), h.end());
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nlen = r.get<std::uint32_t>();
        auto nb = r.take(nlen);
        std::string name(nb.begin(), nb.end());
        const auto n = r.get<std::uint64_t>();
        auto vb = r.take(n * sizeof(double));
        std::vector<double> values(n);
        std::memcpy(values.data(), vb.data(), vb.size());
        ckpt.arrays.emplace(std::move(name), std::move(values));
    }
    return ckpt;
}

void export_state(Module& module, const std::string& prefix, Checkpoint& ckpt) {
    for (const auto& [name, p] : module.named_parameters()) {
        ckpt.arrays[prefix + name] = std::vector<double>(p.values().begin(), p.values().end());
    }
    for (const auto& b : module.named_buffers()) ckpt.arrays[prefix + b.name] = *b.data;
}

void import_state(Module& module, const std::string& prefix, const Checkpoint& ckpt) {
    auto fetch = [&](const std::string& name, std::size_t size) -> const std::vector<double>& {
        auto it = ckpt.arrays.find(prefix + name);
        if (it == ckpt.arrays.end()) throw FormatError("checkpoint missing array '" + prefix + name + "'");
        if (it->second.size() != size) {
            throw FormatError("checkpoint array '" + prefix + name + "' has " + std::to_string(it->second.size()) +
                              " values, model expects " + std::to_string(size));
        }
        return it->second;
    };
    for (auto& [name, p] : module.named_parameters()) {
        const auto& src = fetch(name, p.numel());
        std::copy(src.begin(), src.end(), p.mutable_values().begin());
    }
    for (auto& b : module.named_buffers()) *b.data = fetch(b.name, b.data->size());
}

std::string fingerprint(Module& module) {
    std::vector<unsigned char> buf;
    auto append = [&](const std::string& name, std::span<const double> v) {
        buf.insert(buf.end(), name.begin(), name.end());
        const auto* p = reinterpret_cast<const unsigned char*>(v.data());
        buf.insert(buf.end(), p, p + v.size() * sizeof(double));
    };
    for (const auto& [name, p] : module.named_parameters()) append(name, p.values());
    for (const auto& b : module.named_buffers()) append(b.name, *b.data);
    return sha256_hex(buf);
}

} // namespace stgl::nn
