#include "stgl/retrieval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <unordered_set>

#include "stgl/error.hpp"
#include "stgl/nn/checkpoint.hpp"

namespace stgl {

static_assert(std::endian::native == std::endian::little, "index I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'T', 'G', 'L'};
constexpr std::size_t kHeaderBytes = 20;
constexpr std::size_t kFingerprintBytes = 64;

template <typename T>
void put(std::vector<unsigned char>& buf, const T& v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
}

template <typename T>
void put_all(std::vector<unsigned char>& buf, const std::vector<T>& v) {
    const auto* p = reinterpret_cast<const unsigned char*>(v.data());
    buf.insert(buf.end(), p, p + v.size() * sizeof(T));
}

class Reader {
public:
    Reader(const std::vector<unsigned char>& b, std::string what) : b_(b), what_(std::move(what)) {}
    template <typename T>
    T get() {
        T v;
        take(&v, sizeof(T));
        return v;
    }
    void take(void* dst, std::size_t n) {
        if (n > b_.size() - pos_) throw FormatError(what_ + ": truncated file");
        std::memcpy(dst, b_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t pos() const { return pos_; }

private:
    const std::vector<unsigned char>& b_;
    std::string what_;
    std::size_t pos_ = 0;
};

RetrievalResult top_k(const DescriptorIndex& index, std::span<const float> q, int k,
                      const std::vector<std::size_t>& rows) {
    std::vector<Neighbor> cands;
    cands.reserve(rows.size());
    for (auto r : rows) cands.push_back({index.tile_ids[r], index.positions[r], sgm::descriptor_distance(q, index.row(r)), r});
    const std::size_t take = std::min(cands.size(), static_cast<std::size_t>(k));
    std::partial_sort(cands.begin(), cands.begin() + take, cands.end(), [](const Neighbor& a, const Neighbor& b) {
        return a.distance != b.distance ? a.distance < b.distance : a.tile_id < b.tile_id;
    });
    cands.resize(take);
    return {std::move(cands), false};
}

void check_query(const DescriptorIndex& index, std::span<const float> q, int k) {
    if (k < 1) throw InputError("knn: k must be >= 1 (got " + std::to_string(k) + ")");
    if (index.size() == 0) throw InputError("knn: empty index");
    if (static_cast<int>(q.size()) != index.c_final) {
        throw InputError("knn: query dimension " + std::to_string(q.size()) + " != index " +
                         std::to_string(index.c_final));
    }
}

} // namespace

void DescriptorIndex::validate() const {
    if (c_final < 1) throw InputError("index: c_final must be >= 1");
    if (descriptors.size() != size() * static_cast<std::size_t>(c_final) || positions.size() != size()) {
        throw InputError("index: descriptor, position and id counts differ");
    }
    if (model_fingerprint.size() > kFingerprintBytes) throw InputError("index: fingerprint longer than 64 bytes");
    std::unordered_set<std::int64_t> seen;
    for (auto id : tile_ids) {
        if (!seen.insert(id).second) throw InputError("index: duplicate tile_id " + std::to_string(id));
    }
    for (std::size_t i = 0; i < size(); ++i) {
        double sq = 0.0;
        for (float v : row(i)) {
            if (!std::isfinite(v)) throw InputError("index: non-finite descriptor in row " + std::to_string(i));
            sq += static_cast<double>(v) * v;
        }
        if (sq != 0.0 && std::fabs(std::sqrt(sq) - 1.0) > 1e-4) {
            throw InputError("index: row " + std::to_string(i) + " is not unit-norm");
        }
    }
}

DescriptorIndex make_index(int c_final, std::vector<float> descriptors, std::vector<Vec2> positions,
                           std::vector<std::int64_t> tile_ids, std::string fingerprint) {
    DescriptorIndex idx{c_final, std::move(descriptors), std::move(positions), std::move(tile_ids),
                        std::move(fingerprint)};
    idx.validate();
    return idx;
}

DescriptorIndex build_index(sgm::SgmNetwork& model, const std::vector<GeoTile>& db_tiles) {
    if (db_tiles.empty()) throw InputError("build_index: no database tiles");
    std::vector<std::size_t> order(db_tiles.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return db_tiles[a].tile_id < db_tiles[b].tile_id; });
    std::vector<const Image*> images;
    for (auto i : order) images.push_back(&db_tiles[i].image);
    const auto descs = sgm::embed_all(model, images);
    DescriptorIndex idx;
    idx.c_final = model.config().c_final;
    idx.model_fingerprint = nn::fingerprint(model);
    std::size_t degenerate = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        idx.descriptors.insert(idx.descriptors.end(), descs[i].values.begin(), descs[i].values.end());
        idx.positions.push_back(db_tiles[order[i]].position);
        idx.tile_ids.push_back(db_tiles[order[i]].tile_id);
        degenerate += descs[i].degenerate;
    }
    if (degenerate) spdlog::warn("build_index: {} degenerate (zero) descriptors", degenerate);
    idx.validate();
    return idx;
}

RetrievalResult knn(const DescriptorIndex& index, std::span<const float> q, int k) {
    check_query(index, q, k);
    if (static_cast<std::size_t>(k) > index.size()) {
        spdlog::warn("knn: k = {} exceeds index size {}; returning all", k, index.size());
    }
    std::vector<std::size_t> rows(index.size());
    std::iota(rows.begin(), rows.end(), 0);
    return top_k(index, q, k, rows);
}

RetrievalResult knn_within(const DescriptorIndex& index, std::span<const float> q, int k, const Vec2& center,
                           double radius_m) {
    check_query(index, q, k);
    if (!(radius_m > 0.0)) throw InputError("knn_within: radius must be positive");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (distance(index.positions[i], center) <= radius_m) rows.push_back(i);
    }
    if (rows.empty()) return {{}, true};
    return top_k(index, q, k, rows);
}

void save_index(const DescriptorIndex& index, const std::filesystem::path& path) {
    index.validate();
    std::vector<unsigned char> buf;
    buf.insert(buf.end(), kMagic, kMagic + 4);
    put(buf, kIndexVersion);
    put(buf, static_cast<std::uint32_t>(index.c_final));
    put(buf, static_cast<std::uint64_t>(index.size()));
    put_all(buf, index.descriptors);
    for (const auto& p : index.positions) {
        put(buf, p.x);
        put(buf, p.y);
    }
    for (auto id : index.tile_ids) put(buf, static_cast<std::uint64_t>(id));
    char fp[kFingerprintBytes] = {};
    std::memcpy(fp, index.model_fingerprint.data(), index.model_fingerprint.size());
    buf.insert(buf.end(), fp, fp + kFingerprintBytes);
    put(buf, crc32_of(std::span(buf).subspan(kHeaderBytes)));
    write_file_atomic(path, buf);
}

DescriptorIndex load_index(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open index " + path.string());
    const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string what = path.string();
    Reader r(buf, what);
    char magic[4];
    r.take(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(what + ": not a descriptor index (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kIndexVersion) {
        throw FormatError(what + ": unsupported index version " + std::to_string(version) + " (expected " +
                          std::to_string(kIndexVersion) + ")");
    }
    const auto c_final = r.get<std::uint32_t>();
    const auto n = r.get<std::uint64_t>();
    if (c_final == 0 || c_final > (1u << 24)) throw FormatError(what + ": implausible c_final");
    const std::size_t expected = kHeaderBytes + n * (c_final * 4 + 16 + 8) + kFingerprintBytes + 4;
    if (n > buf.size() || buf.size() != expected) {
        throw FormatError(what + ": truncated or oversized file (" + std::to_string(buf.size()) + " bytes, expected " +
                          std::to_string(expected) + ")");
    }
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
    const auto crc = crc32_of(std::span(buf).subspan(kHeaderBytes, buf.size() - kHeaderBytes - 4));
    if (crc != stored_crc) throw FormatError(what + ": checksum mismatch (corrupted payload)");

    DescriptorIndex idx;
    idx.c_final = static_cast<int>(c_final);
    idx.descriptors.resize(n * c_final);
    r.take(idx.descriptors.data(), idx.descriptors.size() * sizeof(float));
    idx.positions.resize(n);
    for (auto& p : idx.positions) {
        p.x = r.get<double>();
        p.y = r.get<double>();
    }
    idx.tile_ids.resize(n);
    for (auto& id : idx.tile_ids) id = static_cast<std::int64_t>(r.get<std::uint64_t>());
    char fp[kFingerprintBytes];
    r.take(fp, kFingerprintBytes);
    idx.model_fingerprint.assign(fp, strnlen(fp, kFingerprintBytes));
    return idx;
}

} // namespace stgl
