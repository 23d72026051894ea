#include "essc/voxio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "essc/common.hpp"

namespace essc {

SemGrid SemGrid::filled(std::array<uint32_t, 3> dims, uint32_t num_semantic_classes,
                        uint16_t label, bool valid) {
    SemGrid g;
    g.dims = dims;
    g.num_semantic_classes = num_semantic_classes;
    g.labels.assign(g.voxel_count(), label);
    g.valid.assign(g.voxel_count(), valid ? 1 : 0);
    g.check();
    return g;
}

void SemGrid::check() const {
    const std::size_t n = voxel_count();
    require(n > 0, "SemGrid", "empty dimensions");
    require(labels.size() == n, "SemGrid",
            "label count " + std::to_string(labels.size()) + " does not match " + std::to_string(n) +
                " voxels");
    require(valid.size() == n, "SemGrid", "validity mask size mismatch");
    for (std::size_t i = 0; i < n; ++i)
        require(labels[i] <= num_semantic_classes, "SemGrid",
                "label " + std::to_string(labels[i]) + " exceeds class bound " +
                    std::to_string(num_semantic_classes) + " at voxel " + std::to_string(i));
}

void TextEmbedding::check() const {
    require(!global.empty(), "TextEmbedding", "global vector must be nonempty");
    require(token_count >= 1 && token_dim >= 1, "TextEmbedding", "token matrix must be nonempty");
    require(tokens.size() == token_count * token_dim, "TextEmbedding", "token matrix size mismatch");
    for (double v : global)
        require(std::isfinite(v), "TextEmbedding", "non-finite entry in global vector");
    for (double v : tokens)
        require(std::isfinite(v), "TextEmbedding", "non-finite entry in token matrix");
}

// ---- bit packing --------------------------------------------------------------

std::vector<uint8_t> unpack_bits(const std::vector<uint8_t>& bytes, std::size_t voxel_count) {
    require(bytes.size() == (voxel_count + 7) / 8, "unpack_bits",
            "expected " + std::to_string((voxel_count + 7) / 8) + " bytes for " +
                std::to_string(voxel_count) + " voxels, got " + std::to_string(bytes.size()));
    std::vector<uint8_t> flags(voxel_count);
    for (std::size_t i = 0; i < voxel_count; ++i)
        flags[i] = (bytes[i / 8] >> (7 - i % 8)) & 1;
    return flags;
}

std::vector<uint8_t> pack_bits(const std::vector<uint8_t>& flags) {
    std::vector<uint8_t> bytes((flags.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < flags.size(); ++i)
        if (flags[i]) bytes[i / 8] |= uint8_t(1u << (7 - i % 8));
    return bytes;
}

// ---- SemanticKITTI ------------------------------------------------------------

SemGrid read_semkitti_voxels(const std::vector<uint8_t>& label_bytes,
                             const std::vector<uint8_t>& invalid_bytes,
                             const std::map<uint16_t, uint16_t>& remap) {
    const std::size_t n =
        std::size_t(kSemKittiDims[0]) * kSemKittiDims[1] * kSemKittiDims[2];
    require(label_bytes.size() == n * 2, "read_semkitti_voxels",
            "label payload must be " + std::to_string(n * 2) + " bytes, got " +
                std::to_string(label_bytes.size()));
    require(invalid_bytes.size() == n / 8, "read_semkitti_voxels",
            "invalid payload must be " + std::to_string(n / 8) + " bytes, got " +
                std::to_string(invalid_bytes.size()));
    require(!remap.empty(), "read_semkitti_voxels", "remap table is empty");
    uint16_t max_class = 0;
    std::vector<int32_t> table(65536, -1);
    for (const auto& [raw, mapped] : remap) {
        max_class = std::max(max_class, mapped);
        table[raw] = mapped;
    }

    SemGrid g;
    g.dims = kSemKittiDims;
    g.num_semantic_classes = max_class;
    g.labels.resize(n);
    auto invalid = unpack_bits(invalid_bytes, n);
    g.valid.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const uint16_t raw = get_u16(label_bytes.data() + 2 * i);
        const int32_t mapped = table[raw];
        if (mapped < 0)
            fail("read_semkitti_voxels",
                 "raw label " + std::to_string(raw) + " at voxel " + std::to_string(i) +
                     " has no remap entry");
        g.labels[i] = uint16_t(mapped);
        g.valid[i] = invalid[i] ? 0 : 1;
    }
    g.check();
    return g;
}

void write_semkitti_voxels(const SemGrid& grid, std::vector<uint8_t>& label_bytes,
                           std::vector<uint8_t>& invalid_bytes) {
    require(grid.dims == kSemKittiDims, "write_semkitti_voxels",
            "grid dims must be 256x256x32");
    grid.check();
    const std::size_t n = grid.voxel_count();
    label_bytes.clear();
    label_bytes.reserve(n * 2);
    std::vector<uint8_t> invalid(n);
    for (std::size_t i = 0; i < n; ++i) {
        put_u16(label_bytes, grid.labels[i]);
        invalid[i] = grid.valid[i] ? 0 : 1;
    }
    invalid_bytes = pack_bits(invalid);
}

// ---- desk-scale grid format -----------------------------------------------------

namespace {

constexpr char kGridMagic[8] = {'E', 'S', 'S', 'C', 'G', 'R', 'I', 'D'};
constexpr char kTextMagic[8] = {'E', 'S', 'S', 'C', 'T', 'E', 'X', 'T'};
constexpr uint32_t kFormatVersion = 1;

void check_header(const std::vector<uint8_t>& bytes, const char magic[8], const char* what) {
    require(bytes.size() >= 12, what, "file truncated before header");
    require(std::equal(magic, magic + 8, bytes.begin()), what, "bad magic");
    const uint32_t version = get_u32(bytes.data() + 8);
    require(version == kFormatVersion, what,
            "unsupported version " + std::to_string(version));
}

}  // namespace

std::vector<uint8_t> write_grid_simple(const SemGrid& grid) {
    grid.check();
    std::vector<uint8_t> out(kGridMagic, kGridMagic + 8);
    put_u32(out, kFormatVersion);
    put_u32(out, grid.dims[0]);
    put_u32(out, grid.dims[1]);
    put_u32(out, grid.dims[2]);
    put_u32(out, grid.num_semantic_classes);
    for (uint16_t l : grid.labels) put_u16(out, l);
    auto packed = pack_bits(grid.valid);
    out.insert(out.end(), packed.begin(), packed.end());
    return out;
}

SemGrid read_grid_simple(const std::vector<uint8_t>& bytes) {
    check_header(bytes, kGridMagic, "read_grid_simple");
    require(bytes.size() >= 28, "read_grid_simple", "file truncated in header");
    SemGrid g;
    g.dims = {get_u32(bytes.data() + 12), get_u32(bytes.data() + 16), get_u32(bytes.data() + 20)};
    g.num_semantic_classes = get_u32(bytes.data() + 24);
    require(g.dims[0] > 0 && g.dims[1] > 0 && g.dims[2] > 0, "read_grid_simple", "zero extent");
    const std::size_t n = g.voxel_count();
    const std::size_t expect = 28 + 2 * n + (n + 7) / 8;
    require(bytes.size() == expect, "read_grid_simple",
            "payload size " + std::to_string(bytes.size()) + " does not match header (expected " +
                std::to_string(expect) + ")");
    g.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) g.labels[i] = get_u16(bytes.data() + 28 + 2 * i);
    std::vector<uint8_t> packed(bytes.begin() + 28 + 2 * n, bytes.end());
    g.valid = unpack_bits(packed, n);
    g.check();  // rejects labels above the header's class bound
    return g;
}

// ---- text embedding ----------------------------------------------------------

std::vector<uint8_t> write_text_embedding(const TextEmbedding& e) {
    e.check();
    std::vector<uint8_t> out(kTextMagic, kTextMagic + 8);
    put_u32(out, kFormatVersion);
    put_u32(out, uint32_t(e.global.size()));
    put_u32(out, uint32_t(e.token_count));
    put_u32(out, uint32_t(e.token_dim));
    for (double v : e.global) put_f64(out, v);
    for (double v : e.tokens) put_f64(out, v);
    return out;
}

TextEmbedding read_text_embedding(const std::vector<uint8_t>& bytes) {
    check_header(bytes, kTextMagic, "read_text_embedding");
    require(bytes.size() >= 24, "read_text_embedding", "file truncated in header");
    TextEmbedding e;
    const uint32_t d_g = get_u32(bytes.data() + 12);
    e.token_count = get_u32(bytes.data() + 16);
    e.token_dim = get_u32(bytes.data() + 20);
    require(d_g > 0, "read_text_embedding", "global width must be positive");
    require(e.token_count >= 1 && e.token_dim > 0, "read_text_embedding",
            "token matrix must be nonempty");
    const std::size_t expect = 24 + 8 * (d_g + e.token_count * e.token_dim);
    require(bytes.size() == expect, "read_text_embedding",
            "payload size " + std::to_string(bytes.size()) + " does not match header (expected " +
                std::to_string(expect) + ")");
    e.global.resize(d_g);
    for (uint32_t i = 0; i < d_g; ++i) e.global[i] = get_f64(bytes.data() + 24 + 8 * i);
    e.tokens.resize(e.token_count * e.token_dim);
    const std::size_t base = 24 + 8 * d_g;
    for (std::size_t i = 0; i < e.tokens.size(); ++i)
        e.tokens[i] = get_f64(bytes.data() + base + 8 * i);
    e.check();
    return e;
}

// ---- multi-scale targets -------------------------------------------------------

SemGrid downsample_labels_majority(const SemGrid& grid, uint32_t factor) {
    grid.check();
    require(factor == 2 || factor == 4 || factor == 8, "downsample_labels_majority",
            "factor must be one of {2, 4, 8}");
    for (int a = 0; a < 3; ++a)
        require(grid.dims[a] % factor == 0, "downsample_labels_majority",
                "axis " + std::to_string(a) + " extent " + std::to_string(grid.dims[a]) +
                    " not divisible by factor " + std::to_string(factor));
    SemGrid out;
    out.dims = {grid.dims[0] / factor, grid.dims[1] / factor, grid.dims[2] / factor};
    out.num_semantic_classes = grid.num_semantic_classes;
    out.labels.assign(out.voxel_count(), 0);
    out.valid.assign(out.voxel_count(), 0);
    std::vector<uint32_t> tally(grid.num_semantic_classes + 1);
    for (uint32_t x = 0; x < out.dims[0]; ++x)
        for (uint32_t y = 0; y < out.dims[1]; ++y)
            for (uint32_t z = 0; z < out.dims[2]; ++z) {
                std::fill(tally.begin(), tally.end(), 0);
                bool any_valid = false;
                for (uint32_t dx = 0; dx < factor; ++dx)
                    for (uint32_t dy = 0; dy < factor; ++dy)
                        for (uint32_t dz = 0; dz < factor; ++dz) {
                            const std::size_t i =
                                grid.index(x * factor + dx, y * factor + dy, z * factor + dz);
                            if (!grid.valid[i]) continue;
                            any_valid = true;
                            ++tally[grid.labels[i]];
                        }
                const std::size_t o = out.index(x, y, z);
                if (!any_valid) continue;  // stays invalid
                out.valid[o] = 1;
                uint16_t best = 0;
                uint32_t best_count = 0;
                for (uint16_t c = 1; c <= grid.num_semantic_classes; ++c)
                    if (tally[c] > best_count) {  // ties keep the smaller index
                        best_count = tally[c];
                        best = c;
                    }
                out.labels[o] = best_count > 0 ? best : 0;
            }
    return out;
}

// ---- files ---------------------------------------------------------------------

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "read_file", "cannot open '" + path + "'");
    f.seekg(0, std::ios::end);
    const std::streamoff len = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<uint8_t> bytes(static_cast<std::size_t>(len));
    if (len > 0) f.read(reinterpret_cast<char*>(bytes.data()), len);
    require(f.good(), "read_file", "short read on '" + path + "'");
    return bytes;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), "write_file", "cannot open '" + path + "' for writing");
    if (!bytes.empty()) f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    require(f.good(), "write_file", "short write on '" + path + "'");
}

SemGrid load_grid(const std::string& path) { return read_grid_simple(read_file(path)); }
void save_grid(const std::string& path, const SemGrid& grid) {
    write_file(path, write_grid_simple(grid));
}
TextEmbedding load_text_embedding(const std::string& path) {
    return read_text_embedding(read_file(path));
}
void save_text_embedding(const std::string& path, const TextEmbedding& e) {
    write_file(path, write_text_embedding(e));
}

}  // namespace essc
