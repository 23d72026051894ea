#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace essc {

// Dense semantic voxel grid. Labels run 0..C where 0 is empty and C is the
// semantic class count; valid marks known space. Linear index follows the
// benchmark convention i = x*(Y*Z) + y*Z + z.
struct SemGrid {
    std::array<uint32_t, 3> dims{0, 0, 0};  // X, Y, Z
    uint32_t num_semantic_classes = 0;      // C
    std::vector<uint16_t> labels;
    std::vector<uint8_t> valid;             // 1 = known

    std::size_t voxel_count() const {
        return std::size_t(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return (x * dims[1] + y) * dims[2] + z;
    }

    static SemGrid filled(std::array<uint32_t, 3> dims, uint32_t num_semantic_classes,
                          uint16_t label = 0, bool valid = true);
    void check() const;  // enforces the type invariants
};

// Precomputed text features: one scene-level vector plus a token matrix.
struct TextEmbedding {
    std::vector<double> global;            // [D_g]
    std::size_t token_count = 0;           // L
    std::size_t token_dim = 0;             // D_t
    std::vector<double> tokens;            // [L, D_t] row-major

    void check() const;
};

// ---- bit packing (MSB-first, benchmark convention) ---------------------------

std::vector<uint8_t> unpack_bits(const std::vector<uint8_t>& bytes, std::size_t voxel_count);
std::vector<uint8_t> pack_bits(const std::vector<uint8_t>& flags);

// ---- SemanticKITTI voxel files ------------------------------------------------

constexpr std::array<uint32_t, 3> kSemKittiDims = {256, 256, 32};

// label_bytes: X*Y*Z little-endian u16; invalid_bytes: X*Y*Z/8 packed bits
// (bit set = unknown). Raw labels pass through the remap table; an unmapped
// value is rejected.
SemGrid read_semkitti_voxels(const std::vector<uint8_t>& label_bytes,
                             const std::vector<uint8_t>& invalid_bytes,
                             const std::map<uint16_t, uint16_t>& remap);

void write_semkitti_voxels(const SemGrid& grid, std::vector<uint8_t>& label_bytes,
                           std::vector<uint8_t>& invalid_bytes);

// ---- desk-scale grid format ----------------------------------------------------

// "ESSCGRID" | u32 version=1 | u32 X, Y, Z, C | u16 labels | packed validity
std::vector<uint8_t> write_grid_simple(const SemGrid& grid);
SemGrid read_grid_simple(const std::vector<uint8_t>& bytes);

// ---- text embedding format ------------------------------------------------------

// "ESSCTEXT" | u32 version=1 | u32 D_g, L, D_t | f64 global | f64 tokens
std::vector<uint8_t> write_text_embedding(const TextEmbedding& e);
TextEmbedding read_text_embedding(const std::vector<uint8_t>& bytes);

// ---- multi-scale targets ---------------------------------------------------------

// Each factor^3 block becomes one voxel: majority class over valid nonempty
// children (ties to the smallest index); empty if only empty children are
// valid; invalid when no child is valid.
SemGrid downsample_labels_majority(const SemGrid& grid, uint32_t factor);

// ---- file helpers ----------------------------------------------------------------

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<uint8_t>& bytes);

SemGrid load_grid(const std::string& path);
void save_grid(const std::string& path, const SemGrid& grid);
TextEmbedding load_text_embedding(const std::string& path);
void save_text_embedding(const std::string& path, const TextEmbedding& e);

}  // namespace essc
