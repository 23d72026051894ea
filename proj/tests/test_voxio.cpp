#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "essc/common.hpp"
#include "essc/voxio.hpp"

using namespace essc;

namespace {

SemGrid random_grid(std::array<uint32_t, 3> dims, uint32_t classes, Rng& rng,
                    double invalid_frac = 0.2) {
    SemGrid g = SemGrid::filled(dims, classes);
    for (std::size_t i = 0; i < g.voxel_count(); ++i) {
        g.labels[i] = uint16_t(rng.below(classes + 1));
        g.valid[i] = rng.uniform() < invalid_frac ? 0 : 1;
    }
    return g;
}

}  // namespace

TEST_CASE("unpack_bits is MSB-first") {
    auto f1 = unpack_bits({0x80}, 8);
    CHECK(f1 == std::vector<uint8_t>{1, 0, 0, 0, 0, 0, 0, 0});
    auto f2 = unpack_bits({0x01}, 8);
    CHECK(f2 == std::vector<uint8_t>{0, 0, 0, 0, 0, 0, 0, 1});
    CHECK_THROWS_AS(unpack_bits({0x00, 0x00}, 8), std::invalid_argument);
}

TEST_CASE("pack_bits fixtures and round-trip property") {
    CHECK(pack_bits(std::vector<uint8_t>(8, 1)) == std::vector<uint8_t>{0xFF});
    CHECK(pack_bits(std::vector<uint8_t>(8, 0)) == std::vector<uint8_t>{0x00});
    Rng rng(41);
    for (int t = 0; t < 200; ++t) {
        std::vector<uint8_t> bytes(64);
        for (auto& b : bytes) b = uint8_t(rng.below(256));
        CHECK(pack_bits(unpack_bits(bytes, 64 * 8)) == bytes);
    }
    // trailing pad bits come back zero
    std::vector<uint8_t> flags = {1, 1, 1};
    CHECK(pack_bits(flags) == std::vector<uint8_t>{0xE0});
}

TEST_CASE("semkitti read handles trivial volumes") {
    const std::size_t n = 256ull * 256 * 32;
    std::map<uint16_t, uint16_t> remap;
    for (uint16_t i = 0; i < 20; ++i) remap[i] = i;
    std::vector<uint8_t> labels(n * 2, 0);
    std::vector<uint8_t> invalid(n / 8, 0);
    SemGrid g = read_semkitti_voxels(labels, invalid, remap);
    CHECK(g.dims == kSemKittiDims);
    CHECK(g.labels[0] == 0);
    CHECK(g.valid[12345] == 1);

    std::fill(invalid.begin(), invalid.end(), 0xFF);
    SemGrid g2 = read_semkitti_voxels(labels, invalid, remap);
    for (std::size_t i = 0; i < 100; ++i) CHECK(g2.valid[i] == 0);
}

TEST_CASE("semkitti rejects unmapped labels and wrong sizes") {
    const std::size_t n = 256ull * 256 * 32;
    std::map<uint16_t, uint16_t> remap{{0, 0}};
    std::vector<uint8_t> labels(n * 2, 0);
    labels[0] = 7;  // raw label 7 unmapped
    std::vector<uint8_t> invalid(n / 8, 0);
    CHECK_THROWS_WITH_AS(read_semkitti_voxels(labels, invalid, remap), doctest::Contains("7"),
                         std::invalid_argument);
    labels[0] = 0;
    std::vector<uint8_t> short_invalid(n / 8 - 1, 0);
    CHECK_THROWS_AS(read_semkitti_voxels(labels, short_invalid, remap), std::invalid_argument);
}

TEST_CASE("semkitti write fixtures and byte-exact round-trip") {
    SemGrid g = SemGrid::filled(kSemKittiDims, 19);
    std::vector<uint8_t> labels, invalid;
    write_semkitti_voxels(g, labels, invalid);
    CHECK(labels.size() == 4194304);
    CHECK(invalid.size() == 262144);
    for (uint8_t b : invalid) CHECK(b == 0);

    g.labels[g.index(0, 0, 0)] = 5;
    write_semkitti_voxels(g, labels, invalid);
    CHECK(labels[0] == 0x05);
    CHECK(labels[1] == 0x00);

    Rng rng(42);
    std::map<uint16_t, uint16_t> identity;
    for (uint16_t i = 0; i < 20; ++i) identity[i] = i;
    SemGrid r = random_grid(kSemKittiDims, 19, rng);
    std::vector<uint8_t> lb, ib;
    write_semkitti_voxels(r, lb, ib);
    SemGrid back = read_semkitti_voxels(lb, ib, identity);
    CHECK(back.labels == r.labels);
    CHECK(back.valid == r.valid);
    std::vector<uint8_t> lb2, ib2;
    write_semkitti_voxels(back, lb2, ib2);
    CHECK(lb2 == lb);
    CHECK(ib2 == ib);
}

TEST_CASE("simple grid format fixtures") {
    SemGrid g = SemGrid::filled({1, 1, 1}, 0);
    auto bytes = write_grid_simple(g);
    // header 28 bytes + one u16 label + one validity byte
    REQUIRE(bytes.size() == 31);
    CHECK(bytes[28] == 0x00);
    CHECK(bytes[29] == 0x00);
    SemGrid back = read_grid_simple(bytes);
    CHECK(back.dims == g.dims);
    CHECK(back.labels == g.labels);
}

TEST_CASE("simple grid round-trips exactly on random grids") {
    Rng rng(43);
    for (int t = 0; t < 100; ++t) {
        SemGrid g = random_grid({8, 8, 4}, 5, rng);
        auto bytes = write_grid_simple(g);
        SemGrid back = read_grid_simple(bytes);
        CHECK(back.dims == g.dims);
        CHECK(back.num_semantic_classes == g.num_semantic_classes);
        CHECK(back.labels == g.labels);
        CHECK(back.valid == g.valid);
        CHECK(write_grid_simple(back) == bytes);
    }
}

TEST_CASE("simple grid rejects labels above the header class bound") {
    SemGrid g = SemGrid::filled({2, 2, 2}, 3);
    g.labels[0] = 3;  // fine: C = 3 admits labels 0..3
    auto bytes = write_grid_simple(g);
    // lower the header's C below the max label
    bytes[24] = 2;
    CHECK_THROWS_AS(read_grid_simple(bytes), std::invalid_argument);
    // corrupt magic
    auto bad = write_grid_simple(g);
    bad[0] = 'X';
    CHECK_THROWS_AS(read_grid_simple(bad), std::invalid_argument);
}

TEST_CASE("text embedding zero fixture and truncation errors") {
    TextEmbedding e;
    e.global = {0.0, 0.0};
    e.token_count = 1;
    e.token_dim = 2;
    e.tokens = {0.0, 0.0};
    auto bytes = write_text_embedding(e);
    TextEmbedding back = read_text_embedding(bytes);
    CHECK(back.global == e.global);
    CHECK(back.tokens == e.tokens);
    bytes.pop_back();
    CHECK_THROWS_AS(read_text_embedding(bytes), std::invalid_argument);
}

TEST_CASE("text embedding round-trips random payloads") {
    Rng rng(44);
    for (int t = 0; t < 100; ++t) {
        TextEmbedding e;
        e.global.resize(1 + rng.below(8));
        for (auto& v : e.global) v = rng.uniform(-3.0, 3.0);
        e.token_count = 1 + rng.below(6);
        e.token_dim = 1 + rng.below(8);
        e.tokens.resize(e.token_count * e.token_dim);
        for (auto& v : e.tokens) v = rng.uniform(-3.0, 3.0);
        auto bytes = write_text_embedding(e);
        TextEmbedding back = read_text_embedding(bytes);
        CHECK(back.global == e.global);
        CHECK(back.token_count == e.token_count);
        CHECK(back.token_dim == e.token_dim);
        CHECK(back.tokens == e.tokens);
        CHECK(write_text_embedding(back) == bytes);
    }
}

TEST_CASE("text embedding accepts the 77x256 token layout") {
    TextEmbedding e;
    e.global.assign(512, 0.25);
    e.token_count = 77;
    e.token_dim = 256;
    e.tokens.assign(77 * 256, -0.5);
    TextEmbedding back = read_text_embedding(write_text_embedding(e));
    CHECK(back.token_count == 77);
    CHECK(back.token_dim == 256);
}

TEST_CASE("majority downsampling on uniform and empty blocks") {
    SemGrid g = SemGrid::filled({4, 4, 4}, 5, 3);
    SemGrid d = downsample_labels_majority(g, 2);
    CHECK(d.dims == std::array<uint32_t, 3>{2, 2, 2});
    for (std::size_t i = 0; i < d.voxel_count(); ++i) {
        CHECK(d.labels[i] == 3);
        CHECK(d.valid[i] == 1);
    }
    SemGrid empty = SemGrid::filled({4, 4, 4}, 5, 0);
    SemGrid de = downsample_labels_majority(empty, 2);
    for (std::size_t i = 0; i < de.voxel_count(); ++i) {
        CHECK(de.labels[i] == 0);
        CHECK(de.valid[i] == 1);
    }
    CHECK_THROWS_AS(downsample_labels_majority(SemGrid::filled({6, 6, 6}, 2), 4),
                    std::invalid_argument);
}

TEST_CASE("majority downsampling matches an exhaustive per-block tally") {
    Rng rng(45);
    for (int t = 0; t < 50; ++t) {
        SemGrid g = random_grid({4, 4, 4}, 4, rng, 0.35);
        SemGrid d = downsample_labels_majority(g, 2);
        for (uint32_t x = 0; x < 2; ++x)
            for (uint32_t y = 0; y < 2; ++y)
                for (uint32_t z = 0; z < 2; ++z) {
                    std::vector<int> tally(5, 0);
                    bool any_valid = false;
                    bool any_nonempty = false;
                    for (uint32_t dx = 0; dx < 2; ++dx)
                        for (uint32_t dy = 0; dy < 2; ++dy)
                            for (uint32_t dz = 0; dz < 2; ++dz) {
                                const std::size_t i =
                                    g.index(2 * x + dx, 2 * y + dy, 2 * z + dz);
                                if (!g.valid[i]) continue;
                                any_valid = true;
                                if (g.labels[i] > 0) {
                                    any_nonempty = true;
                                    ++tally[g.labels[i]];
                                }
                            }
                    const std::size_t o = d.index(x, y, z);
                    CHECK(d.valid[o] == (any_valid ? 1 : 0));
                    if (!any_valid) continue;
                    if (!any_nonempty) {
                        CHECK(d.labels[o] == 0);
                        continue;
                    }
                    int best = 0, best_count = 0;
                    for (int c = 1; c <= 4; ++c)
                        if (tally[c] > best_count) {
                            best_count = tally[c];
                            best = c;
                        }
                    CHECK(d.labels[o] == best);
                    // never emits a label absent from the block
                    CHECK(tally[d.labels[o]] > 0);
                }
    }
}
