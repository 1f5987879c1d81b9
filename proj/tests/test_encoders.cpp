#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "cxrgen/encoders.hpp"
#include "cxrgen/rng.hpp"
#include "cxrgen/tensor.hpp"
#include "doctest.h"

using namespace cxrgen;

namespace {

Tensor random_image(std::int64_t h, std::int64_t w, std::uint64_t seed) {
    Rng rng(seed);
    Tensor img = Tensor::zeros({h, w, 3});
    for (double& v : img.data()) v = rng.uniform();
    return img;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        if (a.data()[static_cast<std::size_t>(i)] != b.data()[static_cast<std::size_t>(i)]) return false;
    }
    return true;
}

std::string temp_path(const char* name) {
    return std::string("/tmp/cxrgen_test_") + name;
}

}  // namespace

TEST_SUITE("encoders") {

TEST_CASE("patch counts for known geometries") {
    CHECK(patchify(random_image(192, 192, 1), 16).shape() == Shape{144, 768});
    CHECK(patchify(random_image(224, 224, 2), 16).shape() == Shape{196, 768});
    CHECK(patchify(random_image(32, 32, 3), 16).shape() == Shape{4, 768});
    CHECK(patchify(random_image(64, 64, 4), 8).shape() == Shape{64, 192});
}

TEST_CASE("patchify is raster-ordered and channel-innermost") {
    // Encode coordinates in the pixel values to pin the exact layout.
    const std::int64_t h = 8, w = 12, p = 4;
    Tensor img = Tensor::zeros({h, w, 3});
    for (std::int64_t r = 0; r < h; ++r) {
        for (std::int64_t c = 0; c < w; ++c) {
            for (std::int64_t ch = 0; ch < 3; ++ch) {
                img.data()[static_cast<std::size_t>((r * w + c) * 3 + ch)] =
                    static_cast<double>(r * 10000 + c * 10 + ch);
            }
        }
    }
    Tensor patches = patchify(img, p);
    CHECK(patches.shape() == Shape{6, 48});
    // Patch (1, 2) covers rows 4..7, cols 8..11; raster index 1*3 + 2 = 5.
    for (std::int64_t dy = 0; dy < p; ++dy) {
        for (std::int64_t dx = 0; dx < p; ++dx) {
            for (std::int64_t ch = 0; ch < 3; ++ch) {
                const double got =
                    patches.data()[static_cast<std::size_t>(5 * 48 + (dy * p + dx) * 3 + ch)];
                CHECK(got == static_cast<double>((4 + dy) * 10000 + (8 + dx) * 10 + ch));
            }
        }
    }
}

TEST_CASE("unpatchify inverts patchify for every valid geometry") {
    for (auto [h, w, p] : {std::tuple<std::int64_t, std::int64_t, std::int64_t>{32, 32, 16},
                           {8, 12, 4},
                           {64, 64, 8},
                           {16, 16, 16}}) {
        Tensor img = random_image(h, w, 77 + static_cast<std::uint64_t>(h + w + p));
        CHECK(bitwise_equal(unpatchify(patchify(img, p), h, w, p), img));
    }
}

TEST_CASE("indivisible image dimensions are rejected with the numbers named") {
    try {
        patchify(random_image(30, 32, 5), 16);
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("30") != std::string::npos);
        CHECK(msg.find("32") != std::string::npos);
        CHECK(msg.find("16") != std::string::npos);
    }
}

TEST_CASE("embed_patches basics") {
    SUBCASE("zero image and zero positions give zero tokens") {
        Tensor patches = patchify(Tensor::zeros({16, 16, 3}), 8);
        Tensor tokens = embed_patches(patches, Tensor::zeros({192, 5}), Tensor::zeros({4, 5}));
        for (double v : tokens.data()) CHECK(v == 0.0);
    }
    SUBCASE("identity projection on a matching toy config reproduces patch values") {
        // P=1 patches have exactly 3 values; proj = I3 copies them through.
        Tensor img = random_image(2, 2, 9);
        Tensor patches = patchify(img, 1);
        Tensor eye = Tensor::zeros({3, 3});
        for (int i = 0; i < 3; ++i) eye.data()[static_cast<std::size_t>(i * 3 + i)] = 1.0;
        Tensor tokens = embed_patches(patches, eye, Tensor::zeros({4, 3}));
        CHECK(bitwise_equal(tokens, patches));
    }
    SUBCASE("reference configuration shapes remain constructible") {
        Tensor patches = patchify(random_image(192, 192, 10), 16);
        Tensor tokens = embed_patches(patches, Tensor::zeros({768, 1024}), Tensor::zeros({144, 1024}));
        CHECK(tokens.shape() == Shape{144, 1024});
    }
    SUBCASE("short position table is rejected") {
        Tensor patches = patchify(random_image(32, 32, 11), 8);  // 16 patches
        CHECK_THROWS_AS(embed_patches(patches, Tensor::zeros({192, 5}), Tensor::zeros({8, 5})),
                        ContractError);
    }
}

TEST_CASE("vision encoder with zero blocks is the embedding alone") {
    Rng rng(21);
    VisionConfig cfg;
    cfg.blocks = 0;
    VisionEncoder enc = VisionEncoder::init(cfg, rng);
    Tensor img = random_image(64, 64, 22);
    CHECK(bitwise_equal(enc.forward(img, VisionMode::Causal), enc.embed(img)));
}

TEST_CASE("vision encoder at init is the embedding (residual identity stack)") {
    Rng rng(31);
    VisionEncoder enc = VisionEncoder::init(VisionConfig{}, rng);
    Tensor img = random_image(64, 64, 32);
    CHECK(bitwise_equal(enc.forward(img, VisionMode::Causal), enc.embed(img)));
}

TEST_CASE("causal mode is causal end to end") {
    Rng rng(41);
    VisionConfig cfg;
    cfg.image_size = 32;
    cfg.patch = 8;
    cfg.d = 16;
    cfg.s = 4;
    cfg.blocks = 2;
    cfg.embed_dim = 8;
    VisionEncoder enc = VisionEncoder::init(cfg, rng);
    for (MambaBlockParams& b : enc.blocks) {
        for (double& v : b.sw_out.data()) v = rng.normal(0.0, 0.3);
    }
    Tensor img = random_image(32, 32, 42);
    Tensor base = enc.forward(img, VisionMode::Causal);
    // Perturb one pixel inside patch index 9 (patch row 2, col 1 of a 4x4 grid).
    Tensor bumped = img.detach();
    bumped.data()[static_cast<std::size_t>(((2 * 8 + 3) * 32 + (1 * 8 + 4)) * 3 + 1)] += 0.5;
    Tensor moved = enc.forward(bumped, VisionMode::Causal);
    for (std::int64_t t = 0; t < 9; ++t) {
        for (std::int64_t i = 0; i < cfg.d; ++i) {
            CHECK(base.data()[static_cast<std::size_t>(t * cfg.d + i)] ==
                  moved.data()[static_cast<std::size_t>(t * cfg.d + i)]);
        }
    }
    bool later_changed = false;
    for (std::int64_t k = 9 * cfg.d; k < base.numel(); ++k) {
        later_changed = later_changed || base.data()[static_cast<std::size_t>(k)] !=
                                             moved.data()[static_cast<std::size_t>(k)];
    }
    CHECK(later_changed);
}

TEST_CASE("multi-direction mode mixes anti-causally and stays finite") {
    Rng rng(51);
    VisionConfig cfg;
    cfg.image_size = 32;
    cfg.patch = 8;
    cfg.d = 16;
    cfg.s = 4;
    cfg.blocks = 2;
    cfg.embed_dim = 8;
    VisionEncoder enc = VisionEncoder::init(cfg, rng);
    for (MambaBlockParams& b : enc.blocks) {
        for (double& v : b.sw_out.data()) v = rng.normal(0.0, 0.3);
    }
    Tensor img = random_image(32, 32, 52);
    Tensor out = enc.forward(img, VisionMode::MultiDir);
    CHECK(out.shape() == Shape{16, cfg.d});
    for (double v : out.data()) CHECK(std::isfinite(v));
    // Bump the very last patch; the first token must move (backward scans).
    Tensor bumped = img.detach();
    bumped.data()[bumped.data().size() - 2] += 0.5;
    Tensor moved = enc.forward(bumped, VisionMode::MultiDir);
    bool first_changed = false;
    for (std::int64_t i = 0; i < cfg.d; ++i) {
        first_changed = first_changed ||
                        out.data()[static_cast<std::size_t>(i)] != moved.data()[static_cast<std::size_t>(i)];
    }
    CHECK(first_changed);
}

TEST_CASE("pooled embedding has unit norm and is deterministic") {
    Rng rng(61);
    VisionEncoder enc = VisionEncoder::init(VisionConfig{}, rng);
    Tensor img = random_image(64, 64, 62);
    Tensor p1 = enc.pooled(enc.forward(img, VisionMode::MultiDir));
    Tensor p2 = enc.pooled(enc.forward(img, VisionMode::MultiDir));
    CHECK(p1.shape() == Shape{1, 64});
    double norm = 0.0;
    for (double v : p1.data()) norm += v * v;
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bitwise_equal(p1, p2));
}

TEST_CASE("position table prefix equals a natively smaller encoder") {
    Rng rng(71);
    VisionConfig big;
    big.image_size = 64;
    big.patch = 8;
    big.d = 16;
    big.s = 4;
    big.blocks = 2;
    big.embed_dim = 8;
    VisionEncoder enc = VisionEncoder::init(big, rng);
    for (MambaBlockParams& b : enc.blocks) {
        for (double& v : b.sw_out.data()) v = rng.normal(0.0, 0.3);
    }
    VisionConfig small = big;
    small.image_size = 32;  // 16 patches, prefix of the 64-entry table
    VisionEncoder small_enc;
    small_enc.cfg = small;
    small_enc.proj = enc.proj;
    small_enc.pos = slice_rows(enc.pos, 0, 16).detach();
    small_enc.blocks = enc.blocks;  // shared parameter storage
    small_enc.pool_proj = enc.pool_proj;
    Tensor img = random_image(32, 32, 72);
    CHECK(bitwise_equal(enc.forward(img, VisionMode::Causal),
                        small_enc.forward(img, VisionMode::Causal)));
    CHECK(bitwise_equal(enc.forward(img, VisionMode::MultiDir),
                        small_enc.forward(img, VisionMode::MultiDir)));
}

TEST_CASE("vision encoder gradients through the pooled head") {
    Rng rng(81);
    VisionConfig cfg;
    cfg.image_size = 8;
    cfg.patch = 4;
    cfg.d = 8;
    cfg.s = 2;
    cfg.blocks = 1;
    cfg.embed_dim = 4;
    VisionEncoder enc = VisionEncoder::init(cfg, rng);
    for (double& v : enc.blocks[0].sw_out.data()) v = rng.normal(0.0, 0.3);
    Tensor img = random_image(8, 8, 82);
    Tensor target = Tensor::randn({1, 4}, rng);
    auto loss = [&]() {
        Tensor p = enc.pooled(enc.forward(img, VisionMode::MultiDir));
        Tensor d = sub(p, target);
        return reduce_sum_all(mul(d, d));
    };
    Rng coords(83);
    CHECK(grad_check_params(loss, enc.all(), 1e-5, 25, &coords) < 1e-4);
}

TEST_CASE("token normalization rules") {
    CHECK(normalize_tokens("No effusion.") == std::vector<std::string>{"no", "effusion", "."});
    CHECK(normalize_tokens("X-ray, clear; no-edema.") ==
          std::vector<std::string>{"xray", ",", "clear", ";", "noedema", "."});
    CHECK(normalize_tokens("  A  b\tC  ") == std::vector<std::string>{"a", "b", "c"});
    CHECK(normalize_tokens("a:b") == std::vector<std::string>{"a", ":", "b"});
    CHECK(normalize_tokens("(parens) \"quotes\" '") == std::vector<std::string>{"parens", "quotes"});
    CHECK(normalize_tokens("").empty());
}

TEST_CASE("vocabulary build order and reserved ids") {
    Vocab v = Vocab::build({"No effusion."});
    REQUIRE(v.size() == 7);
    CHECK(v.id_to_token[0] == "<pad>");
    CHECK(v.id_to_token[1] == "<bos>");
    CHECK(v.id_to_token[2] == "<eos>");
    CHECK(v.id_to_token[3] == "<unk>");
    // Equal counts fall back to lexicographic order.
    CHECK(v.id_to_token[4] == ".");
    CHECK(v.id_to_token[5] == "effusion");
    CHECK(v.id_to_token[6] == "no");

    Vocab freq = Vocab::build({"b b a", "a b"});
    CHECK(freq.id_to_token[4] == "b");  // count 3 beats count 2
    CHECK(freq.id_to_token[5] == "a");

    CHECK_THROWS_AS(Vocab::build({}), ContractError);
    CHECK_THROWS_AS(Vocab::build({"", "  "}), ContractError);
}

TEST_CASE("encode and decode round-trip the normalized text") {
    Vocab v = Vocab::build({"no acute effusion seen today ."});
    const std::string text = "No acute effusion seen today.";
    std::vector<std::int64_t> ids = v.encode(text, true);
    REQUIRE(ids.size() >= 2);
    CHECK(ids.front() == Vocab::kBos);
    CHECK(ids.back() == Vocab::kEos);
    for (std::size_t i = 1; i + 1 < ids.size(); ++i) {
        CHECK(ids[i] != Vocab::kBos);
        CHECK(ids[i] != Vocab::kEos);
    }
    CHECK(v.decode(ids) == "no acute effusion seen today .");

    CHECK(v.encode("xenon", false) == std::vector<std::int64_t>{Vocab::kUnk});
    CHECK(v.decode({Vocab::kUnk}) == "<unk>");
    CHECK_THROWS_AS(v.decode({v.size()}), ContractError);
}

TEST_CASE("vocabulary file round-trip and validation") {
    Vocab v = Vocab::build({"one two two three three three ."});
    const std::string path = temp_path("vocab.txt");
    v.save(path);
    Vocab loaded = Vocab::load(path);
    CHECK(loaded.id_to_token == v.id_to_token);
    CHECK(loaded.id("three") == v.id("three"));

    const std::string bad = temp_path("vocab_bad.txt");
    {
        std::ofstream os(bad);
        os << "<pad>\n<bos>\nwrong\n<unk>\n";
    }
    CHECK_THROWS_AS(Vocab::load(bad), FormatError);
    {
        std::ofstream os(bad);
        os << "<pad>\n<bos>\n<eos>\n<unk>\nword\nword\n";
    }
    CHECK_THROWS_AS(Vocab::load(bad), FormatError);
    std::remove(path.c_str());
    std::remove(bad.c_str());
}

TEST_CASE("text encoder embeddings: determinism, norm, order sensitivity") {
    Vocab v = Vocab::build({"heart size normal . lungs clear . effusion seen ."});
    TextConfig cfg;
    cfg.d = 16;
    cfg.s = 4;
    cfg.blocks = 2;
    cfg.embed_dim = 8;
    cfg.max_len = 32;
    Rng rng(91);
    TextEncoder enc = TextEncoder::init(cfg, v.size(), rng);
    for (MambaBlockParams& b : enc.blocks) {
        for (double& mb : b.sw_out.data()) mb = rng.normal(0.0, 0.3);
    }
    std::vector<std::int64_t> ids = v.encode("heart size normal . lungs clear .", true);
    Tensor e1 = enc.pooled_ids(ids);
    Tensor e2 = enc.pooled_ids(ids);
    CHECK(bitwise_equal(e1, e2));
    double norm = 0.0;
    for (double x : e1.data()) norm += x * x;
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-12));

    // Swap the two halves of the report: same tokens, different order.
    std::vector<std::int64_t> swapped = v.encode("lungs clear . heart size normal .", true);
    Tensor e3 = enc.pooled_ids(swapped);
    double diff = 0.0;
    for (std::int64_t i = 0; i < e1.numel(); ++i) {
        diff = std::max(diff, std::fabs(e1.data()[static_cast<std::size_t>(i)] -
                                        e3.data()[static_cast<std::size_t>(i)]));
    }
    CHECK(diff > 1e-8);
}

TEST_CASE("text encoder rejects bad id sequences") {
    Rng rng(101);
    TextConfig cfg;
    cfg.d = 8;
    cfg.s = 2;
    cfg.blocks = 1;
    cfg.embed_dim = 4;
    cfg.max_len = 4;
    TextEncoder enc = TextEncoder::init(cfg, 10, rng);
    CHECK_THROWS_AS(enc.forward_ids({}), ContractError);
    CHECK_THROWS_AS(enc.forward_ids({1, 2, 3, 4, 5}), ContractError);  // over max_len
    CHECK_THROWS_AS(enc.forward_ids({11}), ContractError);             // out of vocab
}

TEST_CASE("text encoder gradients") {
    Rng rng(111);
    TextConfig cfg;
    cfg.d = 8;
    cfg.s = 2;
    cfg.blocks = 2;
    cfg.embed_dim = 4;
    cfg.max_len = 8;
    TextEncoder enc = TextEncoder::init(cfg, 12, rng);
    for (MambaBlockParams& b : enc.blocks) {
        for (double& v : b.sw_out.data()) v = rng.normal(0.0, 0.3);
    }
    std::vector<std::int64_t> ids = {1, 5, 7, 5, 2};  // repeated id exercises scatter-add
    Tensor target = Tensor::randn({1, 4}, rng);
    auto loss = [&]() {
        Tensor d = sub(enc.pooled_ids(ids), target);
        return reduce_sum_all(mul(d, d));
    };
    Rng coords(112);
    CHECK(grad_check_params(loss, enc.all(), 1e-5, 25, &coords) < 1e-4);
}

}  // TEST_SUITE
