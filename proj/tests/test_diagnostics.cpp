#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <random>

#include "bivit/diagnostics.hpp"
#include "bivit/errors.hpp"
#include "bivit/tape.hpp"

using namespace bivit;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("softmax grad curve: symmetric two-way softmax at p = 0 gives 0.25") {
    const CurveDump dump = softmax_grad_curve(4, 5, /*row_len=*/2);
    // middle sample is p = 0
    CHECK(dump.x[2] == doctest::Approx(0.0));
    CHECK(dump.y[2] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax grad curve stays in (0, 0.25] and covers [-d, d]") {
    for (std::size_t d : {4u, 64u}) {
        const CurveDump dump = softmax_grad_curve(d, 129);
        CHECK(dump.x.front() == doctest::Approx(-static_cast<double>(d)));
        CHECK(dump.x.back() == doctest::Approx(static_cast<double>(d)));
        for (double y : dump.y) {
            CHECK(y > 0.0);
            CHECK(y <= 0.25 + 1e-12);
        }
    }
}

TEST_CASE("softmax grad curve equals a direct dense softmax evaluation") {
    const std::size_t d = 64, n = 197;
    const CurveDump dump = softmax_grad_curve(d, 33, n);
    for (std::size_t i = 0; i < dump.x.size(); ++i) {
        Tensor row({1, n});
        row.values[0] = dump.x[i] / std::sqrt(static_cast<double>(d));
        Tape tape;
        const Tensor& soft = tape.value(tape.softmax(tape.constant(row)));
        const double a = soft.values[0];
        CHECK(dump.y[i] == doctest::Approx(a * (1.0 - a)).epsilon(1e-12));
    }
}

TEST_CASE("softmax grad curve peaks near A = 0.5 and decays toward the edges") {
    const CurveDump dump = softmax_grad_curve(64, 513, 197);
    const std::size_t peak =
        std::max_element(dump.y.begin(), dump.y.end()) - dump.y.begin();
    CHECK(peak > 0);
    CHECK(peak + 1 < dump.y.size());
    CHECK(dump.y[peak] == doctest::Approx(0.25).epsilon(1e-3));
    CHECK(dump.y.front() < 1e-5);   // decays toward zero at the negative edge
    CHECK(dump.y.back() < 0.25);    // past the peak on the positive edge
    // single-peaked: nondecreasing up to the peak, nonincreasing after
    for (std::size_t i = 0; i + 1 <= peak; ++i) CHECK(dump.y[i] <= dump.y[i + 1] + 1e-15);
    for (std::size_t i = peak; i + 1 < dump.y.size(); ++i)
        CHECK(dump.y[i] + 1e-15 >= dump.y[i + 1]);
}

TEST_CASE("curve CSV writes a header and one row per sample") {
    const CurveDump dump = softmax_grad_curve(8, 17);
    const std::string path = temp_path("bivit_curve.csv");
    dump.write_csv(path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "p,grad_factor");
    std::size_t rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 17);
}

TEST_CASE("dot range check: d = 2 attains exactly {-2, 0, 2}") {
    const DotRangeBounds b = extreme_dot_range_check(2);
    CHECK(b.attained == std::vector<int>{-2, 0, 2});
    CHECK(b.bounds_ok);
    CHECK(b.parity_ok);
    CHECK(b.extremes_attained);
}

TEST_CASE("dot range check: exhaustive small d attains the stepped range") {
    for (std::size_t d : {1u, 3u, 8u, 16u}) {
        const DotRangeBounds b = extreme_dot_range_check(d);
        REQUIRE(b.attained.size() == d + 1);
        for (std::size_t i = 0; i < b.attained.size(); ++i)
            CHECK(b.attained[i] == -static_cast<int>(d) + 2 * static_cast<int>(i));
        CHECK(b.bounds_ok);
        CHECK(b.parity_ok);
        CHECK(b.extremes_attained);
    }
}

TEST_CASE("dot range check: d = 64 sampling stays in bounds and extremes are attained") {
    const DotRangeBounds b = extreme_dot_range_check(64, 2000);
    CHECK(b.lo == -64);
    CHECK(b.hi == 64);
    CHECK(b.bounds_ok);
    CHECK(b.parity_ok);
    CHECK(b.extremes_attained);
}

TEST_CASE("heatmap of identical tokens in a real-valued model is flat") {
    VitConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.classes = 3;
    cfg.precision = PrecisionConfig::all_real();
    TinyVit model = TinyVit::init(cfg, 17);
    // force identical tokens: zero positional embeddings and make the class
    // token equal to the constant image's patch token
    const Tensor image = Tensor::full({8, 8}, 0.33);
    model.pos_embed.value = Tensor::zeros(model.pos_embed.value.shape);
    const Tensor patches = model.patchify(image);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
        double acc = model.patch_bias.value.values[j];
        for (std::size_t i = 0; i < cfg.patch_dim(); ++i)
            acc += patches.at(0, i) * model.patch_weight.value.at(j, i);
        model.cls_token.value.at(0, j) = acc;
    }
    const Tensor map = attention_heatmap_dump(model, image, 0, 0, AttentionStage::post_softmax,
                                              temp_path("flat.pgm"), temp_path("flat.txt"));
    const double uniform = 1.0 / static_cast<double>(cfg.tokens());
    for (double v : map.values) CHECK(v == doctest::Approx(uniform).epsilon(1e-12));
}

TEST_CASE("dumped raw matrix equals the in-memory map exactly") {
    VitConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.classes = 3;
    cfg.precision = PrecisionConfig::all_real();
    const TinyVit model = TinyVit::init(cfg, 19);
    std::mt19937_64 rng(5);
    Tensor image({8, 8});
    image.fill_uniform(rng, -1.0, 1.0);
    const std::string txt = temp_path("map.txt");
    const Tensor map = attention_heatmap_dump(model, image, 1, 1, AttentionStage::pre_softmax,
                                              temp_path("map.pgm"), txt);
    const Tensor parsed = read_matrix_txt(txt);
    CHECK(parsed.shape == map.shape);
    CHECK(parsed.values == map.values);  // %.17g round-trips doubles

    // different weights give a different map on the same input
    const TinyVit other = TinyVit::init(cfg, 23);
    const Tensor other_map = attention_heatmap_dump(
        other, image, 1, 1, AttentionStage::pre_softmax, temp_path("map2.pgm"),
        temp_path("map2.txt"));
    CHECK(other_map.values != map.values);

    CHECK_THROWS_AS(attention_heatmap_dump(model, image, 5, 0, AttentionStage::pre_softmax,
                                           temp_path("x.pgm"), temp_path("x.txt")),
                    DomainError);
}

TEST_CASE("graymap round-trips to the quantized normalized map") {
    std::mt19937_64 rng(7);
    Tensor m({9, 9});
    m.fill_uniform(rng, -3.0, 5.0);
    const std::string path = temp_path("roundtrip.pgm");
    write_pgm(m, path);
    const Tensor parsed = read_pgm(path);
    const Tensor norm = normalize_map(m);
    REQUIRE(parsed.shape == norm.shape);
    for (std::size_t i = 0; i < norm.size(); ++i) {
        const double quantized = std::lround(norm.values[i] * 255.0) / 255.0;
        CHECK(parsed.values[i] == doctest::Approx(quantized).epsilon(1e-12));
    }
}

TEST_CASE("ops/size: DeiT-Tiny reproduces the reference table") {
    const ArchSpec arch = ArchSpec::preset("deit-tiny");
    const OpsSizeReport fp = ops_size_calc(arch, BitsSpec::parse("32-32"));
    CHECK(fp.size_mb == 22.8);
    CHECK(fp.ops_1e8 == 12.3);
    const OpsSizeReport bin = ops_size_calc(arch, BitsSpec::parse("1-1"));
    CHECK(bin.size_mb == 1.0);
    CHECK(bin.ops_1e8 == 0.2);
    CHECK(bin.accel_ratio == doctest::Approx(61.5));
    CHECK(bin.pretty() == "1.0 MB, 0.2e8 OPs, 61.5x");
}

TEST_CASE("ops/size: DeiT-Small reproduces the reference table") {
    const ArchSpec arch = ArchSpec::preset("deit-small");
    const OpsSizeReport fp = ops_size_calc(arch, BitsSpec::parse("32-32"));
    CHECK(fp.size_mb == 88.2);
    CHECK(fp.ops_1e8 == 45.5);
    const OpsSizeReport bin = ops_size_calc(arch, BitsSpec::parse("1-1"));
    CHECK(bin.size_mb == 3.4);
    CHECK(bin.ops_1e8 == 0.8);
}

TEST_CASE("ops/size: Swin-Tiny OPs match with a 56.1x ratio") {
    const ArchSpec arch = ArchSpec::preset("swin-tiny");
    const OpsSizeReport fp = ops_size_calc(arch, BitsSpec::parse("32-32"));
    CHECK(fp.ops_1e8 == 44.9);
    const OpsSizeReport bin = ops_size_calc(arch, BitsSpec::parse("1-1"));
    CHECK(bin.ops_1e8 == 0.8);
    CHECK(std::floor(bin.accel_ratio * 10.0 + 0.5) / 10.0 == 56.1);
}

TEST_CASE("ops/size is linear in depth for block-attributable quantities") {
    ArchSpec base = ArchSpec::preset("deit-tiny");
    ArchSpec doubled = base;
    doubled.depth = 24;
    const OpsSizeReport a = ops_size_calc(base, BitsSpec::parse("32-32"));
    const OpsSizeReport b = ops_size_calc(doubled, BitsSpec::parse("32-32"));
    auto block_totals = [](const OpsSizeReport& r) {
        double flops = 0.0;
        std::size_t params = 0;
        for (const OpsSizeLine& line : r.breakdown) {
            if (line.group.rfind("block", 0) == 0) {
                flops += line.fp_flops + line.bops;
                params += line.fp_params + line.bin_params;
            }
        }
        return std::pair{flops, params};
    };
    const auto [fa, pa] = block_totals(a);
    const auto [fb, pb] = block_totals(b);
    CHECK(fb == doctest::Approx(2.0 * fa));
    CHECK(pb == 2 * pa);
}

TEST_CASE("pure matmul layers carry exactly the 1/64 OPs convention") {
    const ArchSpec arch = ArchSpec::preset("deit-tiny");
    const OpsSizeReport fp = ops_size_calc(arch, BitsSpec::parse("32-32"));
    const OpsSizeReport bin = ops_size_calc(arch, BitsSpec::parse("1-1"));
    for (std::size_t i = 0; i < fp.breakdown.size(); ++i) {
        const OpsSizeLine& f = fp.breakdown[i];
        const OpsSizeLine& b = bin.breakdown[i];
        if (b.bops > 0.0) {
            CHECK(f.fp_flops == doctest::Approx(b.bops));
            // contribution to OPs shrinks by exactly 64
            CHECK(f.fp_flops / (b.bops / 64.0) == doctest::Approx(64.0));
        }
    }
}

TEST_CASE("inconsistent architectures are rejected") {
    ArchSpec bad = ArchSpec::preset("deit-tiny");
    bad.heads = 5;  // 192 % 5 != 0
    CHECK_THROWS_AS(ops_size_calc(bad, BitsSpec::parse("1-1")), DomainError);
    CHECK_THROWS_AS(ArchSpec::preset("resnet-50"), DomainError);
    CHECK_THROWS_AS(BitsSpec::parse("2-2"), DomainError);
}
