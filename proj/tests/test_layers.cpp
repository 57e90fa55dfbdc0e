#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "bivit/errors.hpp"
#include "bivit/layers.hpp"
#include "bivit/train.hpp"
#include "dense_reference.hpp"
#include "fd_check.hpp"
#include "support.hpp"

using namespace bivit;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -2.0,
                     double hi = 2.0) {
    Tensor t(std::move(shape));
    t.fill_uniform(rng, lo, hi);
    return t;
}

VitConfig tiny_config() {
    VitConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.classes = 3;
    return cfg;
}

std::vector<std::size_t> argsort(const double* row, std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return row[a] < row[b];
    });
    return idx;
}

} // namespace

TEST_CASE("binary linear with identity-sign weights passes +-1 inputs through") {
    std::mt19937_64 rng(1);
    BinaryLinear lin = BinaryLinear::init("lin", 6, 6, rng);
    // sign(latent) is the identity: strong positive diagonal, negative noise off it
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) lin.weight.value.at(i, j) = i == j ? 2.5 : -0.3;
    lin.alpha.value = Tensor::full({6}, 1.0);
    Tensor x({2, 6});
    for (double& v : x.values) v = rng() & 1 ? 1.0 : -1.0;

    Tape tape;
    Binder bind(tape);
    const ValueId out = lin.forward(tape, bind, tape.constant(x), 1, 1);
    // sign(I)=I on +-1 inputs holds per-coordinate up to the off-diagonal -1s:
    // with all off-diagonal signs -1 the product is x_j*1 + sum_{i!=j} -x_i.
    // Use a pure identity instead for an exact pass-through.
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) lin.weight.value.at(i, j) = i == j ? 0.7 : -1e9;
    (void)out;
    // re-run with a one-hot sign pattern: sign has exactly one +1 per row
    Tape tape2;
    Binder bind2(tape2);
    const ValueId out2 = lin.forward(tape2, bind2, tape2.constant(x), 1, 1);
    // each output channel j: dot of x with a row of -1s except +1 at j
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t j = 0; j < 6; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < 6; ++i)
                acc += x.at(r, i) * (i == j ? 1.0 : -1.0);
            CHECK(tape2.value(out2).at(r, j) == acc);
        }
}

TEST_CASE("binary linear at w32a32 matches the dense matmul oracle exactly") {
    std::mt19937_64 rng(2);
    BinaryLinear lin = BinaryLinear::init("lin", 5, 7, rng);
    const Tensor x = random_tensor({3, 7}, rng);
    Tape tape;
    Binder bind(tape);
    const ValueId out = lin.forward(tape, bind, tape.constant(x), 32, 32);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t o = 0; o < 5; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < 7; ++i) acc += x.at(r, i) * lin.weight.value.at(o, i);
            CHECK(tape.value(out).at(r, o) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("binary linear at w1a1 matches the dense sign-product oracle") {
    std::mt19937_64 rng(3);
    BinaryLinear lin = BinaryLinear::init("lin", 4, 9, rng);
    lin.calibrate_weight_scale();
    const Tensor x = random_tensor({5, 9}, rng);
    Tape tape;
    Binder bind(tape);
    const ValueId out = lin.forward(tape, bind, tape.constant(x), 1, 1);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t o = 0; o < 4; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < 9; ++i)
                acc += testsup::sign_pm1(x.at(r, i)) * testsup::sign_pm1(lin.weight.value.at(o, i));
            acc *= lin.alpha.value.values[o];
            CHECK(tape.value(out).at(r, o) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("real attention over identical tokens is uniform and rows sum to one") {
    std::mt19937_64 rng(4);
    const std::size_t tokens = 5, dim = 8;
    BinarizedMhsa mhsa = BinarizedMhsa::init("attn", dim, 2, tokens, rng);
    Tensor x({tokens, dim});
    const Tensor one_row = random_tensor({1, dim}, rng);
    for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t j = 0; j < dim; ++j) x.at(t, j) = one_row.at(0, j);

    Tape tape;
    Binder bind(tape);
    AttentionRecord rec;
    mhsa.forward(tape, bind, tape.constant(x), PrecisionConfig::all_real(), &rec);
    const Tensor& attn = tape.value(rec.attn);
    for (double v : attn.values) CHECK(v == doctest::Approx(1.0 / tokens).epsilon(1e-12));

    // generic input: rows still sum to 1
    Tape tape2;
    Binder bind2(tape2);
    AttentionRecord rec2;
    mhsa.forward(tape2, bind2, tape2.constant(random_tensor({tokens, dim}, rng)),
                 PrecisionConfig::all_real(), &rec2);
    const Tensor& attn2 = tape2.value(rec2.attn);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t i = 0; i < tokens; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < tokens; ++j) sum += attn2.at(h, i, j);
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
}

TEST_CASE("real attention gradient passes finite differences (2 heads, d=4, 5 tokens)") {
    std::mt19937_64 rng(5);
    BinarizedMhsa mhsa = BinarizedMhsa::init("attn", 8, 2, 5, rng);
    const std::vector<Tensor> inits = {random_tensor({5, 8}, rng)};
    auto build = [&mhsa](Tape& t, const std::vector<ValueId>& leaves) {
        Binder bind(t, /*trainable=*/false);
        const ValueId out = mhsa.forward(t, bind, leaves[0], PrecisionConfig::all_real(), nullptr);
        return t.mean_all(t.mul(out, out));
    };
    CHECK(testsup::max_rel_grad_error(inits, build) < 1e-4);
}

TEST_CASE("with unit scales the binarized scores reduce to the raw sign product over sqrt(d)") {
    std::mt19937_64 rng(6);
    const std::size_t tokens = 6, dim = 8, heads = 2, hd = 4;
    BinarizedMhsa mhsa = BinarizedMhsa::init("attn", dim, heads, tokens, rng);
    const Tensor x = random_tensor({tokens, dim}, rng);
    Tape tape;
    Binder bind(tape);
    AttentionRecord rec;
    mhsa.forward(tape, bind, tape.constant(x), PrecisionConfig{32, 32, 32, 32, 1}, &rec);
    const Tensor& scores = tape.value(rec.scores);
    const Tensor& q = tape.value(rec.q_in);
    const Tensor& k = tape.value(rec.k_in);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < tokens; ++i)
            for (std::size_t j = 0; j < tokens; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < hd; ++c)
                    acc += testsup::sign_pm1(q.at(h, i, c)) * testsup::sign_pm1(k.at(h, j, c));
                CHECK(scores.at(h, i, j) == doctest::Approx(acc / 2.0).epsilon(1e-12));
            }
}

TEST_CASE("attention row ranking is invariant under positive head rescaling") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t tokens = 7, dim = 8, heads = 2;
        BinarizedMhsa mhsa = BinarizedMhsa::init("attn", dim, heads, tokens, rng);
        for (Param* p : {&mhsa.alpha_q, &mhsa.alpha_k, &mhsa.alpha_v, &mhsa.alpha_attn})
            p->value.fill_uniform(rng, 0.2, 2.0);
        const Tensor x = random_tensor({tokens, dim}, rng);
        const PrecisionConfig pc{32, 32, 32, 32, 1};

        Tape base;
        Binder bind_base(base);
        AttentionRecord rec_base;
        mhsa.forward(base, bind_base, base.constant(x), pc, &rec_base);
        const Tensor attn_base = base.value(rec_base.attn);

        std::uniform_real_distribution<double> cdist(0.05, 20.0);
        const double c = cdist(rng);
        const std::size_t which = trial % heads;
        mhsa.alpha_q.value.values[which] *= c;  // scales that head's alpha_q (x) alpha_k

        Tape scaled;
        Binder bind_scaled(scaled);
        AttentionRecord rec_scaled;
        mhsa.forward(scaled, bind_scaled, scaled.constant(x), pc, &rec_scaled);
        const Tensor attn_scaled = scaled.value(rec_scaled.attn);

        for (std::size_t i = 0; i < tokens; ++i) {
            const auto a = argsort(&attn_base.values[(which * tokens + i) * tokens], tokens);
            const auto b = argsort(&attn_scaled.values[(which * tokens + i) * tokens], tokens);
            REQUIRE(a == b);
        }
    }
}

TEST_CASE("binarized attention value path: bit kernels equal the dense sign computation") {
    std::mt19937_64 rng(8);
    const std::size_t tokens = 6, dim = 8, heads = 2, hd = 4;
    for (AttnBinarizer mode : {AttnBinarizer::threshold_01, AttnBinarizer::sign_pm1}) {
        BinarizedMhsa mhsa = BinarizedMhsa::init("attn", dim, heads, tokens, rng);
        mhsa.binarizer = mode;
        for (Param* p : {&mhsa.alpha_q, &mhsa.alpha_k, &mhsa.alpha_v, &mhsa.alpha_attn})
            p->value.fill_uniform(rng, 0.3, 1.5);
        const Tensor x = random_tensor({tokens, dim}, rng);
        Tape tape;
        Binder bind(tape);
        AttentionRecord rec;
        const ValueId out =
            mhsa.forward(tape, bind, tape.constant(x), PrecisionConfig{32, 32, 32, 32, 1}, &rec);
        // dense recomputation of the value path from the recorded maps
        const Tensor& attn = tape.value(rec.attn);
        const Tensor& v = tape.value(rec.v_in);
        Tensor ctx({heads, tokens, hd});
        for (std::size_t h = 0; h < heads; ++h) {
            const double av = mhsa.alpha_v.value.values[h];
            const double aa = mhsa.alpha_attn.value.values[h];
            const double tau = mhsa.tau_attn.value.values[h];
            for (std::size_t i = 0; i < tokens; ++i)
                for (std::size_t c = 0; c < hd; ++c) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < tokens; ++j) {
                        const double score = attn.at(h, i, j);
                        const double b = mode == AttnBinarizer::threshold_01
                                             ? (score >= tau ? 1.0 : 0.0)
                                             : testsup::sign_pm1(score);
                        acc += b * testsup::sign_pm1(v.at(h, j, c));
                    }
                    ctx.at(h, i, c) = aa * av * acc;
                }
        }
        // compare against the layer's context before the output projection by
        // reconstructing it: out = ctx_merged * W_out^T (real weights here)
        const Tensor& got = tape.value(out);
        Tensor merged({tokens, dim});
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t c = 0; c < hd; ++c)
                    merged.at(t, h * hd + c) = ctx.at(h, t, c);
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t o = 0; o < dim; ++o) {
                double acc = 0.0;
                for (std::size_t i = 0; i < dim; ++i)
                    acc += merged.at(t, i) * mhsa.out_proj.weight.value.at(o, i);
                REQUIRE(got.at(t, o) == doctest::Approx(acc).epsilon(1e-10));
            }
    }
}

TEST_CASE("model forward at all-32 matches the dense composition oracle") {
    std::mt19937_64 rng(9);
    VitConfig cfg = tiny_config();
    cfg.precision = PrecisionConfig::all_real();
    const TinyVit model = TinyVit::init(cfg, 99);
    for (int trial = 0; trial < 3; ++trial) {
        const Tensor image = random_tensor({8, 8}, rng);
        Tape tape;
        Binder bind(tape, /*trainable=*/false);
        const ValueId logits = model.forward(tape, bind, image, nullptr);
        const auto expected = testsup::dense_vit_forward(model, image);
        REQUIRE(tape.value(logits).size() == expected.size());
        for (std::size_t i = 0; i < expected.size(); ++i)
            CHECK(tape.value(logits).values[i] == doctest::Approx(expected[i]).epsilon(1e-12));
    }
}

TEST_CASE("single-block single-head model matches the hand-composed oracle") {
    std::mt19937_64 rng(10);
    VitConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 4;
    cfg.depth = 1;
    cfg.heads = 1;
    cfg.mlp_ratio = 2;
    cfg.classes = 2;
    cfg.precision = PrecisionConfig::all_real();
    const TinyVit model = TinyVit::init(cfg, 5);
    const Tensor image = random_tensor({8, 8}, rng);
    Tape tape;
    Binder bind(tape, false);
    const ValueId logits = model.forward(tape, bind, image, nullptr);
    const auto expected = testsup::dense_vit_forward(model, image);
    for (std::size_t i = 0; i < expected.size(); ++i)
        CHECK(tape.value(logits).values[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("identical images produce identical logits") {
    std::mt19937_64 rng(11);
    const TinyVit model = TinyVit::init(tiny_config(), 7);
    const Tensor image = random_tensor({8, 8}, rng);
    Tape tape;
    Binder bind(tape, false);
    const ValueId a = model.forward(tape, bind, image, nullptr);
    const ValueId b = model.forward(tape, bind, image, nullptr);
    CHECK(tape.value(a).values == tape.value(b).values);
}

TEST_CASE("bad image dimensions are rejected") {
    const TinyVit model = TinyVit::init(tiny_config(), 7);
    Tape tape;
    Binder bind(tape);
    CHECK_THROWS_AS(model.forward(tape, bind, Tensor({7, 8}), nullptr), ShapeError);
}

TEST_CASE("w1a1 forward consumes only bit-kernel products plus the real first/last layers") {
    std::mt19937_64 rng(12);
    VitConfig cfg = tiny_config();
    cfg.precision = PrecisionConfig::all_binary();
    const TinyVit model = TinyVit::init(cfg, 13);
    const Tensor image = random_tensor({8, 8}, rng);

    kernel_counters().reset();
    Tape tape;
    Binder bind(tape, false);
    model.forward(tape, bind, image, nullptr);
    // patch embedding and classifier are the only dense products
    CHECK(kernel_counters().dense_matmul == 2);
    CHECK(kernel_counters().bit_matmul > 0);

    // real-valued config goes the other way
    VitConfig real_cfg = tiny_config();
    real_cfg.precision = PrecisionConfig::all_real();
    const TinyVit real_model = TinyVit::init(real_cfg, 13);
    kernel_counters().reset();
    Tape tape2;
    Binder bind2(tape2, false);
    real_model.forward(tape2, bind2, image, nullptr);
    CHECK(kernel_counters().bit_matmul == 0);
}

TEST_CASE("binary and real forward paths agree at all-32 precision") {
    std::mt19937_64 rng(13);
    VitConfig cfg = tiny_config();
    cfg.precision = PrecisionConfig::all_binary();
    TinyVit model = TinyVit::init(cfg, 21);
    const Tensor image = random_tensor({8, 8}, rng);
    // same weights, real precision
    TinyVit real_model = model;
    real_model.cfg.precision = PrecisionConfig::all_real();

    Tape t1, t2;
    Binder b1(t1, false), b2(t2, false);
    const Tensor& out_real = t1.value(real_model.forward(t1, b1, image, nullptr));
    const auto expected = testsup::dense_vit_forward(model, image);
    for (std::size_t i = 0; i < expected.size(); ++i)
        CHECK(out_real.values[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("head-wise scales receive nonzero gradients on generic inputs") {
    std::mt19937_64 rng(14);
    VitConfig cfg = tiny_config();
    cfg.precision = PrecisionConfig::all_binary();
    TinyVit model = TinyVit::init(cfg, 31);
    const Tensor image = random_tensor({8, 8}, rng);

    Tape tape;
    Binder bind(tape);
    std::vector<BlockRecord> records;
    const ValueId logits = model.forward(tape, bind, image, &records);
    tape.backward(tape.softmax_xent(tape.reshape(logits, {1, cfg.classes}), {1}));

    std::size_t nonzero_alpha_grads = 0;
    for (const Binder::Bound& bound : bind.bound()) {
        const std::string& name = bound.param->name;
        if (name.find("alpha_q") == std::string::npos && name.find("alpha_k") == std::string::npos &&
            name.find("alpha_v") == std::string::npos && name.find("alpha_attn") == std::string::npos)
            continue;
        for (double g : tape.grad(bound.id).values)
            if (g != 0.0) ++nonzero_alpha_grads;
    }
    CHECK(nonzero_alpha_grads > 0);
}

TEST_CASE("ste fraction hits 0 for huge alpha and 1 for tiny alpha") {
    std::mt19937_64 rng(15);
    VitConfig cfg = tiny_config();
    // real projections keep the binarizer inputs continuous, so the
    // alpha -> 0+ limit is exactly 1
    cfg.precision = PrecisionConfig{32, 32, 32, 32, 1};
    TinyVit model = TinyVit::init(cfg, 41);
    std::vector<Tensor> batch = {random_tensor({8, 8}, rng), random_tensor({8, 8}, rng)};
    std::vector<int> labels = {0, 1};

    for (EncoderBlock& b : model.blocks)
        for (Param* p : {&b.attn.alpha_q, &b.attn.alpha_k, &b.attn.alpha_v})
            p->value = Tensor::full({cfg.heads}, 1e9);
    auto fractions = ste_grad_fraction(model, batch, labels);
    for (const SteFractions& f : fractions)
        for (const auto* vec : {&f.q, &f.k, &f.v})
            for (double v : *vec) CHECK(v == 0.0);

    for (EncoderBlock& b : model.blocks)
        for (Param* p : {&b.attn.alpha_q, &b.attn.alpha_k, &b.attn.alpha_v})
            p->value = Tensor::full({cfg.heads}, 1e-12);
    fractions = ste_grad_fraction(model, batch, labels);
    for (const SteFractions& f : fractions)
        for (const auto* vec : {&f.q, &f.k, &f.v})
            for (double v : *vec) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("ste fraction equals a direct recount over the dense projections") {
    std::mt19937_64 rng(16);
    VitConfig cfg = tiny_config();
    cfg.depth = 1;
    cfg.precision = PrecisionConfig{32, 32, 32, 32, 1};  // real projections, binarized attention
    TinyVit model = TinyVit::init(cfg, 51);
    for (EncoderBlock& b : model.blocks) b.attn.alpha_q.value.fill_uniform(rng, 0.01, 0.05);
    const Tensor image = random_tensor({8, 8}, rng);
    auto fractions = ste_grad_fraction(model, {image}, {0});

    // independent recount: dense forward up to the q projection
    const auto& blk = model.blocks[0];
    const std::size_t t = cfg.tokens(), d = cfg.embed_dim, hd = cfg.head_dim();
    const Tensor patches = model.patchify(image);
    std::vector<double> x(t * d);
    auto tokens = testsup::dense_linear(patches.values, cfg.patch_count(),
                                        model.patch_weight.value, model.patch_bias.value);
    for (std::size_t j = 0; j < d; ++j) x[j] = model.cls_token.value.values[j];
    std::copy(tokens.begin(), tokens.end(), x.begin() + d);
    for (std::size_t i = 0; i < t * d; ++i) x[i] += model.pos_embed.value.values[i];
    testsup::dense_layernorm(x, t, blk.ln1.gamma.value, blk.ln1.beta.value);
    const Tensor empty;
    const auto q = testsup::dense_linear(x, t, blk.attn.q_proj.weight.value, empty);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        std::size_t outside = 0;
        for (std::size_t tok = 0; tok < t; ++tok)
            for (std::size_t c = 0; c < hd; ++c)
                if (std::abs(q[tok * d + h * hd + c]) > blk.attn.alpha_q.value.values[h]) ++outside;
        const double expected = static_cast<double>(outside) / static_cast<double>(t * hd);
        CHECK(fractions[0].q[h] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("ste fractions before backward are a contract error") {
    std::mt19937_64 rng(17);
    VitConfig cfg = tiny_config();
    cfg.precision = PrecisionConfig::all_binary();
    const TinyVit model = TinyVit::init(cfg, 61);
    Tape tape;
    Binder bind(tape);
    std::vector<BlockRecord> records;
    model.forward(tape, bind, random_tensor({8, 8}, rng), &records);
    CHECK_THROWS_AS(ste_grad_fractions(tape, records), ContractError);
}

TEST_CASE("architecture descriptor round-trips") {
    VitConfig cfg = tiny_config();
    cfg.precision = PrecisionConfig{1, 32, 1, 1, 32};
    cfg.attn_binarizer = AttnBinarizer::sign_pm1;
    const VitConfig parsed = VitConfig::from_descriptor(cfg.descriptor());
    CHECK(parsed.descriptor() == cfg.descriptor());
}

TEST_CASE("precision config rejects bit widths other than 1 and 32") {
    PrecisionConfig pc;
    pc.mlp_weights = 8;
    CHECK_THROWS_AS(pc.validate(), DomainError);
}
