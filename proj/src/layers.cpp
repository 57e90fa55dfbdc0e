#include "bivit/layers.hpp"

#include <cmath>
#include <sstream>

#include "bivit/errors.hpp"

namespace bivit {

ValueId Binder::operator()(Param& p) {
    auto it = cache_.find(&p);
    if (it != cache_.end()) return it->second;
    ValueId id;
    if (trainable_ && p.trainable) {
        id = tape_->leaf(p.value);
        bound_.push_back(Bound{&p, id});
    } else {
        id = tape_->constant(p.value);
    }
    cache_.emplace(&p, id);
    return id;
}

bool PrecisionConfig::fully_real() const {
    return mhsa_weights == 32 && mhsa_acts == 32 && mlp_weights == 32 && mlp_acts == 32 &&
           attention_acts == 32;
}

void PrecisionConfig::validate() const {
    for (int v : {mhsa_weights, mhsa_acts, mlp_weights, mlp_acts, attention_acts}) {
        if (v != 1 && v != 32)
            throw DomainError("precision config entries must be 1 or 32, got " + std::to_string(v));
    }
}

const char* to_string(AttnBinarizer b) {
    switch (b) {
        case AttnBinarizer::threshold_01: return "threshold_01";
        case AttnBinarizer::sign_pm1: return "sign_pm1";
        case AttnBinarizer::none: return "none";
    }
    return "?";
}

AttnBinarizer attn_binarizer_from_string(const std::string& s) {
    if (s == "threshold_01") return AttnBinarizer::threshold_01;
    if (s == "sign_pm1") return AttnBinarizer::sign_pm1;
    if (s == "none") return AttnBinarizer::none;
    throw DomainError("unknown attention binarizer: " + s);
}

BinaryLinear BinaryLinear::init(const std::string& name, std::size_t c_out, std::size_t c_in,
                                std::mt19937_64& rng) {
    BinaryLinear lin;
    lin.weight = Param{name + ".weight", Tensor({c_out, c_in})};
    lin.weight.value.fill_normal(rng, 0.0, 0.02);
    lin.alpha = Param{name + ".alpha", Tensor::full({c_out}, 1.0)};
    return lin;
}

void BinaryLinear::calibrate_weight_scale() {
    const std::size_t c_out = out_features(), c_in = in_features();
    for (std::size_t i = 0; i < c_out; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c_in; ++j) acc += std::abs(weight.value.at(i, j));
        alpha.value.values[i] = std::max(acc / static_cast<double>(c_in), 1e-8);
    }
}

ValueId BinaryLinear::forward(Tape& tape, Binder& bind, ValueId x, int w_bits, int a_bits) const {
    Param& w = const_cast<Param&>(weight);
    Param& a = const_cast<Param&>(alpha);
    const ValueId wid = bind(w);
    if (w_bits == 1 && a_bits == 1) {
        const ValueId unit = tape.constant(Tensor::full({1}, 1.0));
        const ValueId bx = tape.sign_ste(x, unit);
        const ValueId bw = tape.sign_ste(wid, unit);
        return tape.channel_scale(tape.binary_matmul(bx, bw), bind(a));
    }
    if (w_bits == 1) {
        const ValueId unit = tape.constant(Tensor::full({1}, 1.0));
        const ValueId bw = tape.sign_ste(wid, unit);
        return tape.channel_scale(tape.matmul(x, bw, /*trans_b=*/true), bind(a));
    }
    if (a_bits == 1) {
        const ValueId unit = tape.constant(Tensor::full({1}, 1.0));
        const ValueId bx = tape.sign_ste(x, unit);
        return tape.matmul(bx, wid, /*trans_b=*/true);
    }
    return tape.matmul(x, wid, /*trans_b=*/true);
}

LayerNormParams LayerNormParams::init(const std::string& name, std::size_t dim) {
    LayerNormParams ln;
    ln.gamma = Param{name + ".gamma", Tensor::full({dim}, 1.0)};
    ln.beta = Param{name + ".beta", Tensor({dim})};
    return ln;
}

ValueId LayerNormParams::forward(Tape& tape, Binder& bind, ValueId x) const {
    return tape.layernorm(x, bind(const_cast<Param&>(gamma)), bind(const_cast<Param&>(beta)));
}

BinarizedMhsa BinarizedMhsa::init(const std::string& name, std::size_t dim, std::size_t heads,
                                  std::size_t tokens, std::mt19937_64& rng) {
    BinarizedMhsa m;
    m.heads = heads;
    m.head_dim = dim / heads;
    m.q_proj = BinaryLinear::init(name + ".q", dim, dim, rng);
    m.k_proj = BinaryLinear::init(name + ".k", dim, dim, rng);
    m.v_proj = BinaryLinear::init(name + ".v", dim, dim, rng);
    m.out_proj = BinaryLinear::init(name + ".out", dim, dim, rng);
    m.alpha_q = Param{name + ".alpha_q", Tensor::full({heads}, 1.0)};
    m.alpha_k = Param{name + ".alpha_k", Tensor::full({heads}, 1.0)};
    m.alpha_v = Param{name + ".alpha_v", Tensor::full({heads}, 1.0)};
    m.alpha_attn = Param{name + ".alpha_attn", Tensor::full({heads}, 1.0)};
    m.tau_attn = Param{name + ".tau_attn",
                       Tensor::full({heads}, 1.0 / static_cast<double>(tokens))};
    return m;
}

ValueId BinarizedMhsa::forward(Tape& tape, Binder& bind, ValueId x, const PrecisionConfig& pc,
                               AttentionRecord* rec) const {
    auto& self = const_cast<BinarizedMhsa&>(*this);
    const int wb = pc.mhsa_weights, ab = pc.mhsa_acts;
    const ValueId qh = tape.split_heads(q_proj.forward(tape, bind, x, wb, ab), heads);
    const ValueId kh = tape.split_heads(k_proj.forward(tape, bind, x, wb, ab), heads);
    const ValueId vh = tape.split_heads(v_proj.forward(tape, bind, x, wb, ab), heads);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));

    ValueId scores = -1, attn = -1, ctx = -1;
    if (pc.attention_acts == 1) {
        const ValueId aq = bind(self.alpha_q);
        const ValueId ak = bind(self.alpha_k);
        const ValueId av = bind(self.alpha_v);
        const ValueId bq = tape.sign_ste(qh, aq);
        const ValueId bk = tape.sign_ste(kh, ak);
        const ValueId bv = tape.sign_ste(vh, av);
        const ValueId raw = tape.binary_matmul(bq, bk);
        scores = tape.scale(tape.lead_scale(raw, tape.mul(aq, ak)), inv_sqrt_d);
        attn = tape.softmax(scores);
        switch (binarizer) {
            case AttnBinarizer::threshold_01: {
                const ValueId aA = bind(self.alpha_attn);
                const ValueId tau = bind(self.tau_attn);
                const ValueId battn = tape.threshold_ste(attn, tau, aA);
                ctx = tape.lead_scale(tape.binary01_matmul(battn, bv), tape.mul(aA, av));
                break;
            }
            case AttnBinarizer::sign_pm1: {
                const ValueId aA = bind(self.alpha_attn);
                const ValueId battn = tape.sign_ste(attn, aA);
                ctx = tape.lead_scale(tape.binary_matmul(battn, tape.transpose(bv)),
                                      tape.mul(aA, av));
                break;
            }
            case AttnBinarizer::none:
                ctx = tape.lead_scale(tape.matmul(attn, bv), av);
                break;
        }
        if (rec) {
            rec->q_in = qh;
            rec->k_in = kh;
            rec->v_in = vh;
            rec->alpha_q = alpha_q.value;
            rec->alpha_k = alpha_k.value;
            rec->alpha_v = alpha_v.value;
            rec->alpha_attn = alpha_attn.value;
            rec->tau_attn = tau_attn.value;
            rec->binarized = true;
        }
    } else {
        scores = tape.scale(tape.matmul(qh, kh, /*trans_b=*/true), inv_sqrt_d);
        attn = tape.softmax(scores);
        ctx = tape.matmul(attn, vh);
        if (rec) {
            rec->q_in = qh;
            rec->k_in = kh;
            rec->v_in = vh;
        }
    }
    if (rec) {
        rec->scores = scores;
        rec->attn = attn;
    }
    return out_proj.forward(tape, bind, tape.merge_heads(ctx), wb, ab);
}

void VitConfig::validate() const {
    if (patch_size == 0 || image_size % patch_size != 0)
        throw DomainError("image size must be divisible by patch size");
    if (heads == 0 || embed_dim % heads != 0)
        throw DomainError("embed dim must be divisible by head count");
    if (depth == 0 || classes == 0 || channels == 0) throw DomainError("bad vit config");
    precision.validate();
}

std::string VitConfig::descriptor() const {
    std::ostringstream os;
    os << "bivit-arch v1\n"
       << "image_size=" << image_size << "\npatch_size=" << patch_size
       << "\nchannels=" << channels << "\nembed_dim=" << embed_dim << "\ndepth=" << depth
       << "\nheads=" << heads << "\nmlp_ratio=" << mlp_ratio << "\nclasses=" << classes
       << "\nattn_binarizer=" << to_string(attn_binarizer)
       << "\nprecision=" << precision.mhsa_weights << "," << precision.mhsa_acts << ","
       << precision.mlp_weights << "," << precision.mlp_acts << "," << precision.attention_acts
       << "\n";
    return os.str();
}

VitConfig VitConfig::from_descriptor(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "bivit-arch v1")
        throw FormatError("bad architecture descriptor header: '" + line + "'", 0);
    VitConfig cfg;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("bad descriptor line: " + line, 0);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "image_size") cfg.image_size = std::stoul(val);
        else if (key == "patch_size") cfg.patch_size = std::stoul(val);
        else if (key == "channels") cfg.channels = std::stoul(val);
        else if (key == "embed_dim") cfg.embed_dim = std::stoul(val);
        else if (key == "depth") cfg.depth = std::stoul(val);
        else if (key == "heads") cfg.heads = std::stoul(val);
        else if (key == "mlp_ratio") cfg.mlp_ratio = std::stoul(val);
        else if (key == "classes") cfg.classes = std::stoul(val);
        else if (key == "attn_binarizer") cfg.attn_binarizer = attn_binarizer_from_string(val);
        else if (key == "precision") {
            std::istringstream ps(val);
            std::string tok;
            int* fields[5] = {&cfg.precision.mhsa_weights, &cfg.precision.mhsa_acts,
                              &cfg.precision.mlp_weights, &cfg.precision.mlp_acts,
                              &cfg.precision.attention_acts};
            for (int i = 0; i < 5; ++i) {
                if (!std::getline(ps, tok, ',')) throw FormatError("bad precision field", 0);
                *fields[i] = std::stoi(tok);
            }
        } else {
            throw FormatError("unknown descriptor key: " + key, 0);
        }
    }
    cfg.validate();
    return cfg;
}

TinyVit TinyVit::init(const VitConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    TinyVit m;
    m.cfg = cfg;
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.embed_dim;
    m.patch_weight = Param{"patch.weight", Tensor({d, cfg.patch_dim()})};
    m.patch_weight.value.fill_normal(rng, 0.0, 0.02);
    m.patch_bias = Param{"patch.bias", Tensor({d})};
    m.cls_token = Param{"cls_token", Tensor({1, d})};
    m.cls_token.value.fill_normal(rng, 0.0, 0.02);
    m.pos_embed = Param{"pos_embed", Tensor({cfg.tokens(), d})};
    m.pos_embed.value.fill_normal(rng, 0.0, 0.02);
    for (std::size_t b = 0; b < cfg.depth; ++b) {
        const std::string prefix = "block" + std::to_string(b);
        EncoderBlock blk;
        blk.ln1 = LayerNormParams::init(prefix + ".ln1", d);
        blk.ln2 = LayerNormParams::init(prefix + ".ln2", d);
        blk.attn = BinarizedMhsa::init(prefix + ".attn", d, cfg.heads, cfg.tokens(), rng);
        blk.attn.binarizer = cfg.attn_binarizer;
        blk.mlp_fc1 = BinaryLinear::init(prefix + ".mlp_fc1", cfg.mlp_ratio * d, d, rng);
        blk.mlp_fc2 = BinaryLinear::init(prefix + ".mlp_fc2", d, cfg.mlp_ratio * d, rng);
        m.blocks.push_back(std::move(blk));
    }
    m.ln_final = LayerNormParams::init("ln_final", d);
    m.head_weight = Param{"head.weight", Tensor({cfg.classes, d})};
    m.head_weight.value.fill_normal(rng, 0.0, 0.02);
    m.head_bias = Param{"head.bias", Tensor({cfg.classes})};
    return m;
}

std::vector<Param*> TinyVit::parameters() {
    std::vector<Param*> out = {&patch_weight, &patch_bias, &cls_token, &pos_embed};
    for (EncoderBlock& b : blocks) {
        out.push_back(&b.ln1.gamma);
        out.push_back(&b.ln1.beta);
        for (BinaryLinear* lin : {&b.attn.q_proj, &b.attn.k_proj, &b.attn.v_proj, &b.attn.out_proj}) {
            out.push_back(&lin->weight);
            out.push_back(&lin->alpha);
        }
        out.push_back(&b.attn.alpha_q);
        out.push_back(&b.attn.alpha_k);
        out.push_back(&b.attn.alpha_v);
        out.push_back(&b.attn.alpha_attn);
        out.push_back(&b.attn.tau_attn);
        out.push_back(&b.ln2.gamma);
        out.push_back(&b.ln2.beta);
        for (BinaryLinear* lin : {&b.mlp_fc1, &b.mlp_fc2}) {
            out.push_back(&lin->weight);
            out.push_back(&lin->alpha);
        }
    }
    out.push_back(&ln_final.gamma);
    out.push_back(&ln_final.beta);
    out.push_back(&head_weight);
    out.push_back(&head_bias);
    return out;
}

std::vector<const Param*> TinyVit::parameters() const {
    auto ps = const_cast<TinyVit*>(this)->parameters();
    return {ps.begin(), ps.end()};
}

Tensor TinyVit::patchify(const Tensor& image) const {
    const std::size_t hw = cfg.image_size, p = cfg.patch_size, ch = cfg.channels;
    const bool chw = image.rank() == 3;
    if ((chw && (image.dim(0) != ch || image.dim(1) != hw || image.dim(2) != hw)) ||
        (!chw && (image.rank() != 2 || ch != 1 || image.dim(0) != hw || image.dim(1) != hw)))
        throw ShapeError("patchify: image " + shape_str(image.shape) + " does not match config");
    const std::size_t side = cfg.patches_per_side();
    Tensor out({side * side, cfg.patch_dim()});
    std::size_t row = 0;
    for (std::size_t py = 0; py < side; ++py) {
        for (std::size_t px = 0; px < side; ++px, ++row) {
            std::size_t col = 0;
            for (std::size_t c = 0; c < ch; ++c)
                for (std::size_t dy = 0; dy < p; ++dy)
                    for (std::size_t dx = 0; dx < p; ++dx, ++col) {
                        const std::size_t y = py * p + dy, x = px * p + dx;
                        out.at(row, col) =
                            chw ? image.at(c, y, x) : image.at(y, x);
                    }
        }
    }
    return out;
}

ValueId TinyVit::forward(Tape& tape, Binder& bind, const Tensor& image,
                         std::vector<BlockRecord>* records) const {
    auto& self = const_cast<TinyVit&>(*this);
    const ValueId patches = tape.constant(patchify(image));
    // Patch embedding stays real-valued in every precision config.
    ValueId x = tape.add_bias(tape.matmul(patches, bind(self.patch_weight), /*trans_b=*/true),
                              bind(self.patch_bias));
    x = tape.concat_rows(bind(self.cls_token), x);
    x = tape.add(x, bind(self.pos_embed));
    for (const EncoderBlock& blk : blocks) {
        BlockRecord rec;
        const ValueId normed = blk.ln1.forward(tape, bind, x);
        const ValueId a = blk.attn.forward(tape, bind, normed, cfg.precision, &rec.attention);
        x = tape.add(x, a);
        const ValueId normed2 = blk.ln2.forward(tape, bind, x);
        const int mw = cfg.precision.mlp_weights, ma = cfg.precision.mlp_acts;
        ValueId hidden = blk.mlp_fc1.forward(tape, bind, normed2, mw, ma);
        // At a1 the fc2 input binarizer is the nonlinearity; otherwise GELU.
        if (ma != 1) hidden = tape.gelu(hidden);
        x = tape.add(x, blk.mlp_fc2.forward(tape, bind, hidden, mw, ma));
        if (records) records->push_back(std::move(rec));
    }
    x = ln_final.forward(tape, bind, x);
    const ValueId cls = tape.rows(x, 0, 1);
    const ValueId logits =
        tape.add_bias(tape.matmul(cls, bind(self.head_weight), /*trans_b=*/true),
                      bind(self.head_bias));
    return tape.reshape(logits, {cfg.classes});
}

int TinyVit::predict(const Tensor& image) const {
    Tape tape;
    Binder bind(tape, /*trainable=*/false);
    const ValueId logits = forward(tape, bind, image, nullptr);
    const Tensor& v = tape.value(logits);
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v.values[i] > v.values[best]) best = i;
    return static_cast<int>(best);
}

namespace {

std::vector<double> zero_fraction_per_head(const Tensor& x, const Tensor& alpha,
                                           const Tensor* center) {
    const std::size_t h = x.dim(0);
    const std::size_t stride = x.size() / h;
    std::vector<double> out(h, 0.0);
    for (std::size_t i = 0; i < h; ++i) {
        const double a = alpha.values[alpha.size() == 1 ? 0 : i];
        const double c = center ? center->values[center->size() == 1 ? 0 : i] : 0.0;
        std::size_t zeroed = 0;
        for (std::size_t j = 0; j < stride; ++j) {
            if (std::abs(x.values[i * stride + j] - c) > a) ++zeroed;
        }
        out[i] = static_cast<double>(zeroed) / static_cast<double>(stride);
    }
    return out;
}

} // namespace

std::vector<SteFractions> ste_grad_fractions(Tape& tape, const std::vector<BlockRecord>& records) {
    if (!tape.backward_done())
        throw ContractError("ste_grad_fractions requires a completed forward+backward pass");
    std::vector<SteFractions> out;
    for (const BlockRecord& rec : records) {
        SteFractions f;
        if (rec.attention.binarized) {
            f.q = zero_fraction_per_head(tape.value(rec.attention.q_in), rec.attention.alpha_q,
                                         nullptr);
            f.k = zero_fraction_per_head(tape.value(rec.attention.k_in), rec.attention.alpha_k,
                                         nullptr);
            f.v = zero_fraction_per_head(tape.value(rec.attention.v_in), rec.attention.alpha_v,
                                         nullptr);
            f.attn = zero_fraction_per_head(tape.value(rec.attention.attn), rec.attention.alpha_attn,
                                            &rec.attention.tau_attn);
        }
        out.push_back(std::move(f));
    }
    return out;
}

void set_lsf_enabled(TinyVit& model, bool enabled) {
    for (EncoderBlock& b : model.blocks) {
        for (Param* p : {&b.attn.alpha_q, &b.attn.alpha_k, &b.attn.alpha_v, &b.attn.alpha_attn}) {
            p->trainable = enabled;
            if (!enabled) p->value = Tensor::full({model.cfg.heads}, 1.0);
        }
        b.attn.tau_attn.trainable = enabled;
        if (!enabled)
            b.attn.tau_attn.value =
                Tensor::full({model.cfg.heads}, 1.0 / static_cast<double>(model.cfg.tokens()));
    }
}

} // namespace bivit
