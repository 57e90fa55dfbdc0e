#include <cmath>
#include <cstdio>
#include <sstream>

#include "bivit/diagnostics.hpp"
#include "bivit/errors.hpp"

namespace bivit {

namespace {

// Reported precision of the reference tables: sizes truncate to one
// decimal, OPs round half up. Working in tenths keeps the ratios exact.
long size_tenths(double bytes) { return static_cast<long>(std::floor(bytes * 10.0 / 1e6)); }
long ops_tenths(double flops) { return static_cast<long>(std::floor(flops * 10.0 / 1e8 + 0.5)); }

constexpr double kLayernormFlopsPerElement = 5.0;

struct Accounting {
    std::vector<OpsSizeLine> lines;

    // A weight matrix plus optional bias. Binarized matrices carry one fp32
    // scale per output channel; biases and norms stay fp32.
    void linear(const std::string& group, std::size_t weight_params, std::size_t out_channels,
                std::size_t bias_params, double macs, bool binarized, bool count_macs = true) {
        OpsSizeLine line;
        line.group = group;
        if (binarized) {
            line.bin_params = weight_params;
            line.fp_params = bias_params + out_channels;  // channel scales
            if (count_macs) line.bops = macs;
        } else {
            line.fp_params = weight_params + bias_params;
            if (count_macs) line.fp_flops = macs;
        }
        lines.push_back(line);
    }

    void fp_only(const std::string& group, std::size_t params, double flops = 0.0) {
        lines.push_back(OpsSizeLine{group, params, 0, flops, 0.0});
    }
};

void account_deit(const ArchSpec& a, bool binarize, Accounting& acc) {
    const std::size_t d = a.embed_dim;
    const std::size_t n = (a.resolution / a.patch) * (a.resolution / a.patch);
    const std::size_t t = n + 1;  // class token
    const std::size_t hidden = a.mlp_ratio * d;
    const double td = static_cast<double>(t) * static_cast<double>(d);

    // The patchify projection is parameter-counted but its MACs are not in
    // the reference OPs accounting, so it contributes no FLOPs here.
    acc.linear("patch_embed", a.in_channels * a.patch * a.patch * d, d, d, 0.0, binarize,
               /*count_macs=*/false);
    acc.fp_only("cls+pos", (1 + t) * d);

    const double qkv_macs = td * static_cast<double>(3 * d);
    const double attn_macs = 2.0 * static_cast<double>(t) * static_cast<double>(t) * d;
    const double proj_macs = td * static_cast<double>(d);
    const double mlp_macs = 2.0 * td * static_cast<double>(hidden);
    for (std::size_t b = 0; b < a.depth; ++b) {
        const std::string p = "block" + std::to_string(b);
        acc.linear(p + ".qkv", 3 * d * d, 3 * d, 3 * d, qkv_macs, binarize);
        // Attention products have no parameters of their own.
        acc.linear(p + ".attn_matmul", 0, 0, 0, attn_macs, binarize);
        acc.linear(p + ".proj", d * d, d, d, proj_macs, binarize);
        acc.linear(p + ".mlp", d * hidden + hidden * d, hidden + d, hidden + d, mlp_macs,
                   binarize);
        acc.fp_only(p + ".norms", 4 * d, kLayernormFlopsPerElement * 2.0 * td);
    }
    acc.fp_only("final_norm", 2 * d, kLayernormFlopsPerElement * td);
    acc.linear("head", d * a.classes, a.classes, a.classes,
               static_cast<double>(d) * static_cast<double>(a.classes), binarize);
}

void account_swin(const ArchSpec& a, bool binarize, Accounting& acc) {
    const std::size_t wsq = a.window * a.window;
    std::size_t tokens = (a.resolution / a.patch) * (a.resolution / a.patch);

    // Patchify convolution stays real-valued in the OPs split (Swin profile);
    // its weight matrix is still binarized for the size accounting.
    const std::size_t c0 = a.stage_dims[0];
    acc.linear("patch_embed", a.in_channels * a.patch * a.patch * c0, c0, c0,
               static_cast<double>(tokens) * a.in_channels * a.patch * a.patch * c0,
               /*binarized=*/false);
    if (binarize) {
        // move the parameters, keep the MACs fp
        acc.lines.back().bin_params = a.in_channels * a.patch * a.patch * c0;
        acc.lines.back().fp_params = 2 * c0;  // bias + channel scales
    }
    acc.fp_only("patch_norm", 2 * c0);

    for (std::size_t s = 0; s < a.stage_dims.size(); ++s) {
        const std::size_t c = a.stage_dims[s];
        const std::size_t heads = c / 32;
        const std::size_t hidden = a.mlp_ratio * c;
        const double tc = static_cast<double>(tokens) * static_cast<double>(c);
        const double qkv_macs = tc * static_cast<double>(3 * c);
        const double attn_macs = 2.0 * static_cast<double>(tokens) * wsq * c;
        const double proj_macs = tc * static_cast<double>(c);
        const double mlp_macs = 2.0 * tc * static_cast<double>(hidden);
        for (std::size_t b = 0; b < a.stage_depths[s]; ++b) {
            const std::string p = "stage" + std::to_string(s) + ".block" + std::to_string(b);
            acc.linear(p + ".qkv", 3 * c * c, 3 * c, 3 * c, qkv_macs, binarize);
            acc.linear(p + ".attn_matmul", 0, 0, 0, attn_macs, binarize);
            acc.fp_only(p + ".rel_pos_bias", (2 * a.window - 1) * (2 * a.window - 1) * heads);
            acc.linear(p + ".proj", c * c, c, c, proj_macs, binarize);
            acc.linear(p + ".mlp", c * hidden + hidden * c, hidden + c, hidden + c, mlp_macs,
                       binarize);
            acc.fp_only(p + ".norms", 4 * c);
        }
        if (s + 1 < a.stage_dims.size()) {
            const std::size_t tokens_out = tokens / 4;
            acc.linear("stage" + std::to_string(s) + ".merge", 4 * c * 2 * c, 2 * c, 0,
                       static_cast<double>(tokens_out) * 4 * c * 2 * c, binarize);
            acc.fp_only("stage" + std::to_string(s) + ".merge_norm", 2 * 4 * c);
            tokens = tokens_out;
        }
    }
    const std::size_t cf = a.stage_dims.back();
    acc.fp_only("final_norm", 2 * cf);
    acc.linear("head", cf * a.classes, a.classes, a.classes,
               static_cast<double>(cf) * static_cast<double>(a.classes), binarize);
}

} // namespace

void ArchSpec::validate() const {
    if (patch == 0 || resolution % patch != 0) throw DomainError("arch: bad patch/resolution");
    if (classes == 0) throw DomainError("arch: classes must be positive");
    if (family == ArchFamily::deit) {
        if (embed_dim == 0 || depth == 0 || heads == 0 || embed_dim % heads != 0)
            throw DomainError("arch: inconsistent deit dims");
    } else {
        if (stage_dims.empty() || stage_dims.size() != stage_depths.size() || window == 0)
            throw DomainError("arch: inconsistent swin stages");
    }
}

ArchSpec ArchSpec::preset(const std::string& name) {
    ArchSpec a;
    a.name = name;
    if (name == "deit-tiny") {
        a.embed_dim = 192; a.depth = 12; a.heads = 3;
    } else if (name == "deit-small") {
        a.embed_dim = 384; a.depth = 12; a.heads = 6;
    } else if (name == "deit-base") {
        a.embed_dim = 768; a.depth = 12; a.heads = 12;
    } else if (name == "swin-tiny" || name == "swin-small") {
        a.family = ArchFamily::swin;
        a.patch = 4;
        a.stage_dims = {96, 192, 384, 768};
        a.stage_depths = name == "swin-tiny" ? std::vector<std::size_t>{2, 2, 6, 2}
                                             : std::vector<std::size_t>{2, 2, 18, 2};
    } else {
        throw DomainError("unknown architecture preset: " + name);
    }
    a.validate();
    return a;
}

const std::vector<std::string>& ArchSpec::preset_names() {
    static const std::vector<std::string> names = {"deit-tiny", "deit-small", "deit-base",
                                                   "swin-tiny", "swin-small"};
    return names;
}

BitsSpec BitsSpec::parse(const std::string& s) {
    const auto dash = s.find('-');
    if (dash == std::string::npos) throw DomainError("bits spec must look like 1-1 or 32-32");
    BitsSpec b;
    b.weights = std::stoi(s.substr(0, dash));
    b.acts = std::stoi(s.substr(dash + 1));
    if ((b.weights != 1 && b.weights != 32) || (b.acts != 1 && b.acts != 32))
        throw DomainError("bits must be 1 or 32");
    return b;
}

std::string BitsSpec::str() const {
    return std::to_string(weights) + "-" + std::to_string(acts);
}

OpsSizeReport ops_size_calc(const ArchSpec& arch, const BitsSpec& bits) {
    arch.validate();
    const bool bin_weights = bits.weights == 1;
    const bool bin_ops = bits.weights == 1 && bits.acts == 1;

    Accounting acc;
    if (arch.family == ArchFamily::deit)
        account_deit(arch, bin_weights, acc);
    else
        account_swin(arch, bin_weights, acc);

    // Binarized MACs count at 32 bits unless activations are 1-bit too.
    if (bin_weights && !bin_ops) {
        for (OpsSizeLine& line : acc.lines) {
            line.fp_flops += line.bops;
            line.bops = 0.0;
        }
    }

    OpsSizeReport rep;
    rep.breakdown = acc.lines;
    for (const OpsSizeLine& line : acc.lines) {
        rep.fp_params += line.fp_params;
        rep.bin_params += line.bin_params;
        rep.fp_flops += line.fp_flops;
        rep.bops += line.bops;
    }
    const double bytes = 4.0 * static_cast<double>(rep.fp_params) +
                         static_cast<double>(rep.bin_params) / 8.0;
    const double ops = rep.fp_flops + rep.bops / 64.0;
    rep.size_mb_exact = bytes / 1e6;
    rep.ops_exact_1e8 = ops / 1e8;
    rep.size_mb = static_cast<double>(size_tenths(bytes)) / 10.0;
    rep.ops_1e8 = static_cast<double>(ops_tenths(ops)) / 10.0;

    if (bits.weights == 32 && bits.acts == 32) {
        rep.accel_ratio = 1.0;
    } else {
        const OpsSizeReport ref = ops_size_calc(arch, BitsSpec{32, 32});
        rep.accel_ratio = rep.ops_1e8 > 0.0 ? ref.ops_1e8 / rep.ops_1e8 : 0.0;
    }
    return rep;
}

std::string OpsSizeReport::pretty() const {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.1f MB, %.1fe8 OPs, %.1fx", size_mb, ops_1e8,
                  std::floor(accel_ratio * 10.0 + 0.5) / 10.0);
    return buf;
}

std::string OpsSizeReport::table() const {
    std::ostringstream os;
    os << "group,fp_params,bin_params,fp_flops,bops\n";
    char buf[160];
    for (const OpsSizeLine& l : breakdown) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.0f,%.0f\n", l.group.c_str(), l.fp_params,
                      l.bin_params, l.fp_flops, l.bops);
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "total,%zu,%zu,%.0f,%.0f\n", fp_params, bin_params, fp_flops,
                  bops);
    os << buf;
    return os.str();
}

} // namespace bivit
