#include "bivit/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include "bivit/bitmatrix.hpp"
#include "bivit/errors.hpp"
#include "bivit/tape.hpp"

namespace bivit {

void CurveDump::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path);
    out << "p,grad_factor\n";
    char buf[64];
    for (std::size_t i = 0; i < x.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", x[i], y[i]);
        out << buf;
    }
}

CurveDump softmax_grad_curve(std::size_t head_dim, std::size_t samples, std::size_t row_len) {
    if (head_dim < 2) throw DomainError("softmax_grad_curve: head dim must be >= 2");
    if (samples < 2) throw DomainError("softmax_grad_curve: need at least 2 samples");
    if (row_len < 2) throw DomainError("softmax_grad_curve: row length must be >= 2");
    CurveDump dump;
    dump.head_dim = head_dim;
    dump.row_len = row_len;
    const double d = static_cast<double>(head_dim);
    const double inv_sqrt_d = 1.0 / std::sqrt(d);
    for (std::size_t i = 0; i < samples; ++i) {
        const double p = -d + 2.0 * d * static_cast<double>(i) / static_cast<double>(samples - 1);
        // softmax over [p/sqrt(d), 0, ..., 0], element 0
        const double logit = p * inv_sqrt_d;
        const double mx = std::max(logit, 0.0);
        const double denom =
            std::exp(logit - mx) + static_cast<double>(row_len - 1) * std::exp(-mx);
        const double a = std::exp(logit - mx) / denom;
        dump.x.push_back(p);
        dump.y.push_back(a * (1.0 - a));
    }
    return dump;
}

DotRangeBounds extreme_dot_range_check(std::size_t d, std::size_t samples, std::uint64_t seed) {
    if (d < 1) throw DomainError("extreme_dot_range_check: d must be >= 1");
    DotRangeBounds out;
    out.lo = -static_cast<int>(d);
    out.hi = static_cast<int>(d);
    out.bounds_ok = true;
    out.parity_ok = true;

    std::mt19937_64 rng(seed);
    auto kernel_dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
        const BitMatrix pa = pack_signs(a, 1, d);
        const BitMatrix pb = pack_signs(b, 1, d);
        return xnor_popcount_gemm(pa, pb).at(0, 0);
    };

    if (d <= 16) {
        // All-ones row against every +-1 row attains every legal value.
        std::set<int> attained;
        const std::vector<double> ones(d, 1.0);
        std::vector<double> row(d);
        for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << d); ++mask) {
            for (std::size_t j = 0; j < d; ++j) row[j] = (mask >> j) & 1 ? 1.0 : -1.0;
            const int dot = kernel_dot(ones, row);
            if (dot < out.lo || dot > out.hi) out.bounds_ok = false;
            if (((dot - static_cast<int>(d)) % 2) != 0) out.parity_ok = false;
            attained.insert(dot);
        }
        out.attained.assign(attained.begin(), attained.end());
        out.extremes_attained = attained.count(out.lo) && attained.count(out.hi);
    } else {
        std::uniform_int_distribution<int> coin(0, 1);
        std::vector<double> a(d), b(d);
        for (std::size_t s = 0; s < samples; ++s) {
            for (std::size_t j = 0; j < d; ++j) {
                a[j] = coin(rng) ? 1.0 : -1.0;
                b[j] = coin(rng) ? 1.0 : -1.0;
            }
            const int dot = kernel_dot(a, b);
            if (dot < out.lo || dot > out.hi) out.bounds_ok = false;
            if (((dot - static_cast<int>(d)) % 2) != 0) out.parity_ok = false;
        }
        // Aligned and anti-aligned rows hit the extremes exactly.
        std::vector<double> r(d);
        for (std::size_t j = 0; j < d; ++j) r[j] = coin(rng) ? 1.0 : -1.0;
        std::vector<double> neg(d);
        for (std::size_t j = 0; j < d; ++j) neg[j] = -r[j];
        out.extremes_attained =
            kernel_dot(r, r) == out.hi && kernel_dot(r, neg) == out.lo;
    }
    return out;
}

AttentionStage attention_stage_from_string(const std::string& s) {
    if (s == "pre_softmax") return AttentionStage::pre_softmax;
    if (s == "post_softmax") return AttentionStage::post_softmax;
    throw DomainError("unknown attention stage: " + s);
}

Tensor normalize_map(const Tensor& m) {
    Tensor out(m.shape);
    if (m.size() == 0) return out;
    const auto [mn, mx] = std::minmax_element(m.values.begin(), m.values.end());
    const double span = *mx - *mn;
    if (span == 0.0) return out;
    for (std::size_t i = 0; i < m.size(); ++i) out.values[i] = (m.values[i] - *mn) / span;
    return out;
}

void write_pgm(const Tensor& m, const std::string& path) {
    if (m.rank() != 2) throw ShapeError("write_pgm: expected a matrix");
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path);
    const Tensor norm = normalize_map(m);
    out << "P2\n" << m.dim(1) << " " << m.dim(0) << "\n255\n";
    for (std::size_t i = 0; i < m.dim(0); ++i) {
        for (std::size_t j = 0; j < m.dim(1); ++j) {
            if (j) out << ' ';
            out << static_cast<int>(std::lround(norm.at(i, j) * 255.0));
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

Tensor read_pgm(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P2") throw FormatError("expected P2 graymap in " + path, 0);
    auto next_token = [&in]() {
        std::string tok;
        while (in >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            return tok;
        }
        throw FormatError("truncated graymap", 0);
    };
    const std::size_t w = std::stoul(next_token());
    const std::size_t h = std::stoul(next_token());
    const double maxval = std::stod(next_token());
    if (maxval <= 0) throw FormatError("bad maxval", 0);
    Tensor out({h, w});
    for (std::size_t i = 0; i < h * w; ++i) out.values[i] = std::stod(next_token()) / maxval;
    return out;
}

void write_matrix_txt(const Tensor& m, const std::string& path) {
    if (m.rank() != 2) throw ShapeError("write_matrix_txt: expected a matrix");
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path);
    out << m.dim(0) << " " << m.dim(1) << "\n";
    char buf[40];
    for (std::size_t i = 0; i < m.dim(0); ++i) {
        for (std::size_t j = 0; j < m.dim(1); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", m.at(i, j));
            out << (j ? " " : "") << buf;
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

Tensor read_matrix_txt(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::size_t rows, cols;
    if (!(in >> rows >> cols)) throw FormatError("bad matrix header in " + path, 0);
    Tensor out({rows, cols});
    for (std::size_t i = 0; i < rows * cols; ++i) {
        if (!(in >> out.values[i])) throw FormatError("truncated matrix in " + path, 0);
    }
    return out;
}

Tensor attention_heatmap_dump(const TinyVit& model, const Tensor& image, std::size_t block,
                              std::size_t head, AttentionStage stage, const std::string& pgm_path,
                              const std::string& txt_path) {
    if (block >= model.cfg.depth) throw DomainError("heatmap: block index out of range");
    if (head >= model.cfg.heads) throw DomainError("heatmap: head index out of range");
    Tape tape;
    Binder bind(tape, /*trainable=*/false);
    std::vector<BlockRecord> records;
    model.forward(tape, bind, image, &records);
    const AttentionRecord& rec = records[block].attention;
    const Tensor& full = tape.value(stage == AttentionStage::pre_softmax ? rec.scores : rec.attn);
    const std::size_t t = full.dim(1);
    Tensor map({t, t});
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j) map.at(i, j) = full.at(head, i, j);
    write_pgm(map, pgm_path);
    write_matrix_txt(map, txt_path);
    return map;
}

} // namespace bivit
