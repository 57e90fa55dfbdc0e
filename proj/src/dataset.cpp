#include "bivit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>

#include "bivit/errors.hpp"

namespace bivit {

namespace {

void standardize(Tensor& image) {
    double mean = 0.0;
    for (double v : image.values) mean += v;
    mean /= static_cast<double>(image.size());
    double var = 0.0;
    for (double v : image.values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(image.size());
    const double inv = 1.0 / std::sqrt(var + 1e-8);
    for (double& v : image.values) v = (v - mean) * inv;
}

std::uint32_t read_be32(std::ifstream& in, std::size_t& offset, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw FormatError(std::string("truncated ") + what, offset);
    offset += 4;
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

} // namespace

DataSource data_source_from_string(const std::string& s) {
    if (s == "idx_images") return DataSource::idx_images;
    if (s == "cifar_binary") return DataSource::cifar_binary;
    if (s == "synthetic") return DataSource::synthetic;
    throw DomainError("unknown dataset source: " + s);
}

Dataset make_synthetic_localized(std::size_t classes, std::size_t count, std::size_t resolution,
                                 double noise, std::uint64_t seed, std::uint64_t stream) {
    const std::size_t stamp = resolution / 4;
    std::vector<Tensor> stamps;
    for (std::size_t c = 0; c < classes; ++c) {
        std::mt19937_64 rng(seed * 2654435761u + c + 1);
        Tensor s({stamp, stamp});
        std::uniform_real_distribution<double> phase(0.0, 2.0 * 3.14159265358979323846);
        std::uniform_int_distribution<int> freq(1, 3);
        for (int wave = 0; wave < 3; ++wave) {
            const double fx = freq(rng), fy = freq(rng);
            const double px = phase(rng), py = phase(rng);
            for (std::size_t y = 0; y < stamp; ++y)
                for (std::size_t x = 0; x < stamp; ++x)
                    s.at(y, x) += std::sin(2.0 * 3.14159265358979323846 * fx * x /
                                               static_cast<double>(stamp) +
                                           px) *
                                  std::cos(2.0 * 3.14159265358979323846 * fy * y /
                                               static_cast<double>(stamp) +
                                           py);
        }
        standardize(s);
        stamps.push_back(std::move(s));
    }

    Dataset out;
    out.classes = classes;
    std::mt19937_64 rng((seed + stream * 0x9e3779b97f4a7c15ull) ^ 0xda3e39cb94b95bdbull);
    std::normal_distribution<double> gauss(0.0, 1.0);
    // quarter-resolution grid keeps stamps token-aligned
    const std::size_t step = stamp;
    std::uniform_int_distribution<std::size_t> place(0, (resolution - stamp) / step);
    for (std::size_t i = 0; i < count; ++i) {
        const int label = static_cast<int>(i % classes);
        Tensor img({resolution, resolution});
        for (double& v : img.values) v = noise * gauss(rng);
        const std::size_t oy = place(rng) * step, ox = place(rng) * step;
        const Tensor& s = stamps[static_cast<std::size_t>(label)];
        for (std::size_t y = 0; y < stamp; ++y)
            for (std::size_t x = 0; x < stamp; ++x) img.at(oy + y, ox + x) += s.at(y, x);
        standardize(img);
        out.images.push_back(std::move(img));
        out.labels.push_back(label);
    }
    return out;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t classes, bool normalize) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw IoError("cannot open " + images_path);
    std::size_t off = 0;
    const std::uint32_t magic = read_be32(img, off, "image magic");
    if (magic != 0x00000803u)
        throw FormatError("bad image magic " + std::to_string(magic), off - 4);
    const std::uint32_t count = read_be32(img, off, "image count");
    const std::uint32_t rows = read_be32(img, off, "image rows");
    const std::uint32_t cols = read_be32(img, off, "image cols");
    Dataset out;
    out.classes = classes;
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    for (std::uint32_t i = 0; i < count; ++i) {
        if (!img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
            throw FormatError("truncated image record " + std::to_string(i), off);
        off += buf.size();
        Tensor t({rows, cols});
        for (std::size_t j = 0; j < buf.size(); ++j) t.values[j] = buf[j] / 255.0;
        if (normalize) standardize(t);
        out.images.push_back(std::move(t));
    }

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw IoError("cannot open " + labels_path);
    std::size_t loff = 0;
    const std::uint32_t lmagic = read_be32(lab, loff, "label magic");
    if (lmagic != 0x00000801u)
        throw FormatError("bad label magic " + std::to_string(lmagic), loff - 4);
    const std::uint32_t lcount = read_be32(lab, loff, "label count");
    if (lcount != count)
        throw FormatError("label count " + std::to_string(lcount) + " != image count " +
                              std::to_string(count),
                          loff - 4);
    for (std::uint32_t i = 0; i < lcount; ++i) {
        char c;
        if (!lab.read(&c, 1)) throw FormatError("truncated label record " + std::to_string(i), loff);
        ++loff;
        const int label = static_cast<unsigned char>(c);
        if (label >= static_cast<int>(classes))
            throw FormatError("label " + std::to_string(label) + " out of range", loff - 1);
        out.labels.push_back(label);
    }
    return out;
}

Dataset load_cifar_binary(const std::string& record_path, std::size_t classes, bool normalize) {
    std::ifstream in(record_path, std::ios::binary);
    if (!in) throw IoError("cannot open " + record_path);
    constexpr std::size_t kSide = 32, kChannels = 3;
    constexpr std::size_t kRecord = 1 + kChannels * kSide * kSide;
    Dataset out;
    out.classes = classes;
    std::vector<unsigned char> buf(kRecord);
    std::size_t off = 0;
    while (in.read(reinterpret_cast<char*>(buf.data()), kRecord)) {
        const int label = buf[0];
        if (label >= static_cast<int>(classes))
            throw FormatError("label " + std::to_string(label) + " out of range", off);
        Tensor t({kChannels, kSide, kSide});
        for (std::size_t j = 0; j < kChannels * kSide * kSide; ++j)
            t.values[j] = buf[1 + j] / 255.0;
        if (normalize) standardize(t);
        out.images.push_back(std::move(t));
        out.labels.push_back(label);
        off += kRecord;
    }
    if (in.gcount() != 0)
        throw FormatError("trailing partial record of " + std::to_string(in.gcount()) + " bytes",
                          off);
    return out;
}

Dataset make_synthetic(std::size_t classes, std::size_t count, std::size_t resolution,
                       double noise, std::uint64_t seed, std::uint64_t stream,
                       std::size_t max_shift) {
    // Class prototypes: a mix of low-frequency plane waves with
    // class-specific phases, unit-normalized.
    std::vector<Tensor> prototypes;
    for (std::size_t c = 0; c < classes; ++c) {
        std::mt19937_64 rng(seed * 1315423911u + c);
        Tensor proto({resolution, resolution});
        std::uniform_real_distribution<double> phase(0.0, 2.0 * 3.14159265358979323846);
        std::uniform_int_distribution<int> freq(1, 3);
        for (int wave = 0; wave < 4; ++wave) {
            const double fx = freq(rng), fy = freq(rng);
            const double px = phase(rng), py = phase(rng);
            for (std::size_t y = 0; y < resolution; ++y)
                for (std::size_t x = 0; x < resolution; ++x)
                    proto.at(y, x) += std::sin(2.0 * 3.14159265358979323846 * fx * x /
                                                   static_cast<double>(resolution) +
                                               px) *
                                      std::cos(2.0 * 3.14159265358979323846 * fy * y /
                                                   static_cast<double>(resolution) +
                                               py);
        }
        standardize(proto);
        prototypes.push_back(std::move(proto));
    }

    Dataset out;
    out.classes = classes;
    std::mt19937_64 rng((seed + stream * 0x9e3779b97f4a7c15ull) ^ 0x853c49e6748fea9bull);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_int_distribution<long> shift(-static_cast<long>(max_shift),
                                              static_cast<long>(max_shift));
    const long res = static_cast<long>(resolution);
    for (std::size_t i = 0; i < count; ++i) {
        const int label = static_cast<int>(i % classes);
        const Tensor& proto = prototypes[static_cast<std::size_t>(label)];
        const long dy = max_shift ? shift(rng) : 0;
        const long dx = max_shift ? shift(rng) : 0;
        Tensor img({resolution, resolution});
        for (long y = 0; y < res; ++y)
            for (long x = 0; x < res; ++x)
                img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
                    proto.at(static_cast<std::size_t>(((y + dy) % res + res) % res),
                             static_cast<std::size_t>(((x + dx) % res + res) % res));
        for (double& v : img.values) v += noise * gauss(rng);
        standardize(img);
        out.images.push_back(std::move(img));
        out.labels.push_back(label);
    }
    return out;
}

DataSplit load_dataset(const DatasetSpec& spec) {
    DataSplit split;
    switch (spec.source) {
        case DataSource::synthetic: {
            // Same class prototypes, disjoint noise streams.
            if (spec.synth_localized) {
                split.train = make_synthetic_localized(spec.classes, spec.synth_train,
                                                       spec.resolution, spec.synth_noise,
                                                       spec.synth_seed, /*stream=*/0);
                split.val = make_synthetic_localized(spec.classes, spec.synth_val,
                                                     spec.resolution, spec.synth_noise,
                                                     spec.synth_seed, /*stream=*/1);
                return split;
            }
            split.train = make_synthetic(spec.classes, spec.synth_train, spec.resolution,
                                         spec.synth_noise, spec.synth_seed, /*stream=*/0,
                                         spec.synth_shift);
            split.val = make_synthetic(spec.classes, spec.synth_val, spec.resolution,
                                       spec.synth_noise, spec.synth_seed, /*stream=*/1,
                                       spec.synth_shift);
            return split;
        }
        case DataSource::idx_images: {
            Dataset all = load_idx(spec.images_path, spec.labels_path, spec.classes,
                                   spec.normalize);
            const std::size_t val_count = std::max<std::size_t>(1, all.images.size() / 6);
            const std::size_t train_count = all.images.size() - val_count;
            split.train.classes = split.val.classes = all.classes;
            for (std::size_t i = 0; i < all.images.size(); ++i) {
                Dataset& dst = i < train_count ? split.train : split.val;
                dst.images.push_back(std::move(all.images[i]));
                dst.labels.push_back(all.labels[i]);
            }
            return split;
        }
        case DataSource::cifar_binary: {
            Dataset all = load_cifar_binary(spec.record_path, spec.classes, spec.normalize);
            const std::size_t val_count = std::max<std::size_t>(1, all.images.size() / 6);
            const std::size_t train_count = all.images.size() - val_count;
            split.train.classes = split.val.classes = all.classes;
            for (std::size_t i = 0; i < all.images.size(); ++i) {
                Dataset& dst = i < train_count ? split.train : split.val;
                dst.images.push_back(std::move(all.images[i]));
                dst.labels.push_back(all.labels[i]);
            }
            return split;
        }
    }
    throw DomainError("unhandled dataset source");
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // Fisher-Yates with the caller's generator; std::shuffle is not
    // guaranteed reproducible across standard library versions.
    for (std::size_t i = n; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(idx[i - 1], idx[pick(rng)]);
    }
    return idx;
}

} // namespace bivit
