#include "bivit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "bivit/errors.hpp"

namespace bivit {

namespace {

constexpr char kMagic[8] = {'B', 'I', 'V', 'I', 'T', 'C', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

void put_str(std::ostream& out, const std::string& s) {
    put_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in, std::size_t& off) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated checkpoint", off);
    off += 4;
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& in, std::size_t& off) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw FormatError("truncated checkpoint", off);
    off += 8;
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

double get_f64(std::istream& in, std::size_t& off) {
    const std::uint64_t bits = get_u64(in, off);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

std::string get_str(std::istream& in, std::size_t& off) {
    const std::uint64_t n = get_u64(in, off);
    std::string s(n, '\0');
    if (!in.read(s.data(), static_cast<std::streamsize>(n)))
        throw FormatError("truncated checkpoint string", off);
    off += n;
    return s;
}

void put_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
    put_str(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) put_u64(out, d);
    for (double v : t.values) put_f64(out, v);
}

Tensor get_tensor(std::istream& in, std::size_t& off, std::string& name) {
    name = get_str(in, off);
    const std::uint32_t rank = get_u32(in, off);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get_u64(in, off));
    Tensor t(shape);
    for (double& v : t.values) v = get_f64(in, off);
    return t;
}

} // namespace

void AdamState::init(const std::vector<Param*>& params) {
    step = 0;
    m.clear();
    v.clear();
    for (const Param* p : params) {
        m.push_back(Tensor::zeros(p->value.shape));
        v.push_back(Tensor::zeros(p->value.shape));
    }
}

void save_checkpoint(const std::string& path, const TinyVit& model, const AdamState* opt,
                     const std::mt19937_64& data_rng, std::uint64_t epoch) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(kMagic, sizeof kMagic);
    put_u32(out, kVersion);
    put_str(out, model.cfg.descriptor());
    put_u64(out, epoch);
    std::ostringstream rng_text;
    rng_text << data_rng;
    put_str(out, rng_text.str());

    const auto params = model.parameters();
    put_u64(out, params.size());
    for (const Param* p : params) {
        put_tensor(out, p->name, p->value);
        out.put(p->trainable ? 1 : 0);
    }

    out.put(opt && opt->initialized() ? 1 : 0);
    if (opt && opt->initialized()) {
        put_u64(out, opt->step);
        put_f64(out, opt->cfg.lr);
        put_f64(out, opt->cfg.beta1);
        put_f64(out, opt->cfg.beta2);
        put_f64(out, opt->cfg.eps);
        put_f64(out, opt->cfg.weight_decay);
        if (opt->m.size() != params.size())
            throw ContractError("optimizer state does not match parameter count");
        for (std::size_t i = 0; i < params.size(); ++i) {
            put_tensor(out, params[i]->name + ".m", opt->m[i]);
            put_tensor(out, params[i]->name + ".v", opt->v[i]);
        }
    }
    if (!out) throw IoError("write failed: " + path);
}

VitConfig peek_checkpoint_arch(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::size_t off = 0;
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw FormatError("bad checkpoint magic", 0);
    off += 8;
    const std::uint32_t version = get_u32(in, off);
    if (version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version), off - 4);
    return VitConfig::from_descriptor(get_str(in, off));
}

LoadedCheckpoint load_checkpoint(const std::string& path, TinyVit& model, AdamState* opt,
                                 std::mt19937_64& data_rng) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::size_t off = 0;
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw FormatError("bad checkpoint magic", 0);
    off += 8;
    const std::uint32_t version = get_u32(in, off);
    if (version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version), off - 4);
    const std::string descriptor = get_str(in, off);
    if (descriptor != model.cfg.descriptor())
        throw ContractError("checkpoint architecture differs from the model:\n" + descriptor +
                            "\nvs\n" + model.cfg.descriptor());

    LoadedCheckpoint loaded;
    loaded.epoch = get_u64(in, off);
    std::istringstream rng_text(get_str(in, off));
    rng_text >> data_rng;

    const std::uint64_t count = get_u64(in, off);
    auto params = model.parameters();
    if (count != params.size())
        throw FormatError("checkpoint has " + std::to_string(count) + " tensors, model wants " +
                              std::to_string(params.size()),
                          off);
    for (Param* p : params) {
        std::string name;
        Tensor t = get_tensor(in, off, name);
        if (name != p->name)
            throw FormatError("tensor order mismatch: got " + name + ", want " + p->name, off);
        if (t.shape != p->value.shape)
            throw FormatError("tensor shape mismatch for " + name, off);
        p->value = std::move(t);
        const int trainable = in.get();
        if (trainable < 0) throw FormatError("truncated checkpoint", off);
        ++off;
        p->trainable = trainable != 0;
    }

    const int has_opt = in.get();
    if (has_opt < 0) throw FormatError("truncated checkpoint", off);
    ++off;
    loaded.has_optimizer = has_opt != 0;
    if (loaded.has_optimizer) {
        AdamState scratch;
        AdamState* dst = opt ? opt : &scratch;
        dst->step = get_u64(in, off);
        dst->cfg.lr = get_f64(in, off);
        dst->cfg.beta1 = get_f64(in, off);
        dst->cfg.beta2 = get_f64(in, off);
        dst->cfg.eps = get_f64(in, off);
        dst->cfg.weight_decay = get_f64(in, off);
        dst->m.clear();
        dst->v.clear();
        for (std::size_t i = 0; i < params.size(); ++i) {
            std::string name;
            dst->m.push_back(get_tensor(in, off, name));
            dst->v.push_back(get_tensor(in, off, name));
        }
    } else if (opt) {
        opt->m.clear();
        opt->v.clear();
        opt->step = 0;
    }
    return loaded;
}

void save_model(const std::string& path, const TinyVit& model) {
    std::mt19937_64 dummy;
    save_checkpoint(path, model, nullptr, dummy, 0);
}

TinyVit load_model(const std::string& path) {
    TinyVit model = TinyVit::init(peek_checkpoint_arch(path), 0);
    std::mt19937_64 dummy;
    load_checkpoint(path, model, nullptr, dummy);
    return model;
}

} // namespace bivit
