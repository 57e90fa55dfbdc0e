#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bivit/layers.hpp"

namespace bivit {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// First/second moment state aligned with TinyVit::parameters() order.
struct AdamState {
    AdamConfig cfg;
    std::uint64_t step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    void init(const std::vector<Param*>& params);
    bool initialized() const { return !m.empty(); }
};

// Binary checkpoint: magic, format version, architecture descriptor,
// named tensor table (little-endian doubles), optimizer state, RNG state,
// epoch. Loads fail loudly on any mismatch.
void save_checkpoint(const std::string& path, const TinyVit& model, const AdamState* opt,
                     const std::mt19937_64& data_rng, std::uint64_t epoch);

struct LoadedCheckpoint {
    std::uint64_t epoch = 0;
    bool has_optimizer = false;
};

// Reads only the stored architecture descriptor.
VitConfig peek_checkpoint_arch(const std::string& path);

// Loads tensors in place; the model must already match the stored
// architecture descriptor exactly.
LoadedCheckpoint load_checkpoint(const std::string& path, TinyVit& model, AdamState* opt,
                                 std::mt19937_64& data_rng);

// Model-only convenience wrappers (optimizer state preserved as absent).
void save_model(const std::string& path, const TinyVit& model);
TinyVit load_model(const std::string& path);

} // namespace bivit
