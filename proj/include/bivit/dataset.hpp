#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bivit/tensor.hpp"

namespace bivit {

enum class DataSource { idx_images, cifar_binary, synthetic };

DataSource data_source_from_string(const std::string& s);

struct DatasetSpec {
    DataSource source = DataSource::synthetic;
    std::string images_path;  // idx_images
    std::string labels_path;  // idx_images
    std::string record_path;  // cifar_binary
    std::size_t resolution = 16;
    std::size_t channels = 1;
    std::size_t classes = 10;
    // per-dataset standardization; applied per image after loading
    bool normalize = true;
    // synthetic generator
    std::size_t synth_train = 1024;
    std::size_t synth_val = 256;
    double synth_noise = 1.0;
    std::size_t synth_shift = 0;   // max |circular translation| per sample, in pixels
    bool synth_localized = false;  // class evidence in one stamp at a random position
    std::uint64_t synth_seed = 1234;
};

struct Dataset {
    std::vector<Tensor> images;  // [H,W] or [C,H,W]
    std::vector<int> labels;
    std::size_t classes = 0;
};

struct DataSplit {
    Dataset train;
    Dataset val;
};

// Loads per the spec; IDX and CIFAR files are validated record by record and
// malformed input reports the offending byte offset.
DataSplit load_dataset(const DatasetSpec& spec);

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t classes, bool normalize);
Dataset load_cifar_binary(const std::string& record_path, std::size_t classes, bool normalize);

// Per-class smooth random patterns plus Gaussian pixel noise, each sample
// circularly translated by up to max_shift pixels. Higher noise makes the
// task harder; patterns are a pure function of (seed, class), and `stream`
// selects a disjoint sample sequence (train vs val).
Dataset make_synthetic(std::size_t classes, std::size_t count, std::size_t resolution,
                       double noise, std::uint64_t seed, std::uint64_t stream = 0,
                       std::size_t max_shift = 0);

// Localized variant: the class evidence is one half-resolution stamp placed
// at a random position over a pure-noise background, so recognition depends
// on attending to the right region.
Dataset make_synthetic_localized(std::size_t classes, std::size_t count, std::size_t resolution,
                                 double noise, std::uint64_t seed, std::uint64_t stream = 0);

// Deterministic epoch order: a permutation drawn from the given generator.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng);

} // namespace bivit
