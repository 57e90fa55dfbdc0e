#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bivit/layers.hpp"
#include "bivit/tensor.hpp"

namespace bivit {

// Sampled softmax-derivative factor A*(1-A) as the raw +-1 dot product p
// sweeps [-d, d]. The varying logit is p/sqrt(d); the rest of the reference
// row is zero. Only the qualitative shape is meaningful.
struct CurveDump {
    std::vector<double> x;
    std::vector<double> y;
    std::size_t head_dim = 0;
    std::size_t row_len = 0;

    void write_csv(const std::string& path) const;  // header: p,grad_factor
};

CurveDump softmax_grad_curve(std::size_t head_dim, std::size_t samples,
                             std::size_t row_len = 197);

// Attainable dot products of k-length +-1 rows: {-d, -d+2, ..., d}.
// Exhaustive enumeration for d <= 16, randomized sampling above.
struct DotRangeBounds {
    int lo = 0;
    int hi = 0;
    bool bounds_ok = false;
    bool parity_ok = false;
    bool extremes_attained = false;
    std::vector<int> attained;  // populated for d <= 16
};

DotRangeBounds extreme_dot_range_check(std::size_t d, std::size_t samples = 1000,
                                       std::uint64_t seed = 7);

enum class AttentionStage { pre_softmax, post_softmax };

AttentionStage attention_stage_from_string(const std::string& s);

Tensor normalize_map(const Tensor& m);  // min-max to [0,1]; constant maps to 0

void write_pgm(const Tensor& m, const std::string& path);  // P2, maxval 255
Tensor read_pgm(const std::string& path);                  // levels / 255
void write_matrix_txt(const Tensor& m, const std::string& path);
Tensor read_matrix_txt(const std::string& path);

// Dumps one head's [T,T] attention map (min-max normalized graymap plus the
// raw matrix as text) and returns the raw map.
Tensor attention_heatmap_dump(const TinyVit& model, const Tensor& image, std::size_t block,
                              std::size_t head, AttentionStage stage, const std::string& pgm_path,
                              const std::string& txt_path);

// ---------------------------------------------------------------------------
// Theoretical model-size / OPs accounting (Bi-Real convention:
// OPs = FLOPs + BOPs/64; size bits = 32 per fp param + 1 per binarized).

enum class ArchFamily { deit, swin };

struct ArchSpec {
    std::string name;
    ArchFamily family = ArchFamily::deit;
    std::size_t resolution = 224;
    std::size_t patch = 16;
    std::size_t in_channels = 3;
    std::size_t classes = 1000;
    std::size_t mlp_ratio = 4;
    // deit
    std::size_t embed_dim = 192;
    std::size_t depth = 12;
    std::size_t heads = 3;
    // swin
    std::vector<std::size_t> stage_dims;
    std::vector<std::size_t> stage_depths;
    std::size_t window = 7;

    void validate() const;
    static ArchSpec preset(const std::string& name);
    static const std::vector<std::string>& preset_names();
};

struct BitsSpec {
    int weights = 32;
    int acts = 32;
    static BitsSpec parse(const std::string& s);  // "1-1", "32-32"
    std::string str() const;
};

struct OpsSizeLine {
    std::string group;
    std::size_t fp_params = 0;
    std::size_t bin_params = 0;
    double fp_flops = 0.0;
    double bops = 0.0;
};

struct OpsSizeReport {
    // Reported at the table's one-decimal precision: sizes truncate,
    // OPs round half up.
    double size_mb = 0.0;
    double ops_1e8 = 0.0;
    double size_mb_exact = 0.0;
    double ops_exact_1e8 = 0.0;
    std::size_t fp_params = 0;
    std::size_t bin_params = 0;
    double fp_flops = 0.0;
    double bops = 0.0;
    double accel_ratio = 0.0;  // reported real-valued OPs / reported OPs
    std::vector<OpsSizeLine> breakdown;

    std::string pretty() const;  // "1.0 MB, 0.2e8 OPs, 61.5x"
    std::string table() const;   // per-group breakdown
};

OpsSizeReport ops_size_calc(const ArchSpec& arch, const BitsSpec& bits);

} // namespace bivit
