#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "bivit/tape.hpp"
#include "bivit/tensor.hpp"

namespace bivit {

struct Param {
    std::string name;
    Tensor value;
    bool trainable = true;
};

// Binds model parameters into a tape, once per parameter per pass. With
// trainable=false every parameter enters as a constant (frozen teacher).
class Binder {
public:
    explicit Binder(Tape& tape, bool trainable = true) : tape_(&tape), trainable_(trainable) {}

    ValueId operator()(Param& p);

    struct Bound {
        Param* param;
        ValueId id;
    };
    const std::vector<Bound>& bound() const { return bound_; }
    Tape& tape() { return *tape_; }

private:
    Tape* tape_;
    bool trainable_;
    std::vector<Bound> bound_;
    std::unordered_map<const Param*, ValueId> cache_;
};

// Per-module weight/activation bit widths ("w1a1" etc.). The patch embedding
// and classifier layers are always real-valued regardless of this config.
struct PrecisionConfig {
    int mhsa_weights = 1;
    int mhsa_acts = 1;
    int mlp_weights = 1;
    int mlp_acts = 1;
    int attention_acts = 1;

    static PrecisionConfig all_real() { return {32, 32, 32, 32, 32}; }
    static PrecisionConfig all_binary() { return {1, 1, 1, 1, 1}; }
    bool fully_real() const;
    void validate() const;  // every field must be 1 or 32
};

// How the softmax output is binarized on the value path. threshold_01 maps
// to {0,1} against a learnable per-head threshold; sign_pm1 is the literal
// sign form (constant +1 on a softmax output); none leaves it real.
enum class AttnBinarizer { threshold_01, sign_pm1, none };

const char* to_string(AttnBinarizer b);
AttnBinarizer attn_binarizer_from_string(const std::string& s);

// Linear layer with a latent real weight, binarized per bit flags. At w1a1
// the forward is alpha_w per output channel times a bit-kernel product.
struct BinaryLinear {
    Param weight;  // [C_out, C_in]
    Param alpha;   // [C_out], positive channel-wise weight scale
    int weight_bits = 1;
    int act_bits = 1;

    static BinaryLinear init(const std::string& name, std::size_t c_out, std::size_t c_in,
                             std::mt19937_64& rng);

    std::size_t out_features() const { return weight.value.dim(0); }
    std::size_t in_features() const { return weight.value.dim(1); }

    // x rank-2 [T, C_in] -> [T, C_out]; bit widths default to the stored
    // flags but can be overridden by a precision config.
    ValueId forward(Tape& tape, Binder& bind, ValueId x) const {
        return forward(tape, bind, x, weight_bits, act_bits);
    }
    ValueId forward(Tape& tape, Binder& bind, ValueId x, int w_bits, int a_bits) const;
    // alpha[i] = mean |weight[i,:]|
    void calibrate_weight_scale();
};

struct LayerNormParams {
    Param gamma, beta;
    static LayerNormParams init(const std::string& name, std::size_t dim);
    ValueId forward(Tape& tape, Binder& bind, ValueId x) const;
};

// Forward-pass artifacts of one attention block: the scaled pre-softmax
// scores, the softmax output, and the binarizer inputs needed to account
// for zeroed STE gradients.
struct AttentionRecord {
    ValueId scores = -1;  // [h,T,T] before softmax
    ValueId attn = -1;    // [h,T,T] softmax output
    ValueId q_in = -1, k_in = -1, v_in = -1;  // [h,T,d] binarizer inputs
    Tensor alpha_q, alpha_k, alpha_v, alpha_attn, tau_attn;
    bool binarized = false;
};

// Fully-binarized multi-head self-attention with learnable head-wise scales.
// The derived products alpha_q (x) alpha_k and alpha_attn (x) alpha_v are
// formed on the tape each pass, never stored.
struct BinarizedMhsa {
    std::size_t heads = 0;
    std::size_t head_dim = 0;
    BinaryLinear q_proj, k_proj, v_proj, out_proj;
    Param alpha_q, alpha_k, alpha_v, alpha_attn;  // [h], positive
    Param tau_attn;                               // [h], threshold_01 cut point
    AttnBinarizer binarizer = AttnBinarizer::threshold_01;

    static BinarizedMhsa init(const std::string& name, std::size_t dim, std::size_t heads,
                              std::size_t tokens, std::mt19937_64& rng);

    ValueId forward(Tape& tape, Binder& bind, ValueId x, const PrecisionConfig& pc,
                    AttentionRecord* rec) const;
};

struct VitConfig {
    std::size_t image_size = 16;
    std::size_t patch_size = 4;
    std::size_t channels = 1;
    std::size_t embed_dim = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t classes = 10;
    AttnBinarizer attn_binarizer = AttnBinarizer::threshold_01;
    PrecisionConfig precision;

    std::size_t patches_per_side() const { return image_size / patch_size; }
    std::size_t patch_count() const { return patches_per_side() * patches_per_side(); }
    std::size_t tokens() const { return patch_count() + 1; }
    std::size_t head_dim() const { return embed_dim / heads; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }

    void validate() const;
    // Versioned text block identifying the architecture; checkpoint loads
    // fail loudly when it differs.
    std::string descriptor() const;
    static VitConfig from_descriptor(const std::string& text);
};

struct EncoderBlock {
    LayerNormParams ln1, ln2;
    BinarizedMhsa attn;
    BinaryLinear mlp_fc1, mlp_fc2;
};

struct BlockRecord {
    AttentionRecord attention;
};

// Plain ViT: real-valued patchify projection, class token, positional
// embeddings, binarized encoder blocks, real-valued classifier head.
struct TinyVit {
    VitConfig cfg;
    Param patch_weight;  // [D, P*P*C]
    Param patch_bias;    // [D]
    Param cls_token;     // [1, D]
    Param pos_embed;     // [T, D]
    std::vector<EncoderBlock> blocks;
    LayerNormParams ln_final;
    Param head_weight;  // [K, D]
    Param head_bias;    // [K]

    static TinyVit init(const VitConfig& cfg, std::uint64_t seed);

    std::vector<Param*> parameters();
    std::vector<const Param*> parameters() const;

    Tensor patchify(const Tensor& image) const;  // [N, P*P*C]

    // One image -> logits [K]; appends one record per block.
    ValueId forward(Tape& tape, Binder& bind, const Tensor& image,
                    std::vector<BlockRecord>* records) const;

    // Plain inference: argmax class for one image.
    int predict(const Tensor& image) const;
};

// Per-binarizer fraction of zeroed STE gradients (one entry per head),
// recomputed from the recorded binarizer inputs of a completed pass.
struct SteFractions {
    std::vector<double> q, k, v, attn;
};

std::vector<SteFractions> ste_grad_fractions(Tape& tape, const std::vector<BlockRecord>& records);

// Freeze or release the head-wise attention scales (LSF ablation switch).
// Frozen scales are reset to 1 and excluded from training.
void set_lsf_enabled(TinyVit& model, bool enabled);

} // namespace bivit
