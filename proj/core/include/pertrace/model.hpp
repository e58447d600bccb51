#pragma once

#include "pertrace/safetensors.hpp"
#include "pertrace/tensor.hpp"
#include "pertrace/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pertrace {

enum class Family { gpt2, llama };
enum class PositionalScheme { learned_absolute, rotary };

const char* family_name(Family f);

struct ArchDescriptor {
    Family family = Family::gpt2;
    int n_layers = 0;
    int n_heads = 0;
    int n_kv_heads = 0;
    int d_model = 0;
    int d_head = 0;
    int d_mlp = 0;
    int vocab_size = 0;
    int max_positions = 0;
    float norm_eps = 1e-5f;
    float rope_theta = 10000.0f;
    bool tied_embeddings = false;
    /// True when d_head was given explicitly and may differ from d_model / n_heads.
    bool head_dim_override = false;
    std::optional<int> pad_token_id;

    PositionalScheme positional() const {
        return family == Family::gpt2 ? PositionalScheme::learned_absolute : PositionalScheme::rotary;
    }
    int kv_group() const { return n_heads / n_kv_heads; }

    /// Throws ShapeError / ConfigError on inconsistent counts.
    void validate() const;
    nlohmann::json to_json() const;
    /// Accepts the toolkit's own keys as well as the Hugging Face config keys
    /// of GPT-2 and Llama-family checkpoints.
    static ArchDescriptor from_json(const nlohmann::json& j);
};

/// Weights of one block. Projections use the row-vector convention
/// (y = x W): wq is d x (H d_k), wk/wv are d x (H_kv d_k), wo is (H d_k) x d.
struct LayerWeights {
    Vector ln1_gain, ln1_bias;
    Vector ln2_gain, ln2_bias;
    Matrix wq, wk, wv, wo;
    Vector bq, bk, bv, bo;
    Matrix w_in;    // d x d_mlp (GPT-2 c_fc, Llama up_proj)
    Matrix w_gate;  // d x d_mlp (Llama gate_proj only)
    Matrix w_out;   // d_mlp x d
    Vector b_in, b_out;
};

struct ModelWeights {
    Matrix embed;       // vocab x d
    Matrix positional;  // max_positions x d (learned-absolute only)
    std::vector<LayerWeights> layers;
    Vector final_gain, final_bias;
    Matrix unembed;     // vocab x d
    Vector unembed_bias;
};

/// Everything a forward pass reads. Treated as immutable once built.
struct ModelBundle {
    ArchDescriptor arch;
    ModelWeights weights;
    Tokenizer tokenizer;
    std::string name;
    std::string checksum;

    /// Per-head slices.
    Matrix w_q(int layer, int head) const;
    Matrix w_k(int layer, int head) const;
    Matrix w_v(int layer, int head) const;
    Matrix w_o(int layer, int head) const;
};

using BundlePtr = std::shared_ptr<const ModelBundle>;

/// Reads `dir/model.safetensors`, `dir/config.json`, `dir/vocab.json`, `dir/merges.txt`.
ModelBundle load_model(const std::filesystem::path& dir);

/// Maps container tensors onto the architecture using the family's naming map.
ModelBundle load_checkpoint(const TensorFile& file, const ArchDescriptor& arch, Tokenizer tokenizer);

/// Writes the four model files using the GPT-2 or Llama naming map.
void save_model(const ModelBundle& bundle, const std::filesystem::path& dir);

/// Builds the container for `bundle` (used by save_model and tests).
TensorFile to_tensor_file(const ModelBundle& bundle);

/// Appends a padding token whose embedding and unembedding rows are the mean
/// of the existing rows. Rejects bundles that already have a pad token.
ModelBundle expand_vocab_with_pad(const ModelBundle& bundle, const std::string& pad_token = "<|pad|>");

/// FNV-1a 64 digest of a file, as 16 lowercase hex digits.
std::string file_checksum(const std::filesystem::path& path);

} // namespace pertrace
