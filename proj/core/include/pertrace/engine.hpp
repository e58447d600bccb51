#pragma once

#include "pertrace/model.hpp"
#include "pertrace/tensor.hpp"

#include <array>
#include <compare>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace pertrace {

struct ComponentId {
    enum class Kind : int { head = 0, mlp = 1 };
    Kind kind = Kind::head;
    int layer = 0;
    int head = 0;  // ignored for MLPs

    static ComponentId attention(int layer, int head) { return {Kind::head, layer, head}; }
    static ComponentId mlp(int layer) { return {Kind::mlp, layer, 0}; }
    bool is_head() const { return kind == Kind::head; }
    /// "L3H5" or "L3MLP".
    std::string label() const;
    static ComponentId parse(const std::string& text);

    friend auto operator<=>(const ComponentId&, const ComponentId&) = default;
};

/// Replaces a component's additive contribution at `positions` (rows of `values`).
struct ComponentPatch {
    ComponentId id;
    std::vector<std::size_t> positions;
    Matrix values;  // positions.size() x d_model
};

/// Replaces the softmax output of one head at query `positions`.
struct PatternPatch {
    int layer = 0;
    int head = 0;
    std::vector<std::size_t> positions;
    Matrix rows;  // positions.size() x T
};

/// Adds `delta` to the stream entering `layer` (r^(layer-1) in 1-based terms).
struct ResidualDelta {
    int layer = 0;
    std::vector<std::size_t> positions;
    Matrix delta;  // positions.size() x d_model
};

struct OverrideSet {
    std::vector<ComponentPatch> components;
    std::vector<PatternPatch> patterns;
    std::vector<ResidualDelta> deltas;

    bool empty() const { return components.empty() && patterns.empty() && deltas.empty(); }
    /// Lowest layer touched by any override (n_layers when empty).
    int earliest_layer(int n_layers) const;
};

/// Which activations to keep. The residual tape is always recorded.
struct RecordOptions {
    bool attn_inputs = false;    // post-norm attention input per layer
    bool head_out = false;       // z_h, T x d_head per head
    bool head_contrib = false;   // z_h W_O (+ b_O / H), T x d per head
    bool attention = false;      // softmax patterns, T x T per head
    bool attn_logits = false;    // scaled pre-softmax scores, T x T per head
    bool mlp_out = false;        // T x d per layer

    static RecordOptions all() { return {true, true, true, true, true, true}; }
};

struct RunTrace {
    std::vector<int> token_ids;
    /// residual[0] is the embedding stream; residual[l + 1] is the output of
    /// layer l. Values include any residual deltas applied at that layer.
    std::vector<Matrix> residual;
    std::vector<Matrix> attn_input;
    std::vector<std::vector<Matrix>> head_out;
    std::vector<std::vector<Matrix>> head_contrib;
    std::vector<std::vector<Matrix>> attention;
    std::vector<std::vector<Matrix>> attn_logits;
    std::vector<Matrix> mlp_out;
    /// Post-final-norm hidden state and next-token logits at the last position.
    Vector final_hidden;
    Vector logits;

    std::size_t length() const { return token_ids.size(); }
};

/// Full forward pass.
RunTrace run(const ModelBundle& model, std::span<const int> token_ids, const OverrideSet& overrides = {},
             const RecordOptions& record = {});

/// Re-runs layers start_layer..L-1 starting from base.residual[start_layer].
/// Layers below start_layer are copied from `base`; overrides must not target
/// them.
RunTrace resume(const ModelBundle& model, const RunTrace& base, int start_layer, const OverrideSet& overrides,
                const RecordOptions& record = {});

/// Logits at the last position for an arbitrary residual row (final norm + unembedding).
Vector logits_from_residual(const ModelBundle& model, std::span<const float> residual_row);

struct CircuitMatrices {
    Matrix w_qk;  // d x d, W_Q W_K^T / sqrt(d_k)
    Matrix w_ov;  // d x d, W_V W_O
};
CircuitMatrices circuit_matrices(const ModelBundle& model, int layer, int head);

struct Readout {
    std::array<double, 4> p_raw{};
    std::array<double, 4> p_renorm{};
    int argmax = 0;
    bool tie = false;
};

/// Softmax probabilities of the four option tokens at the final position.
/// The argmax over options breaks ties toward the lowest index.
Readout decision_readout(const RunTrace& trace, const std::array<int, 4>& option_token_ids);
Readout decision_readout(std::span<const float> logits, const std::array<int, 4>& option_token_ids);

/// Rotates one head vector (rotate-half layout) to `position`; negative
/// positions rotate backwards.
void rotate_head_vector(std::span<float> v, double position, float theta);

/// Greedy continuation (no cache): appends `n` argmax tokens.
std::vector<int> greedy_decode(const ModelBundle& model, std::vector<int> ids, int n);

} // namespace pertrace
