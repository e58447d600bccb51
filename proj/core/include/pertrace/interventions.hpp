#pragma once

#include "pertrace/engine.hpp"
#include "pertrace/prompts.hpp"

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace pertrace {

/// Every attention head in layer order, optionally followed by each MLP.
std::vector<ComponentId> all_components(const ArchDescriptor& arch, bool include_mlp = true);

/// Which positions of a component's output are patched.
enum class PatchPositions { all, final };
PatchPositions parse_patch_positions(const std::string& text);
const char* to_string(PatchPositions p);

struct RestorationEntry {
    ComponentId id;
    double mean = 0.0;         // R(c)
    double mean_target = 0.0;  // mean change in target probability
    std::vector<double> delta_correct;
    std::vector<double> delta_target;
};

struct RestorationReport {
    std::vector<std::string> example_ids;
    std::vector<double> baseline_correct;  // persuasive-run p_correct per example
    std::vector<double> clean_correct;     // clean-run p_correct per example
    std::vector<RestorationEntry> entries;  // in the order requested
    PatchPositions positions = PatchPositions::all;
    bool renormalized = false;

    /// Entries sorted by R descending, ties by component order.
    std::vector<RestorationEntry> ranked() const;
};

/// Patches each component's clean contribution into the persuasive run and
/// reports the change in correct-option probability.
RestorationReport restoration_sweep(const ModelBundle& model, const std::vector<PromptPair>& pairs,
                                    const std::vector<ComponentId>& components,
                                    PatchPositions positions = PatchPositions::all, bool renormalized = false,
                                    int jobs = 1);

struct PatternPatchResult {
    bool repaired = false;       // pattern patch restores the correct option
    bool full_repaired = false;  // full head-output patch restores it
    double delta_target = 0.0;   // patched minus persuasive p_target
    double delta_correct = 0.0;  // patched minus persuasive p_correct
    int patched_choice = 0;
    int full_choice = 0;
};

/// Replaces the head's persuasive attention rows with the clean rows; value
/// vectors stay live. The full-output patch of the same head is reported
/// alongside for comparison.
PatternPatchResult attention_pattern_patch(const ModelBundle& model, const PromptPair& pair, int layer, int head);

struct PatternPatchSummary {
    std::vector<std::string> example_ids;  // flipped pairs only
    std::vector<PatternPatchResult> results;
    std::size_t n_pairs = 0;
    double pattern_repair_rate = 0.0;
    double full_repair_rate = 0.0;
};
PatternPatchSummary attention_pattern_study(const ModelBundle& model, const std::vector<PromptPair>& pairs,
                                            int layer, int head, int jobs = 1);

struct SteeringConfig {
    Vector direction;      // unit routing direction
    std::vector<double> alphas;
    int decision_layer = 0;  // the delta enters the stream read by this layer

    static std::vector<double> default_alphas();
};

struct SteeringPoint {
    double alpha = 0.0;
    int choice = 0;
    Readout readout;
};

/// Adds alpha * direction at every token of the target option span before the
/// decision layer and reads out the choice for each alpha.
std::vector<SteeringPoint> steer(const ModelBundle& model, const PromptPair& pair,
                                 std::span<const int> prompt_ids, const SteeringConfig& config, int target_option);

struct SteeringReport {
    std::vector<double> alphas;
    std::vector<double> selection_rate;  // fraction of trials choosing the steered option
    std::vector<double> mean_p_target;   // renormalized probability of the steered option
    std::size_t trials = 0;
    struct Trial {
        std::string example_id;
        int target = 0;
        std::vector<int> choices;
    };
    std::vector<Trial> rows;
    bool monotone() const;
};

/// Steers each clean prompt toward each of its non-correct options in turn.
SteeringReport steering_sweep(const ModelBundle& model, const std::vector<PromptPair>& pairs,
                              const SteeringConfig& config, int jobs = 1);

struct LayerWindow {
    int start = 0;
    int length = 0;
    friend bool operator==(const LayerWindow&, const LayerWindow&) = default;
};
/// All contiguous windows including the empty window.
std::vector<LayerWindow> all_windows(int n_layers);
/// "start:length,..." or "all".
std::vector<LayerWindow> parse_windows(const std::string& text, int n_layers);

struct WindowEntry {
    LayerWindow window;
    double denoise_robustness = 0.0;
    double denoise_delta = 0.0;       // vs persuasive baseline robustness
    double noise_robustness = 0.0;
    double noise_delta = 0.0;         // vs corrupted baseline robustness
    double noise_success_delta = 0.0;  // change in fraction choosing the target
};

struct WindowPatchReport {
    std::vector<std::string> example_ids;
    double persuasive_robustness = 0.0;
    double corrupted_robustness = 0.0;
    double persuasive_success = 0.0;
    double corrupted_success = 0.0;
    std::vector<WindowEntry> entries;
    /// Largest denoising gain; ties go to the shorter, then earlier window.
    std::optional<LayerWindow> best_denoise;
};

/// Layer-window patching of attention outputs at option-field positions:
/// denoising copies corrupted activations into the persuasive run, noising
/// copies persuasive activations into the corrupted run.
WindowPatchReport window_patch(const ModelBundle& model, const std::vector<PromptPair>& pairs,
                               const std::vector<LayerWindow>& windows, int jobs = 1);

} // namespace pertrace
