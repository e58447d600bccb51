#pragma once

#include "pertrace/engine.hpp"
#include "pertrace/linalg.hpp"
#include "pertrace/prompts.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace pertrace {

// Decision subspace ----------------------------------------------------------

/// One head output at the final position with the option the model chose.
struct DecisionSample {
    std::string example_id;
    std::string condition;  // "clean" or "persuasive"
    int chosen = 0;
    Vector output;
};

/// Head contributions at the answer slot for the clean and persuasive prompt
/// of every pair, in pair order (clean first).
std::vector<DecisionSample> collect_decision_outputs(const ModelBundle& model, const std::vector<PromptPair>& pairs,
                                                     const ComponentId& head, int jobs = 1);

struct DecisionSubspace {
    ComponentId head;
    Vector mean;
    Matrix basis;  // d x 3, orthonormal columns
    Vector explained_variance_ratio;  // full spectrum
    std::array<Vector, 4> centroids;  // 3-dim coordinates; empty when no sample chose that option
    std::array<std::size_t, 4> counts{};
    bool centroids_partial = false;
    bool rank_deficient = false;

    Matrix projector() const;
    Vector coordinates(std::span<const float> x) const;
    double top3_ratio() const;
};

DecisionSubspace fit_decision_subspace(const std::vector<DecisionSample>& samples, const ComponentId& head);

struct JumpResult {
    int clean_vertex = 0;
    int pers_vertex = 0;
    bool jumped = false;
    double margin = 0.0;        // persuasive output: second-nearest minus nearest distance
    double clean_margin = 0.0;
    bool tie = false;
};

/// Nearest-centroid assignment in the subspace coordinates; ties go to the
/// clean vertex.
JumpResult classify_jump(const DecisionSubspace& subspace, std::span<const float> clean_output,
                         std::span<const float> pers_output);

// OV analysis ----------------------------------------------------------------

struct OptionProjection {
    std::string example_id;
    std::string condition;
    int option = 0;
    std::size_t position = 0;
    double attention = 0.0;
    Vector coords;  // projection onto V_opt
};

struct OVAnalysis {
    ComponentId head;
    Matrix c_dec;            // P_dec W_OV^T: d x d, acts on column vectors
    Matrix v_opt;            // d x 3, top right singular vectors of c_dec
    Vector singular_values;  // of c_dec, top 3
    std::array<std::array<double, 4>, 4> alignment{};  // rows: OV side option, cols: decision side option
    std::array<bool, 4> ov_present{};
    std::array<bool, 4> decision_present{};
    std::vector<OptionProjection> projections;
};

/// Tokens of `span` carrying the top `mass` share of the attention weight
/// inside that span, highest weight first.
std::vector<std::size_t> top_mass_positions(std::span<const float> attention_row, const TokenSpan& span, double mass);

OVAnalysis ov_analysis(const ModelBundle& model, const DecisionSubspace& subspace, const std::vector<PromptPair>& pairs,
                       const std::vector<DecisionSample>& samples, double mass = 0.9, int jobs = 1);

// Rank-1 QK factorization ----------------------------------------------------

struct QKExample {
    std::string example_id;
    std::string condition;
    Vector r_q;  // query representation at the answer slot
    Matrix r_k;  // key representations, one row per position j <= T
    std::array<TokenSpan, 4> options;
};

struct QKDataset {
    ComponentId head;
    std::size_t d = 0;
    bool rotary_folded = false;
    std::vector<QKExample> examples;
};

/// Post-norm inputs of the decision layer for the clean and persuasive prompt
/// of every pair. Rotary keys are folded to the query position.
QKDataset build_qk_dataset(const ModelBundle& model, const std::vector<PromptPair>& pairs, const ComponentId& head,
                           int jobs = 1);

struct Rank1Options {
    int folds = 10;
    double epsilon = 1e-8;
    int restarts = 8;
    int max_iter = 500;
    double tolerance = 1e-8;
    std::uint64_t seed = 0;
};

struct RoutingFeature {
    Vector u_q;
    Vector u_k;
    double coupling = 0.0;
    double train_objective = 0.0;
    double cv_mean = 0.0;
    double cv_std = 0.0;
    std::vector<double> fold_objectives;
    double epsilon = 1e-8;
    int folds = 0;
    int iterations = 0;
    bool converged = true;
};

/// Mean over examples of ||y - y_hat||^2 / (||y||^2 + eps) for the rank-1
/// approximation defined by (u_q, u_k).
double rank1_objective(const QKDataset& data, const Matrix& w_qk, std::span<const float> u_q,
                       std::span<const float> u_k, double epsilon);

/// Fits u_q, u_k on all examples (no cross-validation).
RoutingFeature fit_rank1_qk_once(const QKDataset& data, const Matrix& w_qk, const Rank1Options& options);

/// k-fold cross-validated fit followed by a refit on all examples.
RoutingFeature fit_rank1_qk(const QKDataset& data, const Matrix& w_qk, const Rank1Options& options);

struct FactoredLogit {
    double key_side = 0.0;
    double coupling = 0.0;
    double query_side = 0.0;
    double product = 0.0;
};
FactoredLogit factored_logit(const RoutingFeature& feature, const Matrix& w_qk, std::span<const float> r_key,
                             std::span<const float> r_query);

// Composition ----------------------------------------------------------------

/// ||AB||_F / (||A||_F ||B||_F).
double composition_score(const Matrix& a, const Matrix& b);
/// The same quantity from the singular value decompositions of A and B.
double composition_score_spectral(const Matrix& a, const Matrix& b);

/// u_k u_k^T W_QK^T u_q u_q^T.
Matrix routing_component(const RoutingFeature& feature, const Matrix& w_qk);

struct CompositionEntry {
    ComponentId head;
    std::optional<double> score;  // absent when the head's OV circuit is zero
};

struct CompositionScan {
    ComponentId decision_head;
    std::vector<CompositionEntry> entries;  // (layer, head) order
    std::vector<CompositionEntry> ranked() const;
};

/// Scores each head below the decision layer: A = its W_OV, B = the routing
/// component of the decision head.
CompositionScan composition_scan(const ModelBundle& model, const RoutingFeature& feature,
                                 const ComponentId& decision_head, int jobs = 1);

} // namespace pertrace
