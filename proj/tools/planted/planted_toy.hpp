#pragma once

#include "pertrace/engine.hpp"
#include "pertrace/model.hpp"
#include "pertrace/prompts.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace pertrace::planted {

/// Strengths of the planted circuit.
struct Parameters {
    double entity_routing = 1.0;  // routing component carried by true entities
    double writer_gain = 2.0;     // routing written onto the mentioned option
    double slot_scale = 1.0;      // label token slot code
    double rank_step = 0.5;       // label rank feature step
    double label_norm = 3.0;      // label embedding norm
    double answer_query = 1.0;    // answer-slot query flag
    double binder_query = 3.0;
    double binder_gain = 1.0;
    double writer_match = 2.0;
    double sink_bias = 8.0;
    double decision_query = 2.0;
    double decision_key = 2.0;
    double copy_gain = 1.0;
    double readout_gain = 4.0;
    double filler_bias = 1.0;
    std::uint64_t embedding_seed = 7;
    std::uint64_t corpus_seed = 11;
    std::size_t n_examples = 40;
};

inline constexpr int kWidth = 32;
inline constexpr int kHeads = 4;
inline constexpr int kLayers = 2;
inline constexpr int kVocab = 64;

/// Column `i` of the normalized 32 x 32 Sylvester-Hadamard matrix.
Vector hadamard_column(int i);
/// Unit routing direction written by the planted writer head.
Vector routing_direction();
/// The 3-dim slot code of option k (tetrahedron vertex) embedded in model space.
Vector slot_vector(int k);

ComponentId decision_head();
ComponentId writer_head();
ComponentId decoy_writer_head();
int writer_layer();

ModelBundle build_model(const Parameters& p = {});
std::vector<QAExample> build_corpus(const Parameters& p = {});
PromptTemplate toy_template();

/// Writes model/, corpus.jsonl, template.json, planted.json and toy.cfg.
void write_fixture(const std::filesystem::path& dir, const Parameters& p = {});

} // namespace pertrace::planted
