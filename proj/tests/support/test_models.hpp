#pragma once

#include "pertrace/model.hpp"
#include "pertrace/prompts.hpp"
#include "pertrace/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace pertrace::testing {

struct RandomSpec {
    Family family = Family::gpt2;
    int layers = 2;
    int heads = 4;
    int kv_heads = 4;
    int d_model = 16;
    int d_head = 4;
    int d_mlp = 32;
    int max_positions = 64;
    bool tied = false;
    float rope_theta = 10000.0f;
};

/// 256 byte tokens plus merges for " A".." D" and " 1".." 4".
Tokenizer byte_tokenizer();

/// Random small architecture: either family, grouped-query attention and
/// tied embeddings included.
RandomSpec random_spec(std::mt19937_64& rng);

/// Gaussian weights scaled by 1/sqrt(fan-in); GPT-2 models get random biases
/// and norm parameters.
ModelBundle random_model(const RandomSpec& spec, std::uint64_t seed);

std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t n, int vocab);

/// Random QA example drawn from small word pools (including non-ASCII words).
QAExample random_qa_example(std::mt19937_64& rng, const std::string& id);
GeoExample random_geo_example(std::mt19937_64& rng, const std::string& id);

/// Committed planted-toy fixture directory.
std::filesystem::path fixture_dir();
/// Fresh empty directory under the system temp path.
std::filesystem::path temp_dir(const std::string& tag);

} // namespace pertrace::testing
