#pragma once

#include "pertrace/circuits.hpp"
#include "pertrace/interventions.hpp"
#include "pertrace/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pertrace {

inline constexpr const char* kVersion = "0.1.0";

std::string base64_encode(const std::uint8_t* data, std::size_t n);
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// {"dtype": "F32", "shape": [r, c], "data": base64 of little-endian floats}.
nlohmann::ordered_json matrix_blob(const Matrix& m);
nlohmann::ordered_json vector_blob(std::span<const float> v);
Matrix matrix_from_blob(const nlohmann::json& j);
Vector vector_from_blob(const nlohmann::json& j);

/// Provenance block embedded in every output file. `generated_at` is the only
/// field that changes between identical reruns.
struct RunMetadata {
    std::string command;
    std::string version = kVersion;
    std::string config;  // resolved configuration text
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string model_checksum;
    std::string generated_at;

    nlohmann::ordered_json to_json() const;
};

/// ISO-8601 UTC timestamp, or the value of PERTRACE_FIXED_TIMESTAMP when set.
std::string utc_timestamp();

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j);
nlohmann::json read_json(const std::filesystem::path& path);

/// Minimal RFC 4180 writer; each file starts with a "# " metadata comment line.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const RunMetadata& meta, const std::vector<std::string>& header);
    void row(const std::vector<std::string>& fields);

private:
    std::ofstream out_;
    std::size_t columns_;
};

/// Shortest round-trip decimal form.
std::string num(double v);

nlohmann::ordered_json to_json(const RestorationReport& r);
nlohmann::ordered_json to_json(const PatternPatchSummary& s);
nlohmann::ordered_json to_json(const SteeringReport& r);
nlohmann::ordered_json to_json(const WindowPatchReport& r);
nlohmann::ordered_json to_json(const DecisionSubspace& s);
nlohmann::ordered_json to_json(const OVAnalysis& a);
nlohmann::ordered_json to_json(const RoutingFeature& f);
nlohmann::ordered_json to_json(const CompositionScan& s);

DecisionSubspace subspace_from_json(const nlohmann::json& j);
RoutingFeature feature_from_json(const nlohmann::json& j);

} // namespace pertrace
