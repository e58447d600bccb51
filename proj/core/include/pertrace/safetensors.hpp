#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace pertrace {

enum class DType { F32, F16, BF16 };

const char* dtype_name(DType t);
std::size_t dtype_size(DType t);

/// One named tensor. Values are always held as float; `dtype` is the storage
/// type used in the container, so F16/BF16 tensors survive load -> save.
struct TensorEntry {
    DType dtype = DType::F32;
    std::vector<std::size_t> shape;
    std::vector<float> data;

    std::size_t numel() const;
};

/// Flat tensor container: 8-byte little-endian header length, a JSON header
/// mapping name -> {dtype, shape, data_offsets}, then the raw data region.
class TensorFile {
public:
    static TensorFile load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const TensorEntry& at(const std::string& name) const;
    const TensorEntry* find(const std::string& name) const;
    void put(const std::string& name, TensorEntry entry);
    std::vector<std::string> names() const;
    std::size_t size() const { return tensors_.size(); }

    std::map<std::string, std::string>& metadata() { return metadata_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

private:
    std::map<std::string, TensorEntry> tensors_;
    std::map<std::string, std::string> metadata_;
};

float half_to_float(std::uint16_t h);
std::uint16_t float_to_half(float f);
float bf16_to_float(std::uint16_t b);
std::uint16_t float_to_bf16(float f);

} // namespace pertrace
