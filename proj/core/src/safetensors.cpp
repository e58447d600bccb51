#include "pertrace/safetensors.hpp"

#include "pertrace/errors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

namespace pertrace {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

const char* dtype_name(DType t) {
    switch (t) {
        case DType::F32: return "F32";
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
    }
    return "?";
}

std::size_t dtype_size(DType t) { return t == DType::F32 ? 4 : 2; }

std::size_t TensorEntry::numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3ffu;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

std::uint16_t float_to_half(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t exp = (x >> 23) & 0xffu;
    std::uint32_t mant = x & 0x7fffffu;
    if (exp == 0xff) return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
    const int e = static_cast<int>(exp) - 127 + 15;
    if (e >= 0x1f) return static_cast<std::uint16_t>(sign | 0x7c00u);
    if (e <= 0) {
        if (e < -10) return sign;
        mant |= 0x800000u;
        const int shift = 14 - e;
        std::uint32_t half = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1);
        const std::uint32_t mid = 1u << (shift - 1);
        if (rem > mid || (rem == mid && (half & 1u))) ++half;
        return static_cast<std::uint16_t>(sign | half);
    }
    std::uint32_t half = (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
}

float bf16_to_float(std::uint16_t b) { return std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16); }

std::uint16_t float_to_bf16(float f) {
    std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    if ((x & 0x7fffffffu) > 0x7f800000u) return static_cast<std::uint16_t>((x >> 16) | 0x40u);
    x += 0x7fffu + ((x >> 16) & 1u);
    return static_cast<std::uint16_t>(x >> 16);
}

namespace {

DType parse_dtype(const std::string& name, const std::string& tensor) {
    if (name == "F32") return DType::F32;
    if (name == "F16") return DType::F16;
    if (name == "BF16") return DType::BF16;
    throw DataError(fmt::format("tensor '{}': unsupported dtype {}", tensor, name));
}

void decode_values(const unsigned char* src, DType dtype, std::vector<float>& out) {
    const std::size_t n = out.size();
    switch (dtype) {
        case DType::F32: std::memcpy(out.data(), src, n * 4); break;
        case DType::F16:
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t h;
                std::memcpy(&h, src + 2 * i, 2);
                out[i] = half_to_float(h);
            }
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t h;
                std::memcpy(&h, src + 2 * i, 2);
                out[i] = bf16_to_float(h);
            }
            break;
    }
}

void encode_values(const std::vector<float>& in, DType dtype, std::string& out) {
    const std::size_t start = out.size();
    out.resize(start + in.size() * dtype_size(dtype));
    char* dst = out.data() + start;
    switch (dtype) {
        case DType::F32: std::memcpy(dst, in.data(), in.size() * 4); break;
        case DType::F16:
            for (std::size_t i = 0; i < in.size(); ++i) {
                const std::uint16_t h = float_to_half(in[i]);
                std::memcpy(dst + 2 * i, &h, 2);
            }
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < in.size(); ++i) {
                const std::uint16_t h = float_to_bf16(in[i]);
                std::memcpy(dst + 2 * i, &h, 2);
            }
            break;
    }
}

} // namespace

TensorFile TensorFile::load(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(fmt::format("cannot open tensor file {}", path.string()));
    in.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);
    if (file_size < 8) throw DataError(fmt::format("{}: file too short for a header", path.string()));

    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), 8);
    if (header_len > file_size - 8)
        throw DataError(fmt::format("{}: header length {} exceeds file size", path.string(), header_len));
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));

    json h;
    try {
        h = json::parse(header);
    } catch (const json::parse_error& e) {
        throw DataError(fmt::format("{}: malformed header: {}", path.string(), e.what()));
    }
    if (!h.is_object()) throw DataError(fmt::format("{}: header is not an object", path.string()));

    const std::uint64_t data_size = file_size - 8 - header_len;
    struct Pending {
        std::string name;
        DType dtype;
        std::vector<std::size_t> shape;
        std::uint64_t begin, end;
    };
    std::vector<Pending> pending;
    TensorFile out;
    for (auto it = h.begin(); it != h.end(); ++it) {
        if (it.key() == "__metadata__") {
            for (auto m = it->begin(); m != it->end(); ++m)
                out.metadata_[m.key()] = m->is_string() ? m->get<std::string>() : m->dump();
            continue;
        }
        const auto& e = it.value();
        try {
            Pending p{it.key(), parse_dtype(e.at("dtype").get<std::string>(), it.key()),
                      e.at("shape").get<std::vector<std::size_t>>(), e.at("data_offsets").at(0).get<std::uint64_t>(),
                      e.at("data_offsets").at(1).get<std::uint64_t>()};
            pending.push_back(std::move(p));
        } catch (const json::exception& ex) {
            throw DataError(fmt::format("tensor '{}': malformed header entry: {}", it.key(), ex.what()));
        }
    }
    std::sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) {
        return a.begin != b.begin ? a.begin < b.begin : a.name < b.name;
    });

    std::vector<unsigned char> buf;
    for (const auto& p : pending) {
        const std::size_t numel =
            std::accumulate(p.shape.begin(), p.shape.end(), std::size_t{1}, std::multiplies<>());
        const std::uint64_t expected = numel * dtype_size(p.dtype);
        if (p.end < p.begin || p.end - p.begin != expected)
            throw DataError(fmt::format("tensor '{}': data_offsets span {} bytes, shape needs {}", p.name,
                                        p.end - p.begin, expected));
        if (p.end > data_size)
            throw DataError(fmt::format("tensor '{}': data truncated (needs bytes up to {}, file has {})", p.name,
                                        p.end, data_size));
        buf.resize(expected);
        in.seekg(static_cast<std::streamoff>(8 + header_len + p.begin));
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected));
        if (!in) throw DataError(fmt::format("tensor '{}': read failed", p.name));
        TensorEntry entry{p.dtype, p.shape, std::vector<float>(numel)};
        decode_values(buf.data(), p.dtype, entry.data);
        out.tensors_.emplace(p.name, std::move(entry));
    }
    return out;
}

void TensorFile::save(const fs::path& path) const {
    json h = json::object();
    std::string data;
    for (const auto& [name, entry] : tensors_) {
        if (entry.data.size() != entry.numel())
            throw ShapeError(fmt::format("tensor '{}': {} values for shape of {}", name, entry.data.size(), entry.numel()));
        const std::size_t begin = data.size();
        encode_values(entry.data, entry.dtype, data);
        h[name] = {{"dtype", dtype_name(entry.dtype)}, {"shape", entry.shape}, {"data_offsets", {begin, data.size()}}};
    }
    if (!metadata_.empty()) h["__metadata__"] = metadata_;
    std::string header = h.dump();
    while (header.size() % 8 != 0) header.push_back(' ');
    const std::uint64_t len = header.size();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(fmt::format("cannot write tensor file {}", path.string()));
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw DataError(fmt::format("write failed for {}", path.string()));
}

const TensorEntry& TensorFile::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw DataError(fmt::format("missing tensor '{}'", name));
    return it->second;
}

const TensorEntry* TensorFile::find(const std::string& name) const {
    auto it = tensors_.find(name);
    return it == tensors_.end() ? nullptr : &it->second;
}

void TensorFile::put(const std::string& name, TensorEntry entry) {
    if (entry.data.size() != entry.numel())
        throw ShapeError(fmt::format("tensor '{}': {} values for shape of {}", name, entry.data.size(), entry.numel()));
    tensors_[name] = std::move(entry);
}

std::vector<std::string> TensorFile::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& kv : tensors_) out.push_back(kv.first);
    return out;
}

} // namespace pertrace
