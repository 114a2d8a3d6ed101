#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace flipscope {

// Named-tensor container: 8-byte little-endian header length, JSON header
// describing dtype/shape/data_offsets per tensor (plus a "__metadata__"
// string map), then the raw tensor bytes. Compatible with the common
// safetensors layout.

enum class Dtype { f32, f16, bf16 };

const char* dtype_name(Dtype d);
std::size_t dtype_size(Dtype d);

struct TensorInfo {
    Dtype dtype = Dtype::f32;
    std::vector<std::int64_t> shape;
    std::uint64_t data_begin = 0;  // relative to end of header
    std::uint64_t data_end   = 0;

    std::int64_t numel() const;
};

class TensorFile {
public:
    static TensorFile open(const std::filesystem::path& path);

    bool contains(const std::string& name) const;
    const TensorInfo& info(const std::string& name) const;  // throws naming the tensor
    const std::map<std::string, TensorInfo>& tensors() const { return tensors_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

    /// Loads one tensor, dequantized to f32. Throws with the tensor name on
    /// any missing/shape/dtype problem.
    std::vector<float> read_f32(const std::string& name) const;

    /// Same, but also checks the shape against `expect`.
    std::vector<float> read_f32_checked(const std::string& name,
                                        std::span<const std::int64_t> expect) const;

private:
    std::filesystem::path path_;
    std::map<std::string, TensorInfo> tensors_;
    std::map<std::string, std::string> metadata_;
    std::uint64_t data_offset_ = 0;  // file offset where tensor data starts
};

class TensorFileWriter {
public:
    void add_f32(const std::string& name, std::vector<std::int64_t> shape,
                 std::span<const float> values);
    void add(const std::string& name, Dtype dtype, std::vector<std::int64_t> shape,
             std::span<const float> values);  // converts f32 -> dtype
    void set_metadata(const std::string& key, const std::string& value);

    void write(const std::filesystem::path& path) const;

private:
    struct Pending {
        std::string name;
        Dtype dtype;
        std::vector<std::int64_t> shape;
        std::vector<std::uint8_t> bytes;
    };
    std::vector<Pending> pending_;
    std::map<std::string, std::string> metadata_;
};

// f16/bf16 scalar conversions (round-to-nearest-even for f16).
float f16_to_f32(std::uint16_t h);
std::uint16_t f32_to_f16(float f);
float bf16_to_f32(std::uint16_t h);
std::uint16_t f32_to_bf16(float f);

}  // namespace flipscope
