#include "flipscope/tensor_file.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace flipscope {

using nlohmann::json;

const char* dtype_name(Dtype d) {
    switch (d) {
        case Dtype::f32: return "F32";
        case Dtype::f16: return "F16";
        case Dtype::bf16: return "BF16";
    }
    return "?";
}

std::size_t dtype_size(Dtype d) {
    return d == Dtype::f32 ? 4 : 2;
}

static Dtype dtype_from_name(const std::string& s, const std::string& tensor) {
    if (s == "F32") return Dtype::f32;
    if (s == "F16") return Dtype::f16;
    if (s == "BF16") return Dtype::bf16;
    throw std::runtime_error("tensor '" + tensor + "': unsupported dtype " + s);
}

std::int64_t TensorInfo::numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

float f16_to_f32(std::uint16_t h) {
    std::uint32_t sign = (h & 0x8000u) << 16;
    std::uint32_t exp  = (h >> 10) & 0x1F;
    std::uint32_t man  = h & 0x3FF;
    std::uint32_t bits;
    if (exp == 0) {
        if (man == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            int shift = 0;
            while ((man & 0x400) == 0) {
                man <<= 1;
                ++shift;
            }
            man &= 0x3FF;
            bits = sign | ((127 - 15 - shift + 1) << 23) | (man << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (man << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (man << 13);
    }
    return std::bit_cast<float>(bits);
}

std::uint16_t f32_to_f16(float f) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    std::uint32_t sign = (bits >> 16) & 0x8000u;
    std::int32_t exp   = int((bits >> 23) & 0xFF) - 127 + 15;
    std::uint32_t man  = bits & 0x7FFFFF;
    if (((bits >> 23) & 0xFF) == 0xFF) {
        return static_cast<std::uint16_t>(sign | 0x7C00 | (man ? 0x200 : 0));
    }
    if (exp >= 0x1F) {
        return static_cast<std::uint16_t>(sign | 0x7C00);  // overflow -> inf
    }
    if (exp <= 0) {
        if (exp < -10) return static_cast<std::uint16_t>(sign);
        man |= 0x800000;
        int shift = 14 - exp;
        std::uint32_t half = man >> shift;
        std::uint32_t rem  = man & ((1u << shift) - 1);
        std::uint32_t mid  = 1u << (shift - 1);
        if (rem > mid || (rem == mid && (half & 1))) ++half;
        return static_cast<std::uint16_t>(sign | half);
    }
    std::uint32_t half = (std::uint32_t(exp) << 10) | (man >> 13);
    std::uint32_t rem  = man & 0x1FFF;
    if (rem > 0x1000 || (rem == 0x1000 && (half & 1))) ++half;
    return static_cast<std::uint16_t>(sign | half);
}

float bf16_to_f32(std::uint16_t h) {
    return std::bit_cast<float>(std::uint32_t(h) << 16);
}

std::uint16_t f32_to_bf16(float f) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    if (std::isnan(f)) return static_cast<std::uint16_t>((bits >> 16) | 0x40);
    std::uint32_t lsb = (bits >> 16) & 1;
    bits += 0x7FFF + lsb;  // round to nearest even
    return static_cast<std::uint16_t>(bits >> 16);
}

TensorFile TensorFile::open(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open tensor file: " + path.string());
    }
    std::uint8_t len_bytes[8];
    if (!in.read(reinterpret_cast<char*>(len_bytes), 8)) {
        throw std::runtime_error("tensor file truncated (header length): " + path.string());
    }
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];
    if (header_len == 0 || header_len > (1ull << 30)) {
        throw std::runtime_error("tensor file header length implausible: " + path.string());
    }
    std::string header(header_len, '\0');
    if (!in.read(header.data(), std::streamsize(header_len))) {
        throw std::runtime_error("tensor file truncated (header): " + path.string());
    }

    json j;
    try {
        j = json::parse(header);
    } catch (const std::exception& e) {
        throw std::runtime_error("tensor file header is not valid JSON: " + std::string(e.what()));
    }

    TensorFile tf;
    tf.path_ = path;
    tf.data_offset_ = 8 + header_len;

    in.seekg(0, std::ios::end);
    const std::uint64_t file_size = std::uint64_t(in.tellg());
    const std::uint64_t data_size = file_size - tf.data_offset_;

    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() == "__metadata__") {
            for (auto mit = it.value().begin(); mit != it.value().end(); ++mit) {
                tf.metadata_[mit.key()] = mit.value().get<std::string>();
            }
            continue;
        }
        const json& tj = it.value();
        TensorInfo info;
        info.dtype = dtype_from_name(tj.at("dtype").get<std::string>(), it.key());
        info.shape = tj.at("shape").get<std::vector<std::int64_t>>();
        auto offs  = tj.at("data_offsets").get<std::vector<std::uint64_t>>();
        if (offs.size() != 2 || offs[1] < offs[0]) {
            throw std::runtime_error("tensor '" + it.key() + "': bad data_offsets");
        }
        info.data_begin = offs[0];
        info.data_end   = offs[1];
        const std::uint64_t expected = std::uint64_t(info.numel()) * dtype_size(info.dtype);
        if (info.data_end - info.data_begin != expected) {
            throw std::runtime_error("tensor '" + it.key() + "': data size does not match shape");
        }
        if (info.data_end > data_size) {
            throw std::runtime_error("tensor '" + it.key() + "': data range past end of file");
        }
        tf.tensors_[it.key()] = std::move(info);
    }
    return tf;
}

bool TensorFile::contains(const std::string& name) const {
    return tensors_.count(name) != 0;
}

const TensorInfo& TensorFile::info(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
        throw std::runtime_error("missing tensor '" + name + "' in " + path_.string());
    }
    return it->second;
}

std::vector<float> TensorFile::read_f32(const std::string& name) const {
    const TensorInfo& ti = info(name);
    std::ifstream in(path_, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot reopen tensor file: " + path_.string());
    }
    const std::uint64_t nbytes = ti.data_end - ti.data_begin;
    std::vector<std::uint8_t> raw(nbytes);
    in.seekg(std::streamoff(data_offset_ + ti.data_begin));
    if (!in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(nbytes))) {
        throw std::runtime_error("tensor '" + name + "': short read");
    }
    const std::int64_t n = ti.numel();
    std::vector<float> out(static_cast<std::size_t>(n));
    switch (ti.dtype) {
        case Dtype::f32:
            std::memcpy(out.data(), raw.data(), std::size_t(n) * 4);
            break;
        case Dtype::f16:
            for (std::int64_t i = 0; i < n; ++i) {
                std::uint16_t h;
                std::memcpy(&h, raw.data() + i * 2, 2);
                out[std::size_t(i)] = f16_to_f32(h);
            }
            break;
        case Dtype::bf16:
            for (std::int64_t i = 0; i < n; ++i) {
                std::uint16_t h;
                std::memcpy(&h, raw.data() + i * 2, 2);
                out[std::size_t(i)] = bf16_to_f32(h);
            }
            break;
    }
    return out;
}

std::vector<float> TensorFile::read_f32_checked(const std::string& name,
                                                std::span<const std::int64_t> expect) const {
    const TensorInfo& ti = info(name);
    bool ok = ti.shape.size() == expect.size();
    if (ok) {
        for (std::size_t i = 0; i < expect.size(); ++i) {
            if (ti.shape[i] != expect[i]) ok = false;
        }
    }
    if (!ok) {
        std::string want = "[";
        std::string got  = "[";
        for (std::size_t i = 0; i < expect.size(); ++i) want += (i ? "," : "") + std::to_string(expect[i]);
        for (std::size_t i = 0; i < ti.shape.size(); ++i) got += (i ? "," : "") + std::to_string(ti.shape[i]);
        throw std::runtime_error("tensor '" + name + "': shape mismatch, expected " + want +
                                 "], found " + got + "]");
    }
    return read_f32(name);
}

void TensorFileWriter::add_f32(const std::string& name, std::vector<std::int64_t> shape,
                               std::span<const float> values) {
    add(name, Dtype::f32, std::move(shape), values);
}

void TensorFileWriter::add(const std::string& name, Dtype dtype, std::vector<std::int64_t> shape,
                           std::span<const float> values) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    if (std::size_t(n) != values.size()) {
        throw std::runtime_error("tensor '" + name + "': value count does not match shape");
    }
    Pending p;
    p.name  = name;
    p.dtype = dtype;
    p.shape = std::move(shape);
    p.bytes.resize(values.size() * dtype_size(dtype));
    switch (dtype) {
        case Dtype::f32:
            std::memcpy(p.bytes.data(), values.data(), p.bytes.size());
            break;
        case Dtype::f16:
            for (std::size_t i = 0; i < values.size(); ++i) {
                std::uint16_t h = f32_to_f16(values[i]);
                std::memcpy(p.bytes.data() + i * 2, &h, 2);
            }
            break;
        case Dtype::bf16:
            for (std::size_t i = 0; i < values.size(); ++i) {
                std::uint16_t h = f32_to_bf16(values[i]);
                std::memcpy(p.bytes.data() + i * 2, &h, 2);
            }
            break;
    }
    pending_.push_back(std::move(p));
}

void TensorFileWriter::set_metadata(const std::string& key, const std::string& value) {
    metadata_[key] = value;
}

void TensorFileWriter::write(const std::filesystem::path& path) const {
    json header = json::object();
    if (!metadata_.empty()) {
        header["__metadata__"] = metadata_;
    }
    std::uint64_t offset = 0;
    for (const auto& p : pending_) {
        header[p.name] = {
            {"dtype", dtype_name(p.dtype)},
            {"shape", p.shape},
            {"data_offsets", {offset, offset + p.bytes.size()}},
        };
        offset += p.bytes.size();
    }
    const std::string hs = header.dump();

    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write tensor file: " + path.string());
    }
    std::uint64_t len = hs.size();
    for (int i = 0; i < 8; ++i) {
        out.put(char((len >> (8 * i)) & 0xFF));
    }
    out.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& p : pending_) {
        out.write(reinterpret_cast<const char*>(p.bytes.data()), std::streamsize(p.bytes.size()));
    }
}

}  // namespace flipscope
