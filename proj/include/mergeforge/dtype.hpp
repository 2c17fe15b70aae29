#pragma once

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mergeforge {

enum class DType : uint8_t { F32, F16, BF16 };

inline constexpr size_t element_size(DType d) {
    switch (d) {
        case DType::F32: return 4;
        case DType::F16: return 2;
        case DType::BF16: return 2;
    }
    throw std::logic_error("element_size: bad dtype tag");
}

inline const char* dtype_name(DType d) {
    switch (d) {
        case DType::F32: return "F32";
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
    }
    throw std::logic_error("dtype_name: bad dtype tag");
}

inline bool parse_dtype(const std::string& s, DType& out) {
    if (s == "F32") { out = DType::F32; return true; }
    if (s == "F16") { out = DType::F16; return true; }
    if (s == "BF16") { out = DType::BF16; return true; }
    return false;
}

// Canonical quiet-NaN bit patterns used when storing NaN payloads.
inline constexpr uint16_t kF16QuietNan = 0x7E00;
inline constexpr uint16_t kBF16QuietNan = 0x7FC0;

inline float decode_bf16(uint16_t bits) {
    return std::bit_cast<float>(static_cast<uint32_t>(bits) << 16);
}

// Round-to-nearest-even truncation of the low 16 mantissa bits.
// Overflow carries into the exponent and saturates naturally at infinity.
inline uint16_t encode_bf16(float v) {
    uint32_t u = std::bit_cast<uint32_t>(v);
    if ((u & 0x7FFFFFFFu) > 0x7F800000u) return kBF16QuietNan;
    uint32_t lsb = (u >> 16) & 1u;
    return static_cast<uint16_t>((u + 0x7FFFu + lsb) >> 16);
}

inline float decode_f16(uint16_t h) {
    uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1Fu;
    uint32_t man = h & 0x3FFu;
    uint32_t out;
    if (exp == 0) {
        if (man == 0) {
            out = sign;  // signed zero
        } else {
            // Subnormal half: normalize into single precision.
            int shift = 0;
            while ((man & 0x400u) == 0) {
                man <<= 1;
                ++shift;
            }
            man &= 0x3FFu;
            // Leading one found after `shift` steps: value = 2^(-14-shift) × 1.man
            out = sign | ((113 - shift) << 23) | (man << 13);
        }
    } else if (exp == 0x1F) {
        out = sign | 0x7F800000u | (man << 13);  // inf / NaN
    } else {
        out = sign | ((exp - 15 + 127) << 23) | (man << 13);
    }
    return std::bit_cast<float>(out);
}

inline uint16_t encode_f16(float v) {
    uint32_t u = std::bit_cast<uint32_t>(v);
    uint32_t sign = (u >> 16) & 0x8000u;
    uint32_t abs = u & 0x7FFFFFFFu;

    if (abs > 0x7F800000u) return kF16QuietNan;
    if (abs == 0x7F800000u) return static_cast<uint16_t>(sign | 0x7C00u);  // inf

    int32_t exp = static_cast<int32_t>(abs >> 23) - 127;
    uint32_t man = abs & 0x7FFFFFu;

    if (exp >= -14) {
        // Normal half range. Round the 13 dropped mantissa bits to nearest even.
        uint32_t half = (static_cast<uint32_t>(exp + 15) << 10) | (man >> 13);
        uint32_t rest = man & 0x1FFFu;
        if (rest > 0x1000u || (rest == 0x1000u && (half & 1u))) half += 1;
        if (half >= 0x7C00u) return static_cast<uint16_t>(sign | 0x7C00u);  // overflow to inf
        return static_cast<uint16_t>(sign | half);
    }

    // Subnormal half (or underflow to zero).
    if (exp < -25) return static_cast<uint16_t>(sign);  // too small, rounds to 0
    man |= 0x800000u;  // implicit leading one
    int shift = -exp - 14 + 13;  // bits dropped from the 24-bit significand
    uint32_t half = man >> shift;
    uint32_t rest = man & ((1u << shift) - 1u);
    uint32_t halfway = 1u << (shift - 1);
    if (rest > halfway || (rest == halfway && (half & 1u))) half += 1;
    return static_cast<uint16_t>(sign | half);
}

// Encodes a working-precision value into the target dtype's bit pattern
// (16-bit patterns are returned in the low half). Round-to-nearest-even,
// overflow to signed infinity.
inline uint32_t convert_scalar(float v, DType target) {
    switch (target) {
        case DType::F32: return std::bit_cast<uint32_t>(v);
        case DType::F16: return encode_f16(v);
        case DType::BF16: return encode_bf16(v);
    }
    throw std::logic_error("convert_scalar: bad dtype tag");
}

inline float decode_scalar(uint32_t pattern, DType source) {
    switch (source) {
        case DType::F32: return std::bit_cast<float>(pattern);
        case DType::F16: return decode_f16(static_cast<uint16_t>(pattern));
        case DType::BF16: return decode_bf16(static_cast<uint16_t>(pattern));
    }
    throw std::logic_error("decode_scalar: bad dtype tag");
}

}  // namespace mergeforge
