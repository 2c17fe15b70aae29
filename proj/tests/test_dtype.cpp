#include <doctest.h>

#include <bit>
#include <cmath>

#include "mergeforge/dtype.hpp"

using namespace mergeforge;

TEST_CASE("element sizes and names") {
    CHECK(element_size(DType::F32) == 4);
    CHECK(element_size(DType::F16) == 2);
    CHECK(element_size(DType::BF16) == 2);
    DType d;
    CHECK(parse_dtype("F32", d));
    CHECK(d == DType::F32);
    CHECK(parse_dtype("BF16", d));
    CHECK(d == DType::BF16);
    CHECK_FALSE(parse_dtype("I8", d));
    CHECK(std::string(dtype_name(DType::F16)) == "F16");
}

TEST_CASE("f16 exhaustive decode-encode round trip") {
    int nan_count = 0;
    for (uint32_t p = 0; p <= 0xFFFF; ++p) {
        const uint16_t bits = static_cast<uint16_t>(p);
        const float v = decode_f16(bits);
        const uint16_t back = encode_f16(v);
        if (std::isnan(v)) {
            ++nan_count;
            REQUIRE(back == kF16QuietNan);
        } else {
            REQUIRE(back == bits);
        }
    }
    CHECK(nan_count == 2 * 1023);  // both signs, 10 payload bits minus inf
}

TEST_CASE("bf16 exhaustive decode-encode round trip") {
    int nan_count = 0;
    for (uint32_t p = 0; p <= 0xFFFF; ++p) {
        const uint16_t bits = static_cast<uint16_t>(p);
        const float v = decode_bf16(bits);
        const uint16_t back = encode_bf16(v);
        if (std::isnan(v)) {
            ++nan_count;
            REQUIRE(back == kBF16QuietNan);
        } else {
            REQUIRE(back == bits);
        }
    }
    CHECK(nan_count == 2 * 127);  // both signs, 7 payload bits minus inf
}

TEST_CASE("round-to-nearest-even cases") {
    // 1.0009765625 = 1 + 2^-10 sits exactly halfway between bf16 1.0
    // (0x3F80) and the next value up; ties go to the even pattern.
    CHECK(encode_bf16(1.0009765625f) == 0x3F80);
    // 65520 is halfway between f16 max 65504 and the overflow step; the even
    // side is infinity.
    CHECK(encode_f16(65520.0f) == 0x7C00);
    CHECK(decode_f16(0x7C00) == std::numeric_limits<float>::infinity());
    CHECK(encode_f16(-65520.0f) == 0xFC00);
    CHECK(encode_f16(65519.0f) == 0x7BFF);  // largest finite survives
}

TEST_CASE("zero and subnormal handling") {
    CHECK(convert_scalar(0.0f, DType::F32) == 0u);
    CHECK(convert_scalar(0.0f, DType::F16) == 0u);
    CHECK(convert_scalar(0.0f, DType::BF16) == 0u);
    CHECK(encode_f16(-0.0f) == 0x8000);
    // Smallest f16 subnormal is 2^-24.
    CHECK(decode_f16(0x0001) == static_cast<float>(std::ldexp(1.0, -24)));
    CHECK(encode_f16(static_cast<float>(std::ldexp(1.0, -24))) == 0x0001);
    CHECK(encode_f16(static_cast<float>(std::ldexp(1.0, -26))) == 0x0000);  // underflow
}

TEST_CASE("bf16 fixed points decode to identical values") {
    for (uint32_t p : {0x3F80u, 0xC000u, 0x7F7Fu, 0x0080u}) {
        const float v = decode_bf16(static_cast<uint16_t>(p));
        CHECK(decode_scalar(convert_scalar(v, DType::BF16), DType::BF16) == v);
    }
}

TEST_CASE("nan payloads canonicalize") {
    CHECK(encode_f16(std::nanf("0x123")) == kF16QuietNan);
    CHECK(encode_bf16(std::nanf("0x123")) == kBF16QuietNan);
    CHECK(std::isnan(decode_f16(kF16QuietNan)));
    CHECK(std::isnan(decode_bf16(kBF16QuietNan)));
}
