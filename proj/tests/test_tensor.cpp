#include "doctest.h"
#include "protodensity/errors.hpp"
#include "protodensity/io.hpp"
#include "protodensity/tensor.hpp"
#include "test_util.hpp"

using namespace protodensity;

TEST_CASE("tensor shape and indexing") {
    Tensor t({2, 3, 4});
    CHECK(t.size() == 24);
    CHECK(t.rank() == 3);
    t.at(1, 2, 3) = 7.0;
    CHECK(t[23] == 7.0);
    CHECK(Tensor::scalar(3.0).item() == 3.0);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>(3)), DimensionError);
    CHECK_THROWS_AS(t.item(), DimensionError);
    CHECK(t.reshaped({4, 6}).at(3, 5) == 7.0);
    CHECK_THROWS_AS(t.reshaped({5, 5}), DimensionError);
}

TEST_CASE("pdtf round trip") {
    Rng rng(1);
    const Tensor t = testutil::random_tensor({3, 5, 2}, rng);
    CHECK(decode_pdtf(encode_pdtf(t)) == t);

    const Tensor f = decode_pdtf(encode_pdtf(t, Dtype::Float32));
    CHECK(f.shape() == t.shape());
    CHECK(testutil::max_abs_diff(f, t) < 1e-7);

    const auto bytes = encode_pdtf(Tensor({2, 3}), Dtype::Float64);
    CHECK(bytes.size() == 4 + 1 + 1 + 2 * 4 + 6 * 8);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "PDTF");
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 2);
    CHECK(bytes[6] == 2);  // little-endian u32 dims
    CHECK(bytes[10] == 3);

    const auto dir = testutil::scratch_dir("pdtf");
    write_pdtf(dir / "t.pdtf", t);
    CHECK(read_pdtf(dir / "t.pdtf") == t);
}

TEST_CASE("pdtf rejects malformed input") {
    auto bytes = encode_pdtf(Tensor({2, 2}, 1.0));
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_pdtf(bad_magic), IoError);
    auto bad_dtype = bytes;
    bad_dtype[4] = 9;
    CHECK_THROWS_AS(decode_pdtf(bad_dtype), IoError);
    bytes.pop_back();
    CHECK_THROWS_AS(decode_pdtf(bytes), IoError);
    CHECK_THROWS_AS(read_pdtf("/nonexistent/x.pdtf"), IoError);
}

TEST_CASE("checksum tracks every value") {
    Tensor a({4}, 1.0);
    const auto c = checksum(a.data());
    CHECK(checksum(a.data()) == c);
    a[3] = std::nextafter(1.0, 2.0);
    CHECK(checksum(a.data()) != c);
}

TEST_CASE("format_double round trips") {
    for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 1e300, 5e-4}) {
        CHECK(parse_double(format_double(v), "v") == v);
    }
    CHECK_THROWS_AS(parse_double("1.0x", "field"), ConfigError);
    CHECK(trim("  a b \t") == "a b");
    CHECK(split("a,,b", ',').size() == 3);
}
