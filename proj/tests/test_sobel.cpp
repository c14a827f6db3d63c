#include <catch2/catch_amalgamated.hpp>

#include "mdba/phantom.hpp"
#include "mdba/sobel.hpp"

using namespace mdba;

TEST_CASE("sobel kernels: zero sum, center line, antisymmetry") {
    SobelKernelSet k = make_sobel_kernels();

    SECTION("every kernel sums to zero") {
        for (const auto* kern : {&k.kx, &k.ky, &k.kz}) {
            float s = 0;
            for (int64_t i = 0; i < kern->size(); ++i) s += (*kern)[i];
            REQUIRE(s == 0.0f);
        }
    }
    SECTION("center line of kx along its derivative axis is (-4, 0, +4)") {
        REQUIRE(k.kx.at(1, 1, 0) == -4.0f);
        REQUIRE(k.kx.at(1, 1, 1) == 0.0f);
        REQUIRE(k.kx.at(1, 1, 2) == 4.0f);
        REQUIRE(k.ky.at(1, 0, 1) == -4.0f);
        REQUIRE(k.ky.at(1, 2, 1) == 4.0f);
        REQUIRE(k.kz.at(0, 1, 1) == -4.0f);
        REQUIRE(k.kz.at(2, 1, 1) == 4.0f);
    }
    SECTION("antisymmetric along derivative axis, symmetric along the others") {
        for (int64_t a = 0; a < 3; ++a)
            for (int64_t b = 0; b < 3; ++b)
                for (int64_t c = 0; c < 3; ++c) {
                    REQUIRE(k.kx.at(a, b, c) == -k.kx.at(a, b, 2 - c));
                    REQUIRE(k.kx.at(a, b, c) == k.kx.at(2 - a, b, c));
                    REQUIRE(k.kx.at(a, b, c) == k.kx.at(a, 2 - b, c));
                    REQUIRE(k.ky.at(a, b, c) == -k.ky.at(a, 2 - b, c));
                    REQUIRE(k.kz.at(a, b, c) == -k.kz.at(2 - a, b, c));
                }
    }
    SECTION("kernels are bit-identical across calls") {
        SobelKernelSet k2 = make_sobel_kernels();
        for (int64_t i = 0; i < 27; ++i) {
            REQUIRE(k.kx[i] == k2.kx[i]);
            REQUIRE(k.ky[i] == k2.ky[i]);
            REQUIRE(k.kz[i] == k2.kz[i]);
        }
    }
}

TEST_CASE("sobel_response on analytic inputs") {
    SECTION("constant channel gives zero response") {
        FeatureMap f{NdArray<float>({2, 6, 6, 6}, 3.25f), 0};
        FeatureMap r = sobel_response(f);
        for (int64_t i = 0; i < r.values.size(); ++i) REQUIRE(r.values[i] == 0.0f);
    }
    SECTION("unit ramp along x gives interior magnitude 32") {
        FeatureMap f{NdArray<float>({1, 8, 8, 8}), 0};
        for (int64_t z = 0; z < 8; ++z)
            for (int64_t y = 0; y < 8; ++y)
                for (int64_t x = 0; x < 8; ++x) f.values.at(0, z, y, x) = float(x);
        FeatureMap r = sobel_response(f);
        for (int64_t z = 1; z < 7; ++z)
            for (int64_t y = 1; y < 7; ++y)
                for (int64_t x = 1; x < 7; ++x)
                    REQUIRE(r.values.at(0, z, y, x) == Catch::Approx(32.0).margin(1e-4));
    }
    SECTION("response is nonnegative everywhere") {
        Rng rng(2);
        FeatureMap f{NdArray<float>({3, 7, 7, 7}), 0};
        for (int64_t i = 0; i < f.values.size(); ++i) f.values[i] = float(rng.uniform(-5, 5));
        FeatureMap r = sobel_response(f);
        for (int64_t i = 0; i < r.values.size(); ++i) REQUIRE(r.values[i] >= 0.0f);
    }
}

namespace {

/// Replicate-extend a channel by one voxel per side, so the zero-padding
/// oracle sees the same neighborhoods as the clamp-to-edge Sobel layer.
NdArray<double> replicate_extend(const NdArray<float>& ch) {
    const int64_t nz = ch.dim(0), ny = ch.dim(1), nx = ch.dim(2);
    NdArray<double> out({nz + 2, ny + 2, nx + 2});
    auto cl = [](int64_t v, int64_t n) { return std::max<int64_t>(0, std::min(v, n - 1)); };
    for (int64_t z = 0; z < nz + 2; ++z)
        for (int64_t y = 0; y < ny + 2; ++y)
            for (int64_t x = 0; x < nx + 2; ++x)
                out.at(z, y, x) = double(ch.at(cl(z - 1, nz), cl(y - 1, ny), cl(x - 1, nx)));
    return out;
}

}  // namespace

TEST_CASE("sobel_response matches the brute-force convolution oracle") {
    SobelKernelSet k = make_sobel_kernels();
    Rng rng(31);
    FeatureMap f{NdArray<float>({2, 8, 8, 8}), 0};
    for (int64_t i = 0; i < f.values.size(); ++i) f.values[i] = float(rng.uniform(-2, 2));
    FeatureMap r = sobel_response(f);

    for (int64_t c = 0; c < 2; ++c) {
        NdArray<float> ch({8, 8, 8});
        for (int64_t i = 0; i < ch.size(); ++i) ch[i] = f.values[c * ch.size() + i];
        NdArray<double> ext = replicate_extend(ch);
        auto gx = oracle_convolve3d(ext, k.kx.cast<double>());
        auto gy = oracle_convolve3d(ext, k.ky.cast<double>());
        auto gz = oracle_convolve3d(ext, k.kz.cast<double>());
        for (int64_t z = 0; z < 8; ++z)
            for (int64_t y = 0; y < 8; ++y)
                for (int64_t x = 0; x < 8; ++x) {
                    double a = gx.at(z + 1, y + 1, x + 1), b = gy.at(z + 1, y + 1, x + 1),
                           d = gz.at(z + 1, y + 1, x + 1);
                    double mag = std::sqrt(a * a + b * b + d * d);
                    REQUIRE(std::abs(double(r.values.at(c, z, y, x)) - mag) < 1e-5);
                }
    }
}

TEST_CASE("sobel_response is translation-equivariant in the interior") {
    NdArray<float> base({1, 12, 12, 12}, 0.0f);
    // compact blob away from every border
    for (int64_t z = 4; z < 7; ++z)
        for (int64_t y = 4; y < 7; ++y)
            for (int64_t x = 4; x < 7; ++x) base.at(0, z, y, x) = float(1 + z + 2 * y + 3 * x);
    NdArray<float> shifted({1, 12, 12, 12}, 0.0f);
    for (int64_t z = 4; z < 7; ++z)
        for (int64_t y = 4; y < 7; ++y)
            for (int64_t x = 4; x < 7; ++x) shifted.at(0, z + 2, y + 1, x + 1) = base.at(0, z, y, x);

    FeatureMap rb = sobel_response({base, 0});
    FeatureMap rs = sobel_response({shifted, 0});
    for (int64_t z = 2; z < 10; ++z)
        for (int64_t y = 2; y < 10; ++y)
            for (int64_t x = 2; x < 10; ++x) {
                if (z + 2 >= 12 || y + 1 >= 12 || x + 1 >= 12) continue;
                REQUIRE(rs.values.at(0, z + 2, y + 1, x + 1) == Catch::Approx(rb.values.at(0, z, y, x)).margin(1e-4));
            }
}

TEST_CASE("attention_map modes") {
    FeatureMap zero{NdArray<float>({1, 4, 4, 4}, 0.0f), 0};
    SECTION("sigmoid of zero response is uniform 0.5") {
        FeatureMap a = attention_map(zero, AttentionMode::sigmoid);
        for (int64_t i = 0; i < a.values.size(); ++i) REQUIRE(a.values[i] == Catch::Approx(0.5));
    }
    SECTION("raw keeps zeros") {
        FeatureMap a = attention_map(zero, AttentionMode::raw);
        for (int64_t i = 0; i < a.values.size(); ++i) REQUIRE(a.values[i] == 0.0f);
    }
    SECTION("both modes are monotone in the response") {
        FeatureMap f{NdArray<float>({1, 1, 1, 8}), 0};
        for (int64_t i = 0; i < 8; ++i) f.values[i] = float(i) * 0.5f;
        for (AttentionMode m : {AttentionMode::raw, AttentionMode::sigmoid}) {
            FeatureMap a = attention_map(f, m);
            for (int64_t i = 1; i < 8; ++i) REQUIRE(a.values[i] > a.values[i - 1]);
        }
    }
    SECTION("mode strings round-trip and reject junk") {
        REQUIRE(attention_mode_from_string("raw") == AttentionMode::raw);
        REQUIRE(attention_mode_from_string("sigmoid") == AttentionMode::sigmoid);
        REQUIRE_THROWS(attention_mode_from_string("softmax"));
    }
}

TEST_CASE("sfm fusion contract") {
    const int64_t c = 4, d = 8;
    Rng rng(5);
    FeatureMap dec_scar{NdArray<float>({c, d, d, d}), 1};
    FeatureMap enc_scar{NdArray<float>({c, d, d, d}), 1};
    for (int64_t i = 0; i < dec_scar.values.size(); ++i) {
        dec_scar.values[i] = float(rng.uniform(-1, 1));
        enc_scar.values[i] = float(rng.uniform(-1, 1));
    }
    FeatureMap dec_la{NdArray<float>({c, d, d, d}, 2.0f), 1};  // constant -> zero boundary response

    SECTION("constant LA + raw attention zeroes the gated half") {
        FeatureMap out = sfm(dec_scar, dec_la, enc_scar, FusionMode::sobel, AttentionMode::raw);
        REQUIRE(out.values.dim(0) == 2 * c);
        const int64_t n = d * d * d;
        for (int64_t i = 0; i < c * n; ++i) {
            REQUIRE(out.values[i] == 0.0f);
            REQUIRE(out.values[c * n + i] == enc_scar.values[i]);
        }
    }
    SECTION("constant LA + sigmoid attention halves the scar features") {
        FeatureMap out = sfm(dec_scar, dec_la, enc_scar, FusionMode::sobel, AttentionMode::sigmoid);
        const int64_t n = d * d * d;
        for (int64_t i = 0; i < c * n; ++i)
            REQUIRE(std::abs(out.values[i] - 0.5f * dec_scar.values[i]) < 1e-6f);
    }
    SECTION("multiply mode gates with the raw LA features") {
        FeatureMap la{NdArray<float>({c, d, d, d}), 1};
        for (int64_t i = 0; i < la.values.size(); ++i) la.values[i] = float(rng.uniform(0, 1));
        FeatureMap out = sfm(dec_scar, la, enc_scar, FusionMode::multiply, AttentionMode::sigmoid);
        const int64_t n = d * d * d;
        for (int64_t i = 0; i < c * n; ++i)
            REQUIRE(out.values[i] == Catch::Approx(dec_scar.values[i] * la.values[i]));
    }
    SECTION("channel count doubles") {
        FeatureMap out = sfm(dec_scar, dec_la, enc_scar, FusionMode::none, AttentionMode::sigmoid);
        REQUIRE(out.values.shape() == std::vector<int64_t>{2 * c, d, d, d});
    }
    SECTION("level and shape mismatches rejected") {
        FeatureMap wrong_level = dec_la;
        wrong_level.level = 0;
        REQUIRE_THROWS(sfm(dec_scar, wrong_level, enc_scar, FusionMode::sobel, AttentionMode::sigmoid));
        FeatureMap wrong_shape{NdArray<float>({c, d, d, d / 2}), 1};
        REQUIRE_THROWS(sfm(dec_scar, wrong_shape, enc_scar, FusionMode::sobel, AttentionMode::sigmoid));
    }
}
