#include "samba/hoacm.hpp"

#include "samba/error.hpp"
#include "samba/nnops.hpp"
#include "samba/ops.hpp"
#include "samba/rng.hpp"
#include "testutil.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

using namespace samba;
using testutil::shift_clear;

namespace {

// Raises each 2x2 pool window's maximum clear of its runner-up so max-pool
// winner selection cannot flip inside a finite-difference probe.
void separate_pool_maxima(Tensor& x, float margin) {
    const Shape s = x.shape();
    for (int64_t b = 0; b < s[0]; ++b)
        for (int64_t c = 0; c < s[1]; ++c)
            for (int64_t i = 0; i + 1 < s[2]; i += 2)
                for (int64_t j = 0; j + 1 < s[3]; j += 2) {
                    int64_t idx[4] = {((b * s[1] + c) * s[2] + i) * s[3] + j,
                                      ((b * s[1] + c) * s[2] + i) * s[3] + j + 1,
                                      ((b * s[1] + c) * s[2] + i + 1) * s[3] + j,
                                      ((b * s[1] + c) * s[2] + i + 1) * s[3] + j + 1};
                    int best = 0;
                    for (int t = 1; t < 4; ++t)
                        if (x.data()[idx[t]] > x.data()[idx[best]]) best = t;
                    float second = -1e30f;
                    for (int t = 0; t < 4; ++t)
                        if (t != best) second = std::max(second, x.data()[idx[t]]);
                    if (x.data()[idx[best]] < second + 2 * margin)
                        x.data()[idx[best]] = second + 2 * margin;
                }
}

// Raises each pixel's channel-wise maximum clear of its runner-up so the
// channel-max reduction keeps a stable winner under probes.
void separate_channel_argmax(Tensor& x, float margin) {
    const Shape s = x.shape();
    for (int64_t b = 0; b < s[0]; ++b)
        for (int64_t i = 0; i < s[2]; ++i)
            for (int64_t j = 0; j < s[3]; ++j) {
                int64_t best = 0;
                for (int64_t c = 1; c < s[1]; ++c)
                    if (x.at({b, c, i, j}) > x.at({b, best, i, j})) best = c;
                float second = -1e30f;
                for (int64_t c = 0; c < s[1]; ++c)
                    if (c != best) second = std::max(second, x.at({b, c, i, j}));
                float* cell = x.data() + ((b * s[1] + best) * s[2] + i) * s[3] + j;
                if (*cell < second + 2 * margin) *cell = second + 2 * margin;
            }
}

// Shifts the squeeze-norm beta so no pre-ReLU value sits within `margin` of
// the kink for this input.
void clear_squeeze_relu(Oca& oca, const Tensor& x, float margin) {
    NoGradGuard guard;
    Tensor global;
    oca.forward(x, &global);
    Tensor gated = oca.config.gsa_gate ? mul(global, sigmoid(oca.gsa.forward(global))) : global;
    Tensor pre = oca.squeeze_norm.forward(oca.squeeze.forward(gated));
    std::vector<float> vals(pre.data(), pre.data() + pre.numel());
    oca.squeeze_norm.beta.data()[0] += shift_clear(vals, margin);
}

}  // namespace

TEST_CASE("the pooled-affinity gate normalizes and rescales the state branch") {
    BseaConfig cfg;
    cfg.channels = 3;
    cfg.height = 4;
    cfg.width = 4;

    SUBCASE("a spatially constant map passes through unchanged at init") {
        Rng rng(40);
        Bsea bsea(cfg, rng);
        Tensor x(Shape{2, 3, 4, 4});
        for (int64_t b = 0; b < 2; ++b)
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t i = 0; i < 16; ++i)
                    x.data()[(b * 3 + c) * 16 + i] = 0.3f * static_cast<float>(b + 1) + 0.2f * c;
        BseaTrace trace;
        Tensor out = bsea.forward_traced(x, &trace);
        // Constant maps give a uniform spatial softmax of 1/(H*W); the learned
        // scale starts at H*W, so the gate is exactly magnitude-preserving.
        for (int64_t i = 0; i < trace.spatial_map.numel(); ++i)
            CHECK(testutil::near(trace.spatial_map.data()[i], 1.0f / 16.0f, 1e-7f));
        for (int64_t i = 0; i < out.numel(); ++i)
            CHECK(testutil::near(out.data()[i], x.data()[i], 1e-5f));
    }

    SUBCASE("affinity rows and spatial maps are normalized on random inputs") {
        Rng rng(41);
        Bsea bsea(cfg, rng);
        for (int trial = 0; trial < 10; ++trial) {
            Tensor x = Tensor::uniform({2, 3, 4, 4}, -2, 2, rng);
            BseaTrace trace;
            bsea.forward_traced(x, &trace);
            for (const Tensor* m : {&trace.affinity_avg, &trace.affinity_max}) {
                REQUIRE(m->shape() == Shape{2, 3, 3});
                for (int64_t r = 0; r < 6; ++r) {
                    double s = 0.0;
                    for (int64_t j = 0; j < 3; ++j) s += m->data()[r * 3 + j];
                    CHECK(std::fabs(s - 1.0) <= 1e-6);
                }
            }
            for (int64_t bc = 0; bc < 6; ++bc) {
                double s = 0.0;
                for (int64_t i = 0; i < 16; ++i) s += trace.spatial_map.data()[bc * 16 + i];
                CHECK(std::fabs(s - 1.0) <= 1e-6);
            }
        }
    }

    SUBCASE("single-channel 2x2 trace matches the four-step hand computation") {
        BseaConfig tiny;
        tiny.channels = 1;
        tiny.height = 2;
        tiny.width = 2;
        Rng rng(42);
        Bsea bsea(tiny, rng);
        for (Tensor* w : {&bsea.query.weight, &bsea.key.weight, &bsea.value.weight})
            w->data()[0] = 1.0f;  // identity 1x1 projection
        Tensor x(Shape{1, 1, 2, 2});
        const float vals[4] = {1.0f, 2.0f, 3.0f, 4.0f};
        std::copy(vals, vals + 4, x.data());
        // avg pool -> 2.5, max pool -> 4; the 1x1 affinity is trivially [1];
        // mixed sum 6.5 broadcasts to a constant map, so the spatial softmax
        // is uniform 1/4 and the scale (init 4) makes the gate exactly 1.
        BseaTrace trace;
        Tensor out = bsea.forward_traced(x, &trace);
        CHECK(trace.affinity_avg.numel() == 1);
        CHECK(trace.affinity_avg.data()[0] == 1.0f);
        CHECK(trace.affinity_max.data()[0] == 1.0f);
        for (int64_t i = 0; i < 4; ++i) CHECK(testutil::near(trace.spatial_map.data()[i], 0.25f, 1e-7f));
        for (int64_t i = 0; i < 4; ++i) CHECK(testutil::near(out.data()[i], vals[i], 1e-6f));
    }

    SUBCASE("disabling the affinity core drops its parameters but keeps shape") {
        BseaConfig plain = cfg;
        plain.affinity = false;
        Rng r1(43), r2(43);
        Bsea with(cfg, r1), without(plain, r2);
        CHECK(with.param_count() - without.param_count() == 3 * 3 * 3);  // three 1x1 projections
        CHECK(without.param_count() == 1);
        Tensor x = Tensor::uniform({1, 3, 4, 4}, -1, 1, r1);
        CHECK(without.forward(x).shape() == x.shape());
    }

    SUBCASE("geometry contract violations are rejected") {
        BseaConfig odd = cfg;
        odd.height = 5;
        Rng rng(44);
        CHECK_THROWS_AS(Bsea(odd, rng), ConfigError);
        Bsea bsea(cfg, rng);
        CHECK_THROWS_AS(bsea.forward(Tensor::zeros({1, 3, 4, 6})), ShapeError);
        CHECK_THROWS_AS(bsea.forward(Tensor::zeros({1, 2, 4, 4})), ShapeError);
    }

    SUBCASE("finite differences confirm gate gradients") {
        BseaConfig small;
        small.channels = 2;
        small.height = 4;
        small.width = 4;
        Rng rng(45);
        Bsea bsea(small, rng);
        Tensor x = Tensor::uniform({1, 2, 4, 4}, -1, 1, rng, true);
        separate_pool_maxima(x, 1e-2f);  // keep max-pool winners stable
        Tensor k = Tensor::uniform({1, 2, 4, 4}, 0.5, 1.5, rng);
        std::vector<Tensor> ps = {x};
        bsea.visit("bsea", [&](const std::string&, Tensor& t) { ps.push_back(t); });
        CHECK(testutil::gradcheck([&] { return mul(bsea.forward(x), k); }, ps) <= 1e-3);
    }
}

TEST_CASE("the global-context gate attenuates the attention branch") {
    OcaConfig cfg;

    SUBCASE("zero-initialized convs gate everything at one half") {
        Rng rng(46);
        Oca oca(cfg, rng);
        std::fill(oca.gsa.weight.data(), oca.gsa.weight.data() + oca.gsa.weight.numel(), 0.0f);
        std::fill(oca.squeeze.weight.data(),
                  oca.squeeze.weight.data() + oca.squeeze.weight.numel(), 0.0f);
        Tensor x = Tensor::full({2, 5, 4, 4}, 0.7f);
        Tensor out = oca.forward(x);
        for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.35f);
    }

    SUBCASE("the gate strictly attenuates every element") {
        Rng rng(47);
        Oca oca(cfg, rng);
        Tensor x = Tensor::uniform({2, 4, 6, 6}, -3, 3, rng);
        Tensor out = oca.forward(x);
        for (int64_t i = 0; i < out.numel(); ++i)
            CHECK(std::fabs(out.data()[i]) <= std::fabs(x.data()[i]));
    }

    SUBCASE("the contrast-enhanced map matches the hand trace") {
        Rng rng(48);
        Oca oca(cfg, rng);
        Tensor x(Shape{1, 1, 2, 2});
        const float vals[4] = {1.0f, 3.0f, 5.0f, 7.0f};
        std::copy(vals, vals + 4, x.data());
        Tensor global;
        oca.forward(x, &global);
        // Single channel: max and mean maps both equal the input; the global
        // average 4 scales both concatenated channels.
        REQUIRE(global.shape() == Shape{1, 2, 2, 2});
        const float expect[4] = {4.0f, 12.0f, 20.0f, 28.0f};
        for (int64_t ch = 0; ch < 2; ++ch)
            for (int64_t i = 0; i < 4; ++i) CHECK(global.data()[ch * 4 + i] == expect[i]);
    }

    SUBCASE("the squeezed map always has two channels regardless of input width") {
        Rng rng(49);
        Oca oca(cfg, rng);
        for (int64_t c : {1, 3, 8}) {
            Tensor global;
            oca.forward(Tensor::uniform({1, c, 4, 4}, -1, 1, rng), &global);
            CHECK(global.shape() == Shape{1, 2, 4, 4});
        }
        CHECK_THROWS_AS(oca.forward(Tensor::zeros({2, 2, 4})), ShapeError);
    }

    SUBCASE("dropping the inner gate removes exactly its conv parameters") {
        OcaConfig off;
        off.gsa_gate = false;
        Rng r1(50), r2(50);
        Oca with(cfg, r1), without(off, r2);
        CHECK(with.param_count() - without.param_count() == 2 * 2 * 49 + 2);
        Tensor x = Tensor::uniform({1, 3, 4, 4}, -1, 1, r1);
        CHECK(without.forward(x).shape() == x.shape());
    }

    SUBCASE("finite differences confirm gate gradients") {
        Rng rng(51);
        Oca oca(cfg, rng);
        // The contrastive multiply squares small magnitudes, leaving the
        // inner-gate gradients near the float32 noise floor at default init;
        // amplify the convs and the input so every path carries signal.
        for (Tensor* t : {&oca.gsa.weight, &oca.squeeze.weight})
            for (int64_t i = 0; i < t->numel(); ++i) t->data()[i] *= 3.0f;
        Tensor x = Tensor::uniform({1, 3, 4, 4}, -3, 3, rng, true);
        separate_channel_argmax(x, 3e-2f);  // stable channel-max winners
        clear_squeeze_relu(oca, x, 2e-2f);  // pre-ReLU values off the kink
        Tensor k = Tensor::uniform({1, 3, 4, 4}, 0.5, 1.5, rng);
        std::vector<Tensor> ps = {x};
        oca.visit("oca", [&](const std::string&, Tensor& t) { ps.push_back(t); });
        CHECK(testutil::gradcheck([&] { return mul(oca.forward(x), k); }, ps, 2e-3f) <= 1e-3);
    }
}

TEST_CASE("the convergence step fuses the two gated branches into one skip") {
    HoacmConfig cfg;
    cfg.channels = 3;
    cfg.height = 4;
    cfg.width = 4;

    SUBCASE("zero inputs fuse to exactly zero") {
        Rng rng(52);
        HoacmFuse fuse(cfg, rng);
        Tensor z = Tensor::zeros({2, 3, 4, 4});
        Tensor out = fuse.forward(z, z);
        for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.0f);
    }

    SUBCASE("output shape equals input shape") {
        HoacmConfig wide;
        wide.channels = 16;
        wide.height = 8;
        wide.width = 8;
        Rng rng(53);
        HoacmFuse fuse(wide, rng);
        Tensor a = Tensor::uniform({2, 16, 8, 8}, -1, 1, rng);
        Tensor b = Tensor::uniform({2, 16, 8, 8}, -1, 1, rng);
        CHECK(fuse.forward(a, b).shape() == Shape{2, 16, 8, 8});
    }

    SUBCASE("a zeroed pointwise conv reduces the fuse to the normalized residual") {
        Rng rng(54);
        HoacmFuse fuse(cfg, rng);
        std::fill(fuse.pw.weight.data(), fuse.pw.weight.data() + fuse.pw.weight.numel(), 0.0f);
        Tensor a = Tensor::uniform({1, 3, 4, 4}, -1, 1, rng);
        Tensor b = Tensor::uniform({1, 3, 4, 4}, -1, 1, rng);
        Tensor out = fuse.forward(a, b);
        Tensor residual = mul_scalar(add(a, b), 0.5f);
        Tensor expect =
            permute(fuse.norm.forward(permute(residual, {0, 2, 3, 1})), {0, 3, 1, 2});
        for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == expect.data()[i]);
    }

    SUBCASE("average mode with both gates off is the plain branch mean") {
        HoacmConfig plain = cfg;
        plain.use_oca = false;
        plain.use_bsea = false;
        plain.fuse_mode = HoacmFuseMode::Average;
        Rng rng(55);
        HoacmFuse fuse(plain, rng);
        CHECK(fuse.param_count() == 0);
        Tensor a = Tensor::uniform({1, 3, 4, 4}, -1, 1, rng);
        Tensor b = Tensor::uniform({1, 3, 4, 4}, -1, 1, rng);
        Tensor out = fuse.forward(a, b);
        Tensor expect = mul_scalar(add(a, b), 0.5f);
        for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == expect.data()[i]);
    }

    SUBCASE("every ablation switch strictly reduces the parameter count") {
        Rng rng(56);
        HoacmFuse full(cfg, rng);
        auto count = [&](auto mutate) {
            HoacmConfig c2 = cfg;
            mutate(c2);
            Rng r(56);
            return HoacmFuse(c2, r).param_count();
        };
        const int64_t all = full.param_count();
        CHECK(count([](HoacmConfig& c) { c.use_oca = false; }) < all);
        CHECK(count([](HoacmConfig& c) { c.use_bsea = false; }) < all);
        CHECK(count([](HoacmConfig& c) { c.oca_gsa_gate = false; }) < all);
        CHECK(count([](HoacmConfig& c) { c.bsea_affinity = false; }) < all);
        CHECK(count([](HoacmConfig& c) { c.fuse_mode = HoacmFuseMode::Average; }) < all);
    }

    SUBCASE("branch shape mismatches are rejected") {
        Rng rng(57);
        HoacmFuse fuse(cfg, rng);
        CHECK_THROWS_AS(fuse.forward(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({1, 3, 4, 2})),
                        ShapeError);
        CHECK_THROWS_AS(fuse.forward(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 2, 4, 4})),
                        ShapeError);
    }

    SUBCASE("finite differences confirm gradients through the full fuse") {
        // Four channels, not two: the final layer norm standardizes each pixel's
        // channel row, and a two-element row collapses to +/-gamma regardless of
        // magnitude, leaving almost no usable gradient for a difference probe.
        HoacmConfig small;
        small.channels = 4;
        small.height = 4;
        small.width = 4;
        Rng rng(58);
        HoacmFuse fuse(small, rng);
        // Amplify the damped paths: the channel-gate convolutions and the pointwise
        // mix (the only signal that survives the norm's per-row standardization),
        // and the affinity projections so the row softmax spreads.
        for (Tensor* t : {&fuse.oca.gsa.weight, &fuse.oca.squeeze.weight, &fuse.pw.weight})
            for (int64_t i = 0; i < t->numel(); ++i) t->data()[i] *= 3.0f;
        for (Tensor* t : {&fuse.bsea.query.weight, &fuse.bsea.key.weight})
            for (int64_t i = 0; i < t->numel(); ++i) t->data()[i] *= 6.0f;
        Tensor a = Tensor::uniform({1, 4, 4, 4}, -3, 3, rng, true);
        Tensor b = Tensor::uniform({1, 4, 4, 4}, -2, 2, rng, true);
        separate_channel_argmax(a, 3e-2f);
        separate_pool_maxima(b, 4e-2f);
        clear_squeeze_relu(fuse.oca, a, 2e-2f);
        Tensor k = Tensor::uniform({1, 4, 4, 4}, 0.5, 1.5, rng);
        std::vector<Tensor> ps = {a, b};
        Tensor gsa_bias;
        fuse.visit("fuse", [&](const std::string& name, Tensor& t) {
            if (name == "fuse.oca.gsa.bias")
                gsa_bias = t;
            else
                ps.push_back(t);
        });
        auto out = [&] { return mul(fuse.forward(a, b), k); };
        CHECK(testutil::gradcheck(out, ps, 4e-3f) <= 1e-3);
        // The gate bias shifts the whole descriptor almost uniformly, and the norm
        // cancels most of a uniform shift; the surviving gradient is so small the
        // probe is rounding-limited and needs a wider step than the other groups.
        CHECK(testutil::gradcheck(out, {gsa_bias}, 8e-3f) <= 1e-3);
    }
}
