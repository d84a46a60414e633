#include "samba/hiera.hpp"

#include "samba/error.hpp"
#include "samba/nnops.hpp"
#include "samba/ops.hpp"
#include "samba/rng.hpp"
#include "testutil.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

using namespace samba;

TEST_CASE("window partition cuts maps into per-window token sequences") {
    Rng rng(21);

    SUBCASE("a window covering the whole map is a pure flatten") {
        Tensor x = Tensor::uniform({2, 3, 4, 4}, -1, 1, rng);
        Tensor tok = window_partition(x, 4);
        Tensor flat = reshape(permute(x, {0, 2, 3, 1}), {2, 16, 3});
        REQUIRE(tok.shape() == flat.shape());
        for (int64_t i = 0; i < tok.numel(); ++i) CHECK(tok.data()[i] == flat.data()[i]);
    }

    SUBCASE("an 8x8 map with window 4 yields 4 windows of 16 tokens") {
        Tensor x = Tensor::uniform({1, 5, 8, 8}, -1, 1, rng);
        Tensor tok = window_partition(x, 4);
        CHECK(tok.shape() == Shape{4, 16, 5});
    }

    SUBCASE("tokens land at the row-major window and intra-window offsets") {
        const int64_t b = 2, c = 3, h = 8, w = 8;
        const int win = 4;
        Tensor x = Tensor::uniform({b, c, h, w}, -1, 1, rng);
        Tensor tok = window_partition(x, win);
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t i = 0; i < h; ++i)
                    for (int64_t j = 0; j < w; ++j) {
                        const int64_t widx = bi * 4 + (i / win) * 2 + j / win;
                        const int64_t tidx = (i % win) * win + j % win;
                        CHECK(tok.at({widx, tidx, ci}) == x.at({bi, ci, i, j}));
                    }
    }

    SUBCASE("partition then unpartition is bit-identical for many geometries") {
        struct Geo {
            int64_t b, c, h, w;
            int win;
        };
        for (const Geo& g : {Geo{2, 4, 8, 8, 4}, Geo{2, 4, 8, 8, 2}, Geo{1, 2, 6, 6, 3},
                             Geo{3, 1, 4, 8, 4}, Geo{1, 3, 5, 5, 5}, Geo{2, 2, 4, 4, 1}}) {
            Tensor x = Tensor::uniform({g.b, g.c, g.h, g.w}, -1, 1, rng);
            Tensor back = window_unpartition(window_partition(x, g.win), g.win, g.b, g.h, g.w);
            REQUIRE(back.shape() == x.shape());
            for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);
        }
    }

    SUBCASE("non-divisible extents are rejected") {
        Tensor x = Tensor::zeros({1, 2, 6, 8});
        CHECK_THROWS_AS(window_partition(x, 4), ConfigError);
        CHECK_THROWS_AS(window_unpartition(Tensor::zeros({4, 16, 2}), 4, 1, 6, 8), ConfigError);
        CHECK_THROWS_AS(window_unpartition(Tensor::zeros({3, 16, 2}), 4, 1, 8, 8), ShapeError);
    }
}

TEST_CASE("window attention mixes tokens only inside their window") {
    WindowAttentionConfig cfg;
    cfg.channels = 8;
    cfg.heads = 2;

    SUBCASE("a single-token window reduces to projected value of token plus position") {
        cfg.window = 1;
        Rng rng(22);
        WindowAttention attn(cfg, rng);
        Tensor tok = Tensor::uniform({3, 1, 8}, -1, 1, rng);
        Tensor out = attn.forward(tok);
        Tensor expect = attn.proj.forward(attn.value.forward(add(tok, attn.pos)));
        REQUIRE(out.shape() == expect.shape());
        for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == expect.data()[i]);
    }

    SUBCASE("identical tokens attend uniformly") {
        cfg.window = 2;
        Rng rng(23);
        WindowAttention attn(cfg, rng);
        // The position table would de-identify the tokens, so pin it to zero;
        // the property under test is the symmetry of the attention math.
        std::fill(attn.pos.data(), attn.pos.data() + attn.pos.numel(), 0.0f);
        std::vector<float> vals(2 * 4 * 8);
        Rng vr(24);
        for (int64_t win = 0; win < 2; ++win)
            for (int64_t ch = 0; ch < 8; ++ch) {
                const float v = vr.uniform(-1.0f, 1.0f);
                for (int64_t t = 0; t < 4; ++t) vals[(win * 4 + t) * 8 + ch] = v;
            }
        Tensor tok(Shape{2, 4, 8});
        std::copy(vals.begin(), vals.end(), tok.data());
        Tensor weights;
        attn.forward(tok, &weights);
        REQUIRE(weights.shape() == Shape{2, 2, 4, 4});
        for (int64_t i = 0; i < weights.numel(); ++i) CHECK(weights.data()[i] == 0.25f);
    }

    SUBCASE("attention rows are probability distributions") {
        cfg.window = 4;
        Rng rng(25);
        WindowAttention attn(cfg, rng);
        Tensor tok = Tensor::uniform({6, 16, 8}, -2, 2, rng);
        Tensor weights;
        attn.forward(tok, &weights);
        const int64_t rows = weights.numel() / 16;
        for (int64_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int64_t j = 0; j < 16; ++j) s += weights.data()[r * 16 + j];
            CHECK(std::fabs(s - 1.0) <= 1e-6);
        }
    }

    SUBCASE("zeroing one window's tokens never touches another window's output") {
        cfg.window = 4;
        Rng rng(26);
        WindowAttention attn(cfg, rng);
        Tensor map = Tensor::uniform({1, 8, 8, 8}, -1, 1, rng);
        Tensor tok = window_partition(map, 4);  // [4, 16, 8]
        REQUIRE(tok.shape()[0] == 4);
        Tensor zeroed(tok.shape());
        std::copy(tok.data(), tok.data() + tok.numel(), zeroed.data());
        std::fill(zeroed.data(), zeroed.data() + 16 * 8, 0.0f);  // window 0 only
        Tensor a = attn.forward(tok);
        Tensor b = attn.forward(zeroed);
        for (int64_t i = 16 * 8; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
    }

    SUBCASE("finite differences confirm attention gradients") {
        cfg.window = 2;  // one window of 4 tokens, 8 channels
        Rng rng(27);
        WindowAttention attn(cfg, rng);
        Tensor tok = Tensor::uniform({1, 4, 8}, -1, 1, rng, true);
        Tensor k = Tensor::uniform({1, 4, 8}, 0.5, 1.5, rng);
        std::vector<Tensor> ps = {tok};
        attn.visit("attn", [&](const std::string&, Tensor& t) { ps.push_back(t); });
        // h = 2e-3: the softmax Jacobian damps the score-path gradients, so a
        // slightly larger probe keeps the check above float32 rounding noise.
        CHECK(testutil::gradcheck([&] { return mul(attn.forward(tok), k); }, ps, 2e-3f) <= 1e-3);
    }

    SUBCASE("heads must divide channels") {
        cfg.window = 2;
        cfg.heads = 3;
        Rng rng(28);
        CHECK_THROWS_AS(WindowAttention(cfg, rng), ConfigError);
    }

    SUBCASE("token batches of the wrong arity are rejected") {
        cfg.window = 2;
        Rng rng(29);
        WindowAttention attn(cfg, rng);
        CHECK_THROWS_AS(attn.forward(Tensor::zeros({1, 5, 8})), ShapeError);
        CHECK_THROWS_AS(attn.forward(Tensor::zeros({1, 4, 6})), ShapeError);
    }
}

TEST_CASE("hiera blocks compose attention, inserts, and the stage downsample") {
    HieraStageConfig cfg;
    cfg.channels = 8;
    cfg.blocks = 2;
    cfg.window = 4;
    cfg.heads = 2;
    cfg.downsample = 2;

    SUBCASE("with inserts off and zeroed mixing weights the stage is its downsample") {
        HieraStageConfig plain = cfg;
        plain.use_refiner = false;
        plain.use_mlp_adapter = false;
        Rng rng(30);
        HieraStage stage(plain, rng);
        for (auto& blk : stage.blocks) {
            std::fill(blk.attn.proj.weight.data(),
                      blk.attn.proj.weight.data() + blk.attn.proj.weight.numel(), 0.0f);
            std::fill(blk.fc2.weight.data(), blk.fc2.weight.data() + blk.fc2.weight.numel(),
                      0.0f);
        }
        Tensor x = Tensor::uniform({2, 8, 8, 8}, -1, 1, rng);
        Tensor out = stage.forward(x);
        Tensor expect = stage.down.forward(x);
        REQUIRE(out.shape() == expect.shape());
        for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == expect.data()[i]);
    }

    SUBCASE("stage geometry: extents shrink and channels widen by the factor") {
        Rng rng(31);
        HieraStage stage(cfg, rng);
        Tensor x = Tensor::uniform({1, 8, 8, 8}, -1, 1, rng);
        CHECK(stage.forward_blocks(x).shape() == Shape{1, 8, 8, 8});
        CHECK(stage.forward(x).shape() == Shape{1, 16, 4, 4});
    }

    SUBCASE("insert toggles add exactly the closed-form parameter counts") {
        HieraStageConfig off = cfg;
        off.use_refiner = false;
        off.use_mlp_adapter = false;
        Rng r1(32), r2(32);
        HieraStage with(cfg, r1), without(off, r2);
        // channels 8: refiner gate 2C*h+h + h*C+C with h=2, two 3x3 spatial
        // convs C*C*9+C each, channel norm 2C; adapter bottleneck 8->2->8.
        const int64_t refiner_params = (16 * 2 + 2) + (2 * 8 + 8) + 584 + 584 + 16;
        const int64_t adapter_params = (8 * 2 + 2) + (2 * 8 + 8);
        CHECK(with.param_count() - without.param_count() ==
              cfg.blocks * (refiner_params + adapter_params));
        CHECK(with.blocks[0].refiner.param_count() == refiner_params);
        CHECK(with.blocks[0].adapter.param_count() == adapter_params);

        HieraStageConfig ungated = cfg;
        ungated.channel_gate = false;
        Rng r3(32);
        HieraStage no_gate(ungated, r3);
        CHECK(with.param_count() - no_gate.param_count() == cfg.blocks * (16 * 2 + 2 + 2 * 8 + 8));
    }

    SUBCASE("freshly built adapters do not change the block function") {
        // The refiner normalizes its output, so only the MLP adapter carries
        // the strict at-init identity guarantee.
        HieraBlockConfig bc;
        bc.channels = 8;
        bc.window = 4;
        bc.heads = 2;
        bc.use_refiner = false;
        Rng r1(33);
        HieraBlock with(bc, r1);
        bc.use_mlp_adapter = false;
        Rng r2(33);
        HieraBlock without(bc, r2);
        Rng rx(34);
        Tensor x = Tensor::uniform({1, 8, 8, 8}, -1, 1, rx);
        Tensor a = with.forward(x);
        Tensor b = without.forward(x);
        for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
    }

    SUBCASE("trunk and insert parameters are disjoint and exhaustive") {
        Rng rng(35);
        HieraStage stage(cfg, rng);
        int64_t trunk = 0, inserts = 0, all = 0;
        stage.visit_trunk("s", [&](const std::string&, Tensor& t) { trunk += t.numel(); });
        stage.visit_adapters("s", [&](const std::string&, Tensor& t) { inserts += t.numel(); });
        stage.visit("s", [&](const std::string&, Tensor& t) { all += t.numel(); });
        CHECK(trunk + inserts == all);
        CHECK(all == stage.param_count());
        CHECK(inserts > 0);
    }

    SUBCASE("geometry violations are rejected") {
        Rng rng(36);
        HieraStage stage(cfg, rng);
        CHECK_THROWS_AS(stage.forward_blocks(Tensor::zeros({1, 8, 6, 8})), ConfigError);
        CHECK_THROWS_AS(stage.forward_blocks(Tensor::zeros({1, 4, 8, 8})), ShapeError);
        HieraStageConfig bad = cfg;
        bad.blocks = 0;
        Rng r2(37);
        CHECK_THROWS_AS(HieraStage(bad, r2), ConfigError);
    }
}
