#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "samba/net.hpp"
#include "samba/ops.hpp"
#include "testutil.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

using namespace samba;

namespace {

// Two-stage 16x16 micro geometry: exercises multi-stage plumbing while a
// forward pass stays in the microsecond range.
NetConfig micro_config() {
    NetConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    cfg.stage_channels = {4, 8};
    cfg.attn_blocks = {1, 1};
    cfg.scan_blocks = {1, 1};
    cfg.window = 2;
    cfg.heads = 2;
    cfg.state = 4;
    cfg.seed = 7;
    return cfg;
}

// Single-stage 8x8 geometry for difference probes.
NetConfig probe_config() {
    NetConfig cfg;
    cfg.height = 8;
    cfg.width = 8;
    cfg.stage_channels = {8};
    cfg.attn_blocks = {1};
    cfg.scan_blocks = {1};
    cfg.window = 2;
    cfg.heads = 2;
    cfg.state = 4;
    cfg.seed = 21;
    return cfg;
}

bool all_finite(const Tensor& t) {
    for (float v : t.vec())
        if (!std::isfinite(v)) return false;
    return true;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    const auto va = a.vec();
    const auto vb = b.vec();
    for (size_t i = 0; i < va.size(); ++i)
        if (va[i] != vb[i]) return false;
    return true;
}

// Closed forms for the per-block inserts, mirrored from their layer shapes
// (gate bottleneck and adapter bottleneck are both floor(C/4) wide).
int64_t gate_params(int64_t c) {
    const int64_t h = c / 4;
    return (2 * c * h + h) + (h * c + c);
}
int64_t refiner_params(int64_t c) {
    return gate_params(c) + 2 * (9 * c * c + c) + 2 * c;
}
int64_t adapter_params(int64_t c) {
    const int64_t h = c / 4;
    return (c * h + h) + (h * c + c);
}

int64_t visited_numel(SambaNet& net) {
    int64_t total = 0;
    net.visit([&](const std::string&, Tensor& t) { total += t.numel(); });
    return total;
}

}  // namespace

TEST_CASE("network forward contract") {
    SUBCASE("default geometry maps one-channel images to four-class logits") {
        NetConfig cfg;
        cfg.seed = 3;
        SambaNet net(cfg);
        Rng rng(11);
        Tensor x = Tensor::uniform({2, 1, 64, 64}, 0, 1, rng);
        Tensor logits = net.forward(x);
        CHECK(logits.shape() == Shape{2, 4, 64, 64});
        CHECK(all_finite(logits));
    }

    SUBCASE("forward is bit-deterministic across passes and rebuilds") {
        NetConfig cfg = micro_config();
        SambaNet net(cfg);
        Rng rng(12);
        Tensor x = Tensor::uniform({2, 1, 16, 16}, -1, 1, rng);
        Tensor first = net.forward(x);
        Tensor second = net.forward(x);
        CHECK(bitwise_equal(first, second));

        SambaNet rebuilt(cfg);
        CHECK(bitwise_equal(first, rebuilt.forward(x)));

        NetConfig other = cfg;
        other.seed = cfg.seed + 1;
        SambaNet different(other);
        CHECK_FALSE(bitwise_equal(first, different.forward(x)));
    }

    SUBCASE("every primary ablation combination produces valid logits") {
        Rng rng(13);
        Tensor x = Tensor::uniform({1, 1, 16, 16}, -1, 1, rng);
        for (int bits = 0; bits < 32; ++bits) {
            NetConfig cfg = micro_config();
            cfg.refiner = (bits & 1) != 0;
            cfg.channel_attn = (bits & 2) != 0;
            cfg.mlp_adapter = (bits & 4) != 0;
            cfg.oca = (bits & 8) != 0;
            cfg.bsea = (bits & 16) != 0;
            SambaNet net(cfg);
            Tensor logits = net.forward(x);
            CHECK(logits.shape() == Shape{1, 4, 16, 16});
            CHECK(all_finite(logits));
        }
        for (int variant = 0; variant < 3; ++variant) {
            NetConfig cfg = micro_config();
            if (variant == 0) cfg.adapt_attn = false;
            if (variant == 1) cfg.gcaa = false;
            if (variant == 2) cfg.fuse_mode = HoacmFuseMode::Average;
            SambaNet net(cfg);
            Tensor logits = net.forward(x);
            CHECK(logits.shape() == Shape{1, 4, 16, 16});
            CHECK(all_finite(logits));
        }
    }

    SUBCASE("logits stay finite over random inputs") {
        SambaNet net(probe_config());
        bool finite = true;
        for (uint64_t seed = 1; seed <= 100 && finite; ++seed) {
            Rng rng(seed);
            Tensor x = Tensor::uniform({1, 1, 8, 8}, -3, 3, rng);
            finite = all_finite(net.forward(x));
        }
        CHECK(finite);
    }
}

TEST_CASE("network parameter accounting") {
    SUBCASE("census components sum to the optimizer-visible total") {
        SambaNet net(micro_config());
        auto census = net.parameter_census();
        int64_t sum = 0;
        for (const auto& [component, count] : census) {
            CHECK(count > 0);
            sum += count;
        }
        CHECK(sum == net.param_count());
        CHECK(visited_numel(net) == net.param_count());
        for (const char* key : {"attn.stem", "attn.stage0", "attn.stage1", "scan.stem",
                                "scan.stage0", "scan.stage1", "fuse.stage0", "fuse.stage1",
                                "fuse.bottleneck", "decoder"})
            CHECK(census.count(key) == 1);
        CHECK(census.size() == 10);
    }

    SUBCASE("insert switches change the count by their closed forms") {
        NetConfig base = micro_config();
        const int64_t all = SambaNet(base).param_count();

        NetConfig no_refiner = base;
        no_refiner.refiner = false;
        CHECK(all - SambaNet(no_refiner).param_count() ==
              refiner_params(4) + refiner_params(8));

        NetConfig no_adapter = base;
        no_adapter.mlp_adapter = false;
        CHECK(all - SambaNet(no_adapter).param_count() ==
              adapter_params(4) + adapter_params(8));

        NetConfig no_gate = base;
        no_gate.channel_attn = false;
        CHECK(all - SambaNet(no_gate).param_count() == gate_params(4) + gate_params(8));
    }

    SUBCASE("every ablation switch strictly removes parameters") {
        NetConfig base = micro_config();
        const int64_t all = SambaNet(base).param_count();
        auto count = [&](void (*tweak)(NetConfig&)) {
            NetConfig cfg = base;
            tweak(cfg);
            return SambaNet(cfg).param_count();
        };
        CHECK(count([](NetConfig& c) { c.refiner = false; }) < all);
        CHECK(count([](NetConfig& c) { c.channel_attn = false; }) < all);
        CHECK(count([](NetConfig& c) { c.mlp_adapter = false; }) < all);
        CHECK(count([](NetConfig& c) { c.adapt_attn = false; }) < all);
        CHECK(count([](NetConfig& c) { c.gcaa = false; }) < all);
        CHECK(count([](NetConfig& c) { c.oca = false; }) < all);
        CHECK(count([](NetConfig& c) { c.bsea = false; }) < all);
        CHECK(count([](NetConfig& c) { c.fuse_mode = HoacmFuseMode::Average; }) < all);
    }

    SUBCASE("freezing the trunk leaves only attention-branch inserts trainable") {
        NetConfig cfg = micro_config();
        cfg.freeze_trunk = true;
        SambaNet net(cfg);

        std::set<std::string> all_names;
        net.visit([&](const std::string& n, Tensor&) { all_names.insert(n); });
        std::set<std::string> trainable;
        int64_t trainable_numel = 0;
        net.visit_trainable([&](const std::string& n, Tensor& t) {
            trainable.insert(n);
            trainable_numel += t.numel();
        });
        CHECK(all_names.size() > trainable.size());
        for (const std::string& n : trainable) CHECK(all_names.count(n) == 1);
        for (const std::string& n : all_names) {
            const bool frozen = trainable.count(n) == 0;
            const bool attn_branch = n.rfind("attn.", 0) == 0;
            const bool insert = n.find(".refiner.") != std::string::npos ||
                                n.find(".adapter.") != std::string::npos;
            if (frozen) {
                CHECK(attn_branch);
                CHECK_FALSE(insert);
            } else if (attn_branch) {
                CHECK(insert);
            }
        }
        int64_t trunk_numel = net.attn_stem.param_count();
        for (auto& stage : net.attn_stages)
            stage.visit_trunk("t", [&](const std::string&, Tensor& t) { trunk_numel += t.numel(); });
        CHECK(trainable_numel == net.param_count() - trunk_numel);

        cfg.freeze_trunk = false;
        SambaNet open_net(cfg);
        std::set<std::string> open_trainable;
        open_net.visit_trainable([&](const std::string& n, Tensor&) { open_trainable.insert(n); });
        CHECK(open_trainable == all_names);
    }
}

TEST_CASE("network validation") {
    SUBCASE("bad geometry is rejected at build time") {
        auto reject = [](void (*tweak)(NetConfig&)) {
            NetConfig cfg = micro_config();
            tweak(cfg);
            CHECK_THROWS_AS(SambaNet{cfg}, ConfigError);
        };
        reject([](NetConfig& c) { c.stage_channels = {4, 12}; });
        reject([](NetConfig& c) { c.window = 3; });
        reject([](NetConfig& c) { c.heads = 3; });
        reject([](NetConfig& c) { c.height = 14; });  // second stage extent odd
        reject([](NetConfig& c) { c.attn_blocks = {1}; });
        reject([](NetConfig& c) { c.stage_channels.clear(); });
        reject([](NetConfig& c) { c.classes = 0; });
    }

    SUBCASE("forward rejects inputs that do not match the build") {
        SambaNet net(micro_config());
        CHECK_THROWS_AS(net.forward(Tensor::zeros({2, 2, 16, 16})), ShapeError);
        CHECK_THROWS_AS(net.forward(Tensor::zeros({16, 16})), ShapeError);
        CHECK_THROWS_AS(net.forward(Tensor::zeros({1, 1, 32, 32})), ConfigError);
    }
}

TEST_CASE("network gradients") {
    // End-to-end difference probe on a single-stage 8x8 net.  The readout
    // weights every logit with a fixed random positive factor so the check
    // sees every output path.  Probing a sample of small tensors from every
    // component keeps the pass fast while still covering stems, both
    // branches, both fuses, and the decoder; tolerance is looser than the
    // per-module checks because the composition is much deeper.
    SUBCASE("finite differences reach every component") {
        SambaNet net(probe_config());
        Rng rng(31);
        Tensor x = Tensor::uniform({1, 1, 8, 8}, -1, 1, rng, true);
        Tensor k = Tensor::uniform({1, 4, 8, 8}, 0.5, 1.5, rng);

        std::map<std::string, Tensor> params;
        net.visit([&](const std::string& n, Tensor& t) { params.emplace(n, t); });
        const char* probes[] = {
            "attn.stem.bias",
            "attn.stage0.block0.attn.pos",
            "attn.stage0.block0.norm2.gamma",
            "attn.stage0.block0.refiner.norm.gamma",
            "attn.stage0.down.bias",
            "scan.stem.bias",
            "scan.stage0.block0.norm.gamma",
            "scan.stage0.block0.scan.row.skip",
            "scan.stage0.down.bias",
            "fuse.stage0.bsea.log_scale",
            "fuse.stage0.norm.beta",
            "fuse.bottleneck.pw.bias",
            "decoder.stage0.up.bias",
            "decoder.head.weight",
        };
        std::vector<Tensor> ps = {x};
        for (const char* name : probes) {
            REQUIRE_MESSAGE(params.count(name) == 1, name);
            ps.push_back(params.at(name));
        }
        auto out = [&] { return mul(net.forward(x), k); };
        CHECK(testutil::gradcheck(out, ps, 2e-3f) <= 1e-2);
    }
}
