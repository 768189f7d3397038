#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "catair/spatial_blocks.hpp"
#include "fd_oracle.hpp"

using namespace catair;

namespace {

Tensor rand_t(std::vector<int> shape, std::uint64_t seed, Real lo = -1, Real hi = 1) {
    Rng rng(seed);
    return Tensor::uniform(std::move(shape), rng, lo, hi);
}

CrossFeatureSpatialAttention make_block(ParamRegistry& reg, int c, int q, Real tau,
                                        std::uint64_t seed, bool zero_out = false) {
    Rng rng(seed);
    return CrossFeatureSpatialAttention(reg, "sp", c, q, tau, 3, rng, zero_out);
}

bool is_partition(const std::vector<int>& a, const std::vector<int>& b, int p) {
    std::vector<int> all(a);
    all.insert(all.end(), b.begin(), b.end());
    std::sort(all.begin(), all.end());
    if (static_cast<int>(all.size()) != p) return false;
    for (int i = 0; i < p; ++i)
        if (all[static_cast<size_t>(i)] != i) return false;
    return std::is_sorted(a.begin(), a.end()) && std::is_sorted(b.begin(), b.end());
}

}  // namespace

TEST_CASE("positional grid matches the closed form") {
    Tensor g8 = positional_grid(8, 8);
    CHECK(g8.at(0, 0, 0) == -1.0);
    CHECK(g8.at(0, 0, 1) == -1.0);
    CHECK(g8.at(4, 4, 0) == 0.0);
    CHECK(g8.at(4, 4, 1) == 0.0);
    Tensor g4 = positional_grid(4, 4);
    CHECK(g4.at(3, 3, 0) == 0.5);
    CHECK(g4.at(3, 3, 1) == 0.5);
    CHECK(g4.shape() == std::vector<int>{4, 4, 2});
}

TEST_CASE("topk partition: frozen four-patch example with tie broken by index") {
    std::vector<Real> logits = {2.0, -1.0, 0.5, 0.5};
    std::vector<int> hard, easy;
    topk_partition(logits, 0.5, hard, easy);
    CHECK(hard == std::vector<int>{0, 2});
    CHECK(easy == std::vector<int>{1, 3});
}

TEST_CASE("topk partition: gamma extremes") {
    std::vector<Real> logits = {0.3, -0.7, 1.2};
    std::vector<int> hard, easy;
    topk_partition(logits, 1.0, hard, easy);
    CHECK(hard == std::vector<int>{0, 1, 2});
    CHECK(easy.empty());
    topk_partition(logits, 0.0, hard, easy);
    CHECK(hard.empty());
    CHECK(easy == std::vector<int>{0, 1, 2});
}

TEST_CASE("topk partition: property check over random logits and gamma") {
    Rng rng(99);
    for (int trial = 0; trial < 400; ++trial) {
        const int p = 1 + rng.uniform_int(32);
        std::vector<Real> logits(static_cast<size_t>(p));
        for (auto& v : logits) v = rng.uniform(-3, 3);
        const Real gamma = rng.uniform(0, 1);
        std::vector<int> hard, easy;
        topk_partition(logits, gamma, hard, easy);
        REQUIRE(is_partition(hard, easy, p));
        CHECK(static_cast<int>(hard.size()) == std::lround(gamma * p));
        // Every hard logit >= every easy logit.
        if (!hard.empty() && !easy.empty()) {
            Real min_hard = 1e30, max_easy = -1e30;
            for (int i : hard) min_hard = std::min(min_hard, logits[static_cast<size_t>(i)]);
            for (int i : easy) max_easy = std::max(max_easy, logits[static_cast<size_t>(i)]);
            CHECK(min_hard >= max_easy);
        }
    }
}

TEST_CASE("window extraction degenerates to plain patches at tau=1") {
    Tensor x = rand_t({1, 8, 8, 3}, 5);
    Var xv(x);
    CHECK(bitwise_equal(extract_windows(xv, 4, 4).val(), map_to_patches(xv, 4).val()));
}

TEST_CASE("gather then scatter with identity processing reconstructs the map") {
    Tensor x = rand_t({2, 8, 8, 3}, 6);
    Var patches = map_to_patches(Var(x), 2);  // [2,16,4,3]
    std::vector<int> ia = {0, 3, 5, 8, 9, 15}, ib;
    for (int i = 0; i < 16; ++i)
        if (std::find(ia.begin(), ia.end(), i) == ia.end()) ib.push_back(i);
    Var merged = scatter_merge_dim1(16, ia, gather_dim1(patches, ia), ib, gather_dim1(patches, ib));
    CHECK(bitwise_equal(patches_to_map(merged, 8, 8, 2).val(), x));
}

TEST_CASE("conv branch with delta kernel and identity projection squares the input") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 2, 1.5, 7);
    for (int i = 0; i < blk.dweasy.w.val().numel(); ++i) blk.dweasy.w.val()[i] = 0;
    for (int c = 0; c < 4; ++c) blk.dweasy.w.val().at(c, 1, 1) = 1.0;  // centered delta
    Tensor x = rand_t({1, 4, 4, 4}, 71);
    Var patches = map_to_patches(Var(x), 2);
    Tensor out = blk.conv_branch(patches).val();
    const Tensor& pv = patches.val();
    REQUIRE(out.shape() == pv.shape());
    for (int i = 0; i < out.numel(); ++i)
        CHECK(out[i] == doctest::Approx(pv[i] * pv[i]).epsilon(1e-12));
}

TEST_CASE("conv branch: zero input gives zero output") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 2, 1.5, 7);
    Var patches(Tensor({1, 4, 4, 4}));
    Tensor out = blk.conv_branch(patches).val();
    for (int i = 0; i < out.numel(); ++i) CHECK(out[i] == 0.0);
}

TEST_CASE("infer gamma=1 equals all-attention, gamma=0 equals all-conv, bit-exact") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 2, 1.5, 11);
    Var z(rand_t({1, 4, 4, 4}, 81));
    Var id(rand_t({1, 8, 8, 3}, 82, 0, 1));
    NoGradGuard ng;

    SpatialForwardOptions opt;
    opt.train = false;
    opt.gamma = 1.0;
    Tensor all_hard = blk.forward(z, id, opt).out.val();
    opt.gamma = 0.0;
    Tensor all_easy = blk.forward(z, id, opt).out.val();

    // Reference paths with no routing machinery at all.
    Var q_patches = map_to_patches(blk.wq(z), 2);
    Var k_windows = extract_windows(blk.wk(z), 2, blk.window);
    Var v_windows = extract_windows(blk.wv(z), 2, blk.window);
    Var easy_patches = map_to_patches(blk.weasy(z), 2);
    Tensor ref_hard =
        add(blk.wout(patches_to_map(blk.attn_core(q_patches, k_windows, v_windows), 4, 4, 2)), z)
            .val();
    Tensor ref_easy =
        add(blk.wout(patches_to_map(blk.conv_branch(easy_patches), 4, 4, 2)), z).val();

    CHECK(bitwise_equal(all_hard, ref_hard));
    CHECK(bitwise_equal(all_easy, ref_easy));
}

TEST_CASE("forward covers every patch exactly once at mixed gammas") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 2, 1.5, 13);
    Var z(rand_t({1, 8, 8, 4}, 91));
    Var id(rand_t({1, 8, 8, 3}, 92, 0, 1));
    NoGradGuard ng;
    for (Real gamma : {0.0, 0.25, 0.5, 1.0}) {
        SpatialForwardOptions opt;
        opt.train = false;
        opt.gamma = gamma;
        auto res = blk.forward(z, id, opt);
        REQUIRE(is_partition(res.decision.idx_hard, res.decision.idx_easy, 16));
        CHECK(static_cast<int>(res.decision.idx_hard.size()) == std::lround(gamma * 16));
        CHECK(res.decision.gamma_j == doctest::Approx(gamma).epsilon(1e-12));
        CHECK(res.out.val().shape() == z.val().shape());
    }
}

TEST_CASE("inference is deterministic and batch items are independent") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 2, 1.5, 17);
    Tensor z1 = rand_t({1, 4, 4, 4}, 101);
    Tensor id1 = rand_t({1, 4, 4, 3}, 102, 0, 1);
    NoGradGuard ng;
    SpatialForwardOptions opt;
    opt.train = false;
    opt.gamma = 0.5;

    Tensor once = blk.forward(Var(z1), Var(id1), opt).out.val();
    Tensor twice = blk.forward(Var(z1), Var(id1), opt).out.val();
    CHECK(bitwise_equal(once, twice));

    // Duplicate the item along the batch: each copy must route identically.
    Tensor z2({2, 4, 4, 4}), id2({2, 4, 4, 3});
    for (int b = 0; b < 2; ++b) {
        std::copy(z1.data(), z1.data() + z1.numel(), z2.data() + b * z1.numel());
        std::copy(id1.data(), id1.data() + id1.numel(), id2.data() + b * id1.numel());
    }
    Tensor both = blk.forward(Var(z2), Var(id2), opt).out.val();
    for (int i = 0; i < once.numel(); ++i) {
        CHECK(both[i] == once[i]);
        CHECK(both[once.numel() + i] == once[i]);
    }
}

TEST_CASE("train mode: temperature to zero turns the gate into the logit sign") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 2, 1.5, 19);
    Var z(rand_t({1, 4, 4, 4}, 111));
    Var id(rand_t({1, 4, 4, 3}, 112, 0, 1));
    SpatialForwardOptions opt;
    opt.train = true;
    opt.gumbel_noise = false;
    opt.temperature = 1e-6;
    auto res = blk.forward(z, id, opt);
    const Tensor& logits = res.decision.logits;
    std::vector<int> expect_hard;
    for (int i = 0; i < logits.numel(); ++i)
        if (logits[i] > 0) expect_hard.push_back(i);
    CHECK(res.decision.idx_hard == expect_hard);
    REQUIRE(is_partition(res.decision.idx_hard, res.decision.idx_easy, 4));
}

TEST_CASE("train mode is deterministic under a fixed seed") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 2, 1.5, 23);
    Var z(rand_t({2, 4, 4, 4}, 121));
    Var id(rand_t({2, 4, 4, 3}, 122, 0, 1));
    auto run = [&]() {
        Rng rng(777);
        SpatialForwardOptions opt;
        opt.train = true;
        opt.rng = &rng;
        return blk.forward(z, id, opt);
    };
    auto a = run();
    auto b = run();
    CHECK(bitwise_equal(a.out.val(), b.out.val()));
    CHECK(a.decision.idx_hard == b.decision.idx_hard);
    CHECK(a.gamma_var.val()[0] == b.gamma_var.val()[0]);
    CHECK(a.gamma_var.val()[0] == doctest::Approx(a.decision.gamma_j));
}

TEST_CASE("train gamma_var is the mean of the straight-through hard bits") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 2, 1.5, 29);
    Var z(rand_t({1, 8, 8, 4}, 131));
    Var id(rand_t({1, 8, 8, 3}, 132, 0, 1));
    Rng rng(31);
    SpatialForwardOptions opt;
    opt.train = true;
    opt.rng = &rng;
    auto res = blk.forward(z, id, opt);
    CHECK(res.gamma_var.val()[0] ==
          doctest::Approx(res.decision.idx_hard.size() / 16.0).epsilon(1e-12));
}

TEST_CASE("degraded input at a different resolution is resized for the router") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 4, 1.5, 37);
    Var z(rand_t({1, 8, 8, 4}, 141));
    Var id(rand_t({1, 16, 16, 3}, 142, 0, 1));
    NoGradGuard ng;
    SpatialForwardOptions opt;
    opt.train = false;
    CHECK(blk.forward(z, id, opt).out.val().shape() == std::vector<int>{1, 8, 8, 4});
}

TEST_CASE("map size must be divisible by the patch size") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 4, 1.5, 41);
    Var z(rand_t({1, 6, 8, 4}, 151));
    Var id(rand_t({1, 6, 8, 3}, 152, 0, 1));
    CHECK_THROWS_AS(blk.forward(z, id, {}), ConfigError);
}

TEST_CASE("non-integer overlap window is rejected") {
    ParamRegistry reg;
    Rng rng(1);
    CHECK_THROWS_AS(CrossFeatureSpatialAttention(reg, "sp", 4, 8, 1.3, 3, rng, false),
                    ConfigError);
    ParamRegistry reg2;
    CHECK_NOTHROW(CrossFeatureSpatialAttention(reg2, "sp", 4, 8, 1.25, 3, rng, false));
}

TEST_CASE("zero output projection makes the whole block the identity") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 2, 1.5, 43, /*zero_out=*/true);
    Var z(rand_t({1, 4, 4, 4}, 161));
    Var id(rand_t({1, 4, 4, 3}, 162, 0, 1));
    NoGradGuard ng;
    SpatialForwardOptions opt;
    opt.train = false;
    opt.gamma = 0.5;
    CHECK(bitwise_equal(blk.forward(z, id, opt).out.val(), z.val()));
}

TEST_CASE("train-mode gradients match finite differences on the soft blend path") {
    ParamRegistry reg;
    auto blk = make_block(reg, 4, 2, 1.5, 47);
    Var z(rand_t({1, 4, 4, 4}, 171), true);
    Tensor id = rand_t({1, 4, 4, 3}, 172, 0, 1);
    Tensor k = rand_t({1, 4, 4, 4}, 173);
    auto params = reg.items();
    params.emplace_back("z", z);
    auto loss = [&]() {
        SpatialForwardOptions opt;
        opt.train = true;
        opt.gumbel_noise = false;
        opt.hard_st = false;
        auto res = blk.forward(z, Var(id), opt);
        return add(mean_all(mul(res.out, Var(k))), square(res.gamma_var));
    };
    auto res = testing::grad_check(loss, params, 1e-5);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-3);
}
