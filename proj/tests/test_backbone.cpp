#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "catair/backbone.hpp"
#include "catair/checkpoint.hpp"
#include "fd_oracle.hpp"

using namespace catair;

namespace {

Tensor rand_t(std::vector<int> shape, std::uint64_t seed, Real lo = -1, Real hi = 1) {
    Rng rng(seed);
    return Tensor::uniform(std::move(shape), rng, lo, hi);
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.base_channels = 4;
    cfg.enc_blocks = {1, 1, 1, 1};
    cfg.dec_blocks = {1, 1, 1};
    cfg.q = 2;
    cfg.tau = 1.5;
    cfg.heads = 1;
    cfg.task_count = 3;
    cfg.prompt_size = 4;
    return cfg;
}

std::vector<std::string> tiny_tasks() { return {"a", "b", "c"}; }

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("config validation rejects malformed settings") {
    CHECK_NOTHROW(tiny_config().validate());
    auto bad = tiny_config();
    bad.enc_blocks = {1, 1, 1};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.base_channels = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.tau = 1.3;
    bad.q = 2;  // 2.6 window
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.heads = 7;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.gamma0 = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("input divisibility errors name the offending level") {
    ModelConfig cfg;
    cfg.q = 8;
    try {
        cfg.check_input_dims(24, 24);  // level 2 runs at 12x12, not divisible by 8
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("level 2") != std::string::npos);
    }
    auto tiny = tiny_config();
    try {
        tiny.check_input_dims(20, 20);  // level 3 runs at 5x5, odd for both q=2 and /2
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("level 3") != std::string::npos);
    }
    CHECK_NOTHROW(tiny.check_input_dims(16, 16));
}

TEST_CASE("task list length must match task_count") {
    CHECK_THROWS_AS(CatAIRModel(tiny_config(), {"a", "b"}, 1), ConfigError);
}

TEST_CASE("channel and resolution schedule: C*2^(l-1) channels, /2^(l-1) resolution") {
    ModelConfig cfg;  // defaults: C=16, blocks [2,4,4,4]/[4,4,2], q=8
    CatAIRModel m(cfg, {"a", "b", "c"}, 7);

    // Channel schedule read off parameter shapes.
    CHECK(m.params().get("enc1.block0.chan.pw.w").val().shape() ==
          std::vector<int>{16, 16});
    CHECK(m.params().get("enc2.block0.chan.pw.w").val().shape() ==
          std::vector<int>{32, 32});
    CHECK(m.params().get("enc3.block0.chan.pw.w").val().shape() ==
          std::vector<int>{64, 64});
    // Bottleneck uses transposed attention, not SE.
    CHECK_FALSE(m.params().has("enc4.block0.chan.pw.w"));
    CHECK(m.params().get("enc4.block0.chan.pwq.w").val().shape() ==
          std::vector<int>{128, 128});
    CHECK(m.params().get("dec1.block0.chan.pw.w").val().shape() ==
          std::vector<int>{16, 16});

    // Resolution schedule read off the router decision grids: 64x64 input ->
    // patch grids 8x8, 4x4, 2x2, 1x1 across the four levels.
    NoGradGuard ng;
    ForwardOptions opt;
    opt.train = false;
    auto res = m.forward(Var(rand_t({1, 64, 64, 3}, 11, 0, 1)), opt);
    CHECK(res.output.val().shape() == std::vector<int>{1, 64, 64, 3});
    CHECK(res.decisions.size() == 24);  // 2+4+4+4 encoder + 4+4+2 decoder
    CHECK(res.gamma_realized.size() == 24);
    CHECK(m.config().total_spatial_blocks() == 24);
    CHECK(res.decisions[0].logits.shape() == std::vector<int>{8, 8});
    CHECK(res.decisions[2].logits.shape() == std::vector<int>{4, 4});   // level 2 starts
    CHECK(res.decisions[6].logits.shape() == std::vector<int>{2, 2});   // level 3
    CHECK(res.decisions[10].logits.shape() == std::vector<int>{1, 1});  // latent
    CHECK(res.decisions[14].logits.shape() == std::vector<int>{2, 2});  // decoder level 3
    CHECK(res.decisions[23].logits.shape() == std::vector<int>{8, 8});  // decoder level 1
}

TEST_CASE("block is the identity when its output projections start at zero") {
    ModelConfig cfg = tiny_config();
    cfg.zero_init_residual = true;
    ParamRegistry reg;
    Rng rng(3);
    for (int level : {1, 4}) {
        Block blk(reg, "t" + std::to_string(level), level, 8, cfg, rng);
        Var z(rand_t({1, 4, 4, 8}, 21));
        Var id(rand_t({1, 4, 4, 3}, 22, 0, 1));
        SpatialForwardOptions sopt;
        sopt.train = false;
        sopt.gamma = 0.5;
        ForwardResult acc;
        CHECK(bitwise_equal(blk(z, id, sopt, acc).val(), z.val()));
    }
}

TEST_CASE("zero-initialized output conv makes the whole network the identity") {
    ModelConfig cfg = tiny_config();
    cfg.zero_init_residual = false;  // blocks live, only the final conv is zero
    cfg.zero_init_output = true;
    CatAIRModel m(cfg, tiny_tasks(), 5);
    Tensor x = rand_t({1, 16, 16, 3}, 31, 0, 1);
    NoGradGuard ng;
    ForwardOptions opt;
    opt.train = false;
    CHECK(bitwise_equal(m.forward(Var(x), opt).output.val(), x));
}

TEST_CASE("fully zero-initialized network is the identity with live prompts") {
    ModelConfig cfg = tiny_config();
    cfg.zero_init_residual = true;
    cfg.zero_init_output = true;
    CatAIRModel m(cfg, tiny_tasks(), 5);
    Tensor x = rand_t({2, 16, 16, 3}, 41, 0, 1);
    NoGradGuard ng;
    ForwardOptions opt;
    opt.train = false;
    opt.gamma = 0.25;
    auto res = m.forward(Var(x), opt);
    CHECK(bitwise_equal(res.output.val(), x));
    CHECK(res.gamma_realized.size() == 7);
}

TEST_CASE("prompt mixing weights form a distribution; single task is degenerate") {
    ModelConfig cfg = tiny_config();
    CatAIRModel m(cfg, tiny_tasks(), 9);
    NoGradGuard ng;
    Var z(rand_t({2, 8, 8, 16}, 51));  // decoder level 3 runs at 4C=16
    Tensor w = m.prompt_mix_weights(0, z).val();
    REQUIRE(w.shape() == std::vector<int>{2, 3});
    for (int b = 0; b < 2; ++b)
        CHECK(w.at(b, 0) + w.at(b, 1) + w.at(b, 2) == doctest::Approx(1.0).epsilon(1e-6));

    ModelConfig one = tiny_config();
    one.task_count = 1;
    CatAIRModel m1(one, {"solo"}, 9);
    Var z1(rand_t({1, 8, 8, 16}, 52));
    Tensor w1 = m1.prompt_mix_weights(0, z1).val();
    CHECK(w1.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));

    // With one task the injected prompt is exactly the resized component.
    Var injected = m1.inject_prompt(0, z1);
    CHECK(injected.val().shape() == z1.val().shape());
}

TEST_CASE("prompt injection preserves shape at all three decoder levels") {
    ModelConfig cfg = tiny_config();
    CatAIRModel m(cfg, tiny_tasks(), 13);
    NoGradGuard ng;
    const int dims[3] = {16, 8, 4};  // channels at decoder levels 3, 2, 1
    const int res[3] = {4, 8, 16};
    for (int bank = 0; bank < 3; ++bank) {
        Var z(rand_t({1, res[bank], res[bank], dims[bank]}, 60 + bank));
        CHECK(m.inject_prompt(bank, z).val().shape() == z.val().shape());
    }
}

TEST_CASE("construction and inference are deterministic given the seed") {
    ModelConfig cfg = tiny_config();
    CatAIRModel a(cfg, tiny_tasks(), 99), b(cfg, tiny_tasks(), 99);
    REQUIRE(a.params().size() == b.params().size());
    for (size_t i = 0; i < a.params().size(); ++i) {
        CHECK(a.params().items()[i].first == b.params().items()[i].first);
        CHECK(bitwise_equal(a.params().items()[i].second.val(),
                            b.params().items()[i].second.val()));
    }
    Tensor x = rand_t({1, 16, 16, 3}, 71, 0, 1);
    NoGradGuard ng;
    ForwardOptions opt;
    opt.train = false;
    CHECK(bitwise_equal(a.forward(Var(x), opt).output.val(),
                        b.forward(Var(x), opt).output.val()));
}

TEST_CASE("end-to-end gradients match finite differences on a parameter subset") {
    ModelConfig cfg = tiny_config();
    cfg.zero_init_residual = false;  // exercise every path with live weights
    CatAIRModel m(cfg, tiny_tasks(), 17);
    Var x(rand_t({1, 16, 16, 3}, 81, 0, 1));
    Tensor k = rand_t({1, 16, 16, 3}, 82);
    auto loss = [&]() {
        ForwardOptions opt;
        opt.train = true;
        opt.gumbel_noise = false;
        opt.hard_st = false;
        auto res = m.forward(x, opt);
        Var g;
        for (const Var& gv : res.gamma_vars) g = g.defined() ? add(g, gv) : gv;
        g = mul_scalar(g, Real(1) / res.gamma_vars.size());
        return add(mean_all(mul(res.output, Var(k))), square(add_scalar(g, -cfg.gamma0)));
    };
    // Richardson extrapolation tames the deep graph's violent curvature; the
    // floor covers coordinates whose true gradient sits below what FD can
    // resolve over this graph's double-rounding noise.
    auto res = testing::grad_check(loss, m.params().items(), 1e-5, /*subset=*/0.002, 4321,
                                   /*denom_floor=*/1e-2, /*richardson=*/true);
    INFO(res.worst << " rel=" << res.max_rel_err << " checked=" << res.checked);
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("checkpoint round trip is byte-identical and inference-stable") {
    namespace fs = std::filesystem;
    const fs::path base = fs::temp_directory_path() / "catair_ckpt_test";
    fs::remove_all(base);

    ModelConfig cfg = tiny_config();
    cfg.zero_init_residual = false;
    CatAIRModel m(cfg, tiny_tasks(), 23);
    save_checkpoint(m, (base / "a").string());

    CatAIRModel m2 = load_checkpoint((base / "a").string());
    CHECK(m2.config().base_channels == cfg.base_channels);
    CHECK(m2.tasks() == tiny_tasks());
    save_checkpoint(m2, (base / "b").string());

    CHECK(read_file(base / "a" / "weights.bin") == read_file(base / "b" / "weights.bin"));
    CHECK(read_file(base / "a" / "manifest.json") == read_file(base / "b" / "manifest.json"));

    // Inference from the two load generations is bit-identical.
    CatAIRModel m3 = load_checkpoint((base / "b").string());
    Tensor x = rand_t({1, 16, 16, 3}, 91, 0, 1);
    NoGradGuard ng;
    ForwardOptions opt;
    opt.train = false;
    CHECK(bitwise_equal(m2.forward(Var(x), opt).output.val(),
                        m3.forward(Var(x), opt).output.val()));
    fs::remove_all(base);
}

TEST_CASE("strict weight loading flags task-count mismatches both ways") {
    namespace fs = std::filesystem;
    const fs::path base = fs::temp_directory_path() / "catair_ckpt_mismatch";
    fs::remove_all(base);

    ModelConfig small = tiny_config();
    small.task_count = 2;
    CatAIRModel m2(small, {"a", "b"}, 1);
    save_checkpoint(m2, (base / "two").string());

    ModelConfig big = tiny_config();  // task_count = 3
    CatAIRModel m3(big, tiny_tasks(), 1);
    CHECK_THROWS_AS(load_weights(m3, (base / "two").string()), IoError);
    CHECK_NOTHROW(load_weights(m3, (base / "two").string(), /*allow_missing=*/true));
    // Shared parameters really were copied (checkpoints hold f32 values).
    Tensor expect = m2.params().get("shallow.w").val().clone();
    for (int i = 0; i < expect.numel(); ++i)
        expect[i] = static_cast<Real>(static_cast<float>(expect[i]));
    CHECK(bitwise_equal(m3.params().get("shallow.w").val(), expect));

    save_checkpoint(m3, (base / "three").string());
    CatAIRModel m2b(small, {"a", "b"}, 1);
    CHECK_THROWS_AS(load_weights(m2b, (base / "three").string(), true), IoError);
    fs::remove_all(base);
}
