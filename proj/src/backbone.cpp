#include "catair/backbone.hpp"

#include <cmath>
#include <numeric>

namespace catair {

void ModelConfig::validate() const {
    if (base_channels < 2 || base_channels % 2)
        throw ConfigError("base_channels must be even and >= 2, got " +
                          std::to_string(base_channels));
    if (enc_blocks.size() != 4)
        throw ConfigError("enc_blocks must list 4 levels, got " +
                          std::to_string(enc_blocks.size()));
    if (dec_blocks.size() != 3)
        throw ConfigError("dec_blocks must list 3 levels, got " +
                          std::to_string(dec_blocks.size()));
    for (int n : enc_blocks)
        if (n < 1) throw ConfigError("every encoder level needs at least one block");
    for (int n : dec_blocks)
        if (n < 1) throw ConfigError("every decoder level needs at least one block");
    if (q < 1) throw ConfigError("patch size q must be positive");
    if (tau < 1) throw ConfigError("overlap ratio tau must be >= 1");
    if (std::abs(tau * q - std::lround(tau * q)) > 1e-9)
        throw ConfigError("tau*q must be an integer window size, got tau=" +
                          std::to_string(tau) + " q=" + std::to_string(q));
    if (gamma0 < 0 || gamma0 > 1) throw ConfigError("gamma0 must lie in [0,1]");
    if (heads < 1 || level_channels(4) % heads)
        throw ConfigError("heads must divide the bottleneck channel count " +
                          std::to_string(level_channels(4)));
    if (task_count < 1) throw ConfigError("task_count must be >= 1");
    if (prompt_size < 1) throw ConfigError("prompt_size must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel must be odd");
}

void ModelConfig::check_input_dims(int h, int w) const {
    for (int level = 1; level <= 4; ++level) {
        const int d = 1 << (level - 1);
        if (h % d || w % d)
            throw ConfigError("level " + std::to_string(level) + ": input " +
                              std::to_string(h) + "x" + std::to_string(w) +
                              " does not downsample evenly");
        const int hl = h / d, wl = w / d;
        if (hl % q || wl % q)
            throw ConfigError("level " + std::to_string(level) + ": feature map " +
                              std::to_string(hl) + "x" + std::to_string(wl) +
                              " not divisible by window q=" + std::to_string(q));
    }
}

int ModelConfig::total_spatial_blocks() const {
    return std::accumulate(enc_blocks.begin(), enc_blocks.end(), 0) +
           std::accumulate(dec_blocks.begin(), dec_blocks.end(), 0);
}

Block::Block(ParamRegistry& reg, const std::string& prefix, int level, int c,
             const ModelConfig& cfg, Rng& rng)
    : variant(select_channel_variant(level)) {
    if (variant == ChannelVariant::se)
        se = SeChannelAttention(reg, prefix + ".chan", c, rng, cfg.zero_init_residual);
    else
        ta = TransposedChannelAttention(reg, prefix + ".chan", c, cfg.heads, rng,
                                        cfg.zero_init_residual);
    ffn1 = GatedFfn(reg, prefix + ".ffn1", c, rng, cfg.zero_init_residual);
    spat = CrossFeatureSpatialAttention(reg, prefix + ".spat", c, cfg.q, cfg.tau, cfg.kernel,
                                        rng, cfg.zero_init_residual);
    ffn2 = GatedFfn(reg, prefix + ".ffn2", c, rng, cfg.zero_init_residual);
}

Var Block::operator()(const Var& z, const Var& id_full, const SpatialForwardOptions& sopt,
                      ForwardResult& acc) const {
    Var z1 = variant == ChannelVariant::se ? se(z) : ta(z);
    Var z2 = ffn1(z1);
    auto sp = spat.forward(z2, id_full, sopt);
    acc.decisions.push_back(sp.decision);
    acc.gamma_realized.push_back(sp.decision.gamma_j);
    if (sopt.train) acc.gamma_vars.push_back(sp.gamma_var);
    return ffn2(sp.out);
}

CatAIRModel::CatAIRModel(ModelConfig cfg, std::vector<std::string> tasks, std::uint64_t seed)
    : cfg_(std::move(cfg)), tasks_(std::move(tasks)) {
    cfg_.validate();
    if (static_cast<int>(tasks_.size()) != cfg_.task_count)
        throw ConfigError("task list has " + std::to_string(tasks_.size()) +
                          " names but task_count is " + std::to_string(cfg_.task_count));
    Rng rng(seed);
    const int c1 = cfg_.level_channels(1);

    shallow_ = Conv2d(reg_, "shallow", 3, c1, 3, rng);

    enc_.resize(4);
    for (int level = 1; level <= 4; ++level) {
        const int c = cfg_.level_channels(level);
        for (int b = 0; b < cfg_.enc_blocks[static_cast<size_t>(level - 1)]; ++b)
            enc_[static_cast<size_t>(level - 1)].emplace_back(
                reg_, "enc" + std::to_string(level) + ".block" + std::to_string(b), level, c,
                cfg_, rng);
        if (level < 4)
            down_.emplace_back(reg_, "down" + std::to_string(level), 4 * c, 2 * c, 1, rng);
    }

    dec_.resize(3);
    prompts_.resize(3);
    for (int d = 0; d < 3; ++d) {
        const int level = 3 - d;  // decoder order: 3, 2, 1
        const int c = cfg_.level_channels(level);
        const std::string lv = std::to_string(level);
        up_.emplace_back(reg_, "up" + lv, 2 * c, 4 * c, 1, rng);
        fuse_.emplace_back(reg_, "fuse" + lv, 2 * c, c, 1, rng);
        PromptBank& bank = prompts_[static_cast<size_t>(d)];
        bank.c = c;
        for (int t = 0; t < cfg_.task_count; ++t) {
            const std::string pt = "prompt" + lv + ".comp" + std::to_string(t);
            bank.comp.push_back(
                reg_.add(pt, Tensor::gaussian({cfg_.prompt_size, cfg_.prompt_size, c}, rng,
                                              0.02)));
            const std::string mt = "prompt" + lv + ".mix" + std::to_string(t);
            bank.mix_w.push_back(reg_.add(mt + ".w", xavier_uniform({1, c}, c, 1, rng)));
            bank.mix_b.push_back(reg_.add(mt + ".b", Tensor({1})));
        }
        bank.fuse = Conv2d(reg_, "prompt" + lv + ".fuse", 2 * c, c, 3, rng);
        for (int b = 0; b < cfg_.dec_blocks[static_cast<size_t>(d)]; ++b)
            dec_[static_cast<size_t>(d)].emplace_back(
                reg_, "dec" + lv + ".block" + std::to_string(b), level, c, cfg_, rng);
    }

    out_ = Conv2d(reg_, "out", c1, 3, 3, rng, cfg_.zero_init_output);
}

Var CatAIRModel::prompt_mix_weights(int bank, const Var& z) const {
    const PromptBank& pb = prompts_[static_cast<size_t>(bank)];
    Var g = gap_hw(z);  // [B, c]
    std::vector<Var> logits;
    for (size_t t = 0; t < pb.comp.size(); ++t)
        logits.push_back(dense_lastdim(g, pb.mix_w[t], pb.mix_b[t]));  // [B, 1]
    return softmax_lastdim(concat_channels(logits));  // [B, T]
}

Var CatAIRModel::inject_prompt(int bank, const Var& z) const {
    const PromptBank& pb = prompts_[static_cast<size_t>(bank)];
    const auto& s = z.val().shape();
    const int b = s[0], h = s[1], w = s[2];
    Var wmix = prompt_mix_weights(bank, z);
    std::vector<Var> comps;
    for (const Var& p : pb.comp) {
        Var up = bilinear_resize(reshape(p, {1, cfg_.prompt_size, cfg_.prompt_size, pb.c}),
                                 h, w);
        comps.push_back(reshape(up, {1, h * w * pb.c}));
    }
    Var generated = matmul2d(wmix, concat_dim0(comps));  // [B, h*w*c]
    return pb.fuse(concat_channels({z, reshape(generated, {b, h, w, pb.c})}));
}

ForwardResult CatAIRModel::forward(const Var& input, const ForwardOptions& opt) const {
    const auto& s = input.val().shape();
    if (s.size() != 4 || s[3] != 3)
        throw ShapeError("expected input [B,H,W,3], got " + input.val().shape_str());
    cfg_.check_input_dims(s[1], s[2]);

    SpatialForwardOptions sopt;
    sopt.gamma = opt.gamma;
    sopt.train = opt.train;
    sopt.temperature = opt.temperature;
    sopt.gumbel_noise = opt.gumbel_noise;
    sopt.hard_st = opt.hard_st;
    sopt.rng = opt.rng;

    ForwardResult res;
    Var z = shallow_(input);
    std::vector<Var> skips;
    for (int level = 1; level <= 4; ++level) {
        for (const Block& blk : enc_[static_cast<size_t>(level - 1)])
            z = blk(z, input, sopt, res);
        if (level < 4) {
            skips.push_back(z);
            z = down_[static_cast<size_t>(level - 1)](pixel_unshuffle2(z));
        }
    }
    for (int d = 0; d < 3; ++d) {
        z = pixel_shuffle2(up_[static_cast<size_t>(d)](z));
        z = fuse_[static_cast<size_t>(d)](concat_channels({z, skips[static_cast<size_t>(2 - d)]}));
        z = inject_prompt(d, z);
        for (const Block& blk : dec_[static_cast<size_t>(d)])
            z = blk(z, input, sopt, res);
    }
    res.output = add(out_(z), input);
    return res;
}

}  // namespace catair
