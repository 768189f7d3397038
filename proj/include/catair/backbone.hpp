#pragma once

#include <string>
#include <vector>

#include "catair/channel_blocks.hpp"
#include "catair/spatial_blocks.hpp"

namespace catair {

// Four-level U-shaped restoration network. Level l runs at channels C*2^(l-1)
// and resolution (H,W)/2^(l-1); the latent sits at [H/8, W/8, 8C]. Decoder
// levels receive task prompts after skip fusion, before their blocks.
struct ModelConfig {
    int base_channels = 16;
    std::vector<int> enc_blocks = {2, 4, 4, 4};  // levels 1..4; level 4 is the latent
    std::vector<int> dec_blocks = {4, 4, 2};     // decoder levels 3, 2, 1
    int q = 8;            // routing patch size
    Real tau = 1.5;       // K/V window overlap ratio; tau*q must be integral
    Real gamma0 = 0.5;    // target attention ratio for the loss regularizer
    int heads = 1;        // bottleneck channel-attention heads
    int task_count = 3;
    int prompt_size = 16;  // prompt component spatial size
    int kernel = 3;        // conv-branch depthwise kernel
    bool zero_init_residual = true;  // zero block output projections (identity start)
    bool zero_init_output = false;   // zero the final output conv

    void validate() const;
    // Throws ConfigError naming the first level whose feature map would not
    // divide evenly by 2 or by q.
    void check_input_dims(int h, int w) const;
    int level_channels(int level) const { return base_channels << (level - 1); }
    int total_spatial_blocks() const;
};

struct ForwardOptions {
    Real gamma = 0.5;          // infer-mode routing ratio
    bool train = false;
    Real temperature = 1.0;
    bool gumbel_noise = true;
    bool hard_st = true;
    Rng* rng = nullptr;
};

struct ForwardResult {
    Var output;                        // [B, H, W, 3]
    std::vector<Var> gamma_vars;       // train mode: one scalar per spatial sublayer
    std::vector<Real> gamma_realized;  // realized ratios, encoder first then decoder
    std::vector<RouterDecision> decisions;
};

// One Eq-style block: channel attention, FFN, spatial attention, FFN, each
// residual. The channel variant follows select_channel_variant(level).
struct Block {
    ChannelVariant variant = ChannelVariant::se;
    SeChannelAttention se;
    TransposedChannelAttention ta;
    GatedFfn ffn1, ffn2;
    CrossFeatureSpatialAttention spat;

    Block() = default;
    Block(ParamRegistry& reg, const std::string& prefix, int level, int c,
          const ModelConfig& cfg, Rng& rng);

    Var operator()(const Var& z, const Var& id_full, const SpatialForwardOptions& sopt,
                   ForwardResult& acc) const;
};

class CatAIRModel {
public:
    // tasks.size() must equal cfg.task_count. All parameters are initialized
    // deterministically from the seed in registry order.
    CatAIRModel(ModelConfig cfg, std::vector<std::string> tasks, std::uint64_t seed);

    ForwardResult forward(const Var& input, const ForwardOptions& opt) const;

    // Mixing weights over tasks for one decoder prompt bank, exposed for tests:
    // softmax(per-task linear heads on GAP(z)) -> [B, T].
    Var prompt_mix_weights(int bank, const Var& z) const;
    // Full injection: fuse(concat[z, sum_t w_t * resize(P_t)]).
    Var inject_prompt(int bank, const Var& z) const;

    ParamRegistry& params() { return reg_; }
    const ParamRegistry& params() const { return reg_; }
    const ModelConfig& config() const { return cfg_; }
    const std::vector<std::string>& tasks() const { return tasks_; }

private:
    struct PromptBank {
        std::vector<Var> comp;          // per task: [prompt_size, prompt_size, c]
        std::vector<Var> mix_w, mix_b;  // per task: [1, c], [1]
        Conv2d fuse;                    // 2c -> c
        int c = 0;
    };

    ModelConfig cfg_;
    std::vector<std::string> tasks_;
    ParamRegistry reg_;
    Conv2d shallow_, out_;
    std::vector<std::vector<Block>> enc_;  // levels 1..4
    std::vector<Conv2d> down_;             // after pixel-unshuffle, levels 1..3
    std::vector<Conv2d> up_, fuse_;        // decoder levels 3, 2, 1
    std::vector<PromptBank> prompts_;      // decoder levels 3, 2, 1
    std::vector<std::vector<Block>> dec_;

    friend class ModelMutator;
};

// Grants the training/checkpoint modules access to grow or rewrite prompt
// parameters without widening the public surface.
class ModelMutator {
public:
    explicit ModelMutator(CatAIRModel& m) : m_(m) {}
    int bank_count() const { return static_cast<int>(m_.prompts_.size()); }
    std::vector<Var>& bank_comp(int b) { return m_.prompts_[b].comp; }
    std::vector<Var>& bank_mix_w(int b) { return m_.prompts_[b].mix_w; }
    std::vector<Var>& bank_mix_b(int b) { return m_.prompts_[b].mix_b; }

private:
    CatAIRModel& m_;
};

}  // namespace catair
