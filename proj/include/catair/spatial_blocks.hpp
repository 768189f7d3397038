#pragma once

#include <vector>

#include "catair/nn.hpp"

namespace catair {

// Outcome of one routing decision. Grids describe batch item 0 at [H/q, W/q];
// gamma_j is the realized hard fraction over the whole batch.
struct RouterDecision {
    Tensor logits;     // [Hq, Wq]
    Tensor hard_prob;  // [Hq, Wq]; sampled soft prob in train, 0/1 in infer
    std::vector<int> idx_hard, idx_easy;  // ascending, disjoint cover of 0..P-1
    Real gamma_j = 0;
    bool train_mode = false;
};

// channel 0 = 2h/H - 1, channel 1 = 2w/W - 1
Tensor positional_grid(int h, int w);

// Deterministic inference-time selection: the round(gamma*P) highest logits
// become hard patches, ties broken by ascending patch index. Both index lists
// come back sorted ascending.
void topk_partition(const std::vector<Real>& logits, Real gamma,
                    std::vector<int>& idx_hard, std::vector<int>& idx_easy);

struct SpatialForwardOptions {
    Real gamma = 0.5;          // used in infer mode
    bool train = false;
    Real temperature = 1.0;    // Gumbel softmax temperature (train)
    bool gumbel_noise = true;  // disable for gradient checking
    bool hard_st = true;       // false = blend by the soft prob (smooth, for grad checks)
    Rng* rng = nullptr;        // noise source, required when noise is on
};

// Content/task-aware spatial attention over q x q patches. A learned router
// splits patches into a self-attention branch (overlapping tau*q windows for
// K/V) and a modulated-convolution branch. Training blends both branches with
// a straight-through hard bit; inference routes each patch to one branch.
struct CrossFeatureSpatialAttention {
    Conv2d ge1, ge2;  // degraded-image encoder: 3 -> 8 -> 8
    Conv2d mh1, mh2;  // mask head on [Z, Z_global, Z_pos]: C+10 -> 16 -> 1
    Dense wq, wk, wv;
    Var log_alpha;  // scalar, alpha = exp(log_alpha)
    Dense weasy;
    DwConv dweasy;
    Dense wout;
    int c = 0, q = 8, window = 12, kernel = 3;
    Real tau = 1.5;

    CrossFeatureSpatialAttention() = default;
    CrossFeatureSpatialAttention(ParamRegistry& reg, const std::string& prefix, int c, int q,
                                 Real tau, int kernel, Rng& rng, bool zero_out);

    // Router logits, one per patch: [B, P].
    Var route_logits(const Var& z, const Var& id_resized) const;

    // Attention branch on gathered patches: q_patches [B,n,q*q,C] with matching
    // K/V windows [B,n,window*window,C] -> [B,n,q*q,C].
    Var attn_core(const Var& q_patches, const Var& k_windows, const Var& v_windows) const;

    // Convolution branch on projected patches [B,n,q*q,C] -> same shape.
    Var conv_branch(const Var& v_easy_patches) const;

    struct Result {
        Var out;
        Var gamma_var;  // defined in train mode only; scalar mean of hard bits
        RouterDecision decision;
    };

    // id_full is the degraded network input [B,H0,W0,3]; it is resized to Z's
    // resolution internally when shapes differ.
    Result forward(const Var& z, const Var& id_full, const SpatialForwardOptions& opt) const;
};

}  // namespace catair
