#pragma once

#include "catair/nn.hpp"

namespace catair {

// Gated squeeze-excite channel attention used at the three shallow levels.
// Pipeline: LN -> 1x1 conv (C->C) -> 3x3 depthwise -> gate by multiplying the
// two channel halves (C/2) -> scale by an excitation of the gated map's GAP ->
// 1x1 conv back to C -> residual add.
struct SeChannelAttention {
    LayerNorm ln;
    Dense pw;
    DwConv dw;
    Dense se;   // excitation C/2 -> C/2 on GAP of the gated map
    Dense out;  // C/2 -> C

    SeChannelAttention() = default;
    SeChannelAttention(ParamRegistry& reg, const std::string& prefix, int c, Rng& rng,
                       bool zero_out);

    Var operator()(const Var& z) const;
};

// Transposed C x C channel self-attention for the bottleneck level.
// Q,K,V are depthwise-over-pointwise projections of LN(Z); attention operates
// on the channel axis: A = softmax_j((Q^T K / alpha)[i,j]), out = V * A.
// alpha is stored as exp(log_alpha) per head so positivity always holds.
struct TransposedChannelAttention {
    LayerNorm ln;
    Dense pwq, pwk, pwv;
    DwConv dwq, dwk, dwv;
    Var log_alpha;  // [heads]
    Dense out;
    int heads = 1;

    TransposedChannelAttention() = default;
    TransposedChannelAttention(ParamRegistry& reg, const std::string& prefix, int c, int heads,
                               Rng& rng, bool zero_out);

    // Pre-output-projection attention mix, exposed for inspection.
    Var attention_mix(const Var& z) const;
    Var operator()(const Var& z) const;
};

// Gated feed-forward: LN -> 1x1 expand C->2C -> 3x3 depthwise -> gate halves
// -> 1x1 contract C->C -> residual add.
struct GatedFfn {
    LayerNorm ln;
    Dense expand;
    DwConv dw;
    Dense contract;

    GatedFfn() = default;
    GatedFfn(ParamRegistry& reg, const std::string& prefix, int c, Rng& rng, bool zero_out);

    Var operator()(const Var& z) const;
};

enum class ChannelVariant { se, transposed };

// Levels 1-3 use the gated SE block, the bottleneck (level 4) uses transposed
// channel self-attention. Encoder and decoder sides share the policy.
ChannelVariant select_channel_variant(int level);

}  // namespace catair
