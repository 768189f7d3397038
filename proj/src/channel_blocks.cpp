#include "catair/channel_blocks.hpp"

namespace catair {

SeChannelAttention::SeChannelAttention(ParamRegistry& reg, const std::string& prefix, int c,
                                       Rng& rng, bool zero_out) {
    if (c < 2 || c % 2) throw ConfigError("SE channel attention needs even C >= 2, got " +
                                          std::to_string(c));
    ln = LayerNorm(reg, prefix + ".ln", c);
    pw = Dense(reg, prefix + ".pw", c, c, rng);
    dw = DwConv(reg, prefix + ".dw", c, 3, rng);
    se = Dense(reg, prefix + ".se", c / 2, c / 2, rng);
    out = Dense(reg, prefix + ".out", c / 2, c, rng, zero_out);
}

Var SeChannelAttention::operator()(const Var& z) const {
    const int c = z.val().shape().back();
    Var v = dw(pw(ln(z)));
    Var gate = mul(slice_channels(v, 0, c / 2), slice_channels(v, c / 2, c));
    Var s = se(gap_hw(gate));
    Var scaled = scale_channels(gate, s);
    return add(out(scaled), z);
}

TransposedChannelAttention::TransposedChannelAttention(ParamRegistry& reg,
                                                       const std::string& prefix, int c,
                                                       int heads_, Rng& rng, bool zero_out)
    : heads(heads_) {
    if (heads < 1 || c % heads)
        throw ConfigError("attention heads must divide channels: C=" + std::to_string(c) +
                          " heads=" + std::to_string(heads));
    ln = LayerNorm(reg, prefix + ".ln", c);
    pwq = Dense(reg, prefix + ".pwq", c, c, rng);
    pwk = Dense(reg, prefix + ".pwk", c, c, rng);
    pwv = Dense(reg, prefix + ".pwv", c, c, rng);
    dwq = DwConv(reg, prefix + ".dwq", c, 3, rng);
    dwk = DwConv(reg, prefix + ".dwk", c, 3, rng);
    dwv = DwConv(reg, prefix + ".dwv", c, 3, rng);
    log_alpha = reg.add(prefix + ".logalpha", Tensor({heads}));  // alpha = exp(0) = 1
    out = Dense(reg, prefix + ".out", c, c, rng, zero_out);
}

Var TransposedChannelAttention::attention_mix(const Var& z) const {
    const auto& s = z.val().shape();
    const int b = s[0], h = s[1], w = s[2], c = s[3];
    Var n = ln(z);
    auto tokens = [&](const Var& x) { return split_heads(reshape(x, {b, h * w, c}), heads); };
    Var qh = tokens(dwq(pwq(n)));
    Var kh = tokens(dwk(pwk(n)));
    Var vh = tokens(dwv(pwv(n)));
    Var inv_alpha = exp_op(neg(log_alpha));
    Var logits = scale_per_head(bmm(transpose_last2(qh), kh), inv_alpha, heads);
    Var attn = softmax_lastdim(logits);          // [B*h, C/h, C/h], rows over key channels
    Var mixed = merge_heads(bmm(vh, attn), heads);
    return reshape(mixed, {b, h, w, c});
}

Var TransposedChannelAttention::operator()(const Var& z) const {
    return add(out(attention_mix(z)), z);
}

GatedFfn::GatedFfn(ParamRegistry& reg, const std::string& prefix, int c, Rng& rng,
                   bool zero_out) {
    ln = LayerNorm(reg, prefix + ".ln", c);
    expand = Dense(reg, prefix + ".expand", c, 2 * c, rng);
    dw = DwConv(reg, prefix + ".dw", 2 * c, 3, rng);
    contract = Dense(reg, prefix + ".contract", c, c, rng, zero_out);
}

Var GatedFfn::operator()(const Var& z) const {
    const int c = z.val().shape().back();
    Var v = dw(expand(ln(z)));
    Var gate = mul(slice_channels(v, 0, c), slice_channels(v, c, 2 * c));
    return add(contract(gate), z);
}

ChannelVariant select_channel_variant(int level) {
    if (level < 1 || level > 4)
        throw ConfigError("level out of range: " + std::to_string(level));
    return level == 4 ? ChannelVariant::transposed : ChannelVariant::se;
}

}  // namespace catair
