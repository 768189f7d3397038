#include "catair/spatial_blocks.hpp"

#include <algorithm>
#include <cmath>

namespace catair {

Tensor positional_grid(int h, int w) {
    Tensor g({h, w, 2});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            g.at(y, x, 0) = Real(2) * y / h - 1;
            g.at(y, x, 1) = Real(2) * x / w - 1;
        }
    return g;
}

void topk_partition(const std::vector<Real>& logits, Real gamma,
                    std::vector<int>& idx_hard, std::vector<int>& idx_easy) {
    const int p = static_cast<int>(logits.size());
    if (gamma < 0 || gamma > 1) throw ConfigError("gamma must lie in [0,1]");
    int k = static_cast<int>(std::lround(gamma * p));
    k = std::clamp(k, 0, p);
    std::vector<int> order(static_cast<size_t>(p));
    for (int i = 0; i < p; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)]; });
    idx_hard.assign(order.begin(), order.begin() + k);
    idx_easy.assign(order.begin() + k, order.end());
    std::sort(idx_hard.begin(), idx_hard.end());
    std::sort(idx_easy.begin(), idx_easy.end());
}

CrossFeatureSpatialAttention::CrossFeatureSpatialAttention(ParamRegistry& reg,
                                                           const std::string& prefix, int c_,
                                                           int q_, Real tau_, int kernel_,
                                                           Rng& rng, bool zero_out)
    : c(c_), q(q_), kernel(kernel_), tau(tau_) {
    const Real wf = tau * q;
    window = static_cast<int>(std::lround(wf));
    if (tau < 1 || std::abs(wf - window) > 1e-9)
        throw ConfigError("overlap window tau*q must be a positive integer, got tau=" +
                          std::to_string(tau) + " q=" + std::to_string(q));
    ge1 = Conv2d(reg, prefix + ".ge1", 3, 8, 3, rng);
    ge2 = Conv2d(reg, prefix + ".ge2", 8, 8, 3, rng);
    mh1 = Conv2d(reg, prefix + ".mh1", c + 10, 16, 3, rng);
    mh2 = Conv2d(reg, prefix + ".mh2", 16, 1, 3, rng);
    wq = Dense(reg, prefix + ".wq", c, c, rng);
    wk = Dense(reg, prefix + ".wk", c, c, rng);
    wv = Dense(reg, prefix + ".wv", c, c, rng);
    log_alpha = reg.add(prefix + ".logalpha", Tensor({1}));
    weasy = Dense(reg, prefix + ".weasy", c, c, rng);
    dweasy = DwConv(reg, prefix + ".dweasy", c, kernel, rng);
    wout = Dense(reg, prefix + ".wout", c, c, rng, zero_out);
}

Var CrossFeatureSpatialAttention::route_logits(const Var& z, const Var& id_resized) const {
    const auto& s = z.val().shape();
    const int b = s[0], h = s[1], w = s[2];
    Var zg = ge2(gelu(ge1(id_resized)));
    Tensor pos({b, h, w, 2});
    const Tensor grid = positional_grid(h, w);
    for (int bi = 0; bi < b; ++bi)
        std::copy(grid.data(), grid.data() + grid.numel(),
                  pos.data() + static_cast<size_t>(bi) * grid.numel());
    Var m = mh2(gelu(mh1(concat_channels({z, zg, Var(pos)}))));
    Var pooled = avgpool_tiles(m, q);  // [B, H/q, W/q, 1]
    return reshape(pooled, {b, (h / q) * (w / q)});
}

Var CrossFeatureSpatialAttention::attn_core(const Var& q_patches, const Var& k_windows,
                                            const Var& v_windows) const {
    const auto& s = q_patches.val().shape();
    const int b = s[0], n = s[1], qq = s[2], ch = s[3];
    const int ww = k_windows.val().dim(2);
    Var qf = reshape(q_patches, {b * n, qq, ch});
    Var kf = reshape(k_windows, {b * n, ww, ch});
    Var vf = reshape(v_windows, {b * n, ww, ch});
    Var inv_alpha = exp_op(neg(log_alpha));
    Var logits = scale_per_head(bmm(qf, transpose_last2(kf)), inv_alpha, 1);
    Var attn = softmax_lastdim(logits);  // [B*n, q*q, ww] rows over key tokens
    return reshape(bmm(attn, vf), {b, n, qq, ch});
}

Var CrossFeatureSpatialAttention::conv_branch(const Var& v_easy_patches) const {
    const auto& s = v_easy_patches.val().shape();
    const int b = s[0], n = s[1], ch = s[3];
    // Each patch is convolved independently: zero padding applies at patch
    // borders, so a patch behaves like a tiny standalone image.
    Var grid = reshape(v_easy_patches, {b * n, q, q, ch});
    Var mod = mul(grid, dwconv(grid, dweasy.w, dweasy.b));
    return reshape(mod, {b, n, q * q, ch});
}

CrossFeatureSpatialAttention::Result CrossFeatureSpatialAttention::forward(
    const Var& z, const Var& id_full, const SpatialForwardOptions& opt) const {
    const auto& s = z.val().shape();
    const int b = s[0], h = s[1], w = s[2];
    if (h % q || w % q)
        throw ConfigError("feature map " + z.val().shape_str() + " not divisible by window " +
                          std::to_string(q));
    const int hq = h / q, wq_ = w / q, p = hq * wq_;

    Var id_resized = (id_full.val().dim(1) == h && id_full.val().dim(2) == w)
                         ? id_full
                         : bilinear_resize(id_full, h, w);
    Var logits = route_logits(z, id_resized);  // [B, P]

    // Branch inputs are projected on the full map, then gathered, so the two
    // routing modes see bit-identical per-patch arithmetic.
    Var q_patches = map_to_patches(wq(z), q);
    Var k_windows = extract_windows(wk(z), q, window);
    Var v_windows = extract_windows(wv(z), q, window);
    Var easy_patches = map_to_patches(weasy(z), q);

    Result res;
    res.decision.train_mode = opt.train;

    Var recombined;  // [B, P, q*q, C]
    if (opt.train) {
        Tensor noise({b, p});
        if (opt.gumbel_noise) {
            if (!opt.rng) throw ConfigError("train-mode routing with noise needs an rng");
            for (int i = 0; i < noise.numel(); ++i) {
                const Real g1 = opt.rng->gumbel();
                const Real g2 = opt.rng->gumbel();
                noise[i] = g1 - g2;
            }
        }
        if (opt.temperature <= 0) throw ConfigError("gumbel temperature must be positive");
        Var soft = sigmoid(mul_scalar(add(logits, Var(noise)), Real(1) / opt.temperature));
        Var blend = opt.hard_st ? hard_threshold_st(soft) : soft;
        Var attn_all = attn_core(q_patches, k_windows, v_windows);
        Var conv_all = conv_branch(easy_patches);
        recombined = add(broadcast_mul_patch(blend, attn_all),
                         broadcast_mul_patch(rsub_scalar(1, blend), conv_all));
        res.gamma_var = mean_all(blend);
        res.decision.gamma_j = res.gamma_var.val()[0];
        res.decision.hard_prob = Tensor({hq, wq_});
        for (int i = 0; i < p; ++i) res.decision.hard_prob[i] = soft.val().at(0, i);
        for (int i = 0; i < p; ++i)
            (soft.val().at(0, i) > Real(0.5) ? res.decision.idx_hard : res.decision.idx_easy)
                .push_back(i);
    } else {
        std::vector<Real> lrow(static_cast<size_t>(p));
        std::vector<Var> per_image;
        Real hard_total = 0;
        for (int bi = 0; bi < b; ++bi) {
            for (int i = 0; i < p; ++i) lrow[static_cast<size_t>(i)] = logits.val().at(bi, i);
            std::vector<int> ih, ie;
            topk_partition(lrow, opt.gamma, ih, ie);
            hard_total += static_cast<Real>(ih.size());
            auto batch_of = [bi](const Var& x) { return slice_batch(x, bi, bi + 1); };
            Var hard_out, easy_out;
            if (!ih.empty())
                hard_out = attn_core(gather_dim1(batch_of(q_patches), ih),
                                     gather_dim1(batch_of(k_windows), ih),
                                     gather_dim1(batch_of(v_windows), ih));
            if (!ie.empty())
                easy_out = conv_branch(gather_dim1(batch_of(easy_patches), ie));
            per_image.push_back(scatter_merge_dim1(p, ih, hard_out, ie, easy_out));
            if (bi == 0) {
                res.decision.idx_hard = ih;
                res.decision.idx_easy = ie;
            }
        }
        recombined = per_image.size() == 1 ? per_image[0] : concat_dim0(per_image);
        res.decision.gamma_j = hard_total / (static_cast<Real>(b) * p);
        res.decision.hard_prob = Tensor({hq, wq_});
        for (int i : res.decision.idx_hard) res.decision.hard_prob[i] = 1;
    }

    res.decision.logits = Tensor({hq, wq_});
    for (int i = 0; i < p; ++i) res.decision.logits[i] = logits.val().at(0, i);

    Var merged = patches_to_map(recombined, h, w, q);
    res.out = add(wout(merged), z);
    return res;
}

}  // namespace catair
