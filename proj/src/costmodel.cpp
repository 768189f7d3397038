#include "catair/costmodel.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <numeric>

#include "json.hpp"

#include "catair/checkpoint.hpp"
#include "catair/metrics.hpp"

namespace catair {

using nlohmann::json;

namespace {

std::int64_t checked(__int128 v) {
    if (v > std::numeric_limits<std::int64_t>::max() ||
        v < std::numeric_limits<std::int64_t>::min())
        throw ConfigError("rational overflow in flops computation");
    return static_cast<std::int64_t>(v);
}

}  // namespace

Rational::Rational(std::int64_t n, std::int64_t d) : num(n), den(d) {
    if (den == 0) throw ConfigError("rational with zero denominator");
    if (den < 0) {
        num = -num;
        den = -den;
    }
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
        num /= g;
        den /= g;
    }
}

Rational Rational::from_real(Real x, std::int64_t max_den) {
    if (!std::isfinite(x)) throw ConfigError("cannot convert non-finite value to rational");
    // Continued-fraction expansion; exact for the short decimals used here.
    const bool neg = x < 0;
    Real r = neg ? -x : x;
    std::int64_t p0 = 0, q0 = 1, p1 = 1, q1 = 0;
    for (int it = 0; it < 64; ++it) {
        const Real fl = std::floor(r);
        if (fl > 1e18) throw ConfigError("value too large for rational conversion");
        const std::int64_t a = static_cast<std::int64_t>(fl);
        const std::int64_t p2 = checked(static_cast<__int128>(a) * p1 + p0);
        const std::int64_t q2 = checked(static_cast<__int128>(a) * q1 + q0);
        if (q2 > max_den) break;
        p0 = p1;
        q0 = q1;
        p1 = p2;
        q1 = q2;
        if (std::abs(static_cast<Real>(p1) / q1 - r) < 1e-12 * std::max(Real(1), r)) break;
        const Real frac = r - fl;
        if (frac < 1e-15) break;
        r = 1 / frac;
    }
    return Rational(neg ? -p1 : p1, q1);
}

Rational Rational::operator+(const Rational& o) const {
    const std::int64_t g = std::gcd(den, o.den);
    const std::int64_t l = checked(static_cast<__int128>(den / g) * o.den);
    const __int128 n =
        static_cast<__int128>(num) * (o.den / g) + static_cast<__int128>(o.num) * (den / g);
    return Rational(checked(n), l);
}

Rational Rational::operator-(const Rational& o) const {
    return *this + Rational(-o.num, o.den);
}

Rational Rational::operator*(const Rational& o) const {
    // Cross-reduce before multiplying to keep intermediates small.
    const std::int64_t g1 = std::gcd(num < 0 ? -num : num, o.den);
    const std::int64_t g2 = std::gcd(o.num < 0 ? -o.num : o.num, den);
    const __int128 n = static_cast<__int128>(num / g1) * (o.num / g2);
    const __int128 d = static_cast<__int128>(den / g2) * (o.den / g1);
    return Rational(checked(n), checked(d));
}

Rational Rational::operator/(const Rational& o) const {
    if (o.num == 0) throw ConfigError("rational division by zero");
    return *this * Rational(o.den, o.num);
}

bool Rational::operator<(const Rational& o) const {
    return static_cast<__int128>(num) * o.den < static_cast<__int128>(o.num) * den;
}

std::string Rational::str() const {
    if (den == 1) return std::to_string(num);
    return std::to_string(num) + "/" + std::to_string(den);
}

// ---- Formula mode. ----

namespace {

Rational hw_r(std::int64_t h, std::int64_t w) {
    if (h < 1 || w < 1) throw ConfigError("flops: dimensions must be positive");
    return Rational(checked(static_cast<__int128>(h) * w));
}

Rational se_per_pixel(std::int64_t c) { return Rational(3 * c * c + 16 * c); }
Rational bottleneck_per_pixel(std::int64_t c) { return Rational(10 * c * c + 46 * c); }

Rational spatial_attn_per_pixel(std::int64_t c, Rational tau, std::int64_t q) {
    // 3C^2 + 2 tau^2 q^2 C
    return Rational(3 * c * c) + Rational(2) * tau * tau * Rational(q * q * c);
}

Rational spatial_mixed_per_pixel(std::int64_t c, Rational tau, std::int64_t q, Rational gamma,
                                 std::int64_t k) {
    const Rational attn = spatial_attn_per_pixel(c, tau, q);
    const Rational conv(2 * k * k * c);
    return Rational(4 * c) + gamma * attn + (Rational(1) - gamma) * conv;
}

void check_gamma(const Rational& gamma) {
    if (gamma < Rational(0) || Rational(1) < gamma)
        throw ConfigError("gamma must lie in [0,1]");
}

}  // namespace

Rational flops_se(std::int64_t h, std::int64_t w, std::int64_t c) {
    if (c < 1) throw ConfigError("flops: channels must be positive");
    return hw_r(h, w) * se_per_pixel(c);
}

Rational flops_bottleneck(std::int64_t h, std::int64_t w, std::int64_t c) {
    if (c < 1) throw ConfigError("flops: channels must be positive");
    return hw_r(h, w) * bottleneck_per_pixel(c);
}

CrossLayerFlops flops_cross_layer(std::int64_t h, std::int64_t w, std::int64_t c) {
    const Rational hw = hw_r(h, w);
    CrossLayerFlops out;
    out.mixed = Rational(13, 2) * hw * se_per_pixel(c) +
                Rational(1, 16) * hw * bottleneck_per_pixel(c);
    out.all_complex = (Rational(13, 2) + Rational(1, 16)) * hw * bottleneck_per_pixel(c);
    return out;
}

SpatialFlops flops_spatial(std::int64_t h, std::int64_t w, std::int64_t c, Rational tau,
                           std::int64_t q, Rational gamma, std::int64_t k) {
    if (c < 1 || q < 1 || k < 1) throw ConfigError("flops: parameters must be positive");
    check_gamma(gamma);
    const Rational hw = hw_r(h, w);
    SpatialFlops out;
    out.mixed = hw * spatial_mixed_per_pixel(c, tau, q, gamma, k);
    out.attention_only = hw * spatial_attn_per_pixel(c, tau, q);
    return out;
}

CrossLayerWeights layer_weights(const ModelConfig& cfg) {
    cfg.validate();
    CrossLayerWeights w;
    std::int64_t denom = 1;
    for (int level = 1; level <= 3; ++level) {
        // dec_blocks is listed in decoding order: level 3 first.
        const std::int64_t blocks = cfg.enc_blocks[level - 1] + cfg.dec_blocks[3 - level];
        w.se += Rational(blocks, denom);
        denom *= 4;
    }
    w.bottleneck = Rational(cfg.enc_blocks[3], 64);
    return w;
}

Rational formula_total(const ModelConfig& cfg, std::int64_t h, std::int64_t w, Rational gamma) {
    cfg.validate();
    check_gamma(gamma);
    const Rational hw = hw_r(h, w);
    const std::int64_t c = cfg.base_channels;
    const Rational tau = Rational::from_real(cfg.tau);
    const CrossLayerWeights cw = layer_weights(cfg);
    Rational total = cw.se * hw * se_per_pixel(c) + cw.bottleneck * hw * bottleneck_per_pixel(c);
    std::int64_t denom = 1;
    for (int level = 1; level <= 4; ++level) {
        const std::int64_t blocks =
            cfg.enc_blocks[level - 1] + (level < 4 ? cfg.dec_blocks[3 - level] : 0);
        total += Rational(blocks, denom) * hw *
                 spatial_mixed_per_pixel(c, tau, cfg.q, gamma, cfg.kernel);
        denom *= 4;
    }
    return total;
}

// ---- Exact mode unit builders. ----

namespace {

// Bias-free k x k convolution, cin -> cout, over n pixels.
FlopsUnit conv_unit(const std::string& id, const std::string& kind, Rational n,
                    std::int64_t cin, std::int64_t cout, std::int64_t k) {
    const std::int64_t taps = k * k * cin;
    return {id, kind, n * Rational(taps * cout), n * Rational((taps - 1) * cout)};
}

// Dense layer with bias applied n times: per output, `in` mults and `in` adds.
FlopsUnit dense_unit(const std::string& id, const std::string& kind, Rational n,
                     std::int64_t in, std::int64_t out) {
    return {id, kind, n * Rational(in * out), n * Rational(in * out)};
}

FlopsUnit dw_unit(const std::string& id, const std::string& kind, Rational n, std::int64_t c,
                  std::int64_t k) {
    return {id, kind, n * Rational(k * k * c), n * Rational((k * k - 1) * c)};
}

}  // namespace

std::vector<FlopsUnit> se_block_units(std::int64_t h, std::int64_t w, std::int64_t c,
                                      Convention conv) {
    const Rational hw = hw_r(h, w);
    const Rational c2(c * c);
    std::vector<FlopsUnit> u;
    u.push_back({"pw_in", "channel_attn", hw * c2, hw * Rational(c * c - c)});
    u.push_back({"dw", "channel_attn", hw * Rational(9 * c), hw * Rational(8 * c)});
    u.push_back({"gate", "channel_attn", hw * Rational(c, 2), Rational(0)});
    if (conv == Convention::paper) {
        // The published table charges the squeeze path a flat HWC/2.
        u.push_back({"se_scale", "channel_attn", hw * Rational(c, 2), Rational(0)});
    } else {
        u.push_back({"se_gap", "channel_attn", Rational(c, 2),
                     (hw - Rational(1)) * Rational(c, 2)});
        u.push_back({"se_mlp", "channel_attn", Rational(c * c, 4), Rational(c * c, 4)});
        u.push_back({"se_scale", "channel_attn", hw * Rational(c, 2), Rational(0)});
    }
    u.push_back({"pw_out", "channel_attn", hw * Rational(c * c, 2),
                 hw * (Rational(c * c, 2) - Rational(c))});
    return u;
}

std::vector<FlopsUnit> bottleneck_block_units(std::int64_t h, std::int64_t w, std::int64_t c,
                                              int heads, Convention conv) {
    const Rational hw = hw_r(h, w);
    const Rational c2(c * c);
    std::vector<FlopsUnit> u;
    u.push_back({"pw_qkv", "channel_attn", hw * Rational(3 * c * c),
                 hw * Rational(3 * (c * c - c))});
    u.push_back({"dw_qkv", "channel_attn", hw * Rational(27 * c), hw * Rational(24 * c)});
    if (conv == Convention::paper) {
        // The table charges a single C x C attention product.
        u.push_back({"attention", "channel_attn", hw * c2, hw * Rational(c * c - c)});
    } else {
        const Rational ch(c, heads);  // channels per head
        const Rational c2_over_h = Rational(c * c, heads);
        u.push_back({"attn_qk", "channel_attn", hw * c2_over_h,
                     (hw - Rational(1)) * c2_over_h});
        u.push_back({"attn_scale", "channel_attn", c2_over_h, Rational(0)});
        u.push_back({"attn_av", "channel_attn", hw * c2_over_h,
                     hw * Rational(c) * (ch - Rational(1))});
    }
    u.push_back({"pw_out", "channel_attn", hw * c2, hw * Rational(c * c - c)});
    return u;
}

std::vector<FlopsUnit> spatial_block_units(std::int64_t h, std::int64_t w, std::int64_t c,
                                           Rational tau, std::int64_t q, Rational hard_frac,
                                           std::int64_t k, Convention conv) {
    check_gamma(hard_frac);
    const Rational hw = hw_r(h, w);
    std::vector<FlopsUnit> u;
    if (conv == Convention::paper) {
        // The supplement prints combined counts for this module, so the rows
        // carry totals in the mults column.
        u.push_back({"router", "spatial_attn", hw * Rational(4 * c), Rational(0)});
        u.push_back({"attention_branch", "spatial_attn",
                     hard_frac * hw * spatial_attn_per_pixel(c, tau, q), Rational(0)});
        u.push_back({"conv_branch", "spatial_attn",
                     (Rational(1) - hard_frac) * hw * Rational(2 * k * k * c), Rational(0)});
        return u;
    }
    const Rational window = tau * Rational(q);
    if (!window.is_integer()) throw ConfigError("tau * q must be an integer");
    const std::int64_t ws2 = window.num * window.num;  // tokens per attention window
    const Rational patches = hw / Rational(q * q);
    u.push_back(dense_unit("router_ge1", "spatial_attn", hw, 3, 8));
    u.push_back(dense_unit("router_ge2", "spatial_attn", hw, 8, 8));
    u.push_back(dense_unit("router_mh1", "spatial_attn", hw, c + 10, 16));
    u.push_back(dense_unit("router_mh2", "spatial_attn", hw, 16, 1));
    u.push_back({"router_pool", "spatial_attn", patches, patches * Rational(q * q - 1)});
    u.push_back(conv_unit("pw_qkv", "spatial_attn", hw * Rational(3), c, c, 1));
    u.push_back(conv_unit("pw_easy", "spatial_attn", hw, c, c, 1));
    const Rational hard_px = hard_frac * hw;
    const Rational easy_px = (Rational(1) - hard_frac) * hw;
    u.push_back({"attn_qk", "spatial_attn", hard_px * Rational(ws2 * c),
                 hard_px * Rational(ws2 * (c - 1))});
    u.push_back({"attn_scale", "spatial_attn", hard_px * Rational(ws2), Rational(0)});
    u.push_back({"attn_av", "spatial_attn", hard_px * Rational(c * ws2),
                 hard_px * Rational(c * (ws2 - 1))});
    u.push_back({"conv_dw", "spatial_attn", easy_px * Rational(k * k * c),
                 easy_px * Rational((k * k - 1) * c)});
    u.push_back({"conv_gate", "spatial_attn", easy_px * Rational(c), Rational(0)});
    u.push_back(conv_unit("pw_out", "spatial_attn", hw, c, c, 1));
    return u;
}

std::vector<FlopsUnit> ffn_block_units(std::int64_t h, std::int64_t w, std::int64_t c) {
    const Rational hw = hw_r(h, w);
    std::vector<FlopsUnit> u;
    u.push_back(conv_unit("pw_in", "ffn", hw, c, 2 * c, 1));
    u.push_back(dw_unit("dw", "ffn", hw, 2 * c, 3));
    u.push_back({"gate", "ffn", hw * Rational(c), Rational(0)});
    u.push_back(conv_unit("pw_out", "ffn", hw, c, c, 1));
    return u;
}

// ---- Exact counter over the configured architecture. ----

namespace {

void append_units(FlopsReport& report, const std::string& prefix,
                  std::vector<FlopsUnit> units) {
    for (FlopsUnit& u : units) {
        u.layer_id = prefix + "." + u.layer_id;
        report.units.push_back(std::move(u));
    }
}

std::vector<FlopsUnit> prompt_units(std::int64_t h, std::int64_t w, std::int64_t c,
                                    std::int64_t tasks) {
    const Rational hw = hw_r(h, w);
    std::vector<FlopsUnit> u;
    u.push_back({"gap", "prompt", Rational(c), (hw - Rational(1)) * Rational(c)});
    u.push_back(dense_unit("mix", "prompt", Rational(tasks), c, 1));
    u.push_back({"blend", "prompt", hw * Rational(c * tasks),
                 hw * Rational(c * (tasks - 1))});
    u.push_back(conv_unit("fuse", "prompt", hw, 2 * c, c, 3));
    return u;
}

}  // namespace

FlopsReport count_exact(const ModelConfig& cfg, std::int64_t h, std::int64_t w, Real gamma,
                        const ExactOptions& opt) {
    cfg.validate();
    cfg.check_input_dims(static_cast<int>(h), static_cast<int>(w));
    if (gamma < 0 || gamma > 1) throw ConfigError("gamma must lie in [0,1]");

    FlopsReport report;
    report.mode = "exact";
    report.convention = opt.convention == Convention::paper ? "paper" : "strict";
    report.channel_schedule =
        opt.schedule == ChannelSchedule::constant_c ? "constant_c" : "true_channels";
    report.assumptions = {
        "one multiply = one add = 1 FLOP",
        "layer norms, softmax, gating nonlinearities and resampling excluded",
        opt.schedule == ChannelSchedule::constant_c
            ? "channel width held at base C on every level (published aggregation)"
            : "channel width doubles per level (instantiated network)",
        opt.convention == Convention::paper
            ? "attention modules charged per the published tables"
            : "attention modules charged for every executed product",
    };

    const Rational tau = Rational::from_real(cfg.tau);
    auto level_h = [&](int level) { return h >> (level - 1); };
    auto level_w = [&](int level) { return w >> (level - 1); };
    auto level_c = [&](int level) {
        return opt.schedule == ChannelSchedule::constant_c
                   ? static_cast<std::int64_t>(cfg.base_channels)
                   : static_cast<std::int64_t>(cfg.level_channels(level));
    };
    auto hard_fraction = [&](int level) {
        const std::int64_t patches =
            (level_h(level) / cfg.q) * (level_w(level) / cfg.q);
        const std::int64_t n_hard = std::lround(gamma * static_cast<Real>(patches));
        return Rational(n_hard, patches);
    };
    auto block_units = [&](const std::string& prefix, int level) {
        const std::int64_t lh = level_h(level), lw = level_w(level), lc = level_c(level);
        if (level == 4)
            append_units(report, prefix + ".chan",
                         bottleneck_block_units(lh, lw, lc, cfg.heads, opt.convention));
        else
            append_units(report, prefix + ".chan", se_block_units(lh, lw, lc, opt.convention));
        append_units(report, prefix + ".ffn1", ffn_block_units(lh, lw, lc));
        append_units(report, prefix + ".spat",
                     spatial_block_units(lh, lw, lc, tau, cfg.q, hard_fraction(level),
                                         cfg.kernel, opt.convention));
        append_units(report, prefix + ".ffn2", ffn_block_units(lh, lw, lc));
    };

    report.units.push_back(conv_unit("shallow", "conv", hw_r(h, w), 3, level_c(1), 3));
    for (int level = 1; level <= 4; ++level) {
        for (int b = 0; b < cfg.enc_blocks[level - 1]; ++b)
            block_units("enc" + std::to_string(level) + ".block" + std::to_string(b), level);
        if (level < 4)
            report.units.push_back(conv_unit(
                "down" + std::to_string(level), "conv", hw_r(level_h(level + 1), level_w(level + 1)),
                4 * level_c(level), 2 * level_c(level), 1));
    }
    for (int level = 3; level >= 1; --level) {
        const std::int64_t lc = level_c(level);
        report.units.push_back(conv_unit("up" + std::to_string(level), "conv",
                                         hw_r(level_h(level + 1), level_w(level + 1)),
                                         2 * lc, 4 * lc, 1));
        report.units.push_back(conv_unit("fuse" + std::to_string(level), "conv",
                                         hw_r(level_h(level), level_w(level)), 2 * lc, lc, 1));
        append_units(report, "prompt" + std::to_string(level),
                     prompt_units(level_h(level), level_w(level), lc, cfg.task_count));
        for (int b = 0; b < cfg.dec_blocks[3 - level]; ++b)
            block_units("dec" + std::to_string(level) + ".block" + std::to_string(b), level);
    }
    report.units.push_back(conv_unit("out", "conv", hw_r(h, w), level_c(1), 3, 3));
    report.units.push_back({"residual", "conv", Rational(0), hw_r(h, w) * Rational(3)});

    for (const FlopsUnit& u : report.units) {
        report.total_mults += u.mults;
        report.total_adds += u.adds;
        report.kind_totals[u.kind] += u.flops();
    }
    return report;
}

// ---- Serialization. ----

namespace {

std::string real_str(Real v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string rational_csv(const Rational& r) {
    if (r.is_integer()) return std::to_string(r.num);
    return real_str(r.to_real());
}

json unit_json(const FlopsUnit& u) {
    return {{"layer_id", u.layer_id},
            {"kind", u.kind},
            {"mults", u.mults.str()},
            {"adds", u.adds.str()},
            {"flops", u.flops().str()}};
}

}  // namespace

std::string FlopsReport::to_json() const {
    json j;
    j["mode"] = mode;
    j["convention"] = convention;
    j["channel_schedule"] = channel_schedule;
    j["assumptions"] = assumptions;
    j["total_mults"] = total_mults.str();
    j["total_adds"] = total_adds.str();
    j["total_flops"] = total().str();
    j["total_flops_real"] = total().to_real();
    json kinds = json::object();
    for (const auto& [kind, flops] : kind_totals) kinds[kind] = flops.str();
    j["kind_totals"] = kinds;
    json units_j = json::array();
    for (const FlopsUnit& u : units) units_j.push_back(unit_json(u));
    j["units"] = units_j;
    return j.dump(2);
}

std::string SweepResult::to_csv() const {
    std::string out = "param,formula_flops,exact_flops";
    if (has_psnr) out += ",psnr";
    out += "\n";
    for (const SweepRow& r : rows) {
        out += real_str(r.value) + "," + rational_csv(r.formula) + "," + rational_csv(r.exact);
        if (has_psnr) out += "," + (std::isinf(r.psnr) ? std::string("inf") : real_str(r.psnr));
        out += "\n";
    }
    return out;
}

std::string SweepResult::to_json() const {
    json rows_j = json::array();
    for (const SweepRow& r : rows) {
        json row = {{"value", r.value},
                    {"formula_flops", r.formula.to_real()},
                    {"formula_flops_exact", r.formula.str()},
                    {"exact_flops", r.exact.to_real()},
                    {"exact_flops_exact", r.exact.str()}};
        if (has_psnr) {
            if (std::isinf(r.psnr))
                row["psnr"] = "inf";
            else
                row["psnr"] = r.psnr;
        }
        rows_j.push_back(row);
    }
    return json{{"param", param}, {"rows", rows_j}}.dump(2);
}

SweepResult sweep(const SweepRequest& req) {
    if (req.values.empty()) throw ConfigError("sweep: empty parameter range");
    if (req.param != "gamma" && req.param != "tau" && req.param != "q" && req.param != "C")
        throw ConfigError("sweep: unknown parameter '" + req.param + "' (gamma|tau|q|C)");
    const bool want_psnr = !req.checkpoint_dir.empty() || !req.dataset_dir.empty();
    if (want_psnr && (req.checkpoint_dir.empty() || req.dataset_dir.empty()))
        throw ConfigError("sweep: PSNR column needs both a checkpoint and a dataset");
    if (want_psnr && req.param != "gamma")
        throw ConfigError("sweep: PSNR column is only meaningful for gamma sweeps");

    SweepResult res;
    res.param = req.param;
    res.has_psnr = want_psnr;

    std::unique_ptr<CatAIRModel> model;
    if (want_psnr) model = std::make_unique<CatAIRModel>(load_checkpoint(req.checkpoint_dir));

    for (Real v : req.values) {
        ModelConfig cfg = req.cfg;
        Real gamma = req.gamma;
        if (req.param == "gamma") {
            gamma = v;
        } else if (req.param == "tau") {
            cfg.tau = v;
        } else {
            if (v != std::floor(v) || v < 1)
                throw ConfigError("sweep: " + req.param + " values must be positive integers");
            if (req.param == "q")
                cfg.q = static_cast<int>(v);
            else
                cfg.base_channels = static_cast<int>(v);
        }
        SweepRow row;
        row.value = v;
        row.formula = formula_total(cfg, req.h, req.w, Rational::from_real(gamma));
        row.exact = count_exact(cfg, req.h, req.w, gamma).total();
        if (want_psnr)
            row.psnr = evaluate(*model, req.dataset_dir, gamma).overall.psnr_mean();
        res.rows.push_back(row);
    }
    return res;
}

}  // namespace catair
