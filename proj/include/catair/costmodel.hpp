#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "catair/backbone.hpp"

namespace catair {

// Exact fraction arithmetic so the closed-form totals carry no float drift.
struct Rational {
    std::int64_t num = 0;
    std::int64_t den = 1;  // always > 0, gcd(|num|, den) == 1

    Rational() = default;
    Rational(std::int64_t n) : num(n) {}
    Rational(std::int64_t n, std::int64_t d);

    static Rational from_real(Real x, std::int64_t max_den = 1000000);

    Rational operator+(const Rational& o) const;
    Rational operator-(const Rational& o) const;
    Rational operator*(const Rational& o) const;
    Rational operator/(const Rational& o) const;
    Rational& operator+=(const Rational& o) { return *this = *this + o; }
    bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
    bool operator!=(const Rational& o) const { return !(*this == o); }
    bool operator<(const Rational& o) const;
    bool operator>(const Rational& o) const { return o < *this; }

    bool is_integer() const { return den == 1; }
    Real to_real() const { return static_cast<Real>(num) / static_cast<Real>(den); }
    std::string str() const;  // "51498" or "975/2"
};

// ---- Formula mode: the printed closed forms, evaluated exactly. ----

// Shallow SE channel attention block: HW(3C^2 + 16C).
Rational flops_se(std::int64_t h, std::int64_t w, std::int64_t c);

// Bottleneck transposed self-attention block: HW(10C^2 + 46C).
Rational flops_bottleneck(std::int64_t h, std::int64_t w, std::int64_t c);

struct CrossLayerFlops {
    Rational mixed;        // (13/2)HW(3C^2+16C) + (1/16)HW(10C^2+46C)
    Rational all_complex;  // (13/2 + 1/16)HW(10C^2+46C)
};
CrossLayerFlops flops_cross_layer(std::int64_t h, std::int64_t w, std::int64_t c);

struct SpatialFlops {
    Rational mixed;           // HW(4C + (3C^2+2tau^2 q^2 C)gamma + 2k^2 C(1-gamma))
    Rational attention_only;  // HW(3C^2 + 2 tau^2 q^2 C)
};
SpatialFlops flops_spatial(std::int64_t h, std::int64_t w, std::int64_t c, Rational tau,
                           std::int64_t q, Rational gamma, std::int64_t k);

// Per-level aggregation weights implied by the block schedule: each level-l
// unit runs at (1/4)^(l-1) of the input pixels. For blocks [2,4,4,4]/[4,4,2]
// the shallow weight is 13/2 and the bottleneck weight 1/16.
struct CrossLayerWeights {
    Rational se;          // sum over levels 1..3 of (enc+dec blocks) * 4^(1-l)
    Rational bottleneck;  // enc level-4 blocks * 4^(-3)
};
CrossLayerWeights layer_weights(const ModelConfig& cfg);

// Full-model analytical total under the aggregation's assumptions: constant
// channel width C across levels, attention modules only.
Rational formula_total(const ModelConfig& cfg, std::int64_t h, std::int64_t w, Rational gamma);

// ---- Exact mode: counted multiplies/adds over the instantiated network. ----

struct FlopsUnit {
    std::string layer_id;
    std::string kind;  // channel_attn | spatial_attn | ffn | conv | prompt
    Rational mults, adds;
    Rational flops() const { return mults + adds; }
};

// paper: the published accounting verbatim, including its known shortcuts
//   (SE squeeze path amortized to HWC/2; spatial conv branch charged 2k^2C
//   with the easy-path linear map omitted; one attention product per block).
// strict: counts what the layers actually execute (both attention products,
//   the squeeze MLP, full-map q/k/v/easy/out projections, the real router).
enum class Convention { paper, strict };
enum class ChannelSchedule { true_channels, constant_c };

std::vector<FlopsUnit> se_block_units(std::int64_t h, std::int64_t w, std::int64_t c,
                                      Convention conv);
std::vector<FlopsUnit> bottleneck_block_units(std::int64_t h, std::int64_t w, std::int64_t c,
                                              int heads, Convention conv);
std::vector<FlopsUnit> spatial_block_units(std::int64_t h, std::int64_t w, std::int64_t c,
                                           Rational tau, std::int64_t q, Rational hard_frac,
                                           std::int64_t k, Convention conv);
std::vector<FlopsUnit> ffn_block_units(std::int64_t h, std::int64_t w, std::int64_t c);

struct FlopsReport {
    std::vector<FlopsUnit> units;
    Rational total_mults, total_adds;
    std::map<std::string, Rational> kind_totals;
    std::string mode;              // "formula" | "exact"
    std::string convention;        // "paper" | "strict"
    std::string channel_schedule;  // "true_channels" | "constant_c"
    std::vector<std::string> assumptions;

    Rational total() const { return total_mults + total_adds; }
    std::string to_json() const;
};

struct ExactOptions {
    Convention convention = Convention::paper;
    ChannelSchedule schedule = ChannelSchedule::true_channels;
};

// Walks the configured network layer by layer at input resolution h x w.
// Routing uses the realized per-level hard counts round(gamma * patches),
// exactly as inference selects them.
FlopsReport count_exact(const ModelConfig& cfg, std::int64_t h, std::int64_t w, Real gamma,
                        const ExactOptions& opt = {});

// ---- Sweeps. ----

struct SweepRequest {
    std::string param;  // gamma | tau | q | C
    std::vector<Real> values;
    ModelConfig cfg;
    std::int64_t h = 128, w = 128;
    Real gamma = 0.5;  // fixed routing ratio when sweeping tau/q/C
    // Optional PSNR column (gamma sweeps only): evaluate this checkpoint on
    // this dataset at each gamma.
    std::string checkpoint_dir;
    std::string dataset_dir;
};

struct SweepRow {
    Real value = 0;
    Rational formula, exact;
    Real psnr = 0;
};

struct SweepResult {
    std::string param;
    std::vector<SweepRow> rows;
    bool has_psnr = false;
    std::string to_csv() const;  // header: param,formula_flops,exact_flops[,psnr]
    std::string to_json() const;
};

SweepResult sweep(const SweepRequest& req);

}  // namespace catair
