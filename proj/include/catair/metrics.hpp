#pragma once

#include <map>
#include <string>

#include "catair/backbone.hpp"
#include "catair/degrade.hpp"

namespace catair {

// Peak signal-to-noise ratio on [0,1]-scaled arrays: 10*log10(1/MSE).
// Identical inputs give +infinity (serialized as "inf").
Real psnr(const Tensor& a, const Tensor& b);

// Structural similarity: 11x11 Gaussian window (sigma 1.5), k1=0.01, k2=0.03,
// dynamic range 1, computed per channel over valid positions and averaged.
Real ssim(const Tensor& a, const Tensor& b);

struct TaskScore {
    Real psnr_sum = 0, ssim_sum = 0;
    int count = 0;
    Real psnr_mean() const { return psnr_sum / count; }
    Real ssim_mean() const { return ssim_sum / count; }
};

struct EvalResult {
    std::map<std::string, TaskScore> per_task;
    TaskScore overall;
    std::string to_json() const;
};

// Runs inference over every manifest pair at the given routing ratio; model
// outputs are clamped to [0,1] before scoring. Deterministic.
EvalResult evaluate(CatAIRModel& model, const std::string& dataset_dir, Real gamma);

}  // namespace catair
