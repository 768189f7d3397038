#pragma once

#include <map>
#include <string>
#include <vector>

#include "catair/backbone.hpp"

namespace catair {

struct LossBreakdown {
    Real l1 = 0;
    Real ratio_reg = 0;
    Real total = 0;
    Real mean_gamma = 0;
};

// l1 = mean absolute error; ratio_reg = (mean(gamma_j) - gamma0)^2. Builds the
// autodiff graph and reports the scalar pieces through `breakdown`.
Var training_loss(const Var& pred, const Var& target, const std::vector<Var>& gammas,
                  Real gamma0, LossBreakdown* breakdown = nullptr);

// Adaptive-moment optimizer with optional per-parameter learning-rate scales.
class Adam {
public:
    Real lr = 2e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void add_param(const std::string& name, Var p, Real lr_scale = 1);
    void step();  // applies p -= lr*scale * m_hat / (sqrt(v_hat) + eps)

private:
    struct Slot {
        std::string name;
        Var param;
        Real lr_scale = 1;
        Tensor m, v;
    };
    std::vector<Slot> slots_;
    std::int64_t t_ = 0;
};

struct EMAState {
    Real beta = 0.999;
    std::map<std::string, Tensor> shadow;
};

EMAState ema_init(const CatAIRModel& model, Real beta = 0.999);
// shadow <- shadow - (1-beta)(shadow - theta), the fixed-point-exact form of
// shadow = beta*shadow + (1-beta)*theta.
void ema_update(EMAState& state, const CatAIRModel& model);
// Writes the shadow parameters in place of the live ones, saves, restores.
void save_ema_checkpoint(CatAIRModel& model, const EMAState& ema, const std::string& dir);

// Paired augmentations (same transform must hit clean and degraded).
Tensor crop_region(const Tensor& img, int y0, int x0, int size);
Tensor flip_x(const Tensor& img);
Tensor rot90k(const Tensor& img, int k);  // k counter-clockwise quarter turns

struct TrainConfig {
    int steps = 500;
    Real lr = 2e-4;
    int batch = 4;
    int crop = 64;
    std::uint64_t seed = 0;
    bool use_ema = true;
    Real ema_beta = 0.999;
    Real temperature = 1.0;
    std::map<std::string, Real> lr_scales;  // per-parameter overrides (extension)
    std::string out_dir;  // when set: raw/ and ema/ checkpoints plus metrics.jsonl
};

struct StepLog {
    int step = 0;
    LossBreakdown loss;
};

struct TrainResult {
    std::vector<StepLog> log;
    LossBreakdown final_loss;
};

// Optimizes the model in place over the on-disk dataset. Deterministic in
// (model init, cfg.seed). Throws TrainingDiverged when the loss leaves the
// reals, naming the step.
TrainResult train(CatAIRModel& model, const std::string& data_dir, const TrainConfig& cfg);

struct ExtensionPlan {
    std::vector<std::string> new_tasks;
    Real lr_prompt_multiplier = 5;
    // Optional dataset mix over old+new tasks; must sum to 1 when given.
    // Default weighting: every new task counts twice each old task.
    std::vector<Real> mix_weights;
};

// Splits `total_pairs` by the given weights (largest remainder rounding).
std::vector<int> mix_counts(const std::vector<Real>& weights, int total_pairs);
// The default extension weights for N old and M new tasks, normalized.
std::vector<Real> default_extension_weights(int old_n, int new_m);

// Grows a pretrained checkpoint from N to N+M tasks: old prompt rows are
// carried over bit-exactly, new rows start fresh with their mixing heads held
// near-silent, and fine-tuning applies lr_prompt_multiplier to new prompt
// parameters with EMA enabled.
CatAIRModel extend(const std::string& base_ckpt, const ExtensionPlan& plan,
                   const std::string& data_dir, const TrainConfig& cfg);

}  // namespace catair
