#include "catair/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"

#include "catair/checkpoint.hpp"
#include "catair/degrade.hpp"
#include "catair/image_io.hpp"

namespace catair {

namespace fs = std::filesystem;
using nlohmann::json;

Var training_loss(const Var& pred, const Var& target, const std::vector<Var>& gammas,
                  Real gamma0, LossBreakdown* breakdown) {
    Var l1 = mean_all(abs_op(sub(pred, target)));
    LossBreakdown bd;
    bd.l1 = l1.val()[0];
    Var total = l1;
    if (!gammas.empty()) {
        Var sum = gammas[0];
        for (size_t i = 1; i < gammas.size(); ++i) sum = add(sum, gammas[i]);
        Var mean_gamma = mul_scalar(sum, Real(1) / static_cast<Real>(gammas.size()));
        Var reg = square(add_scalar(mean_gamma, -gamma0));
        bd.mean_gamma = mean_gamma.val()[0];
        bd.ratio_reg = reg.val()[0];
        total = add(l1, reg);
    }
    bd.total = total.val()[0];
    if (breakdown) *breakdown = bd;
    return total;
}

void Adam::add_param(const std::string& name, Var p, Real lr_scale) {
    Slot s;
    s.name = name;
    s.param = p;
    s.lr_scale = lr_scale;
    s.m = Tensor(p.val().shape());
    s.v = Tensor(p.val().shape());
    slots_.push_back(std::move(s));
}

void Adam::step() {
    ++t_;
    const Real bc1 = 1 - std::pow(beta1, static_cast<Real>(t_));
    const Real bc2 = 1 - std::pow(beta2, static_cast<Real>(t_));
    for (Slot& s : slots_) {
        if (!s.param.grad().defined()) continue;
        const Tensor& g = s.param.grad();
        Tensor& p = s.param.val();
        for (int i = 0; i < p.numel(); ++i) {
            const Real gi = g[i];
            s.m[i] = beta1 * s.m[i] + (1 - beta1) * gi;
            s.v[i] = beta2 * s.v[i] + (1 - beta2) * gi * gi;
            const Real m_hat = s.m[i] / bc1;
            const Real v_hat = s.v[i] / bc2;
            p[i] -= lr * s.lr_scale * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
}

EMAState ema_init(const CatAIRModel& model, Real beta) {
    if (beta <= 0 || beta >= 1) throw ConfigError("ema beta must lie in (0,1)");
    EMAState state;
    state.beta = beta;
    for (const auto& [name, v] : model.params().items()) state.shadow[name] = v.val().clone();
    return state;
}

void ema_update(EMAState& state, const CatAIRModel& model) {
    const Real step = 1 - state.beta;
    for (const auto& [name, v] : model.params().items()) {
        auto it = state.shadow.find(name);
        if (it == state.shadow.end() || it->second.shape() != v.val().shape())
            throw ConfigError("ema shadow does not match model parameter " + name);
        Tensor& s = it->second;
        const Tensor& p = v.val();
        for (int i = 0; i < s.numel(); ++i) s[i] -= step * (s[i] - p[i]);
    }
}

void save_ema_checkpoint(CatAIRModel& model, const EMAState& ema, const std::string& dir) {
    std::vector<Tensor> stash;
    const auto& items = model.params().items();
    stash.reserve(items.size());
    for (const auto& [name, v] : items) {
        stash.push_back(v.val().clone());
        const Tensor& s = ema.shadow.at(name);
        Var handle = v;  // shares the node; gives mutable access to the values
        Tensor& p = handle.val();
        for (int i = 0; i < p.numel(); ++i) p[i] = s[i];
    }
    save_checkpoint(model, dir);
    for (size_t k = 0; k < items.size(); ++k) {
        Var handle = items[k].second;
        Tensor& p = handle.val();
        for (int i = 0; i < p.numel(); ++i) p[i] = stash[k][i];
    }
}

Tensor crop_region(const Tensor& img, int y0, int x0, int size) {
    const int c = img.dim(2);
    if (y0 < 0 || x0 < 0 || y0 + size > img.dim(0) || x0 + size > img.dim(1))
        throw ShapeError("crop window leaves the image");
    Tensor out({size, size, c});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int ch = 0; ch < c; ++ch) out.at(y, x, ch) = img.at(y0 + y, x0 + x, ch);
    return out;
}

Tensor flip_x(const Tensor& img) {
    const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    Tensor out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) out.at(y, x, ch) = img.at(y, w - 1 - x, ch);
    return out;
}

Tensor rot90k(const Tensor& img, int k) {
    k = ((k % 4) + 4) % 4;
    if (k == 0) return img;
    const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    if (k == 2) {
        Tensor out({h, w, c});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int ch = 0; ch < c; ++ch)
                    out.at(y, x, ch) = img.at(h - 1 - y, w - 1 - x, ch);
        return out;
    }
    Tensor out({w, h, c});  // quarter turns swap the axes
    for (int y = 0; y < w; ++y)
        for (int x = 0; x < h; ++x)
            for (int ch = 0; ch < c; ++ch) {
                if (k == 1)
                    out.at(y, x, ch) = img.at(x, w - 1 - y, ch);  // ccw
                else
                    out.at(y, x, ch) = img.at(h - 1 - x, y, ch);  // cw
            }
    return out;
}

namespace {

struct PairInMemory {
    Tensor clean, degraded;
};

std::vector<PairInMemory> load_pairs(const std::string& data_dir) {
    DatasetManifest manifest = load_manifest(data_dir);
    std::vector<PairInMemory> pairs;
    pairs.reserve(manifest.entries.size());
    for (const ManifestEntry& e : manifest.entries)
        pairs.push_back({read_png(clean_path(data_dir, e.id)),
                         read_png(degraded_path(data_dir, e.id))});
    return pairs;
}

void write_metrics_line(std::ofstream& out, int step, const LossBreakdown& bd) {
    if (!out.is_open()) return;
    out << json{{"step", step},
                {"l1", bd.l1},
                {"ratio_reg", bd.ratio_reg},
                {"mean_gamma", bd.mean_gamma}}
               .dump()
        << "\n";
}

}  // namespace

TrainResult train(CatAIRModel& model, const std::string& data_dir, const TrainConfig& cfg) {
    if (cfg.steps < 0) throw ConfigError("steps must be non-negative");
    if (cfg.batch < 1) throw ConfigError("batch must be positive");
    model.config().check_input_dims(cfg.crop, cfg.crop);

    std::vector<PairInMemory> pairs = load_pairs(data_dir);
    for (const PairInMemory& p : pairs)
        if (p.clean.dim(0) < cfg.crop || p.clean.dim(1) < cfg.crop)
            throw ConfigError("crop " + std::to_string(cfg.crop) +
                              " exceeds a dataset image of size " +
                              std::to_string(p.clean.dim(0)) + "x" +
                              std::to_string(p.clean.dim(1)));

    Rng rng(derive_seed(cfg.seed, 0x7ea1));
    Adam opt;
    opt.lr = cfg.lr;
    for (const auto& [name, v] : model.params().items()) {
        auto it = cfg.lr_scales.find(name);
        opt.add_param(name, v, it == cfg.lr_scales.end() ? Real(1) : it->second);
    }
    EMAState ema;
    if (cfg.use_ema) ema = ema_init(model, cfg.ema_beta);

    std::ofstream metrics;
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        metrics.open(fs::path(cfg.out_dir) / "metrics.jsonl");
        if (!metrics) throw IoError("cannot write metrics.jsonl in " + cfg.out_dir);
    }

    ForwardOptions fopt;
    fopt.train = true;
    fopt.temperature = cfg.temperature;
    fopt.gumbel_noise = true;
    fopt.rng = &rng;

    TrainResult result;
    const int n = static_cast<int>(pairs.size());
    for (int step = 1; step <= cfg.steps; ++step) {
        Tensor degraded({cfg.batch, cfg.crop, cfg.crop, 3});
        Tensor clean({cfg.batch, cfg.crop, cfg.crop, 3});
        for (int b = 0; b < cfg.batch; ++b) {
            const PairInMemory& p = pairs[static_cast<size_t>(rng.uniform_int(n))];
            const int y0 = rng.uniform_int(p.clean.dim(0) - cfg.crop + 1);
            const int x0 = rng.uniform_int(p.clean.dim(1) - cfg.crop + 1);
            const bool flip = rng.uniform_int(2) == 1;
            const int rot = rng.uniform_int(4);
            for (const bool is_clean : {false, true}) {
                Tensor aug = crop_region(is_clean ? p.clean : p.degraded, y0, x0, cfg.crop);
                if (flip) aug = flip_x(aug);
                aug = rot90k(aug, rot);
                Tensor& dst = is_clean ? clean : degraded;
                for (int y = 0; y < cfg.crop; ++y)
                    for (int x = 0; x < cfg.crop; ++x)
                        for (int ch = 0; ch < 3; ++ch)
                            dst.at(b, y, x, ch) = aug.at(y, x, ch);
            }
        }

        model.params().zero_grads();
        ForwardResult fwd = model.forward(Var(degraded), fopt);
        LossBreakdown bd;
        Var loss = training_loss(fwd.output, Var(clean), fwd.gamma_vars,
                                 model.config().gamma0, &bd);
        if (!std::isfinite(bd.total))
            throw TrainingDiverged("loss left the reals at step " + std::to_string(step));
        backward(loss, /*release_graph=*/true);
        opt.step();
        if (cfg.use_ema) ema_update(ema, model);

        write_metrics_line(metrics, step, bd);
        result.log.push_back({step, bd});
        result.final_loss = bd;
    }

    if (!cfg.out_dir.empty()) {
        save_checkpoint(model, (fs::path(cfg.out_dir) / "raw").string());
        if (cfg.use_ema)
            save_ema_checkpoint(model, ema, (fs::path(cfg.out_dir) / "ema").string());
    }
    return result;
}

std::vector<int> mix_counts(const std::vector<Real>& weights, int total_pairs) {
    if (weights.empty()) throw ConfigError("mix weights are empty");
    if (total_pairs < 0) throw ConfigError("total pair count must be non-negative");
    Real sum = 0;
    for (Real w : weights) {
        if (w < 0) throw ConfigError("mix weights must be non-negative");
        sum += w;
    }
    if (std::abs(sum - 1) > 1e-9) throw ConfigError("mix weights must sum to 1");

    // Largest-remainder rounding keeps the total exact.
    std::vector<int> counts(weights.size());
    std::vector<std::pair<Real, size_t>> remainders;
    int assigned = 0;
    for (size_t i = 0; i < weights.size(); ++i) {
        const Real exact = weights[i] * total_pairs;
        counts[i] = static_cast<int>(std::floor(exact + 1e-12));
        assigned += counts[i];
        remainders.push_back({exact - counts[i], i});
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int k = 0; k < total_pairs - assigned; ++k)
        counts[remainders[static_cast<size_t>(k)].second] += 1;
    return counts;
}

std::vector<Real> default_extension_weights(int old_n, int new_m) {
    if (old_n < 1 || new_m < 1) throw ConfigError("extension needs old and new tasks");
    const Real denom = static_cast<Real>(old_n) + 2 * static_cast<Real>(new_m);
    std::vector<Real> w;
    for (int i = 0; i < old_n; ++i) w.push_back(1 / denom);
    for (int i = 0; i < new_m; ++i) w.push_back(2 / denom);
    return w;
}

CatAIRModel extend(const std::string& base_ckpt, const ExtensionPlan& plan,
                   const std::string& data_dir, const TrainConfig& cfg) {
    if (plan.new_tasks.empty()) throw ConfigError("extension adds no tasks");
    ModelConfig base_cfg;
    std::vector<std::string> tasks;
    read_checkpoint_config(base_ckpt, base_cfg, tasks);
    const int old_n = static_cast<int>(tasks.size());

    std::set<std::string> seen(tasks.begin(), tasks.end());
    for (const std::string& t : plan.new_tasks) {
        if (!seen.insert(t).second) throw ConfigError("task name collision: " + t);
        tasks.push_back(t);
    }
    if (!plan.mix_weights.empty() && plan.mix_weights.size() != tasks.size())
        throw ConfigError("mix weights must cover every old and new task");
    if (plan.lr_prompt_multiplier <= 0)
        throw ConfigError("prompt learning-rate multiplier must be positive");

    ModelConfig ext_cfg = base_cfg;
    ext_cfg.task_count = static_cast<int>(tasks.size());
    CatAIRModel model(ext_cfg, tasks, derive_seed(cfg.seed, 0xe77));
    load_weights(model, base_ckpt, /*allow_missing=*/true);

    // New mixing heads start near-silent (softmax weight ~ e^-4 per new task)
    // so the grown model initially routes prompts like the pretrained one.
    ModelMutator mut(model);
    TrainConfig run = cfg;
    for (int b = 0; b < mut.bank_count(); ++b) {
        const std::string lv = std::to_string(3 - b);
        for (size_t t = static_cast<size_t>(old_n); t < tasks.size(); ++t) {
            Tensor& w = mut.bank_mix_w(b)[t].val();
            for (int i = 0; i < w.numel(); ++i) w[i] = 0;
            mut.bank_mix_b(b)[t].val()[0] = -4;
            const std::string mt = "prompt" + lv + ".mix" + std::to_string(t);
            run.lr_scales["prompt" + lv + ".comp" + std::to_string(t)] =
                plan.lr_prompt_multiplier;
            run.lr_scales[mt + ".w"] = plan.lr_prompt_multiplier;
            run.lr_scales[mt + ".b"] = plan.lr_prompt_multiplier;
        }
    }
    run.use_ema = true;

    train(model, data_dir, run);
    return model;
}

}  // namespace catair
