#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "catair/checkpoint.hpp"
#include "catair/config.hpp"
#include "catair/costmodel.hpp"
#include "catair/degrade.hpp"
#include "catair/image_io.hpp"
#include "catair/metrics.hpp"
#include "catair/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace catair;

namespace {

void echo_config(const RunConfig& rc, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream out(fs::path(dir) / "config.ini");
    if (!out) throw IoError("cannot write config.ini in " + dir);
    out << run_config_to_ini(rc);
}

std::vector<std::string> split_names(const std::string& csv) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(csv);
    while (std::getline(in, item, ',')) {
        const size_t a = item.find_first_not_of(" \t");
        const size_t b = item.find_last_not_of(" \t");
        if (a == std::string::npos) throw ConfigError("empty task name in '" + csv + "'");
        out.push_back(item.substr(a, b - a + 1));
    }
    if (out.empty()) throw ConfigError("no task names in '" + csv + "'");
    return out;
}

Tensor clamp01(Tensor t) {
    for (int i = 0; i < t.numel(); ++i) t[i] = std::clamp(t[i], Real(0), Real(1));
    return t;
}

void dump_masks(const CatAIRModel& model, const ForwardResult& fwd, int h, int w,
                const std::string& dir) {
    fs::create_directories(dir);
    const auto layout = spatial_block_layout(model.config());
    if (layout.size() != fwd.decisions.size())
        throw ConfigError("mask dump: expected " + std::to_string(layout.size()) +
                          " routing decisions, got " + std::to_string(fwd.decisions.size()));
    for (size_t i = 0; i < layout.size(); ++i) {
        const RouterDecision& d = fwd.decisions[i];
        const int hq = d.logits.dim(0), wq = d.logits.dim(1);
        const int sy = h / hq, sx = w / wq;  // patch footprint at input resolution
        Tensor mask({h, w, 1});
        for (int p : d.idx_hard) {
            const int py = p / wq, px = p % wq;
            for (int y = py * sy; y < (py + 1) * sy; ++y)
                for (int x = px * sx; x < (px + 1) * sx; ++x) mask.at(y, x, 0) = 1.0;
        }
        char prefix[8];
        std::snprintf(prefix, sizeof prefix, "%02zu_", i);
        write_png((fs::path(dir) / (prefix + layout[i].first + ".png")).string(), mask);
    }
}

int cmd_synth(const std::string& config_path, const std::string& out_dir,
              const CLI::App* sub, std::uint64_t seed) {
    RunConfig rc = parse_run_config_file(config_path);
    if (sub->count("--seed")) rc.dataset.seed = seed;
    if (rc.dataset.counts.empty())
        throw ConfigError("config has no [dataset] counts; nothing to synthesize");
    DatasetManifest manifest = build_dataset(rc.dataset, out_dir);
    echo_config(rc, out_dir);
    std::cout << "wrote " << manifest.entries.size() << " pairs to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const CLI::App* sub, std::uint64_t seed,
              int steps, Real lr, int batch, int crop) {
    RunConfig rc = parse_run_config_file(config_path);
    if (sub->count("--seed")) rc.train.seed = seed;
    if (sub->count("--steps")) rc.train.steps = steps;
    if (sub->count("--lr")) rc.train.lr = lr;
    if (sub->count("--batch")) rc.train.batch = batch;
    if (sub->count("--crop")) rc.train.crop = crop;
    rc.train.out_dir = out_dir;

    CatAIRModel model(rc.model, rc.tasks, rc.train.seed);
    TrainResult res = train(model, data_dir, rc.train);
    echo_config(rc, out_dir);
    std::cout << json{{"steps", rc.train.steps},
                      {"final_l1", res.final_loss.l1},
                      {"final_total", res.final_loss.total}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_extend(const std::string& config_path, const std::string& base_ckpt,
               const std::string& data_dir, const std::string& out_dir,
               const std::string& new_tasks_csv, Real lr_prompt_mult, const CLI::App* sub,
               std::uint64_t seed, int steps, Real lr, int batch, int crop) {
    RunConfig rc = parse_run_config_file(config_path);
    if (sub->count("--seed")) rc.train.seed = seed;
    if (sub->count("--steps")) rc.train.steps = steps;
    if (sub->count("--lr")) rc.train.lr = lr;
    if (sub->count("--batch")) rc.train.batch = batch;
    if (sub->count("--crop")) rc.train.crop = crop;
    rc.train.out_dir = out_dir;

    ExtensionPlan plan;
    plan.new_tasks = split_names(new_tasks_csv);
    plan.lr_prompt_multiplier = lr_prompt_mult;
    CatAIRModel model = extend(base_ckpt, plan, data_dir, rc.train);
    echo_config(rc, out_dir);

    json tasks = json::array();
    for (const std::string& t : model.tasks()) tasks.push_back(t);
    std::cout << json{{"tasks", tasks}, {"steps", rc.train.steps}}.dump() << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, Real gamma,
             const std::string& out_path) {
    CatAIRModel model = load_checkpoint(ckpt);
    EvalResult res = evaluate(model, data_dir, gamma);
    const std::string text = res.to_json() + "\n";
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw IoError("cannot write " + out_path);
        out << text;
    }
    std::cout << text;
    return 0;
}

int cmd_flops(const std::string& config_path, const std::string& mode,
              const std::string& convention, const std::string& schedule, std::int64_t h,
              std::int64_t w, Real gamma, const std::string& sweep_spec,
              const std::string& ckpt, const std::string& data_dir,
              const std::string& out_path) {
    RunConfig rc = parse_run_config_file(config_path);

    if (!sweep_spec.empty()) {
        const size_t eq = sweep_spec.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--sweep expects param=v1,v2,..., got '" + sweep_spec + "'");
        SweepRequest req;
        req.param = sweep_spec.substr(0, eq);
        std::string item;
        std::istringstream in(sweep_spec.substr(eq + 1));
        while (std::getline(in, item, ',')) req.values.push_back(std::stod(item));
        req.cfg = rc.model;
        req.h = h;
        req.w = w;
        req.gamma = gamma;
        req.checkpoint_dir = ckpt;
        req.dataset_dir = data_dir;
        SweepResult res = sweep(req);
        if (!out_path.empty()) {
            std::ofstream out(out_path);
            if (!out) throw IoError("cannot write " + out_path);
            out << res.to_csv();
        }
        std::cout << res.to_csv();
        return 0;
    }

    if (mode == "formula") {
        Rational total = formula_total(rc.model, h, w, Rational::from_real(gamma));
        std::cout << json{{"mode", "formula"},
                          {"h", h},
                          {"w", w},
                          {"gamma", gamma},
                          {"total_flops", total.str()}}
                         .dump(2)
                  << "\n";
        return 0;
    }
    if (mode != "exact") throw ConfigError("--mode must be formula or exact");

    ExactOptions opt;
    if (convention == "paper") opt.convention = Convention::paper;
    else if (convention == "strict") opt.convention = Convention::strict;
    else throw ConfigError("--convention must be paper or strict");
    if (schedule == "true_channels") opt.schedule = ChannelSchedule::true_channels;
    else if (schedule == "constant_c") opt.schedule = ChannelSchedule::constant_c;
    else throw ConfigError("--schedule must be true_channels or constant_c");

    FlopsReport report = count_exact(rc.model, h, w, gamma, opt);
    const std::string text = report.to_json() + "\n";
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw IoError("cannot write " + out_path);
        out << text;
    }
    std::cout << text;
    return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& in_path,
              const std::string& out_path, Real gamma, const std::string& mask_dir) {
    CatAIRModel model = load_checkpoint(ckpt);
    Tensor img = read_png(in_path);
    const int h = img.dim(0), w = img.dim(1);
    model.config().check_input_dims(h, w);

    NoGradGuard ng;
    ForwardOptions fopt;
    fopt.gamma = gamma;
    ForwardResult fwd = model.forward(Var(img.reshaped({1, h, w, 3})), fopt);
    write_png(out_path, clamp01(fwd.output.val().reshaped({h, w, 3})));
    if (!mask_dir.empty()) dump_masks(model, fwd, h, w, mask_dir);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"content/task-aware all-in-one image restoration"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, ckpt, base_ckpt, in_path, out_path;
    std::string new_tasks_csv, mask_dir, sweep_spec, mode = "formula";
    std::string convention = "paper", schedule = "true_channels";
    std::uint64_t seed = 0;
    std::int64_t fh = 128, fw = 128;
    Real gamma = 0.5, lr = 2e-4, lr_prompt_mult = 5;
    int steps = 500, batch = 4, crop = 64;

    CLI::App* synth = app.add_subcommand("synth", "synthesize a degraded/clean pair dataset");
    synth->add_option("--config", config_path, "run config file")->required()
        ->check(CLI::ExistingFile);
    synth->add_option("--out", out_dir, "output dataset directory")->required();
    synth->add_option("--seed", seed, "override [dataset] seed");

    CLI::App* train = app.add_subcommand("train", "train a model on a dataset");
    train->add_option("--config", config_path, "run config file")->required()
        ->check(CLI::ExistingFile);
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--out", out_dir, "checkpoint output directory")->required();
    train->add_option("--seed", seed, "override [train] seed");
    train->add_option("--steps", steps, "override [train] steps");
    train->add_option("--lr", lr, "override [train] lr");
    train->add_option("--batch", batch, "override [train] batch");
    train->add_option("--crop", crop, "override [train] crop");

    CLI::App* extend = app.add_subcommand("extend", "grow a checkpoint to new tasks");
    extend->add_option("--config", config_path, "run config file")->required()
        ->check(CLI::ExistingFile);
    extend->add_option("--base", base_ckpt, "base checkpoint directory")->required();
    extend->add_option("--data", data_dir, "mixed old+new dataset directory")->required();
    extend->add_option("--out", out_dir, "checkpoint output directory")->required();
    extend->add_option("--new-tasks", new_tasks_csv, "comma-separated new task names")
        ->required();
    extend->add_option("--lr-prompt-mult", lr_prompt_mult,
                       "learning-rate multiplier for new prompt parameters");
    extend->add_option("--seed", seed, "override [train] seed");
    extend->add_option("--steps", steps, "override [train] steps");
    extend->add_option("--lr", lr, "override [train] lr");
    extend->add_option("--batch", batch, "override [train] batch");
    extend->add_option("--crop", crop, "override [train] crop");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval_cmd->add_option("--ckpt", ckpt, "checkpoint directory")->required();
    eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
    eval_cmd->add_option("--gamma", gamma, "routing ratio");
    eval_cmd->add_option("--out", out_path, "also write the JSON report here");
    eval_cmd->add_option("--seed", seed, "accepted for uniformity; eval is deterministic");

    CLI::App* flops = app.add_subcommand("flops", "analytic and counted complexity");
    flops->add_option("--config", config_path, "run config file")->required()
        ->check(CLI::ExistingFile);
    flops->add_option("--mode", mode, "formula | exact");
    flops->add_option("--convention", convention, "paper | strict (exact mode)");
    flops->add_option("--schedule", schedule, "true_channels | constant_c (exact mode)");
    flops->add_option("--height", fh, "input height");
    flops->add_option("--width", fw, "input width");
    flops->add_option("--gamma", gamma, "routing ratio");
    flops->add_option("--sweep", sweep_spec, "param=v1,v2,... (gamma|tau|q|C)");
    flops->add_option("--ckpt", ckpt, "checkpoint for PSNR column (gamma sweeps)");
    flops->add_option("--data", data_dir, "dataset for PSNR column (gamma sweeps)");
    flops->add_option("--out", out_path, "also write the CSV/JSON here");
    flops->add_option("--seed", seed, "accepted for uniformity; flops is deterministic");

    CLI::App* infer = app.add_subcommand("infer", "restore one PNG");
    infer->add_option("--ckpt", ckpt, "checkpoint directory")->required();
    infer->add_option("--in", in_path, "input PNG")->required()->check(CLI::ExistingFile);
    infer->add_option("--out", out_path, "output PNG")->required();
    infer->add_option("--gamma", gamma, "routing ratio");
    infer->add_option("--dump-masks", mask_dir,
                      "write one grayscale routing mask PNG per spatial block");
    infer->add_option("--seed", seed, "accepted for uniformity; inference is deterministic");

    try {
        app.parse(argc, argv);
        if (synth->parsed()) return cmd_synth(config_path, out_dir, synth, seed);
        if (train->parsed())
            return cmd_train(config_path, data_dir, out_dir, train, seed, steps, lr, batch,
                             crop);
        if (extend->parsed())
            return cmd_extend(config_path, base_ckpt, data_dir, out_dir, new_tasks_csv,
                              lr_prompt_mult, extend, seed, steps, lr, batch, crop);
        if (eval_cmd->parsed()) return cmd_eval(ckpt, data_dir, gamma, out_path);
        if (flops->parsed())
            return cmd_flops(config_path, mode, convention, schedule, fh, fw, gamma,
                             sweep_spec, ckpt, data_dir, out_path);
        if (infer->parsed()) return cmd_infer(ckpt, in_path, out_path, gamma, mask_dir);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;  // help exits clean, any usage problem is 1
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
