#include "catair/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <unordered_map>

#include "json.hpp"

namespace catair {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json config_json(const ModelConfig& cfg, const std::vector<std::string>& tasks) {
    return json{{"model",
                 {{"base_channels", cfg.base_channels},
                  {"enc_blocks", cfg.enc_blocks},
                  {"dec_blocks", cfg.dec_blocks},
                  {"q", cfg.q},
                  {"tau", cfg.tau},
                  {"gamma0", cfg.gamma0},
                  {"heads", cfg.heads},
                  {"task_count", cfg.task_count},
                  {"prompt_size", cfg.prompt_size},
                  {"kernel", cfg.kernel},
                  {"zero_init_residual", cfg.zero_init_residual},
                  {"zero_init_output", cfg.zero_init_output}}},
                {"tasks", tasks}};
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    in >> j;
    return j;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg,
                                 const std::vector<std::string>& tasks) {
    return config_json(cfg, tasks).dump(2);
}

void save_checkpoint(const CatAIRModel& model, const std::string& dir) {
    fs::create_directories(dir);

    json manifest = json::array();
    std::vector<float> blob;
    size_t offset = 0;
    for (const auto& [name, v] : model.params().items()) {
        const Tensor& t = v.val();
        manifest.push_back({{"name", name},
                            {"shape", t.shape()},
                            {"dtype", "f32"},
                            {"byte_offset", offset}});
        for (int i = 0; i < t.numel(); ++i) blob.push_back(static_cast<float>(t[i]));
        offset += static_cast<size_t>(t.numel()) * sizeof(float);
    }

    std::ofstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!wf) throw IoError("cannot write weights.bin in " + dir);
    wf.write(reinterpret_cast<const char*>(blob.data()),
             static_cast<std::streamsize>(blob.size() * sizeof(float)));
    wf.close();
    if (!wf) throw IoError("failed writing weights.bin in " + dir);

    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
    std::ofstream cf(fs::path(dir) / "config.json");
    cf << config_json(model.config(), model.tasks()).dump(2) << "\n";
}

void read_checkpoint_config(const std::string& dir, ModelConfig& cfg,
                            std::vector<std::string>& tasks) {
    json j = read_json_file(fs::path(dir) / "config.json");
    const json& m = j.at("model");
    cfg.base_channels = m.at("base_channels").get<int>();
    cfg.enc_blocks = m.at("enc_blocks").get<std::vector<int>>();
    cfg.dec_blocks = m.at("dec_blocks").get<std::vector<int>>();
    cfg.q = m.at("q").get<int>();
    cfg.tau = m.at("tau").get<Real>();
    cfg.gamma0 = m.at("gamma0").get<Real>();
    cfg.heads = m.at("heads").get<int>();
    cfg.task_count = m.at("task_count").get<int>();
    cfg.prompt_size = m.at("prompt_size").get<int>();
    cfg.kernel = m.at("kernel").get<int>();
    cfg.zero_init_residual = m.at("zero_init_residual").get<bool>();
    cfg.zero_init_output = m.at("zero_init_output").get<bool>();
    tasks = j.at("tasks").get<std::vector<std::string>>();
}

void load_weights(CatAIRModel& model, const std::string& dir, bool allow_missing) {
    json manifest = read_json_file(fs::path(dir) / "manifest.json");

    std::ifstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!wf) throw IoError("cannot open weights.bin in " + dir);
    std::vector<char> raw((std::istreambuf_iterator<char>(wf)),
                          std::istreambuf_iterator<char>());

    std::unordered_map<std::string, bool> filled;
    for (const auto& entry : manifest) {
        const std::string name = entry.at("name").get<std::string>();
        if (!model.params().has(name))
            throw IoError("checkpoint parameter not present in model: " + name);
        const Var& v = model.params().get(name);
        const auto shape = entry.at("shape").get<std::vector<int>>();
        if (shape != v.val().shape())
            throw IoError("shape mismatch for " + name + ": checkpoint " +
                          Tensor(shape).shape_str() + " vs model " + v.val().shape_str());
        const size_t off = entry.at("byte_offset").get<size_t>();
        const size_t bytes = static_cast<size_t>(v.val().numel()) * sizeof(float);
        if (off + bytes > raw.size()) throw IoError("weights.bin truncated at " + name);
        const float* src = reinterpret_cast<const float*>(raw.data() + off);
        Tensor& dst = const_cast<Var&>(v).val();
        for (int i = 0; i < dst.numel(); ++i) dst[i] = static_cast<Real>(src[i]);
        filled[name] = true;
    }
    if (!allow_missing)
        for (const auto& [name, v] : model.params().items())
            if (!filled.count(name))
                throw IoError("model parameter missing from checkpoint: " + name);
}

CatAIRModel load_checkpoint(const std::string& dir) {
    ModelConfig cfg;
    std::vector<std::string> tasks;
    read_checkpoint_config(dir, cfg, tasks);
    CatAIRModel model(std::move(cfg), std::move(tasks), /*seed=*/0);
    load_weights(model, dir);
    return model;
}

}  // namespace catair
