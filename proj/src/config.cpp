#include "catair/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace catair {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(int line, const std::string& msg) {
    throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

Real parse_real(int line, const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        Real x = std::stod(v, &pos);
        if (pos != v.size()) fail(line, key + ": trailing characters after number '" + v + "'");
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        fail(line, key + ": expected a number, got '" + v + "'");
    }
}

int parse_int(int line, const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        long long x = std::stoll(v, &pos);
        if (pos != v.size()) fail(line, key + ": trailing characters after integer '" + v + "'");
        return static_cast<int>(x);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        fail(line, key + ": expected an integer, got '" + v + "'");
    }
}

std::uint64_t parse_u64(int line, const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size()) fail(line, key + ": trailing characters after integer '" + v + "'");
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        fail(line, key + ": expected a non-negative integer, got '" + v + "'");
    }
}

bool parse_bool(int line, const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail(line, key + ": expected true/false, got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) out.push_back(trim(item));
    return out;
}

std::vector<int> parse_int_list(int line, const std::string& key, const std::string& v) {
    std::vector<int> out;
    for (const std::string& item : split_commas(v)) {
        if (item.empty()) fail(line, key + ": empty element in list '" + v + "'");
        out.push_back(parse_int(line, key, item));
    }
    return out;
}

std::vector<std::string> parse_names(int line, const std::string& key, const std::string& v) {
    std::vector<std::string> out = split_commas(v);
    for (const std::string& n : out)
        if (n.empty()) fail(line, key + ": empty name in list '" + v + "'");
    if (out.empty()) fail(line, key + ": empty list");
    return out;
}

std::vector<std::pair<Task, int>> parse_counts(int line, const std::string& v) {
    std::vector<std::pair<Task, int>> out;
    for (const std::string& item : split_commas(v)) {
        size_t colon = item.find(':');
        if (colon == std::string::npos)
            fail(line, "counts: expected task:count, got '" + item + "'");
        const std::string name = trim(item.substr(0, colon));
        const std::string num = trim(item.substr(colon + 1));
        Task t;
        try {
            t = task_from_name(name);
        } catch (const std::exception&) {
            fail(line, "counts: unknown task '" + name + "'");
        }
        out.push_back({t, parse_int(line, "counts", num)});
    }
    if (out.empty()) fail(line, "counts: empty list");
    return out;
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
    RunConfig rc;
    bool count_set = false, names_set = false;
    int count_line = 0, names_line = 0;

    std::istringstream in(text);
    std::string raw, section;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const size_t hash = raw.find('#');
        std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (s.empty()) continue;

        if (s.front() == '[') {
            if (s.back() != ']') fail(line, "unterminated section header '" + s + "'");
            section = trim(s.substr(1, s.size() - 2));
            if (section != "model" && section != "tasks" && section != "train" &&
                section != "dataset")
                fail(line, "unknown section [" + section + "]");
            continue;
        }

        const size_t eq = s.find('=');
        if (eq == std::string::npos) fail(line, "expected key = value, got '" + s + "'");
        const std::string key = trim(s.substr(0, eq));
        const std::string val = trim(s.substr(eq + 1));
        if (key.empty()) fail(line, "missing key before '='");
        if (val.empty()) fail(line, key + ": missing value");
        if (section.empty()) fail(line, "key '" + key + "' before any [section] header");

        if (section == "model") {
            ModelConfig& m = rc.model;
            if (key == "base_channels") m.base_channels = parse_int(line, key, val);
            else if (key == "enc_blocks") m.enc_blocks = parse_int_list(line, key, val);
            else if (key == "dec_blocks") m.dec_blocks = parse_int_list(line, key, val);
            else if (key == "q") m.q = parse_int(line, key, val);
            else if (key == "tau") m.tau = parse_real(line, key, val);
            else if (key == "gamma0") m.gamma0 = parse_real(line, key, val);
            else if (key == "heads") m.heads = parse_int(line, key, val);
            else if (key == "task_count") {
                m.task_count = parse_int(line, key, val);
                count_set = true;
                count_line = line;
            } else if (key == "prompt_size") m.prompt_size = parse_int(line, key, val);
            else if (key == "kernel") m.kernel = parse_int(line, key, val);
            else if (key == "zero_init_residual") m.zero_init_residual = parse_bool(line, key, val);
            else if (key == "zero_init_output") m.zero_init_output = parse_bool(line, key, val);
            else fail(line, "unknown key '" + key + "' in [model]");
        } else if (section == "tasks") {
            if (key == "names") {
                rc.tasks = parse_names(line, key, val);
                names_set = true;
                names_line = line;
            } else fail(line, "unknown key '" + key + "' in [tasks]");
        } else if (section == "train") {
            TrainConfig& t = rc.train;
            if (key == "steps") t.steps = parse_int(line, key, val);
            else if (key == "lr") t.lr = parse_real(line, key, val);
            else if (key == "batch") t.batch = parse_int(line, key, val);
            else if (key == "crop") t.crop = parse_int(line, key, val);
            else if (key == "seed") t.seed = parse_u64(line, key, val);
            else if (key == "use_ema") t.use_ema = parse_bool(line, key, val);
            else if (key == "ema_beta") t.ema_beta = parse_real(line, key, val);
            else if (key == "temperature") t.temperature = parse_real(line, key, val);
            else fail(line, "unknown key '" + key + "' in [train]");
        } else {  // dataset
            DatasetRequest& d = rc.dataset;
            if (key == "h") d.h = parse_int(line, key, val);
            else if (key == "w") d.w = parse_int(line, key, val);
            else if (key == "seed") d.seed = parse_u64(line, key, val);
            else if (key == "counts") d.counts = parse_counts(line, val);
            else fail(line, "unknown key '" + key + "' in [dataset]");
        }
    }

    if (names_set) {
        std::set<std::string> uniq(rc.tasks.begin(), rc.tasks.end());
        if (uniq.size() != rc.tasks.size())
            fail(names_line, "duplicate task name in [tasks] names");
        if (!count_set)
            rc.model.task_count = static_cast<int>(rc.tasks.size());
        else if (rc.model.task_count != static_cast<int>(rc.tasks.size()))
            fail(count_line, "task_count disagrees with the [tasks] names list");
    } else if (count_set && rc.model.task_count != static_cast<int>(rc.tasks.size())) {
        fail(count_line, "task_count set without a matching [tasks] names list");
    }
    return rc;
}

RunConfig parse_run_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config_text(buf.str());
}

namespace {

std::string real_str(Real x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

}  // namespace

std::string run_config_to_ini(const RunConfig& rc) {
    std::ostringstream out;
    const ModelConfig& m = rc.model;
    out << "[model]\n";
    out << "base_channels = " << m.base_channels << "\n";
    out << "enc_blocks = " << join_ints(m.enc_blocks) << "\n";
    out << "dec_blocks = " << join_ints(m.dec_blocks) << "\n";
    out << "q = " << m.q << "\n";
    out << "tau = " << real_str(m.tau) << "\n";
    out << "gamma0 = " << real_str(m.gamma0) << "\n";
    out << "heads = " << m.heads << "\n";
    out << "task_count = " << m.task_count << "\n";
    out << "prompt_size = " << m.prompt_size << "\n";
    out << "kernel = " << m.kernel << "\n";
    out << "zero_init_residual = " << (m.zero_init_residual ? "true" : "false") << "\n";
    out << "zero_init_output = " << (m.zero_init_output ? "true" : "false") << "\n";

    out << "\n[tasks]\nnames = ";
    for (size_t i = 0; i < rc.tasks.size(); ++i) out << (i ? "," : "") << rc.tasks[i];
    out << "\n";

    const TrainConfig& t = rc.train;
    out << "\n[train]\n";
    out << "steps = " << t.steps << "\n";
    out << "lr = " << real_str(t.lr) << "\n";
    out << "batch = " << t.batch << "\n";
    out << "crop = " << t.crop << "\n";
    out << "seed = " << t.seed << "\n";
    out << "use_ema = " << (t.use_ema ? "true" : "false") << "\n";
    out << "ema_beta = " << real_str(t.ema_beta) << "\n";
    out << "temperature = " << real_str(t.temperature) << "\n";

    const DatasetRequest& d = rc.dataset;
    out << "\n[dataset]\n";
    out << "h = " << d.h << "\n";
    out << "w = " << d.w << "\n";
    out << "seed = " << d.seed << "\n";
    if (!d.counts.empty()) {
        out << "counts = ";
        for (size_t i = 0; i < d.counts.size(); ++i)
            out << (i ? "," : "") << task_name(d.counts[i].first) << ":" << d.counts[i].second;
        out << "\n";
    }
    return out.str();
}

std::vector<std::pair<std::string, int>> spatial_block_layout(const ModelConfig& cfg) {
    std::vector<std::pair<std::string, int>> layout;
    for (int level = 1; level <= 4; ++level)
        for (int b = 0; b < cfg.enc_blocks[static_cast<size_t>(level - 1)]; ++b)
            layout.push_back({"enc" + std::to_string(level) + ".block" + std::to_string(b),
                              level});
    for (int d = 0; d < 3; ++d) {
        const int level = 3 - d;  // decoder runs levels 3, 2, 1
        for (int b = 0; b < cfg.dec_blocks[static_cast<size_t>(d)]; ++b)
            layout.push_back({"dec" + std::to_string(level) + ".block" + std::to_string(b),
                              level});
    }
    return layout;
}

}  // namespace catair
