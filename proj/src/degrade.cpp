#include "catair/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "catair/image_io.hpp"
#include "json.hpp"

namespace catair {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr Real kPi = 3.14159265358979323846;

void require_image(const Tensor& img) {
    const auto& s = img.shape();
    if (s.size() != 3 || s[2] != 3)
        throw ShapeError("expected image [H,W,3], got " + img.shape_str());
}

Tensor clamped(Tensor x) {
    for (int i = 0; i < x.numel(); ++i) x[i] = std::clamp(x[i], Real(0), Real(1));
    return x;
}

Real smoothstep(Real e0, Real e1, Real x) {
    const Real t = std::clamp((x - e0) / (e1 - e0), Real(0), Real(1));
    return t * t * (3 - 2 * t);
}

}  // namespace

const std::vector<Task>& all_tasks() {
    static const std::vector<Task> tasks = {Task::denoise, Task::derain, Task::dehaze,
                                            Task::deblur, Task::lowlight};
    return tasks;
}

std::string task_name(Task t) {
    switch (t) {
        case Task::denoise: return "denoise";
        case Task::derain: return "derain";
        case Task::dehaze: return "dehaze";
        case Task::deblur: return "deblur";
        case Task::lowlight: return "lowlight";
    }
    throw ConfigError("unreachable task value");
}

Task task_from_name(const std::string& name) {
    for (Task t : all_tasks())
        if (task_name(t) == name) return t;
    throw ConfigError("unknown task: " + name);
}

Tensor synth_clean(int h, int w, std::uint64_t seed) {
    if (h < 1 || w < 1) throw ShapeError("image dimensions must be positive");
    Rng rng(seed);
    Tensor img({h, w, 3});

    // Smooth base: per-channel sum of oriented cosine gratings.
    for (int c = 0; c < 3; ++c) {
        const Real base = rng.uniform(0.35, 0.65);
        struct Grating { Real fy, fx, phase, amp; };
        Grating g[3];
        for (auto& gr : g) {
            const Real theta = rng.uniform(0, kPi);
            const Real freq = rng.uniform(0.5, 2.5) / std::max(h, w);
            gr = {std::sin(theta) * freq * 2 * kPi, std::cos(theta) * freq * 2 * kPi,
                  rng.uniform(0, 2 * kPi), rng.uniform(0.05, 0.15)};
        }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                Real v = base;
                for (const auto& gr : g) v += gr.amp * std::cos(gr.fy * y + gr.fx * x + gr.phase);
                img.at(y, x, c) = v;
            }
    }

    // Soft-edged ellipses give the image real boundaries.
    const int shapes = 3 + rng.uniform_int(3);
    for (int s = 0; s < shapes; ++s) {
        const Real cy = rng.uniform(0, h), cx = rng.uniform(0, w);
        const Real ry = rng.uniform(Real(h) / 8, Real(h) / 3);
        const Real rx = rng.uniform(Real(w) / 8, Real(w) / 3);
        const Real col[3] = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9),
                             rng.uniform(0.1, 0.9)};
        const Real edge = rng.uniform(0.02, 0.12);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Real dy = (y - cy) / ry, dx = (x - cx) / rx;
                const Real a = 0.85 * (1 - smoothstep(1 - edge, 1 + edge,
                                                      std::sqrt(dy * dy + dx * dx)));
                if (a <= 0) continue;
                for (int c = 0; c < 3; ++c)
                    img.at(y, x, c) = (1 - a) * img.at(y, x, c) + a * col[c];
            }
    }
    return clamped(std::move(img));
}

DegradedPair gen_noise(const Tensor& clean, Real sigma, std::uint64_t seed) {
    require_image(clean);
    if (sigma < 0) throw ConfigError("noise sigma must be non-negative");
    DegradedPair pair;
    pair.clean = clean;
    pair.task = Task::denoise;
    pair.params = {{"sigma", sigma}};
    pair.nonstandard = sigma != 15 && sigma != 25 && sigma != 50;
    if (sigma == 0) {
        pair.degraded = clean;
        return pair;
    }
    Rng rng(seed);
    Tensor out = clean.clone();
    const Real std_01 = sigma / 255;
    for (int i = 0; i < out.numel(); ++i) out[i] += std_01 * rng.gaussian();
    pair.degraded = clamped(std::move(out));
    return pair;
}

DegradedPair gen_rain(const Tensor& clean, Real density, Real angle_deg, std::uint64_t seed) {
    require_image(clean);
    if (density < 0 || density > 1) throw ConfigError("rain density must lie in [0,1]");
    DegradedPair pair;
    pair.clean = clean;
    pair.task = Task::derain;
    pair.params = {{"density", density}, {"angle", angle_deg}};
    if (density == 0) {
        pair.degraded = clean;
        return pair;
    }
    const int h = clean.dim(0), w = clean.dim(1);
    Rng rng(seed);

    // Sparse bright seeds smeared along the streak direction.
    Tensor layer({h, w});
    const Real p_seed = 0.02 * density;
    std::vector<std::pair<int, Real>> seeds;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (rng.uniform() < p_seed)
                layer.at(y, x) = rng.uniform(0.2, 0.6);

    const int len = 7;
    const Real dy = -std::cos(angle_deg * kPi / 180);  // angle from horizontal
    const Real dx = std::sin(angle_deg * kPi / 180);
    Tensor streaks({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Real a = layer.at(y, x);
            if (a == 0) continue;
            for (int s = -(len / 2); s <= len / 2; ++s) {
                const int yy = y + static_cast<int>(std::lround(s * dy));
                const int xx = x + static_cast<int>(std::lround(s * dx));
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                streaks.at(yy, xx) = std::max(streaks.at(yy, xx), a);
            }
        }

    Tensor out = clean.clone();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) += streaks.at(y, x);
    pair.degraded = clamped(std::move(out));
    return pair;
}

DegradedPair gen_haze(const Tensor& clean, Real transmission, Real airlight) {
    require_image(clean);
    if (transmission < 0 || transmission > 1)
        throw ConfigError("transmission must lie in [0,1]");
    if (airlight < 0 || airlight > 1) throw ConfigError("airlight must lie in [0,1]");
    DegradedPair pair;
    pair.clean = clean;
    pair.task = Task::dehaze;
    pair.params = {{"transmission", transmission}, {"airlight", airlight}};
    if (transmission == 1) {
        pair.degraded = clean;
        return pair;
    }
    Tensor out = clean.clone();
    const Real add = airlight * (1 - transmission);
    for (int i = 0; i < out.numel(); ++i) out[i] = out[i] * transmission + add;
    pair.degraded = clamped(std::move(out));
    return pair;
}

Tensor motion_kernel(Real length, Real angle_deg) {
    if (length < 1) throw ConfigError("blur length must be >= 1");
    const int half = static_cast<int>(std::ceil((length - 1) / 2));
    const int k = 2 * half + 1;
    Tensor kernel({k, k});
    if (length == 1 || half == 0) {
        kernel.at(half, half) = 1;
        return kernel;
    }
    const Real dy = std::sin(angle_deg * kPi / 180);
    const Real dx = std::cos(angle_deg * kPi / 180);
    const int samples = 8 * k;
    for (int s = 0; s <= samples; ++s) {
        const Real t = (Real(s) / samples - 0.5) * (length - 1);
        const Real y = half + t * dy, x = half + t * dx;
        const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
        const Real fy = y - y0, fx = x - x0;
        // Bilinear splat.
        for (int oy = 0; oy <= 1; ++oy)
            for (int ox = 0; ox <= 1; ++ox) {
                const int yy = y0 + oy, xx = x0 + ox;
                if (yy < 0 || yy >= k || xx < 0 || xx >= k) continue;
                kernel.at(yy, xx) += (oy ? fy : 1 - fy) * (ox ? fx : 1 - fx);
            }
    }
    Real sum = 0;
    for (int i = 0; i < kernel.numel(); ++i) sum += kernel[i];
    for (int i = 0; i < kernel.numel(); ++i) kernel[i] /= sum;
    return kernel;
}

DegradedPair gen_blur(const Tensor& clean, Real length, Real angle_deg) {
    require_image(clean);
    DegradedPair pair;
    pair.clean = clean;
    pair.task = Task::deblur;
    pair.params = {{"length", length}, {"angle", angle_deg}};
    Tensor kernel = motion_kernel(length, angle_deg);
    const int k = kernel.dim(0), half = k / 2;
    if (k == 1) {
        pair.degraded = clean;
        return pair;
    }
    const int h = clean.dim(0), w = clean.dim(1);
    Tensor out({h, w, 3});
    // Replicate padding keeps borders at natural brightness.
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                Real acc = 0;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const int yy = std::clamp(y + ky - half, 0, h - 1);
                        const int xx = std::clamp(x + kx - half, 0, w - 1);
                        acc += kernel.at(ky, kx) * clean.at(yy, xx, c);
                    }
                out.at(y, x, c) = acc;
            }
    pair.degraded = clamped(std::move(out));
    return pair;
}

DegradedPair gen_lowlight(const Tensor& clean, Real gamma, Real scale) {
    require_image(clean);
    if (gamma < 1) throw ConfigError("lowlight gamma must be >= 1");
    if (scale <= 0 || scale > 1) throw ConfigError("lowlight scale must lie in (0,1]");
    DegradedPair pair;
    pair.clean = clean;
    pair.task = Task::lowlight;
    pair.params = {{"gamma", gamma}, {"scale", scale}};
    if (gamma == 1 && scale == 1) {
        pair.degraded = clean;
        return pair;
    }
    Tensor out = clean.clone();
    for (int i = 0; i < out.numel(); ++i)
        out[i] = scale * (gamma == 1 ? out[i] : std::pow(out[i], gamma));
    pair.degraded = clamped(std::move(out));
    return pair;
}

DegradedPair gen_for_task(const Tensor& clean, Task task, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xd15ea5e));
    switch (task) {
        case Task::denoise: {
            const Real sigmas[3] = {15, 25, 50};
            return gen_noise(clean, sigmas[rng.uniform_int(3)], derive_seed(seed, 1));
        }
        case Task::derain:
            return gen_rain(clean, rng.uniform(0.3, 0.7), rng.uniform(60, 120),
                            derive_seed(seed, 2));
        case Task::dehaze:
            return gen_haze(clean, rng.uniform(0.4, 0.8), rng.uniform(0.7, 1.0));
        case Task::deblur:
            return gen_blur(clean, rng.uniform(5, 11), rng.uniform(0, 180));
        case Task::lowlight:
            return gen_lowlight(clean, rng.uniform(1.5, 2.5), rng.uniform(0.3, 0.6));
    }
    throw ConfigError("unreachable task value");
}

std::string clean_path(const std::string& dir, const std::string& id) {
    return (fs::path(dir) / "clean" / (id + ".png")).string();
}

std::string degraded_path(const std::string& dir, const std::string& id) {
    return (fs::path(dir) / "degraded" / (id + ".png")).string();
}

DatasetManifest build_dataset(const DatasetRequest& request, const std::string& dir) {
    if (request.h < 8 || request.w < 8 || request.h % 8 || request.w % 8)
        throw ConfigError("dataset images must have H and W multiples of 8");
    for (const auto& [task, n] : request.counts)
        if (n < 0) throw ConfigError("negative count for task " + task_name(task));
    fs::create_directories(fs::path(dir) / "clean");
    fs::create_directories(fs::path(dir) / "degraded");

    DatasetManifest manifest;
    manifest.seed = request.seed;
    std::ofstream mf(fs::path(dir) / "manifest.jsonl");
    if (!mf) throw IoError("cannot write manifest.jsonl in " + dir);

    int image_index = 0;
    for (const auto& [task, n] : request.counts) {
        for (int i = 0; i < n; ++i, ++image_index) {
            const std::uint64_t img_seed = derive_seed(request.seed, image_index);
            Tensor clean = synth_clean(request.h, request.w, img_seed);
            DegradedPair pair = gen_for_task(clean, task, derive_seed(img_seed, 0xfeed));

            char buf[32];
            std::snprintf(buf, sizeof buf, "%s_%04d", task_name(task).c_str(), i);
            ManifestEntry entry{buf, task, pair.params};
            write_png(clean_path(dir, entry.id), pair.clean);
            write_png(degraded_path(dir, entry.id), pair.degraded);

            json jp(entry.params);
            if (pair.nonstandard) jp["nonstandard"] = 1;
            mf << json{{"id", entry.id}, {"task", task_name(task)}, {"params", jp}}.dump()
               << "\n";
            manifest.entries.push_back(std::move(entry));
            manifest.task_counts[task] += 1;
        }
    }
    return manifest;
}

DatasetManifest load_manifest(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.jsonl");
    if (!mf) throw IoError("cannot open manifest.jsonl in " + dir);
    DatasetManifest manifest;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        ManifestEntry entry;
        entry.id = j.at("id").get<std::string>();
        entry.task = task_from_name(j.at("task").get<std::string>());
        for (const auto& [key, value] : j.at("params").items())
            entry.params[key] = value.get<Real>();
        for (const std::string& p : {clean_path(dir, entry.id), degraded_path(dir, entry.id)})
            if (!fs::exists(p)) throw IoError("manifest references missing image: " + p);
        manifest.task_counts[entry.task] += 1;
        manifest.entries.push_back(std::move(entry));
    }
    if (manifest.entries.empty()) throw IoError("manifest.jsonl in " + dir + " is empty");
    return manifest;
}

}  // namespace catair
