#include "catair/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <nlohmann/json.hpp>

#include "catair/common.hpp"
#include "catair/image_io.hpp"

namespace catair {

using json = nlohmann::json;

Real psnr(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ConfigError("psnr: shape mismatch");
    Real se = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        Real d = a.data()[i] - b.data()[i];
        se += d * d;
    }
    Real mse = se / static_cast<Real>(a.numel());
    if (mse == 0) return std::numeric_limits<Real>::infinity();
    return Real(10) * std::log10(Real(1) / mse);
}

namespace {

std::vector<Real> gaussian_window_11() {
    constexpr int k = 11;
    constexpr Real sigma = 1.5;
    std::vector<Real> w(k * k);
    Real sum = 0;
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
            Real dy = y - 5, dx = x - 5;
            Real v = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
            w[y * k + x] = v;
            sum += v;
        }
    for (Real& v : w) v /= sum;
    return w;
}

}  // namespace

Real ssim(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ConfigError("ssim: shape mismatch");
    if (a.rank() != 3) throw ConfigError("ssim: expected [H,W,C]");
    const int64_t h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
    constexpr int k = 11;
    if (h < k || w < k) throw ConfigError("ssim: image smaller than 11x11 window");
    static const std::vector<Real> win = gaussian_window_11();
    constexpr Real c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

    Real total = 0;
    for (int64_t ch = 0; ch < c; ++ch) {
        Real acc = 0;
        int64_t n = 0;
        for (int64_t y = 0; y + k <= h; ++y) {
            for (int64_t x = 0; x + k <= w; ++x) {
                Real ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) {
                        Real wt = win[dy * k + dx];
                        Real va = a.at(y + dy, x + dx, ch);
                        Real vb = b.at(y + dy, x + dx, ch);
                        ma += wt * va;
                        mb += wt * vb;
                        maa += wt * (va * va);
                        mbb += wt * (vb * vb);
                        mab += wt * (va * vb);  // grouping keeps ssim exactly symmetric
                    }
                Real va = maa - ma * ma, vb = mbb - mb * mb, cov = mab - ma * mb;
                Real num = (2 * ma * mb + c1) * (2 * cov + c2);
                Real den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                acc += num / den;
                ++n;
            }
        }
        total += acc / static_cast<Real>(n);
    }
    return total / static_cast<Real>(c);
}

namespace {

json score_json(const TaskScore& s) {
    json j;
    if (std::isinf(s.psnr_mean()))
        j["psnr"] = "inf";
    else
        j["psnr"] = s.psnr_mean();
    j["ssim"] = s.ssim_mean();
    j["count"] = s.count;
    return j;
}

}  // namespace

std::string EvalResult::to_json() const {
    json j;
    for (const auto& [task, score] : per_task) j["per_task"][task] = score_json(score);
    j["overall"] = score_json(overall);
    return j.dump(2);
}

EvalResult evaluate(CatAIRModel& model, const std::string& dataset_dir, Real gamma) {
    DatasetManifest manifest = load_manifest(dataset_dir);
    NoGradGuard ng;
    ForwardOptions opt;
    opt.gamma = gamma;
    opt.train = false;
    EvalResult res;
    for (const ManifestEntry& e : manifest.entries) {
        Tensor clean = read_png(clean_path(dataset_dir, e.id));
        Tensor degraded = read_png(degraded_path(dataset_dir, e.id));
        Tensor batch = degraded.reshaped({1, degraded.shape()[0], degraded.shape()[1], 3});
        ForwardResult fwd = model.forward(Var(batch), opt);
        Tensor out = fwd.output.val();
        Tensor restored({clean.shape()[0], clean.shape()[1], 3});
        for (int64_t i = 0; i < restored.numel(); ++i)
            restored.data()[i] = std::clamp(out.data()[i], Real(0), Real(1));
        Real p = psnr(restored, clean);
        Real s = ssim(restored, clean);
        TaskScore& ts = res.per_task[task_name(e.task)];
        ts.psnr_sum += p;
        ts.ssim_sum += s;
        ts.count += 1;
        res.overall.psnr_sum += p;
        res.overall.ssim_sum += s;
        res.overall.count += 1;
    }
    if (res.overall.count == 0) throw IoError("evaluate: dataset manifest is empty");
    return res;
}

}  // namespace catair
