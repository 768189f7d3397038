#pragma once

#include <map>
#include <string>
#include <vector>

#include "catair/rng.hpp"
#include "catair/tensor.hpp"

namespace catair {

enum class Task { denoise, derain, dehaze, deblur, lowlight };

const std::vector<Task>& all_tasks();
std::string task_name(Task t);
Task task_from_name(const std::string& name);

struct DegradedPair {
    Tensor clean;     // [H, W, 3] in [0,1]
    Tensor degraded;  // same shape, clamped to [0,1]
    Task task = Task::denoise;
    std::map<std::string, Real> params;  // generator settings, echoed to the manifest
    bool nonstandard = false;            // parameter outside the reference protocol
};

// Procedural clean image: smooth color gratings plus soft-edged shapes, so the
// restorers see both flat regions and edges. Deterministic in (h, w, seed).
Tensor synth_clean(int h, int w, std::uint64_t seed);

// All generators are pure in (clean, params, seed) and clamp to [0,1].
DegradedPair gen_noise(const Tensor& clean, Real sigma, std::uint64_t seed);
DegradedPair gen_rain(const Tensor& clean, Real density, Real angle_deg, std::uint64_t seed);
DegradedPair gen_haze(const Tensor& clean, Real transmission, Real airlight);
DegradedPair gen_blur(const Tensor& clean, Real length, Real angle_deg);
DegradedPair gen_lowlight(const Tensor& clean, Real gamma, Real scale);

// Normalized linear motion kernel (sums to 1), exposed for tests.
Tensor motion_kernel(Real length, Real angle_deg);

// Draws task parameters from the task's default ranges and runs the matching
// generator; the sampling is deterministic in seed.
DegradedPair gen_for_task(const Tensor& clean, Task task, std::uint64_t seed);

struct DatasetRequest {
    int h = 64, w = 64;
    std::uint64_t seed = 0;
    std::vector<std::pair<Task, int>> counts;  // pairs per task
};

struct ManifestEntry {
    std::string id;
    Task task = Task::denoise;
    std::map<std::string, Real> params;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::uint64_t seed = 0;
    std::map<Task, int> task_counts;
};

// Writes <dir>/clean/<id>.png, <dir>/degraded/<id>.png and <dir>/manifest.jsonl
// (one JSON object per line). Identical requests produce identical bytes.
DatasetManifest build_dataset(const DatasetRequest& request, const std::string& dir);

// Reads manifest.jsonl back; image pixels are loaded lazily by callers via the
// conventional paths.
DatasetManifest load_manifest(const std::string& dir);

std::string clean_path(const std::string& dir, const std::string& id);
std::string degraded_path(const std::string& dir, const std::string& id);

}  // namespace catair
