#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxattn/backbone.hpp"
#include "voxattn/checkpoint.hpp"
#include "voxattn/detect.hpp"
#include "voxattn/scene.hpp"

namespace vx {

// Adam with decoupled weight decay; decay touches rank >= 2 weights only.
class AdamW {
   public:
    AdamW(std::vector<NamedParam> params, double lr, double weight_decay);
    void step();  // applies accumulated grads, then clears them
    double lr = 2e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;

   private:
    std::vector<NamedParam> params_;
    std::vector<std::vector<double>> m_, v_;
    i64 t_ = 0;
};

struct ToyModel {
    SceneSpec scene;
    BackboneConfig cfg;
    DetectConfig det;
    BackboneParams backbone;
    BevCnnParams bev;
    Array seg_w, seg_b;
    Array head_w, head_b;
    std::vector<Box3D> anchors;

    void collect(std::vector<NamedParam>& params, std::vector<NamedParam>& buffers);
};

ToyModel make_toy_model(std::uint64_t seed, const SceneSpec& scene);

struct HeadOutputs {
    Array seg;  // n x 1
    Array cls;  // A x 1
    Array reg;  // A x 7
    Array dir;  // A x 1
};

HeadOutputs toy_forward(Tape* tape, ToyModel& model, const PointCloud& pc, bool training);

struct Detections {
    std::vector<Box3D> boxes;
    std::vector<double> scores;
};

Detections predict_scene(ToyModel& model, const PointCloud& pc);

struct TrainToyConfig {
    i64 steps = 2000;
    double lr = 1e-3;
    double weight_decay = 0.01;
    i64 eval_every = 100;
    i64 eval_scenes = 8;
    i64 final_eval_scenes = 50;
    SceneSpec scene;

    void validate() const;
    static TrainToyConfig from_config(const KvConfig& cfg);
};

struct MetricsRow {
    i64 step;
    double total, seg, cls, reg, dir, recall;
};

struct TrainResult {
    std::vector<MetricsRow> history;
    EvalResult final_eval;
    double step0_loss = 0, final_loss = 0;
};

// Deterministic per seed. Scene streams: training derive_seed(seed, 100000+i),
// probe eval 500000+i, held-out eval 900000+i. metrics_path empty -> no file.
TrainResult train_toy(ToyModel& model, const TrainToyConfig& cfg, std::uint64_t seed,
                      const std::string& metrics_path);

EvalResult evaluate_model(ToyModel& model, i64 n_scenes, std::uint64_t seed_base);

Checkpoint model_checkpoint(ToyModel& model);
ToyModel model_from_checkpoint(const Checkpoint& ck);

}  // namespace vx
