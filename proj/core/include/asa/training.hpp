#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "asa/fusion_model.hpp"
#include "asa/pipeline.hpp"
#include "asa/split_engine.hpp"

namespace asa {

// A batch of candidate loss rows never produced a usable loss (every entry
// masked). Callers skip the batch rather than divide by zero.
class DegenerateBatchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// loss = sum(mask * (pred - gold)^2) / sum(mask). Gradients w.r.t. pred are
// written to dpreds when given; masked entries get exactly zero and the gold
// values there never enter the computation.
double masked_mse(const std::vector<std::array<double, kNumCriteria>>& preds,
                  const std::vector<std::array<double, kNumCriteria>>& golds,
                  const std::vector<std::array<double, kNumCriteria>>& masks,
                  std::vector<std::array<double, kNumCriteria>>* dpreds = nullptr);

struct RAdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Rectified Adam. Below the tractability threshold (rho_t <= 4) the update
// falls back to a plain bias-corrected momentum step with no adaptive
// denominator. Frozen tensors are skipped entirely: no moment update, no
// parameter change.
class RAdamOptimizer {
public:
    explicit RAdamOptimizer(RAdamHyper hyper = {});

    void attach(const FusionModel& model);  // sizes moments to the registry
    void step(FusionModel& model);          // consumes accumulated grads

    std::int64_t step_count() const { return t_; }
    const RAdamHyper& hyper() const { return hyper_; }

    void save(const std::filesystem::path& path) const;
    void load(const std::filesystem::path& path, const FusionModel& model);

private:
    RAdamHyper hyper_;
    std::int64_t t_ = 0;
    std::vector<Mat> m_;
    std::vector<Mat> v_;
};

struct TrainConfig {
    int batch_size = 4;
    int epochs = 1;
    std::uint64_t seed = 1;
    bool shuffle = true;
    bool grad_check_mode = false;  // arithmetic is always f64; disables dropout
    RAdamHyper optimizer;
    int patience = 0;  // >0 stops after this many epochs without val improvement
    std::filesystem::path metrics_csv;      // per-epoch CSV, optional
    std::filesystem::path checkpoint_path;  // written at every epoch boundary, optional
};

struct FitResult {
    std::vector<double> epoch_loss;  // mean train loss per epoch
    std::vector<double> val_loss;    // user-test loss per epoch (when tracked)
    std::int64_t steps = 0;
    int epochs_run = 0;
    bool early_stopped = false;
};

// Seeded mini-batch training over the plan's train ids. Shuffling and
// dropout derive from (seed, epoch), so a run resumed from an epoch-boundary
// checkpoint continues bit-identically. start_epoch > 0 resumes.
FitResult fit(FusionModel& model, Pipeline& pipeline, const SplitPlan& plan,
              const TrainConfig& cfg, RAdamOptimizer* optimizer = nullptr,
              int start_epoch = 0);

}  // namespace asa
