#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asa/fusion_model.hpp"
#include "asa/pipeline.hpp"
#include "asa/split_engine.hpp"

namespace asa {

// Sample Pearson correlation. Requires |x| == |y| >= 2; returns nullopt when
// either sequence is constant (undefined correlation). Symmetric and
// invariant under positive affine transforms of either argument.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

enum class EvalSubset { UserTest, ItemTest };

std::string subset_name(EvalSubset s);

// Per-criterion PCC over one test subset, criteria pooled across every
// sample where they apply. avg is the unweighted mean of the defined
// per-criterion values; undefined criteria are excluded and counted.
struct EvalHalf {
    std::array<std::optional<double>, kNumCriteria> per_criterion;
    std::array<int, kNumCriteria> n_pairs{};
    std::optional<double> avg;
    int n_samples = 0;
    int n_undefined = 0;
};

struct ScoreReport {
    EvalHalf known;    // user-test subset
    EvalHalf unknown;  // item-test subset
    std::string config_fingerprint;
};

using Predictor = std::function<std::array<double, kNumCriteria>(const ResponseSample&)>;

// Runs the model forward without gradients.
Predictor model_predictor(const FusionModel& model, Pipeline& pipeline);

// Replays gold scores; a harness sanity baseline with PCC exactly 1.
Predictor gold_replay_predictor(Pipeline& pipeline);

EvalHalf evaluate(const Predictor& predictor, Pipeline& pipeline, const SplitPlan& plan,
                  EvalSubset subset);

ScoreReport score_report(const Predictor& predictor, Pipeline& pipeline, const SplitPlan& plan,
                         const std::string& config_fingerprint = "");

struct VariantReport {
    std::string label;
    ScoreReport report;
};

// Evaluates every variant on both subsets, preserving input order.
std::vector<VariantReport> coldstart_report(
    const std::vector<std::pair<std::string, Predictor>>& variants, Pipeline& pipeline,
    const SplitPlan& plan);

// Aligned text table: variant, avg PCC known, avg PCC unknown, gap.
std::string format_report_table(const std::vector<VariantReport>& reports);

// Stable CSV schema: variant,criterion,subset,pcc,n with criterion rows
// p/is/gv/c/rc plus one avg row per subset; pcc is empty when undefined.
std::string format_report_csv(const std::vector<VariantReport>& reports);

}  // namespace asa
