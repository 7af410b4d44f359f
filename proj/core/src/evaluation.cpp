#include "asa/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace asa {

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
    const std::size_t n = x.size();
    if (n < 2) throw std::invalid_argument("pearson: need at least 2 points");

    double mean_x = 0.0, mean_y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_x += x[i];
        mean_y += y[i];
    }
    mean_x /= static_cast<double>(n);
    mean_y /= static_cast<double>(n);

    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mean_x;
        const double dy = y[i] - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;  // constant sequence
    const double r = sxy / std::sqrt(sxx * syy);
    return std::clamp(r, -1.0, 1.0);
}

std::string subset_name(EvalSubset s) {
    return s == EvalSubset::UserTest ? "known" : "unknown";
}

Predictor model_predictor(const FusionModel& model, Pipeline& pipeline) {
    return [&model, &pipeline](const ResponseSample& sample) {
        ForwardCache cache;
        return model.forward(pipeline.input(sample), &cache);
    };
}

Predictor gold_replay_predictor(Pipeline& pipeline) {
    return [&pipeline](const ResponseSample& sample) { return pipeline.gold_row(sample); };
}

EvalHalf evaluate(const Predictor& predictor, Pipeline& pipeline, const SplitPlan& plan,
                  EvalSubset subset) {
    const auto& ids = subset == EvalSubset::UserTest ? plan.usertest_ids : plan.itemtest_ids;
    if (ids.empty()) {
        throw ValidationError("evaluation subset '" + subset_name(subset) + "' is empty");
    }

    std::array<std::vector<double>, kNumCriteria> pred_pool, gold_pool;
    EvalHalf half;
    // Manifest order keeps the pooled reduction bitwise reproducible.
    for (const auto& e : pipeline.manifest().entries) {
        if (!ids.count(e.response_id)) continue;
        ++half.n_samples;
        const auto preds = predictor(e);
        const auto golds = pipeline.gold_row(e);
        const auto mask = pipeline.mask_row(e);
        for (std::size_t c = 0; c < kNumCriteria; ++c) {
            if (mask[c] == 0.0) continue;
            pred_pool[c].push_back(preds[c]);
            gold_pool[c].push_back(golds[c]);
        }
    }
    if (half.n_samples != static_cast<int>(ids.size())) {
        throw ValidationError("plan subset references ids missing from the manifest");
    }

    double sum = 0.0;
    int defined = 0;
    for (std::size_t c = 0; c < kNumCriteria; ++c) {
        half.n_pairs[c] = static_cast<int>(pred_pool[c].size());
        if (pred_pool[c].size() < 2) {
            ++half.n_undefined;
            continue;
        }
        const auto r = pearson(pred_pool[c], gold_pool[c]);
        if (!r) {
            ++half.n_undefined;
            continue;
        }
        half.per_criterion[c] = *r;
        sum += *r;
        ++defined;
    }
    if (defined > 0) half.avg = sum / defined;
    return half;
}

ScoreReport score_report(const Predictor& predictor, Pipeline& pipeline, const SplitPlan& plan,
                         const std::string& config_fingerprint) {
    ScoreReport report;
    report.known = evaluate(predictor, pipeline, plan, EvalSubset::UserTest);
    report.unknown = evaluate(predictor, pipeline, plan, EvalSubset::ItemTest);
    report.config_fingerprint = config_fingerprint;
    return report;
}

std::vector<VariantReport> coldstart_report(
    const std::vector<std::pair<std::string, Predictor>>& variants, Pipeline& pipeline,
    const SplitPlan& plan) {
    if (variants.empty()) throw ValidationError("coldstart report needs at least one variant");
    std::vector<VariantReport> out;
    out.reserve(variants.size());
    for (const auto& [label, predictor] : variants) {
        out.push_back({label, score_report(predictor, pipeline, plan)});
    }
    return out;
}

namespace {

std::string fmt_opt(const std::optional<double>& v, const char* fmt) {
    if (!v) return "-";
    char buf[64];
    std::snprintf(buf, sizeof(buf), fmt, *v);
    return buf;
}

}  // namespace

std::string format_report_table(const std::vector<VariantReport>& reports) {
    std::size_t label_w = 7;
    for (const auto& r : reports) label_w = std::max(label_w, r.label.size());
    std::ostringstream os;
    os << std::string(label_w, ' ') << "  avg PCC known  avg PCC unknown  gap\n";
    for (const auto& r : reports) {
        std::string label = r.label;
        label.resize(label_w, ' ');
        std::optional<double> gap;
        if (r.report.known.avg && r.report.unknown.avg) {
            gap = *r.report.known.avg - *r.report.unknown.avg;
        }
        os << label << "  " << fmt_opt(r.report.known.avg, "%13.4f") << "  "
           << fmt_opt(r.report.unknown.avg, "%15.4f") << "  " << fmt_opt(gap, "%+.4f") << "\n";
    }
    return os.str();
}

std::string format_report_csv(const std::vector<VariantReport>& reports) {
    std::ostringstream os;
    os << "variant,criterion,subset,pcc,n\n";
    auto emit_half = [&os](const std::string& label, const EvalHalf& half,
                           const std::string& subset) {
        for (std::size_t c = 0; c < kNumCriteria; ++c) {
            os << label << "," << criterion_code(static_cast<Criterion>(c)) << "," << subset
               << ",";
            if (half.per_criterion[c]) {
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%.17g", *half.per_criterion[c]);
                os << buf;
            }
            os << "," << half.n_pairs[c] << "\n";
        }
        os << label << ",avg," << subset << ",";
        if (half.avg) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", *half.avg);
            os << buf;
        }
        os << "," << half.n_samples << "\n";
    };
    for (const auto& r : reports) {
        emit_half(r.label, r.report.known, "known");
        emit_half(r.label, r.report.unknown, "unknown");
    }
    return os.str();
}

}  // namespace asa
