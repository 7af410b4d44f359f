#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "asa/dataset_io.hpp"
#include "asa/evaluation.hpp"
#include "asa/fusion_model.hpp"
#include "asa/pipeline.hpp"
#include "asa/run_config.hpp"
#include "asa/split_engine.hpp"
#include "asa/training.hpp"

namespace {

namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct CommonOpts {
    std::string workdir = ".";
    std::string config_path;
    std::vector<std::string> overrides;
};

asa::RunConfig load_run_config(const CommonOpts& opts) {
    asa::RunConfig rc;
    if (!opts.config_path.empty()) {
        fs::path p = opts.config_path;
        if (!p.is_absolute()) p = fs::path(opts.workdir) / p;
        rc = asa::RunConfig::from_file(p);
    }
    for (const auto& o : opts.overrides) rc.apply_override(o);
    return rc;
}

fs::path in_workdir(const CommonOpts& opts, const std::string& rel) {
    fs::path p = rel;
    if (p.is_absolute()) return p;
    return fs::path(opts.workdir) / p;
}

void log_fingerprint(const asa::RunConfig& rc) {
    std::cout << "config fingerprint: " << rc.fingerprint() << "\n";
}

void write_resolved_next_to(const asa::RunConfig& rc, const CommonOpts& opts,
                            const std::string& command) {
    rc.write_resolved(in_workdir(opts, command + ".resolved.cfg"));
}

int cmd_synth(const CommonOpts& opts) {
    const asa::RunConfig rc = load_run_config(opts);
    log_fingerprint(rc);
    const auto out_dir = in_workdir(opts, rc.str("io.data_dir"));
    const auto generated = asa::generate_synthetic(rc.synthesis_config(), out_dir);
    write_resolved_next_to(rc, opts, "synth");
    std::cout << "wrote " << generated.manifest.entries.size() << " samples across "
              << generated.manifest.testsets.size() << " testsets to " << out_dir.string()
              << "\n";
    return kExitOk;
}

int cmd_split(const CommonOpts& opts, const std::string& verify_path) {
    const asa::RunConfig rc = load_run_config(opts);
    log_fingerprint(rc);
    const auto manifest = asa::load_manifest(in_workdir(opts, rc.str("io.manifest")));

    if (!verify_path.empty()) {
        const auto plan = asa::load_split_plan(in_workdir(opts, verify_path));
        const auto violations = asa::verify_split(plan, manifest);
        if (!violations.empty()) {
            for (const auto& v : violations) std::cerr << "violation: " << v << "\n";
            return kExitValidation;
        }
        std::cout << "plan verified: " << plan.train_ids.size() << " train, "
                  << plan.usertest_ids.size() << " user-test, " << plan.itemtest_ids.size()
                  << " item-test\n";
        return kExitOk;
    }

    const auto plan = asa::make_split_plan(manifest, rc.get_int("split.n_coldstart_sets"),
                                           rc.get_double("split.user_ratio"),
                                           rc.get_u64("split.seed"));
    const auto violations = asa::verify_split(plan, manifest);
    if (!violations.empty()) {
        for (const auto& v : violations) std::cerr << "violation: " << v << "\n";
        std::cerr << "refusing to write an unverified plan\n";
        return kExitValidation;
    }
    asa::save_split_plan(plan, in_workdir(opts, rc.str("io.plan")));
    write_resolved_next_to(rc, opts, "split");
    std::cout << "plan: " << plan.coldstart_testsets.size() << " cold-start testsets, "
              << plan.train_speakers.size() << " train / " << plan.test_speakers.size()
              << " test speakers, " << plan.train_ids.size() << " train / "
              << plan.usertest_ids.size() << " user-test / " << plan.itemtest_ids.size()
              << " item-test samples\n";
    return kExitOk;
}

int cmd_train(const CommonOpts& opts, bool resume) {
    const asa::RunConfig rc = load_run_config(opts);
    log_fingerprint(rc);
    const auto manifest = asa::load_manifest(in_workdir(opts, rc.str("io.manifest")));
    const auto plan = asa::load_split_plan(in_workdir(opts, rc.str("io.plan")));
    {
        const auto violations = asa::verify_split(plan, manifest);
        if (!violations.empty()) {
            for (const auto& v : violations) std::cerr << "violation: " << v << "\n";
            return kExitValidation;
        }
    }

    asa::TrainConfig tc = rc.train_config();
    tc.metrics_csv = in_workdir(opts, rc.str("io.metrics"));
    tc.checkpoint_path = in_workdir(opts, rc.str("io.checkpoint"));

    int start_epoch = 0;
    asa::RAdamOptimizer optimizer(tc.optimizer);
    std::unique_ptr<asa::FusionModel> model;
    if (resume) {
        auto loaded = asa::load_checkpoint(tc.checkpoint_path);
        model = std::make_unique<asa::FusionModel>(std::move(loaded.model));
        optimizer.load(tc.checkpoint_path.string() + ".opt", *model);
        start_epoch = std::stoi(loaded.extra.at("epoch"));
        std::cout << "resuming from epoch " << start_epoch << "\n";
    } else {
        model = std::make_unique<asa::FusionModel>(rc.model_config());
    }

    asa::Pipeline pipeline(manifest, model->config());
    const auto result = asa::fit(*model, pipeline, plan, tc, &optimizer, start_epoch);
    write_resolved_next_to(rc, opts, "train");
    if (!result.epoch_loss.empty()) {
        std::printf("trained %d epochs (%lld steps), final mean loss %.6f\n", result.epochs_run,
                    static_cast<long long>(result.steps), result.epoch_loss.back());
    } else {
        std::cout << "no epochs to run\n";
    }
    std::cout << "checkpoint: " << tc.checkpoint_path.string() << "\n";
    return kExitOk;
}

int cmd_eval(const CommonOpts& opts, bool gold_replay) {
    const asa::RunConfig rc = load_run_config(opts);
    log_fingerprint(rc);
    const auto manifest = asa::load_manifest(in_workdir(opts, rc.str("io.manifest")));
    const auto plan = asa::load_split_plan(in_workdir(opts, rc.str("io.plan")));

    std::vector<asa::VariantReport> reports;
    if (gold_replay) {
        asa::Pipeline pipeline(manifest, rc.model_config());
        reports = asa::coldstart_report({{"gold-replay", asa::gold_replay_predictor(pipeline)}},
                                        pipeline, plan);
    } else {
        auto loaded = asa::load_checkpoint(in_workdir(opts, rc.str("io.checkpoint")));
        asa::Pipeline pipeline(manifest, loaded.model.config());
        reports = asa::coldstart_report(
            {{"model", asa::model_predictor(loaded.model, pipeline)}}, pipeline, plan);
    }

    const auto csv_path = in_workdir(opts, rc.str("io.report_prefix") + ".csv");
    std::ofstream os(csv_path, std::ios::binary);
    os << asa::format_report_csv(reports);
    std::cout << asa::format_report_table(reports);
    std::cout << "report csv: " << csv_path.string() << "\n";
    for (const auto& r : reports) {
        if (!r.report.known.avg && !r.report.unknown.avg) {
            std::cerr << "variant '" << r.label << "' has no defined correlations\n";
            return kExitValidation;
        }
    }
    return kExitOk;
}

int cmd_report(const CommonOpts& opts, const std::vector<std::string>& checkpoints) {
    const asa::RunConfig rc = load_run_config(opts);
    log_fingerprint(rc);
    const auto manifest = asa::load_manifest(in_workdir(opts, rc.str("io.manifest")));
    const auto plan = asa::load_split_plan(in_workdir(opts, rc.str("io.plan")));

    // Each variant owns its pipeline: configs may disagree on backends.
    std::vector<std::unique_ptr<asa::FusionModel>> models;
    std::vector<std::unique_ptr<asa::Pipeline>> pipelines;
    std::vector<asa::VariantReport> reports;
    for (const auto& spec : checkpoints) {
        const std::size_t eq = spec.find('=');
        const std::string label = eq == std::string::npos ? spec : spec.substr(0, eq);
        const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
        auto loaded = asa::load_checkpoint(in_workdir(opts, path));
        models.push_back(std::make_unique<asa::FusionModel>(std::move(loaded.model)));
        pipelines.push_back(std::make_unique<asa::Pipeline>(manifest, models.back()->config()));
        reports.push_back(
            {label, asa::score_report(asa::model_predictor(*models.back(), *pipelines.back()),
                                      *pipelines.back(), plan)});
    }

    const auto csv_path = in_workdir(opts, rc.str("io.report_prefix") + ".csv");
    std::ofstream os(csv_path, std::ios::binary);
    os << asa::format_report_csv(reports);
    std::cout << asa::format_report_table(reports);
    std::cout << "report csv: " << csv_path.string() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Speech-scoring experiment pipeline: synthesize data, build cold-start "
                 "splits, train the fusion model, evaluate PCC reports"};
    app.require_subcommand(1);

    CommonOpts opts;
    app.add_option("--workdir", opts.workdir, "directory that relative paths resolve against");
    app.add_option("--config", opts.config_path, "key = value configuration file");
    app.add_option("--set", opts.overrides, "override a config key, key=value")
        ->take_all();

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    auto* split = app.add_subcommand("split", "build and verify a cold-start split plan");
    std::string verify_path;
    split->add_option("--verify", verify_path, "verify an existing plan instead of building one");
    auto* train = app.add_subcommand("train", "train the fusion model");
    bool resume = false;
    train->add_flag("--resume", resume, "resume from the configured checkpoint");
    bool freeze = true, use_qtype = true, use_transcript = true;
    std::string context_encoder;
    train->add_flag("--freeze-backbone,!--no-freeze-backbone", freeze,
                    "freeze the acoustic backbone parameters");
    train->add_flag("--use-qtype-embedding,!--no-use-qtype-embedding", use_qtype,
                    "enable the question-type token");
    train->add_flag("--use-transcript-embedding,!--no-use-transcript-embedding", use_transcript,
                    "enable the transcript block");
    train->add_option("--context-encoder", context_encoder,
                      "context backend: none|mock|precomputed|external");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on both test subsets");
    bool gold_replay = false;
    eval->add_flag("--gold-replay", gold_replay, "score the gold-replay baseline instead");
    auto* report = app.add_subcommand("report", "compare several checkpoints");
    std::vector<std::string> checkpoints;
    report->add_option("--checkpoint", checkpoints, "label=path of a checkpoint to compare")
        ->take_all();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (synth->parsed()) return cmd_synth(opts);
        if (split->parsed()) return cmd_split(opts, verify_path);
        if (train->parsed()) {
            if (train->count("--freeze-backbone") || train->count("--no-freeze-backbone")) {
                opts.overrides.push_back(std::string("model.freeze_backbone=") +
                                         (freeze ? "true" : "false"));
            }
            if (train->count("--use-qtype-embedding") ||
                train->count("--no-use-qtype-embedding")) {
                opts.overrides.push_back(std::string("model.use_qtype_embedding=") +
                                         (use_qtype ? "true" : "false"));
            }
            if (train->count("--use-transcript-embedding") ||
                train->count("--no-use-transcript-embedding")) {
                opts.overrides.push_back(std::string("model.use_transcript_embedding=") +
                                         (use_transcript ? "true" : "false"));
            }
            if (!context_encoder.empty()) {
                opts.overrides.push_back("model.context=" + context_encoder);
            }
            return cmd_train(opts, resume);
        }
        if (eval->parsed()) return cmd_eval(opts, gold_replay);
        if (report->parsed()) {
            if (checkpoints.empty()) {
                std::cerr << "report requires at least one --checkpoint label=path\n";
                return kExitUsage;
            }
            return cmd_report(opts, checkpoints);
        }
        return kExitUsage;
    } catch (const asa::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const asa::CapabilityError& e) {
        std::cerr << "capability error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
