#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "asa/dataset_io.hpp"

namespace asa {

// Assignment of every sample to train / user-test (known content) /
// item-test (unknown content). Samples by speakers who answered both
// cold-start and training content are excluded from all three buckets so
// that item-test shares neither content nor testers with training.
struct SplitPlan {
    std::set<std::string> train_ids;
    std::set<std::string> usertest_ids;
    std::set<std::string> itemtest_ids;
    std::set<std::string> coldstart_testsets;
    std::set<std::string> train_speakers;
    std::set<std::string> test_speakers;
    std::uint64_t seed = 0;
};

// Builds a plan: n_coldstart_sets testsets are drawn uniformly (seeded) and
// their samples form the item-test bucket; speakers exclusive to the
// remaining testsets are partitioned user_ratio : 1-user_ratio into train
// and user-test speakers. Deterministic in seed.
SplitPlan make_split_plan(const DatasetManifest& manifest, int n_coldstart_sets,
                          double user_ratio, std::uint64_t seed);

// Checks every plan invariant against the manifest. Returns one message per
// violation; empty means the plan is sound. Unknown response ids throw.
std::vector<std::string> verify_split(const SplitPlan& plan, const DatasetManifest& manifest);

void save_split_plan(const SplitPlan& plan, const std::filesystem::path& path);
SplitPlan load_split_plan(const std::filesystem::path& path);

}  // namespace asa
