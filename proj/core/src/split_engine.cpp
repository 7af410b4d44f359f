#include "asa/split_engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "asa/rng.hpp"

namespace asa {

SplitPlan make_split_plan(const DatasetManifest& manifest, int n_coldstart_sets,
                          double user_ratio, std::uint64_t seed) {
    if (n_coldstart_sets < 0) throw ValidationError("n_coldstart_sets must be >= 0");
    if (!(user_ratio > 0.0 && user_ratio <= 1.0)) {
        throw ValidationError("user_ratio must lie in (0, 1]");
    }
    const int n_testsets = static_cast<int>(manifest.testsets.size());
    if (n_coldstart_sets >= n_testsets && !(n_coldstart_sets == 0 && n_testsets == 0)) {
        throw ValidationError("n_coldstart_sets " + std::to_string(n_coldstart_sets) +
                              " must be smaller than the testset count " +
                              std::to_string(n_testsets));
    }

    SplitPlan plan;
    plan.seed = seed;

    Rng rng(hash_combine(seed, fnv1a64("split")));
    std::vector<std::string> pool = manifest.testsets;
    rng.shuffle(pool);
    for (int i = 0; i < n_coldstart_sets; ++i) plan.coldstart_testsets.insert(pool[static_cast<std::size_t>(i)]);

    // Speakers with any cold-start answer are cold-start speakers; only
    // speakers exclusive to training content enter the train/user-test pool.
    std::set<std::string> cold_speakers;
    for (const auto& e : manifest.entries) {
        if (plan.coldstart_testsets.count(e.prompt.testset_id)) {
            cold_speakers.insert(e.speaker_id);
        }
    }
    std::vector<std::string> pool_speakers;
    {
        std::set<std::string> seen;
        for (const auto& e : manifest.entries) {
            if (plan.coldstart_testsets.count(e.prompt.testset_id)) continue;
            if (cold_speakers.count(e.speaker_id)) continue;
            if (seen.insert(e.speaker_id).second) pool_speakers.push_back(e.speaker_id);
        }
    }
    if (user_ratio < 1.0 && pool_speakers.size() < 2) {
        throw ValidationError("need at least 2 speakers outside the cold-start pool to split, have " +
                              std::to_string(pool_speakers.size()));
    }

    rng.shuffle(pool_speakers);
    std::size_t n_train = static_cast<std::size_t>(
        std::llround(user_ratio * static_cast<double>(pool_speakers.size())));
    if (user_ratio < 1.0) {
        n_train = std::min(n_train, pool_speakers.size() - 1);
        n_train = std::max<std::size_t>(n_train, 1);
    } else {
        n_train = pool_speakers.size();
    }
    for (std::size_t i = 0; i < pool_speakers.size(); ++i) {
        if (i < n_train) {
            plan.train_speakers.insert(pool_speakers[i]);
        } else {
            plan.test_speakers.insert(pool_speakers[i]);
        }
    }

    for (const auto& e : manifest.entries) {
        if (plan.coldstart_testsets.count(e.prompt.testset_id)) {
            // Cold-start content; testers are disjoint from the train pool by
            // construction of pool_speakers.
            plan.itemtest_ids.insert(e.response_id);
        } else if (plan.train_speakers.count(e.speaker_id)) {
            plan.train_ids.insert(e.response_id);
        } else if (plan.test_speakers.count(e.speaker_id)) {
            plan.usertest_ids.insert(e.response_id);
        }
        // Remaining samples are training content answered by cold-start
        // speakers: excluded from every bucket.
    }
    return plan;
}

std::vector<std::string> verify_split(const SplitPlan& plan, const DatasetManifest& manifest) {
    std::vector<std::string> violations;

    std::map<std::string, const ResponseSample*> by_id;
    for (const auto& e : manifest.entries) by_id[e.response_id] = &e;

    auto lookup = [&](const std::string& id) -> const ResponseSample& {
        auto it = by_id.find(id);
        if (it == by_id.end()) {
            throw ValidationError("plan references unknown response_id '" + id + "'");
        }
        return *it->second;
    };

    auto overlap = [&](const std::set<std::string>& a, const std::set<std::string>& b,
                       const std::string& what) {
        for (const auto& id : a) {
            if (b.count(id)) {
                violations.push_back(what + ": '" + id + "'");
                return;
            }
        }
    };
    overlap(plan.train_ids, plan.usertest_ids, "train/user-test id overlap");
    overlap(plan.train_ids, plan.itemtest_ids, "train/item-test id overlap");
    overlap(plan.usertest_ids, plan.itemtest_ids, "user-test/item-test id overlap");

    std::set<std::string> speakers_train, speakers_usertest, speakers_itemtest;
    for (const auto& id : plan.train_ids) {
        const auto& e = lookup(id);
        speakers_train.insert(e.speaker_id);
        if (plan.coldstart_testsets.count(e.prompt.testset_id)) {
            violations.push_back("content overlap: train sample '" + id +
                                 "' lies on cold-start testset " + e.prompt.testset_id);
        }
        if (!plan.train_speakers.count(e.speaker_id)) {
            violations.push_back("train sample '" + id + "' by speaker '" + e.speaker_id +
                                 "' outside train_speakers");
        }
    }
    for (const auto& id : plan.usertest_ids) {
        const auto& e = lookup(id);
        speakers_usertest.insert(e.speaker_id);
        if (plan.coldstart_testsets.count(e.prompt.testset_id)) {
            violations.push_back("content overlap: user-test sample '" + id +
                                 "' lies on cold-start testset " + e.prompt.testset_id);
        }
        if (!plan.test_speakers.count(e.speaker_id)) {
            violations.push_back("user-test sample '" + id + "' by speaker '" + e.speaker_id +
                                 "' outside test_speakers");
        }
    }
    for (const auto& id : plan.itemtest_ids) {
        const auto& e = lookup(id);
        speakers_itemtest.insert(e.speaker_id);
        if (!plan.coldstart_testsets.count(e.prompt.testset_id)) {
            violations.push_back("item-test sample '" + id + "' lies on non-cold-start testset " +
                                 e.prompt.testset_id);
        }
    }

    for (const auto& sp : speakers_itemtest) {
        if (speakers_train.count(sp) || plan.train_speakers.count(sp)) {
            violations.push_back("speaker overlap train/item-test: '" + sp + "'");
        }
    }
    for (const auto& sp : speakers_train) {
        if (speakers_usertest.count(sp)) {
            violations.push_back("speaker overlap train/user-test: '" + sp + "'");
        }
    }
    for (const auto& sp : plan.train_speakers) {
        if (plan.test_speakers.count(sp)) {
            violations.push_back("speaker listed as both train and test: '" + sp + "'");
        }
    }

    // Coverage: unassigned samples must be exactly the off-diagonal cells,
    // training content answered by cold-start speakers.
    std::set<std::string> cold_speakers;
    for (const auto& e : manifest.entries) {
        if (plan.coldstart_testsets.count(e.prompt.testset_id)) cold_speakers.insert(e.speaker_id);
    }
    for (const auto& e : manifest.entries) {
        const bool assigned = plan.train_ids.count(e.response_id) ||
                              plan.usertest_ids.count(e.response_id) ||
                              plan.itemtest_ids.count(e.response_id);
        if (assigned) continue;
        const bool off_diagonal = !plan.coldstart_testsets.count(e.prompt.testset_id) &&
                                  cold_speakers.count(e.speaker_id);
        if (!off_diagonal) {
            violations.push_back("sample '" + e.response_id +
                                 "' unaccounted for (not in any bucket, not off-diagonal)");
        }
    }
    return violations;
}

namespace {

nlohmann::ordered_json set_to_json(const std::set<std::string>& s) {
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (const auto& v : s) a.push_back(v);
    return a;
}

std::set<std::string> set_from_json(const nlohmann::ordered_json& a, const std::string& key) {
    if (!a.is_array()) throw ValidationError("plan field '" + key + "' must be an array");
    std::set<std::string> out;
    for (const auto& v : a) out.insert(v.get<std::string>());
    return out;
}

}  // namespace

void save_split_plan(const SplitPlan& plan, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["train_ids"] = set_to_json(plan.train_ids);
    j["usertest_ids"] = set_to_json(plan.usertest_ids);
    j["itemtest_ids"] = set_to_json(plan.itemtest_ids);
    j["coldstart_testsets"] = set_to_json(plan.coldstart_testsets);
    j["train_speakers"] = set_to_json(plan.train_speakers);
    j["test_speakers"] = set_to_json(plan.test_speakers);
    j["seed"] = plan.seed;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    os << j.dump() << "\n";
    if (!os) throw std::runtime_error("short write: " + path.string());
}

SplitPlan load_split_plan(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open plan " + path.string());
    std::string line;
    if (!std::getline(is, line) || line.empty()) {
        throw ValidationError("plan file " + path.string() + " is empty");
    }
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("plan parse error: " + std::string(e.what()));
    }
    SplitPlan plan;
    try {
        plan.train_ids = set_from_json(j.at("train_ids"), "train_ids");
        plan.usertest_ids = set_from_json(j.at("usertest_ids"), "usertest_ids");
        plan.itemtest_ids = set_from_json(j.at("itemtest_ids"), "itemtest_ids");
        plan.coldstart_testsets = set_from_json(j.at("coldstart_testsets"), "coldstart_testsets");
        plan.train_speakers = set_from_json(j.at("train_speakers"), "train_speakers");
        plan.test_speakers = set_from_json(j.at("test_speakers"), "test_speakers");
        plan.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("plan schema error: " + std::string(e.what()));
    }
    return plan;
}

}  // namespace asa
