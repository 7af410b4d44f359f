#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "asa/data_model.hpp"
#include "asa/dataset_io.hpp"
#include "asa/training.hpp"

namespace asa {

// Flat `key = value` run configuration. Every key must be registered;
// unknown keys are rejected at load/override time. Values resolve to
// registered defaults when unset, and the fingerprint covers the fully
// resolved view, so two runs with equal fingerprints saw equal settings.
class RunConfig {
public:
    RunConfig() = default;

    static RunConfig from_file(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value);  // rejects unknown keys
    void apply_override(const std::string& key_equals_value);    // "key=value" form

    std::string str(const std::string& key) const;
    int get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    std::map<std::string, std::string> resolved() const;
    std::string fingerprint() const;
    void write_resolved(const std::filesystem::path& path) const;

    SynthesisConfig synthesis_config() const;
    FusionModelConfig model_config() const;
    TrainConfig train_config() const;

    struct KeySpec {
        const char* name;
        const char* default_value;
        const char* doc;
    };
    static const std::vector<KeySpec>& known_keys();

private:
    std::map<std::string, std::string> values_;
};

}  // namespace asa
