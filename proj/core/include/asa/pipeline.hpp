#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "asa/dataset_io.hpp"
#include "asa/encoders.hpp"
#include "asa/fusion_model.hpp"

namespace asa {

// Bridges manifests and the model: runs the frozen frontends once per sample
// and caches the resulting modality inputs plus gold score rows.
class Pipeline {
public:
    Pipeline(const DatasetManifest& manifest, const FusionModelConfig& cfg,
             AcousticExtractor acoustic_extractor = nullptr,
             ContextExtractor context_extractor = nullptr);

    const DatasetManifest& manifest() const { return *manifest_; }
    const FusionModelConfig& config() const { return cfg_; }

    // Model-ready input for one sample; cached after the first call.
    const SampleInput& input(const ResponseSample& sample);

    // Gold scores and applicability mask as aligned criterion rows. With
    // normalize_scores set, golds are rescaled to [0, 1] by the part ceiling.
    std::array<double, kNumCriteria> gold_row(const ResponseSample& sample) const;
    std::array<double, kNumCriteria> mask_row(const ResponseSample& sample) const;

    const ResponseSample& sample_by_id(const std::string& response_id) const;

private:
    const DatasetManifest* manifest_;
    FusionModelConfig cfg_;
    CharVocabulary vocab_;
    AcousticBackend acoustic_;
    std::optional<ContextBackend> context_;
    std::map<std::string, SampleInput> cache_;
    std::map<std::string, const ResponseSample*> by_id_;
};

}  // namespace asa
