#include "asa/pipeline.hpp"

namespace asa {

Pipeline::Pipeline(const DatasetManifest& manifest, const FusionModelConfig& cfg,
                   AcousticExtractor acoustic_extractor, ContextExtractor context_extractor)
    : manifest_(&manifest),
      cfg_(finalize_config(cfg)),
      vocab_(make_vocabulary(cfg.vocab)),
      acoustic_(make_acoustic_backend(cfg_.backbone, manifest.base_dir,
                                      std::move(acoustic_extractor))) {
    if (cfg_.context_encoder.kind != BackendKind::None) {
        context_ = make_context_backend(cfg_.context_encoder, manifest.base_dir,
                                        std::move(context_extractor));
    }
    for (const auto& e : manifest_->entries) by_id_[e.response_id] = &e;
}

const SampleInput& Pipeline::input(const ResponseSample& sample) {
    auto it = cache_.find(sample.response_id);
    if (it != cache_.end()) return it->second;

    SampleInput in;
    in.response_id = sample.response_id;
    in.part = sample.prompt.part;
    in.sub = sample.prompt.sub;
    in.question_no = sample.prompt.question_no;
    if (sample.prompt.transcript_text) {
        in.transcript_ids =
            tokenize_chars(*sample.prompt.transcript_text, vocab_, cfg_.transcript_len);
    }
    if (context_) {
        in.context_vec = encode_context(*context_, sample.prompt);
    }
    in.acoustic_raw = extract_acoustic(acoustic_, sample);
    return cache_.emplace(sample.response_id, std::move(in)).first->second;
}

std::array<double, kNumCriteria> Pipeline::gold_row(const ResponseSample& sample) const {
    std::array<double, kNumCriteria> gold{};
    const double ceiling =
        part_spec(sample.prompt.part, sample.prompt.sub).score_max;
    for (const auto& [c, v] : sample.scores) {
        gold[static_cast<std::size_t>(static_cast<int>(c))] =
            cfg_.normalize_scores ? v / ceiling : v;
    }
    return gold;
}

std::array<double, kNumCriteria> Pipeline::mask_row(const ResponseSample& sample) const {
    return FusionModel::criterion_mask(sample.prompt.part, sample.prompt.sub);
}

const ResponseSample& Pipeline::sample_by_id(const std::string& response_id) const {
    auto it = by_id_.find(response_id);
    if (it == by_id_.end()) {
        throw ValidationError("unknown response_id '" + response_id + "'");
    }
    return *it->second;
}

}  // namespace asa
