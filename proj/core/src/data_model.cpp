#include "asa/data_model.hpp"

#include <cmath>
#include <set>
#include <sstream>

namespace asa {

const std::array<Criterion, kNumCriteria>& all_criteria() {
    static const std::array<Criterion, kNumCriteria> k = {
        Criterion::Pronunciation, Criterion::IntonationStress,
        Criterion::GrammarVocabulary, Criterion::Cohesion,
        Criterion::RelevanceCompleteness};
    return k;
}

std::string criterion_code(Criterion c) {
    switch (c) {
        case Criterion::Pronunciation: return "p";
        case Criterion::IntonationStress: return "is";
        case Criterion::GrammarVocabulary: return "gv";
        case Criterion::Cohesion: return "c";
        case Criterion::RelevanceCompleteness: return "rc";
    }
    throw std::invalid_argument("unknown criterion value");
}

Criterion criterion_from_code(const std::string& code) {
    if (code == "p") return Criterion::Pronunciation;
    if (code == "is") return Criterion::IntonationStress;
    if (code == "gv") return Criterion::GrammarVocabulary;
    if (code == "c") return Criterion::Cohesion;
    if (code == "rc") return Criterion::RelevanceCompleteness;
    throw ValidationError("unknown criterion code '" + code + "'");
}

namespace {

std::array<PartSpec, 6> build_part_table() {
    using C = Criterion;
    std::array<PartSpec, 6> t;
    t[0] = {1, 0, {C::Pronunciation, C::IntonationStress}, 3.0, true, false, false};
    t[1] = {2, 0, {C::Pronunciation, C::IntonationStress, C::GrammarVocabulary},
            3.0, false, false, true};
    t[2] = {3, 0, {C::Pronunciation, C::IntonationStress, C::GrammarVocabulary},
            3.0, false, true, false};
    t[3] = {4, 0,
            {C::Pronunciation, C::IntonationStress, C::GrammarVocabulary,
             C::Cohesion, C::RelevanceCompleteness},
            3.0, false, true, false};
    t[4] = {5, 'a',
            {C::Pronunciation, C::IntonationStress, C::GrammarVocabulary,
             C::Cohesion, C::RelevanceCompleteness},
            3.0, false, true, false};
    t[5] = {5, 'b',
            {C::Pronunciation, C::IntonationStress, C::GrammarVocabulary,
             C::Cohesion, C::RelevanceCompleteness},
            5.0, false, true, false};
    return t;
}

}  // namespace

const std::array<PartSpec, 6>& part_table() {
    static const std::array<PartSpec, 6> t = build_part_table();
    return t;
}

int part_row_index(int part, char sub) {
    if (part < 1 || part > 5) {
        throw ValidationError("part " + std::to_string(part) + " out of range 1..5");
    }
    if (part == 5) {
        if (sub == 'a') return 4;
        if (sub == 'b') return 5;
        throw ValidationError("part 5 requires sub 'a' or 'b', got '" +
                              std::string(1, sub ? sub : '?') + "'");
    }
    if (sub != 0) {
        throw ValidationError("part " + std::to_string(part) + " does not take a sub label");
    }
    return part - 1;
}

const PartSpec& part_spec(int part, char sub) {
    return part_table()[static_cast<std::size_t>(part_row_index(part, sub))];
}

const std::vector<Criterion>& criteria_for_part(int part, char sub) {
    return part_spec(part, sub).criteria;
}

PartOfQuestion part_for_question(int question_no) {
    switch (question_no) {
        case 1: case 2: return {1, 0};
        case 3: case 4: return {2, 0};
        case 5: case 6: case 7: return {3, 0};
        case 8: case 9: return {4, 0};
        case 10: return {5, 'a'};
        case 11: return {5, 'b'};
        default:
            throw ValidationError("question_no " + std::to_string(question_no) +
                                  " out of range 1..11");
    }
}

std::vector<std::string> validate_sample(const ResponseSample& sample) {
    std::vector<std::string> violations;
    const PromptContent& prompt = sample.prompt;

    const PartSpec* spec = nullptr;
    try {
        spec = &part_spec(prompt.part, prompt.sub);
    } catch (const ValidationError& e) {
        violations.emplace_back(e.what());
        return violations;
    }

    try {
        const PartOfQuestion pq = part_for_question(prompt.question_no);
        if (pq.part != prompt.part || pq.sub != prompt.sub) {
            std::ostringstream os;
            os << "question_no " << prompt.question_no << " belongs to part " << pq.part;
            if (pq.sub) os << pq.sub;
            os << ", not part " << prompt.part;
            if (prompt.sub) os << prompt.sub;
            violations.push_back(os.str());
        }
    } catch (const ValidationError& e) {
        violations.emplace_back(e.what());
    }

    if (spec->has_transcript != prompt.transcript_text.has_value()) {
        violations.push_back(spec->has_transcript
                                 ? "part " + std::to_string(prompt.part) + " requires a transcript"
                                 : "part " + std::to_string(prompt.part) + " has no transcript");
    }
    if (spec->has_text_context != !prompt.context_texts.empty()) {
        violations.push_back(spec->has_text_context
                                 ? "part " + std::to_string(prompt.part) + " requires text context"
                                 : "part " + std::to_string(prompt.part) +
                                       " has no text context");
    }
    if (spec->has_image_context != prompt.context_image_ref.has_value()) {
        violations.push_back(spec->has_image_context
                                 ? "part " + std::to_string(prompt.part) + " requires image context"
                                 : "part " + std::to_string(prompt.part) +
                                       (prompt.part == 3 ? " has text context only"
                                                         : " has no image context"));
    }

    const bool has_audio = sample.audio_ref.has_value();
    const bool has_feature = sample.feature_ref.has_value();
    if (has_audio == has_feature) {
        violations.push_back(has_audio ? "both audio_ref and feature_ref are set"
                                       : "neither audio_ref nor feature_ref is set");
    }

    if (!(sample.duration_s > 0.0) || sample.duration_s > 60.0) {
        std::ostringstream os;
        os << "duration " << sample.duration_s << " s outside (0, 60]";
        violations.push_back(os.str());
    }

    for (Criterion c : spec->criteria) {
        auto it = sample.scores.find(c);
        if (it == sample.scores.end()) {
            violations.push_back("missing criterion " + criterion_code(c));
            continue;
        }
        std::ostringstream os;
        if (it->second > spec->score_max) {
            os << "score " << it->second << " > max " << spec->score_max << " for "
               << criterion_code(c);
            violations.push_back(os.str());
        } else if (!(it->second >= 0.0)) {
            os << "score " << it->second << " < 0 for " << criterion_code(c);
            violations.push_back(os.str());
        }
    }
    for (const auto& [c, v] : sample.scores) {
        (void)v;
        bool applicable = false;
        for (Criterion k : spec->criteria) applicable = applicable || k == c;
        if (!applicable) {
            violations.push_back("criterion " + criterion_code(c) +
                                 " does not apply to part " + std::to_string(prompt.part));
        }
    }
    return violations;
}

std::string backend_kind_name(BackendKind k) {
    switch (k) {
        case BackendKind::None: return "none";
        case BackendKind::Mock: return "mock";
        case BackendKind::Precomputed: return "precomputed";
        case BackendKind::External: return "external";
    }
    throw std::invalid_argument("unknown backend kind");
}

BackendKind backend_kind_from_name(const std::string& name) {
    if (name == "none") return BackendKind::None;
    if (name == "mock") return BackendKind::Mock;
    if (name == "precomputed") return BackendKind::Precomputed;
    if (name == "external") return BackendKind::External;
    throw ValidationError("unknown backend kind '" + name + "'");
}

FusionModelConfig finalize_config(FusionModelConfig cfg) {
    if (cfg.hidden_size <= 0) throw ValidationError("hidden_size must be positive");
    if (cfg.n_heads <= 0 || cfg.hidden_size % cfg.n_heads != 0) {
        throw ValidationError("hidden_size " + std::to_string(cfg.hidden_size) +
                              " not divisible by n_heads " + std::to_string(cfg.n_heads));
    }
    if (cfg.n_criteria != kNumCriteria) {
        throw ValidationError("n_criteria must be " + std::to_string(kNumCriteria));
    }
    if (cfg.n_layers <= 0) throw ValidationError("n_layers must be positive");
    if (cfg.ffn_mult <= 0) throw ValidationError("ffn_mult must be positive");
    if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) {
        throw ValidationError("dropout must lie in [0, 1)");
    }
    if (cfg.transcript_len <= 0) throw ValidationError("transcript_len must be positive");
    if (cfg.backbone.kind == BackendKind::None) {
        throw ValidationError("backbone kind cannot be 'none'");
    }
    if (cfg.backbone.feature_dim <= 0) {
        throw ValidationError("backbone feature_dim must be positive");
    }
    if (cfg.acoustic_len == 0) {
        if (!(cfg.backbone.frame_stride_s > 0.0)) {
            throw ValidationError("acoustic_len unset and frame_stride_s unknown");
        }
        // Token budget covering the 60 s audio ceiling at the backbone stride.
        cfg.acoustic_len = static_cast<int>(std::ceil(60.0 / cfg.backbone.frame_stride_s));
    }
    if (cfg.acoustic_len <= 0) throw ValidationError("acoustic_len must be positive");
    if (cfg.context_encoder.kind != BackendKind::None && cfg.context_encoder.feature_dim <= 0) {
        throw ValidationError("context feature_dim must be positive");
    }
    if (cfg.backbone.kind != BackendKind::External && cfg.backbone.stub_input_dim > 0) {
        throw ValidationError("stub_input_dim requires an external backbone");
    }
    if (cfg.backbone.kind == BackendKind::External && cfg.backbone.stub_input_dim <= 0) {
        throw ValidationError("external backbone requires stub_input_dim > 0");
    }
    return cfg;
}

}  // namespace asa
