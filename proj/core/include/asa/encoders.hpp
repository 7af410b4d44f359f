#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "asa/data_model.hpp"
#include "asa/mat.hpp"

namespace asa {

// A backend was asked for something it cannot do (image input on a
// text-only encoder, unfreezing a parameterless backbone).
class CapabilityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ── Character tokenizer ─────────────────────────────────────────────────────

struct CharVocabulary {
    std::vector<char> symbols;  // id 2.. ; ids 0/1 are pad/unk
    int pad_id = 0;
    int unk_id = 1;

    int size() const { return static_cast<int>(symbols.size()) + 2; }
    int id_of(char c) const;  // case-folded; unknown characters map to unk
};

CharVocabulary make_vocabulary(const CharVocabularySpec& spec);

// Case-folds, maps to ids, right-pads with pad_id or truncates to exactly
// max_len ids.
std::vector<int> tokenize_chars(const std::string& text, const CharVocabulary& vocab,
                                int max_len);

// ── Acoustic features ───────────────────────────────────────────────────────

using AcousticExtractor = std::function<Mat(const ResponseSample&)>;

// Frozen feature source. Mock and precomputed backends have no parameters;
// the external kind delegates to a user-supplied extractor.
struct AcousticBackend {
    BackboneDesc desc;
    std::filesystem::path base_dir;  // resolves relative feature refs
    AcousticExtractor extractor;     // external kind only

    double frames_per_second() const { return 1.0 / desc.frame_stride_s; }
};

AcousticBackend make_acoustic_backend(const BackboneDesc& desc,
                                      const std::filesystem::path& base_dir = {},
                                      AcousticExtractor extractor = nullptr);

// Raw (pre-adapter) features, T_raw x D_b. Mock features are a pure function
// of the response id; precomputed features come back verbatim from disk.
Mat extract_acoustic(const AcousticBackend& backend, const ResponseSample& sample);

// ── Prompt context ──────────────────────────────────────────────────────────

using ContextExtractor = std::function<std::optional<Mat>(const PromptContent&)>;

struct ContextBackend {
    ContextDesc desc;
    std::filesystem::path base_dir;  // resolves image refs / precomputed files
    ContextExtractor extractor;      // external kind only
};

ContextBackend make_context_backend(const ContextDesc& desc,
                                    const std::filesystem::path& base_dir = {},
                                    ContextExtractor extractor = nullptr);

// One vector (1 x D_c) per prompt, or nullopt when the prompt carries no
// context at all (part 1); the model substitutes zeros for that case.
// Passages are joined with single newlines before encoding. When both text
// and image channels exist they are combined by elementwise mean.
std::optional<Mat> encode_context(const ContextBackend& backend, const PromptContent& prompt);

}  // namespace asa
