#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace asa {

// Raised when input data fails a domain invariant. The CLI maps it to exit
// code 2; plain runtime errors map to 3.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ── Scoring criteria ────────────────────────────────────────────────────────

enum class Criterion : int {
    Pronunciation = 0,       // "p"
    IntonationStress = 1,    // "is"
    GrammarVocabulary = 2,   // "gv"
    Cohesion = 3,            // "c"
    RelevanceCompleteness = 4,  // "rc"
};

inline constexpr int kNumCriteria = 5;

const std::array<Criterion, kNumCriteria>& all_criteria();
std::string criterion_code(Criterion c);
Criterion criterion_from_code(const std::string& code);

// ── Exam part schema ────────────────────────────────────────────────────────

// One row of the part table. Part 5 has two variants with different score
// ceilings, distinguished by sub ('a'/'b'); other parts use sub = 0.
struct PartSpec {
    int part = 0;
    char sub = 0;
    std::vector<Criterion> criteria;
    double score_max = 0.0;
    bool has_transcript = false;
    bool has_text_context = false;
    bool has_image_context = false;
};

// All six part rows, in (part, sub) order.
const std::array<PartSpec, 6>& part_table();

// Row index 0..5 for (part, sub). Throws ValidationError on out-of-range
// part or inconsistent sub.
int part_row_index(int part, char sub);

const PartSpec& part_spec(int part, char sub);

// Fixed criterion set of a part. sub is required iff part == 5.
const std::vector<Criterion>& criteria_for_part(int part, char sub = 0);

// Part/sub implied by the question number 1..11.
struct PartOfQuestion {
    int part;
    char sub;
};
PartOfQuestion part_for_question(int question_no);

// ── Prompt and response records ─────────────────────────────────────────────

struct PromptContent {
    std::string content_id;
    std::string testset_id;
    int part = 0;
    char sub = 0;  // derived from question_no for part 5
    int question_no = 0;
    std::optional<std::string> transcript_text;
    std::vector<std::string> context_texts;  // empty means absent
    std::optional<std::string> context_image_ref;
};

struct ResponseSample {
    std::string response_id;
    std::string speaker_id;
    PromptContent prompt;
    std::optional<std::string> audio_ref;
    std::optional<std::string> feature_ref;
    double duration_s = 0.0;
    std::map<Criterion, double> scores;
};

// Returns every invariant violation as a message; empty means the sample is
// valid. Never throws, never mutates.
std::vector<std::string> validate_sample(const ResponseSample& sample);

// ── Model configuration ─────────────────────────────────────────────────────

enum class BackendKind { None, Mock, Precomputed, External };

std::string backend_kind_name(BackendKind k);
BackendKind backend_kind_from_name(const std::string& name);

struct BackboneDesc {
    BackendKind kind = BackendKind::Mock;
    int feature_dim = 32;        // D_b, width of the frozen acoustic features
    double frame_stride_s = 0.5; // seconds per emitted frame
    int stub_input_dim = 0;      // >0 attaches a trainable stub (external kind)
    std::string identity = "mock";
};

struct ContextDesc {
    BackendKind kind = BackendKind::Mock;  // None disables the context channel
    int feature_dim = 16;                  // D_c
    bool supports_image = true;
};

struct CharVocabularySpec {
    // Characters beyond pad/unk; empty selects the built-in set
    // (space, a-z, 0-9, apostrophe, comma, period, hyphen).
    std::string symbols;
};

struct FusionModelConfig {
    int hidden_size = 512;   // width shared by every fused token
    int acoustic_len = 0;    // acoustic token budget; 0 derives from stride
    int transcript_len = 256;  // transcript token budget (characters)
    int n_criteria = kNumCriteria;
    int n_layers = 2;
    int n_heads = 8;
    int ffn_mult = 4;
    double dropout = 0.1;
    BackboneDesc backbone;
    ContextDesc context_encoder;
    bool freeze_backbone = true;
    bool use_qtype_embedding = true;
    bool use_transcript_embedding = true;
    bool normalize_scores = false;  // regress scores rescaled to [0,1]
    CharVocabularySpec vocab;
    std::uint64_t seed = 1;

    // Derived sequence length: criteria + qtype + context + transcript + acoustic.
    int sequence_len() const { return n_criteria + 2 + transcript_len + acoustic_len; }
};

// Validates the config and fills derived fields (acoustic_len from the
// backbone stride when left at 0). Throws ValidationError.
FusionModelConfig finalize_config(FusionModelConfig cfg);

}  // namespace asa
