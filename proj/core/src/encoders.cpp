#include "asa/encoders.hpp"

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "asa/dataset_io.hpp"
#include "asa/rng.hpp"

namespace asa {

namespace {

// Built-in symbol set: space, a-z, 0-9, apostrophe, comma, period, hyphen.
const char* kDefaultSymbols = " abcdefghijklmnopqrstuvwxyz0123456789',.-";

}  // namespace

int CharVocabulary::id_of(char c) const {
    const char folded = static_cast<char>(
        std::tolower(static_cast<unsigned char>(c)));
    for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (symbols[i] == folded) return static_cast<int>(i) + 2;
    }
    return unk_id;
}

CharVocabulary make_vocabulary(const CharVocabularySpec& spec) {
    CharVocabulary v;
    const std::string source = spec.symbols.empty() ? kDefaultSymbols : spec.symbols;
    for (char c : source) {
        const char folded = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        bool dup = false;
        for (char s : v.symbols) dup = dup || s == folded;
        if (!dup) v.symbols.push_back(folded);
    }
    return v;
}

std::vector<int> tokenize_chars(const std::string& text, const CharVocabulary& vocab,
                                int max_len) {
    if (max_len < 1) throw std::invalid_argument("tokenize_chars: max_len must be >= 1");
    std::vector<int> ids(static_cast<std::size_t>(max_len), vocab.pad_id);
    const std::size_t n = std::min<std::size_t>(text.size(), static_cast<std::size_t>(max_len));
    for (std::size_t i = 0; i < n; ++i) ids[i] = vocab.id_of(text[i]);
    return ids;
}

// ── Acoustic features ───────────────────────────────────────────────────────

AcousticBackend make_acoustic_backend(const BackboneDesc& desc,
                                      const std::filesystem::path& base_dir,
                                      AcousticExtractor extractor) {
    AcousticBackend b;
    b.desc = desc;
    b.base_dir = base_dir;
    b.extractor = std::move(extractor);
    if (desc.kind == BackendKind::External && !b.extractor) {
        throw ValidationError("external acoustic backend requires an extractor");
    }
    return b;
}

Mat extract_acoustic(const AcousticBackend& backend, const ResponseSample& sample) {
    switch (backend.desc.kind) {
        case BackendKind::Mock: {
            const int t_raw = std::max<int>(
                1, static_cast<int>(std::llround(sample.duration_s *
                                                 backend.frames_per_second())));
            Mat m(t_raw, backend.desc.feature_dim);
            Rng rng(hash_combine(fnv1a64(sample.response_id), fnv1a64("mock_acoustic")));
            for (auto& x : m.d) x = rng.normal();
            return m;
        }
        case BackendKind::Precomputed: {
            if (!sample.feature_ref) {
                throw ValidationError("sample '" + sample.response_id +
                                      "' has no feature_ref for the precomputed backend");
            }
            std::filesystem::path p(*sample.feature_ref);
            if (!p.is_absolute() && !backend.base_dir.empty()) p = backend.base_dir / p;
            Mat m = read_tensor_file(p);
            if (m.cols != backend.desc.feature_dim) {
                throw std::invalid_argument(
                    "feature file " + p.string() + " has " + std::to_string(m.cols) +
                    " columns, backend expects " + std::to_string(backend.desc.feature_dim));
            }
            return m;
        }
        case BackendKind::External: {
            if (!backend.extractor) {
                throw ValidationError("external acoustic backend has no extractor attached");
            }
            return backend.extractor(sample);
        }
        case BackendKind::None:
            break;
    }
    throw ValidationError("acoustic backend kind cannot be 'none'");
}

// ── Prompt context ──────────────────────────────────────────────────────────

namespace {

constexpr int kLatentSlots = 8;

// Numeric tokens found in the text, in order, up to kLatentSlots.
std::vector<double> parse_latents(const std::string& text) {
    std::vector<double> out;
    std::istringstream is(text);
    std::string token;
    while (is >> token && out.size() < static_cast<std::size_t>(kLatentSlots)) {
        const char* begin = token.c_str();
        char* end = nullptr;
        const double v = std::strtod(begin, &end);
        if (end != begin && *end == '\0') out.push_back(v);
    }
    return out;
}

// Fixed projection of latent slots into the context feature space. Constant
// across datasets so that learned adapters transfer between manifests.
Mat latent_projection(int feature_dim) {
    Rng rng(fnv1a64("mock_context_projection"));
    Mat proj(kLatentSlots, feature_dim);
    proj.fill_normal(rng, 0.0, 1.0 / std::sqrt(static_cast<double>(kLatentSlots)));
    return proj;
}

Mat mock_vector_for(const std::vector<double>& latents, const std::string& hash_key,
                    int feature_dim) {
    Mat v(1, feature_dim);
    if (!latents.empty()) {
        const Mat& proj = latent_projection(feature_dim);
        for (std::size_t k = 0; k < latents.size(); ++k) {
            for (int j = 0; j < feature_dim; ++j) {
                v(0, j) += latents[k] * proj(static_cast<int>(k), j);
            }
        }
    }
    Rng rng(hash_combine(fnv1a64(hash_key), fnv1a64("mock_context_hash")));
    for (int j = 0; j < feature_dim; ++j) v(0, j) += 0.05 * rng.normal();
    return v;
}

std::string join_texts(const std::vector<std::string>& texts) {
    std::string joined;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        if (i > 0) joined += '\n';
        joined += texts[i];
    }
    return joined;
}

Mat mock_encode_text(const std::string& joined, int feature_dim) {
    return mock_vector_for(parse_latents(joined), joined, feature_dim);
}

Mat mock_encode_image(const ContextBackend& backend, const std::string& ref) {
    std::filesystem::path p(ref);
    if (!p.is_absolute() && !backend.base_dir.empty()) p = backend.base_dir / p;
    std::vector<double> latents;
    if (std::filesystem::exists(p)) {
        const Mat stored = read_tensor_file(p);
        for (int j = 0; j < stored.cols && j < kLatentSlots; ++j) latents.push_back(stored(0, j));
    }
    return mock_vector_for(latents, ref, backend.desc.feature_dim);
}

Mat precomputed_context(const ContextBackend& backend, const PromptContent& prompt) {
    const std::filesystem::path p =
        backend.base_dir / (prompt.content_id + ".ctx.asaf");
    Mat m = read_tensor_file(p);
    if (m.rows != 1 || m.cols != backend.desc.feature_dim) {
        throw std::invalid_argument("context file " + p.string() + " is " +
                                    std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                                    ", expected 1x" +
                                    std::to_string(backend.desc.feature_dim));
    }
    return m;
}

}  // namespace

ContextBackend make_context_backend(const ContextDesc& desc,
                                    const std::filesystem::path& base_dir,
                                    ContextExtractor extractor) {
    ContextBackend b;
    b.desc = desc;
    b.base_dir = base_dir;
    b.extractor = std::move(extractor);
    if (desc.kind == BackendKind::External && !b.extractor) {
        throw ValidationError("external context backend requires an extractor");
    }
    return b;
}

std::optional<Mat> encode_context(const ContextBackend& backend, const PromptContent& prompt) {
    const bool has_text = !prompt.context_texts.empty();
    const bool has_image = prompt.context_image_ref.has_value();
    if (!has_text && !has_image) return std::nullopt;

    if (has_image && !backend.desc.supports_image) {
        throw CapabilityError("context backend does not support image input (prompt '" +
                              prompt.content_id + "')");
    }

    switch (backend.desc.kind) {
        case BackendKind::None:
            return std::nullopt;
        case BackendKind::Mock: {
            std::optional<Mat> text_vec, image_vec;
            if (has_text) {
                text_vec = mock_encode_text(join_texts(prompt.context_texts),
                                            backend.desc.feature_dim);
            }
            if (has_image) {
                image_vec = mock_encode_image(backend, *prompt.context_image_ref);
            }
            if (text_vec && image_vec) {
                for (int j = 0; j < text_vec->cols; ++j) {
                    (*text_vec)(0, j) = 0.5 * ((*text_vec)(0, j) + (*image_vec)(0, j));
                }
                return text_vec;
            }
            return text_vec ? text_vec : image_vec;
        }
        case BackendKind::Precomputed:
            return precomputed_context(backend, prompt);
        case BackendKind::External: {
            if (!backend.extractor) {
                throw ValidationError("external context backend has no extractor attached");
            }
            return backend.extractor(prompt);
        }
    }
    throw ValidationError("unreachable context backend kind");
}

}  // namespace asa
