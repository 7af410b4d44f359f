#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "asa/data_model.hpp"
#include "asa/encoders.hpp"
#include "asa/mat.hpp"
#include "asa/rng.hpp"

namespace asa {

// Segment type of each fused sequence row.
enum class Modality : int {
    CriterionToken = 0,
    QuestionType = 1,
    Context = 2,
    Transcript = 3,
    Acoustic = 4,
};

struct NamedTensor {
    std::string name;
    Mat value;
    Mat grad;
    bool trainable = true;
    // Backbone-stub tensors obey the freeze flag; everything else trains.
    bool backbone = false;
};

// Modality inputs of one sample, already run through the frozen frontends.
struct SampleInput {
    std::string response_id;
    int part = 0;
    char sub = 0;
    int question_no = 0;
    std::optional<std::vector<int>> transcript_ids;  // absent for parts 2-5
    std::optional<Mat> context_vec;                  // 1 x D_c, absent for part 1
    Mat acoustic_raw;  // T_raw x D_b (or T_raw x stub_input_dim with a stub)
};

struct LayerNormCache {
    std::vector<double> inv_std;
    Mat xhat;
};

struct LayerCache {
    Mat x_in;
    Mat q, k, v;
    std::vector<Mat> attn;  // per head, S x S row-softmax probabilities
    Mat ctx;
    Mat attn_out;
    Mat attn_drop;  // dropout scale per element; empty when inactive
    Mat r1;
    LayerNormCache ln1;
    Mat x1;
    Mat z1;      // pre-activation FFN hidden
    Mat hidden;  // activated FFN hidden
    Mat f2;
    Mat ffn_drop;
    Mat r2;
    LayerNormCache ln2;
    Mat x_out;
};

struct LstmCache {
    bool active = false;
    std::vector<int> ids;
    Mat x;  // L_t x H char embeddings
    Mat i, f, g, o, c, tanh_c, h;
};

struct ForwardCache {
    int part = 0;
    char sub = 0;
    int question_no = 0;
    bool qtype_active = false;
    std::optional<Mat> context_raw;
    Mat acoustic_input;   // backbone-stub input when a stub is attached
    Mat stub_out;         // stub output (empty without a stub)
    int acoustic_frames = 0;  // frames that passed through the adapter
    std::vector<double> qtype_token;  // H, before positional/modality encoding
    std::vector<double> context_token;
    Mat transcript;  // L_t x H
    LstmCache lstm;
    Mat x0;  // assembled S x H input to the transformer
    std::vector<int> modality_ids;
    std::vector<LayerCache> layers;
    std::array<double, kNumCriteria> preds{};
    std::array<double, kNumCriteria> mask{};
};

// The trainable scoring model: linear adapters over the frozen acoustic and
// context features, question-type/transcript/context prompt embeddings,
// per-criterion start tokens, trainable positional and modality encodings, a
// bidirectional transformer encoder and one linear head per criterion.
class FusionModel {
public:
    explicit FusionModel(const FusionModelConfig& cfg);

    const FusionModelConfig& config() const { return cfg_; }
    const CharVocabulary& vocabulary() const { return vocab_; }

    std::vector<NamedTensor>& tensors() { return params_; }
    const std::vector<NamedTensor>& tensors() const { return params_; }
    NamedTensor& tensor(const std::string& name);
    const NamedTensor& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;

    void zero_grads();

    // Freeze contract: sets whether backbone-stub parameters may train.
    // Throws CapabilityError when unfreezing is requested but the backbone
    // carries no parameters (mock/precomputed backends).
    void set_trainable(bool freeze_backbone);
    bool has_backbone_params() const;
    std::uint64_t backbone_hash() const;
    std::uint64_t parameter_hash() const;

    // I_q = part embedding + question-number embedding.
    std::vector<double> question_type_embedding(int part, char sub, int question_no) const;

    // Char-embeds the ids and runs the recurrent layer; nullptr yields the
    // exact zero matrix used for transcript-free parts.
    Mat transcript_embedding(const std::vector<int>* ids, LstmCache* cache = nullptr) const;

    // Per-frame linear map D_b -> H, then zero-pad or truncate to L_a rows.
    Mat adapt_acoustic(const Mat& raw, int* frames_used = nullptr) const;

    // Linear map D_c -> H; nullptr yields the exact zero vector.
    std::vector<double> adapt_context(const Mat* raw) const;

    // Concatenates [criterion tokens, qtype, context, transcript, acoustic]
    // and adds positional and modality encodings to every row.
    void assemble_sequence(const std::vector<double>& qtype, const std::vector<double>& ctx,
                           const Mat& transcript, const Mat& acoustic, Mat& x0,
                           std::vector<int>& modality_ids) const;

    static std::array<double, kNumCriteria> criterion_mask(int part, char sub);

    // Full forward pass. train_mode enables dropout, drawing masks from rng.
    std::array<double, kNumCriteria> forward(const SampleInput& input, ForwardCache* cache,
                                             bool train_mode = false, Rng* rng = nullptr) const;

    // Accumulates gradients for d(loss)/d(pred) into every tensor's grad.
    void backward(const ForwardCache& cache, const std::array<double, kNumCriteria>& dpreds);

private:
    enum class InitKind { Normal, Zero, One };

    void register_tensor(const std::string& name, int rows, int cols, InitKind init,
                         bool backbone = false);
    void init_parameters();

    Mat run_layers(const Mat& x0, std::vector<LayerCache>* caches, bool train_mode,
                   Rng* rng) const;

    FusionModelConfig cfg_;
    CharVocabulary vocab_;
    std::vector<NamedTensor> params_;
    std::vector<InitKind> init_kinds_;
    std::map<std::string, int> index_;
};

// ── Checkpoints ─────────────────────────────────────────────────────────────
//
// Single file: magic "ASAC", version u16 LE, u32 LE JSON header length, the
// JSON header (config + ordered tensor table), then one float64 tensor
// record per table row. Loading fails loudly on any missing, extra or
// reshaped tensor.

void save_checkpoint(const FusionModel& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra = {});

struct LoadedCheckpoint {
    FusionModel model;
    std::map<std::string, std::string> extra;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

std::string config_to_json(const FusionModelConfig& cfg);
FusionModelConfig config_from_json(const std::string& text);

}  // namespace asa
