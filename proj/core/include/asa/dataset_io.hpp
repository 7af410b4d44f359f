#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "asa/data_model.hpp"
#include "asa/mat.hpp"

namespace asa {

// ── Binary tensor files ─────────────────────────────────────────────────────
//
// Layout: magic "ASAF", version u16 LE, rows u32 LE, cols u32 LE, then
// rows*cols little-endian floats row-major. Version 1 stores float32 and is
// the on-disk feature interchange format; version 2 stores float64 and is
// used by checkpoints, where bit-exact round-trips matter.

inline constexpr std::uint16_t kTensorVersionF32 = 1;
inline constexpr std::uint16_t kTensorVersionF64 = 2;

void write_tensor_file(const std::filesystem::path& path, const Mat& m,
                       std::uint16_t version = kTensorVersionF32);
Mat read_tensor_file(const std::filesystem::path& path);

// Stream variants, used by container formats that pack several tensors into
// one file (checkpoints, optimizer state).
void write_tensor(std::ostream& os, const Mat& m, std::uint16_t version);
Mat read_tensor(std::istream& is, const std::string& what);

// Header probe without reading the payload; also verifies the payload size.
struct TensorFileHeader {
    std::uint16_t version = 0;
    int rows = 0;
    int cols = 0;
};
TensorFileHeader read_tensor_header(const std::filesystem::path& path);

// ── Manifests ───────────────────────────────────────────────────────────────

struct DatasetManifest {
    std::vector<ResponseSample> entries;
    std::vector<std::string> testsets;  // unique, in order of first appearance
    std::vector<std::string> speakers;  // unique, in order of first appearance

    // Directory that feature/context refs are relative to. Not serialized.
    std::filesystem::path base_dir;

    void rebuild_roster();
    const ResponseSample* find(const std::string& response_id) const;
    std::filesystem::path resolve(const std::string& ref) const;
};

bool manifest_equal(const DatasetManifest& a, const DatasetManifest& b);

// Loads a line-delimited manifest. Each line is one flat JSON record; see
// save_manifest for the schema. Parse errors carry the line number;
// validation errors name the offending response_id. When check_files is set,
// referenced feature files must exist with a self-consistent header.
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_files = true);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// ── Synthetic datasets ──────────────────────────────────────────────────────

// Generates an exam-shaped dataset: n_testsets test sets of 11 questions,
// users_per_testset speakers each answering every question of their set.
// Scores mix a per-question content factor, a per-speaker factor, a
// per-question residual and i.i.d. noise through a sigmoid squashed to the
// part's score range. The content factor is recoverable from the prompt
// context (numeric latents in passages, latent files for images), the
// speaker factor from the emitted acoustic features, so splits built on this
// data exhibit a content cold-start gap by construction.
struct SynthesisConfig {
    int n_testsets = 12;
    int users_per_testset = 10;
    std::uint64_t seed = 1;
    double context_signal_weight = 0.6;   // share of score variance from content
    double speaker_signal_weight = 0.25;  // share from the speaker factor
    double noise_std = 0.1;               // i.i.d. noise per sample and criterion
    double content_residual_std = 0.3;    // per-question difficulty, acoustics-only
    int feature_dim = 48;                 // D_b of the emitted feature files
    double frames_per_second = 0.25;
    int latent_dim = 6;
    double frame_noise_std = 0.5;
    double logit_scale = 1.25;
    double min_duration_s = 40.0;
    double max_duration_s = 60.0;
};

void validate_synthesis_config(const SynthesisConfig& cfg);

// Ground truth kept out of the manifest, for oracle checks.
struct SynthesisTruth {
    std::map<std::string, double> content_factor;   // by content_id
    std::map<std::string, double> speaker_factor;   // by speaker_id
    std::map<std::string, double> content_residual; // by content_id
};

struct GeneratedDataset {
    DatasetManifest manifest;
    SynthesisTruth truth;
};

// Writes manifest.jsonl, features/*.asaf and contexts/*.asaf under out_dir.
// Deterministic in cfg.seed, byte for byte.
GeneratedDataset generate_synthetic(const SynthesisConfig& cfg,
                                    const std::filesystem::path& out_dir);

}  // namespace asa
