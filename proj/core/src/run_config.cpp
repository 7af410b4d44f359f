#include "asa/run_config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "asa/rng.hpp"

namespace asa {

const std::vector<RunConfig::KeySpec>& RunConfig::known_keys() {
    static const std::vector<KeySpec> keys = {
        {"io.data_dir", "data", "synthetic dataset output directory"},
        {"io.manifest", "data/manifest.jsonl", "dataset manifest path"},
        {"io.plan", "plan.jsonl", "split plan path"},
        {"io.checkpoint", "model.ckpt", "checkpoint path"},
        {"io.metrics", "metrics.csv", "per-epoch training metrics path"},
        {"io.report_prefix", "report", "report output prefix"},

        {"synth.n_testsets", "12", "number of synthetic test sets"},
        {"synth.users_per_testset", "10", "speakers per test set"},
        {"synth.seed", "1", "synthesis seed"},
        {"synth.context_signal_weight", "0.6", "score variance share from content"},
        {"synth.speaker_signal_weight", "0.25", "score variance share from speakers"},
        {"synth.noise_std", "0.1", "i.i.d. score noise"},
        {"synth.content_residual_std", "0.3", "per-question difficulty spread"},
        {"synth.feature_dim", "48", "emitted acoustic feature width"},
        {"synth.frames_per_second", "0.25", "emitted acoustic frame rate"},
        {"synth.latent_dim", "6", "content/speaker latent width"},
        {"synth.frame_noise_std", "0.5", "per-frame feature noise"},
        {"synth.logit_scale", "1.25", "score logit scale"},
        {"synth.min_duration_s", "40", "minimum response duration"},
        {"synth.max_duration_s", "60", "maximum response duration"},

        {"split.n_coldstart_sets", "3", "test sets isolated for item-test"},
        {"split.user_ratio", "0.8", "train share of the speaker split"},
        {"split.seed", "1", "split seed"},

        {"model.hidden_size", "512", "fused token width"},
        {"model.acoustic_len", "0", "acoustic token budget; 0 derives from stride"},
        {"model.transcript_len", "256", "transcript token budget"},
        {"model.n_layers", "2", "transformer depth"},
        {"model.n_heads", "8", "attention heads"},
        {"model.ffn_mult", "4", "feed-forward width multiplier"},
        {"model.dropout", "0.1", "dropout probability"},
        {"model.backbone", "precomputed", "acoustic backend: mock|precomputed|external"},
        {"model.backbone_dim", "48", "acoustic feature width D_b"},
        {"model.frame_stride_s", "4.0", "seconds per acoustic frame"},
        {"model.stub_input_dim", "0", "input width of the external backbone stub"},
        {"model.context", "mock", "context backend: none|mock|precomputed|external"},
        {"model.context_dim", "16", "context feature width D_c"},
        {"model.context_supports_image", "true", "context backend accepts images"},
        {"model.freeze_backbone", "true", "exclude backbone parameters from training"},
        {"model.use_qtype_embedding", "true", "enable the question-type token"},
        {"model.use_transcript_embedding", "true", "enable the transcript block"},
        {"model.normalize_scores", "false", "regress scores rescaled to [0,1]"},
        {"model.vocab_symbols", "", "tokenizer symbols; empty selects the built-in set"},
        {"model.seed", "1", "parameter initialization seed"},

        {"train.batch_size", "4", "mini-batch size"},
        {"train.epochs", "10", "training epochs"},
        {"train.seed", "1", "shuffle/dropout seed"},
        {"train.shuffle", "true", "shuffle per epoch"},
        {"train.grad_check_mode", "false", "disable dropout for gradient checks"},
        {"train.lr", "0.001", "learning rate"},
        {"train.beta1", "0.9", "first-moment decay"},
        {"train.beta2", "0.999", "second-moment decay"},
        {"train.eps", "1e-8", "adaptive denominator epsilon"},
        {"train.patience", "0", "early-stop patience on user-test loss; 0 disables"},
    };
    return keys;
}

namespace {

const RunConfig::KeySpec* find_key(const std::string& name) {
    for (const auto& k : RunConfig::known_keys()) {
        if (name == k.name) return &k;
    }
    return nullptr;
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config " + path.string());
    RunConfig rc;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ValidationError("config line " + std::to_string(line_no) +
                                  ": expected 'key = value', got '" + t + "'");
        }
        rc.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return rc;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (!find_key(key)) throw ValidationError("unknown config key '" + key + "'");
    values_[key] = value;
}

void RunConfig::apply_override(const std::string& key_equals_value) {
    const std::size_t eq = key_equals_value.find('=');
    if (eq == std::string::npos) {
        throw ValidationError("override must be key=value, got '" + key_equals_value + "'");
    }
    set(trim(key_equals_value.substr(0, eq)), trim(key_equals_value.substr(eq + 1)));
}

std::string RunConfig::str(const std::string& key) const {
    auto it = values_.find(key);
    if (it != values_.end()) return it->second;
    const KeySpec* spec = find_key(key);
    if (!spec) throw std::invalid_argument("unknown config key '" + key + "'");
    return spec->default_value;
}

int RunConfig::get_int(const std::string& key) const {
    const std::string v = str(key);
    try {
        std::size_t used = 0;
        const int out = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ValidationError("config key '" + key + "' expects an integer, got '" + v + "'");
    }
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
    const std::string v = str(key);
    try {
        std::size_t used = 0;
        const unsigned long long out = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<std::uint64_t>(out);
    } catch (const std::exception&) {
        throw ValidationError("config key '" + key + "' expects an unsigned integer, got '" + v +
                              "'");
    }
}

double RunConfig::get_double(const std::string& key) const {
    const std::string v = str(key);
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ValidationError("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ValidationError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

std::map<std::string, std::string> RunConfig::resolved() const {
    std::map<std::string, std::string> out;
    for (const auto& k : known_keys()) out[k.name] = str(k.name);
    return out;
}

std::string RunConfig::fingerprint() const {
    std::uint64_t h = fnv1a64("run_config");
    for (const auto& [k, v] : resolved()) {
        h = fnv1a64(k, h);
        h = fnv1a64("=", h);
        h = fnv1a64(v, h);
        h = fnv1a64("\n", h);
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void RunConfig::write_resolved(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    os << "# resolved configuration, fingerprint " << fingerprint() << "\n";
    for (const auto& [k, v] : resolved()) os << k << " = " << v << "\n";
    if (!os) throw std::runtime_error("short write: " + path.string());
}

SynthesisConfig RunConfig::synthesis_config() const {
    SynthesisConfig cfg;
    cfg.n_testsets = get_int("synth.n_testsets");
    cfg.users_per_testset = get_int("synth.users_per_testset");
    cfg.seed = get_u64("synth.seed");
    cfg.context_signal_weight = get_double("synth.context_signal_weight");
    cfg.speaker_signal_weight = get_double("synth.speaker_signal_weight");
    cfg.noise_std = get_double("synth.noise_std");
    cfg.content_residual_std = get_double("synth.content_residual_std");
    cfg.feature_dim = get_int("synth.feature_dim");
    cfg.frames_per_second = get_double("synth.frames_per_second");
    cfg.latent_dim = get_int("synth.latent_dim");
    cfg.frame_noise_std = get_double("synth.frame_noise_std");
    cfg.logit_scale = get_double("synth.logit_scale");
    cfg.min_duration_s = get_double("synth.min_duration_s");
    cfg.max_duration_s = get_double("synth.max_duration_s");
    return cfg;
}

FusionModelConfig RunConfig::model_config() const {
    FusionModelConfig cfg;
    cfg.hidden_size = get_int("model.hidden_size");
    cfg.acoustic_len = get_int("model.acoustic_len");
    cfg.transcript_len = get_int("model.transcript_len");
    cfg.n_layers = get_int("model.n_layers");
    cfg.n_heads = get_int("model.n_heads");
    cfg.ffn_mult = get_int("model.ffn_mult");
    cfg.dropout = get_double("model.dropout");
    cfg.backbone.kind = backend_kind_from_name(str("model.backbone"));
    cfg.backbone.feature_dim = get_int("model.backbone_dim");
    cfg.backbone.frame_stride_s = get_double("model.frame_stride_s");
    cfg.backbone.stub_input_dim = get_int("model.stub_input_dim");
    cfg.backbone.identity = str("model.backbone");
    cfg.context_encoder.kind = backend_kind_from_name(str("model.context"));
    cfg.context_encoder.feature_dim = get_int("model.context_dim");
    cfg.context_encoder.supports_image = get_bool("model.context_supports_image");
    cfg.freeze_backbone = get_bool("model.freeze_backbone");
    cfg.use_qtype_embedding = get_bool("model.use_qtype_embedding");
    cfg.use_transcript_embedding = get_bool("model.use_transcript_embedding");
    cfg.normalize_scores = get_bool("model.normalize_scores");
    cfg.vocab.symbols = str("model.vocab_symbols");
    cfg.seed = get_u64("model.seed");
    return cfg;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig cfg;
    cfg.batch_size = get_int("train.batch_size");
    cfg.epochs = get_int("train.epochs");
    cfg.seed = get_u64("train.seed");
    cfg.shuffle = get_bool("train.shuffle");
    cfg.grad_check_mode = get_bool("train.grad_check_mode");
    cfg.optimizer.lr = get_double("train.lr");
    cfg.optimizer.beta1 = get_double("train.beta1");
    cfg.optimizer.beta2 = get_double("train.beta2");
    cfg.optimizer.eps = get_double("train.eps");
    cfg.patience = get_int("train.patience");
    return cfg;
}

}  // namespace asa
