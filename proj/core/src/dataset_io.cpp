#include "asa/dataset_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "asa/rng.hpp"

namespace asa {

namespace {

using ordered_json = nlohmann::ordered_json;

void put_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(std::ostream& os, const Mat& m, std::uint16_t version) {
    if (version != kTensorVersionF32 && version != kTensorVersionF64) {
        throw std::invalid_argument("unsupported tensor file version " +
                                    std::to_string(version));
    }
    os.write("ASAF", 4);
    put_u16(os, version);
    put_u32(os, static_cast<std::uint32_t>(m.rows));
    put_u32(os, static_cast<std::uint32_t>(m.cols));
    if (version == kTensorVersionF32) {
        for (double x : m.d) {
            const float f = static_cast<float>(x);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(os, bits);
        }
    } else {
        for (double x : m.d) {
            std::uint64_t bits;
            std::memcpy(&bits, &x, 8);
            put_u32(os, static_cast<std::uint32_t>(bits & 0xffffffffULL));
            put_u32(os, static_cast<std::uint32_t>(bits >> 32));
        }
    }
}

Mat read_tensor(std::istream& is, const std::string& what) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "ASAF", 4) != 0) {
        throw std::runtime_error("bad tensor magic in " + what);
    }
    const std::uint16_t version = get_u16(is);
    if (version != kTensorVersionF32 && version != kTensorVersionF64) {
        throw std::runtime_error("unsupported tensor version " + std::to_string(version) +
                                 " in " + what);
    }
    const int rows = static_cast<int>(get_u32(is));
    const int cols = static_cast<int>(get_u32(is));
    if (!is || rows < 0 || cols < 0) throw std::runtime_error("truncated tensor in " + what);
    Mat m(rows, cols);
    if (version == kTensorVersionF32) {
        for (auto& x : m.d) {
            const std::uint32_t bits = get_u32(is);
            float f;
            std::memcpy(&f, &bits, 4);
            x = static_cast<double>(f);
        }
    } else {
        for (auto& x : m.d) {
            const std::uint64_t lo = get_u32(is);
            const std::uint64_t hi = get_u32(is);
            const std::uint64_t bits = lo | (hi << 32);
            std::memcpy(&x, &bits, 8);
        }
    }
    if (!is) throw std::runtime_error("truncated tensor payload in " + what);
    return m;
}

void write_tensor_file(const std::filesystem::path& path, const Mat& m,
                       std::uint16_t version) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    write_tensor(os, m, version);
    if (!os) throw std::runtime_error("short write: " + path.string());
}

namespace {

TensorFileHeader read_header_checked(std::istream& is, const std::filesystem::path& path) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "ASAF", 4) != 0) {
        throw std::runtime_error("bad magic in tensor file " + path.string());
    }
    TensorFileHeader h;
    h.version = get_u16(is);
    if (h.version != kTensorVersionF32 && h.version != kTensorVersionF64) {
        throw std::runtime_error("unsupported tensor file version " +
                                 std::to_string(h.version) + " in " + path.string());
    }
    h.rows = static_cast<int>(get_u32(is));
    h.cols = static_cast<int>(get_u32(is));
    if (!is || h.rows < 0 || h.cols < 0) {
        throw std::runtime_error("truncated tensor header in " + path.string());
    }
    return h;
}

}  // namespace

TensorFileHeader read_tensor_header(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open tensor file " + path.string());
    const TensorFileHeader h = read_header_checked(is, path);
    const std::uintmax_t elem = h.version == kTensorVersionF32 ? 4 : 8;
    const std::uintmax_t expected =
        14 + elem * static_cast<std::uintmax_t>(h.rows) * static_cast<std::uintmax_t>(h.cols);
    const std::uintmax_t actual = std::filesystem::file_size(path);
    if (actual != expected) {
        throw std::runtime_error("tensor file " + path.string() + " declares " +
                                 std::to_string(h.rows) + "x" + std::to_string(h.cols) +
                                 " but holds " + std::to_string(actual) + " bytes (expected " +
                                 std::to_string(expected) + ")");
    }
    return h;
}

Mat read_tensor_file(const std::filesystem::path& path) {
    const TensorFileHeader h = read_tensor_header(path);
    std::ifstream is(path, std::ios::binary);
    is.seekg(14);
    Mat m(h.rows, h.cols);
    if (h.version == kTensorVersionF32) {
        for (auto& x : m.d) {
            const std::uint32_t bits = get_u32(is);
            float f;
            std::memcpy(&f, &bits, 4);
            x = static_cast<double>(f);
        }
    } else {
        for (auto& x : m.d) {
            const std::uint64_t lo = get_u32(is);
            const std::uint64_t hi = get_u32(is);
            const std::uint64_t bits = lo | (hi << 32);
            std::memcpy(&x, &bits, 8);
        }
    }
    if (!is) throw std::runtime_error("truncated tensor payload in " + path.string());
    return m;
}

// ── Manifests ───────────────────────────────────────────────────────────────

void DatasetManifest::rebuild_roster() {
    testsets.clear();
    speakers.clear();
    std::set<std::string> seen_ts, seen_sp;
    for (const auto& e : entries) {
        if (seen_ts.insert(e.prompt.testset_id).second) testsets.push_back(e.prompt.testset_id);
        if (seen_sp.insert(e.speaker_id).second) speakers.push_back(e.speaker_id);
    }
}

const ResponseSample* DatasetManifest::find(const std::string& response_id) const {
    for (const auto& e : entries) {
        if (e.response_id == response_id) return &e;
    }
    return nullptr;
}

std::filesystem::path DatasetManifest::resolve(const std::string& ref) const {
    std::filesystem::path p(ref);
    if (p.is_absolute() || base_dir.empty()) return p;
    return base_dir / p;
}

bool manifest_equal(const DatasetManifest& a, const DatasetManifest& b) {
    if (a.entries.size() != b.entries.size()) return false;
    auto prompt_eq = [](const PromptContent& x, const PromptContent& y) {
        return x.content_id == y.content_id && x.testset_id == y.testset_id &&
               x.part == y.part && x.sub == y.sub && x.question_no == y.question_no &&
               x.transcript_text == y.transcript_text && x.context_texts == y.context_texts &&
               x.context_image_ref == y.context_image_ref;
    };
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        const auto& x = a.entries[i];
        const auto& y = b.entries[i];
        if (!(x.response_id == y.response_id && x.speaker_id == y.speaker_id &&
              prompt_eq(x.prompt, y.prompt) && x.audio_ref == y.audio_ref &&
              x.feature_ref == y.feature_ref && x.duration_s == y.duration_s &&
              x.scores == y.scores)) {
            return false;
        }
    }
    return a.testsets == b.testsets && a.speakers == b.speakers;
}

namespace {

const char* const kManifestKeys[] = {"response_id", "speaker_id",  "testset_id",
                                     "part",        "sub",         "question_no",
                                     "transcript",  "context_texts", "context_image_ref",
                                     "feature_ref", "audio_ref",   "duration_s",
                                     "scores"};

ordered_json sample_to_json(const ResponseSample& s) {
    ordered_json j;
    j["response_id"] = s.response_id;
    j["speaker_id"] = s.speaker_id;
    j["testset_id"] = s.prompt.testset_id;
    j["part"] = s.prompt.part;
    j["sub"] = s.prompt.sub ? ordered_json(std::string(1, s.prompt.sub)) : ordered_json(nullptr);
    j["question_no"] = s.prompt.question_no;
    j["transcript"] =
        s.prompt.transcript_text ? ordered_json(*s.prompt.transcript_text) : ordered_json(nullptr);
    if (s.prompt.context_texts.empty()) {
        j["context_texts"] = nullptr;
    } else {
        j["context_texts"] = s.prompt.context_texts;
    }
    j["context_image_ref"] = s.prompt.context_image_ref ? ordered_json(*s.prompt.context_image_ref)
                                                        : ordered_json(nullptr);
    j["feature_ref"] = s.feature_ref ? ordered_json(*s.feature_ref) : ordered_json(nullptr);
    j["audio_ref"] = s.audio_ref ? ordered_json(*s.audio_ref) : ordered_json(nullptr);
    j["duration_s"] = s.duration_s;
    ordered_json scores;
    for (const auto& [c, v] : s.scores) scores[criterion_code(c)] = v;
    j["scores"] = scores;
    return j;
}

ResponseSample sample_from_json(const ordered_json& j, int line_no) {
    auto fail = [line_no](const std::string& msg) -> void {
        throw ValidationError("manifest line " + std::to_string(line_no) + ": " + msg);
    };
    if (!j.is_object()) fail("record is not an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool known = false;
        for (const char* k : kManifestKeys) known = known || key == k;
        if (!known) fail("unknown key '" + key + "'");
    }
    for (const char* k : kManifestKeys) {
        if (!j.contains(k)) fail(std::string("missing key '") + k + "'");
    }

    ResponseSample s;
    try {
        s.response_id = j.at("response_id").get<std::string>();
        s.speaker_id = j.at("speaker_id").get<std::string>();
        s.prompt.testset_id = j.at("testset_id").get<std::string>();
        s.prompt.part = j.at("part").get<int>();
        if (!j.at("sub").is_null()) {
            const auto sub = j.at("sub").get<std::string>();
            if (sub.size() != 1) fail("sub must be a single letter");
            s.prompt.sub = sub[0];
        }
        s.prompt.question_no = j.at("question_no").get<int>();
        if (!j.at("transcript").is_null()) {
            s.prompt.transcript_text = j.at("transcript").get<std::string>();
        }
        if (!j.at("context_texts").is_null()) {
            s.prompt.context_texts = j.at("context_texts").get<std::vector<std::string>>();
        }
        if (!j.at("context_image_ref").is_null()) {
            s.prompt.context_image_ref = j.at("context_image_ref").get<std::string>();
        }
        if (!j.at("feature_ref").is_null()) {
            s.feature_ref = j.at("feature_ref").get<std::string>();
        }
        if (!j.at("audio_ref").is_null()) {
            s.audio_ref = j.at("audio_ref").get<std::string>();
        }
        s.duration_s = j.at("duration_s").get<double>();
        if (!j.at("scores").is_object()) fail("scores must be an object");
        for (const auto& [code, v] : j.at("scores").items()) {
            s.scores[criterion_from_code(code)] = v.get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        fail(e.what());
    }
    s.prompt.content_id = s.prompt.testset_id + "_q" +
                          (s.prompt.question_no < 10 ? "0" : "") +
                          std::to_string(s.prompt.question_no);
    return s;
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path, bool check_files) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest " + path.string());

    DatasetManifest m;
    m.base_dir = path.parent_path();

    std::string line;
    int line_no = 0;
    std::set<std::string> seen_ids;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ValidationError("manifest line " + std::to_string(line_no) +
                                  ": parse error: " + e.what());
        }
        ResponseSample s = sample_from_json(j, line_no);
        if (!seen_ids.insert(s.response_id).second) {
            throw ValidationError("duplicate response_id '" + s.response_id + "' at line " +
                                  std::to_string(line_no));
        }
        const auto violations = validate_sample(s);
        if (!violations.empty()) {
            std::ostringstream os;
            os << "invalid sample '" << s.response_id << "':";
            for (const auto& v : violations) os << " [" << v << "]";
            throw ValidationError(os.str());
        }
        m.entries.push_back(std::move(s));
    }
    if (check_files) {
        for (const auto& e : m.entries) {
            if (!e.feature_ref) continue;
            const auto p = m.resolve(*e.feature_ref);
            try {
                const TensorFileHeader h = read_tensor_header(p);
                if (h.rows <= 0 || h.cols <= 0) {
                    throw std::runtime_error("empty tensor");
                }
            } catch (const std::exception& ex) {
                throw ValidationError("feature file for '" + e.response_id +
                                      "' failed header check: " + ex.what());
            }
        }
    }
    m.rebuild_roster();
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    for (const auto& e : manifest.entries) {
        os << sample_to_json(e).dump() << "\n";
    }
    if (!os) throw std::runtime_error("short write: " + path.string());
}

// ── Synthetic datasets ──────────────────────────────────────────────────────

void validate_synthesis_config(const SynthesisConfig& cfg) {
    if (cfg.n_testsets <= 0) throw ValidationError("n_testsets must be positive");
    if (cfg.users_per_testset <= 0) throw ValidationError("users_per_testset must be positive");
    if (cfg.context_signal_weight < 0.0 || cfg.speaker_signal_weight < 0.0) {
        throw ValidationError("signal weights must be non-negative");
    }
    if (cfg.context_signal_weight + cfg.speaker_signal_weight > 1.0) {
        throw ValidationError("context_signal_weight + speaker_signal_weight must be <= 1");
    }
    if (cfg.noise_std < 0.0) throw ValidationError("noise_std must be >= 0");
    if (cfg.content_residual_std < 0.0) throw ValidationError("content_residual_std must be >= 0");
    if (cfg.feature_dim <= 0) throw ValidationError("feature_dim must be positive");
    if (!(cfg.frames_per_second > 0.0)) throw ValidationError("frames_per_second must be > 0");
    if (cfg.latent_dim <= 0) throw ValidationError("latent_dim must be positive");
    if (!(cfg.min_duration_s > 0.0) || cfg.max_duration_s > 60.0 ||
        cfg.min_duration_s > cfg.max_duration_s) {
        throw ValidationError("duration range must satisfy 0 < min <= max <= 60");
    }
}

namespace {

const char* const kFillerWords[] = {
    "meeting", "office",  "travel",  "morning", "ticket", "schedule", "coffee",
    "garden",  "weather", "library", "concert", "market", "dinner",   "holiday",
    "teacher", "student", "report",  "project", "answer", "question", "station",
    "airport", "picture", "message"};

std::string make_words(Rng& rng, int n_words) {
    std::string out;
    for (int i = 0; i < n_words; ++i) {
        if (i > 0) out += ' ';
        out += kFillerWords[rng.bounded(std::size(kFillerWords))];
    }
    return out;
}

std::string format_latent_line(const std::vector<double>& z) {
    std::string out;
    char buf[32];
    for (std::size_t i = 0; i < z.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.4f", z[i]);
        if (i > 0) out += ' ';
        out += buf;
    }
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::string two_digits(int v) { return (v < 10 ? "0" : "") + std::to_string(v); }

}  // namespace

GeneratedDataset generate_synthetic(const SynthesisConfig& cfg,
                                    const std::filesystem::path& out_dir) {
    validate_synthesis_config(cfg);

    std::error_code ec;
    std::filesystem::create_directories(out_dir / "features", ec);
    std::filesystem::create_directories(out_dir / "contexts", ec);
    if (!std::filesystem::is_directory(out_dir / "features") ||
        !std::filesystem::is_directory(out_dir / "contexts")) {
        throw std::runtime_error("cannot create output directories under " + out_dir.string());
    }

    const int K = cfg.latent_dim;
    const int Db = cfg.feature_dim;

    // Fixed projection embedding speaker latents into the feature rows; the
    // same map across the whole dataset keeps the speaker factor learnable
    // for unseen speakers.
    Rng proj_rng(hash_combine(cfg.seed, fnv1a64("speaker_proj")));
    Mat speaker_proj(K, Db);
    speaker_proj.fill_normal(proj_rng, 0.0, 0.8 / std::sqrt(static_cast<double>(K)));

    const double w_content = cfg.logit_scale * std::sqrt(cfg.context_signal_weight);
    const double w_speaker = cfg.logit_scale * std::sqrt(cfg.speaker_signal_weight);

    GeneratedDataset out;
    out.manifest.base_dir = out_dir;

    for (int ts = 1; ts <= cfg.n_testsets; ++ts) {
        const std::string testset_id = "ts" + two_digits(ts);

        struct ContentInfo {
            std::string content_id;
            std::vector<double> latent;
            std::vector<double> signature;  // per-content acoustic imprint
            double residual = 0.0;
        };
        std::vector<ContentInfo> contents(12);  // index by question_no 1..11

        for (int q = 1; q <= 11; ++q) {
            ContentInfo& info = contents[static_cast<std::size_t>(q)];
            info.content_id = testset_id + "_q" + two_digits(q);
            Rng crng(hash_combine(cfg.seed, fnv1a64("content:" + info.content_id)));
            info.latent.resize(static_cast<std::size_t>(K));
            for (auto& z : info.latent) z = crng.normal();
            info.signature.resize(static_cast<std::size_t>(Db));
            for (auto& s : info.signature) s = crng.next_u64() & 1 ? 0.8 : -0.8;
            info.residual = crng.normal();
            out.truth.content_factor[info.content_id] = info.latent[0];
            out.truth.content_residual[info.content_id] = info.residual;
        }

        for (int u = 1; u <= cfg.users_per_testset; ++u) {
            const std::string speaker_id = testset_id + "_u" + two_digits(u);
            Rng srng(hash_combine(cfg.seed, fnv1a64("speaker:" + speaker_id)));
            std::vector<double> speaker_latent(static_cast<std::size_t>(K));
            for (auto& z : speaker_latent) z = srng.normal();
            out.truth.speaker_factor[speaker_id] = speaker_latent[0];

            std::vector<double> speaker_acoustic(static_cast<std::size_t>(Db), 0.0);
            for (int k = 0; k < K; ++k) {
                for (int j = 0; j < Db; ++j) {
                    speaker_acoustic[static_cast<std::size_t>(j)] +=
                        speaker_latent[static_cast<std::size_t>(k)] * speaker_proj(k, j);
                }
            }

            for (int q = 1; q <= 11; ++q) {
                const ContentInfo& info = contents[static_cast<std::size_t>(q)];
                const auto pq = part_for_question(q);
                const PartSpec& spec = part_spec(pq.part, pq.sub);

                ResponseSample s;
                s.response_id = speaker_id + "_q" + two_digits(q);
                s.speaker_id = speaker_id;
                s.prompt.content_id = info.content_id;
                s.prompt.testset_id = testset_id;
                s.prompt.part = pq.part;
                s.prompt.sub = pq.sub;
                s.prompt.question_no = q;

                Rng prng(hash_combine(cfg.seed, fnv1a64("prompt:" + info.content_id)));
                if (spec.has_transcript) {
                    s.prompt.transcript_text = make_words(prng, 4 + static_cast<int>(prng.bounded(5)));
                }
                if (spec.has_text_context) {
                    const std::string latent_line = format_latent_line(info.latent);
                    if (pq.part == 3) {
                        s.prompt.context_texts = {make_words(prng, 8), latent_line};
                    } else if (pq.part == 4) {
                        s.prompt.context_texts = {make_words(prng, 8), make_words(prng, 6),
                                                  latent_line};
                    } else {
                        s.prompt.context_texts = {make_words(prng, 6), latent_line};
                    }
                }
                if (spec.has_image_context) {
                    const std::string ref = "contexts/" + info.content_id + ".lat.asaf";
                    const auto abs = out_dir / ref;
                    if (u == 1) {
                        Mat latent(1, K);
                        for (int k = 0; k < K; ++k) latent(0, k) = info.latent[static_cast<std::size_t>(k)];
                        write_tensor_file(abs, latent, kTensorVersionF32);
                    }
                    s.prompt.context_image_ref = ref;
                }

                Rng rng(hash_combine(cfg.seed, fnv1a64("sample:" + s.response_id)));
                s.duration_s = rng.uniform(cfg.min_duration_s, cfg.max_duration_s);
                const int frames = static_cast<int>(
                    std::llround(s.duration_s * cfg.frames_per_second));
                const int t_raw = std::max(1, frames);

                Mat features(t_raw, Db);
                for (int t = 0; t < t_raw; ++t) {
                    for (int j = 0; j < Db; ++j) {
                        features(t, j) = info.signature[static_cast<std::size_t>(j)] +
                                         speaker_acoustic[static_cast<std::size_t>(j)] +
                                         rng.normal(0.0, cfg.frame_noise_std);
                    }
                }
                const std::string feat_ref = "features/" + s.response_id + ".asaf";
                write_tensor_file(out_dir / feat_ref, features, kTensorVersionF32);
                s.feature_ref = feat_ref;

                const double base = w_content * info.latent[0] +
                                    w_speaker * speaker_latent[0] +
                                    cfg.content_residual_std * info.residual;
                for (Criterion c : spec.criteria) {
                    const double logit = base + cfg.noise_std * rng.normal();
                    const double score = spec.score_max * sigmoid(logit);
                    s.scores[c] = std::clamp(score, 0.0, spec.score_max);
                }

                const auto violations = validate_sample(s);
                if (!violations.empty()) {
                    throw std::logic_error("generator produced invalid sample " + s.response_id +
                                           ": " + violations.front());
                }
                out.manifest.entries.push_back(std::move(s));
            }
        }
    }

    out.manifest.rebuild_roster();
    save_manifest(out.manifest, out_dir / "manifest.jsonl");
    return out;
}

}  // namespace asa
