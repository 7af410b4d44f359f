#include "asa/fusion_model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "asa/dataset_io.hpp"

namespace asa {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::string layer_name(int l, const char* suffix) {
    return "layers." + std::to_string(l) + "." + suffix;
}

}  // namespace

FusionModel::FusionModel(const FusionModelConfig& cfg)
    : cfg_(finalize_config(cfg)), vocab_(make_vocabulary(cfg.vocab)) {
    const int H = cfg_.hidden_size;
    const int F = cfg_.ffn_mult * H;
    const int S = cfg_.sequence_len();
    const int Db = cfg_.backbone.feature_dim;
    const int Dc = cfg_.context_encoder.kind == BackendKind::None
                       ? 0
                       : cfg_.context_encoder.feature_dim;

    register_tensor("acoustic_adapter.weight", Db, H, InitKind::Normal);
    register_tensor("acoustic_adapter.bias", 1, H, InitKind::Zero);
    if (Dc > 0) {
        register_tensor("context_adapter.weight", Dc, H, InitKind::Normal);
        register_tensor("context_adapter.bias", 1, H, InitKind::Zero);
    }
    register_tensor("part_embedding", 6, H, InitKind::Normal);
    register_tensor("question_embedding", 11, H, InitKind::Normal);
    register_tensor("char_embedding", vocab_.size(), H, InitKind::Normal);
    register_tensor("lstm.weight_ih", H, 4 * H, InitKind::Normal);
    register_tensor("lstm.weight_hh", H, 4 * H, InitKind::Normal);
    register_tensor("lstm.bias", 1, 4 * H, InitKind::Zero);
    register_tensor("criterion_tokens", kNumCriteria, H, InitKind::Normal);
    register_tensor("positional_encoding", S, H, InitKind::Normal);
    register_tensor("modality_encoding", 5, H, InitKind::Normal);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        register_tensor(layer_name(l, "attn.wq"), H, H, InitKind::Normal);
        register_tensor(layer_name(l, "attn.bq"), 1, H, InitKind::Zero);
        register_tensor(layer_name(l, "attn.wk"), H, H, InitKind::Normal);
        register_tensor(layer_name(l, "attn.bk"), 1, H, InitKind::Zero);
        register_tensor(layer_name(l, "attn.wv"), H, H, InitKind::Normal);
        register_tensor(layer_name(l, "attn.bv"), 1, H, InitKind::Zero);
        register_tensor(layer_name(l, "attn.wo"), H, H, InitKind::Normal);
        register_tensor(layer_name(l, "attn.bo"), 1, H, InitKind::Zero);
        register_tensor(layer_name(l, "ln1.gamma"), 1, H, InitKind::One);
        register_tensor(layer_name(l, "ln1.beta"), 1, H, InitKind::Zero);
        register_tensor(layer_name(l, "ffn.w1"), H, F, InitKind::Normal);
        register_tensor(layer_name(l, "ffn.b1"), 1, F, InitKind::Zero);
        register_tensor(layer_name(l, "ffn.w2"), F, H, InitKind::Normal);
        register_tensor(layer_name(l, "ffn.b2"), 1, H, InitKind::Zero);
        register_tensor(layer_name(l, "ln2.gamma"), 1, H, InitKind::One);
        register_tensor(layer_name(l, "ln2.beta"), 1, H, InitKind::Zero);
    }
    register_tensor("heads.weight", kNumCriteria, H, InitKind::Zero);
    register_tensor("heads.bias", 1, kNumCriteria, InitKind::Zero);
    if (cfg_.backbone.stub_input_dim > 0) {
        register_tensor("backbone_stub.weight", cfg_.backbone.stub_input_dim, Db,
                        InitKind::Normal, /*backbone=*/true);
        register_tensor("backbone_stub.bias", 1, Db, InitKind::Zero, /*backbone=*/true);
    }

    init_parameters();
    set_trainable(has_backbone_params() ? cfg_.freeze_backbone : true);
}

void FusionModel::register_tensor(const std::string& name, int rows, int cols, InitKind init,
                                  bool backbone) {
    NamedTensor t;
    t.name = name;
    t.value = Mat(rows, cols);
    t.grad = Mat(rows, cols);
    t.backbone = backbone;
    index_[name] = static_cast<int>(params_.size());
    params_.push_back(std::move(t));
    init_kinds_.push_back(init);
}

void FusionModel::init_parameters() {
    Rng rng(hash_combine(cfg_.seed, fnv1a64("model_init")));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Mat& v = params_[i].value;
        switch (init_kinds_[i]) {
            case InitKind::Normal:
                v.fill_normal(rng, 0.0, 0.02);
                break;
            case InitKind::Zero:
                v.zero();
                break;
            case InitKind::One:
                std::fill(v.d.begin(), v.d.end(), 1.0);
                break;
        }
    }
}

NamedTensor& FusionModel::tensor(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no tensor named '" + name + "'");
    return params_[static_cast<std::size_t>(it->second)];
}

const NamedTensor& FusionModel::tensor(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no tensor named '" + name + "'");
    return params_[static_cast<std::size_t>(it->second)];
}

bool FusionModel::has_tensor(const std::string& name) const { return index_.count(name) > 0; }

void FusionModel::zero_grads() {
    for (auto& t : params_) t.grad.zero();
}

bool FusionModel::has_backbone_params() const { return has_tensor("backbone_stub.weight"); }

void FusionModel::set_trainable(bool freeze_backbone) {
    if (!freeze_backbone && !has_backbone_params()) {
        throw CapabilityError("backbone '" + cfg_.backbone.identity +
                              "' has no parameters to unfreeze");
    }
    cfg_.freeze_backbone = freeze_backbone;
    for (auto& t : params_) {
        t.trainable = t.backbone ? !freeze_backbone : true;
    }
}

std::uint64_t FusionModel::backbone_hash() const {
    std::uint64_t h = fnv1a64("backbone");
    for (const auto& t : params_) {
        if (t.backbone) h = hash_mat(t.value, h);
    }
    return h;
}

std::uint64_t FusionModel::parameter_hash() const {
    std::uint64_t h = fnv1a64("parameters");
    for (const auto& t : params_) h = hash_mat(t.value, h);
    return h;
}

// ── Embedding stages ────────────────────────────────────────────────────────

std::vector<double> FusionModel::question_type_embedding(int part, char sub,
                                                         int question_no) const {
    const int row = part_row_index(part, sub);
    if (question_no < 1 || question_no > 11) {
        throw ValidationError("question_no " + std::to_string(question_no) +
                              " out of range 1..11");
    }
    const Mat& parts = tensor("part_embedding").value;
    const Mat& questions = tensor("question_embedding").value;
    std::vector<double> out(static_cast<std::size_t>(cfg_.hidden_size));
    for (int j = 0; j < cfg_.hidden_size; ++j) {
        out[static_cast<std::size_t>(j)] = parts(row, j) + questions(question_no - 1, j);
    }
    return out;
}

Mat FusionModel::transcript_embedding(const std::vector<int>* ids, LstmCache* cache) const {
    const int H = cfg_.hidden_size;
    const int L = cfg_.transcript_len;
    if (cache) *cache = LstmCache{};
    if (ids == nullptr) {
        return Mat(L, H);  // exact zeros for transcript-free prompts
    }
    if (static_cast<int>(ids->size()) != L) {
        throw std::invalid_argument("transcript ids length " + std::to_string(ids->size()) +
                                    " != transcript_len " + std::to_string(L));
    }
    const Mat& emb = tensor("char_embedding").value;
    for (int id : *ids) {
        if (id < 0 || id >= emb.rows) {
            throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of " +
                                  std::to_string(emb.rows));
        }
    }

    const Mat& w_ih = tensor("lstm.weight_ih").value;
    const Mat& w_hh = tensor("lstm.weight_hh").value;
    const Mat& bias = tensor("lstm.bias").value;

    LstmCache local;
    LstmCache& c = cache ? *cache : local;
    c.active = true;
    c.ids = *ids;
    c.x.resize(L, H);
    c.i.resize(L, H);
    c.f.resize(L, H);
    c.g.resize(L, H);
    c.o.resize(L, H);
    c.c.resize(L, H);
    c.tanh_c.resize(L, H);
    c.h.resize(L, H);

    std::vector<double> z(static_cast<std::size_t>(4 * H));
    for (int t = 0; t < L; ++t) {
        const int id = (*ids)[static_cast<std::size_t>(t)];
        for (int j = 0; j < H; ++j) c.x(t, j) = emb(id, j);

        for (int j = 0; j < 4 * H; ++j) z[static_cast<std::size_t>(j)] = bias(0, j);
        for (int k = 0; k < H; ++k) {
            const double xk = c.x(t, k);
            if (xk != 0.0) {
                const double* wr = w_ih.row(k);
                for (int j = 0; j < 4 * H; ++j) z[static_cast<std::size_t>(j)] += xk * wr[j];
            }
            const double hk = t > 0 ? c.h(t - 1, k) : 0.0;
            if (hk != 0.0) {
                const double* wr = w_hh.row(k);
                for (int j = 0; j < 4 * H; ++j) z[static_cast<std::size_t>(j)] += hk * wr[j];
            }
        }
        for (int j = 0; j < H; ++j) {
            const double iv = sigmoid(z[static_cast<std::size_t>(j)]);
            const double fv = sigmoid(z[static_cast<std::size_t>(H + j)]);
            const double gv = std::tanh(z[static_cast<std::size_t>(2 * H + j)]);
            const double ov = sigmoid(z[static_cast<std::size_t>(3 * H + j)]);
            const double c_prev = t > 0 ? c.c(t - 1, j) : 0.0;
            const double cv = fv * c_prev + iv * gv;
            const double tc = std::tanh(cv);
            c.i(t, j) = iv;
            c.f(t, j) = fv;
            c.g(t, j) = gv;
            c.o(t, j) = ov;
            c.c(t, j) = cv;
            c.tanh_c(t, j) = tc;
            c.h(t, j) = ov * tc;
        }
    }
    return c.h;
}

Mat FusionModel::adapt_acoustic(const Mat& raw, int* frames_used) const {
    const int H = cfg_.hidden_size;
    const int Db = cfg_.backbone.feature_dim;
    if (raw.cols != Db) {
        throw std::invalid_argument("acoustic features have " + std::to_string(raw.cols) +
                                    " dims, adapter expects " + std::to_string(Db));
    }
    const Mat& w = tensor("acoustic_adapter.weight").value;
    const Mat& b = tensor("acoustic_adapter.bias").value;
    const int used = std::min(raw.rows, cfg_.acoustic_len);
    if (frames_used) *frames_used = used;
    Mat out(cfg_.acoustic_len, H);  // rows past `used` stay exactly zero
    for (int t = 0; t < used; ++t) {
        double* or_ = out.row(t);
        for (int j = 0; j < H; ++j) or_[j] = b(0, j);
        const double* rr = raw.row(t);
        for (int k = 0; k < Db; ++k) {
            const double rk = rr[k];
            if (rk == 0.0) continue;
            const double* wr = w.row(k);
            for (int j = 0; j < H; ++j) or_[j] += rk * wr[j];
        }
    }
    return out;
}

std::vector<double> FusionModel::adapt_context(const Mat* raw) const {
    const int H = cfg_.hidden_size;
    std::vector<double> out(static_cast<std::size_t>(H), 0.0);
    if (raw == nullptr) return out;  // exact zeros when context is absent
    if (cfg_.context_encoder.kind == BackendKind::None) {
        throw ValidationError("context vector supplied but the context channel is disabled");
    }
    const int Dc = cfg_.context_encoder.feature_dim;
    require_shape(*raw, 1, Dc, "context vector");
    const Mat& w = tensor("context_adapter.weight").value;
    const Mat& b = tensor("context_adapter.bias").value;
    for (int j = 0; j < H; ++j) out[static_cast<std::size_t>(j)] = b(0, j);
    for (int k = 0; k < Dc; ++k) {
        const double rk = (*raw)(0, k);
        if (rk == 0.0) continue;
        const double* wr = w.row(k);
        for (int j = 0; j < H; ++j) out[static_cast<std::size_t>(j)] += rk * wr[j];
    }
    return out;
}

void FusionModel::assemble_sequence(const std::vector<double>& qtype,
                                    const std::vector<double>& ctx, const Mat& transcript,
                                    const Mat& acoustic, Mat& x0,
                                    std::vector<int>& modality_ids) const {
    const int H = cfg_.hidden_size;
    const int S = cfg_.sequence_len();
    if (static_cast<int>(qtype.size()) != H || static_cast<int>(ctx.size()) != H) {
        throw std::invalid_argument("assemble_sequence: token width mismatch");
    }
    require_shape(transcript, cfg_.transcript_len, H, "transcript block");
    require_shape(acoustic, cfg_.acoustic_len, H, "acoustic block");

    const Mat& crit = tensor("criterion_tokens").value;
    const Mat& pos = tensor("positional_encoding").value;
    const Mat& mod = tensor("modality_encoding").value;

    x0.resize(S, H);
    modality_ids.assign(static_cast<std::size_t>(S), 0);
    int r = 0;
    for (int cidx = 0; cidx < kNumCriteria; ++cidx, ++r) {
        for (int j = 0; j < H; ++j) x0(r, j) = crit(cidx, j);
        modality_ids[static_cast<std::size_t>(r)] = static_cast<int>(Modality::CriterionToken);
    }
    for (int j = 0; j < H; ++j) x0(r, j) = qtype[static_cast<std::size_t>(j)];
    modality_ids[static_cast<std::size_t>(r)] = static_cast<int>(Modality::QuestionType);
    ++r;
    for (int j = 0; j < H; ++j) x0(r, j) = ctx[static_cast<std::size_t>(j)];
    modality_ids[static_cast<std::size_t>(r)] = static_cast<int>(Modality::Context);
    ++r;
    for (int t = 0; t < cfg_.transcript_len; ++t, ++r) {
        for (int j = 0; j < H; ++j) x0(r, j) = transcript(t, j);
        modality_ids[static_cast<std::size_t>(r)] = static_cast<int>(Modality::Transcript);
    }
    for (int t = 0; t < cfg_.acoustic_len; ++t, ++r) {
        for (int j = 0; j < H; ++j) x0(r, j) = acoustic(t, j);
        modality_ids[static_cast<std::size_t>(r)] = static_cast<int>(Modality::Acoustic);
    }

    for (int p = 0; p < S; ++p) {
        const int m = modality_ids[static_cast<std::size_t>(p)];
        for (int j = 0; j < H; ++j) x0(p, j) += pos(p, j) + mod(m, j);
    }
}

std::array<double, kNumCriteria> FusionModel::criterion_mask(int part, char sub) {
    std::array<double, kNumCriteria> mask{};
    for (Criterion c : criteria_for_part(part, sub)) {
        mask[static_cast<std::size_t>(static_cast<int>(c))] = 1.0;
    }
    return mask;
}

// ── Transformer ─────────────────────────────────────────────────────────────

namespace {

void layer_norm_forward(const Mat& gamma, const Mat& beta, const Mat& x, Mat& y,
                        LayerNormCache& cache) {
    const int S = x.rows;
    const int H = x.cols;
    y.resize(S, H);
    cache.inv_std.assign(static_cast<std::size_t>(S), 0.0);
    cache.xhat.resize(S, H);
    for (int r = 0; r < S; ++r) {
        const double* xr = x.row(r);
        double mean = 0.0;
        for (int j = 0; j < H; ++j) mean += xr[j];
        mean /= H;
        double var = 0.0;
        for (int j = 0; j < H; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= H;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.inv_std[static_cast<std::size_t>(r)] = inv;
        double* hr = cache.xhat.row(r);
        double* yr = y.row(r);
        for (int j = 0; j < H; ++j) {
            hr[j] = (xr[j] - mean) * inv;
            yr[j] = gamma(0, j) * hr[j] + beta(0, j);
        }
    }
}

// dx from dy; accumulates parameter grads.
void layer_norm_backward(const Mat& gamma, const LayerNormCache& cache, const Mat& dy,
                         Mat& dgamma, Mat& dbeta, Mat& dx) {
    const int S = dy.rows;
    const int H = dy.cols;
    dx.resize(S, H);
    for (int r = 0; r < S; ++r) {
        const double* dyr = dy.row(r);
        const double* hr = cache.xhat.row(r);
        const double inv = cache.inv_std[static_cast<std::size_t>(r)];
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < H; ++j) {
            const double dxhat = dyr[j] * gamma(0, j);
            m1 += dxhat;
            m2 += dxhat * hr[j];
            dgamma(0, j) += dyr[j] * hr[j];
            dbeta(0, j) += dyr[j];
        }
        m1 /= H;
        m2 /= H;
        double* dxr = dx.row(r);
        for (int j = 0; j < H; ++j) {
            const double dxhat = dyr[j] * gamma(0, j);
            dxr[j] = inv * (dxhat - m1 - hr[j] * m2);
        }
    }
}

void add_bias_rows(Mat& m, const Mat& bias) {
    for (int r = 0; r < m.rows; ++r) {
        double* mr = m.row(r);
        for (int j = 0; j < m.cols; ++j) mr[j] += bias(0, j);
    }
}

void colsum_acc(const Mat& m, Mat& out) {
    for (int r = 0; r < m.rows; ++r) {
        const double* mr = m.row(r);
        for (int j = 0; j < m.cols; ++j) out(0, j) += mr[j];
    }
}

Mat head_slice(const Mat& m, int h, int dk) {
    Mat out(m.rows, dk);
    for (int r = 0; r < m.rows; ++r) {
        const double* mr = m.row(r) + h * dk;
        double* or_ = out.row(r);
        for (int j = 0; j < dk; ++j) or_[j] = mr[j];
    }
    return out;
}

void head_unslice_acc(const Mat& part, int h, int dk, Mat& full) {
    for (int r = 0; r < part.rows; ++r) {
        const double* pr = part.row(r);
        double* fr = full.row(r) + h * dk;
        for (int j = 0; j < dk; ++j) fr[j] += pr[j];
    }
}

void make_dropout_mask(Mat& mask, int rows, int cols, double p, Rng& rng) {
    mask.resize(rows, cols);
    const double keep_scale = 1.0 / (1.0 - p);
    for (auto& x : mask.d) x = rng.uniform() < p ? 0.0 : keep_scale;
}

void apply_mask(Mat& m, const Mat& mask) {
    for (std::size_t i = 0; i < m.d.size(); ++i) m.d[i] *= mask.d[i];
}

}  // namespace

Mat FusionModel::run_layers(const Mat& x0, std::vector<LayerCache>* caches, bool train_mode,
                            Rng* rng) const {
    const int H = cfg_.hidden_size;
    const int S = x0.rows;
    const int nh = cfg_.n_heads;
    const int dk = H / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    const bool dropout_on = train_mode && cfg_.dropout > 0.0 && rng != nullptr;

    if (caches) caches->assign(static_cast<std::size_t>(cfg_.n_layers), LayerCache{});

    Mat x = x0;
    for (int l = 0; l < cfg_.n_layers; ++l) {
        LayerCache local;
        LayerCache& c = caches ? (*caches)[static_cast<std::size_t>(l)] : local;
        c.x_in = x;

        const Mat& wq = tensor(layer_name(l, "attn.wq")).value;
        const Mat& wk = tensor(layer_name(l, "attn.wk")).value;
        const Mat& wv = tensor(layer_name(l, "attn.wv")).value;
        const Mat& wo = tensor(layer_name(l, "attn.wo")).value;

        matmul(x, wq, c.q);
        add_bias_rows(c.q, tensor(layer_name(l, "attn.bq")).value);
        matmul(x, wk, c.k);
        add_bias_rows(c.k, tensor(layer_name(l, "attn.bk")).value);
        matmul(x, wv, c.v);
        add_bias_rows(c.v, tensor(layer_name(l, "attn.bv")).value);

        c.ctx.resize(S, H);
        c.attn.assign(static_cast<std::size_t>(nh), Mat());
        for (int h = 0; h < nh; ++h) {
            const Mat qh = head_slice(c.q, h, dk);
            const Mat kh = head_slice(c.k, h, dk);
            const Mat vh = head_slice(c.v, h, dk);
            Mat scores;
            matmul_nt(qh, kh, scores);
            Mat& probs = c.attn[static_cast<std::size_t>(h)];
            probs.resize(S, S);
            for (int r = 0; r < S; ++r) {
                double* sr = scores.row(r);
                double mx = -1e300;
                for (int j = 0; j < S; ++j) {
                    sr[j] *= scale;
                    mx = std::max(mx, sr[j]);
                }
                double sum = 0.0;
                double* pr = probs.row(r);
                for (int j = 0; j < S; ++j) {
                    pr[j] = std::exp(sr[j] - mx);
                    sum += pr[j];
                }
                for (int j = 0; j < S; ++j) pr[j] /= sum;
            }
            Mat ctxh;
            matmul(probs, vh, ctxh);
            for (int r = 0; r < S; ++r) {
                const double* cr = ctxh.row(r);
                double* fr = c.ctx.row(r) + h * dk;
                for (int j = 0; j < dk; ++j) fr[j] = cr[j];
            }
        }

        matmul(c.ctx, wo, c.attn_out);
        add_bias_rows(c.attn_out, tensor(layer_name(l, "attn.bo")).value);
        if (dropout_on) {
            make_dropout_mask(c.attn_drop, S, H, cfg_.dropout, *rng);
            apply_mask(c.attn_out, c.attn_drop);
        }

        c.r1.resize(S, H);
        for (std::size_t i = 0; i < c.r1.d.size(); ++i) c.r1.d[i] = x.d[i] + c.attn_out.d[i];
        layer_norm_forward(tensor(layer_name(l, "ln1.gamma")).value,
                           tensor(layer_name(l, "ln1.beta")).value, c.r1, c.x1, c.ln1);

        matmul(c.x1, tensor(layer_name(l, "ffn.w1")).value, c.z1);
        add_bias_rows(c.z1, tensor(layer_name(l, "ffn.b1")).value);
        c.hidden.resize(c.z1.rows, c.z1.cols);
        for (std::size_t i = 0; i < c.z1.d.size(); ++i) c.hidden.d[i] = gelu(c.z1.d[i]);
        matmul(c.hidden, tensor(layer_name(l, "ffn.w2")).value, c.f2);
        add_bias_rows(c.f2, tensor(layer_name(l, "ffn.b2")).value);
        if (dropout_on) {
            make_dropout_mask(c.ffn_drop, S, H, cfg_.dropout, *rng);
            apply_mask(c.f2, c.ffn_drop);
        }

        c.r2.resize(S, H);
        for (std::size_t i = 0; i < c.r2.d.size(); ++i) c.r2.d[i] = c.x1.d[i] + c.f2.d[i];
        layer_norm_forward(tensor(layer_name(l, "ln2.gamma")).value,
                           tensor(layer_name(l, "ln2.beta")).value, c.r2, c.x_out, c.ln2);

        x = c.x_out;
    }
    return x;
}

std::array<double, kNumCriteria> FusionModel::forward(const SampleInput& input,
                                                      ForwardCache* cache, bool train_mode,
                                                      Rng* rng) const {
    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c = ForwardCache{};
    c.part = input.part;
    c.sub = input.sub;
    c.question_no = input.question_no;

    // Backbone stub (external backends under test): raw input is mapped to
    // D_b features by the stub's parameters before the adapter.
    const Mat* features = &input.acoustic_raw;
    if (has_backbone_params()) {
        const Mat& w = tensor("backbone_stub.weight").value;
        if (input.acoustic_raw.cols != w.rows) {
            throw std::invalid_argument("backbone stub expects " + std::to_string(w.rows) +
                                        " input dims, got " +
                                        std::to_string(input.acoustic_raw.cols));
        }
        c.acoustic_input = input.acoustic_raw;
        matmul(input.acoustic_raw, w, c.stub_out);
        add_bias_rows(c.stub_out, tensor("backbone_stub.bias").value);
        features = &c.stub_out;
    }

    Mat acoustic = adapt_acoustic(*features, &c.acoustic_frames);
    if (!has_backbone_params()) c.acoustic_input = input.acoustic_raw;

    c.qtype_active = cfg_.use_qtype_embedding;
    if (c.qtype_active) {
        c.qtype_token = question_type_embedding(input.part, input.sub, input.question_no);
    } else {
        c.qtype_token.assign(static_cast<std::size_t>(cfg_.hidden_size), 0.0);
    }

    const bool context_on = cfg_.context_encoder.kind != BackendKind::None;
    if (context_on && input.context_vec) {
        c.context_raw = input.context_vec;
        c.context_token = adapt_context(&*input.context_vec);
    } else {
        c.context_raw.reset();
        c.context_token = adapt_context(nullptr);
    }

    const std::vector<int>* ids =
        cfg_.use_transcript_embedding && input.transcript_ids ? &*input.transcript_ids : nullptr;
    c.transcript = transcript_embedding(ids, &c.lstm);

    assemble_sequence(c.qtype_token, c.context_token, c.transcript, acoustic, c.x0,
                      c.modality_ids);

    const Mat out = run_layers(c.x0, &c.layers, train_mode, rng);

    const Mat& hw = tensor("heads.weight").value;
    const Mat& hb = tensor("heads.bias").value;
    for (int k = 0; k < kNumCriteria; ++k) {
        double acc = hb(0, k);
        const double* orow = out.row(k);
        for (int j = 0; j < cfg_.hidden_size; ++j) acc += hw(k, j) * orow[j];
        c.preds[static_cast<std::size_t>(k)] = acc;
    }
    c.mask = criterion_mask(input.part, input.sub);
    return c.preds;
}

void FusionModel::backward(const ForwardCache& cache,
                           const std::array<double, kNumCriteria>& dpreds) {
    const int H = cfg_.hidden_size;
    const int S = cfg_.sequence_len();
    const int nh = cfg_.n_heads;
    const int dk = H / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    const Mat& x_final = cache.layers.empty() ? cache.x0 : cache.layers.back().x_out;

    // Heads.
    Mat dx(S, H);
    {
        const Mat& hw = tensor("heads.weight").value;
        Mat& dhw = tensor("heads.weight").grad;
        Mat& dhb = tensor("heads.bias").grad;
        for (int k = 0; k < kNumCriteria; ++k) {
            const double dp = dpreds[static_cast<std::size_t>(k)];
            if (dp == 0.0) continue;
            dhb(0, k) += dp;
            const double* orow = x_final.row(k);
            double* dxr = dx.row(k);
            for (int j = 0; j < H; ++j) {
                dhw(k, j) += dp * orow[j];
                dxr[j] += dp * hw(k, j);
            }
        }
    }

    // Transformer layers, in reverse.
    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
        const LayerCache& c = cache.layers[static_cast<std::size_t>(l)];

        Mat dr2;
        layer_norm_backward(tensor(layer_name(l, "ln2.gamma")).value, c.ln2, dx,
                            tensor(layer_name(l, "ln2.gamma")).grad,
                            tensor(layer_name(l, "ln2.beta")).grad, dr2);

        Mat dx1 = dr2;  // residual branch
        Mat df2 = dr2;
        if (!c.ffn_drop.empty()) apply_mask(df2, c.ffn_drop);

        // FFN backward.
        {
            Mat dhidden;
            matmul_nt(df2, tensor(layer_name(l, "ffn.w2")).value, dhidden);
            matmul_tn_acc(c.hidden, df2, tensor(layer_name(l, "ffn.w2")).grad);
            colsum_acc(df2, tensor(layer_name(l, "ffn.b2")).grad);

            Mat dz1(dhidden.rows, dhidden.cols);
            for (std::size_t i = 0; i < dz1.d.size(); ++i) {
                dz1.d[i] = dhidden.d[i] * gelu_grad(c.z1.d[i]);
            }
            Mat dx1_ffn;
            matmul_nt(dz1, tensor(layer_name(l, "ffn.w1")).value, dx1_ffn);
            matmul_tn_acc(c.x1, dz1, tensor(layer_name(l, "ffn.w1")).grad);
            colsum_acc(dz1, tensor(layer_name(l, "ffn.b1")).grad);
            for (std::size_t i = 0; i < dx1.d.size(); ++i) dx1.d[i] += dx1_ffn.d[i];
        }

        Mat dr1;
        layer_norm_backward(tensor(layer_name(l, "ln1.gamma")).value, c.ln1, dx1,
                            tensor(layer_name(l, "ln1.gamma")).grad,
                            tensor(layer_name(l, "ln1.beta")).grad, dr1);

        Mat dx_in = dr1;  // residual branch
        Mat dattn_out = dr1;
        if (!c.attn_drop.empty()) apply_mask(dattn_out, c.attn_drop);

        // Output projection.
        Mat dctx;
        matmul_nt(dattn_out, tensor(layer_name(l, "attn.wo")).value, dctx);
        matmul_tn_acc(c.ctx, dattn_out, tensor(layer_name(l, "attn.wo")).grad);
        colsum_acc(dattn_out, tensor(layer_name(l, "attn.bo")).grad);

        // Attention heads.
        Mat dq(S, H), dkm(S, H), dv(S, H);
        for (int h = 0; h < nh; ++h) {
            const Mat qh = head_slice(c.q, h, dk);
            const Mat kh = head_slice(c.k, h, dk);
            const Mat vh = head_slice(c.v, h, dk);
            const Mat dctxh = head_slice(dctx, h, dk);
            const Mat& probs = c.attn[static_cast<std::size_t>(h)];

            Mat dprobs;
            matmul_nt(dctxh, vh, dprobs);
            Mat dvh;
            matmul_tn(probs, dctxh, dvh);

            Mat dscores(S, S);
            for (int r = 0; r < S; ++r) {
                const double* pr = probs.row(r);
                const double* dpr = dprobs.row(r);
                double dot = 0.0;
                for (int j = 0; j < S; ++j) dot += dpr[j] * pr[j];
                double* dsr = dscores.row(r);
                for (int j = 0; j < S; ++j) dsr[j] = pr[j] * (dpr[j] - dot) * scale;
            }

            Mat dqh;
            matmul(dscores, kh, dqh);
            Mat dkh;
            matmul_tn(dscores, qh, dkh);

            head_unslice_acc(dqh, h, dk, dq);
            head_unslice_acc(dkh, h, dk, dkm);
            head_unslice_acc(dvh, h, dk, dv);
        }

        Mat tmp;
        matmul_nt(dq, tensor(layer_name(l, "attn.wq")).value, tmp);
        for (std::size_t i = 0; i < dx_in.d.size(); ++i) dx_in.d[i] += tmp.d[i];
        matmul_nt(dkm, tensor(layer_name(l, "attn.wk")).value, tmp);
        for (std::size_t i = 0; i < dx_in.d.size(); ++i) dx_in.d[i] += tmp.d[i];
        matmul_nt(dv, tensor(layer_name(l, "attn.wv")).value, tmp);
        for (std::size_t i = 0; i < dx_in.d.size(); ++i) dx_in.d[i] += tmp.d[i];

        matmul_tn_acc(c.x_in, dq, tensor(layer_name(l, "attn.wq")).grad);
        matmul_tn_acc(c.x_in, dkm, tensor(layer_name(l, "attn.wk")).grad);
        matmul_tn_acc(c.x_in, dv, tensor(layer_name(l, "attn.wv")).grad);
        colsum_acc(dq, tensor(layer_name(l, "attn.bq")).grad);
        colsum_acc(dkm, tensor(layer_name(l, "attn.bk")).grad);
        colsum_acc(dv, tensor(layer_name(l, "attn.bv")).grad);

        dx = std::move(dx_in);
    }

    // Positional and modality encodings receive the raw row gradients.
    {
        Mat& dpos = tensor("positional_encoding").grad;
        Mat& dmod = tensor("modality_encoding").grad;
        for (int p = 0; p < S; ++p) {
            const double* dxr = dx.row(p);
            const int m = cache.modality_ids[static_cast<std::size_t>(p)];
            for (int j = 0; j < H; ++j) {
                dpos(p, j) += dxr[j];
                dmod(m, j) += dxr[j];
            }
        }
    }

    // Criterion tokens.
    {
        Mat& dcrit = tensor("criterion_tokens").grad;
        for (int k = 0; k < kNumCriteria; ++k) {
            const double* dxr = dx.row(k);
            for (int j = 0; j < H; ++j) dcrit(k, j) += dxr[j];
        }
    }

    // Question-type token.
    if (cache.qtype_active) {
        const int row = part_row_index(cache.part, cache.sub);
        Mat& dparts = tensor("part_embedding").grad;
        Mat& dquestions = tensor("question_embedding").grad;
        const double* dxr = dx.row(kNumCriteria);
        for (int j = 0; j < H; ++j) {
            dparts(row, j) += dxr[j];
            dquestions(cache.question_no - 1, j) += dxr[j];
        }
    }

    // Context token through the context adapter.
    if (cache.context_raw) {
        const Mat& raw = *cache.context_raw;
        Mat& dw = tensor("context_adapter.weight").grad;
        Mat& db = tensor("context_adapter.bias").grad;
        const double* dxr = dx.row(kNumCriteria + 1);
        for (int j = 0; j < H; ++j) db(0, j) += dxr[j];
        for (int k = 0; k < raw.cols; ++k) {
            const double rk = raw(0, k);
            if (rk == 0.0) continue;
            for (int j = 0; j < H; ++j) dw(k, j) += rk * dxr[j];
        }
    }

    // Transcript block through the recurrent layer.
    if (cache.lstm.active) {
        const LstmCache& lc = cache.lstm;
        const int L = cfg_.transcript_len;
        const Mat& w_ih = tensor("lstm.weight_ih").value;
        const Mat& w_hh = tensor("lstm.weight_hh").value;
        Mat& dw_ih = tensor("lstm.weight_ih").grad;
        Mat& dw_hh = tensor("lstm.weight_hh").grad;
        Mat& dbias = tensor("lstm.bias").grad;
        Mat& demb = tensor("char_embedding").grad;

        std::vector<double> dh_next(static_cast<std::size_t>(H), 0.0);
        std::vector<double> dc_next(static_cast<std::size_t>(H), 0.0);
        std::vector<double> dz(static_cast<std::size_t>(4 * H));
        const int base = kNumCriteria + 2;
        for (int t = L - 1; t >= 0; --t) {
            for (int j = 0; j < H; ++j) {
                const double dh = dx(base + t, j) + dh_next[static_cast<std::size_t>(j)];
                const double tc = lc.tanh_c(t, j);
                const double dov = dh * tc;
                double dcv = dh * lc.o(t, j) * (1.0 - tc * tc) +
                             dc_next[static_cast<std::size_t>(j)];
                const double iv = lc.i(t, j);
                const double fv = lc.f(t, j);
                const double gv = lc.g(t, j);
                const double ov = lc.o(t, j);
                const double c_prev = t > 0 ? lc.c(t - 1, j) : 0.0;
                const double div = dcv * gv;
                const double dfv = dcv * c_prev;
                const double dgv = dcv * iv;
                dc_next[static_cast<std::size_t>(j)] = dcv * fv;
                dz[static_cast<std::size_t>(j)] = div * iv * (1.0 - iv);
                dz[static_cast<std::size_t>(H + j)] = dfv * fv * (1.0 - fv);
                dz[static_cast<std::size_t>(2 * H + j)] = dgv * (1.0 - gv * gv);
                dz[static_cast<std::size_t>(3 * H + j)] = dov * ov * (1.0 - ov);
            }
            for (int j = 0; j < 4 * H; ++j) dbias(0, j) += dz[static_cast<std::size_t>(j)];
            const int id = lc.ids[static_cast<std::size_t>(t)];
            for (int k = 0; k < H; ++k) {
                const double xk = lc.x(t, k);
                const double hk = t > 0 ? lc.h(t - 1, k) : 0.0;
                double* dwi = dw_ih.row(k);
                double* dwh = dw_hh.row(k);
                const double* wi = w_ih.row(k);
                const double* wh = w_hh.row(k);
                double dxk = 0.0;
                double dhk = 0.0;
                for (int j = 0; j < 4 * H; ++j) {
                    const double dzj = dz[static_cast<std::size_t>(j)];
                    dwi[j] += xk * dzj;
                    dwh[j] += hk * dzj;
                    dxk += wi[j] * dzj;
                    dhk += wh[j] * dzj;
                }
                demb(id, k) += dxk;
                dh_next[static_cast<std::size_t>(k)] = dhk;
            }
        }
    }

    // Acoustic rows through the adapter (and the backbone stub, if any).
    {
        const Mat& features = cache.stub_out.empty() ? cache.acoustic_input : cache.stub_out;
        const Mat& w = tensor("acoustic_adapter.weight").value;
        Mat& dw = tensor("acoustic_adapter.weight").grad;
        Mat& db = tensor("acoustic_adapter.bias").grad;
        const int base = kNumCriteria + 2 + cfg_.transcript_len;
        const int Db = cfg_.backbone.feature_dim;

        Mat dfeatures;
        const bool want_dfeat = !cache.stub_out.empty();
        if (want_dfeat) dfeatures.resize(cache.stub_out.rows, Db);

        for (int t = 0; t < cache.acoustic_frames; ++t) {
            const double* dxr = dx.row(base + t);
            const double* fr = features.row(t);
            for (int j = 0; j < H; ++j) db(0, j) += dxr[j];
            for (int k = 0; k < Db; ++k) {
                const double fk = fr[k];
                double* dwr = dw.row(k);
                double acc = 0.0;
                const double* wr = w.row(k);
                for (int j = 0; j < H; ++j) {
                    dwr[j] += fk * dxr[j];
                    acc += wr[j] * dxr[j];
                }
                if (want_dfeat) dfeatures(t, k) = acc;
            }
        }

        if (want_dfeat) {
            matmul_tn_acc(cache.acoustic_input, dfeatures, tensor("backbone_stub.weight").grad);
            colsum_acc(dfeatures, tensor("backbone_stub.bias").grad);
        }
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────────

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json config_json(const FusionModelConfig& cfg) {
    ordered_json j;
    j["hidden_size"] = cfg.hidden_size;
    j["acoustic_len"] = cfg.acoustic_len;
    j["transcript_len"] = cfg.transcript_len;
    j["n_criteria"] = cfg.n_criteria;
    j["n_layers"] = cfg.n_layers;
    j["n_heads"] = cfg.n_heads;
    j["ffn_mult"] = cfg.ffn_mult;
    j["dropout"] = cfg.dropout;
    j["backbone"] = {{"kind", backend_kind_name(cfg.backbone.kind)},
                     {"feature_dim", cfg.backbone.feature_dim},
                     {"frame_stride_s", cfg.backbone.frame_stride_s},
                     {"stub_input_dim", cfg.backbone.stub_input_dim},
                     {"identity", cfg.backbone.identity}};
    j["context_encoder"] = {{"kind", backend_kind_name(cfg.context_encoder.kind)},
                            {"feature_dim", cfg.context_encoder.feature_dim},
                            {"supports_image", cfg.context_encoder.supports_image}};
    j["freeze_backbone"] = cfg.freeze_backbone;
    j["use_qtype_embedding"] = cfg.use_qtype_embedding;
    j["use_transcript_embedding"] = cfg.use_transcript_embedding;
    j["normalize_scores"] = cfg.normalize_scores;
    j["vocab_symbols"] = cfg.vocab.symbols;
    j["seed"] = cfg.seed;
    return j;
}

FusionModelConfig config_from(const ordered_json& j) {
    FusionModelConfig cfg;
    cfg.hidden_size = j.at("hidden_size").get<int>();
    cfg.acoustic_len = j.at("acoustic_len").get<int>();
    cfg.transcript_len = j.at("transcript_len").get<int>();
    cfg.n_criteria = j.at("n_criteria").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.ffn_mult = j.at("ffn_mult").get<int>();
    cfg.dropout = j.at("dropout").get<double>();
    const auto& b = j.at("backbone");
    cfg.backbone.kind = backend_kind_from_name(b.at("kind").get<std::string>());
    cfg.backbone.feature_dim = b.at("feature_dim").get<int>();
    cfg.backbone.frame_stride_s = b.at("frame_stride_s").get<double>();
    cfg.backbone.stub_input_dim = b.at("stub_input_dim").get<int>();
    cfg.backbone.identity = b.at("identity").get<std::string>();
    const auto& ce = j.at("context_encoder");
    cfg.context_encoder.kind = backend_kind_from_name(ce.at("kind").get<std::string>());
    cfg.context_encoder.feature_dim = ce.at("feature_dim").get<int>();
    cfg.context_encoder.supports_image = ce.at("supports_image").get<bool>();
    cfg.freeze_backbone = j.at("freeze_backbone").get<bool>();
    cfg.use_qtype_embedding = j.at("use_qtype_embedding").get<bool>();
    cfg.use_transcript_embedding = j.at("use_transcript_embedding").get<bool>();
    cfg.normalize_scores = j.at("normalize_scores").get<bool>();
    cfg.vocab.symbols = j.at("vocab_symbols").get<std::string>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

}  // namespace

std::string config_to_json(const FusionModelConfig& cfg) { return config_json(cfg).dump(); }

FusionModelConfig config_from_json(const std::string& text) {
    return config_from(ordered_json::parse(text));
}

void save_checkpoint(const FusionModel& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra) {
    ordered_json header;
    header["config"] = config_json(model.config());
    ordered_json table = ordered_json::array();
    for (const auto& t : model.tensors()) {
        table.push_back({{"name", t.name}, {"rows", t.value.rows}, {"cols", t.value.cols}});
    }
    header["tensors"] = table;
    ordered_json ex;
    for (const auto& [k, v] : extra) ex[k] = v;
    header["extra"] = ex;

    const std::string header_str = header.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    os.write("ASAC", 4);
    const std::uint16_t version = 1;
    unsigned char vb[2] = {static_cast<unsigned char>(version & 0xff),
                           static_cast<unsigned char>(version >> 8)};
    os.write(reinterpret_cast<const char*>(vb), 2);
    const std::uint32_t len = static_cast<std::uint32_t>(header_str.size());
    unsigned char lb[4];
    for (int i = 0; i < 4; ++i) lb[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(lb), 4);
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& t : model.tensors()) {
        write_tensor(os, t.value, kTensorVersionF64);
    }
    if (!os) throw std::runtime_error("short write: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "ASAC", 4) != 0) {
        throw ValidationError("bad checkpoint magic in " + path.string());
    }
    unsigned char vb[2];
    is.read(reinterpret_cast<char*>(vb), 2);
    const std::uint16_t version = static_cast<std::uint16_t>(vb[0] | (vb[1] << 8));
    if (version != 1) {
        throw ValidationError("unsupported checkpoint version " + std::to_string(version));
    }
    unsigned char lb[4];
    is.read(reinterpret_cast<char*>(lb), 4);
    const std::uint32_t len = static_cast<std::uint32_t>(lb[0]) |
                              (static_cast<std::uint32_t>(lb[1]) << 8) |
                              (static_cast<std::uint32_t>(lb[2]) << 16) |
                              (static_cast<std::uint32_t>(lb[3]) << 24);
    std::string header_str(len, '\0');
    is.read(header_str.data(), static_cast<std::streamsize>(len));
    if (!is) throw ValidationError("truncated checkpoint header in " + path.string());

    ordered_json header;
    try {
        header = ordered_json::parse(header_str);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("checkpoint header parse error: " + std::string(e.what()));
    }

    LoadedCheckpoint out{FusionModel(config_from(header.at("config"))), {}};
    for (const auto& [k, v] : header.at("extra").items()) {
        out.extra[k] = v.get<std::string>();
    }

    std::size_t listed = 0;
    for (const auto& row : header.at("tensors")) {
        const std::string name = row.at("name").get<std::string>();
        const int rows = row.at("rows").get<int>();
        const int cols = row.at("cols").get<int>();
        if (!out.model.has_tensor(name)) {
            throw ValidationError("checkpoint tensor '" + name +
                                  "' does not exist in the configured model");
        }
        NamedTensor& t = out.model.tensor(name);
        if (t.value.rows != rows || t.value.cols != cols) {
            throw ValidationError("checkpoint tensor '" + name + "' is " + std::to_string(rows) +
                                  "x" + std::to_string(cols) + ", model expects " +
                                  std::to_string(t.value.rows) + "x" +
                                  std::to_string(t.value.cols));
        }
        Mat m = read_tensor(is, "checkpoint tensor '" + name + "'");
        if (m.rows != rows || m.cols != cols) {
            throw ValidationError("checkpoint payload shape mismatch for '" + name + "'");
        }
        t.value = std::move(m);
        ++listed;
    }
    if (listed != out.model.tensors().size()) {
        throw ValidationError("checkpoint lists " + std::to_string(listed) + " tensors, model has " +
                              std::to_string(out.model.tensors().size()));
    }
    return out;
}

}  // namespace asa
