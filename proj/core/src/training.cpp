#include "asa/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "asa/dataset_io.hpp"

namespace asa {

double masked_mse(const std::vector<std::array<double, kNumCriteria>>& preds,
                  const std::vector<std::array<double, kNumCriteria>>& golds,
                  const std::vector<std::array<double, kNumCriteria>>& masks,
                  std::vector<std::array<double, kNumCriteria>>* dpreds) {
    if (preds.size() != golds.size() || preds.size() != masks.size()) {
        throw std::invalid_argument("masked_mse: row count mismatch");
    }
    double total = 0.0;
    for (const auto& row : masks) {
        for (double m : row) {
            if (m != 0.0 && m != 1.0) {
                throw std::invalid_argument("masked_mse: mask entries must be 0 or 1");
            }
            total += m;
        }
    }
    if (total < 1.0) {
        throw DegenerateBatchError("masked_mse: every entry of the batch is masked");
    }
    double loss = 0.0;
    if (dpreds) dpreds->assign(preds.size(), {});
    for (std::size_t n = 0; n < preds.size(); ++n) {
        for (std::size_t c = 0; c < kNumCriteria; ++c) {
            if (masks[n][c] == 0.0) continue;  // masked golds never read
            const double diff = preds[n][c] - golds[n][c];
            loss += diff * diff;
            if (dpreds) (*dpreds)[n][c] = 2.0 * diff / total;
        }
    }
    return loss / total;
}

// ── RAdam ───────────────────────────────────────────────────────────────────

RAdamOptimizer::RAdamOptimizer(RAdamHyper hyper) : hyper_(hyper) {}

void RAdamOptimizer::attach(const FusionModel& model) {
    t_ = 0;
    m_.clear();
    v_.clear();
    for (const auto& t : model.tensors()) {
        m_.emplace_back(t.value.rows, t.value.cols);
        v_.emplace_back(t.value.rows, t.value.cols);
    }
}

void RAdamOptimizer::step(FusionModel& model) {
    auto& tensors = model.tensors();
    if (m_.size() != tensors.size()) {
        throw std::logic_error("optimizer not attached to this model");
    }
    ++t_;
    const double b1 = hyper_.beta1;
    const double b2 = hyper_.beta2;
    const double b1t = std::pow(b1, static_cast<double>(t_));
    const double b2t = std::pow(b2, static_cast<double>(t_));
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double rho_t = rho_inf - 2.0 * static_cast<double>(t_) * b2t / (1.0 - b2t);

    double rect = 0.0;
    const bool tractable = rho_t > 4.0;
    if (tractable) {
        rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                         ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    }

    for (std::size_t i = 0; i < tensors.size(); ++i) {
        NamedTensor& t = tensors[i];
        if (!t.trainable) continue;  // frozen tensors keep stale moments too
        Mat& m = m_[i];
        Mat& v = v_[i];
        for (std::size_t j = 0; j < t.value.d.size(); ++j) {
            const double g = t.grad.d[j];
            m.d[j] = b1 * m.d[j] + (1.0 - b1) * g;
            v.d[j] = b2 * v.d[j] + (1.0 - b2) * g * g;
            const double m_hat = m.d[j] / (1.0 - b1t);
            if (tractable) {
                const double denom = std::sqrt(v.d[j] / (1.0 - b2t)) + hyper_.eps;
                t.value.d[j] -= hyper_.lr * rect * m_hat / denom;
            } else {
                t.value.d[j] -= hyper_.lr * m_hat;
            }
        }
    }
}

void RAdamOptimizer::save(const std::filesystem::path& path) const {
    nlohmann::ordered_json header;
    header["t"] = t_;
    header["lr"] = hyper_.lr;
    header["beta1"] = hyper_.beta1;
    header["beta2"] = hyper_.beta2;
    header["eps"] = hyper_.eps;
    header["n_tensors"] = m_.size();
    const std::string header_str = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    os.write("ASAO", 4);
    const std::uint32_t len = static_cast<std::uint32_t>(header_str.size());
    unsigned char lb[4];
    for (int i = 0; i < 4; ++i) lb[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(lb), 4);
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& m : m_) write_tensor(os, m, kTensorVersionF64);
    for (const auto& v : v_) write_tensor(os, v, kTensorVersionF64);
    if (!os) throw std::runtime_error("short write: " + path.string());
}

void RAdamOptimizer::load(const std::filesystem::path& path, const FusionModel& model) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open optimizer state " + path.string());
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "ASAO", 4) != 0) {
        throw ValidationError("bad optimizer state magic in " + path.string());
    }
    unsigned char lb[4];
    is.read(reinterpret_cast<char*>(lb), 4);
    const std::uint32_t len = static_cast<std::uint32_t>(lb[0]) |
                              (static_cast<std::uint32_t>(lb[1]) << 8) |
                              (static_cast<std::uint32_t>(lb[2]) << 16) |
                              (static_cast<std::uint32_t>(lb[3]) << 24);
    std::string header_str(len, '\0');
    is.read(header_str.data(), static_cast<std::streamsize>(len));
    if (!is) throw ValidationError("truncated optimizer header in " + path.string());
    const auto header = nlohmann::ordered_json::parse(header_str);

    t_ = header.at("t").get<std::int64_t>();
    hyper_.lr = header.at("lr").get<double>();
    hyper_.beta1 = header.at("beta1").get<double>();
    hyper_.beta2 = header.at("beta2").get<double>();
    hyper_.eps = header.at("eps").get<double>();

    const std::size_t n = header.at("n_tensors").get<std::size_t>();
    if (n != model.tensors().size()) {
        throw ValidationError("optimizer state holds " + std::to_string(n) +
                              " tensors, model has " + std::to_string(model.tensors().size()));
    }
    m_.assign(n, Mat());
    v_.assign(n, Mat());
    for (std::size_t i = 0; i < n; ++i) m_[i] = read_tensor(is, "optimizer m[" + std::to_string(i) + "]");
    for (std::size_t i = 0; i < n; ++i) v_[i] = read_tensor(is, "optimizer v[" + std::to_string(i) + "]");
    for (std::size_t i = 0; i < n; ++i) {
        const Mat& ref = model.tensors()[i].value;
        if (!m_[i].same_shape(ref) || !v_[i].same_shape(ref)) {
            throw ValidationError("optimizer moment shape mismatch for tensor '" +
                                  model.tensors()[i].name + "'");
        }
    }
}

// ── Training loop ───────────────────────────────────────────────────────────

namespace {

std::vector<const ResponseSample*> samples_in_plan(const DatasetManifest& manifest,
                                                   const std::set<std::string>& ids) {
    std::vector<const ResponseSample*> out;
    out.reserve(ids.size());
    for (const auto& e : manifest.entries) {
        if (ids.count(e.response_id)) out.push_back(&e);
    }
    if (out.size() != ids.size()) {
        throw ValidationError("plan references ids missing from the manifest");
    }
    return out;
}

double eval_loss(FusionModel& model, Pipeline& pipeline,
                 const std::vector<const ResponseSample*>& samples) {
    std::vector<std::array<double, kNumCriteria>> preds, golds, masks;
    preds.reserve(samples.size());
    for (const auto* s : samples) {
        ForwardCache cache;
        preds.push_back(model.forward(pipeline.input(*s), &cache));
        golds.push_back(pipeline.gold_row(*s));
        masks.push_back(pipeline.mask_row(*s));
    }
    return masked_mse(preds, golds, masks);
}

}  // namespace

FitResult fit(FusionModel& model, Pipeline& pipeline, const SplitPlan& plan,
              const TrainConfig& cfg, RAdamOptimizer* optimizer, int start_epoch) {
    if (cfg.batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (cfg.epochs < 0) throw ValidationError("epochs must be >= 0");

    const auto train = samples_in_plan(pipeline.manifest(), plan.train_ids);
    if (train.empty()) throw ValidationError("train split is empty");
    const auto val = samples_in_plan(pipeline.manifest(), plan.usertest_ids);

    RAdamOptimizer local(cfg.optimizer);
    RAdamOptimizer& opt = optimizer ? *optimizer : local;
    if (!optimizer || start_epoch == 0) opt.attach(model);

    std::ofstream metrics;
    if (!cfg.metrics_csv.empty()) {
        metrics.open(cfg.metrics_csv, start_epoch > 0 ? std::ios::app : std::ios::out);
        if (!metrics) {
            throw std::runtime_error("cannot open metrics csv " + cfg.metrics_csv.string());
        }
        if (start_epoch == 0) metrics << "epoch,mean_loss,val_loss,wall_time_s\n";
    }

    FitResult result;
    double best_val = std::numeric_limits<double>::infinity();
    int epochs_since_best = 0;

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();

        std::vector<const ResponseSample*> order = train;
        if (cfg.shuffle) {
            Rng shuffle_rng(hash_combine(cfg.seed, hash_combine(fnv1a64("shuffle"),
                                                                static_cast<std::uint64_t>(epoch))));
            shuffle_rng.shuffle(order);
        }
        Rng dropout_rng(hash_combine(cfg.seed, hash_combine(fnv1a64("dropout"),
                                                            static_cast<std::uint64_t>(epoch))));
        Rng* drop = cfg.grad_check_mode ? nullptr : &dropout_rng;

        double epoch_sq_sum = 0.0;
        double epoch_mask_sum = 0.0;

        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t n = end - start;

            std::vector<ForwardCache> caches(n);
            std::vector<std::array<double, kNumCriteria>> preds(n), golds(n), masks(n);
            for (std::size_t i = 0; i < n; ++i) {
                const ResponseSample& s = *order[start + i];
                preds[i] = model.forward(pipeline.input(s), &caches[i], /*train_mode=*/true, drop);
                golds[i] = pipeline.gold_row(s);
                masks[i] = pipeline.mask_row(s);
            }

            std::vector<std::array<double, kNumCriteria>> dpreds;
            double loss = 0.0;
            try {
                loss = masked_mse(preds, golds, masks, &dpreds);
            } catch (const DegenerateBatchError&) {
                continue;  // nothing unmasked in this batch
            }
            if (!std::isfinite(loss)) {
                std::ostringstream os;
                os << "non-finite loss at epoch " << epoch << ", batch starting at sample "
                   << start << " (first id " << order[start]->response_id << ")";
                throw std::runtime_error(os.str());
            }

            model.zero_grads();
            for (std::size_t i = 0; i < n; ++i) model.backward(caches[i], dpreds[i]);
            opt.step(model);
            ++result.steps;

            double batch_mask = 0.0;
            for (const auto& row : masks) {
                for (double mv : row) batch_mask += mv;
            }
            epoch_sq_sum += loss * batch_mask;
            epoch_mask_sum += batch_mask;
        }

        const double mean_loss = epoch_mask_sum > 0.0 ? epoch_sq_sum / epoch_mask_sum : 0.0;
        result.epoch_loss.push_back(mean_loss);
        ++result.epochs_run;

        double val_loss = std::numeric_limits<double>::quiet_NaN();
        const bool track_val = cfg.patience > 0 && !val.empty();
        if (track_val) {
            val_loss = eval_loss(model, pipeline, val);
            result.val_loss.push_back(val_loss);
        }

        if (!cfg.checkpoint_path.empty()) {
            std::map<std::string, std::string> extra;
            extra["epoch"] = std::to_string(epoch + 1);
            extra["steps"] = std::to_string(result.steps);
            save_checkpoint(model, cfg.checkpoint_path, extra);
            opt.save(cfg.checkpoint_path.string() + ".opt");
        }

        if (metrics.is_open()) {
            const double wall =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", mean_loss);
            metrics << epoch << "," << buf << ",";
            if (track_val) {
                std::snprintf(buf, sizeof(buf), "%.17g", val_loss);
                metrics << buf;
            }
            std::snprintf(buf, sizeof(buf), "%.3f", wall);
            metrics << "," << buf << "\n";
            metrics.flush();
        }

        if (track_val) {
            if (val_loss < best_val) {
                best_val = val_loss;
                epochs_since_best = 0;
            } else if (++epochs_since_best >= cfg.patience) {
                result.early_stopped = true;
                break;
            }
        }
    }
    return result;
}

}  // namespace asa
