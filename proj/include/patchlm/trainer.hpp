#pragma once

#include "patchlm/checkpoint.hpp"
#include "patchlm/model.hpp"

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace patchlm {

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear warmup to max_lr over warmup_ratio * total
// steps, then cosine decay to 0.
// ---------------------------------------------------------------------------
inline double lr_schedule(int step, int total, double warmup_ratio, double max_lr) {
    if (step < 0 || step > total)
        throw std::invalid_argument("lr_schedule: step outside [0, total]");
    if (!(warmup_ratio > 0.0 && warmup_ratio < 1.0))
        throw std::invalid_argument("lr_schedule: warmup_ratio must be in (0,1)");
    const double warmup_steps = warmup_ratio * total;
    if (step < warmup_steps) return max_lr * static_cast<double>(step) / warmup_steps;
    const double progress = (static_cast<double>(step) - warmup_steps) /
                            (static_cast<double>(total) - warmup_steps);
    return max_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and bias-corrected moments. State is
// allocated only for the tensors handed in; everything else stays untouched.
// ---------------------------------------------------------------------------
struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

class AdamW {
public:
    AdamW(std::vector<TensorPtr> trainable, AdamWConfig cfg = {})
        : trainable_(std::move(trainable)), cfg_(cfg) {
        m_.resize(trainable_.size());
        v_.resize(trainable_.size());
        for (size_t i = 0; i < trainable_.size(); ++i) {
            m_[i].assign(trainable_[i]->size(), 0.0);
            v_[i].assign(trainable_[i]->size(), 0.0);
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < trainable_.size(); ++i) {
            Tensor& p = *trainable_[i];
            if (p.grad.size() != p.data.size())
                throw std::runtime_error("adamw_step: missing gradient on trainable tensor");
            double* m = m_[i].data();
            double* v = v_[i].data();
            for (size_t j = 0; j < p.data.size(); ++j) {
                const double g = p.grad[j];
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                p.data[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                   cfg_.weight_decay * p.data[j]);
            }
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    std::vector<TensorPtr> trainable_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

inline void zero_grads(const std::vector<TensorPtr>& tensors) {
    for (auto& t : tensors) t->zero_grad();
}

inline double clip_global_norm(const std::vector<TensorPtr>& tensors, double max_norm) {
    double sq = 0.0;
    for (auto& t : tensors)
        for (double g : t->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& t : tensors)
            for (double& g : t->grad) g *= s;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Progressive freeze schedule.
//   Stage I:   patch embedding only.
//   Stage II:  adds the visual-tagged block parameters and the visual
//              positional table (already part of the patch set).
//   Stage III: everything.
// ---------------------------------------------------------------------------
enum class Stage { I, II, III };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::I: return "I";
        case Stage::II: return "II";
        case Stage::III: return "III";
    }
    return "?";
}

inline Stage stage_from_name(const std::string& s) {
    if (s == "I" || s == "1") return Stage::I;
    if (s == "II" || s == "2") return Stage::II;
    if (s == "III" || s == "3") return Stage::III;
    throw std::invalid_argument("unknown stage '" + s + "'");
}

inline std::vector<TensorPtr> stage_trainable(Stage stage, const ModelParams& params) {
    std::vector<TensorPtr> out;
    for (auto& [name, t] : params.patch.named_tensors()) out.push_back(t);
    if (stage == Stage::I) return out;
    if (stage == Stage::II) {
        for (const auto& b : params.blocks) {
            const ModalityParams& m = b.visual;
            out.insert(out.end(), {m.wq, m.wk, m.wv, m.ln1.gamma, m.ln1.beta, m.ln2.gamma,
                                   m.ln2.beta, m.ffn.w1, m.ffn.b1, m.ffn.w2, m.ffn.b2});
        }
        return out;
    }
    return params.all_tensors();
}

// Marks exactly the stage's trainable set as differentiable; gradients for
// frozen tensors are then never computed at all.
inline std::vector<TensorPtr> apply_stage_freeze(Stage stage, ModelParams& params) {
    auto trainable = stage_trainable(stage, params);
    for (auto& t : params.all_tensors()) t->requires_grad = false;
    for (auto& t : trainable) t->requires_grad = true;
    return trainable;
}

inline void unfreeze_all(ModelParams& params) {
    for (auto& t : params.all_tensors()) t->requires_grad = true;
}

// ---------------------------------------------------------------------------
// Masked next-token objective. The logit at position i predicts token i+1;
// the mask is taken at the predicted-token position.
// ---------------------------------------------------------------------------
struct TrainSample {
    TokenStream stream;
    std::shared_ptr<Image> image; // null for pure-text streams
};

inline TensorPtr sample_loss(const TokenStream& stream, const Image* img,
                             const ModelParams& params) {
    auto logits = model_forward(stream, img, params);
    const int n = stream.size();
    std::vector<int> targets(n, 0);
    std::vector<uint8_t> mask(n, 0);
    for (int i = 0; i + 1 < n; ++i) {
        mask[i] = stream.loss_mask[i + 1];
        if (mask[i]) targets[i] = stream.entries[i + 1].payload;
    }
    return ops::cross_entropy(logits, targets, mask);
}

// Mean loss over a batch, as one graph.
inline TensorPtr training_loss(const std::vector<TrainSample>& batch, const ModelParams& params) {
    if (batch.empty()) throw std::invalid_argument("training_loss: empty batch");
    const double inv = 1.0 / static_cast<double>(batch.size());
    TensorPtr acc;
    for (const auto& s : batch) {
        auto term = ops::scale(sample_loss(s.stream, s.image.get(), params), inv);
        acc = acc ? ops::add(acc, term) : term;
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Stage runner. Per-sample forward/backward may run on several threads;
// gradient contributions are reduced in fixed sample order, so results are
// bit-identical for every thread count.
// ---------------------------------------------------------------------------
struct StageConfig {
    Stage stage = Stage::III;
    double max_lr = 5e-5;
    int epochs = 1;
    std::string dataset_tag;
};

struct TrainLogRow {
    int step; // global, 1-based
    std::string stage;
    double lr;
    double loss;
};

struct TrainOptions {
    int batch_size = 8;
    double warmup_ratio = 0.03;
    double clip_norm = 1.0;
    int threads = 1;
    AdamWConfig adamw;
    std::function<void(Stage, const ModelParams&)> on_stage_end;
};

inline std::vector<TrainLogRow> train(ModelParams& params, const std::vector<StageConfig>& stages,
                                      const std::vector<TrainSample>& data, uint64_t seed,
                                      const TrainOptions& opt = {}) {
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    std::vector<TrainLogRow> log;
    int global_step = 0;
    const size_t n = data.size();
    const int bs = std::max(1, opt.batch_size);
    const int steps_per_epoch = static_cast<int>((n + bs - 1) / bs);

    for (size_t si = 0; si < stages.size(); ++si) {
        const StageConfig& sc = stages[si];
        auto trainable = apply_stage_freeze(sc.stage, params);
        AdamW opt_state(trainable, opt.adamw);
        const int total_steps = sc.epochs * steps_per_epoch;
        int stage_step = 0;
        for (int epoch = 0; epoch < sc.epochs; ++epoch) {
            // deterministic shuffle
            std::vector<size_t> order(n);
            for (size_t i = 0; i < n; ++i) order[i] = i;
            SplitMix64 rng(derive_seed(seed, 0x657065ULL + si * 131, epoch));
            for (size_t i = n; i > 1; --i) {
                const size_t j = rng.next_below(i);
                std::swap(order[i - 1], order[j]);
            }
            for (size_t base = 0; base < n; base += bs) {
                const size_t cur = std::min(n - base, static_cast<size_t>(bs));
                const double inv = 1.0 / static_cast<double>(cur);
                std::vector<GradStore> stores(cur);
                std::vector<double> losses(cur, 0.0);
                std::atomic<size_t> next{0};
                auto worker = [&]() {
                    while (true) {
                        const size_t j = next.fetch_add(1);
                        if (j >= cur) break;
                        const TrainSample& s = data[order[base + j]];
                        auto loss = ops::scale(sample_loss(s.stream, s.image.get(), params), inv);
                        ops::backward(loss, &stores[j]);
                        losses[j] = loss->data[0];
                    }
                };
                const int threads = std::max(1, opt.threads);
                if (threads == 1 || cur == 1) {
                    worker();
                } else {
                    std::vector<std::thread> pool;
                    for (int t = 0; t < std::min<int>(threads, static_cast<int>(cur)); ++t)
                        pool.emplace_back(worker);
                    for (auto& t : pool) t.join();
                }
                // fixed-order reduction
                zero_grads(trainable);
                for (size_t j = 0; j < cur; ++j)
                    for (auto& t : trainable)
                        if (const auto* buf = stores[j].find(*t))
                            for (size_t i2 = 0; i2 < buf->size(); ++i2)
                                t->grad[i2] += (*buf)[i2];
                double batch_loss = 0.0;
                for (size_t j = 0; j < cur; ++j) batch_loss += losses[j];
                if (!std::isfinite(batch_loss))
                    throw std::runtime_error("train: non-finite loss at step " +
                                             std::to_string(global_step + 1));
                clip_global_norm(trainable, opt.clip_norm);
                ++stage_step;
                const double lr = lr_schedule(stage_step, total_steps, opt.warmup_ratio, sc.max_lr);
                opt_state.step(lr);
                ++global_step;
                log.push_back({global_step, stage_name(sc.stage), lr, batch_loss});
            }
        }
        if (opt.on_stage_end) opt.on_stage_end(sc.stage, params);
    }
    unfreeze_all(params);
    return log;
}

inline void write_train_log_csv(const std::vector<TrainLogRow>& log, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
        out << "step,stage,lr,loss\n";
        char buf[128];
        for (const auto& row : log) {
            std::snprintf(buf, sizeof(buf), "%d,%s,%.12g,%.12g\n", row.step, row.stage.c_str(),
                          row.lr, row.loss);
            out << buf;
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot move " + tmp + " into place");
}

} // namespace patchlm
