#pragma once

#include "patchlm/patch_embed.hpp"
#include "patchlm/rng.hpp"
#include "patchlm/stream.hpp"
#include "patchlm/tensor.hpp"
#include "patchlm/text.hpp"

#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace patchlm {
namespace ops {

// ---------------------------------------------------------------------------
// Modality-selected kernels. Row i uses the visual or the text parameter set
// according to tags[i]; there is no cross-row mixing, so parameters of the
// other modality can never influence a row.
// ---------------------------------------------------------------------------

inline TensorPtr rowwise_matmul_select(const TensorPtr& x, const std::vector<Modality>& tags,
                                       const TensorPtr& w_visual, const TensorPtr& w_text) {
    require(x->rank() == 2, "rowwise_matmul_select expects [n x d] input");
    require(w_visual->shape == w_text->shape && w_visual->rank() == 2 &&
                w_visual->rows() == x->cols(),
            "rowwise_matmul_select weight shape mismatch: " + x->shape_str() + " vs " +
                w_visual->shape_str());
    require(static_cast<int>(tags.size()) == x->rows(),
            "rowwise_matmul_select: tag count mismatch");
    const int n = x->rows(), d = x->cols(), m = w_visual->cols();
    auto out = make_result({n, m}, {x, w_visual, w_text});
    for (int i = 0; i < n; ++i) {
        const Tensor& w = (tags[i] == Modality::Visual) ? *w_visual : *w_text;
        const double* xi = x->data.data() + static_cast<size_t>(i) * d;
        double* oi = out->data.data() + static_cast<size_t>(i) * m;
        for (int kk = 0; kk < d; ++kk) {
            const double xv = xi[kk];
            const double* wrow = w.data.data() + static_cast<size_t>(kk) * m;
            for (int j = 0; j < m; ++j) oi[j] += xv * wrow[j];
        }
    }
    if (out->requires_grad) {
        auto held = std::make_shared<std::vector<Modality>>(tags);
        out->backward_fn = [held, n, d, m](Tensor& self, GradStore* store) {
            auto& x = self.parents[0];
            auto& wv = self.parents[1];
            auto& wt = self.parents[2];
            double* dx = x->requires_grad ? x->grad_dest(store) : nullptr;
            double* dwv = wv->requires_grad ? wv->grad_dest(store) : nullptr;
            double* dwt = wt->requires_grad ? wt->grad_dest(store) : nullptr;
            for (int i = 0; i < n; ++i) {
                const bool vis = (*held)[i] == Modality::Visual;
                const Tensor& w = vis ? *wv : *wt;
                double* dw = vis ? dwv : dwt;
                const double* go = self.grad.data() + static_cast<size_t>(i) * m;
                const double* xi = x->data.data() + static_cast<size_t>(i) * d;
                if (dx) {
                    double* dxi = dx + static_cast<size_t>(i) * d;
                    for (int kk = 0; kk < d; ++kk) {
                        const double* wrow = w.data.data() + static_cast<size_t>(kk) * m;
                        double acc = 0.0;
                        for (int j = 0; j < m; ++j) acc += go[j] * wrow[j];
                        dxi[kk] += acc;
                    }
                }
                if (dw) {
                    for (int kk = 0; kk < d; ++kk) {
                        const double xv = xi[kk];
                        double* dwrow = dw + static_cast<size_t>(kk) * m;
                        for (int j = 0; j < m; ++j) dwrow[j] += xv * go[j];
                    }
                }
            }
        };
    }
    return out;
}

inline TensorPtr rowwise_affine_select(const TensorPtr& x, const std::vector<Modality>& tags,
                                       const TensorPtr& w_visual, const TensorPtr& b_visual,
                                       const TensorPtr& w_text, const TensorPtr& b_text) {
    auto out = rowwise_matmul_select(x, tags, w_visual, w_text);
    require(b_visual->rank() == 1 && b_visual->shape == b_text->shape &&
                b_visual->shape[0] == out->cols(),
            "rowwise_affine_select bias shape mismatch");
    const int n = out->rows(), m = out->cols();
    auto biased = make_result(out->shape, {out, b_visual, b_text});
    for (int i = 0; i < n; ++i) {
        const Tensor& b = (tags[i] == Modality::Visual) ? *b_visual : *b_text;
        for (int j = 0; j < m; ++j)
            biased->data[static_cast<size_t>(i) * m + j] =
                out->data[static_cast<size_t>(i) * m + j] + b.data[j];
    }
    if (biased->requires_grad) {
        auto held = std::make_shared<std::vector<Modality>>(tags);
        biased->backward_fn = [held, n, m](Tensor& self, GradStore* store) {
            auto& x = self.parents[0];
            auto& bv = self.parents[1];
            auto& bt = self.parents[2];
            if (x->requires_grad) {
                double* dx = x->grad_dest(store);
                for (size_t i = 0; i < self.size(); ++i) dx[i] += self.grad[i];
            }
            double* dbv = bv->requires_grad ? bv->grad_dest(store) : nullptr;
            double* dbt = bt->requires_grad ? bt->grad_dest(store) : nullptr;
            for (int i = 0; i < n; ++i) {
                double* db = ((*held)[i] == Modality::Visual) ? dbv : dbt;
                if (!db) continue;
                const double* g = self.grad.data() + static_cast<size_t>(i) * m;
                for (int j = 0; j < m; ++j) db[j] += g[j];
            }
        };
    }
    return biased;
}

inline TensorPtr layernorm_select(const TensorPtr& x, const std::vector<Modality>& tags,
                                  const TensorPtr& gamma_v, const TensorPtr& beta_v,
                                  const TensorPtr& gamma_t, const TensorPtr& beta_t,
                                  double eps = 1e-5) {
    require(x->rank() == 2, "layernorm_select expects [n x d] input");
    const int n = x->rows(), d = x->cols();
    require(static_cast<int>(tags.size()) == n, "layernorm_select: tag count mismatch");
    require(gamma_v->rank() == 1 && gamma_v->shape[0] == d && gamma_v->shape == beta_v->shape &&
                gamma_v->shape == gamma_t->shape && gamma_v->shape == beta_t->shape,
            "layernorm_select parameter shape mismatch");
    auto out = make_result(x->shape, {x, gamma_v, beta_v, gamma_t, beta_t});
    auto inv_std = std::make_shared<std::vector<double>>(n);
    for (int i = 0; i < n; ++i) {
        const bool vis = tags[i] == Modality::Visual;
        const double* g = (vis ? gamma_v : gamma_t)->data.data();
        const double* b = (vis ? beta_v : beta_t)->data.data();
        const double* v = x->data.data() + static_cast<size_t>(i) * d;
        double* o = out->data.data() + static_cast<size_t>(i) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += v[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = v[j] - mean;
            var += c * c;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (int j = 0; j < d; ++j) o[j] = (v[j] - mean) * is * g[j] + b[j];
    }
    if (out->requires_grad) {
        auto held = std::make_shared<std::vector<Modality>>(tags);
        out->backward_fn = [held, n, d, inv_std](Tensor& self, GradStore* store) {
            auto& x = self.parents[0];
            auto& gv = self.parents[1];
            auto& bv = self.parents[2];
            auto& gt = self.parents[3];
            auto& bt = self.parents[4];
            double* dx = x->requires_grad ? x->grad_dest(store) : nullptr;
            double* dgv = gv->requires_grad ? gv->grad_dest(store) : nullptr;
            double* dbv = bv->requires_grad ? bv->grad_dest(store) : nullptr;
            double* dgt = gt->requires_grad ? gt->grad_dest(store) : nullptr;
            double* dbt = bt->requires_grad ? bt->grad_dest(store) : nullptr;
            for (int i = 0; i < n; ++i) {
                const bool vis = (*held)[i] == Modality::Visual;
                const double* g = (vis ? gv : gt)->data.data();
                double* dgamma = vis ? dgv : dgt;
                double* dbeta = vis ? dbv : dbt;
                const double* v = x->data.data() + static_cast<size_t>(i) * d;
                const double* dy = self.grad.data() + static_cast<size_t>(i) * d;
                const double is = (*inv_std)[i];
                double mean = 0.0;
                for (int j = 0; j < d; ++j) mean += v[j];
                mean /= d;
                double sum_g = 0.0, sum_gx = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double xh = (v[j] - mean) * is;
                    const double gdy = g[j] * dy[j];
                    sum_g += gdy;
                    sum_gx += gdy * xh;
                    if (dgamma) dgamma[j] += dy[j] * xh;
                    if (dbeta) dbeta[j] += dy[j];
                }
                if (dx) {
                    double* dxi = dx + static_cast<size_t>(i) * d;
                    for (int j = 0; j < d; ++j) {
                        const double xh = (v[j] - mean) * is;
                        const double gdy = g[j] * dy[j];
                        dxi[j] += is * (gdy - sum_g / d - xh * sum_gx / d);
                    }
                }
            }
        };
    }
    return out;
}

} // namespace ops

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct LayerNormParams {
    TensorPtr gamma;
    TensorPtr beta;
};

struct FfnParams {
    TensorPtr w1; // [d x 4d]
    TensorPtr b1; // [4d]
    TensorPtr w2; // [4d x d]
    TensorPtr b2; // [d]
};

struct ModalityParams {
    TensorPtr wq, wk, wv; // [d x d] each
    LayerNormParams ln1, ln2;
    FfnParams ffn;
};

struct BlockParams {
    ModalityParams visual;
    ModalityParams text;
    TensorPtr wo; // [d x d], shared across modalities
};

struct ModelConfig {
    int d = 64;
    int layers = 4;
    int heads = 4;
    int d_mid = 32;
    int maxgrid = 64;
    int vocab_size = vocab::kSize;
    bool text_pos = false; // learned absolute positional table for text rows
    int max_seq = 1024;    // bound for the optional text positional table

    void validate() const {
        if (d < 1 || layers < 0 || heads < 1 || d_mid < 1 || maxgrid < 1)
            throw std::invalid_argument("model config: dimensions must be positive");
        if (d % heads != 0)
            throw std::invalid_argument("model config: heads must divide width d");
    }
};

struct ModelParams {
    ModelConfig cfg;
    PatchEmbedParams patch;
    TensorPtr e_t; // [V x d]
    TensorPtr text_pos_table; // [max_seq x d], present iff cfg.text_pos
    std::vector<BlockParams> blocks;
    LayerNormParams final_ln;
    TensorPtr head_w; // [d x V]
    TensorPtr head_b; // [V]

    std::vector<std::pair<std::string, TensorPtr>> named_tensors() const {
        std::vector<std::pair<std::string, TensorPtr>> out = patch.named_tensors();
        out.emplace_back("embed.text", e_t);
        if (text_pos_table) out.emplace_back("embed.text_pos", text_pos_table);
        for (size_t l = 0; l < blocks.size(); ++l) {
            const std::string p = "block" + std::to_string(l) + ".";
            auto add_mod = [&](const char* m, const ModalityParams& mp) {
                out.emplace_back(p + "attn.wq." + m, mp.wq);
                out.emplace_back(p + "attn.wk." + m, mp.wk);
                out.emplace_back(p + "attn.wv." + m, mp.wv);
                out.emplace_back(p + "ln1.gamma." + m, mp.ln1.gamma);
                out.emplace_back(p + "ln1.beta." + m, mp.ln1.beta);
                out.emplace_back(p + "ln2.gamma." + m, mp.ln2.gamma);
                out.emplace_back(p + "ln2.beta." + m, mp.ln2.beta);
                out.emplace_back(p + "ffn.w1." + m, mp.ffn.w1);
                out.emplace_back(p + "ffn.b1." + m, mp.ffn.b1);
                out.emplace_back(p + "ffn.w2." + m, mp.ffn.w2);
                out.emplace_back(p + "ffn.b2." + m, mp.ffn.b2);
            };
            add_mod("v", blocks[l].visual);
            add_mod("t", blocks[l].text);
            out.emplace_back(p + "attn.wo", blocks[l].wo);
        }
        out.emplace_back("final_ln.gamma", final_ln.gamma);
        out.emplace_back("final_ln.beta", final_ln.beta);
        out.emplace_back("head.w", head_w);
        out.emplace_back("head.b", head_b);
        return out;
    }

    std::vector<TensorPtr> all_tensors() const {
        std::vector<TensorPtr> out;
        for (auto& [name, t] : named_tensors()) out.push_back(t);
        return out;
    }
};

namespace detail_init {

inline TensorPtr randn(SplitMix64& rng, std::vector<int> shape, double stddev) {
    auto t = Tensor::create(std::move(shape), true);
    for (auto& v : t->data) v = rng.next_gaussian() * stddev;
    return t;
}

inline TensorPtr zeros(std::vector<int> shape) { return Tensor::create(std::move(shape), true); }

inline TensorPtr ones(std::vector<int> shape) {
    auto t = Tensor::create(std::move(shape), true);
    for (auto& v : t->data) v = 1.0;
    return t;
}

inline TensorPtr copy_of(const TensorPtr& src) {
    auto t = Tensor::create(src->shape, true);
    t->data = src->data;
    return t;
}

} // namespace detail_init

// Weights ~ N(0, 0.02), biases 0, LN gamma 1, positional table 0. Visual
// parameter groups start as copies of their text counterparts.
inline ModelParams init_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    using namespace detail_init;
    SplitMix64 rng(derive_seed(seed, 0x6d6f64656cULL));
    const int d = cfg.d, dm = cfg.d_mid, v = cfg.vocab_size, f = 4 * cfg.d;
    ModelParams p;
    p.cfg = cfg;
    p.patch.d = d;
    p.patch.d_mid = dm;
    p.patch.maxgrid = cfg.maxgrid;
    p.patch.conv1_w = randn(rng, {dm, 3, 8, 8}, 0.02);
    p.patch.conv1_b = zeros({dm});
    p.patch.conv2_w = randn(rng, {d, dm, 2, 2}, 0.02);
    p.patch.conv2_b = zeros({d});
    p.patch.pos = zeros({cfg.maxgrid * cfg.maxgrid, d});
    p.e_t = randn(rng, {v, d}, 0.02);
    if (cfg.text_pos) p.text_pos_table = zeros({cfg.max_seq, d});
    for (int l = 0; l < cfg.layers; ++l) {
        BlockParams b;
        b.text.wq = randn(rng, {d, d}, 0.02);
        b.text.wk = randn(rng, {d, d}, 0.02);
        b.text.wv = randn(rng, {d, d}, 0.02);
        b.text.ln1 = {ones({d}), zeros({d})};
        b.text.ln2 = {ones({d}), zeros({d})};
        b.text.ffn = {randn(rng, {d, f}, 0.02), zeros({f}), randn(rng, {f, d}, 0.02), zeros({d})};
        b.visual.wq = copy_of(b.text.wq);
        b.visual.wk = copy_of(b.text.wk);
        b.visual.wv = copy_of(b.text.wv);
        b.visual.ln1 = {copy_of(b.text.ln1.gamma), copy_of(b.text.ln1.beta)};
        b.visual.ln2 = {copy_of(b.text.ln2.gamma), copy_of(b.text.ln2.beta)};
        b.visual.ffn = {copy_of(b.text.ffn.w1), copy_of(b.text.ffn.b1), copy_of(b.text.ffn.w2),
                        copy_of(b.text.ffn.b2)};
        b.wo = randn(rng, {d, d}, 0.02);
        p.blocks.push_back(std::move(b));
    }
    p.final_ln = {ones({d}), zeros({d})};
    p.head_w = randn(rng, {d, v}, 0.02);
    p.head_b = zeros({v});
    return p;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// Optional per-layer attention capture: probs[layer] holds [h][i][j].
struct ForwardTrace {
    std::vector<std::vector<double>> layer_probs;
    int n = 0;
    int heads = 0;
};

struct QkvRows {
    TensorPtr q, k, v;
};

inline QkvRows project_qkv(const TensorPtr& x, const std::vector<Modality>& tags,
                           const BlockParams& p) {
    return {ops::rowwise_matmul_select(x, tags, p.visual.wq, p.text.wq),
            ops::rowwise_matmul_select(x, tags, p.visual.wk, p.text.wk),
            ops::rowwise_matmul_select(x, tags, p.visual.wv, p.text.wv)};
}

inline TensorPtr block_forward(const TensorPtr& x, const std::vector<Modality>& tags,
                               const BlockParams& p, int heads,
                               std::vector<double>* capture = nullptr) {
    auto normed = ops::layernorm_select(x, tags, p.visual.ln1.gamma, p.visual.ln1.beta,
                                        p.text.ln1.gamma, p.text.ln1.beta);
    auto qkv = project_qkv(normed, tags, p);
    auto attn = ops::causal_mha(qkv.q, qkv.k, qkv.v, heads, capture);
    auto h = ops::add(x, ops::matmul(attn, p.wo));
    auto normed2 = ops::layernorm_select(h, tags, p.visual.ln2.gamma, p.visual.ln2.beta,
                                         p.text.ln2.gamma, p.text.ln2.beta);
    auto mid = ops::gelu(ops::rowwise_affine_select(normed2, tags, p.visual.ffn.w1,
                                                    p.visual.ffn.b1, p.text.ffn.w1,
                                                    p.text.ffn.b1));
    auto ffn = ops::rowwise_affine_select(mid, tags, p.visual.ffn.w2, p.visual.ffn.b2,
                                          p.text.ffn.w2, p.text.ffn.b2);
    return ops::add(h, ffn);
}

inline TensorPtr model_forward(const TokenStream& stream, const Image* img,
                               const ModelParams& params, ForwardTrace* trace = nullptr) {
    stream.validate();
    const int n = stream.size();
    const int n_visual = stream.visual_count();

    std::vector<TensorPtr> sources;
    std::vector<std::pair<int, int>> index(n);
    std::vector<int> text_ids;
    std::vector<int> text_positions;
    int text_row = 0;
    for (int i = 0; i < n; ++i) {
        const auto& e = stream.entries[i];
        if (e.tag == Modality::Text) {
            text_ids.push_back(e.payload);
            text_positions.push_back(i);
            index[i] = {0, text_row++};
        } else {
            index[i] = {1, e.payload};
        }
    }
    auto text_rows = embed_text(text_ids, params.e_t);
    if (params.cfg.text_pos) {
        for (int pos : text_positions)
            if (pos >= params.cfg.max_seq)
                throw std::invalid_argument("model_forward: sequence exceeds text positional table");
        text_rows = ops::add(text_rows, ops::embedding_lookup(params.text_pos_table, text_positions));
    }
    sources.push_back(text_rows);
    if (n_visual > 0) {
        if (img == nullptr)
            throw std::invalid_argument("model_forward: stream has visual entries but no image");
        auto emb = embed_image(*img, params.patch);
        if (emb.tokens->rows() != n_visual)
            throw std::invalid_argument(
                "model_forward: stream expects " + std::to_string(n_visual) +
                " visual tokens but the image embeds to " + std::to_string(emb.tokens->rows()));
        sources.push_back(emb.tokens);
    }

    auto x = ops::row_select(sources, index);
    const auto tags = stream.tags();
    if (trace) {
        trace->layer_probs.assign(params.blocks.size(), {});
        trace->n = n;
        trace->heads = params.cfg.heads;
    }
    for (size_t l = 0; l < params.blocks.size(); ++l)
        x = block_forward(x, tags, params.blocks[l], params.cfg.heads,
                          trace ? &trace->layer_probs[l] : nullptr);
    x = ops::layernorm(x, params.final_ln.gamma, params.final_ln.beta);
    return ops::add_bias_rows(ops::matmul(x, params.head_w), params.head_b);
}

// ---------------------------------------------------------------------------
// Greedy decoding. Ties break toward the lowest token id.
// ---------------------------------------------------------------------------

inline int argmax_row(const Tensor& logits, int row) {
    const int v = logits.cols();
    const double* r = logits.data.data() + static_cast<size_t>(row) * v;
    int best = 0;
    for (int j = 1; j < v; ++j)
        if (r[j] > r[best]) best = j;
    return best;
}

struct GenerateResult {
    std::vector<int> ids; // emitted ids, EOS excluded
    bool hit_eos = false;
};

inline GenerateResult generate_ids(const TokenStream& prefix, const Image* img,
                                   const ModelParams& params, int max_new) {
    NoGradGuard ng;
    TokenStream s = prefix;
    GenerateResult res;
    for (int step = 0; step < max_new; ++step) {
        auto logits = model_forward(s, img, params);
        const int next = argmax_row(*logits, s.size() - 1);
        if (next == vocab::EOS) {
            res.hit_eos = true;
            break;
        }
        res.ids.push_back(next);
        s.entries.push_back({Modality::Text, next});
        s.loss_mask.push_back(0);
    }
    return res;
}

inline std::string generate(const TokenStream& prefix, const Image* img,
                            const ModelParams& params, int max_new) {
    auto res = generate_ids(prefix, img, params, max_new);
    std::string out;
    for (int id : res.ids)
        if (id < vocab::kBytes) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    return out;
}

// ---------------------------------------------------------------------------
// Per-layer visual attention allocation: mean over heads and answer-span
// query rows of the total attention mass on visual key positions.
// ---------------------------------------------------------------------------
inline std::vector<double> attention_allocation(const TokenStream& stream, const Image* img,
                                                const ModelParams& params) {
    if (stream.visual_count() == 0)
        throw std::invalid_argument("attention_allocation: stream has no visual tokens");
    std::vector<int> query_rows;
    for (int i = 0; i < stream.size(); ++i)
        if (stream.loss_mask[i]) query_rows.push_back(i);
    if (query_rows.empty())
        throw std::invalid_argument("attention_allocation: stream has no answer positions");

    NoGradGuard ng;
    ForwardTrace trace;
    model_forward(stream, img, params, &trace);
    const int n = trace.n, heads = trace.heads;
    std::vector<int> visual_keys;
    for (int j = 0; j < n; ++j)
        if (stream.entries[j].tag == Modality::Visual) visual_keys.push_back(j);
    std::vector<double> profile(params.blocks.size(), 0.0);
    for (size_t l = 0; l < params.blocks.size(); ++l) {
        const auto& probs = trace.layer_probs[l];
        double acc = 0.0;
        for (int hh = 0; hh < heads; ++hh)
            for (int qi : query_rows)
                for (int j : visual_keys)
                    acc += probs[(static_cast<size_t>(hh) * n + qi) * n + j];
        profile[l] = acc / (static_cast<double>(heads) * query_rows.size());
    }
    return profile;
}

} // namespace patchlm
