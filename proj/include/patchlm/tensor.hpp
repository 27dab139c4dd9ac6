#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace patchlm {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Redirects gradient accumulation of leaf tensors (shared parameters) into
// private buffers, so several sample graphs can run backward concurrently
// and be reduced in a fixed order afterwards.
class GradStore {
public:
    double* buffer(const Tensor& t, size_t n) {
        auto& v = grads_[&t];
        if (v.empty()) v.assign(n, 0.0);
        return v.data();
    }
    const std::vector<double>* find(const Tensor& t) const {
        auto it = grads_.find(&t);
        return it == grads_.end() ? nullptr : &it->second;
    }

private:
    std::unordered_map<const Tensor*, std::vector<double>> grads_;
};

namespace detail {
inline bool& autograd_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool autograd_enabled() { return detail::autograd_flag(); }

// Disables graph recording within a scope (inference paths).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::autograd_flag()) { detail::autograd_flag() = false; }
    ~NoGradGuard() { detail::autograd_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense n-dimensional array of 64-bit reals with reverse-mode differentiation.
// Values are immutable after creation; only grad is written during backward.
class Tensor : public std::enable_shared_from_this<Tensor> {
public:
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until backward touches this tensor

    bool requires_grad = false;
    std::vector<TensorPtr> parents;
    // Pulls this->grad (or the store-redirected buffer) into the parents.
    std::function<void(Tensor&, GradStore*)> backward_fn;

    static TensorPtr create(std::vector<int> shape, bool requires_grad = false) {
        auto t = std::make_shared<Tensor>();
        t->shape = std::move(shape);
        t->data.assign(t->count(), 0.0);
        t->requires_grad = requires_grad;
        return t;
    }

    static TensorPtr from_data(std::vector<int> shape, std::vector<double> values,
                               bool requires_grad = false) {
        auto t = create(std::move(shape), requires_grad);
        if (values.size() != t->data.size())
            throw std::invalid_argument("tensor data length does not match shape");
        t->data = std::move(values);
        return t;
    }

    size_t count() const {
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }
    bool is_leaf() const { return parents.empty(); }
    bool is_scalar() const { return data.size() == 1; }

    // Destination for gradient accumulation. Leaf gradients may be redirected
    // into a GradStore; intermediate tensors always use their own buffer.
    double* grad_dest(GradStore* store) {
        if (store != nullptr && is_leaf()) return store->buffer(*this, data.size());
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad.data();
    }

    void zero_grad() { grad.assign(data.size(), 0.0); }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }
};

namespace ops {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline TensorPtr make_result(std::vector<int> shape, const std::vector<TensorPtr>& inputs) {
    auto out = Tensor::create(std::move(shape));
    if (autograd_enabled()) {
        for (const auto& in : inputs)
            if (in->requires_grad) out->requires_grad = true;
        if (out->requires_grad) out->parents = inputs;
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul: C[m x n] = A[m x k] * B[k x n]
// backward: dA += dC * B^T, dB += A^T * dC
// ---------------------------------------------------------------------------
inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    require(a->rank() == 2 && b->rank() == 2,
            "matmul expects rank-2 tensors, got " + a->shape_str() + " and " + b->shape_str());
    require(a->cols() == b->rows(),
            "matmul dimension mismatch: " + a->shape_str() + " vs " + b->shape_str());
    const int m = a->rows(), k = a->cols(), n = b->cols();
    auto out = make_result({m, n}, {a, b});
    const double* A = a->data.data();
    const double* B = b->data.data();
    double* C = out->data.data();
    for (int i = 0; i < m; ++i) {
        double* c = C + static_cast<size_t>(i) * n;
        const double* arow = A + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = B + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) c[j] += av * brow[j];
        }
    }
    if (out->requires_grad) {
        out->backward_fn = [m, k, n](Tensor& self, GradStore* store) {
            const double* dC = self.grad.data();
            auto& a = self.parents[0];
            auto& b = self.parents[1];
            if (a->requires_grad) {
                double* dA = a->grad_dest(store);
                const double* B = b->data.data();
                for (int i = 0; i < m; ++i) {
                    const double* dcrow = dC + static_cast<size_t>(i) * n;
                    double* darow = dA + static_cast<size_t>(i) * k;
                    for (int kk = 0; kk < k; ++kk) {
                        const double* brow = B + static_cast<size_t>(kk) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
                        darow[kk] += acc;
                    }
                }
            }
            if (b->requires_grad) {
                double* dB = b->grad_dest(store);
                const double* A = a->data.data();
                for (int i = 0; i < m; ++i) {
                    const double* arow = A + static_cast<size_t>(i) * k;
                    const double* dcrow = dC + static_cast<size_t>(i) * n;
                    for (int kk = 0; kk < k; ++kk) {
                        const double av = arow[kk];
                        double* dbrow = dB + static_cast<size_t>(kk) * n;
                        for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise add / multiply (same shape), scalar scale, bias over rows
// ---------------------------------------------------------------------------
inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    require(a->shape == b->shape,
            "add shape mismatch: " + a->shape_str() + " vs " + b->shape_str());
    auto out = make_result(a->shape, {a, b});
    for (size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (out->requires_grad) {
        out->backward_fn = [](Tensor& self, GradStore* store) {
            for (auto& p : self.parents) {
                if (!p->requires_grad) continue;
                double* dp = p->grad_dest(store);
                for (size_t i = 0; i < self.size(); ++i) dp[i] += self.grad[i];
            }
        };
    }
    return out;
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    require(a->shape == b->shape,
            "mul shape mismatch: " + a->shape_str() + " vs " + b->shape_str());
    auto out = make_result(a->shape, {a, b});
    for (size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (out->requires_grad) {
        out->backward_fn = [](Tensor& self, GradStore* store) {
            auto& a = self.parents[0];
            auto& b = self.parents[1];
            if (a->requires_grad) {
                double* da = a->grad_dest(store);
                for (size_t i = 0; i < self.size(); ++i) da[i] += self.grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                double* db = b->grad_dest(store);
                for (size_t i = 0; i < self.size(); ++i) db[i] += self.grad[i] * a->data[i];
            }
        };
    }
    return out;
}

inline TensorPtr scale(const TensorPtr& a, double c) {
    auto out = make_result(a->shape, {a});
    for (size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] * c;
    if (out->requires_grad) {
        out->backward_fn = [c](Tensor& self, GradStore* store) {
            auto& a = self.parents[0];
            double* da = a->grad_dest(store);
            for (size_t i = 0; i < self.size(); ++i) da[i] += self.grad[i] * c;
        };
    }
    return out;
}

inline TensorPtr add_bias_rows(const TensorPtr& x, const TensorPtr& b) {
    require(x->rank() == 2 && b->rank() == 1 && b->shape[0] == x->cols(),
            "add_bias_rows expects [n x d] and [d], got " + x->shape_str() + " and " +
                b->shape_str());
    const int n = x->rows(), d = x->cols();
    auto out = make_result(x->shape, {x, b});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out->data[static_cast<size_t>(i) * d + j] =
                x->data[static_cast<size_t>(i) * d + j] + b->data[j];
    if (out->requires_grad) {
        out->backward_fn = [n, d](Tensor& self, GradStore* store) {
            auto& x = self.parents[0];
            auto& b = self.parents[1];
            if (x->requires_grad) {
                double* dx = x->grad_dest(store);
                for (size_t i = 0; i < self.size(); ++i) dx[i] += self.grad[i];
            }
            if (b->requires_grad) {
                double* db = b->grad_dest(store);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) db[j] += self.grad[static_cast<size_t>(i) * d + j];
            }
        };
    }
    return out;
}

inline TensorPtr sum(const TensorPtr& x) {
    auto out = make_result({1}, {x});
    double acc = 0.0;
    for (size_t i = 0; i < x->size(); ++i) acc += x->data[i];
    out->data[0] = acc;
    if (out->requires_grad) {
        out->backward_fn = [](Tensor& self, GradStore* store) {
            auto& x = self.parents[0];
            double* dx = x->grad_dest(store);
            const double g = self.grad[0];
            for (size_t i = 0; i < x->size(); ++i) dx[i] += g;
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax over rows. -inf entries encode masking and map to exactly 0;
// a fully masked row is an error.
// ---------------------------------------------------------------------------
inline TensorPtr softmax_rows(const TensorPtr& x) {
    require(x->rank() == 2, "softmax_rows expects a rank-2 tensor, got " + x->shape_str());
    const int m = x->rows(), n = x->cols();
    auto out = make_result(x->shape, {x});
    for (int i = 0; i < m; ++i) {
        const double* row = x->data.data() + static_cast<size_t>(i) * n;
        double* orow = out->data.data() + static_cast<size_t>(i) * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j)
            if (std::isfinite(row[j]) && row[j] > mx) mx = row[j];
        if (!std::isfinite(mx))
            throw std::domain_error("softmax_rows: row " + std::to_string(i) +
                                    " is entirely masked");
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            const double e = std::isinf(row[j]) ? 0.0 : std::exp(row[j] - mx);
            orow[j] = e;
            denom += e;
        }
        for (int j = 0; j < n; ++j) orow[j] /= denom;
    }
    if (out->requires_grad) {
        out->backward_fn = [m, n](Tensor& self, GradStore* store) {
            auto& x = self.parents[0];
            if (!x->requires_grad) return;
            double* dx = x->grad_dest(store);
            for (int i = 0; i < m; ++i) {
                const double* p = self.data.data() + static_cast<size_t>(i) * n;
                const double* dy = self.grad.data() + static_cast<size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += dy[j] * p[j];
                double* dxr = dx + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) dxr[j] += p[j] * (dy[j] - dot);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// GELU, tanh approximation. Constants are fixed so that independent
// implementations agree to ~1e-7.
// ---------------------------------------------------------------------------
namespace detail_gelu {
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kCubic = 0.044715;

inline double forward(double v) {
    const double inner = kSqrt2OverPi * (v + kCubic * v * v * v);
    return 0.5 * v * (1.0 + std::tanh(inner));
}

inline double derivative(double v) {
    const double inner = kSqrt2OverPi * (v + kCubic * v * v * v);
    const double t = std::tanh(inner);
    const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
}
} // namespace detail_gelu

inline TensorPtr gelu(const TensorPtr& x) {
    auto out = make_result(x->shape, {x});
    for (size_t i = 0; i < x->size(); ++i) out->data[i] = detail_gelu::forward(x->data[i]);
    if (out->requires_grad) {
        out->backward_fn = [](Tensor& self, GradStore* store) {
            auto& x = self.parents[0];
            double* dx = x->grad_dest(store);
            for (size_t i = 0; i < x->size(); ++i)
                dx[i] += self.grad[i] * detail_gelu::derivative(x->data[i]);
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// layernorm over the last dimension: mean 0 / variance 1 per vector, then
// affine with gamma/beta. Variance uses 1/d.
// ---------------------------------------------------------------------------
inline TensorPtr layernorm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                           double eps = 1e-5) {
    require(x->rank() >= 1, "layernorm expects a non-empty shape");
    const int d = x->shape.back();
    require(gamma->rank() == 1 && gamma->shape[0] == d && beta->rank() == 1 &&
                beta->shape[0] == d,
            "layernorm parameter shape mismatch for " + x->shape_str());
    require(eps > 0.0, "layernorm eps must be positive");
    const size_t rows = x->size() / static_cast<size_t>(d);
    auto out = make_result(x->shape, {x, gamma, beta});
    // inv_std per row saved for backward
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (size_t r = 0; r < rows; ++r) {
        const double* v = x->data.data() + r * d;
        double* o = out->data.data() + r * d;
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
        (*inv_std)[r] = is;
        for (int j = 0; j < d; ++j) o[j] = (v[j] - mean) * is * gamma->data[j] + beta->data[j];
    }
    if (out->requires_grad) {
        out->backward_fn = [rows, d, inv_std](Tensor& self, GradStore* store) {
            auto& x = self.parents[0];
            auto& gamma = self.parents[1];
            auto& beta = self.parents[2];
            double* dgamma = gamma->requires_grad ? gamma->grad_dest(store) : nullptr;
            double* dbeta = beta->requires_grad ? beta->grad_dest(store) : nullptr;
            double* dx = x->requires_grad ? x->grad_dest(store) : nullptr;
            for (size_t r = 0; r < rows; ++r) {
                const double* v = x->data.data() + r * d;
                const double* dy = self.grad.data() + r * d;
                const double is = (*inv_std)[r];
                double mean = 0.0;
                for (int j = 0; j < d; ++j) mean += v[j];
                mean /= d;
                // xhat, accumulated statistics
                double sum_g = 0.0, sum_gx = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double xh = (v[j] - mean) * is;
                    const double gdy = gamma->data[j] * dy[j];
                    sum_g += gdy;
                    sum_gx += gdy * xh;
                    if (dgamma) dgamma[j] += dy[j] * xh;
                    if (dbeta) dbeta[j] += dy[j];
                }
                if (dx) {
                    for (int j = 0; j < d; ++j) {
                        const double xh = (v[j] - mean) * is;
                        const double gdy = gamma->data[j] * dy[j];
                        dx[r * d + j] += is * (gdy - sum_g / d - xh * sum_gx / d);
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: x[C_in x H x W] (row-major, channel-major), w[C_out x C_in x k x k],
// b[C_out], no padding. Cross-correlation plus bias.
// ---------------------------------------------------------------------------
inline TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride) {
    require(x->rank() == 3 && w->rank() == 4 && b->rank() == 1,
            "conv2d expects x[C,H,W], w[O,C,k,k], b[O]");
    const int cin = x->shape[0], h = x->shape[1], wd = x->shape[2];
    const int cout = w->shape[0], k = w->shape[2];
    require(w->shape[1] == cin && w->shape[3] == k && b->shape[0] == cout,
            "conv2d parameter shape mismatch: " + w->shape_str());
    require(stride >= 1, "conv2d stride must be >= 1");
    if (h < k || wd < k)
        throw std::invalid_argument("conv2d input " + x->shape_str() +
                                    " smaller than kernel " + w->shape_str());
    const int oh = (h - k) / stride + 1;
    const int ow = (wd - k) / stride + 1;
    auto out = make_result({cout, oh, ow}, {x, w, b});
    auto X = [&](int c, int y, int xx) -> double {
        return x->data[(static_cast<size_t>(c) * h + y) * wd + xx];
    };
    auto W = [&](int o, int c, int ky, int kx) -> double {
        return w->data[((static_cast<size_t>(o) * cin + c) * k + ky) * k + kx];
    };
    for (int o = 0; o < cout; ++o) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = b->data[o];
                const int iy = oy * stride, ix = ox * stride;
                for (int c = 0; c < cin; ++c)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx)
                            acc += X(c, iy + ky, ix + kx) * W(o, c, ky, kx);
                out->data[(static_cast<size_t>(o) * oh + oy) * ow + ox] = acc;
            }
        }
    }
    if (out->requires_grad) {
        out->backward_fn = [cin, h, wd, cout, k, stride, oh, ow](Tensor& self, GradStore* store) {
            auto& x = self.parents[0];
            auto& w = self.parents[1];
            auto& b = self.parents[2];
            double* dx = x->requires_grad ? x->grad_dest(store) : nullptr;
            double* dw = w->requires_grad ? w->grad_dest(store) : nullptr;
            double* db = b->requires_grad ? b->grad_dest(store) : nullptr;
            for (int o = 0; o < cout; ++o) {
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const double g =
                            self.grad[(static_cast<size_t>(o) * oh + oy) * ow + ox];
                        if (db) db[o] += g;
                        const int iy = oy * stride, ix = ox * stride;
                        for (int c = 0; c < cin; ++c) {
                            for (int ky = 0; ky < k; ++ky) {
                                for (int kx = 0; kx < k; ++kx) {
                                    const size_t xi =
                                        (static_cast<size_t>(c) * h + iy + ky) * wd + ix + kx;
                                    const size_t wi =
                                        ((static_cast<size_t>(o) * cin + c) * k + ky) * k + kx;
                                    if (dw) dw[wi] += g * x->data[xi];
                                    if (dx) dx[xi] += g * w->data[wi];
                                }
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// embedding lookup: row gather from table[V x d]; backward scatters
// gradient rows additively.
// ---------------------------------------------------------------------------
inline TensorPtr embedding_lookup(const TensorPtr& table, const std::vector<int>& ids) {
    require(table->rank() == 2, "embedding_lookup expects a rank-2 table");
    const int v = table->rows(), d = table->cols();
    for (int id : ids)
        if (id < 0 || id >= v)
            throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                                    " outside vocabulary of size " + std::to_string(v));
    const int n = static_cast<int>(ids.size());
    auto out = make_result({std::max(n, 1), d}, {table});
    if (n == 0) {
        // empty gather: zero-row tensor is not representable, use 0 x d via shape {0,d}
        out->shape = {0, d};
        out->data.clear();
        out->grad.clear();
    }
    for (int i = 0; i < n; ++i) {
        const double* src = table->data.data() + static_cast<size_t>(ids[i]) * d;
        std::copy(src, src + d, out->data.data() + static_cast<size_t>(i) * d);
    }
    if (out->requires_grad) {
        auto held = std::make_shared<std::vector<int>>(ids);
        out->backward_fn = [held, d](Tensor& self, GradStore* store) {
            auto& table = self.parents[0];
            double* dt = table->grad_dest(store);
            for (size_t i = 0; i < held->size(); ++i) {
                double* dst = dt + static_cast<size_t>((*held)[i]) * d;
                const double* g = self.grad.data() + i * d;
                for (int j = 0; j < d; ++j) dst[j] += g[j];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// row_select: assemble an [n x d] tensor by picking rows from multiple
// sources; backward scatters additively. index[i] = (source, row).
// ---------------------------------------------------------------------------
inline TensorPtr row_select(const std::vector<TensorPtr>& sources,
                            const std::vector<std::pair<int, int>>& index) {
    require(!sources.empty(), "row_select needs at least one source");
    const int d = sources[0]->cols();
    for (const auto& s : sources)
        require(s->rank() == 2 && s->cols() == d, "row_select sources must share width");
    for (const auto& [si, ri] : index) {
        require(si >= 0 && si < static_cast<int>(sources.size()), "row_select: bad source index");
        require(ri >= 0 && ri < sources[si]->rows(), "row_select: bad row index");
    }
    const int n = static_cast<int>(index.size());
    auto out = make_result({n, d}, sources);
    for (int i = 0; i < n; ++i) {
        const auto& [si, ri] = index[i];
        const double* src = sources[si]->data.data() + static_cast<size_t>(ri) * d;
        std::copy(src, src + d, out->data.data() + static_cast<size_t>(i) * d);
    }
    if (out->requires_grad) {
        auto held = std::make_shared<std::vector<std::pair<int, int>>>(index);
        out->backward_fn = [held, d](Tensor& self, GradStore* store) {
            for (size_t i = 0; i < held->size(); ++i) {
                auto& src = self.parents[(*held)[i].first];
                if (!src->requires_grad) continue;
                double* ds = src->grad_dest(store) + static_cast<size_t>((*held)[i].second) * d;
                const double* g = self.grad.data() + i * d;
                for (int j = 0; j < d; ++j) ds[j] += g[j];
            }
        };
    }
    return out;
}

// z[d x H x W] -> [H*W x d], token (r,c) at row r*W + c.
inline TensorPtr grid_to_rows(const TensorPtr& z) {
    require(z->rank() == 3, "grid_to_rows expects [d,H,W], got " + z->shape_str());
    const int d = z->shape[0], h = z->shape[1], w = z->shape[2];
    auto out = make_result({h * w, d}, {z});
    for (int c = 0; c < d; ++c)
        for (int r = 0; r < h; ++r)
            for (int col = 0; col < w; ++col)
                out->data[(static_cast<size_t>(r) * w + col) * d + c] =
                    z->data[(static_cast<size_t>(c) * h + r) * w + col];
    if (out->requires_grad) {
        out->backward_fn = [d, h, w](Tensor& self, GradStore* store) {
            auto& z = self.parents[0];
            double* dz = z->grad_dest(store);
            for (int c = 0; c < d; ++c)
                for (int r = 0; r < h; ++r)
                    for (int col = 0; col < w; ++col)
                        dz[(static_cast<size_t>(c) * h + r) * w + col] +=
                            self.grad[(static_cast<size_t>(r) * w + col) * d + c];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// cross entropy over masked positions: mean of -log softmax(logits_i)[t_i].
// Rows with mask=false are never read, so perturbing them cannot change the
// loss or any gradient.
// ---------------------------------------------------------------------------
inline TensorPtr cross_entropy(const TensorPtr& logits, const std::vector<int>& targets,
                               const std::vector<uint8_t>& mask) {
    require(logits->rank() == 2, "cross_entropy expects [n x V] logits");
    const int n = logits->rows(), v = logits->cols();
    require(static_cast<int>(targets.size()) == n && static_cast<int>(mask.size()) == n,
            "cross_entropy: lengths disagree with logits " + logits->shape_str());
    auto active = std::make_shared<std::vector<int>>();
    for (int i = 0; i < n; ++i)
        if (mask[i]) active->push_back(i);
    if (active->empty()) throw std::invalid_argument("cross_entropy: loss mask is empty");
    for (int i : *active)
        if (targets[i] < 0 || targets[i] >= v)
            throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) +
                                    " outside vocabulary of size " + std::to_string(v));
    auto out = make_result({1}, {logits});
    double total = 0.0;
    for (int i : *active) {
        const double* row = logits->data.data() + static_cast<size_t>(i) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
        total += (std::log(denom) + mx) - row[targets[i]];
    }
    out->data[0] = total / static_cast<double>(active->size());
    if (out->requires_grad) {
        auto held_targets = std::make_shared<std::vector<int>>(targets);
        out->backward_fn = [active, held_targets, v](Tensor& self, GradStore* store) {
            auto& logits = self.parents[0];
            double* dl = logits->grad_dest(store);
            const double scale = self.grad[0] / static_cast<double>(active->size());
            for (int i : *active) {
                const double* row = logits->data.data() + static_cast<size_t>(i) * v;
                double* drow = dl + static_cast<size_t>(i) * v;
                double mx = row[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                double denom = 0.0;
                for (int j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
                for (int j = 0; j < v; ++j) {
                    double p = std::exp(row[j] - mx) / denom;
                    if (j == (*held_targets)[i]) p -= 1.0;
                    drow[j] += scale * p;
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// fused causal multi-head attention.
// Per head: scores = Q_h K_h^T / sqrt(d_k) over j <= i only, softmax, then
// weighted sum of V_h. Entries above the diagonal are never computed, which
// makes causal exactness bitwise. The caller applies the output projection.
// When `capture` is non-null the full probability array [h][i][j] (zeros
// above the diagonal) is copied out for inspection.
// ---------------------------------------------------------------------------
inline TensorPtr causal_mha(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v, int heads,
                            std::vector<double>* capture = nullptr) {
    require(q->rank() == 2 && q->shape == k->shape && q->shape == v->shape,
            "causal_mha expects Q,K,V of identical [n x d] shapes");
    const int n = q->rows(), d = q->cols();
    require(heads >= 1 && d % heads == 0, "causal_mha: head count must divide width");
    const int dk = d / heads;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    auto out = make_result({n, d}, {q, k, v});
    // probs[h][i][j], zero above the diagonal
    auto probs = std::make_shared<std::vector<double>>(
        static_cast<size_t>(heads) * n * n, 0.0);
    std::vector<double> scores(n);
    for (int hh = 0; hh < heads; ++hh) {
        const int off = hh * dk;
        double* P = probs->data() + static_cast<size_t>(hh) * n * n;
        for (int i = 0; i < n; ++i) {
            const double* qi = q->data.data() + static_cast<size_t>(i) * d + off;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j <= i; ++j) {
                const double* kj = k->data.data() + static_cast<size_t>(j) * d + off;
                double s = 0.0;
                for (int c = 0; c < dk; ++c) s += qi[c] * kj[c];
                s *= inv_sqrt_dk;
                scores[j] = s;
                if (s > mx) mx = s;
            }
            double denom = 0.0;
            for (int j = 0; j <= i; ++j) {
                const double e = std::exp(scores[j] - mx);
                scores[j] = e;
                denom += e;
            }
            double* prow = P + static_cast<size_t>(i) * n;
            double* orow = out->data.data() + static_cast<size_t>(i) * d + off;
            for (int j = 0; j <= i; ++j) {
                const double p = scores[j] / denom;
                prow[j] = p;
                const double* vj = v->data.data() + static_cast<size_t>(j) * d + off;
                for (int c = 0; c < dk; ++c) orow[c] += p * vj[c];
            }
        }
    }
    if (capture) *capture = *probs;
    if (out->requires_grad) {
        out->backward_fn = [n, d, heads, dk, inv_sqrt_dk, probs](Tensor& self, GradStore* store) {
            auto& q = self.parents[0];
            auto& k = self.parents[1];
            auto& v = self.parents[2];
            double* dq = q->requires_grad ? q->grad_dest(store) : nullptr;
            double* dkg = k->requires_grad ? k->grad_dest(store) : nullptr;
            double* dv = v->requires_grad ? v->grad_dest(store) : nullptr;
            std::vector<double> dp(n), ds(n);
            for (int hh = 0; hh < heads; ++hh) {
                const int off = hh * dk;
                const double* P = probs->data() + static_cast<size_t>(hh) * n * n;
                for (int i = 0; i < n; ++i) {
                    const double* go = self.grad.data() + static_cast<size_t>(i) * d + off;
                    const double* prow = P + static_cast<size_t>(i) * n;
                    // dP and softmax jacobian
                    double dot = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        const double* vj = v->data.data() + static_cast<size_t>(j) * d + off;
                        double acc = 0.0;
                        for (int c = 0; c < dk; ++c) acc += go[c] * vj[c];
                        dp[j] = acc;
                        dot += acc * prow[j];
                    }
                    for (int j = 0; j <= i; ++j) ds[j] = prow[j] * (dp[j] - dot) * inv_sqrt_dk;
                    const double* qi = q->data.data() + static_cast<size_t>(i) * d + off;
                    double* dqi = dq ? dq + static_cast<size_t>(i) * d + off : nullptr;
                    for (int j = 0; j <= i; ++j) {
                        const double* kj = k->data.data() + static_cast<size_t>(j) * d + off;
                        const double* vj = v->data.data() + static_cast<size_t>(j) * d + off;
                        const double sj = ds[j];
                        const double pj = prow[j];
                        if (dqi)
                            for (int c = 0; c < dk; ++c) dqi[c] += sj * kj[c];
                        if (dkg) {
                            double* dkj = dkg + static_cast<size_t>(j) * d + off;
                            for (int c = 0; c < dk; ++c) dkj[c] += sj * qi[c];
                        }
                        if (dv) {
                            double* dvj = dv + static_cast<size_t>(j) * d + off;
                            for (int c = 0; c < dk; ++c) dvj[c] += pj * go[c];
                        }
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward: reverse topological sweep from a scalar loss. Each node is
// visited exactly once; accumulation order is the graph construction order,
// so repeated runs are bit-identical.
// ---------------------------------------------------------------------------
inline void backward(const TensorPtr& loss, GradStore* store = nullptr) {
    if (!loss->is_scalar())
        throw std::invalid_argument("backward requires a scalar loss, got " + loss->shape_str());
    // iterative post-order DFS over parents
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // seed and sweep in reverse topological order
    {
        double* g = loss->grad_dest(store);
        g[0] += 1.0;
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* t = *it;
        if (t->backward_fn) {
            if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
            t->backward_fn(*t, store);
        }
    }
}

} // namespace ops
} // namespace patchlm
