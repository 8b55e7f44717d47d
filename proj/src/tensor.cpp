#include "optlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "optlab/errors.hpp"
#include "optlab/random.hpp"

namespace optlab {

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "×" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return filled(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->data.assign(shape_numel(shape), value);
    t.impl_->shape = std::move(shape);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_string(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from(Shape{}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }

std::size_t Tensor::rows() const {
    const auto& s = impl_->shape;
    if (s.size() <= 1) {
        return 1;
    }
    return size() / s.back();
}

std::size_t Tensor::cols() const {
    const auto& s = impl_->shape;
    return s.empty() ? 1 : s.back();
}

std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError("item() on tensor of shape " + shape_string(shape()));
    }
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { impl_->requires_grad = flag; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::grad_mut() const {
    if (impl_->grad.empty()) {
        impl_->grad.assign(impl_->data.size(), 0.0);
    }
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) {
        std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }
}

void Tensor::clear_grad() {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
}

Tensor Tensor::clone() const {
    Tensor t = from(impl_->shape, impl_->data, impl_->requires_grad);
    t.impl_->grad = impl_->grad;
    return t;
}

// ---- Tape ------------------------------------------------------------------

bool Tape::record(std::string_view op, std::vector<Tensor> inputs, Tensor& output, BackwardFn fn) {
    if (!recording_) {
        return false;
    }
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (!any) {
        return false;
    }
    output.set_requires_grad(true);
    nodes_.push_back(Node{op, std::move(inputs), output, std::move(fn)});
    return true;
}

void Tape::backward(const Tensor& loss, double seed) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
    }
    std::size_t end = nodes_.size();
    while (end > 0 && nodes_[end - 1].output.id() != loss.id()) {
        --end;
    }
    if (end == 0) {
        throw ContractError("backward: loss is not an output recorded on this tape");
    }
    Tensor root = loss;
    root.grad_mut()[0] += seed;
    for (std::size_t i = end; i-- > 0;) {
        Node& node = nodes_[i];
        if (node.output.has_grad()) {
            node.backward(node.output);
        }
    }
}

// ---- operations ------------------------------------------------------------

namespace {

void require_2d(const Tensor& t, std::string_view op) {
    if (t.dim() != 2) {
        throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

// out[m×n] += a[m×k] · b[k×n]
void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out[m×k] += d[m×n] · b[k×n]ᵀ
void gemm_nt(const double* d, const double* b, double* out, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* drow = d + i * n;
        double* orow = out + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                acc += drow[j] * brow[j];
            }
            orow[p] += acc;
        }
    }
}

// out[k×n] += a[m×k]ᵀ · d[m×n]
void gemm_tn(const double* a, const double* d, double* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* drow = d + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) {
                continue;
            }
            double* orow = out + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * drow[j];
            }
        }
    }
}

} // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.shape()[0];
    const std::size_t k = a.shape()[1];
    const std::size_t n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw DimensionError("matmul: inner dimensions disagree: " + shape_string(a.shape()) + " · " +
                             shape_string(b.shape()));
    }
    Tensor out = Tensor::zeros({m, n});
    gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    tape.record("matmul", {a, b}, out, [a, b, m, k, n](const Tensor& o) mutable {
        const double* d = o.grad().data();
        if (a.requires_grad()) {
            gemm_nt(d, b.data().data(), a.grad_mut().data(), m, n, k);
        }
        if (b.requires_grad()) {
            gemm_tn(a.data().data(), d, b.grad_mut().data(), m, k, n);
        }
    });
    return out;
}

Tensor transpose(Tape& tape, const Tensor& x) {
    require_2d(x, "transpose");
    const std::size_t r = x.shape()[0];
    const std::size_t c = x.shape()[1];
    Tensor out = Tensor::zeros({c, r});
    auto src = x.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            dst[j * r + i] = src[i * c + j];
        }
    }
    tape.record("transpose", {x}, out, [x, r, c](const Tensor& o) mutable {
        auto g = o.grad();
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                gx[i * c + j] += g[j * r + i];
            }
        }
    });
    return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    auto da = a.data();
    auto db = b.data();
    auto dout = out.data();
    for (std::size_t i = 0; i < dout.size(); ++i) {
        dout[i] = da[i] + db[i];
    }
    tape.record("add", {a, b}, out, [a, b](const Tensor& o) mutable {
        auto g = o.grad();
        for (const Tensor* t : {&a, &b}) {
            if (t->requires_grad()) {
                auto gt = t->grad_mut();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gt[i] += g[i];
                }
            }
        }
    });
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    auto da = a.data();
    auto db = b.data();
    auto dout = out.data();
    for (std::size_t i = 0; i < dout.size(); ++i) {
        dout[i] = da[i] * db[i];
    }
    tape.record("mul", {a, b}, out, [a, b](const Tensor& o) mutable {
        auto g = o.grad();
        if (a.requires_grad()) {
            auto ga = a.grad_mut();
            auto vb = b.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * vb[i];
            }
        }
        if (b.requires_grad()) {
            auto gb = b.grad_mut();
            auto va = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] += g[i] * va[i];
            }
        }
    });
    return out;
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
    Tensor out = Tensor::zeros(x.shape());
    auto src = x.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] = src[i] * factor;
    }
    tape.record("scale", {x}, out, [x, factor](const Tensor& o) mutable {
        auto g = o.grad();
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] * factor;
        }
    });
    return out;
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    const std::size_t r = x.rows();
    const std::size_t c = x.cols();
    if (bias.size() != c) {
        throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match rows of " +
                             shape_string(x.shape()));
    }
    Tensor out = Tensor::zeros(x.shape());
    auto src = x.data();
    auto vb = bias.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            dst[i * c + j] = src[i * c + j] + vb[j];
        }
    }
    tape.record("add_bias", {x, bias}, out, [x, bias, r, c](const Tensor& o) mutable {
        auto g = o.grad();
        if (x.requires_grad()) {
            auto gx = x.grad_mut();
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i];
            }
        }
        if (bias.requires_grad()) {
            auto gb = bias.grad_mut();
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    gb[j] += g[i * c + j];
                }
            }
        }
    });
    return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    auto src = x.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] = src[i] > 0.0 ? src[i] : 0.0;
    }
    tape.record("relu", {x}, out, [x](const Tensor& o) mutable {
        auto g = o.grad();
        auto src = x.data();
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (src[i] > 0.0) {
                gx[i] += g[i];
            }
        }
    });
    return out;
}

Tensor softmax(Tape& tape, const Tensor& x, int axis) {
    const auto& shape = x.shape();
    const int nd = static_cast<int>(shape.size());
    const int ax = axis < 0 ? axis + nd : axis;
    if (nd == 0 || ax < 0 || ax >= nd) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                             shape_string(shape));
    }
    std::size_t outer = 1;
    std::size_t inner = 1;
    for (int i = 0; i < ax; ++i) {
        outer *= shape[static_cast<std::size_t>(i)];
    }
    for (int i = ax + 1; i < nd; ++i) {
        inner *= shape[static_cast<std::size_t>(i)];
    }
    const std::size_t len = shape[static_cast<std::size_t>(ax)];

    Tensor out = Tensor::zeros(shape);
    auto src = x.data();
    auto dst = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) {
                mx = std::max(mx, src[base + j * inner]);
            }
            double total = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(src[base + j * inner] - mx);
                dst[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < len; ++j) {
                dst[base + j * inner] /= total;
            }
        }
    }
    tape.record("softmax", {x}, out, [x, outer, inner, len](const Tensor& o) mutable {
        auto g = o.grad();
        auto y = o.data();
        auto gx = x.grad_mut();
        for (std::size_t oo = 0; oo < outer; ++oo) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = oo * len * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    dot += g[base + j * inner] * y[base + j * inner];
                }
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t idx = base + j * inner;
                    gx[idx] += y[idx] * (g[idx] - dot);
                }
            }
        }
    });
    return out;
}

Tensor causal_softmax(Tape& tape, const Tensor& scores) {
    require_2d(scores, "causal_softmax");
    const std::size_t t = scores.shape()[0];
    if (scores.shape()[1] != t) {
        throw DimensionError("causal_softmax: expected square scores, got " + shape_string(scores.shape()));
    }
    Tensor out = Tensor::zeros(scores.shape());
    auto src = scores.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < t; ++i) {
        const double* row = src.data() + i * t;
        double* orow = dst.data() + i * t;
        double mx = row[0];
        for (std::size_t j = 1; j <= i; ++j) {
            mx = std::max(mx, row[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            orow[j] = std::exp(row[j] - mx);
            total += orow[j];
        }
        for (std::size_t j = 0; j <= i; ++j) {
            orow[j] /= total;
        }
    }
    tape.record("causal_softmax", {scores}, out, [scores, t](const Tensor& o) mutable {
        auto g = o.grad();
        auto y = o.data();
        auto gx = scores.grad_mut();
        for (std::size_t i = 0; i < t; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                dot += g[i * t + j] * y[i * t + j];
            }
            for (std::size_t j = 0; j <= i; ++j) {
                gx[i * t + j] += y[i * t + j] * (g[i * t + j] - dot);
            }
        }
    });
    return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t r = x.rows();
    const std::size_t c = x.cols();
    if (gain.size() != c || bias.size() != c) {
        throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                             shape_string(bias.shape()) + " do not match last dimension of " +
                             shape_string(x.shape()));
    }
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(r);
    auto src = x.data();
    auto vg = gain.data();
    auto vb = bias.data();
    auto dst = out.data();
    const double n = static_cast<double>(c);
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = src.data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            mu += row[j];
        }
        mu /= n;
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = row[j] - mu;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (row[j] - mu) * is;
            xhat[i * c + j] = h;
            dst[i * c + j] = h * vg[j] + vb[j];
        }
    }
    tape.record("layer_norm", {x, gain, bias}, out,
                [x, gain, bias, r, c, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                    const Tensor& o) mutable {
                    auto g = o.grad();
                    if (gain.requires_grad()) {
                        auto gg = gain.grad_mut();
                        for (std::size_t i = 0; i < r; ++i) {
                            for (std::size_t j = 0; j < c; ++j) {
                                gg[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    if (bias.requires_grad()) {
                        auto gb = bias.grad_mut();
                        for (std::size_t i = 0; i < r; ++i) {
                            for (std::size_t j = 0; j < c; ++j) {
                                gb[j] += g[i * c + j];
                            }
                        }
                    }
                    if (x.requires_grad()) {
                        auto gx = x.grad_mut();
                        auto vg = gain.data();
                        std::vector<double> dh(c);
                        for (std::size_t i = 0; i < r; ++i) {
                            double mean_dh = 0.0;
                            double mean_dh_h = 0.0;
                            for (std::size_t j = 0; j < c; ++j) {
                                dh[j] = g[i * c + j] * vg[j];
                                mean_dh += dh[j];
                                mean_dh_h += dh[j] * xhat[i * c + j];
                            }
                            mean_dh /= n;
                            mean_dh_h /= n;
                            for (std::size_t j = 0; j < c; ++j) {
                                gx[i * c + j] += inv_std[i] * (dh[j] - mean_dh - xhat[i * c + j] * mean_dh_h);
                            }
                        }
                    }
                });
    return out;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const TokenId> ids) {
    require_2d(table, "embedding");
    const std::size_t v = table.shape()[0];
    const std::size_t d = table.shape()[1];
    for (TokenId id : ids) {
        if (id >= v) {
            throw IndexError("embedding: id " + std::to_string(id) + " out of range for table of " +
                             std::to_string(v) + " rows");
        }
    }
    Tensor out = Tensor::zeros({ids.size(), d});
    auto src = table.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                    dst.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    tape.record("embedding", {table}, out,
                [table, d, ids = std::vector<TokenId>(ids.begin(), ids.end())](const Tensor& o) mutable {
                    auto g = o.grad();
                    auto gt = table.grad_mut();
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                        for (std::size_t j = 0; j < d; ++j) {
                            gt[ids[i] * d + j] += g[i * d + j];
                        }
                    }
                });
    return out;
}

Tensor slice(Tape& tape, const Tensor& x, std::size_t row_begin, std::size_t row_end, std::size_t col_begin,
             std::size_t col_end) {
    require_2d(x, "slice");
    const std::size_t c = x.shape()[1];
    if (row_begin > row_end || row_end > x.shape()[0] || col_begin > col_end || col_end > c) {
        throw IndexError("slice: block [" + std::to_string(row_begin) + "," + std::to_string(row_end) + ")×[" +
                         std::to_string(col_begin) + "," + std::to_string(col_end) + ") outside " +
                         shape_string(x.shape()));
    }
    const std::size_t nr = row_end - row_begin;
    const std::size_t nc = col_end - col_begin;
    Tensor out = Tensor::zeros({nr, nc});
    auto src = x.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < nr; ++i) {
        for (std::size_t j = 0; j < nc; ++j) {
            dst[i * nc + j] = src[(row_begin + i) * c + col_begin + j];
        }
    }
    tape.record("slice", {x}, out, [x, row_begin, col_begin, nr, nc, c](const Tensor& o) mutable {
        auto g = o.grad();
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < nr; ++i) {
            for (std::size_t j = 0; j < nc; ++j) {
                gx[(row_begin + i) * c + col_begin + j] += g[i * nc + j];
            }
        }
    });
    return out;
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw DimensionError("concat_cols: no inputs");
    }
    const std::size_t r = parts.front().rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p.rows() != r) {
            throw DimensionError("concat_cols: row count mismatch " + shape_string(parts.front().shape()) +
                                 " vs " + shape_string(p.shape()));
        }
        total += p.cols();
    }
    Tensor out = Tensor::zeros({r, total});
    auto dst = out.data();
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.cols();
        auto src = p.data();
        for (std::size_t i = 0; i < r; ++i) {
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * pc), pc,
                        dst.begin() + static_cast<std::ptrdiff_t>(i * total + offset));
        }
        offset += pc;
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    tape.record("concat_cols", inputs, out, [inputs, r, total](const Tensor& o) mutable {
        auto g = o.grad();
        std::size_t off = 0;
        for (auto& p : inputs) {
            const std::size_t pc = p.cols();
            if (p.requires_grad()) {
                auto gp = p.grad_mut();
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < pc; ++j) {
                        gp[i * pc + j] += g[i * total + off + j];
                    }
                }
            }
            off += pc;
        }
    });
    return out;
}

Tensor concat_rows(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw DimensionError("concat_rows: no inputs");
    }
    const std::size_t c = parts.front().cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_rows");
        if (p.cols() != c) {
            throw DimensionError("concat_rows: column count mismatch " + shape_string(parts.front().shape()) +
                                 " vs " + shape_string(p.shape()));
        }
        total += p.rows();
    }
    Tensor out = Tensor::zeros({total, c});
    auto dst = out.data();
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), dst.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += p.size();
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    tape.record("concat_rows", inputs, out, [inputs](const Tensor& o) mutable {
        auto g = o.grad();
        std::size_t off = 0;
        for (auto& p : inputs) {
            if (p.requires_grad()) {
                auto gp = p.grad_mut();
                for (std::size_t i = 0; i < gp.size(); ++i) {
                    gp[i] += g[off + i];
                }
            }
            off += p.size();
        }
    });
    return out;
}

Tensor dropout(Tape& tape, const Tensor& x, double p, std::uint64_t seed) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw ContractError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
    }
    if (p == 0.0) {
        return x;
    }
    Rng rng(seed);
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size());
    for (double& m : mask) {
        m = uniform01(rng) >= p ? keep_scale : 0.0;
    }
    Tensor out = Tensor::zeros(x.shape());
    auto src = x.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] = src[i] * mask[i];
    }
    tape.record("dropout", {x}, out, [x, mask = std::move(mask)](const Tensor& o) mutable {
        auto g = o.grad();
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] * mask[i];
        }
    });
    return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) {
        total += v;
    }
    Tensor out = Tensor::scalar(total);
    tape.record("sum", {x}, out, [x](const Tensor& o) mutable {
        const double g = o.grad()[0];
        for (double& v : x.grad_mut()) {
            v += g;
        }
    });
    return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
    return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.size()));
}

std::vector<double> log_softmax_row(std::span<const double> logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logits) {
        mx = std::max(mx, v);
    }
    double total = 0.0;
    for (double v : logits) {
        total += std::exp(v - mx);
    }
    const double lse = mx + std::log(total);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] - lse;
    }
    return out;
}

CrossEntropy cross_entropy(Tape& tape, const Tensor& logits, std::span<const TokenId> targets) {
    require_2d(logits, "cross_entropy");
    const std::size_t b = logits.shape()[0];
    const std::size_t v = logits.shape()[1];
    if (targets.size() != b) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_string(logits.shape()));
    }
    for (TokenId t : targets) {
        if (t >= v) {
            throw IndexError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(v));
        }
    }
    auto src = logits.data();
    std::vector<double> probs(logits.size());
    std::vector<double> nll(b);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double* row = src.data() + i * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) {
            mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            const double e = std::exp(row[j] - mx);
            probs[i * v + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < v; ++j) {
            probs[i * v + j] /= z;
        }
        nll[i] = mx + std::log(z) - row[targets[i]];
        total += nll[i];
    }
    CrossEntropy result{Tensor::scalar(total / static_cast<double>(b)), nll};
    tape.record("cross_entropy", {logits}, result.loss,
                [logits, b, v, probs = std::move(probs),
                 tg = std::vector<TokenId>(targets.begin(), targets.end())](const Tensor& o) mutable {
                    const double g = o.grad()[0] / static_cast<double>(b);
                    auto gl = logits.grad_mut();
                    for (std::size_t i = 0; i < b; ++i) {
                        for (std::size_t j = 0; j < v; ++j) {
                            gl[i * v + j] += g * probs[i * v + j];
                        }
                        gl[i * v + tg[i]] -= g;
                    }
                });
    return result;
}

} // namespace optlab
