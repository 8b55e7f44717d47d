#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace optlab {

using Shape = std::vector<std::size_t>;
using TokenId = std::uint32_t;

// Reserved end-of-text id shared by the model, tokenizer and evaluators.
inline constexpr TokenId kEndOfText = 0;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage, which is what the
/// tape needs to route gradients back to parameters. Use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor filled(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return impl_ != nullptr; }
    const void* id() const noexcept { return impl_.get(); }

    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    std::size_t size() const;
    // Two-dimensional accessors; a 1-D tensor reads as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<double> data();
    std::span<const double> data() const;
    double item() const;
    double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

    bool requires_grad() const;
    void set_requires_grad(bool flag);

    bool has_grad() const;
    std::span<const double> grad() const;
    // Allocates a zero gradient on first use.
    std::span<double> grad_mut() const;
    void zero_grad();
    void clear_grad();

    Tensor clone() const;

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

/// Records operations of one forward pass so backward() can replay them in
/// reverse. A non-recording tape runs the same ops without saving anything.
class Tape {
public:
    using BackwardFn = std::function<void(const Tensor& output)>;

    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    std::string_view op_name(std::size_t index) const { return nodes_.at(index).op; }

    // Returns true when a node was appended. `output` is marked requires_grad.
    bool record(std::string_view op, std::vector<Tensor> inputs, Tensor& output, BackwardFn fn);

    /// Seeds d(loss) = seed and propagates through every recorded node once,
    /// newest first. Gradients accumulate on fan-out.
    void backward(const Tensor& loss, double seed = 1.0);

    void clear() { nodes_.clear(); }

private:
    struct Node {
        std::string_view op;
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };
    bool recording_;
    std::vector<Node> nodes_;
};

// ---- operations ------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& x);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
// x[rows×n] + bias[n] broadcast over rows.
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor relu(Tape& tape, const Tensor& x);
Tensor softmax(Tape& tape, const Tensor& x, int axis = -1);
// Row-wise softmax of a square score matrix restricted to columns <= row; the
// masked entries are exactly zero.
Tensor causal_softmax(Tape& tape, const Tensor& scores);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// Gathers rows of `table` for each id.
Tensor embedding(Tape& tape, const Tensor& table, std::span<const TokenId> ids);
// 2-D block [row_begin,row_end) × [col_begin,col_end).
Tensor slice(Tape& tape, const Tensor& x, std::size_t row_begin, std::size_t row_end,
             std::size_t col_begin, std::size_t col_end);
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);
Tensor concat_rows(Tape& tape, std::span<const Tensor> parts);
// Inverted dropout; the keep mask is drawn from a stream seeded by `seed`.
Tensor dropout(Tape& tape, const Tensor& x, double p, std::uint64_t seed);
Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

struct CrossEntropy {
    Tensor loss;              // scalar mean NLL
    std::vector<double> nll;  // per-row NLL
};

CrossEntropy cross_entropy(Tape& tape, const Tensor& logits, std::span<const TokenId> targets);

// Row-wise log-softmax without recording; used by evaluation code.
std::vector<double> log_softmax_row(std::span<const double> logits);

} // namespace optlab
