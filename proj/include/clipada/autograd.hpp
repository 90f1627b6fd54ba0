// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value in a graph is a 2-D matrix; scalars are 1x1.
//
// Graphs are built eagerly by calling the free functions below and are
// released when the last Var referring to them goes away. Leaves created
// with Var::parameter() keep their gradient across backward() calls so a
// batch can be accumulated before an optimizer step.
//
// Ops taking `const Matrix&` operands (frozen weights) hold a pointer to
// that matrix until the graph is destroyed; the matrix must outlive it.

#pragma once

#include <Eigen/Dense>

#include <array>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace clipada::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Matrix&)> backward_fn;
};

class Var {
public:
    Var() = default;

    static Var constant(Matrix value);
    static Var parameter(Matrix value);

    [[nodiscard]] bool defined() const { return node_ != nullptr; }
    [[nodiscard]] const Matrix& value() const { return node_->value; }
    /// Direct access for optimizers; never call while a graph uses this leaf.
    [[nodiscard]] Matrix& mutable_value() { return node_->value; }
    [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
    [[nodiscard]] bool has_grad() const { return node_->grad.size() != 0; }
    /// Gradient, or zeros of the value's shape when nothing was accumulated.
    [[nodiscard]] Matrix grad() const;
    void zero_grad() { node_->grad.resize(0, 0); }

    [[nodiscard]] Index rows() const { return node_->value.rows(); }
    [[nodiscard]] Index cols() const { return node_->value.cols(); }
    [[nodiscard]] double item() const;

    /// Same value, cut off from the graph.
    [[nodiscard]] Var detach() const { return constant(node_->value); }

    [[nodiscard]] const std::shared_ptr<Node>& node() const { return node_; }

private:
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    std::shared_ptr<Node> node_;

    friend Var make_op(Matrix value, std::initializer_list<Var> inputs,
                       std::function<void(const Matrix&)> backward_fn);
    friend Var make_op(Matrix value, std::span<const Var> inputs,
                       std::function<void(const Matrix&)> backward_fn);
};

/// While alive, new ops record no backward information (inference mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

[[nodiscard]] bool grad_enabled();

/// Build an interior node. `backward_fn` receives d(root)/d(this) and must
/// accumulate into the inputs via accumulate(). It is dropped when no input
/// requires a gradient.
Var make_op(Matrix value, std::initializer_list<Var> inputs,
            std::function<void(const Matrix&)> backward_fn);
Var make_op(Matrix value, std::span<const Var> inputs,
            std::function<void(const Matrix&)> backward_fn);

void accumulate(Node& node, const Matrix& contribution);

/// Backpropagate from a 1x1 root. Interior gradients are released afterwards;
/// parameter gradients accumulate.
void backward(const Var& root);

// --- linear algebra -------------------------------------------------------
Var matmul(const Var& a, const Var& b);
Var matmul(const Var& a, const Matrix& b);
Var matmul(const Matrix& a, const Var& b);
Var transpose(const Var& a);
/// x * weight + bias (bias broadcast over rows). weight is in x out.
Var linear(const Var& x, const Matrix& weight, const RowVector& bias);
Var linear(const Var& x, const Var& weight, const Var& bias);

// --- elementwise ----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_constant(const Var& a, const Matrix& c);
/// Adds a 1 x cols row to every row of `a`.
Var add_row(const Var& a, const Var& row);
Var add_row(const Var& a, const RowVector& row);
Var scale(const Var& a, double factor);
/// a * factor + offset, elementwise.
Var affine(const Var& a, double factor, double offset);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
/// x * sigmoid(1.702 x), the activation of the original CLIP transformers.
Var quick_gelu(const Var& a);
/// Exact (erf) GELU.
Var gelu(const Var& a);

// --- reductions / normalisation ------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
/// 1 x cols mean over rows.
Var mean_rows(const Var& a);
Var layer_norm(const Var& x, const RowVector& gamma, const RowVector& beta, double eps);
Var softmax_rows(const Var& a);

// --- structure ------------------------------------------------------------
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// Row-major reinterpretation with the same element count.
Var reshape(const Var& a, Index rows, Index cols);

// --- losses ---------------------------------------------------------------
/// Mean binary cross-entropy from logits, logits clamped to [-clamp, clamp].
/// softplus(z) - y z is used so saturated logits stay finite.
Var bce_with_logits(const Var& logits, const Matrix& target, double clamp);

// --- images ---------------------------------------------------------------
/// A differentiable RGB image: three H x W channel planes.
using ImageVar = std::array<Var, 3>;

/// Rearranges an image into non-overlapping patches. Output has one row per
/// patch (row-major patch order) and 3*patch*patch columns ordered
/// channel, then patch row, then patch column (the flattening of a
/// [out, 3, p, p] convolution kernel).
Var patchify(const ImageVar& image, int patch);

} // namespace clipada::ag
