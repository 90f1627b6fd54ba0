// SPDX-License-Identifier: Apache-2.0
#include "clipada/autograd.hpp"

#include "clipada/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <unordered_set>

namespace clipada::ag {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
    }
}

// Largest double below 1 and smallest positive normal; keeps sigmoid outputs
// inside the open unit interval.
constexpr double kSigmoidHi = 1.0 - 0x1p-53;
constexpr double kSigmoidLo = std::numeric_limits<double>::min();

double stable_sigmoid(double z) {
    double s;
    if (z >= 0.0) {
        s = 1.0 / (1.0 + std::exp(-z));
    } else {
        const double e = std::exp(z);
        s = e / (1.0 + e);
    }
    return std::clamp(s, kSigmoidLo, kSigmoidHi);
}

double softplus(double z) {
    return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

thread_local bool g_grad_enabled = true;

} // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var Var::constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var Var::parameter(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

Matrix Var::grad() const {
    if (node_->grad.size() == 0) {
        return Matrix::Zero(node_->value.rows(), node_->value.cols());
    }
    return node_->grad;
}

double Var::item() const {
    if (node_->value.size() != 1) {
        throw ShapeError("item() on non-scalar " + shape_str(node_->value));
    }
    return node_->value(0, 0);
}

Var make_op(Matrix value, std::span<const Var> inputs, std::function<void(const Matrix&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->is_leaf = false;
    for (const auto& in : inputs) {
        if (g_grad_enabled && in.requires_grad()) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) {
        for (const auto& in : inputs) {
            if (in.requires_grad()) n->parents.push_back(in.node());
        }
        n->backward_fn = std::move(backward_fn);
    }
    return Var(std::move(n));
}

Var make_op(Matrix value, std::initializer_list<Var> inputs, std::function<void(const Matrix&)> backward_fn) {
    return make_op(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                   std::move(backward_fn));
}

void accumulate(Node& node, const Matrix& contribution) {
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
        node.grad = contribution;
    } else {
        node.grad += contribution;
    }
}

void backward(const Var& root) {
    if (!root.defined() || root.value().size() != 1) {
        throw ShapeError("backward() requires a scalar root");
    }
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    Node* r = root.node().get();
    accumulate(*r, Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(n->grad);
    }
    for (Node* n : order) {
        if (!n->is_leaf) n->grad.resize(0, 0);
    }
}

// --- linear algebra -------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a.value()) + " * " + shape_str(b.value()));
    }
    Matrix out = a.value() * b.value();
    return make_op(std::move(out), {a, b}, [an = a.node(), bn = b.node()](const Matrix& g) {
        if (an->requires_grad) accumulate(*an, g * bn->value.transpose());
        if (bn->requires_grad) accumulate(*bn, an->value.transpose() * g);
    });
}

Var matmul(const Var& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a.value()) + " * " + shape_str(b));
    }
    Matrix out = a.value() * b;
    return make_op(std::move(out), {a}, [an = a.node(), bp = &b](const Matrix& g) {
        accumulate(*an, g * bp->transpose());
    });
}

Var matmul(const Matrix& a, const Var& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b.value()));
    }
    Matrix out = a * b.value();
    return make_op(std::move(out), {b}, [ap = &a, bn = b.node()](const Matrix& g) {
        accumulate(*bn, ap->transpose() * g);
    });
}

Var transpose(const Var& a) {
    Matrix out = a.value().transpose();
    return make_op(std::move(out), {a}, [an = a.node()](const Matrix& g) {
        accumulate(*an, g.transpose());
    });
}

Var linear(const Var& x, const Matrix& weight, const RowVector& bias) {
    if (x.cols() != weight.rows() || bias.cols() != weight.cols()) {
        throw ShapeError("linear: input " + shape_str(x.value()) + ", weight " + shape_str(weight) +
                         ", bias " + std::to_string(bias.cols()));
    }
    Matrix out = x.value() * weight;
    out.rowwise() += bias;
    return make_op(std::move(out), {x}, [xn = x.node(), wp = &weight](const Matrix& g) {
        accumulate(*xn, g * wp->transpose());
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    if (x.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols()) {
        throw ShapeError("linear: input " + shape_str(x.value()) + ", weight " +
                         shape_str(weight.value()) + ", bias " + shape_str(bias.value()));
    }
    Matrix out = x.value() * weight.value();
    out.rowwise() += bias.value().row(0);
    return make_op(std::move(out), {x, weight, bias},
                   [xn = x.node(), wn = weight.node(), bn = bias.node()](const Matrix& g) {
                       if (xn->requires_grad) accumulate(*xn, g * wn->value.transpose());
                       if (wn->requires_grad) accumulate(*wn, xn->value.transpose() * g);
                       if (bn->requires_grad) accumulate(*bn, g.colwise().sum());
                   });
}

// --- elementwise ----------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Matrix out = a.value() + b.value();
    return make_op(std::move(out), {a, b}, [an = a.node(), bn = b.node()](const Matrix& g) {
        accumulate(*an, g);
        accumulate(*bn, g);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Matrix out = a.value() - b.value();
    return make_op(std::move(out), {a, b}, [an = a.node(), bn = b.node()](const Matrix& g) {
        accumulate(*an, g);
        accumulate(*bn, -g);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Matrix out = a.value().cwiseProduct(b.value());
    return make_op(std::move(out), {a, b}, [an = a.node(), bn = b.node()](const Matrix& g) {
        if (an->requires_grad) accumulate(*an, g.cwiseProduct(bn->value));
        if (bn->requires_grad) accumulate(*bn, g.cwiseProduct(an->value));
    });
}

Var add_constant(const Var& a, const Matrix& c) {
    if (a.rows() != c.rows() || a.cols() != c.cols()) {
        throw ShapeError("add_constant: " + shape_str(a.value()) + " vs " + shape_str(c));
    }
    Matrix out = a.value() + c;
    return make_op(std::move(out), {a}, [an = a.node()](const Matrix& g) { accumulate(*an, g); });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError("add_row: " + shape_str(a.value()) + " + " + shape_str(row.value()));
    }
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    return make_op(std::move(out), {a, row}, [an = a.node(), rn = row.node()](const Matrix& g) {
        accumulate(*an, g);
        if (rn->requires_grad) accumulate(*rn, g.colwise().sum());
    });
}

Var add_row(const Var& a, const RowVector& row) {
    if (row.cols() != a.cols()) {
        throw ShapeError("add_row: " + shape_str(a.value()) + " + 1x" + std::to_string(row.cols()));
    }
    Matrix out = a.value();
    out.rowwise() += row;
    return make_op(std::move(out), {a}, [an = a.node()](const Matrix& g) { accumulate(*an, g); });
}

Var scale(const Var& a, double factor) {
    Matrix out = a.value() * factor;
    return make_op(std::move(out), {a}, [an = a.node(), factor](const Matrix& g) {
        accumulate(*an, g * factor);
    });
}

Var affine(const Var& a, double factor, double offset) {
    Matrix out = (a.value().array() * factor + offset).matrix();
    return make_op(std::move(out), {a}, [an = a.node(), factor](const Matrix& g) {
        accumulate(*an, g * factor);
    });
}

Var sigmoid(const Var& a) {
    Matrix out = a.value().unaryExpr([](double z) { return stable_sigmoid(z); });
    Matrix deriv = out.array() * (1.0 - out.array());
    return make_op(std::move(out), {a}, [an = a.node(), d = std::move(deriv)](const Matrix& g) {
        accumulate(*an, g.cwiseProduct(d));
    });
}

Var tanh(const Var& a) {
    Matrix out = a.value().array().tanh().matrix();
    Matrix deriv = 1.0 - out.array().square();
    return make_op(std::move(out), {a}, [an = a.node(), d = std::move(deriv)](const Matrix& g) {
        accumulate(*an, g.cwiseProduct(d));
    });
}

Var quick_gelu(const Var& a) {
    constexpr double k = 1.702;
    const Matrix& x = a.value();
    Matrix s = (x * k).unaryExpr([](double z) { return stable_sigmoid(z); });
    Matrix out = x.cwiseProduct(s);
    Matrix deriv = s.array() + k * x.array() * s.array() * (1.0 - s.array());
    return make_op(std::move(out), {a}, [an = a.node(), d = std::move(deriv)](const Matrix& g) {
        accumulate(*an, g.cwiseProduct(d));
    });
}

Var gelu(const Var& a) {
    const Matrix& x = a.value();
    Matrix cdf = x.unaryExpr([](double v) { return 0.5 * std::erfc(-v / std::sqrt(2.0)); });
    Matrix out = x.cwiseProduct(cdf);
    Matrix pdf = x.unaryExpr([](double v) { return std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi); });
    Matrix deriv = cdf.array() + x.array() * pdf.array();
    return make_op(std::move(out), {a}, [an = a.node(), d = std::move(deriv)](const Matrix& g) {
        accumulate(*an, g.cwiseProduct(d));
    });
}

// --- reductions / normalisation ------------------------------------------

Var sum(const Var& a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return make_op(std::move(out), {a}, [an = a.node()](const Matrix& g) {
        accumulate(*an, Matrix::Constant(an->value.rows(), an->value.cols(), g(0, 0)));
    });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a.value().size());
    if (n == 0) throw ShapeError("mean of empty matrix");
    Matrix out(1, 1);
    out(0, 0) = a.value().sum() / n;
    return make_op(std::move(out), {a}, [an = a.node(), n](const Matrix& g) {
        accumulate(*an, Matrix::Constant(an->value.rows(), an->value.cols(), g(0, 0) / n));
    });
}

Var mean_rows(const Var& a) {
    if (a.rows() == 0) throw ShapeError("mean_rows of empty matrix");
    Matrix out = a.value().colwise().mean();
    return make_op(std::move(out), {a}, [an = a.node()](const Matrix& g) {
        const double inv = 1.0 / static_cast<double>(an->value.rows());
        Matrix full = g.replicate(an->value.rows(), 1) * inv;
        accumulate(*an, full);
    });
}

Var layer_norm(const Var& x, const RowVector& gamma, const RowVector& beta, double eps) {
    const Index n = x.cols();
    if (gamma.cols() != n || beta.cols() != n) {
        throw ShapeError("layer_norm: width " + std::to_string(n) + " vs gamma " +
                         std::to_string(gamma.cols()));
    }
    const Matrix& v = x.value();
    Matrix xhat(v.rows(), n);
    Eigen::VectorXd inv_std(v.rows());
    for (Index r = 0; r < v.rows(); ++r) {
        const double mu = v.row(r).mean();
        const double var = (v.row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (v.row(r).array() - mu) * inv_std(r);
    }
    Matrix out = xhat.array().rowwise() * gamma.array();
    out.rowwise() += beta;
    return make_op(std::move(out), {x},
                   [xn = x.node(), xhat = std::move(xhat), inv_std = std::move(inv_std),
                    gp = &gamma](const Matrix& g) {
                       Matrix dxhat = g.array().rowwise() * gp->array();
                       Matrix dx(dxhat.rows(), dxhat.cols());
                       for (Index r = 0; r < dxhat.rows(); ++r) {
                           const double m1 = dxhat.row(r).mean();
                           const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                           dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                       }
                       accumulate(*xn, dx);
                   });
}

Var softmax_rows(const Var& a) {
    const Matrix& v = a.value();
    Matrix out(v.rows(), v.cols());
    for (Index r = 0; r < v.rows(); ++r) {
        const double m = v.row(r).maxCoeff();
        auto e = (v.row(r).array() - m).exp();
        out.row(r) = e / e.sum();
    }
    Matrix y = out;
    return make_op(std::move(out), {a}, [an = a.node(), y = std::move(y)](const Matrix& g) {
        Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
        Matrix dx = y.array() * (g.array().colwise() - dots.array());
        accumulate(*an, dx);
    });
}

// --- structure ------------------------------------------------------------

Var slice_rows(const Var& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) {
        throw ShapeError("slice_rows out of range");
    }
    Matrix out = a.value().middleRows(start, count);
    return make_op(std::move(out), {a}, [an = a.node(), start, count](const Matrix& g) {
        Matrix full = Matrix::Zero(an->value.rows(), an->value.cols());
        full.middleRows(start, count) = g;
        accumulate(*an, full);
    });
}

Var slice_cols(const Var& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) {
        throw ShapeError("slice_cols out of range");
    }
    Matrix out = a.value().middleCols(start, count);
    return make_op(std::move(out), {a}, [an = a.node(), start, count](const Matrix& g) {
        Matrix full = Matrix::Zero(an->value.rows(), an->value.cols());
        full.middleCols(start, count) = g;
        accumulate(*an, full);
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    const Index cols = parts.front().cols();
    Index rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    std::vector<std::pair<std::shared_ptr<Node>, Index>> offsets;
    Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        offsets.emplace_back(p.node(), at);
        at += p.rows();
    }
    return make_op(std::move(out), parts, [offsets = std::move(offsets)](const Matrix& g) {
        for (const auto& [n, off] : offsets) {
            if (n->requires_grad) accumulate(*n, g.middleRows(off, n->value.rows()));
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const Index rows = parts.front().rows();
    Index cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::vector<std::pair<std::shared_ptr<Node>, Index>> offsets;
    Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        offsets.emplace_back(p.node(), at);
        at += p.cols();
    }
    return make_op(std::move(out), parts, [offsets = std::move(offsets)](const Matrix& g) {
        for (const auto& [n, off] : offsets) {
            if (n->requires_grad) accumulate(*n, g.middleCols(off, n->value.cols()));
        }
    });
}

Var reshape(const Var& a, Index rows, Index cols) {
    if (rows * cols != a.value().size()) {
        throw ShapeError("reshape: " + shape_str(a.value()) + " to " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
    Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
    return make_op(std::move(out), {a}, [an = a.node()](const Matrix& g) {
        accumulate(*an, Eigen::Map<const Matrix>(g.data(), an->value.rows(), an->value.cols()));
    });
}

// --- losses ---------------------------------------------------------------

Var bce_with_logits(const Var& logits, const Matrix& target, double clamp) {
    if (logits.rows() != target.rows() || logits.cols() != target.cols()) {
        throw ShapeError("bce: logits " + shape_str(logits.value()) + " vs target " + shape_str(target));
    }
    const Matrix& z = logits.value();
    const double n = static_cast<double>(z.size());
    double total = 0.0;
    Matrix dz(z.rows(), z.cols());
    for (Index i = 0; i < z.size(); ++i) {
        const double raw = z.data()[i];
        const double zc = std::clamp(raw, -clamp, clamp);
        const double y = target.data()[i];
        total += softplus(zc) - y * zc;
        const bool inside = raw >= -clamp && raw <= clamp;
        dz.data()[i] = inside ? (stable_sigmoid(zc) - y) / n : 0.0;
    }
    Matrix out(1, 1);
    out(0, 0) = total / n;
    return make_op(std::move(out), {logits}, [ln = logits.node(), dz = std::move(dz)](const Matrix& g) {
        accumulate(*ln, dz * g(0, 0));
    });
}

// --- images ---------------------------------------------------------------

Var patchify(const ImageVar& image, int patch) {
    const Index h = image[0].rows();
    const Index w = image[0].cols();
    for (const auto& c : image) {
        if (c.rows() != h || c.cols() != w) throw ShapeError("patchify: channel shapes differ");
    }
    if (patch <= 0 || h % patch != 0 || w % patch != 0) {
        throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by patch size " + std::to_string(patch));
    }
    const Index gh = h / patch;
    const Index gw = w / patch;
    const Index pp = static_cast<Index>(patch) * patch;
    Matrix out(gh * gw, 3 * pp);
    for (int c = 0; c < 3; ++c) {
        const Matrix& ch = image[c].value();
        for (Index py = 0; py < gh; ++py) {
            for (Index px = 0; px < gw; ++px) {
                const Index row = py * gw + px;
                for (Index ky = 0; ky < patch; ++ky) {
                    out.row(row).segment(c * pp + ky * patch, patch) =
                        ch.row(py * patch + ky).segment(px * patch, patch);
                }
            }
        }
    }
    std::array<std::shared_ptr<Node>, 3> nodes{image[0].node(), image[1].node(), image[2].node()};
    return make_op(std::move(out), std::span<const Var>(image.data(), 3),
                   [nodes, patch, gh, gw, pp](const Matrix& g) {
                       for (int c = 0; c < 3; ++c) {
                           if (!nodes[c]->requires_grad) continue;
                           Matrix dch(gh * patch, gw * patch);
                           for (Index py = 0; py < gh; ++py) {
                               for (Index px = 0; px < gw; ++px) {
                                   const Index row = py * gw + px;
                                   for (Index ky = 0; ky < patch; ++ky) {
                                       dch.row(py * patch + ky).segment(px * patch, patch) =
                                           g.row(row).segment(c * pp + ky * patch, patch);
                                   }
                               }
                           }
                           accumulate(*nodes[c], dch);
                       }
                   });
}

} // namespace clipada::ag
