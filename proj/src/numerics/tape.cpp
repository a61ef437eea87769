#include "faultsim/numerics/tape.hpp"

#include "faultsim/numerics/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace faultsim::numerics {

namespace {

// `detail` is only evaluated on failure.
template <class Detail>
void require(bool ok, const char* op, Detail&& detail) {
    if (!ok) {
        throw ShapeError(std::string(op) + ": " + detail());
    }
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), op,
            [&] { return "shape mismatch " + shape_string(a) + " vs " + shape_string(b); });
}

void trap_non_finite(const char* op, const Matrix& m, const char* phase) {
    if (!m.allFinite()) {
        throw NumericError(std::string("non-finite value in ") + phase + " of '" + op + "'");
    }
}

} // namespace

Parameter::Parameter(std::string n, Matrix v)
    : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

std::size_t ParameterSet::add(std::string name, Matrix init) {
    params_.emplace_back(std::move(name), std::move(init));
    return params_.size() - 1;
}

Parameter& ParameterSet::at(std::string_view name) {
    for (auto& p : params_) {
        if (p.name == name) {
            return p;
        }
    }
    throw std::out_of_range("unknown parameter: " + std::string(name));
}

const Parameter& ParameterSet::at(std::string_view name) const {
    return const_cast<ParameterSet*>(this)->at(name);
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        n += static_cast<std::size_t>(p.value.size());
    }
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& p : params_) {
        p.zero_grad();
    }
}

std::uint64_t ParameterSet::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : params_) {
        mix(p.name.data(), p.name.size());
        const std::int64_t shape[2] = {p.value.rows(), p.value.cols()};
        mix(shape, sizeof(shape));
        mix(p.value.data(), sizeof(double) * static_cast<std::size_t>(p.value.size()));
    }
    return h;
}

const Matrix& Var::value() const {
    return tape_->value(*this);
}

double Var::scalar() const {
    const Matrix& v = value();
    if (v.rows() != 1 || v.cols() != 1) {
        throw ShapeError("Var::scalar on " + shape_string(v) + " value");
    }
    return v(0, 0);
}

Var Tape::constant(Matrix value) {
    trap_non_finite("constant", value, "forward");
    Node node;
    node.value = std::move(value);
    node.op = "constant";
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
    trap_non_finite(p.name.c_str(), p.value, "forward");
    Node node;
    node.value = p.value;
    node.op = "parameter";
    node.param = &p;
    node.needs_grad = true;
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, const char* op, std::span<const Var> parents, Backward backward) {
    trap_non_finite(op, value, "forward");
    bool needs = false;
    for (const Var& p : parents) {
        if (p.tape_ != this) {
            throw std::logic_error(std::string(op) + ": operand from another tape");
        }
        needs = needs || nodes_[p.id_].needs_grad;
    }
    Node node;
    node.value = std::move(value);
    node.op = op;
    node.needs_grad = needs;
    if (needs) {
        node.backward = std::move(backward);
    }
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(Var v, const Matrix& g) {
    Node& node = nodes_[v.id_];
    if (!node.needs_grad) {
        return;
    }
    if (node.grad.size() == 0) {
        node.grad = g;
    } else {
        node.grad += g;
    }
}

void Tape::accumulate_block(Var v, Index row, Index col, const Matrix& g) {
    Node& node = nodes_[v.id_];
    if (!node.needs_grad) {
        return;
    }
    if (node.grad.size() == 0) {
        node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
    }
    node.grad.block(row, col, g.rows(), g.cols()) += g;
}

void Tape::backward(Var loss) {
    if (loss.tape_ != this) {
        throw std::logic_error("backward: loss from another tape");
    }
    const Matrix& lv = nodes_[loss.id_].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_string(lv));
    }
    nodes_[loss.id_].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.needs_grad || node.grad.size() == 0) {
            continue;
        }
        trap_non_finite(node.op, node.grad, "backward");
        if (node.param != nullptr) {
            node.param->grad += node.grad;
        }
        if (node.backward) {
            node.backward(*this, node.grad, node.value);
        }
    }
}

Var matmul(Var a, Var b) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    require(av.cols() == bv.rows(), "matmul",
            [&] { return std::string(shape_string(av) + " * " + shape_string(bv)); });
    Matrix out = av * bv;
    return a.tape().record(std::move(out), "matmul", {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
        if (t.needs_grad(a)) {
            t.accumulate(a, g * t.value(b).transpose());
        }
        if (t.needs_grad(b)) {
            t.accumulate(b, t.value(a).transpose() * g);
        }
    });
}

Var add(Var a, Var b) {
    require_same_shape("add", a.value(), b.value());
    Matrix out = a.value() + b.value();
    return a.tape().record(std::move(out), "add", {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var sub(Var a, Var b) {
    require_same_shape("sub", a.value(), b.value());
    Matrix out = a.value() - b.value();
    return a.tape().record(std::move(out), "sub", {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, g);
        if (t.needs_grad(b)) {
            t.accumulate(b, -g);
        }
    });
}

Var mul(Var a, Var b) {
    require_same_shape("mul", a.value(), b.value());
    Matrix out = a.value().cwiseProduct(b.value());
    return a.tape().record(std::move(out), "mul", {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
        if (t.needs_grad(a)) {
            t.accumulate(a, g.cwiseProduct(t.value(b)));
        }
        if (t.needs_grad(b)) {
            t.accumulate(b, g.cwiseProduct(t.value(a)));
        }
    });
}

Var add_row(Var a, Var row) {
    const Matrix& av = a.value();
    const Matrix& rv = row.value();
    require(rv.rows() == 1 && rv.cols() == av.cols(), "add_row",
            [&] { return std::string(shape_string(av) + " + row " + shape_string(rv)); });
    Matrix out = av.rowwise() + rv.row(0);
    return a.tape().record(std::move(out), "add_row", {a, row}, [a, row](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, g);
        if (t.needs_grad(row)) {
            t.accumulate(row, g.colwise().sum());
        }
    });
}

Var mul_row(Var a, Var row) {
    const Matrix& av = a.value();
    const Matrix& rv = row.value();
    require(rv.rows() == 1 && rv.cols() == av.cols(), "mul_row",
            [&] { return std::string(shape_string(av) + " * row " + shape_string(rv)); });
    Matrix out = av.array().rowwise() * rv.row(0).array();
    return a.tape().record(std::move(out), "mul_row", {a, row}, [a, row](Tape& t, const Matrix& g, const Matrix&) {
        if (t.needs_grad(a)) {
            Matrix ga = g.array().rowwise() * t.value(row).row(0).array();
            t.accumulate(a, ga);
        }
        if (t.needs_grad(row)) {
            t.accumulate(row, g.cwiseProduct(t.value(a)).colwise().sum());
        }
    });
}

Var scale(Var a, double s) {
    Matrix out = a.value() * s;
    return a.tape().record(std::move(out), "scale", {a}, [a, s](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, g * s);
    });
}

Var add_scalar(Var a, double s) {
    Matrix out = a.value().array() + s;
    return a.tape().record(std::move(out), "add_scalar", {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, g);
    });
}

Var tanh(Var a) {
    Matrix out = a.value().array().tanh();
    return a.tape().record(std::move(out), "tanh", {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
        t.accumulate(a, g.array() * (1.0 - y.array().square()));
    });
}

Var sigmoid(Var a) {
    Matrix out = (1.0 + (-a.value().array()).exp()).inverse();
    return a.tape().record(std::move(out), "sigmoid", {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
        t.accumulate(a, g.array() * y.array() * (1.0 - y.array()));
    });
}

Var exp(Var a) {
    Matrix out = a.value().array().exp();
    return a.tape().record(std::move(out), "exp", {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
        t.accumulate(a, g.cwiseProduct(y));
    });
}

Var log(Var a) {
    if ((a.value().array() <= 0.0).any()) {
        throw NumericError("non-positive argument in forward of 'log'");
    }
    Matrix out = a.value().array().log();
    return a.tape().record(std::move(out), "log", {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, g.cwiseQuotient(t.value(a)));
    });
}

Var square(Var a) {
    Matrix out = a.value().array().square();
    return a.tape().record(std::move(out), "square", {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, 2.0 * g.cwiseProduct(t.value(a)));
    });
}

Var softmax_rows(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.rows(), av.cols());
    for (Index r = 0; r < av.rows(); ++r) {
        const double mx = av.row(r).maxCoeff();
        out.row(r) = (av.row(r).array() - mx).exp();
        out.row(r) /= out.row(r).sum();
    }
    return a.tape().record(std::move(out), "softmax_rows", {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
        Matrix gy = g.cwiseProduct(y);
        Vector dots = gy.rowwise().sum();
        Matrix ga = gy - (y.array().colwise() * dots.array()).matrix();
        t.accumulate(a, ga);
    });
}

Var reshape(Var a, Index rows, Index cols) {
    const Matrix& av = a.value();
    require(rows * cols == av.size(), "reshape",
            [&] { return shape_string(av) + " to " + std::to_string(rows) + "x" + std::to_string(cols); });
    Matrix out = Eigen::Map<const Matrix>(av.data(), rows, cols);
    const Index r0 = av.rows();
    const Index c0 = av.cols();
    return a.tape().record(std::move(out), "reshape", {a}, [a, r0, c0](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, Eigen::Map<const Matrix>(g.data(), r0, c0));
    });
}

Var concat_cols(Var a, Var b) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    require(av.rows() == bv.rows(), "concat_cols",
            [&] { return std::string(shape_string(av) + " | " + shape_string(bv)); });
    Matrix out(av.rows(), av.cols() + bv.cols());
    out << av, bv;
    const Index ca = av.cols();
    const Index cb = bv.cols();
    return a.tape().record(std::move(out), "concat_cols", {a, b}, [a, b, ca, cb](Tape& t, const Matrix& g, const Matrix&) {
        if (t.needs_grad(a)) {
            t.accumulate(a, g.leftCols(ca));
        }
        if (t.needs_grad(b)) {
            t.accumulate(b, g.rightCols(cb));
        }
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no operands");
    }
    const Index cols = parts.front().cols();
    Index rows = 0;
    for (const Var& p : parts) {
        require(p.cols() == cols, "concat_rows",
                [&] { return std::string("column mismatch " + shape_string(p.value())); });
        rows += p.rows();
    }
    Matrix out(rows, cols);
    Index r = 0;
    for (const Var& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    std::vector<Var> captured = parts;
    return parts.front().tape().record(
        std::move(out), "concat_rows", std::span<const Var>(parts),
        [captured](Tape& t, const Matrix& g, const Matrix&) {
            Index offset = 0;
            for (const Var& p : captured) {
                const Index n = t.value(p).rows();
                if (t.needs_grad(p)) {
                    t.accumulate(p, g.middleRows(offset, n));
                }
                offset += n;
            }
        });
}

Var slice_rows(Var a, Index start, Index count) {
    const Matrix& av = a.value();
    require(start >= 0 && count >= 0 && start + count <= av.rows(), "slice_rows",
            [&] {
                return "rows [" + std::to_string(start) + ", " + std::to_string(start + count) + ") of " +
                       shape_string(av);
            });
    Matrix out = av.middleRows(start, count);
    return a.tape().record(std::move(out), "slice_rows", {a}, [a, start](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate_block(a, start, 0, g);
    });
}

Var slice_cols(Var a, Index start, Index count) {
    const Matrix& av = a.value();
    require(start >= 0 && count >= 0 && start + count <= av.cols(), "slice_cols",
            [&] {
                return "cols [" + std::to_string(start) + ", " + std::to_string(start + count) + ") of " +
                       shape_string(av);
            });
    Matrix out = av.middleCols(start, count);
    return a.tape().record(std::move(out), "slice_cols", {a}, [a, start](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate_block(a, 0, start, g);
    });
}

Var sum(Var a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    const Index r0 = a.rows();
    const Index c0 = a.cols();
    return a.tape().record(std::move(out), "sum", {a}, [a, r0, c0](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, Matrix::Constant(r0, c0, g(0, 0)));
    });
}

Var mean(Var a) {
    const Index n = a.value().size();
    require(n > 0, "mean", [] { return std::string("empty operand"); });
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var segment_weighted_sum(Var weights, Var values) {
    const Matrix& w = weights.value();
    const Matrix& v = values.value();
    const Index batch = w.rows();
    const Index seg = w.cols();
    require(v.rows() == batch * seg, "segment_weighted_sum",
            [&] { return std::string("weights " + shape_string(w) + " vs values " + shape_string(v)); });
    Matrix out(batch, v.cols());
    for (Index b = 0; b < batch; ++b) {
        out.row(b) = w.row(b) * v.middleRows(b * seg, seg);
    }
    return weights.tape().record(
        std::move(out), "segment_weighted_sum", {weights, values},
        [weights, values, batch, seg](Tape& t, const Matrix& g, const Matrix&) {
            const Matrix& wv = t.value(weights);
            const Matrix& vv = t.value(values);
            if (t.needs_grad(weights)) {
                Matrix gw(batch, seg);
                for (Index b = 0; b < batch; ++b) {
                    gw.row(b) = (vv.middleRows(b * seg, seg) * g.row(b).transpose()).transpose();
                }
                t.accumulate(weights, gw);
            }
            if (t.needs_grad(values)) {
                Matrix gv(vv.rows(), vv.cols());
                for (Index b = 0; b < batch; ++b) {
                    gv.middleRows(b * seg, seg) = wv.row(b).transpose() * g.row(b);
                }
                t.accumulate(values, gv);
            }
        });
}

Var bernoulli_nll_logits(Var logits, const Matrix& targets) {
    const Matrix& l = logits.value();
    require_same_shape("bernoulli_nll_logits", l, targets);
    require(l.size() > 0, "bernoulli_nll_logits", [] { return std::string("empty operand"); });
    // softplus(l) - t*l, evaluated without overflow.
    const auto softplus = l.array().max(0.0) + (-l.array().abs()).exp().log1p();
    Matrix out(1, 1);
    out(0, 0) = (softplus - targets.array() * l.array()).mean();
    Matrix tg = targets;
    const double n = static_cast<double>(l.size());
    return logits.tape().record(std::move(out), "bernoulli_nll_logits", {logits},
                                [logits, tg, n](Tape& t, const Matrix& g, const Matrix&) {
                                    const Matrix& lv = t.value(logits);
                                    Matrix p = (1.0 + (-lv.array()).exp()).inverse();
                                    t.accumulate(logits, (p - tg) * (g(0, 0) / n));
                                });
}

} // namespace faultsim::numerics
