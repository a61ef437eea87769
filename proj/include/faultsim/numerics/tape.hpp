#pragma once

#include "faultsim/numerics/matrix.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace faultsim::numerics {

/// A trainable matrix together with its accumulated gradient.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter(std::string n, Matrix v);
    void zero_grad() { grad.setZero(); }
};

/// Ordered parameter collection. Models refer to entries by index, so the set
/// must not grow after the model is built.
class ParameterSet {
public:
    std::size_t add(std::string name, Matrix init);

    Parameter& operator[](std::size_t i) { return params_[i]; }
    const Parameter& operator[](std::size_t i) const { return params_[i]; }
    Parameter& at(std::string_view name);
    const Parameter& at(std::string_view name) const;

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad();
    /// FNV-1a over names, shapes and raw value bytes.
    std::uint64_t checksum() const;

private:
    std::vector<Parameter> params_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    double scalar() const;
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode differentiation tape over dense matrices. Each forward op
/// records its value and a closure that pushes the output gradient to its
/// parents. Non-finite values abort with NumericError naming the op.
class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix& grad_out, const Matrix& out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value);
    Var param(Parameter& p);

    Var record(Matrix value, const char* op, std::span<const Var> parents, Backward backward);
    Var record(Matrix value, const char* op, std::initializer_list<Var> parents, Backward backward) {
        return record(std::move(value), op, std::span<const Var>(parents.begin(), parents.size()),
                      std::move(backward));
    }

    /// Seeds d(loss)/d(loss) = 1 and accumulates into every bound Parameter.
    void backward(Var loss);

    const Matrix& value(Var v) const { return nodes_[v.id_].value; }
    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(Var v) const { return nodes_[v.id_].needs_grad; }
    /// Adds g into the gradient of v; no-op for nodes that do not need one.
    void accumulate(Var v, const Matrix& g);
    /// Adds g into the block of v's gradient starting at (row, col).
    void accumulate_block(Var v, Index row, Index col, const Matrix& g);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        Backward backward;
        const char* op = "";
        Parameter* param = nullptr;
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;
};

// Differentiable primitives. Shapes are checked and mismatches throw ShapeError.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_row(Var a, Var row);        // a + broadcast of a 1 x c row
Var mul_row(Var a, Var row);        // a * broadcast of a 1 x c row
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var softmax_rows(Var a);
Var reshape(Var a, Index rows, Index cols);  // row-major element order kept
Var concat_cols(Var a, Var b);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, Index start, Index count);
Var slice_cols(Var a, Index start, Index count);
Var sum(Var a);
Var mean(Var a);
/// weights: B x S, values: (B*S) x d  ->  B x d with out[b] = sum_s w[b,s] * values[b*S+s].
Var segment_weighted_sum(Var weights, Var values);
/// Mean Bernoulli negative log-likelihood of binary targets given logits.
Var bernoulli_nll_logits(Var logits, const Matrix& targets);

} // namespace faultsim::numerics
