#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "csmp/clifford.hpp"
#include "csmp/tensor.hpp"

namespace csmp {

// Handle into a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense tensors. Nodes are appended in evaluation
// order; backward() walks them in reverse, so gradient accumulation order is
// fixed and runs are reproducible. One tape per training step.
class Tape {
  public:
    Var leaf(Tensor value, bool requires_grad);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor& value(Var v) const { return nodes_[check(v)].value; }
    const Tensor& grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // Elementwise; shapes must match exactly (no broadcasting).
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var divide(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var sqrt_op(Var a);
    Var sigmoid(Var a);

    // Reductions / reshaping.
    Var sum(Var a);                                  // -> [1]
    Var reshape(Var a, std::vector<std::size_t> shape);
    Var concat_axis1(const std::vector<Var>& xs);    // equal dims except axis 1
    Var concat_rows(const std::vector<Var>& xs);     // stack along axis 0
    Var gather_rows(Var a, std::vector<std::size_t> idx);
    // out[s] = sum of rows r with seg[r] == s; seg values < out_rows.
    Var segment_sum_rows(Var a, std::vector<std::size_t> seg, std::size_t out_rows);
    Var scale_rows(Var a, std::vector<double> s);    // row r scaled by s[r]

    // Dense affine map: x [N,F], w [O,F], b [O] -> [N,O].
    Var linear(Var x, Var w, Var b);

    // Multivector kernels; trailing axis is the 2^d blade axis.
    // y[n,o,m] = sum_i w[o,i,grade(m)] * x[n,i,m]
    Var mv_linear(Var x, Var w, const Metric& metric);
    Var add_grade0_bias(Var x, Var b);               // b [C] added at mask 0
    // z[n,c,a^b] += cayley(a,b) * w[c,grade(a^b),grade(a),grade(b)] * x[n,c,a] * y[n,c,b]
    Var geometric_product(Var x, Var y, Var w, const CayleyTable& table);
    // Unweighted channel-wise product, same contraction without w.
    Var geometric_product_full(Var x, Var y, const CayleyTable& table);
    // out[n,c,k] = sum_{grade(m)=k} |blade factor| * x[n,c,m]^2
    Var grade_sumsq(Var x, const Metric& metric);
    Var slice_mask0(Var x);                          // [N,C,B] -> [N,C]
    Var grade_scale(Var x, Var s, const Metric& metric);         // s [N,C,G]
    Var grade_scale_shared(Var x, Var s, const Metric& metric);  // s [N,G]

    // Scalar loss only; accumulates grads for every reachable requires_grad node.
    void backward(Var loss);

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_live = false;
        std::function<void(Tape&)> back;
    };

    int check(Var v) const;
    Tensor& grad_slot(int id);
    Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> back);

    std::vector<Node> nodes_;

    friend struct TapeAccess;
};

}  // namespace csmp
