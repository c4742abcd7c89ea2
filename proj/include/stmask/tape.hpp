#pragma once

#include <functional>
#include <memory>
#include <vector>

namespace stmask::ad {

using Var = int;

/// Reverse-mode tape over row-major double matrices. Ops compute values
/// eagerly and push a backward closure; backward() replays them in reverse.
/// With grad disabled the tape only stores values (inference mode).
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_(grad_enabled) {}

    bool grad_enabled() const { return grad_; }
    std::size_t size() const { return nodes_.size(); }

    int rows(Var v) const { return nodes_[static_cast<std::size_t>(v)].rows; }
    int cols(Var v) const { return nodes_[static_cast<std::size_t>(v)].cols; }
    const std::vector<double>& val(Var v) const { return nodes_[static_cast<std::size_t>(v)].val; }
    std::vector<double>& val(Var v) { return nodes_[static_cast<std::size_t>(v)].val; }
    const std::vector<double>& grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].grad; }
    double scalar(Var v) const { return nodes_[static_cast<std::size_t>(v)].val[0]; }

    // ----- inputs -----
    Var constant(int rows, int cols, std::vector<double> data);
    Var constant_scalar(double v) { return constant(1, 1, {v}); }
    /// Leaf with gradient tracking; caller reads grad(v) after backward().
    Var leaf(int rows, int cols, const double* data);

    // ----- elementwise -----
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var tanh_(Var a);
    Var sigmoid(Var a);
    Var softplus(Var a);
    Var exp_(Var a);
    Var log_(Var a);
    Var sqrt_(Var a);
    Var max_const(Var a, double c);
    Var relu(Var a) { return max_const(a, 0.0); }
    Var reciprocal(Var a);                     // entries must be nonzero

    // ----- scalar broadcast (s is 1x1) -----
    Var mul_scalar(Var a, Var s);
    Var div_by_scalar(Var a, Var s);
    Var mul_rows(Var a, Var s);                // s is rows(a) x 1, row-wise scale

    // ----- reductions -----
    Var sum(Var a);
    Var mean(Var a);

    // ----- linear algebra -----
    Var matmul(Var a, Var b, bool ta = false, bool tb = false);
    Var add_rowvec(Var a, Var v);              // v is 1 x cols(a)
    Var softmax_rows(Var a);
    Var l2_normalize_rows(Var a);              // zero rows stay zero
    Var layernorm_rows(Var a, double eps);     // no affine

    // ----- shape -----
    /// out.flat[k] = a.flat[idx[k]]; backward scatter-adds (indices may repeat).
    Var gather(Var a, std::shared_ptr<const std::vector<int>> idx, int rows, int cols);
    Var slice_cols(Var a, int c0, int c1);
    Var concat_cols(const std::vector<Var>& parts);   // equal row counts
    Var stack_rows(const std::vector<Var>& rows);     // all 1 x n
    Var transpose(Var a);
    Var reshape(Var a, int rows, int cols);

    // ----- fused blocks -----
    /// Block-diagonal multi-head attention over stacked users.
    /// q: (B*Lq) x D, k and v: (B*Lk) x D, heads divides D.
    Var attention(Var q, Var k, Var v, int batch, int heads, int lq, int lk);
    /// y[u*L+i,:] = x[u*L+i,:] * (1 + scale[u,:]) + shift[u,:]
    Var affine_blocks(Var x, Var scale, Var shift, int block_rows);
    /// y[u*L+i,:] = x[u*L+i,:] + rows[u,:]
    Var add_block_rowvec(Var x, Var rows, int block_rows);

    /// Seeds d(loss)=1 and runs all backward closures. loss must be 1x1.
    void backward(Var loss);

private:
    struct Node {
        int rows, cols;
        std::vector<double> val;
        std::vector<double> grad;
        std::function<void()> back;
    };

    Var push(int rows, int cols);
    std::vector<double>& g(Var v) { return nodes_[static_cast<std::size_t>(v)].grad; }

    std::vector<Node> nodes_;
    bool grad_;
};

} // namespace stmask::ad
