#include "stmask/tape.hpp"

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>

namespace stmask::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using MapCM = Eigen::Map<const RowMat>;
using StrideM = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using StrideCM = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

Var Tape::push(int rows, int cols) {
    require(rows > 0 && cols > 0, "node dims must be positive");
    Node n;
    n.rows = rows;
    n.cols = cols;
    n.val.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    if (grad_) n.grad.assign(n.val.size(), 0.0);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

Var Tape::constant(int rows, int cols, std::vector<double> data) {
    require(data.size() == static_cast<std::size_t>(rows) * cols, "constant size mismatch");
    Var v = push(rows, cols);
    nodes_[static_cast<std::size_t>(v)].val = std::move(data);
    return v;
}

Var Tape::leaf(int rows, int cols, const double* data) {
    Var v = push(rows, cols);
    std::copy(data, data + static_cast<std::size_t>(rows) * cols,
              nodes_[static_cast<std::size_t>(v)].val.begin());
    return v;
}

// ----- elementwise -----

Var Tape::add(Var a, Var b) {
    require(rows(a) == rows(b) && cols(a) == cols(b), "add shape mismatch");
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& xa = val(a);
    const auto& xb = val(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xa[i] + xb[i];
    if (grad_) nodes_.back().back = [this, a, b, out] {
        const auto& go = g(out);
        auto& ga = g(a);
        auto& gb = g(b);
        for (std::size_t i = 0; i < go.size(); ++i) { ga[i] += go[i]; gb[i] += go[i]; }
    };
    return out;
}

Var Tape::sub(Var a, Var b) {
    require(rows(a) == rows(b) && cols(a) == cols(b), "sub shape mismatch");
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& xa = val(a);
    const auto& xb = val(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xa[i] - xb[i];
    if (grad_) nodes_.back().back = [this, a, b, out] {
        const auto& go = g(out);
        auto& ga = g(a);
        auto& gb = g(b);
        for (std::size_t i = 0; i < go.size(); ++i) { ga[i] += go[i]; gb[i] -= go[i]; }
    };
    return out;
}

Var Tape::mul(Var a, Var b) {
    require(rows(a) == rows(b) && cols(a) == cols(b), "mul shape mismatch");
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& xa = val(a);
    const auto& xb = val(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xa[i] * xb[i];
    if (grad_) nodes_.back().back = [this, a, b, out] {
        const auto& go = g(out);
        const auto& xa = val(a);
        const auto& xb = val(b);
        auto& ga = g(a);
        auto& gb = g(b);
        for (std::size_t i = 0; i < go.size(); ++i) {
            ga[i] += go[i] * xb[i];
            gb[i] += go[i] * xa[i];
        }
    };
    return out;
}

Var Tape::scale(Var a, double s) {
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * s;
    if (grad_) nodes_.back().back = [this, a, out, s] {
        const auto& go = g(out);
        auto& ga = g(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
    };
    return out;
}

Var Tape::add_scalar(Var a, double s) {
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + s;
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        auto& ga = g(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    };
    return out;
}

Var Tape::tanh_(Var a) {
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(x[i]);
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        const auto& y = val(out);
        auto& ga = g(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (1.0 - y[i] * y[i]);
    };
    return out;
}

Var Tape::sigmoid(Var a) {
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = stable_sigmoid(x[i]);
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        const auto& y = val(out);
        auto& ga = g(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i] * (1.0 - y[i]);
    };
    return out;
}

Var Tape::softplus(Var a) {
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = std::max(x[i], 0.0) + std::log1p(std::exp(-std::abs(x[i])));
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        const auto& x = val(a);
        auto& ga = g(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * stable_sigmoid(x[i]);
    };
    return out;
}

Var Tape::exp_(Var a) {
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::exp(x[i]);
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        const auto& y = val(out);
        auto& ga = g(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i];
    };
    return out;
}

Var Tape::log_(Var a) {
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::log(x[i]);
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        const auto& x = val(a);
        auto& ga = g(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / x[i];
    };
    return out;
}

Var Tape::sqrt_(Var a) {
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::sqrt(x[i]);
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        const auto& y = val(out);
        auto& ga = g(a);
        for (std::size_t i = 0; i < go.size(); ++i)
            if (y[i] > 0.0) ga[i] += go[i] * 0.5 / y[i];
    };
    return out;
}

Var Tape::reciprocal(Var a) {
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    for (std::size_t i = 0; i < y.size(); ++i) {
        require(x[i] != 0.0, "reciprocal of zero entry");
        y[i] = 1.0 / x[i];
    }
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        const auto& y = val(out);
        auto& ga = g(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] -= go[i] * y[i] * y[i];
    };
    return out;
}

Var Tape::max_const(Var a, double c) {
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::max(x[i], c);
    if (grad_) nodes_.back().back = [this, a, out, c] {
        const auto& go = g(out);
        const auto& x = val(a);
        auto& ga = g(a);
        for (std::size_t i = 0; i < go.size(); ++i)
            if (x[i] > c) ga[i] += go[i];
    };
    return out;
}

// ----- scalar broadcast -----

Var Tape::mul_rows(Var a, Var s) {
    require(rows(s) == rows(a) && cols(s) == 1, "mul_rows expects rows(a) x 1 scale");
    const int r = rows(a), c = cols(a);
    Var out = push(r, c);
    auto& y = val(out);
    const auto& x = val(a);
    const auto& sv = val(s);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) y[static_cast<std::size_t>(i) * c + j] = x[static_cast<std::size_t>(i) * c + j] * sv[i];
    if (grad_) nodes_.back().back = [this, a, s, out, r, c] {
        const auto& go = g(out);
        const auto& x = val(a);
        const auto& sv = val(s);
        auto& ga = g(a);
        auto& gs = g(s);
        for (int i = 0; i < r; ++i) {
            double acc = 0.0;
            for (int j = 0; j < c; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * c + j;
                ga[k] += go[k] * sv[i];
                acc += go[k] * x[k];
            }
            gs[i] += acc;
        }
    };
    return out;
}

Var Tape::mul_scalar(Var a, Var s) {
    require(rows(s) == 1 && cols(s) == 1, "mul_scalar expects 1x1 scalar");
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    const double sv = scalar(s);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * sv;
    if (grad_) nodes_.back().back = [this, a, s, out] {
        const auto& go = g(out);
        const auto& x = val(a);
        const double sv = scalar(s);
        auto& ga = g(a);
        auto& gs = g(s);
        double acc = 0.0;
        for (std::size_t i = 0; i < go.size(); ++i) {
            ga[i] += go[i] * sv;
            acc += go[i] * x[i];
        }
        gs[0] += acc;
    };
    return out;
}

Var Tape::div_by_scalar(Var a, Var s) {
    require(rows(s) == 1 && cols(s) == 1, "div_by_scalar expects 1x1 scalar");
    Var out = push(rows(a), cols(a));
    auto& y = val(out);
    const auto& x = val(a);
    const double sv = scalar(s);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] / sv;
    if (grad_) nodes_.back().back = [this, a, s, out] {
        const auto& go = g(out);
        const auto& y = val(out);
        const double sv = scalar(s);
        auto& ga = g(a);
        auto& gs = g(s);
        double acc = 0.0;
        for (std::size_t i = 0; i < go.size(); ++i) {
            ga[i] += go[i] / sv;
            acc += go[i] * y[i];
        }
        gs[0] -= acc / sv;
    };
    return out;
}

// ----- reductions -----

Var Tape::sum(Var a) {
    Var out = push(1, 1);
    const auto& x = val(a);
    double acc = 0.0;
    for (double v : x) acc += v;
    val(out)[0] = acc;
    if (grad_) nodes_.back().back = [this, a, out] {
        const double go = g(out)[0];
        auto& ga = g(a);
        for (double& v : ga) v += go;
    };
    return out;
}

Var Tape::mean(Var a) {
    Var out = push(1, 1);
    const auto& x = val(a);
    double acc = 0.0;
    for (double v : x) acc += v;
    const double inv = 1.0 / static_cast<double>(x.size());
    val(out)[0] = acc * inv;
    if (grad_) nodes_.back().back = [this, a, out, inv] {
        const double go = g(out)[0] * inv;
        auto& ga = g(a);
        for (double& v : ga) v += go;
    };
    return out;
}

// ----- linear algebra -----

Var Tape::matmul(Var a, Var b, bool ta, bool tb) {
    const int m = ta ? cols(a) : rows(a);
    const int ka = ta ? rows(a) : cols(a);
    const int kb = tb ? cols(b) : rows(b);
    const int n = tb ? rows(b) : cols(b);
    require(ka == kb, "matmul inner dim mismatch");
    Var out = push(m, n);
    {
        MapCM A(val(a).data(), rows(a), cols(a));
        MapCM B(val(b).data(), rows(b), cols(b));
        MapM C(val(out).data(), m, n);
        if (!ta && !tb) C.noalias() = A * B;
        else if (ta && !tb) C.noalias() = A.transpose() * B;
        else if (!ta && tb) C.noalias() = A * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
    if (grad_) nodes_.back().back = [this, a, b, out, ta, tb] {
        MapCM A(val(a).data(), rows(a), cols(a));
        MapCM B(val(b).data(), rows(b), cols(b));
        MapCM GO(g(out).data(), rows(out), cols(out));
        MapM GA(g(a).data(), rows(a), cols(a));
        MapM GB(g(b).data(), rows(b), cols(b));
        if (!ta) {
            if (!tb) GA.noalias() += GO * B.transpose();
            else GA.noalias() += GO * B;
        } else {
            if (!tb) GA.noalias() += B * GO.transpose();
            else GA.noalias() += B.transpose() * GO.transpose();
        }
        if (!tb) {
            if (!ta) GB.noalias() += A.transpose() * GO;
            else GB.noalias() += A * GO;
        } else {
            if (!ta) GB.noalias() += GO.transpose() * A;
            else GB.noalias() += GO.transpose() * A.transpose();
        }
    };
    return out;
}

Var Tape::add_rowvec(Var a, Var v) {
    require(rows(v) == 1 && cols(v) == cols(a), "add_rowvec shape mismatch");
    Var out = push(rows(a), cols(a));
    const auto& x = val(a);
    const auto& r = val(v);
    auto& y = val(out);
    const int n = cols(a);
    for (int i = 0; i < rows(a); ++i)
        for (int j = 0; j < n; ++j)
            y[static_cast<std::size_t>(i) * n + j] = x[static_cast<std::size_t>(i) * n + j] + r[static_cast<std::size_t>(j)];
    if (grad_) nodes_.back().back = [this, a, v, out] {
        const auto& go = g(out);
        auto& ga = g(a);
        auto& gv = g(v);
        const int n = cols(a);
        for (int i = 0; i < rows(a); ++i)
            for (int j = 0; j < n; ++j) {
                const double d = go[static_cast<std::size_t>(i) * n + j];
                ga[static_cast<std::size_t>(i) * n + j] += d;
                gv[static_cast<std::size_t>(j)] += d;
            }
    };
    return out;
}

Var Tape::softmax_rows(Var a) {
    Var out = push(rows(a), cols(a));
    const auto& x = val(a);
    auto& y = val(out);
    const int n = cols(a);
    for (int i = 0; i < rows(a); ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * n;
        double mx = x[base];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[base + j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            y[base + j] = std::exp(x[base + j] - mx);
            z += y[base + j];
        }
        for (int j = 0; j < n; ++j) y[base + j] /= z;
    }
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        const auto& y = val(out);
        auto& ga = g(a);
        const int n = cols(a);
        for (int i = 0; i < rows(a); ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += go[base + j] * y[base + j];
            for (int j = 0; j < n; ++j) ga[base + j] += y[base + j] * (go[base + j] - dot);
        }
    };
    return out;
}

Var Tape::l2_normalize_rows(Var a) {
    Var out = push(rows(a), cols(a));
    const auto& x = val(a);
    auto& y = val(out);
    const int n = cols(a);
    for (int i = 0; i < rows(a); ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * n;
        double nrm = 0.0;
        for (int j = 0; j < n; ++j) nrm += x[base + j] * x[base + j];
        nrm = std::sqrt(nrm);
        if (nrm > 0.0)
            for (int j = 0; j < n; ++j) y[base + j] = x[base + j] / nrm;
        // zero rows stay zero
    }
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        const auto& x = val(a);
        const auto& y = val(out);
        auto& ga = g(a);
        const int n = cols(a);
        for (int i = 0; i < rows(a); ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * n;
            double nrm = 0.0;
            for (int j = 0; j < n; ++j) nrm += x[base + j] * x[base + j];
            nrm = std::sqrt(nrm);
            if (nrm == 0.0) continue;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += go[base + j] * y[base + j];
            for (int j = 0; j < n; ++j)
                ga[base + j] += (go[base + j] - y[base + j] * dot) / nrm;
        }
    };
    return out;
}

Var Tape::layernorm_rows(Var a, double eps) {
    Var out = push(rows(a), cols(a));
    const auto& x = val(a);
    auto& y = val(out);
    const int n = cols(a);
    for (int i = 0; i < rows(a); ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * n;
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += x[base + j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = x[base + j] - mu;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j) y[base + j] = (x[base + j] - mu) * inv;
    }
    if (grad_) nodes_.back().back = [this, a, out, eps] {
        const auto& go = g(out);
        const auto& x = val(a);
        const auto& y = val(out);
        auto& ga = g(a);
        const int n = cols(a);
        for (int i = 0; i < rows(a); ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * n;
            double mu = 0.0;
            for (int j = 0; j < n; ++j) mu += x[base + j];
            mu /= n;
            double var = 0.0;
            for (int j = 0; j < n; ++j) {
                const double d = x[base + j] - mu;
                var += d * d;
            }
            var /= n;
            const double inv = 1.0 / std::sqrt(var + eps);
            double mg = 0.0, mgy = 0.0;
            for (int j = 0; j < n; ++j) {
                mg += go[base + j];
                mgy += go[base + j] * y[base + j];
            }
            mg /= n;
            mgy /= n;
            for (int j = 0; j < n; ++j)
                ga[base + j] += inv * (go[base + j] - mg - y[base + j] * mgy);
        }
    };
    return out;
}

// ----- shape -----

Var Tape::gather(Var a, std::shared_ptr<const std::vector<int>> idx, int r, int c) {
    require(idx != nullptr, "gather needs indices");
    require(idx->size() == static_cast<std::size_t>(r) * c, "gather index count mismatch");
    const auto src_size = val(a).size();
    for (int k : *idx)
        require(k >= 0 && static_cast<std::size_t>(k) < src_size, "gather index out of range");
    Var out = push(r, c);  // may reallocate node storage; take refs after
    auto& y = val(out);
    const auto& x = val(a);
    for (std::size_t k = 0; k < y.size(); ++k) y[k] = x[static_cast<std::size_t>((*idx)[k])];
    if (grad_) nodes_.back().back = [this, a, out, idx] {
        const auto& go = g(out);
        auto& ga = g(a);
        for (std::size_t k = 0; k < go.size(); ++k) ga[static_cast<std::size_t>((*idx)[k])] += go[k];
    };
    return out;
}

Var Tape::slice_cols(Var a, int c0, int c1) {
    require(0 <= c0 && c0 < c1 && c1 <= cols(a), "slice_cols bad range");
    const int n = cols(a), w = c1 - c0;
    Var out = push(rows(a), w);
    const auto& x = val(a);
    auto& y = val(out);
    for (int i = 0; i < rows(a); ++i)
        for (int j = 0; j < w; ++j)
            y[static_cast<std::size_t>(i) * w + j] = x[static_cast<std::size_t>(i) * n + c0 + j];
    if (grad_) nodes_.back().back = [this, a, out, c0, w] {
        const auto& go = g(out);
        auto& ga = g(a);
        const int n = cols(a);
        for (int i = 0; i < rows(a); ++i)
            for (int j = 0; j < w; ++j)
                ga[static_cast<std::size_t>(i) * n + c0 + j] += go[static_cast<std::size_t>(i) * w + j];
    };
    return out;
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols needs parts");
    const int r = rows(parts[0]);
    int total = 0;
    for (Var p : parts) {
        require(rows(p) == r, "concat_cols row count mismatch");
        total += cols(p);
    }
    Var out = push(r, total);
    auto& y = val(out);
    int off = 0;
    for (Var p : parts) {
        const auto& x = val(p);
        const int pc = cols(p);
        for (int i = 0; i < r; ++i)
            std::copy(x.begin() + static_cast<std::ptrdiff_t>(i) * pc,
                      x.begin() + static_cast<std::ptrdiff_t>(i + 1) * pc,
                      y.begin() + static_cast<std::ptrdiff_t>(i) * total + off);
        off += pc;
    }
    if (grad_) {
        std::vector<Var> ps = parts;
        nodes_.back().back = [this, ps, out, r, total] {
            const auto& go = g(out);
            int off = 0;
            for (Var p : ps) {
                auto& gp = g(p);
                const int pc = cols(p);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < pc; ++j)
                        gp[static_cast<std::size_t>(i) * pc + j] +=
                            go[static_cast<std::size_t>(i) * total + off + j];
                off += pc;
            }
        };
    }
    return out;
}

Var Tape::stack_rows(const std::vector<Var>& rws) {
    require(!rws.empty(), "stack_rows needs rows");
    const int n = cols(rws[0]);
    for (Var r : rws) require(rows(r) == 1 && cols(r) == n, "stack_rows shape mismatch");
    Var out = push(static_cast<int>(rws.size()), n);
    auto& y = val(out);
    for (std::size_t i = 0; i < rws.size(); ++i) {
        const auto& x = val(rws[i]);
        std::copy(x.begin(), x.end(), y.begin() + static_cast<std::ptrdiff_t>(i * x.size()));
    }
    if (grad_) {
        std::vector<Var> rs = rws;
        nodes_.back().back = [this, rs, out] {
            const auto& go = g(out);
            for (std::size_t i = 0; i < rs.size(); ++i) {
                auto& gr = g(rs[i]);
                for (std::size_t j = 0; j < gr.size(); ++j) gr[j] += go[i * gr.size() + j];
            }
        };
    }
    return out;
}

Var Tape::transpose(Var a) {
    const int m = rows(a), n = cols(a);
    Var out = push(n, m);
    const auto& x = val(a);
    auto& y = val(out);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            y[static_cast<std::size_t>(j) * m + i] = x[static_cast<std::size_t>(i) * n + j];
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        auto& ga = g(a);
        const int m = rows(a), n = cols(a);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                ga[static_cast<std::size_t>(i) * n + j] += go[static_cast<std::size_t>(j) * m + i];
    };
    return out;
}

Var Tape::reshape(Var a, int r, int c) {
    require(static_cast<std::size_t>(r) * c == val(a).size(), "reshape element count mismatch");
    Var out = push(r, c);
    val(out) = val(a);
    if (grad_) nodes_.back().back = [this, a, out] {
        const auto& go = g(out);
        auto& ga = g(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    };
    return out;
}

// ----- fused blocks -----

Var Tape::attention(Var q, Var k, Var v, int batch, int heads, int lq, int lk) {
    const int D = cols(q);
    require(cols(k) == D && cols(v) == D, "attention width mismatch");
    require(D % heads == 0, "heads must divide width");
    require(rows(q) == batch * lq && rows(k) == batch * lk && rows(v) == batch * lk,
            "attention row blocks mismatch");
    const int dh = D / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    Var out = push(batch * lq, D);
    auto probs = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(batch) * heads * lq * lk);

    for (int u = 0; u < batch; ++u) {
        for (int h = 0; h < heads; ++h) {
            StrideCM Q(val(q).data() + static_cast<std::size_t>(u) * lq * D + h * dh, lq, dh,
                       Eigen::OuterStride<>(D));
            StrideCM K(val(k).data() + static_cast<std::size_t>(u) * lk * D + h * dh, lk, dh,
                       Eigen::OuterStride<>(D));
            StrideCM V(val(v).data() + static_cast<std::size_t>(u) * lk * D + h * dh, lk, dh,
                       Eigen::OuterStride<>(D));
            RowMat S = sc * (Q * K.transpose());
            // row softmax into the saved prob buffer; scalar loops so rounding
            // never depends on buffer alignment
            double* pb = probs->data() + (static_cast<std::size_t>(u) * heads + h) * lq * lk;
            for (int i = 0; i < lq; ++i) {
                double mx = S(i, 0);
                for (int j = 1; j < lk; ++j) mx = std::max(mx, S(i, j));
                double sum = 0.0;
                for (int j = 0; j < lk; ++j) {
                    const double e = std::exp(S(i, j) - mx);
                    pb[static_cast<std::size_t>(i) * lk + j] = e;
                    sum += e;
                }
                for (int j = 0; j < lk; ++j) pb[static_cast<std::size_t>(i) * lk + j] /= sum;
            }
            MapCM P(pb, lq, lk);
            StrideM O(val(out).data() + static_cast<std::size_t>(u) * lq * D + h * dh, lq, dh,
                      Eigen::OuterStride<>(D));
            O.noalias() = P * V;
        }
    }
    if (grad_) nodes_.back().back = [this, q, k, v, out, probs, batch, heads, lq, lk, D, dh, sc] {
        for (int u = 0; u < batch; ++u) {
            for (int h = 0; h < heads; ++h) {
                StrideCM Q(val(q).data() + static_cast<std::size_t>(u) * lq * D + h * dh, lq, dh,
                           Eigen::OuterStride<>(D));
                StrideCM K(val(k).data() + static_cast<std::size_t>(u) * lk * D + h * dh, lk, dh,
                           Eigen::OuterStride<>(D));
                StrideCM V(val(v).data() + static_cast<std::size_t>(u) * lk * D + h * dh, lk, dh,
                           Eigen::OuterStride<>(D));
                MapCM P(probs->data() + (static_cast<std::size_t>(u) * heads + h) * lq * lk, lq, lk);
                StrideCM GO(g(out).data() + static_cast<std::size_t>(u) * lq * D + h * dh, lq, dh,
                            Eigen::OuterStride<>(D));
                StrideM GQ(g(q).data() + static_cast<std::size_t>(u) * lq * D + h * dh, lq, dh,
                           Eigen::OuterStride<>(D));
                StrideM GK(g(k).data() + static_cast<std::size_t>(u) * lk * D + h * dh, lk, dh,
                           Eigen::OuterStride<>(D));
                StrideM GV(g(v).data() + static_cast<std::size_t>(u) * lk * D + h * dh, lk, dh,
                           Eigen::OuterStride<>(D));
                RowMat GP = GO * V.transpose();               // lq x lk
                GV.noalias() += P.transpose() * GO;
                RowMat GS(lq, lk);
                for (int i = 0; i < lq; ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < lk; ++j) dot += GP(i, j) * P(i, j);
                    for (int j = 0; j < lk; ++j) GS(i, j) = P(i, j) * (GP(i, j) - dot);
                }
                GQ.noalias() += sc * (GS * K);
                GK.noalias() += sc * (GS.transpose() * Q);
            }
        }
    };
    return out;
}

Var Tape::affine_blocks(Var x, Var sc, Var sh, int block_rows) {
    const int n = cols(x);
    const int batch = rows(x) / block_rows;
    require(rows(x) == batch * block_rows, "affine_blocks rows not divisible");
    require(rows(sc) == batch && cols(sc) == n, "affine_blocks scale shape");
    require(rows(sh) == batch && cols(sh) == n, "affine_blocks shift shape");
    Var out = push(rows(x), n);
    const auto& xv = val(x);
    const auto& scv = val(sc);
    const auto& shv = val(sh);
    auto& y = val(out);
    for (int r = 0; r < rows(x); ++r) {
        const int u = r / block_rows;
        for (int j = 0; j < n; ++j)
            y[static_cast<std::size_t>(r) * n + j] =
                xv[static_cast<std::size_t>(r) * n + j] * (1.0 + scv[static_cast<std::size_t>(u) * n + j]) +
                shv[static_cast<std::size_t>(u) * n + j];
    }
    if (grad_) nodes_.back().back = [this, x, sc, sh, out, block_rows] {
        const int n = cols(x);
        const auto& go = g(out);
        const auto& xv = val(x);
        const auto& scv = val(sc);
        auto& gx = g(x);
        auto& gsc = g(sc);
        auto& gsh = g(sh);
        for (int r = 0; r < rows(x); ++r) {
            const int u = r / block_rows;
            for (int j = 0; j < n; ++j) {
                const double d = go[static_cast<std::size_t>(r) * n + j];
                gx[static_cast<std::size_t>(r) * n + j] += d * (1.0 + scv[static_cast<std::size_t>(u) * n + j]);
                gsc[static_cast<std::size_t>(u) * n + j] += d * xv[static_cast<std::size_t>(r) * n + j];
                gsh[static_cast<std::size_t>(u) * n + j] += d;
            }
        }
    };
    return out;
}

Var Tape::add_block_rowvec(Var x, Var rws, int block_rows) {
    const int n = cols(x);
    const int batch = rows(x) / block_rows;
    require(rows(x) == batch * block_rows, "add_block_rowvec rows not divisible");
    require(rows(rws) == batch && cols(rws) == n, "add_block_rowvec shape");
    Var out = push(rows(x), n);
    const auto& xv = val(x);
    const auto& rv = val(rws);
    auto& y = val(out);
    for (int r = 0; r < rows(x); ++r) {
        const int u = r / block_rows;
        for (int j = 0; j < n; ++j)
            y[static_cast<std::size_t>(r) * n + j] =
                xv[static_cast<std::size_t>(r) * n + j] + rv[static_cast<std::size_t>(u) * n + j];
    }
    if (grad_) nodes_.back().back = [this, x, rws, out, block_rows] {
        const int n = cols(x);
        const auto& go = g(out);
        auto& gx = g(x);
        auto& gr = g(rws);
        for (int r = 0; r < rows(x); ++r) {
            const int u = r / block_rows;
            for (int j = 0; j < n; ++j) {
                const double d = go[static_cast<std::size_t>(r) * n + j];
                gx[static_cast<std::size_t>(r) * n + j] += d;
                gr[static_cast<std::size_t>(u) * n + j] += d;
            }
        }
    };
    return out;
}

void Tape::backward(Var loss) {
    require(grad_, "backward on an inference tape");
    require(rows(loss) == 1 && cols(loss) == 1, "backward needs a scalar loss");
    g(loss)[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;)
        if (nodes_[i].back) nodes_[i].back();
}

} // namespace stmask::ad
