// SPDX-License-Identifier: Apache-2.0

#include "dyntok/autograd.hpp"

#include <cassert>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

#include "dyntok/errors.hpp"

namespace dyntok {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    if (a < b) std::swap(a, b);
    return a + std::log1p(std::exp(b - a));
}

inline void check(bool ok, const char* what) {
    if (!ok) throw std::logic_error(std::string("graph op shape error: ") + what);
}

}  // namespace

Value Graph::make(Tensor val, bool needs_grad) {
    auto n = std::make_unique<Node>();
    n->val = std::move(val);
    n->needs_grad = needs_grad;
    if (needs_grad) n->grad = Tensor::zeros(n->val.rows, n->val.cols);
    nodes_.push_back(std::move(n));
    return nodes_.back().get();
}

void Graph::backward(Value loss) {
    check(loss->val.rows == 1 && loss->val.cols == 1, "backward() needs scalar loss");
    if (!loss->needs_grad) return;
    loss->grad.v[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = it->get();
        if (n->needs_grad && n->back) n->back();
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Value Graph::add(Value a, Value b) {
    check(a->val.same_shape(b->val), "add");
    Value out = make(a->val, a->needs_grad || b->needs_grad);
    for (int64_t i = 0; i < out->val.numel(); ++i) out->val.v[i] += b->val.v[i];
    if (out->needs_grad)
        out->back = [out, a, b] {
            if (a->needs_grad)
                for (int64_t i = 0; i < out->grad.numel(); ++i) a->grad.v[i] += out->grad.v[i];
            if (b->needs_grad)
                for (int64_t i = 0; i < out->grad.numel(); ++i) b->grad.v[i] += out->grad.v[i];
        };
    return out;
}

Value Graph::sub(Value a, Value b) {
    check(a->val.same_shape(b->val), "sub");
    Value out = make(a->val, a->needs_grad || b->needs_grad);
    for (int64_t i = 0; i < out->val.numel(); ++i) out->val.v[i] -= b->val.v[i];
    if (out->needs_grad)
        out->back = [out, a, b] {
            if (a->needs_grad)
                for (int64_t i = 0; i < out->grad.numel(); ++i) a->grad.v[i] += out->grad.v[i];
            if (b->needs_grad)
                for (int64_t i = 0; i < out->grad.numel(); ++i) b->grad.v[i] -= out->grad.v[i];
        };
    return out;
}

Value Graph::mul(Value a, Value b) {
    check(a->val.same_shape(b->val), "mul");
    Value out = make(Tensor::zeros(a->val.rows, a->val.cols), a->needs_grad || b->needs_grad);
    for (int64_t i = 0; i < out->val.numel(); ++i) out->val.v[i] = a->val.v[i] * b->val.v[i];
    if (out->needs_grad)
        out->back = [out, a, b] {
            if (a->needs_grad)
                for (int64_t i = 0; i < out->grad.numel(); ++i)
                    a->grad.v[i] += out->grad.v[i] * b->val.v[i];
            if (b->needs_grad)
                for (int64_t i = 0; i < out->grad.numel(); ++i)
                    b->grad.v[i] += out->grad.v[i] * a->val.v[i];
        };
    return out;
}

Value Graph::scale(Value a, double k) {
    Value out = make(a->val, a->needs_grad);
    for (auto& x : out->val.v) x *= k;
    if (out->needs_grad)
        out->back = [out, a, k] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) a->grad.v[i] += k * out->grad.v[i];
        };
    return out;
}

Value Graph::mul_scalar_node(Value x, Value s) {
    check(s->val.rows == 1 && s->val.cols == 1, "mul_scalar_node scalar");
    const double sv = s->val.v[0];
    Value out = make(x->val, x->needs_grad || s->needs_grad);
    for (auto& e : out->val.v) e *= sv;
    if (out->needs_grad)
        out->back = [out, x, s, sv] {
            if (x->needs_grad)
                for (int64_t i = 0; i < out->grad.numel(); ++i)
                    x->grad.v[i] += sv * out->grad.v[i];
            if (s->needs_grad) {
                double acc = 0.0;
                for (int64_t i = 0; i < out->grad.numel(); ++i)
                    acc += out->grad.v[i] * x->val.v[i];
                s->grad.v[0] += acc;
            }
        };
    return out;
}

Value Graph::add_scalar(Value a, double k) {
    Value out = make(a->val, a->needs_grad);
    for (auto& x : out->val.v) x += k;
    if (out->needs_grad)
        out->back = [out, a] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) a->grad.v[i] += out->grad.v[i];
        };
    return out;
}

Value Graph::relu(Value a) {
    Value out = make(a->val, a->needs_grad);
    for (auto& x : out->val.v) x = x > 0.0 ? x : 0.0;
    if (out->needs_grad)
        out->back = [out, a] {
            for (int64_t i = 0; i < out->grad.numel(); ++i)
                if (a->val.v[i] > 0.0) a->grad.v[i] += out->grad.v[i];
        };
    return out;
}

Value Graph::sigmoid(Value a) {
    Value out = make(a->val, a->needs_grad);
    for (auto& x : out->val.v) x = 1.0 / (1.0 + std::exp(-x));
    if (out->needs_grad)
        out->back = [out, a] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) {
                const double y = out->val.v[i];
                a->grad.v[i] += out->grad.v[i] * y * (1.0 - y);
            }
        };
    return out;
}

Value Graph::tanh_(Value a) {
    Value out = make(a->val, a->needs_grad);
    for (auto& x : out->val.v) x = std::tanh(x);
    if (out->needs_grad)
        out->back = [out, a] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) {
                const double y = out->val.v[i];
                a->grad.v[i] += out->grad.v[i] * (1.0 - y * y);
            }
        };
    return out;
}

Value Graph::exp_(Value a) {
    Value out = make(a->val, a->needs_grad);
    for (auto& x : out->val.v) x = std::exp(x);
    if (out->needs_grad)
        out->back = [out, a] {
            for (int64_t i = 0; i < out->grad.numel(); ++i)
                a->grad.v[i] += out->grad.v[i] * out->val.v[i];
        };
    return out;
}

Value Graph::log_(Value a) {
    Value out = make(a->val, a->needs_grad);
    for (auto& x : out->val.v) x = std::log(x);
    if (out->needs_grad)
        out->back = [out, a] {
            for (int64_t i = 0; i < out->grad.numel(); ++i)
                a->grad.v[i] += out->grad.v[i] / a->val.v[i];
        };
    return out;
}

Value Graph::sin_(Value a) {
    Value out = make(a->val, a->needs_grad);
    for (auto& x : out->val.v) x = std::sin(x);
    if (out->needs_grad)
        out->back = [out, a] {
            for (int64_t i = 0; i < out->grad.numel(); ++i)
                a->grad.v[i] += out->grad.v[i] * std::cos(a->val.v[i]);
        };
    return out;
}

Value Graph::abs_(Value a) {
    Value out = make(a->val, a->needs_grad);
    for (auto& x : out->val.v) x = std::fabs(x);
    if (out->needs_grad)
        out->back = [out, a] {
            // subgradient 0 at the kink
            for (int64_t i = 0; i < out->grad.numel(); ++i) {
                const double x = a->val.v[i];
                if (x > 0.0)
                    a->grad.v[i] += out->grad.v[i];
                else if (x < 0.0)
                    a->grad.v[i] -= out->grad.v[i];
            }
        };
    return out;
}

Value Graph::recip(Value a) {
    Value out = make(a->val, a->needs_grad);
    for (auto& x : out->val.v) x = 1.0 / x;
    if (out->needs_grad)
        out->back = [out, a] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) {
                const double y = out->val.v[i];
                a->grad.v[i] -= out->grad.v[i] * y * y;
            }
        };
    return out;
}

// ---------------------------------------------------------------------------
// shape / selection
// ---------------------------------------------------------------------------

Value Graph::transpose(Value a) {
    Tensor t(a->val.cols, a->val.rows);
    for (int r = 0; r < a->val.rows; ++r)
        for (int c = 0; c < a->val.cols; ++c) t.at(c, r) = a->val.at(r, c);
    Value out = make(std::move(t), a->needs_grad);
    if (out->needs_grad)
        out->back = [out, a] {
            for (int r = 0; r < a->val.rows; ++r)
                for (int c = 0; c < a->val.cols; ++c) a->grad.at(r, c) += out->grad.at(c, r);
        };
    return out;
}

Value Graph::slice_rows(Value a, int r0, int r1) {
    check(0 <= r0 && r0 < r1 && r1 <= a->val.rows, "slice_rows");
    Tensor t(r1 - r0, a->val.cols);
    for (int r = r0; r < r1; ++r)
        for (int c = 0; c < a->val.cols; ++c) t.at(r - r0, c) = a->val.at(r, c);
    Value out = make(std::move(t), a->needs_grad);
    if (out->needs_grad)
        out->back = [out, a, r0] {
            for (int r = 0; r < out->grad.rows; ++r)
                for (int c = 0; c < out->grad.cols; ++c)
                    a->grad.at(r0 + r, c) += out->grad.at(r, c);
        };
    return out;
}

Value Graph::slice_cols(Value a, int c0, int c1) {
    check(0 <= c0 && c0 < c1 && c1 <= a->val.cols, "slice_cols");
    Tensor t(a->val.rows, c1 - c0);
    for (int r = 0; r < a->val.rows; ++r)
        for (int c = c0; c < c1; ++c) t.at(r, c - c0) = a->val.at(r, c);
    Value out = make(std::move(t), a->needs_grad);
    if (out->needs_grad)
        out->back = [out, a, c0] {
            for (int r = 0; r < out->grad.rows; ++r)
                for (int c = 0; c < out->grad.cols; ++c)
                    a->grad.at(r, c0 + c) += out->grad.at(r, c);
        };
    return out;
}

Value Graph::concat_cols(const std::vector<Value>& xs) {
    check(!xs.empty(), "concat_cols empty");
    int cols = 0;
    bool needs = false;
    for (Value x : xs) {
        check(x->val.rows == xs[0]->val.rows, "concat_cols rows");
        cols += x->val.cols;
        needs = needs || x->needs_grad;
    }
    Tensor t(xs[0]->val.rows, cols);
    int off = 0;
    for (Value x : xs) {
        for (int r = 0; r < x->val.rows; ++r)
            for (int c = 0; c < x->val.cols; ++c) t.at(r, off + c) = x->val.at(r, c);
        off += x->val.cols;
    }
    Value out = make(std::move(t), needs);
    if (out->needs_grad) {
        std::vector<Value> parents = xs;
        out->back = [out, parents] {
            int off2 = 0;
            for (Value x : parents) {
                if (x->needs_grad)
                    for (int r = 0; r < x->val.rows; ++r)
                        for (int c = 0; c < x->val.cols; ++c)
                            x->grad.at(r, c) += out->grad.at(r, off2 + c);
                off2 += x->val.cols;
            }
        };
    }
    return out;
}

Value Graph::concat_rows(const std::vector<Value>& xs) {
    check(!xs.empty(), "concat_rows empty");
    int rows = 0;
    bool needs = false;
    for (Value x : xs) {
        check(x->val.cols == xs[0]->val.cols, "concat_rows cols");
        rows += x->val.rows;
        needs = needs || x->needs_grad;
    }
    Tensor t(rows, xs[0]->val.cols);
    int off = 0;
    for (Value x : xs) {
        for (int r = 0; r < x->val.rows; ++r)
            for (int c = 0; c < x->val.cols; ++c) t.at(off + r, c) = x->val.at(r, c);
        off += x->val.rows;
    }
    Value out = make(std::move(t), needs);
    if (out->needs_grad) {
        std::vector<Value> parents = xs;
        out->back = [out, parents] {
            int off2 = 0;
            for (Value x : parents) {
                if (x->needs_grad)
                    for (int r = 0; r < x->val.rows; ++r)
                        for (int c = 0; c < x->val.cols; ++c)
                            x->grad.at(r, c) += out->grad.at(off2 + r, c);
                off2 += x->val.rows;
            }
        };
    }
    return out;
}

Value Graph::gather_rows(Value a, std::vector<int> idx) {
    Tensor t(static_cast<int>(idx.size()), a->val.cols);
    for (size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] >= 0 && idx[i] < a->val.rows, "gather_rows index");
        for (int c = 0; c < a->val.cols; ++c) t.at(static_cast<int>(i), c) = a->val.at(idx[i], c);
    }
    Value out = make(std::move(t), a->needs_grad);
    if (out->needs_grad)
        out->back = [out, a, idx = std::move(idx)] {
            for (size_t i = 0; i < idx.size(); ++i)
                for (int c = 0; c < a->val.cols; ++c)
                    a->grad.at(idx[i], c) += out->grad.at(static_cast<int>(i), c);
        };
    return out;
}

// ---------------------------------------------------------------------------
// broadcast
// ---------------------------------------------------------------------------

Value Graph::add_rowvec(Value x, Value v) {
    check(v->val.rows == 1 && v->val.cols == x->val.cols, "add_rowvec");
    Value out = make(x->val, x->needs_grad || v->needs_grad);
    for (int r = 0; r < out->val.rows; ++r)
        for (int c = 0; c < out->val.cols; ++c) out->val.at(r, c) += v->val.at(0, c);
    if (out->needs_grad)
        out->back = [out, x, v] {
            if (x->needs_grad)
                for (int64_t i = 0; i < out->grad.numel(); ++i) x->grad.v[i] += out->grad.v[i];
            if (v->needs_grad)
                for (int r = 0; r < out->grad.rows; ++r)
                    for (int c = 0; c < out->grad.cols; ++c)
                        v->grad.at(0, c) += out->grad.at(r, c);
        };
    return out;
}

Value Graph::mul_rowvec(Value x, Value v) {
    check(v->val.rows == 1 && v->val.cols == x->val.cols, "mul_rowvec");
    Value out = make(Tensor::zeros(x->val.rows, x->val.cols), x->needs_grad || v->needs_grad);
    for (int r = 0; r < out->val.rows; ++r)
        for (int c = 0; c < out->val.cols; ++c) out->val.at(r, c) = x->val.at(r, c) * v->val.at(0, c);
    if (out->needs_grad)
        out->back = [out, x, v] {
            if (x->needs_grad)
                for (int r = 0; r < out->grad.rows; ++r)
                    for (int c = 0; c < out->grad.cols; ++c)
                        x->grad.at(r, c) += out->grad.at(r, c) * v->val.at(0, c);
            if (v->needs_grad)
                for (int r = 0; r < out->grad.rows; ++r)
                    for (int c = 0; c < out->grad.cols; ++c)
                        v->grad.at(0, c) += out->grad.at(r, c) * x->val.at(r, c);
        };
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Value Graph::sum_all(Value a) {
    double s = 0.0;
    for (double x : a->val.v) s += x;
    Value out = make(Tensor::scalar(s), a->needs_grad);
    if (out->needs_grad)
        out->back = [out, a] {
            const double g = out->grad.v[0];
            for (auto& x : a->grad.v) x += g;
        };
    return out;
}

Value Graph::mean_all(Value a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->val.numel()));
}

Value Graph::mean_over_rows(Value a) {
    Tensor t(1, a->val.cols);
    for (int r = 0; r < a->val.rows; ++r)
        for (int c = 0; c < a->val.cols; ++c) t.at(0, c) += a->val.at(r, c);
    const double inv = 1.0 / a->val.rows;
    for (auto& x : t.v) x *= inv;
    Value out = make(std::move(t), a->needs_grad);
    if (out->needs_grad)
        out->back = [out, a, inv] {
            for (int r = 0; r < a->val.rows; ++r)
                for (int c = 0; c < a->val.cols; ++c) a->grad.at(r, c) += inv * out->grad.at(0, c);
        };
    return out;
}

Value Graph::cumsum_rows(Value a) {
    check(a->val.cols == 1, "cumsum_rows expects column vector");
    Tensor t(a->val.rows, 1);
    double s = 0.0;
    for (int r = 0; r < a->val.rows; ++r) {
        s += a->val.at(r, 0);
        t.at(r, 0) = s;
    }
    Value out = make(std::move(t), a->needs_grad);
    if (out->needs_grad)
        out->back = [out, a] {
            double acc = 0.0;
            for (int r = a->val.rows - 1; r >= 0; --r) {
                acc += out->grad.at(r, 0);
                a->grad.at(r, 0) += acc;
            }
        };
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Value Graph::matmul(Value a, Value b) {
    check(a->val.cols == b->val.rows, "matmul inner dim");
    const int m = a->val.rows, k = a->val.cols, n = b->val.cols;
    Tensor t(m, n);
    for (int i = 0; i < m; ++i) {
        const double* arow = a->val.row(i);
        double* trow = t.row(i);
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b->val.row(p);
            for (int j = 0; j < n; ++j) trow[j] += av * brow[j];
        }
    }
    Value out = make(std::move(t), a->needs_grad || b->needs_grad);
    if (out->needs_grad)
        out->back = [out, a, b, m, k, n] {
            if (a->needs_grad) {
                // gA = gC * B^T
                for (int i = 0; i < m; ++i) {
                    const double* grow = out->grad.row(i);
                    double* garow = a->grad.row(i);
                    for (int p = 0; p < k; ++p) {
                        const double* brow = b->val.row(p);
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        garow[p] += s;
                    }
                }
            }
            if (b->needs_grad) {
                // gB = A^T * gC
                for (int i = 0; i < m; ++i) {
                    const double* arow = a->val.row(i);
                    const double* grow = out->grad.row(i);
                    for (int p = 0; p < k; ++p) {
                        const double av = arow[p];
                        if (av == 0.0) continue;
                        double* gbrow = b->grad.row(p);
                        for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        };
    return out;
}

// ---------------------------------------------------------------------------
// neural net
// ---------------------------------------------------------------------------

Value Graph::conv1d(Value x, Value w, Value b, int kernel, int stride, int pad) {
    const int T = x->val.rows, cin = x->val.cols, cout = b->val.cols;
    check(w->val.rows == kernel * cin && w->val.cols == cout, "conv1d weight shape");
    check(b->val.rows == 1, "conv1d bias shape");
    const int to = (T + 2 * pad - kernel) / stride + 1;
    check(to >= 1, "conv1d output empty");
    Tensor t(to, cout);
    for (int o = 0; o < to; ++o) {
        double* trow = t.row(o);
        for (int c = 0; c < cout; ++c) trow[c] = b->val.at(0, c);
        for (int k = 0; k < kernel; ++k) {
            const int ti = o * stride + k - pad;
            if (ti < 0 || ti >= T) continue;
            const double* xrow = x->val.row(ti);
            for (int ci = 0; ci < cin; ++ci) {
                const double xv = xrow[ci];
                if (xv == 0.0) continue;
                const double* wrow = w->val.row(k * cin + ci);
                for (int c = 0; c < cout; ++c) trow[c] += xv * wrow[c];
            }
        }
    }
    Value out = make(std::move(t), x->needs_grad || w->needs_grad || b->needs_grad);
    if (out->needs_grad)
        out->back = [out, x, w, b, kernel, stride, pad, T, cin, cout, to] {
            for (int o = 0; o < to; ++o) {
                const double* grow = out->grad.row(o);
                if (b->needs_grad)
                    for (int c = 0; c < cout; ++c) b->grad.at(0, c) += grow[c];
                for (int k = 0; k < kernel; ++k) {
                    const int ti = o * stride + k - pad;
                    if (ti < 0 || ti >= T) continue;
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* wrow = w->val.row(k * cin + ci);
                        const double xv = x->val.at(ti, ci);
                        if (x->needs_grad) {
                            double s = 0.0;
                            for (int c = 0; c < cout; ++c) s += grow[c] * wrow[c];
                            x->grad.at(ti, ci) += s;
                        }
                        if (w->needs_grad && xv != 0.0) {
                            double* gwrow = w->grad.row(k * cin + ci);
                            for (int c = 0; c < cout; ++c) gwrow[c] += xv * grow[c];
                        }
                    }
                }
            }
        };
    return out;
}

Value Graph::conv1d_transpose(Value x, Value w, Value b, int kernel, int stride, int pad) {
    const int T = x->val.rows, cin = x->val.cols, cout = b->val.cols;
    check(w->val.rows == kernel * cin && w->val.cols == cout, "conv1d_transpose weight shape");
    const int U = (T - 1) * stride + kernel - 2 * pad;
    check(U >= 1, "conv1d_transpose output empty");
    Tensor t(U, cout);
    for (int u = 0; u < U; ++u)
        for (int c = 0; c < cout; ++c) t.at(u, c) = b->val.at(0, c);
    for (int ti = 0; ti < T; ++ti) {
        const double* xrow = x->val.row(ti);
        for (int k = 0; k < kernel; ++k) {
            const int u = ti * stride + k - pad;
            if (u < 0 || u >= U) continue;
            double* trow = t.row(u);
            for (int ci = 0; ci < cin; ++ci) {
                const double xv = xrow[ci];
                if (xv == 0.0) continue;
                const double* wrow = w->val.row(k * cin + ci);
                for (int c = 0; c < cout; ++c) trow[c] += xv * wrow[c];
            }
        }
    }
    Value out = make(std::move(t), x->needs_grad || w->needs_grad || b->needs_grad);
    if (out->needs_grad)
        out->back = [out, x, w, b, kernel, stride, pad, T, cin, cout, U] {
            if (b->needs_grad)
                for (int u = 0; u < U; ++u)
                    for (int c = 0; c < cout; ++c) b->grad.at(0, c) += out->grad.at(u, c);
            for (int ti = 0; ti < T; ++ti) {
                for (int k = 0; k < kernel; ++k) {
                    const int u = ti * stride + k - pad;
                    if (u < 0 || u >= U) continue;
                    const double* grow = out->grad.row(u);
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* wrow = w->val.row(k * cin + ci);
                        const double xv = x->val.at(ti, ci);
                        if (x->needs_grad) {
                            double s = 0.0;
                            for (int c = 0; c < cout; ++c) s += grow[c] * wrow[c];
                            x->grad.at(ti, ci) += s;
                        }
                        if (w->needs_grad && xv != 0.0) {
                            double* gwrow = w->grad.row(k * cin + ci);
                            for (int c = 0; c < cout; ++c) gwrow[c] += xv * grow[c];
                        }
                    }
                }
            }
        };
    return out;
}

Value Graph::row_log_softmax(Value a) {
    Tensor t(a->val.rows, a->val.cols);
    for (int r = 0; r < a->val.rows; ++r) {
        const double* arow = a->val.row(r);
        double m = arow[0];
        for (int c = 1; c < a->val.cols; ++c) m = std::max(m, arow[c]);
        double s = 0.0;
        for (int c = 0; c < a->val.cols; ++c) s += std::exp(arow[c] - m);
        const double lse = m + std::log(s);
        for (int c = 0; c < a->val.cols; ++c) t.at(r, c) = arow[c] - lse;
    }
    Value out = make(std::move(t), a->needs_grad);
    if (out->needs_grad)
        out->back = [out, a] {
            for (int r = 0; r < a->val.rows; ++r) {
                double gsum = 0.0;
                for (int c = 0; c < a->val.cols; ++c) gsum += out->grad.at(r, c);
                for (int c = 0; c < a->val.cols; ++c)
                    a->grad.at(r, c) += out->grad.at(r, c) - std::exp(out->val.at(r, c)) * gsum;
            }
        };
    return out;
}

Value Graph::row_softmax_masked(Value a, Tensor mask) {
    check(mask.same_shape(a->val), "row_softmax_masked mask shape");
    Tensor t(a->val.rows, a->val.cols);
    for (int r = 0; r < a->val.rows; ++r) {
        double m = kNegInf;
        for (int c = 0; c < a->val.cols; ++c)
            if (mask.at(r, c) != 0.0) m = std::max(m, a->val.at(r, c));
        double s = 0.0;
        for (int c = 0; c < a->val.cols; ++c) {
            if (mask.at(r, c) != 0.0) {
                t.at(r, c) = std::exp(a->val.at(r, c) - m);
                s += t.at(r, c);
            }
        }
        if (s > 0.0)
            for (int c = 0; c < a->val.cols; ++c) t.at(r, c) /= s;
    }
    Value out = make(std::move(t), a->needs_grad);
    if (out->needs_grad)
        out->back = [out, a] {
            for (int r = 0; r < a->val.rows; ++r) {
                double dot = 0.0;
                for (int c = 0; c < a->val.cols; ++c)
                    dot += out->grad.at(r, c) * out->val.at(r, c);
                for (int c = 0; c < a->val.cols; ++c)
                    a->grad.at(r, c) += out->val.at(r, c) * (out->grad.at(r, c) - dot);
            }
        };
    return out;
}

Value Graph::layer_norm(Value x, Value gain, Value bias, double eps) {
    const int T = x->val.rows, C = x->val.cols;
    check(gain->val.rows == 1 && gain->val.cols == C, "layer_norm gain");
    check(bias->val.rows == 1 && bias->val.cols == C, "layer_norm bias");
    Tensor t(T, C);
    Tensor xhat(T, C);
    Tensor inv_sigma(T, 1);
    for (int r = 0; r < T; ++r) {
        double mu = 0.0;
        for (int c = 0; c < C; ++c) mu += x->val.at(r, c);
        mu /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) {
            const double d = x->val.at(r, c) - mu;
            var += d * d;
        }
        var /= C;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma.at(r, 0) = is;
        for (int c = 0; c < C; ++c) {
            xhat.at(r, c) = (x->val.at(r, c) - mu) * is;
            t.at(r, c) = xhat.at(r, c) * gain->val.at(0, c) + bias->val.at(0, c);
        }
    }
    Value out = make(std::move(t), x->needs_grad || gain->needs_grad || bias->needs_grad);
    if (out->needs_grad)
        out->back = [out, x, gain, bias, xhat = std::move(xhat),
                     inv_sigma = std::move(inv_sigma), T, C] {
            for (int r = 0; r < T; ++r) {
                double mean_gy = 0.0, mean_gy_xhat = 0.0;
                for (int c = 0; c < C; ++c) {
                    const double gy = out->grad.at(r, c) * gain->val.at(0, c);
                    mean_gy += gy;
                    mean_gy_xhat += gy * xhat.at(r, c);
                }
                mean_gy /= C;
                mean_gy_xhat /= C;
                for (int c = 0; c < C; ++c) {
                    const double gy = out->grad.at(r, c) * gain->val.at(0, c);
                    if (x->needs_grad)
                        x->grad.at(r, c) +=
                            inv_sigma.at(r, 0) * (gy - mean_gy - xhat.at(r, c) * mean_gy_xhat);
                    if (gain->needs_grad)
                        gain->grad.at(0, c) += out->grad.at(r, c) * xhat.at(r, c);
                    if (bias->needs_grad) bias->grad.at(0, c) += out->grad.at(r, c);
                }
            }
        };
    return out;
}

Value Graph::nll_from_log_probs(Value logp, std::vector<int> ids, int count) {
    check(count >= 1 && count <= logp->val.rows, "nll count");
    check(static_cast<int>(ids.size()) >= count, "nll ids");
    double s = 0.0;
    for (int i = 0; i < count; ++i) {
        check(ids[i] >= 0 && ids[i] < logp->val.cols, "nll id range");
        s -= logp->val.at(i, ids[i]);
    }
    Value out = make(Tensor::scalar(s / count), logp->needs_grad);
    if (out->needs_grad)
        out->back = [out, logp, ids = std::move(ids), count] {
            const double g = out->grad.v[0] / count;
            for (int i = 0; i < count; ++i) logp->grad.at(i, ids[i]) -= g;
        };
    return out;
}

// ---------------------------------------------------------------------------
// domain-specific
// ---------------------------------------------------------------------------

Value Graph::round_half_up_ste(Value a) {
    Value out = make(a->val, a->needs_grad);
    for (auto& x : out->val.v) x = std::floor(x + 0.5);
    if (out->needs_grad)
        out->back = [out, a] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) a->grad.v[i] += out->grad.v[i];
        };
    return out;
}

Value Graph::fire_allocation(Value alpha_hat, double theta, int n_tokens) {
    check(alpha_hat->val.cols == 1, "fire_allocation expects column weights");
    check(theta > 0.0 && n_tokens >= 1, "fire_allocation config");
    const int T = alpha_hat->val.rows;
    // prefix sums of frame mass
    std::vector<double> s(T + 1, 0.0);
    for (int t = 0; t < T; ++t) s[t + 1] = s[t] + alpha_hat->val.at(t, 0);
    Tensor W(T, n_tokens);
    for (int t = 0; t < T; ++t) {
        const double lo = s[t], hi = s[t + 1];
        if (hi <= lo) continue;
        int jlo = std::max(0, static_cast<int>(std::floor(lo / theta)));
        int jhi = std::min(n_tokens - 1, static_cast<int>(std::floor(hi / theta)));
        for (int j = jlo; j <= jhi; ++j) {
            const double seg =
                std::min(hi, (j + 1) * theta) - std::max(lo, j * theta);
            if (seg > 0.0) W.at(t, j) = seg;
        }
    }
    Value out = make(std::move(W), alpha_hat->needs_grad);
    if (out->needs_grad)
        out->back = [out, alpha_hat, theta, n_tokens, s = std::move(s), T] {
            // d overlap / d hi = 1 while the frame's upper edge is strictly
            // inside the token band; d overlap / d lo = -1 symmetrically.
            std::vector<double> gs(T + 1, 0.0);
            for (int t = 0; t < T; ++t) {
                const double lo = s[t], hi = s[t + 1];
                if (hi <= lo) continue;
                int jlo = std::max(0, static_cast<int>(std::floor(lo / theta)));
                int jhi = std::min(n_tokens - 1, static_cast<int>(std::floor(hi / theta)));
                for (int j = jlo; j <= jhi; ++j) {
                    const double bl = j * theta, bu = (j + 1) * theta;
                    const double seg = std::min(hi, bu) - std::max(lo, bl);
                    if (seg <= 0.0) continue;
                    const double g = out->grad.at(t, j);
                    if (g == 0.0) continue;
                    if (hi < bu) gs[t + 1] += g;
                    if (lo > bl) gs[t] -= g;
                }
            }
            // alpha_hat[t] feeds every prefix s[tau] with tau > t
            double acc = 0.0;
            for (int t = T - 1; t >= 0; --t) {
                acc += gs[t + 1];
                alpha_hat->grad.at(t, 0) += acc;
            }
        };
    return out;
}

Value Graph::ctc_loss(Value log_probs, std::vector<int> target, int blank) {
    const int L = log_probs->val.rows;
    const int K = log_probs->val.cols;
    check(blank >= 0 && blank < K, "ctc blank range");
    if (target.empty()) throw input_error("ctc_loss: empty target");
    for (int t : target) {
        if (t < 0 || t >= K || t == blank) throw input_error("ctc_loss: bad target symbol");
    }
    int required = static_cast<int>(target.size());
    for (size_t i = 1; i < target.size(); ++i)
        if (target[i] == target[i - 1]) ++required;
    if (L < required)
        throw input_error("ctc_loss: infeasible target (needs " + std::to_string(required) +
                          " frames, got " + std::to_string(L) + ")");

    // extended sequence blank,y1,blank,y2,...,blank
    const int S = 2 * static_cast<int>(target.size()) + 1;
    auto lab = [&](int sidx) { return (sidx % 2 == 0) ? blank : target[sidx / 2]; };
    auto lp = [&](int t, int k) { return log_probs->val.at(t, k); };

    std::vector<double> alpha(static_cast<size_t>(L) * S, kNegInf);
    auto A = [&](int t, int sidx) -> double& { return alpha[static_cast<size_t>(t) * S + sidx]; };
    A(0, 0) = lp(0, blank);
    if (S > 1) A(0, 1) = lp(0, lab(1));
    for (int t = 1; t < L; ++t) {
        for (int sidx = 0; sidx < S; ++sidx) {
            double best = A(t - 1, sidx);
            if (sidx >= 1) best = log_add(best, A(t - 1, sidx - 1));
            if (sidx >= 2 && lab(sidx) != blank && lab(sidx) != lab(sidx - 2))
                best = log_add(best, A(t - 1, sidx - 2));
            A(t, sidx) = best == kNegInf ? kNegInf : best + lp(t, lab(sidx));
        }
    }
    double log_p = A(L - 1, S - 1);
    if (S > 1) log_p = log_add(log_p, A(L - 1, S - 2));
    if (log_p == kNegInf) throw input_error("ctc_loss: zero-probability target");

    Value out = make(Tensor::scalar(-log_p), log_probs->needs_grad);
    if (out->needs_grad)
        out->back = [out, log_probs, target = std::move(target), blank, alpha = std::move(alpha),
                     log_p, L, K, S] {
            auto lab2 = [&](int sidx) { return (sidx % 2 == 0) ? blank : target[sidx / 2]; };
            auto A2 = [&](int t, int sidx) {
                return alpha[static_cast<size_t>(t) * S + sidx];
            };
            // beta excludes the emission at t, so alpha*beta is the full path mass
            std::vector<double> beta(static_cast<size_t>(L) * S, kNegInf);
            auto B = [&](int t, int sidx) -> double& {
                return beta[static_cast<size_t>(t) * S + sidx];
            };
            B(L - 1, S - 1) = 0.0;
            if (S > 1) B(L - 1, S - 2) = 0.0;
            for (int t = L - 2; t >= 0; --t) {
                for (int sidx = 0; sidx < S; ++sidx) {
                    double acc = B(t + 1, sidx) == kNegInf
                                     ? kNegInf
                                     : B(t + 1, sidx) + log_probs->val.at(t + 1, lab2(sidx));
                    if (sidx + 1 < S && B(t + 1, sidx + 1) != kNegInf)
                        acc = log_add(acc,
                                      B(t + 1, sidx + 1) + log_probs->val.at(t + 1, lab2(sidx + 1)));
                    if (sidx + 2 < S && lab2(sidx + 2) != blank && lab2(sidx + 2) != lab2(sidx) &&
                        B(t + 1, sidx + 2) != kNegInf)
                        acc = log_add(acc,
                                      B(t + 1, sidx + 2) + log_probs->val.at(t + 1, lab2(sidx + 2)));
                    B(t, sidx) = acc;
                }
            }
            const double g = out->grad.v[0];
            for (int t = 0; t < L; ++t) {
                std::vector<double> post(K, 0.0);
                for (int sidx = 0; sidx < S; ++sidx) {
                    const double a = A2(t, sidx), b = B(t, sidx);
                    if (a == kNegInf || b == kNegInf) continue;
                    post[lab2(sidx)] += std::exp(a + b - log_p);
                }
                for (int k = 0; k < K; ++k)
                    if (post[k] != 0.0) log_probs->grad.at(t, k) -= g * post[k];
            }
        };
    return out;
}

}  // namespace dyntok
