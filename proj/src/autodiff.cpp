#include "refold/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <unordered_set>

namespace refold::ad {

namespace {

long g_order = 0;

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMajorMatrix>;
using MapRMConst = Eigen::Map<const RowMajorMatrix>;

void check_finite(const Tensor& t, const char* op) {
    if (!t.data.allFinite())
        throw std::runtime_error(std::string("autodiff: non-finite value produced by ") + op);
}

Var make(Tensor value, const char* op, std::vector<Var> parents,
         std::function<void(Node&)> bw) {
    check_finite(value, op);
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward_fn = std::move(bw);
    n->order = ++g_order;
    return n;
}

void accumulate(const Var& p, const Eigen::VectorXd& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad += g;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a->value.shape != b->value.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

int last_dim(const Var& x) { return x->value.shape.back(); }

double stable_softplus(double z) {
    return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

int shape_size(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) n *= d;
    return n;
}

Tensor Tensor::zeros(const std::vector<int>& shape) {
    return Tensor(shape, Eigen::VectorXd::Zero(shape_size(shape)));
}

Tensor Tensor::from(const std::vector<int>& shape, const std::vector<double>& values) {
    if (static_cast<int>(values.size()) != shape_size(shape))
        throw std::invalid_argument("Tensor::from: size mismatch");
    Eigen::VectorXd d(values.size());
    for (size_t i = 0; i < values.size(); ++i) d(static_cast<Eigen::Index>(i)) = values[i];
    return Tensor(shape, std::move(d));
}

Var constant(Tensor t) {
    check_finite(t, "constant");
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->order = ++g_order;
    return n;
}

Var parameter(Tensor t) {
    check_finite(t, "parameter");
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    n->order = ++g_order;
    return n;
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out(a->value.shape, a->value.data + b->value.data);
    return make(std::move(out), "add", {a, b}, [](Node& n) {
        accumulate(n.parents[0], n.grad);
        accumulate(n.parents[1], n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a->value.shape, a->value.data - b->value.data);
    return make(std::move(out), "sub", {a, b}, [](Node& n) {
        accumulate(n.parents[0], n.grad);
        accumulate(n.parents[1], -n.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a->value.shape, (a->value.data.array() * b->value.data.array()).matrix());
    return make(std::move(out), "mul", {a, b}, [](Node& n) {
        accumulate(n.parents[0], (n.grad.array() * n.parents[1]->value.data.array()).matrix());
        accumulate(n.parents[1], (n.grad.array() * n.parents[0]->value.data.array()).matrix());
    });
}

Var scale_const(const Var& x, double c) {
    Tensor out(x->value.shape, x->value.data * c);
    return make(std::move(out), "scale_const", {x},
                [c](Node& n) { accumulate(n.parents[0], n.grad * c); });
}

Var scale(const Var& x, const Var& s) {
    if (s->value.size() != 1) throw std::invalid_argument("scale: scalar expected");
    const double c = s->value.at(0);
    Tensor out(x->value.shape, x->value.data * c);
    return make(std::move(out), "scale", {x, s}, [c](Node& n) {
        accumulate(n.parents[0], n.grad * c);
        Eigen::VectorXd gs(1);
        gs(0) = n.grad.dot(n.parents[0]->value.data);
        accumulate(n.parents[1], gs);
    });
}

Var add_scalar_var(const Var& x, const Var& s) {
    if (s->value.size() != 1) throw std::invalid_argument("add_scalar_var: scalar expected");
    Tensor out(x->value.shape, x->value.data.array() + s->value.at(0));
    return make(std::move(out), "add_scalar_var", {x, s}, [](Node& n) {
        accumulate(n.parents[0], n.grad);
        Eigen::VectorXd gs(1);
        gs(0) = n.grad.sum();
        accumulate(n.parents[1], gs);
    });
}

Var tanh_op(const Var& x) {
    Tensor out(x->value.shape, x->value.data.array().tanh().matrix());
    Eigen::VectorXd y = out.data;
    return make(std::move(out), "tanh", {x}, [y](Node& n) {
        accumulate(n.parents[0], (n.grad.array() * (1.0 - y.array().square())).matrix());
    });
}

Var softplus(const Var& x) {
    Eigen::VectorXd y(x->value.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = stable_softplus(x->value.data(i));
    Tensor out(x->value.shape, std::move(y));
    return make(std::move(out), "softplus", {x}, [](Node& n) {
        Eigen::VectorXd g(n.grad.size());
        for (Eigen::Index i = 0; i < g.size(); ++i)
            g(i) = n.grad(i) * sigmoid(n.parents[0]->value.data(i));
        accumulate(n.parents[0], g);
    });
}

Var square(const Var& x) {
    Tensor out(x->value.shape, x->value.data.array().square().matrix());
    return make(std::move(out), "square", {x}, [](Node& n) {
        accumulate(n.parents[0], (2.0 * n.grad.array() * n.parents[0]->value.data.array()).matrix());
    });
}

Var sum(const Var& x) {
    Tensor out({1}, Eigen::VectorXd::Constant(1, x->value.data.sum()));
    return make(std::move(out), "sum", {x}, [](Node& n) {
        accumulate(n.parents[0],
                   Eigen::VectorXd::Constant(n.parents[0]->value.size(), n.grad(0)));
    });
}

Var mean(const Var& x) {
    const double inv = 1.0 / static_cast<double>(x->value.size());
    Tensor out({1}, Eigen::VectorXd::Constant(1, x->value.data.sum() * inv));
    return make(std::move(out), "mean", {x}, [inv](Node& n) {
        accumulate(n.parents[0],
                   Eigen::VectorXd::Constant(n.parents[0]->value.size(), n.grad(0) * inv));
    });
}

Var reshape(const Var& x, const std::vector<int>& shape) {
    if (shape_size(shape) != x->value.size())
        throw std::invalid_argument("reshape: element count mismatch");
    Tensor out(shape, x->value.data);
    return make(std::move(out), "reshape", {x},
                [](Node& n) { accumulate(n.parents[0], n.grad); });
}

Var matmul(const Var& a, const Var& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes");
    const int m = a->value.dim(0), k = a->value.dim(1), n2 = b->value.dim(1);
    MapRMConst A(a->value.data.data(), m, k), B(b->value.data.data(), k, n2);
    Tensor out = Tensor::zeros({m, n2});
    MapRM O(out.data.data(), m, n2);
    O = A * B;
    return make(std::move(out), "matmul", {a, b}, [m, k, n2](Node& n) {
        MapRMConst G(n.grad.data(), m, n2);
        MapRMConst A2(n.parents[0]->value.data.data(), m, k);
        MapRMConst B2(n.parents[1]->value.data.data(), k, n2);
        if (n.parents[0]->requires_grad) {
            Eigen::VectorXd ga(m * k);
            MapRM GA(ga.data(), m, k);
            GA = G * B2.transpose();
            accumulate(n.parents[0], ga);
        }
        if (n.parents[1]->requires_grad) {
            Eigen::VectorXd gb(k * n2);
            MapRM GB(gb.data(), k, n2);
            GB = A2.transpose() * G;
            accumulate(n.parents[1], gb);
        }
    });
}

Var bmm(const Var& a, const Var& b) {
    if (a->value.rank() != 3 || b->value.rank() != 3 || a->value.dim(0) != b->value.dim(0) ||
        a->value.dim(2) != b->value.dim(1))
        throw std::invalid_argument("bmm: incompatible shapes");
    const int batch = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2),
              n2 = b->value.dim(2);
    Tensor out = Tensor::zeros({batch, m, n2});
    for (int s = 0; s < batch; ++s) {
        MapRMConst A(a->value.data.data() + static_cast<long>(s) * m * k, m, k);
        MapRMConst B(b->value.data.data() + static_cast<long>(s) * k * n2, k, n2);
        MapRM O(out.data.data() + static_cast<long>(s) * m * n2, m, n2);
        O = A * B;
    }
    return make(std::move(out), "bmm", {a, b}, [batch, m, k, n2](Node& n) {
        Eigen::VectorXd ga = Eigen::VectorXd::Zero(static_cast<long>(batch) * m * k);
        Eigen::VectorXd gb = Eigen::VectorXd::Zero(static_cast<long>(batch) * k * n2);
        for (int s = 0; s < batch; ++s) {
            MapRMConst G(n.grad.data() + static_cast<long>(s) * m * n2, m, n2);
            MapRMConst A(n.parents[0]->value.data.data() + static_cast<long>(s) * m * k, m, k);
            MapRMConst B(n.parents[1]->value.data.data() + static_cast<long>(s) * k * n2, k, n2);
            MapRM GA(ga.data() + static_cast<long>(s) * m * k, m, k);
            MapRM GB(gb.data() + static_cast<long>(s) * k * n2, k, n2);
            GA = G * B.transpose();
            GB = A.transpose() * G;
        }
        accumulate(n.parents[0], ga);
        accumulate(n.parents[1], gb);
    });
}

Var transpose01(const Var& x) {
    if (x->value.rank() != 3) throw std::invalid_argument("transpose01: rank-3 tensor expected");
    const int A = x->value.dim(0), B = x->value.dim(1), C = x->value.dim(2);
    Tensor out = Tensor::zeros({B, A, C});
    for (int i = 0; i < A; ++i)
        for (int j = 0; j < B; ++j)
            out.data.segment(static_cast<long>(j) * A * C + static_cast<long>(i) * C, C) =
                x->value.data.segment(static_cast<long>(i) * B * C + static_cast<long>(j) * C, C);
    return make(std::move(out), "transpose01", {x}, [A, B, C](Node& n) {
        Eigen::VectorXd g(static_cast<long>(A) * B * C);
        for (int i = 0; i < A; ++i)
            for (int j = 0; j < B; ++j)
                g.segment(static_cast<long>(i) * B * C + static_cast<long>(j) * C, C) =
                    n.grad.segment(static_cast<long>(j) * A * C + static_cast<long>(i) * C, C);
        accumulate(n.parents[0], g);
    });
}

Var transpose12(const Var& x) {
    if (x->value.rank() != 3) throw std::invalid_argument("transpose12: rank-3 tensor expected");
    const int A = x->value.dim(0), B = x->value.dim(1), C = x->value.dim(2);
    Tensor out = Tensor::zeros({A, C, B});
    for (int a = 0; a < A; ++a)
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                out.data((static_cast<long>(a) * C + c) * B + b) =
                    x->value.data((static_cast<long>(a) * B + b) * C + c);
    return make(std::move(out), "transpose12", {x}, [A, B, C](Node& n) {
        Eigen::VectorXd g(static_cast<long>(A) * B * C);
        for (int a = 0; a < A; ++a)
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c)
                    g((static_cast<long>(a) * B + b) * C + c) =
                        n.grad((static_cast<long>(a) * C + c) * B + b);
        accumulate(n.parents[0], g);
    });
}

Var transpose(const Var& x) {
    if (x->value.rank() != 2) throw std::invalid_argument("transpose: rank-2 tensor expected");
    const int m = x->value.dim(0), n2 = x->value.dim(1);
    Tensor out = Tensor::zeros({n2, m});
    MapRMConst X(x->value.data.data(), m, n2);
    MapRM O(out.data.data(), n2, m);
    O = X.transpose();
    return make(std::move(out), "transpose", {x}, [m, n2](Node& n) {
        MapRMConst G(n.grad.data(), n2, m);
        Eigen::VectorXd g(static_cast<long>(m) * n2);
        MapRM GX(g.data(), m, n2);
        GX = G.transpose();
        accumulate(n.parents[0], g);
    });
}

Var select_axis0(const Var& x, int index) {
    if (x->value.rank() < 2) throw std::invalid_argument("select_axis0: rank >= 2 expected");
    if (index < 0 || index >= x->value.dim(0))
        throw std::invalid_argument("select_axis0: index out of range");
    std::vector<int> shape(x->value.shape.begin() + 1, x->value.shape.end());
    const int stride = shape_size(shape);
    Tensor out(shape, x->value.data.segment(static_cast<long>(index) * stride, stride));
    return make(std::move(out), "select_axis0", {x}, [index, stride](Node& n) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(n.parents[0]->value.size());
        g.segment(static_cast<long>(index) * stride, stride) = n.grad;
        accumulate(n.parents[0], g);
    });
}

Var concat_lastdim(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_lastdim: no inputs");
    std::vector<int> lead(xs[0]->value.shape.begin(), xs[0]->value.shape.end() - 1);
    int total_last = 0;
    std::vector<int> lasts;
    for (const auto& x : xs) {
        std::vector<int> l(x->value.shape.begin(), x->value.shape.end() - 1);
        if (l != lead) throw std::invalid_argument("concat_lastdim: leading dims differ");
        lasts.push_back(x->value.shape.back());
        total_last += x->value.shape.back();
    }
    const int rows = shape_size(lead);
    std::vector<int> shape = lead;
    shape.push_back(total_last);
    Tensor out = Tensor::zeros(shape);
    for (int r = 0; r < rows; ++r) {
        int off = 0;
        for (size_t i = 0; i < xs.size(); ++i) {
            const int d = lasts[i];
            out.data.segment(static_cast<long>(r) * total_last + off, d) =
                xs[i]->value.data.segment(static_cast<long>(r) * d, d);
            off += d;
        }
    }
    std::vector<Var> parents(xs.begin(), xs.end());
    return make(std::move(out), "concat_lastdim", std::move(parents),
                [rows, total_last, lasts](Node& n) {
                    int off = 0;
                    for (size_t i = 0; i < n.parents.size(); ++i) {
                        const int d = lasts[i];
                        if (n.parents[i]->requires_grad) {
                            Eigen::VectorXd g(static_cast<long>(rows) * d);
                            for (int r = 0; r < rows; ++r)
                                g.segment(static_cast<long>(r) * d, d) =
                                    n.grad.segment(static_cast<long>(r) * total_last + off, d);
                            accumulate(n.parents[i], g);
                        }
                        off += d;
                    }
                });
}

Var add_rowvec(const Var& x, const Var& v) {
    if (x->value.rank() < 1 || v->value.rank() != 1 || last_dim(x) != v->value.dim(0))
        throw std::invalid_argument("add_rowvec: incompatible shapes");
    const int d = v->value.dim(0);
    const int rows = x->value.size() / d;
    Tensor out = Tensor(x->value.shape, x->value.data);
    for (int r = 0; r < rows; ++r)
        out.data.segment(static_cast<long>(r) * d, d) += v->value.data;
    return make(std::move(out), "add_rowvec", {x, v}, [rows, d](Node& n) {
        accumulate(n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            Eigen::VectorXd gv = Eigen::VectorXd::Zero(d);
            for (int r = 0; r < rows; ++r) gv += n.grad.segment(static_cast<long>(r) * d, d);
            accumulate(n.parents[1], gv);
        }
    });
}

Var masked_fill(const Var& x, const std::vector<char>& keep, double fill) {
    if (static_cast<int>(keep.size()) != x->value.size())
        throw std::invalid_argument("masked_fill: mask size mismatch");
    Tensor out(x->value.shape, x->value.data);
    for (int i = 0; i < out.size(); ++i)
        if (!keep[static_cast<size_t>(i)]) out.data(i) = fill;
    return make(std::move(out), "masked_fill", {x}, [keep](Node& n) {
        Eigen::VectorXd g = n.grad;
        for (Eigen::Index i = 0; i < g.size(); ++i)
            if (!keep[static_cast<size_t>(i)]) g(i) = 0.0;
        accumulate(n.parents[0], g);
    });
}

Var mask_rows(const Var& x, const std::vector<char>& row_keep) {
    const int d = last_dim(x);
    const int rows = x->value.size() / d;
    if (static_cast<int>(row_keep.size()) != rows)
        throw std::invalid_argument("mask_rows: mask size mismatch");
    Tensor out(x->value.shape, x->value.data);
    for (int r = 0; r < rows; ++r)
        if (!row_keep[static_cast<size_t>(r)])
            out.data.segment(static_cast<long>(r) * d, d).setZero();
    return make(std::move(out), "mask_rows", {x}, [row_keep, rows, d](Node& n) {
        Eigen::VectorXd g = n.grad;
        for (int r = 0; r < rows; ++r)
            if (!row_keep[static_cast<size_t>(r)])
                g.segment(static_cast<long>(r) * d, d).setZero();
        accumulate(n.parents[0], g);
    });
}

Var softmax_lastdim(const Var& x, const std::vector<char>* keep) {
    const int d = last_dim(x);
    const int rows = x->value.size() / d;
    if (keep && static_cast<int>(keep->size()) != x->value.size())
        throw std::invalid_argument("softmax: mask size mismatch");
    Tensor out = Tensor::zeros(x->value.shape);
    for (int r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < d; ++j) {
            const long idx = static_cast<long>(r) * d + j;
            if (!keep || (*keep)[static_cast<size_t>(idx)])
                mx = std::max(mx, x->value.data(idx));
        }
        if (!std::isfinite(mx))
            throw std::runtime_error("softmax: fully masked axis");
        double sum = 0.0;
        for (int j = 0; j < d; ++j) {
            const long idx = static_cast<long>(r) * d + j;
            if (!keep || (*keep)[static_cast<size_t>(idx)]) {
                out.data(idx) = std::exp(x->value.data(idx) - mx);
                sum += out.data(idx);
            }
        }
        for (int j = 0; j < d; ++j) out.data(static_cast<long>(r) * d + j) /= sum;
    }
    Eigen::VectorXd p = out.data;
    std::vector<char> mask_copy = keep ? *keep : std::vector<char>();
    return make(std::move(out), "softmax", {x}, [p, rows, d, mask_copy](Node& n) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(p.size());
        for (int r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j) {
                const long idx = static_cast<long>(r) * d + j;
                dot += n.grad(idx) * p(idx);
            }
            for (int j = 0; j < d; ++j) {
                const long idx = static_cast<long>(r) * d + j;
                const bool kept = mask_copy.empty() || mask_copy[static_cast<size_t>(idx)];
                g(idx) = kept ? p(idx) * (n.grad(idx) - dot) : 0.0;
            }
        }
        accumulate(n.parents[0], g);
    });
}

Var log_softmax_lastdim(const Var& x) {
    const int d = last_dim(x);
    const int rows = x->value.size() / d;
    Tensor out = Tensor::zeros(x->value.shape);
    for (int r = 0; r < rows; ++r) {
        const long base = static_cast<long>(r) * d;
        double mx = x->value.data.segment(base, d).maxCoeff();
        double lse = std::log((x->value.data.segment(base, d).array() - mx).exp().sum()) + mx;
        out.data.segment(base, d) = x->value.data.segment(base, d).array() - lse;
    }
    Eigen::VectorXd lsm = out.data;
    return make(std::move(out), "log_softmax", {x}, [lsm, rows, d](Node& n) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(lsm.size());
        for (int r = 0; r < rows; ++r) {
            const long base = static_cast<long>(r) * d;
            const double gsum = n.grad.segment(base, d).sum();
            g.segment(base, d) =
                n.grad.segment(base, d).array() - lsm.segment(base, d).array().exp() * gsum;
        }
        accumulate(n.parents[0], g);
    });
}

Var embedding_lookup(const Var& table, const std::vector<int>& indices) {
    if (table->value.rank() != 2) throw std::invalid_argument("embedding_lookup: 2-D table expected");
    const int vocab = table->value.dim(0), d = table->value.dim(1);
    const int n = static_cast<int>(indices.size());
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i) {
        const int t = indices[static_cast<size_t>(i)];
        if (t < 0 || t >= vocab) throw std::invalid_argument("embedding_lookup: index out of range");
        out.data.segment(static_cast<long>(i) * d, d) =
            table->value.data.segment(static_cast<long>(t) * d, d);
    }
    return make(std::move(out), "embedding_lookup", {table}, [indices, d](Node& n) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(n.parents[0]->value.size());
        for (size_t i = 0; i < indices.size(); ++i)
            g.segment(static_cast<long>(indices[i]) * d, d) +=
                n.grad.segment(static_cast<long>(i) * d, d);
        accumulate(n.parents[0], g);
    });
}

Var masked_depthwise_conv1d(const Var& x, const Var& kernel, const std::vector<char>& mask) {
    if (x->value.rank() != 3) throw std::invalid_argument("conv1d: rank-3 input expected");
    const int R = x->value.dim(0), L = x->value.dim(1), d = x->value.dim(2);
    if (kernel->value.rank() != 2 || kernel->value.dim(0) != d || kernel->value.dim(1) != 5)
        throw std::invalid_argument("conv1d: kernel must be (d,5)");
    if (static_cast<int>(mask.size()) != R * L)
        throw std::invalid_argument("conv1d: mask size mismatch");
    auto xat = [&](int r, int j, int c) {
        return x->value.data((static_cast<long>(r) * L + j) * d + c);
    };
    Tensor out = Tensor::zeros({R, L, d});
    for (int r = 0; r < R; ++r)
        for (int j = 0; j < L; ++j) {
            if (!mask[static_cast<size_t>(r * L + j)]) continue;
            for (int o = 0; o < 5; ++o) {
                const int i = j + o - 2;
                if (i < 0 || i >= L || !mask[static_cast<size_t>(r * L + i)]) continue;
                for (int c = 0; c < d; ++c)
                    out.data((static_cast<long>(r) * L + j) * d + c) +=
                        kernel->value.data(static_cast<long>(c) * 5 + o) * xat(r, i, c);
            }
        }
    return make(std::move(out), "masked_depthwise_conv1d", {x, kernel},
                [R, L, d, mask](Node& n) {
                    const auto& xv = n.parents[0]->value.data;
                    const auto& kv = n.parents[1]->value.data;
                    Eigen::VectorXd gx = Eigen::VectorXd::Zero(xv.size());
                    Eigen::VectorXd gk = Eigen::VectorXd::Zero(kv.size());
                    for (int r = 0; r < R; ++r)
                        for (int j = 0; j < L; ++j) {
                            if (!mask[static_cast<size_t>(r * L + j)]) continue;
                            for (int o = 0; o < 5; ++o) {
                                const int i = j + o - 2;
                                if (i < 0 || i >= L || !mask[static_cast<size_t>(r * L + i)])
                                    continue;
                                for (int c = 0; c < d; ++c) {
                                    const long oidx = (static_cast<long>(r) * L + j) * d + c;
                                    const long iidx = (static_cast<long>(r) * L + i) * d + c;
                                    gx(iidx) += n.grad(oidx) * kv(static_cast<long>(c) * 5 + o);
                                    gk(static_cast<long>(c) * 5 + o) += n.grad(oidx) * xv(iidx);
                                }
                            }
                        }
                    accumulate(n.parents[0], gx);
                    accumulate(n.parents[1], gk);
                });
}

Var cross_entropy(const Var& logits, const std::vector<int>& targets,
                  const std::vector<char>* position_mask) {
    if (logits->value.rank() != 2) throw std::invalid_argument("cross_entropy: 2-D logits expected");
    const int L = logits->value.dim(0), V = logits->value.dim(1);
    if (static_cast<int>(targets.size()) != L)
        throw std::invalid_argument("cross_entropy: target count mismatch");
    if (position_mask && static_cast<int>(position_mask->size()) != L)
        throw std::invalid_argument("cross_entropy: position mask size mismatch");
    int n_keep = 0;
    double loss = 0.0;
    Eigen::VectorXd lsm(static_cast<long>(L) * V);
    for (int j = 0; j < L; ++j) {
        const long base = static_cast<long>(j) * V;
        double mx = logits->value.data.segment(base, V).maxCoeff();
        double lse = std::log((logits->value.data.segment(base, V).array() - mx).exp().sum()) + mx;
        lsm.segment(base, V) = logits->value.data.segment(base, V).array() - lse;
        if (position_mask && !(*position_mask)[static_cast<size_t>(j)]) continue;
        const int t = targets[static_cast<size_t>(j)];
        if (t < 0 || t >= V) throw std::invalid_argument("cross_entropy: target out of range");
        loss -= lsm(base + t);
        ++n_keep;
    }
    if (n_keep == 0) throw std::invalid_argument("cross_entropy: no unmasked positions");
    loss /= static_cast<double>(n_keep);
    std::vector<char> mask_copy = position_mask ? *position_mask : std::vector<char>();
    return make(Tensor::scalar(loss), "cross_entropy", {logits},
                [lsm, targets, mask_copy, L, V, n_keep](Node& n) {
                    const double g0 = n.grad(0) / static_cast<double>(n_keep);
                    Eigen::VectorXd g = Eigen::VectorXd::Zero(lsm.size());
                    for (int j = 0; j < L; ++j) {
                        if (!mask_copy.empty() && !mask_copy[static_cast<size_t>(j)]) continue;
                        const long base = static_cast<long>(j) * V;
                        g.segment(base, V) = lsm.segment(base, V).array().exp() * g0;
                        g(base + targets[static_cast<size_t>(j)]) -= g0;
                    }
                    accumulate(n.parents[0], g);
                });
}

Var bce_with_logits(const Var& logits, const std::vector<double>& labels) {
    const int n2 = logits->value.size();
    if (static_cast<int>(labels.size()) != n2)
        throw std::invalid_argument("bce_with_logits: label count mismatch");
    double loss = 0.0;
    for (int i = 0; i < n2; ++i)
        loss += stable_softplus(logits->value.data(i)) -
                labels[static_cast<size_t>(i)] * logits->value.data(i);
    loss /= static_cast<double>(n2);
    return make(Tensor::scalar(loss), "bce_with_logits", {logits}, [labels, n2](Node& n) {
        Eigen::VectorXd g(n2);
        for (int i = 0; i < n2; ++i)
            g(i) = (sigmoid(n.parents[0]->value.data(i)) - labels[static_cast<size_t>(i)]) *
                   n.grad(0) / static_cast<double>(n2);
        accumulate(n.parents[0], g);
    });
}

void backward(const Var& root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->order > b->order; });
    root->ensure_grad();
    root->grad.setOnes();
    for (Node* n : order)
        if (n->requires_grad && n->backward_fn && n->grad.size() == n->value.data.size())
            n->backward_fn(*n);
}

void zero_grad(const std::vector<Var>& params) {
    for (const auto& p : params) {
        p->ensure_grad();
        p->grad.setZero();
    }
}

double grad_check(const std::function<Var()>& make_loss, const std::vector<Var>& params,
                  double eps, int max_coords_per_param, unsigned seed) {
    zero_grad(params);
    Var loss = make_loss();
    if (loss->value.size() != 1) throw std::invalid_argument("grad_check: scalar loss expected");
    backward(loss);
    // Central differences lose roughly |loss|*machine_eps/eps to cancellation in
    // fp - fm, so a coordinate whose gradient sits below that noise cannot be
    // resolved relatively; the comparison gets an absolute floor at the loss scale.
    const double fd_floor = std::abs(loss->value.at(0)) * 1e-5 + 1e-12;
    std::vector<Eigen::VectorXd> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p->grad);

    std::mt19937_64 rng(seed);
    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Var p = params[pi];
        const int n = p->value.size();
        std::vector<int> coords;
        if (n <= max_coords_per_param) {
            coords.resize(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            std::uniform_int_distribution<int> pick(0, n - 1);
            for (int i = 0; i < max_coords_per_param; ++i) coords.push_back(pick(rng));
        }
        for (int c : coords) {
            const double orig = p->value.data(c);
            p->value.data(c) = orig + eps;
            const double fp = make_loss()->value.at(0);
            p->value.data(c) = orig - eps;
            const double fm = make_loss()->value.at(0);
            p->value.data(c) = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi](c);
            const double err =
                std::abs(a - numeric) / std::max(fd_floor, std::abs(a) + std::abs(numeric));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

Adam::Adam(std::vector<Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
        m_.emplace_back(Eigen::VectorXd::Zero(p->value.size()));
        v_.emplace_back(Eigen::VectorXd::Zero(p->value.size()));
    }
}

double Adam::effective_lr() const {
    double warm = cfg_.warmup_steps > 0
                      ? std::min(1.0, static_cast<double>(step_ + 1) / cfg_.warmup_steps)
                      : 1.0;
    return cfg_.lr * warm;
}

void Adam::step() {
    const double lr = effective_lr();
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    for (size_t i = 0; i < params_.size(); ++i) {
        Var& p = params_[i];
        p->ensure_grad();
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p->grad;
        v_[i] = cfg_.beta2 * v_[i].array().matrix() +
                (1.0 - cfg_.beta2) * p->grad.array().square().matrix();
        Eigen::ArrayXd mhat = m_[i].array() / bc1;
        Eigen::ArrayXd vhat = v_[i].array() / bc2;
        p->value.data.array() -= lr * mhat / (vhat.sqrt() + cfg_.eps);
    }
}

void Adam::zero_grad() { ad::zero_grad(params_); }

}  // namespace refold::ad
