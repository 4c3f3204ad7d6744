// Reverse-mode automatic differentiation over dense double tensors,
// plus Adam with linear warm-up. Graphs are built per call via shared
// nodes; backward() walks the graph in reverse creation order.
#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace refold::ad {

struct Tensor {
    std::vector<int> shape;
    Eigen::VectorXd data;  // row-major flat storage

    Tensor() = default;
    Tensor(std::vector<int> s, Eigen::VectorXd d) : shape(std::move(s)), data(std::move(d)) {}

    static Tensor zeros(const std::vector<int>& shape);
    static Tensor scalar(double v) { return Tensor({1}, Eigen::VectorXd::Constant(1, v)); }
    static Tensor from(const std::vector<int>& shape, const std::vector<double>& values);

    int size() const { return static_cast<int>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }
    double& at(int i) { return data(i); }
    double at(int i) const { return data(i); }
};

int shape_size(const std::vector<int>& shape);

class Node;
using Var = std::shared_ptr<Node>;

class Node {
public:
    Tensor value;
    Eigen::VectorXd grad;  // allocated lazily, same length as value.data
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;
    long order = 0;  // creation index, used for reverse topological sweep

    void ensure_grad() {
        if (grad.size() != value.data.size()) grad = Eigen::VectorXd::Zero(value.data.size());
    }
};

Var constant(Tensor t);
Var parameter(Tensor t);

// Elementwise and structural ops. All inputs must be finite; every op
// checks its output and throws on NaN/Inf.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale_const(const Var& x, double c);
// x * s with s a scalar (shape {1}) variable.
Var scale(const Var& x, const Var& s);
Var add_scalar_var(const Var& x, const Var& s);
Var tanh_op(const Var& x);
Var softplus(const Var& x);
Var square(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);

Var reshape(const Var& x, const std::vector<int>& shape);
// (m,k) x (k,n) -> (m,n), row-major.
Var matmul(const Var& a, const Var& b);
// (B,m,k) x (B,k,n) -> (B,m,n).
Var bmm(const Var& a, const Var& b);
// (A,B,C) -> (B,A,C).
Var transpose01(const Var& x);
// (A,B,C) -> (A,C,B).
Var transpose12(const Var& x);
// 2-D transpose (m,n) -> (n,m).
Var transpose(const Var& x);
// (A,B,...) -> (B,...) slice at index i along axis 0.
Var select_axis0(const Var& x, int index);
// Concatenate along the last axis; all inputs share leading dims.
Var concat_lastdim(const std::vector<Var>& xs);
// Broadcast-add a vector over the rows of a (rows, n) tensor.
Var add_rowvec(const Var& x, const Var& v);

// out = keep ? x : fill. Gradient is zero at filled positions.
Var masked_fill(const Var& x, const std::vector<char>& keep, double fill);
// Zero the rows of a (rows, n) tensor where row_keep is false.
Var mask_rows(const Var& x, const std::vector<char>& row_keep);

// Softmax over the last axis restricted to kept entries (0 elsewhere).
// keep has the same flat length as x; a fully masked row throws.
Var softmax_lastdim(const Var& x, const std::vector<char>* keep = nullptr);
Var log_softmax_lastdim(const Var& x);

// Rows of E (vocab x d) gathered by token index; output (n x d).
Var embedding_lookup(const Var& table, const std::vector<int>& indices);

// x (R,L,d), kernel (d,5): per-channel 1-D convolution along L with
// symmetric zero padding 2. Masked inputs are zero-filled and masked
// outputs zeroed, with no renormalization by valid count.
Var masked_depthwise_conv1d(const Var& x, const Var& kernel, const std::vector<char>& mask);

// Mean over kept positions of -log softmax(logits)[j, target_j].
Var cross_entropy(const Var& logits, const std::vector<int>& targets,
                  const std::vector<char>* position_mask = nullptr);
// Mean over i of softplus(z_i) - y_i * z_i (binary CE with logits).
Var bce_with_logits(const Var& logits, const std::vector<double>& labels);

void backward(const Var& root);
void zero_grad(const std::vector<Var>& params);

// Max relative error between analytic gradients and central finite
// differences over sampled coordinates of every parameter.
double grad_check(const std::function<Var()>& make_loss, const std::vector<Var>& params,
                  double eps = 1e-5, int max_coords_per_param = 40, unsigned seed = 0);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int warmup_steps = 500;
};

class Adam {
public:
    Adam(std::vector<Var> params, AdamConfig cfg);

    // Effective lr = lr * min(1, (step+1)/warmup_steps).
    void step();
    void zero_grad();
    int step_count() const { return step_; }
    double effective_lr() const;

private:
    std::vector<Var> params_;
    std::vector<Eigen::VectorXd> m_, v_;
    AdamConfig cfg_;
    int step_ = 0;
};

}  // namespace refold::ad
