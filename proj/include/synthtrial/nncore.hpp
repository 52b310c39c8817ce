#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "synthtrial/common.hpp"

namespace synthtrial::nn {

// Dense row-major matrix.
struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& at(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
    std::size_t size() const { return a.size(); }
};

Mat mm(const Mat& A, const Mat& B);     // A B
Mat mm_nt(const Mat& A, const Mat& B);  // A B^T
Mat mm_tn(const Mat& A, const Mat& B);  // A^T B

// Reverse-mode autodiff over a linear record of matrix operations. Nodes are
// appended in evaluation order; the backward sweep walks them once in reverse
// and accumulates gradients additively, so fan-out just adds contributions.
class Tape {
  public:
    using Id = int;

    Id leaf(Mat v);
    Id scalar(double v);

    Id add(Id a, Id b);
    Id sub(Id a, Id b);
    Id mul(Id a, Id b);
    Id div(Id a, Id b);
    Id matmul(Id a, Id b);
    Id matmul_nt(Id a, Id b);
    Id add_rowvec(Id a, Id r);  // r is 1 x cols
    Id add_colvec(Id a, Id c);  // c is rows x 1
    Id mul_colvec(Id a, Id c);
    Id scale(Id a, double k);
    Id add_const(Id a, double k);
    Id neg(Id a);
    Id exp_(Id a);
    Id log_(Id a);
    Id tanh_(Id a);
    Id relu(Id a);
    Id softplus(Id a);
    Id square(Id a);
    Id clamp_min(Id a, double lo);
    Id softmax_rows(Id a);
    Id log_softmax_rows(Id a);
    Id rowsum(Id a);  // rows x 1
    Id colsum(Id a);  // 1 x cols
    Id sum(Id a);     // 1 x 1
    Id mean(Id a);    // 1 x 1
    Id concat_cols(Id a, Id b);
    Id slice_cols(Id a, std::size_t c0, std::size_t c1);
    Id transpose(Id a);
    Id gather_cols(Id a, std::vector<std::size_t> idx);  // rows x 1

    // Seeds d(root)/d(root) = 1 (root must be 1x1) and sweeps the record in
    // reverse once.
    void backward(Id root);

    const Mat& val(Id id) const { return nodes_[static_cast<std::size_t>(id)].val; }
    const Mat& grad(Id id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Mat val;
        Mat grad;
        std::function<void(Tape&, Id)> back;  // null for leaves
    };
    std::vector<Node> nodes_;

    Id push(Mat v, std::function<void(Tape&, Id)> back);
    Mat& gref(Id id) { return nodes_[static_cast<std::size_t>(id)].grad; }
};

// Named parameters with Adam moments.
struct ParamStore {
    std::map<std::string, Mat> values;
    std::map<std::string, Mat> adam_m;
    std::map<std::string, Mat> adam_v;
    long step = 0;

    void add(const std::string& name, Mat init);
    bool has(const std::string& name) const { return values.count(name) != 0; }
    Mat& get(const std::string& name);
    const Mat& get(const std::string& name) const;
};

// Binds parameters into a tape as leaves (one per name per tape) and collects
// their gradients after backward().
struct TapeBind {
    Tape* tape;
    ParamStore* params;
    std::map<std::string, Tape::Id> ids;

    TapeBind(Tape& t, ParamStore& p) : tape(&t), params(&p) {}
    Tape::Id use(const std::string& name);
    std::map<std::string, Mat> grads() const;
};

// Uniform Glorot initialization, bounds +-sqrt(6 / (fan_in + fan_out)).
Mat glorot(std::size_t rows, std::size_t cols, Rng& rng);

enum class Activation { Identity, Tanh, Relu, Softplus, Softmax };
Activation activation_from_string(const std::string& s);

// y = act(x W + b) with parameters "<prefix>_W" and "<prefix>_b" created on
// first use (Glorot weights, zero biases).
Tape::Id dense(Tape& tape, TapeBind& bind, const std::string& prefix, Tape::Id x,
               std::size_t out_dim, Activation act, Rng& init_rng);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam. Rejects the whole step (no parameter or moment is
// touched) and throws NumericalError when any gradient entry is non-finite.
void adam_step(ParamStore& params, const std::map<std::string, Mat>& grads,
               const AdamConfig& cfg);

// z = mu + exp(lv / 2) .* eps with eps passed in as a constant.
Tape::Id gaussian_reparam(Tape& tape, Tape::Id mu, Tape::Id logvar, const Mat& eps);

// softmax((logits + g) / temperature) row-wise with Gumbel noise g.
Tape::Id gumbel_softmax(Tape& tape, Tape::Id logits, const Mat& gumbel_noise, double temperature);

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double ad = 0.0, fd = 0.0;
};

// Central finite differences with h = 1e-5 * max(1, |theta|), compared
// against the caller's reverse-mode gradients elementwise.
GradCheckReport grad_check(ParamStore& params, const std::function<double(ParamStore&)>& value_fn,
                           const std::map<std::string, Mat>& ad_grads);

std::string params_to_json(const ParamStore& params);
ParamStore params_from_json(const std::string& text);

}  // namespace synthtrial::nn
