#include "synthtrial/nncore.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace synthtrial::nn {

using nlohmann::json;

namespace {

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw ValidationError(std::string(op) + ": shape mismatch " + std::to_string(a.rows) +
                              "x" + std::to_string(a.cols) + " vs " + std::to_string(b.rows) +
                              "x" + std::to_string(b.cols));
}

double stable_softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0.0) {
        const double z = std::exp(-x);
        return 1.0 / (1.0 + z);
    }
    const double z = std::exp(x);
    return z / (1.0 + z);
}

}  // namespace

Mat mm(const Mat& A, const Mat& B) {
    if (A.cols != B.rows) throw ValidationError("mm: inner dimensions differ");
    Mat C(A.rows, B.cols, 0.0);
    for (std::size_t i = 0; i < A.rows; ++i) {
        const double* arow = &A.a[i * A.cols];
        double* crow = &C.a[i * C.cols];
        for (std::size_t k = 0; k < A.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = &B.a[k * B.cols];
            for (std::size_t j = 0; j < B.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return C;
}

Mat mm_nt(const Mat& A, const Mat& B) {
    if (A.cols != B.cols) throw ValidationError("mm_nt: inner dimensions differ");
    Mat C(A.rows, B.rows, 0.0);
    for (std::size_t i = 0; i < A.rows; ++i) {
        const double* arow = &A.a[i * A.cols];
        double* crow = &C.a[i * C.cols];
        for (std::size_t j = 0; j < B.rows; ++j) {
            const double* brow = &B.a[j * B.cols];
            double s = 0.0;
            for (std::size_t k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
            crow[j] = s;
        }
    }
    return C;
}

Mat mm_tn(const Mat& A, const Mat& B) {
    if (A.rows != B.rows) throw ValidationError("mm_tn: inner dimensions differ");
    Mat C(A.cols, B.cols, 0.0);
    for (std::size_t k = 0; k < A.rows; ++k) {
        const double* arow = &A.a[k * A.cols];
        const double* brow = &B.a[k * B.cols];
        for (std::size_t i = 0; i < A.cols; ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* crow = &C.a[i * C.cols];
            for (std::size_t j = 0; j < B.cols; ++j) crow[j] += aki * brow[j];
        }
    }
    return C;
}

Tape::Id Tape::push(Mat v, std::function<void(Tape&, Id)> back) {
    nodes_.push_back({std::move(v), Mat(), std::move(back)});
    Node& n = nodes_.back();
    n.grad = Mat(n.val.rows, n.val.cols, 0.0);
    return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::leaf(Mat v) { return push(std::move(v), nullptr); }

Tape::Id Tape::scalar(double v) { return leaf(Mat(1, 1, v)); }

Tape::Id Tape::add(Id a, Id b) {
    check_same_shape(val(a), val(b), "add");
    Mat c = val(a);
    const Mat& vb = val(b);
    for (std::size_t i = 0; i < c.size(); ++i) c.a[i] += vb.a[i];
    return push(std::move(c), [a, b](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        Mat& gb = t.gref(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga.a[i] += g.a[i];
            gb.a[i] += g.a[i];
        }
    });
}

Tape::Id Tape::sub(Id a, Id b) {
    check_same_shape(val(a), val(b), "sub");
    Mat c = val(a);
    const Mat& vb = val(b);
    for (std::size_t i = 0; i < c.size(); ++i) c.a[i] -= vb.a[i];
    return push(std::move(c), [a, b](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        Mat& gb = t.gref(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga.a[i] += g.a[i];
            gb.a[i] -= g.a[i];
        }
    });
}

Tape::Id Tape::mul(Id a, Id b) {
    check_same_shape(val(a), val(b), "mul");
    Mat c = val(a);
    const Mat& vb = val(b);
    for (std::size_t i = 0; i < c.size(); ++i) c.a[i] *= vb.a[i];
    return push(std::move(c), [a, b](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& va = t.val(a);
        const Mat& vb2 = t.val(b);
        Mat& ga = t.gref(a);
        Mat& gb = t.gref(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga.a[i] += g.a[i] * vb2.a[i];
            gb.a[i] += g.a[i] * va.a[i];
        }
    });
}

Tape::Id Tape::div(Id a, Id b) {
    check_same_shape(val(a), val(b), "div");
    Mat c = val(a);
    const Mat& vb = val(b);
    for (std::size_t i = 0; i < c.size(); ++i) c.a[i] /= vb.a[i];
    return push(std::move(c), [a, b](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& va = t.val(a);
        const Mat& vb2 = t.val(b);
        Mat& ga = t.gref(a);
        Mat& gb = t.gref(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga.a[i] += g.a[i] / vb2.a[i];
            gb.a[i] -= g.a[i] * va.a[i] / (vb2.a[i] * vb2.a[i]);
        }
    });
}

Tape::Id Tape::matmul(Id a, Id b) {
    Mat c = mm(val(a), val(b));
    return push(std::move(c), [a, b](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat da = mm_nt(g, t.val(b));
        Mat db = mm_tn(t.val(a), g);
        Mat& ga = t.gref(a);
        Mat& gb = t.gref(b);
        for (std::size_t i = 0; i < da.size(); ++i) ga.a[i] += da.a[i];
        for (std::size_t i = 0; i < db.size(); ++i) gb.a[i] += db.a[i];
    });
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
    Mat c = mm_nt(val(a), val(b));
    return push(std::move(c), [a, b](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat da = mm(g, t.val(b));
        Mat db = mm_tn(g, t.val(a));
        Mat& ga = t.gref(a);
        Mat& gb = t.gref(b);
        for (std::size_t i = 0; i < da.size(); ++i) ga.a[i] += da.a[i];
        for (std::size_t i = 0; i < db.size(); ++i) gb.a[i] += db.a[i];
    });
}

Tape::Id Tape::add_rowvec(Id a, Id r) {
    const Mat& va = val(a);
    const Mat& vr = val(r);
    if (vr.rows != 1 || vr.cols != va.cols)
        throw ValidationError("add_rowvec: vector must be 1 x cols");
    Mat c = va;
    for (std::size_t i = 0; i < c.rows; ++i)
        for (std::size_t j = 0; j < c.cols; ++j) c.at(i, j) += vr.a[j];
    return push(std::move(c), [a, r](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        Mat& gr = t.gref(r);
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) {
                ga.at(i, j) += g.at(i, j);
                gr.a[j] += g.at(i, j);
            }
    });
}

Tape::Id Tape::add_colvec(Id a, Id cvec) {
    const Mat& va = val(a);
    const Mat& vc = val(cvec);
    if (vc.cols != 1 || vc.rows != va.rows)
        throw ValidationError("add_colvec: vector must be rows x 1");
    Mat c = va;
    for (std::size_t i = 0; i < c.rows; ++i)
        for (std::size_t j = 0; j < c.cols; ++j) c.at(i, j) += vc.a[i];
    return push(std::move(c), [a, cvec](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        Mat& gc = t.gref(cvec);
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) {
                ga.at(i, j) += g.at(i, j);
                gc.a[i] += g.at(i, j);
            }
    });
}

Tape::Id Tape::mul_colvec(Id a, Id cvec) {
    const Mat& va = val(a);
    const Mat& vc = val(cvec);
    if (vc.cols != 1 || vc.rows != va.rows)
        throw ValidationError("mul_colvec: vector must be rows x 1");
    Mat c = va;
    for (std::size_t i = 0; i < c.rows; ++i)
        for (std::size_t j = 0; j < c.cols; ++j) c.at(i, j) *= vc.a[i];
    return push(std::move(c), [a, cvec](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& va2 = t.val(a);
        const Mat& vc2 = t.val(cvec);
        Mat& ga = t.gref(a);
        Mat& gc = t.gref(cvec);
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) {
                ga.at(i, j) += g.at(i, j) * vc2.a[i];
                gc.a[i] += g.at(i, j) * va2.at(i, j);
            }
    });
}

Tape::Id Tape::scale(Id a, double k) {
    Mat c = val(a);
    for (double& v : c.a) v *= k;
    return push(std::move(c), [a, k](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += k * g.a[i];
    });
}

Tape::Id Tape::add_const(Id a, double k) {
    Mat c = val(a);
    for (double& v : c.a) v += k;
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i];
    });
}

Tape::Id Tape::neg(Id a) { return scale(a, -1.0); }

Tape::Id Tape::exp_(Id a) {
    Mat c = val(a);
    for (double& v : c.a) v = std::exp(v);
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& c2 = t.val(self);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i] * c2.a[i];
    });
}

Tape::Id Tape::log_(Id a) {
    Mat c = val(a);
    for (double& v : c.a) {
        if (!(v > 0.0)) throw NumericalError("log of non-positive value on tape");
        v = std::log(v);
    }
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& va = t.val(a);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i] / va.a[i];
    });
}

Tape::Id Tape::tanh_(Id a) {
    Mat c = val(a);
    for (double& v : c.a) v = std::tanh(v);
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& c2 = t.val(self);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i] * (1.0 - c2.a[i] * c2.a[i]);
    });
}

Tape::Id Tape::relu(Id a) {
    Mat c = val(a);
    for (double& v : c.a) v = v > 0.0 ? v : 0.0;
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& va = t.val(a);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (va.a[i] > 0.0) ga.a[i] += g.a[i];
    });
}

Tape::Id Tape::softplus(Id a) {
    Mat c = val(a);
    for (double& v : c.a) v = stable_softplus(v);
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& va = t.val(a);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i] * sigmoid(va.a[i]);
    });
}

Tape::Id Tape::square(Id a) {
    Mat c = val(a);
    for (double& v : c.a) v *= v;
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& va = t.val(a);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += 2.0 * g.a[i] * va.a[i];
    });
}

Tape::Id Tape::clamp_min(Id a, double lo) {
    Mat c = val(a);
    for (double& v : c.a) v = v < lo ? lo : v;
    return push(std::move(c), [a, lo](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& va = t.val(a);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (va.a[i] > lo) ga.a[i] += g.a[i];
    });
}

Tape::Id Tape::softmax_rows(Id a) {
    Mat c = val(a);
    for (std::size_t i = 0; i < c.rows; ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < c.cols; ++j) mx = std::max(mx, c.at(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < c.cols; ++j) {
            c.at(i, j) = std::exp(c.at(i, j) - mx);
            s += c.at(i, j);
        }
        for (std::size_t j = 0; j < c.cols; ++j) c.at(i, j) /= s;
    }
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& p = t.val(self);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.rows; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < g.cols; ++j) dot += g.at(i, j) * p.at(i, j);
            for (std::size_t j = 0; j < g.cols; ++j)
                ga.at(i, j) += p.at(i, j) * (g.at(i, j) - dot);
        }
    });
}

Tape::Id Tape::log_softmax_rows(Id a) {
    Mat c = val(a);
    for (std::size_t i = 0; i < c.rows; ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < c.cols; ++j) mx = std::max(mx, c.at(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < c.cols; ++j) s += std::exp(c.at(i, j) - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < c.cols; ++j) c.at(i, j) -= lse;
    }
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        const Mat& lp = t.val(self);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.rows; ++i) {
            double gsum = 0.0;
            for (std::size_t j = 0; j < g.cols; ++j) gsum += g.at(i, j);
            for (std::size_t j = 0; j < g.cols; ++j)
                ga.at(i, j) += g.at(i, j) - std::exp(lp.at(i, j)) * gsum;
        }
    });
}

Tape::Id Tape::rowsum(Id a) {
    const Mat& va = val(a);
    Mat c(va.rows, 1, 0.0);
    for (std::size_t i = 0; i < va.rows; ++i)
        for (std::size_t j = 0; j < va.cols; ++j) c.a[i] += va.at(i, j);
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < ga.rows; ++i)
            for (std::size_t j = 0; j < ga.cols; ++j) ga.at(i, j) += g.a[i];
    });
}

Tape::Id Tape::colsum(Id a) {
    const Mat& va = val(a);
    Mat c(1, va.cols, 0.0);
    for (std::size_t i = 0; i < va.rows; ++i)
        for (std::size_t j = 0; j < va.cols; ++j) c.a[j] += va.at(i, j);
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < ga.rows; ++i)
            for (std::size_t j = 0; j < ga.cols; ++j) ga.at(i, j) += g.a[j];
    });
}

Tape::Id Tape::sum(Id a) {
    const Mat& va = val(a);
    double s = 0.0;
    for (double v : va.a) s += v;
    return push(Mat(1, 1, s), [a](Tape& t, Id self) {
        const double g = t.grad(self).a[0];
        Mat& ga = t.gref(a);
        for (double& v : ga.a) v += g;
    });
}

Tape::Id Tape::mean(Id a) {
    const Mat& va = val(a);
    double s = 0.0;
    for (double v : va.a) s += v;
    const double n = static_cast<double>(va.size());
    return push(Mat(1, 1, s / n), [a, n](Tape& t, Id self) {
        const double g = t.grad(self).a[0] / n;
        Mat& ga = t.gref(a);
        for (double& v : ga.a) v += g;
    });
}

Tape::Id Tape::concat_cols(Id a, Id b) {
    const Mat& va = val(a);
    const Mat& vb = val(b);
    if (va.rows != vb.rows) throw ValidationError("concat_cols: row counts differ");
    Mat c(va.rows, va.cols + vb.cols, 0.0);
    for (std::size_t i = 0; i < va.rows; ++i) {
        for (std::size_t j = 0; j < va.cols; ++j) c.at(i, j) = va.at(i, j);
        for (std::size_t j = 0; j < vb.cols; ++j) c.at(i, va.cols + j) = vb.at(i, j);
    }
    const std::size_t ac = va.cols;
    return push(std::move(c), [a, b, ac](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        Mat& gb = t.gref(b);
        for (std::size_t i = 0; i < g.rows; ++i) {
            for (std::size_t j = 0; j < ac; ++j) ga.at(i, j) += g.at(i, j);
            for (std::size_t j = ac; j < g.cols; ++j) gb.at(i, j - ac) += g.at(i, j);
        }
    });
}

Tape::Id Tape::slice_cols(Id a, std::size_t c0, std::size_t c1) {
    const Mat& va = val(a);
    if (c0 >= c1 || c1 > va.cols) throw ValidationError("slice_cols: bad range");
    Mat c(va.rows, c1 - c0, 0.0);
    for (std::size_t i = 0; i < va.rows; ++i)
        for (std::size_t j = c0; j < c1; ++j) c.at(i, j - c0) = va.at(i, j);
    return push(std::move(c), [a, c0](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) ga.at(i, c0 + j) += g.at(i, j);
    });
}

Tape::Id Tape::transpose(Id a) {
    const Mat& va = val(a);
    Mat c(va.cols, va.rows, 0.0);
    for (std::size_t i = 0; i < va.rows; ++i)
        for (std::size_t j = 0; j < va.cols; ++j) c.at(j, i) = va.at(i, j);
    return push(std::move(c), [a](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) ga.at(j, i) += g.at(i, j);
    });
}

Tape::Id Tape::gather_cols(Id a, std::vector<std::size_t> idx) {
    const Mat& va = val(a);
    if (idx.size() != va.rows) throw ValidationError("gather_cols: one index per row required");
    Mat c(va.rows, 1, 0.0);
    for (std::size_t i = 0; i < va.rows; ++i) {
        if (idx[i] >= va.cols) throw ValidationError("gather_cols: index out of range");
        c.a[i] = va.at(i, idx[i]);
    }
    return push(std::move(c), [a, idx = std::move(idx)](Tape& t, Id self) {
        const Mat& g = t.grad(self);
        Mat& ga = t.gref(a);
        for (std::size_t i = 0; i < g.rows; ++i) ga.at(i, idx[i]) += g.a[i];
    });
}

void Tape::backward(Id root) {
    Node& r = nodes_[static_cast<std::size_t>(root)];
    if (r.val.rows != 1 || r.val.cols != 1)
        throw ValidationError("backward root must be a 1x1 scalar");
    r.grad.a[0] = 1.0;
    for (Id id = root; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.back) n.back(*this, id);
    }
}

void ParamStore::add(const std::string& name, Mat init) {
    if (values.count(name)) throw ValidationError("parameter '" + name + "' already exists");
    adam_m[name] = Mat(init.rows, init.cols, 0.0);
    adam_v[name] = Mat(init.rows, init.cols, 0.0);
    values[name] = std::move(init);
}

Mat& ParamStore::get(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
}

const Mat& ParamStore::get(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
}

Tape::Id TapeBind::use(const std::string& name) {
    auto it = ids.find(name);
    if (it != ids.end()) return it->second;
    Tape::Id id = tape->leaf(params->get(name));
    ids.emplace(name, id);
    return id;
}

std::map<std::string, Mat> TapeBind::grads() const {
    std::map<std::string, Mat> out;
    for (const auto& [name, id] : ids) out[name] = tape->grad(id);
    return out;
}

Mat glorot(std::size_t rows, std::size_t cols, Rng& rng) {
    Mat m(rows, cols, 0.0);
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (double& v : m.a) v = (2.0 * rng.uniform() - 1.0) * limit;
    return m;
}

Activation activation_from_string(const std::string& s) {
    if (s == "identity") return Activation::Identity;
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    if (s == "softplus") return Activation::Softplus;
    if (s == "softmax") return Activation::Softmax;
    throw ValidationError("unknown activation '" + s + "'");
}

Tape::Id dense(Tape& tape, TapeBind& bind, const std::string& prefix, Tape::Id x,
               std::size_t out_dim, Activation act, Rng& init_rng) {
    const std::size_t in_dim = tape.val(x).cols;
    const std::string wname = prefix + "_W", bname = prefix + "_b";
    if (!bind.params->has(wname)) {
        bind.params->add(wname, glorot(in_dim, out_dim, init_rng));
        bind.params->add(bname, Mat(1, out_dim, 0.0));
    }
    Tape::Id lin = tape.add_rowvec(tape.matmul(x, bind.use(wname)), bind.use(bname));
    switch (act) {
        case Activation::Identity: return lin;
        case Activation::Tanh: return tape.tanh_(lin);
        case Activation::Relu: return tape.relu(lin);
        case Activation::Softplus: return tape.softplus(lin);
        case Activation::Softmax: return tape.softmax_rows(lin);
    }
    return lin;
}

void adam_step(ParamStore& params, const std::map<std::string, Mat>& grads,
               const AdamConfig& cfg) {
    for (const auto& [name, g] : grads) {
        const Mat& v = params.get(name);
        if (g.rows != v.rows || g.cols != v.cols)
            throw ValidationError("adam_step: gradient shape mismatch for '" + name + "'");
        for (double x : g.a)
            if (!std::isfinite(x))
                throw NumericalError("adam_step: non-finite gradient for '" + name +
                                     "', step rejected");
    }
    params.step += 1;
    const double t = static_cast<double>(params.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (const auto& [name, g] : grads) {
        Mat& value = params.get(name);
        Mat& m = params.adam_m[name];
        Mat& v = params.adam_v[name];
        for (std::size_t i = 0; i < g.size(); ++i) {
            m.a[i] = cfg.beta1 * m.a[i] + (1.0 - cfg.beta1) * g.a[i];
            v.a[i] = cfg.beta2 * v.a[i] + (1.0 - cfg.beta2) * g.a[i] * g.a[i];
            const double mhat = m.a[i] / bc1;
            const double vhat = v.a[i] / bc2;
            value.a[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

Tape::Id gaussian_reparam(Tape& tape, Tape::Id mu, Tape::Id logvar, const Mat& eps) {
    check_same_shape(tape.val(mu), eps, "gaussian_reparam");
    Tape::Id sd = tape.exp_(tape.scale(logvar, 0.5));
    Tape::Id noise = tape.leaf(eps);
    return tape.add(mu, tape.mul(sd, noise));
}

Tape::Id gumbel_softmax(Tape& tape, Tape::Id logits, const Mat& gumbel_noise,
                        double temperature) {
    if (!(temperature > 0.0)) throw ValidationError("gumbel_softmax: temperature must be > 0");
    check_same_shape(tape.val(logits), gumbel_noise, "gumbel_softmax");
    Tape::Id noisy = tape.add(logits, tape.leaf(gumbel_noise));
    return tape.softmax_rows(tape.scale(noisy, 1.0 / temperature));
}

GradCheckReport grad_check(ParamStore& params, const std::function<double(ParamStore&)>& value_fn,
                           const std::map<std::string, Mat>& ad_grads) {
    GradCheckReport report;
    for (const auto& [name, ag] : ad_grads) {
        Mat& theta = params.get(name);
        if (ag.rows != theta.rows || ag.cols != theta.cols)
            throw ValidationError("grad_check: gradient shape mismatch for '" + name + "'");
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double orig = theta.a[i];
            const double h = 1e-5 * std::max(1.0, std::fabs(orig));
            theta.a[i] = orig + h;
            const double fp = value_fn(params);
            theta.a[i] = orig - h;
            const double fm = value_fn(params);
            theta.a[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double ad = ag.a[i];
            const double rel = std::fabs(ad - fd) / std::max({1.0, std::fabs(ad), std::fabs(fd)});
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = name;
                report.worst_index = i;
                report.ad = ad;
                report.fd = fd;
            }
        }
    }
    return report;
}

std::string params_to_json(const ParamStore& params) {
    json j;
    j["format"] = "nncore-params";
    j["version"] = 1;
    j["step"] = params.step;
    auto dump_group = [](const std::map<std::string, Mat>& group) {
        json g = json::object();
        for (const auto& [name, m] : group) {
            json jm;
            jm["shape"] = {m.rows, m.cols};
            jm["data"] = m.a;
            g[name] = jm;
        }
        return g;
    };
    j["params"] = dump_group(params.values);
    j["adam_m"] = dump_group(params.adam_m);
    j["adam_v"] = dump_group(params.adam_v);
    return j.dump();
}

ParamStore params_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("parameter file is not valid JSON: ") + e.what());
    }
    if (!j.contains("format") || j["format"] != "nncore-params")
        throw ValidationError("parameter file has wrong format tag");
    if (!j.contains("version") || j["version"].get<int>() != 1)
        throw ValidationError("unsupported parameter file version");
    auto load_group = [](const json& g) {
        std::map<std::string, Mat> out;
        for (auto it = g.begin(); it != g.end(); ++it) {
            const json& jm = it.value();
            auto shape = jm["shape"].get<std::vector<std::size_t>>();
            if (shape.size() != 2) throw ValidationError("parameter shape must have 2 entries");
            Mat m(shape[0], shape[1], 0.0);
            auto data = jm["data"].get<std::vector<double>>();
            if (data.size() != m.size())
                throw ValidationError("parameter data length does not match shape");
            m.a = std::move(data);
            out[it.key()] = std::move(m);
        }
        return out;
    };
    ParamStore p;
    p.step = j.value("step", 0L);
    p.values = load_group(j["params"]);
    p.adam_m = load_group(j["adam_m"]);
    p.adam_v = load_group(j["adam_v"]);
    for (const auto& [name, m] : p.values) {
        if (!p.adam_m.count(name)) p.adam_m[name] = Mat(m.rows, m.cols, 0.0);
        if (!p.adam_v.count(name)) p.adam_v[name] = Mat(m.rows, m.cols, 0.0);
    }
    return p;
}

}  // namespace synthtrial::nn
