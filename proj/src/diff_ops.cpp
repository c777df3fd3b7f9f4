#include "poro/diff/ops.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace poro::diff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

void require_same(const char* prim, Var a, Var b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(prim) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// ---- im2col machinery -------------------------------------------------------

// writes one sample's patch block into a (possibly batch-wide) column matrix;
// row_stride is the full column count of that matrix
void im2col2d(const double* x, int C, int H, int W, int K, int s, int p, int OH, int OW, double* col,
              std::int64_t row_stride) {
    std::int64_t r = 0;
    for (int c = 0; c < C; ++c)
        for (int kh = 0; kh < K; ++kh)
            for (int kw = 0; kw < K; ++kw, ++r) {
                double* dst = col + r * row_stride;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * s - p + kh;
                    if (ih < 0 || ih >= H) {
                        for (int ow = 0; ow < OW; ++ow) dst[oh * OW + ow] = 0.0;
                        continue;
                    }
                    const double* src = x + (static_cast<std::int64_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * s - p + kw;
                        dst[oh * OW + ow] = (iw < 0 || iw >= W) ? 0.0 : src[iw];
                    }
                }
            }
}

void col2im2d_acc(const double* col, int C, int H, int W, int K, int s, int p, int OH, int OW, double* gx,
                  std::int64_t row_stride) {
    std::int64_t r = 0;
    for (int c = 0; c < C; ++c)
        for (int kh = 0; kh < K; ++kh)
            for (int kw = 0; kw < K; ++kw, ++r) {
                const double* src = col + r * row_stride;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * s - p + kh;
                    if (ih < 0 || ih >= H) continue;
                    double* dst = gx + (static_cast<std::int64_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * s - p + kw;
                        if (iw >= 0 && iw < W) dst[iw] += src[oh * OW + ow];
                    }
                }
            }
}

void im2col3d(const double* x, int C, int D, int H, int W, int K, int s, int p,
              int OD, int OH, int OW, double* col, std::int64_t row_stride) {
    std::int64_t r = 0;
    for (int c = 0; c < C; ++c)
        for (int kd = 0; kd < K; ++kd)
            for (int kh = 0; kh < K; ++kh)
                for (int kw = 0; kw < K; ++kw, ++r) {
                    double* dst = col + r * row_stride;
                    for (int od = 0; od < OD; ++od) {
                        const int id = od * s - p + kd;
                        for (int oh = 0; oh < OH; ++oh) {
                            const int ih = oh * s - p + kh;
                            double* drow = dst + (static_cast<std::int64_t>(od) * OH + oh) * OW;
                            if (id < 0 || id >= D || ih < 0 || ih >= H) {
                                for (int ow = 0; ow < OW; ++ow) drow[ow] = 0.0;
                                continue;
                            }
                            const double* src = x + ((static_cast<std::int64_t>(c) * D + id) * H + ih) * W;
                            for (int ow = 0; ow < OW; ++ow) {
                                const int iw = ow * s - p + kw;
                                drow[ow] = (iw < 0 || iw >= W) ? 0.0 : src[iw];
                            }
                        }
                    }
                }
}

void col2im3d_acc(const double* col, int C, int D, int H, int W, int K, int s, int p,
                  int OD, int OH, int OW, double* gx, std::int64_t row_stride) {
    std::int64_t r = 0;
    for (int c = 0; c < C; ++c)
        for (int kd = 0; kd < K; ++kd)
            for (int kh = 0; kh < K; ++kh)
                for (int kw = 0; kw < K; ++kw, ++r) {
                    const double* src = col + r * row_stride;
                    for (int od = 0; od < OD; ++od) {
                        const int id = od * s - p + kd;
                        if (id < 0 || id >= D) continue;
                        for (int oh = 0; oh < OH; ++oh) {
                            const int ih = oh * s - p + kh;
                            if (ih < 0 || ih >= H) continue;
                            const double* srow = src + (static_cast<std::int64_t>(od) * OH + oh) * OW;
                            double* dst = gx + ((static_cast<std::int64_t>(c) * D + id) * H + ih) * W;
                            for (int ow = 0; ow < OW; ++ow) {
                                const int iw = ow * s - p + kw;
                                if (iw >= 0 && iw < W) dst[iw] += srow[ow];
                            }
                        }
                    }
                }
}

struct ConvDims {
    int n, ic, oc, k, stride, pad;
    std::vector<int> in_sp, out_sp;  // spatial extents
    std::int64_t in_sp_size = 1, out_sp_size = 1;
};

ConvDims conv_dims(const char* prim, const Shape& xs, const Shape& ws, int stride, int pad, int rank) {
    require(static_cast<int>(xs.size()) == rank + 2,
            std::string(prim) + ": input must be rank " + std::to_string(rank + 2) + ", got " + shape_str(xs));
    require(static_cast<int>(ws.size()) == rank + 2,
            std::string(prim) + ": kernel must be rank " + std::to_string(rank + 2) + ", got " + shape_str(ws));
    require(stride >= 1 && pad >= 0, std::string(prim) + ": bad stride/pad");
    ConvDims d;
    d.n = xs[0];
    d.ic = xs[1];
    d.oc = ws[0];
    d.k = ws[2];
    d.stride = stride;
    d.pad = pad;
    require(ws[1] == d.ic, std::string(prim) + ": kernel " + shape_str(ws) + " does not match input channels of " +
                               shape_str(xs));
    for (int a = 2; a < rank + 2; ++a)
        require(ws[a] == d.k, std::string(prim) + ": only cubic kernels supported, got " + shape_str(ws));
    for (int a = 0; a < rank; ++a) {
        const int in = xs[2 + a];
        const int out = conv_out_extent(in, d.k, stride, pad);
        require(out >= 1, std::string(prim) + ": kernel " + shape_str(ws) + " too large for input " + shape_str(xs));
        d.in_sp.push_back(in);
        d.out_sp.push_back(out);
        d.in_sp_size *= in;
        d.out_sp_size *= out;
    }
    return d;
}

// one batch-wide patch matrix: column block n holds sample n's patches
void im2col_batch(const double* x, const ConvDims& d, int rank, RowMat& col) {
    const std::int64_t osp = d.out_sp_size;
    const std::int64_t cols = col.cols();
    for (int n = 0; n < d.n; ++n) {
        const double* xn = x + static_cast<std::int64_t>(n) * d.ic * d.in_sp_size;
        double* dst = col.data() + static_cast<std::int64_t>(n) * osp;
        if (rank == 2)
            im2col2d(xn, d.ic, d.in_sp[0], d.in_sp[1], d.k, d.stride, d.pad, d.out_sp[0], d.out_sp[1], dst, cols);
        else
            im2col3d(xn, d.ic, d.in_sp[0], d.in_sp[1], d.in_sp[2], d.k, d.stride, d.pad, d.out_sp[0], d.out_sp[1],
                     d.out_sp[2], dst, cols);
    }
}

Eigen::ArrayXd conv_forward(const Eigen::ArrayXd& x, const Eigen::ArrayXd& w, const ConvDims& d, int rank) {
    const std::int64_t krn = static_cast<std::int64_t>(d.ic) * static_cast<std::int64_t>(std::pow(d.k, rank));
    const std::int64_t osp = d.out_sp_size;
    const std::int64_t cols = static_cast<std::int64_t>(d.n) * osp;

    RowMat col(krn, cols);
    im2col_batch(x.data(), d, rank, col);
    RowMat panel(d.oc, cols);
    {
        CMapRM wmat(w.data(), d.oc, krn);
        panel.noalias() = wmat * col;
    }
    Eigen::ArrayXd y(static_cast<std::int64_t>(d.n) * d.oc * osp);
    for (int n = 0; n < d.n; ++n)
        for (int oc = 0; oc < d.oc; ++oc)
            std::memcpy(y.data() + (static_cast<std::int64_t>(n) * d.oc + oc) * osp,
                        panel.data() + static_cast<std::int64_t>(oc) * cols + static_cast<std::int64_t>(n) * osp,
                        static_cast<std::size_t>(osp) * 8);
    return y;
}

void conv_backward(const Eigen::ArrayXd& x, const Eigen::ArrayXd& w, const Eigen::ArrayXd& gy,
                   const ConvDims& d, int rank, Eigen::ArrayXd* gx, Eigen::ArrayXd* gw) {
    const std::int64_t krn = static_cast<std::int64_t>(d.ic) * static_cast<std::int64_t>(std::pow(d.k, rank));
    const std::int64_t osp = d.out_sp_size;
    const std::int64_t cols = static_cast<std::int64_t>(d.n) * osp;

    RowMat gy_panel(d.oc, cols);
    for (int n = 0; n < d.n; ++n)
        for (int oc = 0; oc < d.oc; ++oc)
            std::memcpy(gy_panel.data() + static_cast<std::int64_t>(oc) * cols + static_cast<std::int64_t>(n) * osp,
                        gy.data() + (static_cast<std::int64_t>(n) * d.oc + oc) * osp,
                        static_cast<std::size_t>(osp) * 8);

    if (gw) {
        RowMat col(krn, cols);
        im2col_batch(x.data(), d, rank, col);
        MapRM gwm(gw->data(), d.oc, krn);
        gwm.noalias() += gy_panel * col.transpose();
    }
    if (gx) {
        RowMat gcol(krn, cols);
        {
            CMapRM wmat(w.data(), d.oc, krn);
            gcol.noalias() = wmat.transpose() * gy_panel;
        }
        for (int n = 0; n < d.n; ++n) {
            double* gxn = gx->data() + static_cast<std::int64_t>(n) * d.ic * d.in_sp_size;
            const double* src = gcol.data() + static_cast<std::int64_t>(n) * osp;
            if (rank == 2)
                col2im2d_acc(src, d.ic, d.in_sp[0], d.in_sp[1], d.k, d.stride, d.pad, d.out_sp[0], d.out_sp[1],
                             gxn, cols);
            else
                col2im3d_acc(src, d.ic, d.in_sp[0], d.in_sp[1], d.in_sp[2], d.k, d.stride, d.pad, d.out_sp[0],
                             d.out_sp[1], d.out_sp[2], gxn, cols);
        }
    }
}

// spatial extent of the transposed convolution output
int convt_out_extent(int in, int k, int stride, int pad) { return (in - 1) * stride + k - 2 * pad; }

}  // namespace

// ---- elementwise ------------------------------------------------------------

Var add(Var a, Var b) {
    require_same("add", a, b);
    Tape& t = *a.tape;
    const int ai = a.id, bi = b.id;
    Var out = t.emplace(a.shape(), a.value() + b.value(), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, bi, oi](Tape& tp) {
        tp.accumulate(ai, tp.at(oi).grad);
        tp.accumulate(bi, tp.at(oi).grad);
    };
    return out;
}

Var sub(Var a, Var b) {
    require_same("sub", a, b);
    Tape& t = *a.tape;
    const int ai = a.id, bi = b.id;
    Var out = t.emplace(a.shape(), a.value() - b.value(), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, bi, oi](Tape& tp) {
        tp.accumulate(ai, tp.at(oi).grad);
        tp.accumulate(bi, -tp.at(oi).grad);
    };
    return out;
}

Var mul(Var a, Var b) {
    require_same("mul", a, b);
    Tape& t = *a.tape;
    const int ai = a.id, bi = b.id;
    Var out = t.emplace(a.shape(), a.value() * b.value(), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, bi, oi](Tape& tp) {
        tp.accumulate(ai, tp.at(oi).grad * tp.at(bi).value);
        tp.accumulate(bi, tp.at(oi).grad * tp.at(ai).value);
    };
    return out;
}

Var add_scalar(Var a, double c) {
    Tape& t = *a.tape;
    const int ai = a.id;
    Var out = t.emplace(a.shape(), a.value() + c, nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi](Tape& tp) { tp.accumulate(ai, tp.at(oi).grad); };
    return out;
}

Var mul_scalar(Var a, double c) {
    Tape& t = *a.tape;
    const int ai = a.id;
    Var out = t.emplace(a.shape(), a.value() * c, nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi, c](Tape& tp) { tp.accumulate(ai, tp.at(oi).grad * c); };
    return out;
}

Var scalar_sub(double c, Var a) {
    Tape& t = *a.tape;
    const int ai = a.id;
    Var out = t.emplace(a.shape(), c - a.value(), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi](Tape& tp) { tp.accumulate(ai, -tp.at(oi).grad); };
    return out;
}

Var relu(Var a) {
    Tape& t = *a.tape;
    const int ai = a.id;
    Var out = t.emplace(a.shape(), a.value().max(0.0), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi](Tape& tp) {
        tp.accumulate(ai, tp.at(oi).grad * (tp.at(ai).value > 0.0).cast<double>());
    };
    return out;
}

Var clamp(Var a, double lo, double hi) {
    if (!(lo < hi)) throw ArgumentError("clamp: need lo < hi");
    Tape& t = *a.tape;
    const int ai = a.id;
    Var out = t.emplace(a.shape(), a.value().max(lo).min(hi), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi, lo, hi](Tape& tp) {
        const auto& x = tp.at(ai).value;
        tp.accumulate(ai, tp.at(oi).grad * ((x >= lo) && (x <= hi)).cast<double>());
    };
    return out;
}

Var steep_sigmoid(Var a, double k) {
    if (!(k > 0.0)) throw ArgumentError("steep_sigmoid: k must be positive");
    Tape& t = *a.tape;
    const int ai = a.id;
    Eigen::ArrayXd y = 1.0 / (1.0 + (-k * a.value()).exp());
    Var out = t.emplace(a.shape(), std::move(y), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi, k](Tape& tp) {
        const auto& y = tp.at(oi).value;
        tp.accumulate(ai, tp.at(oi).grad * (k * y * (1.0 - y)));
    };
    return out;
}

Var exp_op(Var a) {
    Tape& t = *a.tape;
    const int ai = a.id;
    Var out = t.emplace(a.shape(), a.value().exp(), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi](Tape& tp) { tp.accumulate(ai, tp.at(oi).grad * tp.at(oi).value); };
    return out;
}

Var log_op(Var a) {
    Tape& t = *a.tape;
    const int ai = a.id;
    Var out = t.emplace(a.shape(), a.value().log(), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi](Tape& tp) { tp.accumulate(ai, tp.at(oi).grad / tp.at(ai).value); };
    return out;
}

Var square(Var a) {
    Tape& t = *a.tape;
    const int ai = a.id;
    Var out = t.emplace(a.shape(), a.value().square(), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi](Tape& tp) { tp.accumulate(ai, tp.at(oi).grad * 2.0 * tp.at(ai).value); };
    return out;
}

// ---- reductions --------------------------------------------------------------

Var sum(Var a) {
    Tape& t = *a.tape;
    const int ai = a.id;
    Eigen::ArrayXd v(1);
    v[0] = a.value().sum();
    Var out = t.emplace(Shape{1}, std::move(v), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi](Tape& tp) {
        const double g = tp.at(oi).grad[0];
        tp.accumulate(ai, Eigen::ArrayXd::Constant(tp.at(ai).value.size(), g));
    };
    return out;
}

Var mean(Var a) {
    Tape& t = *a.tape;
    const int ai = a.id;
    const double n = static_cast<double>(a.size());
    Eigen::ArrayXd v(1);
    v[0] = a.value().sum() / n;
    Var out = t.emplace(Shape{1}, std::move(v), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi, n](Tape& tp) {
        const double g = tp.at(oi).grad[0] / n;
        tp.accumulate(ai, Eigen::ArrayXd::Constant(tp.at(ai).value.size(), g));
    };
    return out;
}

// ---- structure ----------------------------------------------------------------

Var reshape(Var a, Shape shape) {
    if (shape_size(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tape& t = *a.tape;
    const int ai = a.id;
    Var out = t.emplace(std::move(shape), a.value(), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi](Tape& tp) { tp.accumulate(ai, tp.at(oi).grad); };
    return out;
}

Var concat(Var a, Var b, int axis) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size() || axis < 0 || axis >= static_cast<int>(sa.size()))
        throw ShapeError("concat: incompatible ranks " + shape_str(sa) + " vs " + shape_str(sb));
    for (int i = 0; i < static_cast<int>(sa.size()); ++i)
        if (i != axis && sa[i] != sb[i])
            throw ShapeError("concat: shapes differ off-axis: " + shape_str(sa) + " vs " + shape_str(sb));

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sa[i];
    for (int i = axis + 1; i < static_cast<int>(sa.size()); ++i) inner *= sa[i];
    const std::int64_t wa = sa[axis] * inner, wb = sb[axis] * inner;

    Shape so = sa;
    so[axis] += sb[axis];
    Eigen::ArrayXd v(shape_size(so));
    for (std::int64_t o = 0; o < outer; ++o) {
        v.segment(o * (wa + wb), wa) = a.value().segment(o * wa, wa);
        v.segment(o * (wa + wb) + wa, wb) = b.value().segment(o * wb, wb);
    }
    Tape& t = *a.tape;
    const int ai = a.id, bi = b.id;
    Var out = t.emplace(std::move(so), std::move(v), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, bi, oi, outer, wa, wb](Tape& tp) {
        const auto& g = tp.at(oi).grad;
        Eigen::ArrayXd ga(outer * wa), gb(outer * wb);
        for (std::int64_t o = 0; o < outer; ++o) {
            ga.segment(o * wa, wa) = g.segment(o * (wa + wb), wa);
            gb.segment(o * wb, wb) = g.segment(o * (wa + wb) + wa, wb);
        }
        tp.accumulate(ai, ga);
        tp.accumulate(bi, gb);
    };
    return out;
}

Var slice_cols(Var a, int begin, int len) {
    const Shape& s = a.shape();
    if (s.size() != 2) throw ShapeError("slice_cols: need rank-2 input, got " + shape_str(s));
    if (begin < 0 || len <= 0 || begin + len > s[1])
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(begin + len) +
                         ") outside " + shape_str(s));
    const int rows = s[0], cols = s[1];
    Eigen::ArrayXd v(static_cast<std::int64_t>(rows) * len);
    for (int r = 0; r < rows; ++r)
        v.segment(static_cast<std::int64_t>(r) * len, len) =
            a.value().segment(static_cast<std::int64_t>(r) * cols + begin, len);
    Tape& t = *a.tape;
    const int ai = a.id;
    Var out = t.emplace(Shape{rows, len}, std::move(v), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, oi, rows, cols, begin, len](Tape& tp) {
        Eigen::ArrayXd ga = Eigen::ArrayXd::Zero(static_cast<std::int64_t>(rows) * cols);
        const auto& g = tp.at(oi).grad;
        for (int r = 0; r < rows; ++r)
            ga.segment(static_cast<std::int64_t>(r) * cols + begin, len) =
                g.segment(static_cast<std::int64_t>(r) * len, len);
        tp.accumulate(ai, ga);
    };
    return out;
}

// ---- linear algebra ------------------------------------------------------------

Var matmul(Var a, Var b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " vs " + shape_str(sb));
    const int m = sa[0], k = sa[1], n = sb[1];
    Eigen::ArrayXd v(static_cast<std::int64_t>(m) * n);
    {
        CMapRM am(a.value().data(), m, k), bm(b.value().data(), k, n);
        MapRM vm(v.data(), m, n);
        vm.noalias() = am * bm;
    }
    Tape& t = *a.tape;
    const int ai = a.id, bi = b.id;
    Var out = t.emplace(Shape{m, n}, std::move(v), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, bi, oi, m, k, n](Tape& tp) {
        CMapRM g(tp.at(oi).grad.data(), m, n);
        CMapRM am(tp.at(ai).value.data(), m, k), bm(tp.at(bi).value.data(), k, n);
        Eigen::ArrayXd ga(static_cast<std::int64_t>(m) * k), gb(static_cast<std::int64_t>(k) * n);
        MapRM gam(ga.data(), m, k), gbm(gb.data(), k, n);
        gam.noalias() = g * bm.transpose();
        gbm.noalias() = am.transpose() * g;
        tp.accumulate(ai, ga);
        tp.accumulate(bi, gb);
    };
    return out;
}

Var bias_add(Var a, Var b, int axis) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sb.size() != 1 || axis < 0 || axis >= static_cast<int>(sa.size()) || sb[0] != sa[axis])
        throw ShapeError("bias_add: bias " + shape_str(sb) + " does not match axis " + std::to_string(axis) +
                         " of " + shape_str(sa));
    std::int64_t inner = 1;
    for (int i = axis + 1; i < static_cast<int>(sa.size()); ++i) inner *= sa[i];
    const int c = sa[axis];
    Eigen::ArrayXd v = a.value();
    const auto& bv = b.value();
    for (std::int64_t i = 0; i < v.size(); ++i) v[i] += bv[(i / inner) % c];
    Tape& t = *a.tape;
    const int ai = a.id, bi = b.id;
    Var out = t.emplace(sa, std::move(v), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [ai, bi, oi, inner, c](Tape& tp) {
        const auto& g = tp.at(oi).grad;
        tp.accumulate(ai, g);
        Eigen::ArrayXd gb = Eigen::ArrayXd::Zero(c);
        for (std::int64_t i = 0; i < g.size(); ++i) gb[(i / inner) % c] += g[i];
        tp.accumulate(bi, gb);
    };
    return out;
}

// ---- convolutions ----------------------------------------------------------------

namespace {

Var make_conv(const char* prim, Var x, Var w, int stride, int pad, int rank) {
    Tape& t = *x.tape;
    const ConvDims d = conv_dims(prim, x.shape(), w.shape(), stride, pad, rank);
    Shape out_shape = {d.n, d.oc};
    for (int e : d.out_sp) out_shape.push_back(e);
    Eigen::ArrayXd y = conv_forward(x.value(), w.value(), d, rank);
    const int xi = x.id, wi = w.id;
    Var out = t.emplace(std::move(out_shape), std::move(y), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [xi, wi, oi, d, rank](Tape& tp) {
        Eigen::ArrayXd gx = Eigen::ArrayXd::Zero(tp.at(xi).value.size());
        Eigen::ArrayXd gw = Eigen::ArrayXd::Zero(tp.at(wi).value.size());
        conv_backward(tp.at(xi).value, tp.at(wi).value, tp.at(oi).grad, d, rank, &gx, &gw);
        tp.accumulate(xi, gx);
        tp.accumulate(wi, gw);
    };
    return out;
}

// transposed conv: forward = conv's input-gradient; kernel shape (Cin, Cout, k, ...)
Var make_convt(const char* prim, Var z, Var w, int stride, int pad, int rank) {
    Tape& t = *z.tape;
    const Shape& zs = z.shape();
    const Shape& ws = w.shape();
    require(static_cast<int>(zs.size()) == rank + 2,
            std::string(prim) + ": input must be rank " + std::to_string(rank + 2) + ", got " + shape_str(zs));
    require(static_cast<int>(ws.size()) == rank + 2 && ws[0] == zs[1],
            std::string(prim) + ": kernel " + shape_str(ws) + " does not match input " + shape_str(zs));

    Shape xs = {zs[0], ws[1]};
    for (int a = 0; a < rank; ++a) {
        const int e = convt_out_extent(zs[2 + a], ws[2], stride, pad);
        require(e >= 1, std::string(prim) + ": degenerate output extent for input " + shape_str(zs));
        xs.push_back(e);
    }
    const ConvDims d = conv_dims(prim, xs, ws, stride, pad, rank);
    for (int a = 0; a < rank; ++a)
        require(d.out_sp[a] == zs[2 + a],
                std::string(prim) + ": stride/pad do not invert cleanly for " + shape_str(zs));

    Eigen::ArrayXd y = Eigen::ArrayXd::Zero(shape_size(xs));
    conv_backward(z.value() /*x unused without gw*/, w.value(), z.value(), d, rank, &y, nullptr);

    const int zi = z.id, wi = w.id;
    Var out = t.emplace(xs, std::move(y), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [zi, wi, oi, d, rank](Tape& tp) {
        // d(out)/d(z): conv forward of the output gradient
        Eigen::ArrayXd gz = conv_forward(tp.at(oi).grad, tp.at(wi).value, d, rank);
        tp.accumulate(zi, gz);
        // d(out)/d(w): conv weight-gradient with x := out-grad, gy := z
        Eigen::ArrayXd gw = Eigen::ArrayXd::Zero(tp.at(wi).value.size());
        conv_backward(tp.at(oi).grad, tp.at(wi).value, tp.at(zi).value, d, rank, nullptr, &gw);
        tp.accumulate(wi, gw);
    };
    return out;
}

Var make_maxpool(const char* prim, Var x, int k, int stride, int rank) {
    Tape& t = *x.tape;
    const Shape&s = x.shape();
    require(static_cast<int>(s.size()) == rank + 2,
            std::string(prim) + ": input must be rank " + std::to_string(rank + 2) + ", got " + shape_str(s));
    require(k >= 1 && stride >= 1, std::string(prim) + ": bad window");
    Shape so = {s[0], s[1]};
    std::int64_t out_sp = 1, in_sp = 1;
    for (int a = 0; a < rank; ++a) {
        const int e = (s[2 + a] - k) / stride + 1;
        require(e >= 1, std::string(prim) + ": window too large for " + shape_str(s));
        so.push_back(e);
        out_sp *= e;
        in_sp *= s[2 + a];
    }

    const std::int64_t planes = static_cast<std::int64_t>(s[0]) * s[1];
    Eigen::ArrayXd v(planes * out_sp);
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(planes * out_sp));

    const int D = rank == 3 ? s[2] : 1;
    const int H = s[rank == 3 ? 3 : 2];
    const int W = s[rank == 3 ? 4 : 3];
    const int OD = rank == 3 ? so[2] : 1;
    const int OH = so[rank == 3 ? 3 : 2];
    const int OW = so[rank == 3 ? 4 : 3];

    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const double* src = x.value().data() + pl * in_sp;
        double* dst = v.data() + pl * out_sp;
        std::int64_t* am = argmax.data() + pl * out_sp;
        std::int64_t o = 0;
        for (int od = 0; od < OD; ++od)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow, ++o) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t besti = 0;
                    for (int kd = 0; kd < (rank == 3 ? k : 1); ++kd)
                        for (int kh = 0; kh < k; ++kh)
                            for (int kw = 0; kw < k; ++kw) {
                                const int id = od * stride + kd, ih = oh * stride + kh, iw = ow * stride + kw;
                                if (id >= D || ih >= H || iw >= W) continue;
                                const std::int64_t ix = (static_cast<std::int64_t>(id) * H + ih) * W + iw;
                                if (src[ix] > best) {
                                    best = src[ix];
                                    besti = ix;
                                }
                            }
                    dst[o] = best;
                    am[o] = besti;
                }
    }

    const int xi = x.id;
    Var out = t.emplace(std::move(so), std::move(v), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [xi, oi, planes, out_sp, in_sp, argmax = std::move(argmax)](Tape& tp) {
        Eigen::ArrayXd gx = Eigen::ArrayXd::Zero(tp.at(xi).value.size());
        const auto& g = tp.at(oi).grad;
        for (std::int64_t pl = 0; pl < planes; ++pl)
            for (std::int64_t o = 0; o < out_sp; ++o)
                gx[pl * in_sp + argmax[static_cast<std::size_t>(pl * out_sp + o)]] += g[pl * out_sp + o];
        tp.accumulate(xi, gx);
    };
    return out;
}

}  // namespace

Var conv2d(Var x, Var w, int stride, int pad) { return make_conv("conv2d", x, w, stride, pad, 2); }
Var conv3d(Var x, Var w, int stride, int pad) { return make_conv("conv3d", x, w, stride, pad, 3); }
Var conv_transpose2d(Var z, Var w, int stride, int pad) { return make_convt("conv_transpose2d", z, w, stride, pad, 2); }
Var conv_transpose3d(Var z, Var w, int stride, int pad) { return make_convt("conv_transpose3d", z, w, stride, pad, 3); }
Var maxpool2d(Var x, int k, int stride) { return make_maxpool("maxpool2d", x, k, stride, 2); }
Var maxpool3d(Var x, int k, int stride) { return make_maxpool("maxpool3d", x, k, stride, 3); }

// ---- losses -------------------------------------------------------------------

Var bce_sum(Var p, const Eigen::ArrayXd& target, double eps) {
    if (p.size() != target.size())
        throw ShapeError("bce_sum: prediction " + shape_str(p.shape()) + " vs target of length " +
                         std::to_string(target.size()));
    Tape& t = *p.tape;
    const int pi = p.id;
    Eigen::ArrayXd pc = p.value().max(eps).min(1.0 - eps);
    Eigen::ArrayXd v(1);
    v[0] = -(target * pc.log() + (1.0 - target) * (1.0 - pc).log()).sum();
    Var out = t.emplace(Shape{1}, std::move(v), nullptr);
    const int oi = out.id;
    t.at(oi).backward = [pi, oi, target, eps](Tape& tp) {
        const double g = tp.at(oi).grad[0];
        Eigen::ArrayXd pc = tp.at(pi).value.max(eps).min(1.0 - eps);
        tp.accumulate(pi, g * (pc - target) / (pc * (1.0 - pc)));
    };
    return out;
}

}  // namespace poro::diff
