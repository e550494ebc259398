// Convolution, transposed convolution and linear layers (im2col + GEMM).

#include <Eigen/Core>
#include <memory>

#include "afrd/ops.hpp"

AFRD_BEGIN_NAMESPACE

namespace {

using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

struct Geometry {
    std::size_t channels, height, width;  // image side
    std::size_t kh, kw;
    std::size_t stride, pad;
    std::size_t out_h, out_w;  // sliding-window positions

    std::size_t rows() const { return channels * kh * kw; }
    std::size_t cols() const { return out_h * out_w; }
    bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

void im2col(const real* img, const Geometry& g, real* col) {
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                real* row = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
                    real* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
                        std::fill(dst, dst + g.out_w, real(0));
                        continue;
                    }
                    const real* src = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                                      ? real(0)
                                      : src[ix];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds columns back into the image.
void col2im(const real* col, const Geometry& g, real* img) {
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const real* row = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    real* dst = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    const real* src = row + oy * g.out_w;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

void check_rank(const char* op, const Tensor& t, std::size_t rank, const char* what) {
    if (t.ndim() != rank) {
        throw DimensionError(op, std::string(what) + " rank",
                             "expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
    }
}

void check_bias(const char* op, const Tensor& bias, std::size_t channels) {
    if (!bias.defined()) return;
    if (bias.ndim() != 1 || bias.dim(0) != channels) {
        throw DimensionError(op, "bias channels",
                             "expected [" + std::to_string(channels) + "], got " + shape_str(bias.shape()));
    }
}

bool tracking(std::initializer_list<const Tensor*> ts) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : ts) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

std::vector<Tensor> parent_list(const Tensor& x, const Tensor& w, const Tensor& b) {
    std::vector<Tensor> ps{x, w};
    if (b.defined()) ps.push_back(b);
    return ps;
}

void add_bias(real* out, const Tensor& bias, std::size_t channels, std::size_t plane) {
    if (!bias.defined()) return;
    const auto bd = bias.data();
    for (std::size_t c = 0; c < channels; ++c) {
        real* p = out + c * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += bd[c];
    }
}

void accumulate_bias_grad(Node& bias_node, const real* dy, std::size_t channels, std::size_t plane) {
    auto& gb = bias_node.grad_buffer();
    for (std::size_t c = 0; c < channels; ++c) {
        real s = 0;
        const real* p = dy + c * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        gb[c] += s;
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
    constexpr const char* op = "conv2d";
    check_rank(op, x, 4, "input");
    check_rank(op, weight, 4, "weight");
    if (stride < 1) throw DimensionError(op, "stride", "stride must be >= 1");
    if (padding < 0) throw DimensionError(op, "padding", "padding must be >= 0");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != cin) {
        throw DimensionError(op, "input channels",
                             "input has " + std::to_string(cin) + ", weight expects " +
                                 std::to_string(weight.dim(1)));
    }
    check_bias(op, bias, cout);
    const auto p = static_cast<std::size_t>(padding);
    const auto s = static_cast<std::size_t>(stride);
    if (kh > h + 2 * p) throw DimensionError(op, "height", "kernel taller than padded input");
    if (kw > w + 2 * p) throw DimensionError(op, "width", "kernel wider than padded input");

    const Geometry g{cin, h, w, kh, kw, s, p, (h + 2 * p - kh) / s + 1, (w + 2 * p - kw) / s + 1};
    const std::size_t plane = g.cols();
    const bool track = tracking({&x, &weight, &bias});

    std::vector<real> out(batch * cout * plane);
    auto cols = std::make_shared<std::vector<real>>();
    if (!g.is_pointwise()) cols->resize((track ? batch : 1) * g.rows() * plane);

    const ConstMatMap wm(weight.data().data(), cout, g.rows());
    for (std::size_t b = 0; b < batch; ++b) {
        const real* xb = x.data().data() + b * cin * h * w;
        const real* col = xb;
        if (!g.is_pointwise()) {
            real* dst = cols->data() + (track ? b : 0) * g.rows() * plane;
            im2col(xb, g, dst);
            col = dst;
        }
        MatMap yb(out.data() + b * cout * plane, cout, plane);
        yb.noalias() = wm * ConstMatMap(col, g.rows(), plane);
        add_bias(yb.data(), bias, cout, plane);
    }

    Shape shape{batch, cout, g.out_h, g.out_w};
    const bool has_bias = bias.defined();
    return make_result(op, std::move(shape), std::move(out), parent_list(x, weight, bias),
                       [g, cols, batch, cout, plane, has_bias](Node& self) {
                           Node& xn = *self.parents[0];
                           Node& wn = *self.parents[1];
                           const ConstMatMap wm(wn.data.data(), cout, g.rows());
                           std::vector<real> dcol(xn.requires_grad ? g.rows() * plane : 0);
                           for (std::size_t b = 0; b < batch; ++b) {
                               const real* dy = self.grad.data() + b * cout * plane;
                               const ConstMatMap dyb(dy, cout, plane);
                               const real* col = g.is_pointwise()
                                                     ? xn.data.data() + b * g.rows() * plane
                                                     : cols->data() + b * g.rows() * plane;
                               if (wn.requires_grad) {
                                   MatMap gw(wn.grad_buffer().data(), cout, g.rows());
                                   gw.noalias() += dyb * ConstMatMap(col, g.rows(), plane).transpose();
                               }
                               if (has_bias && self.parents[2]->requires_grad) {
                                   accumulate_bias_grad(*self.parents[2], dy, cout, plane);
                               }
                               if (xn.requires_grad) {
                                   real* gx = xn.grad_buffer().data() + b * g.channels * g.height * g.width;
                                   if (g.is_pointwise()) {
                                       MatMap gxb(gx, g.rows(), plane);
                                       gxb.noalias() += wm.transpose() * dyb;
                                   } else {
                                       MatMap dc(dcol.data(), g.rows(), plane);
                                       dc.noalias() = wm.transpose() * dyb;
                                       col2im(dcol.data(), g, gx);
                                   }
                               }
                           }
                       });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
                        int padding) {
    constexpr const char* op = "conv_transpose2d";
    check_rank(op, x, 4, "input");
    check_rank(op, weight, 4, "weight");
    if (stride < 1) throw DimensionError(op, "stride", "stride must be >= 1");
    if (padding < 0) throw DimensionError(op, "padding", "padding must be >= 0");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(0) != cin) {
        throw DimensionError(op, "input channels",
                             "input has " + std::to_string(cin) + ", weight expects " +
                                 std::to_string(weight.dim(0)));
    }
    check_bias(op, bias, cout);
    const auto p = static_cast<std::size_t>(padding);
    const auto s = static_cast<std::size_t>(stride);
    const auto full_h = (h - 1) * s + kh;
    const auto full_w = (w - 1) * s + kw;
    if (full_h <= 2 * p) throw DimensionError(op, "height", "padding consumes the whole output");
    if (full_w <= 2 * p) throw DimensionError(op, "width", "padding consumes the whole output");

    // Geometry of the equivalent forward convolution on the output image.
    const Geometry g{cout, full_h - 2 * p, full_w - 2 * p, kh, kw, s, p, h, w};
    const std::size_t in_plane = h * w;
    const std::size_t out_plane = g.height * g.width;

    std::vector<real> out(batch * cout * out_plane, real(0));
    std::vector<real> col(g.rows() * in_plane);
    const ConstMatMap wm(weight.data().data(), cin, g.rows());
    for (std::size_t b = 0; b < batch; ++b) {
        MatMap cm(col.data(), g.rows(), in_plane);
        cm.noalias() = wm.transpose() * ConstMatMap(x.data().data() + b * cin * in_plane, cin, in_plane);
        real* ob = out.data() + b * cout * out_plane;
        col2im(col.data(), g, ob);
        add_bias(ob, bias, cout, out_plane);
    }

    Shape shape{batch, cout, g.height, g.width};
    const bool has_bias = bias.defined();
    return make_result(op, std::move(shape), std::move(out), parent_list(x, weight, bias),
                       [g, batch, cin, in_plane, out_plane, has_bias](Node& self) {
                           Node& xn = *self.parents[0];
                           Node& wn = *self.parents[1];
                           const ConstMatMap wm(wn.data.data(), cin, g.rows());
                           std::vector<real> dcol(g.rows() * in_plane);
                           for (std::size_t b = 0; b < batch; ++b) {
                               const real* dy = self.grad.data() + b * g.channels * out_plane;
                               if (has_bias && self.parents[2]->requires_grad) {
                                   accumulate_bias_grad(*self.parents[2], dy, g.channels, out_plane);
                               }
                               im2col(dy, g, dcol.data());
                               const ConstMatMap dc(dcol.data(), g.rows(), in_plane);
                               if (wn.requires_grad) {
                                   MatMap gw(wn.grad_buffer().data(), cin, g.rows());
                                   gw.noalias() +=
                                       ConstMatMap(xn.data.data() + b * cin * in_plane, cin, in_plane) *
                                       dc.transpose();
                               }
                               if (xn.requires_grad) {
                                   MatMap gx(xn.grad_buffer().data() + b * cin * in_plane, cin, in_plane);
                                   gx.noalias() += wm * dc;
                               }
                           }
                       });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    constexpr const char* op = "linear";
    check_rank(op, x, 2, "input");
    check_rank(op, weight, 2, "weight");
    const std::size_t batch = x.dim(0), din = x.dim(1), dout = weight.dim(0);
    if (weight.dim(1) != din) {
        throw DimensionError(op, "input features",
                             "input has " + std::to_string(din) + ", weight expects " +
                                 std::to_string(weight.dim(1)));
    }
    check_bias(op, bias, dout);

    std::vector<real> out(batch * dout);
    MatMap y(out.data(), batch, dout);
    const ConstMatMap xm(x.data().data(), batch, din);
    const ConstMatMap wm(weight.data().data(), dout, din);
    y.noalias() = xm * wm.transpose();
    if (bias.defined()) {
        const auto bd = bias.data();
        for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t o = 0; o < dout; ++o) y(i, o) += bd[o];
    }

    const bool has_bias = bias.defined();
    return make_result(op, Shape{batch, dout}, std::move(out), parent_list(x, weight, bias),
                       [batch, din, dout, has_bias](Node& self) {
                           Node& xn = *self.parents[0];
                           Node& wn = *self.parents[1];
                           const ConstMatMap dy(self.grad.data(), batch, dout);
                           if (xn.requires_grad) {
                               MatMap gx(xn.grad_buffer().data(), batch, din);
                               gx.noalias() += dy * ConstMatMap(wn.data.data(), dout, din);
                           }
                           if (wn.requires_grad) {
                               MatMap gw(wn.grad_buffer().data(), dout, din);
                               gw.noalias() += dy.transpose() * ConstMatMap(xn.data.data(), batch, din);
                           }
                           if (has_bias && self.parents[2]->requires_grad) {
                               auto& gb = self.parents[2]->grad_buffer();
                               for (std::size_t i = 0; i < batch; ++i)
                                   for (std::size_t o = 0; o < dout; ++o) gb[o] += dy(i, o);
                           }
                       });
}

AFRD_END_NAMESPACE
