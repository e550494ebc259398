#include <algorithm>
#include <cmath>

#include "afrd/ops.hpp"

AFRD_BEGIN_NAMESPACE

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(op, "shape", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

void require_axis(const char* op, const Tensor& x, std::size_t axis) {
    if (axis >= x.ndim()) {
        throw DimensionError(op, "axis " + std::to_string(axis),
                             "out of range for shape " + shape_str(x.shape()));
    }
}

// Splits a shape around `axis` into (outer, axis extent, inner).
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

void accumulate(Node& n, const std::vector<real>& g) {
    auto& buf = n.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
    const auto xd = x.data();
    std::vector<real> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > real(0) ? xd[i] : real(0);
    return make_result("relu", x.shape(), std::move(out), {x}, [](Node& self) {
        Node& xn = *self.parents[0];
        auto& g = xn.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xn.data[i] > real(0)) g[i] += self.grad[i];
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) accumulate(*p, self.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
        if (self.parents[0]->requires_grad) accumulate(*self.parents[0], self.grad);
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
        Node& an = *self.parents[0];
        Node& bn = *self.parents[1];
        if (an.requires_grad) {
            auto& g = an.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn.data[i];
        }
        if (bn.requires_grad) {
            auto& g = bn.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an.data[i];
        }
    });
}

Tensor scale(const Tensor& x, real factor) {
    std::vector<real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * factor;
    return make_result("scale", x.shape(), std::move(out), {x}, [factor](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

Tensor add_scalar(const Tensor& x, real value) {
    std::vector<real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) + value;
    return make_result("add_scalar", x.shape(), std::move(out), {x},
                       [](Node& self) { accumulate(*self.parents[0], self.grad); });
}

// ---------------------------------------------------------------------------
// Shape and reductions
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape", "numel", shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    std::vector<real> out(x.data().begin(), x.data().end());
    return make_result("reshape", std::move(shape), std::move(out), {x},
                       [](Node& self) { accumulate(*self.parents[0], self.grad); });
}

Tensor flatten(const Tensor& x) {
    if (x.ndim() < 1) throw DimensionError("flatten", "rank", "needs a batch axis");
    return reshape(x, Shape{x.dim(0), x.numel() / std::max<std::size_t>(x.dim(0), 1)});
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
    constexpr const char* op = "concat";
    if (xs.empty()) throw DimensionError(op, "inputs", "nothing to concatenate");
    require_axis(op, xs[0], axis);
    Shape shape = xs[0].shape();
    std::size_t total = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const auto& s = xs[k].shape();
        if (s.size() != shape.size()) throw DimensionError(op, "rank", "inputs differ in rank");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != shape[i]) {
                throw DimensionError(op, "axis " + std::to_string(i),
                                     shape_str(s) + " vs " + shape_str(shape));
            }
        }
        total += s[axis];
    }
    shape[axis] = total;
    const auto split = split_at(shape, axis);

    std::vector<real> out(shape_numel(shape));
    std::vector<std::size_t> offsets;  // along axis
    std::size_t off = 0;
    for (const auto& t : xs) {
        offsets.push_back(off);
        const std::size_t ext = t.dim(axis);
        const auto src = t.data();
        for (std::size_t o = 0; o < split.outer; ++o) {
            std::copy_n(src.data() + o * ext * split.inner, ext * split.inner,
                        out.data() + (o * total + off) * split.inner);
        }
        off += ext;
    }
    return make_result(op, std::move(shape), std::move(out), xs, [split, offsets, total](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            Node& p = *self.parents[k];
            if (!p.requires_grad) continue;
            auto& g = p.grad_buffer();
            const std::size_t ext = g.size() / (split.outer * split.inner);
            for (std::size_t o = 0; o < split.outer; ++o) {
                const real* src = self.grad.data() + (o * total + offsets[k]) * split.inner;
                real* dst = g.data() + o * ext * split.inner;
                for (std::size_t i = 0; i < ext * split.inner; ++i) dst[i] += src[i];
            }
        }
    });
}

Tensor sum(const Tensor& x) {
    real s = 0;
    for (auto v : x.data()) s += v;
    return make_result("sum", Shape{1}, std::vector<real>{s}, {x}, [](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    real s = 0;
    for (auto v : x.data()) s += v;
    const real inv = real(1) / static_cast<real>(x.numel());
    return make_result("mean", Shape{1}, std::vector<real>{s * inv}, {x}, [inv](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0] * inv;
    });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    require_axis("softmax", x, axis);
    const auto split = split_at(x.shape(), axis);
    if (split.extent < 1) throw DimensionError("softmax", "axis extent", "must be >= 1");
    std::vector<real> out(x.numel());
    const auto xd = x.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t i = 0; i < split.inner; ++i) {
            const std::size_t base = o * split.extent * split.inner + i;
            real mx = xd[base];
            for (std::size_t k = 1; k < split.extent; ++k) mx = std::max(mx, xd[base + k * split.inner]);
            real z = 0;
            for (std::size_t k = 0; k < split.extent; ++k) {
                const real e = std::exp(xd[base + k * split.inner] - mx);
                out[base + k * split.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < split.extent; ++k) out[base + k * split.inner] /= z;
        }
    }
    return make_result("softmax", x.shape(), std::move(out), {x}, [split](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < split.outer; ++o) {
            for (std::size_t i = 0; i < split.inner; ++i) {
                const std::size_t base = o * split.extent * split.inner + i;
                real dot = 0;
                for (std::size_t k = 0; k < split.extent; ++k) {
                    const std::size_t idx = base + k * split.inner;
                    dot += self.grad[idx] * self.data[idx];
                }
                for (std::size_t k = 0; k < split.extent; ++k) {
                    const std::size_t idx = base + k * split.inner;
                    g[idx] += self.data[idx] * (self.grad[idx] - dot);
                }
            }
        }
    });
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.ndim() != 4) throw DimensionError("global_avg_pool", "rank", "expected NCHW");
    const std::size_t bc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
    const real inv = real(1) / static_cast<real>(plane);
    std::vector<real> out(bc);
    const auto xd = x.data();
    for (std::size_t i = 0; i < bc; ++i) {
        real s = 0;
        for (std::size_t p = 0; p < plane; ++p) s += xd[i * plane + p];
        out[i] = s * inv;
    }
    return make_result("global_avg_pool", Shape{x.dim(0), x.dim(1)}, std::move(out), {x},
                       [bc, plane, inv](Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t i = 0; i < bc; ++i)
                               for (std::size_t p = 0; p < plane; ++p) g[i * plane + p] += self.grad[i] * inv;
                       });
}

Tensor avg_pool(const Tensor& x, int kernel, int stride) {
    constexpr const char* op = "avg_pool";
    if (x.ndim() != 4) throw DimensionError(op, "rank", "expected NCHW");
    if (kernel < 1 || stride < 1) throw DimensionError(op, "kernel", "kernel and stride must be >= 1");
    const auto k = static_cast<std::size_t>(kernel), s = static_cast<std::size_t>(stride);
    const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    if (k > h) throw DimensionError(op, "height", "kernel taller than input");
    if (k > w) throw DimensionError(op, "width", "kernel wider than input");
    const std::size_t oh = (h - k) / s + 1, ow = (w - k) / s + 1;
    const real inv = real(1) / static_cast<real>(k * k);
    std::vector<real> out(bc * oh * ow);
    const auto xd = x.data();
    for (std::size_t c = 0; c < bc; ++c)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                real acc = 0;
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) acc += xd[(c * h + oy * s + i) * w + ox * s + j];
                out[(c * oh + oy) * ow + ox] = acc * inv;
            }
    return make_result(op, Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                       [bc, h, w, oh, ow, k, s, inv](Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t c = 0; c < bc; ++c)
                               for (std::size_t oy = 0; oy < oh; ++oy)
                                   for (std::size_t ox = 0; ox < ow; ++ox) {
                                       const real d = self.grad[(c * oh + oy) * ow + ox] * inv;
                                       for (std::size_t i = 0; i < k; ++i)
                                           for (std::size_t j = 0; j < k; ++j)
                                               g[(c * h + oy * s + i) * w + ox * s + j] += d;
                                   }
                       });
}

namespace {

// Source sampling for one output coordinate with half-pixel centres.
struct Tap {
    std::size_t lo, hi;
    real w_hi;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
    std::vector<Tap> taps(out);
    const real ratio = static_cast<real>(in) / static_cast<real>(out);
    for (std::size_t o = 0; o < out; ++o) {
        real src = (static_cast<real>(o) + real(0.5)) * ratio - real(0.5);
        if (src < 0) src = 0;
        auto lo = static_cast<std::size_t>(src);
        if (lo > in - 1) lo = in - 1;
        const std::size_t hi = std::min(lo + 1, in - 1);
        taps[o] = {lo, hi, src - static_cast<real>(lo)};
    }
    return taps;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, std::size_t target_h, std::size_t target_w) {
    constexpr const char* op = "bilinear_upsample";
    if (x.ndim() != 4) throw DimensionError(op, "rank", "expected NCHW");
    if (target_h < 1) throw DimensionError(op, "target height", "must be >= 1");
    if (target_w < 1) throw DimensionError(op, "target width", "must be >= 1");
    const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto ty = bilinear_taps(h, target_h);
    const auto tx = bilinear_taps(w, target_w);
    std::vector<real> out(bc * target_h * target_w);
    const auto xd = x.data();
    for (std::size_t c = 0; c < bc; ++c) {
        const real* src = xd.data() + c * h * w;
        for (std::size_t oy = 0; oy < target_h; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < target_w; ++ox) {
                const auto& b = tx[ox];
                const real top = src[a.lo * w + b.lo] * (1 - b.w_hi) + src[a.lo * w + b.hi] * b.w_hi;
                const real bot = src[a.hi * w + b.lo] * (1 - b.w_hi) + src[a.hi * w + b.hi] * b.w_hi;
                out[(c * target_h + oy) * target_w + ox] = top * (1 - a.w_hi) + bot * a.w_hi;
            }
        }
    }
    return make_result(op, Shape{x.dim(0), x.dim(1), target_h, target_w}, std::move(out), {x},
                       [bc, h, w, ty, tx](Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           const std::size_t th = ty.size(), tw = tx.size();
                           for (std::size_t c = 0; c < bc; ++c) {
                               real* dst = g.data() + c * h * w;
                               for (std::size_t oy = 0; oy < th; ++oy) {
                                   const auto& a = ty[oy];
                                   for (std::size_t ox = 0; ox < tw; ++ox) {
                                       const auto& b = tx[ox];
                                       const real d = self.grad[(c * th + oy) * tw + ox];
                                       dst[a.lo * w + b.lo] += d * (1 - a.w_hi) * (1 - b.w_hi);
                                       dst[a.lo * w + b.hi] += d * (1 - a.w_hi) * b.w_hi;
                                       dst[a.hi * w + b.lo] += d * a.w_hi * (1 - b.w_hi);
                                       dst[a.hi * w + b.hi] += d * a.w_hi * b.w_hi;
                                   }
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                   bool training) {
    constexpr const char* op = "batchnorm2d";
    if (x.ndim() != 4) throw DimensionError(op, "rank", "expected NCHW");
    const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
    for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
        if (t->numel() != ch) {
            throw DimensionError(op, "channels",
                                 "expected " + std::to_string(ch) + ", got " + shape_str(t->shape()));
        }
    }
    const std::size_t count = batch * plane;
    if (training && count < 2) throw DimensionError(op, "batch", "training mode needs > 1 value per channel");

    std::vector<real> mu(ch), inv_std(ch);
    const auto xd = x.data();
    if (training) {
        auto rm = state.running_mean.mutable_data();
        auto rv = state.running_var.mutable_data();
        for (std::size_t c = 0; c < ch; ++c) {
            real s = 0;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t p = 0; p < plane; ++p) s += xd[(b * ch + c) * plane + p];
            const real m = s / static_cast<real>(count);
            real v = 0;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t p = 0; p < plane; ++p) {
                    const real d = xd[(b * ch + c) * plane + p] - m;
                    v += d * d;
                }
            const real var = v / static_cast<real>(count);
            mu[c] = m;
            inv_std[c] = real(1) / std::sqrt(var + state.eps);
            const real unbiased = v / static_cast<real>(count - 1);
            rm[c] = (1 - state.momentum) * rm[c] + state.momentum * m;
            rv[c] = (1 - state.momentum) * rv[c] + state.momentum * unbiased;
        }
    } else {
        const auto rm = state.running_mean.data();
        const auto rv = state.running_var.data();
        for (std::size_t c = 0; c < ch; ++c) {
            mu[c] = rm[c];
            inv_std[c] = real(1) / std::sqrt(rv[c] + state.eps);
        }
    }

    std::vector<real> xhat(x.numel());
    std::vector<real> out(x.numel());
    const auto gd = gamma.data();
    const auto bd = beta.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = (b * ch + c) * plane + p;
                xhat[i] = (xd[i] - mu[c]) * inv_std[c];
                out[i] = gd[c] * xhat[i] + bd[c];
            }

    return make_result(
        op, x.shape(), std::move(out), {x, gamma, beta},
        [batch, ch, plane, count, training, inv_std, xhat = std::move(xhat)](Node& self) {
            Node& xn = *self.parents[0];
            Node& gn = *self.parents[1];
            Node& bn = *self.parents[2];
            std::vector<real> sum_dy(ch, 0), sum_dy_xhat(ch, 0);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t c = 0; c < ch; ++c)
                    for (std::size_t p = 0; p < plane; ++p) {
                        const std::size_t i = (b * ch + c) * plane + p;
                        sum_dy[c] += self.grad[i];
                        sum_dy_xhat[c] += self.grad[i] * xhat[i];
                    }
            if (gn.requires_grad) {
                auto& g = gn.grad_buffer();
                for (std::size_t c = 0; c < ch; ++c) g[c] += sum_dy_xhat[c];
            }
            if (bn.requires_grad) {
                auto& g = bn.grad_buffer();
                for (std::size_t c = 0; c < ch; ++c) g[c] += sum_dy[c];
            }
            if (!xn.requires_grad) return;
            auto& g = xn.grad_buffer();
            const real n = static_cast<real>(count);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t c = 0; c < ch; ++c) {
                    const real k = gn.data[c] * inv_std[c];
                    for (std::size_t p = 0; p < plane; ++p) {
                        const std::size_t i = (b * ch + c) * plane + p;
                        if (training) {
                            g[i] += k * (self.grad[i] - sum_dy[c] / n - xhat[i] * sum_dy_xhat[c] / n);
                        } else {
                            g[i] += k * self.grad[i];
                        }
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// AFRD specific
// ---------------------------------------------------------------------------

Tensor cosine_map(const Tensor& a, const Tensor& b, real eps) {
    constexpr const char* op = "cosine_map";
    if (a.ndim() != 4) throw DimensionError(op, "rank", "expected NCHW, got " + shape_str(a.shape()));
    require_same_shape(op, a, b);
    if (!(eps > 0)) throw DimensionError(op, "eps", "eps must be positive");
    const std::size_t batch = a.dim(0), ch = a.dim(1), plane = a.dim(2) * a.dim(3);
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<real> dot(batch * plane, 0), na(batch * plane, 0), nb(batch * plane, 0);
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = (n * ch + c) * plane + p;
                const std::size_t q = n * plane + p;
                dot[q] += ad[i] * bd[i];
                na[q] += ad[i] * ad[i];
                nb[q] += bd[i] * bd[i];
            }
    std::vector<real> out(batch * plane);
    for (std::size_t q = 0; q < out.size(); ++q) {
        na[q] = std::sqrt(na[q]);
        nb[q] = std::sqrt(nb[q]);
        out[q] = dot[q] / (na[q] * nb[q] + eps);
    }
    return make_result(op, Shape{batch, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                       [batch, ch, plane, eps, dot, na, nb](Node& self) {
                           Node& an = *self.parents[0];
                           Node& bn = *self.parents[1];
                           for (std::size_t n = 0; n < batch; ++n)
                               for (std::size_t p = 0; p < plane; ++p) {
                                   const std::size_t q = n * plane + p;
                                   const real den = na[q] * nb[q] + eps;
                                   const real g = self.grad[q];
                                   // d cos / d a_c = b_c/den - dot * nb * a_c / (na * den^2)
                                   const real ka = na[q] > 0 ? dot[q] * nb[q] / (na[q] * den * den) : real(0);
                                   const real kb = nb[q] > 0 ? dot[q] * na[q] / (nb[q] * den * den) : real(0);
                                   for (std::size_t c = 0; c < ch; ++c) {
                                       const std::size_t i = (n * ch + c) * plane + p;
                                       if (an.requires_grad)
                                           an.grad_buffer()[i] += g * (bn.data[i] / den - ka * an.data[i]);
                                       if (bn.requires_grad)
                                           bn.grad_buffer()[i] += g * (an.data[i] / den - kb * bn.data[i]);
                                   }
                               }
                       });
}

Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& weights) {
    constexpr const char* op = "weighted_sum";
    if (xs.empty()) throw DimensionError(op, "inputs", "no tensors to fuse");
    const Shape& shape = xs[0].shape();
    if (shape.empty()) throw DimensionError(op, "rank", "inputs need a batch axis");
    for (std::size_t j = 1; j < xs.size(); ++j) {
        if (xs[j].shape() != shape) {
            throw DimensionError(op, "input " + std::to_string(j),
                                 shape_str(xs[j].shape()) + " vs " + shape_str(shape));
        }
    }
    const std::size_t batch = shape[0], n = xs.size();
    if (weights.ndim() != 2 || weights.dim(0) != batch || weights.dim(1) != n) {
        throw DimensionError(op, "weights",
                             "expected [" + std::to_string(batch) + "," + std::to_string(n) + "], got " +
                                 shape_str(weights.shape()));
    }
    const std::size_t per = shape_numel(shape) / std::max<std::size_t>(batch, 1);
    std::vector<real> out(shape_numel(shape), 0);
    const auto wd = weights.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < n; ++j) {
            const real wj = wd[b * n + j];
            const real* src = xs[j].data().data() + b * per;
            real* dst = out.data() + b * per;
            for (std::size_t i = 0; i < per; ++i) dst[i] += wj * src[i];
        }
    std::vector<Tensor> parents(xs);
    parents.push_back(weights);
    return make_result(op, shape, std::move(out), parents, [batch, n, per](Node& self) {
        Node& wn = *self.parents[n];
        for (std::size_t j = 0; j < n; ++j) {
            Node& xn = *self.parents[j];
            for (std::size_t b = 0; b < batch; ++b) {
                const real* dy = self.grad.data() + b * per;
                if (xn.requires_grad) {
                    real* gx = xn.grad_buffer().data() + b * per;
                    const real wj = wn.data[b * n + j];
                    for (std::size_t i = 0; i < per; ++i) gx[i] += wj * dy[i];
                }
                if (wn.requires_grad) {
                    real s = 0;
                    const real* x = xn.data.data() + b * per;
                    for (std::size_t i = 0; i < per; ++i) s += x[i] * dy[i];
                    wn.grad_buffer()[b * n + j] += s;
                }
            }
        }
    });
}

AFRD_END_NAMESPACE
