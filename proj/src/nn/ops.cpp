#include "stgl/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "stgl/error.hpp"

namespace stgl::nn {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

void require(bool ok, const std::string& what) {
    if (!ok) throw InputError(what);
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
}

// Grad buffer of parent i, or nullptr when it does not take gradients.
double* parent_grad(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

const std::vector<double>& parent_value(Node& self, std::size_t i) { return self.parents[i]->value; }

template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D dfdx) {
    std::vector<double> out(x.numel());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    return Tensor::from_op(x.shape(), std::move(out), {x}, [dfdx](Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        const auto& xv = parent_value(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
    });
}

void record_signs(std::span<const double> v) {
    if (!kink::active()) return;
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        word = (word << 1) | (v[i] > 0.0 ? 1u : 0u);
        if (i % 64 == 63) {
            kink::record(word);
            word = 0;
        }
    }
    kink::record(word ^ v.size());
}

struct ConvGeom {
    int channels, height, width, kh, kw, stride, pad, out_h, out_w;
};

void im2col(const double* img, const ConvGeom& g, double* col) {
    const int p = g.out_h * g.out_w;
    for (int c = 0; c < g.channels; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                double* row = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * p;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ki;
                    double* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= g.height) {
                        std::fill(dst, dst + g.out_w, 0.0);
                        continue;
                    }
                    const double* src = img + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kj;
                        dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, const ConvGeom& g, double* img) {
    const int p = g.out_h * g.out_w;
    for (int c = 0; c < g.channels; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                const double* row = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * p;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ki;
                    if (iy < 0 || iy >= g.height) continue;
                    double* dst = img + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
                    const double* src = row + oy * g.out_w;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kj;
                        if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (double* g = parent_grad(self, k)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (double* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
        const auto& av = parent_value(self, 0);
        const auto& bv = parent_value(self, 1);
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (double* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

Tensor scale(const Tensor& x, double s) {
    return unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
    return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor add_n(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "add_n: empty input");
    for (const auto& x : xs) require_same(xs.front(), x, "add_n");
    std::vector<double> out(xs.front().numel(), 0.0);
    for (const auto& x : xs) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += x.values()[i];
    }
    return Tensor::from_op(xs.front().shape(), std::move(out), xs, [](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            if (double* g = parent_grad(self, k)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
            }
        }
    });
}

Tensor relu(const Tensor& x) {
    record_signs(x.values());
    return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                 [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
    record_signs(x.values());
    return unary(x, [slope](double v) { return v > 0.0 ? v : slope * v; },
                 [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Tensor tanh(const Tensor& x) {
    return unary(x, [](double v) { return std::tanh(v); },
                 [](double, double y) { return 1.0 - y * y; });
}

Tensor square(const Tensor& x) {
    return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
    record_signs(x.values());
    return unary(x, [](double v) { return std::fabs(v); },
                 [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor log_clamped(const Tensor& x, double floor) {
    if (kink::active()) {
        std::vector<double> shifted(x.values().begin(), x.values().end());
        for (double& v : shifted) v -= floor;
        record_signs(shifted);
    }
    return unary(x, [floor](double v) { return std::log(std::max(v, floor)); },
                 [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return Tensor::from_op({1}, {s}, {x}, [](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            const std::size_t n = self.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
        }
    });
}

Tensor mean(const Tensor& x) {
    require(x.numel() > 0, "mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor element(const Tensor& x, std::size_t index) {
    require(index < x.numel(), "element: index out of range");
    return Tensor::from_op({1}, {x.values()[index]}, {x}, [index](Node& self) {
        if (double* g = parent_grad(self, 0)) g[index] += self.grad[0];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    require(numel(shape) == x.numel(), "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<double> out(x.values().begin(), x.values().end());
    return Tensor::from_op(std::move(shape), std::move(out), {x}, [](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor gradient_reversal(const Tensor& x, double scale_factor) {
    std::vector<double> out(x.values().begin(), x.values().end());
    return Tensor::from_op(x.shape(), std::move(out), {x}, [scale_factor](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= scale_factor * self.grad[i];
        }
    });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                a.dim(3) == b.dim(3),
            "concat_channels: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
    std::vector<double> out(static_cast<std::size_t>(n) * (ca + cb) * plane);
    for (int i = 0; i < n; ++i) {
        auto av = a.values().subspan(i * ca * plane, ca * plane);
        auto bv = b.values().subspan(i * cb * plane, cb * plane);
        double* dst = out.data() + static_cast<std::size_t>(i) * (ca + cb) * plane;
        std::copy(av.begin(), av.end(), dst);
        std::copy(bv.begin(), bv.end(), dst + ca * plane);
    }
    return Tensor::from_op({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                           [n, ca, cb, plane](Node& self) {
        double* ga = parent_grad(self, 0);
        double* gb = parent_grad(self, 1);
        for (int i = 0; i < n; ++i) {
            const double* src = self.grad.data() + static_cast<std::size_t>(i) * (ca + cb) * plane;
            if (ga) {
                for (std::size_t k = 0; k < ca * plane; ++k) ga[i * ca * plane + k] += src[k];
            }
            if (gb) {
                for (std::size_t k = 0; k < cb * plane; ++k) gb[i * cb * plane + k] += src[ca * plane + k];
            }
        }
    });
}

Tensor concat_batch(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "concat_batch: empty input");
    Shape tail(xs.front().shape().begin() + 1, xs.front().shape().end());
    int total = 0;
    std::vector<double> out;
    for (const auto& x : xs) {
        require(Shape(x.shape().begin() + 1, x.shape().end()) == tail, "concat_batch: trailing shape mismatch");
        total += x.dim(0);
        out.insert(out.end(), x.values().begin(), x.values().end());
    }
    Shape shape{total};
    shape.insert(shape.end(), tail.begin(), tail.end());
    return Tensor::from_op(std::move(shape), std::move(out), xs, [](Node& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            const std::size_t n = self.parents[k]->value.size();
            if (double* g = parent_grad(self, k)) {
                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
            }
            offset += n;
        }
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(1),
            "conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const int n = x.dim(0), out_c = w.dim(0);
    ConvGeom g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), stride, pad, 0, 0};
    g.out_h = (g.height + 2 * pad - g.kh) / stride + 1;
    g.out_w = (g.width + 2 * pad - g.kw) / stride + 1;
    require(g.out_h > 0 && g.out_w > 0, "conv2d: kernel larger than padded input");
    const bool has_bias = bias.defined();
    if (has_bias) require(bias.numel() == static_cast<std::size_t>(out_c), "conv2d: bias size");

    const int ckk = g.channels * g.kh * g.kw;
    const int p = g.out_h * g.out_w;
    const std::size_t in_size = static_cast<std::size_t>(g.channels) * g.height * g.width;
    std::vector<double> out(static_cast<std::size_t>(n) * out_c * p);
    MatR col(ckk, p);
    CMapR wm(w.values().data(), out_c, ckk);
    for (int i = 0; i < n; ++i) {
        im2col(x.values().data() + i * in_size, g, col.data());
        MapR o(out.data() + static_cast<std::size_t>(i) * out_c * p, out_c, p);
        o.noalias() = wm * col;
        if (has_bias) {
            for (int c = 0; c < out_c; ++c) o.row(c).array() += bias.values()[c];
        }
    }

    std::vector<Tensor> parents{x, w};
    if (has_bias) parents.push_back(bias);
    return Tensor::from_op({n, out_c, g.out_h, g.out_w}, std::move(out), parents,
                           [g, n, out_c, ckk, p, in_size, has_bias](Node& self) {
        double* gx = parent_grad(self, 0);
        double* gw = parent_grad(self, 1);
        double* gb = has_bias ? parent_grad(self, 2) : nullptr;
        const auto& xv = parent_value(self, 0);
        CMapR wm(parent_value(self, 1).data(), out_c, ckk);
        MatR col(ckk, p);
        MatR dcol(ckk, p);
        for (int i = 0; i < n; ++i) {
            CMapR go(self.grad.data() + static_cast<std::size_t>(i) * out_c * p, out_c, p);
            if (gw) {
                im2col(xv.data() + i * in_size, g, col.data());
                MapR(gw, out_c, ckk).noalias() += go * col.transpose();
            }
            if (gb) {
                for (int c = 0; c < out_c; ++c) gb[c] += go.row(c).sum();
            }
            if (gx) {
                dcol.noalias() = wm.transpose() * go;
                col2im_add(dcol.data(), g, gx + i * in_size);
            }
        }
    });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(0),
            "conv_transpose2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                shape_str(w.shape()));
    require(stride >= 1 && pad >= 0, "conv_transpose2d: bad stride/pad");
    const int n = x.dim(0), in_c = x.dim(1), out_c = w.dim(1);
    const int in_h = x.dim(2), in_w = x.dim(3);
    // Geometry of the equivalent forward convolution (output -> input).
    ConvGeom g{out_c, (in_h - 1) * stride - 2 * pad + w.dim(2), (in_w - 1) * stride - 2 * pad + w.dim(3),
               w.dim(2), w.dim(3), stride, pad, in_h, in_w};
    require(g.height > 0 && g.width > 0, "conv_transpose2d: empty output");
    const bool has_bias = bias.defined();
    if (has_bias) require(bias.numel() == static_cast<std::size_t>(out_c), "conv_transpose2d: bias size");

    const int okk = out_c * g.kh * g.kw;
    const int p = in_h * in_w;
    const std::size_t out_size = static_cast<std::size_t>(out_c) * g.height * g.width;
    std::vector<double> out(static_cast<std::size_t>(n) * out_size, 0.0);
    CMapR wm(w.values().data(), in_c, okk);
    MatR col(okk, p);
    for (int i = 0; i < n; ++i) {
        CMapR xi(x.values().data() + static_cast<std::size_t>(i) * in_c * p, in_c, p);
        col.noalias() = wm.transpose() * xi;
        double* dst = out.data() + i * out_size;
        col2im_add(col.data(), g, dst);
        if (has_bias) {
            const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
            for (int c = 0; c < out_c; ++c) {
                for (std::size_t k = 0; k < plane; ++k) dst[c * plane + k] += bias.values()[c];
            }
        }
    }

    std::vector<Tensor> parents{x, w};
    if (has_bias) parents.push_back(bias);
    return Tensor::from_op({n, out_c, g.height, g.width}, std::move(out), parents,
                           [g, n, in_c, out_c, okk, p, out_size, has_bias](Node& self) {
        double* gx = parent_grad(self, 0);
        double* gw = parent_grad(self, 1);
        double* gb = has_bias ? parent_grad(self, 2) : nullptr;
        const auto& xv = parent_value(self, 0);
        CMapR wm(parent_value(self, 1).data(), in_c, okk);
        MatR gcol(okk, p);
        const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
        for (int i = 0; i < n; ++i) {
            const double* go = self.grad.data() + i * out_size;
            im2col(go, g, gcol.data());
            if (gx) {
                MapR(gx + static_cast<std::size_t>(i) * in_c * p, in_c, p).noalias() += wm * gcol;
            }
            if (gw) {
                CMapR xi(xv.data() + static_cast<std::size_t>(i) * in_c * p, in_c, p);
                MapR(gw, in_c, okk).noalias() += xi * gcol.transpose();
            }
            if (gb) {
                for (int c = 0; c < out_c; ++c) {
                    double s = 0.0;
                    for (std::size_t k = 0; k < plane; ++k) s += go[c * plane + k];
                    gb[c] += s;
                }
            }
        }
    });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    std::vector<double>& running_mean, std::vector<double>& running_var,
                    bool training, double momentum, double eps) {
    require(x.rank() == 4, "batch_norm2d: expected NCHW input");
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    require(gamma.numel() == static_cast<std::size_t>(c) && beta.numel() == static_cast<std::size_t>(c) &&
                running_mean.size() == static_cast<std::size_t>(c) &&
                running_var.size() == static_cast<std::size_t>(c),
            "batch_norm2d: parameter size mismatch");
    const double m = static_cast<double>(n) * plane;
    const auto xv = x.values();
    std::vector<double> mean_c(c), invstd(c);
    if (training) {
        require(m > 1, "batch_norm2d: need more than one value per channel in training mode");
        for (int ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) {
                const double* src = xv.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
                for (std::size_t k = 0; k < plane; ++k) s += src[k];
            }
            const double mu = s / m;
            double v = 0.0;
            for (int i = 0; i < n; ++i) {
                const double* src = xv.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
                for (std::size_t k = 0; k < plane; ++k) v += (src[k] - mu) * (src[k] - mu);
            }
            v /= m;
            mean_c[ch] = mu;
            invstd[ch] = 1.0 / std::sqrt(v + eps);
            running_mean[ch] = (1 - momentum) * running_mean[ch] + momentum * mu;
            running_var[ch] = (1 - momentum) * running_var[ch] + momentum * v * m / (m - 1);
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            mean_c[ch] = running_mean[ch];
            invstd[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
        }
    }

    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) {
                xhat[base + k] = (xv[base + k] - mean_c[ch]) * invstd[ch];
                out[base + k] = gamma.values()[ch] * xhat[base + k] + beta.values()[ch];
            }
        }
    }
    return Tensor::from_op(x.shape(), std::move(out), {x, gamma, beta},
                           [n, c, plane, m, training, invstd, xhat = std::move(xhat)](Node& self) {
        double* gx = parent_grad(self, 0);
        double* gg = parent_grad(self, 1);
        double* gbeta = parent_grad(self, 2);
        const auto& gamma_v = parent_value(self, 1);
        for (int ch = 0; ch < c; ++ch) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int i = 0; i < n; ++i) {
                const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    sum_g += self.grad[base + k];
                    sum_gx += self.grad[base + k] * xhat[base + k];
                }
            }
            if (gg) gg[ch] += sum_gx;
            if (gbeta) gbeta[ch] += sum_g;
            if (!gx) continue;
            const double scale_c = gamma_v[ch] * invstd[ch];
            for (int i = 0; i < n; ++i) {
                const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    const double g = self.grad[base + k];
                    gx[base + k] += training ? scale_c * (g - sum_g / m - xhat[base + k] * sum_gx / m)
                                             : scale_c * g;
                }
            }
        }
    });
}

Tensor instance_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require(x.rank() == 4, "instance_norm2d: expected NCHW input");
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    require(plane > 1, "instance_norm2d: need spatial extent > 1");
    require(gamma.numel() == static_cast<std::size_t>(c) && beta.numel() == static_cast<std::size_t>(c),
            "instance_norm2d: parameter size mismatch");
    const auto xv = x.values();
    std::vector<double> out(x.numel()), xhat(x.numel()), invstd(static_cast<std::size_t>(n) * c);
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * plane;
            double mu = 0.0;
            for (std::size_t k = 0; k < plane; ++k) mu += xv[base + k];
            mu /= static_cast<double>(plane);
            double v = 0.0;
            for (std::size_t k = 0; k < plane; ++k) v += (xv[base + k] - mu) * (xv[base + k] - mu);
            v /= static_cast<double>(plane);
            const double is = 1.0 / std::sqrt(v + eps);
            invstd[i * c + ch] = is;
            for (std::size_t k = 0; k < plane; ++k) {
                xhat[base + k] = (xv[base + k] - mu) * is;
                out[base + k] = gamma.values()[ch] * xhat[base + k] + beta.values()[ch];
            }
        }
    }
    return Tensor::from_op(x.shape(), std::move(out), {x, gamma, beta},
                           [n, c, plane, invstd = std::move(invstd), xhat = std::move(xhat)](Node& self) {
        double* gx = parent_grad(self, 0);
        double* gg = parent_grad(self, 1);
        double* gbeta = parent_grad(self, 2);
        const auto& gamma_v = parent_value(self, 1);
        const double m = static_cast<double>(plane);
        for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * plane;
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t k = 0; k < plane; ++k) {
                    sum_g += self.grad[base + k];
                    sum_gx += self.grad[base + k] * xhat[base + k];
                }
                if (gg) gg[ch] += sum_gx;
                if (gbeta) gbeta[ch] += sum_g;
                if (!gx) continue;
                const double s = gamma_v[ch] * invstd[i * c + ch];
                for (std::size_t k = 0; k < plane; ++k) {
                    gx[base + k] += s * (self.grad[base + k] - sum_g / m - xhat[base + k] * sum_gx / m);
                }
            }
        }
    });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int pad) {
    require(x.rank() == 4, "max_pool2d: expected NCHW input");
    require(kernel >= 1 && stride >= 1 && pad >= 0 && pad * 2 <= kernel, "max_pool2d: bad geometry");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int oh = (h + 2 * pad - kernel) / stride + 1;
    const int ow = (w + 2 * pad - kernel) / stride + 1;
    require(oh > 0 && ow > 0, "max_pool2d: kernel larger than input");
    std::vector<double> out(static_cast<std::size_t>(n) * c * oh * ow);
    std::vector<std::size_t> argmax(out.size());
    const auto xv = x.values();
    for (int plane_i = 0; plane_i < n * c; ++plane_i) {
        const std::size_t in_base = static_cast<std::size_t>(plane_i) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_i = in_base;
                for (int ky = 0; ky < kernel; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kernel; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        const std::size_t idx = in_base + static_cast<std::size_t>(iy) * w + ix;
                        if (xv[idx] > best) {
                            best = xv[idx];
                            best_i = idx;
                        }
                    }
                }
                const std::size_t o = (static_cast<std::size_t>(plane_i) * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    if (kink::active()) {
        for (std::size_t a : argmax) kink::record(a);
    }
    return Tensor::from_op({n, c, oh, ow}, std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
        if (double* gx = parent_grad(self, 0)) {
            for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += self.grad[o];
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
            "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    const int n = x.dim(0), in = x.dim(1), out_f = w.dim(0);
    const bool has_bias = bias.defined();
    if (has_bias) require(bias.numel() == static_cast<std::size_t>(out_f), "linear: bias size");
    std::vector<double> out(static_cast<std::size_t>(n) * out_f);
    MapR o(out.data(), n, out_f);
    o.noalias() = CMapR(x.values().data(), n, in) * CMapR(w.values().data(), out_f, in).transpose();
    if (has_bias) {
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < out_f; ++j) o(i, j) += bias.values()[j];
        }
    }
    std::vector<Tensor> parents{x, w};
    if (has_bias) parents.push_back(bias);
    return Tensor::from_op({n, out_f}, std::move(out), parents, [n, in, out_f, has_bias](Node& self) {
        CMapR go(self.grad.data(), n, out_f);
        if (double* gx = parent_grad(self, 0)) {
            MapR(gx, n, in).noalias() += go * CMapR(parent_value(self, 1).data(), out_f, in);
        }
        if (double* gw = parent_grad(self, 1)) {
            MapR(gw, out_f, in).noalias() += go.transpose() * CMapR(parent_value(self, 0).data(), n, in);
        }
        if (has_bias) {
            if (double* gb = parent_grad(self, 2)) {
                for (int j = 0; j < out_f; ++j) gb[j] += go.col(j).sum();
            }
        }
    });
}

Tensor softmax_axis1(const Tensor& x) {
    require(x.rank() >= 2, "softmax_axis1: rank must be >= 2");
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t inner = x.numel() / (static_cast<std::size_t>(n) * c);
    const auto xv = x.values();
    std::vector<double> out(x.numel());
    for (int i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < inner; ++k) {
            const std::size_t base = static_cast<std::size_t>(i) * c * inner + k;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < c; ++j) mx = std::max(mx, xv[base + j * inner]);
            double z = 0.0;
            for (int j = 0; j < c; ++j) {
                out[base + j * inner] = std::exp(xv[base + j * inner] - mx);
                z += out[base + j * inner];
            }
            for (int j = 0; j < c; ++j) out[base + j * inner] /= z;
        }
    }
    return Tensor::from_op(x.shape(), std::move(out), {x}, [n, c, inner](Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        for (int i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < inner; ++k) {
                const std::size_t base = static_cast<std::size_t>(i) * c * inner + k;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += self.grad[base + j * inner] * self.value[base + j * inner];
                for (int j = 0; j < c; ++j) {
                    gx[base + j * inner] += self.value[base + j * inner] * (self.grad[base + j * inner] - dot);
                }
            }
        }
    });
}

Tensor l2_normalize_rows(const Tensor& x, double eps, std::vector<int>* degenerate) {
    require(x.rank() == 2, "l2_normalize_rows: expected [N, D]");
    const int n = x.dim(0), d = x.dim(1);
    const auto xv = x.values();
    std::vector<double> out(x.numel()), norms(n);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += xv[i * d + j] * xv[i * d + j];
        norms[i] = std::sqrt(s);
        const bool degen = norms[i] <= eps;
        if (degen && degenerate) degenerate->push_back(i);
        for (int j = 0; j < d; ++j) out[i * d + j] = degen ? xv[i * d + j] : xv[i * d + j] / norms[i];
    }
    return Tensor::from_op(x.shape(), std::move(out), {x}, [n, d, eps, norms = std::move(norms)](Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        for (int i = 0; i < n; ++i) {
            const double* g = self.grad.data() + static_cast<std::size_t>(i) * d;
            const double* y = self.value.data() + static_cast<std::size_t>(i) * d;
            if (norms[i] <= eps) {
                for (int j = 0; j < d; ++j) gx[i * d + j] += g[j];
                continue;
            }
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += g[j] * y[j];
            for (int j = 0; j < d; ++j) gx[i * d + j] += (g[j] - y[j] * dot) / norms[i];
        }
    });
}

Tensor vlad_aggregate(const Tensor& assign, const Tensor& features, const Tensor& centroids) {
    require(assign.rank() == 4 && features.rank() == 4 && centroids.rank() == 2,
            "vlad_aggregate: expected [N,K,H,W], [N,C,H,W], [K,C]");
    const int n = features.dim(0), c = features.dim(1), k = centroids.dim(0);
    require(assign.dim(0) == n && assign.dim(1) == k && assign.dim(2) == features.dim(2) &&
                assign.dim(3) == features.dim(3) && centroids.dim(1) == c,
            "vlad_aggregate: inconsistent shapes " + shape_str(assign.shape()) + ", " +
                shape_str(features.shape()) + ", " + shape_str(centroids.shape()));
    const int p = features.dim(2) * features.dim(3);
    CMapR cent(centroids.values().data(), k, c);
    std::vector<double> out(static_cast<std::size_t>(n) * k * c);
    std::vector<double> mass(static_cast<std::size_t>(n) * k);
    for (int i = 0; i < n; ++i) {
        CMapR a(assign.values().data() + static_cast<std::size_t>(i) * k * p, k, p);
        CMapR f(features.values().data() + static_cast<std::size_t>(i) * c * p, c, p);
        MapR v(out.data() + static_cast<std::size_t>(i) * k * c, k, c);
        v.noalias() = a * f.transpose();
        for (int kk = 0; kk < k; ++kk) {
            mass[i * k + kk] = a.row(kk).sum();
            v.row(kk) -= mass[i * k + kk] * cent.row(kk);
        }
    }
    return Tensor::from_op({n, k * c}, std::move(out), {assign, features, centroids},
                           [n, c, k, p, mass = std::move(mass)](Node& self) {
        double* ga = parent_grad(self, 0);
        double* gf = parent_grad(self, 1);
        double* gc = parent_grad(self, 2);
        const auto& av = parent_value(self, 0);
        const auto& fv = parent_value(self, 1);
        CMapR cent(parent_value(self, 2).data(), k, c);
        for (int i = 0; i < n; ++i) {
            CMapR gv(self.grad.data() + static_cast<std::size_t>(i) * k * c, k, c);
            CMapR a(av.data() + static_cast<std::size_t>(i) * k * p, k, p);
            CMapR f(fv.data() + static_cast<std::size_t>(i) * c * p, c, p);
            if (ga) {
                MapR g(ga + static_cast<std::size_t>(i) * k * p, k, p);
                g.noalias() += gv * f;
                for (int kk = 0; kk < k; ++kk) g.row(kk).array() -= gv.row(kk).dot(cent.row(kk));
            }
            if (gf) MapR(gf + static_cast<std::size_t>(i) * c * p, c, p).noalias() += gv.transpose() * a;
            if (gc) {
                MapR g(gc, k, c);
                for (int kk = 0; kk < k; ++kk) g.row(kk) -= mass[i * k + kk] * gv.row(kk);
            }
        }
    });
}

Tensor row_distance(const Tensor& x, int i, int j) {
    require(x.rank() == 2 && i >= 0 && j >= 0 && i < x.dim(0) && j < x.dim(0), "row_distance: bad rows");
    const int d = x.dim(1);
    const auto xv = x.values();
    double s = 0.0;
    for (int t = 0; t < d; ++t) {
        const double diff = xv[i * d + t] - xv[j * d + t];
        s += diff * diff;
    }
    const double dist = std::sqrt(s);
    return Tensor::from_op({1}, {dist}, {x}, [i, j, d](Node& self) {
        double* gx = parent_grad(self, 0);
        const double dist = self.value[0];
        if (!gx || dist == 0.0) return;
        const auto& xv = parent_value(self, 0);
        const double g = self.grad[0] / dist;
        for (int t = 0; t < d; ++t) {
            const double diff = xv[i * d + t] - xv[j * d + t];
            gx[i * d + t] += g * diff;
            gx[j * d + t] -= g * diff;
        }
    });
}

Tensor row_distances(const Tensor& a, const Tensor& b) {
    require_same(a, b, "row_distances");
    require(a.rank() == 2, "row_distances: expects [N, D]");
    const int n = a.dim(0), d = a.dim(1);
    const auto av = a.values(), bv = b.values();
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int t = 0; t < d; ++t) {
            const double diff = av[i * d + t] - bv[i * d + t];
            s += diff * diff;
        }
        out[i] = std::sqrt(s);
    }
    return Tensor::from_op({n}, std::move(out), {a, b}, [n, d](Node& self) {
        double* ga = parent_grad(self, 0);
        double* gb = parent_grad(self, 1);
        const auto& av = parent_value(self, 0);
        const auto& bv = parent_value(self, 1);
        for (int i = 0; i < n; ++i) {
            if (self.value[i] == 0.0) continue;
            const double g = self.grad[i] / self.value[i];
            for (int t = 0; t < d; ++t) {
                const double diff = g * (av[i * d + t] - bv[i * d + t]);
                if (ga) ga[i * d + t] += diff;
                if (gb) gb[i * d + t] -= diff;
            }
        }
    });
}

Tensor sum_axis1(const Tensor& x) {
    require(x.rank() == 2, "sum_axis1: expects [N, D]");
    const int n = x.dim(0), d = x.dim(1);
    std::vector<double> out(n, 0.0);
    const auto xv = x.values();
    for (int i = 0; i < n; ++i)
        for (int t = 0; t < d; ++t) out[i] += xv[i * d + t];
    return Tensor::from_op({n}, std::move(out), {x}, [n, d](Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        for (int i = 0; i < n; ++i)
            for (int t = 0; t < d; ++t) gx[i * d + t] += self.grad[i];
    });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    require(x.rank() >= 1 && !rows.empty(), "gather_rows: empty selection");
    const std::size_t stride = x.numel() / static_cast<std::size_t>(x.dim(0));
    std::vector<double> out;
    out.reserve(rows.size() * stride);
    const auto xv = x.values();
    for (int r : rows) {
        require(r >= 0 && r < x.dim(0), "gather_rows: row " + std::to_string(r) + " out of range");
        out.insert(out.end(), xv.begin() + r * stride, xv.begin() + (r + 1) * stride);
    }
    Shape shape = x.shape();
    shape[0] = static_cast<int>(rows.size());
    return Tensor::from_op(std::move(shape), std::move(out), {x}, [rows, stride](Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        for (std::size_t k = 0; k < rows.size(); ++k)
            for (std::size_t t = 0; t < stride; ++t) gx[rows[k] * stride + t] += self.grad[k * stride + t];
    });
}

} // namespace stgl::nn
