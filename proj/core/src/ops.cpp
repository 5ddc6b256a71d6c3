#include "alden/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace alden::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) shape_error(op, a, b);
}

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    bool rg = false;
    for (const Var& p : parents) rg = rg || p.requires_grad();
    if (!rg) return Var::constant(std::move(value));
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (Var& p : parents) n->parents.push_back(p.ptr());
    n->backward_fn = std::move(backward);
    return Var::from_node(std::move(n));
}

void accum(Node* parent, const Tensor& contribution) {
    if (!parent->requires_grad) return;
    Tensor& g = parent->ensure_grad();
    const double* src = contribution.data();
    double* dst = g.data();
    const std::int64_t n = g.numel();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

// C(rc x cc) = alpha * op(A) * op(B) [+ C if beta]
void gemm(const double* a, int ra, int ca, bool ta, const double* b, int rb, int cb, bool tb,
          double* c, int rc, int cc, double alpha, double beta) {
    ConstMatMap ma(a, ra, ca);
    ConstMatMap mb(b, rb, cb);
    MatMap mc(c, rc, cc);
    if (beta == 0.0) {
        if (!ta && !tb)      mc.noalias() = alpha * (ma * mb);
        else if (ta && !tb)  mc.noalias() = alpha * (ma.transpose() * mb);
        else if (!ta && tb)  mc.noalias() = alpha * (ma * mb.transpose());
        else                 mc.noalias() = alpha * (ma.transpose() * mb.transpose());
    } else {
        if (!ta && !tb)      mc.noalias() += alpha * (ma * mb);
        else if (ta && !tb)  mc.noalias() += alpha * (ma.transpose() * mb);
        else if (!ta && tb)  mc.noalias() += alpha * (ma * mb.transpose());
        else                 mc.noalias() += alpha * (ma.transpose() * mb.transpose());
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

} // namespace

// ---------------------------------------------------------------- arithmetic

Var add(const Var& a, const Var& b) {
    check_same_shape("add", a.value(), b.value());
    Tensor out = a.value();
    const double* pb = b.value().data();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += pb[i];
    return make_op(std::move(out), {a, b}, [](Node& n) {
        accum(n.parents[0].get(), n.grad);
        accum(n.parents[1].get(), n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape("sub", a.value(), b.value());
    Tensor out = a.value();
    const double* pb = b.value().data();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
    return make_op(std::move(out), {a, b}, [](Node& n) {
        accum(n.parents[0].get(), n.grad);
        Node* pb2 = n.parents[1].get();
        if (pb2->requires_grad) {
            Tensor& g = pb2->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape("mul", a.value(), b.value());
    Tensor out = a.value();
    const double* pb = b.value().data();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= pb[i];
    return make_op(std::move(out), {a, b}, [](Node& n) {
        Node* pa = n.parents[0].get();
        Node* pb2 = n.parents[1].get();
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            const double* bv = pb2->value.data();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (pb2->requires_grad) {
            Tensor& g = pb2->ensure_grad();
            const double* av = pa->value.data();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return make_op(std::move(out), {a}, [s](Node& n) {
        Node* pa = n.parents[0].get();
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s * n.grad[i];
        }
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    return make_op(std::move(out), {a},
                   [](Node& n) { accum(n.parents[0].get(), n.grad); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var add_channel_bias(const Var& x, const Var& bias) {
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    if (xv.dim() != 4 || bv.dim() != 1 || bv.size(0) != xv.size(1)) {
        shape_error("add_channel_bias", xv, bv);
    }
    const int B = xv.size(0), C = xv.size(1);
    const std::int64_t hw = static_cast<std::int64_t>(xv.size(2)) * xv.size(3);
    Tensor out = xv;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            double* p = out.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
            const double add = bv[c];
            for (std::int64_t i = 0; i < hw; ++i) p[i] += add;
        }
    return make_op(std::move(out), {x, bias}, [B, C, hw](Node& n) {
        accum(n.parents[0].get(), n.grad);
        Node* pb = n.parents[1].get();
        if (pb->requires_grad) {
            Tensor& g = pb->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const double* p = n.grad.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
                    double s = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) s += p[i];
                    g[c] += s;
                }
        }
    });
}

Var add_row_bias(const Var& x, const Var& bias) {
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    const int D = xv.size(xv.dim() - 1);
    if (bv.dim() != 1 || bv.size(0) != D) shape_error("add_row_bias", xv, bv);
    const std::int64_t rows = xv.numel() / D;
    Tensor out = xv;
    for (std::int64_t r = 0; r < rows; ++r) {
        double* p = out.data() + r * D;
        for (int d = 0; d < D; ++d) p[d] += bv[d];
    }
    return make_op(std::move(out), {x, bias}, [rows, D](Node& n) {
        accum(n.parents[0].get(), n.grad);
        Node* pb = n.parents[1].get();
        if (pb->requires_grad) {
            Tensor& g = pb->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* p = n.grad.data() + r * D;
                for (int d = 0; d < D; ++d) g[d] += p[d];
            }
        }
    });
}

// --------------------------------------------------------------------- shape

Var reshape(const Var& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.value().numel()) {
        throw std::invalid_argument("reshape: element count mismatch");
    }
    Tensor out = Tensor::from(std::move(shape), x.value().storage());
    return make_op(std::move(out), {x}, [](Node& n) {
        Node* p = n.parents[0].get();
        if (p->requires_grad) {
            Tensor& g = p->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
    });
}

Var tokens_from_map(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.dim() != 4) throw std::invalid_argument("tokens_from_map: want B,C,H,W");
    const int B = xv.size(0), C = xv.size(1), H = xv.size(2), W = xv.size(3);
    const int N = H * W;
    Tensor out({B, N, C});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* src = xv.data() + (static_cast<std::int64_t>(b) * C + c) * N;
            for (int n2 = 0; n2 < N; ++n2) out.at3(b, n2, c) = src[n2];
        }
    return make_op(std::move(out), {x}, [B, C, N](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double* dst = g.data() + (static_cast<std::int64_t>(b) * C + c) * N;
                for (int n2 = 0; n2 < N; ++n2) dst[n2] += n.grad.at3(b, n2, c);
            }
    });
}

Var map_from_tokens(const Var& x, int h, int w) {
    const Tensor& xv = x.value();
    if (xv.dim() != 3 || xv.size(1) != h * w) {
        throw std::invalid_argument("map_from_tokens: token count != h*w");
    }
    const int B = xv.size(0), N = xv.size(1), C = xv.size(2);
    Tensor out({B, C, h, w});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            double* dst = out.data() + (static_cast<std::int64_t>(b) * C + c) * N;
            for (int n2 = 0; n2 < N; ++n2) dst[n2] = xv.at3(b, n2, c);
        }
    return make_op(std::move(out), {x}, [B, C, N](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const double* src = n.grad.data() + (static_cast<std::int64_t>(b) * C + c) * N;
                for (int n2 = 0; n2 < N; ++n2) g.at3(b, n2, c) += src[n2];
            }
    });
}

Var split_heads(const Var& x, int heads) {
    const Tensor& xv = x.value();
    if (xv.dim() != 3 || xv.size(2) % heads != 0) {
        throw std::invalid_argument("split_heads: last dim not divisible by head count");
    }
    const int B = xv.size(0), N = xv.size(1), D = xv.size(2), dh = D / heads;
    Tensor out({B * heads, N, dh});
    for (int b = 0; b < B; ++b)
        for (int hh = 0; hh < heads; ++hh)
            for (int t = 0; t < N; ++t)
                for (int d = 0; d < dh; ++d)
                    out.at3(b * heads + hh, t, d) = xv.at3(b, t, hh * dh + d);
    return make_op(std::move(out), {x}, [B, heads, N, dh](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int hh = 0; hh < heads; ++hh)
                for (int t = 0; t < N; ++t)
                    for (int d = 0; d < dh; ++d)
                        g.at3(b, t, hh * dh + d) += n.grad.at3(b * heads + hh, t, d);
    });
}

Var merge_heads(const Var& x, int heads) {
    const Tensor& xv = x.value();
    if (xv.dim() != 3 || xv.size(0) % heads != 0) {
        throw std::invalid_argument("merge_heads: batch dim not divisible by head count");
    }
    const int B = xv.size(0) / heads, N = xv.size(1), dh = xv.size(2);
    Tensor out({B, N, dh * heads});
    for (int b = 0; b < B; ++b)
        for (int hh = 0; hh < heads; ++hh)
            for (int t = 0; t < N; ++t)
                for (int d = 0; d < dh; ++d)
                    out.at3(b, t, hh * dh + d) = xv.at3(b * heads + hh, t, d);
    return make_op(std::move(out), {x}, [B, heads, N, dh](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int hh = 0; hh < heads; ++hh)
                for (int t = 0; t < N; ++t)
                    for (int d = 0; d < dh; ++d)
                        g.at3(b * heads + hh, t, d) += n.grad.at3(b, t, hh * dh + d);
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.dim() != 4 || bv.dim() != 4 || av.size(0) != bv.size(0) ||
        av.size(2) != bv.size(2) || av.size(3) != bv.size(3)) {
        shape_error("concat_channels", av, bv);
    }
    const int B = av.size(0), Ca = av.size(1), Cb = bv.size(1);
    const std::int64_t hw = static_cast<std::int64_t>(av.size(2)) * av.size(3);
    Tensor out({B, Ca + Cb, av.size(2), av.size(3)});
    for (int bb = 0; bb < B; ++bb) {
        std::copy_n(av.data() + static_cast<std::int64_t>(bb) * Ca * hw, Ca * hw,
                    out.data() + static_cast<std::int64_t>(bb) * (Ca + Cb) * hw);
        std::copy_n(bv.data() + static_cast<std::int64_t>(bb) * Cb * hw, Cb * hw,
                    out.data() + static_cast<std::int64_t>(bb) * (Ca + Cb) * hw + Ca * hw);
    }
    return make_op(std::move(out), {a, b}, [B, Ca, Cb, hw](Node& n) {
        Node* pa = n.parents[0].get();
        Node* pb = n.parents[1].get();
        for (int bb = 0; bb < B; ++bb) {
            const double* g = n.grad.data() + static_cast<std::int64_t>(bb) * (Ca + Cb) * hw;
            if (pa->requires_grad) {
                double* dst = pa->ensure_grad().data() + static_cast<std::int64_t>(bb) * Ca * hw;
                for (std::int64_t i = 0; i < Ca * hw; ++i) dst[i] += g[i];
            }
            if (pb->requires_grad) {
                double* dst = pb->ensure_grad().data() + static_cast<std::int64_t>(bb) * Cb * hw;
                for (std::int64_t i = 0; i < Cb * hw; ++i) dst[i] += g[Ca * hw + i];
            }
        }
    });
}

Var slice_channels(const Var& x, int c0, int c1) {
    const Tensor& xv = x.value();
    if (xv.dim() != 4 || c0 < 0 || c1 > xv.size(1) || c0 >= c1) {
        throw std::invalid_argument("slice_channels: bad channel range");
    }
    const int B = xv.size(0), C = xv.size(1), Cs = c1 - c0;
    const std::int64_t hw = static_cast<std::int64_t>(xv.size(2)) * xv.size(3);
    Tensor out({B, Cs, xv.size(2), xv.size(3)});
    for (int b = 0; b < B; ++b)
        std::copy_n(xv.data() + (static_cast<std::int64_t>(b) * C + c0) * hw, Cs * hw,
                    out.data() + static_cast<std::int64_t>(b) * Cs * hw);
    return make_op(std::move(out), {x}, [B, C, c0, Cs, hw](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int b = 0; b < B; ++b) {
            double* dst = g.data() + (static_cast<std::int64_t>(b) * C + c0) * hw;
            const double* src = n.grad.data() + static_cast<std::int64_t>(b) * Cs * hw;
            for (std::int64_t i = 0; i < Cs * hw; ++i) dst[i] += src[i];
        }
    });
}

Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input list");
    const int N = xs[0].value().size(0);
    int total = 0;
    for (const Var& v : xs) {
        if (v.value().dim() != 2 || v.value().size(0) != N) {
            throw std::invalid_argument("concat_cols: all inputs must be [N,*]");
        }
        total += v.value().size(1);
    }
    Tensor out({N, total});
    std::vector<int> offsets;
    int off = 0;
    for (const Var& v : xs) {
        const int c = v.value().size(1);
        offsets.push_back(off);
        for (int r = 0; r < N; ++r)
            std::copy_n(v.value().data() + static_cast<std::int64_t>(r) * c, c,
                        out.data() + static_cast<std::int64_t>(r) * total + off);
        off += c;
    }
    std::vector<Var> parents = xs;
    return make_op(std::move(out), std::move(parents), [N, total, offsets](Node& n) {
        for (size_t k = 0; k < n.parents.size(); ++k) {
            Node* p = n.parents[k].get();
            if (!p->requires_grad) continue;
            Tensor& g = p->ensure_grad();
            const int c = g.size(1);
            for (int r = 0; r < N; ++r) {
                const double* src = n.grad.data() + static_cast<std::int64_t>(r) * total + offsets[k];
                double* dst = g.data() + static_cast<std::int64_t>(r) * c;
                for (int i = 0; i < c; ++i) dst[i] += src[i];
            }
        }
    });
}

Var repeat_rows(const Var& x, int times) {
    const Tensor& xv = x.value();
    if (xv.dim() != 2 || times < 1) throw std::invalid_argument("repeat_rows: want [N,C], times >= 1");
    const int N = xv.size(0), C = xv.size(1);
    Tensor out({N * times, C});
    for (int r = 0; r < N; ++r)
        for (int t = 0; t < times; ++t)
            std::copy_n(xv.data() + static_cast<std::int64_t>(r) * C, C,
                        out.data() + (static_cast<std::int64_t>(r) * times + t) * C);
    return make_op(std::move(out), {x}, [N, C, times](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int r = 0; r < N; ++r)
            for (int t = 0; t < times; ++t) {
                const double* src = n.grad.data() + (static_cast<std::int64_t>(r) * times + t) * C;
                double* dst = g.data() + static_cast<std::int64_t>(r) * C;
                for (int i = 0; i < C; ++i) dst[i] += src[i];
            }
    });
}

// ------------------------------------------------------------ linear algebra

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.dim() != 2 || bv.dim() != 2) throw std::invalid_argument("matmul: want 2-D inputs");
    const int n = trans_a ? av.size(1) : av.size(0);
    const int k = trans_a ? av.size(0) : av.size(1);
    const int kb = trans_b ? bv.size(1) : bv.size(0);
    const int m = trans_b ? bv.size(0) : bv.size(1);
    if (k != kb) shape_error("matmul", av, bv);
    Tensor out({n, m});
    gemm(av.data(), av.size(0), av.size(1), trans_a, bv.data(), bv.size(0), bv.size(1), trans_b,
         out.data(), n, m, 1.0, 0.0);
    return make_op(std::move(out), {a, b}, [trans_a, trans_b](Node& nd) {
        Node* pa = nd.parents[0].get();
        Node* pb = nd.parents[1].get();
        const Tensor& g = nd.grad;
        const Tensor& av2 = pa->value;
        const Tensor& bv2 = pb->value;
        const int gr = g.size(0), gc = g.size(1);
        if (pa->requires_grad) {
            Tensor& da = pa->ensure_grad();
            if (!trans_a) {
                // dA = G * op(B)^T
                gemm(g.data(), gr, gc, false, bv2.data(), bv2.size(0), bv2.size(1), !trans_b,
                     da.data(), da.size(0), da.size(1), 1.0, 1.0);
            } else {
                // A used transposed: dA = op(B) * G^T
                gemm(bv2.data(), bv2.size(0), bv2.size(1), trans_b, g.data(), gr, gc, true,
                     da.data(), da.size(0), da.size(1), 1.0, 1.0);
            }
        }
        if (pb->requires_grad) {
            Tensor& db = pb->ensure_grad();
            if (!trans_b) {
                // dB = op(A)^T * G
                gemm(av2.data(), av2.size(0), av2.size(1), !trans_a, g.data(), gr, gc, false,
                     db.data(), db.size(0), db.size(1), 1.0, 1.0);
            } else {
                // B used transposed: dB = G^T * op(A)
                gemm(g.data(), gr, gc, true, av2.data(), av2.size(0), av2.size(1), trans_a,
                     db.data(), db.size(0), db.size(1), 1.0, 1.0);
            }
        }
    });
}

Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.dim() != 3 || bv.dim() != 3 || av.size(0) != bv.size(0)) {
        shape_error("bmm", av, bv);
    }
    const int B = av.size(0);
    const int ar = av.size(1), ac = av.size(2), br = bv.size(1), bc = bv.size(2);
    const int n = trans_a ? ac : ar;
    const int k = trans_a ? ar : ac;
    const int kb = trans_b ? bc : br;
    const int m = trans_b ? br : bc;
    if (k != kb) shape_error("bmm", av, bv);
    Tensor out({B, n, m});
    const std::int64_t sa = static_cast<std::int64_t>(ar) * ac;
    const std::int64_t sb = static_cast<std::int64_t>(br) * bc;
    const std::int64_t so = static_cast<std::int64_t>(n) * m;
    for (int i = 0; i < B; ++i) {
        gemm(av.data() + i * sa, ar, ac, trans_a, bv.data() + i * sb, br, bc, trans_b,
             out.data() + i * so, n, m, 1.0, 0.0);
    }
    return make_op(std::move(out), {a, b},
                   [B, ar, ac, br, bc, n, m, sa, sb, so, trans_a, trans_b](Node& nd) {
        Node* pa = nd.parents[0].get();
        Node* pb = nd.parents[1].get();
        for (int i = 0; i < B; ++i) {
            const double* g = nd.grad.data() + i * so;
            const double* a2 = pa->value.data() + i * sa;
            const double* b2 = pb->value.data() + i * sb;
            if (pa->requires_grad) {
                double* da = pa->ensure_grad().data() + i * sa;
                if (!trans_a) gemm(g, n, m, false, b2, br, bc, !trans_b, da, ar, ac, 1.0, 1.0);
                else          gemm(b2, br, bc, trans_b, g, n, m, true, da, ar, ac, 1.0, 1.0);
            }
            if (pb->requires_grad) {
                double* db = pb->ensure_grad().data() + i * sb;
                if (!trans_b) gemm(a2, ar, ac, !trans_a, g, n, m, false, db, br, bc, 1.0, 1.0);
                else          gemm(g, n, m, true, a2, ar, ac, trans_a, db, br, bc, 1.0, 1.0);
            }
        }
    });
}

// --------------------------------------------------- convolution / resampling

namespace {

void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* cols) {
    // cols: [C*kh*kw, Ho*Wo]
    const int N = Ho * Wo;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                double* row = cols + (static_cast<std::int64_t>(c) * kh * kw + ky * kw + kx) * N;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) {
                        std::fill_n(row + static_cast<std::int64_t>(oy) * Wo, Wo, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<std::int64_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        row[static_cast<std::int64_t>(oy) * Wo + ox] =
                            (ix >= 0 && ix < W) ? src[ix] : 0.0;
                    }
                }
            }
}

void col2im_add(const double* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, double* dx) {
    const int N = Ho * Wo;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const double* row = cols + (static_cast<std::int64_t>(c) * kh * kw + ky * kw + kx) * N;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    double* dst = dx + (static_cast<std::int64_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < W) dst[ix] += row[static_cast<std::int64_t>(oy) * Wo + ox];
                    }
                }
            }
}

} // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = bias.value();
    if (xv.dim() != 4 || wv.dim() != 4) throw std::invalid_argument("conv2d: want 4-D x and w");
    if (wv.size(1) != xv.size(1)) {
        throw std::invalid_argument("conv2d: input channels " + std::to_string(xv.size(1)) +
                                    " do not match kernel channels " + std::to_string(wv.size(1)));
    }
    if (bv.dim() != 1 || bv.size(0) != wv.size(0)) shape_error("conv2d bias", wv, bv);
    const int B = xv.size(0), Cin = xv.size(1), H = xv.size(2), W = xv.size(3);
    const int Cout = wv.size(0), kh = wv.size(2), kw = wv.size(3);
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: kernel larger than padded input");
    const int K = Cin * kh * kw;
    const int N = Ho * Wo;

    auto cols = std::make_shared<Tensor>(std::vector<int>{B, K, N});
    Tensor out({B, Cout, Ho, Wo});
    for (int b = 0; b < B; ++b) {
        double* cb = cols->data() + static_cast<std::int64_t>(b) * K * N;
        im2col(xv.data() + static_cast<std::int64_t>(b) * Cin * H * W, Cin, H, W, kh, kw, stride,
               pad, Ho, Wo, cb);
        double* ob = out.data() + static_cast<std::int64_t>(b) * Cout * N;
        gemm(wv.data(), Cout, K, false, cb, K, N, false, ob, Cout, N, 1.0, 0.0);
        for (int co = 0; co < Cout; ++co) {
            double* p = ob + static_cast<std::int64_t>(co) * N;
            const double add = bv[co];
            for (int i = 0; i < N; ++i) p[i] += add;
        }
    }
    return make_op(std::move(out), {x, w, bias},
                   [cols, B, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K, N](Node& nd) {
        Node* px = nd.parents[0].get();
        Node* pw = nd.parents[1].get();
        Node* pb = nd.parents[2].get();
        Tensor dcols({K, N});
        for (int b = 0; b < B; ++b) {
            const double* g = nd.grad.data() + static_cast<std::int64_t>(b) * Cout * N;
            const double* cb = cols->data() + static_cast<std::int64_t>(b) * K * N;
            if (pw->requires_grad) {
                gemm(g, Cout, N, false, cb, K, N, true,
                     pw->ensure_grad().data(), Cout, K, 1.0, 1.0);
            }
            if (pb->requires_grad) {
                Tensor& db = pb->ensure_grad();
                for (int co = 0; co < Cout; ++co) {
                    const double* p = g + static_cast<std::int64_t>(co) * N;
                    double s = 0.0;
                    for (int i = 0; i < N; ++i) s += p[i];
                    db[co] += s;
                }
            }
            if (px->requires_grad) {
                gemm(pw->value.data(), Cout, K, true, g, Cout, N, false, dcols.data(), K, N, 1.0,
                     0.0);
                col2im_add(dcols.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                           px->ensure_grad().data() + static_cast<std::int64_t>(b) * Cin * H * W);
            }
        }
    });
}

Var upsample_nearest2x(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.dim() != 4) throw std::invalid_argument("upsample_nearest2x: want B,C,H,W");
    const int B = xv.size(0), C = xv.size(1), H = xv.size(2), W = xv.size(3);
    Tensor out({B, C, 2 * H, 2 * W});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    const double v = xv.at4(b, c, y, xx);
                    out.at4(b, c, 2 * y, 2 * xx) = v;
                    out.at4(b, c, 2 * y, 2 * xx + 1) = v;
                    out.at4(b, c, 2 * y + 1, 2 * xx) = v;
                    out.at4(b, c, 2 * y + 1, 2 * xx + 1) = v;
                }
    return make_op(std::move(out), {x}, [B, C, H, W](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx) {
                        g.at4(b, c, y, xx) += n.grad.at4(b, c, 2 * y, 2 * xx) +
                                              n.grad.at4(b, c, 2 * y, 2 * xx + 1) +
                                              n.grad.at4(b, c, 2 * y + 1, 2 * xx) +
                                              n.grad.at4(b, c, 2 * y + 1, 2 * xx + 1);
                    }
    });
}

namespace {

struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<double> w1; // weight of i1; weight of i0 is 1-w1
};

LerpAxis make_lerp_axis(int in, int out) {
    LerpAxis ax;
    ax.i0.resize(static_cast<size_t>(out));
    ax.i1.resize(static_cast<size_t>(out));
    ax.w1.resize(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double s = (o + 0.5) * scale - 0.5;
        double f = std::floor(s);
        int lo = static_cast<int>(f);
        double w = s - f;
        int hi = lo + 1;
        if (lo < 0) { lo = 0; hi = 0; w = 0.0; }
        if (hi >= in) { hi = in - 1; if (lo >= in) lo = in - 1; if (lo == hi) w = 0.0; }
        ax.i0[static_cast<size_t>(o)] = lo;
        ax.i1[static_cast<size_t>(o)] = hi;
        ax.w1[static_cast<size_t>(o)] = w;
    }
    return ax;
}

} // namespace

Var resize_bilinear(const Var& x, int out_h, int out_w) {
    const Tensor& xv = x.value();
    if (xv.dim() != 4) throw std::invalid_argument("resize_bilinear: want B,C,H,W");
    const int B = xv.size(0), C = xv.size(1), H = xv.size(2), W = xv.size(3);
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: bad output size");
    if (out_h == H && out_w == W) {
        Tensor out = xv;
        return make_op(std::move(out), {x},
                       [](Node& n) { accum(n.parents[0].get(), n.grad); });
    }
    auto ay = std::make_shared<LerpAxis>(make_lerp_axis(H, out_h));
    auto ax = std::make_shared<LerpAxis>(make_lerp_axis(W, out_w));
    Tensor out({B, C, out_h, out_w});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* src = xv.data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
            double* dst = out.data() + (static_cast<std::int64_t>(b) * C + c) * out_h * out_w;
            for (int oy = 0; oy < out_h; ++oy) {
                const int y0 = ay->i0[static_cast<size_t>(oy)], y1 = ay->i1[static_cast<size_t>(oy)];
                const double wy = ay->w1[static_cast<size_t>(oy)];
                for (int ox = 0; ox < out_w; ++ox) {
                    const int x0 = ax->i0[static_cast<size_t>(ox)], x1 = ax->i1[static_cast<size_t>(ox)];
                    const double wx = ax->w1[static_cast<size_t>(ox)];
                    dst[static_cast<std::int64_t>(oy) * out_w + ox] =
                        (1 - wy) * ((1 - wx) * src[static_cast<std::int64_t>(y0) * W + x0] +
                                    wx * src[static_cast<std::int64_t>(y0) * W + x1]) +
                        wy * ((1 - wx) * src[static_cast<std::int64_t>(y1) * W + x0] +
                              wx * src[static_cast<std::int64_t>(y1) * W + x1]);
                }
            }
        }
    return make_op(std::move(out), {x}, [ay, ax, B, C, H, W, out_h, out_w](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double* dst = g.data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
                const double* src = n.grad.data() + (static_cast<std::int64_t>(b) * C + c) * out_h * out_w;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int y0 = ay->i0[static_cast<size_t>(oy)], y1 = ay->i1[static_cast<size_t>(oy)];
                    const double wy = ay->w1[static_cast<size_t>(oy)];
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int x0 = ax->i0[static_cast<size_t>(ox)], x1 = ax->i1[static_cast<size_t>(ox)];
                        const double wx = ax->w1[static_cast<size_t>(ox)];
                        const double gv = src[static_cast<std::int64_t>(oy) * out_w + ox];
                        dst[static_cast<std::int64_t>(y0) * W + x0] += (1 - wy) * (1 - wx) * gv;
                        dst[static_cast<std::int64_t>(y0) * W + x1] += (1 - wy) * wx * gv;
                        dst[static_cast<std::int64_t>(y1) * W + x0] += wy * (1 - wx) * gv;
                        dst[static_cast<std::int64_t>(y1) * W + x1] += wy * wx * gv;
                    }
                }
            }
    });
}

// ------------------------------------------------------------- normalization

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Tensor& xv = x.value();
    const int D = xv.size(xv.dim() - 1);
    if (gamma.value().numel() != D || beta.value().numel() != D) {
        throw std::invalid_argument("layer_norm: affine params must match last dim");
    }
    const std::int64_t R = xv.numel() / D;
    auto xhat = std::make_shared<Tensor>(xv.shape());
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(R));
    Tensor out(xv.shape());
    const double* gv = gamma.value().data();
    const double* bv = beta.value().data();
    for (std::int64_t r = 0; r < R; ++r) {
        const double* px = xv.data() + r * D;
        double mu = 0.0;
        for (int d = 0; d < D; ++d) mu += px[d];
        mu /= D;
        double var = 0.0;
        for (int d = 0; d < D; ++d) var += (px[d] - mu) * (px[d] - mu);
        var /= D;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<size_t>(r)] = is;
        double* ph = xhat->data() + r * D;
        double* po = out.data() + r * D;
        for (int d = 0; d < D; ++d) {
            ph[d] = (px[d] - mu) * is;
            po[d] = ph[d] * gv[d] + bv[d];
        }
    }
    return make_op(std::move(out), {x, gamma, beta}, [xhat, inv_sigma, R, D](Node& n) {
        Node* px = n.parents[0].get();
        Node* pg = n.parents[1].get();
        Node* pb = n.parents[2].get();
        const double* gv = pg->value.data();
        for (std::int64_t r = 0; r < R; ++r) {
            const double* g = n.grad.data() + r * D;
            const double* h = xhat->data() + r * D;
            if (pg->requires_grad) {
                Tensor& dg = pg->ensure_grad();
                for (int d = 0; d < D; ++d) dg[d] += g[d] * h[d];
            }
            if (pb->requires_grad) {
                Tensor& db = pb->ensure_grad();
                for (int d = 0; d < D; ++d) db[d] += g[d];
            }
            if (px->requires_grad) {
                double m1 = 0.0, m2 = 0.0;
                for (int d = 0; d < D; ++d) {
                    const double dh = g[d] * gv[d];
                    m1 += dh;
                    m2 += dh * h[d];
                }
                m1 /= D;
                m2 /= D;
                const double is = (*inv_sigma)[static_cast<size_t>(r)];
                double* dx = px->ensure_grad().data() + r * D;
                for (int d = 0; d < D; ++d) {
                    const double dh = g[d] * gv[d];
                    dx[d] += is * (dh - m1 - h[d] * m2);
                }
            }
        }
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const Tensor& xv = x.value();
    if (xv.dim() != 4) throw std::invalid_argument("group_norm: want B,C,H,W");
    const int B = xv.size(0), C = xv.size(1), H = xv.size(2), W = xv.size(3);
    if (groups < 1 || C % groups != 0) {
        throw std::invalid_argument("group_norm: channels " + std::to_string(C) +
                                    " not divisible by groups " + std::to_string(groups));
    }
    if (gamma.value().numel() != C || beta.value().numel() != C) {
        throw std::invalid_argument("group_norm: affine params must match channel count");
    }
    const int cpg = C / groups;
    const std::int64_t gs = static_cast<std::int64_t>(cpg) * H * W;
    auto xhat = std::make_shared<Tensor>(xv.shape());
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(B) * groups);
    Tensor out(xv.shape());
    const double* gv = gamma.value().data();
    const double* bv = beta.value().data();
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int b = 0; b < B; ++b)
        for (int g = 0; g < groups; ++g) {
            const double* px = xv.data() + (static_cast<std::int64_t>(b) * C + g * cpg) * hw;
            double mu = 0.0;
            for (std::int64_t i = 0; i < gs; ++i) mu += px[i];
            mu /= static_cast<double>(gs);
            double var = 0.0;
            for (std::int64_t i = 0; i < gs; ++i) var += (px[i] - mu) * (px[i] - mu);
            var /= static_cast<double>(gs);
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_sigma)[static_cast<size_t>(b) * groups + g] = is;
            double* ph = xhat->data() + (static_cast<std::int64_t>(b) * C + g * cpg) * hw;
            double* po = out.data() + (static_cast<std::int64_t>(b) * C + g * cpg) * hw;
            for (int cc = 0; cc < cpg; ++cc) {
                const double ga = gv[g * cpg + cc], be = bv[g * cpg + cc];
                for (std::int64_t i = 0; i < hw; ++i) {
                    const double h = (px[cc * hw + i] - mu) * is;
                    ph[cc * hw + i] = h;
                    po[cc * hw + i] = h * ga + be;
                }
            }
        }
    return make_op(std::move(out), {x, gamma, beta},
                   [xhat, inv_sigma, B, C, groups, cpg, hw, gs](Node& n) {
        Node* px = n.parents[0].get();
        Node* pg = n.parents[1].get();
        Node* pb = n.parents[2].get();
        const double* gv = pg->value.data();
        for (int b = 0; b < B; ++b)
            for (int g = 0; g < groups; ++g) {
                const std::int64_t base = (static_cast<std::int64_t>(b) * C + g * cpg) * hw;
                const double* gr = n.grad.data() + base;
                const double* h = xhat->data() + base;
                if (pg->requires_grad || pb->requires_grad) {
                    for (int cc = 0; cc < cpg; ++cc) {
                        double sg = 0.0, sb = 0.0;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            sg += gr[cc * hw + i] * h[cc * hw + i];
                            sb += gr[cc * hw + i];
                        }
                        if (pg->requires_grad) pg->ensure_grad()[g * cpg + cc] += sg;
                        if (pb->requires_grad) pb->ensure_grad()[g * cpg + cc] += sb;
                    }
                }
                if (px->requires_grad) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int cc = 0; cc < cpg; ++cc) {
                        const double ga = gv[g * cpg + cc];
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const double dh = gr[cc * hw + i] * ga;
                            m1 += dh;
                            m2 += dh * h[cc * hw + i];
                        }
                    }
                    m1 /= static_cast<double>(gs);
                    m2 /= static_cast<double>(gs);
                    const double is = (*inv_sigma)[static_cast<size_t>(b) * groups + g];
                    double* dx = px->ensure_grad().data() + base;
                    for (int cc = 0; cc < cpg; ++cc) {
                        const double ga = gv[g * cpg + cc];
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const double dh = gr[cc * hw + i] * ga;
                            dx[cc * hw + i] += is * (dh - m1 - h[cc * hw + i] * m2);
                        }
                    }
                }
            }
    });
}

// --------------------------------------------------------------- activations

Var leaky_relu(const Var& x, double slope) {
    Tensor out = x.value();
    for (std::int64_t i = 0; i < out.numel(); ++i)
        if (out[i] < 0.0) out[i] *= slope;
    return make_op(std::move(out), {x}, [slope](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        const Tensor& xv = p->value;
        for (std::int64_t i = 0; i < g.numel(); ++i)
            g[i] += n.grad[i] * (xv[i] >= 0.0 ? 1.0 : slope);
    });
}

Var gelu(const Var& x) {
    Tensor out = x.value();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = 0.5 * out[i] * (1.0 + std::erf(out[i] * inv_sqrt2));
    return make_op(std::move(out), {x}, [](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        Tensor& g = p->ensure_grad();
        const Tensor& xv = p->value;
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const double v = xv[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            g[i] += n.grad[i] * (cdf + v * pdf);
        }
    });
}

Var softplus(const Var& x) {
    Tensor out = x.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = stable_softplus(out[i]);
    return make_op(std::move(out), {x}, [](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        const Tensor& xv = p->value;
        for (std::int64_t i = 0; i < g.numel(); ++i)
            g[i] += n.grad[i] * stable_sigmoid(xv[i]);
    });
}

Var clamp01(const Var& x) {
    Tensor out = x.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], 0.0, 1.0);
    return make_op(std::move(out), {x}, [](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        const Tensor& xv = p->value;
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (xv[i] >= 0.0 && xv[i] <= 1.0) g[i] += n.grad[i];
    });
}

Var softmax_lastdim(const Var& x) {
    const Tensor& xv = x.value();
    const int D = xv.size(xv.dim() - 1);
    const std::int64_t R = xv.numel() / D;
    Tensor out(xv.shape());
    for (std::int64_t r = 0; r < R; ++r) {
        const double* px = xv.data() + r * D;
        double* po = out.data() + r * D;
        double m = px[0];
        for (int d = 1; d < D; ++d) m = std::max(m, px[d]);
        double z = 0.0;
        for (int d = 0; d < D; ++d) {
            po[d] = std::exp(px[d] - m);
            z += po[d];
        }
        const double iz = 1.0 / z;
        for (int d = 0; d < D; ++d) po[d] *= iz;
    }
    return make_op(std::move(out), {x}, [R, D](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (std::int64_t r = 0; r < R; ++r) {
            const double* y = n.value.data() + r * D;
            const double* gy = n.grad.data() + r * D;
            double dot = 0.0;
            for (int d = 0; d < D; ++d) dot += gy[d] * y[d];
            double* dx = g.data() + r * D;
            for (int d = 0; d < D; ++d) dx[d] += y[d] * (gy[d] - dot);
        }
    });
}

// ------------------------------------------------------- reductions / rowwise

Var mean_all(const Var& x) {
    const std::int64_t n = x.value().numel();
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) s += x.value()[i];
    Tensor out({1});
    out[0] = s / static_cast<double>(n);
    return make_op(std::move(out), {x}, [n](Node& nd) {
        Node* p = nd.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        const double gv = nd.grad[0] / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) g[i] += gv;
    });
}

Var sum_all(const Var& x) {
    const std::int64_t n = x.value().numel();
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) s += x.value()[i];
    Tensor out({1});
    out[0] = s;
    return make_op(std::move(out), {x}, [n](Node& nd) {
        Node* p = nd.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        const double gv = nd.grad[0];
        for (std::int64_t i = 0; i < n; ++i) g[i] += gv;
    });
}

Var abs(const Var& x) {
    Tensor out = x.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::fabs(out[i]);
    return make_op(std::move(out), {x}, [](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        const Tensor& xv = p->value;
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            if (xv[i] > 0.0) g[i] += n.grad[i];
            else if (xv[i] < 0.0) g[i] -= n.grad[i];
        }
    });
}

Var logsumexp_rows(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.dim() != 2) throw std::invalid_argument("logsumexp_rows: want [N,M]");
    const int N = xv.size(0), M = xv.size(1);
    auto soft = std::make_shared<Tensor>(std::vector<int>{N, M});
    Tensor out({N});
    for (int r = 0; r < N; ++r) {
        const double* px = xv.data() + static_cast<std::int64_t>(r) * M;
        double m = px[0];
        for (int c = 1; c < M; ++c) m = std::max(m, px[c]);
        double z = 0.0;
        double* ps = soft->data() + static_cast<std::int64_t>(r) * M;
        for (int c = 0; c < M; ++c) {
            ps[c] = std::exp(px[c] - m);
            z += ps[c];
        }
        out[r] = m + std::log(z);
        const double iz = 1.0 / z;
        for (int c = 0; c < M; ++c) ps[c] *= iz;
    }
    return make_op(std::move(out), {x}, [soft, N, M](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int r = 0; r < N; ++r) {
            const double gv = n.grad[r];
            const double* ps = soft->data() + static_cast<std::int64_t>(r) * M;
            double* dx = g.data() + static_cast<std::int64_t>(r) * M;
            for (int c = 0; c < M; ++c) dx[c] += gv * ps[c];
        }
    });
}

Var dot_rows(const Var& a, const Var& b) {
    check_same_shape("dot_rows", a.value(), b.value());
    if (a.value().dim() != 2) throw std::invalid_argument("dot_rows: want [N,D]");
    const int N = a.value().size(0), D = a.value().size(1);
    Tensor out({N});
    for (int r = 0; r < N; ++r) {
        const double* pa = a.value().data() + static_cast<std::int64_t>(r) * D;
        const double* pb = b.value().data() + static_cast<std::int64_t>(r) * D;
        double s = 0.0;
        for (int d = 0; d < D; ++d) s += pa[d] * pb[d];
        out[r] = s;
    }
    return make_op(std::move(out), {a, b}, [N, D](Node& n) {
        Node* pa = n.parents[0].get();
        Node* pb = n.parents[1].get();
        for (int r = 0; r < N; ++r) {
            const double gv = n.grad[r];
            if (pa->requires_grad) {
                double* da = pa->ensure_grad().data() + static_cast<std::int64_t>(r) * D;
                const double* bv = pb->value.data() + static_cast<std::int64_t>(r) * D;
                for (int d = 0; d < D; ++d) da[d] += gv * bv[d];
            }
            if (pb->requires_grad) {
                double* db = pb->ensure_grad().data() + static_cast<std::int64_t>(r) * D;
                const double* av = pa->value.data() + static_cast<std::int64_t>(r) * D;
                for (int d = 0; d < D; ++d) db[d] += gv * av[d];
            }
        }
    });
}

Var l2_normalize_rows(const Var& x, double eps) {
    const Tensor& xv = x.value();
    if (xv.dim() != 2) throw std::invalid_argument("l2_normalize_rows: want [N,D]");
    const int N = xv.size(0), D = xv.size(1);
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(N));
    Tensor out(xv.shape());
    for (int r = 0; r < N; ++r) {
        const double* px = xv.data() + static_cast<std::int64_t>(r) * D;
        double s = 0.0;
        for (int d = 0; d < D; ++d) s += px[d] * px[d];
        const double nrm = std::sqrt(s);
        (*norms)[static_cast<size_t>(r)] = nrm;
        const double inv = 1.0 / (nrm + eps);
        double* po = out.data() + static_cast<std::int64_t>(r) * D;
        for (int d = 0; d < D; ++d) po[d] = px[d] * inv;
    }
    return make_op(std::move(out), {x}, [norms, N, D, eps](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int r = 0; r < N; ++r) {
            const double nrm = (*norms)[static_cast<size_t>(r)];
            const double denom = nrm + eps;
            const double* gv = n.grad.data() + static_cast<std::int64_t>(r) * D;
            const double* px = p->value.data() + static_cast<std::int64_t>(r) * D;
            double* dx = g.data() + static_cast<std::int64_t>(r) * D;
            if (nrm < 1e-300) {
                for (int d = 0; d < D; ++d) dx[d] += gv[d] / denom;
                continue;
            }
            double dot = 0.0;
            for (int d = 0; d < D; ++d) dot += gv[d] * px[d];
            const double k = dot / (nrm * denom * denom);
            for (int d = 0; d < D; ++d) dx[d] += gv[d] / denom - px[d] * k;
        }
    });
}

Var gather_spatial(const Var& x, const std::vector<std::array<int, 3>>& coords) {
    const Tensor& xv = x.value();
    if (xv.dim() != 4) throw std::invalid_argument("gather_spatial: want B,C,H,W");
    const int B = xv.size(0), C = xv.size(1), H = xv.size(2), W = xv.size(3);
    const int n = static_cast<int>(coords.size());
    for (const auto& c : coords) {
        if (c[0] < 0 || c[0] >= B || c[1] < 0 || c[1] >= W || c[2] < 0 || c[2] >= H) {
            throw std::invalid_argument("gather_spatial: coordinate outside feature grid");
        }
    }
    auto clist = std::make_shared<std::vector<std::array<int, 3>>>(coords);
    Tensor out({n, C});
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int i = 0; i < n; ++i) {
        const auto& c = coords[static_cast<size_t>(i)];
        const std::int64_t off = static_cast<std::int64_t>(c[0]) * C * hw + static_cast<std::int64_t>(c[2]) * W + c[1];
        for (int ch = 0; ch < C; ++ch) out.at2(i, ch) = xv[off + static_cast<std::int64_t>(ch) * hw];
    }
    return make_op(std::move(out), {x}, [clist, C, hw, W](Node& nd) {
        Node* p = nd.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (size_t i = 0; i < clist->size(); ++i) {
            const auto& c = (*clist)[i];
            const std::int64_t off = static_cast<std::int64_t>(c[0]) * C * hw + static_cast<std::int64_t>(c[2]) * W + c[1];
            for (int ch = 0; ch < C; ++ch)
                g[off + static_cast<std::int64_t>(ch) * hw] += nd.grad.at2(static_cast<int>(i), ch);
        }
    });
}

// ----------------------------------------------------------- token utilities

Var linear_lastdim(const Var& x, const Var& w, const Var& bias) {
    const Tensor& xv = x.value();
    const int D = xv.size(xv.dim() - 1);
    if (w.value().dim() != 2 || w.value().size(0) != D) shape_error("linear_lastdim", xv, w.value());
    const int Dout = w.value().size(1);
    std::vector<int> out_shape = xv.shape();
    out_shape.back() = Dout;
    const int rows = static_cast<int>(xv.numel() / D);
    Var flat = reshape(x, {rows, D});
    Var y = add_row_bias(matmul(flat, w), bias);
    return reshape(y, std::move(out_shape));
}

Var prepend_token(const Var& tokens, const Var& token) {
    const Tensor& tv = tokens.value();
    if (tv.dim() != 3 || token.value().numel() != tv.size(2)) {
        shape_error("prepend_token", tv, token.value());
    }
    const int B = tv.size(0), N = tv.size(1), D = tv.size(2);
    Tensor out({B, N + 1, D});
    for (int b = 0; b < B; ++b) {
        for (int d = 0; d < D; ++d) out.at3(b, 0, d) = token.value()[d];
        std::copy_n(tv.data() + static_cast<std::int64_t>(b) * N * D, static_cast<std::int64_t>(N) * D,
                    out.data() + (static_cast<std::int64_t>(b) * (N + 1) + 1) * D);
    }
    return make_op(std::move(out), {tokens, token}, [B, N, D](Node& n) {
        Node* pt = n.parents[0].get();
        Node* pc = n.parents[1].get();
        for (int b = 0; b < B; ++b) {
            if (pc->requires_grad) {
                Tensor& g = pc->ensure_grad();
                for (int d = 0; d < D; ++d) g[d] += n.grad.at3(b, 0, d);
            }
            if (pt->requires_grad) {
                double* dst = pt->ensure_grad().data() + static_cast<std::int64_t>(b) * N * D;
                const double* src = n.grad.data() + (static_cast<std::int64_t>(b) * (N + 1) + 1) * D;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(N) * D; ++i) dst[i] += src[i];
            }
        }
    });
}

Var drop_first_token(const Var& tokens) {
    const Tensor& tv = tokens.value();
    if (tv.dim() != 3 || tv.size(1) < 2) throw std::invalid_argument("drop_first_token: want [B,N>=2,D]");
    const int B = tv.size(0), N = tv.size(1), D = tv.size(2);
    Tensor out({B, N - 1, D});
    for (int b = 0; b < B; ++b)
        std::copy_n(tv.data() + (static_cast<std::int64_t>(b) * N + 1) * D,
                    static_cast<std::int64_t>(N - 1) * D,
                    out.data() + static_cast<std::int64_t>(b) * (N - 1) * D);
    return make_op(std::move(out), {tokens}, [B, N, D](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int b = 0; b < B; ++b) {
            double* dst = g.data() + (static_cast<std::int64_t>(b) * N + 1) * D;
            const double* src = n.grad.data() + static_cast<std::int64_t>(b) * (N - 1) * D;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(N - 1) * D; ++i) dst[i] += src[i];
        }
    });
}

Var add_position(const Var& x, const Var& pos) {
    const Tensor& xv = x.value();
    const Tensor& pv = pos.value();
    if (xv.dim() != 3 || pv.dim() != 2 || pv.size(0) != xv.size(1) || pv.size(1) != xv.size(2)) {
        shape_error("add_position", xv, pv);
    }
    const int B = xv.size(0);
    const std::int64_t nd = static_cast<std::int64_t>(xv.size(1)) * xv.size(2);
    Tensor out = xv;
    for (int b = 0; b < B; ++b) {
        double* p = out.data() + b * nd;
        for (std::int64_t i = 0; i < nd; ++i) p[i] += pv[i];
    }
    return make_op(std::move(out), {x, pos}, [B, nd](Node& n) {
        accum(n.parents[0].get(), n.grad);
        Node* pp = n.parents[1].get();
        if (pp->requires_grad) {
            Tensor& g = pp->ensure_grad();
            for (int b = 0; b < B; ++b) {
                const double* src = n.grad.data() + b * nd;
                for (std::int64_t i = 0; i < nd; ++i) g[i] += src[i];
            }
        }
    });
}

Var channel_affine(const Var& x, const std::vector<double>& scale,
                   const std::vector<double>& shift) {
    const Tensor& xv = x.value();
    if (xv.dim() != 4 || scale.size() != static_cast<size_t>(xv.size(1)) ||
        shift.size() != scale.size()) {
        throw std::invalid_argument("channel_affine: scale/shift must match channel count");
    }
    const int B = xv.size(0), C = xv.size(1);
    const std::int64_t hw = static_cast<std::int64_t>(xv.size(2)) * xv.size(3);
    Tensor out = xv;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            double* p = out.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) p[i] = p[i] * scale[static_cast<size_t>(c)] +
                                                         shift[static_cast<size_t>(c)];
        }
    return make_op(std::move(out), {x}, [B, C, hw, scale](Node& n) {
        Node* p = n.parents[0].get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double* dst = g.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
                const double* src = n.grad.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) dst[i] += src[i] * scale[static_cast<size_t>(c)];
            }
    });
}

// ----------------------------------------------------------------- attention

Var scaled_dot_attention(const Var& q, const Var& k, const Var& v) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    if (qv.dim() != 2 || kv.dim() != 2 || vv.dim() != 2) {
        throw std::invalid_argument("scaled_dot_attention: want 2-D token matrices");
    }
    if (qv.size(1) != kv.size(1) || kv.size(0) != vv.size(0)) {
        throw std::invalid_argument("scaled_dot_attention: Q/K width or K/V token count mismatch");
    }
    if (!qv.all_finite() || !kv.all_finite() || !vv.all_finite()) {
        throw std::domain_error("scaled_dot_attention: non-finite input");
    }
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(qv.size(1)));
    Var scores = scale(matmul(q, k, false, true), scale_factor);
    Var weights = softmax_lastdim(scores);
    return matmul(weights, v);
}

Var scaled_dot_attention_batched(const Var& q, const Var& k, const Var& v) {
    const Tensor& qv = q.value();
    if (qv.dim() != 3) throw std::invalid_argument("scaled_dot_attention_batched: want 3-D stacks");
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(qv.size(2)));
    Var scores = scale(bmm(q, k, false, true), scale_factor);
    Var weights = softmax_lastdim(scores);
    return bmm(weights, v);
}

} // namespace alden::nn
