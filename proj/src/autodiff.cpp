#include "csmp/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace csmp {

namespace {

std::size_t row_size(const Tensor& t) {
    if (t.rank() == 0 || t.shape[0] == 0) return 0;
    return t.size() / t.shape[0];
}

std::vector<int> grade_of_mask(const Metric& m) {
    std::vector<int> g(m.blade_count());
    for (std::uint32_t i = 0; i < g.size(); ++i) g[i] = blade_grade(i);
    return g;
}

std::vector<double> blade_factors(const Metric& m) {
    std::vector<double> f(m.blade_count());
    for (std::uint32_t mask = 0; mask < f.size(); ++mask) {
        double w = 1.0;
        std::uint32_t bits = mask;
        while (bits != 0) {
            w *= m.signature[__builtin_ctz(bits)];
            bits &= bits - 1;
        }
        f[mask] = std::fabs(w);
    }
    return f;
}

void check_mv_shape(const Tensor& t, std::size_t blades, const char* op) {
    if (t.rank() != 3 || t.shape[2] != blades)
        throw std::invalid_argument(std::string(op) + ": expected [N,C," +
                                    std::to_string(blades) + "], got " +
                                    Tensor::shape_str(t.shape));
}

}  // namespace

int Tape::check(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
        throw std::invalid_argument("tape: invalid var");
    return v.id;
}

Tensor& Tape::grad_slot(int id) {
    Node& n = nodes_[id];
    if (!n.grad_live) {
        n.grad = Tensor(n.value.shape);
        n.grad_live = true;
    }
    return n.grad;
}

const Tensor& Tape::grad(Var v) const {
    const Node& n = nodes_[check(v)];
    if (!n.grad_live) throw std::runtime_error("tape: gradient not computed");
    return n.grad;
}

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, false, std::move(back)});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

void Tape::backward(Var loss) {
    int l = check(loss);
    if (nodes_[l].value.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar");
    for (Node& n : nodes_) n.grad_live = false;
    grad_slot(l)[0] = 1.0;
    for (int id = l; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.grad_live && n.back) n.back(*this);
    }
}

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    Tensor::shape_str(a.shape) + " vs " +
                                    Tensor::shape_str(b.shape));
}

Var Tape::add(Var a, Var b) {
    require_same_shape(value(a), value(b), "add");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    int self = static_cast<int>(nodes_.size());
    int ia = a.id, ib = b.id;
    bool ra = requires_grad(a), rb = requires_grad(b);
    return push(std::move(out), ra || rb, [=](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        if (ra) {
            Tensor& da = t.grad_slot(ia);
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (rb) {
            Tensor& db = t.grad_slot(ib);
            for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
        }
    });
}

Var Tape::sub(Var a, Var b) {
    require_same_shape(value(a), value(b), "sub");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    int self = static_cast<int>(nodes_.size());
    int ia = a.id, ib = b.id;
    bool ra = requires_grad(a), rb = requires_grad(b);
    return push(std::move(out), ra || rb, [=](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        if (ra) {
            Tensor& da = t.grad_slot(ia);
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (rb) {
            Tensor& db = t.grad_slot(ib);
            for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    require_same_shape(value(a), value(b), "mul");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    int self = static_cast<int>(nodes_.size());
    int ia = a.id, ib = b.id;
    bool ra = requires_grad(a), rb = requires_grad(b);
    return push(std::move(out), ra || rb, [=](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& va = t.nodes_[ia].value;
        const Tensor& vb2 = t.nodes_[ib].value;
        if (ra) {
            Tensor& da = t.grad_slot(ia);
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * vb2[i];
        }
        if (rb) {
            Tensor& db = t.grad_slot(ib);
            for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * va[i];
        }
    });
}

Var Tape::divide(Var a, Var b) {
    require_same_shape(value(a), value(b), "divide");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= vb[i];
    int self = static_cast<int>(nodes_.size());
    int ia = a.id, ib = b.id;
    bool ra = requires_grad(a), rb = requires_grad(b);
    return push(std::move(out), ra || rb, [=](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& vout = t.nodes_[self].value;
        const Tensor& vb2 = t.nodes_[ib].value;
        if (ra) {
            Tensor& da = t.grad_slot(ia);
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / vb2[i];
        }
        if (rb) {
            Tensor& db = t.grad_slot(ib);
            for (std::size_t i = 0; i < g.size(); ++i)
                db[i] -= g[i] * vout[i] / vb2[i];
        }
    });
}

Var Tape::scale(Var a, double s) {
    Tensor out = value(a);
    for (double& v : out.data) v *= s;
    int self = static_cast<int>(nodes_.size());
    int ia = a.id;
    bool ra = requires_grad(a);
    return push(std::move(out), ra, [=](Tape& t) {
        if (!ra) return;
        const Tensor& g = t.nodes_[self].grad;
        Tensor& da = t.grad_slot(ia);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += s * g[i];
    });
}

Var Tape::add_scalar(Var a, double s) {
    Tensor out = value(a);
    for (double& v : out.data) v += s;
    int self = static_cast<int>(nodes_.size());
    int ia = a.id;
    bool ra = requires_grad(a);
    return push(std::move(out), ra, [=](Tape& t) {
        if (!ra) return;
        const Tensor& g = t.nodes_[self].grad;
        Tensor& da = t.grad_slot(ia);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    });
}

Var Tape::sqrt_op(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::sqrt(v);
    int self = static_cast<int>(nodes_.size());
    int ia = a.id;
    bool ra = requires_grad(a);
    return push(std::move(out), ra, [=](Tape& t) {
        if (!ra) return;
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& vout = t.nodes_[self].value;
        Tensor& da = t.grad_slot(ia);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += 0.5 * g[i] / vout[i];
    });
}

Var Tape::sigmoid(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    int self = static_cast<int>(nodes_.size());
    int ia = a.id;
    bool ra = requires_grad(a);
    return push(std::move(out), ra, [=](Tape& t) {
        if (!ra) return;
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& vout = t.nodes_[self].value;
        Tensor& da = t.grad_slot(ia);
        for (std::size_t i = 0; i < g.size(); ++i)
            da[i] += g[i] * vout[i] * (1.0 - vout[i]);
    });
}

Var Tape::sum(Var a) {
    double acc = 0.0;
    for (double v : value(a).data) acc += v;
    int self = static_cast<int>(nodes_.size());
    int ia = a.id;
    bool ra = requires_grad(a);
    return push(Tensor::scalar(acc), ra, [=](Tape& t) {
        if (!ra) return;
        double g = t.nodes_[self].grad[0];
        Tensor& da = t.grad_slot(ia);
        for (double& v : da.data) v += g;
    });
}

Var Tape::reshape(Var a, std::vector<std::size_t> shape) {
    if (Tensor::count(shape) != value(a).size())
        throw std::invalid_argument("reshape: element count mismatch");
    Tensor out(std::move(shape), value(a).data);
    int self = static_cast<int>(nodes_.size());
    int ia = a.id;
    bool ra = requires_grad(a);
    return push(std::move(out), ra, [=](Tape& t) {
        if (!ra) return;
        const Tensor& g = t.nodes_[self].grad;
        Tensor& da = t.grad_slot(ia);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    });
}

Var Tape::concat_axis1(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_axis1: empty input");
    const Tensor& first = value(xs[0]);
    if (first.rank() < 2) throw std::invalid_argument("concat_axis1: rank must be >= 2");
    std::size_t n = first.shape[0];
    std::size_t trail = 1;
    for (std::size_t i = 2; i < first.rank(); ++i) trail *= first.shape[i];
    std::size_t total_c = 0;
    bool rg = false;
    for (Var x : xs) {
        const Tensor& t = value(x);
        if (t.rank() != first.rank() || t.shape[0] != n)
            throw std::invalid_argument("concat_axis1: incompatible shapes");
        for (std::size_t i = 2; i < t.rank(); ++i)
            if (t.shape[i] != first.shape[i])
                throw std::invalid_argument("concat_axis1: incompatible trailing dims");
        total_c += t.shape[1];
        rg = rg || requires_grad(x);
    }
    std::vector<std::size_t> shape = first.shape;
    shape[1] = total_c;
    Tensor out(shape);
    std::size_t out_row = total_c * trail;
    std::size_t off = 0;
    for (Var x : xs) {
        const Tensor& t = value(x);
        std::size_t blk = t.shape[1] * trail;
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t i = 0; i < blk; ++i)
                out[r * out_row + off + i] = t[r * blk + i];
        off += blk;
    }
    int self = static_cast<int>(nodes_.size());
    std::vector<int> ids;
    std::vector<std::size_t> blks;
    for (Var x : xs) {
        ids.push_back(x.id);
        blks.push_back(value(x).shape[1] * trail);
    }
    return push(std::move(out), rg, [=](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            std::size_t blk = blks[k];
            if (t.nodes_[ids[k]].requires_grad) {
                Tensor& d = t.grad_slot(ids[k]);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t i = 0; i < blk; ++i)
                        d[r * blk + i] += g[r * out_row + offset + i];
            }
            offset += blk;
        }
    });
}

Var Tape::concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
    const Tensor& first = value(xs[0]);
    std::size_t rs = row_size(first);
    std::size_t total_rows = 0;
    bool rg = false;
    for (Var x : xs) {
        const Tensor& t = value(x);
        if (t.rank() != first.rank())
            throw std::invalid_argument("concat_rows: rank mismatch");
        for (std::size_t i = 1; i < t.rank(); ++i)
            if (t.shape[i] != first.shape[i])
                throw std::invalid_argument("concat_rows: trailing dims mismatch");
        total_rows += t.shape[0];
        rg = rg || requires_grad(x);
    }
    std::vector<std::size_t> shape = first.shape;
    shape[0] = total_rows;
    Tensor out(shape);
    std::size_t pos = 0;
    for (Var x : xs) {
        const Tensor& t = value(x);
        for (std::size_t i = 0; i < t.size(); ++i) out[pos + i] = t[i];
        pos += t.size();
    }
    int self = static_cast<int>(nodes_.size());
    std::vector<int> ids;
    std::vector<std::size_t> sizes;
    for (Var x : xs) {
        ids.push_back(x.id);
        sizes.push_back(value(x).size());
    }
    (void)rs;
    return push(std::move(out), rg, [=](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.nodes_[ids[k]].requires_grad) {
                Tensor& d = t.grad_slot(ids[k]);
                for (std::size_t i = 0; i < sizes[k]; ++i) d[i] += g[offset + i];
            }
            offset += sizes[k];
        }
    });
}

Var Tape::gather_rows(Var a, std::vector<std::size_t> idx) {
    const Tensor& va = value(a);
    if (va.rank() == 0) throw std::invalid_argument("gather_rows: rank must be >= 1");
    std::size_t rs = row_size(va);
    for (std::size_t i : idx)
        if (i >= va.shape[0]) throw std::invalid_argument("gather_rows: index out of range");
    std::vector<std::size_t> shape = va.shape;
    shape[0] = idx.size();
    Tensor out(shape);
    for (std::size_t e = 0; e < idx.size(); ++e)
        for (std::size_t i = 0; i < rs; ++i) out[e * rs + i] = va[idx[e] * rs + i];
    int self = static_cast<int>(nodes_.size());
    int ia = a.id;
    bool ra = requires_grad(a);
    return push(std::move(out), ra, [=, indices = std::move(idx)](Tape& t) {
        if (!ra) return;
        const Tensor& g = t.nodes_[self].grad;
        Tensor& da = t.grad_slot(ia);
        for (std::size_t e = 0; e < indices.size(); ++e)
            for (std::size_t i = 0; i < rs; ++i)
                da[indices[e] * rs + i] += g[e * rs + i];
    });
}

Var Tape::segment_sum_rows(Var a, std::vector<std::size_t> seg, std::size_t out_rows) {
    const Tensor& va = value(a);
    if (va.rank() == 0) throw std::invalid_argument("segment_sum_rows: rank must be >= 1");
    if (seg.size() != va.shape[0])
        throw std::invalid_argument("segment_sum_rows: one segment id per row required");
    std::size_t rs = row_size(va);
    for (std::size_t s : seg)
        if (s >= out_rows) throw std::invalid_argument("segment_sum_rows: id out of range");
    std::vector<std::size_t> shape = va.shape;
    shape[0] = out_rows;
    Tensor out(shape);
    for (std::size_t r = 0; r < seg.size(); ++r)
        for (std::size_t i = 0; i < rs; ++i) out[seg[r] * rs + i] += va[r * rs + i];
    int self = static_cast<int>(nodes_.size());
    int ia = a.id;
    bool ra = requires_grad(a);
    return push(std::move(out), ra, [=, segments = std::move(seg)](Tape& t) {
        if (!ra) return;
        const Tensor& g = t.nodes_[self].grad;
        Tensor& da = t.grad_slot(ia);
        for (std::size_t r = 0; r < segments.size(); ++r)
            for (std::size_t i = 0; i < rs; ++i)
                da[r * rs + i] += g[segments[r] * rs + i];
    });
}

Var Tape::scale_rows(Var a, std::vector<double> s) {
    const Tensor& va = value(a);
    if (va.rank() == 0 || s.size() != va.shape[0])
        throw std::invalid_argument("scale_rows: one factor per row required");
    std::size_t rs = row_size(va);
    Tensor out = va;
    for (std::size_t r = 0; r < s.size(); ++r)
        for (std::size_t i = 0; i < rs; ++i) out[r * rs + i] *= s[r];
    int self = static_cast<int>(nodes_.size());
    int ia = a.id;
    bool ra = requires_grad(a);
    return push(std::move(out), ra, [=, factors = std::move(s)](Tape& t) {
        if (!ra) return;
        const Tensor& g = t.nodes_[self].grad;
        Tensor& da = t.grad_slot(ia);
        for (std::size_t r = 0; r < factors.size(); ++r)
            for (std::size_t i = 0; i < rs; ++i)
                da[r * rs + i] += factors[r] * g[r * rs + i];
    });
}

Var Tape::linear(Var x, Var w, Var b) {
    const Tensor& vx = value(x);
    const Tensor& vw = value(w);
    const Tensor& vb = value(b);
    if (vx.rank() != 2 || vw.rank() != 2 || vb.rank() != 1 ||
        vx.shape[1] != vw.shape[1] || vb.shape[0] != vw.shape[0])
        throw std::invalid_argument("linear: expected x [N,F], w [O,F], b [O]");
    std::size_t n = vx.shape[0], f = vx.shape[1], o = vw.shape[0];
    Tensor out({n, o});
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = vx.data.data() + r * f;
        double* yr = out.data.data() + r * o;
        for (std::size_t k = 0; k < o; ++k) {
            const double* wr = vw.data.data() + k * f;
            double acc = vb[k];
            for (std::size_t j = 0; j < f; ++j) acc += wr[j] * xr[j];
            yr[k] = acc;
        }
    }
    int self = static_cast<int>(nodes_.size());
    int ix = x.id, iw = w.id, ib = b.id;
    bool rx = requires_grad(x), rw = requires_grad(w), rb = requires_grad(b);
    return push(std::move(out), rx || rw || rb, [=](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& vx2 = t.nodes_[ix].value;
        const Tensor& vw2 = t.nodes_[iw].value;
        if (rx) {
            Tensor& dx = t.grad_slot(ix);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t k = 0; k < o; ++k) {
                    double gk = g[r * o + k];
                    for (std::size_t j = 0; j < f; ++j)
                        dx[r * f + j] += gk * vw2[k * f + j];
                }
        }
        if (rw) {
            Tensor& dw = t.grad_slot(iw);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t k = 0; k < o; ++k) {
                    double gk = g[r * o + k];
                    for (std::size_t j = 0; j < f; ++j)
                        dw[k * f + j] += gk * vx2[r * f + j];
                }
        }
        if (rb) {
            Tensor& db = t.grad_slot(ib);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t k = 0; k < o; ++k) db[k] += g[r * o + k];
        }
    });
}

Var Tape::mv_linear(Var x, Var w, const Metric& metric) {
    const Tensor& vx = value(x);
    const Tensor& vw = value(w);
    std::size_t blades = metric.blade_count();
    std::size_t grades = static_cast<std::size_t>(metric.d) + 1;
    check_mv_shape(vx, blades, "mv_linear");
    if (vw.rank() != 3 || vw.shape[1] != vx.shape[1] || vw.shape[2] != grades)
        throw std::invalid_argument("mv_linear: expected w [Cout,Cin," +
                                    std::to_string(grades) + "], got " +
                                    Tensor::shape_str(vw.shape));
    std::size_t n = vx.shape[0], ci = vx.shape[1], co = vw.shape[0];
    std::vector<int> gr = grade_of_mask(metric);

    // Weights expanded from per-grade to per-blade so inner loops stay dense.
    std::vector<double> wb(co * ci * blades);
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t m = 0; m < blades; ++m)
                wb[(o * ci + i) * blades + m] = vw[(o * ci + i) * grades + gr[m]];

    Tensor out({n, co, blades});
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = vx.data.data() + r * ci * blades;
        double* yr = out.data.data() + r * co * blades;
        for (std::size_t o = 0; o < co; ++o) {
            double* yo = yr + o * blades;
            for (std::size_t i = 0; i < ci; ++i) {
                const double* wi = wb.data() + (o * ci + i) * blades;
                const double* xi = xr + i * blades;
                for (std::size_t m = 0; m < blades; ++m) yo[m] += wi[m] * xi[m];
            }
        }
    }
    int self = static_cast<int>(nodes_.size());
    int ix = x.id, iw = w.id;
    bool rx = requires_grad(x), rw = requires_grad(w);
    return push(std::move(out), rx || rw,
                [=, wb = std::move(wb), gr = std::move(gr)](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& vx2 = t.nodes_[ix].value;
        if (rx) {
            Tensor& dx = t.grad_slot(ix);
            for (std::size_t r = 0; r < n; ++r) {
                const double* gr_row = g.data.data() + r * co * blades;
                double* dxr = dx.data.data() + r * ci * blades;
                for (std::size_t o = 0; o < co; ++o) {
                    const double* go = gr_row + o * blades;
                    for (std::size_t i = 0; i < ci; ++i) {
                        const double* wi = wb.data() + (o * ci + i) * blades;
                        double* dxi = dxr + i * blades;
                        for (std::size_t m = 0; m < blades; ++m) dxi[m] += wi[m] * go[m];
                    }
                }
            }
        }
        if (rw) {
            Tensor& dw = t.grad_slot(iw);
            for (std::size_t r = 0; r < n; ++r) {
                const double* gr_row = g.data.data() + r * co * blades;
                const double* xr = vx2.data.data() + r * ci * blades;
                for (std::size_t o = 0; o < co; ++o) {
                    const double* go = gr_row + o * blades;
                    for (std::size_t i = 0; i < ci; ++i) {
                        const double* xi = xr + i * blades;
                        double* dwi = dw.data.data() + (o * ci + i) * grades;
                        for (std::size_t m = 0; m < blades; ++m)
                            dwi[gr[m]] += go[m] * xi[m];
                    }
                }
            }
        }
    });
}

Var Tape::add_grade0_bias(Var x, Var b) {
    const Tensor& vx = value(x);
    const Tensor& vb = value(b);
    if (vx.rank() != 3 || vb.rank() != 1 || vb.shape[0] != vx.shape[1])
        throw std::invalid_argument("add_grade0_bias: expected x [N,C,B], b [C]");
    std::size_t n = vx.shape[0], c = vx.shape[1], blades = vx.shape[2];
    Tensor out = vx;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) out[(r * c + ch) * blades] += vb[ch];
    int self = static_cast<int>(nodes_.size());
    int ix = x.id, ib = b.id;
    bool rx = requires_grad(x), rb = requires_grad(b);
    return push(std::move(out), rx || rb, [=](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        if (rx) {
            Tensor& dx = t.grad_slot(ix);
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        }
        if (rb) {
            Tensor& db = t.grad_slot(ib);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t ch = 0; ch < c; ++ch) db[ch] += g[(r * c + ch) * blades];
        }
    });
}

namespace {

// Flattened product table: for every blade pair (a,b), the output blade and
// the structure coefficient, plus the (k,i,j) grade triple indexing the layer
// weight cube.
struct PairTable {
    std::size_t blades, grades;
    std::vector<std::uint32_t> out_mask;  // a * B + b -> a ^ b
    std::vector<double> coeff;
    std::vector<std::size_t> widx;        // (grade(a^b) * G + grade(a)) * G + grade(b)
};

PairTable make_pair_table(const CayleyTable& table) {
    const Metric& m = table.metric;
    PairTable p;
    p.blades = m.blade_count();
    p.grades = static_cast<std::size_t>(m.d) + 1;
    p.out_mask.resize(p.blades * p.blades);
    p.coeff.resize(p.blades * p.blades);
    p.widx.resize(p.blades * p.blades);
    for (std::uint32_t a = 0; a < p.blades; ++a)
        for (std::uint32_t b = 0; b < p.blades; ++b) {
            std::size_t idx = std::size_t{a} * p.blades + b;
            p.out_mask[idx] = a ^ b;
            p.coeff[idx] = table.at(a, b);
            p.widx[idx] = (static_cast<std::size_t>(blade_grade(a ^ b)) * p.grades +
                           blade_grade(a)) * p.grades + blade_grade(b);
        }
    return p;
}

}  // namespace

Var Tape::geometric_product(Var x, Var y, Var w, const CayleyTable& table) {
    const Tensor& vx = value(x);
    const Tensor& vy = value(y);
    const Tensor& vw = value(w);
    std::size_t blades = table.metric.blade_count();
    std::size_t grades = static_cast<std::size_t>(table.metric.d) + 1;
    check_mv_shape(vx, blades, "geometric_product");
    require_same_shape(vx, vy, "geometric_product");
    std::size_t n = vx.shape[0], c = vx.shape[1];
    if (vw.rank() != 4 || vw.shape[0] != c || vw.shape[1] != grades ||
        vw.shape[2] != grades || vw.shape[3] != grades)
        throw std::invalid_argument("geometric_product: expected w [C,G,G,G]");

    PairTable p = make_pair_table(table);
    std::size_t g3 = grades * grades * grades;
    // Per-channel weights expanded onto blade pairs.
    std::vector<double> wp(c * blades * blades);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* wc = vw.data.data() + ch * g3;
        double* wpc = wp.data() + ch * blades * blades;
        for (std::size_t idx = 0; idx < blades * blades; ++idx)
            wpc[idx] = p.coeff[idx] * wc[p.widx[idx]];
    }

    Tensor out({n, c, blades});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* xr = vx.data.data() + (r * c + ch) * blades;
            const double* yr = vy.data.data() + (r * c + ch) * blades;
            const double* wpc = wp.data() + ch * blades * blades;
            double* zr = out.data.data() + (r * c + ch) * blades;
            for (std::uint32_t a = 0; a < blades; ++a) {
                double xa = xr[a];
                if (xa == 0.0) continue;
                const double* wrow = wpc + std::size_t{a} * blades;
                for (std::uint32_t b = 0; b < blades; ++b)
                    zr[a ^ b] += wrow[b] * xa * yr[b];
            }
        }

    int self = static_cast<int>(nodes_.size());
    int ix = x.id, iy = y.id, iw = w.id;
    bool rx = requires_grad(x), ry = requires_grad(y), rw = requires_grad(w);
    return push(std::move(out), rx || ry || rw,
                [=, p = std::move(p), wp = std::move(wp)](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& vx2 = t.nodes_[ix].value;
        const Tensor& vy2 = t.nodes_[iy].value;
        Tensor* dx = rx ? &t.grad_slot(ix) : nullptr;
        Tensor* dy = ry ? &t.grad_slot(iy) : nullptr;
        Tensor* dw = rw ? &t.grad_slot(iw) : nullptr;
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t ch = 0; ch < c; ++ch) {
                std::size_t base = (r * c + ch) * blades;
                const double* xr = vx2.data.data() + base;
                const double* yr = vy2.data.data() + base;
                const double* gz = g.data.data() + base;
                const double* wpc = wp.data() + ch * blades * blades;
                double* dwc = rw ? dw->data.data() + ch * g3 : nullptr;
                for (std::uint32_t a = 0; a < blades; ++a) {
                    std::size_t arow = std::size_t{a} * blades;
                    double xa = xr[a];
                    double dxa = 0.0;
                    for (std::uint32_t b = 0; b < blades; ++b) {
                        double gm = gz[a ^ b];
                        double wv = wpc[arow + b];
                        if (rx) dxa += wv * yr[b] * gm;
                        if (ry) (*dy)[base + b] += wv * xa * gm;
                        if (rw) dwc[p.widx[arow + b]] += p.coeff[arow + b] * xa * yr[b] * gm;
                    }
                    if (rx) (*dx)[base + a] += dxa;
                }
            }
    });
}

Var Tape::geometric_product_full(Var x, Var y, const CayleyTable& table) {
    const Tensor& vx = value(x);
    const Tensor& vy = value(y);
    std::size_t blades = table.metric.blade_count();
    check_mv_shape(vx, blades, "geometric_product_full");
    require_same_shape(vx, vy, "geometric_product_full");
    std::size_t n = vx.shape[0], c = vx.shape[1];

    PairTable p = make_pair_table(table);
    Tensor out({n, c, blades});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* xr = vx.data.data() + (r * c + ch) * blades;
            const double* yr = vy.data.data() + (r * c + ch) * blades;
            double* zr = out.data.data() + (r * c + ch) * blades;
            for (std::uint32_t a = 0; a < blades; ++a) {
                double xa = xr[a];
                if (xa == 0.0) continue;
                const double* crow = p.coeff.data() + std::size_t{a} * blades;
                for (std::uint32_t b = 0; b < blades; ++b)
                    zr[a ^ b] += crow[b] * xa * yr[b];
            }
        }

    int self = static_cast<int>(nodes_.size());
    int ix = x.id, iy = y.id;
    bool rx = requires_grad(x), ry = requires_grad(y);
    return push(std::move(out), rx || ry, [=, p = std::move(p)](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& vx2 = t.nodes_[ix].value;
        const Tensor& vy2 = t.nodes_[iy].value;
        Tensor* dx = rx ? &t.grad_slot(ix) : nullptr;
        Tensor* dy = ry ? &t.grad_slot(iy) : nullptr;
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t ch = 0; ch < c; ++ch) {
                std::size_t base = (r * c + ch) * blades;
                const double* xr = vx2.data.data() + base;
                const double* yr = vy2.data.data() + base;
                const double* gz = g.data.data() + base;
                for (std::uint32_t a = 0; a < blades; ++a) {
                    const double* crow = p.coeff.data() + std::size_t{a} * blades;
                    double xa = xr[a];
                    double dxa = 0.0;
                    for (std::uint32_t b = 0; b < blades; ++b) {
                        double gm = gz[a ^ b];
                        if (rx) dxa += crow[b] * yr[b] * gm;
                        if (ry) (*dy)[base + b] += crow[b] * xa * gm;
                    }
                    if (rx) (*dx)[base + a] += dxa;
                }
            }
    });
}

Var Tape::grade_sumsq(Var x, const Metric& metric) {
    const Tensor& vx = value(x);
    std::size_t blades = metric.blade_count();
    std::size_t grades = static_cast<std::size_t>(metric.d) + 1;
    check_mv_shape(vx, blades, "grade_sumsq");
    std::size_t n = vx.shape[0], c = vx.shape[1];
    std::vector<int> gr = grade_of_mask(metric);
    std::vector<double> fac = blade_factors(metric);
    Tensor out({n, c, grades});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* xr = vx.data.data() + (r * c + ch) * blades;
            double* o = out.data.data() + (r * c + ch) * grades;
            for (std::size_t m = 0; m < blades; ++m) o[gr[m]] += fac[m] * xr[m] * xr[m];
        }
    int self = static_cast<int>(nodes_.size());
    int ix = x.id;
    bool rx = requires_grad(x);
    return push(std::move(out), rx, [=, gr = std::move(gr), fac = std::move(fac)](Tape& t) {
        if (!rx) return;
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& vx2 = t.nodes_[ix].value;
        Tensor& dx = t.grad_slot(ix);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* xr = vx2.data.data() + (r * c + ch) * blades;
                const double* go = g.data.data() + (r * c + ch) * grades;
                double* d = dx.data.data() + (r * c + ch) * blades;
                for (std::size_t m = 0; m < blades; ++m)
                    d[m] += 2.0 * fac[m] * xr[m] * go[gr[m]];
            }
    });
}

Var Tape::slice_mask0(Var x) {
    const Tensor& vx = value(x);
    if (vx.rank() != 3) throw std::invalid_argument("slice_mask0: expected [N,C,B]");
    std::size_t n = vx.shape[0], c = vx.shape[1], blades = vx.shape[2];
    Tensor out({n, c});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) out[r * c + ch] = vx[(r * c + ch) * blades];
    int self = static_cast<int>(nodes_.size());
    int ix = x.id;
    bool rx = requires_grad(x);
    return push(std::move(out), rx, [=](Tape& t) {
        if (!rx) return;
        const Tensor& g = t.nodes_[self].grad;
        Tensor& dx = t.grad_slot(ix);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t ch = 0; ch < c; ++ch) dx[(r * c + ch) * blades] += g[r * c + ch];
    });
}

Var Tape::grade_scale(Var x, Var s, const Metric& metric) {
    const Tensor& vx = value(x);
    const Tensor& vs = value(s);
    std::size_t blades = metric.blade_count();
    std::size_t grades = static_cast<std::size_t>(metric.d) + 1;
    check_mv_shape(vx, blades, "grade_scale");
    if (vs.rank() != 3 || vs.shape[0] != vx.shape[0] || vs.shape[1] != vx.shape[1] ||
        vs.shape[2] != grades)
        throw std::invalid_argument("grade_scale: expected s [N,C,G]");
    std::size_t n = vx.shape[0], c = vx.shape[1];
    std::vector<int> gr = grade_of_mask(metric);
    Tensor out({n, c, blades});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* xr = vx.data.data() + (r * c + ch) * blades;
            const double* sr = vs.data.data() + (r * c + ch) * grades;
            double* o = out.data.data() + (r * c + ch) * blades;
            for (std::size_t m = 0; m < blades; ++m) o[m] = xr[m] * sr[gr[m]];
        }
    int self = static_cast<int>(nodes_.size());
    int ix = x.id, is = s.id;
    bool rx = requires_grad(x), rs = requires_grad(s);
    return push(std::move(out), rx || rs, [=, gr = std::move(gr)](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& vx2 = t.nodes_[ix].value;
        const Tensor& vs2 = t.nodes_[is].value;
        Tensor* dx = rx ? &t.grad_slot(ix) : nullptr;
        Tensor* ds = rs ? &t.grad_slot(is) : nullptr;
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t ch = 0; ch < c; ++ch) {
                std::size_t bx = (r * c + ch) * blades;
                std::size_t bs = (r * c + ch) * grades;
                for (std::size_t m = 0; m < blades; ++m) {
                    double gm = g[bx + m];
                    if (rx) (*dx)[bx + m] += gm * vs2[bs + gr[m]];
                    if (rs) (*ds)[bs + gr[m]] += gm * vx2[bx + m];
                }
            }
    });
}

Var Tape::grade_scale_shared(Var x, Var s, const Metric& metric) {
    const Tensor& vx = value(x);
    const Tensor& vs = value(s);
    std::size_t blades = metric.blade_count();
    std::size_t grades = static_cast<std::size_t>(metric.d) + 1;
    check_mv_shape(vx, blades, "grade_scale_shared");
    if (vs.rank() != 2 || vs.shape[0] != vx.shape[0] || vs.shape[1] != grades)
        throw std::invalid_argument("grade_scale_shared: expected s [N,G]");
    std::size_t n = vx.shape[0], c = vx.shape[1];
    std::vector<int> gr = grade_of_mask(metric);
    Tensor out({n, c, blades});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* xr = vx.data.data() + (r * c + ch) * blades;
            const double* sr = vs.data.data() + r * grades;
            double* o = out.data.data() + (r * c + ch) * blades;
            for (std::size_t m = 0; m < blades; ++m) o[m] = xr[m] * sr[gr[m]];
        }
    int self = static_cast<int>(nodes_.size());
    int ix = x.id, is = s.id;
    bool rx = requires_grad(x), rs = requires_grad(s);
    return push(std::move(out), rx || rs, [=, gr = std::move(gr)](Tape& t) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& vx2 = t.nodes_[ix].value;
        const Tensor& vs2 = t.nodes_[is].value;
        Tensor* dx = rx ? &t.grad_slot(ix) : nullptr;
        Tensor* ds = rs ? &t.grad_slot(is) : nullptr;
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t ch = 0; ch < c; ++ch) {
                std::size_t bx = (r * c + ch) * blades;
                for (std::size_t m = 0; m < blades; ++m) {
                    double gm = g[bx + m];
                    if (rx) (*dx)[bx + m] += gm * vs2[r * grades + gr[m]];
                    if (rs) (*ds)[r * grades + gr[m]] += gm * vx2[bx + m];
                }
            }
    });
}

}  // namespace csmp
