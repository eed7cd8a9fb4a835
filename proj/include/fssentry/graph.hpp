#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "fssentry/errors.hpp"
#include "fssentry/kernels.hpp"
#include "fssentry/net.hpp"
#include "fssentry/tensor.hpp"

namespace fssentry {

// Reverse-mode tape over the library's fixed op vocabulary. A fresh Tape is
// built per training/attack step; Var handles index into the tape and stay
// valid as nodes are appended. Templated so attacks run in float and the
// gradient-check oracle in double.
template <typename T>
class Tape {
public:
    using Var = int;

    struct Node {
        std::vector<size_t> shape;
        std::vector<T> val;
        std::vector<T> grad;
        std::function<void(Tape&)> back; // empty for leaves
    };

    std::vector<Node> nodes;

    size_t numel(Var v) const { return nodes[v].val.size(); }
    const std::vector<size_t>& shape(Var v) const { return nodes[v].shape; }
    const std::vector<T>& val(Var v) const { return nodes[v].val; }
    const std::vector<T>& grad(Var v) const { return nodes[v].grad; }

    Var leaf(std::vector<T> values, std::vector<size_t> shape) {
        if (shape_numel(shape) != values.size())
            throw ShapeError("leaf: shape " + shape_str(shape) + " does not match data length");
        nodes.push_back(Node{std::move(shape), std::move(values), {}, {}});
        nodes.back().grad.assign(nodes.back().val.size(), T(0));
        return static_cast<Var>(nodes.size() - 1);
    }

    Var leaf(const Tensor& t) {
        std::vector<T> v(t.numel());
        for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(t.get(i));
        return leaf(std::move(v), t.shape());
    }

    Tensor tensor(Var v) const {
        Tensor out = Tensor::zeros(nodes[v].shape,
                                   sizeof(T) == 4 ? DType::f32 : DType::f64);
        for (size_t i = 0; i < nodes[v].val.size(); ++i) out.set(i, nodes[v].val[i]);
        return out;
    }

    Tensor grad_tensor(Var v) const {
        Tensor out = Tensor::zeros(nodes[v].shape,
                                   sizeof(T) == 4 ? DType::f32 : DType::f64);
        for (size_t i = 0; i < nodes[v].grad.size(); ++i) out.set(i, nodes[v].grad[i]);
        return out;
    }

    // ---- elementwise / shape ----

    Var add(Var a, Var b) {
        require_same_shape(a, b, "add");
        std::vector<T> v(numel(a));
        for (size_t i = 0; i < v.size(); ++i) v[i] = nodes[a].val[i] + nodes[b].val[i];
        return push(shape(a), std::move(v), [a, b](Tape& t) {
            Var y = t.current_;
            for (size_t i = 0; i < t.numel(y); ++i) {
                t.nodes[a].grad[i] += t.nodes[y].grad[i];
                t.nodes[b].grad[i] += t.nodes[y].grad[i];
            }
        });
    }

    Var sub(Var a, Var b) {
        require_same_shape(a, b, "sub");
        std::vector<T> v(numel(a));
        for (size_t i = 0; i < v.size(); ++i) v[i] = nodes[a].val[i] - nodes[b].val[i];
        return push(shape(a), std::move(v), [a, b](Tape& t) {
            Var y = t.current_;
            for (size_t i = 0; i < t.numel(y); ++i) {
                t.nodes[a].grad[i] += t.nodes[y].grad[i];
                t.nodes[b].grad[i] -= t.nodes[y].grad[i];
            }
        });
    }

    Var scale(Var a, double c) {
        std::vector<T> v(numel(a));
        T cc = static_cast<T>(c);
        for (size_t i = 0; i < v.size(); ++i) v[i] = nodes[a].val[i] * cc;
        return push(shape(a), std::move(v), [a, cc](Tape& t) {
            Var y = t.current_;
            for (size_t i = 0; i < t.numel(y); ++i) t.nodes[a].grad[i] += cc * t.nodes[y].grad[i];
        });
    }

    Var relu(Var a) {
        std::vector<T> v(numel(a));
        kernels::relu_fwd(nodes[a].val.data(), v.data(), v.size());
        return push(shape(a), std::move(v), [a](Tape& t) {
            Var y = t.current_;
            kernels::relu_bwd(t.nodes[a].val.data(), t.nodes[y].grad.data(), t.nodes[a].grad.data(),
                              t.numel(y));
        });
    }

    Var sigmoid(Var a) {
        std::vector<T> v(numel(a));
        kernels::sigmoid_fwd(nodes[a].val.data(), v.data(), v.size());
        return push(shape(a), std::move(v), [a](Tape& t) {
            Var y = t.current_;
            kernels::sigmoid_bwd(t.nodes[y].val.data(), t.nodes[y].grad.data(), t.nodes[a].grad.data(),
                                 t.numel(y));
        });
    }

    Var reshape(Var a, std::vector<size_t> new_shape) {
        if (shape_numel(new_shape) != numel(a))
            throw ShapeError("reshape: " + shape_str(shape(a)) + " to " + shape_str(new_shape));
        std::vector<T> v = nodes[a].val;
        return push(std::move(new_shape), std::move(v), [a](Tape& t) {
            Var y = t.current_;
            for (size_t i = 0; i < t.numel(y); ++i) t.nodes[a].grad[i] += t.nodes[y].grad[i];
        });
    }

    // ---- layers ----

    Var conv2d(Var x, Var w, Var b, size_t k, size_t pad) {
        const auto& xs = shape(x);
        const auto& ws = shape(w);
        if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || ws[2] != k || ws[3] != k)
            throw ShapeError("conv2d: input " + shape_str(xs) + " weight " + shape_str(ws));
        size_t n = xs[0], cin = xs[1], h = xs[2], wd = xs[3], cout = ws[0];
        std::vector<size_t> os = {n, cout, h + 2 * pad - k + 1, wd + 2 * pad - k + 1};
        std::vector<T> v(shape_numel(os), T(0));
        kernels::conv2d_fwd(nodes[x].val.data(), nodes[w].val.data(), nodes[b].val.data(), v.data(),
                            n, cin, h, wd, cout, k, pad);
        return push(std::move(os), std::move(v), [x, w, b, n, cin, h, wd, cout, k, pad](Tape& t) {
            Var y = t.current_;
            kernels::conv2d_bwd(t.nodes[x].val.data(), t.nodes[w].val.data(), t.nodes[y].grad.data(),
                                t.nodes[x].grad.data(), t.nodes[w].grad.data(), t.nodes[b].grad.data(),
                                n, cin, h, wd, cout, k, pad);
        });
    }

    Var fc(Var x, Var w, Var b) {
        const auto& xs = shape(x);
        const auto& ws = shape(w);
        size_t n = xs[0];
        size_t din = numel(x) / n;
        if (ws.size() != 2 || ws[1] != din)
            throw ShapeError("fc: input gives " + std::to_string(din) + " per sample, weight " + shape_str(ws));
        size_t dout = ws[0];
        std::vector<T> v(n * dout, T(0));
        kernels::fc_fwd(nodes[x].val.data(), nodes[w].val.data(), nodes[b].val.data(), v.data(), n, din, dout);
        return push({n, dout}, std::move(v), [x, w, b, n, din, dout](Tape& t) {
            Var y = t.current_;
            kernels::fc_bwd(t.nodes[x].val.data(), t.nodes[w].val.data(), t.nodes[y].grad.data(),
                            t.nodes[x].grad.data(), t.nodes[w].grad.data(), t.nodes[b].grad.data(),
                            n, din, dout);
        });
    }

    Var avgpool2(Var x) {
        const auto& xs = shape(x);
        if (xs.size() != 4 || xs[2] % 2 || xs[3] % 2) throw ShapeError("avgpool2: bad shape " + shape_str(xs));
        std::vector<size_t> os = {xs[0], xs[1], xs[2] / 2, xs[3] / 2};
        std::vector<T> v(shape_numel(os));
        kernels::avgpool2_fwd(nodes[x].val.data(), v.data(), xs[0] * xs[1], xs[2], xs[3]);
        size_t nc = xs[0] * xs[1], h = xs[2], wd = xs[3];
        return push(std::move(os), std::move(v), [x, nc, h, wd](Tape& t) {
            Var y = t.current_;
            kernels::avgpool2_bwd(t.nodes[y].grad.data(), t.nodes[x].grad.data(), nc, h, wd);
        });
    }

    Var upsample2(Var x) {
        const auto& xs = shape(x);
        if (xs.size() != 4) throw ShapeError("upsample2: bad shape " + shape_str(xs));
        std::vector<size_t> os = {xs[0], xs[1], xs[2] * 2, xs[3] * 2};
        std::vector<T> v(shape_numel(os));
        kernels::upsample2_fwd(nodes[x].val.data(), v.data(), xs[0] * xs[1], xs[2], xs[3]);
        size_t nc = xs[0] * xs[1], h = xs[2], wd = xs[3];
        return push(std::move(os), std::move(v), [x, nc, h, wd](Tape& t) {
            Var y = t.current_;
            kernels::upsample2_bwd(t.nodes[y].grad.data(), t.nodes[x].grad.data(), nc, h, wd);
        });
    }

    // ---- row ops (axis 0) ----

    Var slice_rows(Var x, size_t r0, size_t r1) {
        const auto& xs = shape(x);
        if (xs.empty() || r1 > xs[0] || r0 >= r1) throw ShapeError("slice_rows: bad range");
        size_t per = numel(x) / xs[0];
        std::vector<size_t> os = xs;
        os[0] = r1 - r0;
        std::vector<T> v(nodes[x].val.begin() + r0 * per, nodes[x].val.begin() + r1 * per);
        return push(std::move(os), std::move(v), [x, r0, per](Tape& t) {
            Var y = t.current_;
            for (size_t i = 0; i < t.numel(y); ++i) t.nodes[x].grad[r0 * per + i] += t.nodes[y].grad[i];
        });
    }

    Var concat0(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("concat0: empty list");
        std::vector<size_t> os = shape(parts[0]);
        size_t per = numel(parts[0]) / os[0];
        size_t rows = 0;
        for (Var p : parts) {
            const auto& ps = shape(p);
            if (ps.size() != os.size() || numel(p) / ps[0] != per)
                throw ShapeError("concat0: mismatched trailing dims");
            rows += ps[0];
        }
        os[0] = rows;
        std::vector<T> v;
        v.reserve(rows * per);
        for (Var p : parts) v.insert(v.end(), nodes[p].val.begin(), nodes[p].val.end());
        std::vector<Var> ps = parts;
        return push(std::move(os), std::move(v), [ps, per](Tape& t) {
            Var y = t.current_;
            size_t off = 0;
            for (Var p : ps) {
                for (size_t i = 0; i < t.numel(p); ++i) t.nodes[p].grad[i] += t.nodes[y].grad[off + i];
                off += t.numel(p);
            }
        });
    }

    /// Mean over axis 0: N x rest -> 1 x rest.
    Var mean0(Var x) {
        const auto& xs = shape(x);
        size_t n = xs[0], per = numel(x) / n;
        std::vector<size_t> os = xs;
        os[0] = 1;
        std::vector<T> v(per, T(0));
        for (size_t i = 0; i < n; ++i)
            for (size_t d = 0; d < per; ++d) v[d] += nodes[x].val[i * per + d];
        for (auto& e : v) e /= static_cast<T>(n);
        return push(std::move(os), std::move(v), [x, n, per](Tape& t) {
            Var y = t.current_;
            for (size_t i = 0; i < n; ++i)
                for (size_t d = 0; d < per; ++d)
                    t.nodes[x].grad[i * per + d] += t.nodes[y].grad[d] / static_cast<T>(n);
        });
    }

    /// Global average pool: N x C x H x W -> N x C.
    Var gap(Var x) {
        const auto& xs = shape(x);
        if (xs.size() != 4) throw ShapeError("gap: expects NxCxHxW, got " + shape_str(xs));
        size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
        std::vector<T> v(n * c, T(0));
        for (size_t p = 0; p < n * c; ++p) {
            T acc = 0;
            const T* xp = nodes[x].val.data() + p * hw;
            for (size_t i = 0; i < hw; ++i) acc += xp[i];
            v[p] = acc / static_cast<T>(hw);
        }
        return push({n, c}, std::move(v), [x, n, c, hw](Tape& t) {
            Var y = t.current_;
            for (size_t p = 0; p < n * c; ++p) {
                T g = t.nodes[y].grad[p] / static_cast<T>(hw);
                T* gp = t.nodes[x].grad.data() + p * hw;
                for (size_t i = 0; i < hw; ++i) gp[i] += g;
            }
        });
    }

    // ---- metric-head ops ----

    /// y[i][j] = -||Q_i - P_j||^2 for Q: n x D, P: k x D.
    Var pairwise_neg_sqdist(Var q, Var p) {
        const auto& qs = shape(q);
        const auto& ps = shape(p);
        if (qs.size() != 2 || ps.size() != 2 || qs[1] != ps[1])
            throw ShapeError("pairwise_neg_sqdist: " + shape_str(qs) + " vs " + shape_str(ps));
        size_t n = qs[0], k = ps[0], d = qs[1];
        std::vector<T> v(n * k);
        for (size_t i = 0; i < n; ++i) {
            const T* qi = nodes[q].val.data() + i * d;
            for (size_t j = 0; j < k; ++j) {
                const T* pj = nodes[p].val.data() + j * d;
                T acc = 0;
                for (size_t dd = 0; dd < d; ++dd) {
                    T diff = qi[dd] - pj[dd];
                    acc += diff * diff;
                }
                v[i * k + j] = -acc;
            }
        }
        return push({n, k}, std::move(v), [q, p, n, k, d](Tape& t) {
            Var y = t.current_;
            for (size_t i = 0; i < n; ++i) {
                const T* qi = t.nodes[q].val.data() + i * d;
                T* gqi = t.nodes[q].grad.data() + i * d;
                for (size_t j = 0; j < k; ++j) {
                    T g = t.nodes[y].grad[i * k + j];
                    if (g == T(0)) continue;
                    const T* pj = t.nodes[p].val.data() + j * d;
                    T* gpj = t.nodes[p].grad.data() + j * d;
                    for (size_t dd = 0; dd < d; ++dd) {
                        T diff = qi[dd] - pj[dd];
                        gqi[dd] += T(-2) * g * diff;
                        gpj[dd] += T(2) * g * diff;
                    }
                }
            }
        });
    }

    /// Rows (i, j) -> [Q_i | P_j], row-major over (i, j): (n*k) x 2D.
    Var pair_concat(Var q, Var p) {
        const auto& qs = shape(q);
        const auto& ps = shape(p);
        if (qs.size() != 2 || ps.size() != 2 || qs[1] != ps[1])
            throw ShapeError("pair_concat: " + shape_str(qs) + " vs " + shape_str(ps));
        size_t n = qs[0], k = ps[0], d = qs[1];
        std::vector<T> v(n * k * 2 * d);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < k; ++j) {
                T* row = v.data() + (i * k + j) * 2 * d;
                const T* qi = nodes[q].val.data() + i * d;
                const T* pj = nodes[p].val.data() + j * d;
                for (size_t dd = 0; dd < d; ++dd) row[dd] = qi[dd];
                for (size_t dd = 0; dd < d; ++dd) row[d + dd] = pj[dd];
            }
        return push({n * k, 2 * d}, std::move(v), [q, p, n, k, d](Tape& t) {
            Var y = t.current_;
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < k; ++j) {
                    const T* grow = t.nodes[y].grad.data() + (i * k + j) * 2 * d;
                    T* gqi = t.nodes[q].grad.data() + i * d;
                    T* gpj = t.nodes[p].grad.data() + j * d;
                    for (size_t dd = 0; dd < d; ++dd) gqi[dd] += grow[dd];
                    for (size_t dd = 0; dd < d; ++dd) gpj[dd] += grow[d + dd];
                }
        });
    }

    // ---- reductions / losses ----

    Var sumsq(Var x) {
        T acc = 0;
        for (T v : nodes[x].val) acc += v * v;
        return push({1}, {acc}, [x](Tape& t) {
            Var y = t.current_;
            T g = t.nodes[y].grad[0];
            for (size_t i = 0; i < t.numel(x); ++i) t.nodes[x].grad[i] += T(2) * g * t.nodes[x].val[i];
        });
    }

    Var l2norm(Var x) {
        T acc = 0;
        for (T v : nodes[x].val) acc += v * v;
        T nrm = std::sqrt(acc);
        return push({1}, {nrm}, [x, nrm](Tape& t) {
            Var y = t.current_;
            T g = t.nodes[y].grad[0];
            T denom = nrm > T(1e-12) ? nrm : T(1e-12);
            for (size_t i = 0; i < t.numel(x); ++i) t.nodes[x].grad[i] += g * t.nodes[x].val[i] / denom;
        });
    }

    Var mean_all(Var x) {
        T acc = 0;
        for (T v : nodes[x].val) acc += v;
        size_t n = numel(x);
        return push({1}, {acc / static_cast<T>(n)}, [x, n](Tape& t) {
            Var y = t.current_;
            T g = t.nodes[y].grad[0] / static_cast<T>(n);
            for (size_t i = 0; i < n; ++i) t.nodes[x].grad[i] += g;
        });
    }

    /// Mean softmax cross-entropy over rows of an n x k logit matrix.
    /// Gradient wrt logits is exactly (softmax - onehot) / n.
    Var softmax_xent(Var logits, const std::vector<int>& labels) {
        const auto& ls = shape(logits);
        if (ls.size() != 2 || ls[0] != labels.size())
            throw ShapeError("softmax_xent: logits " + shape_str(ls) + " vs " +
                             std::to_string(labels.size()) + " labels");
        size_t n = ls[0], k = ls[1];
        std::vector<T> probs(n * k);
        T loss = 0;
        for (size_t i = 0; i < n; ++i) {
            const T* z = nodes[logits].val.data() + i * k;
            T m = z[0];
            for (size_t j = 1; j < k; ++j) m = std::max(m, z[j]);
            T denom = 0;
            for (size_t j = 0; j < k; ++j) denom += std::exp(z[j] - m);
            T logdenom = std::log(denom);
            for (size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(z[j] - m) / denom;
            loss += -(z[labels[i]] - m - logdenom);
        }
        loss /= static_cast<T>(n);
        std::vector<int> lab = labels;
        return push({1}, {loss}, [logits, probs, lab, n, k](Tape& t) {
            Var y = t.current_;
            T g = t.nodes[y].grad[0] / static_cast<T>(n);
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < k; ++j) {
                    T p = probs[i * k + j] - (static_cast<size_t>(lab[i]) == j ? T(1) : T(0));
                    t.nodes[logits].grad[i * k + j] += g * p;
                }
        });
    }

    /// Per-row clamped margin max(-kappa, z[t] - max_{j != t} z[j]); shape {n}.
    Var cw_margin(Var logits, int way_t, double kappa) {
        const auto& ls = shape(logits);
        if (ls.size() != 2) throw ShapeError("cw_margin: logits must be n x k");
        size_t n = ls[0], k = ls[1];
        if (way_t < 0 || static_cast<size_t>(way_t) >= k) throw ShapeError("cw_margin: bad way index");
        std::vector<T> v(n);
        std::vector<int> best(n, -1); // argmax over j != t where unclamped
        T kap = static_cast<T>(kappa);
        for (size_t i = 0; i < n; ++i) {
            const T* z = nodes[logits].val.data() + i * k;
            T zmax = -std::numeric_limits<T>::infinity();
            int arg = -1;
            for (size_t j = 0; j < k; ++j) {
                if (static_cast<int>(j) == way_t) continue;
                if (z[j] > zmax) {
                    zmax = z[j];
                    arg = static_cast<int>(j);
                }
            }
            T margin = z[way_t] - zmax;
            if (margin > -kap) {
                v[i] = margin;
                best[i] = arg;
            } else {
                v[i] = -kap;
            }
        }
        return push({n}, std::move(v), [logits, way_t, best, n, k](Tape& t) {
            Var y = t.current_;
            for (size_t i = 0; i < n; ++i) {
                if (best[i] < 0) continue; // clamped at -kappa
                T g = t.nodes[y].grad[i];
                t.nodes[logits].grad[i * k + static_cast<size_t>(way_t)] += g;
                t.nodes[logits].grad[i * k + static_cast<size_t>(best[i])] -= g;
            }
        });
    }

    // ---- driving ----

    void backward(Var loss) {
        if (numel(loss) != 1) throw ShapeError("backward: loss must be scalar");
        nodes[loss].grad[0] = T(1);
        for (int i = loss; i >= 0; --i) {
            if (nodes[i].back) {
                current_ = i;
                nodes[i].back(*this);
            }
        }
    }

private:
    Var current_ = -1;

    void require_same_shape(Var a, Var b, const char* op) const {
        if (shape(a) != shape(b))
            throw ShapeError(std::string(op) + ": " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    }

    Var push(std::vector<size_t> shape, std::vector<T> val, std::function<void(Tape&)> back) {
        nodes.push_back(Node{std::move(shape), std::move(val), {}, std::move(back)});
        nodes.back().grad.assign(nodes.back().val.size(), T(0));
        return static_cast<Var>(nodes.size() - 1);
    }
};

/// Network forward on a tape; creates one leaf per parameter tensor and
/// reports them (aligned with net.param_list()) so callers can read grads.
template <typename T>
typename Tape<T>::Var net_forward(Tape<T>& tape, const Network& net, typename Tape<T>::Var x,
                                  std::vector<typename Tape<T>::Var>* param_vars = nullptr) {
    using Var = typename Tape<T>::Var;
    Var cur = x;
    for (size_t li = 0; li < net.layers.size(); ++li) {
        const LayerSpec& l = net.layers[li];
        switch (l.kind) {
            case LayerKind::conv: {
                Var w = tape.leaf(net.params[li][0]);
                Var b = tape.leaf(net.params[li][1]);
                if (param_vars) {
                    param_vars->push_back(w);
                    param_vars->push_back(b);
                }
                cur = tape.conv2d(cur, w, b, l.k, l.pad);
                break;
            }
            case LayerKind::fc: {
                Var w = tape.leaf(net.params[li][0]);
                Var b = tape.leaf(net.params[li][1]);
                if (param_vars) {
                    param_vars->push_back(w);
                    param_vars->push_back(b);
                }
                if (tape.shape(cur).size() != 2) {
                    size_t n = tape.shape(cur)[0];
                    cur = tape.reshape(cur, {n, tape.numel(cur) / n});
                }
                cur = tape.fc(cur, w, b);
                break;
            }
            case LayerKind::act:
                cur = l.act == ActKind::relu ? tape.relu(cur) : tape.sigmoid(cur);
                break;
            case LayerKind::down2:
                cur = tape.avgpool2(cur);
                break;
            case LayerKind::up2:
                cur = tape.upsample2(cur);
                break;
        }
    }
    return cur;
}

// ---- numcore gradient entry points ----

enum class LossKind { softmax_xent, mse };

struct GradResult {
    double loss = 0;
    std::vector<Tensor> param_grads; // aligned with net.param_list()
    Tensor input_grad;
};

/// Parameter and input gradients of `loss(net(batch), targets)`. Pure: the
/// network is not mutated. Computes in float64 when the batch is float64.
GradResult grad_all(const Network& net, LossKind loss, const Tensor& batch,
                    const std::vector<int>& labels, const Tensor& target);

GradResult grad_params(const Network& net, LossKind loss, const Tensor& batch,
                       const std::vector<int>& labels, const Tensor& target = {});
Tensor grad_input(const Network& net, LossKind loss, const Tensor& batch,
                  const std::vector<int>& labels, const Tensor& target = {});

/// Central finite differences (fn(x+h e_i) - fn(x-h e_i)) / 2h per coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& fn, const Tensor& x, double h);

} // namespace fssentry
