#include "gbaf/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace gbaf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

// Fixed chunk sizes: partitioning depends only on the problem size, never on
// the thread count, so every run accumulates in the same order bit-for-bit.
constexpr std::ptrdiff_t kGemmRowChunk = 768;
constexpr std::ptrdiff_t kReduceRowChunk = 4096;
constexpr std::ptrdiff_t kApplyChunk = 1 << 16;

std::atomic<std::uint64_t> g_backward_epoch{1};

// Activation buffers are multi-megabyte and churn every batch; keep glibc
// from bouncing them through mmap (page-fault storms on every op).
struct MallocTuning {
    MallocTuning() {
#if defined(__GLIBC__)
        mallopt(M_MMAP_THRESHOLD, 512 << 20);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
    }
};
const MallocTuning g_malloc_tuning;

template <typename Fn>
void parallel_chunks(std::size_t total, std::ptrdiff_t chunk, Fn&& fn) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(total);
    const std::ptrdiff_t nchunk = (n + chunk - 1) / chunk;
    if (nchunk <= 1) {
        if (n > 0) fn(std::ptrdiff_t{0}, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < nchunk; ++c) {
        const std::ptrdiff_t b = c * chunk;
        fn(b, std::min(n, b + chunk));
    }
}

// c[rows,p] (+)= a[rows,k] * b  with b either [k,p] or [p,k] transposed.
void gemm_rows(const double* a, const double* b, double* c, std::size_t rows, std::size_t k,
               std::size_t p, bool transpose_b, bool accumulate) {
    parallel_chunks(rows, kGemmRowChunk, [&](std::ptrdiff_t r0, std::ptrdiff_t r1) {
        CMapRM am(a + r0 * static_cast<std::ptrdiff_t>(k), r1 - r0, static_cast<Eigen::Index>(k));
        MapRM cm(c + r0 * static_cast<std::ptrdiff_t>(p), r1 - r0, static_cast<Eigen::Index>(p));
        if (transpose_b) {
            CMapRM bm(b, static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k));
            if (accumulate)
                cm.noalias() += am * bm.transpose();
            else
                cm.noalias() = am * bm.transpose();
        } else {
            CMapRM bm(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
            if (accumulate)
                cm.noalias() += am * bm;
            else
                cm.noalias() = am * bm;
        }
    });
}

// db (+)= a^T * dc over `rows` leading rows, reduced with a fixed chunk split
// (partials summed serially in chunk order).
// transpose_b == false: db[k,p] += a[rows,k]^T dc[rows,p]
// transpose_b == true : db[p,k] += dc[rows,p]^T a[rows,k]
void gemm_weight_grad(const double* a, const double* dc, double* db, std::size_t rows,
                      std::size_t k, std::size_t p, bool transpose_b) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(rows);
    const std::ptrdiff_t nchunk = (n + kReduceRowChunk - 1) / kReduceRowChunk;
    const std::size_t out_size = k * p;
    auto chunk_into = [&](std::ptrdiff_t r0, std::ptrdiff_t r1, double* out, bool acc) {
        CMapRM am(a + r0 * static_cast<std::ptrdiff_t>(k), r1 - r0, static_cast<Eigen::Index>(k));
        CMapRM dcm(dc + r0 * static_cast<std::ptrdiff_t>(p), r1 - r0, static_cast<Eigen::Index>(p));
        if (transpose_b) {
            MapRM om(out, static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k));
            if (acc)
                om.noalias() += dcm.transpose() * am;
            else
                om.noalias() = dcm.transpose() * am;
        } else {
            MapRM om(out, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
            if (acc)
                om.noalias() += am.transpose() * dcm;
            else
                om.noalias() = am.transpose() * dcm;
        }
    };
    if (nchunk <= 1) {
        if (n > 0) chunk_into(0, n, db, true);
        return;
    }
    std::vector<double> partials(static_cast<std::size_t>(nchunk) * out_size);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < nchunk; ++c) {
        const std::ptrdiff_t b = c * kReduceRowChunk;
        chunk_into(b, std::min(n, b + kReduceRowChunk), partials.data() + c * out_size, false);
    }
    for (std::ptrdiff_t c = 0; c < nchunk; ++c) {
        const double* part = partials.data() + c * out_size;
        for (std::size_t i = 0; i < out_size; ++i) db[i] += part[i];
    }
}

Shape leading_dims(const Shape& s, std::size_t drop) {
    return Shape(s.begin(), s.end() - static_cast<std::ptrdiff_t>(drop));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
}

bool want_record(const Tape& tape, std::initializer_list<const Tensor*> ins) {
    if (!tape.recording()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

double gauss_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

} // namespace

double phi_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

std::string shape_to_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

// --- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto d = std::make_shared<detail::TensorData>();
    d->value = detail::Buffer::make(shape_numel(shape), /*zeroed=*/true);
    d->shape = std::move(shape);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::uninit(Shape shape) {
    auto d = std::make_shared<detail::TensorData>();
    d->value = detail::Buffer::make(shape_numel(shape), /*zeroed=*/false);
    d->shape = std::move(shape);
    return Tensor(std::move(d));
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
    Tensor t = uninit(std::move(shape));
    t.set_requires_grad(requires_grad);
    std::fill(t.data().begin(), t.data().end(), fill);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw DimensionError("Tensor::from: " + shape_to_string(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    Tensor t = uninit(std::move(shape));
    t.set_requires_grad(requires_grad);
    std::copy(values.begin(), values.end(), t.data().begin());
    return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, RandomStream& rng, bool requires_grad) {
    Tensor t = uninit(std::move(shape));
    t.set_requires_grad(requires_grad);
    for (double& v : t.data()) v = lo + (hi - lo) * rng.uniform01();
    return t;
}

double Tensor::item() const {
    if (!defined() || size() != 1) throw ContractError("item(): tensor is not a scalar");
    return d_->value.data()[0];
}

void Tensor::zero_grad() {
    d_->grad.assign_zero(d_->value.size());
    d_->grad_stamp = 0;
}

// --- Tape -------------------------------------------------------------------

void Tape::record(std::vector<Tensor> tensors, std::function<void()> backprop) {
    if (!recording_) return;
    records_.push_back({std::move(tensors), std::move(backprop)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward: loss must be a scalar tensor");
    const std::uint64_t epoch = g_backward_epoch.fetch_add(1, std::memory_order_relaxed);
    auto touch = [epoch](const Tensor& t) {
        auto* n = t.node();
        if (n->requires_grad && n->grad_stamp != epoch) {
            n->grad.assign_zero(n->value.size());
            n->grad_stamp = epoch;
        }
    };
    for (const auto& rec : records_)
        for (const auto& t : rec.tensors) touch(t);
    touch(loss);
    if (loss.node()->requires_grad) loss.node()->grad.data()[0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        if (it->backprop) it->backprop();
        // retire the record so activation storage is released as we go
        it->backprop = nullptr;
        it->tensors.clear();
    }
}

// --- matmul -----------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw DimensionError("matmul: operands must have rank >= 2, got " +
                             shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
    const bool batched_b = b.rank() != 2;
    if (batched_b) {
        if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
            throw DimensionError("matmul: leading dims disagree, " + shape_to_string(a.shape()) +
                                 " x " + shape_to_string(b.shape()));
    }
    const std::size_t n = a.shape()[a.rank() - 2];
    const std::size_t ka = a.shape()[a.rank() - 1];
    const std::size_t kb = transpose_b ? b.shape()[b.rank() - 1] : b.shape()[b.rank() - 2];
    const std::size_t p = transpose_b ? b.shape()[b.rank() - 2] : b.shape()[b.rank() - 1];
    if (ka != kb)
        throw DimensionError("matmul: inner extents disagree, " + shape_to_string(a.shape()) +
                             (transpose_b ? " x T" : " x ") + shape_to_string(b.shape()));

    Shape out_shape = a.shape();
    out_shape.back() = p;
    Tensor out = Tensor::uninit(out_shape);

    const std::size_t batch = shape_numel(leading_dims(a.shape(), 2));
    if (!batched_b) {
        gemm_rows(a.data().data(), b.data().data(), out.data().data(), batch * n, ka, p,
                  transpose_b, false);
    } else {
        const std::ptrdiff_t bt = static_cast<std::ptrdiff_t>(batch);
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < bt; ++i) {
            gemm_rows(a.data().data() + i * static_cast<std::ptrdiff_t>(n * ka),
                      b.data().data() + i * static_cast<std::ptrdiff_t>(ka * p),
                      out.data().data() + i * static_cast<std::ptrdiff_t>(n * p), n, ka, p,
                      transpose_b, false);
        }
    }

    if (want_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor av = a, bv = b, ov = out;
        tape.record({a, b, out}, [av, bv, ov, n, ka, p, batch, transpose_b, batched_b]() {
            const double* dc = ov.grad().data();
            if (!batched_b) {
                const std::size_t rows = batch * n;
                if (av.requires_grad()) {
                    // dA += dC * B^T   (or dC * B when b was transposed)
                    gemm_rows(dc, bv.data().data(), av.grad().data(), rows, p, ka, !transpose_b,
                              true);
                }
                if (bv.requires_grad())
                    gemm_weight_grad(av.data().data(), dc, bv.grad().data(), rows, ka, p,
                                     transpose_b);
            } else {
                const std::ptrdiff_t bt = static_cast<std::ptrdiff_t>(batch);
#pragma omp parallel for schedule(static)
                for (std::ptrdiff_t i = 0; i < bt; ++i) {
                    const double* dci = dc + i * static_cast<std::ptrdiff_t>(n * p);
                    const double* ai = av.data().data() + i * static_cast<std::ptrdiff_t>(n * ka);
                    const double* bi = bv.data().data() + i * static_cast<std::ptrdiff_t>(ka * p);
                    if (av.requires_grad())
                        gemm_rows(dci, bi, av.grad().data() + i * static_cast<std::ptrdiff_t>(n * ka),
                                  n, p, ka, !transpose_b, true);
                    if (bv.requires_grad())
                        gemm_weight_grad(ai, dci,
                                         bv.grad().data() + i * static_cast<std::ptrdiff_t>(ka * p),
                                         n, ka, p, transpose_b);
                }
            }
        });
    }
    return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.rank() < 2 || w.rank() != 2)
        throw DimensionError("linear: expected x [..,n,k] and w [k,p], got " +
                             shape_to_string(x.shape()) + " x " + shape_to_string(w.shape()));
    const std::size_t k = x.shape().back();
    if (w.extent(0) != k)
        throw DimensionError("linear: inner extents disagree, " + shape_to_string(x.shape()) +
                             " x " + shape_to_string(w.shape()));
    const std::size_t p = w.extent(1);
    if (bias.defined() && bias.size() != p)
        throw DimensionError("linear: bias size " + std::to_string(bias.size()) + " != " +
                             std::to_string(p));
    Shape out_shape = x.shape();
    out_shape.back() = p;
    Tensor out = Tensor::uninit(out_shape);
    const std::size_t rows = x.size() / k;

    const double* pb = bias.defined() ? bias.data().data() : nullptr;
    parallel_chunks(rows, kGemmRowChunk, [&](std::ptrdiff_t r0, std::ptrdiff_t r1) {
        CMapRM am(x.data().data() + r0 * static_cast<std::ptrdiff_t>(k), r1 - r0,
                  static_cast<Eigen::Index>(k));
        CMapRM wm(w.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
        MapRM cm(out.data().data() + r0 * static_cast<std::ptrdiff_t>(p), r1 - r0,
                 static_cast<Eigen::Index>(p));
        cm.noalias() = am * wm;
        if (pb) {
            Eigen::Map<const Eigen::RowVectorXd> bm(pb, static_cast<Eigen::Index>(p));
            cm.rowwise() += bm;
        }
    });

    const bool rec = tape.recording() &&
                     (x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad()));
    if (rec) {
        out.set_requires_grad(true);
        Tensor xv = x, wv = w, bv = bias, ov = out;
        std::vector<Tensor> held{x, w, out};
        if (bias.defined()) held.push_back(bias);
        tape.record(std::move(held), [xv, wv, bv, ov, rows, k, p]() {
            const double* dc = ov.grad().data();
            if (xv.requires_grad())
                gemm_rows(dc, wv.data().data(), xv.grad().data(), rows, p, k,
                          /*transpose_b=*/true, /*accumulate=*/true);
            if (wv.requires_grad())
                gemm_weight_grad(xv.data().data(), dc, wv.grad().data(), rows, k, p, false);
            if (bv.defined() && bv.requires_grad()) {
                double* gb = bv.grad().data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* row = dc + r * p;
                    for (std::size_t j = 0; j < p; ++j) gb[j] += row[j];
                }
            }
        });
    }
    return out;
}

// --- elementwise -------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(Tape& tape, const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    check_same_shape(a, b, name);
    Tensor out = Tensor::uninit(a.shape());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    parallel_chunks(a.size(), kApplyChunk, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
        for (std::ptrdiff_t i = i0; i < i1; ++i) po[i] = fwd(pa[i], pb[i]);
    });
    if (want_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor av = a, bv = b, ov = out;
        tape.record({a, b, out}, [av, bv, ov, bwd]() {
            const double* d = ov.grad().data();
            const std::size_t nn = ov.size();
            double* ga = av.requires_grad() ? av.grad().data() : nullptr;
            double* gb = bv.requires_grad() ? bv.grad().data() : nullptr;
            const double* pa2 = av.data().data();
            const double* pb2 = bv.data().data();
            parallel_chunks(nn, kApplyChunk, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
                for (std::ptrdiff_t i = i0; i < i1; ++i) bwd(d[i], pa2[i], pb2[i], ga ? ga + i : nullptr, gb ? gb + i : nullptr);
            });
        });
    }
    return out;
}

} // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(
        tape, a, b, "add", [](double x, double y) { return x + y; },
        [](double d, double, double, double* ga, double* gb) {
            if (ga) *ga += d;
            if (gb) *gb += d;
        });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(
        tape, a, b, "sub", [](double x, double y) { return x - y; },
        [](double d, double, double, double* ga, double* gb) {
            if (ga) *ga += d;
            if (gb) *gb -= d;
        });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(
        tape, a, b, "mul", [](double x, double y) { return x * y; },
        [](double d, double x, double y, double* ga, double* gb) {
            if (ga) *ga += d * y;
            if (gb) *gb += d * x;
        });
}

Tensor affine(Tape& tape, const Tensor& a, double s, double c) {
    Tensor out = Tensor::uninit(a.shape());
    const double* pa = a.data().data();
    double* po = out.data().data();
    parallel_chunks(a.size(), kApplyChunk, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
        for (std::ptrdiff_t i = i0; i < i1; ++i) po[i] = s * pa[i] + c;
    });
    if (want_record(tape, {&a})) {
        out.set_requires_grad(true);
        Tensor av = a, ov = out;
        tape.record({a, out}, [av, ov, s]() {
            const double* d = ov.grad().data();
            double* ga = av.grad().data();
            parallel_chunks(ov.size(), kApplyChunk, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
                for (std::ptrdiff_t i = i0; i < i1; ++i) ga[i] += s * d[i];
            });
        });
    }
    return out;
}

Tensor scale(Tape& tape, const Tensor& a, double s) { return affine(tape, a, s, 0.0); }

Tensor negate(Tape& tape, const Tensor& a) { return affine(tape, a, -1.0, 0.0); }

Tensor add_broadcast(Tape& tape, const Tensor& x, const Tensor& t) {
    const Shape& xs = x.shape();
    const Shape& ts = t.shape();
    if (ts.size() > xs.size() || !std::equal(ts.rbegin(), ts.rend(), xs.rbegin()))
        throw DimensionError("add_broadcast: " + shape_to_string(ts) +
                             " is not a trailing suffix of " + shape_to_string(xs));
    const std::size_t suffix = t.size();
    const std::size_t rows = x.size() / std::max<std::size_t>(suffix, 1);
    Tensor out = Tensor::uninit(xs);
    const double* px = x.data().data();
    const double* pt = t.data().data();
    double* po = out.data().data();
    parallel_chunks(rows, kApplyChunk / 64 + 1, [&](std::ptrdiff_t r0, std::ptrdiff_t r1) {
        for (std::ptrdiff_t r = r0; r < r1; ++r)
            for (std::size_t j = 0; j < suffix; ++j)
                po[r * suffix + j] = px[r * suffix + j] + pt[j];
    });
    if (want_record(tape, {&x, &t})) {
        out.set_requires_grad(true);
        Tensor xv = x, tv = t, ov = out;
        tape.record({x, t, out}, [xv, tv, ov, rows, suffix]() {
            const double* d = ov.grad().data();
            if (xv.requires_grad()) {
                double* gx = xv.grad().data();
                parallel_chunks(ov.size(), kApplyChunk, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
                    for (std::ptrdiff_t i = i0; i < i1; ++i) gx[i] += d[i];
                });
            }
            if (tv.requires_grad()) {
                double* gt = tv.grad().data();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < suffix; ++j) gt[j] += d[r * suffix + j];
            }
        });
    }
    return out;
}

// --- activations --------------------------------------------------------------

Activation activation_from_string(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "gelu") return Activation::gelu;
    throw ConfigError("unknown activation '" + name + "' (expected relu|gelu)");
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

Tensor activation(Tape& tape, Activation kind, const Tensor& x) {
    Tensor out = Tensor::uninit(x.shape());
    const double* px = x.data().data();
    double* po = out.data().data();
    if (kind == Activation::relu) {
        parallel_chunks(x.size(), kApplyChunk, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
            for (std::ptrdiff_t i = i0; i < i1; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
        });
    } else {
        parallel_chunks(x.size(), kApplyChunk, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
            for (std::ptrdiff_t i = i0; i < i1; ++i) po[i] = px[i] * phi_cdf(px[i]);
        });
    }
    if (want_record(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        tape.record({x, out}, [xv, ov, kind]() {
            const double* d = ov.grad().data();
            const double* px2 = xv.data().data();
            double* gx = xv.grad().data();
            if (kind == Activation::relu) {
                parallel_chunks(ov.size(), kApplyChunk, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
                    for (std::ptrdiff_t i = i0; i < i1; ++i)
                        if (px2[i] > 0.0) gx[i] += d[i];
                });
            } else {
                parallel_chunks(ov.size(), kApplyChunk, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
                    for (std::ptrdiff_t i = i0; i < i1; ++i)
                        gx[i] += d[i] * (phi_cdf(px2[i]) + px2[i] * gauss_pdf(px2[i]));
                });
            }
        });
    }
    return out;
}

Tensor relu(Tape& tape, const Tensor& x) { return activation(tape, Activation::relu, x); }
Tensor gelu(Tape& tape, const Tensor& x) { return activation(tape, Activation::gelu, x); }

// --- softmax -----------------------------------------------------------------

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw ContractError("softmax: axis out of range");
    const std::size_t n = x.shape()[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];

    Tensor out = Tensor::uninit(x.shape());
    const double* px = x.data().data();
    double* po = out.data().data();
    parallel_chunks(outer * inner, 256, [&](std::ptrdiff_t s0, std::ptrdiff_t s1) {
        for (std::ptrdiff_t s = s0; s < s1; ++s) {
            const std::size_t o = static_cast<std::size_t>(s) / inner;
            const std::size_t in = static_cast<std::size_t>(s) % inner;
            const std::size_t base = o * n * inner + in;
            double mx = px[base];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, px[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(px[base + j * inner] - mx);
                po[base + j * inner] = e;
                z += e;
            }
            const double invz = 1.0 / z;
            for (std::size_t j = 0; j < n; ++j) po[base + j * inner] *= invz;
        }
    });
    if (want_record(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        tape.record({x, out}, [xv, ov, n, outer, inner]() {
            const double* d = ov.grad().data();
            const double* y = ov.data().data();
            double* gx = xv.grad().data();
            parallel_chunks(outer * inner, 256, [&](std::ptrdiff_t s0, std::ptrdiff_t s1) {
                for (std::ptrdiff_t s = s0; s < s1; ++s) {
                    const std::size_t o = static_cast<std::size_t>(s) / inner;
                    const std::size_t in = static_cast<std::size_t>(s) % inner;
                    const std::size_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += d[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < n; ++j)
                        gx[base + j * inner] += y[base + j * inner] * (d[base + j * inner] - dot);
                }
            });
        });
    }
    return out;
}

// --- reductions / reshaping ----------------------------------------------------

Tensor sum(Tape& tape, const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    Tensor out = Tensor::scalar(total);
    if (want_record(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        tape.record({x, out}, [xv, ov]() {
            const double d = ov.grad()[0];
            double* gx = xv.grad().data();
            for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += d;
        });
    }
    return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw DimensionError("reshape: " + shape_to_string(x.shape()) + " -> " +
                             shape_to_string(shape) + " changes element count");
    Tensor out = Tensor::uninit(std::move(shape));
    std::memcpy(out.data().data(), x.data().data(), x.size() * sizeof(double));
    if (want_record(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        tape.record({x, out}, [xv, ov]() {
            const double* d = ov.grad().data();
            double* gx = xv.grad().data();
            for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += d[i];
        });
    }
    return out;
}

Tensor slice_last(Tape& tape, const Tensor& x, std::size_t start, std::size_t len) {
    const std::size_t last = x.shape().back();
    if (start + len > last)
        throw DimensionError("slice_last: [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") exceeds extent " + std::to_string(last));
    Shape out_shape = x.shape();
    out_shape.back() = len;
    Tensor out = Tensor::uninit(out_shape);
    const std::size_t rows = x.size() / last;
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) po[r * len + j] = px[r * last + start + j];
    if (want_record(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        tape.record({x, out}, [xv, ov, rows, last, start, len]() {
            const double* d = ov.grad().data();
            double* gx = xv.grad().data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < len; ++j) gx[r * last + start + j] += d[r * len + j];
        });
    }
    return out;
}

Tensor concat_last(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_last: no parts");
    const Shape lead = leading_dims(parts[0].shape(), 1);
    std::size_t total_last = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        if (leading_dims(p.shape(), 1) != lead)
            throw DimensionError("concat_last: leading dims disagree, " +
                                 shape_to_string(parts[0].shape()) + " vs " +
                                 shape_to_string(p.shape()));
        total_last += p.shape().back();
        any_grad = any_grad || p.requires_grad();
    }
    Shape out_shape = parts[0].shape();
    out_shape.back() = total_last;
    Tensor out = Tensor::uninit(out_shape);
    const std::size_t rows = shape_numel(lead);
    double* po = out.data().data();
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.shape().back();
        const double* pp = p.data().data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) po[r * total_last + off + j] = pp[r * w + j];
        off += w;
    }
    if (tape.recording() && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tensor> held(parts.begin(), parts.end());
        Tensor ov = out;
        std::vector<Tensor> rec = held;
        rec.push_back(out);
        tape.record(std::move(rec), [held = std::move(held), ov, rows, total_last]() {
            const double* d = ov.grad().data();
            std::size_t off2 = 0;
            for (const Tensor& p : held) {
                const std::size_t w = p.shape().back();
                if (p.requires_grad()) {
                    double* gp = const_cast<Tensor&>(p).grad().data();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += d[r * total_last + off2 + j];
                }
                off2 += w;
            }
        });
    }
    return out;
}

// --- batch standardization -----------------------------------------------------

Tensor standardize_batch(Tape& tape, const Tensor& x, double eps, BatchStats* stats) {
    const std::size_t n = x.size();
    if (n == 0) throw ContractError("standardize_batch: empty tensor");
    const double* px = x.data().data();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += px[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double c = px[i] - mean;
        var += c * c;
    }
    var /= static_cast<double>(n);
    if (stats) *stats = {mean, var};

    const double inv_std = 1.0 / std::sqrt(var + eps);
    Tensor out = Tensor::uninit(x.shape());
    double* po = out.data().data();
    parallel_chunks(n, kApplyChunk, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
        for (std::ptrdiff_t i = i0; i < i1; ++i) po[i] = (px[i] - mean) * inv_std;
    });
    if (want_record(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        tape.record({x, out}, [xv, ov, inv_std]() {
            // dL/dx_i = (g_i - mean(g) - xhat_i * mean(g .* xhat)) / std
            const double* g = ov.grad().data();
            const double* xhat = ov.data().data();
            double* gx = xv.grad().data();
            const std::size_t nn = ov.size();
            double mg = 0.0, mgx = 0.0;
            for (std::size_t i = 0; i < nn; ++i) {
                mg += g[i];
                mgx += g[i] * xhat[i];
            }
            mg /= static_cast<double>(nn);
            mgx /= static_cast<double>(nn);
            parallel_chunks(nn, kApplyChunk, [&](std::ptrdiff_t i0, std::ptrdiff_t i1) {
                for (std::ptrdiff_t i = i0; i < i1; ++i)
                    gx[i] += (g[i] - mg - xhat[i] * mgx) * inv_std;
            });
        });
    }
    return out;
}

// --- finite-difference oracle ----------------------------------------------------

double grad_check(const std::function<Tensor(Tape&)>& f, std::span<Tensor> params, double eps,
                  std::size_t coords_per_param, RandomStream& rng) {
    Tape tape;
    Tensor loss = f(tape);
    if (loss.size() != 1) throw ContractError("grad_check: f must be scalar-valued");
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params) {
        if (p.has_grad())
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        else
            analytic.emplace_back(p.size(), 0.0);
    }

    double max_err = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        const std::size_t n = p.size();
        std::vector<std::size_t> coords;
        if (n <= coords_per_param) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            coords.reserve(coords_per_param);
            for (std::size_t i = 0; i < coords_per_param; ++i)
                coords.push_back(static_cast<std::size_t>(rng.uniform_below(n)));
        }
        for (std::size_t c : coords) {
            const double orig = p[c];
            p[c] = orig + eps;
            Tape tp;
            tp.set_recording(false);
            const double fp = f(tp).item();
            p[c] = orig - eps;
            Tape tm;
            tm.set_recording(false);
            const double fm = f(tm).item();
            p[c] = orig;
            const double cd = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi][c];
            const double denom = std::max({std::abs(a), std::abs(cd), 1e-8});
            max_err = std::max(max_err, std::abs(a - cd) / denom);
        }
    }
    return max_err;
}

} // namespace gbaf
