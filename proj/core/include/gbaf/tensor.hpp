#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gbaf/errors.hpp"
#include "gbaf/random.hpp"

namespace gbaf {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

/// Flat double storage. Unlike std::vector, creation can skip zero-fill for
/// buffers an op is about to overwrite entirely.
class Buffer {
public:
    Buffer() = default;
    static Buffer make(std::size_t n, bool zeroed) {
        Buffer b;
        b.p_.reset(zeroed ? new double[n]() : new double[n]);
        b.n_ = n;
        return b;
    }
    void assign_zero(std::size_t n) {
        if (n_ != n) {
            p_.reset(new double[n]);
            n_ = n;
        }
        std::fill_n(p_.get(), n_, 0.0);
    }
    void release() {
        p_.reset();
        n_ = 0;
    }
    double* data() { return p_.get(); }
    const double* data() const { return p_.get(); }
    std::size_t size() const { return n_; }
    bool empty() const { return n_ == 0; }

private:
    std::unique_ptr<double[]> p_;
    std::size_t n_ = 0;
};

struct TensorData {
    Shape shape;
    Buffer value;
    Buffer grad; // allocated on first backward touch
    bool requires_grad = false;
    std::uint64_t grad_stamp = 0;
};

} // namespace detail

/// Shared handle to an n-dimensional row-major array of 64-bit reals.
/// Copies are shallow; the tape keeps handles alive across forward/backward.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    /// Unspecified contents; for op outputs that overwrite every element.
    static Tensor uninit(Shape shape);
    static Tensor full(Shape shape, double fill, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, RandomStream& rng, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->value.size(); }
    std::size_t extent(std::size_t axis) const { return d_->shape[axis]; }

    // Handles have shallow const semantics: a const Tensor& still exposes
    // mutable storage, matching the shared-ownership model.
    std::span<double> data() const { return {d_->value.data(), d_->value.size()}; }
    double& operator[](std::size_t i) const { return d_->value.data()[i]; }

    /// Value of a scalar (size-1) tensor.
    double item() const;

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    bool has_grad() const { return !d_->grad.empty(); }
    std::span<double> grad() const { return {d_->grad.data(), d_->grad.size()}; }

    /// Allocate (or re-zero) the gradient buffer.
    void zero_grad();

    detail::TensorData* node() const { return d_.get(); }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<detail::TensorData> d_;

    friend class Tape;
};

/// One recorded operation: the tensors it touched (inputs first, outputs
/// last) and a closure that scatters output gradients back to the inputs.
struct TapeRecord {
    std::vector<Tensor> tensors;
    std::function<void()> backprop;
};

/// Define-by-run operation tape. Records are appended in execution order,
/// which is a topological order by construction; backward() replays them in
/// exact reverse. A tape is rebuilt for every forward pass.
class Tape {
public:
    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

    void record(std::vector<Tensor> tensors, std::function<void()> backprop);

    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

    /// Reverse-mode sweep from a scalar loss. Populates grad on every
    /// requires_grad tensor reachable from the tape; tensors the loss does
    /// not depend on end up with an all-zero grad. Record closures are
    /// released as the sweep retires them so activation memory is returned
    /// eagerly.
    void backward(const Tensor& loss);

private:
    std::vector<TapeRecord> records_;
    bool recording_ = true;
};

/// Free-function spelling of the reverse sweep.
inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

enum class Activation { relu, gelu };
Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

// --- differentiable operations -------------------------------------------

/// a: [..., n, k]; b: [k, p] (shared) or [..., k, p] (leading dims equal to
/// a's). transpose_b treats b as [p, k] / [..., p, k].
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_b = false);

/// Fused x W + bias over the last axis (bias may be undefined). One tape
/// record and one activation buffer instead of matmul + broadcast add.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double s);
Tensor negate(Tape& tape, const Tensor& a);

/// s * a + c, elementwise with scalar coefficients.
Tensor affine(Tape& tape, const Tensor& a, double s, double c);

/// x: [..., suffix]; t's shape must equal a trailing suffix of x's shape.
/// t is broadcast over the leading dims; its gradient sums over them.
Tensor add_broadcast(Tape& tape, const Tensor& x, const Tensor& t);

Tensor activation(Tape& tape, Activation kind, const Tensor& x);
Tensor relu(Tape& tape, const Tensor& x);
Tensor gelu(Tape& tape, const Tensor& x);

/// Max-subtracted exponentials normalized along `axis`.
Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);

/// Full reduction to a scalar tensor.
Tensor sum(Tape& tape, const Tensor& x);

Tensor reshape(Tape& tape, const Tensor& x, Shape shape);

/// Slice [start, start+len) of the last axis.
Tensor slice_last(Tape& tape, const Tensor& x, std::size_t start, std::size_t len);

/// Concatenate along the last axis; all leading dims must agree.
Tensor concat_last(Tape& tape, std::span<const Tensor> parts);

struct BatchStats {
    double mean = 0.0;
    double var = 0.0; // biased (divide by N)
};

/// (x - mean) / sqrt(var + eps) with statistics over every entry of x.
/// Gradients flow through the batch statistics. Stats are reported via
/// `stats` when non-null.
Tensor standardize_batch(Tape& tape, const Tensor& x, double eps, BatchStats* stats = nullptr);

// --- verification oracle ---------------------------------------------------

/// Max relative error between analytic gradients of the scalar function `f`
/// and central differences, over up to `coords_per_param` sampled
/// coordinates of each parameter. `f` must be deterministic: fix all RNG
/// before calling.
double grad_check(const std::function<Tensor(Tape&)>& f, std::span<Tensor> params,
                  double eps, std::size_t coords_per_param, RandomStream& rng);

// exact standard-normal CDF via the complementary error function
double phi_cdf(double x);

} // namespace gbaf
