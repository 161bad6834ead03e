#pragma once

#include <complex>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "gbaf/tensor.hpp"

namespace gbaf {

enum class ChannelKind { awgn, fading };
enum class TrajectorySource { synthetic, file };

/// sigma = 10^(-snr_db/20), so SNR = 1/sigma^2 for unit-power symbols.
double snr_to_sigma(double snr_db);

inline constexpr double kNoiselessSnrDb = std::numeric_limits<double>::infinity();

/// Gains below this floor abort the episode (the feedback path divides by the
/// gain twice; clamping instead would bias the error rate).
inline constexpr double kGainFloor = 1e-6;

struct ChannelSpec {
    ChannelKind kind = ChannelKind::awgn;
    double snr_ff_db = 0.0;
    double snr_fb_db = kNoiselessSnrDb; // +inf means noiseless feedback
    std::uint64_t seed = 0;

    // fading only
    TrajectorySource trajectory_source = TrajectorySource::synthetic;
    std::string trajectory_path;
    bool reciprocal = true;
    double rayleigh_sigma = 1.7;
    double ar_rho = 0.99;
    std::size_t synth_slots = 4096;

    double sigma_ff() const { return std::isinf(snr_ff_db) ? 0.0 : snr_to_sigma(snr_ff_db); }
    double sigma_fb() const { return noiseless_fb() ? 0.0 : snr_to_sigma(snr_fb_db); }
    bool noiseless_fb() const { return std::isinf(snr_fb_db); }
};

/// Complex channel gains over time slots and subcarriers, row-major
/// [slots, subcarriers]. For l real symbols per round, subcarriers = ceil(l/2).
struct FadingTrajectory {
    std::size_t slots = 0;
    std::size_t subcarriers = 0;
    std::vector<std::complex<double>> gains;
    double slot_duration_ms = 0.5;
    double speed_mps = 1.0;

    std::complex<double> at(std::size_t slot, std::size_t sc) const {
        return gains[slot * subcarriers + sc];
    }
};

std::size_t subcarriers_for(std::size_t l);

/// Complex gains for one round across a batch of episodes, [B, subcarriers].
struct GainGrid {
    std::size_t batch = 0;
    std::size_t subcarriers = 0;
    std::vector<std::complex<double>> gains;

    static GainGrid unit(std::size_t batch, std::size_t subcarriers);
    std::complex<double> at(std::size_t b, std::size_t sc) const { return gains[b * subcarriers + sc]; }
    std::complex<double>& at(std::size_t b, std::size_t sc) { return gains[b * subcarriers + sc]; }
    GainGrid reciprocal_inverse() const; // 1/h elementwise
    bool below_floor(std::size_t b) const;
};

// --- channel primitives -----------------------------------------------------

/// y = c + n with n iid N(0, sigma^2) drawn from `rng`, as a graph constant.
Tensor awgn_forward(Tape& tape, const Tensor& c, double sigma, RandomStream& rng);

/// ytilde = y + ntilde (passive feedback of the received symbols).
Tensor awgn_feedback(Tape& tape, const Tensor& y, double sigma, RandomStream& rng);

/// [B,l] real symbols -> [B,2*ceil(l/2)]: symbols (2j, 2j+1) become the
/// (in-phase, quadrature) pair of subcarrier j; an odd tail is zero-padded in
/// quadrature. The packed layout keeps both components through the gain chain
/// so equalization loses nothing.
Tensor pack_subcarriers(Tape& tape, const Tensor& x);

/// Inverse of pack_subcarriers; drops the padded tail quadrature.
Tensor unpack_subcarriers(Tape& tape, const Tensor& x, std::size_t l);

/// Elementwise complex product with the gains on packed pairs. Differentiable;
/// the adjoint multiplies by the conjugate gain.
Tensor complex_gain_packed(Tape& tape, const Tensor& x, const GainGrid& h);

/// One fading crossing, y = h (.) c + n. With `equalize` the receiver-side
/// transform y (.) 1/h = c + n (.) 1/h is applied and unpacked back to [B,l].
/// Throws DegenerateGainError if any |h| < kGainFloor.
Tensor fading_apply(Tape& tape, const Tensor& c, const GainGrid& h, double sigma,
                    RandomStream& rng, bool equalize);

// --- trajectories ---------------------------------------------------------------

/// Per-subcarrier complex AR(1) across slots, stationary with |g| ~
/// Rayleigh(sigma_r) and uniform phase: g_{t+1} = rho g_t + sqrt(1-rho^2) w_t.
FadingTrajectory synth_rayleigh_trajectory(std::size_t slots, std::size_t subcarriers,
                                           double sigma_r, double rho, RandomStream& rng);

/// Text format: "gbaf-traj v1 slots=<n> subcarriers=<k>" then n lines of k
/// comma-separated re:im pairs.
FadingTrajectory load_trajectory(const std::string& path);
void save_trajectory(const std::string& path, const FadingTrajectory& traj);

/// Uniformly random start of a T-slot contiguous window.
std::size_t trajectory_window_start(const FadingTrajectory& traj, std::size_t T, RandomStream& rng);

} // namespace gbaf
