#include "gbaf/channel.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gbaf {

double snr_to_sigma(double snr_db) { return std::pow(10.0, -snr_db / 20.0); }

std::size_t subcarriers_for(std::size_t l) { return (l + 1) / 2; }

GainGrid GainGrid::unit(std::size_t batch, std::size_t subcarriers) {
    GainGrid g;
    g.batch = batch;
    g.subcarriers = subcarriers;
    g.gains.assign(batch * subcarriers, {1.0, 0.0});
    return g;
}

GainGrid GainGrid::reciprocal_inverse() const {
    GainGrid g = *this;
    for (auto& h : g.gains) h = 1.0 / h;
    return g;
}

bool GainGrid::below_floor(std::size_t b) const {
    for (std::size_t s = 0; s < subcarriers; ++s)
        if (std::abs(at(b, s)) < kGainFloor) return true;
    return false;
}

namespace {

Tensor gaussian_noise(const Shape& shape, double sigma, RandomStream& rng) {
    Tensor n = Tensor::uninit(shape);
    rng.fill_gaussian(n.data(), sigma);
    return n;
}

} // namespace

Tensor awgn_forward(Tape& tape, const Tensor& c, double sigma, RandomStream& rng) {
    if (sigma == 0.0) return c;
    return add(tape, c, gaussian_noise(c.shape(), sigma, rng));
}

Tensor awgn_feedback(Tape& tape, const Tensor& y, double sigma, RandomStream& rng) {
    if (sigma == 0.0) return y;
    return add(tape, y, gaussian_noise(y.shape(), sigma, rng));
}

Tensor pack_subcarriers(Tape& tape, const Tensor& x) {
    if (x.rank() != 2)
        throw DimensionError("pack_subcarriers: expected [B,l], got " + shape_to_string(x.shape()));
    const std::size_t B = x.extent(0);
    const std::size_t l = x.extent(1);
    const std::size_t w = 2 * subcarriers_for(l);
    Tensor out = Tensor::zeros({B, w});
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < l; ++j) po[b * w + j] = px[b * l + j];
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        tape.record({x, out}, [xv, ov, B, l, w]() {
            const double* d = ov.grad().data();
            double* gx = xv.grad().data();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < l; ++j) gx[b * l + j] += d[b * w + j];
        });
    }
    return out;
}

Tensor unpack_subcarriers(Tape& tape, const Tensor& x, std::size_t l) {
    if (x.rank() != 2)
        throw DimensionError("unpack_subcarriers: expected [B,2*sc], got " +
                             shape_to_string(x.shape()));
    const std::size_t B = x.extent(0);
    const std::size_t w = x.extent(1);
    if (w != 2 * subcarriers_for(l))
        throw DimensionError("unpack_subcarriers: width " + std::to_string(w) +
                             " does not hold " + std::to_string(l) + " symbols");
    Tensor out = Tensor::uninit({B, l});
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < l; ++j) po[b * l + j] = px[b * w + j];
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        tape.record({x, out}, [xv, ov, B, l, w]() {
            const double* d = ov.grad().data();
            double* gx = xv.grad().data();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < l; ++j) gx[b * w + j] += d[b * l + j];
        });
    }
    return out;
}

Tensor complex_gain_packed(Tape& tape, const Tensor& x, const GainGrid& h) {
    if (x.rank() != 2)
        throw DimensionError("complex_gain_packed: expected [B,2*sc], got " +
                             shape_to_string(x.shape()));
    const std::size_t B = x.extent(0);
    const std::size_t w = x.extent(1);
    if (B != h.batch || w != 2 * h.subcarriers)
        throw DimensionError("complex_gain_packed: gain grid " + std::to_string(h.batch) + "x" +
                             std::to_string(h.subcarriers) + " does not fit " +
                             shape_to_string(x.shape()));
    auto apply = [B, w](const GainGrid& grid, const double* in, double* dst) {
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < grid.subcarriers; ++s) {
                const std::size_t i = b * w + 2 * s;
                const std::complex<double> g = grid.at(b, s);
                const double re = in[i];
                const double im = in[i + 1];
                dst[i] = g.real() * re - g.imag() * im;
                dst[i + 1] = g.imag() * re + g.real() * im;
            }
    };
    Tensor out = Tensor::uninit(x.shape());
    apply(h, x.data().data(), out.data().data());
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        auto conj = std::make_shared<GainGrid>(h);
        for (auto& g : conj->gains) g = std::conj(g);
        tape.record({x, out}, [xv, ov, conj, apply]() {
            // adjoint of multiplication by h is multiplication by conj(h)
            Tensor tmp = Tensor::uninit(ov.shape());
            apply(*conj, ov.grad().data(), tmp.data().data());
            double* gx = xv.grad().data();
            const double* pt = tmp.data().data();
            for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += pt[i];
        });
    }
    return out;
}

Tensor fading_apply(Tape& tape, const Tensor& c, const GainGrid& h, double sigma,
                    RandomStream& rng, bool equalize) {
    for (std::size_t b = 0; b < h.batch; ++b)
        if (h.below_floor(b))
            throw DegenerateGainError("fading gain below floor " + std::to_string(kGainFloor) +
                                      " in episode " + std::to_string(b));
    const std::size_t l = c.extent(1);
    Tensor y = complex_gain_packed(tape, pack_subcarriers(tape, c), h);
    if (sigma != 0.0)
        y = add(tape, y, pack_subcarriers(tape, gaussian_noise(c.shape(), sigma, rng)));
    if (!equalize) return unpack_subcarriers(tape, y, l);
    return unpack_subcarriers(tape, complex_gain_packed(tape, y, h.reciprocal_inverse()), l);
}

FadingTrajectory synth_rayleigh_trajectory(std::size_t slots, std::size_t subcarriers,
                                           double sigma_r, double rho, RandomStream& rng) {
    if (sigma_r <= 0.0) throw ContractError("synth_rayleigh_trajectory: sigma_r must be positive");
    if (rho < 0.0 || rho >= 1.0) throw ContractError("synth_rayleigh_trajectory: rho must be in [0,1)");
    FadingTrajectory traj;
    traj.slots = slots;
    traj.subcarriers = subcarriers;
    traj.gains.resize(slots * subcarriers);
    const double fresh = std::sqrt(1.0 - rho * rho);
    for (std::size_t sc = 0; sc < subcarriers; ++sc) {
        std::complex<double> g{sigma_r * rng.gaussian(), sigma_r * rng.gaussian()};
        traj.gains[sc] = g;
        for (std::size_t t = 1; t < slots; ++t) {
            const std::complex<double> w{sigma_r * rng.gaussian(), sigma_r * rng.gaussian()};
            g = rho * g + fresh * w;
            traj.gains[t * subcarriers + sc] = g;
        }
    }
    return traj;
}

FadingTrajectory load_trajectory(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("trajectory: cannot open '" + path + "'");
    std::string header;
    if (!std::getline(in, header)) throw ParseError(path + ":1: empty file");
    std::istringstream hs(header);
    std::string magic, version, slots_kv, sc_kv;
    hs >> magic >> version >> slots_kv >> sc_kv;
    if (magic != "gbaf-traj" || version != "v1")
        throw ParseError(path + ":1: expected header 'gbaf-traj v1 slots=<n> subcarriers=<k>'");
    auto parse_kv = [&](const std::string& kv, const std::string& key) -> std::size_t {
        const std::string prefix = key + "=";
        if (kv.rfind(prefix, 0) != 0)
            throw ParseError(path + ":1: expected '" + key + "=<n>', got '" + kv + "'");
        try {
            return static_cast<std::size_t>(std::stoull(kv.substr(prefix.size())));
        } catch (const std::exception&) {
            throw ParseError(path + ":1: bad value in '" + kv + "'");
        }
    };
    FadingTrajectory traj;
    traj.slots = parse_kv(slots_kv, "slots");
    traj.subcarriers = parse_kv(sc_kv, "subcarriers");
    traj.gains.reserve(traj.slots * traj.subcarriers);
    std::string line;
    for (std::size_t t = 0; t < traj.slots; ++t) {
        if (!std::getline(in, line))
            throw ParseError(path + ":" + std::to_string(t + 2) + ": truncated, expected " +
                             std::to_string(traj.slots) + " gain rows");
        std::istringstream ls(line);
        std::string cell;
        for (std::size_t s = 0; s < traj.subcarriers; ++s) {
            if (!std::getline(ls, cell, ','))
                throw ParseError(path + ":" + std::to_string(t + 2) + ": row has fewer than " +
                                 std::to_string(traj.subcarriers) + " entries");
            const auto colon = cell.find(':');
            if (colon == std::string::npos)
                throw ParseError(path + ":" + std::to_string(t + 2) + ": entry '" + cell +
                                 "' is not re:im");
            try {
                const double re = std::stod(cell.substr(0, colon));
                const double im = std::stod(cell.substr(colon + 1));
                traj.gains.emplace_back(re, im);
            } catch (const std::exception&) {
                throw ParseError(path + ":" + std::to_string(t + 2) + ": bad number in '" + cell + "'");
            }
        }
    }
    return traj;
}

void save_trajectory(const std::string& path, const FadingTrajectory& traj) {
    std::ofstream out(path);
    if (!out) throw ParseError("trajectory: cannot write '" + path + "'");
    out << "gbaf-traj v1 slots=" << traj.slots << " subcarriers=" << traj.subcarriers << "\n";
    out << std::setprecision(17);
    for (std::size_t t = 0; t < traj.slots; ++t) {
        for (std::size_t s = 0; s < traj.subcarriers; ++s) {
            if (s) out << ',';
            const auto g = traj.at(t, s);
            out << g.real() << ':' << g.imag();
        }
        out << "\n";
    }
    if (!out) throw ParseError("trajectory: write to '" + path + "' failed");
}

std::size_t trajectory_window_start(const FadingTrajectory& traj, std::size_t T, RandomStream& rng) {
    if (traj.slots < T)
        throw ContractError("trajectory_window: " + std::to_string(traj.slots) + " slots < T=" +
                            std::to_string(T));
    return static_cast<std::size_t>(rng.uniform_below(traj.slots - T + 1));
}

} // namespace gbaf
