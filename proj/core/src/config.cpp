#include "gbaf/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gbaf {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
    if (v == "inf" || v == "+inf" || v == "noiseless") return std::numeric_limits<double>::infinity();
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": '" + v + "' is not a number");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t n = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    throw ConfigError(key + ": '" + v + "' is not a boolean (true/false)");
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

std::string double_str(double d) {
    if (std::isinf(d)) return d > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os << std::setprecision(17) << d;
    return os.str();
}

} // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    RunConfig rc;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" +
                              line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));

        if (key == "model.K") rc.model.K = parse_u64(key, val);
        else if (key == "model.m") rc.model.m = parse_u64(key, val);
        else if (key == "model.T") rc.model.T = parse_u64(key, val);
        else if (key == "model.d_model") rc.model.d_model = parse_u64(key, val);
        else if (key == "model.n_heads") rc.model.n_heads = parse_u64(key, val);
        else if (key == "model.delta") rc.model.delta = parse_u64(key, val);
        else if (key == "model.n_parity") rc.model.n_parity = parse_u64(key, val);
        else if (key == "model.n_belief") rc.model.n_belief = parse_u64(key, val);
        else if (key == "model.n_decoder") rc.model.n_decoder = parse_u64(key, val);
        else if (key == "model.belief_enabled") rc.model.belief_enabled = parse_bool(key, val);
        else if (key == "model.preprocess_mode") rc.model.preprocess_mode = preprocess_mode_from_string(val);
        else if (key == "model.extractor_design") rc.model.extractor_design = fx_design_from_string(val);
        else if (key == "model.activation") rc.model.activation = activation_from_string(val);
        else if (key == "model.positional_encoding") rc.model.positional_encoding = parse_bool(key, val);
        else if (key == "train.batch_size") rc.train.batch_size = parse_u64(key, val);
        else if (key == "train.total_batches") rc.train.total_batches = parse_u64(key, val);
        else if (key == "train.lr0") rc.train.lr0 = parse_double(key, val);
        else if (key == "train.weight_decay") rc.train.weight_decay = parse_double(key, val);
        else if (key == "train.clip_threshold") rc.train.clip_threshold = parse_double(key, val);
        else if (key == "train.schedule_power") rc.train.schedule_power = parse_double(key, val);
        else if (key == "train.lr_final") rc.train.lr_final = parse_double(key, val);
        else if (key == "train.beta1") rc.train.beta1 = parse_double(key, val);
        else if (key == "train.beta2") rc.train.beta2 = parse_double(key, val);
        else if (key == "train.adam_eps") rc.train.adam_eps = parse_double(key, val);
        else if (key == "train.seed") rc.train.seed = parse_u64(key, val);
        else if (key == "train.log_every") rc.train.log_every = parse_u64(key, val);
        else if (key == "train.desk_scale") rc.train.desk_scale = parse_bool(key, val);
        else if (key == "channel.kind") {
            if (val == "awgn") rc.channel.kind = ChannelKind::awgn;
            else if (val == "fading") rc.channel.kind = ChannelKind::fading;
            else throw ConfigError(key + ": '" + val + "' is not awgn|fading");
        }
        else if (key == "channel.snr_ff_db") rc.channel.snr_ff_db = parse_double(key, val);
        else if (key == "channel.snr_fb_db") rc.channel.snr_fb_db = parse_double(key, val);
        else if (key == "channel.seed") rc.channel.seed = parse_u64(key, val);
        else if (key == "channel.trajectory_source") {
            if (val == "synthetic") rc.channel.trajectory_source = TrajectorySource::synthetic;
            else if (val == "file") rc.channel.trajectory_source = TrajectorySource::file;
            else throw ConfigError(key + ": '" + val + "' is not synthetic|file");
        }
        else if (key == "channel.trajectory_path") rc.channel.trajectory_path = val;
        else if (key == "channel.reciprocal") rc.channel.reciprocal = parse_bool(key, val);
        else if (key == "channel.rayleigh_sigma") rc.channel.rayleigh_sigma = parse_double(key, val);
        else if (key == "channel.ar_rho") rc.channel.ar_rho = parse_double(key, val);
        else if (key == "channel.synth_slots") rc.channel.synth_slots = parse_u64(key, val);
        else if (key == "eval.max_episodes") rc.eval.max_episodes = parse_u64(key, val);
        else if (key == "eval.min_block_errors") rc.eval.min_block_errors = parse_u64(key, val);
        else if (key == "eval.seed") rc.eval.seed = parse_u64(key, val);
        else if (key == "eval.chunk") rc.eval.chunk = parse_u64(key, val);
        else if (key == "out.checkpoint") rc.out.checkpoint = val;
        else if (key == "out.loss_csv") rc.out.loss_csv = val;
        else if (key == "out.results") rc.out.results = val;
        else throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    return rc;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

std::string config_to_text(const RunConfig& rc) {
    std::ostringstream os;
    os << "model.K=" << rc.model.K << "\n";
    os << "model.m=" << rc.model.m << "\n";
    os << "model.T=" << rc.model.T << "\n";
    os << "model.d_model=" << rc.model.d_model << "\n";
    os << "model.n_heads=" << rc.model.n_heads << "\n";
    os << "model.delta=" << rc.model.delta << "\n";
    os << "model.n_parity=" << rc.model.n_parity << "\n";
    os << "model.n_belief=" << rc.model.n_belief << "\n";
    os << "model.n_decoder=" << rc.model.n_decoder << "\n";
    os << "model.belief_enabled=" << bool_str(rc.model.belief_enabled) << "\n";
    os << "model.preprocess_mode=" << to_string(rc.model.preprocess_mode) << "\n";
    os << "model.extractor_design=" << to_string(rc.model.extractor_design) << "\n";
    os << "model.activation=" << to_string(rc.model.activation) << "\n";
    os << "model.positional_encoding=" << bool_str(rc.model.positional_encoding) << "\n";
    os << "train.batch_size=" << rc.train.batch_size << "\n";
    os << "train.total_batches=" << rc.train.total_batches << "\n";
    os << "train.lr0=" << double_str(rc.train.lr0) << "\n";
    os << "train.weight_decay=" << double_str(rc.train.weight_decay) << "\n";
    os << "train.clip_threshold=" << double_str(rc.train.clip_threshold) << "\n";
    os << "train.schedule_power=" << double_str(rc.train.schedule_power) << "\n";
    os << "train.lr_final=" << double_str(rc.train.lr_final) << "\n";
    os << "train.beta1=" << double_str(rc.train.beta1) << "\n";
    os << "train.beta2=" << double_str(rc.train.beta2) << "\n";
    os << "train.adam_eps=" << double_str(rc.train.adam_eps) << "\n";
    os << "train.seed=" << rc.train.seed << "\n";
    os << "train.log_every=" << rc.train.log_every << "\n";
    os << "train.desk_scale=" << bool_str(rc.train.desk_scale) << "\n";
    os << "channel.kind=" << (rc.channel.kind == ChannelKind::awgn ? "awgn" : "fading") << "\n";
    os << "channel.snr_ff_db=" << double_str(rc.channel.snr_ff_db) << "\n";
    os << "channel.snr_fb_db=" << double_str(rc.channel.snr_fb_db) << "\n";
    os << "channel.seed=" << rc.channel.seed << "\n";
    os << "channel.trajectory_source="
       << (rc.channel.trajectory_source == TrajectorySource::synthetic ? "synthetic" : "file") << "\n";
    os << "channel.trajectory_path=" << rc.channel.trajectory_path << "\n";
    os << "channel.reciprocal=" << bool_str(rc.channel.reciprocal) << "\n";
    os << "channel.rayleigh_sigma=" << double_str(rc.channel.rayleigh_sigma) << "\n";
    os << "channel.ar_rho=" << double_str(rc.channel.ar_rho) << "\n";
    os << "channel.synth_slots=" << rc.channel.synth_slots << "\n";
    os << "eval.max_episodes=" << rc.eval.max_episodes << "\n";
    os << "eval.min_block_errors=" << rc.eval.min_block_errors << "\n";
    os << "eval.seed=" << rc.eval.seed << "\n";
    os << "eval.chunk=" << rc.eval.chunk << "\n";
    os << "out.checkpoint=" << rc.out.checkpoint << "\n";
    os << "out.loss_csv=" << rc.out.loss_csv << "\n";
    os << "out.results=" << rc.out.results << "\n";
    return os.str();
}

void validate_run_config(const RunConfig& rc) {
    rc.model.validate();
    rc.train.validate();
    rc.eval.validate();
    if (rc.channel.kind == ChannelKind::fading) {
        if (rc.channel.trajectory_source == TrajectorySource::file && rc.channel.trajectory_path.empty())
            throw ConfigError("channel.trajectory_path: required for trajectory_source=file");
        if (rc.channel.trajectory_source == TrajectorySource::synthetic) {
            if (rc.channel.rayleigh_sigma <= 0.0)
                throw ConfigError("channel.rayleigh_sigma: must be positive");
            if (rc.channel.ar_rho < 0.0 || rc.channel.ar_rho >= 1.0)
                throw ConfigError("channel.ar_rho: must be in [0,1)");
            if (rc.channel.synth_slots < rc.model.T)
                throw ConfigError("channel.synth_slots: must cover T=" + std::to_string(rc.model.T) +
                                  " slots");
        }
    }
    if (std::isinf(rc.channel.snr_ff_db) && rc.channel.snr_ff_db < 0)
        throw ConfigError("channel.snr_ff_db: -inf is not a channel");
}

void set_all_seeds(RunConfig& rc, std::uint64_t seed) {
    rc.train.seed = seed;
    rc.eval.seed = seed;
    rc.channel.seed = seed;
}

void apply_env_seed_override(RunConfig& rc) {
    if (const char* env = std::getenv("GBAF_SEED")) {
        set_all_seeds(rc, parse_u64("GBAF_SEED", env));
    }
}

} // namespace gbaf
