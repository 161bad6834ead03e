// gbaf: train / evaluate / sweep GBAF feedback codes from the command line.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "gbaf/checkpoint.hpp"
#include "gbaf/config.hpp"
#include "gbaf/training.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

using gbaf::RunConfig;

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
};

RunConfig load_run_config(const CommonFlags& flags) {
    RunConfig rc = flags.config_path.empty() ? RunConfig{} : gbaf::parse_config_file(flags.config_path);
    gbaf::apply_env_seed_override(rc);
    if (flags.seed) gbaf::set_all_seeds(rc, *flags.seed);
    return rc;
}

int cmd_train(const CommonFlags& flags, bool paper_scale, std::size_t checkpoint_every,
              const std::string& resume_path) {
    RunConfig rc;
    std::size_t start_batch = 0;
    std::optional<gbaf::GbafModel> model;
    if (!resume_path.empty()) {
        if (!flags.config_path.empty()) {
            std::cerr << "train: --resume uses the checkpoint's stored config; drop --config\n";
            return kExitConfig;
        }
        gbaf::Checkpoint ckpt = gbaf::load_checkpoint(resume_path);
        model = gbaf::model_from_checkpoint(ckpt, &rc);
        start_batch = ckpt.trained_batches;
        if (flags.seed) gbaf::set_all_seeds(rc, *flags.seed);
    } else {
        rc = load_run_config(flags);
    }
    if (paper_scale) rc.train.apply_paper_scale();
    gbaf::validate_run_config(rc);

    const std::string out_path =
        !flags.out.empty() ? flags.out
                           : (!rc.out.checkpoint.empty() ? rc.out.checkpoint : "gbaf.ckpt");
    const std::string csv_path =
        !rc.out.loss_csv.empty() ? rc.out.loss_csv : out_path + ".loss.csv";

    if (!model) model = gbaf::GbafModel::init(rc.model, rc.train.seed);

    auto save = [&](std::size_t batches) {
        gbaf::save_checkpoint(out_path, gbaf::checkpoint_from_model(*model, rc, batches));
    };

    try {
        gbaf::TrainResult result = gbaf::train_loop(
            *model, rc.train, rc.channel, start_batch,
            [&](std::size_t completed, double) {
                if (checkpoint_every > 0 && completed % checkpoint_every == 0 &&
                    completed < rc.train.total_batches)
                    save(completed);
                return true;
            });
        save(rc.train.total_batches);
        gbaf::write_loss_csv(csv_path, result.trace);
        std::cout << "trained " << result.batches_run << " batches (resumed at " << start_batch
                  << "), checkpoint: " << out_path << ", loss trace: " << csv_path << "\n";
        return 0;
    } catch (const gbaf::TrainDiverged& e) {
        const std::string diag_path = out_path + ".diverged.json";
        nlohmann::json diag{{"step", e.step}, {"lr", e.lr}, {"loss", e.loss},
                            {"grad_norm", e.grad_norm}};
        std::ofstream(diag_path) << diag.dump(2) << "\n";
        std::cerr << "train: " << e.what() << "; diagnostic snapshot: " << diag_path << "\n";
        return kExitDiverged;
    }
}

int cmd_eval(const std::string& checkpoint_path, std::optional<double> snr_ff,
             std::optional<double> snr_fb, std::optional<std::size_t> episodes,
             std::optional<std::size_t> min_errors, std::optional<std::uint64_t> seed,
             const std::string& out_path) {
    gbaf::Checkpoint ckpt = gbaf::load_checkpoint(checkpoint_path);
    RunConfig rc;
    gbaf::GbafModel model = gbaf::model_from_checkpoint(ckpt, &rc);
    gbaf::apply_env_seed_override(rc);
    if (seed) gbaf::set_all_seeds(rc, *seed);
    if (snr_ff) rc.channel.snr_ff_db = *snr_ff;
    if (snr_fb) rc.channel.snr_fb_db = *snr_fb;
    if (episodes) rc.eval.max_episodes = *episodes;
    if (min_errors) rc.eval.min_block_errors = *min_errors;
    gbaf::validate_run_config(rc);

    gbaf::BlerResult res = gbaf::evaluate_bler(model, rc.eval, rc.channel);
    nlohmann::json record{
        {"snr_ff_db", rc.channel.snr_ff_db},
        {"snr_fb_db", rc.channel.noiseless_fb() ? nlohmann::json("inf")
                                                : nlohmann::json(rc.channel.snr_fb_db)},
        {"bler", res.bler},
        {"episodes", res.episodes},
        {"block_errors", res.block_errors},
        {"aborted", res.aborted},
        {"seed", rc.eval.seed},
        {"rate", rc.model.rate()},
    };
    const std::string text = record.dump(2) + "\n";
    if (out_path.empty()) {
        std::cout << text;
    } else {
        std::ofstream out(out_path);
        out << text;
        std::cout << "results: " << out_path << "\n";
    }
    return 0;
}

int cmd_sweep(const std::string& checkpoint_path, std::vector<double> snrs,
              std::vector<std::size_t> rounds, std::optional<std::size_t> episodes,
              std::optional<std::size_t> min_errors, std::optional<std::uint64_t> seed,
              const std::string& out_path) {
    gbaf::Checkpoint ckpt = gbaf::load_checkpoint(checkpoint_path);
    RunConfig rc;
    gbaf::GbafModel model = gbaf::model_from_checkpoint(ckpt, &rc);
    gbaf::apply_env_seed_override(rc);
    if (seed) gbaf::set_all_seeds(rc, *seed);
    if (episodes) rc.eval.max_episodes = *episodes;
    if (min_errors) rc.eval.min_block_errors = *min_errors;
    if (rounds.empty()) rounds = {rc.model.T};

    std::ostringstream csv;
    csv << "snr_db,T,rate,bler,episodes,errors\n" << std::setprecision(10);
    for (double snr : snrs) {
        for (std::size_t T : rounds) {
            const double rate = static_cast<double>(rc.model.m) / static_cast<double>(T);
            if (T != rc.model.T) {
                // the knowledge-vector width depends on T; this checkpoint
                // cannot evaluate it
                csv << snr << ',' << T << ',' << rate << ",needs-training,,\n";
                continue;
            }
            RunConfig point = rc;
            point.channel.snr_ff_db = snr;
            gbaf::validate_run_config(point);
            gbaf::BlerResult res = gbaf::evaluate_bler(model, point.eval, point.channel);
            csv << snr << ',' << T << ',' << rate << ',' << res.bler << ',' << res.episodes << ','
                << res.block_errors << "\n";
        }
    }
    if (out_path.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream out(out_path);
        out << csv.str();
        std::cout << "sweep table: " << out_path << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"GBAF feedback-code laboratory: train, evaluate and sweep "
                 "transformer-based block attention feedback codes"};
    app.require_subcommand(1);

    CommonFlags flags;
    bool paper_scale = false;
    std::size_t checkpoint_every = 0;
    std::string resume_path, checkpoint_path;
    std::optional<double> snr_ff, snr_fb;
    std::optional<std::size_t> episodes, min_errors;
    std::vector<double> snr_list;
    std::vector<std::size_t> t_list;

    auto* train = app.add_subcommand("train", "train a model and write a checkpoint + loss CSV");
    train->add_option("--config", flags.config_path, "key=value run configuration file");
    train->add_option("--seed", flags.seed, "override train/eval/channel seeds");
    train->add_flag("--paper-scale", paper_scale, "batch 8192 x 100k batches instead of desk scale");
    train->add_option("--checkpoint-every", checkpoint_every, "also checkpoint every N batches");
    train->add_option("--out", flags.out, "checkpoint output path");
    train->add_option("--resume", resume_path, "continue training from a checkpoint");

    auto* eval = app.add_subcommand("eval", "Monte-Carlo BLER of a trained checkpoint");
    eval->add_option("checkpoint", checkpoint_path, "trained checkpoint")->required();
    eval->add_option("--snr-ff", snr_ff, "forward SNR in dB");
    eval->add_option("--snr-fb", snr_fb, "feedback SNR in dB (inf = noiseless)");
    eval->add_option("--episodes", episodes, "maximum episodes");
    eval->add_option("--min-errors", min_errors, "stop after this many block errors");
    eval->add_option("--seed", flags.seed, "override seeds");
    eval->add_option("--out", flags.out, "results JSON path (stdout when omitted)");

    auto* sweep = app.add_subcommand("sweep", "BLER grid over SNR points and round counts");
    sweep->add_option("checkpoint", checkpoint_path, "trained checkpoint")->required();
    sweep->add_option("--snr-ff", snr_list, "forward SNR grid in dB")->required();
    sweep->add_option("--rounds", t_list, "round counts T (rate = m/T); default: checkpoint's T");
    sweep->add_option("--episodes", episodes, "maximum episodes per cell");
    sweep->add_option("--min-errors", min_errors, "stop a cell after this many block errors");
    sweep->add_option("--seed", flags.seed, "override seeds");
    sweep->add_option("--out", flags.out, "CSV path (stdout when omitted)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed())
            return cmd_train(flags, paper_scale, checkpoint_every, resume_path);
        if (eval->parsed())
            return cmd_eval(checkpoint_path, snr_ff, snr_fb, episodes, min_errors, flags.seed,
                            flags.out);
        if (sweep->parsed())
            return cmd_sweep(checkpoint_path, snr_list, t_list, episodes, min_errors, flags.seed,
                             flags.out);
    } catch (const gbaf::ConfigError& e) {
        std::cerr << "invalid configuration: " << e.what() << "\n";
        return kExitConfig;
    } catch (const gbaf::FormatError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const gbaf::ParseError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
