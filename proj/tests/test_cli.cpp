#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#ifndef GBAF_CLI_PATH
#error "GBAF_CLI_PATH must point at the gbaf binary"
#endif

namespace {

namespace fs = std::filesystem;

struct RunOutput {
    int exit_code = -1;
    std::string stdout_text;
};

fs::path work_dir() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "gbaf_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

RunOutput run_cli(const std::string& args, const std::string& env = "") {
    const fs::path out_file = work_dir() / "stdout.txt";
    const std::string cmd =
        env + " " + std::string(GBAF_CLI_PATH) + " " + args + " > " + out_file.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    RunOutput out;
    out.exit_code = WEXITSTATUS(rc);
    std::ifstream in(out_file);
    out.stdout_text = {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return out;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path write_tiny_config(const std::string& name, std::size_t total_batches = 10) {
    const fs::path path = work_dir() / name;
    std::ofstream out(path);
    out << "model.K=12\nmodel.m=3\nmodel.T=5\nmodel.d_model=8\n"
        << "model.n_parity=1\nmodel.n_decoder=1\n"
        << "train.batch_size=8\ntrain.total_batches=" << total_batches << "\n"
        << "train.seed=5\nchannel.snr_ff_db=0\nchannel.seed=6\n"
        << "eval.max_episodes=50\neval.seed=7\n";
    return path;
}

std::size_t count_lines(const std::string& text) {
    std::size_t n = 0;
    for (char c : text) n += c == '\n';
    return n;
}

} // namespace

TEST_CASE("train smoke: checkpoint plus loss csv with one logged row") {
    const fs::path cfg = write_tiny_config("smoke.cfg");
    const fs::path ckpt = work_dir() / "smoke.ckpt";
    RunOutput out = run_cli("train --config " + cfg.string() + " --out " + ckpt.string());
    CHECK(out.exit_code == 0);
    CHECK(fs::exists(ckpt));
    const fs::path csv = ckpt.string() + ".loss.csv";
    REQUIRE(fs::exists(csv));
    const std::string csv_text = slurp(csv);
    CHECK(count_lines(csv_text) == 2); // header + step 0 (10 batches, log every 100)
    CHECK(csv_text.rfind("step,lr,loss,grad_norm", 0) == 0);
}

TEST_CASE("same seed twice gives byte-identical checkpoints") {
    const fs::path cfg = write_tiny_config("det.cfg");
    const fs::path c1 = work_dir() / "det1.ckpt";
    const fs::path c2 = work_dir() / "det2.ckpt";
    CHECK(run_cli("train --config " + cfg.string() + " --out " + c1.string()).exit_code == 0);
    CHECK(run_cli("train --config " + cfg.string() + " --out " + c2.string()).exit_code == 0);
    CHECK(slurp(c1) == slurp(c2));
}

TEST_CASE("GBAF_SEED env override matches --seed") {
    const fs::path cfg = write_tiny_config("seed.cfg");
    const fs::path c1 = work_dir() / "seed1.ckpt";
    const fs::path c2 = work_dir() / "seed2.ckpt";
    CHECK(run_cli("train --config " + cfg.string() + " --seed 99 --out " + c1.string()).exit_code == 0);
    CHECK(run_cli("train --config " + cfg.string() + " --out " + c2.string(), "GBAF_SEED=99")
              .exit_code == 0);
    CHECK(slurp(c1) == slurp(c2));
}

TEST_CASE("invalid config exits 2 with a field-level message") {
    const fs::path path = work_dir() / "bad.cfg";
    {
        std::ofstream out(path);
        out << "model.K=13\nmodel.m=3\nmodel.T=5\n";
    }
    RunOutput out = run_cli("train --config " + path.string());
    CHECK(out.exit_code == 2);
    CHECK(out.stdout_text.find("model.K") != std::string::npos);
}

TEST_CASE("eval: deterministic JSON record with the documented fields") {
    const fs::path cfg = write_tiny_config("eval.cfg");
    const fs::path ckpt = work_dir() / "eval.ckpt";
    REQUIRE(run_cli("train --config " + cfg.string() + " --out " + ckpt.string()).exit_code == 0);
    const fs::path r1 = work_dir() / "res1.json";
    const fs::path r2 = work_dir() / "res2.json";
    RunOutput e1 = run_cli("eval " + ckpt.string() + " --episodes 40 --seed 3 --out " + r1.string());
    RunOutput e2 = run_cli("eval " + ckpt.string() + " --episodes 40 --seed 3 --out " + r2.string());
    CHECK(e1.exit_code == 0);
    CHECK(e2.exit_code == 0);
    const std::string record = slurp(r1);
    CHECK(record == slurp(r2));
    for (const char* field : {"snr_ff_db", "snr_fb_db", "bler", "episodes", "block_errors",
                              "aborted", "seed", "rate"})
        CHECK(record.find(field) != std::string::npos);
}

TEST_CASE("eval on a missing checkpoint exits 2") {
    RunOutput out = run_cli("eval " + (work_dir() / "missing.ckpt").string());
    CHECK(out.exit_code == 2);
}

TEST_CASE("sweep: grid shape, needs-training marker, csv schema") {
    const fs::path cfg = write_tiny_config("sweep.cfg");
    const fs::path ckpt = work_dir() / "sweep.ckpt";
    REQUIRE(run_cli("train --config " + cfg.string() + " --out " + ckpt.string()).exit_code == 0);
    const fs::path csv = work_dir() / "sweep.csv";
    RunOutput out = run_cli("sweep " + ckpt.string() +
                            " --snr-ff -1 0 1 --rounds 5 6 --episodes 30 --out " + csv.string());
    CHECK(out.exit_code == 0);
    const std::string text = slurp(csv);
    CHECK(count_lines(text) == 7); // header + 3 snr x 2 rounds
    CHECK(text.rfind("snr_db,T,rate,bler,episodes,errors", 0) == 0);
    CHECK(text.find("needs-training") != std::string::npos);
    CHECK(text.find(",6,0.5,needs-training") != std::string::npos); // rate 3/6
    // the trained T=5 rows carry numbers
    CHECK(text.find(",5,0.6,") != std::string::npos);
}

TEST_CASE("resume picks the schedule up from the stored batch count") {
    const fs::path cfg = write_tiny_config("resume.cfg", 6);
    const fs::path ckpt = work_dir() / "resume.ckpt";
    REQUIRE(run_cli("train --config " + cfg.string() + " --out " + ckpt.string()).exit_code == 0);
    RunOutput out = run_cli("train --resume " + ckpt.string() + " --out " +
                            (work_dir() / "resume2.ckpt").string());
    CHECK(out.exit_code == 0);
    CHECK(out.stdout_text.find("resumed at 6") != std::string::npos);
    RunOutput both = run_cli("train --resume " + ckpt.string() + " --config " + cfg.string());
    CHECK(both.exit_code == 2); // --resume and --config are mutually exclusive
}
