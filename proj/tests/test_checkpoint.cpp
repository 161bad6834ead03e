#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "gbaf/checkpoint.hpp"
#include "gbaf/training.hpp"

using namespace gbaf;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RunConfig tiny_rc() {
    RunConfig rc;
    rc.model.K = 12;
    rc.model.m = 3;
    rc.model.T = 5;
    rc.model.d_model = 8;
    rc.model.n_parity = 1;
    rc.model.n_decoder = 1;
    rc.train.batch_size = 4;
    rc.train.total_batches = 3;
    return rc;
}

} // namespace

TEST_CASE("config text round trip is canonical") {
    RunConfig rc = tiny_rc();
    rc.channel.snr_fb_db = 20.0;
    rc.model.belief_enabled = true;
    rc.model.extractor_design = FxDesign::D;
    rc.out.checkpoint = "runs/x.ckpt";
    const std::string text = config_to_text(rc);
    RunConfig back = parse_config_text(text);
    CHECK(config_to_text(back) == text);
    CHECK(back.model.K == 12);
    CHECK(back.model.belief_enabled);
    CHECK(back.model.extractor_design == FxDesign::D);
    CHECK(back.channel.snr_fb_db == 20.0);
    CHECK(back.out.checkpoint == "runs/x.ckpt");
}

TEST_CASE("noiseless feedback serializes as inf") {
    RunConfig rc = tiny_rc();
    const std::string text = config_to_text(rc);
    CHECK(text.find("channel.snr_fb_db=inf") != std::string::npos);
    RunConfig back = parse_config_text(text);
    CHECK(back.channel.noiseless_fb());
}

TEST_CASE("config parser reports unknown keys and bad values with location") {
    CHECK_THROWS_AS(parse_config_text("model.bogus=1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("model.K=twelve\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("just a line\n"), ConfigError);
    try {
        parse_config_text("\n\nmodel.bogus=1\n", "my.cfg");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("my.cfg:3") != std::string::npos);
    }
    // comments and blank lines are fine
    RunConfig rc = parse_config_text("# comment\n\nmodel.K=24 # trailing\nmodel.m=3\n");
    CHECK(rc.model.K == 24);
}

TEST_CASE("whole-config validation rejects inconsistent settings") {
    RunConfig rc = tiny_rc();
    rc.model.K = 13; // m does not divide K
    CHECK_THROWS_AS(validate_run_config(rc), ConfigError);
    rc = tiny_rc();
    rc.model.T = 2; // rate > 1
    CHECK_THROWS_AS(validate_run_config(rc), ConfigError);
    rc = tiny_rc();
    rc.model.n_heads = 3; // 8 % 3 != 0
    CHECK_THROWS_AS(validate_run_config(rc), ConfigError);
    rc = tiny_rc();
    rc.model.belief_enabled = true;
    rc.model.n_belief = 0;
    CHECK_THROWS_AS(validate_run_config(rc), ConfigError);
    rc = tiny_rc();
    rc.train.batch_size = 1; // power normalizer needs >= 2
    CHECK_THROWS_AS(validate_run_config(rc), ConfigError);
    CHECK_NOTHROW(validate_run_config(tiny_rc()));
}

TEST_CASE("GBAF_SEED overrides every seed") {
    RunConfig rc = tiny_rc();
    setenv("GBAF_SEED", "4242", 1);
    apply_env_seed_override(rc);
    unsetenv("GBAF_SEED");
    CHECK(rc.train.seed == 4242);
    CHECK(rc.eval.seed == 4242);
    CHECK(rc.channel.seed == 4242);
    apply_env_seed_override(rc); // no env: untouched
    CHECK(rc.train.seed == 4242);
}

TEST_CASE("checkpoint: save -> load -> save is byte-identical") {
    RunConfig rc = tiny_rc();
    GbafModel model = GbafModel::init(rc.model, 77);
    Checkpoint ckpt = checkpoint_from_model(model, rc, 123);
    const std::string p1 = temp_path("gbaf_ck1.bin");
    const std::string p2 = temp_path("gbaf_ck2.bin");
    save_checkpoint(p1, ckpt);
    Checkpoint loaded = load_checkpoint(p1);
    CHECK(loaded.trained_batches == 123);
    save_checkpoint(p2, loaded);
    CHECK(slurp(p1) == slurp(p2));
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("checkpoint round trip preserves the forward pass bit-exactly") {
    RunConfig rc = tiny_rc();
    GbafModel model = GbafModel::init(rc.model, 78);
    // push the normalizer stats off their init values so they round-trip too
    {
        RandomStream rng(1);
        Tensor x = Tensor::zeros({64, rc.model.l()});
        for (double& v : x.data()) v = 0.3 + rng.gaussian();
        Tape tape;
        (void)model.normalizer().normalize(tape, x, 1, true);
    }
    const std::string path = temp_path("gbaf_ck3.bin");
    save_checkpoint(path, checkpoint_from_model(model, rc, 0));
    GbafModel reloaded = model_from_checkpoint(load_checkpoint(path));
    std::filesystem::remove(path);

    RandomStream rng(2);
    Tensor q = Tensor::uniform({2, rc.model.l(), rc.model.d_in_parity()}, -1, 1, rng);
    Tape t1, t2;
    t1.set_recording(false);
    t2.set_recording(false);
    Tensor a = model.parity_forward(t1, q, 1, false);
    Tensor b = reloaded.parity_forward(t2, q, 1, false);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("a corrupted payload byte never loads silently") {
    RunConfig rc = tiny_rc();
    GbafModel model = GbafModel::init(rc.model, 79);
    const std::string path = temp_path("gbaf_ck4.bin");
    save_checkpoint(path, checkpoint_from_model(model, rc, 0));
    std::string bytes = slurp(path);
    bytes[bytes.size() / 2] ^= 0x01;
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    std::filesystem::remove(path);
}

TEST_CASE("bad magic and version bumps are rejected with actionable messages") {
    const std::string path = temp_path("gbaf_ck5.bin");
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPEnot a checkpoint at all, padding padding padding";
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);

    RunConfig rc = tiny_rc();
    GbafModel model = GbafModel::init(rc.model, 80);
    Checkpoint ckpt = checkpoint_from_model(model, rc, 0);
    ckpt.version = 2;
    save_checkpoint(path, ckpt);
    try {
        load_checkpoint(path);
        CHECK(false);
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("version 2") != std::string::npos);
        CHECK(msg.find("version 1") != std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST_CASE("manifest validation: a mismatched config fails loudly") {
    RunConfig rc = tiny_rc();
    GbafModel model = GbafModel::init(rc.model, 81);
    Checkpoint ckpt = checkpoint_from_model(model, rc, 0);
    RunConfig other = rc;
    other.model.d_model = 16; // different shapes than the stored payload
    ckpt.config_text = config_to_text(other);
    CHECK_THROWS_AS(model_from_checkpoint(ckpt), ConfigError);
}

TEST_CASE("resume continues the lr schedule at the stored step") {
    RunConfig rc = tiny_rc();
    rc.train.total_batches = 10;
    rc.train.batch_size = 4;
    rc.train.log_every = 1;
    rc.train.seed = 91;
    rc.channel.seed = 92;
    GbafModel model = GbafModel::init(rc.model, 82);

    const std::string path = temp_path("gbaf_ck6.bin");
    train_loop(model, rc.train, rc.channel, 0, [&](std::size_t completed, double) {
        if (completed == 5) save_checkpoint(path, checkpoint_from_model(model, rc, completed));
        return true;
    });

    Checkpoint mid = load_checkpoint(path);
    CHECK(mid.trained_batches == 5);
    GbafModel resumed = model_from_checkpoint(mid);
    TrainResult rest = train_loop(resumed, rc.train, rc.channel, mid.trained_batches);
    REQUIRE(!rest.trace.empty());
    CHECK(rest.trace[0].step == 5);
    CHECK(rest.trace[0].lr ==
          doctest::Approx(lr_schedule(5, 10, rc.train.lr0, rc.train.schedule_power,
                                      rc.train.lr_final))
              .epsilon(1e-15));
    CHECK(rest.batches_run == 5);
    std::filesystem::remove(path);
}
