#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <filesystem>
#include <fstream>

#include "gbaf/training.hpp"

using namespace gbaf;

namespace {

GbafConfig tiny_cfg() {
    GbafConfig cfg;
    cfg.K = 12;
    cfg.m = 3;
    cfg.T = 5;
    cfg.d_model = 8;
    cfg.n_parity = 1;
    cfg.n_decoder = 1;
    return cfg;
}

} // namespace

TEST_CASE("cross entropy: uniform logits cost l*m*ln2 per sequence") {
    Tape tape;
    const std::size_t l = 17, C = 8;
    Tensor logits = Tensor::full({l, C}, 0.25);
    std::vector<std::size_t> labels(l, 3);
    Tensor loss = cross_entropy_loss(tape, logits, labels);
    CHECK(loss.item() == doctest::Approx(l * std::log(8.0)).epsilon(1e-12));
    CHECK(loss.item() == doctest::Approx(l * 3 * std::numbers::ln2).epsilon(1e-12));

    // batched: the mean over the batch keeps the per-sequence value
    Tensor logits3 = Tensor::full({4, l, C}, -1.5);
    std::vector<std::size_t> labels3(4 * l, 5);
    Tensor loss3 = cross_entropy_loss(tape, logits3, labels3);
    CHECK(loss3.item() == doctest::Approx(l * std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy: saturated correct class costs nearly nothing") {
    Tape tape;
    Tensor logits = Tensor::zeros({2, 4});
    logits[0 * 4 + 1] = 1000.0;
    logits[1 * 4 + 2] = 1000.0;
    std::vector<std::size_t> labels{1, 2};
    CHECK(cross_entropy_loss(tape, logits, labels).item() < 1e-9);
}

TEST_CASE("cross entropy: brute-force -log-softmax oracle on random 2-block cases") {
    RandomStream rng(1);
    Tape tape;
    for (int trial = 0; trial < 10; ++trial) {
        Tensor logits = Tensor::uniform({1, 2, 8}, -3, 3, rng);
        std::vector<std::size_t> labels{rng.uniform_below(8), rng.uniform_below(8)};
        double expect = 0.0;
        for (std::size_t i = 0; i < 2; ++i) {
            double z = 0.0;
            for (std::size_t c = 0; c < 8; ++c) z += std::exp(logits[i * 8 + c]);
            expect += -std::log(std::exp(logits[i * 8 + labels[i]]) / z);
        }
        CHECK(std::abs(cross_entropy_loss(tape, logits, labels).item() - expect) < 1e-10);
    }
}

TEST_CASE("cross entropy: label range contract and non-negativity") {
    Tape tape;
    Tensor logits = Tensor::zeros({2, 4});
    std::vector<std::size_t> bad{1, 4};
    CHECK_THROWS_AS(cross_entropy_loss(tape, logits, bad), ContractError);
    RandomStream rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor lg = Tensor::uniform({3, 4}, -4, 4, rng);
        std::vector<std::size_t> labels{0, 3, 2};
        CHECK(cross_entropy_loss(tape, lg, labels).item() >= 0.0);
    }
}

TEST_CASE("cross entropy gradient matches finite differences") {
    RandomStream rng(3);
    Tensor logits = Tensor::uniform({2, 3, 4}, -2, 2, rng, true);
    std::vector<std::size_t> labels{0, 2, 3, 1, 1, 2};
    std::vector<Tensor> params{logits};
    RandomStream coords(4);
    auto f = [&](Tape& t) { return cross_entropy_loss(t, logits, labels); };
    CHECK(grad_check(f, params, 1e-5, 24, coords) < 1e-7);
}

TEST_CASE("adamw: pure decay with zero gradient") {
    RandomStream rng(5);
    Tensor p = Tensor::uniform({4}, -1, 1, rng, true);
    const std::vector<double> before(p.data().begin(), p.data().end());
    p.zero_grad();
    AdamW opt({p}, 0.9, 0.999, 1e-8, 0.01);
    opt.step(0.1);
    for (std::size_t i = 0; i < p.size(); ++i)
        CHECK(p[i] == doctest::Approx(before[i] * (1.0 - 0.1 * 0.01)).epsilon(1e-12));
}

TEST_CASE("adamw: first step moves by about -lr*sign(g)") {
    Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
    p.zero_grad();
    p.grad()[0] = 0.3;
    p.grad()[1] = -1.7;
    p.grad()[2] = 0.0009;
    AdamW opt({p}, 0.9, 0.999, 1e-8, 0.0);
    opt.step(0.01);
    CHECK(p[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(p[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
    // tiny gradients move by less than lr because of the eps floor
    CHECK(p[2] > 0.5 - 0.01);
}

TEST_CASE("adamw: zero gradient and zero decay leave parameters untouched") {
    Tensor p = Tensor::from({2}, {0.25, -0.75}, true);
    p.zero_grad();
    AdamW opt({p}, 0.9, 0.999, 1e-8, 0.0);
    opt.step(0.5);
    CHECK(p[0] == 0.25);
    CHECK(p[1] == -0.75);
}

TEST_CASE("optimizer step with lr=0 is a bit-identical no-op") {
    GbafConfig cfg = tiny_cfg();
    GbafModel model = GbafModel::init(cfg, 9);
    std::vector<Tensor> params = model.parameters();
    std::vector<std::vector<double>> before;
    for (const Tensor& p : params) before.emplace_back(p.data().begin(), p.data().end());
    for (Tensor& p : params) {
        p.zero_grad();
        for (double& g : p.grad()) g = 0.37;
    }
    AdamW opt(params, 0.9, 0.999, 1e-8, 0.01);
    opt.step(0.0);
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < params[i].size(); ++j)
            CHECK(params[i][j] == before[i][j]);
}

TEST_CASE("gradient clipping: scaling, pass-through, post-clip norm") {
    Tensor a = Tensor::from({2}, {0.6, 0.0}, true);
    Tensor b = Tensor::from({2}, {0.0, 0.8}, true);
    a.zero_grad();
    b.zero_grad();
    a.grad()[0] = 0.6;
    b.grad()[1] = 0.8; // global norm 1.0
    std::vector<Tensor> params{a, b};
    const double norm = clip_gradients(params, 0.5);
    CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(a.grad()[0] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(b.grad()[1] == doctest::Approx(0.4).epsilon(1e-12));

    double post = 0.0;
    for (const Tensor& p : params)
        for (double g : p.grad()) post += g * g;
    CHECK(std::abs(std::sqrt(post) - 0.5) < 1e-12);

    // norm below the threshold: untouched
    a.grad()[0] = 0.2;
    b.grad()[1] = 0.1;
    const double small = clip_gradients(params, 0.5);
    CHECK(small == doctest::Approx(std::sqrt(0.05)).epsilon(1e-12));
    CHECK(a.grad()[0] == 0.2);
    CHECK(b.grad()[1] == 0.1);
}

TEST_CASE("lr schedule endpoints and linear midpoint") {
    CHECK(lr_schedule(0, 100, 1e-3, 1.0, 1e-5) == doctest::Approx(1e-3).epsilon(1e-15));
    CHECK(lr_schedule(100, 100, 1e-3, 1.0, 1e-5) == doctest::Approx(1e-5).epsilon(1e-15));
    CHECK(lr_schedule(50, 100, 1e-3, 1.0, 1e-5) ==
          doctest::Approx((1e-3 + 1e-5) / 2.0).epsilon(1e-12));
    CHECK(lr_schedule(25, 100, 2e-3, 2.0, 0.0) == doctest::Approx(2e-3 * 0.5625).epsilon(1e-12));
}

TEST_CASE("uncoded BPSK baseline closed forms") {
    CHECK(q_function(0.0) == doctest::Approx(0.5).epsilon(1e-15));
    // p = Q(1/sigma) at 0 dB: Q(1) = 0.158655...
    const double p0 = q_function(1.0);
    CHECK(p0 == doctest::Approx(0.15865525393145707).epsilon(1e-12));
    CHECK(uncoded_bpsk_bler(1, 0.0) == doctest::Approx(p0).epsilon(1e-12));
    CHECK(uncoded_bpsk_bler(51, 0.0) ==
          doctest::Approx(1.0 - std::pow(1.0 - p0, 51.0)).epsilon(1e-12));
    CHECK(uncoded_bpsk_bler(51, 0.0) > 0.9998);
}

TEST_CASE("train_loop: fixed seed gives a bit-identical loss trace") {
    auto run = []() {
        GbafConfig cfg = tiny_cfg();
        GbafModel model = GbafModel::init(cfg, 11);
        TrainConfig tc;
        tc.batch_size = 8;
        tc.total_batches = 10;
        tc.log_every = 1;
        tc.seed = 21;
        ChannelSpec ch;
        ch.snr_ff_db = 0.0;
        ch.seed = 22;
        return train_loop(model, tc, ch);
    };
    TrainResult a = run();
    TrainResult b = run();
    REQUIRE(a.trace.size() == 10);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        CHECK(a.trace[i].loss == b.trace[i].loss);
        CHECK(a.trace[i].grad_norm == b.trace[i].grad_norm);
        CHECK(a.trace[i].lr == b.trace[i].lr);
    }
}

TEST_CASE("loss before any training is near the uniform-prior value") {
    GbafConfig cfg = tiny_cfg();
    GbafModel model = GbafModel::init(cfg, 13);
    TrainConfig tc;
    tc.batch_size = 64;
    tc.total_batches = 1;
    tc.log_every = 1;
    tc.seed = 23;
    ChannelSpec ch;
    ch.snr_ff_db = 0.0;
    ch.seed = 24;
    TrainResult res = train_loop(model, tc, ch);
    REQUIRE(res.trace.size() == 1);
    const double uniform = static_cast<double>(cfg.l()) * cfg.m * std::numbers::ln2;
    CHECK(res.trace[0].loss > 0.8 * uniform);
    CHECK(res.trace[0].loss < 1.2 * uniform);
}

TEST_CASE("loss gradient w.r.t. every trainable parameter passes finite differences") {
    GbafConfig cfg = tiny_cfg();
    GbafModel model = GbafModel::init(cfg, 15);
    ChannelSpec ch;
    ch.snr_ff_db = 3.0;
    ch.snr_fb_db = 20.0;
    ch.seed = 25;
    ChannelContext ctx(ch, cfg.l());

    // 2-episode micro-batch with frozen noise draws (fixed episode keys) and
    // the normalizer in frozen mode: batch standardization would make the
    // parity head bias structurally inert and the check noise-bound
    Tensor bits = Tensor::zeros({2, cfg.K});
    RandomStream brng(26);
    for (double& b : bits.data()) b = brng.uniform_below(2) ? 1.0 : 0.0;
    const std::vector<std::size_t> labels = labels_from_bits(bits, cfg.m);

    auto f = [&](Tape& t) {
        EpisodeRunOptions opts;
        opts.first_episode = 7;
        opts.training_norm = false;
        EpisodeBatchResult batch = run_episode_batch(t, model, ctx, bits, opts);
        return cross_entropy_loss(t, batch.logits, labels);
    };
    std::vector<Tensor> params = model.parameters();
    RandomStream coords(27);
    CHECK(grad_check(f, params, 1e-5, 4, coords) < 1e-4);
}

TEST_CASE("evaluate_bler: a constant-class decoder is wrong on every off-class block") {
    GbafConfig cfg = tiny_cfg();
    GbafModel model = GbafModel::init(cfg, 17);
    // force the decoder head to always pick class 7
    EncoderUnit& unit = model.decoder_unit();
    std::fill(unit.map.weight.data().begin(), unit.map.weight.data().end(), 0.0);
    std::fill(unit.map.bias.data().begin(), unit.map.bias.data().end(), 0.0);
    unit.map.bias[7] = 100.0;

    ChannelSpec ch;
    ch.snr_ff_db = 0.0;
    ch.seed = 31;
    ChannelContext ctx(ch, cfg.l());
    LookupTable table = LookupTable::make(cfg.m);

    // all-zero bits: every block labels 0, the constant-7 decoder misses all
    Tensor bits = Tensor::zeros({8, cfg.K});
    Tape tape;
    tape.set_recording(false);
    EpisodeRunOptions opts;
    EpisodeBatchResult batch = run_episode_batch(tape, model, ctx, bits, opts);
    DecodeScore score = decode_and_score(batch.logits, bits, table);
    for (std::size_t e = 0; e < 8; ++e) CHECK(score.block_errors[e] == cfg.l()); // bler 1.0
}

TEST_CASE("evaluate_bler: determinism and stop rules") {
    GbafConfig cfg = tiny_cfg();
    GbafModel model = GbafModel::init(cfg, 19);
    ChannelSpec ch;
    ch.snr_ff_db = -2.0;
    ch.seed = 33;
    EvalConfig ec;
    ec.max_episodes = 200;
    ec.seed = 34;
    ec.chunk = 64;
    BlerResult a = evaluate_bler(model, ec, ch);
    BlerResult b = evaluate_bler(model, ec, ch);
    CHECK(a.bler == b.bler);
    CHECK(a.episodes == b.episodes);
    CHECK(a.episodes == 200);
    CHECK(a.decoded_blocks == 200 * cfg.l());
    CHECK(a.bler == doctest::Approx(static_cast<double>(a.block_errors) /
                                    static_cast<double>(a.decoded_blocks)));

    // an untrained model errs constantly, so min_block_errors stops early
    EvalConfig early = ec;
    early.min_block_errors = 10;
    BlerResult c = evaluate_bler(model, early, ch);
    CHECK(c.block_errors >= 10);
    CHECK(c.episodes < 200);
}

TEST_CASE("non-finite loss aborts with a diagnostic snapshot") {
    GbafConfig cfg = tiny_cfg();
    GbafModel model = GbafModel::init(cfg, 23);
    // poison the decoder head so the logits (and loss) go non-finite
    for (auto& np : model.named_parameters())
        if (np.name == "decoder.map.bias")
            np.tensor[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig tc;
    tc.batch_size = 4;
    tc.total_batches = 3;
    tc.seed = 35;
    ChannelSpec ch;
    ch.seed = 36;
    CHECK_THROWS_AS(train_loop(model, tc, ch), TrainDiverged);
    try {
        train_loop(model, tc, ch);
    } catch (const TrainDiverged& e) {
        CHECK(e.step == 0);
        CHECK(std::isnan(e.loss));
    }
}

TEST_CASE("loss csv trace has one row per log point") {
    GbafConfig cfg = tiny_cfg();
    GbafModel model = GbafModel::init(cfg, 29);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.total_batches = 10;
    tc.log_every = 100; // only step 0 logs within 10 batches
    tc.seed = 37;
    ChannelSpec ch;
    ch.seed = 38;
    TrainResult res = train_loop(model, tc, ch);
    CHECK(res.trace.size() == 1);
    CHECK(res.trace[0].step == 0);
    const std::string path = "/tmp/gbaf_loss_trace.csv";
    write_loss_csv(path, res.trace);
    std::ifstream in(path);
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 2); // header + one row
    std::filesystem::remove(path);
}
