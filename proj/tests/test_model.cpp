#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gbaf/model.hpp"

using namespace gbaf;

namespace {

GbafConfig tiny_cfg() {
    GbafConfig cfg;
    cfg.K = 12;
    cfg.m = 3;
    cfg.T = 5;
    cfg.d_model = 8;
    cfg.n_parity = 1;
    cfg.n_belief = 1;
    cfg.n_decoder = 1;
    return cfg;
}

Tensor random_bits(std::size_t B, std::size_t K, RandomStream& rng) {
    Tensor bits = Tensor::zeros({B, K});
    for (double& b : bits.data()) b = rng.uniform_below(2) ? 1.0 : 0.0;
    return bits;
}

KnowledgeState make_state(const GbafConfig& cfg, std::size_t B, RandomStream& rng,
                          std::size_t rounds, bool zero_noise) {
    KnowledgeState st;
    st.bits = random_bits(B, cfg.K, rng);
    st.mod_blocks = bpsk_blocks(st.bits, cfg.m);
    for (std::size_t r = 0; r < rounds; ++r) {
        Tensor c = Tensor::uniform({B, cfg.l()}, -1, 1, rng);
        st.symbols.push_back(c);
        Tensor fb = Tensor::zeros({B, cfg.l()});
        for (std::size_t i = 0; i < fb.size(); ++i)
            fb[i] = zero_noise ? c[i] : c[i] + 0.1 * rng.gaussian();
        st.feedback.push_back(fb);
    }
    return st;
}

} // namespace

TEST_CASE("config arithmetic: d_in per mode, l, rate") {
    GbafConfig cfg; // defaults: K=51, m=3, T=9, no belief, disentangle
    CHECK(cfg.l() == 17);
    CHECK(cfg.d_in_parity() == 3 + 2 * 8); // = 19
    CHECK(cfg.d_in_belief() == 8);
    CHECK(cfg.d_in_decoder() == 9);
    cfg.belief_enabled = true;
    CHECK(cfg.d_in_parity() == 3 + 6 + 16);
    cfg.preprocess_mode = PreprocessMode::feedback_only;
    CHECK(cfg.d_in_parity() == 3 + 6 + 8);
    cfg.preprocess_mode = PreprocessMode::noise_only;
    cfg.belief_enabled = false;
    CHECK(cfg.d_in_parity() == 3 + 8);
}

TEST_CASE("config validation rejections") {
    GbafConfig cfg;
    cfg.K = 50; // 3 does not divide 50
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = GbafConfig{};
    cfg.T = 2; // rate 3/2 > 1
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = GbafConfig{};
    cfg.n_heads = 5; // 32 % 5 != 0
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = GbafConfig{};
    cfg.belief_enabled = true;
    cfg.n_belief = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_NOTHROW(GbafConfig{}.validate());
}

TEST_CASE("preprocess_parity at round 1 populates only the bit slots") {
    GbafConfig cfg; // K=51 m=3 T=9, disentangle
    RandomStream rng(1);
    KnowledgeState st = make_state(cfg, 2, rng, 0, true);
    Tape tape;
    Tensor q = preprocess_parity(tape, cfg, st, nullptr, 1);
    REQUIRE(q.shape() == Shape{2, 17, 19});
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 17; ++i)
            for (std::size_t j = 0; j < 19; ++j) {
                const double v = q[(b * 17 + i) * 19 + j];
                if (j < 3)
                    CHECK(v == st.mod_blocks[(b * 17 + i) * 3 + j]);
                else
                    CHECK(v == 0.0);
            }
}

TEST_CASE("preprocess_parity: zero channel noise leaves disentangle noise slots zero") {
    GbafConfig cfg;
    RandomStream rng(2);
    const std::size_t tau = 4;
    KnowledgeState st = make_state(cfg, 2, rng, tau - 1, /*zero_noise=*/true);
    Tape tape;
    Tensor q = preprocess_parity(tape, cfg, st, nullptr, tau);
    // layout: [bbar(3) | c slots (8) | noise slots (8)]
    for (std::size_t row = 0; row < 2 * 17; ++row)
        for (std::size_t j = 0; j < 8; ++j) {
            const double sym = q[row * 19 + 3 + j];
            const double noise = q[row * 19 + 11 + j];
            if (j < tau - 1)
                CHECK(sym == st.symbols[j][row]);
            else
                CHECK(sym == 0.0);
            CHECK(noise == 0.0);
        }
}

TEST_CASE("preprocess_parity raw mode keeps the feedback symbols unsubtracted") {
    GbafConfig cfg;
    cfg.preprocess_mode = PreprocessMode::raw;
    RandomStream rng(3);
    KnowledgeState st = make_state(cfg, 1, rng, 2, false);
    Tape tape;
    Tensor q = preprocess_parity(tape, cfg, st, nullptr, 3);
    for (std::size_t row = 0; row < 17; ++row)
        for (std::size_t j = 0; j < 2; ++j)
            CHECK(q[row * 19 + 11 + j] == st.feedback[j][row]);
}

TEST_CASE("preprocess_parity contract errors") {
    GbafConfig cfg;
    RandomStream rng(4);
    KnowledgeState st = make_state(cfg, 1, rng, 0, true);
    Tape tape;
    CHECK_THROWS_AS(preprocess_parity(tape, cfg, st, nullptr, 0), ContractError);
    CHECK_THROWS_AS(preprocess_parity(tape, cfg, st, nullptr, 10), ContractError);
    Tensor fake_belief = Tensor::zeros({1, 17, 6});
    CHECK_THROWS_AS(preprocess_parity(tape, cfg, st, &fake_belief, 1), ContractError);
}

TEST_CASE("preprocess_belief: zero history, direct copies and shape") {
    GbafConfig cfg;
    cfg.belief_enabled = true;
    RandomStream rng(5);
    KnowledgeState st = make_state(cfg, 2, rng, 2, false);
    Tape tape;
    Tensor q1 = preprocess_belief(tape, cfg, st, 1);
    REQUIRE(q1.shape() == Shape{2, 17, 8});
    // tau=1: no feedback yet -> all-zero matrix
    KnowledgeState st0 = make_state(cfg, 2, rng, 0, true);
    Tensor q0 = preprocess_belief(tape, cfg, st0, 1);
    for (double v : q0.data()) CHECK(v == 0.0);

    Tensor q3 = preprocess_belief(tape, cfg, st, 3);
    for (std::size_t row = 0; row < 2 * 17; ++row) {
        CHECK(q3[row * 8 + 0] == st.feedback[0][row]);
        CHECK(q3[row * 8 + 1] == st.feedback[1][row]);
        for (std::size_t j = 2; j < 8; ++j) CHECK(q3[row * 8 + j] == 0.0);
    }

    GbafConfig no_belief;
    CHECK_THROWS_AS(preprocess_belief(tape, no_belief, st, 1), ContractError);
}

TEST_CASE("preprocess_decoder: shape, zero-noise rows, block permutation") {
    GbafConfig cfg;
    RandomStream rng(6);
    ReceiverState rx;
    std::vector<Tensor> symbols;
    for (std::size_t t = 0; t < cfg.T; ++t) {
        symbols.push_back(Tensor::uniform({1, 17}, -1, 1, rng));
        rx.received.push_back(symbols.back());
    }
    Tape tape;
    Tensor q = preprocess_decoder(tape, cfg, rx);
    REQUIRE(q.shape() == Shape{1, 17, 9});
    for (std::size_t i = 0; i < 17; ++i)
        for (std::size_t t = 0; t < 9; ++t) CHECK(q[i * 9 + t] == symbols[t][i]);

    // permuting blocks permutes rows identically
    ReceiverState rx_perm;
    std::vector<std::size_t> perm(17);
    for (std::size_t i = 0; i < 17; ++i) perm[i] = (i + 5) % 17;
    for (std::size_t t = 0; t < 9; ++t) {
        Tensor p = Tensor::zeros({1, 17});
        for (std::size_t i = 0; i < 17; ++i) p[i] = symbols[t][perm[i]];
        rx_perm.received.push_back(p);
    }
    Tensor qp = preprocess_decoder(tape, cfg, rx_perm);
    for (std::size_t i = 0; i < 17; ++i)
        for (std::size_t t = 0; t < 9; ++t) CHECK(qp[i * 9 + t] == q[perm[i] * 9 + t]);

    ReceiverState incomplete;
    incomplete.received.assign(4, Tensor::zeros({1, 17}));
    CHECK_THROWS_AS(preprocess_decoder(tape, cfg, incomplete), ContractError);
}

TEST_CASE("power_normalize: training standardization and moment bounds") {
    PowerNormalizer norm(5);
    RandomStream rng(7);
    Tensor x = Tensor::zeros({4096, 4});
    for (double& v : x.data()) v = 1.5 + 2.0 * rng.gaussian();
    Tape tape;
    Tensor y = norm.normalize(tape, x, 1, true);
    double mean = 0.0, power = 0.0;
    for (double v : y.data()) {
        mean += v;
        power += v * v;
    }
    mean /= static_cast<double>(y.size());
    power /= static_cast<double>(y.size());
    CHECK(std::abs(mean) < 1e-6);
    CHECK(power > 0.99);
    CHECK(power < 1.01);
}

TEST_CASE("power_normalize: standard-normal batch passes through approximately") {
    PowerNormalizer norm(3);
    RandomStream rng(8);
    Tensor x = Tensor::zeros({8192, 2});
    for (double& v : x.data()) v = rng.gaussian();
    Tape tape;
    Tensor y = norm.normalize(tape, x, 2, true);
    double max_dev = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        max_dev = std::max(max_dev, std::abs(y[i] - x[i]) / std::max(1.0, std::abs(x[i])));
    CHECK(max_dev < 0.05);
}

TEST_CASE("power_normalize: constant batch maps to zeros") {
    PowerNormalizer norm(2);
    Tape tape;
    Tensor x = Tensor::full({16, 3}, 2.25);
    Tensor y = norm.normalize(tape, x, 1, true);
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("power_normalize: affine invariance of the standardized output") {
    PowerNormalizer n1(2), n2(2);
    RandomStream rng(9);
    Tensor x = Tensor::uniform({64, 5}, -2, 2, rng);
    Tensor ax = Tensor::zeros({64, 5});
    for (std::size_t i = 0; i < x.size(); ++i) ax[i] = 3.0 * x[i] - 1.25;
    Tape tape;
    Tensor y1 = n1.normalize(tape, x, 1, true);
    Tensor y2 = n2.normalize(tape, ax, 1, true);
    // agreement is limited by the eps guard in 1/sqrt(var+eps)
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-5));
}

TEST_CASE("power_normalize contract: training batch of one") {
    PowerNormalizer norm(2);
    Tape tape;
    Tensor x = Tensor::zeros({1, 4});
    CHECK_THROWS_AS(norm.normalize(tape, x, 1, true), ContractError);
    CHECK_THROWS_AS(norm.normalize(tape, Tensor::zeros({4, 4}), 0, true), ContractError);
    CHECK_THROWS_AS(norm.normalize(tape, Tensor::zeros({4, 4}), 3, true), ContractError);
    // frozen mode accepts single rows
    CHECK_NOTHROW(norm.normalize(tape, x, 1, false));
}

TEST_CASE("power_normalize: frozen mode is deterministic and uses running stats") {
    PowerNormalizer norm(2);
    RandomStream rng(10);
    // push the running stats away from (0,1)
    for (int i = 0; i < 50; ++i) {
        Tensor x = Tensor::zeros({512, 3});
        for (double& v : x.data()) v = 2.0 + 0.5 * rng.gaussian();
        Tape tape;
        (void)norm.normalize(tape, x, 1, true);
    }
    CHECK(norm.running_mean()[0] == doctest::Approx(2.0).epsilon(0.05));
    CHECK(norm.running_var()[0] == doctest::Approx(0.25).epsilon(0.1));
    Tensor probe = Tensor::uniform({2, 3}, -1, 3, rng);
    Tape tape;
    Tensor a = norm.normalize(tape, probe, 1, false);
    Tensor b = norm.normalize(tape, probe, 1, false);
    for (std::size_t i = 0; i < probe.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("parity_forward: shape, frozen determinism") {
    GbafConfig cfg = tiny_cfg();
    GbafModel model = GbafModel::init(cfg, 42);
    RandomStream rng(11);
    KnowledgeState st = make_state(cfg, 3, rng, 1, false);
    Tape tape;
    tape.set_recording(false);
    Tensor q = preprocess_parity(tape, cfg, st, nullptr, 2);
    Tensor c1 = model.parity_forward(tape, q, 2, false);
    Tensor c2 = model.parity_forward(tape, q, 2, false);
    REQUIRE(c1.shape() == Shape{3, cfg.l()});
    for (std::size_t i = 0; i < c1.size(); ++i) CHECK(c1[i] == c2[i]);
}

TEST_CASE("belief_forward: probability pairs sum to one") {
    GbafConfig cfg;
    cfg.belief_enabled = true;
    GbafModel model = GbafModel::init(cfg, 43);
    RandomStream rng(12);
    KnowledgeState st = make_state(cfg, 2, rng, 3, false);
    Tape tape;
    tape.set_recording(false);
    Tensor q = preprocess_belief(tape, cfg, st, 4);
    Tensor belief = model.belief_forward(tape, q);
    REQUIRE(belief.shape() == Shape{2, 17, 6}); // 2m = 6 for m=3
    for (std::size_t row = 0; row < 2 * 17; ++row)
        for (std::size_t j = 0; j < 3; ++j) {
            const double p0 = belief[row * 6 + 2 * j];
            const double p1 = belief[row * 6 + 2 * j + 1];
            CHECK(p0 > 0.0);
            CHECK(std::abs(p0 + p1 - 1.0) < 1e-10);
        }
}

TEST_CASE("belief_forward: zero map head gives uniform pairs") {
    GbafConfig cfg;
    cfg.belief_enabled = true;
    GbafModel model = GbafModel::init(cfg, 44);
    EncoderUnit& unit = model.belief_unit();
    std::fill(unit.map.weight.data().begin(), unit.map.weight.data().end(), 0.0);
    std::fill(unit.map.bias.data().begin(), unit.map.bias.data().end(), 0.0);
    RandomStream rng(13);
    KnowledgeState st = make_state(cfg, 1, rng, 2, false);
    Tape tape;
    tape.set_recording(false);
    Tensor belief = model.belief_forward(tape, preprocess_belief(tape, cfg, st, 3));
    for (double v : belief.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("decoder_forward: logits shape and argmax tie-breaking") {
    GbafConfig cfg;
    GbafModel model = GbafModel::init(cfg, 45);
    RandomStream rng(14);
    ReceiverState rx;
    for (std::size_t t = 0; t < cfg.T; ++t) rx.received.push_back(Tensor::uniform({2, 17}, -1, 1, rng));
    Tape tape;
    tape.set_recording(false);
    Tensor logits = model.decoder_forward(tape, preprocess_decoder(tape, cfg, rx));
    REQUIRE(logits.shape() == Shape{2, 17, 8}); // 2^3

    // zero-weight head -> all-equal logits -> argmax resolves to class 0
    EncoderUnit& unit = model.decoder_unit();
    std::fill(unit.map.weight.data().begin(), unit.map.weight.data().end(), 0.0);
    std::fill(unit.map.bias.data().begin(), unit.map.bias.data().end(), 0.0);
    Tensor logits0 = model.decoder_forward(tape, preprocess_decoder(tape, cfg, rx));
    for (std::size_t pick : argmax_blocks(logits0)) CHECK(pick == 0);
}

TEST_CASE("decoder argmax is invariant to adding a constant per block") {
    RandomStream rng(15);
    Tensor logits = Tensor::uniform({3, 4, 8}, -1, 1, rng);
    Tensor shifted = Tensor::zeros({3, 4, 8});
    for (std::size_t row = 0; row < 12; ++row)
        for (std::size_t j = 0; j < 8; ++j)
            shifted[row * 8 + j] = logits[row * 8 + j] + 7.5 * static_cast<double>(row);
    CHECK(argmax_blocks(logits) == argmax_blocks(shifted));
}

TEST_CASE("belief toggle controls the trainable network count") {
    GbafConfig cfg = tiny_cfg();
    GbafModel two = GbafModel::init(cfg, 46);
    bool saw_belief = false;
    for (const auto& np : two.named_parameters()) {
        CHECK((np.name.rfind("parity.", 0) == 0 || np.name.rfind("decoder.", 0) == 0));
        saw_belief = saw_belief || np.name.rfind("belief.", 0) == 0;
    }
    CHECK_FALSE(saw_belief);
    CHECK_FALSE(two.has_belief());

    cfg.belief_enabled = true;
    GbafModel three = GbafModel::init(cfg, 46);
    saw_belief = false;
    for (const auto& np : three.named_parameters())
        saw_belief = saw_belief || np.name.rfind("belief.", 0) == 0;
    CHECK(saw_belief);
    CHECK(three.has_belief());
}

TEST_CASE("full decoder network gradient passes the finite-difference oracle") {
    GbafConfig cfg = tiny_cfg();
    GbafModel model = GbafModel::init(cfg, 47);
    RandomStream rng(16);
    Tensor q = Tensor::uniform({1, cfg.l(), cfg.T}, -1, 1, rng, true);
    Tensor w = Tensor::uniform({1, cfg.l(), cfg.alphabet()}, -1, 1, rng);
    std::vector<Tensor> params{q};
    for (auto& np : model.named_parameters())
        if (np.name.rfind("decoder.", 0) == 0) params.push_back(np.tensor);
    RandomStream coords(17);
    auto f = [&](Tape& t) { return sum(t, mul(t, model.decoder_forward(t, q), w)); };
    CHECK(grad_check(f, params, 1e-5, 4, coords) < 1e-4);
}
