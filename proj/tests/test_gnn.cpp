// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dmimo/gnn.hpp"
#include "dmimo/precoders.hpp"

using namespace dmimo;
using numkit::CMatrix;
using numkit::cplx;
using numkit::RngStream;

namespace {

CMatrix random_channel(std::size_t M, std::size_t K, RngStream& rng) {
    CMatrix H(M, K);
    for (auto& z : H.data())
        z = rng.complex_normal();
    return H;
}

// Smallest |pre-activation| across layers for the nominal point. The central
// difference oracle is valid only away from the LeakyReLU kinks, so seeds are
// screened with this margin before checking gradients.
double min_abs_preactivation(const gnn::GnnModel& model, const std::vector<const CMatrix*>& batch) {
    double mn = 1e300;
    for (const CMatrix* H : batch) {
        gnn::ForwardCache c;
        gnn::forward(model, *H, 1.0, &c);
        for (const auto& Z : c.Z)
            for (double z : Z)
                mn = std::min(mn, std::abs(z));
    }
    return mn;
}

struct FdResult {
    double max_rel_err = 0.0;
};

// Central finite differences over every parameter.
FdResult finite_difference_check(const gnn::GnnModel& model, const std::vector<CMatrix>& batch,
                                 double P, double sigma2, double h = 1e-5) {
    std::vector<const CMatrix*> view;
    for (const auto& H : batch)
        view.push_back(&H);

    const gnn::LossGrad lg = gnn::loss_and_grad(model, view, P, sigma2);
    std::vector<double> flat;
    gnn::flatten(model, flat);

    double gmax = 0.0;
    for (double g : lg.grad)
        gmax = std::max(gmax, std::abs(g));
    // Components far below the dominant gradient scale cannot be resolved by
    // the oracle (cancellation noise ~1e-10 absolute); the floor keeps the
    // check meaningful without amplifying that noise.
    const double floor = std::max(1e-6, 1e-3 * gmax);

    FdResult res;
    gnn::GnnModel probe = model;
    for (std::size_t i = 0; i < flat.size(); ++i) {
        const double orig = flat[i];
        flat[i] = orig + h;
        gnn::unflatten(probe, flat);
        const double lp = gnn::loss_and_grad(probe, view, P, sigma2).loss;
        flat[i] = orig - h;
        gnn::unflatten(probe, flat);
        const double lm = gnn::loss_and_grad(probe, view, P, sigma2).loss;
        flat[i] = orig;
        const double fd = (lp - lm) / (2.0 * h);
        const double rel =
            std::abs(lg.grad[i] - fd) / std::max({std::abs(lg.grad[i]), std::abs(fd), floor});
        res.max_rel_err = std::max(res.max_rel_err, rel);
    }
    gnn::unflatten(probe, flat);
    return res;
}

gnn::GnnModel small_model(std::uint64_t seed, std::size_t layers = 8, std::size_t hidden = 8) {
    RngStream rng(seed);
    return gnn::GnnModel::init(layers, hidden, 0.01, rng);
}

channel::ChannelDataset toy_dataset(std::size_t n_train, std::size_t n_val, std::size_t M,
                                    std::size_t K, std::uint64_t seed) {
    channel::ChannelDataset ds;
    ds.n_aps = M;
    ds.n_ues = K;
    RngStream rng(seed);
    for (std::size_t i = 0; i < n_train + n_val; ++i) {
        channel::Sample s;
        s.id = i;
        s.ch.H = random_channel(M, K, rng);
        s.split = i < n_train ? channel::Split::Train : channel::Split::Val;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace

TEST_CASE("forward output is power feasible", "[gnn]") {
    RngStream rng(1);
    auto model = small_model(11, 4, 16);
    for (int t = 0; t < 10; ++t) {
        CMatrix H = random_channel(8, 2, rng);
        auto W = gnn::forward(model, H, 2.5);
        REQUIRE(W.W.rows() == 8);
        REQUIRE(W.W.cols() == 2);
        CHECK(numkit::fro_norm2(W.W) == Catch::Approx(2.5).margin(1e-10));
    }
}

TEST_CASE("forward handles empty aggregation sets", "[gnn]") {
    RngStream rng(2);
    auto model = small_model(12, 3, 8);
    CMatrix h1 = random_channel(1, 1, rng);
    CHECK_NOTHROW(gnn::forward(model, h1, 1.0));
    CMatrix hM = random_channel(5, 1, rng);
    CHECK_NOTHROW(gnn::forward(model, hM, 1.0));
    CMatrix hK = random_channel(1, 3, rng);
    CHECK_NOTHROW(gnn::forward(model, hK, 1.0));

    CMatrix bad(2, 1, {cplx{std::nan(""), 0}, cplx{0, 0}});
    CHECK_THROWS_AS(gnn::forward(model, bad, 1.0), Error);
}

TEST_CASE("permutation equivariance is bit-exact", "[gnn]") {
    RngStream rng(3);
    auto model = small_model(13, 8, 16);
    const std::size_t M = 6, K = 3;
    CMatrix H = random_channel(M, K, rng);
    const CMatrix W = gnn::forward(model, H, 1.0).W;

    SECTION("UE column permutation") {
        const std::vector<std::size_t> perm{2, 0, 1};
        CMatrix Hp(M, K);
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k)
                Hp(m, k) = H(m, perm[k]);
        const CMatrix Wp = gnn::forward(model, Hp, 1.0).W;
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k)
                CHECK(Wp(m, k) == W(m, perm[k]));
    }

    SECTION("AP row permutation") {
        const std::vector<std::size_t> perm{4, 2, 5, 0, 3, 1};
        CMatrix Hp(M, K);
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k)
                Hp(m, k) = H(perm[m], k);
        const CMatrix Wp = gnn::forward(model, Hp, 1.0).W;
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k)
                CHECK(Wp(m, k) == W(perm[m], k));
    }
}

TEST_CASE("model runs at sizes it was not built for", "[gnn]") {
    RngStream rng(4);
    auto model = small_model(14, 8, 16);
    for (auto [M, K] : {std::pair<std::size_t, std::size_t>{2, 1}, {4, 2}, {12, 5}}) {
        CMatrix H = random_channel(M, K, rng);
        auto W = gnn::forward(model, H, 1.0);
        CHECK(W.W.rows() == M);
        CHECK(W.W.cols() == K);
        CHECK(numkit::fro_norm2(W.W) == Catch::Approx(1.0).margin(1e-10));
    }
}

TEST_CASE("loss equals the negated mean sum rate", "[gnn]") {
    RngStream rng(5);
    auto model = small_model(15, 4, 8);
    std::vector<CMatrix> batch;
    for (int i = 0; i < 6; ++i)
        batch.push_back(random_channel(4, 2, rng));
    std::vector<const CMatrix*> view;
    for (const auto& H : batch)
        view.push_back(&H);
    const double sigma2 = 0.3;
    const auto lg = gnn::loss_and_grad(model, view, 1.0, sigma2);
    double mean_rate = 0.0;
    for (const auto& H : batch)
        mean_rate +=
            precoders::sum_rate(H, gnn::forward(model, H, 1.0), precoders::NoiseModel{sigma2});
    mean_rate /= batch.size();
    CHECK(lg.loss == Catch::Approx(-mean_rate).epsilon(1e-12));
}

TEST_CASE("gradients match central finite differences", "[gnn]") {
    // Oracle validity requires staying away from the activation kinks; seeds
    // are screened deterministically for a safe margin.
    const double h = 1e-5;
    int checked = 0;
    for (auto [M, K] : {std::pair<std::size_t, std::size_t>{2, 1}, {4, 2}, {6, 3}}) {
        std::uint64_t seed = 100 * M + K;
        int found = 0;
        while (found < 2) {
            auto model = small_model(seed, 8, 8);
            RngStream rng(seed * 7 + 1);
            std::vector<CMatrix> batch;
            for (int b = 0; b < 2; ++b)
                batch.push_back(random_channel(M, K, rng));
            std::vector<const CMatrix*> view;
            for (const auto& Hb : batch)
                view.push_back(&Hb);
            ++seed;
            if (min_abs_preactivation(model, view) < 20.0 * h)
                continue;
            ++found;
            const auto res = finite_difference_check(model, batch, 1.0, 0.5, h);
            INFO("M=" << M << " K=" << K << " seed=" << seed - 1);
            CHECK(res.max_rel_err <= 1e-4);
            ++checked;
        }
    }
    CHECK(checked == 6);
}

TEST_CASE("directional derivative matches the analytic gradient tightly", "[gnn]") {
    auto model = small_model(21, 8, 8);
    RngStream rng(22);
    std::vector<CMatrix> batch{random_channel(4, 2, rng), random_channel(4, 2, rng)};
    std::vector<const CMatrix*> view{&batch[0], &batch[1]};
    const auto lg = gnn::loss_and_grad(model, view, 1.0, 0.5);

    std::vector<double> flat;
    gnn::flatten(model, flat);
    std::vector<double> dir(flat.size());
    double dn = 0.0;
    for (auto& d : dir) {
        d = rng.normal();
        dn += d * d;
    }
    dn = std::sqrt(dn);
    for (auto& d : dir)
        d /= dn;

    const double h = 1e-6;
    gnn::GnnModel probe = model;
    std::vector<double> fp = flat, fm = flat;
    for (std::size_t i = 0; i < flat.size(); ++i) {
        fp[i] += h * dir[i];
        fm[i] -= h * dir[i];
    }
    gnn::unflatten(probe, fp);
    const double lp = gnn::loss_and_grad(probe, view, 1.0, 0.5).loss;
    gnn::unflatten(probe, fm);
    const double lm = gnn::loss_and_grad(probe, view, 1.0, 0.5).loss;
    double analytic = 0.0;
    for (std::size_t i = 0; i < dir.size(); ++i)
        analytic += dir[i] * lg.grad[i];
    const double fd = (lp - lm) / (2.0 * h);
    CHECK(analytic == Catch::Approx(fd).epsilon(1e-6));
}

TEST_CASE("duplicating the batch leaves loss and gradients unchanged", "[gnn]") {
    auto model = small_model(31, 4, 8);
    RngStream rng(32);
    std::vector<CMatrix> batch{random_channel(4, 2, rng), random_channel(4, 2, rng)};
    std::vector<const CMatrix*> once{&batch[0], &batch[1]};
    std::vector<const CMatrix*> twice{&batch[0], &batch[1], &batch[0], &batch[1]};
    const auto a = gnn::loss_and_grad(model, once, 1.0, 0.2);
    const auto b = gnn::loss_and_grad(model, twice, 1.0, 0.2);
    CHECK(std::abs(a.loss - b.loss) <= 1e-12 * std::max(1.0, std::abs(a.loss)));
    for (std::size_t i = 0; i < a.grad.size(); ++i)
        CHECK(std::abs(a.grad[i] - b.grad[i]) <=
              1e-12 * std::max(1.0, std::abs(a.grad[i])));
}

TEST_CASE("MRT is the K=1 optimum the loss cannot beat", "[gnn]") {
    RngStream rng(6);
    auto model = small_model(33, 4, 8);
    for (int t = 0; t < 20; ++t) {
        CMatrix H = random_channel(6, 1, rng);
        const double r_mrt =
            precoders::sum_rate(H, precoders::mrt(H, 1.0), precoders::NoiseModel{0.1});
        const double r_gnn =
            precoders::sum_rate(H, gnn::forward(model, H, 1.0), precoders::NoiseModel{0.1});
        CHECK(-r_mrt <= -r_gnn + 1e-12);
    }
}

TEST_CASE("training is deterministic and improves the objective", "[gnn]") {
    auto ds = toy_dataset(96, 32, 4, 2, 41);
    gnn::TrainConfig tc;
    tc.epochs = 8;
    tc.batch_size = 16;
    tc.learning_rate = 3e-3;
    tc.seed = 5;
    tc.power = 1.0;
    tc.sigma2 = 0.5;

    auto m0 = small_model(42, 3, 8);
    auto r1 = gnn::train(m0, ds, tc);
    auto r2 = gnn::train(m0, ds, tc);
    CHECK(gnn::identical(r1.model, r2.model));
    REQUIRE(r1.log.size() == tc.epochs);
    CHECK(r1.best_val_sumrate >= r1.initial_val_sumrate);

    // Empty split errors.
    channel::ChannelDataset no_val = ds;
    for (auto& s : no_val.samples)
        s.split = channel::Split::Train;
    CHECK_THROWS_AS(gnn::train(m0, no_val, tc), Error);
}

TEST_CASE("fine_tune keeps frozen blocks bit-identical", "[gnn]") {
    auto ds = toy_dataset(64, 16, 4, 2, 51);
    auto m0 = small_model(52, 4, 8);

    gnn::TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 16;
    tc.learning_rate = 1e-3;
    tc.seed = 6;
    tc.sigma2 = 0.5;
    tc.freeze_mask = gnn::default_freeze_mask(4, 2); // freeze layers 0,1

    auto res = gnn::fine_tune(m0, ds, tc);
    for (std::size_t l = 0; l < 2; ++l) {
        CHECK(res.model.layers[l].W_self == m0.layers[l].W_self);
        CHECK(res.model.layers[l].W_ap_agg == m0.layers[l].W_ap_agg);
        CHECK(res.model.layers[l].W_ue_agg == m0.layers[l].W_ue_agg);
        CHECK(res.model.layers[l].b == m0.layers[l].b);
    }
    // Unfrozen layers moved.
    CHECK(res.model.layers[2].W_self != m0.layers[2].W_self);
    CHECK(res.model.input_scale == m0.input_scale);

    SECTION("all-frozen mask returns the model unchanged with a warning") {
        gnn::TrainConfig frozen = tc;
        frozen.freeze_mask.assign(5, true);
        auto r = gnn::fine_tune(m0, ds, frozen);
        CHECK(r.all_frozen_warning);
        CHECK(gnn::identical(r.model, m0));
    }

    SECTION("missing freeze mask is a config error") {
        gnn::TrainConfig nomask = tc;
        nomask.freeze_mask.clear();
        CHECK_THROWS_AS(gnn::fine_tune(m0, ds, nomask), ConfigError);
    }
}

TEST_CASE("save/load round-trips the model bit-exactly", "[gnn]") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "dmimo_test_model.json").string();
    auto model = small_model(61, 5, 12);
    model.input_scale = 217.0386521;
    gnn::save_model(model, path);
    auto back = gnn::load_model(path);
    CHECK(gnn::identical(model, back));

    RngStream rng(62);
    for (int t = 0; t < 10; ++t) {
        CMatrix H = random_channel(5, 2, rng);
        const CMatrix a = gnn::forward(model, H, 1.0).W;
        const CMatrix b = gnn::forward(back, H, 1.0).W;
        CHECK(a.data() == b.data());
    }
    std::filesystem::remove(path);
}

TEST_CASE("load_model rejects corrupted files", "[gnn]") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "dmimo_test_badmodel.json").string();

    SECTION("corrupted header") {
        std::ofstream f(path);
        f << "{\"format\":\"dmimo-gnn\",\"version\":1,\"n_layers\":2";
        f.close();
        CHECK_THROWS_AS(gnn::load_model(path), ParseError);
    }
    SECTION("wrong format tag") {
        std::ofstream f(path);
        f << "{\"format\":\"other\",\"version\":1}";
        f.close();
        CHECK_THROWS_AS(gnn::load_model(path), ParseError);
    }
    SECTION("version mismatch") {
        auto model = small_model(63, 2, 4);
        gnn::save_model(model, path);
        std::ifstream in(path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        const auto at = text.find("\"version\":1");
        text.replace(at, 11, "\"version\":9");
        std::ofstream out(path);
        out << text;
        out.close();
        CHECK_THROWS_AS(gnn::load_model(path), ParseError);
    }
    SECTION("dimension inconsistency") {
        auto model = small_model(64, 2, 4);
        gnn::save_model(model, path);
        std::ifstream in(path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        const auto at = text.find("\"hidden_dim\":4");
        text.replace(at, 14, "\"hidden_dim\":5");
        std::ofstream out(path);
        out << text;
        out.close();
        CHECK_THROWS_AS(gnn::load_model(path), ParseError);
    }
    std::filesystem::remove(path);
}
