#include <doctest.h>

#include <cmath>

#include "cilia/convlstm.hpp"
#include "gradcheck.hpp"

using namespace cilia;
using convlstm::CellConfig;
using convlstm::CellState;
using convlstm::ConvLstmCell;

namespace {

CellConfig small_cell(int hidden = 3, int H = 4, int W = 5) {
    CellConfig c;
    c.hidden = hidden;
    c.height = H;
    c.width = W;
    return c;
}

ad::Tensor random(ad::Shape s, std::uint64_t seed, double bound = 1.0, bool rg = false) {
    Rng rng(seed);
    return ad::Tensor::uniform(std::move(s), bound, rng, rg);
}

CellState state_of(const ConvLstmCell& cell, std::size_t n, double c0, double h0 = 0.0) {
    const auto& k = cell.config();
    const ad::Shape s{n, std::size_t(k.hidden), std::size_t(k.height), std::size_t(k.width)};
    return {ad::Tensor::full(s, h0), ad::Tensor::full(s, c0)};
}

double max_abs_diff(const ad::Tensor& t, double v) { return (t.value().array() - v).abs().maxCoeff(); }

}  // namespace

TEST_CASE("zero-parameter cell from zero state stays at zero") {
    const ConvLstmCell cell(small_cell());
    const auto x = random({2, 1, 4, 5}, 1, 3.0);
    const auto s = cell.step(x, cell.initial_state(2));
    CHECK(max_abs_diff(s.c, 0.0) == 0.0);
    CHECK(max_abs_diff(s.h, 0.0) == 0.0);
}

TEST_CASE("zero-parameter cell with unit cell state") {
    const ConvLstmCell cell(small_cell());
    const auto s = cell.step(random({2, 1, 4, 5}, 2), state_of(cell, 2, 1.0));
    // gates are all 0.5 and the candidate tanh(0) = 0
    CHECK(max_abs_diff(s.c, 0.5) < 1e-12);
    CHECK(max_abs_diff(s.h, 0.5 * std::tanh(0.5)) < 1e-12);
    CHECK(std::abs(s.h.at(0) - 0.231059) < 1e-6);
}

TEST_CASE("sigmoid candidate switch") {
    auto cfg = small_cell();
    cfg.candidate = convlstm::parse_activation("sigmoid");
    const ConvLstmCell cell(cfg);
    const auto s = cell.step(random({1, 1, 4, 5}, 3), cell.initial_state(1));
    CHECK(max_abs_diff(s.c, 0.25) < 1e-15);
    CHECK_THROWS_AS(convlstm::parse_activation("relu"), ConfigError);
}

TEST_CASE("saturated forget and input gates remember the cell state") {
    ConvLstmCell cell(small_cell());
    cell.b_f.mutable_value().setConstant(20.0);
    cell.b_i.mutable_value().setConstant(-20.0);
    auto s = state_of(cell, 2, 0.0);
    const auto c0 = random(s.c.shape(), 4);
    s.c = c0;
    const int steps = 4;
    for (int t = 0; t < steps; ++t) s = cell.step(random({2, 1, 4, 5}, 10 + std::uint64_t(t)), s);
    // per-step leak (1 − σ(20))·|c| ≈ 2.1e-9
    CHECK((s.c.value() - c0.value()).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("saturated-closed forget gate decays to the candidate term") {
    ConvLstmCell cell(small_cell());
    cell.b_f.mutable_value().setConstant(-20.0);
    cell.b_i.mutable_value().setConstant(20.0);
    cell.b_c.mutable_value().setConstant(0.3);
    auto s = state_of(cell, 1, 0.0);
    s.c = random(s.c.shape(), 5);
    for (int t = 0; t < 3; ++t) {
        s = cell.step(random({1, 1, 4, 5}, 20 + std::uint64_t(t)), s);
        CHECK(max_abs_diff(s.c, std::tanh(0.3)) < 1e-8);
    }
}

TEST_CASE("gates stay inside (0, 1) for finite inputs") {
    Rng rng(6);
    const ConvLstmCell cell(small_cell(4, 6, 6), rng);
    auto fused = cell.fuse();
    CellState s = cell.initial_state(3);
    for (int t = 0; t < 6; ++t) {
        ConvLstmCell::Gates g;
        s = cell.step(random({3, 1, 6, 6}, 30 + std::uint64_t(t), 5.0), s, fused, &g);
        for (const auto* gate : {&g.f, &g.i, &g.o}) {
            CHECK(gate->value().minCoeff() > 0.0);
            CHECK(gate->value().maxCoeff() < 1.0);
        }
        CHECK(s.c.value().allFinite());
    }
}

TEST_CASE("shape mismatches are rejected") {
    const ConvLstmCell cell(small_cell());
    CHECK_THROWS_AS(cell.step(random({2, 1, 4, 4}, 1), cell.initial_state(2)), ShapeError);
    CHECK_THROWS_AS(cell.step(random({2, 2, 4, 5}, 1), cell.initial_state(2)), ShapeError);
    CHECK_THROWS_AS(cell.step(random({1, 1, 4, 5}, 1), cell.initial_state(2)), ShapeError);
    CellConfig even = small_cell();
    even.kernel = 2;
    CHECK_THROWS_AS(ConvLstmCell{even}, ConfigError);
}

TEST_CASE("gradient check through five unrolled steps on ten seeds") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(100 + seed);
        auto cfg = small_cell(2, 3, 4);
        cfg.candidate = seed % 2 ? ad::Pointwise::sigmoid : ad::Pointwise::tanh;
        ConvLstmCell cell(cfg, rng);
        for (auto& v : cell.b_i.mutable_value()) v = rng.uniform(-1, 1);
        auto params = cell.named_parameters();
        std::vector<ad::Tensor> inputs;
        for (auto& e : params) inputs.push_back(e.tensor);
        inputs.push_back(random({2, 2, 3, 4}, 200 + seed, 1.0, true));
        const auto xs = random({5, 2, 1, 3, 4}, 300 + seed);
        const auto loss = [&](const std::vector<ad::Tensor>& in) {
            CellState s = cell.initial_state(2);
            s.c = in.back();  // c0 is differentiated as well
            for (std::size_t t = 0; t < 5; ++t) {
                const auto xt = ad::slice(xs, 0, t, 1).reshape({2, 1, 3, 4});
                s = cell.step(xt, s);
            }
            return testing::project(s.h, seed) + testing::project(s.c, seed + 1);
        };
        const double err = testing::gradcheck(loss, inputs);
        INFO("seed " << seed << " relative error " << err);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("classifier head") {
    convlstm::ClassifierConfig cfg;
    cfg.cell = small_cell(3, 11, 11);
    cfg.frames = 6;
    const auto zero = convlstm::ConvLstmClassifier::zeros(cfg);
    patches::PatchSequence patch;
    patch.values = FrameStack(6, 11, 11);
    Rng rng(8);
    for (auto& v : patch.values.data()) v = rng.normal();
    CHECK(convlstm::classify_patch(zero, patch, {}) == 0.5);

    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto m = convlstm::ConvLstmClassifier::build(cfg, seed);
        ad::NoGradGuard ng;
        const FrameStack* one[] = {&patch.values};
        const auto p = m.forward(convlstm::make_batch(one, {0.1, 2.0}));
        CHECK(std::abs(p.at(0) + p.at(1) - 1.0) < 1e-9);
        CHECK(p.at(1) >= 0.0);
        CHECK(p.at(1) <= 1.0);
    }

    patches::PatchSequence wrong;
    wrong.values = FrameStack(5, 11, 11);
    CHECK_THROWS_AS(convlstm::classify_patch(zero, wrong, {}), ShapeError);
}

TEST_CASE("classifier checkpoint round trip and parallel inference") {
    convlstm::ClassifierConfig cfg;
    cfg.cell = small_cell(2, 11, 11);
    cfg.cell.candidate = ad::Pointwise::sigmoid;
    cfg.frames = 4;
    const auto m = convlstm::ConvLstmClassifier::build(cfg, 3);
    const convlstm::Standardizer z{0.25, 1.0 / 3.0};
    convlstm::Standardizer z2;
    const auto back = convlstm::ConvLstmClassifier::from_checkpoint(m.to_checkpoint(z), &z2);
    CHECK(z2.mean == z.mean);
    CHECK(z2.stddev == z.stddev);
    CHECK(back.config().cell.candidate == ad::Pointwise::sigmoid);

    std::vector<FrameStack> stacks;
    Rng rng(9);
    for (int i = 0; i < 7; ++i) {
        FrameStack s(4, 11, 11);
        for (auto& v : s.data()) v = rng.normal();
        stacks.push_back(s);
    }
    const auto serial = convlstm::classify_stacks(m, stacks, z, 1);
    CHECK(convlstm::classify_stacks(back, stacks, z, 3) == serial);
}

TEST_CASE("standardizer fit") {
    std::vector<FrameStack> s{FrameStack(1, 1, 2, 1.0), FrameStack(1, 1, 2, 3.0)};
    const auto z = convlstm::Standardizer::fit(s);
    CHECK(z.mean == doctest::Approx(2.0));
    CHECK(z.stddev == doctest::Approx(1.0));
    const auto flat = convlstm::Standardizer::fit(std::vector<FrameStack>{FrameStack(2, 2, 2, 5.0)});
    CHECK(flat.stddev == 1.0);
}
