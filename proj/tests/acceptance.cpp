// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "cilia/convlstm.hpp"
#include "cilia/metrics.hpp"
#include "cilia/optical_flow.hpp"
#include "cilia/patch_sampler.hpp"
#include "cilia/segnet.hpp"
#include "cilia/synthetic.hpp"
#include "cilia/training.hpp"
#include "gradcheck.hpp"

using namespace cilia;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass;
    std::string detail;
};

int failures = 0;

void criterion(int id, const char* name, const std::function<Outcome()>& body) {
    const auto t0 = Clock::now();
    Outcome r{false, ""};
    try {
        r = body();
    } catch (const std::exception& e) {
        r = {false, std::string("exception: ") + e.what()};
    }
    if (!r.pass) ++failures;
    std::printf("%s  %d. %-28s %s (%.1f s)\n", r.pass ? "PASS" : "FAIL", id, name, r.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

Tensor leaf(ad::Shape s, Rng& rng, double bound = 1.0) { return Tensor::uniform(std::move(s), bound, rng, true); }

// ---- 1 ---------------------------------------------------------------------

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    double worst = 0;
    int checks = 0;
    const auto record = [&](double e) {
        worst = std::max(worst, e);
        ++checks;
    };
    using testing::gradcheck;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        const auto p = [seed](const Tensor& t) { return testing::project(t, seed); };
        record(gradcheck([&](auto& in) { return p(ad::add(in[0], in[1])); }, {leaf({2, 3}, rng), leaf({2, 3}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::sub(in[0], in[1])); }, {leaf({2, 3}, rng), leaf({2, 3}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::mul(in[0], in[1])); }, {leaf({2, 3}, rng), leaf({2, 3}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::mul(in[0], in[1])); }, {leaf({2, 3}, rng), leaf({}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::add_scalar(in[0], 0.3)); }, {leaf({4}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::mul_scalar(in[0], -1.7)); }, {leaf({4}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::sigmoid(in[0])); }, {leaf({3, 4}, rng, 3.0)}));
        record(gradcheck([&](auto& in) { return p(ad::tanh(in[0])); }, {leaf({3, 4}, rng, 3.0)}));
        record(gradcheck([&](auto& in) { return p(ad::relu(in[0])); }, {leaf({3, 4}, rng, 3.0)}));
        record(gradcheck([&](auto& in) { return ad::mean(ad::mul(in[0], in[0])); }, {leaf({5}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::mul_shared(in[0], in[1])); }, {leaf({3, 2, 2}, rng), leaf({2, 2}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::add_channel_bias(in[0], in[1])); },
                         {leaf({2, 3, 2, 2}, rng), leaf({3}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::conv2d(in[0], in[1], 1, 1)); },
                         {leaf({2, 2, 5, 5}, rng), leaf({3, 2, 3, 3}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::conv2d(in[0], in[1], 2, 0)); },
                         {leaf({1, 3, 6, 7}, rng), leaf({2, 3, 2, 3}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::softmax(in[0], 1)); }, {leaf({2, 4, 3}, rng, 2.0)}));
        std::vector<int> labels;
        for (int i = 0; i < 18; ++i) labels.push_back(int(rng.below(4)));
        const std::vector<double> w{0.5, 1.0, 2.0, 3.0};
        record(gradcheck([&](auto& in) { return ad::cross_entropy(ad::softmax(in[0], 1), labels, w); },
                         {leaf({2, 4, 3, 3}, rng, 2.0)}));
        record(gradcheck([&](auto& in) { return p(ad::global_avg_pool(in[0])); }, {leaf({2, 3, 3, 2}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::dense(in[0], in[1], in[2])); },
                         {leaf({3, 4}, rng), leaf({4, 2}, rng), leaf({2}, rng)}));
        record(gradcheck(
            [&](auto& in) {
                Rng drop(seed);
                return p(ad::dropout(in[0], 0.3, drop, true));
            },
            {leaf({4, 5}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::max_pool2d(in[0], 2)); }, {leaf({2, 2, 4, 6}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::nearest_upsample2d(in[0], 2)); }, {leaf({1, 2, 3, 2}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::concat({in[0], in[1]}, 1)); },
                         {leaf({2, 2, 3}, rng), leaf({2, 1, 3}, rng)}));
        record(gradcheck([&](auto& in) { return p(ad::slice(in[0], 1, 1, 2)); }, {leaf({2, 4, 3}, rng)}));
        record(gradcheck([&](auto& in) { return p(in[0].reshape({6})); }, {leaf({2, 3}, rng)}));

        convlstm::CellConfig cc;
        cc.hidden = 2;
        cc.height = 3;
        cc.width = 4;
        cc.candidate = seed % 2 ? ad::Pointwise::sigmoid : ad::Pointwise::tanh;
        convlstm::ConvLstmCell cell(cc, rng);
        std::vector<Tensor> inputs;
        for (auto& e : cell.named_parameters()) inputs.push_back(e.tensor);
        inputs.push_back(leaf({2, 2, 3, 4}, rng));
        const auto xs = Tensor::uniform({5, 2, 1, 3, 4}, 1.0, rng);
        record(gradcheck(
            [&](const std::vector<Tensor>& in) {
                convlstm::CellState s = cell.initial_state(2);
                s.c = in.back();
                for (std::size_t t = 0; t < 5; ++t) s = cell.step(ad::slice(xs, 0, t, 1).reshape({2, 1, 3, 4}), s);
                return testing::project(s.h, seed) + testing::project(s.c, seed + 1);
            },
            inputs));
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && secs < 120, fmt("%.0f checks, worst relative error %.2e (< 1e-4), %.1f s (< 120)", checks, worst, secs)};
}

// ---- 2 ---------------------------------------------------------------------

Outcome convlstm_closed_forms() {
    convlstm::CellConfig cc;
    cc.hidden = 3;
    cc.height = 4;
    cc.width = 5;
    Rng rng(1);
    const auto x = Tensor::uniform({2, 1, 4, 5}, 2.0, rng);
    const ad::Shape s{2, 3, 4, 5};
    const convlstm::ConvLstmCell zero(cc);
    const auto a = zero.step(x, zero.initial_state(2));
    const double e0 = std::max(a.c.value().cwiseAbs().maxCoeff(), a.h.value().cwiseAbs().maxCoeff());
    const auto b = zero.step(x, {Tensor::zeros(s), Tensor::full(s, 1.0)});
    const double e1 = (b.h.value().array() - 0.5 * std::tanh(0.5)).abs().maxCoeff();

    convlstm::ConvLstmCell remember(cc);
    remember.b_f.mutable_value().setConstant(20.0);
    remember.b_i.mutable_value().setConstant(-20.0);
    const auto c0 = Tensor::uniform(s, 1.0, rng);
    convlstm::CellState st{Tensor::zeros(s), c0};
    for (int t = 0; t < 4; ++t) st = remember.step(Tensor::uniform({2, 1, 4, 5}, 1.0, rng), st);
    const double e2 = (st.c.value() - c0.value()).cwiseAbs().maxCoeff();

    convlstm::ConvLstmCell forget(cc);
    forget.b_f.mutable_value().setConstant(-20.0);
    forget.b_i.mutable_value().setConstant(20.0);
    forget.b_c.mutable_value().setConstant(0.3);
    st = {Tensor::zeros(s), Tensor::uniform(s, 1.0, rng)};
    st = forget.step(Tensor::uniform({2, 1, 4, 5}, 1.0, rng), st);
    const double e3 = (st.c.value().array() - std::tanh(0.3)).abs().maxCoeff();

    const bool ok = e0 == 0.0 && e1 < 1e-12 && e2 < 1e-8 && e3 < 1e-8;
    return {ok, fmt("zero %.1e, h1 err %.1e (< 1e-12), remember %.1e, forget %.1e (< 1e-8)", e0, e1, e2, e3)};
}

// ---- 3, 4 --------------------------------------------------------------------

ImageD linear(double a, double bx, double cy, int n = 24) {
    ImageD f(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) f(y, x) = a + bx * x + cy * y;
    return f;
}

double interior_err(const ImageD& f, double target) {
    return (f.block(1, 1, f.rows() - 2, f.cols() - 2) - target).abs().maxCoeff();
}

Outcome analytic_invariants() {
    const auto rot = flow::invariants(flow::FlowField<double>{linear(0, 0, -0.5), linear(0, 0.5, 0)});
    const auto rad = flow::invariants(flow::FlowField<double>{linear(0, 1, 0), linear(0, 0, 1)});
    const double e = std::max({interior_err(rot.rotation, 0.5), interior_err(rot.divergence, 0.0),
                               interior_err(rot.deformation, 0.0)});
    const double ed = interior_err(rad.divergence, 2.0);
    return {e < 1e-10 && ed < 1e-10, fmt("rigid rotation max err %.1e, radial divergence err %.1e (< 1e-10)", e, ed)};
}

double median(const ImageD& f) {
    std::vector<double> v(f.data(), f.data() + f.size());
    std::nth_element(v.begin(), v.begin() + long(v.size() / 2), v.end());
    return v[v.size() / 2];
}

Outcome flow_translation() {
    const auto frame = [](double dx) {
        ImageD f(48, 48);
        for (int y = 0; y < 48; ++y)
            for (int x = 0; x < 48; ++x) {
                const double xs = x - dx;
                f(y, x) = 0.5 + 0.2 * std::sin(2 * M_PI * xs / 16.0) * std::cos(2 * M_PI * y / 13.0) +
                          0.1 * std::sin(2 * M_PI * (xs + y) / 23.0);
            }
        return f;
    };
    const auto f = flow::horn_schunck<double>(frame(0), frame(1), 0.1, 1000);
    const double mu = median(f.u), mv = median(f.v);
    return {mu >= 0.7 && mu <= 1.3 && std::abs(mv) < 0.1, fmt("median u %.3f in [0.7, 1.3], |median v| %.3f < 0.1", mu, std::abs(mv))};
}

// ---- 5 -----------------------------------------------------------------------

Outcome distance_transform() {
    Rng rng(5);
    int cases = 0, bad = 0;
    for (; cases < 1500; ++cases) {
        const long H = 1 + long(rng.below(12)), W = 1 + long(rng.below(12));
        const double p = rng.uniform(0.2, 0.95);
        Mask m(H, W);
        for (auto& v : m.reshaped()) v = rng.uniform() < p ? 1 : 0;
        const auto fast = patches::distance_map(m);
        for (long r = 0; r < H; ++r)
            for (long c = 0; c < W; ++c) {
                double best = m(r, c) ? std::numeric_limits<double>::infinity() : 0.0;
                if (m(r, c))
                    for (long y = -1; y <= H; ++y)
                        for (long x = -1; x <= W; ++x)
                            if (y < 0 || y >= H || x < 0 || x >= W || !m(y, x))
                                best = std::min(best, std::hypot(double(y - r), double(x - c)));
                if (std::abs(fast(r, c) - best) > 1e-12) ++bad;
            }
    }
    return {bad == 0 && cases >= 1000, fmt("%.0f random masks up to 12x12, %.0f mismatching pixels", cases, bad)};
}

// ---- 6 -----------------------------------------------------------------------

Outcome metric_arithmetic() {
    const auto r = metrics::classification_report({.tn = 27, .fp = 8, .fn = 1, .tp = 39});
    const auto r2 = [](double x) { return std::round(x * 100) / 100; };
    const bool ok = r2(*r.accuracy) == 0.88 && r2(*r.recall) == 0.98 && r2(*r.precision) == 0.83 && r2(*r.f1) == 0.90 &&
                    std::abs(*r.f1 - 0.8966) <= 1e-4;
    return {ok, fmt("accuracy %.4f recall %.4f precision %.4f f1 %.4f", *r.accuracy, *r.recall, *r.precision, *r.f1)};
}

// ---- 7 -----------------------------------------------------------------------

Outcome segmentation_overfit() {
    const auto t0 = Clock::now();
    Rng rng(7);
    std::vector<train::SegSample> data;
    for (int i = 0; i < 8; ++i) data.push_back(synth::seg_image(32, 32, rng));
    train::SegTrainConfig cfg;
    cfg.epochs = 500;
    cfg.batch_size = 4;
    cfg.adam.lr = 0.01;
    cfg.stop_at_accuracy = 0.95;
    cfg.seed = 7;
    auto net = segnet::SegNet::build({}, 7);
    const auto res = train::train_segnet(net, data, cfg);
    const double acc = res.log[std::size_t(res.best_epoch - 1)].pixel_accuracy;
    const double secs = seconds_since(t0);
    const double params = double(segnet::SegNetConfig::fc_densenet109().parameter_count());
    const auto big = segnet::SegNet::build(segnet::SegNetConfig::fc_densenet109(), 0);
    const bool built = double(big.parameter_count()) == params && big.layer_count() == 109;
    const double rel = std::abs(params - 9.4e6) / 9.4e6;
    const bool ok = acc >= 0.95 && secs < 300 && built && rel < 0.15;
    return {ok, fmt("toy pixel accuracy %.4f (>= 0.95) at epoch %.0f, %.0f s training; 109-layer params %.0f", acc,
                    res.best_epoch, secs, params) +
                    fmt(" (%.1f%% from 9.4 M, < 15%%)", 100 * rel)};
}

// ---- 8 -----------------------------------------------------------------------

Outcome classifier_toy() {
    const auto t0 = Clock::now();
    synth::PatchSetOptions o;
    o.frames = 50;
    o.patients = 20;
    o.patches_per_patient = 10;
    const auto tr = synth::motion_patches(o, 11, "T");
    o.patients = 10;
    const auto va = synth::motion_patches(o, 12, "V");
    train::ClfTrainConfig cfg;
    cfg.model.cell.hidden = 4;
    cfg.model.frames = 50;
    cfg.epochs = 8;
    cfg.batch_size = 8;
    cfg.adam.lr = 0.01;
    cfg.patience = 3;
    cfg.seed = 8;
    const auto res = train::train_classifier(tr, va, cfg);
    const auto [loss, acc] = train::evaluate_classifier(res.model, res.standardizer, va);
    const double secs = seconds_since(t0);
    return {acc >= 0.9 && secs < 300,
            fmt("validation accuracy %.3f (>= 0.90), best epoch %.0f of %.0f, %.0f s", acc, res.best_epoch,
                double(res.log.size()), secs)};
}

// ---- 9 -----------------------------------------------------------------------

int run(const std::string& args) {
    const std::string cmd = std::string("\"") + CILIA_CLI + "\" " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome pipeline_determinism() {
    const auto dir = fs::temp_directory_path() / "cilia_acceptance";
    fs::remove_all(dir);
    const auto q = [](const fs::path& p) { return "\"" + p.string() + "\""; };
    if (run("synth --out " + q(dir / "data")) != 0) return {false, "synth failed"};
    const std::string base = "--config " + q(fs::path(CILIA_SOURCE_DIR) / "configs" / "synthetic.cfg") +
                             " --seed 7 --deterministic -q ";
    const std::string pipe = "pipeline --train --manifest " + q(dir / "data" / "manifest.tsv") + " --out ";
    const int a = run(base + pipe + q(dir / "a"));
    const int b = run(base + pipe + q(dir / "b"));
    const int c = run(base + "--threads 3 " + pipe + q(dir / "c"));
    if (a || b || c) return {false, fmt("exit codes %.0f %.0f %.0f", a, b, c)};
    bool same = true;
    for (const char* f : {"predictions.tsv", "patients.tsv"}) {
        const auto ref = slurp(dir / "a" / f);
        same = same && !ref.empty() && ref == slurp(dir / "b" / f) && ref == slurp(dir / "c" / f);
    }
    const auto patients = metrics::build_trace(metrics::read_predictions(dir / "a" / "predictions.tsv")).patients.size();
    return {same, fmt("%.0f patients; prediction and patient tables byte-identical over 2 runs and threads 1/3: ",
                      double(patients)) + (same ? "yes" : "no")};
}

}  // namespace

int main() {
    criterion(1, "gradient suite", gradient_suite);
    criterion(2, "ConvLSTM closed forms", convlstm_closed_forms);
    criterion(3, "analytic flow invariants", analytic_invariants);
    criterion(4, "flow translation", flow_translation);
    criterion(5, "distance transform oracle", distance_transform);
    criterion(6, "metric arithmetic", metric_arithmetic);
    criterion(7, "segmentation overfit", segmentation_overfit);
    criterion(8, "toy classifier", classifier_toy);
    criterion(9, "end-to-end determinism", pipeline_determinism);
    std::printf("%s: %d of 9 criteria failed\n", failures ? "FAIL" : "PASS", failures);
    return failures ? 1 : 0;
}
