#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "cilia/synthetic.hpp"
#include "cilia/training.hpp"

using namespace cilia;
using ad::Tensor;

TEST_CASE("adam: zero gradients only apply decay shrinkage") {
    auto w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
    train::Adam plain({w}, {.lr = 0.1});
    plain.step();
    CHECK(w.value() == Eigen::Vector3d(1.0, -2.0, 0.5));

    train::Adam decayed({w}, {.lr = 0.1, .decay = 0.01});
    decayed.step();
    CHECK((w.value() - Eigen::Vector3d(1.0, -2.0, 0.5) * (1 - 0.1 * 0.01)).norm() < 1e-15);
}

TEST_CASE("adam: first bias-corrected step has size lr") {
    auto w = Tensor::scalar(3.0, true);
    train::Adam opt({w}, {.lr = 0.1});
    ad::backward(w * 1.0);  // constant gradient 1
    opt.step();
    CHECK(w.item() == doctest::Approx(3.0 - 0.1 / (1 + 1e-8)).epsilon(1e-14));
    CHECK(opt.steps() == 1);
    CHECK_THROWS_AS(train::Adam({w}, {.lr = 0.0}), ConfigError);
}

TEST_CASE("adam converges on the quadratic bowl") {
    auto w = Tensor::scalar(5.0, true);
    train::Adam opt({w}, {.lr = 0.1});
    int steps = 0;
    for (; steps < 500 && std::abs(w.item()) >= 1e-3; ++steps) {
        ad::backward(w * w);
        opt.step();
    }
    INFO("w = " << w.item() << " after " << steps << " steps");
    CHECK(std::abs(w.item()) < 1e-3);
}

TEST_CASE("adam monotonically decreases a convex quadratic away from the minimum") {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::VectorXd a(6), w0(6);
        for (int i = 0; i < 6; ++i) {
            a[i] = rng.uniform(0.5, 2.0);
            w0[i] = rng.uniform(2.0, 5.0) * (rng.coin() ? 1 : -1);
        }
        auto w = Tensor::from({6}, w0, true);
        const auto A = Tensor::from({6}, a);
        train::Adam opt({w}, {.lr = 0.01});
        double prev = std::numeric_limits<double>::infinity();
        for (int step = 0; step < 100; ++step) {
            const auto loss = ad::sum(A * w * w);
            if (step >= 5) CHECK(loss.item() < prev);
            prev = loss.item();
            ad::backward(loss);
            opt.step();
        }
    }
}

TEST_CASE("early stopping and plateau annealing") {
    train::EarlyStopping stop(10);
    int epoch = 0;
    bool stopped = false;
    while (!stopped && epoch < 100) stopped = stop.update(1.0 + 0.1 * ++epoch);
    CHECK(epoch == 11);
    CHECK(stop.best_epoch() == 1);

    train::EarlyStopping never(0);
    for (int e = 0; e < 300; ++e) CHECK_FALSE(never.update(double(e)));

    train::PlateauScheduler sched(5, 0.5);
    double lr = 1.0;
    lr = sched.update(1.0, lr);
    for (int e = 0; e < 4; ++e) lr = sched.update(2.0, lr);
    CHECK(lr == 1.0);
    lr = sched.update(2.0, lr);
    CHECK(lr == 0.5);
    lr = sched.update(0.5, lr);
    CHECK(lr == 0.5);
}

TEST_CASE("flips are involutions and preserve class counts") {
    Rng rng(3);
    const auto s = synth::seg_image(20, 24, rng);
    CHECK((train::flip_horizontal(train::flip_horizontal(s.image)) == s.image).all());
    CHECK((train::flip_vertical(train::flip_vertical(s.mask)) == s.mask).all());
    for (int k = 0; k < 4; ++k) {
        const auto n = (s.mask == k).count();
        CHECK((train::flip_horizontal(s.mask) == k).count() == n);
        CHECK((train::flip_vertical(s.mask) == k).count() == n);
    }
    for (int trial = 0; trial < 10; ++trial) {
        const auto a = train::augment(s, rng, 0, true);
        for (int k = 0; k < 4; ++k) CHECK((a.mask == k).count() == (s.mask == k).count());
    }
}

TEST_CASE("seeded crop selects the expected window") {
    Rng gen(4);
    const auto s = synth::seg_image(20, 24, gen);
    Rng trace(99);
    const auto row = Eigen::Index(trace.below(20 - 8 + 1));
    const auto col = Eigen::Index(trace.below(24 - 8 + 1));
    Rng rng(99);
    const auto c = train::augment(s, rng, 8, false);
    CHECK((c.image == s.image.block(row, col, 8, 8)).all());
    CHECK((c.mask == s.mask.block(row, col, 8, 8)).all());
    CHECK_THROWS_AS(train::augment(s, rng, 21, false), ShapeError);
    CHECK_THROWS_AS(train::crop(s, 15, 0, 8), ShapeError);
}

TEST_CASE("patch flips act identically on every frame") {
    FrameStack p(5, 4, 3);
    Rng rng(2);
    for (auto& v : p.data()) v = rng.normal();
    for (int trial = 0; trial < 8; ++trial) {
        const auto f = train::augment(p, rng);
        const ImageD f0 = f.frame(0), p0 = p.frame(0);
        const bool h = !(f0 == p0).all() && ((f0 == train::flip_horizontal(p0)).all() ||
                                             (f0 == train::flip_vertical(train::flip_horizontal(p0))).all());
        const bool v = !(f0 == p0).all() && ((f0 == train::flip_vertical(p0)).all() ||
                                             (f0 == train::flip_vertical(train::flip_horizontal(p0))).all());
        for (std::size_t t = 0; t < 5; ++t) {
            ImageD expect = p.frame(t);
            if (h) expect = train::flip_horizontal(expect);
            if (v) expect = train::flip_vertical(expect);
            CHECK((ImageD(f.frame(t)) == expect).all());
        }
    }
}

TEST_CASE("inverse frequency class weights") {
    Mask m(2, 4);
    m << 0, 1, 2, 2, 3, 3, 3, 3;
    const auto w = train::inverse_frequency_weights(std::span(&m, 1));
    CHECK(w == std::vector<double>{2.0, 2.0, 1.0, 0.5});
    Mask only(1, 2);
    only << 3, 3;
    CHECK(train::inverse_frequency_weights(std::span(&only, 1)) == std::vector<double>{0, 0, 0, 0.25});
}

namespace {

train::SegSample balanced_sample(std::uint64_t seed) {
    Rng rng(seed);
    train::SegSample s{ImageD(16, 16), Mask(16, 16)};
    for (long r = 0; r < 16; ++r)
        for (long c = 0; c < 16; ++c) {
            s.mask(r, c) = std::uint8_t((r / 8) * 2 + c / 8);
            s.image(r, c) = rng.uniform();
        }
    return s;
}

}  // namespace

TEST_CASE("segmentation training: uniform baseline, determinism, errors") {
    const std::vector<train::SegSample> data{balanced_sample(1)};
    train::SegTrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 1;
    cfg.seed = 5;
    auto a = segnet::SegNet::build({}, 1);
    const auto ra = train::train_segnet(a, data, cfg);
    REQUIRE(ra.log.size() == 3);
    CHECK(std::abs(ra.log[0].loss - std::log(4.0)) < 0.5);

    auto b = segnet::SegNet::build({}, 1);
    const auto rb = train::train_segnet(b, data, cfg);
    for (std::size_t e = 0; e < 3; ++e) {
        CHECK(ra.log[e].loss == rb.log[e].loss);
        CHECK(ra.log[e].pixel_accuracy == rb.log[e].pixel_accuracy);
    }
    CHECK(a.parameters()[3].value() == b.parameters()[3].value());

    CHECK_THROWS_AS(train::train_segnet(a, std::span<const train::SegSample>{}, cfg), DataError);
}

TEST_CASE("segmentation training overfits a single image") {
    Rng rng(8);
    const std::vector<train::SegSample> data{synth::seg_image(32, 32, rng)};
    train::SegTrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 1;
    cfg.adam.lr = 0.01;
    cfg.stop_at_accuracy = 0.95;
    auto net = segnet::SegNet::build({}, 2);
    const auto r = train::train_segnet(net, data, cfg);
    INFO("epochs run " << r.log.size() << ", final accuracy " << r.log.back().pixel_accuracy);
    CHECK(r.log.back().pixel_accuracy >= 0.95);
    const auto seg = segnet::segment(net, data[0].image);
    CHECK(double((seg.mask == data[0].mask).count()) / 1024.0 == r.log[std::size_t(r.best_epoch - 1)].pixel_accuracy);
}

namespace {

train::ClfTrainConfig small_clf() {
    train::ClfTrainConfig c;
    c.model.cell.hidden = 3;
    c.model.frames = 12;
    c.epochs = 4;
    c.batch_size = 4;
    c.adam.lr = 0.01;
    c.seed = 3;
    return c;
}

std::vector<train::LabeledPatch> small_patches(std::size_t patients, std::uint64_t seed, const std::string& prefix) {
    synth::PatchSetOptions o;
    o.patients = patients;
    o.patches_per_patient = 4;
    o.frames = 12;
    return synth::motion_patches(o, seed, prefix);
}

}  // namespace

TEST_CASE("classifier training: no validation sample ever reaches a gradient") {
    const auto tr = small_patches(6, 1, "T");
    const auto va = small_patches(4, 2, "V");
    std::set<std::string> train_ids, val_patients;
    for (const auto& p : tr) train_ids.insert(p.patch_id);
    for (const auto& p : va) val_patients.insert(p.patient_id);
    std::size_t seen = 0;
    const auto observer = [&](std::span<const std::string> ids) {
        for (const auto& id : ids) {
            ++seen;
            CHECK(train_ids.count(id) == 1);
            CHECK(val_patients.count(id.substr(0, id.find('_'))) == 0);
        }
    };
    auto cfg = small_clf();
    cfg.patience = 0;
    const auto r = train::train_classifier(tr, va, cfg, observer);
    CHECK(r.log.size() == std::size_t(cfg.epochs));  // patience disabled runs every epoch
    CHECK(seen == tr.size() * std::size_t(cfg.epochs));
}

TEST_CASE("classifier training is bit-reproducible") {
    const auto tr = small_patches(4, 1, "T");
    const auto va = small_patches(2, 2, "V");
    const auto a = train::train_classifier(tr, va, small_clf());
    const auto b = train::train_classifier(tr, va, small_clf());
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t e = 0; e < a.log.size(); ++e) {
        CHECK(a.log[e].train_loss == b.log[e].train_loss);
        CHECK(a.log[e].val_loss == b.log[e].val_loss);
    }
    const auto pa = a.model.parameters(), pb = b.model.parameters();
    for (std::size_t k = 0; k < pa.size(); ++k) CHECK(pa[k].value() == pb[k].value());
}

TEST_CASE("classifier training rejects a single-class fold") {
    auto tr = small_patches(4, 1, "T");
    std::erase_if(tr, [](const auto& p) { return p.label == Label::abnormal; });
    const auto va = small_patches(2, 2, "V");
    CHECK_THROWS_WITH_AS(train::train_classifier(tr, va, small_clf()), doctest::Contains("single class"), DataError);
}

TEST_CASE("trained classifier is sensitive to frame order") {
    const auto tr = small_patches(6, 1, "T");
    const auto va = small_patches(2, 2, "V");
    const auto r = train::train_classifier(tr, va, small_clf());
    patches::PatchSequence p{va[1].values, {}, "", "", Label::unknown};
    patches::PatchSequence shuffled = p;
    Rng rng(5);
    for (std::size_t t = shuffled.values.frames(); t > 1; --t) {
        const std::size_t j = rng.below(t);
        const ImageD tmp = shuffled.values.frame(t - 1);
        shuffled.values.frame(t - 1) = shuffled.values.frame(j);
        shuffled.values.frame(j) = tmp;
    }
    CHECK(convlstm::classify_patch(r.model, p, r.standardizer) !=
          convlstm::classify_patch(r.model, shuffled, r.standardizer));
}
