#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "cilia/metrics.hpp"
#include "cilia/rng.hpp"

using namespace cilia;
using namespace cilia::metrics;
namespace fs = std::filesystem;

namespace {

Mask row(std::initializer_list<int> v) {
    Mask m(1, long(v.size()));
    long i = 0;
    for (int x : v) m(0, i++) = std::uint8_t(x);
    return m;
}

double round2(double x) { return std::round(x * 100.0) / 100.0; }

ConfusionMatrix reference_counts() { return {.tn = 27, .fp = 8, .fn = 1, .tp = 39}; }

}  // namespace

TEST_CASE("pixel accuracy") {
    const auto a = row({0, 1, 2, 3});
    CHECK(pixel_accuracy(a, a) == 1.0);
    CHECK(pixel_accuracy(row({0, 1, 1, 0}), row({1, 0, 0, 1})) == 0.0);
    CHECK(pixel_accuracy(row({0, 1, 2, 3}), row({0, 1, 2, 0})) == 0.75);
    CHECK_THROWS_AS(pixel_accuracy(row({0, 1}), row({0, 1, 2})), ShapeError);
}

TEST_CASE("dice") {
    const auto a = row({1, 1, 0, 0});
    CHECK(dice(a, a) == 1.0);
    CHECK(dice(a, row({0, 0, 1, 1})) == 0.0);
    CHECK(dice(a, row({0, 1, 1, 0})) == 0.5);
    bool vacuous = false;
    CHECK(dice(row({0, 0}), row({0, 0}), &vacuous) == 1.0);
    CHECK(vacuous);
    CHECK(weighted_dice(a, row({0, 1, 1, 0}), DiceScheme::plain) == 0.5);
    CHECK_THROWS_AS(dice(row({1}), row({1, 1})), ShapeError);
}

TEST_CASE("inverse-frequency weighted dice") {
    const auto truth = row({0, 0, 0, 0, 0, 0, 1, 1});
    CHECK(weighted_dice(truth, truth, DiceScheme::inverse_frequency) == doctest::Approx(1.0));
    // class 0: 2·5/(6+6), weight 1/6; class 1: 2·1/(2+2), weight 1/2; classes 2, 3 absent
    const auto pred2 = row({0, 0, 0, 0, 0, 1, 0, 1});
    const double d0 = 2.0 * 5 / (6 + 6), d1 = 2.0 * 1 / (2 + 2);
    const double expect = (d0 / 6 + d1 / 2) / (1.0 / 6 + 1.0 / 2);
    CHECK(weighted_dice(pred2, truth, DiceScheme::inverse_frequency) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("video call") {
    const std::vector<double> a{0.9, 0.8, 0.95};
    const auto c = video_call(a);
    CHECK(c.mean == doctest::Approx(0.883333).epsilon(1e-5));
    CHECK(c.abnormal);
    CHECK_FALSE(video_call(std::vector<double>{0.1}).abnormal);
    const auto tie = video_call(std::vector<double>{0.6, 0.4});
    CHECK(tie.mean == 0.5);
    CHECK(tie.abnormal);
    CHECK_THROWS_AS(video_call(std::vector<double>{}), DataError);
    CHECK_THROWS_AS(video_call(std::vector<double>{1.2}), DataError);

    const std::vector<double> mixed{0.9, 0.45, 0.1};
    CHECK_FALSE(video_call(mixed).abnormal);
    CHECK(video_call(mixed, {.rounded_first = true}).mean == doctest::Approx(1.0 / 3));
}

TEST_CASE("patient call") {
    CHECK(patient_call(std::vector<int>{1, 1, 0}) == Label::abnormal);
    CHECK(patient_call(std::vector<int>{0, 0, 0}) == Label::normal);
    CHECK(patient_call(std::vector<int>{1, 0}) == Label::abnormal);
    CHECK_THROWS_AS(patient_call(std::vector<int>{}), DataError);
}

TEST_CASE("classification report on the reference confusion counts") {
    const auto r = classification_report(reference_counts());
    REQUIRE(r.accuracy);
    REQUIRE(r.f1);
    CHECK(*r.accuracy == doctest::Approx(66.0 / 75.0).epsilon(1e-12));
    CHECK(*r.recall == doctest::Approx(39.0 / 40.0).epsilon(1e-12));
    CHECK(*r.precision == doctest::Approx(39.0 / 47.0).epsilon(1e-12));
    CHECK(std::abs(*r.f1 - 0.8966) <= 1e-4);
    CHECK(round2(*r.accuracy) == 0.88);
    CHECK(round2(*r.recall) == 0.98);
    CHECK(round2(*r.precision) == 0.83);
    CHECK(round2(*r.f1) == 0.90);
}

TEST_CASE("report edge cases") {
    const auto perfect = classification_report({.tn = 5, .fp = 0, .fn = 0, .tp = 7});
    CHECK(*perfect.accuracy == 1.0);
    CHECK(*perfect.precision == 1.0);
    CHECK(*perfect.recall == 1.0);
    CHECK(*perfect.f1 == 1.0);

    const auto all_pos = classification_report({.tn = 0, .fp = 10, .fn = 0, .tp = 10});
    CHECK(*all_pos.recall == 1.0);
    CHECK(*all_pos.precision == 0.5);
    CHECK(*all_pos.f1 == doctest::Approx(2.0 / 3.0));

    const auto all_neg = classification_report({.tn = 10, .fp = 0, .fn = 10, .tp = 0});
    CHECK_FALSE(all_neg.precision.has_value());
    CHECK(*all_neg.recall == 0.0);
    CHECK(format_report({.tn = 10, .fn = 10}, all_neg).find("undefined") != std::string::npos);
}

TEST_CASE("format_report layout") {
    const auto text = format_report(reference_counts(), classification_report(reference_counts()));
    CHECK(text.find("tn=27 fp=8 fn=1 tp=39") != std::string::npos);
    CHECK(text.find("accuracy   0.8800") != std::string::npos);
    CHECK(text.find("f1         0.8966") != std::string::npos);
}

TEST_CASE("calls are permutation invariant and monotone") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> p(1 + rng.below(7));
        for (auto& v : p) v = rng.uniform();
        const auto base = video_call(p);
        auto q = p;
        std::reverse(q.begin(), q.end());
        std::rotate(q.begin(), q.begin() + long(rng.below(q.size())), q.end());
        CHECK(video_call(q).abnormal == base.abnormal);
        CHECK(video_call(q).mean == doctest::Approx(base.mean).epsilon(1e-14));

        auto raised = p;
        const auto k = rng.below(p.size());
        raised[k] = rng.uniform(p[k], 1.0);
        if (base.abnormal) CHECK(video_call(raised).abnormal);

        std::vector<int> votes(1 + rng.below(6));
        for (auto& v : votes) v = int(rng.below(2));
        auto shuffled = votes;
        std::rotate(shuffled.begin(), shuffled.begin() + long(rng.below(votes.size())), shuffled.end());
        CHECK(patient_call(shuffled) == patient_call(votes));
    }
}

namespace {

std::vector<PatchPrediction> cascade_rows() {
    return {
        {"a1", "A_v0", "A", Label::abnormal, 0, 0.9},
        {"a2", "A_v0", "A", Label::abnormal, 0, 0.7},
        {"a3", "A_v1", "A", Label::abnormal, 0, 0.2},
        {"b1", "B_v0", "B", Label::normal, 1, 0.3},
        {"b2", "B_v1", "B", Label::normal, 1, 0.6},
        {"b3", "B_v1", "B", Label::normal, 1, 0.4},
        {"c1", "C_v0", "C", Label::normal, 1, 0.1},
    };
}

}  // namespace

TEST_CASE("decision trace levels feed each other") {
    auto rows = cascade_rows();
    const auto t = build_trace(rows);
    REQUIRE(t.videos.size() == 5);
    REQUIRE(t.patients.size() == 3);
    for (const auto& v : t.videos) CHECK(video_call(v.patch_probs).abnormal == v.call.abnormal);
    for (const auto& p : t.patients) {
        std::vector<int> votes;
        for (const auto& v : t.videos)
            if (v.patient_id == p.patient_id) votes.push_back(v.call.abnormal ? 1 : 0);
        CHECK(votes.size() == p.video_ids.size());
        CHECK(patient_call(votes) == p.predicted);
    }
    CHECK(t.patients[0].predicted == Label::abnormal);  // 1 of 2 videos: tie
    CHECK(t.patients[1].predicted == Label::abnormal);  // B_v1 mean 0.5
    CHECK(t.patients[2].predicted == Label::normal);
    CHECK(t.confusion == ConfusionMatrix{.tn = 1, .fp = 1, .fn = 0, .tp = 1});

    std::reverse(rows.begin(), rows.end());
    const auto t2 = build_trace(rows);
    CHECK(t2.confusion == t.confusion);
    CHECK(t2.patients[0].video_ids == t.patients[0].video_ids);

    rows.push_back({"x", "C_v0", "C", Label::abnormal, 1, 0.5});
    CHECK_THROWS_AS(build_trace(rows), DataError);
}

TEST_CASE("prediction table round trip") {
    const auto dir = fs::temp_directory_path() / "cilia_test_metrics";
    fs::create_directories(dir);
    auto rows = cascade_rows();
    rows[0].p_abnormal = 1.0 / 3.0;
    write_predictions(dir / "p.tsv", rows);
    const auto back = read_predictions(dir / "p.tsv");
    REQUIRE(back.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(back[i].patch_id == rows[i].patch_id);
        CHECK(back[i].video_id == rows[i].video_id);
        CHECK(back[i].patient_id == rows[i].patient_id);
        CHECK(back[i].label == rows[i].label);
        CHECK(back[i].fold == rows[i].fold);
        CHECK(back[i].p_abnormal == rows[i].p_abnormal);
    }
    write_trace(dir / "trace.tsv", build_trace(back));
    write_patient_table(dir / "patients.tsv", build_trace(back));
    CHECK(fs::file_size(dir / "trace.tsv") > 0);
    fs::remove_all(dir);
}
