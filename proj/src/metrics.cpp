#include "cilia/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "cilia/errors.hpp"

namespace cilia::metrics {

namespace {

void same_shape(const Mask& a, const Mask& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(what) + ": masks are " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) out.push_back(f);
    return out;
}

}  // namespace

double pixel_accuracy(const Mask& pred, const Mask& truth) {
    same_shape(pred, truth, "pixel_accuracy");
    if (pred.size() == 0) throw ShapeError("pixel_accuracy: empty masks");
    return double((pred == truth).count()) / double(pred.size());
}

double dice(const Mask& pred, const Mask& truth, bool* vacuous) {
    same_shape(pred, truth, "dice");
    const auto a = pred != 0;
    const auto b = truth != 0;
    const double sa = double(a.count()), sb = double(b.count());
    if (vacuous) *vacuous = sa + sb == 0;
    if (sa + sb == 0) {
        std::clog << "dice: both masks empty, scoring 1.0\n";
        return 1.0;
    }
    return 2.0 * double((a && b).count()) / (sa + sb);
}

double weighted_dice(const Mask& pred, const Mask& truth, DiceScheme scheme, int n_classes) {
    if (scheme == DiceScheme::plain) return dice(pred, truth);
    same_shape(pred, truth, "weighted_dice");
    double num = 0, den = 0;
    for (int k = 0; k < n_classes; ++k) {
        const auto t = (truth == std::uint8_t(k)).cast<std::uint8_t>();
        const auto n = double(t.count());
        if (n == 0) continue;
        const Mask tp = t;
        const Mask pp = (pred == std::uint8_t(k)).cast<std::uint8_t>();
        num += dice(pp, tp) / n;
        den += 1.0 / n;
    }
    if (den == 0) throw ShapeError("weighted_dice: empty masks");
    return num / den;
}

VideoCall video_call(std::span<const double> patch_probs, const EvalOptions& options) {
    if (patch_probs.empty()) throw DataError("video_call: no patches");
    double s = 0;
    for (double p : patch_probs) {
        if (!(p >= 0.0 && p <= 1.0)) throw DataError("video_call: probability " + fmt(p) + " outside [0,1]");
        s += options.rounded_first ? (p >= options.threshold ? 1.0 : 0.0) : p;
    }
    VideoCall c;
    c.mean = s / double(patch_probs.size());
    c.abnormal = c.mean >= options.threshold;
    return c;
}

Label patient_call(std::span<const int> video_calls) {
    if (video_calls.empty()) throw DataError("patient_call: no videos");
    std::size_t yes = 0;
    for (int b : video_calls) {
        if (b != 0 && b != 1) throw DataError("patient_call: video calls must be 0 or 1");
        yes += std::size_t(b);
    }
    return 2 * yes >= video_calls.size() ? Label::abnormal : Label::normal;
}

void ConfusionMatrix::add(Label truth, Label predicted) {
    if (truth == Label::unknown || predicted == Label::unknown) return;
    const bool t = truth == Label::abnormal, p = predicted == Label::abnormal;
    (t ? (p ? tp : fn) : (p ? fp : tn)) += 1;
}

ClassificationReport classification_report(const ConfusionMatrix& cm) {
    if (cm.tn < 0 || cm.fp < 0 || cm.fn < 0 || cm.tp < 0) throw DataError("confusion matrix counts must be >= 0");
    ClassificationReport r;
    if (cm.total() > 0) r.accuracy = double(cm.tp + cm.tn) / double(cm.total());
    if (cm.tp + cm.fp > 0) r.precision = double(cm.tp) / double(cm.tp + cm.fp);
    if (cm.tp + cm.fn > 0) r.recall = double(cm.tp) / double(cm.tp + cm.fn);
    if (r.precision && r.recall && *r.precision + *r.recall > 0) {
        r.f1 = 2 * *r.precision * *r.recall / (*r.precision + *r.recall);
    }
    return r;
}

// ---- tables ------------------------------------------------------------------

static const char* kPredictionHeader = "# patch_id\tvideo_id\tpatient_id\tlabel\tfold\tp_abnormal";

void write_predictions(const std::filesystem::path& path, std::span<const PatchPrediction> rows) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << kPredictionHeader << '\n';
    for (const auto& r : rows) {
        out << r.patch_id << '\t' << r.video_id << '\t' << r.patient_id << '\t' << to_string(r.label) << '\t' << r.fold
            << '\t' << fmt(r.p_abnormal) << '\n';
    }
}

std::vector<PatchPrediction> read_predictions(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("prediction table not found: " + path.string());
    std::vector<PatchPrediction> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto f = split_tabs(line);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (f.size() != 6) throw FormatError(where + ": expected 6 columns, found " + std::to_string(f.size()));
        PatchPrediction p;
        p.patch_id = f[0];
        p.video_id = f[1];
        p.patient_id = f[2];
        p.label = parse_label(f[3]);
        try {
            std::size_t used = 0;
            p.fold = std::stoi(f[4]);
            p.p_abnormal = std::stod(f[5], &used);
            if (used != f[5].size()) throw std::invalid_argument("trailing");
        } catch (const std::logic_error&) {
            throw FormatError(where + ": malformed fold or probability");
        }
        rows.push_back(std::move(p));
    }
    return rows;
}

DecisionTrace build_trace(std::span<const PatchPrediction> rows, const EvalOptions& options) {
    struct VideoAcc {
        std::string patient;
        std::vector<std::string> ids;
        std::vector<double> probs;
    };
    std::map<std::pair<std::string, std::string>, VideoAcc> videos;
    std::map<std::string, Label> truth;
    for (const auto& r : rows) {
        auto& v = videos[{r.patient_id, r.video_id}];
        v.patient = r.patient_id;
        v.ids.push_back(r.patch_id);
        v.probs.push_back(r.p_abnormal);
        auto [it, fresh] = truth.emplace(r.patient_id, r.label);
        if (!fresh && it->second != r.label) throw DataError("patient " + r.patient_id + " has conflicting labels");
    }
    DecisionTrace trace;
    std::map<std::string, std::vector<int>> calls;
    for (auto& [key, acc] : videos) {
        VideoDecision d{key.second, key.first, std::move(acc.ids), std::move(acc.probs), {}};
        d.call = video_call(d.patch_probs, options);
        calls[key.first].push_back(d.call.abnormal ? 1 : 0);
        trace.videos.push_back(std::move(d));
    }
    for (const auto& [patient, label] : truth) {
        PatientDecision p;
        p.patient_id = patient;
        p.truth = label;
        for (const auto& v : trace.videos)
            if (v.patient_id == patient) p.video_ids.push_back(v.video_id);
        const auto& c = calls[patient];
        p.abnormal_votes = int(std::count(c.begin(), c.end(), 1));
        p.predicted = patient_call(c);
        trace.confusion.add(p.truth, p.predicted);
        trace.patients.push_back(std::move(p));
    }
    return trace;
}

void write_trace(const std::filesystem::path& path, const DecisionTrace& trace) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "# level\tid\tparent\tcount\tvalue\tcall\n";
    for (const auto& v : trace.videos) {
        for (std::size_t i = 0; i < v.patch_ids.size(); ++i) {
            out << "patch\t" << v.patch_ids[i] << '\t' << v.video_id << "\t1\t" << fmt(v.patch_probs[i]) << "\t-\n";
        }
        out << "video\t" << v.video_id << '\t' << v.patient_id << '\t' << v.patch_ids.size() << '\t' << fmt(v.call.mean)
            << '\t' << (v.call.abnormal ? 1 : 0) << '\n';
    }
    for (const auto& p : trace.patients) {
        out << "patient\t" << p.patient_id << "\t-\t" << p.video_ids.size() << '\t' << p.abnormal_votes << '\t'
            << to_string(p.predicted) << '\n';
    }
}

void write_patient_table(const std::filesystem::path& path, const DecisionTrace& trace) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "# patient_id\ttrue_label\tpredicted_label\tvideos\tabnormal_votes\n";
    for (const auto& p : trace.patients) {
        out << p.patient_id << '\t' << to_string(p.truth) << '\t' << to_string(p.predicted) << '\t' << p.video_ids.size()
            << '\t' << p.abnormal_votes << '\n';
    }
}

std::string format_report(const ConfusionMatrix& cm, const ClassificationReport& r) {
    auto line = [](const char* name, const std::optional<double>& v) {
        char buf[64];
        if (v) std::snprintf(buf, sizeof buf, "%-10s %.4f\n", name, *v);
        else std::snprintf(buf, sizeof buf, "%-10s undefined\n", name);
        return std::string(buf);
    };
    std::ostringstream s;
    s << "confusion  tn=" << cm.tn << " fp=" << cm.fp << " fn=" << cm.fn << " tp=" << cm.tp << '\n';
    s << line("accuracy", r.accuracy) << line("precision", r.precision) << line("recall", r.recall) << line("f1", r.f1);
    return s.str();
}

}  // namespace cilia::metrics
