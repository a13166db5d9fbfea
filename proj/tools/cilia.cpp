// Command-line front end: one subcommand per pipeline stage.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error.

#include <CLI11.hpp>

#include <algorithm>
#include <iostream>

#include "cilia/config.hpp"
#include "cilia/pipeline.hpp"
#include "cilia/synthetic.hpp"

namespace fs = std::filesystem;
using namespace cilia;

namespace {

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;
    std::optional<long> seed;
    std::optional<int> threads;
    bool deterministic = false;
    bool quiet = false;
};

config::Config resolve(const Common& c) {
    config::Config cfg;
    if (!c.config_file.empty()) cfg.merge_file(c.config_file);
    for (const auto& o : c.overrides) cfg.apply_override(o);
    if (c.seed) cfg.set("seed", std::to_string(*c.seed));
    if (c.threads) cfg.set("threads", std::to_string(*c.threads));
    if (c.deterministic) cfg.set("deterministic", "true");
    return cfg;
}

/// Flag value if given, else the config key; records the choice in the config.
fs::path need(config::Config& cfg, const std::string& flag_value, const std::string& key, const std::string& flag) {
    if (!flag_value.empty()) cfg.set(key, fs::absolute(flag_value).string());
    const std::string& v = cfg.get(key);
    if (v.empty()) throw ConfigError("missing " + flag + " (or config key '" + key + "')");
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ciliary motion analysis: segmentation, optical flow, patch sampling and ConvLSTM classification"};
    app.require_subcommand(1);
    app.fallthrough();

    Common common;
    app.add_option("--config", common.config_file, "key=value configuration file")->check(CLI::ExistingFile);
    app.add_option("--set", common.overrides, "override a config key (key=value), repeatable");
    app.add_option("--seed", common.seed, "global seed");
    app.add_option("--threads", common.threads, "worker threads")->check(CLI::PositiveNumber);
    app.add_flag("--deterministic", common.deterministic, "ordered reductions; single-threaded training");
    app.add_flag("-q,--quiet", common.quiet, "suppress progress messages");

    std::string manifest, out, checkpoint, masks, rotation, patch_tsv, clf_dir, predictions;
    bool train = false;

    auto* seg_train = app.add_subcommand("segment-train", "train the segmentation network on annotated frames");
    seg_train->add_option("--manifest", manifest, "dataset manifest");
    seg_train->add_option("--out", out, "output directory");

    auto* seg = app.add_subcommand("segment", "predict a class mask for every video");
    seg->add_option("--manifest", manifest);
    seg->add_option("--checkpoint", checkpoint, "segmentation checkpoint");
    seg->add_option("--out", out);

    auto* flw = app.add_subcommand("flow", "optical flow and rotation fields for every video");
    flw->add_option("--manifest", manifest);
    flw->add_option("--out", out);

    auto* pat = app.add_subcommand("patches", "sample patch sequences inside the predicted cilia masks");
    pat->add_option("--manifest", manifest);
    pat->add_option("--masks", masks, "directory of masks from `segment`")->required();
    pat->add_option("--rotation", rotation, "directory of rotation fields from `flow`")->required();
    pat->add_option("--out", out);

    auto* clf_train = app.add_subcommand("clf-train", "train one ConvLSTM classifier per held-out fold");
    clf_train->add_option("--patches", patch_tsv, "patch manifest")->required();
    clf_train->add_option("--out", out);

    auto* cls = app.add_subcommand("classify", "per-patch abnormal probabilities");
    cls->add_option("--patches", patch_tsv)->required();
    cls->add_option("--checkpoints", clf_dir, "directory holding clf_fold<k>.ckpt");
    cls->add_option("--out", predictions, "prediction table to write")->required();

    auto* evl = app.add_subcommand("evaluate", "video and patient calls, metrics and decision trace");
    evl->add_option("--predictions", predictions, "prediction table")->required();
    evl->add_option("--out", out);

    auto* pipe = app.add_subcommand("pipeline", "segment, flow, patches, classify and evaluate in sequence");
    pipe->add_option("--manifest", manifest);
    pipe->add_option("--out", out);
    pipe->add_option("--seg-checkpoint", checkpoint);
    pipe->add_option("--clf-dir", clf_dir);
    pipe->add_flag("--train", train, "train both networks as part of the run");

    synth::VideoSetOptions vs;
    std::uint64_t synth_seed = 7;
    auto* syn = app.add_subcommand("synth", "write a synthetic video dataset with masks and a manifest");
    syn->add_option("--out", out)->required();
    syn->add_option("--patients", vs.patients)->capture_default_str();
    syn->add_option("--videos", vs.videos_per_patient, "videos per patient")->capture_default_str();
    syn->add_option("--frames", vs.frames)->capture_default_str();
    syn->add_option("--height", vs.height)->capture_default_str();
    syn->add_option("--width", vs.width)->capture_default_str();
    syn->add_option("--folds", vs.folds)->capture_default_str();
    syn->add_option("--data-seed", synth_seed, "generator seed")->capture_default_str();

    std::vector<std::string> pgm_files;
    std::string video_id, patient_id;
    double fps = 200.0;
    bool f64 = false;
    auto* pgm = app.add_subcommand("import-pgm", "pack a sequence of PGM frames into a video container");
    pgm->add_option("frames", pgm_files, "PGM files or one directory of them (sorted by name)")->required();
    pgm->add_option("--out", out)->required();
    pgm->add_option("--video-id", video_id);
    pgm->add_option("--patient-id", patient_id);
    pgm->add_option("--fps", fps)->capture_default_str();
    pgm->add_flag("--f64", f64, "store float64 samples instead of 8-bit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        config::Config cfg = resolve(common);
        pipeline::Context ctx{cfg, common.quiet ? nullptr : &std::cerr};
        auto finish = [&] { ctx.cfg = cfg; };

        if (*seg_train) {
            const auto m = need(cfg, manifest, "manifest", "--manifest");
            const auto o = need(cfg, out, "output_dir", "--out");
            finish();
            pipeline::segment_train(ctx, m, o);
        } else if (*seg) {
            const auto m = need(cfg, manifest, "manifest", "--manifest");
            const auto c = need(cfg, checkpoint, "seg_checkpoint", "--checkpoint");
            const auto o = need(cfg, out, "output_dir", "--out");
            finish();
            pipeline::segment(ctx, m, c, o);
        } else if (*flw) {
            const auto m = need(cfg, manifest, "manifest", "--manifest");
            const auto o = need(cfg, out, "output_dir", "--out");
            finish();
            pipeline::flow(ctx, m, o);
        } else if (*pat) {
            const auto m = need(cfg, manifest, "manifest", "--manifest");
            const auto o = need(cfg, out, "output_dir", "--out");
            finish();
            pipeline::extract_patches(ctx, m, masks, rotation, o);
        } else if (*clf_train) {
            const auto o = need(cfg, out, "output_dir", "--out");
            finish();
            pipeline::clf_train(ctx, patch_tsv, o);
        } else if (*cls) {
            const auto d = need(cfg, clf_dir, "clf_dir", "--checkpoints");
            finish();
            pipeline::classify(ctx, patch_tsv, d, predictions);
        } else if (*evl) {
            const auto o = need(cfg, out, "output_dir", "--out");
            finish();
            std::cout << pipeline::evaluate(ctx, predictions, o);
        } else if (*pipe) {
            pipeline::PipelineOptions po;
            po.manifest = need(cfg, manifest, "manifest", "--manifest");
            po.out_dir = need(cfg, out, "output_dir", "--out");
            po.train = train;
            if (!checkpoint.empty()) cfg.set("seg_checkpoint", fs::absolute(checkpoint).string());
            if (!clf_dir.empty()) cfg.set("clf_dir", fs::absolute(clf_dir).string());
            po.seg_checkpoint = cfg.get("seg_checkpoint");
            po.clf_dir = cfg.get("clf_dir");
            if (!train && (po.seg_checkpoint.empty() || po.clf_dir.empty())) {
                throw ConfigError("pipeline needs --seg-checkpoint and --clf-dir, or --train");
            }
            finish();
            std::cout << pipeline::run_pipeline(ctx, po);
        } else if (*syn) {
            const auto m = synth::write_dataset(out, vs, synth_seed);
            std::cout << "wrote " << m.patients.size() << " patients to " << (fs::path(out) / "manifest.tsv").string() << '\n';
        } else if (*pgm) {
            std::vector<fs::path> files;
            if (pgm_files.size() == 1 && fs::is_directory(pgm_files[0])) {
                for (const auto& e : fs::directory_iterator(pgm_files[0]))
                    if (e.path().extension() == ".pgm") files.push_back(e.path());
                std::sort(files.begin(), files.end());
            } else {
                files.assign(pgm_files.begin(), pgm_files.end());
            }
            if (files.empty()) throw DataError("no PGM frames found");
            io::VideoClip clip;
            const ImageD first = io::read_pgm(files[0]);
            clip.frames = FrameStack(files.size(), std::size_t(first.rows()), std::size_t(first.cols()));
            for (std::size_t t = 0; t < files.size(); ++t) {
                const ImageD f = t == 0 ? first : io::read_pgm(files[t]);
                if (f.rows() != first.rows() || f.cols() != first.cols()) {
                    throw DataError(files[t].string() + ": frame size differs from the first frame");
                }
                clip.frames.frame(t) = f;
            }
            clip.fps = fps;
            clip.video_id = video_id.empty() ? io::video_id_from_path(out) : video_id;
            clip.patient_id = patient_id;
            clip.storage = f64 ? io::DType::f64 : io::DType::u8;
            io::write_video(clip, out);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
