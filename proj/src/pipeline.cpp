#include "cilia/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

#include "cilia/container_io.hpp"
#include "cilia/parallel.hpp"
#include "cilia/patch_sampler.hpp"

namespace cilia::pipeline {

// ---- config mapping ------------------------------------------------------------

segnet::SegNetConfig segnet_config(const config::Config& cfg) {
    segnet::SegNetConfig c;
    c.growth_rate = int(cfg.get_int("seg.growth_rate"));
    c.down_layers = cfg.get_ints("seg.down");
    c.bottleneck_layers = int(cfg.get_int("seg.bottleneck"));
    c.up_layers = cfg.get_ints("seg.up");
    if (c.up_layers.empty()) c.up_layers.assign(c.down_layers.rbegin(), c.down_layers.rend());
    c.initial_filters = int(cfg.get_int("seg.initial_filters"));
    c.dropout_rate = cfg.get_double("seg.dropout");
    c.validate();
    return c;
}

flow::FlowParams flow_params(const config::Config& cfg) {
    return {cfg.get_double("flow.alpha"), int(cfg.get_int("flow.iters"))};
}

train::SegTrainConfig seg_train_config(const config::Config& cfg) {
    train::SegTrainConfig c;
    c.epochs = int(cfg.get_int("seg.epochs"));
    c.batch_size = int(cfg.get_int("seg.batch_size"));
    c.adam.lr = cfg.get_double("seg.lr");
    c.adam.decay = cfg.get_double("seg.decay");
    c.crop = std::size_t(std::max(0L, cfg.get_int("seg.crop")));
    c.flips = cfg.get_bool("seg.flips");
    c.seed = cfg.get_u64("seed");
    return c;
}

train::ClfTrainConfig clf_train_config(const config::Config& cfg) {
    train::ClfTrainConfig c;
    auto& cell = c.model.cell;
    cell.hidden = int(cfg.get_int("clf.hidden"));
    cell.kernel = int(cfg.get_int("clf.kernel"));
    cell.candidate = convlstm::parse_activation(cfg.get("clf.candidate_activation"));
    cell.forget_bias_init = cfg.get_double("clf.forget_bias");
    cell.height = cell.width = int(cfg.get_int("patch.size"));
    cell.validate();
    c.model.frames = int(cfg.get_int("patch.frames"));
    c.epochs = int(cfg.get_int("clf.epochs"));
    c.batch_size = int(cfg.get_int("clf.batch_size"));
    c.adam.lr = cfg.get_double("clf.lr");
    c.adam.decay = cfg.get_double("clf.decay");
    c.patience = int(cfg.get_int("clf.patience"));
    c.anneal_patience = int(cfg.get_int("clf.anneal_patience"));
    c.anneal_factor = cfg.get_double("clf.anneal_factor");
    c.flips = cfg.get_bool("clf.flips");
    c.seed = cfg.get_u64("seed");
    return c;
}

metrics::EvalOptions eval_options(const config::Config& cfg) {
    return {cfg.get_double("eval.threshold"), cfg.get_bool("eval.rounded_first")};
}

// ---- helpers ---------------------------------------------------------------------

namespace {

template <typename Fn>
auto staged(const std::string& stage, Fn&& fn) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const ConfigError& e) {
        throw ConfigError("stage " + stage + ": " + e.what());
    } catch (const Error& e) {
        throw StageError(stage, e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        throw StageError(stage, e.what());
    }
}

struct VideoItem {
    fs::path video;
    std::optional<fs::path> mask;
    std::string video_id;
    std::string patient_id;
    Label label;
    int fold;
};

std::vector<VideoItem> videos_of(const fs::path& manifest) {
    const auto m = io::load_manifest(manifest);
    std::vector<VideoItem> out;
    std::set<std::string> ids;
    for (const auto& p : m.patients) {
        for (std::size_t i = 0; i < p.videos.size(); ++i) {
            VideoItem v{p.videos[i], std::nullopt, io::video_id_from_path(p.videos[i]), p.patient_id, p.label, p.fold};
            if (!p.masks.empty()) v.mask = p.masks[i];
            if (!ids.insert(v.video_id).second) throw DataError("duplicate video id " + v.video_id + " in manifest");
            out.push_back(std::move(v));
        }
    }
    if (out.empty()) throw DataError("manifest " + manifest.string() + " lists no videos");
    return out;
}

int threads_of(const Context& ctx) { return int(std::max(1L, ctx.cfg.get_int("threads"))); }

void say(const Context& ctx, const std::string& msg) {
    if (ctx.log) *ctx.log << msg << '\n';
}

std::vector<std::size_t> segmentation_frames(std::size_t T, long k) {
    const std::size_t K = std::size_t(std::clamp<long>(k, 1, long(T)));
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < K; ++j) idx.push_back(K == 1 ? 0 : j * (T - 1) / (K - 1));
    return idx;
}

fs::path clf_checkpoint_path(const fs::path& dir, int fold) { return dir / ("clf_fold" + std::to_string(fold) + ".ckpt"); }

}  // namespace

// ---- stages ----------------------------------------------------------------------

void segment_train(const Context& ctx, const fs::path& manifest, const fs::path& out_dir) {
    staged("segment-train", [&] {
        const auto net_cfg = segnet_config(ctx.cfg);
        const auto train_cfg = seg_train_config(ctx.cfg);
        std::vector<train::SegSample> data;
        for (const auto& v : videos_of(manifest)) {
            if (!v.mask) continue;
            const auto clip = io::read_video(v.video);
            train::SegSample s{clip.frames.frame(0), io::read_mask(*v.mask)};
            if (s.mask.rows() != s.image.rows() || s.mask.cols() != s.image.cols()) {
                throw DataError("mask " + v.mask->string() + " does not match its video's frame size");
            }
            data.push_back(std::move(s));
        }
        if (data.empty()) throw DataError("no annotated videos in " + manifest.string());
        auto net = segnet::SegNet::build(net_cfg, ctx.cfg.get_u64("seed"));
        say(ctx, "segment-train: " + std::to_string(data.size()) + " frames, " + std::to_string(net.parameter_count()) +
                     " parameters");
        const auto result = train::train_segnet(net, data, train_cfg);
        const auto& best = result.log[std::size_t(result.best_epoch - 1)];
        say(ctx, "segment-train: best epoch " + std::to_string(result.best_epoch) + ", pixel accuracy " +
                     std::to_string(best.pixel_accuracy));
        io::save_checkpoint(net.to_checkpoint({{"epoch", std::to_string(result.best_epoch)},
                                               {"seed", ctx.cfg.get("seed")}}),
                            out_dir / "segnet.ckpt");
        train::write_log(out_dir / "segnet_log.tsv", result.log);
        ctx.cfg.write_resolved(out_dir / "segment-train.config");
    });
}

void segment(const Context& ctx, const fs::path& manifest, const fs::path& checkpoint, const fs::path& out_dir) {
    staged("segment", [&] {
        const auto net = segnet::SegNet::from_checkpoint(io::load_checkpoint(checkpoint));
        const auto videos = videos_of(manifest);
        const long k = ctx.cfg.get_int("seg.frames");
        // Scores against the manifest's reference masks, where present.
        struct Score {
            bool present = false;
            double accuracy = 0, dice = 0, weighted = 0;
        };
        std::vector<Score> scores(videos.size());
        parallel_for(videos.size(), threads_of(ctx), [&](std::size_t i) {
            const auto clip = io::read_video(videos[i].video);
            std::vector<ImageD> frames;
            for (auto t : segmentation_frames(clip.frames.frames(), k)) frames.push_back(clip.frames.frame(t));
            const auto seg = segnet::segment_frames(net, frames);
            io::write_mask(out_dir / "masks" / (videos[i].video_id + ".cilt"), seg.mask,
                           {{"video_id", videos[i].video_id}, {"kind", "mask"}});
            if (videos[i].mask) {
                const Mask truth = io::read_mask(*videos[i].mask);
                scores[i] = {true, metrics::pixel_accuracy(seg.mask, truth),
                             metrics::dice(segnet::cilia_mask(seg.mask), segnet::cilia_mask(truth)),
                             metrics::weighted_dice(seg.mask, truth, metrics::DiceScheme::inverse_frequency)};
            }
        });
        if (std::any_of(scores.begin(), scores.end(), [](const Score& s) { return s.present; })) {
            std::ofstream out(out_dir / "segment_metrics.tsv", std::ios::binary);
            out << "# video_id\tpixel_accuracy\tcilia_dice\tweighted_dice\n";
            char line[160];
            for (std::size_t i = 0; i < videos.size(); ++i) {
                if (!scores[i].present) continue;
                std::snprintf(line, sizeof line, "\t%.17g\t%.17g\t%.17g\n", scores[i].accuracy, scores[i].dice,
                              scores[i].weighted);
                out << videos[i].video_id << line;
            }
            if (!out) throw DataError("cannot write " + (out_dir / "segment_metrics.tsv").string());
        }
        say(ctx, "segment: " + std::to_string(videos.size()) + " videos");
        ctx.cfg.write_resolved(out_dir / "segment.config");
    });
}

void flow(const Context& ctx, const fs::path& manifest, const fs::path& out_dir) {
    staged("flow", [&] {
        const auto params = flow_params(ctx.cfg);
        const auto videos = videos_of(manifest);
        parallel_for(videos.size(), threads_of(ctx), [&](std::size_t i) {
            const auto clip = io::read_video(videos[i].video);
            const auto rot = flow::rotation_sequence(clip.frames, params, 1);
            auto rec = io::to_record(rot, {{"video_id", videos[i].video_id}, {"kind", "rotation"}});
            io::write_tensor(out_dir / "rotation" / (videos[i].video_id + ".cilt"), rec);
        });
        say(ctx, "flow: " + std::to_string(videos.size()) + " videos");
        ctx.cfg.write_resolved(out_dir / "flow.config");
    });
}

void extract_patches(const Context& ctx, const fs::path& manifest, const fs::path& masks_dir, const fs::path& rotation_dir,
                     const fs::path& out_dir) {
    staged("patches", [&] {
        const auto videos = videos_of(manifest);
        const int size = int(ctx.cfg.get_int("patch.size"));
        const long frames = ctx.cfg.get_int("patch.frames"), start = ctx.cfg.get_int("patch.start");
        const double alpha = ctx.cfg.get_double("patch.alpha");
        if (size < 1 || size % 2 == 0) throw ConfigError("patch.size must be odd and >= 1");
        if (frames < 1 || start < 0) throw ConfigError("patch.frames must be >= 1 and patch.start >= 0");
        const std::uint64_t seed = ctx.cfg.get_u64("seed");
        const fs::path out = fs::absolute(out_dir);
        std::vector<std::vector<patches::PatchRecord>> per_video(videos.size());
        parallel_for(videos.size(), threads_of(ctx), [&](std::size_t i) {
            const auto& v = videos[i];
            const Mask labels = io::read_mask(masks_dir / (v.video_id + ".cilt"));
            const auto rotation = io::stack_from_record(io::read_tensor(rotation_dir / (v.video_id + ".cilt")));
            if (Eigen::Index(rotation.rows()) != labels.rows() || Eigen::Index(rotation.cols()) != labels.cols()) {
                throw DataError("rotation field and mask of " + v.video_id + " differ in size");
            }
            Rng rng(patches::video_seed(seed, v.video_id));
            const auto centers =
                patches::sample_centers(patches::distance_map(segnet::cilia_mask(labels)), size, alpha, rng);
            const auto ps = patches::extract_patches(rotation, centers, std::size_t(start), std::size_t(frames), size,
                                                     v.video_id, v.patient_id, v.label);
            for (std::size_t k = 0; k < ps.size(); ++k) {
                char suffix[16];
                std::snprintf(suffix, sizeof suffix, "_%04zu", k);
                const std::string id = v.video_id + suffix;
                const fs::path file = out / "patches" / (id + ".cilt");
                patches::write_patch(file, ps[k]);
                per_video[i].push_back({id, file, v.video_id, v.patient_id, v.label, v.fold, ps[k].center});
            }
        });
        std::vector<patches::PatchRecord> rows;
        for (std::size_t i = 0; i < videos.size(); ++i) {
            if (per_video[i].empty()) say(ctx, "patches: video " + videos[i].video_id + " yielded no patches (excluded)");
            rows.insert(rows.end(), per_video[i].begin(), per_video[i].end());
        }
        patches::write_patch_manifest(out / "patches.tsv", rows);
        say(ctx, "patches: " + std::to_string(rows.size()) + " patches from " + std::to_string(videos.size()) + " videos");
        ctx.cfg.write_resolved(out / "patches.config");
    });
}

namespace {

std::vector<train::LabeledPatch> load_patches(std::span<const patches::PatchRecord> rows) {
    std::vector<train::LabeledPatch> out;
    for (const auto& r : rows) out.push_back({r.patch_id, r.patient_id, patches::read_patch(r.file).values, r.label});
    return out;
}

}  // namespace

std::set<std::string> validation_patients(std::span<const patches::PatchRecord> rows, double fraction,
                                          std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("clf.val_fraction must be in (0, 1)");
    std::map<Label, std::set<std::string>> by_label;
    for (const auto& r : rows) by_label[r.label].insert(r.patient_id);
    Rng rng(seed);
    std::set<std::string> held;
    for (const auto& [label, ids] : by_label) {
        const long n = long(ids.size());
        if (n < 2) continue;
        const long count = std::clamp(std::lround(double(n) * fraction), 1L, n - 1);
        std::vector<std::string> order(ids.begin(), ids.end());
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        held.insert(order.begin(), order.begin() + count);
    }
    if (held.empty()) throw DataError("too few training patients to hold out a validation patient");
    return held;
}

void clf_train(const Context& ctx, const fs::path& patch_manifest, const fs::path& out_dir) {
    staged("clf-train", [&] {
        const auto rows = patches::read_patch_manifest(patch_manifest);
        if (rows.empty()) throw DataError("patch manifest " + patch_manifest.string() + " is empty");
        std::set<int> folds;
        for (const auto& r : rows) folds.insert(r.fold);
        if (folds.size() < 2) throw DataError("grouped cross-validation needs at least two folds");
        const auto base = clf_train_config(ctx.cfg);
        const double fraction = ctx.cfg.get_double("clf.val_fraction");
        for (int k : folds) {
            std::vector<patches::PatchRecord> pool, tr, va;
            for (const auto& r : rows)
                if (r.fold != k) pool.push_back(r);
            auto cfg = base;
            cfg.seed = base.seed ^ stable_hash("fold" + std::to_string(k));
            train::ClfTrainResult result = [&] {
                try {
                    const auto held = validation_patients(pool, fraction, cfg.seed);
                    for (const auto& r : pool) (held.count(r.patient_id) ? va : tr).push_back(r);
                    return train::train_classifier(load_patches(tr), load_patches(va), cfg);
                } catch (const DataError& e) {
                    throw DataError("fold " + std::to_string(k) + ": " + e.what());
                }
            }();
            const auto& best = result.log[std::size_t(result.best_epoch > 0 ? result.best_epoch - 1 : 0)];
            say(ctx, "clf-train: fold " + std::to_string(k) + " best epoch " + std::to_string(result.best_epoch) +
                         ", validation accuracy " + std::to_string(best.val_accuracy));
            io::save_checkpoint(result.model.to_checkpoint(result.standardizer, {{"fold", std::to_string(k)},
                                                                                 {"epoch", std::to_string(result.best_epoch)},
                                                                                 {"seed", std::to_string(cfg.seed)}}),
                                clf_checkpoint_path(out_dir, k));
            train::write_log(out_dir / ("clf_fold" + std::to_string(k) + "_log.tsv"), result.log);
        }
        ctx.cfg.write_resolved(out_dir / "clf-train.config");
    });
}

void classify(const Context& ctx, const fs::path& patch_manifest, const fs::path& clf_dir, const fs::path& out_path) {
    staged("classify", [&] {
        const auto rows = patches::read_patch_manifest(patch_manifest);
        std::map<int, std::vector<std::size_t>> by_fold;
        for (std::size_t i = 0; i < rows.size(); ++i) by_fold[rows[i].fold].push_back(i);
        std::vector<metrics::PatchPrediction> preds(rows.size());
        for (const auto& [fold, idx] : by_fold) {
            convlstm::Standardizer z;
            const auto model = convlstm::ConvLstmClassifier::from_checkpoint(
                io::load_checkpoint(clf_checkpoint_path(clf_dir, fold)), &z);
            std::vector<FrameStack> stacks;
            for (auto i : idx) stacks.push_back(patches::read_patch(rows[i].file).values);
            const auto p = convlstm::classify_stacks(model, stacks, z, threads_of(ctx));
            for (std::size_t j = 0; j < idx.size(); ++j) {
                const auto& r = rows[idx[j]];
                preds[idx[j]] = {r.patch_id, r.video_id, r.patient_id, r.label, r.fold, p[j]};
            }
        }
        metrics::write_predictions(out_path, preds);
        say(ctx, "classify: " + std::to_string(preds.size()) + " patches");
        ctx.cfg.write_resolved(out_path.parent_path() / "classify.config");
    });
}

std::string evaluate(const Context& ctx, const fs::path& predictions, const fs::path& out_dir) {
    return staged("evaluate", [&] {
        const auto rows = metrics::read_predictions(predictions);
        const auto trace = metrics::build_trace(rows, eval_options(ctx.cfg));
        metrics::write_trace(out_dir / "trace.tsv", trace);
        metrics::write_patient_table(out_dir / "patients.tsv", trace);
        const std::string summary = "patients   " + std::to_string(trace.patients.size()) + "\nvideos     " +
                                    std::to_string(trace.videos.size()) + "\n" +
                                    metrics::format_report(trace.confusion, metrics::classification_report(trace.confusion));
        std::ofstream(out_dir / "metrics.txt", std::ios::binary) << summary;
        ctx.cfg.write_resolved(out_dir / "evaluate.config");
        return summary;
    });
}

std::string run_pipeline(const Context& ctx, const PipelineOptions& o) {
    const fs::path out = fs::absolute(o.out_dir);
    fs::create_directories(out);
    fs::path seg_ckpt = o.seg_checkpoint, clf_dir = o.clf_dir;
    if (o.train) {
        segment_train(ctx, o.manifest, out);
        if (seg_ckpt.empty()) seg_ckpt = out / "segnet.ckpt";
    }
    if (seg_ckpt.empty()) throw StageError("segment", "no segmentation checkpoint given");
    segment(ctx, o.manifest, seg_ckpt, out);
    flow(ctx, o.manifest, out);
    extract_patches(ctx, o.manifest, out / "masks", out / "rotation", out);
    if (o.train) {
        clf_train(ctx, out / "patches.tsv", out);
        if (clf_dir.empty()) clf_dir = out;
    }
    if (clf_dir.empty()) throw StageError("classify", "no classifier checkpoint directory given");
    classify(ctx, out / "patches.tsv", clf_dir, out / "predictions.tsv");
    const auto summary = evaluate(ctx, out / "predictions.tsv", out);
    ctx.cfg.write_resolved(out / "pipeline.config");
    return summary;
}

}  // namespace cilia::pipeline
