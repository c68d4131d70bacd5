#pragma once

// Subject-level training loops: supervised pretraining, first-order
// meta-learning over per-subject tasks (reference or demixed pseudo labels),
// few-shot test-time personalization, and the plain fine-tuning baseline.

#include <numeric>
#include <optional>
#include <ostream>
#include <random>

#include "dataset.hpp"
#include "demix.hpp"
#include "tscan.hpp"

namespace pulse {

enum class LabelSource { Gold, Pseudo };

inline const char* label_source_name(LabelSource s) {
    return s == LabelSource::Gold ? "gold" : "pseudo";
}

// One subject's personalization unit: chronological support clips for the
// adaptation step, the remaining clips as query. Label tensors align with the
// clip windows ([window] derivative targets each).
struct Task {
    std::string subject_id;
    LabelSource labels = LabelSource::Gold;
    std::vector<ClipInput> support, query;
    std::vector<Tensor> support_labels, query_labels;
    int query_start = 0;  // first frame index past the support segment
};

struct MetaConfig {
    TsCanConfig net;
    double inner_lr = 0.005;   // per-subject SGD rate
    double outer_lr = 0.001;   // Adam rate, shared by pretraining and the outer loop
    int inner_steps = 1;
    int epochs = 10;
    int support_frames = 540;  // 18 s at 30 fps
    int meta_batch = 4;
    bool supervised = true;    // reference labels when true, demixed pseudo labels otherwise
    bool freeze_motion = false;
    bool first_order = true;
    DemixMethod pseudo_method = DemixMethod::Pos;
    uint64_t seed = 0;

    void validate() const {
        net.validate();
        // zero rates are legal no-ops (useful as identity probes)
        if (inner_lr < 0.0) detail::fail("meta config: inner_lr must be >= 0");
        if (outer_lr < 0.0) detail::fail("meta config: outer_lr must be >= 0");
        if (inner_steps < 1) detail::fail("meta config: inner_steps must be >= 1");
        if (epochs < 0) detail::fail("meta config: epochs must be >= 0");
        if (meta_batch < 1) detail::fail("meta config: meta_batch must be >= 1");
        if (support_frames < net.window_frames || support_frames % net.window_frames != 0)
            detail::fail("meta config: support_frames must be a positive multiple of window_frames");
        if (pseudo_method == DemixMethod::Gold)
            detail::fail("meta config: pseudo_method must be a demixing method");
    }
};

namespace detail {

constexpr uint64_t kInnerMask = 11, kOuterMask = 12, kPretrainMask = 13;
constexpr uint64_t kMetaShuffle = 21, kPretrainShuffle = 22;

// Standardized per-frame derivative targets for one subject.
inline PulseTrace subject_labels(const SubjectRecord& rec, LabelSource src, DemixMethod method) {
    if (src == LabelSource::Gold) {
        if (!rec.gold)
            detail::fail("labels: subject '" + rec.id + "' has no reference pulse for supervised use");
        return make_pseudo_labels(rec.frames, DemixMethod::Gold, &*rec.gold).deriv;
    }
    return make_pseudo_labels(rec.frames, method).deriv;
}

// Mean per-clip loss over a clip set; optionally accumulates the mean
// gradient. Gradient passes run in train mode with a distinct dropout draw
// per clip; pure measurements run in eval mode.
inline double batch_pass(const ModelParams& params, const TsCanConfig& net,
                         const std::vector<ClipInput>& clips, const std::vector<Tensor>& labels,
                         std::map<std::string, Tensor>* grads, uint64_t mask_seed) {
    if (clips.empty()) detail::fail("batch_pass: no clips");
    if (clips.size() != labels.size()) detail::fail("batch_pass: clip/label count mismatch");
    TsCanModel m = build_model(net, params, true, grads != nullptr, 0);
    double loss = 0.0;
    for (size_t i = 0; i < clips.size(); ++i) {
        m.g.dropout_seed = detail::mix_stream(mask_seed, static_cast<uint64_t>(i));
        m.g.forward({{"motion", clips[i].motion},
                     {"appearance", clips[i].appearance},
                     {"label", labels[i]}});
        loss += m.g.scalar_double(m.nodes.loss);
        if (grads) {
            std::map<std::string, Tensor> g = m.g.backward(m.nodes.loss);
            if (grads->empty()) {
                *grads = std::move(g);
            } else {
                for (auto& [name, t] : *grads) {
                    const Tensor& add = g.at(name);
                    for (size_t k = 0; k < t.data.size(); ++k) t.data[k] += add.data[k];
                }
            }
        }
    }
    const float inv = 1.0f / static_cast<float>(clips.size());
    if (grads)
        for (auto& [name, t] : *grads)
            for (float& v : t.data) v *= inv;
    return loss / static_cast<double>(clips.size());
}

}  // namespace detail

// Eval-mode mean per-clip loss over a clip set; measurement only, no dropout.
inline double evaluate_loss(const ModelParams& params, const TsCanConfig& net,
                            const std::vector<ClipInput>& clips, const std::vector<Tensor>& labels) {
    return detail::batch_pass(params, net, clips, labels, nullptr, 0);
}

// Chronological split of one subject into support (first support_frames) and
// query (the rest), with labels from the chosen source.
inline Task make_task(const SubjectRecord& rec, const MetaConfig& cfg, LabelSource src) {
    cfg.validate();
    const int W = cfg.net.window_frames;
    const int support_clips = cfg.support_frames / W;
    const std::vector<ClipInput> clips = preprocess(rec.frames, cfg.net);
    if (static_cast<int>(clips.size()) <= support_clips)
        detail::fail("task: subject '" + rec.id + "' has " + std::to_string(rec.frames.frame_count()) +
                     " frames; needs at least " + std::to_string(cfg.support_frames + W + 1) +
                     " for a support segment plus one query clip");
    const PulseTrace lab = detail::subject_labels(rec, src, cfg.pseudo_method);

    Task t;
    t.subject_id = rec.id;
    t.labels = src;
    t.query_start = cfg.support_frames;
    for (size_t i = 0; i < clips.size(); ++i) {
        Tensor l({W});
        for (int k = 0; k < W; ++k)
            l.data[static_cast<size_t>(k)] =
                static_cast<float>(lab.samples[static_cast<size_t>(clips[i].start_frame + k)]);
        if (static_cast<int>(i) < support_clips) {
            t.support.push_back(clips[i]);
            t.support_labels.push_back(std::move(l));
        } else {
            t.query.push_back(clips[i]);
            t.query_labels.push_back(std::move(l));
        }
    }
    return t;
}

// One task per sufficiently long subject; short subjects are skipped with a
// logged warning rather than silently dropped.
inline std::vector<Task> make_tasks(const Dataset& ds, const MetaConfig& cfg,
                                    std::ostream* log = nullptr) {
    cfg.validate();
    const LabelSource src = cfg.supervised ? LabelSource::Gold : LabelSource::Pseudo;
    std::vector<Task> out;
    for (const SubjectRecord& rec : ds.subjects) {
        const int min_frames = cfg.support_frames + cfg.net.window_frames + 1;
        if (rec.frames.frame_count() < min_frames) {
            if (log) {
                nlohmann::json j;
                j["event"] = "skip_subject";
                j["subject"] = rec.id;
                j["frames"] = rec.frames.frame_count();
                j["min_frames"] = min_frames;
                *log << j.dump() << '\n';
            }
            continue;
        }
        out.push_back(make_task(rec, cfg, src));
    }
    return out;
}

// inner_steps SGD steps at inner_lr on the mean support loss. Returns the
// personalized copy; the input stays untouched. With freeze_motion the motion
// convolutions and the head stay pinned and only appearance/attention move.
inline ModelParams inner_adapt(const ModelParams& theta, const Task& task, const MetaConfig& cfg,
                               uint64_t stream = 0, double* support_loss = nullptr) {
    cfg.validate();
    if (task.support.empty())
        detail::fail("inner_adapt: task '" + task.subject_id + "' has no support clips");
    ModelParams p = cfg.freeze_motion ? freeze_motion_branch(theta) : theta;
    OptimizerState opt = OptimizerState::sgd(static_cast<float>(cfg.inner_lr));
    for (int step = 0; step < cfg.inner_steps; ++step) {
        std::map<std::string, Tensor> grads;
        const double loss =
            detail::batch_pass(p, cfg.net, task.support, task.support_labels, &grads,
                               detail::mix_stream(cfg.seed, detail::kInnerMask, stream,
                                                  static_cast<uint64_t>(step)));
        if (step == 0 && support_loss) *support_loss = loss;
        p = optimizer_step(p, grads, opt);
    }
    return p;
}

// Plain SGD fine-tuning on the same support segment; steps = 1 reproduces
// inner_adapt exactly, steps = 0 returns the input unchanged.
inline ModelParams fine_tune_baseline(const ModelParams& theta, const Task& task,
                                      const MetaConfig& cfg, int steps, double lr,
                                      uint64_t stream = 0) {
    if (steps < 0) detail::fail("fine_tune_baseline: steps must be >= 0");
    if (steps == 0) {
        cfg.validate();
        return theta;
    }
    MetaConfig tuned = cfg;
    tuned.inner_steps = steps;
    tuned.inner_lr = lr;
    return inner_adapt(theta, task, tuned, stream);
}

struct MetaResult {
    ModelParams params;
    std::vector<double> epoch_query_loss;
};

// Outer loop: per epoch, shuffle tasks into meta-batches; for each task run
// inner_adapt, take the query-loss gradient at the personalized parameters
// (first-order: that gradient is applied directly to the shared ones), then
// one Adam step per batch. Logs line-delimited JSON per task and per epoch.
inline MetaResult meta_train(const std::vector<Task>& tasks, const ModelParams& init,
                             const MetaConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    if (tasks.empty()) detail::fail("meta_train: task list is empty");
    if (!cfg.first_order)
        detail::fail("meta_train: only the first-order outer update is implemented");
    for (const Task& t : tasks)
        if (t.query.empty()) detail::fail("meta_train: task '" + t.subject_id + "' has no query clips");

    MetaResult res;
    res.params = cfg.freeze_motion ? freeze_motion_branch(init) : init;
    OptimizerState outer = OptimizerState::adam(static_cast<float>(cfg.outer_lr));
    std::mt19937_64 shuffler(detail::mix_stream(cfg.seed, detail::kMetaShuffle));
    std::vector<size_t> order(tasks.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffler);
        double epoch_loss = 0.0;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.meta_batch)) {
            const size_t end = std::min(order.size(), at + static_cast<size_t>(cfg.meta_batch));
            std::map<std::string, Tensor> acc;
            for (size_t b = at; b < end; ++b) {
                const Task& task = tasks[order[b]];
                const uint64_t stream = detail::mix_stream(static_cast<uint64_t>(epoch), order[b]);
                double support = 0.0;
                const ModelParams adapted = inner_adapt(res.params, task, cfg, stream, &support);
                std::map<std::string, Tensor> grads;
                const double query =
                    detail::batch_pass(adapted, cfg.net, task.query, task.query_labels, &grads,
                                       detail::mix_stream(cfg.seed, detail::kOuterMask, stream));
                epoch_loss += query;
                if (acc.empty()) {
                    acc = std::move(grads);
                } else {
                    for (auto& [name, t] : acc) {
                        const Tensor& add = grads.at(name);
                        for (size_t k = 0; k < t.data.size(); ++k) t.data[k] += add.data[k];
                    }
                }
                if (log) {
                    nlohmann::json j;
                    j["epoch"] = epoch;
                    j["task"] = task.subject_id;
                    j["support_loss"] = support;
                    j["query_loss"] = query;
                    *log << j.dump() << '\n';
                }
            }
            const float inv = 1.0f / static_cast<float>(end - at);
            for (auto& [name, t] : acc)
                for (float& v : t.data) v *= inv;
            res.params = optimizer_step(res.params, acc, outer);
        }
        res.epoch_query_loss.push_back(epoch_loss / static_cast<double>(tasks.size()));
        if (log) {
            nlohmann::json j;
            j["epoch"] = epoch;
            j["mean_query_loss"] = res.epoch_query_loss.back();
            *log << j.dump() << '\n';
        }
    }
    return res;
}

struct PretrainResult {
    ModelParams params;
    std::vector<double> epoch_loss;
};

// Standard supervised training on every clip of every subject (one Adam step
// per clip, reshuffled each epoch). Zero epochs returns the seeded
// initialization unchanged.
inline PretrainResult pretrain(const Dataset& ds, const MetaConfig& cfg,
                               std::ostream* log = nullptr) {
    cfg.validate();
    if (!ds.has_gold())
        detail::fail("pretrain: dataset '" + ds.name + "' lacks reference pulses");

    std::vector<ClipInput> clips;
    std::vector<Tensor> labels;
    for (const SubjectRecord& rec : ds.subjects) {
        const std::vector<ClipInput> subject_clips = preprocess(rec.frames, cfg.net);
        const PulseTrace lab = detail::subject_labels(rec, LabelSource::Gold, cfg.pseudo_method);
        for (const ClipInput& clip : subject_clips) {
            Tensor l({cfg.net.window_frames});
            for (int k = 0; k < cfg.net.window_frames; ++k)
                l.data[static_cast<size_t>(k)] =
                    static_cast<float>(lab.samples[static_cast<size_t>(clip.start_frame + k)]);
            clips.push_back(clip);
            labels.push_back(std::move(l));
        }
    }

    PretrainResult res;
    res.params = init_params(cfg.net, cfg.seed);
    OptimizerState opt = OptimizerState::adam(static_cast<float>(cfg.outer_lr));
    std::mt19937_64 shuffler(detail::mix_stream(cfg.seed, detail::kPretrainShuffle));
    std::vector<size_t> order(clips.size());
    std::iota(order.begin(), order.end(), size_t{0});
    uint64_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffler);
        double epoch_loss = 0.0;
        for (size_t idx : order) {
            std::map<std::string, Tensor> grads;
            epoch_loss += detail::batch_pass(res.params, cfg.net, {clips[idx]}, {labels[idx]}, &grads,
                                             detail::mix_stream(cfg.seed, detail::kPretrainMask, step++));
            res.params = optimizer_step(res.params, grads, opt);
        }
        res.epoch_loss.push_back(epoch_loss / static_cast<double>(clips.size()));
        if (log) {
            nlohmann::json j;
            j["epoch"] = epoch;
            j["mean_loss"] = res.epoch_loss.back();
            *log << j.dump() << '\n';
        }
    }
    return res;
}

struct AdaptedModel {
    ModelParams params;
    std::string subject_id;
    int query_start = 0;  // evaluate from this frame on; support is never scored
};

// Few-shot personalization of trained parameters on one held-out subject's
// first support_frames. Label source defaults to pseudo (no reference needed
// at test time); pass Gold explicitly for the supervised mode.
inline AdaptedModel test_adapt(const ModelParams& theta, const SubjectRecord& rec,
                               const MetaConfig& cfg,
                               std::optional<LabelSource> labels = std::nullopt,
                               uint64_t stream = 0) {
    const LabelSource src = labels.value_or(LabelSource::Pseudo);
    const Task task = make_task(rec, cfg, src);
    AdaptedModel out;
    out.params = inner_adapt(theta, task, cfg, detail::mix_stream(31, stream));
    out.subject_id = rec.id;
    out.query_start = task.query_start;
    return out;
}

}  // namespace pulse
