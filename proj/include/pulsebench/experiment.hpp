#pragma once

// Cross-dataset experiment orchestration: run one mode end-to-end (train ->
// per-subject personalization -> windowed heart-rate scoring), persist every
// per-window number plus the effective configuration, and rebuild summaries
// from the persisted artifacts.

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "dataset.hpp"
#include "demix.hpp"
#include "meta.hpp"
#include "sigproc.hpp"
#include "synth.hpp"
#include "tscan.hpp"

namespace pulse {

enum class RunMode { Supervised, Unsupervised, NoPretrain, Finetune, PretrainedOnly, Pos, Chrom, Ica };

inline const char* run_mode_name(RunMode m) {
    switch (m) {
        case RunMode::Supervised: return "supervised";
        case RunMode::Unsupervised: return "unsupervised";
        case RunMode::NoPretrain: return "no-pretrain";
        case RunMode::Finetune: return "finetune";
        case RunMode::PretrainedOnly: return "pretrained-only";
        case RunMode::Pos: return "pos";
        case RunMode::Chrom: return "chrom";
        case RunMode::Ica: return "ica";
    }
    detail::fail("run_mode_name: bad enum value");
}

inline RunMode run_mode_from(const std::string& s) {
    for (RunMode m : {RunMode::Supervised, RunMode::Unsupervised, RunMode::NoPretrain,
                      RunMode::Finetune, RunMode::PretrainedOnly, RunMode::Pos, RunMode::Chrom,
                      RunMode::Ica})
        if (s == run_mode_name(m)) return m;
    detail::fail("unknown run mode '" + s + "'");
}

inline bool is_network_mode(RunMode m) {
    return m != RunMode::Pos && m != RunMode::Chrom && m != RunMode::Ica;
}

struct ExperimentSpec {
    RunMode mode = RunMode::Unsupervised;
    std::string pretrain_dataset, meta_dataset, test_dataset;
    std::string out_dir;
    MetaConfig meta;
    int eval_window = 360;        // frames per scored heart-rate window
    int test_support_frames = 0;  // adaptation prefix at test time; 0 = meta.support_frames
    int finetune_steps = 1;
    bool allow_subject_overlap = false;

    bool needs_pretrain() const {
        return mode == RunMode::Supervised || mode == RunMode::Unsupervised ||
               mode == RunMode::Finetune || mode == RunMode::PretrainedOnly;
    }
    bool needs_meta() const {
        return mode == RunMode::Supervised || mode == RunMode::Unsupervised ||
               mode == RunMode::NoPretrain;
    }

    int support_at_test() const { return test_support_frames > 0 ? test_support_frames : meta.support_frames; }

    void validate() const {
        meta.validate();
        if (out_dir.empty()) detail::fail("spec: out_dir is required");
        if (test_dataset.empty()) detail::fail("spec: test_dataset is required");
        if (needs_pretrain() && pretrain_dataset.empty())
            detail::fail(std::string("spec: mode '") + run_mode_name(mode) + "' needs pretrain_dataset");
        if (needs_meta() && meta_dataset.empty())
            detail::fail(std::string("spec: mode '") + run_mode_name(mode) + "' needs meta_dataset");
        if (eval_window < 2) detail::fail("spec: eval_window must be >= 2 frames");
        if (test_support_frames < 0 || test_support_frames % meta.net.window_frames != 0)
            detail::fail("spec: test_support_frames must be a multiple of window_frames");
        // scoring always starts at the full support boundary, so a longer
        // test-time prefix would leak scored frames into adaptation
        if (test_support_frames > meta.support_frames)
            detail::fail("spec: test_support_frames cannot exceed meta.support_frames");
        if (finetune_steps < 0) detail::fail("spec: finetune_steps must be >= 0");
    }
};

inline nlohmann::json meta_config_to_json(const MetaConfig& m) {
    nlohmann::json net;
    net["window_frames"] = m.net.window_frames;
    net["input_resolution"] = m.net.input_resolution;
    net["stage1_channels"] = m.net.stage1_channels;
    net["stage2_channels"] = m.net.stage2_channels;
    net["hidden_units"] = m.net.hidden_units;
    net["shift_fraction"] = m.net.shift_fraction;
    net["dropout"] = m.net.dropout;
    nlohmann::json j;
    j["net"] = std::move(net);
    j["inner_lr"] = m.inner_lr;
    j["outer_lr"] = m.outer_lr;
    j["inner_steps"] = m.inner_steps;
    j["epochs"] = m.epochs;
    j["support_frames"] = m.support_frames;
    j["meta_batch"] = m.meta_batch;
    j["supervised"] = m.supervised;
    j["freeze_motion"] = m.freeze_motion;
    j["first_order"] = m.first_order;
    j["pseudo_method"] = demix_method_name(m.pseudo_method);
    j["seed"] = m.seed;
    return j;
}

inline MetaConfig meta_config_from_json(const nlohmann::json& j) {
    MetaConfig m;
    if (j.contains("net")) {
        const nlohmann::json& n = j.at("net");
        m.net.window_frames = n.value("window_frames", m.net.window_frames);
        m.net.input_resolution = n.value("input_resolution", m.net.input_resolution);
        m.net.stage1_channels = n.value("stage1_channels", m.net.stage1_channels);
        m.net.stage2_channels = n.value("stage2_channels", m.net.stage2_channels);
        m.net.hidden_units = n.value("hidden_units", m.net.hidden_units);
        m.net.shift_fraction = n.value("shift_fraction", m.net.shift_fraction);
        m.net.dropout = n.value("dropout", m.net.dropout);
    }
    m.inner_lr = j.value("inner_lr", m.inner_lr);
    m.outer_lr = j.value("outer_lr", m.outer_lr);
    m.inner_steps = j.value("inner_steps", m.inner_steps);
    m.epochs = j.value("epochs", m.epochs);
    m.support_frames = j.value("support_frames", m.support_frames);
    m.meta_batch = j.value("meta_batch", m.meta_batch);
    m.supervised = j.value("supervised", m.supervised);
    m.freeze_motion = j.value("freeze_motion", m.freeze_motion);
    m.first_order = j.value("first_order", m.first_order);
    if (j.contains("pseudo_method"))
        m.pseudo_method = demix_method_from(j.at("pseudo_method").get<std::string>());
    m.seed = j.value("seed", m.seed);
    return m;
}

inline nlohmann::json spec_to_json(const ExperimentSpec& s) {
    nlohmann::json j;
    j["mode"] = run_mode_name(s.mode);
    j["pretrain_dataset"] = s.pretrain_dataset;
    j["meta_dataset"] = s.meta_dataset;
    j["test_dataset"] = s.test_dataset;
    j["out_dir"] = s.out_dir;
    j["meta"] = meta_config_to_json(s.meta);
    j["eval_window"] = s.eval_window;
    j["test_support_frames"] = s.test_support_frames;
    j["finetune_steps"] = s.finetune_steps;
    j["allow_subject_overlap"] = s.allow_subject_overlap;
    return j;
}

inline ExperimentSpec spec_from_json(const nlohmann::json& j) {
    ExperimentSpec s;
    if (j.contains("mode")) s.mode = run_mode_from(j.at("mode"));
    s.pretrain_dataset = j.value("pretrain_dataset", s.pretrain_dataset);
    s.meta_dataset = j.value("meta_dataset", s.meta_dataset);
    s.test_dataset = j.value("test_dataset", s.test_dataset);
    s.out_dir = j.value("out_dir", s.out_dir);
    if (j.contains("meta")) s.meta = meta_config_from_json(j.at("meta"));
    s.eval_window = j.value("eval_window", s.eval_window);
    s.test_support_frames = j.value("test_support_frames", s.test_support_frames);
    s.finetune_steps = j.value("finetune_steps", s.finetune_steps);
    s.allow_subject_overlap = j.value("allow_subject_overlap", s.allow_subject_overlap);
    return s;
}

namespace detail {

inline FrameSequence tail_frames(const FrameSequence& v, int from) {
    if (from < 0 || from >= v.frame_count())
        detail::fail("tail_frames: start " + std::to_string(from) + " outside 0.." +
                     std::to_string(v.frame_count() - 1));
    FrameSequence out;
    out.height = v.height;
    out.width = v.width;
    out.fps = v.fps;
    const size_t frame_bytes = static_cast<size_t>(v.height) * v.width * 3;
    out.data.assign(v.data.begin() + static_cast<std::ptrdiff_t>(frame_bytes * static_cast<size_t>(from)),
                    v.data.end());
    return out;
}

inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) detail::fail("cannot open '" + path + "' for writing");
    os << text;
    if (!os) detail::fail("write to '" + path + "' failed");
}

inline std::string read_text(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) detail::fail("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace detail

// Windowed heart-rate scoring of one subject's estimated waveform. est[i]
// corresponds to absolute frame offset+i of the subject; the reference trace
// is the full-length recording.
inline std::vector<HrWindow> evaluate_subject(const PulseTrace& est, const PulseTrace& gold,
                                              int offset, int eval_window,
                                              const std::string& subject, const std::string& group) {
    if (static_cast<int>(gold.samples.size()) < offset + static_cast<int>(est.samples.size()))
        detail::fail("evaluate_subject: reference trace shorter than the estimate span");
    std::vector<HrWindow> out;
    for (const auto& [s, e] : split_windows(static_cast<int>(est.samples.size()), eval_window)) {
        const std::vector<double> est_w(est.samples.begin() + s, est.samples.begin() + e);
        const std::vector<double> gold_w(gold.samples.begin() + offset + s,
                                         gold.samples.begin() + offset + e);
        HrWindow w;
        w.index = static_cast<int>(out.size());
        w.start = offset + s;
        w.end = offset + e;
        w.subject = subject;
        w.group = group;
        w.gold_hr = estimate_hr(gold_w, gold.fps);
        w.est_hr = estimate_hr(est_w, est.fps);
        w.snr = snr_db(est_w, est.fps, w.gold_hr);
        out.push_back(std::move(w));
    }
    return out;
}

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
    auto group_json = [](const GroupMetrics& g) {
        nlohmann::json j;
        j["windows"] = g.windows;
        j["mae"] = g.mae;
        j["rmse"] = g.rmse;
        j["mean_snr"] = g.mean_snr;
        if (g.pearson) j["pearson"] = *g.pearson;
        else j["pearson"] = nullptr;
        return j;
    };
    nlohmann::json j;
    j["overall"] = group_json(r.overall);
    j["by_group"] = nlohmann::json::object();
    for (const auto& [name, g] : r.by_group) j["by_group"][name] = group_json(g);
    nlohmann::json ws = nlohmann::json::array();
    for (const HrWindow& w : r.windows) {
        nlohmann::json e;
        e["subject"] = w.subject;
        e["group"] = w.group;
        e["index"] = w.index;
        e["start"] = w.start;
        e["end"] = w.end;
        e["gold_hr"] = w.gold_hr;
        e["est_hr"] = w.est_hr;
        e["snr"] = w.snr;
        ws.push_back(std::move(e));
    }
    j["windows"] = std::move(ws);
    return j;
}

namespace detail {

inline std::string windows_csv(const std::vector<HrWindow>& ws) {
    std::string out = "subject,group,index,start,end,gold_hr,est_hr,snr\n";
    for (const HrWindow& w : ws) {
        out += w.subject + ',' + w.group + ',' + std::to_string(w.index) + ',' +
               std::to_string(w.start) + ',' + std::to_string(w.end) + ',' + fmt_double(w.gold_hr) +
               ',' + fmt_double(w.est_hr) + ',' + fmt_double(w.snr) + '\n';
    }
    return out;
}

// Agreement plot data: x = mean of the two readings, y = their difference.
inline std::string bland_altman_csv(const std::vector<HrWindow>& ws) {
    std::string out = "subject,group,start,end,mean_hr,diff_hr\n";
    for (const HrWindow& w : ws)
        out += w.subject + ',' + w.group + ',' + std::to_string(w.start) + ',' +
               std::to_string(w.end) + ',' + fmt_double((w.gold_hr + w.est_hr) / 2.0) + ',' +
               fmt_double(w.est_hr - w.gold_hr) + '\n';
    return out;
}

inline std::string skin_type_csv(const MetricsReport& r) {
    std::string out = "group,windows,mae,rmse,mean_snr,pearson\n";
    for (const auto& [name, g] : r.by_group) {
        out += name + ',' + std::to_string(g.windows) + ',' + fmt_double(g.mae) + ',' +
               fmt_double(g.rmse) + ',' + fmt_double(g.mean_snr) + ',' +
               (g.pearson ? fmt_double(*g.pearson) : std::string()) + '\n';
    }
    return out;
}

inline std::vector<HrWindow> parse_windows_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "subject,group,index,start,end,gold_hr,est_hr,snr")
        detail::fail("windows csv: bad header");
    std::vector<HrWindow> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string f[8];
        for (int i = 0; i < 8; ++i)
            if (!std::getline(row, f[i], i == 7 ? '\n' : ','))
                detail::fail("windows csv: short row '" + line + "'");
        HrWindow w;
        w.subject = f[0];
        w.group = f[1];
        w.index = std::stoi(f[2]);
        w.start = std::stoi(f[3]);
        w.end = std::stoi(f[4]);
        w.gold_hr = std::stod(f[5]);
        w.est_hr = std::stod(f[6]);
        w.snr = std::stod(f[7]);
        out.push_back(std::move(w));
    }
    return out;
}

}  // namespace detail

// Everything run_experiment persists, reloaded and cross-checked.
struct RunArtifacts {
    nlohmann::json manifest;
    MetricsReport metrics;
};

inline MetricsReport run_experiment(const ExperimentSpec& spec, std::ostream* progress = nullptr) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(spec.out_dir);
    const std::string failed_path = spec.out_dir + "/FAILED.json";
    fs::remove(failed_path);

    std::ofstream log(spec.out_dir + "/training_log.jsonl", std::ios::binary);
    if (!log) detail::fail("cannot open '" + spec.out_dir + "/training_log.jsonl' for writing");
    auto note = [&](const nlohmann::json& j) {
        log << j.dump() << '\n';
        if (progress) *progress << j.dump() << '\n';
    };

    std::string current_stage = "setup";
    auto stage = [&](const char* name) {
        current_stage = name;
        note({{"stage", name}});
    };

    try {
        // ---- load ------------------------------------------------------
        stage("load_datasets");
        const Dataset test = load_dataset(spec.test_dataset);
        Dataset pretrain_ds, meta_ds;
        if (spec.needs_pretrain()) pretrain_ds = load_dataset(spec.pretrain_dataset);
        if (spec.needs_meta()) {
            meta_ds = load_dataset(spec.meta_dataset);
            if (!spec.allow_subject_overlap)
                for (const SubjectRecord& m : meta_ds.subjects)
                    for (const SubjectRecord& t : test.subjects)
                        if (m.id == t.id)
                            detail::fail("subject '" + m.id +
                                         "' appears in both the meta-train and test datasets; "
                                         "pass allow_subject_overlap to accept this");
        }

        // effective per-mode configuration
        MetaConfig cfg = spec.meta;
        cfg.supervised = spec.mode == RunMode::Supervised;
        const LabelSource adapt_labels =
            spec.mode == RunMode::Supervised ? LabelSource::Gold : LabelSource::Pseudo;
        MetaConfig adapt_cfg = cfg;
        adapt_cfg.support_frames = spec.support_at_test();

        // ---- train -----------------------------------------------------
        ModelParams params;
        if (spec.needs_pretrain()) {
            stage("pretrain");
            params = pretrain(pretrain_ds, cfg, &log).params;
        } else if (is_network_mode(spec.mode)) {
            params = init_params(cfg.net, cfg.seed);
        }
        if (spec.needs_meta()) {
            stage("meta_train");
            const std::vector<Task> tasks = make_tasks(meta_ds, cfg, &log);
            if (spec.mode == RunMode::NoPretrain) params = init_params(cfg.net, cfg.seed);
            params = meta_train(tasks, params, cfg, &log).params;
        }

        // ---- personalize + score --------------------------------------
        stage("adapt_evaluate");
        const int eval_start = cfg.support_frames;
        std::vector<HrWindow> windows;
        for (const SubjectRecord& rec : test.subjects) {
            if (!rec.gold)
                detail::fail("subject '" + rec.id + "' has no reference pulse to score against");
            const FrameSequence query = detail::tail_frames(rec.frames, eval_start);
            PulseTrace est;
            if (is_network_mode(spec.mode)) {
                ModelParams personal = params;
                if (spec.mode == RunMode::Finetune) {
                    const Task task = make_task(rec, adapt_cfg, adapt_labels);
                    personal = fine_tune_baseline(params, task, adapt_cfg, spec.finetune_steps,
                                                  adapt_cfg.inner_lr);
                } else if (spec.mode != RunMode::PretrainedOnly) {
                    personal = test_adapt(params, rec, adapt_cfg, adapt_labels).params;
                }
                est = derivative_to_pulse(predict_derivatives(personal, query, cfg.net));
            } else {
                const DemixMethod method = spec.mode == RunMode::Pos   ? DemixMethod::Pos
                                           : spec.mode == RunMode::Chrom ? DemixMethod::Chrom
                                                                         : DemixMethod::Ica;
                est = run_demixer(spatial_average(query), method);
                // truncate to the clip-aligned length the network modes emit,
                // so every mode scores the identical window list
                const int aligned = (query.frame_count() - 1) / cfg.net.window_frames *
                                    cfg.net.window_frames;
                if (aligned < 1) detail::fail("subject '" + rec.id + "': query too short for one clip");
                est.samples.resize(static_cast<size_t>(aligned));
            }
            std::vector<HrWindow> ws =
                evaluate_subject(est, *rec.gold, eval_start, spec.eval_window, rec.id, rec.skin_class);
            note({{"subject", rec.id}, {"windows", ws.size()}});
            windows.insert(windows.end(), std::make_move_iterator(ws.begin()),
                           std::make_move_iterator(ws.end()));
        }
        MetricsReport metrics = compute_metrics(std::move(windows));

        // ---- persist ---------------------------------------------------
        stage("write_artifacts");
        nlohmann::json manifest;
        manifest["spec"] = spec_to_json(spec);
        manifest["effective_meta"] = meta_config_to_json(cfg);
        manifest["eval_start"] = eval_start;
        manifest["adapt_support_frames"] = adapt_cfg.support_frames;
        auto dataset_summary = [](const Dataset& d) {
            nlohmann::json j;
            j["name"] = d.name;
            j["fps"] = d.fps;
            nlohmann::json ids = nlohmann::json::array();
            for (const auto& s : d.subjects) ids.push_back(s.id);
            j["subjects"] = std::move(ids);
            return j;
        };
        manifest["test_dataset"] = dataset_summary(test);
        if (spec.needs_pretrain()) manifest["pretrain_dataset"] = dataset_summary(pretrain_ds);
        if (spec.needs_meta()) manifest["meta_dataset"] = dataset_summary(meta_ds);
        detail::write_text(spec.out_dir + "/run_manifest.json", manifest.dump(2) + "\n");
        detail::write_text(spec.out_dir + "/metrics.json", metrics_to_json(metrics).dump(2) + "\n");
        detail::write_text(spec.out_dir + "/windows.csv", detail::windows_csv(metrics.windows));
        detail::write_text(spec.out_dir + "/bland_altman.csv",
                           detail::bland_altman_csv(metrics.windows));
        detail::write_text(spec.out_dir + "/skin_type.csv", detail::skin_type_csv(metrics));
        if (is_network_mode(spec.mode)) save_params(params, spec.out_dir + "/trained_params.bin");
        note({{"stage", "done"}});
        return metrics;
    } catch (const std::exception& e) {
        nlohmann::json fail;
        fail["stage"] = current_stage;
        fail["error"] = e.what();
        detail::write_text(failed_path, fail.dump(2) + "\n");
        throw std::runtime_error("stage '" + current_stage + "': " + e.what());
    }
}

// Reload a run directory, recompute every aggregate from the per-window CSV,
// and cross-check the persisted metrics.json against the recomputation.
inline RunArtifacts load_run(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> missing;
    for (const char* f : {"run_manifest.json", "metrics.json", "windows.csv"})
        if (!fs::exists(dir + "/" + f)) missing.push_back(f);
    if (fs::exists(dir + "/FAILED.json")) {
        const nlohmann::json f = nlohmann::json::parse(detail::read_text(dir + "/FAILED.json"));
        detail::fail("run '" + dir + "' is incomplete: stage '" +
                     f.value("stage", std::string("?")) + "' failed: " +
                     f.value("error", std::string("?")));
    }
    if (!missing.empty()) {
        std::string what = "run '" + dir + "' is missing:";
        for (const std::string& m : missing) what += ' ' + m;
        detail::fail(what);
    }

    RunArtifacts run;
    run.manifest = nlohmann::json::parse(detail::read_text(dir + "/run_manifest.json"));
    run.metrics = compute_metrics(detail::parse_windows_csv(detail::read_text(dir + "/windows.csv")));

    const nlohmann::json stored = nlohmann::json::parse(detail::read_text(dir + "/metrics.json"));
    auto close = [](double a, double b) { return std::abs(a - b) <= 1e-9 * std::max({1.0, std::abs(a), std::abs(b)}); };
    const GroupMetrics& o = run.metrics.overall;
    if (stored.at("overall").at("windows").get<int>() != o.windows ||
        !close(stored.at("overall").at("mae").get<double>(), o.mae) ||
        !close(stored.at("overall").at("rmse").get<double>(), o.rmse) ||
        !close(stored.at("overall").at("mean_snr").get<double>(), o.mean_snr))
        detail::fail("run '" + dir + "': metrics.json disagrees with windows.csv");
    return run;
}

namespace detail {

inline std::string group_line(const std::string& label, const GroupMetrics& g) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-12s windows=%-4d mae=%7.3f rmse=%7.3f snr=%7.2f pearson=%s\n",
                  label.c_str(), g.windows, g.mae, g.rmse, g.mean_snr,
                  g.pearson ? fmt_double(*g.pearson).substr(0, 6).c_str() : "n/a");
    return buf;
}

}  // namespace detail

// Human-readable summary of one run; every number is recomputed from the
// persisted per-window CSV.
inline std::string report(const std::string& dir) {
    const RunArtifacts run = load_run(dir);
    std::string out = "run " + dir + "\n";
    out += "mode " + run.manifest.at("spec").at("mode").get<std::string>() + ", test dataset '" +
           run.manifest.at("test_dataset").at("name").get<std::string>() + "'\n";
    out += detail::group_line("overall", run.metrics.overall);
    for (const auto& [name, g] : run.metrics.by_group) out += detail::group_line("skin " + name, g);
    return out;
}

// Side-by-side deltas (b minus a) between two runs of the same protocol.
inline std::string report_compare(const std::string& dir_a, const std::string& dir_b) {
    const RunArtifacts a = load_run(dir_a);
    const RunArtifacts b = load_run(dir_b);
    std::string out = report(dir_a) + report(dir_b);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "delta (%s - %s): mae=%+.3f rmse=%+.3f snr=%+.2f\n",
                  b.manifest.at("spec").at("mode").get<std::string>().c_str(),
                  a.manifest.at("spec").at("mode").get<std::string>().c_str(),
                  b.metrics.overall.mae - a.metrics.overall.mae,
                  b.metrics.overall.rmse - a.metrics.overall.rmse,
                  b.metrics.overall.mean_snr - a.metrics.overall.mean_snr);
    out += buf;
    return out;
}

}  // namespace pulse
