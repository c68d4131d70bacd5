// Command-line front end: dataset generation, the training/personalization
// stages, classical demixing, full experiment runs, and report rendering.

#include <iostream>

#include "CLI11.hpp"
#include "pulsebench/experiment.hpp"

namespace {

using namespace pulse;

void add_net_flags(CLI::App* app, TsCanConfig& net) {
    app->add_option("--window", net.window_frames, "frames per clip");
    app->add_option("--resolution", net.input_resolution, "square input resolution");
    app->add_option("--stage1-channels", net.stage1_channels, "first conv stage width");
    app->add_option("--stage2-channels", net.stage2_channels, "second conv stage width");
    app->add_option("--hidden", net.hidden_units, "dense hidden units");
    app->add_option("--shift-fraction", net.shift_fraction, "temporal shift channel fraction");
    app->add_option("--dropout", net.dropout, "dropout rate");
}

void add_meta_flags(CLI::App* app, MetaConfig& cfg) {
    add_net_flags(app, cfg.net);
    app->add_option("--inner-lr", cfg.inner_lr, "per-subject SGD rate");
    app->add_option("--outer-lr", cfg.outer_lr, "Adam rate (pretraining and outer loop)");
    app->add_option("--inner-steps", cfg.inner_steps, "adaptation steps");
    app->add_option("--epochs", cfg.epochs, "training epochs");
    app->add_option("--support", cfg.support_frames, "support frames per subject");
    app->add_option("--meta-batch", cfg.meta_batch, "tasks per outer step");
    app->add_flag("--freeze-motion", cfg.freeze_motion, "pin motion/head weights");
    app->add_option("--pseudo-method", [&cfg](const std::vector<std::string>& v) {
        cfg.pseudo_method = demix_method_from(v.at(0));
        return true;
    }, "pseudo label demixer (pos|chrom|ica)");
    app->add_option("--seed", cfg.seed, "rng seed");
}

DomainKnobs knobs_by_name(const std::string& name) {
    if (name == "a") return domain_a();
    if (name == "b") return domain_b();
    throw CLI::ValidationError("--domain", "must be 'a' or 'b'");
}

int cmd_synth(const std::string& out, const std::string& domain, int subjects, double duration,
              uint64_t seed, int height, int width, const std::string& prefix) {
    DomainKnobs k = knobs_by_name(domain);
    if (height > 0) k.height = height;
    if (width > 0) k.width = width;
    if (!prefix.empty()) k.id_prefix = prefix;
    const Dataset d = generate_dataset(seed, subjects, duration, k, out);
    nlohmann::json j;
    j["dataset"] = d.name;
    j["out"] = out;
    j["subjects"] = d.subjects.size();
    j["frames_per_subject"] = d.subjects.front().frames.frame_count();
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_pretrain(const std::string& dataset, const std::string& out, MetaConfig cfg) {
    const PretrainResult res = pretrain(load_dataset(dataset), cfg, &std::cerr);
    save_params(res.params, out);
    nlohmann::json j;
    j["checkpoint"] = out;
    j["epochs"] = res.epoch_loss.size();
    if (!res.epoch_loss.empty()) j["final_loss"] = res.epoch_loss.back();
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_meta_train(const std::string& dataset, const std::string& init, const std::string& out,
                   bool supervised, MetaConfig cfg) {
    cfg.supervised = supervised;
    const Dataset ds = load_dataset(dataset);
    const ModelParams start = init.empty() ? init_params(cfg.net, cfg.seed) : load_params(init);
    const std::vector<Task> tasks = make_tasks(ds, cfg, &std::cerr);
    const MetaResult res = meta_train(tasks, start, cfg, &std::cerr);
    save_params(res.params, out);
    nlohmann::json j;
    j["checkpoint"] = out;
    j["tasks"] = tasks.size();
    if (!res.epoch_query_loss.empty()) j["final_query_loss"] = res.epoch_query_loss.back();
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_adapt(const std::string& dataset, const std::string& subject, const std::string& params_path,
              const std::string& out, const std::string& labels, MetaConfig cfg) {
    const Dataset ds = load_dataset(dataset);
    const ModelParams theta = load_params(params_path);
    const LabelSource src = labels == "gold" ? LabelSource::Gold : LabelSource::Pseudo;
    const AdaptedModel adapted = test_adapt(theta, ds.subject(subject), cfg, src);
    save_params(adapted.params, out);
    nlohmann::json j;
    j["checkpoint"] = out;
    j["subject"] = adapted.subject_id;
    j["query_start"] = adapted.query_start;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_evaluate(const ExperimentSpec& spec) {
    run_experiment(spec, &std::cerr);
    std::cout << report(spec.out_dir);
    return 0;
}

int cmd_demix(const std::string& video, const std::string& method, const std::string& out) {
    const FrameSequence v = load_video(video);
    const PulseTrace est = run_demixer(spatial_average(v), demix_method_from(method));
    if (!out.empty()) save_gold_csv(est, out);
    nlohmann::json j;
    j["method"] = method;
    j["frames"] = v.frame_count();
    j["hr_bpm"] = estimate_hr(est);
    j["snr_db"] = snr_db(est, estimate_hr(est));
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_report(const std::string& dir, const std::string& compare) {
    std::cout << (compare.empty() ? report(dir) : report_compare(dir, compare));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"camera pulse measurement toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string sy_out, sy_domain = "a", sy_prefix;
    int sy_subjects = 10, sy_height = 0, sy_width = 0;
    double sy_duration = 60.0;
    uint64_t sy_seed = 0;
    synth->add_option("--out", sy_out, "dataset directory")->required();
    synth->add_option("--domain", sy_domain, "knob preset: a (light/quiet) or b (dark/noisy)");
    synth->add_option("--subjects", sy_subjects, "subject count");
    synth->add_option("--duration", sy_duration, "seconds per subject");
    synth->add_option("--seed", sy_seed, "rng seed");
    synth->add_option("--height", sy_height, "frame height override");
    synth->add_option("--width", sy_width, "frame width override");
    synth->add_option("--prefix", sy_prefix, "subject id prefix override");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "supervised training on a reference dataset");
    std::string pr_dataset, pr_out;
    MetaConfig pr_cfg;
    pre->add_option("--dataset", pr_dataset, "training dataset directory")->required();
    pre->add_option("--out", pr_out, "checkpoint path")->required();
    add_meta_flags(pre, pr_cfg);

    // meta-train
    auto* meta = app.add_subcommand("meta-train", "episodic training over per-subject tasks");
    std::string mt_dataset, mt_init, mt_out;
    bool mt_supervised = false;
    MetaConfig mt_cfg;
    meta->add_option("--dataset", mt_dataset, "task dataset directory")->required();
    meta->add_option("--init", mt_init, "starting checkpoint (default: seeded init)");
    meta->add_option("--out", mt_out, "checkpoint path")->required();
    meta->add_flag("--supervised", mt_supervised, "reference labels instead of pseudo labels");
    add_meta_flags(meta, mt_cfg);

    // adapt
    auto* adapt = app.add_subcommand("adapt", "personalize a checkpoint on one subject");
    std::string ad_dataset, ad_subject, ad_params, ad_out, ad_labels = "pseudo";
    MetaConfig ad_cfg;
    adapt->add_option("--dataset", ad_dataset, "dataset directory")->required();
    adapt->add_option("--subject", ad_subject, "subject id")->required();
    adapt->add_option("--params", ad_params, "input checkpoint")->required();
    adapt->add_option("--out", ad_out, "adapted checkpoint path")->required();
    adapt->add_option("--labels", ad_labels, "support label source: gold or pseudo")
        ->check(CLI::IsMember({"gold", "pseudo"}));
    add_meta_flags(adapt, ad_cfg);

    // evaluate: --spec (registered first) loads a baseline; explicit flags then
    // override it, because CLI11 applies option values in registration order
    auto* eval = app.add_subcommand("evaluate", "run one experiment mode end-to-end");
    ExperimentSpec ev;
    eval->add_option("--spec", [&ev](const std::vector<std::string>& v) {
        ev = spec_from_json(nlohmann::json::parse(detail::read_text(v.at(0))));
        return true;
    }, "experiment spec JSON file");
    eval->add_option("--mode", [&ev](const std::vector<std::string>& v) {
        ev.mode = run_mode_from(v.at(0));
        return true;
    }, "supervised|unsupervised|no-pretrain|finetune|pretrained-only|pos|chrom|ica");
    eval->add_option("--pretrain-dataset", ev.pretrain_dataset, "pretraining dataset");
    eval->add_option("--meta-dataset", ev.meta_dataset, "meta-training dataset");
    eval->add_option("--test-dataset", ev.test_dataset, "held-out test dataset");
    eval->add_option("--out", ev.out_dir, "run directory");
    eval->add_option("--eval-window", ev.eval_window, "frames per scored window");
    eval->add_option("--test-support", ev.test_support_frames, "test-time support frames");
    eval->add_option("--finetune-steps", ev.finetune_steps, "fine-tuning baseline steps");
    eval->add_flag("--allow-overlap", ev.allow_subject_overlap, "permit shared subject ids");
    add_meta_flags(eval, ev.meta);

    // demix
    auto* demix = app.add_subcommand("demix", "classical pulse demixing of one video");
    std::string dm_video, dm_method = "pos", dm_out;
    demix->add_option("--video", dm_video, "video file")->required();
    demix->add_option("--method", dm_method, "pos, chrom, or ica")
        ->check(CLI::IsMember({"pos", "chrom", "ica"}));
    demix->add_option("--out", dm_out, "write the demixed trace as CSV");

    // report
    auto* rep = app.add_subcommand("report", "summarize a run directory");
    std::string rp_dir, rp_compare;
    rep->add_option("dir", rp_dir, "run directory")->required();
    rep->add_option("--compare", rp_compare, "second run directory for deltas");

    std::string stage = "parse";
    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            return app.exit(e);
        }
        const CLI::App* sub = app.get_subcommands().front();
        stage = sub->get_name();
        if (sub == synth)
            return cmd_synth(sy_out, sy_domain, sy_subjects, sy_duration, sy_seed, sy_height,
                             sy_width, sy_prefix);
        if (sub == pre) return cmd_pretrain(pr_dataset, pr_out, pr_cfg);
        if (sub == meta) return cmd_meta_train(mt_dataset, mt_init, mt_out, mt_supervised, mt_cfg);
        if (sub == adapt) return cmd_adapt(ad_dataset, ad_subject, ad_params, ad_out, ad_labels, ad_cfg);
        if (sub == eval) return cmd_evaluate(ev);
        if (sub == demix) return cmd_demix(dm_video, dm_method, dm_out);
        if (sub == rep) return cmd_report(rp_dir, rp_compare);
    } catch (const std::exception& e) {
        std::cerr << "pulsebench " << stage << ": error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
