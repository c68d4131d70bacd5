#include "catch2/catch_amalgamated.hpp"

#include "brute.hpp"
#include "pulsebench/meta.hpp"
#include "pulsebench/synth.hpp"

using pulse::Dataset;
using pulse::LabelSource;
using pulse::MetaConfig;
using pulse::ModelParams;
using pulse::SubjectRecord;
using pulse::Task;
using pulse::Tensor;

namespace {

MetaConfig tiny_meta() {
    MetaConfig cfg;
    cfg.net.window_frames = 10;
    cfg.net.input_resolution = 8;
    cfg.net.stage1_channels = 2;
    cfg.net.stage2_channels = 2;
    cfg.net.hidden_units = 4;
    cfg.net.dropout = 0.0f;
    cfg.support_frames = 60;
    cfg.epochs = 4;
    cfg.meta_batch = 2;
    return cfg;
}

SubjectRecord quiet_subject(uint64_t seed, int index, double duration_s = 8.0, int hw = 24) {
    pulse::DomainKnobs k = pulse::domain_a();
    k.noise_lo = k.noise_hi = 0.004;  // a little sensor noise keeps demixing well-posed
    k.flicker_lo = k.flicker_hi = 0.0;
    k.motion_lo = k.motion_hi = 0.0;
    const pulse::SubjectProfile prof = pulse::sample_profile(seed, index, k);
    const pulse::PulseTrace pulse_wave = pulse::generate_pulse(prof, duration_s, k.fps);
    pulse::SynthSample s = pulse::render_video(prof, pulse_wave, hw, hw);
    SubjectRecord rec;
    rec.id = prof.id;
    rec.frames = std::move(s.frames);
    rec.gold = std::move(s.gold);
    rec.skin_class = pulse::skin_class_name(prof.melanin_level);
    rec.profile = pulse::profile_to_json(prof);
    return rec;
}

Dataset quiet_dataset(uint64_t seed, int subjects, double duration_s = 8.0) {
    Dataset d;
    d.name = "unit";
    d.fps = 30.0;
    d.height = 24;
    d.width = 24;
    for (int i = 0; i < subjects; ++i) d.subjects.push_back(quiet_subject(seed, i, duration_s));
    return d;
}

std::vector<double> flatten_labels(const Task& t) {
    std::vector<double> out;
    for (const auto* set : {&t.support_labels, &t.query_labels})
        for (const Tensor& l : *set)
            for (float v : l.data) out.push_back(v);
    return out;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
    for (const auto& e : a.entries)
        if (e.value.data != b.at(e.name).data) return false;
    return true;
}

double adapted_query_loss(const ModelParams& theta, const std::vector<Task>& tasks,
                          const MetaConfig& cfg) {
    double acc = 0.0;
    for (const Task& t : tasks) {
        const ModelParams adapted = pulse::inner_adapt(theta, t, cfg);
        acc += pulse::evaluate_loss(adapted, cfg.net, t.query, t.query_labels);
    }
    return acc / static_cast<double>(tasks.size());
}

}  // namespace

TEST_CASE("the chronological split matches the documented arithmetic") {
    const SubjectRecord rec = quiet_subject(1, 0, 60.0, 48);
    REQUIRE(rec.frames.frame_count() == 1800);
    MetaConfig cfg;  // window 20, support 540
    const Task t = pulse::make_task(rec, cfg, LabelSource::Gold);
    REQUIRE(t.subject_id == rec.id);
    REQUIRE(t.query_start == 540);
    REQUIRE(t.support.size() == 27);
    REQUIRE(t.query.size() == 62);  // 1260 query frames, tail short of one window dropped
    REQUIRE(t.support_labels.size() == t.support.size());
    REQUIRE(t.query_labels.size() == t.query.size());
    for (size_t i = 0; i < t.support.size(); ++i)
        REQUIRE(t.support[i].start_frame == static_cast<int>(i) * 20);
    for (size_t i = 0; i < t.query.size(); ++i)
        REQUIRE(t.query[i].start_frame == 540 + static_cast<int>(i) * 20);

    const pulse::PulseTrace ref =
        pulse::make_pseudo_labels(rec.frames, pulse::DemixMethod::Gold, &*rec.gold).deriv;
    for (int k = 0; k < 20; ++k) {
        REQUIRE(t.support_labels[0].data[static_cast<size_t>(k)] ==
                static_cast<float>(ref.samples[static_cast<size_t>(k)]));
        REQUIRE(t.query_labels[0].data[static_cast<size_t>(k)] ==
                static_cast<float>(ref.samples[static_cast<size_t>(540 + k)]));
    }
}

TEST_CASE("unsupervised labels track the reference without ever reading it") {
    const SubjectRecord rec = quiet_subject(2, 0, 12.0);
    SubjectRecord blind = rec;
    blind.gold.reset();
    const MetaConfig cfg = tiny_meta();

    REQUIRE_THROWS_WITH(pulse::make_task(blind, cfg, LabelSource::Gold),
                        Catch::Matchers::ContainsSubstring("no reference pulse"));

    const Task pseudo = pulse::make_task(blind, cfg, LabelSource::Pseudo);
    const Task gold = pulse::make_task(rec, cfg, LabelSource::Gold);
    REQUIRE(pseudo.labels == LabelSource::Pseudo);
    REQUIRE(gold.labels == LabelSource::Gold);
    const double rho = brute::pearson(flatten_labels(pseudo), flatten_labels(gold));
    INFO("pseudo/gold label correlation " << rho);
    REQUIRE(rho >= 0.9);
}

TEST_CASE("task building skips short subjects with a logged warning") {
    Dataset d = quiet_dataset(3, 1);
    d.subjects.push_back(quiet_subject(3, 1, 1.5));  // 45 frames, far below support + window
    MetaConfig cfg = tiny_meta();
    cfg.supervised = true;

    std::ostringstream log;
    const auto tasks = pulse::make_tasks(d, cfg, &log);
    REQUIRE(tasks.size() == 1);
    REQUIRE(tasks[0].subject_id == d.subjects[0].id);
    REQUIRE_THAT(log.str(), Catch::Matchers::ContainsSubstring("skip_subject"));
    REQUIRE_THAT(log.str(), Catch::Matchers::ContainsSubstring(d.subjects[1].id));

    const auto quiet = pulse::make_tasks(d, cfg, nullptr);  // silent caller still gets the same split
    REQUIRE(quiet.size() == 1);
}

TEST_CASE("supervised task building demands references, unsupervised does not") {
    Dataset d = quiet_dataset(4, 2);
    for (auto& s : d.subjects) s.gold.reset();
    MetaConfig cfg = tiny_meta();

    cfg.supervised = true;
    REQUIRE_THROWS_WITH(pulse::make_tasks(d, cfg), Catch::Matchers::ContainsSubstring("no reference pulse"));

    cfg.supervised = false;
    const auto tasks = pulse::make_tasks(d, cfg);
    REQUIRE(tasks.size() == 2);
    for (const Task& t : tasks) REQUIRE(t.labels == LabelSource::Pseudo);
}

TEST_CASE("personalization is pure and a zero inner rate is the identity") {
    const Task task = pulse::make_task(quiet_subject(5, 0), tiny_meta(), LabelSource::Gold);
    MetaConfig cfg = tiny_meta();
    const ModelParams theta = pulse::init_params(cfg.net, 5);
    const ModelParams snapshot = theta;

    cfg.inner_lr = 0.0;
    REQUIRE(same_params(pulse::inner_adapt(theta, task, cfg), theta));

    cfg.inner_lr = 0.005;
    const ModelParams a = pulse::inner_adapt(theta, task, cfg);
    const ModelParams b = pulse::inner_adapt(theta, task, cfg);
    REQUIRE(same_params(a, b));
    REQUIRE(same_params(theta, snapshot));
    REQUIRE(!same_params(a, theta));
}

TEST_CASE("one adaptation step applies the averaged support gradient exactly") {
    const MetaConfig cfg = tiny_meta();
    const Task task = pulse::make_task(quiet_subject(6, 0), cfg, LabelSource::Gold);
    const ModelParams theta = pulse::init_params(cfg.net, 6);

    std::map<std::string, Tensor> mean_grads;
    for (size_t i = 0; i < task.support.size(); ++i) {
        pulse::TsCanModel m = pulse::build_model(cfg.net, theta, true);
        m.g.forward({{"motion", task.support[i].motion},
                     {"appearance", task.support[i].appearance},
                     {"label", task.support_labels[i]}});
        std::map<std::string, Tensor> g = m.g.backward(m.nodes.loss);
        if (mean_grads.empty()) {
            mean_grads = std::move(g);
        } else {
            for (auto& [name, t] : mean_grads) {
                const Tensor& add = g.at(name);
                for (size_t k = 0; k < t.data.size(); ++k) t.data[k] += add.data[k];
            }
        }
    }
    const float inv = 1.0f / static_cast<float>(task.support.size());
    for (auto& [name, t] : mean_grads)
        for (float& v : t.data) v *= inv;
    pulse::OptimizerState sgd = pulse::OptimizerState::sgd(static_cast<float>(cfg.inner_lr));
    const ModelParams expected = pulse::optimizer_step(theta, mean_grads, sgd);

    REQUIRE(same_params(pulse::inner_adapt(theta, task, cfg), expected));
}

TEST_CASE("one support step descends the support loss on nearly every task") {
    const MetaConfig cfg = tiny_meta();
    int descended = 0;
    for (int s = 0; s < 10; ++s) {
        const Task task = pulse::make_task(quiet_subject(40 + static_cast<uint64_t>(s), s), cfg,
                                           LabelSource::Gold);
        const ModelParams theta = pulse::init_params(cfg.net, 900 + static_cast<uint64_t>(s));
        const double before = pulse::evaluate_loss(theta, cfg.net, task.support, task.support_labels);
        const ModelParams adapted = pulse::inner_adapt(theta, task, cfg);
        const double after = pulse::evaluate_loss(adapted, cfg.net, task.support, task.support_labels);
        if (after < before) ++descended;
    }
    INFO(descended << "/10 tasks descended");
    REQUIRE(descended >= 9);
}

TEST_CASE("freezing pins the motion pathway during personalization") {
    MetaConfig cfg = tiny_meta();
    cfg.freeze_motion = true;
    const Task task = pulse::make_task(quiet_subject(7, 0), cfg, LabelSource::Gold);
    const ModelParams theta = pulse::init_params(cfg.net, 7);
    const ModelParams adapted = pulse::inner_adapt(theta, task, cfg);
    for (const char* name : pulse::param_names()) {
        const bool pinned = std::string_view(name).starts_with("motion.") ||
                            std::string_view(name).starts_with("head.");
        INFO(name);
        REQUIRE((adapted.at(name).data == theta.at(name).data) == pinned);
        REQUIRE(adapted.entry(name).trainable == !pinned);
    }
}

TEST_CASE("meta-training rejects degenerate inputs") {
    MetaConfig cfg = tiny_meta();
    const ModelParams theta = pulse::init_params(cfg.net, 8);
    REQUIRE_THROWS_WITH(pulse::meta_train({}, theta, cfg),
                        Catch::Matchers::ContainsSubstring("task list is empty"));

    Task lame = pulse::make_task(quiet_subject(8, 0), cfg, LabelSource::Gold);
    lame.query.clear();
    lame.query_labels.clear();
    REQUIRE_THROWS_WITH(pulse::meta_train({lame}, theta, cfg),
                        Catch::Matchers::ContainsSubstring("no query clips"));

    cfg.first_order = false;
    const Task ok = pulse::make_task(quiet_subject(8, 1), cfg, LabelSource::Gold);
    REQUIRE_THROWS_WITH(pulse::meta_train({ok}, theta, cfg),
                        Catch::Matchers::ContainsSubstring("first-order"));
}

TEST_CASE("a zero outer rate leaves the shared parameters untouched") {
    MetaConfig cfg = tiny_meta();
    cfg.outer_lr = 0.0;
    cfg.epochs = 2;
    Dataset d = quiet_dataset(9, 2);
    const auto tasks = pulse::make_tasks(d, cfg);
    const ModelParams theta = pulse::init_params(cfg.net, 9);
    const pulse::MetaResult res = pulse::meta_train(tasks, theta, cfg);
    REQUIRE(same_params(res.params, theta));
    REQUIRE(res.epoch_query_loss.size() == 2);
}

TEST_CASE("meta-training lowers the post-adaptation query loss") {
    MetaConfig cfg = tiny_meta();
    cfg.epochs = 6;
    Dataset d = quiet_dataset(10, 8);
    const auto tasks = pulse::make_tasks(d, cfg);
    REQUIRE(tasks.size() == 8);
    const ModelParams theta = pulse::init_params(cfg.net, 10);
    const pulse::MetaResult res = pulse::meta_train(tasks, theta, cfg);
    const double before = adapted_query_loss(theta, tasks, cfg);
    const double after = adapted_query_loss(res.params, tasks, cfg);
    INFO("post-adaptation query loss " << before << " -> " << after);
    REQUIRE(after < before);
}

TEST_CASE("a support-as-query task reduces to fine-tuning descent") {
    MetaConfig cfg = tiny_meta();
    cfg.epochs = 12;
    cfg.outer_lr = 0.01;
    Task task = pulse::make_task(quiet_subject(11, 0), cfg, LabelSource::Gold);
    task.query = task.support;
    task.query_labels = task.support_labels;
    const ModelParams theta = pulse::init_params(cfg.net, 11);
    const pulse::MetaResult res = pulse::meta_train({task}, theta, cfg);
    INFO("query loss " << res.epoch_query_loss.front() << " -> " << res.epoch_query_loss.back());
    REQUIRE(res.epoch_query_loss.back() < res.epoch_query_loss.front());
}

TEST_CASE("meta-training is bitwise reproducible under a fixed seed") {
    MetaConfig cfg = tiny_meta();
    cfg.epochs = 2;
    cfg.seed = 77;
    Dataset d = quiet_dataset(12, 3);
    const auto tasks = pulse::make_tasks(d, cfg);
    const ModelParams theta = pulse::init_params(cfg.net, 12);
    std::ostringstream log_a, log_b;
    const pulse::MetaResult a = pulse::meta_train(tasks, theta, cfg, &log_a);
    const pulse::MetaResult b = pulse::meta_train(tasks, theta, cfg, &log_b);
    REQUIRE(same_params(a.params, b.params));
    REQUIRE(a.epoch_query_loss == b.epoch_query_loss);
    REQUIRE(log_a.str() == log_b.str());

    std::istringstream lines(log_a.str());
    std::string line;
    int task_lines = 0, epoch_lines = 0;
    while (std::getline(lines, line)) {
        const nlohmann::json j = nlohmann::json::parse(line);
        REQUIRE(j.contains("epoch"));
        if (j.contains("task")) {
            REQUIRE(j.contains("support_loss"));
            REQUIRE(j.contains("query_loss"));
            ++task_lines;
        } else {
            REQUIRE(j.contains("mean_query_loss"));
            ++epoch_lines;
        }
    }
    REQUIRE(task_lines == 2 * 3);
    REQUIRE(epoch_lines == 2);
}

TEST_CASE("pretraining needs references, descends, and reproduces bitwise") {
    MetaConfig cfg = tiny_meta();
    cfg.epochs = 3;
    Dataset d = quiet_dataset(13, 2);

    Dataset blind = d;
    for (auto& s : blind.subjects) s.gold.reset();
    REQUIRE_THROWS_WITH(pulse::pretrain(blind, cfg),
                        Catch::Matchers::ContainsSubstring("lacks reference pulses"));

    MetaConfig zero = cfg;
    zero.epochs = 0;
    const pulse::PretrainResult untouched = pulse::pretrain(d, zero);
    REQUIRE(same_params(untouched.params, pulse::init_params(cfg.net, cfg.seed)));
    REQUIRE(untouched.epoch_loss.empty());

    std::ostringstream log;
    const pulse::PretrainResult run = pulse::pretrain(d, cfg, &log);
    REQUIRE(run.epoch_loss.size() == 3);
    INFO("pretrain loss " << run.epoch_loss.front() << " -> " << run.epoch_loss.back());
    REQUIRE(run.epoch_loss.back() < run.epoch_loss.front());

    const pulse::PretrainResult again = pulse::pretrain(d, cfg);
    REQUIRE(same_params(run.params, again.params));
    REQUIRE(run.epoch_loss == again.epoch_loss);

    std::istringstream lines(log.str());
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        const nlohmann::json j = nlohmann::json::parse(line);
        REQUIRE(j.contains("epoch"));
        REQUIRE(j.contains("mean_loss"));
        ++n;
    }
    REQUIRE(n == 3);
}

TEST_CASE("test-time adaptation fits the support prefix and marks the query start") {
    const MetaConfig cfg = tiny_meta();
    const SubjectRecord rec = quiet_subject(14, 0);
    const ModelParams theta = pulse::init_params(cfg.net, 14);

    const pulse::AdaptedModel pseudo = pulse::test_adapt(theta, rec, cfg);
    REQUIRE(pseudo.subject_id == rec.id);
    REQUIRE(pseudo.query_start == cfg.support_frames);
    REQUIRE(!same_params(pseudo.params, theta));

    const pulse::AdaptedModel gold = pulse::test_adapt(theta, rec, cfg, LabelSource::Gold);
    REQUIRE(!same_params(gold.params, pseudo.params));

    SubjectRecord blind = rec;
    blind.gold.reset();
    REQUIRE_THROWS_WITH(pulse::test_adapt(theta, blind, cfg, LabelSource::Gold),
                        Catch::Matchers::ContainsSubstring("no reference pulse"));
    const pulse::AdaptedModel fallback = pulse::test_adapt(theta, blind, cfg);
    REQUIRE(same_params(fallback.params, pseudo.params));
}

TEST_CASE("the fine-tuning baseline matches one adaptation step and extends past it") {
    const MetaConfig cfg = tiny_meta();
    const Task task = pulse::make_task(quiet_subject(15, 0), cfg, LabelSource::Gold);
    const ModelParams theta = pulse::init_params(cfg.net, 15);

    REQUIRE_THROWS_AS(pulse::fine_tune_baseline(theta, task, cfg, -1, cfg.inner_lr),
                      std::invalid_argument);
    REQUIRE(same_params(pulse::fine_tune_baseline(theta, task, cfg, 0, cfg.inner_lr), theta));

    const ModelParams one = pulse::fine_tune_baseline(theta, task, cfg, 1, cfg.inner_lr);
    REQUIRE(same_params(one, pulse::inner_adapt(theta, task, cfg)));

    const ModelParams five = pulse::fine_tune_baseline(theta, task, cfg, 5, cfg.inner_lr);
    REQUIRE(!same_params(five, one));
}
