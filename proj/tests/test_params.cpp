#include <cstdio>
#include <filesystem>

#include "catch2/catch_amalgamated.hpp"
#include "pulsebench/params.hpp"

using pulse::ModelParams;
using pulse::OptimizerState;
using pulse::Tensor;

namespace {

ModelParams two_params() {
    ModelParams p;
    p.add("w", Tensor::from({2, 2}, {1.0f, -2.0f, 0.5f, 3.0f}));
    p.add("b", Tensor::from({2}, {0.1f, -0.1f}));
    return p;
}

std::map<std::string, Tensor> like(const ModelParams& p, float fill) {
    std::map<std::string, Tensor> g;
    for (const auto& e : p.entries) g[e.name] = Tensor(e.value.shape, fill);
    return g;
}

}  // namespace

TEST_CASE("sgd with zero learning rate leaves parameters bitwise unchanged") {
    ModelParams p = two_params();
    auto st = OptimizerState::sgd(0.0f);
    ModelParams q = optimizer_step(p, like(p, 1.5f), st);
    for (size_t i = 0; i < p.entries.size(); ++i) REQUIRE(q.entries[i].value.data == p.entries[i].value.data);
}

TEST_CASE("sgd applies p minus lr times g") {
    ModelParams p;
    p.add("w", Tensor::scalar(1.0f));
    auto st = OptimizerState::sgd(0.005f);
    std::map<std::string, Tensor> g;
    g["w"] = Tensor::scalar(2.0f);
    ModelParams q = optimizer_step(p, g, st);
    REQUIRE(q.at("w").data[0] == 0.99f);
}

TEST_CASE("adam first step moves by about the learning rate regardless of gradient scale") {
    for (float gscale : {1e-3f, 1.0f, 1e3f}) {
        ModelParams p;
        p.add("w", Tensor::scalar(0.0f));
        auto st = OptimizerState::adam(0.001f);
        std::map<std::string, Tensor> g;
        g["w"] = Tensor::scalar(gscale);
        ModelParams q = optimizer_step(p, g, st);
        // closed form: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
        const float expect = -0.001f * gscale / (gscale + 1e-8f);
        REQUIRE_THAT(q.at("w").data[0], Catch::Matchers::WithinRel(expect, 1e-4f));
    }
}

TEST_CASE("adam with zero gradients stays put from rest and stays bounded after history") {
    ModelParams p;
    p.add("w", Tensor::scalar(1.0f));
    auto st = OptimizerState::adam(0.001f);

    ModelParams q = optimizer_step(p, like(p, 0.0f), st);
    REQUIRE(q.at("w").data[0] == 1.0f);  // zero moments stay zero

    std::map<std::string, Tensor> g;
    g["w"] = Tensor::scalar(3.0f);
    q = optimizer_step(q, g, st);
    ModelParams r = optimizer_step(q, like(p, 0.0f), st);
    // decayed first moment over decayed second moment cannot exceed a few lr
    REQUIRE(std::abs(r.at("w").data[0] - q.at("w").data[0]) <= 5.0f * st.lr);
}

TEST_CASE("missing gradients and shape mismatches are rejected") {
    ModelParams p = two_params();
    auto st = OptimizerState::sgd(0.1f);
    std::map<std::string, Tensor> g;
    g["w"] = Tensor({2, 2}, 1.0f);  // no gradient for "b"
    REQUIRE_THROWS_AS(optimizer_step(p, g, st), std::invalid_argument);
    g["b"] = Tensor({3}, 1.0f);  // wrong shape
    REQUIRE_THROWS_AS(optimizer_step(p, g, st), std::invalid_argument);
}

TEST_CASE("non-trainable entries pass through both optimizers bitwise") {
    for (bool adam : {false, true}) {
        ModelParams p = two_params();
        p.set_trainable("w", false);
        auto st = adam ? OptimizerState::adam(0.1f) : OptimizerState::sgd(0.1f);
        std::map<std::string, Tensor> g;
        g["b"] = Tensor({2}, 1.0f);  // frozen "w" needs no gradient
        ModelParams q = optimizer_step(p, g, st);
        REQUIRE(q.at("w").data == p.at("w").data);
        REQUIRE(q.at("b").data != p.at("b").data);
    }
}

TEST_CASE("checkpoint files round-trip bitwise") {
    ModelParams p;
    std::mt19937 rng(77);
    std::uniform_real_distribution<float> d(-2.0f, 2.0f);
    Tensor t1({3, 4, 2, 2});
    for (auto& v : t1.data) v = d(rng);
    Tensor t2({17});
    for (auto& v : t2.data) v = d(rng);
    p.add("conv.w", t1);
    p.add("head.b", t2);

    const auto path = std::filesystem::temp_directory_path() / "pb_ckpt_test.bin";
    pulse::save_params(p, path.string());
    ModelParams q = pulse::load_params(path.string());
    REQUIRE(q.entries.size() == 2);
    REQUIRE(q.entries[0].name == "conv.w");
    REQUIRE(q.entries[0].value.shape == t1.shape);
    REQUIRE(q.entries[0].value.data == t1.data);
    REQUIRE(q.entries[1].name == "head.b");
    REQUIRE(q.entries[1].value.data == t2.data);
    std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected with a clear error") {
    const auto dir = std::filesystem::temp_directory_path();
    const auto bad_magic = dir / "pb_bad_magic.bin";
    {
        std::ofstream os(bad_magic, std::ios::binary);
        os.write("NOTAPARM", 8);
    }
    REQUIRE_THROWS_WITH(pulse::load_params(bad_magic.string()),
                        Catch::Matchers::ContainsSubstring("bad magic"));

    const auto truncated = dir / "pb_truncated.bin";
    {
        ModelParams p;
        p.add("w", Tensor({16}, 1.0f));
        pulse::save_params(p, truncated.string());
        std::filesystem::resize_file(truncated, 30);
    }
    REQUIRE_THROWS_WITH(pulse::load_params(truncated.string()),
                        Catch::Matchers::ContainsSubstring("truncated"));

    REQUIRE_THROWS_WITH(pulse::load_params((dir / "pb_does_not_exist.bin").string()),
                        Catch::Matchers::ContainsSubstring("cannot open"));
    std::filesystem::remove(bad_magic);
    std::filesystem::remove(truncated);
}

TEST_CASE("duplicate parameter names are rejected") {
    ModelParams p;
    p.add("w", Tensor::scalar(1.0f));
    REQUIRE_THROWS_AS(p.add("w", Tensor::scalar(2.0f)), std::invalid_argument);
}
