#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "pulsebench/synth.hpp"

namespace {

namespace fs = std::filesystem;
using namespace pulse;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("tmp_test_data") / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Dataset tiny_dataset(uint64_t seed, const std::string& dir, int n = 3) {
    DomainKnobs k = domain_a();
    k.height = k.width = 24;
    return generate_dataset(seed, n, 8.0, k, dir);
}

}  // namespace

TEST_CASE("generated dataset lays out manifest, videos and gold traces") {
    TempDir tmp("layout");
    const Dataset d = tiny_dataset(5, tmp.str());
    REQUIRE(d.subjects.size() == 3);
    REQUIRE(fs::exists(tmp.path / "manifest.json"));
    for (const auto& s : d.subjects) {
        REQUIRE(fs::exists(tmp.path / s.id / "video.pbvid"));
        REQUIRE(fs::exists(tmp.path / s.id / "gold.csv"));
    }
    nlohmann::json manifest;
    std::ifstream(tmp.path / "manifest.json") >> manifest;
    REQUIRE(manifest.at("name") == "domain_a");
    REQUIRE(manifest.at("subjects").size() == 3);
    for (const auto& entry : manifest.at("subjects")) {
        REQUIRE(entry.contains("id"));
        REQUIRE(entry.contains("frames"));
        REQUIRE(entry.contains("gold"));
        REQUIRE(entry.contains("skin_class"));
        // every generator knob is recorded per subject
        const auto& prof = entry.at("profile");
        for (const char* field : {"id", "skin_tone", "melanin_level", "hr_bpm", "hr_drift_bpm",
                                  "hr_drift_period_s", "pulse_strength", "noise_sigma", "flicker_amp",
                                  "motion_amp", "stream"})
            REQUIRE(prof.contains(field));
    }
}

TEST_CASE("dataset round-trips exactly through the loader") {
    TempDir tmp("roundtrip");
    const Dataset written = tiny_dataset(9, tmp.str());
    const Dataset read = load_dataset(tmp.str());
    REQUIRE(read.name == written.name);
    REQUIRE(read.fps == written.fps);
    REQUIRE(read.height == written.height);
    REQUIRE(read.width == written.width);
    REQUIRE(read.subjects.size() == written.subjects.size());
    REQUIRE(read.has_gold());
    for (size_t i = 0; i < read.subjects.size(); ++i) {
        const auto& a = written.subjects[i];
        const auto& b = read.subjects[i];
        REQUIRE(a.id == b.id);
        REQUIRE(a.skin_class == b.skin_class);
        REQUIRE(a.frames.data == b.frames.data);
        REQUIRE(a.gold->samples == b.gold->samples);
        REQUIRE(a.profile == b.profile);
    }
    REQUIRE(read.subject(read.subjects[1].id).id == read.subjects[1].id);
    REQUIRE_THROWS_WITH(read.subject("zz99"), Catch::Matchers::ContainsSubstring("zz99"));
}

TEST_CASE("same seed regenerates bitwise-identical files") {
    TempDir t1("det1"), t2("det2");
    tiny_dataset(21, t1.str());
    tiny_dataset(21, t2.str());
    REQUIRE(slurp(t1.path / "manifest.json") == slurp(t2.path / "manifest.json"));
    for (const auto& id : {"a00", "a01", "a02"}) {
        REQUIRE(slurp(t1.path / id / "video.pbvid") == slurp(t2.path / id / "video.pbvid"));
        REQUIRE(slurp(t1.path / id / "gold.csv") == slurp(t2.path / id / "gold.csv"));
    }
}

TEST_CASE("loader names the subject and file when a video is missing") {
    TempDir tmp("missing");
    tiny_dataset(5, tmp.str());
    fs::remove(tmp.path / "a01" / "video.pbvid");
    REQUIRE_THROWS_WITH(load_dataset(tmp.str()),
                        Catch::Matchers::ContainsSubstring("a01") &&
                            Catch::Matchers::ContainsSubstring("video.pbvid"));
}

TEST_CASE("loader rejects a gold trace of the wrong length") {
    TempDir tmp("badgold");
    const Dataset d = tiny_dataset(5, tmp.str());
    const int frames = d.subjects[0].frames.frame_count();
    PulseTrace shorter;
    shorter.fps = d.fps;
    shorter.samples.assign(static_cast<size_t>(frames) - 40, 0.25);
    save_gold_csv(shorter, (tmp.path / "a00" / "gold.csv").string());
    REQUIRE_THROWS_WITH(load_dataset(tmp.str()),
                        Catch::Matchers::ContainsSubstring("expected " + std::to_string(frames)) &&
                            Catch::Matchers::ContainsSubstring("got " + std::to_string(frames - 40)));
}

TEST_CASE("loader rejects fps disagreement between manifest and video") {
    TempDir tmp("badfps");
    tiny_dataset(5, tmp.str());
    nlohmann::json manifest;
    std::ifstream(tmp.path / "manifest.json") >> manifest;
    manifest["fps"] = 25.0;
    std::ofstream(tmp.path / "manifest.json") << manifest.dump(2);
    REQUIRE_THROWS_WITH(load_dataset(tmp.str()),
                        Catch::Matchers::ContainsSubstring("fps") &&
                            Catch::Matchers::ContainsSubstring("a00"));
}

TEST_CASE("loader surfaces manifest problems by path") {
    TempDir tmp("badmanifest");
    REQUIRE_THROWS_WITH(load_dataset(tmp.str()), Catch::Matchers::ContainsSubstring("cannot open"));
    std::ofstream(tmp.path / "manifest.json") << "{ not json";
    REQUIRE_THROWS_WITH(load_dataset(tmp.str()), Catch::Matchers::ContainsSubstring("manifest"));
}

TEST_CASE("datasets without gold traces round-trip as unlabeled") {
    TempDir tmp("nogold");
    Dataset d = tiny_dataset(5, tmp.str(), 2);
    for (auto& s : d.subjects) s.gold.reset();
    save_dataset(d, tmp.str());
    const Dataset read = load_dataset(tmp.str());
    REQUIRE_FALSE(read.has_gold());
    for (const auto& s : read.subjects) REQUIRE_FALSE(s.gold.has_value());
}
