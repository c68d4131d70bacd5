#pragma once

// On-disk dataset layout and its loader.
//
//   <root>/manifest.json          dataset name, fps, geometry, subject entries
//   <root>/<id>/video.pbvid       frame stack
//   <root>/<id>/gold.csv          reference pulse trace (optional)
//
// Manifest subject entries carry the id, relative file paths, the skin-type
// class, and the full generator profile as free-form metadata.

#include <filesystem>
#include <optional>

#include "json.hpp"
#include "trace.hpp"

namespace pulse {

struct SubjectRecord {
    std::string id;
    FrameSequence frames;
    std::optional<PulseTrace> gold;
    std::string skin_class;
    nlohmann::json profile;
};

struct Dataset {
    std::string name;
    double fps = 0.0;
    int height = 0, width = 0;
    std::vector<SubjectRecord> subjects;

    const SubjectRecord& subject(const std::string& id) const {
        for (const auto& s : subjects)
            if (s.id == id) return s;
        detail::fail("dataset '" + name + "': no subject '" + id + "'");
    }
    bool has_gold() const {
        for (const auto& s : subjects)
            if (!s.gold) return false;
        return !subjects.empty();
    }
};

inline void save_dataset(const Dataset& d, const std::string& root) {
    namespace fs = std::filesystem;
    fs::create_directories(root);
    nlohmann::json manifest;
    manifest["name"] = d.name;
    manifest["fps"] = d.fps;
    manifest["height"] = d.height;
    manifest["width"] = d.width;
    manifest["subjects"] = nlohmann::json::array();
    for (const auto& s : d.subjects) {
        fs::create_directories(fs::path(root) / s.id);
        const std::string video_rel = s.id + "/video.pbvid";
        save_video(s.frames, (fs::path(root) / video_rel).string());
        nlohmann::json entry;
        entry["id"] = s.id;
        entry["frames"] = video_rel;
        if (s.gold) {
            const std::string gold_rel = s.id + "/gold.csv";
            save_gold_csv(*s.gold, (fs::path(root) / gold_rel).string());
            entry["gold"] = gold_rel;
        } else {
            entry["gold"] = nullptr;
        }
        entry["skin_class"] = s.skin_class;
        entry["profile"] = s.profile;
        manifest["subjects"].push_back(entry);
    }
    std::ofstream os(fs::path(root) / "manifest.json");
    if (!os) throw std::runtime_error("dataset '" + root + "': cannot write manifest.json");
    os << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& root) {
    namespace fs = std::filesystem;
    const std::string mpath = (fs::path(root) / "manifest.json").string();
    std::ifstream is(mpath);
    if (!is) throw std::runtime_error("dataset manifest '" + mpath + "': cannot open");
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const std::exception& e) {
        throw std::runtime_error("dataset manifest '" + mpath + "': " + e.what());
    }
    Dataset d;
    d.name = manifest.at("name").get<std::string>();
    d.fps = manifest.at("fps").get<double>();
    d.height = manifest.at("height").get<int>();
    d.width = manifest.at("width").get<int>();
    if (d.fps <= 0.0 || d.height < 1 || d.width < 1)
        throw std::runtime_error("dataset manifest '" + mpath + "': bad fps/geometry");
    for (const auto& entry : manifest.at("subjects")) {
        SubjectRecord s;
        s.id = entry.at("id").get<std::string>();
        s.skin_class = entry.at("skin_class").get<std::string>();
        s.profile = entry.value("profile", nlohmann::json::object());
        const std::string vpath = (fs::path(root) / entry.at("frames").get<std::string>()).string();
        try {
            s.frames = load_video(vpath);
        } catch (const std::exception& e) {
            throw std::runtime_error("subject '" + s.id + "': " + e.what());
        }
        if (std::abs(s.frames.fps - d.fps) > 1e-6)
            throw std::runtime_error("subject '" + s.id + "': video fps " +
                                     std::to_string(s.frames.fps) + " does not match dataset fps " +
                                     std::to_string(d.fps));
        if (s.frames.height != d.height || s.frames.width != d.width)
            throw std::runtime_error("subject '" + s.id + "': video geometry " +
                                     std::to_string(s.frames.height) + "x" + std::to_string(s.frames.width) +
                                     " does not match dataset " + std::to_string(d.height) + "x" +
                                     std::to_string(d.width));
        if (!entry.at("gold").is_null()) {
            const std::string gpath = (fs::path(root) / entry.at("gold").get<std::string>()).string();
            PulseTrace gold;
            try {
                gold = load_gold_csv(gpath, d.fps);
            } catch (const std::exception& e) {
                throw std::runtime_error("subject '" + s.id + "': " + e.what());
            }
            if (static_cast<int>(gold.samples.size()) != s.frames.frame_count())
                throw std::runtime_error("subject '" + s.id + "': gold trace length expected " +
                                         std::to_string(s.frames.frame_count()) + ", got " +
                                         std::to_string(gold.samples.size()));
            s.gold = std::move(gold);
        }
        d.subjects.push_back(std::move(s));
    }
    return d;
}

}  // namespace pulse
