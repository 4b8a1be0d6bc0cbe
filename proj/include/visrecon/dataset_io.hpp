#pragma once

#include <nlohmann/json.hpp>

#include "visrecon/brain.hpp"
#include "visrecon/serialize.hpp"

namespace visrecon {

// Directory layout: manifest.json (scene params, split membership, seeds,
// subject metadata) plus one binary tensor file per split per subject.
// Rendered images, latents, features and forward matrices are recomputed
// deterministically from the manifest.

inline std::uint64_t dataset_content_hash(const Dataset& ds) {
    std::uint64_t h = 1469598103934665603ull;
    auto mixin = [&h](std::uint64_t x) { h = (h ^ x) * 1099511628211ull; };
    mixin(ds.seed);
    mixin(static_cast<std::uint64_t>(ds.scenes.size()));
    for (const SceneParams& p : ds.scenes) {
        mixin(static_cast<std::uint64_t>(p.shape * 64 + p.color * 8 + p.background * 2 + (p.textured ? 1 : 0)));
        std::uint64_t bits;
        std::memcpy(&bits, &p.pos_x, 8);
        mixin(bits);
        std::memcpy(&bits, &p.pos_y, 8);
        mixin(bits);
        std::memcpy(&bits, &p.size, 8);
        mixin(bits);
    }
    return h;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json m;
    m["seed"] = ds.seed;
    m["train_scenes"] = ds.train_scenes;
    m["test_scenes"] = ds.test_scenes;
    m["repeats"] = ds.repeats;
    m["snr"] = ds.snr;
    m["content_hash"] = dataset_content_hash(ds);
    nlohmann::json scenes = nlohmann::json::array();
    for (const SceneParams& p : ds.scenes)
        scenes.push_back({{"shape", p.shape},
                          {"color", p.color},
                          {"background", p.background},
                          {"pos_x", p.pos_x},
                          {"pos_y", p.pos_y},
                          {"size", p.size},
                          {"textured", p.textured}});
    m["scenes"] = std::move(scenes);
    nlohmann::json subjects = nlohmann::json::array();
    for (std::size_t s = 0; s < ds.subjects.size(); ++s) {
        const SubjectModel& sm = ds.subjects[s];
        subjects.push_back({{"id", sm.subject_id},
                            {"voxels", sm.d},
                            {"sigma", sm.sigma},
                            {"train_scene_ids", ds.data[s].train_scene_ids},
                            {"test_scene_ids", ds.data[s].test_scene_ids}});
    }
    m["subjects"] = std::move(subjects);
    atomic_write_text(dir / "manifest.json", m.dump(2) + "\n");

    for (std::size_t s = 0; s < ds.data.size(); ++s) {
        const SubjectData& sd = ds.data[s];
        TensorMap train;
        train.put("voxels", sd.train_voxels);
        save_tensors(dir / ("subject" + std::to_string(s) + "_train.bin"), train);
        TensorMap test;
        test.put("voxels", sd.test_voxels);
        test.put("repeats", sd.test_repeats);
        save_tensors(dir / ("subject" + std::to_string(s) + "_test.bin"), test);
    }
}

// rebuilds scenes and forward models from the manifest, then attaches the
// stored voxel records
inline Dataset load_dataset(const std::filesystem::path& dir, const FeaturePyramid& fp) {
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw data_error("dataset manifest parse failure: " + std::string(e.what()));
    }
    Dataset ds;
    try {
        ds.seed = m.at("seed").get<std::uint64_t>();
        ds.train_scenes = m.at("train_scenes").get<int>();
        ds.test_scenes = m.at("test_scenes").get<int>();
        ds.repeats = m.at("repeats").get<int>();
        ds.snr = m.at("snr").get<double>();
        for (const auto& js : m.at("scenes")) {
            SceneParams p;
            p.shape = js.at("shape").get<int>();
            p.color = js.at("color").get<int>();
            p.background = js.at("background").get<int>();
            p.pos_x = js.at("pos_x").get<double>();
            p.pos_y = js.at("pos_y").get<double>();
            p.size = js.at("size").get<double>();
            p.textured = js.at("textured").get<bool>();
            p.validate();
            ds.scenes.push_back(p);
        }
        if (m.at("content_hash").get<std::uint64_t>() != dataset_content_hash(ds))
            throw data_error("dataset manifest content hash mismatch");

        std::vector<Tensor> calibration = dataset_calibration_features(ds.scenes, fp);
        int s = 0;
        for (const auto& js : m.at("subjects")) {
            SubjectModel sm = make_subject_model(js.at("id").get<int>(), js.at("voxels").get<int>(),
                                                 derive_seed(ds.seed, "subject-model", s), calibration, ds.snr);
            if (std::abs(sm.sigma - js.at("sigma").get<double>()) > 1e-9 * (1.0 + sm.sigma))
                throw data_error("dataset manifest disagrees with rebuilt subject model");
            SubjectData sd;
            sd.subject_id = sm.subject_id;
            sd.train_scene_ids = js.at("train_scene_ids").get<std::vector<int>>();
            sd.test_scene_ids = js.at("test_scene_ids").get<std::vector<int>>();
            std::map<std::string, std::string> meta;
            TensorMap train = load_tensors(dir / ("subject" + std::to_string(s) + "_train.bin"));
            sd.train_voxels = train.get("voxels");
            TensorMap test = load_tensors(dir / ("subject" + std::to_string(s) + "_test.bin"));
            sd.test_voxels = test.get("voxels");
            sd.test_repeats = test.get("repeats");
            check(sd.train_voxels.shape[0] == static_cast<int>(sd.train_scene_ids.size()),
                  "dataset: train record count mismatch");
            check(sd.test_voxels.shape[0] == static_cast<int>(sd.test_scene_ids.size()),
                  "dataset: test record count mismatch");
            ds.subjects.push_back(std::move(sm));
            ds.data.push_back(std::move(sd));
            ++s;
        }
    } catch (const nlohmann::json::exception& e) {
        throw data_error("dataset manifest field failure: " + std::string(e.what()));
    }
    return ds;
}

}  // namespace visrecon
