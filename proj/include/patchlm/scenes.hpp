#pragma once

#include "patchlm/image.hpp"
#include "patchlm/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchlm {

// ---------------------------------------------------------------------------
// Scene model: a grid of colored shapes on a noisy background, plus the
// ground-truth annotation every question is answered from.
// ---------------------------------------------------------------------------

enum class Shape : uint8_t { Square, Disc, Triangle };
enum class Color : uint8_t { Red, Green, Blue, Yellow };

constexpr int kShapeCount = 3;
constexpr int kColorCount = 4;

inline const char* shape_word(Shape s) {
    switch (s) {
        case Shape::Square: return "square";
        case Shape::Disc: return "disc";
        case Shape::Triangle: return "triangle";
    }
    return "?";
}

inline const char* color_word(Color c) {
    switch (c) {
        case Color::Red: return "red";
        case Color::Green: return "green";
        case Color::Blue: return "blue";
        case Color::Yellow: return "yellow";
    }
    return "?";
}

// canonical RGB per color word
inline void color_rgb(Color c, uint8_t out[3]) {
    switch (c) {
        case Color::Red: out[0] = 255; out[1] = 0; out[2] = 0; return;
        case Color::Green: out[0] = 0; out[1] = 255; out[2] = 0; return;
        case Color::Blue: out[0] = 0; out[1] = 0; out[2] = 255; return;
        case Color::Yellow: out[0] = 255; out[1] = 255; out[2] = 0; return;
    }
}

struct SceneObject {
    int row = 0;
    int col = 0;
    Shape shape = Shape::Square;
    Color color = Color::Red;
    int size = 10; // pixels
};

struct SceneAnnotation {
    int grid_rows = 4;
    int grid_cols = 4;
    std::vector<SceneObject> objects; // at most one per cell

    int count_color(Color c) const {
        int n = 0;
        for (const auto& o : objects) n += (o.color == c) ? 1 : 0;
        return n;
    }
};

constexpr int kCellPixels = 16;

namespace detail_render {

inline void draw_object(Image& img, const SceneObject& o) {
    uint8_t rgb[3];
    color_rgb(o.color, rgb);
    const int cx = o.col * kCellPixels + kCellPixels / 2;
    const int cy = o.row * kCellPixels + kCellPixels / 2;
    const double half = o.size / 2.0;
    const int y0 = cy - o.size / 2, y1 = cy + o.size / 2;
    const int x0 = cx - o.size / 2, x1 = cx + o.size / 2;
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            bool inside = false;
            switch (o.shape) {
                case Shape::Square:
                    inside = true;
                    break;
                case Shape::Disc: {
                    const double dx = x - cx + 0.5, dy = y - cy + 0.5;
                    inside = dx * dx + dy * dy <= half * half;
                    break;
                }
                case Shape::Triangle: {
                    // apex at top, base at bottom
                    const double t = (y - y0 + 0.5) / static_cast<double>(o.size);
                    const double hw = t * half;
                    const double dx = x - cx + 0.5;
                    inside = dx >= -hw && dx <= hw;
                    break;
                }
            }
            if (inside)
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
        }
    }
    // keep the cell center exactly canonical for every shape and size
    for (int c = 0; c < 3; ++c) img.at(cy, cx, c) = rgb[c];
}

} // namespace detail_render

struct Scene {
    Image image;
    SceneAnnotation annotation;
};

// Deterministic scene synthesis. Scenes whose objects admit no uniquely
// identifiable (color, shape) pair are rejected and resampled, so relation
// questions are always well-posed.
inline Scene generate_scene(uint64_t seed, int grid_rows = 4, int grid_cols = 4,
                            int object_count = 4) {
    const int cells = grid_rows * grid_cols;
    if (object_count < 0 || object_count > cells)
        throw std::invalid_argument("generate_scene: object_count exceeds grid cells");
    for (uint64_t attempt = 0;; ++attempt) {
        SplitMix64 rng(derive_seed(seed, 0x7363656e65ULL, attempt));
        SceneAnnotation ann;
        ann.grid_rows = grid_rows;
        ann.grid_cols = grid_cols;
        std::vector<int> cell_order(cells);
        for (int i = 0; i < cells; ++i) cell_order[i] = i;
        for (int i = cells; i > 1; --i)
            std::swap(cell_order[i - 1], cell_order[rng.next_below(i)]);
        for (int k = 0; k < object_count; ++k) {
            SceneObject o;
            o.row = cell_order[k] / grid_cols;
            o.col = cell_order[k] % grid_cols;
            o.shape = static_cast<Shape>(rng.next_below(kShapeCount));
            o.color = static_cast<Color>(rng.next_below(kColorCount));
            o.size = 8 + 2 * static_cast<int>(rng.next_below(3)); // 8, 10 or 12
            ann.objects.push_back(o);
        }
        if (object_count > 0) {
            bool has_unique = false;
            for (const auto& a : ann.objects) {
                int same = 0;
                for (const auto& b : ann.objects)
                    same += (a.shape == b.shape && a.color == b.color) ? 1 : 0;
                if (same == 1) {
                    has_unique = true;
                    break;
                }
            }
            if (!has_unique) continue;
        }
        // textured background: gray noise at 96 +/- 16
        Image img(grid_rows * kCellPixels, grid_cols * kCellPixels);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const uint8_t v = static_cast<uint8_t>(80 + rng.next_below(33));
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = v;
            }
        for (const auto& o : ann.objects) detail_render::draw_object(img, o);
        return {std::move(img), std::move(ann)};
    }
}

// ---------------------------------------------------------------------------
// QA synthesis. Every gold answer is recomputable from the annotation alone.
// ---------------------------------------------------------------------------

struct QASample {
    std::string image;    // relative path within the split directory
    std::string question;
    std::string answer;
    std::string task;     // color | count | relation
    long long dialogue_id = -1;
    int turn = 0;
};

inline std::string color_question(const SceneObject& o) {
    return std::string("What color is the ") + shape_word(o.shape) + " at row " +
           std::to_string(o.row + 1) + ", column " + std::to_string(o.col + 1) + "?";
}

inline std::string count_question(Color c) {
    return std::string("How many ") + color_word(c) + " objects are there?";
}

// "to the right of": same row, strictly greater column.
inline bool has_shape_right_of(const SceneAnnotation& ann, const SceneObject& ref, Shape target) {
    for (const auto& o : ann.objects)
        if (o.shape == target && o.row == ref.row && o.col > ref.col) return true;
    return false;
}

inline std::vector<QASample> make_qa(const SceneAnnotation& ann, uint64_t seed,
                                     const std::string& image_ref, long long scene_id) {
    SplitMix64 rng(derive_seed(seed, 0x7161ULL));
    std::vector<QASample> out;
    if (ann.objects.empty()) {
        const Color c = static_cast<Color>(rng.next_below(kColorCount));
        out.push_back({image_ref, count_question(c), "0", "count", -1, 0});
        return out;
    }
    {
        const auto& o = ann.objects[rng.next_below(ann.objects.size())];
        out.push_back({image_ref, color_question(o), color_word(o.color), "color", -1, 0});
    }
    {
        const Color c = static_cast<Color>(rng.next_below(kColorCount));
        out.push_back(
            {image_ref, count_question(c), std::to_string(ann.count_color(c)), "count", -1, 0});
    }
    {
        std::vector<const SceneObject*> unique;
        for (const auto& a : ann.objects) {
            int same = 0;
            for (const auto& b : ann.objects)
                same += (a.shape == b.shape && a.color == b.color) ? 1 : 0;
            if (same == 1) unique.push_back(&a);
        }
        const SceneObject& ref = *unique[rng.next_below(unique.size())];
        const Shape target = static_cast<Shape>(rng.next_below(kShapeCount));
        const std::string q = std::string("Is there a ") + shape_word(target) +
                              " to the right of the " + color_word(ref.color) + " " +
                              shape_word(ref.shape) + "?";
        out.push_back(
            {image_ref, q, has_shape_right_of(ann, ref, target) ? "yes" : "no", "relation", -1, 0});
    }
    {
        const auto& o = ann.objects[rng.next_below(ann.objects.size())];
        out.push_back({image_ref, color_question(o), color_word(o.color), "color", scene_id, 1});
        const Color c = static_cast<Color>(rng.next_below(kColorCount));
        out.push_back({image_ref, count_question(c), std::to_string(ann.count_color(c)), "count",
                       scene_id, 2});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset persistence: images/NNNNN.ppm plus qa.jsonl.
// ---------------------------------------------------------------------------

struct DatasetSplit {
    std::vector<QASample> samples;
    std::map<std::string, std::shared_ptr<Image>> images; // key = sample.image
};

inline DatasetSplit generate_split(uint64_t seed, int scene_count, int min_objects = 3,
                                   int max_objects = 6, int grid_rows = 4, int grid_cols = 4) {
    if (scene_count < 1) throw std::invalid_argument("empty split");
    if (min_objects < 1 || max_objects < min_objects)
        throw std::invalid_argument("generate_split: bad object count range");
    DatasetSplit split;
    for (int i = 0; i < scene_count; ++i) {
        const uint64_t scene_seed = derive_seed(seed, static_cast<uint64_t>(i));
        SplitMix64 rng(derive_seed(scene_seed, 0x636e74ULL));
        const int objects =
            min_objects + static_cast<int>(rng.next_below(max_objects - min_objects + 1));
        Scene scene = generate_scene(scene_seed, grid_rows, grid_cols, objects);
        char name[32];
        std::snprintf(name, sizeof(name), "images/%05d.ppm", i);
        auto qa = make_qa(scene.annotation, scene_seed, name, i);
        split.images[name] = std::make_shared<Image>(std::move(scene.image));
        split.samples.insert(split.samples.end(), qa.begin(), qa.end());
    }
    return split;
}

inline void write_dataset(const DatasetSplit& split, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    for (const auto& [name, img] : split.images) {
        const std::string path = (fs::path(dir) / name).string();
        const std::string tmp = path + ".tmp";
        ppm::write_file(*img, tmp);
        fs::rename(tmp, path);
    }
    const std::string qa_path = (fs::path(dir) / "qa.jsonl").string();
    const std::string tmp = qa_path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
        for (const auto& s : split.samples) {
            nlohmann::json j;
            j["image"] = s.image;
            j["question"] = s.question;
            j["answer"] = s.answer;
            j["task"] = s.task;
            j["dialogue_id"] = s.dialogue_id;
            j["turn"] = s.turn;
            out << j.dump() << "\n";
        }
    }
    fs::rename(tmp, qa_path);
}

inline DatasetSplit load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const std::string qa_path = (fs::path(dir) / "qa.jsonl").string();
    std::ifstream in(qa_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + qa_path);
    DatasetSplit split;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(qa_path + " line " + std::to_string(line_no) +
                                     ": malformed JSON (" + e.what() + ")");
        }
        QASample s;
        auto need = [&](const char* key) -> const nlohmann::json& {
            auto it = j.find(key);
            if (it == j.end())
                throw std::runtime_error(qa_path + " line " + std::to_string(line_no) +
                                         ": missing field '" + key + "'");
            return *it;
        };
        try {
            s.image = need("image").get<std::string>();
            s.question = need("question").get<std::string>();
            s.answer = need("answer").get<std::string>();
            s.task = need("task").get<std::string>();
            s.dialogue_id = need("dialogue_id").get<long long>();
            s.turn = need("turn").get<int>();
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(qa_path + " line " + std::to_string(line_no) +
                                     ": bad field type (" + e.what() + ")");
        }
        split.samples.push_back(std::move(s));
    }
    for (const auto& s : split.samples) {
        if (split.images.count(s.image)) continue;
        const std::string path = (fs::path(dir) / s.image).string();
        split.images[s.image] = std::make_shared<Image>(ppm::read_file(path));
    }
    return split;
}

} // namespace patchlm
