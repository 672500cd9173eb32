#include "vift/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "vift/rng.hpp"

namespace vift {

using nlohmann::json;

const std::vector<std::string>& caption_query_pool() {
    static const std::vector<std::string> pool = {
        "describe the image .",
        "what is in the image ?",
        "list the objects in the image .",
        "what does the image show ?",
        "give a caption for the image .",
        "what can you see in the image ?",
        "tell me what is in the image .",
        "provide a short description of the image .",
        "what objects are shown in the image ?",
        "please describe the picture .",
        "briefly describe this image .",
        "what is shown in the picture ?",
    };
    return pool;
}

SceneSpec sample_scene(Rng& rng, std::size_t patch_grid, int hash_parity) {
    const std::size_t n_patches = patch_grid * patch_grid;
    for (;;) {
        SceneSpec spec;
        const std::size_t n_obj = 1 + rng.index(6);  // 1..6 objects
        std::vector<std::size_t> patches(n_patches);
        for (std::size_t i = 0; i < n_patches; ++i) patches[i] = i;
        rng.shuffle(patches);
        for (std::size_t i = 0; i < n_obj; ++i) {
            SceneObject obj;
            obj.shape = static_cast<int>(rng.index(kShapeNames.size()));
            obj.color = static_cast<int>(rng.index(kColorNames.size()));
            obj.patch = patches[i];
            spec.objects.push_back(obj);
        }
        std::sort(spec.objects.begin(), spec.objects.end(),
                  [](const SceneObject& a, const SceneObject& b) { return a.patch < b.patch; });
        if (static_cast<int>(scene_hash(spec) & 1ULL) == hash_parity) return spec;
    }
}

Question sample_question(Rng& rng, const SceneSpec& scene) {
    Question q;
    switch (rng.index(5)) {
        case 0:
            q.kind = QuestionKind::count_color;
            q.a = static_cast<int>(rng.index(kColorNames.size()));
            break;
        case 1:
            q.kind = QuestionKind::count_shape;
            q.a = static_cast<int>(rng.index(kShapeNames.size()));
            break;
        case 2:
            q.kind = QuestionKind::compare_shapes;
            q.a = static_cast<int>(rng.index(kShapeNames.size()));
            q.b = (q.a + 1 + static_cast<int>(rng.index(kShapeNames.size() - 1))) %
                  static_cast<int>(kShapeNames.size());
            break;
        case 3:
            q.kind = QuestionKind::compare_colors;
            q.a = static_cast<int>(rng.index(kColorNames.size()));
            q.b = (q.a + 1 + static_cast<int>(rng.index(kColorNames.size() - 1))) %
                  static_cast<int>(kColorNames.size());
            break;
        default:
            q.kind = QuestionKind::existence;
            // Half the time target an object that is present, so yes/no stays
            // balanced instead of drifting toward "no".
            if (!scene.objects.empty() && rng.coin()) {
                const auto& obj = scene.objects[rng.index(scene.objects.size())];
                q.a = obj.color;
                q.b = obj.shape;
            } else {
                q.a = static_cast<int>(rng.index(kColorNames.size()));
                q.b = static_cast<int>(rng.index(kShapeNames.size()));
            }
            break;
    }
    return q;
}

std::vector<CaptionRecord> gen_caption_dataset(std::size_t n, std::uint64_t seed, std::size_t patch_grid) {
    Rng rng(seed);
    const auto& pool = caption_query_pool();
    std::vector<CaptionRecord> records;
    records.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const SceneSpec scene = sample_scene(rng, patch_grid, 0);
        CaptionRecord rec;
        rec.image = render_scene(scene, patch_grid);
        rec.query = pool[rng.index(pool.size())];
        rec.response = caption_of(scene);
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<TextRecord> gen_text_task_dataset(std::size_t n, std::uint64_t seed, std::size_t patch_grid) {
    Rng rng(seed);
    std::vector<TextRecord> records;
    records.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const SceneSpec scene = sample_scene(rng, patch_grid, 0);
        const Question q = sample_question(rng, scene);
        TextRecord rec;
        rec.query = caption_of(scene) + " " + question_text(q);
        rec.response = oracle_answer(scene, q);
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<CompositeRecord> gen_composite_eval(std::size_t n, std::uint64_t seed, std::size_t patch_grid) {
    Rng rng(seed);
    std::vector<CompositeRecord> records;
    records.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const SceneSpec scene = sample_scene(rng, patch_grid, 1);
        const Question q = sample_question(rng, scene);
        CompositeRecord rec;
        rec.image = render_scene(scene, patch_grid);
        rec.question = question_text(q);
        rec.answer = oracle_answer(scene, q);
        records.push_back(std::move(rec));
    }
    return records;
}

namespace {

std::size_t grid_side(std::size_t cells, const std::string& where) {
    std::size_t p = 0;
    while (p * p < cells) ++p;
    if (p * p != cells) throw std::runtime_error(where + ": grid length is not a perfect square");
    return p;
}

ToyImage image_from_json(const json& j, const std::string& where) {
    ToyImage img;
    const auto& grid = j.at("grid");
    if (!grid.is_array()) throw std::runtime_error(where + ": grid must be an array");
    for (const auto& cell : grid) {
        const int code = cell.get<int>();
        if (code < 0 || code >= kNumSymbols) throw std::runtime_error(where + ": symbol code out of range");
        img.grid.push_back(code);
    }
    img.patch_grid = grid_side(img.grid.size(), where);
    return img;
}

json record_to_json(const Record& record) {
    json j;
    if (const auto* cap = std::get_if<CaptionRecord>(&record)) {
        j["kind"] = "caption";
        j["grid"] = cap->image.grid;
        j["query"] = cap->query;
        j["response"] = cap->response;
    } else if (const auto* txt = std::get_if<TextRecord>(&record)) {
        j["kind"] = "text";
        j["query"] = txt->query;
        j["response"] = txt->response;
    } else {
        const auto& comp = std::get<CompositeRecord>(record);
        j["kind"] = "composite";
        j["grid"] = comp.image.grid;
        j["question"] = comp.question;
        j["answer"] = comp.answer;
    }
    return j;
}

Record record_from_json(const json& j, const std::string& where) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "caption") {
        CaptionRecord rec;
        rec.image = image_from_json(j, where);
        rec.query = j.at("query").get<std::string>();
        rec.response = j.at("response").get<std::string>();
        return rec;
    }
    if (kind == "text") {
        TextRecord rec;
        rec.query = j.at("query").get<std::string>();
        rec.response = j.at("response").get<std::string>();
        return rec;
    }
    if (kind == "composite") {
        CompositeRecord rec;
        rec.image = image_from_json(j, where);
        rec.question = j.at("question").get<std::string>();
        rec.answer = j.at("answer").get<std::string>();
        return rec;
    }
    throw std::runtime_error(where + ": unknown record kind '" + kind + "'");
}

}  // namespace

void write_file_atomic(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for writing: " + tmp);
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw std::runtime_error("rename failed: " + path);
    }
}

void write_jsonl(const std::string& path, const std::vector<Record>& records) {
    std::string out;
    for (const auto& record : records) {
        out += record_to_json(record).dump();
        out += '\n';
    }
    write_file_atomic(path, out);
}

std::vector<Record> read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::vector<Record> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(line_no);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error(where + ": malformed JSON line (" + e.what() + ")");
        }
        records.push_back(record_from_json(j, where));
    }
    return records;
}

std::vector<Record> to_records(const std::vector<CaptionRecord>& v) {
    return std::vector<Record>(v.begin(), v.end());
}
std::vector<Record> to_records(const std::vector<TextRecord>& v) { return std::vector<Record>(v.begin(), v.end()); }
std::vector<Record> to_records(const std::vector<CompositeRecord>& v) {
    return std::vector<Record>(v.begin(), v.end());
}

std::vector<CaptionRecord> caption_records(const std::vector<Record>& records) {
    std::vector<CaptionRecord> out;
    for (const auto& r : records) {
        if (const auto* c = std::get_if<CaptionRecord>(&r)) out.push_back(*c);
    }
    return out;
}
std::vector<TextRecord> text_records(const std::vector<Record>& records) {
    std::vector<TextRecord> out;
    for (const auto& r : records) {
        if (const auto* t = std::get_if<TextRecord>(&r)) out.push_back(*t);
    }
    return out;
}
std::vector<CompositeRecord> composite_records(const std::vector<Record>& records) {
    std::vector<CompositeRecord> out;
    for (const auto& r : records) {
        if (const auto* c = std::get_if<CompositeRecord>(&r)) out.push_back(*c);
    }
    return out;
}

}  // namespace vift
