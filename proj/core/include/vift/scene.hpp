#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace vift {

// Closed symbol alphabet: 3 shapes x 4 colors plus the empty patch.
inline constexpr std::array<const char*, 3> kShapeNames = {"square", "circle", "triangle"};
inline constexpr std::array<const char*, 3> kShapePlurals = {"squares", "circles", "triangles"};
inline constexpr std::array<const char*, 4> kColorNames = {"red", "blue", "green", "yellow"};
inline constexpr int kEmptySymbol = 0;
inline constexpr int kNumSymbols = 1 + static_cast<int>(kShapeNames.size() * kColorNames.size());

inline int symbol_code(int shape, int color) {
    if (shape < 0 || shape >= static_cast<int>(kShapeNames.size()) || color < 0 ||
        color >= static_cast<int>(kColorNames.size())) {
        throw std::invalid_argument("symbol_code: class out of range");
    }
    return 1 + shape * static_cast<int>(kColorNames.size()) + color;
}
inline int symbol_shape(int code) { return (code - 1) / static_cast<int>(kColorNames.size()); }
inline int symbol_color(int code) { return (code - 1) % static_cast<int>(kColorNames.size()); }

// Rendered P x P patch grid; the "image" side of every multimodal record.
struct ToyImage {
    std::size_t patch_grid = 0;
    std::vector<int> grid;  // P*P symbol codes, row-major

    bool valid() const { return grid.size() == patch_grid * patch_grid; }
};

struct SceneObject {
    int shape = 0;
    int color = 0;
    std::size_t patch = 0;
};

// Symbolic scene; ground truth for captions and the answer oracle.
struct SceneSpec {
    std::vector<SceneObject> objects;  // placements distinct, sorted by patch
};

inline ToyImage render_scene(const SceneSpec& spec, std::size_t patch_grid) {
    ToyImage img;
    img.patch_grid = patch_grid;
    img.grid.assign(patch_grid * patch_grid, kEmptySymbol);
    for (const auto& obj : spec.objects) {
        if (obj.patch >= img.grid.size()) throw std::invalid_argument("render_scene: patch index out of grid");
        if (img.grid[obj.patch] != kEmptySymbol) throw std::invalid_argument("render_scene: placement collision");
        img.grid[obj.patch] = symbol_code(obj.shape, obj.color);
    }
    return img;
}

// Canonical caption, objects in patch order: "a red square , a blue circle ."
inline std::string caption_of(const SceneSpec& spec) {
    if (spec.objects.empty()) return "an empty scene .";
    std::string text;
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
        if (i > 0) text += " , ";
        const auto& obj = spec.objects[i];
        text += "a ";
        text += kColorNames[static_cast<std::size_t>(obj.color)];
        text += " ";
        text += kShapeNames[static_cast<std::size_t>(obj.shape)];
    }
    text += " .";
    return text;
}

// Recovers the object multiset (shape, color pairs) from a canonical
// caption. Placement is not encoded, so patches come back as 0,1,2,...
inline SceneSpec parse_caption(const std::string& caption) {
    SceneSpec spec;
    if (caption == "an empty scene .") return spec;
    std::vector<std::string> words;
    std::string cur;
    for (char c : caption) {
        if (c == ' ') {
            if (!cur.empty()) words.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) words.push_back(cur);
    std::size_t i = 0, patch = 0;
    while (i < words.size()) {
        if (words[i] == ".") break;
        if (words[i] == ",") {
            ++i;
            continue;
        }
        if (words[i] != "a" || i + 2 >= words.size()) throw std::invalid_argument("parse_caption: malformed caption");
        int color = -1, shape = -1;
        for (std::size_t c = 0; c < kColorNames.size(); ++c) {
            if (words[i + 1] == kColorNames[c]) color = static_cast<int>(c);
        }
        for (std::size_t s = 0; s < kShapeNames.size(); ++s) {
            if (words[i + 2] == kShapeNames[s]) shape = static_cast<int>(s);
        }
        if (color < 0 || shape < 0) throw std::invalid_argument("parse_caption: unknown object words");
        spec.objects.push_back({shape, color, patch++});
        i += 3;
    }
    return spec;
}

// FNV-1a over (patch, code) pairs; stable across platforms. Split parity on
// the hash keeps evaluation scenes disjoint from training scenes by
// construction.
inline std::uint64_t scene_hash(const SceneSpec& spec) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t x) {
        for (int b = 0; b < 8; ++b) {
            h ^= (x >> (b * 8)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& obj : spec.objects) {
        mix(obj.patch);
        mix(static_cast<std::uint64_t>(symbol_code(obj.shape, obj.color)));
    }
    return h;
}

// ---------------------------------------------------------------------------
// Question templates and the brute-force oracle. Answers are exhaustive
// enumerations over the object list; comparisons are strict ("more" on a tie
// answers "no").
// ---------------------------------------------------------------------------

enum class QuestionKind { count_color, count_shape, compare_shapes, compare_colors, existence };

struct Question {
    QuestionKind kind;
    int a = 0;  // color or shape index depending on kind
    int b = 0;  // second operand for comparisons; shape index for existence
};

inline std::string question_text(const Question& q) {
    switch (q.kind) {
        case QuestionKind::count_color:
            return std::string("how many ") + kColorNames[static_cast<std::size_t>(q.a)] + " items ?";
        case QuestionKind::count_shape:
            return std::string("how many ") + kShapePlurals[static_cast<std::size_t>(q.a)] + " ?";
        case QuestionKind::compare_shapes:
            return std::string("are there more ") + kShapePlurals[static_cast<std::size_t>(q.a)] + " than " +
                   kShapePlurals[static_cast<std::size_t>(q.b)] + " ?";
        case QuestionKind::compare_colors:
            return std::string("are there more ") + kColorNames[static_cast<std::size_t>(q.a)] + " items than " +
                   kColorNames[static_cast<std::size_t>(q.b)] + " items ?";
        case QuestionKind::existence:
            return std::string("is there a ") + kColorNames[static_cast<std::size_t>(q.a)] + " " +
                   kShapeNames[static_cast<std::size_t>(q.b)] + " ?";
    }
    throw std::logic_error("question_text: bad kind");
}

inline std::optional<Question> parse_question(const std::string& text) {
    for (int c = 0; c < static_cast<int>(kColorNames.size()); ++c) {
        if (text == question_text({QuestionKind::count_color, c, 0})) return Question{QuestionKind::count_color, c, 0};
        for (int c2 = 0; c2 < static_cast<int>(kColorNames.size()); ++c2) {
            if (c2 != c && text == question_text({QuestionKind::compare_colors, c, c2})) {
                return Question{QuestionKind::compare_colors, c, c2};
            }
        }
        for (int s = 0; s < static_cast<int>(kShapeNames.size()); ++s) {
            if (text == question_text({QuestionKind::existence, c, s})) return Question{QuestionKind::existence, c, s};
        }
    }
    for (int s = 0; s < static_cast<int>(kShapeNames.size()); ++s) {
        if (text == question_text({QuestionKind::count_shape, s, 0})) return Question{QuestionKind::count_shape, s, 0};
        for (int s2 = 0; s2 < static_cast<int>(kShapeNames.size()); ++s2) {
            if (s2 != s && text == question_text({QuestionKind::compare_shapes, s, s2})) {
                return Question{QuestionKind::compare_shapes, s, s2};
            }
        }
    }
    return std::nullopt;
}

inline std::string oracle_answer(const SceneSpec& spec, const Question& q) {
    auto count_if = [&spec](auto pred) {
        std::size_t n = 0;
        for (const auto& obj : spec.objects) {
            if (pred(obj)) ++n;
        }
        return n;
    };
    switch (q.kind) {
        case QuestionKind::count_color:
            return std::to_string(count_if([&q](const SceneObject& o) { return o.color == q.a; }));
        case QuestionKind::count_shape:
            return std::to_string(count_if([&q](const SceneObject& o) { return o.shape == q.a; }));
        case QuestionKind::compare_shapes: {
            const auto na = count_if([&q](const SceneObject& o) { return o.shape == q.a; });
            const auto nb = count_if([&q](const SceneObject& o) { return o.shape == q.b; });
            return na > nb ? "yes" : "no";
        }
        case QuestionKind::compare_colors: {
            const auto na = count_if([&q](const SceneObject& o) { return o.color == q.a; });
            const auto nb = count_if([&q](const SceneObject& o) { return o.color == q.b; });
            return na > nb ? "yes" : "no";
        }
        case QuestionKind::existence:
            return count_if([&q](const SceneObject& o) { return o.color == q.a && o.shape == q.b; }) > 0 ? "yes"
                                                                                                         : "no";
    }
    throw std::logic_error("oracle_answer: bad kind");
}

inline std::string oracle_answer(const SceneSpec& spec, const std::string& question) {
    const auto parsed = parse_question(question);
    if (!parsed) throw std::invalid_argument("oracle_answer: unknown question template: " + question);
    return oracle_answer(spec, *parsed);
}

}  // namespace vift
