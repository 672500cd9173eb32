#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace vift {

// Closed word-level vocabulary. Every string the corpus can emit tokenizes
// without unknowns; anything else is an error.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kImg = 3;  // reserved image-placeholder token

    Vocab() {
        static const char* words[] = {
            "<pad>", "<bos>", "<eos>", "<img>",
            // scene and caption grammar
            "a", "an", "empty", "scene", ",", ".",
            "red", "blue", "green", "yellow",
            "square", "circle", "triangle", "squares", "circles", "triangles",
            // question grammar
            "how", "many", "items", "?", "are", "there", "more", "than", "is",
            // answers
            "yes", "no", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
            // caption-query pool
            "describe", "the", "image", "what", "in", "list", "objects", "does",
            "show", "give", "caption", "for", "can", "you", "see", "tell", "me",
            "provide", "short", "description", "of", "shown", "please", "briefly",
            "picture", "this",
        };
        for (const char* w : words) {
            if (index_.count(w)) throw std::logic_error("vocab: duplicate word");
            index_[w] = static_cast<int>(words_.size());
            words_.push_back(w);
        }
    }

    static const Vocab& instance() {
        static const Vocab vocab;
        return vocab;
    }

    std::size_t size() const { return words_.size(); }

    int id(const std::string& word) const {
        const auto it = index_.find(word);
        if (it == index_.end()) throw std::invalid_argument("vocab: unknown word '" + word + "'");
        return it->second;
    }

    const std::string& word(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
            throw std::invalid_argument("vocab: token id out of range");
        }
        return words_[static_cast<std::size_t>(id)];
    }

    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> ids;
        std::string cur;
        for (char c : text) {
            if (c == ' ') {
                if (!cur.empty()) ids.push_back(id(cur));
                cur.clear();
            } else {
                cur += c;
            }
        }
        if (!cur.empty()) ids.push_back(id(cur));
        return ids;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string text;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i > 0) text += ' ';
            text += word(ids[i]);
        }
        return text;
    }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace vift
