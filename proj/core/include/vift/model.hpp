#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vift/rng.hpp"
#include "vift/scene.hpp"
#include "vift/tensor.hpp"
#include "vift/vocab.hpp"

namespace vift {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 8;
    std::size_t n_heads = 4;
    std::size_t vocab_size = 0;  // 0 = take the corpus vocabulary size
    std::size_t max_positions = 512;
    std::size_t patch_grid = 4;
    std::size_t d_vision = 32;
    std::uint32_t seed = 1;
    bool tied_head = false;

    std::size_t n_visual_tokens() const { return patch_grid * patch_grid; }

    void validate() const {
        if (n_heads == 0 || d_model % n_heads != 0) {
            throw std::invalid_argument("config: d_model must be divisible by n_heads");
        }
        if (n_layers < 2) throw std::invalid_argument("config: n_layers must be >= 2");
        if (vocab_size < 4) throw std::invalid_argument("config: vocab_size below special-token count");
        if (patch_grid == 0 || d_vision == 0 || max_positions == 0) {
            throw std::invalid_argument("config: zero dimension");
        }
    }

    static ModelConfig defaults() {
        ModelConfig cfg;
        cfg.vocab_size = Vocab::instance().size();
        return cfg;
    }
};

enum class Segment : std::uint8_t { image, text, generated };

// Connector output: one embedding row per image patch.
template <typename T>
struct VisualTokens {
    Tensor<T> embeddings;  // [P^2 x d_model]
};

// The concatenated decoder input: image rows (possibly none) form a
// contiguous prefix, then text rows. Position ids run over the whole
// concatenation.
template <typename T>
struct EmbeddedInput {
    Tensor<T> embeddings;  // [T x d_model]
    std::vector<Segment> segments;
    std::vector<int> positions;

    std::size_t length() const { return segments.size(); }
};

// Post-block activations for every layer, captured during one forward call.
template <typename T>
struct HiddenStates {
    std::size_t n_layers = 0;
    std::size_t seq_len = 0;
    std::size_t d_model = 0;
    std::vector<T> values;  // [n_layers x seq_len x d_model]

    std::span<const T> at(std::size_t layer, std::size_t pos) const {
        return {values.data() + (layer * seq_len + pos) * d_model, d_model};
    }
};

// Append-only per-layer key/value store for one generation episode.
template <typename T>
struct KvCache {
    std::vector<Tensor<T>> keys;
    std::vector<Tensor<T>> values;
    std::size_t len = 0;

    explicit KvCache(std::size_t n_layers = 0) : keys(n_layers), values(n_layers) {}
};

// Intervention point: fires after each block's residual addition with a
// mutable view of that block's output rows ([T_new x d_model], this call's
// positions only). Inference-only.
template <typename T>
using LayerHook = std::function<void(std::size_t layer, std::span<T> block_out)>;

template <typename T>
struct ForwardResult {
    Tensor<T> logits;  // [T_new x vocab]
    std::optional<HiddenStates<T>> hidden;
};

struct GenerateParams {
    std::size_t max_new = 32;
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    bool suppress_eos = false;  // benchmark mode: force exactly max_new tokens
};

struct GenerationResult {
    std::vector<int> tokens;
    std::size_t forward_passes = 0;
    double prefill_seconds = 0.0;
    double decode_seconds = 0.0;
    double mean_entropy = 0.0;  // mean next-token entropy over emitted tokens
};

enum class ParamGroup { vision, connector, llm };

template <typename T>
struct BlockParams {
    Tensor<T> attn_gain, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ffn_gain, w1, b1, w2, b2;
};

template <typename T>
struct ModelParams {
    Tensor<T> sym_embed;   // [n_symbols x d_vision]
    Tensor<T> patch_pos;   // [P^2 x d_vision]
    Tensor<T> conn_w1, conn_b1, conn_w2, conn_b2;
    Tensor<T> tok_embed;   // [V x d_model]
    Tensor<T> pos_embed;   // [max_positions x d_model]
    std::vector<BlockParams<T>> blocks;
    Tensor<T> final_gain;
    Tensor<T> head;        // [d_model x V]; absent when the head is tied

    template <typename F>
    void visit(F&& f) {
        f("vision.sym_embed", ParamGroup::vision, sym_embed);
        f("vision.patch_pos", ParamGroup::vision, patch_pos);
        f("connector.w1", ParamGroup::connector, conn_w1);
        f("connector.b1", ParamGroup::connector, conn_b1);
        f("connector.w2", ParamGroup::connector, conn_w2);
        f("connector.b2", ParamGroup::connector, conn_b2);
        f("llm.tok_embed", ParamGroup::llm, tok_embed);
        f("llm.pos_embed", ParamGroup::llm, pos_embed);
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            const std::string p = "llm.block" + std::to_string(l) + ".";
            auto& b = blocks[l];
            f(p + "attn_gain", ParamGroup::llm, b.attn_gain);
            f(p + "wq", ParamGroup::llm, b.wq);
            f(p + "bq", ParamGroup::llm, b.bq);
            f(p + "wk", ParamGroup::llm, b.wk);
            f(p + "bk", ParamGroup::llm, b.bk);
            f(p + "wv", ParamGroup::llm, b.wv);
            f(p + "bv", ParamGroup::llm, b.bv);
            f(p + "wo", ParamGroup::llm, b.wo);
            f(p + "bo", ParamGroup::llm, b.bo);
            f(p + "ffn_gain", ParamGroup::llm, b.ffn_gain);
            f(p + "w1", ParamGroup::llm, b.w1);
            f(p + "b1", ParamGroup::llm, b.b1);
            f(p + "w2", ParamGroup::llm, b.w2);
            f(p + "b2", ParamGroup::llm, b.b2);
        }
        f("llm.final_gain", ParamGroup::llm, final_gain);
        if (head.defined()) f("llm.head", ParamGroup::llm, head);
    }
};

// Miniature LVLM: patch-symbol vision encoder, 2-layer MLP connector,
// pre-norm causal decoder with per-layer capture and an optional in-flight
// intervention hook. Weights are immutable during inference; concurrent
// read-only use is safe with one KvCache per caller.
template <typename T>
class ModelT {
public:
    explicit ModelT(ModelConfig cfg) : cfg_(cfg) {
        if (cfg_.vocab_size == 0) cfg_.vocab_size = Vocab::instance().size();
        cfg_.validate();
        init_params();
    }

    const ModelConfig& config() const { return cfg_; }
    ModelParams<T>& params() { return params_; }
    const ModelParams<T>& params() const { return params_; }

    void set_trainable(bool on) {
        params_.visit([on](const std::string&, ParamGroup, Tensor<T>& t) { t.set_requires_grad(on); });
    }
    void zero_grads() {
        params_.visit([](const std::string&, ParamGroup, Tensor<T>& t) { t.zero_grad(); });
    }

    // Vision encoder f: learned symbol embedding plus learned patch-position
    // embedding, one row per patch.
    Tensor<T> encode_image(Graph<T>* g, const ToyImage& img) const {
        if (img.patch_grid != cfg_.patch_grid || !img.valid()) {
            throw std::invalid_argument("encode_image: image grid does not match config");
        }
        for (int code : img.grid) {
            if (code < 0 || code >= kNumSymbols) throw std::invalid_argument("encode_image: unknown symbol");
        }
        const Tensor<T> feats = embedding(g, params_.sym_embed, img.grid);
        return add(g, feats, params_.patch_pos);
    }

    // Connector g: linear -> gelu -> linear into the decoder width.
    VisualTokens<T> connect(Graph<T>* g, const Tensor<T>& features) const {
        if (features.ndim() != 2 || features.cols() != cfg_.d_vision) {
            throw std::invalid_argument("connect: feature width must equal d_vision");
        }
        const Tensor<T> hidden = gelu(g, add_row_bias(g, matmul(g, features, params_.conn_w1), params_.conn_b1));
        Tensor<T> out = add_row_bias(g, matmul(g, hidden, params_.conn_w2), params_.conn_b2);
        if (out.rows() != cfg_.n_visual_tokens()) throw std::invalid_argument("connect: wrong visual token count");
        return VisualTokens<T>{std::move(out)};
    }

    VisualTokens<T> visual_tokens(Graph<T>* g, const ToyImage& img) const {
        return connect(g, encode_image(g, img));
    }

    // Prompt assembly: image rows (if any) first, then text rows; position
    // ids and position embeddings run over the concatenation.
    EmbeddedInput<T> assemble_input(Graph<T>* g, const std::optional<VisualTokens<T>>& visual,
                                    std::span<const int> text) const {
        if (text.empty()) throw std::invalid_argument("assemble_input: empty text");
        EmbeddedInput<T> input;
        Tensor<T> tok = embedding(g, params_.tok_embed, std::vector<int>(text.begin(), text.end()));
        Tensor<T> rows = visual ? concat_rows(g, visual->embeddings, tok) : std::move(tok);
        const std::size_t n_vis = visual ? visual->embeddings.rows() : 0;
        const std::size_t total = rows.rows();
        input.positions.resize(total);
        for (std::size_t i = 0; i < total; ++i) input.positions[i] = static_cast<int>(i);
        if (total > cfg_.max_positions) throw std::runtime_error("assemble_input: position overflow");
        const Tensor<T> pos = embedding(g, params_.pos_embed, input.positions);
        input.embeddings = add(g, rows, pos);
        input.segments.assign(n_vis, Segment::image);
        input.segments.insert(input.segments.end(), total - n_vis, Segment::text);
        return input;
    }

    // One decoder pass over the given rows. `cache` enables incremental
    // decoding (inference only); `capture` returns post-block hidden states
    // for all layers; `hook` edits block outputs in flight, before they feed
    // the next layer and before that layer's keys/values are formed.
    ForwardResult<T> forward(Graph<T>* g, const EmbeddedInput<T>& input, KvCache<T>* cache, bool capture,
                             const LayerHook<T>& hook = {}) const {
        const std::size_t t_new = input.embeddings.rows();
        const std::size_t past = cache ? cache->len : 0;
        if (t_new + past > cfg_.max_positions) throw std::runtime_error("forward: position overflow");
        if (g && (cache || hook)) {
            throw std::invalid_argument("forward: cache/hook are inference-only (pass a null graph)");
        }
        if (cache && cache->keys.size() != cfg_.n_layers) {
            throw std::invalid_argument("forward: cache layer count mismatch");
        }

        ForwardResult<T> result;
        if (capture) {
            result.hidden = HiddenStates<T>{};
            result.hidden->n_layers = cfg_.n_layers;
            result.hidden->seq_len = t_new;
            result.hidden->d_model = cfg_.d_model;
            result.hidden->values.resize(cfg_.n_layers * t_new * cfg_.d_model);
        }

        Tensor<T> h = input.embeddings;
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            const auto& blk = params_.blocks[l];
            const Tensor<T> xn = rms_norm(g, h, blk.attn_gain);
            const Tensor<T> q = add_row_bias(g, matmul(g, xn, blk.wq), blk.bq);
            Tensor<T> k = add_row_bias(g, matmul(g, xn, blk.wk), blk.bk);
            Tensor<T> v = add_row_bias(g, matmul(g, xn, blk.wv), blk.bv);
            if (cache) {
                if (cache->keys[l].defined()) {
                    k = concat_rows(g, cache->keys[l], k);
                    v = concat_rows(g, cache->values[l], v);
                }
                cache->keys[l] = k;
                cache->values[l] = v;
            }
            const Tensor<T> attn = multihead_causal_attention(g, q, k, v, cfg_.n_heads, past);
            h = add(g, h, add_row_bias(g, matmul(g, attn, blk.wo), blk.bo));
            const Tensor<T> fn = rms_norm(g, h, blk.ffn_gain);
            const Tensor<T> ff = gelu(g, add_row_bias(g, matmul(g, fn, blk.w1), blk.b1));
            h = add(g, h, add_row_bias(g, matmul(g, ff, blk.w2), blk.b2));
            if (hook) hook(l, std::span<T>(h.value().data(), h.size()));
            if (capture) {
                std::copy(h.value().begin(), h.value().end(),
                          result.hidden->values.begin() + static_cast<std::ptrdiff_t>(l * t_new * cfg_.d_model));
            }
        }
        const Tensor<T> fin = rms_norm(g, h, params_.final_gain);
        result.logits = cfg_.tied_head ? matmul_nt(g, fin, params_.tok_embed) : matmul(g, fin, params_.head);
        if (cache) cache->len = past + t_new;
        return result;
    }

    // Token-by-token decoding over an existing cache, starting from the
    // prefill logits. Every emitted non-EOS token is fed back through the
    // model (one decode pass each) so the cache covers it.
    struct DecodeOutcome {
        std::vector<int> tokens;
        std::size_t forward_passes = 0;
        double seconds = 0.0;
        double entropy_sum = 0.0;
    };
    DecodeOutcome decode(KvCache<T>& cache, Tensor<T> logits, std::size_t next_pos,
                         const GenerateParams& params) const {
        if (params.max_new < 1) throw std::invalid_argument("decode: max_new must be >= 1");
        using clock = std::chrono::steady_clock;
        const auto t0 = clock::now();
        DecodeOutcome out;
        Rng rng(params.seed);
        for (std::size_t step = 0; step < params.max_new; ++step) {
            const std::size_t v = logits.cols();
            const T* row = logits.data() + (logits.rows() - 1) * v;
            out.entropy_sum += row_entropy(row, v);
            const int tok = pick_token(row, v, params, rng);
            out.tokens.push_back(tok);
            if (tok == Vocab::kEos && !params.suppress_eos) break;
            EmbeddedInput<T> step_input;
            step_input.embeddings = add(nullptr, embedding(nullptr, params_.tok_embed, {tok}),
                                        embedding(nullptr, params_.pos_embed, {static_cast<int>(next_pos)}));
            step_input.segments = {Segment::generated};
            step_input.positions = {static_cast<int>(next_pos)};
            ++next_pos;
            logits = forward(nullptr, step_input, &cache, false).logits;
            ++out.forward_passes;
        }
        out.seconds = std::chrono::duration<double>(clock::now() - t0).count();
        return out;
    }

    // Standard autoregressive generation over an optional image prefix.
    // Pass accounting: 1 prefill + one decode pass per emitted (non-EOS)
    // token; the prefill's final-position logits produce the first token.
    GenerationResult generate(const std::optional<VisualTokens<T>>& visual, std::span<const int> text,
                              const GenerateParams& params) const {
        using clock = std::chrono::steady_clock;
        GenerationResult res;
        KvCache<T> cache(cfg_.n_layers);

        const auto t0 = clock::now();
        const EmbeddedInput<T> prompt = assemble_input(nullptr, visual, text);
        Tensor<T> logits = forward(nullptr, prompt, &cache, false).logits;
        res.prefill_seconds = std::chrono::duration<double>(clock::now() - t0).count();

        DecodeOutcome dec = decode(cache, std::move(logits), prompt.length(), params);
        res.tokens = std::move(dec.tokens);
        res.forward_passes = 1 + dec.forward_passes;
        res.decode_seconds = dec.seconds;
        res.mean_entropy = res.tokens.empty() ? 0.0 : dec.entropy_sum / static_cast<double>(res.tokens.size());
        return res;
    }

    GenerationResult generate(const std::optional<ToyImage>& img, std::span<const int> text,
                              const GenerateParams& params) const {
        std::optional<VisualTokens<T>> visual;
        if (img) visual = visual_tokens(nullptr, *img);
        return generate(visual, text, params);
    }

private:
    static double row_entropy(const T* row, std::size_t v) {
        double mx = static_cast<double>(row[0]);
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double sum = 0.0;
        for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
        double ent = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            const double p = std::exp(static_cast<double>(row[j]) - mx) / sum;
            if (p > 0.0) ent -= p * std::log(p);
        }
        return ent;
    }

    static int pick_token(const T* row, std::size_t v, const GenerateParams& params, Rng& rng) {
        if (params.greedy) {
            int best = -1;
            double best_val = -1e300;
            for (std::size_t j = 0; j < v; ++j) {
                if (params.suppress_eos && static_cast<int>(j) == Vocab::kEos) continue;
                const double val = static_cast<double>(row[j]);
                if (val > best_val) {
                    best_val = val;
                    best = static_cast<int>(j);
                }
            }
            return best;
        }
        const double temp = params.temperature > 0.0 ? params.temperature : 1.0;
        double mx = -1e300;
        for (std::size_t j = 0; j < v; ++j) {
            if (params.suppress_eos && static_cast<int>(j) == Vocab::kEos) continue;
            mx = std::max(mx, static_cast<double>(row[j]) / temp);
        }
        std::vector<double> probs(v, 0.0);
        double sum = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            if (params.suppress_eos && static_cast<int>(j) == Vocab::kEos) continue;
            probs[j] = std::exp(static_cast<double>(row[j]) / temp - mx);
            sum += probs[j];
        }
        double r = rng.uniform() * sum;
        for (std::size_t j = 0; j < v; ++j) {
            r -= probs[j];
            if (r <= 0.0) return static_cast<int>(j);
        }
        return static_cast<int>(v) - 1;
    }

    void init_params() {
        Rng rng(cfg_.seed);
        const auto gaussian = [&rng](std::vector<std::size_t> shape, double std_dev) {
            Tensor<T> t(std::move(shape));
            for (auto& x : t.value()) x = static_cast<T>(rng.gaussian() * std_dev);
            return t;
        };
        const auto zeros = [](std::vector<std::size_t> shape) { return Tensor<T>(std::move(shape)); };
        const auto ones = [](std::vector<std::size_t> shape) { return Tensor<T>(std::move(shape), T(1)); };
        const double s = 0.02;
        const std::size_t d = cfg_.d_model, dv = cfg_.d_vision, v = cfg_.vocab_size;

        params_.sym_embed = gaussian({static_cast<std::size_t>(kNumSymbols), dv}, s);
        params_.patch_pos = gaussian({cfg_.n_visual_tokens(), dv}, s);
        params_.conn_w1 = gaussian({dv, d}, s);
        params_.conn_b1 = zeros({d});
        params_.conn_w2 = gaussian({d, d}, s);
        params_.conn_b2 = zeros({d});
        params_.tok_embed = gaussian({v, d}, s);
        params_.pos_embed = gaussian({cfg_.max_positions, d}, s);
        params_.blocks.resize(cfg_.n_layers);
        for (auto& blk : params_.blocks) {
            blk.attn_gain = ones({d});
            blk.wq = gaussian({d, d}, s);
            blk.bq = zeros({d});
            blk.wk = gaussian({d, d}, s);
            blk.bk = zeros({d});
            blk.wv = gaussian({d, d}, s);
            blk.bv = zeros({d});
            blk.wo = gaussian({d, d}, s);
            blk.bo = zeros({d});
            blk.ffn_gain = ones({d});
            blk.w1 = gaussian({d, 4 * d}, s);
            blk.b1 = zeros({4 * d});
            blk.w2 = gaussian({4 * d, d}, s);
            blk.b2 = zeros({d});
        }
        params_.final_gain = ones({d});
        if (!cfg_.tied_head) params_.head = gaussian({d, v}, s);
    }

    ModelConfig cfg_;
    ModelParams<T> params_;
};

using Model = ModelT<float>;

}  // namespace vift
