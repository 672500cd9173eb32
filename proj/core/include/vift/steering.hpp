#pragma once

#include <chrono>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vift/model.hpp"

namespace vift {

// Hidden-state slices at text positions over a set of layers. Houses both
// the task-solving vector (text-only pass) and the perception vector
// (multimodal pass, text positions only).
template <typename T>
struct SteeringVectors {
    std::vector<std::size_t> layers;  // ordered layer-set
    std::size_t text_len = 0;
    std::size_t d_model = 0;
    std::map<std::size_t, std::vector<T>> values;  // layer -> [text_len x d_model]

    std::span<const T> at(std::size_t layer, std::size_t pos) const {
        return {values.at(layer).data() + pos * d_model, d_model};
    }
};

// Fusion weights and the inclusive, 0-based block-index range they apply to.
struct FusionConfig {
    double alpha = 1.0;
    double beta = 0.1;
    std::size_t layer_lo = 0;
    std::size_t layer_hi = 0;

    void validate(std::size_t n_layers) const {
        if (layer_lo > layer_hi || layer_hi >= n_layers) {
            throw std::invalid_argument("fusion config: layer range out of bounds");
        }
        if (!std::isfinite(alpha) || !std::isfinite(beta)) {
            throw std::invalid_argument("fusion config: weights must be finite");
        }
    }

    std::size_t range_size() const { return layer_hi - layer_lo + 1; }

    std::vector<std::size_t> layer_set() const {
        std::vector<std::size_t> out;
        for (std::size_t l = layer_lo; l <= layer_hi; ++l) out.push_back(l);
        return out;
    }

    // Reported defaults: reasoning-style prompts use beta 0.1, instruction-
    // style prompts 0.15; alpha 1.0 for both.
    static FusionConfig reasoning_defaults(std::size_t n_layers);
    static FusionConfig instruction_defaults(std::size_t n_layers);
};

enum class LayerStrategy { top_down, bottom_up, explicit_range };

// top-down k: the k highest blocks [n-k, n-1]; bottom-up k: [0, k-1].
// Default selection is top-down over the upper half (ceil(n/2) layers).
inline FusionConfig select_layers(std::size_t n_layers, LayerStrategy strategy, std::size_t k_or_lo,
                                  std::size_t hi = 0) {
    FusionConfig cfg;
    switch (strategy) {
        case LayerStrategy::top_down:
            if (k_or_lo < 1 || k_or_lo > n_layers) throw std::invalid_argument("select_layers: k out of range");
            cfg.layer_lo = n_layers - k_or_lo;
            cfg.layer_hi = n_layers - 1;
            break;
        case LayerStrategy::bottom_up:
            if (k_or_lo < 1 || k_or_lo > n_layers) throw std::invalid_argument("select_layers: k out of range");
            cfg.layer_lo = 0;
            cfg.layer_hi = k_or_lo - 1;
            break;
        case LayerStrategy::explicit_range:
            cfg.layer_lo = k_or_lo;
            cfg.layer_hi = hi;
            break;
    }
    cfg.validate(n_layers);
    return cfg;
}

inline FusionConfig default_fusion_layers(std::size_t n_layers) {
    return select_layers(n_layers, LayerStrategy::top_down, (n_layers + 1) / 2);
}

inline FusionConfig FusionConfig::reasoning_defaults(std::size_t n_layers) {
    FusionConfig cfg = default_fusion_layers(n_layers);
    cfg.alpha = 1.0;
    cfg.beta = 0.1;
    return cfg;
}
inline FusionConfig FusionConfig::instruction_defaults(std::size_t n_layers) {
    FusionConfig cfg = default_fusion_layers(n_layers);
    cfg.alpha = 1.0;
    cfg.beta = 0.15;
    return cfg;
}

// CLI/config syntax: "top:K", "bottom:K", or "LO-HI" (inclusive).
inline FusionConfig parse_layer_spec(const std::string& spec, std::size_t n_layers) {
    const auto colon = spec.find(':');
    try {
        if (colon != std::string::npos) {
            const std::string kind = spec.substr(0, colon);
            const std::size_t k = static_cast<std::size_t>(std::stoul(spec.substr(colon + 1)));
            if (kind == "top") return select_layers(n_layers, LayerStrategy::top_down, k);
            if (kind == "bottom") return select_layers(n_layers, LayerStrategy::bottom_up, k);
            throw std::invalid_argument("unknown strategy '" + kind + "'");
        }
        const auto dash = spec.find('-');
        if (dash == std::string::npos) throw std::invalid_argument("expected top:K, bottom:K, or LO-HI");
        const std::size_t lo = static_cast<std::size_t>(std::stoul(spec.substr(0, dash)));
        const std::size_t hi = static_cast<std::size_t>(std::stoul(spec.substr(dash + 1)));
        return select_layers(n_layers, LayerStrategy::explicit_range, lo, hi);
    } catch (const std::invalid_argument&) {
        throw;
    } catch (const std::exception&) {
        throw std::invalid_argument("bad --fusion-layers spec '" + spec + "'");
    }
}

// Trace of one ability-fused generation; the measurable side of the
// one-additional-forward-pass contract.
struct FusedGenerationTrace {
    std::vector<int> tokens;
    std::size_t forward_passes = 0;
    std::size_t replaced_positions = 0;  // = range_size * text_len after prefill
    std::size_t replaced_layers = 0;
    double extract_seconds = 0.0;
    double prefill_seconds = 0.0;
    double decode_seconds = 0.0;
    double mean_entropy = 0.0;
};

namespace detail {
template <typename T>
SteeringVectors<T> slice_hidden(const HiddenStates<T>& hidden, const std::vector<std::size_t>& layers,
                                std::size_t text_begin, std::size_t text_len) {
    SteeringVectors<T> out;
    out.layers = layers;
    out.text_len = text_len;
    out.d_model = hidden.d_model;
    for (const std::size_t l : layers) {
        if (l >= hidden.n_layers) throw std::invalid_argument("steering: layer index out of range");
        std::vector<T> slab(text_len * hidden.d_model);
        const T* src = hidden.values.data() + (l * hidden.seq_len + text_begin) * hidden.d_model;
        std::copy(src, src + slab.size(), slab.begin());
        out.values.emplace(l, std::move(slab));
    }
    return out;
}
}  // namespace detail

// Task-solving ability vector h(q): one text-only forward pass with capture;
// all q positions, no cache side effects.
template <typename T>
SteeringVectors<T> extract_task_vector(const ModelT<T>& model, std::span<const int> q,
                                       const std::vector<std::size_t>& layers) {
    if (q.empty()) throw std::invalid_argument("extract_task_vector: empty instruction");
    const EmbeddedInput<T> input = model.assemble_input(nullptr, std::nullopt, q);
    const ForwardResult<T> fr = model.forward(nullptr, input, nullptr, true);
    return detail::slice_hidden(*fr.hidden, layers, 0, q.size());
}

// Visual perception ability vector h(v, q): one multimodal forward pass with
// capture, restricted to the text positions (image positions excluded). Same
// shape as the task vector for the same q.
template <typename T>
SteeringVectors<T> extract_perception_vector(const ModelT<T>& model, const ToyImage& img, std::span<const int> q,
                                             const std::vector<std::size_t>& layers) {
    if (q.empty()) throw std::invalid_argument("extract_perception_vector: empty instruction");
    const auto visual = model.visual_tokens(nullptr, img);
    const EmbeddedInput<T> input = model.assemble_input(nullptr, visual, q);
    const ForwardResult<T> fr = model.forward(nullptr, input, nullptr, true);
    return detail::slice_hidden(*fr.hidden, layers, model.config().n_visual_tokens(), q.size());
}

// Eq-style weighted addition: for layers inside cfg's range the output is
// alpha * hvq + beta * hq computed elementwise in exactly that order; layers
// outside the range are copied from hvq unchanged.
template <typename T>
SteeringVectors<T> fuse(const SteeringVectors<T>& hvq, const SteeringVectors<T>& hq, const FusionConfig& cfg) {
    if (hvq.layers != hq.layers || hvq.text_len != hq.text_len || hvq.d_model != hq.d_model) {
        throw std::invalid_argument("fuse: shape or layer-set mismatch");
    }
    for (std::size_t l = cfg.layer_lo; l <= cfg.layer_hi; ++l) {
        if (!hvq.values.count(l)) throw std::invalid_argument("fuse: layer range not covered by layer-set");
    }
    const T a = static_cast<T>(cfg.alpha);
    const T b = static_cast<T>(cfg.beta);
    SteeringVectors<T> out;
    out.layers = hvq.layers;
    out.text_len = hvq.text_len;
    out.d_model = hvq.d_model;
    for (const std::size_t l : hvq.layers) {
        const auto& x = hvq.values.at(l);
        std::vector<T> fusedvals(x.begin(), x.end());
        if (l >= cfg.layer_lo && l <= cfg.layer_hi) {
            const auto& y = hq.values.at(l);
            for (std::size_t i = 0; i < fusedvals.size(); ++i) fusedvals[i] = a * x[i] + b * y[i];
        }
        out.values.emplace(l, std::move(fusedvals));
    }
    return out;
}

// Ability-fused inference. Pass 1: text-only forward captures h(q) on the
// configured layers. Pass 2: multimodal prefill where each in-range block
// output has its text-position rows replaced by alpha * current + beta *
// h^l(q) before feeding the next layer and before key/value caching. Decode
// then proceeds normally over the modified cache; generated positions are
// never steered. Exactly one forward pass more than standard generation.
template <typename T>
FusedGenerationTrace fused_generate(const ModelT<T>& model, const ToyImage& img, std::span<const int> q,
                                    const FusionConfig& cfg, const GenerateParams& params) {
    cfg.validate(model.config().n_layers);
    if (params.max_new < 1) throw std::invalid_argument("fused_generate: max_new must be >= 1");
    using clock = std::chrono::steady_clock;
    FusedGenerationTrace trace;

    const auto t0 = clock::now();
    const SteeringVectors<T> hq = extract_task_vector(model, q, cfg.layer_set());
    trace.forward_passes = 1;
    const auto t1 = clock::now();
    trace.extract_seconds = std::chrono::duration<double>(t1 - t0).count();

    const std::size_t n_vis = model.config().n_visual_tokens();
    const std::size_t d = model.config().d_model;
    const std::size_t n_text = q.size();
    const T a = static_cast<T>(cfg.alpha);
    const T b = static_cast<T>(cfg.beta);
    LayerHook<T> hook = [&](std::size_t layer, std::span<T> block_out) {
        if (layer < cfg.layer_lo || layer > cfg.layer_hi) return;
        const auto& hql = hq.values.at(layer);
        for (std::size_t p = 0; p < n_text; ++p) {
            T* cur = block_out.data() + (n_vis + p) * d;
            const T* task = hql.data() + p * d;
            for (std::size_t c = 0; c < d; ++c) cur[c] = a * cur[c] + b * task[c];
        }
        trace.replaced_positions += n_text;
        ++trace.replaced_layers;
    };

    KvCache<T> cache(model.config().n_layers);
    const auto visual = model.visual_tokens(nullptr, img);
    const EmbeddedInput<T> prompt = model.assemble_input(nullptr, visual, q);
    Tensor<T> logits = model.forward(nullptr, prompt, &cache, false, hook).logits;
    ++trace.forward_passes;
    trace.prefill_seconds = std::chrono::duration<double>(clock::now() - t1).count();

    // Decode: plain incremental steps, no hook.
    auto dec = model.decode(cache, std::move(logits), prompt.length(), params);
    trace.tokens = std::move(dec.tokens);
    trace.forward_passes += dec.forward_passes;
    trace.decode_seconds = dec.seconds;
    trace.mean_entropy = trace.tokens.empty() ? 0.0 : dec.entropy_sum / static_cast<double>(trace.tokens.size());
    return trace;
}

}  // namespace vift
