#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "maskdiff/autograd.hpp"
#include "maskdiff/nn.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// ============================================================================
// Binary masks
// ============================================================================

struct BinaryMask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> v;  // strictly 0/1
    int subject = -1;             // -1 = unlinked

    BinaryMask() = default;
    BinaryMask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}

    static BinaryMask blank(int size) { return BinaryMask(size, size); }

    static BinaryMask from_values(int h, int w, const std::vector<std::uint8_t>& data,
                                  int subject = -1) {
        if (static_cast<size_t>(h) * w != data.size())
            throw argument_error("mask: data size does not match dimensions");
        BinaryMask m(h, w);
        for (size_t i = 0; i < data.size(); ++i) {
            if (data[i] > 1) throw validation_error("mask: non-binary value encountered");
            m.v[i] = data[i];
        }
        m.subject = subject;
        return m;
    }

    std::uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    std::uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }

    long long count_ones() const {
        long long n = 0;
        for (auto x : v) n += x;
        return n;
    }
    bool is_blank() const { return count_ones() == 0; }

    bool same_shape(const BinaryMask& o) const { return h == o.h && w == o.w; }
};

// Pixel-wise OR.
inline BinaryMask mask_union(const std::vector<BinaryMask>& masks) {
    if (masks.empty()) throw argument_error("mask_union: empty input");
    BinaryMask out(masks[0].h, masks[0].w);
    for (const auto& m : masks) {
        if (!m.same_shape(out)) throw argument_error("mask_union: shape mismatch");
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] |= m.v[i];
    }
    return out;
}

// Nearest-neighbor resize; preserves binarity by construction.
inline BinaryMask nearest_resize(const BinaryMask& m, int h2, int w2) {
    if (h2 <= 0 || w2 <= 0) throw argument_error("nearest_resize: non-positive size");
    if (m.h == h2 && m.w == w2) return m;
    BinaryMask out(h2, w2);
    out.subject = m.subject;
    for (int y = 0; y < h2; ++y) {
        const int sy = std::min(m.h - 1, static_cast<int>((y + 0.5) * m.h / h2));
        for (int x = 0; x < w2; ++x) {
            const int sx = std::min(m.w - 1, static_cast<int>((x + 0.5) * m.w / w2));
            out.at(y, x) = m.at(sy, sx);
        }
    }
    return out;
}

// Exact area-average downsampling to a p x p grid. Linear in the input and
// mean-preserving: mean(grid) == mean(mask) up to rounding.
template <typename T>
Tensor<T> area_downsample(const BinaryMask& m, int p) {
    if (p <= 0 || p > m.h || p > m.w) throw argument_error("area_downsample: bad grid size");
    Tensor<T> out({p, p});
    const double cell_h = static_cast<double>(m.h) / p;
    const double cell_w = static_cast<double>(m.w) / p;
    for (int i = 0; i < p; ++i) {
        const double y0 = i * cell_h, y1 = (i + 1) * cell_h;
        for (int j = 0; j < p; ++j) {
            const double x0 = j * cell_w, x1 = (j + 1) * cell_w;
            double acc = 0.0;
            for (int y = static_cast<int>(y0); y < static_cast<int>(std::ceil(y1)); ++y) {
                const double oy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
                if (oy <= 0) continue;
                for (int x = static_cast<int>(x0); x < static_cast<int>(std::ceil(x1)); ++x) {
                    const double ox = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
                    if (ox <= 0) continue;
                    acc += oy * ox * m.at(y, x);
                }
            }
            out.at(i, j) = static_cast<T>(acc / (cell_h * cell_w));
        }
    }
    return out;
}

// ============================================================================
// Vocabulary
// ============================================================================

// Plain words plus handle tokens "<asset0>", "<asset1>", ... Handle ids form
// a contiguous range at the end of the table.
struct Vocabulary {
    std::vector<std::string> words;
    std::unordered_map<std::string, int> ids;
    int null_id = 0;
    int pad_id = 1;
    int handle_begin = 0;
    int handle_count = 0;

    bool is_handle(int id) const { return id >= handle_begin && id < handle_begin + handle_count; }
    int handle_index(int id) const { return id - handle_begin; }
    int word_count() const { return handle_begin; }  // rows backed by the word table

    int lookup(const std::string& tok) const {
        auto it = ids.find(tok);
        if (it == ids.end())
            throw argument_error("tokenization: unknown token '" + tok + "'");
        return it->second;
    }
};

inline std::string handle_token(int index) {
    return "<asset" + std::to_string(index) + ">";
}

inline Vocabulary build_vocabulary(const std::vector<std::string>& plain_words, int num_handles) {
    Vocabulary v;
    auto push = [&](const std::string& w) {
        if (v.ids.count(w)) throw config_error("vocabulary: duplicate word '" + w + "'");
        v.ids[w] = static_cast<int>(v.words.size());
        v.words.push_back(w);
    };
    push("<null>");
    push("<pad>");
    for (const auto& w : plain_words) push(w);
    v.handle_begin = static_cast<int>(v.words.size());
    v.handle_count = num_handles;
    for (int i = 0; i < num_handles; ++i) push(handle_token(i));
    return v;
}

inline std::vector<std::string> split_tokens(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

// ============================================================================
// Conditioning sequence
// ============================================================================

enum class TokenKind { Text, Handle, MaskToken };

struct PositionLink {
    TokenKind kind = TokenKind::Text;
    int subject = -1;
};

template <typename T>
struct PromptEncoding {
    std::vector<int> token_ids;
    std::vector<PositionLink> links;
    ag::Var<T> rows;  // [K, d], positional encoding included
};

template <typename T>
struct MaskEmbedding {
    ag::Var<T> vec;  // [d]
    int subject = -1;
};

template <typename T>
struct ConditioningBundle {
    ag::Var<T> embeddings;  // [K, d]
    std::vector<PositionLink> links;

    int length() const { return static_cast<int>(links.size()); }

    int find(TokenKind kind, int subject) const {
        for (int i = 0; i < length(); ++i)
            if (links[static_cast<size_t>(i)].kind == kind &&
                links[static_cast<size_t>(i)].subject == subject)
                return i;
        return -1;
    }
    int handle_position(int subject) const { return find(TokenKind::Handle, subject); }
    int mask_position(int subject) const { return find(TokenKind::MaskToken, subject); }
};

struct ConditioningConfig {
    int dim = 64;
    int mask_grid = 16;  // reduced grid P
    int max_prompt_len = 16;
    std::vector<std::string> plain_words;
    int num_handles = 0;
};

// Text embedding table, handle table and mask encoder. The text side is an
// embedding lookup plus fixed sinusoidal positions; the mask encoder is an
// area-average reduction followed by one affine layer.
template <typename T>
class ConditioningModel {
  public:
    ConditioningConfig cfg;
    Vocabulary vocab;
    Param<T> word_table;             // [word_count, d]
    std::vector<Param<T>> handles;   // each [d]
    Param<T> maskenc_w;              // [d, P*P]
    Param<T> maskenc_b;              // [d]
    Tensor<T> positional;            // [max_prompt_len, d]

    ConditioningModel() = default;

    ConditioningModel(ConditioningConfig c, Rng& rng) : cfg(std::move(c)) {
        vocab = build_vocabulary(cfg.plain_words, cfg.num_handles);
        const T emb_std = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.dim)));
        word_table.name = "text/word_table";
        word_table.value = Tensor<T>::randn({vocab.word_count(), cfg.dim}, rng, emb_std);
        handles.resize(static_cast<size_t>(cfg.num_handles));
        for (int i = 0; i < cfg.num_handles; ++i) {
            handles[static_cast<size_t>(i)].name = "text/handles/" + std::to_string(i);
            handles[static_cast<size_t>(i)].value = Tensor<T>::randn({cfg.dim}, rng, emb_std);
        }
        maskenc_w.name = "maskenc/weight";
        maskenc_w.value = init_linear_weight<T>(cfg.dim, cfg.mask_grid * cfg.mask_grid, rng);
        maskenc_b.name = "maskenc/bias";
        maskenc_b.value = Tensor<T>::zeros({cfg.dim});
        positional = build_positional(cfg.max_prompt_len, cfg.dim);
    }

    static Tensor<T> build_positional(int max_len, int dim) {
        Tensor<T> pe({max_len, dim});
        for (int pos = 0; pos < max_len; ++pos) {
            for (int k = 0; k < dim / 2; ++k) {
                const double freq =
                    std::exp(-std::log(10000.0) * 2.0 * k / static_cast<double>(dim));
                pe.at(pos, 2 * k) = static_cast<T>(std::sin(pos * freq));
                pe.at(pos, 2 * k + 1) = static_cast<T>(std::cos(pos * freq));
            }
        }
        return pe;
    }

    // Copy a plain word's embedding into a handle (class-word initialization).
    void init_handle_from_word(int handle, const std::string& word) {
        const int id = vocab.lookup(word);
        if (vocab.is_handle(id)) throw argument_error("handle init: '" + word + "' is a handle");
        for (int j = 0; j < cfg.dim; ++j)
            handles[static_cast<size_t>(handle)].value[j] = word_table.value.at(id, j);
    }

    void init_handle_from_mean(int handle) {
        for (int j = 0; j < cfg.dim; ++j) {
            double acc = 0.0;
            for (int i = 0; i < vocab.word_count(); ++i) acc += word_table.value.at(i, j);
            handles[static_cast<size_t>(handle)].value[j] =
                static_cast<T>(acc / vocab.word_count());
        }
    }

    void collect_params(ParamRefs<T>& out) {
        out.push_back(&word_table);
        for (auto& h : handles) out.push_back(&h);
        out.push_back(&maskenc_w);
        out.push_back(&maskenc_b);
    }

    // Attach parameters to the current graph.
    void bind(bool words_trainable, bool handles_trainable, bool maskenc_trainable) {
        word_table.bind(words_trainable);
        for (auto& h : handles) h.bind(handles_trainable);
        maskenc_w.bind(maskenc_trainable);
        maskenc_b.bind(maskenc_trainable);
    }

    bool bound() const { return static_cast<bool>(word_table.var); }

    // Tokenize and embed a prompt. The empty prompt becomes a single <null>
    // token (the unconditional input).
    PromptEncoding<T> encode_prompt(const std::string& prompt) const {
        require_bound();
        std::vector<std::string> toks = split_tokens(prompt);
        PromptEncoding<T> enc;
        if (toks.empty()) {
            enc.token_ids = {vocab.null_id};
        } else {
            if (static_cast<int>(toks.size()) > cfg.max_prompt_len)
                throw argument_error("prompt exceeds maximum length of " +
                                     std::to_string(cfg.max_prompt_len) + " tokens");
            for (const auto& t : toks) enc.token_ids.push_back(vocab.lookup(t));
        }
        std::vector<ag::Var<T>> rows;
        for (size_t p = 0; p < enc.token_ids.size(); ++p) {
            const int id = enc.token_ids[p];
            PositionLink link;
            ag::Var<T> r;
            if (vocab.is_handle(id)) {
                link.kind = TokenKind::Handle;
                link.subject = vocab.handle_index(id);
                r = handles[static_cast<size_t>(link.subject)].var;
            } else {
                link.kind = TokenKind::Text;
                r = ag::row(word_table.var, id);
            }
            Tensor<T> pe({cfg.dim});
            for (int j = 0; j < cfg.dim; ++j) pe[j] = positional.at(static_cast<int>(p), j);
            rows.push_back(ag::add(r, ag::constant(std::move(pe))));
            enc.links.push_back(link);
        }
        enc.rows = ag::stack_rows(rows);
        return enc;
    }

    // Area-average reduce to the P x P grid, flatten, one affine layer.
    MaskEmbedding<T> encode_mask(const BinaryMask& mask) const {
        require_bound();
        for (auto x : mask.v)
            if (x > 1) throw validation_error("encode_mask: non-binary mask");
        const int p = cfg.mask_grid;
        Tensor<T> grid = area_downsample<T>(mask, p);
        auto flat = ag::constant(grid.reshaped({1, p * p}));
        auto emb = ag::linear(flat, maskenc_w.var, maskenc_b.var);
        MaskEmbedding<T> out;
        out.vec = ag::reshape(emb, {cfg.dim});
        out.subject = mask.subject;
        return out;
    }

    // Concatenate text rows and mask-token rows into one conditioning
    // sequence. Mask tokens keep their input order.
    ConditioningBundle<T> assemble_bundle(const PromptEncoding<T>& text,
                                          const std::vector<MaskEmbedding<T>>& mask_embs) const {
        ConditioningBundle<T> b;
        b.links = text.links;
        std::vector<ag::Var<T>> rows;
        for (const auto& me : mask_embs) {
            if (me.vec->val.numel() != cfg.dim)
                throw config_error("assemble_bundle: mask embedding dimension mismatch");
            if (me.subject >= 0) {
                bool found = false;
                for (const auto& l : text.links)
                    found = found || (l.kind == TokenKind::Handle && l.subject == me.subject);
                if (!found)
                    throw argument_error("assemble_bundle: mask subject " +
                                         std::to_string(me.subject) +
                                         " has no handle in the prompt");
                for (const auto& l : b.links)
                    if (l.kind == TokenKind::MaskToken && l.subject == me.subject)
                        throw argument_error("assemble_bundle: duplicate mask token for subject " +
                                             std::to_string(me.subject));
            }
            rows.push_back(me.vec);
            b.links.push_back({TokenKind::MaskToken, me.subject});
        }
        if (rows.empty()) {
            b.embeddings = text.rows;
            return b;
        }
        b.embeddings = ag::concat_rows(text.rows, ag::stack_rows(rows));
        return b;
    }

  private:
    void require_bound() const {
        if (!bound()) throw config_error("conditioning model used before bind()");
    }
};

}  // namespace maskdiff
