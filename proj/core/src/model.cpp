#include "flipscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "flipscope/tensor_file.hpp"

namespace flipscope {

InferenceState::InferenceState(const ModelConfig& c) {
    const std::size_t kv_dim = std::size_t(c.n_kv_heads) * std::size_t(c.d_head);
    key_cache.resize(std::size_t(c.n_layers));
    value_cache.resize(std::size_t(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) {
        key_cache[std::size_t(l)].assign(std::size_t(c.max_context) * kv_dim, 0.0f);
        value_cache[std::size_t(l)].assign(std::size_t(c.max_context) * kv_dim, 0.0f);
    }
    x.assign(std::size_t(c.d_model), 0.0f);
    xn.assign(std::size_t(c.d_model), 0.0f);
    q.assign(std::size_t(c.n_heads) * std::size_t(c.d_head), 0.0f);
    k.assign(kv_dim, 0.0f);
    v.assign(kv_dim, 0.0f);
    head_out.assign(std::size_t(c.n_heads) * std::size_t(c.d_head), 0.0f);
    att_row.assign(std::size_t(c.max_context), 0.0f);
    ffn_gate.assign(std::size_t(c.d_ff), 0.0f);
    ffn_up.assign(std::size_t(c.d_ff), 0.0f);
    logits.assign(std::size_t(c.vocab_size), 0.0f);
}

static void matvec(std::span<float> out, std::span<const float> w, std::span<const float> x,
                   int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const float* wr = w.data() + std::size_t(r) * std::size_t(cols);
        float acc = 0.0f;
        for (int c = 0; c < cols; ++c) {
            acc += wr[c] * x[std::size_t(c)];
        }
        out[std::size_t(r)] = acc;
    }
}

static void rmsnorm(std::span<float> out, std::span<const float> x,
                    std::span<const float> weight, float eps) {
    double ss = 0.0;
    for (float v : x) ss += double(v) * double(v);
    const float scale = 1.0f / std::sqrt(float(ss / double(x.size())) + eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * scale * weight[i];
    }
}

static int meta_int(const std::map<std::string, std::string>& meta, const std::string& key) {
    auto it = meta.find(key);
    if (it == meta.end()) {
        throw std::runtime_error("weight container metadata missing '" + key + "'");
    }
    return std::stoi(it->second);
}

static float meta_float(const std::map<std::string, std::string>& meta, const std::string& key,
                        float fallback) {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : std::stof(it->second);
}

static std::string layer_tensor(int layer, const char* suffix) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "model.layers.%d.%s", layer, suffix);
    return std::string(buf);
}

Model Model::load(const std::filesystem::path& weights_path,
                  const std::filesystem::path& tokenizer_path) {
    TensorFile tf = TensorFile::open(weights_path);
    const auto& meta = tf.metadata();

    Model m;
    ModelConfig& c = m.config_;
    c.n_layers    = meta_int(meta, "n_layers");
    c.n_heads     = meta_int(meta, "n_heads");
    c.n_kv_heads  = meta_int(meta, "n_kv_heads");
    c.d_model     = meta_int(meta, "d_model");
    c.d_head      = meta_int(meta, "d_head");
    c.vocab_size  = meta_int(meta, "vocab_size");
    c.max_context = meta_int(meta, "max_context");
    c.rope_base   = meta_float(meta, "rope_base", 10000.0f);
    c.norm_eps    = meta_float(meta, "norm_eps", 1e-5f);
    c.rope_scale_factor     = meta_float(meta, "rope_scale_factor", 1.0f);
    c.rope_low_freq_factor  = meta_float(meta, "rope_low_freq_factor", 1.0f);
    c.rope_high_freq_factor = meta_float(meta, "rope_high_freq_factor", 4.0f);
    c.rope_original_context =
        meta.count("rope_original_context") ? meta_int(meta, "rope_original_context") : c.max_context;

    // d_ff comes from metadata or the first gate projection
    if (meta.count("d_ff")) {
        c.d_ff = meta_int(meta, "d_ff");
    } else {
        c.d_ff = int(tf.info(layer_tensor(0, "mlp.gate_proj.weight")).shape.at(0));
    }
    c.validate();

    const std::int64_t dm = c.d_model;
    const std::int64_t qd = std::int64_t(c.n_heads) * c.d_head;
    const std::int64_t kvd = std::int64_t(c.n_kv_heads) * c.d_head;
    const std::int64_t ff = c.d_ff;
    const std::int64_t vs = c.vocab_size;

    auto shape2 = [](std::int64_t a, std::int64_t b) { return std::vector<std::int64_t>{a, b}; };
    auto shape1 = [](std::int64_t a) { return std::vector<std::int64_t>{a}; };

    m.embed_ = tf.read_f32_checked("model.embed_tokens.weight", shape2(vs, dm));
    m.final_norm_ = tf.read_f32_checked("model.norm.weight", shape1(dm));
    if (tf.contains("lm_head.weight")) {
        m.lm_head_ = tf.read_f32_checked("lm_head.weight", shape2(vs, dm));
    } else {
        c.tied_embeddings = true;
    }

    m.layers_.resize(std::size_t(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) {
        LayerWeights& lw = m.layers_[std::size_t(l)];
        lw.attn_norm = tf.read_f32_checked(layer_tensor(l, "input_layernorm.weight"), shape1(dm));
        lw.wq = tf.read_f32_checked(layer_tensor(l, "self_attn.q_proj.weight"), shape2(qd, dm));
        lw.wk = tf.read_f32_checked(layer_tensor(l, "self_attn.k_proj.weight"), shape2(kvd, dm));
        lw.wv = tf.read_f32_checked(layer_tensor(l, "self_attn.v_proj.weight"), shape2(kvd, dm));
        lw.wo = tf.read_f32_checked(layer_tensor(l, "self_attn.o_proj.weight"), shape2(dm, qd));
        lw.ffn_norm =
            tf.read_f32_checked(layer_tensor(l, "post_attention_layernorm.weight"), shape1(dm));
        lw.w_gate = tf.read_f32_checked(layer_tensor(l, "mlp.gate_proj.weight"), shape2(ff, dm));
        lw.w_up = tf.read_f32_checked(layer_tensor(l, "mlp.up_proj.weight"), shape2(ff, dm));
        lw.w_down = tf.read_f32_checked(layer_tensor(l, "mlp.down_proj.weight"), shape2(dm, ff));
    }

    // rope frequencies, with optional long-context scaling
    const int half = c.d_head / 2;
    m.rope_inv_freq_.resize(std::size_t(half));
    for (int i = 0; i < half; ++i) {
        float freq = std::pow(c.rope_base, -2.0f * float(i) / float(c.d_head));
        if (c.rope_scale_factor > 1.0f) {
            const float wavelen = 2.0f * std::numbers::pi_v<float> / freq;
            const float low_wavelen = float(c.rope_original_context) / c.rope_low_freq_factor;
            const float high_wavelen = float(c.rope_original_context) / c.rope_high_freq_factor;
            if (wavelen > low_wavelen) {
                freq /= c.rope_scale_factor;
            } else if (wavelen > high_wavelen) {
                const float smooth =
                    (float(c.rope_original_context) / wavelen - c.rope_low_freq_factor) /
                    (c.rope_high_freq_factor - c.rope_low_freq_factor);
                freq = (1.0f - smooth) * freq / c.rope_scale_factor + smooth * freq;
            }
        }
        m.rope_inv_freq_[std::size_t(i)] = freq;
    }

    m.tokenizer_ = std::make_shared<Tokenizer>(Tokenizer::load(tokenizer_path));
    if (m.tokenizer_->n_ids() > c.vocab_size) {
        throw std::runtime_error("tokenizer has ids beyond the model vocab_size");
    }
    return m;
}

// rotate-half rope on one head vector
static void apply_rope(std::span<float> vec, int d_head, std::span<const float> inv_freq, int pos) {
    const int half = d_head / 2;
    for (int i = 0; i < half; ++i) {
        const float angle = float(pos) * inv_freq[std::size_t(i)];
        const float cs = std::cos(angle);
        const float sn = std::sin(angle);
        const float a = vec[std::size_t(i)];
        const float b = vec[std::size_t(i + half)];
        vec[std::size_t(i)] = a * cs - b * sn;
        vec[std::size_t(i + half)] = a * sn + b * cs;
    }
}

void Model::forward(InferenceState& st, Token token, int turn, const CompiledMask* mask,
                    AttentionObserver* observer, std::span<const Token> history) const {
    const ModelConfig& c = config_;
    const int pos = st.cache_len;
    if (pos >= c.max_context) {
        throw std::runtime_error("context overflow: position " + std::to_string(pos) +
                                 " >= max_context " + std::to_string(c.max_context));
    }
    if (token < 0 || token >= c.vocab_size) {
        throw std::runtime_error("token id out of range: " + std::to_string(token));
    }
    if (int(history.size()) != pos + 1 || history[std::size_t(pos)] != token) {
        throw std::runtime_error("forward: history does not end at the current token");
    }

    const int d_head = c.d_head;
    const int kv_dim = c.n_kv_heads * d_head;
    const int q_dim = c.n_heads * d_head;
    const int group = c.n_heads / c.n_kv_heads;
    const float att_scale = 1.0f / std::sqrt(float(d_head));

    std::copy_n(embed_.begin() + std::size_t(token) * std::size_t(c.d_model), c.d_model,
                st.x.begin());

    if (observer) observer->begin_step(pos, turn);

    for (int l = 0; l < c.n_layers; ++l) {
        const LayerWeights& lw = layers_[std::size_t(l)];

        rmsnorm(st.xn, st.x, lw.attn_norm, c.norm_eps);
        matvec(st.q, lw.wq, st.xn, q_dim, c.d_model);
        matvec(st.k, lw.wk, st.xn, kv_dim, c.d_model);
        matvec(st.v, lw.wv, st.xn, kv_dim, c.d_model);

        for (int h = 0; h < c.n_heads; ++h) {
            apply_rope(std::span<float>(st.q).subspan(std::size_t(h) * d_head, d_head), d_head,
                       rope_inv_freq_, pos);
        }
        for (int h = 0; h < c.n_kv_heads; ++h) {
            apply_rope(std::span<float>(st.k).subspan(std::size_t(h) * d_head, d_head), d_head,
                       rope_inv_freq_, pos);
        }

        float* kc = st.key_cache[std::size_t(l)].data();
        float* vc = st.value_cache[std::size_t(l)].data();
        std::copy_n(st.k.begin(), kv_dim, kc + std::size_t(pos) * kv_dim);
        std::copy_n(st.v.begin(), kv_dim, vc + std::size_t(pos) * kv_dim);

        for (int h = 0; h < c.n_heads; ++h) {
            const float* qh = st.q.data() + std::size_t(h) * d_head;
            const int kvh = h / group;
            for (int j = 0; j <= pos; ++j) {
                const float* kj = kc + std::size_t(j) * kv_dim + std::size_t(kvh) * d_head;
                float dot = 0.0f;
                for (int i = 0; i < d_head; ++i) dot += qh[i] * kj[i];
                st.att_row[std::size_t(j)] = dot * att_scale;
            }
            // softmax over [0, pos]
            float row_max = st.att_row[0];
            for (int j = 1; j <= pos; ++j) row_max = std::max(row_max, st.att_row[std::size_t(j)]);
            double sum = 0.0;
            for (int j = 0; j <= pos; ++j) {
                const float e = std::exp(st.att_row[std::size_t(j)] - row_max);
                st.att_row[std::size_t(j)] = e;
                sum += e;
            }
            const float inv_sum = float(1.0 / sum);
            for (int j = 0; j <= pos; ++j) st.att_row[std::size_t(j)] *= inv_sum;

            if (observer) {
                observer->on_attention_row(
                    l, h, std::span<const float>(st.att_row.data(), std::size_t(pos) + 1),
                    history, pos, turn);
            }

            float* oh = st.head_out.data() + std::size_t(h) * d_head;
            std::fill_n(oh, d_head, 0.0f);
            for (int j = 0; j <= pos; ++j) {
                const float w = st.att_row[std::size_t(j)];
                const float* vj = vc + std::size_t(j) * kv_dim + std::size_t(kvh) * d_head;
                for (int i = 0; i < d_head; ++i) oh[i] += w * vj[i];
            }
        }
        if (mask) {
            apply_mask(st.head_out, d_head, l, *mask, turn);
        }

        matvec(st.xn, lw.wo, st.head_out, c.d_model, q_dim);
        for (int i = 0; i < c.d_model; ++i) st.x[std::size_t(i)] += st.xn[std::size_t(i)];

        rmsnorm(st.xn, st.x, lw.ffn_norm, c.norm_eps);
        matvec(st.ffn_gate, lw.w_gate, st.xn, c.d_ff, c.d_model);
        matvec(st.ffn_up, lw.w_up, st.xn, c.d_ff, c.d_model);
        for (int i = 0; i < c.d_ff; ++i) {
            const float g = st.ffn_gate[std::size_t(i)];
            st.ffn_gate[std::size_t(i)] = g / (1.0f + std::exp(-g)) * st.ffn_up[std::size_t(i)];
        }
        matvec(st.xn, lw.w_down, st.ffn_gate, c.d_model, c.d_ff);
        for (int i = 0; i < c.d_model; ++i) st.x[std::size_t(i)] += st.xn[std::size_t(i)];
    }

    rmsnorm(st.xn, st.x, final_norm_, c.norm_eps);
    const std::vector<float>& head = lm_head_.empty() ? embed_ : lm_head_;
    matvec(st.logits, head, st.xn, c.vocab_size, c.d_model);

    st.cache_len = pos + 1;
}

Token argmax_logits(std::span<const float> logits) {
    Token best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[std::size_t(best)]) best = Token(i);
    }
    return best;
}

DecodeResult generate(const Model& model, const TokenSequence& prompt, int max_new,
                      AttentionObserver* observer, const MaskPlan* mask,
                      const std::vector<Token>& stop) {
    const ModelConfig& c = model.config();
    if (prompt.empty()) {
        throw std::runtime_error("generate: empty prompt");
    }
    if (prompt.size() + std::size_t(std::max(max_new, 0)) > std::size_t(c.max_context)) {
        throw std::runtime_error("generate: prompt + max_new exceeds max_context");
    }

    CompiledMask compiled;
    if (mask) compiled = CompiledMask(*mask, c);

    auto is_stop = [&](Token t) {
        return model.tokenizer().is_stop(t) ||
               std::find(stop.begin(), stop.end(), t) != stop.end();
    };

    InferenceState st(c);
    TokenSequence history(prompt);
    for (std::size_t i = 0; i + 1 < prompt.size(); ++i) {
        model.forward(st, prompt[i], 0, mask ? &compiled : nullptr, nullptr,
                      std::span<const Token>(history.data(), i + 1));
    }

    DecodeResult result;
    Token pending = prompt.back();
    for (int s = 0; s < max_new; ++s) {
        model.forward(st, pending, 0, mask ? &compiled : nullptr, observer,
                      std::span<const Token>(history.data(), history.size()));
        const Token next = argmax_logits(st.logits);
        if (is_stop(next)) {
            // the stop pass is not a generation step
            if (observer) observer->cancel_step();
            result.hit_stop = true;
            break;
        }
        result.generated.push_back(next);
        history.push_back(next);
        pending = next;
    }
    result.steps = int(result.generated.size());
    result.text = model.tokenizer().decode(result.generated);
    return result;
}

}  // namespace flipscope
