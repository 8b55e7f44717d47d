#include "optlab/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <utility>

#include "optlab/errors.hpp"

namespace optlab {

namespace {

constexpr std::array<Preset, 9> kPresets{{
    {"125M", 12, 12, 768, 6.0e-4, 0.5e6, 125e6},
    {"350M", 24, 16, 1024, 3.0e-4, 0.5e6, 350e6},
    {"1.3B", 24, 32, 2048, 2.0e-4, 1e6, 1.3e9},
    {"2.7B", 32, 32, 2560, 1.6e-4, 1e6, 2.7e9},
    {"6.7B", 32, 32, 4096, 1.2e-4, 2e6, 6.7e9},
    {"13B", 40, 40, 5120, 1.0e-4, 4e6, 13e9},
    {"30B", 48, 56, 7168, 1.0e-4, 4e6, 30e9},
    {"66B", 64, 72, 9216, 0.8e-4, 2e6, 66e9},
    {"175B", 96, 96, 12288, 1.2e-4, 2e6, 175e9},
}};

std::string layer_name(std::size_t layer, std::string_view leaf) {
    return "layers." + std::to_string(layer) + "." + std::string(leaf);
}

} // namespace

void ModelConfig::validate() const {
    if (n_layers == 0) {
        throw ConfigError("model: n_layers must be at least 1");
    }
    if (n_heads == 0 || d_model == 0) {
        throw ConfigError("model: n_heads and d_model must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("model: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    if (vocab_size == 0) {
        throw ConfigError("model: vocab_size must be positive");
    }
    if (max_seq_len == 0) {
        throw ConfigError("model: max_seq_len must be at least 1");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw ConfigError("model: dropout must lie in [0, 1)");
    }
    if (ffn_mult == 0) {
        throw ConfigError("model: ffn_mult must be positive");
    }
}

std::span<const Preset> presets() { return kPresets; }

const Preset& find_preset(std::string_view name) {
    for (const auto& p : kPresets) {
        if (p.name == name) {
            return p;
        }
    }
    throw ConfigError("unknown model preset '" + std::string(name) + "'");
}

ModelConfig preset_config(const Preset& preset) {
    ModelConfig cfg;
    cfg.n_layers = preset.n_layers;
    cfg.n_heads = preset.n_heads;
    cfg.d_model = preset.d_model;
    cfg.vocab_size = kPresetVocab;
    cfg.max_seq_len = 2048;
    cfg.dropout = 0.1;
    cfg.ffn_mult = 4;
    cfg.tie_embeddings = true;
    cfg.validate();
    return cfg;
}

// ---- Parameters --------------------------------------------------------------

void Parameters::add(std::string name, ParamRole role, Tensor value) {
    params_.push_back(NamedParam{std::move(name), role, std::move(value)});
}

const Tensor& Parameters::get(std::string_view name) const {
    for (const auto& p : params_) {
        if (p.name == name) {
            return p.value;
        }
    }
    throw IndexError("no parameter named '" + std::string(name) + "'");
}

Tensor& Parameters::get(std::string_view name) {
    return const_cast<Tensor&>(std::as_const(*this).get(name));
}

std::size_t Parameters::numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        n += p.value.size();
    }
    return n;
}

Parameters Parameters::clone() const {
    Parameters out;
    for (const auto& p : params_) {
        out.add(p.name, p.role, p.value.clone());
    }
    return out;
}

void Parameters::zero_grads() {
    for (auto& p : params_) {
        p.value.clear_grad();
    }
}

std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    const std::size_t f = c.ffn_dim();
    const std::size_t per_layer = 2 * d          // ln1
                                  + d * 3 * d + 3 * d  // qkv
                                  + d * d + d          // attention output
                                  + 2 * d              // ln2
                                  + d * f + f          // fc1
                                  + f * d + d;         // fc2
    std::size_t total = c.vocab_size * d + c.max_seq_len * d + c.n_layers * per_layer + 2 * d;
    if (!c.tie_embeddings) {
        total += d * c.vocab_size;
    }
    return total;
}

Parameters parameter_layout(const ModelConfig& config) {
    config.validate();
    const std::size_t d = config.d_model;
    const std::size_t f = config.ffn_dim();
    Parameters params;
    auto zeros = [](Shape shape) { return Tensor::zeros(std::move(shape), true); };
    auto ones = [](Shape shape) { return Tensor::filled(std::move(shape), 1.0, true); };

    params.add("embed.tokens", ParamRole::token_embedding, zeros({config.vocab_size, d}));
    params.add("embed.positions", ParamRole::position_embedding, zeros({config.max_seq_len, d}));
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        params.add(layer_name(l, "ln1.gain"), ParamRole::norm_gain, ones({d}));
        params.add(layer_name(l, "ln1.bias"), ParamRole::norm_bias, zeros({d}));
        params.add(layer_name(l, "attn.qkv.weight"), ParamRole::weight, zeros({d, 3 * d}));
        params.add(layer_name(l, "attn.qkv.bias"), ParamRole::bias, zeros({3 * d}));
        params.add(layer_name(l, "attn.out.weight"), ParamRole::residual_output, zeros({d, d}));
        params.add(layer_name(l, "attn.out.bias"), ParamRole::bias, zeros({d}));
        params.add(layer_name(l, "ln2.gain"), ParamRole::norm_gain, ones({d}));
        params.add(layer_name(l, "ln2.bias"), ParamRole::norm_bias, zeros({d}));
        params.add(layer_name(l, "ffn.fc1.weight"), ParamRole::weight, zeros({d, f}));
        params.add(layer_name(l, "ffn.fc1.bias"), ParamRole::bias, zeros({f}));
        params.add(layer_name(l, "ffn.fc2.weight"), ParamRole::residual_output, zeros({f, d}));
        params.add(layer_name(l, "ffn.fc2.bias"), ParamRole::bias, zeros({d}));
    }
    params.add("final_norm.gain", ParamRole::norm_gain, ones({d}));
    params.add("final_norm.bias", ParamRole::norm_bias, zeros({d}));
    if (!config.tie_embeddings) {
        params.add("output.weight", ParamRole::output_projection, zeros({d, config.vocab_size}));
    }
    return params;
}

double init_std(ParamRole role, std::size_t n_layers) {
    switch (role) {
    case ParamRole::token_embedding:
    case ParamRole::position_embedding:
    case ParamRole::weight:
    case ParamRole::output_projection:
        return kInitStd;
    case ParamRole::residual_output:
        return kInitStd / std::sqrt(2.0 * static_cast<double>(n_layers));
    default:
        return 0.0;
    }
}

Parameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
    Parameters params = parameter_layout(config);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double stddev = init_std(params[i].role, config.n_layers);
        if (stddev == 0.0) {
            continue;
        }
        Rng rng(derive_seed({seed, i}));
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : params[i].value.data()) {
            v = dist(rng);
        }
    }
    return params;
}

// ---- forward -----------------------------------------------------------------

ForwardResult forward(Tape& tape, const ModelConfig& config, const Parameters& params,
                      std::span<const TokenId> tokens, std::size_t batch, const ForwardOptions& options) {
    if (batch == 0 || tokens.size() % batch != 0) {
        throw DimensionError("forward: " + std::to_string(tokens.size()) + " tokens do not split into " +
                             std::to_string(batch) + " sequences");
    }
    const std::size_t seq = tokens.size() / batch;
    if (seq == 0) {
        throw LengthError("forward: empty sequence");
    }
    if (seq > config.max_seq_len) {
        throw LengthError("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                          std::to_string(config.max_seq_len));
    }
    for (TokenId id : tokens) {
        if (id >= config.vocab_size) {
            throw IndexError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(config.vocab_size));
        }
    }

    const std::size_t d = config.d_model;
    const std::size_t heads = config.n_heads;
    const std::size_t hd = config.head_dim();
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double p_drop = options.training ? config.dropout : 0.0;
    std::uint64_t site = 0;
    auto drop = [&](const Tensor& t, std::uint64_t layer) {
        if (p_drop == 0.0) {
            return t;
        }
        return dropout(tape, t, p_drop,
                       derive_seed({options.dropout_seed, options.step, layer, options.stream, site++}));
    };

    std::vector<TokenId> positions(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        positions[i] = static_cast<TokenId>(i % seq);
    }
    // No dropout on embeddings.
    Tensor x = add(tape, embedding(tape, params.get("embed.tokens"), tokens),
                   embedding(tape, params.get("embed.positions"), positions));

    std::vector<Tensor> head_out(heads);
    std::vector<Tensor> seq_out(batch);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const Tensor h = layer_norm(tape, x, params.get(layer_name(l, "ln1.gain")),
                                    params.get(layer_name(l, "ln1.bias")));
        const Tensor qkv = add_bias(tape, matmul(tape, h, params.get(layer_name(l, "attn.qkv.weight"))),
                                    params.get(layer_name(l, "attn.qkv.bias")));
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t r0 = b * seq;
            const std::size_t r1 = r0 + seq;
            for (std::size_t hh = 0; hh < heads; ++hh) {
                const Tensor q = slice(tape, qkv, r0, r1, hh * hd, (hh + 1) * hd);
                const Tensor k = slice(tape, qkv, r0, r1, d + hh * hd, d + (hh + 1) * hd);
                const Tensor v = slice(tape, qkv, r0, r1, 2 * d + hh * hd, 2 * d + (hh + 1) * hd);
                Tensor att = causal_softmax(tape, scale(tape, matmul(tape, q, transpose(tape, k)), attn_scale));
                att = drop(att, l);
                head_out[hh] = matmul(tape, att, v);
            }
            seq_out[b] = heads == 1 ? head_out[0] : concat_cols(tape, head_out);
        }
        const Tensor attn = batch == 1 ? seq_out[0] : concat_rows(tape, seq_out);
        Tensor proj = add_bias(tape, matmul(tape, attn, params.get(layer_name(l, "attn.out.weight"))),
                               params.get(layer_name(l, "attn.out.bias")));
        x = add(tape, x, drop(proj, l));

        const Tensor h2 = layer_norm(tape, x, params.get(layer_name(l, "ln2.gain")),
                                     params.get(layer_name(l, "ln2.bias")));
        const Tensor f1 = relu(tape, add_bias(tape, matmul(tape, h2, params.get(layer_name(l, "ffn.fc1.weight"))),
                                              params.get(layer_name(l, "ffn.fc1.bias"))));
        Tensor f2 = add_bias(tape, matmul(tape, f1, params.get(layer_name(l, "ffn.fc2.weight"))),
                             params.get(layer_name(l, "ffn.fc2.bias")));
        x = add(tape, x, drop(f2, l));
    }

    const Tensor y = layer_norm(tape, x, params.get("final_norm.gain"), params.get("final_norm.bias"));
    Tensor logits = config.tie_embeddings
                        ? matmul(tape, y, transpose(tape, params.get("embed.tokens")))
                        : matmul(tape, y, params.get("output.weight"));
    return ForwardResult{std::move(logits), std::move(x)};
}

Tensor forward(const ModelConfig& config, const Parameters& params, std::span<const TokenId> tokens) {
    Tape tape(false);
    return forward(tape, config, params, tokens, 1).logits;
}

Tensor GptModel::logits(std::span<const TokenId> tokens) const { return forward(config_, params_, tokens); }

// ---- decoding ----------------------------------------------------------------

namespace {

std::span<const TokenId> context_window(const LanguageModel& model, const std::vector<TokenId>& seq) {
    const std::size_t ctx = model.context_length();
    std::span<const TokenId> all(seq);
    return seq.size() > ctx ? all.subspan(seq.size() - ctx) : all;
}

std::vector<double> last_row(const Tensor& logits) {
    const std::size_t v = logits.cols();
    auto data = logits.data();
    return {data.end() - static_cast<std::ptrdiff_t>(v), data.end()};
}

} // namespace

std::vector<TokenId> decode_greedy(const LanguageModel& model, std::span<const TokenId> prompt,
                                   std::size_t max_new_tokens, std::optional<TokenId> end_of_text) {
    if (prompt.empty()) {
        throw ContractError("decode_greedy: prompt must be nonempty");
    }
    if (prompt.size() > model.context_length()) {
        throw LengthError("decode_greedy: prompt of " + std::to_string(prompt.size()) +
                          " tokens exceeds context " + std::to_string(model.context_length()));
    }
    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    for (std::size_t i = 0; i < max_new_tokens; ++i) {
        const auto row = last_row(model.logits(context_window(model, seq)));
        const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
        if (end_of_text && best == *end_of_text) {
            break;
        }
        seq.push_back(best);
    }
    return seq;
}

std::size_t nucleus_sample_index(std::span<const double> probs, double p, Rng& rng) {
    if (!(p > 0.0 && p <= 1.0)) {
        throw ContractError("nucleus sampling: p must lie in (0, 1]");
    }
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    // Cumulative mass is compared against p with a 1e-12 slack.
    double mass = 0.0;
    std::size_t keep = 0;
    while (keep < order.size()) {
        mass += probs[order[keep]];
        ++keep;
        if (mass >= p - 1e-12) {
            break;
        }
    }
    const double u = uniform01(rng) * mass;
    double acc = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        acc += probs[order[i]];
        if (u < acc) {
            return order[i];
        }
    }
    return order[keep - 1];
}

std::vector<TokenId> sample_nucleus(const LanguageModel& model, std::span<const TokenId> prompt, double p,
                                    std::size_t n_tokens, std::uint64_t seed) {
    if (prompt.empty()) {
        throw ContractError("sample_nucleus: prompt must be nonempty");
    }
    Rng rng(seed);
    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    for (std::size_t i = 0; i < n_tokens; ++i) {
        const auto logp = log_softmax_row(last_row(model.logits(context_window(model, seq))));
        std::vector<double> probs(logp.size());
        std::transform(logp.begin(), logp.end(), probs.begin(), [](double v) { return std::exp(v); });
        seq.push_back(static_cast<TokenId>(nucleus_sample_index(probs, p, rng)));
    }
    return {seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end()};
}

} // namespace optlab
