#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "optlab/random.hpp"
#include "optlab/tensor.hpp"

namespace optlab {

inline constexpr double kInitStd = 0.006;

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t d_model = 64;
    std::size_t vocab_size = 64;
    std::size_t max_seq_len = 2048;
    double dropout = 0.1;
    std::size_t ffn_mult = 4;
    bool tie_embeddings = false;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t ffn_dim() const { return d_model * ffn_mult; }

    // Throws ConfigError naming the first violated invariant.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

/// One row of the published model family.
struct Preset {
    std::string_view name;
    std::size_t n_layers;
    std::size_t n_heads;
    std::size_t d_model;
    double max_lr;
    double batch_tokens;
    double nominal_params;
};

inline constexpr std::size_t kPresetVocab = 50272;

std::span<const Preset> presets();
const Preset& find_preset(std::string_view name);
// Full-scale ModelConfig for a preset (reference vocabulary, 2048 context,
// tied output embedding; the count matches the nominal size).
ModelConfig preset_config(const Preset& preset);

enum class ParamRole {
    token_embedding,
    position_embedding,
    norm_gain,
    norm_bias,
    weight,
    residual_output,  // attention output and second FFN matrix
    bias,
    output_projection,
};

struct NamedParam {
    std::string name;
    ParamRole role;
    Tensor value;

    bool decays() const {
        return role == ParamRole::weight || role == ParamRole::residual_output ||
               role == ParamRole::token_embedding || role == ParamRole::position_embedding ||
               role == ParamRole::output_projection;
    }
};

/// Ordered named weight collection. Order is creation order and is the order
/// used for gradients, optimizer moments and checkpoints.
class Parameters {
public:
    void add(std::string name, ParamRole role, Tensor value);

    std::size_t size() const { return params_.size(); }
    NamedParam& operator[](std::size_t i) { return params_[i]; }
    const NamedParam& operator[](std::size_t i) const { return params_[i]; }
    const Tensor& get(std::string_view name) const;
    Tensor& get(std::string_view name);
    std::size_t numel() const;

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    // Deep copy with fresh storage.
    Parameters clone() const;
    void zero_grads();

private:
    std::vector<NamedParam> params_;
};

std::size_t parameter_count(const ModelConfig& config);

// Named, shaped parameters with zero weights and unit norm gains.
Parameters parameter_layout(const ModelConfig& config);

// Initialization standard deviation for a role; zero for biases and norms.
double init_std(ParamRole role, std::size_t n_layers);

/// Normal(0, 0.006) weights, residual-output projections scaled by 1/√(2L),
/// zero biases, unit norm gains. Bit-identical for equal (config, seed).
Parameters init_parameters(const ModelConfig& config, std::uint64_t seed);

struct ForwardOptions {
    bool training = false;
    std::uint64_t dropout_seed = 0;
    std::uint64_t step = 0;
    std::uint64_t stream = 0;  // distinguishes simulated workers
};

struct ForwardResult {
    Tensor logits;        // [batch·T × V]
    Tensor final_hidden;  // residual stream after the last block, before the final norm
};

/// Causal pre-norm forward pass over `batch` equal-length sequences laid out
/// back to back in `tokens`.
ForwardResult forward(Tape& tape, const ModelConfig& config, const Parameters& params,
                      std::span<const TokenId> tokens, std::size_t batch = 1,
                      const ForwardOptions& options = {});

// Single sequence, no gradient recording, dropout off.
Tensor forward(const ModelConfig& config, const Parameters& params, std::span<const TokenId> tokens);

/// Anything that maps a token prefix to next-token logits. Row t of logits()
/// is the distribution for the token following tokens[0..t].
class LanguageModel {
public:
    virtual ~LanguageModel() = default;
    virtual std::size_t vocab_size() const = 0;
    virtual std::size_t context_length() const = 0;
    virtual Tensor logits(std::span<const TokenId> tokens) const = 0;
};

class GptModel final : public LanguageModel {
public:
    GptModel(ModelConfig config, Parameters params) : config_(std::move(config)), params_(std::move(params)) {}

    std::size_t vocab_size() const override { return config_.vocab_size; }
    std::size_t context_length() const override { return config_.max_seq_len; }
    Tensor logits(std::span<const TokenId> tokens) const override;

    const ModelConfig& config() const { return config_; }
    const Parameters& parameters() const { return params_; }

private:
    ModelConfig config_;
    Parameters params_;
};

/// Appends argmax tokens until `max_new_tokens` or end-of-text (which is not
/// appended). Returns prompt followed by the generated tokens.
std::vector<TokenId> decode_greedy(const LanguageModel& model, std::span<const TokenId> prompt,
                                   std::size_t max_new_tokens = 32,
                                   std::optional<TokenId> end_of_text = kEndOfText);

/// Draws an index from the smallest prefix of the probability-sorted
/// distribution whose mass reaches p, renormalized. Ties sort by lower id.
std::size_t nucleus_sample_index(std::span<const double> probs, double p, Rng& rng);

/// Nucleus sampling of exactly `n_tokens` tokens (no early stop). Returns only
/// the continuation.
std::vector<TokenId> sample_nucleus(const LanguageModel& model, std::span<const TokenId> prompt, double p,
                                    std::size_t n_tokens, std::uint64_t seed);

} // namespace optlab
