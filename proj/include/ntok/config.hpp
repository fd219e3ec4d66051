#pragma once

#include <cstdint>
#include <string>

#include "ntok/errors.hpp"

namespace ntok {

enum class EncoderMode { Native, Bidirectional, CausalMask };

std::string to_string(EncoderMode m);
EncoderMode encoder_mode_from_string(const std::string& s);

struct ModelConfig {
    int image_size = 32;
    int channels = 3;
    int patch_size = 8;
    int context_layers = 4;
    int context_dim = 64;
    int context_heads = 4;
    int num_tokens = 8; // L
    int token_dim = 32;
    int token_heads = 4;
    int expert_depth = 1;
    int decoder_layers = 4;
    int decoder_dim = 64;
    int decoder_heads = 4;
    int codebook_size = 256; // K
    int mlp_ratio = 4;
    EncoderMode encoder_mode = EncoderMode::Native;
    bool switcher_single_linear = false;
    bool quantize_in_loop = false;
    bool shared_padding = false;
    bool per_position_absent = false;
    bool ema_codebook = false;
    double commit_beta = 0.25;
    int dead_code_steps = 256;
    bool dead_code_reinit = true;
    uint64_t seed = 1;

    int patches_per_side() const { return image_size / patch_size; }
    int num_patches() const { return patches_per_side() * patches_per_side(); }
    int patch_vec() const { return channels * patch_size * patch_size; }
    void validate() const;
};

struct TrainSchedule {
    int total_steps = 2000;
    int warmup_steps = 100;
    double base_lr = 1e-4;
    double end_lr = 1e-5;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double frozen_fraction = 0.9;
    int batch_size = 32;
    uint64_t seed = 7;
    int log_interval = 50;
    int ckpt_interval = 0; // 0 = final checkpoint only
    // probability of adding a random-length prefix reconstruction term
    // (used by decoder fine-tuning to train the absent-token path)
    double prefix_train_prob = 0.0;

    void validate() const;
};

struct SynthSpec {
    int n_train = 256;
    int n_val = 64;
    int num_classes = 8;
    int image_size = 32;
    uint64_t seed = 3;

    void validate() const;
};

struct GeneratorConfig {
    int layers = 3;
    int dim = 64;
    int heads = 4;
    int num_classes = 8;
    int vocab = 256;   // matches tokenizer codebook
    int max_len = 8;   // matches tokenizer token count
    uint64_t seed = 11;

    void validate() const;
};

struct ProbeConfig {
    int class_id = -1; // -1: drawn per trial
    int pos_i = -1;    // -1: drawn per trial
    int pos_j = -1;
    int top_k = 0;     // 0: max(2, vocab/40)
    int trials = 200;
    double temperature = 1.0;
    uint64_t seed = 19;
};

// Flat `key = value` run configuration; one file drives every subcommand.
struct RunConfig {
    ModelConfig model;
    TrainSchedule train;
    SynthSpec synth;
    GeneratorConfig gen;
    ProbeConfig probe;

    void validate() const;
};

// Parses `key = value` lines; '#' starts a comment; unknown keys are rejected.
RunConfig parse_run_config_text(const std::string& text);
RunConfig load_run_config(const std::string& path);
// Canonical serialization: fixed key order, round-trip stable.
std::string serialize_run_config(const RunConfig& cfg);
// Applies one `key=value` override (CLI --set).
void apply_override(RunConfig& cfg, const std::string& key_eq_value);

} // namespace ntok
