#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "memoir/mat.hpp"
#include "memoir/tokens.hpp"

namespace memoir {

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

struct BackboneConfig {
    int vocab_size = 256;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ffn = 256;        // width D of the FFN hidden, column count of the projection input
    int max_seq_len = 80;
    int edit_layer_index = 0;  // second-to-last block by default (n_layers - 2)
    uint64_t rng_seed = 42;

    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

struct BlockWeights {
    Mat wq, wk, wv, wo;      // d_model x d_model
    Vec ln1_g, ln1_b;        // d_model
    Vec ln2_g, ln2_b;
    Mat w_fc;                // d_ffn x d_model
    Vec b_fc;                // d_ffn
    Mat w_proj;              // d_model x d_ffn   (W0 at the edit layer)
    Vec b_proj;              // d_model
};

struct BackboneModel {
    BackboneConfig cfg;
    Mat tok_emb;             // vocab x d_model
    Mat pos_emb;             // max_seq_len x d_model
    std::vector<BlockWeights> blocks;
    Vec lnf_g, lnf_b;
    Mat w_un;                // vocab x d_model

    const Mat& edit_w0() const { return blocks[cfg.edit_layer_index].w_proj; }
};

// fresh randomly initialized model (weights drawn from cfg.rng_seed)
BackboneModel init_model(const BackboneConfig& cfg);

// fnv1a64 over every weight tensor, used by frozen-ness checks and as the
// checkpoint reference inside editor state files
uint64_t weight_checksum(const BackboneModel& m);

void save_checkpoint(const BackboneModel& m, const std::string& path);
BackboneModel load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

// Addend applied to the edit layer's FFN projection output:
//   out_t += sum_{j in active} w_mem[:, j] * a_t[j]
// i.e. Eq. (2)'s residual-memory branch with a fixed sparse column set.
struct FfnMemoryHook {
    const Mat* w_mem = nullptr;           // d_model x d_ffn
    std::vector<uint32_t> active;         // sorted mask column indices
};

struct BlockCache {
    Mat xin;        // T x d, block input
    Mat xhat1;      // ln1 normalized input
    Vec rstd1;      // per position
    Mat q, k, v;    // T x d
    Mat att;        // heads stacked: (H*T) x T, causal rows
    Mat ho;         // T x d, concatenated head outputs
    Mat x1;         // T x d, after attention residual
    Mat xhat2;
    Vec rstd2;
    Mat ffn_pre;    // T x D, pre-activation
    Mat a;          // T x D, post-activation (the edited layer's input)
    Mat f;          // T x d, FFN output incl. hook contribution
};

struct ForwardCache {
    int T = 0;
    Mat x0;
    std::vector<BlockCache> blocks;
    Mat xhatf;
    Vec rstdf;
    Mat logits;     // T x vocab
};

// full-sequence forward; tokens[0] must be the BOS id
void forward(const BackboneModel& m, const std::vector<int>& tokens, const FfnMemoryHook* hook,
             ForwardCache& cache);

// mean cross-entropy of predicting tokens[i] from position i-1, for
// i in [target_begin, tokens.size())
double sequence_loss(const ForwardCache& cache, const std::vector<int>& tokens, int target_begin);

struct Gradients {
    Mat tok_emb, pos_emb;
    struct Block {
        Mat wq, wk, wv, wo;
        Vec ln1_g, ln1_b, ln2_g, ln2_b;
        Mat w_fc;
        Vec b_fc;
        Mat w_proj;
        Vec b_proj;
    };
    std::vector<Block> blocks;
    Vec lnf_g, lnf_b;
    Mat w_un;

    void init(const BackboneConfig& cfg);
    void zero();
};

// one supervised prediction: cross-entropy of `token` under the logits at
// `position`, scaled by `weight`
struct SupervisedToken {
    int position;
    int token;
    double weight;
};

// Backward from the cross-entropy at the supervised positions.
//  - grads != nullptr: accumulate parameter gradients (pretraining path).
//  - d_edit_ffn_out != nullptr: stop at cfg.edit_layer_index and write the
//    gradient of the loss w.r.t. that block's FFN output (T x d_model);
//    no parameters below that point are visited.
// Returns the loss.
double backward(const BackboneModel& m, const ForwardCache& cache, const std::vector<int>& tokens,
                int target_begin, const FfnMemoryHook* hook, Gradients* grads, Mat* d_edit_ffn_out);

// generalized form over an explicit supervision set
double backward_weighted(const BackboneModel& m, const ForwardCache& cache,
                         const std::vector<int>& tokens,
                         const std::vector<SupervisedToken>& supervision, const FfnMemoryHook* hook,
                         Gradients* grads, Mat* d_edit_ffn_out);

// ---------------------------------------------------------------------------
// incremental decoding
// ---------------------------------------------------------------------------

struct KvCache {
    explicit KvCache(const BackboneConfig& cfg);
    int len = 0;
    std::vector<Mat> k;  // per block: max_seq x d_model
    std::vector<Mat> v;
};

// feeds one token at position cache.len; returns the logits row
void decode_step(const BackboneModel& m, const FfnMemoryHook* hook, KvCache& cache, int token,
                 Vec& logits_out);

struct GenerateResult {
    TokenSequence tokens;            // generated continuation only
    std::vector<Vec> step_logits;    // logits at each generation step (optional capture)
};

// greedy decoding; prompt does not include BOS (prepended internally).
// hook == nullptr reproduces the frozen model exactly.
GenerateResult generate(const BackboneModel& m, const FfnMemoryHook* hook,
                        const TokenSequence& prompt, int max_new, bool capture_logits = false);

// activations sigma(W_fc h + b) entering the edit layer's projection, one row
// per prompt token (the internal BOS row is excluded); computed with the
// frozen forward pass up to that layer
Mat ffn_input_activations(const BackboneModel& m, const TokenSequence& prompt);

// teacher-forced mean cross-entropy of target given prompt under an optional
// memory hook (used by perplexity and threshold metrics)
double target_loss(const BackboneModel& m, const FfnMemoryHook* hook, const TokenSequence& prompt,
                   const TokenSequence& target);

// ---------------------------------------------------------------------------
// pre-training
// ---------------------------------------------------------------------------

struct PretrainOptions {
    int batch_size = 8;
    double lr = 1.5e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double grad_clip = 1.0;
    int log_every = 0;  // 0 = silent
};

struct PretrainResult {
    BackboneModel model;
    double first_loss = 0.0;
    double last_loss = 0.0;
    std::vector<double> loss_history;  // recorded every 10 steps
};

struct CorpusPair {
    TokenSequence prompt;
    TokenSequence target;
};

// Trains a fresh model on next-token prediction over [BOS prompt target]
// sequences. Deterministic in (config, corpus, steps, options).
PretrainResult pretrain(const BackboneConfig& cfg, const std::vector<CorpusPair>& corpus, int steps,
                        const PretrainOptions& opts = {});

}  // namespace memoir
