#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "memoir/backbone.hpp"
#include "memoir/datagen.hpp"
#include "memoir/tophash.hpp"

namespace memoir {

// ---------------------------------------------------------------------------
// residual memory
// ---------------------------------------------------------------------------

// Zero-initialized copy of the edited projection matrix. Columns outside the
// union of all applied edit masks stay exactly zero.
struct ResidualMemory {
    Mat w_mem;                   // d_model x d_ffn
    std::vector<uint8_t> dirty;  // per column: ever received a nonzero update

    void init(int d_model, int d_ffn) {
        w_mem.resize(d_model, d_ffn);
        dirty.assign(d_ffn, 0);
    }
    size_t dirty_count() const {
        size_t n = 0;
        for (auto f : dirty) n += f;
        return n;
    }
    double dirty_fraction() const {
        return dirty.empty() ? 0.0 : static_cast<double>(dirty_count()) / dirty.size();
    }
    double zero_column_fraction() const;
};

struct EditTrainConfig {
    double learning_rate = 1.0;
    double grad_clip_norm = 1.0;
    int steps_per_edit = 50;          // paper range 30-70
    int n_prefix_augmentations = 10;
    int prefix_len = 10;
    uint64_t rng_seed = 1;

    void validate() const;
};

struct RoutingConfig {
    double tau = 0.4;
    int k = 64;
    SelectionStrategy strategy = SelectionStrategy::TopHash;
    bool conditional_activation = true;

    void validate() const;
};

// ---------------------------------------------------------------------------
// edited forward paths
// ---------------------------------------------------------------------------

// Per token t: w0 a_t + w_mem (mask ⊙ a_t). mask == nullptr applies w0 only.
Mat edited_forward_train(const Mat& w0, const Mat& w_mem, const Mat& activations,
                         const SparseMask* mask);

// Inference-time routing over a raw activation matrix: the query mask comes
// from the pooled key; memory is applied with the matched STORED mask when
// R_match >= tau and bypassed entirely otherwise.
std::pair<Mat, MatchResult> routed_forward_infer(const Mat& w0, const Mat& w_mem,
                                                 const Mat& activations, const MaskDatabase& db,
                                                 const CenteringVector& centering,
                                                 const Permutation& pi, const RoutingConfig& rcfg,
                                                 std::string_view prompt_bytes = {});

// ---------------------------------------------------------------------------
// per-edit training
// ---------------------------------------------------------------------------

struct EditReport {
    int64_t edit_id = 0;
    std::vector<double> losses;  // per step, before that step's update
    bool mask_collision = false;
    double wall_ms = 0.0;
};

// Computes the mask from the un-augmented prompt, registers it in the
// database, then runs steps_per_edit gradient steps on w_mem's masked
// columns, alternating the clean prompt with random-prefix augmentations.
EditReport apply_edit(const BackboneModel& model, ResidualMemory& memory, MaskDatabase& db,
                      const EditSample& sample, const EditTrainConfig& tcfg,
                      const RoutingConfig& rcfg, const CenteringVector& centering,
                      const Permutation& pi);

// Shared trainer core (also used by the dense comparator, which passes every
// column as active). Returns per-step losses.
std::vector<double> train_on_sample(const BackboneModel& model, ResidualMemory& memory,
                                    const EditSample& sample,
                                    const std::vector<uint32_t>& active_columns,
                                    const EditTrainConfig& tcfg);

// One analytic gradient of the mean target cross-entropy w.r.t. w_mem over
// the given sequence, restricted to active columns. Exposed for the finite-
// difference check. Returns the loss.
double edit_loss_and_gradient(const BackboneModel& model, const ResidualMemory& memory,
                              const std::vector<int>& tokens, int target_begin,
                              const std::vector<uint32_t>& active_columns, Mat& grad_out);

// ---------------------------------------------------------------------------
// routing over prompts
// ---------------------------------------------------------------------------

struct RouteDecision {
    bool memory_active = false;
    SparseMask mask;      // mask applied when active
    MatchResult match;    // empty when no matching was performed
};

// Routing decision computed once from the prompt and reused for every
// decoding step. With conditional activation off the query's own mask is
// always applied (no matching).
RouteDecision route_prompt(const BackboneModel& model, const MaskDatabase& db,
                           const CenteringVector& centering, const Permutation& pi,
                           const RoutingConfig& rcfg, const TokenSequence& prompt);

FfnMemoryHook make_hook(const ResidualMemory& memory, const SparseMask& mask);

}  // namespace memoir
