#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "memoir/backbone.hpp"
#include "memoir/datagen.hpp"
#include "memoir/memory.hpp"
#include "memoir/tophash.hpp"

namespace memoir {

// Memoir: full mechanism (masked residual memory + conditional activation).
// DenseResidual: the same residual layer trained without masks and always
// active at inference; isolates what sparsification and routing contribute.
// ExactCodebook: stores (prompt -> target) verbatim and overrides generation
// only on an exact prompt match.
enum class EditorStrategyKind : uint32_t { Memoir = 0, DenseResidual = 1, ExactCodebook = 2 };

const char* editor_strategy_name(EditorStrategyKind k);
EditorStrategyKind editor_strategy_from_name(const std::string& name);

struct SessionConfig {
    EditorStrategyKind kind = EditorStrategyKind::Memoir;
    EditTrainConfig tcfg;
    RoutingConfig rcfg;
    int centering_n = 100;  // prompts taken from the benchmark's centering pool
    uint64_t perm_seed = 0; // 0 = derive from tcfg.rng_seed
};

struct EditRecord {
    int64_t edit_id = 0;
    std::vector<double> losses;
    bool mask_collision = false;
    double wall_ms = 0.0;
};

struct EditSessionLog {
    std::vector<EditRecord> records;
};

struct EditorState {
    std::shared_ptr<const BackboneModel> backbone;
    uint64_t backbone_checksum = 0;
    EditorStrategyKind kind = EditorStrategyKind::Memoir;
    ResidualMemory memory;
    MaskDatabase db;
    CenteringVector centering;
    Permutation pi;
    EditTrainConfig tcfg;
    RoutingConfig rcfg;
    int64_t edits_applied = 0;

    // ExactCodebook storage, in insertion order
    std::vector<std::pair<std::vector<int>, std::vector<int>>> codebook;
    std::unordered_map<std::string, size_t> codebook_index;

    const BackboneModel& model() const { return *backbone; }
};

// Fresh state: zero memory, empty database, centering frozen from the first
// centering_n prompts of the benchmark pool (before any edit is applied).
EditorState make_editor_state(std::shared_ptr<const BackboneModel> backbone,
                              const BenchmarkSet& bench, const SessionConfig& scfg);

// applies one edit according to the strategy kind
EditRecord apply_next_edit(EditorState& st, const EditSample& sample);

// Applies edits with ids in [st.edits_applied, up_to_edit) in stream order.
// on_edit, when set, runs after every edit (checkpoint hooks, diffing).
EditSessionLog run_edits(EditorState& st, const BenchmarkSet& bench, int64_t up_to_edit,
                         const std::function<void(const EditorState&, const EditRecord&)>& on_edit = {});

// full session over the benchmark stream
std::pair<EditorState, EditSessionLog> run_session(std::shared_ptr<const BackboneModel> backbone,
                                                   const BenchmarkSet& bench,
                                                   const SessionConfig& scfg, int64_t n_edits = -1);

// ---------------------------------------------------------------------------
// decoding through the editor
// ---------------------------------------------------------------------------

struct RoutedDecodeResult {
    TokenSequence tokens;
    std::vector<Vec> step_logits;
    RouteDecision route;
    bool codebook_hit = false;
};

// Greedy decoding with the strategy's inference behavior. The routing
// decision is made once from the prompt and held fixed for all steps.
RoutedDecodeResult routed_generate(const EditorState& st, const TokenSequence& prompt, int max_new,
                                   bool capture_logits = false);

// mean target cross-entropy under the state's inference path
double routed_target_loss(const EditorState& st, const TokenSequence& prompt,
                          const TokenSequence& target);

// true when the strategy can reproduce the frozen model exactly on
// non-matching prompts (decides how locality is scored)
bool strategy_can_bypass(const EditorState& st);

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

void snapshot(const EditorState& st, const std::string& path);

// backbone must match the checkpoint reference recorded at snapshot time
EditorState restore(const std::string& path, std::shared_ptr<const BackboneModel> backbone);

void save_session_log(const EditSessionLog& log, const std::string& path);

uint64_t state_content_hash(const EditorState& st);

}  // namespace memoir
