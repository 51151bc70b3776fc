#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "memoir/datagen.hpp"
#include "memoir/editor.hpp"

namespace memoir {

constexpr int kHistogramBins = 20;
// delta = -log(0.8), the probability-threshold success criterion
inline const double kDefaultSuccessDelta = -std::log(0.8);

struct MetricsReport {
    int64_t up_to_edit = 0;
    double reliability = 0.0;
    double generalization = 0.0;
    double locality = 0.0;
    double average = 0.0;
    double generalization_token_acc = 0.0;  // secondary, token-level view
    std::optional<double> perplexity;       // mean post-edit perplexity on edited pairs

    // reliability of earlier edit windows measured at the final state
    int window_size = 0;
    std::vector<std::pair<int, double>> window_reliability;

    // R_match histograms per prompt class (edited / rephrased / irrelevant);
    // bin i covers [i/20, (i+1)/20), final bin inclusive of 1.0
    std::array<std::vector<int64_t>, 3> overlap_histograms;
    std::array<int64_t, 3> class_counts = {0, 0, 0};

    std::string locality_definition;  // how locality was scored for this state
};

// State-independent decodes of the frozen backbone, shareable across the
// evaluation of many editor states over the same benchmark.
struct BaselineCache {
    struct Entry {
        TokenSequence tokens;
        std::vector<Vec> step_logits;
    };
    std::unordered_map<std::string, Entry> irrelevant_decodes;
};

BaselineCache build_baseline_cache(const BackboneModel& model, const BenchmarkSet& bench,
                                   int64_t up_to_edit);

// Reliability: greedy decode of each edited prompt exactly matches its
// target. Generalization: same over rephrases. Locality: irrelevant prompts
// behave exactly like the frozen model (logit equality when the strategy can
// bypass, decoded-token equality otherwise).
MetricsReport evaluate(const EditorState& st, const BenchmarkSet& bench, int64_t up_to_edit,
                       int window = 100, bool with_perplexity = false,
                       const BaselineCache* baseline = nullptr);

// exp(mean target cross-entropy) under routed inference
double perplexity(const EditorState& st, const TokenSequence& prompt, const TokenSequence& target);

// true iff mean target-token loss < delta (strict)
bool threshold_success(const EditorState& st, const TokenSequence& prompt,
                       const TokenSequence& target, double delta = kDefaultSuccessDelta);

// final-state reliability per window of consecutive edits
std::vector<std::pair<int, double>> forgetting_curve(const EditorState& st,
                                                     const BenchmarkSet& bench, int window);

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

enum class AblationAxis { K, Tau, Strategy, CenteringN };

AblationAxis ablation_axis_from_name(const std::string& name);
const char* ablation_axis_name(AblationAxis a);

struct AblationRow {
    std::string value;
    MetricsReport report;
};

// One full session + evaluation per value, identical seeds across values.
std::vector<AblationRow> ablate(std::shared_ptr<const BackboneModel> backbone,
                                const BenchmarkSet& bench, AblationAxis axis,
                                const std::vector<std::string>& values, const SessionConfig& base,
                                int64_t n_edits, int window = 100,
                                const BaselineCache* baseline = nullptr);

// ---------------------------------------------------------------------------
// report output
// ---------------------------------------------------------------------------

std::string report_csv_header();
std::string report_csv_row(const std::string& label, const MetricsReport& r);
void save_report_json(const MetricsReport& r, const std::string& label, const std::string& path);

bool reports_bit_identical(const MetricsReport& a, const MetricsReport& b);

}  // namespace memoir
