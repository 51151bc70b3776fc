#include "memoir/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace memoir {

namespace {

bool logits_equal(const std::vector<Vec>& a, const std::vector<Vec>& b) {
    if (a.size() != b.size()) return false;
    for (size_t s = 0; s < a.size(); ++s) {
        if (a[s].size() != b[s].size()) return false;
        for (size_t v = 0; v < a[s].size(); ++v)
            if (a[s][v] != b[s][v]) return false;
    }
    return true;
}

int histogram_bin(double r) {
    int b = static_cast<int>(r * kHistogramBins);
    if (b >= kHistogramBins) b = kHistogramBins - 1;
    if (b < 0) b = 0;
    return b;
}

// R_match of a prompt against the state's database (mask-based states only)
std::optional<double> prompt_overlap_ratio(const EditorState& st, const TokenSequence& prompt) {
    if (st.kind == EditorStrategyKind::ExactCodebook || st.db.empty()) return std::nullopt;
    if (st.kind == EditorStrategyKind::DenseResidual) return std::nullopt;
    RoutingConfig probe = st.rcfg;
    probe.conditional_activation = true;  // matching itself, independent of the arm
    const RouteDecision dec = route_prompt(st.model(), st.db, st.centering, st.pi, probe, prompt);
    return dec.match.overlap_ratio;
}

}  // namespace

BaselineCache build_baseline_cache(const BackboneModel& model, const BenchmarkSet& bench,
                                   int64_t up_to_edit) {
    BaselineCache cache;
    for (int64_t t = 0; t < up_to_edit; ++t) {
        const auto& e = bench.edits[static_cast<size_t>(t)];
        const std::string key = decode(e.irrelevant_prompt);
        if (cache.irrelevant_decodes.count(key)) continue;
        GenerateResult g = generate(model, nullptr, e.irrelevant_prompt,
                                    std::max(1, e.irrelevant_target.size()), true);
        cache.irrelevant_decodes.emplace(key,
                                         BaselineCache::Entry{std::move(g.tokens), std::move(g.step_logits)});
    }
    return cache;
}

MetricsReport evaluate(const EditorState& st, const BenchmarkSet& bench, int64_t up_to_edit,
                       int window, bool with_perplexity, const BaselineCache* baseline) {
    if (up_to_edit < 0 || up_to_edit > static_cast<int64_t>(bench.edits.size()))
        throw std::invalid_argument("eval: up_to_edit out of range");
    if (up_to_edit > st.edits_applied)
        throw std::invalid_argument("eval: up_to_edit exceeds the session's applied edits");
    if (window < 1) throw std::invalid_argument("eval: window must be >= 1");

    MetricsReport rep;
    rep.up_to_edit = up_to_edit;
    rep.window_size = window;
    for (auto& h : rep.overlap_histograms) h.assign(kHistogramBins, 0);

    const bool bypass = strategy_can_bypass(st);
    rep.locality_definition = bypass
        ? "logit equality with the frozen model along the decoded path"
        : "decoded tokens equal the frozen model's decode (strategy cannot bypass)";

    // --- reliability + forgetting windows
    const int n_windows = up_to_edit > 0 ? static_cast<int>((up_to_edit + window - 1) / window) : 0;
    std::vector<int64_t> window_hits(n_windows, 0), window_totals(n_windows, 0);
    int64_t rel_hits = 0;
    double ppl_sum = 0.0;
    for (int64_t t = 0; t < up_to_edit; ++t) {
        const auto& e = bench.edits[static_cast<size_t>(t)];
        const auto dec = routed_generate(st, e.prompt, e.target.size());
        const bool hit = dec.tokens.ids == e.target.ids;
        rel_hits += hit;
        const int w = static_cast<int>(t / window);
        window_hits[w] += hit;
        window_totals[w] += 1;
        if (const auto r = prompt_overlap_ratio(st, e.prompt))
            rep.overlap_histograms[0][histogram_bin(*r)] += 1;
        if (with_perplexity) ppl_sum += std::exp(routed_target_loss(st, e.prompt, e.target));
    }
    rep.reliability = up_to_edit > 0 ? static_cast<double>(rel_hits) / up_to_edit : 0.0;
    for (int w = 0; w < n_windows; ++w)
        rep.window_reliability.emplace_back(w, static_cast<double>(window_hits[w]) / window_totals[w]);
    if (with_perplexity && up_to_edit > 0) rep.perplexity = ppl_sum / up_to_edit;
    rep.class_counts[0] = up_to_edit;

    // --- generalization over rephrases
    int64_t gen_hits = 0, gen_total = 0;
    int64_t gen_tok_hits = 0, gen_tok_total = 0;
    for (int64_t t = 0; t < up_to_edit; ++t) {
        const auto& e = bench.edits[static_cast<size_t>(t)];
        for (const auto& reph : e.rephrases) {
            const auto dec = routed_generate(st, reph, e.target.size());
            gen_hits += dec.tokens.ids == e.target.ids;
            gen_total += 1;
            for (int i = 0; i < e.target.size(); ++i) {
                gen_tok_hits += i < dec.tokens.size() && dec.tokens.ids[i] == e.target.ids[i];
                gen_tok_total += 1;
            }
            if (const auto r = prompt_overlap_ratio(st, reph))
                rep.overlap_histograms[1][histogram_bin(*r)] += 1;
        }
    }
    rep.generalization = gen_total > 0 ? static_cast<double>(gen_hits) / gen_total : 0.0;
    rep.generalization_token_acc =
        gen_tok_total > 0 ? static_cast<double>(gen_tok_hits) / gen_tok_total : 0.0;
    rep.class_counts[1] = gen_total;

    // --- locality on held-out irrelevant prompts (deduplicated by text)
    std::unordered_map<std::string, bool> local_cache;
    int64_t loc_hits = 0, loc_total = 0;
    for (int64_t t = 0; t < up_to_edit; ++t) {
        const auto& e = bench.edits[static_cast<size_t>(t)];
        const std::string key = decode(e.irrelevant_prompt);
        const int max_new = std::max(1, e.irrelevant_target.size());
        auto it = local_cache.find(key);
        if (it == local_cache.end()) {
            const BaselineCache::Entry* base = nullptr;
            BaselineCache::Entry computed;
            if (baseline) {
                const auto bit = baseline->irrelevant_decodes.find(key);
                if (bit != baseline->irrelevant_decodes.end()) base = &bit->second;
            }
            if (!base) {
                GenerateResult g = generate(st.model(), nullptr, e.irrelevant_prompt, max_new, bypass);
                computed = {std::move(g.tokens), std::move(g.step_logits)};
                base = &computed;
            }
            const auto dec = routed_generate(st, e.irrelevant_prompt, max_new, bypass);
            const bool ok = bypass ? logits_equal(dec.step_logits, base->step_logits) &&
                                         dec.tokens.ids == base->tokens.ids
                                   : dec.tokens.ids == base->tokens.ids;
            it = local_cache.emplace(key, ok).first;
            if (const auto r = prompt_overlap_ratio(st, e.irrelevant_prompt))
                rep.overlap_histograms[2][histogram_bin(*r)] += 1;
        }
        loc_hits += it->second;
        loc_total += 1;
    }
    rep.locality = loc_total > 0 ? 1.0 * loc_hits / loc_total : 1.0;
    rep.class_counts[2] = loc_total;

    rep.average = (rep.reliability + rep.generalization + rep.locality) / 3.0;
    return rep;
}

double perplexity(const EditorState& st, const TokenSequence& prompt, const TokenSequence& target) {
    if (target.empty()) throw std::invalid_argument("eval: perplexity needs a non-empty target");
    return std::exp(routed_target_loss(st, prompt, target));
}

bool threshold_success(const EditorState& st, const TokenSequence& prompt,
                       const TokenSequence& target, double delta) {
    if (delta <= 0.0) throw std::invalid_argument("eval: delta must be positive");
    return routed_target_loss(st, prompt, target) < delta;
}

std::vector<std::pair<int, double>> forgetting_curve(const EditorState& st, const BenchmarkSet& bench,
                                                     int window) {
    if (window < 1) throw std::invalid_argument("eval: window must be >= 1");
    const int64_t T = st.edits_applied;
    std::vector<std::pair<int, double>> curve;
    for (int64_t begin = 0; begin < T; begin += window) {
        const int64_t end = std::min<int64_t>(begin + window, T);
        int64_t hits = 0;
        for (int64_t t = begin; t < end; ++t) {
            const auto& e = bench.edits[static_cast<size_t>(t)];
            const auto dec = routed_generate(st, e.prompt, e.target.size());
            hits += dec.tokens.ids == e.target.ids;
        }
        curve.emplace_back(static_cast<int>(begin / window),
                           static_cast<double>(hits) / static_cast<double>(end - begin));
    }
    return curve;
}

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

AblationAxis ablation_axis_from_name(const std::string& name) {
    if (name == "k") return AblationAxis::K;
    if (name == "tau") return AblationAxis::Tau;
    if (name == "strategy") return AblationAxis::Strategy;
    if (name == "centering_n") return AblationAxis::CenteringN;
    throw std::invalid_argument("config: unknown ablation axis: " + name);
}

const char* ablation_axis_name(AblationAxis a) {
    switch (a) {
    case AblationAxis::K: return "k";
    case AblationAxis::Tau: return "tau";
    case AblationAxis::Strategy: return "strategy";
    case AblationAxis::CenteringN: return "centering_n";
    }
    return "unknown";
}

std::vector<AblationRow> ablate(std::shared_ptr<const BackboneModel> backbone,
                                const BenchmarkSet& bench, AblationAxis axis,
                                const std::vector<std::string>& values, const SessionConfig& base,
                                int64_t n_edits, int window, const BaselineCache* baseline) {
    if (values.empty()) throw std::invalid_argument("config: ablation values must be non-empty");
    std::vector<AblationRow> rows;
    for (const auto& value : values) {
        SessionConfig scfg = base;
        switch (axis) {
        case AblationAxis::K: scfg.rcfg.k = std::stoi(value); break;
        case AblationAxis::Tau: scfg.rcfg.tau = std::stod(value); break;
        case AblationAxis::Strategy: scfg.rcfg.strategy = strategy_from_name(value); break;
        case AblationAxis::CenteringN: scfg.centering_n = std::stoi(value); break;
        }
        auto [st, log] = run_session(backbone, bench, scfg, n_edits);
        AblationRow row;
        row.value = value;
        row.report = evaluate(st, bench, n_edits < 0 ? st.edits_applied : n_edits, window, false,
                              baseline);
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// report output
// ---------------------------------------------------------------------------

std::string report_csv_header() {
    return "label,up_to_edit,reliability,generalization,locality,average,"
           "generalization_token_acc,perplexity";
}

std::string report_csv_row(const std::string& label, const MetricsReport& r) {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed;
    os << label << ',' << r.up_to_edit << ',' << r.reliability << ',' << r.generalization << ','
       << r.locality << ',' << r.average << ',' << r.generalization_token_acc << ',';
    if (r.perplexity)
        os << *r.perplexity;
    else
        os << "";
    return os.str();
}

void save_report_json(const MetricsReport& r, const std::string& label, const std::string& path) {
    nlohmann::json j;
    j["label"] = label;
    j["up_to_edit"] = r.up_to_edit;
    j["reliability"] = r.reliability;
    j["generalization"] = r.generalization;
    j["locality"] = r.locality;
    j["average"] = r.average;
    j["generalization_token_acc"] = r.generalization_token_acc;
    if (r.perplexity) j["perplexity"] = *r.perplexity;
    j["locality_definition"] = r.locality_definition;
    j["window_size"] = r.window_size;
    nlohmann::json windows = nlohmann::json::array();
    for (const auto& [w, frac] : r.window_reliability) windows.push_back({{"window", w}, {"reliability", frac}});
    j["window_reliability"] = windows;
    j["histograms"] = {{"edited", r.overlap_histograms[0]},
                       {"rephrased", r.overlap_histograms[1]},
                       {"irrelevant", r.overlap_histograms[2]}};
    j["class_counts"] = r.class_counts;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("io: cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

bool reports_bit_identical(const MetricsReport& a, const MetricsReport& b) {
    if (a.up_to_edit != b.up_to_edit || a.reliability != b.reliability ||
        a.generalization != b.generalization || a.locality != b.locality ||
        a.average != b.average || a.generalization_token_acc != b.generalization_token_acc)
        return false;
    if (a.perplexity.has_value() != b.perplexity.has_value()) return false;
    if (a.perplexity && *a.perplexity != *b.perplexity) return false;
    if (a.window_reliability != b.window_reliability) return false;
    if (a.overlap_histograms != b.overlap_histograms) return false;
    if (a.class_counts != b.class_counts) return false;
    return true;
}

}  // namespace memoir
