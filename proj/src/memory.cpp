#include "memoir/memory.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "memoir/rng.hpp"

namespace memoir {

void EditTrainConfig::validate() const {
    if (learning_rate <= 0.0) throw std::invalid_argument("config: learning_rate must be positive");
    if (grad_clip_norm <= 0.0) throw std::invalid_argument("config: grad_clip_norm must be positive");
    if (steps_per_edit < 1) throw std::invalid_argument("config: steps_per_edit must be >= 1");
    if (n_prefix_augmentations < 1)
        throw std::invalid_argument("config: n_prefix_augmentations must be >= 1");
    if (prefix_len < 1) throw std::invalid_argument("config: prefix_len must be >= 1");
}

void RoutingConfig::validate() const {
    if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("config: tau must be in [0, 1]");
    if (k < 1) throw std::invalid_argument("config: k must be >= 1");
}

double ResidualMemory::zero_column_fraction() const {
    if (w_mem.cols == 0) return 1.0;
    int zero_cols = 0;
    for (int j = 0; j < w_mem.cols; ++j) {
        bool all_zero = true;
        for (int i = 0; i < w_mem.rows && all_zero; ++i)
            if (w_mem.at(i, j) != 0.0) all_zero = false;
        zero_cols += all_zero;
    }
    return static_cast<double>(zero_cols) / w_mem.cols;
}

// ---------------------------------------------------------------------------
// edited forward paths
// ---------------------------------------------------------------------------

Mat edited_forward_train(const Mat& w0, const Mat& w_mem, const Mat& activations,
                         const SparseMask* mask) {
    if (!w0.same_shape(w_mem)) throw std::invalid_argument("memory: w0 / w_mem shape mismatch");
    if (activations.cols != w0.cols) throw std::invalid_argument("memory: activation width mismatch");
    if (mask && static_cast<int>(mask->dim) != w0.cols)
        throw std::invalid_argument("memory: mask dimension mismatch");
    const int T = activations.rows;
    const int d = w0.rows;
    Mat out(T, d);
    for (int t = 0; t < T; ++t) {
        matvec(w0, activations.row(t), out.row(t));
        if (!mask) continue;
        const double* a = activations.row(t);
        double* o = out.row(t);
        for (uint32_t j : mask->active) {
            const double aj = a[j];
            if (aj == 0.0) continue;
            for (int i = 0; i < d; ++i) o[i] += w_mem.at(i, static_cast<int>(j)) * aj;
        }
    }
    return out;
}

namespace {

SparseMask query_mask(const RoutingConfig& rcfg, const Vec& key, const Permutation& pi,
                      std::string_view prompt_bytes) {
    switch (rcfg.strategy) {
    case SelectionStrategy::Random: {
        // deterministic per prompt so that evaluation is reproducible, but
        // under a salt unrelated to both the Hash strategy and edit-time draws
        Rng rng(mix_seed(fnv1a64(prompt_bytes.data(), prompt_bytes.size()), 0x9a11d));
        return alternative_mask(rcfg.strategy, key, rcfg.k, pi, prompt_bytes, &rng);
    }
    default:
        return alternative_mask(rcfg.strategy, key, rcfg.k, pi, prompt_bytes, nullptr);
    }
}

}  // namespace

std::pair<Mat, MatchResult> routed_forward_infer(const Mat& w0, const Mat& w_mem,
                                                 const Mat& activations, const MaskDatabase& db,
                                                 const CenteringVector& centering,
                                                 const Permutation& pi, const RoutingConfig& rcfg,
                                                 std::string_view prompt_bytes) {
    rcfg.validate();
    const Vec key = pooled_key(activations, centering);
    const SparseMask q = query_mask(rcfg, key, pi, prompt_bytes);

    if (!rcfg.conditional_activation) {
        // "w/o K.A." arm: the query's own mask, no matching step
        return {edited_forward_train(w0, w_mem, activations, &q), MatchResult{}};
    }
    MatchResult match;
    if (!db.empty()) match = db.best_match(q);
    if (match.matched_edit_id.has_value() && match.overlap_ratio >= rcfg.tau) {
        const SparseMask stored = db.mask_by_id(*match.matched_edit_id);
        return {edited_forward_train(w0, w_mem, activations, &stored), match};
    }
    // bypass: residual memory deactivated, plain projection only
    return {edited_forward_train(w0, w_mem, activations, nullptr), match};
}

// ---------------------------------------------------------------------------
// routing over prompts
// ---------------------------------------------------------------------------

RouteDecision route_prompt(const BackboneModel& model, const MaskDatabase& db,
                           const CenteringVector& centering, const Permutation& pi,
                           const RoutingConfig& rcfg, const TokenSequence& prompt) {
    rcfg.validate();
    RouteDecision dec;
    const Mat acts = ffn_input_activations(model, prompt);
    const Vec key = pooled_key(acts, centering);
    const std::string bytes = decode(prompt);
    dec.mask = query_mask(rcfg, key, pi, bytes);

    if (!rcfg.conditional_activation) {
        dec.memory_active = true;
        return dec;
    }
    if (!db.empty()) {
        dec.match = db.best_match(dec.mask);
        if (dec.match.matched_edit_id.has_value() && dec.match.overlap_ratio >= rcfg.tau) {
            dec.memory_active = true;
            dec.mask = db.mask_by_id(*dec.match.matched_edit_id);
            return dec;
        }
    }
    dec.memory_active = false;
    return dec;
}

FfnMemoryHook make_hook(const ResidualMemory& memory, const SparseMask& mask) {
    FfnMemoryHook h;
    h.w_mem = &memory.w_mem;
    h.active.assign(mask.active.begin(), mask.active.end());
    return h;
}

// ---------------------------------------------------------------------------
// per-edit training
// ---------------------------------------------------------------------------

double edit_loss_and_gradient(const BackboneModel& model, const ResidualMemory& memory,
                              const std::vector<int>& tokens, int target_begin,
                              const std::vector<uint32_t>& active_columns, Mat& grad_out) {
    FfnMemoryHook hook;
    hook.w_mem = &memory.w_mem;
    hook.active = active_columns;

    ForwardCache cache;
    forward(model, tokens, &hook, cache);
    Mat d_ffn_out;
    const double loss = backward(model, cache, tokens, target_begin, &hook, nullptr, &d_ffn_out);

    // dW_mem[:, j] = sum_t dY_t * (mask ⊙ a_t)_j; only active columns are
    // touched, everything else stays exactly zero
    grad_out.resize(memory.w_mem.rows, memory.w_mem.cols);
    const Mat& a = cache.blocks[model.cfg.edit_layer_index].a;
    const int d = memory.w_mem.rows;
    for (int t = 0; t < d_ffn_out.rows; ++t) {
        const double* dy = d_ffn_out.row(t);
        const double* at = a.row(t);
        for (uint32_t j : active_columns) {
            const double aj = at[j];
            if (aj == 0.0) continue;
            for (int i = 0; i < d; ++i) grad_out.at(i, static_cast<int>(j)) += dy[i] * aj;
        }
    }
    return loss;
}

namespace {

std::vector<int> build_training_tokens(const EditSample& sample, const std::vector<int>* prefix,
                                       int* target_begin) {
    std::vector<int> tokens;
    tokens.reserve(1 + (prefix ? prefix->size() : 0) + sample.prompt.ids.size() +
                   sample.target.ids.size());
    tokens.push_back(kBosToken);
    if (prefix) tokens.insert(tokens.end(), prefix->begin(), prefix->end());
    tokens.insert(tokens.end(), sample.prompt.ids.begin(), sample.prompt.ids.end());
    *target_begin = static_cast<int>(tokens.size());
    tokens.insert(tokens.end(), sample.target.ids.begin(), sample.target.ids.end());
    return tokens;
}

}  // namespace

std::vector<double> train_on_sample(const BackboneModel& model, ResidualMemory& memory,
                                    const EditSample& sample,
                                    const std::vector<uint32_t>& active_columns,
                                    const EditTrainConfig& tcfg) {
    tcfg.validate();
    validate_tokens(sample.prompt, model.cfg.vocab_size);
    validate_tokens(sample.target, model.cfg.vocab_size);

    // prefixes are drawn once per edit, seeded by (rng_seed, edit_id) so that
    // edits are independent of session history
    Rng rng(mix_seed(tcfg.rng_seed, static_cast<uint64_t>(sample.edit_id) * 2 + 1));
    std::vector<std::vector<int>> prefixes(tcfg.n_prefix_augmentations);
    for (auto& pfx : prefixes) {
        pfx.reserve(tcfg.prefix_len);
        KvCache cache(model.cfg);
        Vec logits;
        decode_step(model, nullptr, cache, kBosToken, logits);
        int tok = 1 + static_cast<int>(rng.next_below(model.cfg.vocab_size - 1));
        pfx.push_back(tok);
        for (int i = 1; i < tcfg.prefix_len; ++i) {
            decode_step(model, nullptr, cache, tok, logits);
            // temperature-1 sample from the model's own distribution
            double maxv = logits[0];
            for (double v : logits) maxv = std::max(maxv, v);
            double denom = 0.0;
            for (double v : logits) denom += std::exp(v - maxv);
            double u = rng.next_double() * denom;
            int pick = model.cfg.vocab_size - 1;
            double acc = 0.0;
            for (int v = 0; v < model.cfg.vocab_size; ++v) {
                acc += std::exp(logits[v] - maxv);
                if (u < acc) {
                    pick = v;
                    break;
                }
            }
            tok = pick;
            pfx.push_back(tok);
        }
    }

    std::vector<double> losses;
    losses.reserve(tcfg.steps_per_edit);
    Mat grad;
    const int d = memory.w_mem.rows;
    for (int step = 0; step < tcfg.steps_per_edit; ++step) {
        const std::vector<int>* prefix = nullptr;
        if (step % 2 == 1) prefix = &prefixes[(step / 2) % prefixes.size()];
        int target_begin = 0;
        const auto tokens = build_training_tokens(sample, prefix, &target_begin);
        const double loss =
            edit_loss_and_gradient(model, memory, tokens, target_begin, active_columns, grad);
        if (!std::isfinite(loss))
            throw std::runtime_error("edit: non-finite loss at edit " +
                                     std::to_string(sample.edit_id) + " step " +
                                     std::to_string(step));
        losses.push_back(loss);

        // global-norm clip over the active-column gradient, then plain SGD
        double norm_sq = 0.0;
        for (uint32_t j : active_columns)
            for (int i = 0; i < d; ++i) {
                const double g = grad.at(i, static_cast<int>(j));
                norm_sq += g * g;
            }
        double scale = tcfg.learning_rate;
        const double norm = std::sqrt(norm_sq);
        if (norm > tcfg.grad_clip_norm) scale *= tcfg.grad_clip_norm / norm;
        for (uint32_t j : active_columns) {
            bool touched = false;
            for (int i = 0; i < d; ++i) {
                const double g = grad.at(i, static_cast<int>(j));
                if (g == 0.0) continue;
                memory.w_mem.at(i, static_cast<int>(j)) -= scale * g;
                touched = true;
            }
            if (touched) memory.dirty[j] = 1;
        }
    }
    return losses;
}

EditReport apply_edit(const BackboneModel& model, ResidualMemory& memory, MaskDatabase& db,
                      const EditSample& sample, const EditTrainConfig& tcfg,
                      const RoutingConfig& rcfg, const CenteringVector& centering,
                      const Permutation& pi) {
    const auto t0 = std::chrono::steady_clock::now();
    rcfg.validate();
    if (db.contains_id(sample.edit_id))
        throw std::invalid_argument("edit: duplicate edit_id " + std::to_string(sample.edit_id));

    // the mask keys on the clean, un-augmented prompt
    const Mat acts = ffn_input_activations(model, sample.prompt);
    const Vec key = pooled_key(acts, centering);
    SparseMask mask;
    if (rcfg.strategy == SelectionStrategy::Random) {
        Rng rng(mix_seed(tcfg.rng_seed, static_cast<uint64_t>(sample.edit_id) * 2));
        mask = alternative_mask(rcfg.strategy, key, rcfg.k, pi, decode(sample.prompt), &rng);
    } else {
        mask = alternative_mask(rcfg.strategy, key, rcfg.k, pi, decode(sample.prompt), nullptr);
    }
    db.insert(sample.edit_id, mask);

    EditReport report;
    report.edit_id = sample.edit_id;
    report.mask_collision = db.last_insert_collided();
    report.losses = train_on_sample(model, memory, sample, mask.active, tcfg);
    report.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace memoir
