#include "memoir/editor.hpp"

#include <chrono>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "memoir/bin_io.hpp"
#include "memoir/rng.hpp"

namespace memoir {

const char* editor_strategy_name(EditorStrategyKind k) {
    switch (k) {
    case EditorStrategyKind::Memoir: return "memoir";
    case EditorStrategyKind::DenseResidual: return "dense";
    case EditorStrategyKind::ExactCodebook: return "codebook";
    }
    return "unknown";
}

EditorStrategyKind editor_strategy_from_name(const std::string& name) {
    if (name == "memoir") return EditorStrategyKind::Memoir;
    if (name == "dense") return EditorStrategyKind::DenseResidual;
    if (name == "codebook") return EditorStrategyKind::ExactCodebook;
    throw std::invalid_argument("config: unknown editor strategy: " + name);
}

// ---------------------------------------------------------------------------
// session setup and stepping
// ---------------------------------------------------------------------------

EditorState make_editor_state(std::shared_ptr<const BackboneModel> backbone,
                              const BenchmarkSet& bench, const SessionConfig& scfg) {
    scfg.tcfg.validate();
    scfg.rcfg.validate();
    if (scfg.centering_n < 0) throw std::invalid_argument("config: centering_n must be >= 0");
    if (scfg.centering_n > static_cast<int>(bench.centering_corpus.size()))
        throw std::invalid_argument("config: centering_n exceeds the benchmark's centering pool");

    EditorState st;
    st.backbone = std::move(backbone);
    st.backbone_checksum = weight_checksum(*st.backbone);
    st.kind = scfg.kind;
    st.tcfg = scfg.tcfg;
    st.rcfg = scfg.rcfg;
    const auto& cfg = st.backbone->cfg;
    if (st.rcfg.k > cfg.d_ffn) throw std::invalid_argument("config: k exceeds d_ffn");
    st.memory.init(cfg.d_model, cfg.d_ffn);
    st.db = MaskDatabase(cfg.d_ffn, st.rcfg.k);

    const uint64_t pseed = scfg.perm_seed != 0 ? scfg.perm_seed : mix_seed(scfg.tcfg.rng_seed, 0x9153);
    st.pi = (st.rcfg.strategy == SelectionStrategy::TopK) ? Permutation::identity(cfg.d_ffn)
                                                          : Permutation::from_seed(cfg.d_ffn, pseed);

    // centering is computed once, before edit #1, and frozen for the session
    std::vector<TokenSequence> prompts(bench.centering_corpus.begin(),
                                       bench.centering_corpus.begin() + scfg.centering_n);
    st.centering = compute_centering(*st.backbone, prompts);
    return st;
}

EditRecord apply_next_edit(EditorState& st, const EditSample& sample) {
    switch (st.kind) {
    case EditorStrategyKind::Memoir: {
        const EditReport r = apply_edit(st.model(), st.memory, st.db, sample, st.tcfg, st.rcfg,
                                        st.centering, st.pi);
        return {r.edit_id, r.losses, r.mask_collision, r.wall_ms};
    }
    case EditorStrategyKind::DenseResidual: {
        // no mask, no database: every column is trainable on every edit
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<uint32_t> all(static_cast<size_t>(st.model().cfg.d_ffn));
        std::iota(all.begin(), all.end(), 0u);
        EditRecord rec;
        rec.edit_id = sample.edit_id;
        rec.losses = train_on_sample(st.model(), st.memory, sample, all, st.tcfg);
        rec.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        return rec;
    }
    case EditorStrategyKind::ExactCodebook: {
        const std::string key = decode(sample.prompt);
        if (st.codebook_index.count(key))
            throw std::invalid_argument("edit: duplicate codebook prompt at edit " +
                                        std::to_string(sample.edit_id));
        st.codebook_index.emplace(key, st.codebook.size());
        st.codebook.emplace_back(sample.prompt.ids, sample.target.ids);
        EditRecord rec;
        rec.edit_id = sample.edit_id;
        return rec;
    }
    }
    throw std::logic_error("editor: unhandled strategy kind");
}

EditSessionLog run_edits(EditorState& st, const BenchmarkSet& bench, int64_t up_to_edit,
                         const std::function<void(const EditorState&, const EditRecord&)>& on_edit) {
    if (bench.edits.empty()) throw std::invalid_argument("session: benchmark has no edits");
    if (up_to_edit < 0 || up_to_edit > static_cast<int64_t>(bench.edits.size()))
        throw std::invalid_argument("session: up_to_edit out of range");
    EditSessionLog log;
    for (int64_t t = st.edits_applied; t < up_to_edit; ++t) {
        const EditSample& sample = bench.edits[static_cast<size_t>(t)];
        EditRecord rec;
        try {
            rec = apply_next_edit(st, sample);
        } catch (const std::exception& e) {
            throw std::runtime_error("session: edit " + std::to_string(sample.edit_id) +
                                     " failed: " + e.what());
        }
        st.edits_applied = t + 1;
        if (on_edit) on_edit(st, rec);
        log.records.push_back(std::move(rec));
    }
    return log;
}

std::pair<EditorState, EditSessionLog> run_session(std::shared_ptr<const BackboneModel> backbone,
                                                   const BenchmarkSet& bench,
                                                   const SessionConfig& scfg, int64_t n_edits) {
    EditorState st = make_editor_state(std::move(backbone), bench, scfg);
    const int64_t T = n_edits < 0 ? static_cast<int64_t>(bench.edits.size()) : n_edits;
    EditSessionLog log = run_edits(st, bench, T);
    return {std::move(st), std::move(log)};
}

// ---------------------------------------------------------------------------
// decoding through the editor
// ---------------------------------------------------------------------------

bool strategy_can_bypass(const EditorState& st) {
    switch (st.kind) {
    case EditorStrategyKind::Memoir: return st.rcfg.conditional_activation;
    case EditorStrategyKind::DenseResidual: return false;
    case EditorStrategyKind::ExactCodebook: return true;
    }
    return false;
}

RoutedDecodeResult routed_generate(const EditorState& st, const TokenSequence& prompt, int max_new,
                                   bool capture_logits) {
    RoutedDecodeResult res;
    switch (st.kind) {
    case EditorStrategyKind::ExactCodebook: {
        const auto it = st.codebook_index.find(decode(prompt));
        if (it != st.codebook_index.end()) {
            // override fires only on an exact prompt match
            res.codebook_hit = true;
            res.tokens.role = TokenRole::target;
            const auto& stored = st.codebook[it->second].second;
            const size_t n = std::min<size_t>(stored.size(), static_cast<size_t>(max_new));
            res.tokens.ids.assign(stored.begin(), stored.begin() + n);
            return res;
        }
        GenerateResult g = generate(st.model(), nullptr, prompt, max_new, capture_logits);
        res.tokens = std::move(g.tokens);
        res.step_logits = std::move(g.step_logits);
        return res;
    }
    case EditorStrategyKind::DenseResidual: {
        // memory always active on the full column set
        SparseMask full;
        full.dim = static_cast<uint32_t>(st.model().cfg.d_ffn);
        full.active.resize(full.dim);
        std::iota(full.active.begin(), full.active.end(), 0u);
        const FfnMemoryHook hook = make_hook(st.memory, full);
        GenerateResult g = generate(st.model(), &hook, prompt, max_new, capture_logits);
        res.tokens = std::move(g.tokens);
        res.step_logits = std::move(g.step_logits);
        res.route.memory_active = true;
        return res;
    }
    case EditorStrategyKind::Memoir: {
        res.route = route_prompt(st.model(), st.db, st.centering, st.pi, st.rcfg, prompt);
        if (res.route.memory_active) {
            const FfnMemoryHook hook = make_hook(st.memory, res.route.mask);
            GenerateResult g = generate(st.model(), &hook, prompt, max_new, capture_logits);
            res.tokens = std::move(g.tokens);
            res.step_logits = std::move(g.step_logits);
        } else {
            GenerateResult g = generate(st.model(), nullptr, prompt, max_new, capture_logits);
            res.tokens = std::move(g.tokens);
            res.step_logits = std::move(g.step_logits);
        }
        return res;
    }
    }
    throw std::logic_error("editor: unhandled strategy kind");
}

double routed_target_loss(const EditorState& st, const TokenSequence& prompt,
                          const TokenSequence& target) {
    switch (st.kind) {
    case EditorStrategyKind::ExactCodebook: {
        const auto it = st.codebook_index.find(decode(prompt));
        if (it != st.codebook_index.end()) {
            // the override emits the stored target deterministically
            return st.codebook[it->second].second == target.ids ? 0.0 : 1e9;
        }
        return target_loss(st.model(), nullptr, prompt, target);
    }
    case EditorStrategyKind::DenseResidual: {
        SparseMask full;
        full.dim = static_cast<uint32_t>(st.model().cfg.d_ffn);
        full.active.resize(full.dim);
        std::iota(full.active.begin(), full.active.end(), 0u);
        const FfnMemoryHook hook = make_hook(st.memory, full);
        return target_loss(st.model(), &hook, prompt, target);
    }
    case EditorStrategyKind::Memoir: {
        const RouteDecision dec = route_prompt(st.model(), st.db, st.centering, st.pi, st.rcfg, prompt);
        if (dec.memory_active) {
            const FfnMemoryHook hook = make_hook(st.memory, dec.mask);
            return target_loss(st.model(), &hook, prompt, target);
        }
        return target_loss(st.model(), nullptr, prompt, target);
    }
    }
    throw std::logic_error("editor: unhandled strategy kind");
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {
constexpr uint32_t kStateMagic = 0x4154534d;  // "MSTA"
constexpr uint32_t kStateVersion = 1;
}  // namespace

void snapshot(const EditorState& st, const std::string& path) {
    BinWriter w;
    w.u32(kStateMagic);
    w.u32(kStateVersion);
    w.u64(st.backbone_checksum);
    w.u32(static_cast<uint32_t>(st.kind));
    w.i64(st.edits_applied);

    w.f64(st.tcfg.learning_rate);
    w.f64(st.tcfg.grad_clip_norm);
    w.i64(st.tcfg.steps_per_edit);
    w.i64(st.tcfg.n_prefix_augmentations);
    w.i64(st.tcfg.prefix_len);
    w.u64(st.tcfg.rng_seed);

    w.f64(st.rcfg.tau);
    w.i64(st.rcfg.k);
    w.u32(static_cast<uint32_t>(st.rcfg.strategy));
    w.u32(st.rcfg.conditional_activation ? 1 : 0);

    w.vec(st.centering.mean);
    w.i64(st.centering.n_samples);
    w.u64(st.pi.seed);
    w.vec_u32(st.pi.map);

    w.mat(st.memory.w_mem);
    std::vector<uint64_t> dirty_words((st.memory.dirty.size() + 63) / 64, 0ULL);
    for (size_t j = 0; j < st.memory.dirty.size(); ++j)
        if (st.memory.dirty[j]) dirty_words[j >> 6] |= 1ULL << (j & 63);
    w.vec_u64(dirty_words);

    st.db.save_section(w);

    w.u64(st.codebook.size());
    for (const auto& [p, t] : st.codebook) {
        w.bytes(decode(p));
        w.bytes(decode(t));
    }
    w.save(path);
}

EditorState restore(const std::string& path, std::shared_ptr<const BackboneModel> backbone) {
    BinReader r = BinReader::from_file(path);
    if (r.u32() != kStateMagic) throw std::runtime_error("version: not an editor state file: " + path);
    if (r.u32() != kStateVersion)
        throw std::runtime_error("version: unsupported editor state version in " + path);

    EditorState st;
    st.backbone = std::move(backbone);
    st.backbone_checksum = r.u64();
    if (weight_checksum(*st.backbone) != st.backbone_checksum)
        throw std::runtime_error("version: editor state references a different backbone checkpoint");
    st.kind = static_cast<EditorStrategyKind>(r.u32());
    st.edits_applied = r.i64();

    st.tcfg.learning_rate = r.f64();
    st.tcfg.grad_clip_norm = r.f64();
    st.tcfg.steps_per_edit = static_cast<int>(r.i64());
    st.tcfg.n_prefix_augmentations = static_cast<int>(r.i64());
    st.tcfg.prefix_len = static_cast<int>(r.i64());
    st.tcfg.rng_seed = r.u64();

    st.rcfg.tau = r.f64();
    st.rcfg.k = static_cast<int>(r.i64());
    st.rcfg.strategy = static_cast<SelectionStrategy>(r.u32());
    st.rcfg.conditional_activation = r.u32() != 0;

    st.centering.mean = r.vec();
    st.centering.n_samples = r.i64();
    st.centering.frozen = true;
    st.pi.seed = r.u64();
    st.pi.map = r.vec_u32();
    if (!st.pi.is_bijective()) throw std::runtime_error("checksum: stored permutation is not bijective");

    st.memory.w_mem = r.mat();
    const auto dirty_words = r.vec_u64();
    st.memory.dirty.assign(st.memory.w_mem.cols, 0);
    for (int j = 0; j < st.memory.w_mem.cols; ++j)
        if (dirty_words[j >> 6] & (1ULL << (j & 63))) st.memory.dirty[j] = 1;

    st.db = MaskDatabase::load_section(r);

    const uint64_t n_codebook = r.u64();
    for (uint64_t i = 0; i < n_codebook; ++i) {
        const std::string p = r.bytes();
        const std::string t = r.bytes();
        st.codebook_index.emplace(p, st.codebook.size());
        st.codebook.emplace_back(encode(p).ids, encode(t, TokenRole::target).ids);
    }
    return st;
}

void save_session_log(const EditSessionLog& log, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("io: cannot open for writing: " + path);
    for (const auto& rec : log.records) {
        nlohmann::json j;
        j["edit_id"] = rec.edit_id;
        j["losses"] = rec.losses;
        j["mask_collision"] = rec.mask_collision;
        j["wall_ms"] = rec.wall_ms;
        out << j.dump() << "\n";
    }
}

uint64_t state_content_hash(const EditorState& st) {
    uint64_t h = fnv1a64(st.memory.w_mem.v.data(), st.memory.w_mem.v.size() * sizeof(double));
    h = splitmix64(h ^ st.db.content_hash());
    h = splitmix64(h ^ st.backbone_checksum);
    h = splitmix64(h ^ static_cast<uint64_t>(st.edits_applied));
    for (const auto& [p, t] : st.codebook) {
        h = fnv1a64(p.data(), p.size() * sizeof(int), h);
        h = fnv1a64(t.data(), t.size() * sizeof(int), h);
    }
    return h;
}

}  // namespace memoir
