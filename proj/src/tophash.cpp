#include "memoir/tophash.hpp"

#include <algorithm>
#include <bit>
#include <numeric>
#include <stdexcept>

namespace memoir {

// ---------------------------------------------------------------------------
// permutation
// ---------------------------------------------------------------------------

Permutation Permutation::identity(int dim) {
    Permutation p;
    p.map.resize(dim);
    std::iota(p.map.begin(), p.map.end(), 0u);
    p.seed = 0;
    return p;
}

Permutation Permutation::from_seed(int dim, uint64_t seed) {
    Permutation p = identity(dim);
    p.seed = seed;
    Rng rng(mix_seed(seed, 0x71e0));
    for (int i = dim - 1; i > 0; --i) {
        const auto j = static_cast<int>(rng.next_below(static_cast<uint64_t>(i) + 1));
        std::swap(p.map[i], p.map[j]);
    }
    return p;
}

bool Permutation::is_bijective() const {
    std::vector<uint32_t> sorted = map;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 0; i < sorted.size(); ++i)
        if (sorted[i] != i) return false;
    return true;
}

// ---------------------------------------------------------------------------
// keys and masks
// ---------------------------------------------------------------------------

Vec pooled_key(const Mat& activations, const CenteringVector& centering) {
    if (activations.rows < 1) throw std::invalid_argument("pooled_key: no token rows");
    const int D = activations.cols;
    if (centering.n_samples > 0 && static_cast<int>(centering.mean.size()) != D)
        throw std::invalid_argument("pooled_key: centering dimension mismatch");
    Vec key(D, 0.0);
    for (int t = 0; t < activations.rows; ++t) {
        const double* row = activations.row(t);
        for (int j = 0; j < D; ++j) key[j] += row[j];
    }
    const double inv = 1.0 / activations.rows;
    for (int j = 0; j < D; ++j) key[j] *= inv;
    if (!centering.mean.empty()) {
        if (static_cast<int>(centering.mean.size()) != D)
            throw std::invalid_argument("pooled_key: centering dimension mismatch");
        for (int j = 0; j < D; ++j) key[j] -= centering.mean[j];
    }
    return key;
}

CenteringVector compute_centering(const BackboneModel& model,
                                  const std::vector<TokenSequence>& prompts) {
    CenteringVector c;
    c.mean.assign(model.cfg.d_ffn, 0.0);
    c.n_samples = static_cast<int64_t>(prompts.size());
    c.frozen = true;
    if (prompts.empty()) return c;
    const CenteringVector zero{Vec(model.cfg.d_ffn, 0.0), 0, true};
    for (const auto& p : prompts) {
        const Mat acts = ffn_input_activations(model, p);
        const Vec key = pooled_key(acts, zero);
        for (int j = 0; j < model.cfg.d_ffn; ++j) c.mean[j] += key[j];
    }
    const double inv = 1.0 / static_cast<double>(prompts.size());
    for (auto& x : c.mean) x *= inv;
    return c;
}

namespace {

// indices of the k largest key values; ties resolved toward the lowest index
std::vector<uint32_t> select_top_k(const Vec& key, int k) {
    const int D = static_cast<int>(key.size());
    std::vector<uint32_t> idx(D);
    std::iota(idx.begin(), idx.end(), 0u);
    auto rank = [&key](uint32_t a, uint32_t b) {
        if (key[a] != key[b]) return key[a] > key[b];
        return a < b;
    };
    std::nth_element(idx.begin(), idx.begin() + (k - 1), idx.end(), rank);
    idx.resize(k);
    return idx;
}

SparseMask subset_from_rng(int D, int k, Rng& rng) {
    std::vector<uint32_t> idx(D);
    std::iota(idx.begin(), idx.end(), 0u);
    for (int i = 0; i < k; ++i) {
        const auto j = i + static_cast<int>(rng.next_below(static_cast<uint64_t>(D - i)));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    SparseMask m;
    m.active = std::move(idx);
    m.dim = static_cast<uint32_t>(D);
    return m;
}

}  // namespace

SparseMask tophash_mask(const Vec& key, int k, const Permutation& pi) {
    const int D = static_cast<int>(key.size());
    if (k < 1 || k > D) throw std::invalid_argument("tophash: k must be in [1, D]");
    if (pi.dim() != D) throw std::invalid_argument("tophash: permutation dimension mismatch");
    std::vector<uint32_t> selected = select_top_k(key, k);
    SparseMask m;
    m.dim = static_cast<uint32_t>(D);
    m.active.reserve(k);
    for (uint32_t j : selected) m.active.push_back(pi.map[j]);
    std::sort(m.active.begin(), m.active.end());
    return m;
}

SparseMask alternative_mask(SelectionStrategy strategy, const Vec& key, int k, const Permutation& pi,
                            std::string_view prompt_bytes, Rng* rng) {
    const int D = static_cast<int>(key.size());
    if (k < 1 || k > D) throw std::invalid_argument("mask: k must be in [1, D]");
    switch (strategy) {
    case SelectionStrategy::TopHash:
        return tophash_mask(key, k, pi);
    case SelectionStrategy::TopK: {
        SparseMask m;
        m.dim = static_cast<uint32_t>(D);
        m.active = select_top_k(key, k);
        std::sort(m.active.begin(), m.active.end());
        return m;
    }
    case SelectionStrategy::Random: {
        if (rng == nullptr) throw std::invalid_argument("mask: Random strategy requires an rng");
        return subset_from_rng(D, k, *rng);
    }
    case SelectionStrategy::Hash: {
        Rng hrng(mix_seed(fnv1a64(prompt_bytes), 0x4a5));
        return subset_from_rng(D, k, hrng);
    }
    }
    throw std::invalid_argument("mask: unknown strategy");
}

const char* strategy_name(SelectionStrategy s) {
    switch (s) {
    case SelectionStrategy::TopHash: return "tophash";
    case SelectionStrategy::TopK: return "topk";
    case SelectionStrategy::Random: return "random";
    case SelectionStrategy::Hash: return "hash";
    }
    return "unknown";
}

SelectionStrategy strategy_from_name(const std::string& name) {
    if (name == "tophash") return SelectionStrategy::TopHash;
    if (name == "topk") return SelectionStrategy::TopK;
    if (name == "random") return SelectionStrategy::Random;
    if (name == "hash") return SelectionStrategy::Hash;
    throw std::invalid_argument("mask: unknown selection strategy: " + name);
}

// ---------------------------------------------------------------------------
// mask database
// ---------------------------------------------------------------------------

std::vector<uint64_t> pack_mask(const SparseMask& mask) {
    std::vector<uint64_t> w((mask.dim + 63) / 64, 0ULL);
    for (uint32_t j : mask.active) {
        if (j >= mask.dim) throw std::invalid_argument("mask: active index out of range");
        w[j >> 6] |= 1ULL << (j & 63);
    }
    return w;
}

int popcount_and(const uint64_t* a, const uint64_t* b, size_t words) {
    int c = 0;
    for (size_t i = 0; i < words; ++i) c += std::popcount(a[i] & b[i]);
    return c;
}

int popcount_xor(const uint64_t* a, const uint64_t* b, size_t words) {
    int c = 0;
    for (size_t i = 0; i < words; ++i) c += std::popcount(a[i] ^ b[i]);
    return c;
}

MaskDatabase::MaskDatabase(int dim, int k) : dim_(dim), k_(k) {
    if (dim < 1 || k < 1 || k > dim) throw std::invalid_argument("mask_db: bad (dim, k)");
}

void MaskDatabase::insert(int64_t edit_id, const SparseMask& mask) {
    if (dim_ == 0) throw std::invalid_argument("mask_db: uninitialized");
    if (static_cast<int>(mask.dim) != dim_) throw std::invalid_argument("mask_db: dimension mismatch");
    if (mask.weight() != k_) throw std::invalid_argument("mask_db: mask weight differs from k");
    if (id_index_.count(edit_id)) throw std::invalid_argument("mask_db: duplicate edit_id");
    const auto packed = pack_mask(mask);
    const uint64_t h = fnv1a64(packed.data(), packed.size() * sizeof(uint64_t));
    last_insert_collided_ = false;
    if (!mask_hashes_.insert(h).second) {
        // identical fingerprint as an earlier edit; allowed, but reported
        ++collision_count_;
        last_insert_collided_ = true;
    }
    id_index_.emplace(edit_id, edit_ids_.size());
    edit_ids_.push_back(edit_id);
    bits_.insert(bits_.end(), packed.begin(), packed.end());
}

MatchResult MaskDatabase::best_match(const SparseMask& query) const {
    MatchResult r;
    if (dim_ == 0 || static_cast<int>(query.dim) != dim_)
        throw std::invalid_argument("mask_db: query dimension mismatch");
    if (query.weight() != k_) throw std::invalid_argument("mask_db: query weight differs from k");
    if (edit_ids_.empty()) {
        r.hamming_distance = 2 * k_;
        return r;
    }
    const auto packed = pack_mask(query);
    const size_t wpm = words();
    int best_overlap = -1;
    size_t best_i = 0;
    for (size_t i = 0; i < edit_ids_.size(); ++i) {
        const int o = popcount_and(packed.data(), entry(i), wpm);
        if (o > best_overlap) {
            best_overlap = o;
            best_i = i;
        }
    }
    r.matched_edit_id = edit_ids_[best_i];
    r.overlap_ratio = static_cast<double>(best_overlap) / k_;
    r.hamming_distance = 2 * (k_ - best_overlap);
    return r;
}

SparseMask MaskDatabase::mask_at(size_t i) const {
    SparseMask m;
    m.dim = static_cast<uint32_t>(dim_);
    const uint64_t* w = entry(i);
    for (int j = 0; j < dim_; ++j)
        if (w[j >> 6] & (1ULL << (j & 63))) m.active.push_back(static_cast<uint32_t>(j));
    return m;
}

SparseMask MaskDatabase::mask_by_id(int64_t edit_id) const {
    const auto it = id_index_.find(edit_id);
    if (it == id_index_.end()) throw std::invalid_argument("mask_db: unknown edit_id");
    return mask_at(it->second);
}

int MaskDatabase::overlap_between(size_t i, size_t j) const {
    return popcount_and(entry(i), entry(j), words());
}

void MaskDatabase::save_section(BinWriter& w) const {
    w.u32(static_cast<uint32_t>(dim_));
    w.u32(static_cast<uint32_t>(k_));
    w.u64(collision_count_);
    w.vec_i64(edit_ids_);
    w.vec_u64(bits_);
}

MaskDatabase MaskDatabase::load_section(BinReader& r) {
    const int dim = static_cast<int>(r.u32());
    const int k = static_cast<int>(r.u32());
    MaskDatabase db(dim, k);
    db.collision_count_ = r.u64();
    db.edit_ids_ = r.vec_i64();
    db.bits_ = r.vec_u64();
    if (db.bits_.size() != db.edit_ids_.size() * db.words())
        throw std::runtime_error("mask_db: corrupt section");
    for (size_t i = 0; i < db.edit_ids_.size(); ++i) {
        db.id_index_.emplace(db.edit_ids_[i], i);
        db.mask_hashes_.insert(fnv1a64(db.entry(i), db.words() * sizeof(uint64_t)));
    }
    return db;
}

uint64_t MaskDatabase::content_hash() const {
    uint64_t h = fnv1a64(edit_ids_.data(), edit_ids_.size() * sizeof(int64_t));
    h = fnv1a64(bits_.data(), bits_.size() * sizeof(uint64_t), h);
    return h;
}

}  // namespace memoir
