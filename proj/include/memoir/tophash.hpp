#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "memoir/backbone.hpp"
#include "memoir/bin_io.hpp"
#include "memoir/mat.hpp"
#include "memoir/rng.hpp"

namespace memoir {

// ---------------------------------------------------------------------------
// mask construction
// ---------------------------------------------------------------------------

// Mean activation over a frozen set of irrelevant prompts; subtracted from
// pooled keys before top-k selection to suppress always-high features.
// n_samples == 0 means centering is disabled (the mean is the zero vector).
struct CenteringVector {
    Vec mean;
    int64_t n_samples = 0;
    bool frozen = false;
};

// Fixed random permutation pi: [D] -> [D], reproducible from its seed.
struct Permutation {
    std::vector<uint32_t> map;
    uint64_t seed = 0;

    static Permutation identity(int dim);
    static Permutation from_seed(int dim, uint64_t seed);
    bool is_bijective() const;
    int dim() const { return static_cast<int>(map.size()); }
};

// Binary mask of width dim with exactly weight() active indices.
struct SparseMask {
    std::vector<uint32_t> active;  // sorted ascending
    uint32_t dim = 0;

    int weight() const { return static_cast<int>(active.size()); }
    bool operator==(const SparseMask&) const = default;
};

enum class SelectionStrategy : uint32_t { TopHash = 0, TopK = 1, Random = 2, Hash = 3 };

const char* strategy_name(SelectionStrategy s);
SelectionStrategy strategy_from_name(const std::string& name);

// column-wise token mean minus the centering mean
Vec pooled_key(const Mat& activations, const CenteringVector& centering);

// frozen mean of per-prompt pooled activations at the edit layer
CenteringVector compute_centering(const BackboneModel& model,
                                  const std::vector<TokenSequence>& prompts);

// top-k selection (ties at the threshold value resolved toward the lowest
// index, so exactly k survive) followed by the fixed permutation
SparseMask tophash_mask(const Vec& key, int k, const Permutation& pi);

// alternative selection strategies for the grouping ablation; rng is only
// consulted by Random
SparseMask alternative_mask(SelectionStrategy strategy, const Vec& key, int k, const Permutation& pi,
                            std::string_view prompt_bytes, Rng* rng);

// ---------------------------------------------------------------------------
// mask database
// ---------------------------------------------------------------------------

struct MatchResult {
    std::optional<int64_t> matched_edit_id;
    double overlap_ratio = 0.0;  // |query AND entry| / k
    int hamming_distance = 0;
};

// Ordered store of (edit_id -> mask), packed as bitsets. Retrieval is an
// exact linear scan maximizing overlap; ties go to the earliest edit.
class MaskDatabase {
public:
    MaskDatabase() = default;
    MaskDatabase(int dim, int k);

    void insert(int64_t edit_id, const SparseMask& mask);
    MatchResult best_match(const SparseMask& query) const;

    size_t size() const { return edit_ids_.size(); }
    bool empty() const { return edit_ids_.empty(); }
    int dim() const { return dim_; }
    int k() const { return k_; }
    size_t collision_count() const { return collision_count_; }
    bool last_insert_collided() const { return last_insert_collided_; }

    int64_t edit_id_at(size_t i) const { return edit_ids_[i]; }
    SparseMask mask_at(size_t i) const;
    bool contains_id(int64_t edit_id) const { return id_index_.count(edit_id) > 0; }
    SparseMask mask_by_id(int64_t edit_id) const;

    // overlap between two stored entries, for inspection tooling
    int overlap_between(size_t i, size_t j) const;

    void save_section(BinWriter& w) const;
    static MaskDatabase load_section(BinReader& r);

    uint64_t content_hash() const;

private:
    size_t words() const { return static_cast<size_t>((dim_ + 63) / 64); }
    const uint64_t* entry(size_t i) const { return bits_.data() + i * words(); }

    int dim_ = 0;
    int k_ = 0;
    std::vector<int64_t> edit_ids_;
    std::vector<uint64_t> bits_;
    std::unordered_map<int64_t, size_t> id_index_;
    std::unordered_set<uint64_t> mask_hashes_;
    size_t collision_count_ = 0;
    bool last_insert_collided_ = false;
};

// pack / unpack helpers shared with tests
std::vector<uint64_t> pack_mask(const SparseMask& mask);
int popcount_and(const uint64_t* a, const uint64_t* b, size_t words);
int popcount_xor(const uint64_t* a, const uint64_t* b, size_t words);

}  // namespace memoir
