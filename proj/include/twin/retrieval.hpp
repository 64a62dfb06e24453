#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "twin/attention.hpp"
#include "twin/features.hpp"
#include "twin/numerics.hpp"

// First-stage retrieval: the consistency-preserved multi-head search, the
// category and inner-product baselines, the full-sequence oracle and
// hit-rate measurement between them.

namespace twin::retrieval {

enum class GsuKind { kTwinCp, kSimHard, kSimSoft, kOracle };

std::string to_string(GsuKind kind);

struct RetrievalResult {
    // Unique behavior positions, in collection order.
    std::vector<Index> indices;
    // One score vector per head (empty for the category/inner-product
    // baselines).
    std::vector<attention::RelevanceScores> per_head_scores;
    // Bitmask of the heads that proposed each selected index, aligned with
    // `indices`. A head proposes an index when its traversal passes it.
    std::vector<std::uint8_t> provenance;
};

// Pre-projected inherent keys per head, as served from the projection
// cache. keys[a] is an L x key_dim matrix for head a.
struct CachedKeys {
    std::vector<Matrix> keys;
};

// The multi-head union rule: heads take turns in fixed order; on its turn
// a head contributes its best not-yet-selected index (score ties broken by
// the smaller index) until k unique indices are collected. When L <= k all
// indices are returned, ordered by the first head's score.
RetrievalResult round_robin_union(
    std::vector<attention::RelevanceScores> per_head_scores, Index k);

// Multi-head search sharing the exact relevance metric of the pooling
// stage, built on round_robin_union.
//
// `cached_keys`, when given, replaces the fresh K_h projection per head
// (the serving path); the query projection and cross terms always use
// `params`.
RetrievalResult cp_gsu_retrieve(const Vector& q, const Matrix& k_inherent,
                                const Matrix& k_cross,
                                const attention::TwinParams& params,
                                Index k = 100,
                                const CachedKeys* cached_keys = nullptr);

// Same-category behaviors, most recent first, padded with the most recent
// off-category behaviors when fewer than k match.
RetrievalResult hard_gsu(const feature::TargetItem& target,
                         std::span<const feature::BehaviorRecord> behaviors,
                         Index k);

// Top-k by inner product of frozen per-video embeddings, ties broken by
// the smaller index. Throws when an id is missing from the table.
struct PretrainedEmbeddings {
    Index dim = 0;
    std::unordered_map<std::uint32_t, Vector> vectors;

    const Vector& lookup(std::uint32_t video_id) const;
};

RetrievalResult soft_gsu(const feature::TargetItem& target,
                         std::span<const feature::BehaviorRecord> behaviors,
                         const PretrainedEmbeddings& embeddings, Index k);

// The pooling stage's own metric applied to the full sequence with fresh
// parameters: identical procedure to cp_gsu_retrieve without a cache.
RetrievalResult oracle_topk(const Vector& q, const Matrix& k_inherent,
                            const Matrix& k_cross,
                            const attention::TwinParams& esu_params,
                            Index k = 100);

// |candidate ∩ oracle| / |oracle|.
double hit_rate(const RetrievalResult& candidate,
                const RetrievalResult& oracle);

// One (user, target) evaluation instance for the consistency curve.
struct CurveInstance {
    Vector q;
    Matrix k_inherent;
    Matrix k_cross;
    feature::TargetItem target;
    std::vector<feature::BehaviorRecord> behaviors;
};

struct CurvePoint {
    Index n = 0;
    double mean_hit_rate = 0.0;
    Index instance_count = 0;
};

// Mean hit rate against each instance's fresh-parameter oracle top
// `oracle_k`, per candidate output size n. `n_values` must be sorted
// ascending. The provider is pulled once per instance until it returns
// false; instances are not kept in memory. `pretrained` is required for
// the inner-product baseline only.
std::vector<CurvePoint> hit_rate_curve(
    GsuKind gsu, std::span<const Index> n_values,
    const std::function<bool(CurveInstance&)>& next_instance,
    const attention::TwinParams& esu_params,
    const PretrainedEmbeddings* pretrained, Index oracle_k = 100);

}  // namespace twin::retrieval
