#include "twin/retrieval.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace twin::retrieval {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

std::vector<Index> argsort_desc(const Vector& scores) {
    std::vector<Index> order(scores.size());
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    return order;
}

}  // namespace

std::string to_string(GsuKind kind) {
    switch (kind) {
        case GsuKind::kTwinCp: return "twin_cp";
        case GsuKind::kSimHard: return "sim_hard";
        case GsuKind::kSimSoft: return "sim_soft";
        case GsuKind::kOracle: return "oracle";
    }
    return "unknown";
}

RetrievalResult round_robin_union(
    std::vector<attention::RelevanceScores> per_head_scores, Index k) {
    if (per_head_scores.empty()) fail("round_robin_union: no heads");
    if (k == 0) fail("round_robin_union: k must be >= 1");
    const Index length = per_head_scores[0].scores.size();
    if (length == 0) fail("round_robin_union: empty behavior sequence");

    const Index n_heads = per_head_scores.size();
    RetrievalResult result;
    result.per_head_scores = std::move(per_head_scores);

    if (length <= k) {
        // Boundary: everything is selected; order by the first head's score.
        result.indices = argsort_desc(result.per_head_scores[0].scores);
        result.provenance.assign(length, 1);
        return result;
    }

    std::vector<std::vector<Index>> orders(n_heads);
    std::vector<Index> cursors(n_heads, 0);
    for (Index a = 0; a < n_heads; ++a) {
        orders[a] = argsort_desc(result.per_head_scores[a].scores);
    }

    std::vector<std::uint8_t> provenance_by_pos(length, 0);
    std::vector<char> selected(length, 0);
    result.indices.reserve(k);
    while (result.indices.size() < k) {
        for (Index a = 0; a < n_heads && result.indices.size() < k; ++a) {
            Index& cur = cursors[a];
            // Skipped entries were proposed by this head too; they are
            // already in the result via another head.
            while (cur < length && selected[orders[a][cur]]) {
                provenance_by_pos[orders[a][cur]] |=
                    static_cast<std::uint8_t>(1u << a);
                ++cur;
            }
            if (cur >= length) continue;
            const Index pick = orders[a][cur];
            selected[pick] = 1;
            provenance_by_pos[pick] |= static_cast<std::uint8_t>(1u << a);
            result.indices.push_back(pick);
            ++cur;
        }
    }
    result.provenance.reserve(k);
    for (Index idx : result.indices) {
        result.provenance.push_back(provenance_by_pos[idx]);
    }
    return result;
}

RetrievalResult cp_gsu_retrieve(const Vector& q, const Matrix& k_inherent,
                                const Matrix& k_cross,
                                const attention::TwinParams& params,
                                Index k,
                                const CachedKeys* cached_keys) {
    const Index length = cached_keys != nullptr && !cached_keys->keys.empty()
                             ? cached_keys->keys[0].rows
                             : k_inherent.rows;
    if (length == 0) fail("cp_gsu_retrieve: empty behavior sequence");
    if (k == 0) fail("cp_gsu_retrieve: k must be >= 1");
    if (cached_keys != nullptr &&
        cached_keys->keys.size() != params.config.n_heads) {
        fail("cp_gsu_retrieve: cached keys must cover every head");
    }

    const Index n_heads = params.config.n_heads;
    std::vector<attention::RelevanceScores> scores(n_heads);
    for (Index a = 0; a < n_heads; ++a) {
        const auto& head = params.heads[a];
        Vector query = attention::project_query(q, head);
        if (cached_keys != nullptr) {
            scores[a] = attention::relevance_from_projected(
                cached_keys->keys[a], query, k_cross, head, params.config);
        } else {
            Matrix keys = attention::project_inherent(k_inherent, head);
            scores[a] = attention::relevance_from_projected(
                keys, query, k_cross, head, params.config);
        }
    }
    return round_robin_union(std::move(scores), k);
}

RetrievalResult hard_gsu(const feature::TargetItem& target,
                         std::span<const feature::BehaviorRecord> behaviors,
                         Index k) {
    if (behaviors.empty()) fail("hard_gsu: empty behavior sequence");
    if (k == 0) fail("hard_gsu: k must be >= 1");

    // Most recent first; within equal timestamps the later log position is
    // the more recent one.
    std::vector<Index> recency(behaviors.size());
    std::iota(recency.begin(), recency.end(), Index{0});
    std::sort(recency.begin(), recency.end(), [&](Index a, Index b) {
        if (behaviors[a].event_time != behaviors[b].event_time) {
            return behaviors[a].event_time > behaviors[b].event_time;
        }
        return a > b;
    });

    RetrievalResult result;
    const Index take = std::min<Index>(k, behaviors.size());
    result.indices.reserve(take);
    for (Index idx : recency) {
        if (result.indices.size() == take) break;
        if (behaviors[idx].category == target.category) {
            result.indices.push_back(idx);
        }
    }
    if (result.indices.size() < take) {
        for (Index idx : recency) {
            if (result.indices.size() == take) break;
            if (behaviors[idx].category != target.category) {
                result.indices.push_back(idx);
            }
        }
    }
    result.provenance.assign(result.indices.size(), 1);
    return result;
}

const Vector& PretrainedEmbeddings::lookup(std::uint32_t video_id) const {
    auto it = vectors.find(video_id);
    if (it == vectors.end()) {
        fail("pretrained embeddings: missing video id " +
             std::to_string(video_id));
    }
    return it->second;
}

RetrievalResult soft_gsu(const feature::TargetItem& target,
                         std::span<const feature::BehaviorRecord> behaviors,
                         const PretrainedEmbeddings& embeddings, Index k) {
    if (behaviors.empty()) fail("soft_gsu: empty behavior sequence");
    if (k == 0) fail("soft_gsu: k must be >= 1");

    const Vector& target_emb = embeddings.lookup(target.video_id);
    Vector scores(behaviors.size(), 0.0);
    for (Index i = 0; i < behaviors.size(); ++i) {
        const Vector& emb = embeddings.lookup(behaviors[i].video_id);
        double acc = 0.0;
        for (Index d = 0; d < emb.size(); ++d) acc += emb[d] * target_emb[d];
        scores[i] = acc;
    }

    RetrievalResult result;
    result.indices = topk_indices(scores, k);
    result.per_head_scores.push_back({std::move(scores)});
    result.provenance.assign(result.indices.size(), 1);
    return result;
}

RetrievalResult oracle_topk(const Vector& q, const Matrix& k_inherent,
                            const Matrix& k_cross,
                            const attention::TwinParams& esu_params,
                            Index k) {
    return cp_gsu_retrieve(q, k_inherent, k_cross, esu_params, k, nullptr);
}

double hit_rate(const RetrievalResult& candidate,
                const RetrievalResult& oracle) {
    if (oracle.indices.empty()) return 0.0;
    std::unordered_set<Index> oracle_set(oracle.indices.begin(),
                                         oracle.indices.end());
    Index hits = 0;
    for (Index idx : candidate.indices) {
        if (oracle_set.count(idx) != 0) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(oracle_set.size());
}

std::vector<CurvePoint> hit_rate_curve(
    GsuKind gsu, std::span<const Index> n_values,
    const std::function<bool(CurveInstance&)>& next_instance,
    const attention::TwinParams& esu_params,
    const PretrainedEmbeddings* pretrained, Index oracle_k) {
    if (n_values.empty()) fail("hit_rate_curve: no output sizes given");
    for (Index i = 1; i < n_values.size(); ++i) {
        if (n_values[i] < n_values[i - 1]) {
            fail("hit_rate_curve: n_values must be sorted ascending");
        }
    }
    if (gsu == GsuKind::kSimSoft && pretrained == nullptr) {
        fail("hit_rate_curve: the inner-product baseline needs embeddings");
    }

    std::vector<CurvePoint> points(n_values.size());
    for (Index i = 0; i < n_values.size(); ++i) points[i].n = n_values[i];

    CurveInstance instance;
    while (next_instance(instance)) {
        RetrievalResult oracle = oracle_topk(instance.q, instance.k_inherent,
                                             instance.k_cross, esu_params,
                                             oracle_k);
        for (Index i = 0; i < n_values.size(); ++i) {
            RetrievalResult candidate;
            switch (gsu) {
                case GsuKind::kTwinCp:
                    candidate = cp_gsu_retrieve(instance.q,
                                                instance.k_inherent,
                                                instance.k_cross, esu_params,
                                                n_values[i]);
                    break;
                case GsuKind::kSimHard:
                    candidate =
                        hard_gsu(instance.target, instance.behaviors,
                                 n_values[i]);
                    break;
                case GsuKind::kSimSoft:
                    candidate = soft_gsu(instance.target, instance.behaviors,
                                         *pretrained, n_values[i]);
                    break;
                case GsuKind::kOracle:
                    candidate = oracle_topk(instance.q, instance.k_inherent,
                                            instance.k_cross, esu_params,
                                            n_values[i]);
                    break;
            }
            points[i].mean_hit_rate += hit_rate(candidate, oracle);
            points[i].instance_count += 1;
        }
    }
    for (auto& p : points) {
        if (p.instance_count > 0) {
            p.mean_hit_rate /= static_cast<double>(p.instance_count);
        }
    }
    return points;
}

}  // namespace twin::retrieval
