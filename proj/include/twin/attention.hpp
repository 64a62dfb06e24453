#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "twin/numerics.hpp"
#include "twin/rng.hpp"

// Feature-split multi-head target attention: relevance scoring over the
// split behavior matrix [K_h K_c], softmax pooling over retrieved finalists,
// and a reference dense multi-head target attention used for equivalence
// and ablation runs.
//
// For one head, the relevance of L behaviors to a target with inherent
// embedding q is
//
//   scores = (K_h * inherent_proj) * (q^T * query_proj)^T / sqrt(key_dim)
//          + compress(K_c) * cross_bias
//
// where compress() projects each 8-wide cross-feature slice onto its own
// weight vector, one output column per cross feature.

namespace twin::attention {

struct AttentionConfig {
    Index inherent_dim = 144;   // width of K_h
    Index cross_dim = 40;       // width of K_c, 8 per cross feature
    Index cross_count = 5;      // number of cross features
    Index key_dim = 32;         // projected query/key width per head
    Index value_dim = 32;       // projected value width per head
    Index n_heads = 4;
    Index raw_key_dim = 32;     // key projection width of the dense reference
    Index output_dim = 32;      // width of the concatenated-head projection

    void validate() const;  // throws std::invalid_argument
};

struct HeadParams {
    Matrix query_proj;                  // inherent_dim x key_dim
    Matrix inherent_proj;               // inherent_dim x key_dim
    std::vector<Vector> cross_weights;  // cross_count vectors of length 8
    Vector cross_bias;                  // length cross_count
    Matrix value_proj;                  // (inherent_dim + cross_dim) x value_dim
};

struct TwinParams {
    AttentionConfig config;
    std::vector<HeadParams> heads;
    Matrix output_proj;  // (n_heads * value_dim) x output_dim

    void validate() const;
};

// Per-head relevance scores for one (target, behaviors) pair.
struct RelevanceScores {
    Vector scores;  // length L
};

struct InitOptions {
    // Tie query_proj to inherent_proj at init so the initial relevance acts
    // like an inner-product similarity instead of an arbitrary bilinear form.
    bool tie_query_key = false;
    // Multiplier on the fan-in scale of the query/key projections; raising
    // it lets the inherent term dominate the untrained score.
    double proj_gain = 1.0;
    double cross_bias_scale = 0.3;
};

TwinParams init_params(const AttentionConfig& config, std::uint64_t seed,
                       const InitOptions& opts = {});

// K_h * inherent_proj; the unit of caching in the serving simulator.
Matrix project_inherent(const Matrix& k_inherent, const HeadParams& head);

// q^T * query_proj, one row per request.
Vector project_query(const Vector& q, const HeadParams& head);

// Column j is the j-th 8-wide slice of K_c times its weight vector.
Matrix compress_cross(const Matrix& k_cross, const HeadParams& head);

// Scoring from already-projected keys and query: the part of the relevance
// computation that runs per behavior online.
RelevanceScores relevance_from_projected(const Matrix& projected_keys,
                                         const Vector& projected_query,
                                         const Matrix& k_cross,
                                         const HeadParams& head,
                                         const AttentionConfig& config);

// Full single-head relevance from raw K_h / K_c.
RelevanceScores relevance_scores(const Vector& q, const Matrix& k_inherent,
                                 const Matrix& k_cross, const HeadParams& head,
                                 const AttentionConfig& config);

// Softmax(scores)^T * [K_h K_c] * value_proj for one head.
Vector head_attention(const Vector& q, const Matrix& k_inherent,
                      const Matrix& k_cross, const HeadParams& head,
                      const AttentionConfig& config);

// Concatenated head outputs times output_proj. Throws on empty input.
Vector twin_forward(const Vector& q, const Matrix& k_inherent,
                    const Matrix& k_cross, const TwinParams& params);

// Dense reference attention over the unsplit K = [K_h K_c]. The target has
// no cross features; its key-side block is zero-padded and an additive
// projected-query bias carries anything that cannot pass through the zero
// block.
struct DenseHeadWeights {
    Matrix key_proj;    // (inherent_dim + cross_dim) x raw_key_dim
    Matrix query_proj;  // (inherent_dim + cross_dim) x raw_key_dim
    Vector query_bias;  // raw_key_dim
    Matrix value_proj;  // (inherent_dim + cross_dim) x value_dim
    double score_scale = 1.0;  // divisor applied to the key-query dots
};

struct DenseMhtaParams {
    AttentionConfig config;
    std::vector<DenseHeadWeights> heads;
    Matrix output_proj;
};

Matrix raw_project_keys(const Matrix& k_full, const DenseHeadWeights& head);

// q_padded^T * query_proj + query_bias.
Vector raw_project_query(const Vector& q_padded, const DenseHeadWeights& head);

Vector raw_scores_from_projected(const Matrix& projected_keys,
                                 const Vector& projected_query,
                                 const DenseHeadWeights& head);

Vector raw_scores(const Matrix& k_full, const Vector& q_padded,
                  const DenseHeadWeights& head);

// Standard multi-head target attention over the full-width K.
Vector raw_mhta_forward(const Vector& q, const Matrix& k_inherent,
                        const Matrix& k_cross, const DenseMhtaParams& params);

// Assembles dense weights that reproduce the split-path scores exactly:
// key projection [[inherent_proj, 0], [0, diag-blocks(cross_weights)]] and
// the cross bias folded into the query bias, pre-multiplied by the score
// scale so the shared 1/sqrt(key_dim) divisor cancels.
DenseMhtaParams build_equivalent_dense(const TwinParams& params);

DenseMhtaParams init_raw_params(const AttentionConfig& config,
                                std::uint64_t seed);

}  // namespace twin::attention
