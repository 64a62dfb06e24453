#include "twin/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace twin::attention {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

Matrix concat_rows(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) fail("concat: row count mismatch");
    Matrix out(a.rows, a.cols + b.cols);
    for (Index i = 0; i < a.rows; ++i) {
        auto dst = out.row(i);
        auto ra = a.row(i);
        auto rb = b.row(i);
        std::copy(ra.begin(), ra.end(), dst.begin());
        std::copy(rb.begin(), rb.end(), dst.begin() + a.cols);
    }
    return out;
}

// weights^T * (k_full * value_proj) for one head.
Vector pool_values(const Vector& weights, const Matrix& k_full,
                   const Matrix& value_proj) {
    Matrix values = matmul(k_full, value_proj);
    Vector out(values.cols, 0.0);
    for (Index i = 0; i < values.rows; ++i) {
        auto row = values.row(i);
        for (Index d = 0; d < out.size(); ++d) out[d] += weights[i] * row[d];
    }
    count_mul_adds(values.rows * values.cols);
    return out;
}

Vector output_projection(const Vector& concat, const Matrix& output_proj) {
    if (concat.size() != output_proj.rows) {
        fail("twin_forward: head concat width " +
             std::to_string(concat.size()) + " != output projection rows " +
             std::to_string(output_proj.rows));
    }
    Vector out(output_proj.cols, 0.0);
    for (Index r = 0; r < output_proj.rows; ++r) {
        auto row = output_proj.row(r);
        for (Index c = 0; c < out.size(); ++c) out[c] += concat[r] * row[c];
    }
    count_mul_adds(output_proj.rows * output_proj.cols);
    return out;
}

}  // namespace

void AttentionConfig::validate() const {
    if (cross_dim != 8 * cross_count) {
        fail("attention config: cross_dim must be 8 * cross_count");
    }
    if (n_heads < 1) fail("attention config: n_heads must be >= 1");
    if (key_dim < 1 || value_dim < 1) {
        fail("attention config: key_dim and value_dim must be >= 1");
    }
    if (inherent_dim < 1 || raw_key_dim < 1 || output_dim < 1) {
        fail("attention config: dimensions must be >= 1");
    }
}

void TwinParams::validate() const {
    config.validate();
    if (heads.size() != config.n_heads) {
        fail("twin params: expected " + std::to_string(config.n_heads) +
             " heads");
    }
    for (const auto& head : heads) {
        if (head.query_proj.rows != config.inherent_dim ||
            head.query_proj.cols != config.key_dim ||
            head.inherent_proj.rows != config.inherent_dim ||
            head.inherent_proj.cols != config.key_dim) {
            fail("twin params: query/inherent projection shape mismatch");
        }
        if (head.cross_weights.size() != config.cross_count ||
            head.cross_bias.size() != config.cross_count) {
            fail("twin params: cross weight count mismatch");
        }
        for (const auto& w : head.cross_weights) {
            if (w.size() != 8) fail("twin params: cross weights must be 8-wide");
        }
        if (head.value_proj.rows != config.inherent_dim + config.cross_dim ||
            head.value_proj.cols != config.value_dim) {
            fail("twin params: value projection shape mismatch");
        }
        head.query_proj.check_finite("query_proj");
        head.inherent_proj.check_finite("inherent_proj");
        head.value_proj.check_finite("value_proj");
    }
    if (output_proj.rows != config.n_heads * config.value_dim ||
        output_proj.cols != config.output_dim) {
        fail("twin params: output projection shape mismatch");
    }
}

TwinParams init_params(const AttentionConfig& config, std::uint64_t seed,
                       const InitOptions& opts) {
    config.validate();
    TwinParams params;
    params.config = config;
    const double proj_scale =
        opts.proj_gain / std::sqrt(double(config.inherent_dim));
    const double value_scale =
        1.0 / std::sqrt(double(config.inherent_dim + config.cross_dim));
    for (Index a = 0; a < config.n_heads; ++a) {
        Rng rng(derive_seed(seed, a, 0x41));
        HeadParams head;
        head.inherent_proj = Matrix(config.inherent_dim, config.key_dim);
        fill_gaussian(head.inherent_proj, rng, proj_scale);
        if (opts.tie_query_key) {
            head.query_proj = head.inherent_proj;
        } else {
            head.query_proj = Matrix(config.inherent_dim, config.key_dim);
            fill_gaussian(head.query_proj, rng, proj_scale);
        }
        head.cross_weights.resize(config.cross_count);
        for (auto& w : head.cross_weights) {
            w.assign(8, 0.0);
            fill_gaussian(w, rng, 1.0 / std::sqrt(8.0));
        }
        head.cross_bias.assign(config.cross_count, 0.0);
        fill_gaussian(head.cross_bias, rng, opts.cross_bias_scale);
        head.value_proj =
            Matrix(config.inherent_dim + config.cross_dim, config.value_dim);
        fill_gaussian(head.value_proj, rng, value_scale);
        params.heads.push_back(std::move(head));
    }
    Rng rng(derive_seed(seed, config.n_heads, 0x42));
    params.output_proj =
        Matrix(config.n_heads * config.value_dim, config.output_dim);
    fill_gaussian(params.output_proj, rng,
                  1.0 / std::sqrt(double(config.n_heads * config.value_dim)));
    return params;
}

Matrix project_inherent(const Matrix& k_inherent, const HeadParams& head) {
    if (k_inherent.cols != head.inherent_proj.rows) {
        fail("project_inherent: K_h width " + std::to_string(k_inherent.cols) +
             " != projection rows " + std::to_string(head.inherent_proj.rows));
    }
    return matmul(k_inherent, head.inherent_proj);
}

Vector project_query(const Vector& q, const HeadParams& head) {
    if (q.size() != head.query_proj.rows) {
        fail("project_query: q length mismatch");
    }
    Vector out(head.query_proj.cols, 0.0);
    for (Index r = 0; r < head.query_proj.rows; ++r) {
        auto row = head.query_proj.row(r);
        for (Index c = 0; c < out.size(); ++c) out[c] += q[r] * row[c];
    }
    count_mul_adds(head.query_proj.rows * head.query_proj.cols);
    return out;
}

Matrix compress_cross(const Matrix& k_cross, const HeadParams& head) {
    const Index j_count = head.cross_weights.size();
    if (k_cross.cols != 8 * j_count) {
        fail("compress_cross: K_c width " + std::to_string(k_cross.cols) +
             " != 8 * " + std::to_string(j_count));
    }
    Matrix out(k_cross.rows, j_count);
    for (Index i = 0; i < k_cross.rows; ++i) {
        const double* row = k_cross.data.data() + i * k_cross.cols;
        for (Index j = 0; j < j_count; ++j) {
            const double* slice = row + 8 * j;
            const double* w = head.cross_weights[j].data();
            double acc = 0.0;
            for (Index d = 0; d < 8; ++d) acc += slice[d] * w[d];
            out.at(i, j) = acc;
        }
    }
    count_mul_adds(static_cast<std::uint64_t>(k_cross.rows) * k_cross.cols);
    return out;
}

RelevanceScores relevance_from_projected(const Matrix& projected_keys,
                                         const Vector& projected_query,
                                         const Matrix& k_cross,
                                         const HeadParams& head,
                                         const AttentionConfig& config) {
    if (projected_keys.cols != projected_query.size()) {
        fail("relevance: projected key/query width mismatch");
    }
    if (projected_keys.rows != k_cross.rows) {
        fail("relevance: K_h / K_c row count mismatch");
    }
    const Index length = projected_keys.rows;
    const double scale = 1.0 / std::sqrt(double(config.key_dim));

    RelevanceScores rel;
    rel.scores.assign(length, 0.0);
    for (Index i = 0; i < length; ++i) {
        auto row = projected_keys.row(i);
        double acc = 0.0;
        for (Index d = 0; d < row.size(); ++d) {
            acc += row[d] * projected_query[d];
        }
        rel.scores[i] = acc * scale;
    }
    count_mul_adds(static_cast<std::uint64_t>(length) * projected_keys.cols);

    Matrix compressed = compress_cross(k_cross, head);
    for (Index i = 0; i < length; ++i) {
        auto row = compressed.row(i);
        double acc = 0.0;
        for (Index j = 0; j < row.size(); ++j) {
            acc += row[j] * head.cross_bias[j];
        }
        rel.scores[i] += acc;
    }
    count_mul_adds(static_cast<std::uint64_t>(length) * compressed.cols);
    return rel;
}

RelevanceScores relevance_scores(const Vector& q, const Matrix& k_inherent,
                                 const Matrix& k_cross, const HeadParams& head,
                                 const AttentionConfig& config) {
    Matrix keys = project_inherent(k_inherent, head);
    Vector query = project_query(q, head);
    return relevance_from_projected(keys, query, k_cross, head, config);
}

Vector head_attention(const Vector& q, const Matrix& k_inherent,
                      const Matrix& k_cross, const HeadParams& head,
                      const AttentionConfig& config) {
    RelevanceScores rel = relevance_scores(q, k_inherent, k_cross, head, config);
    Vector weights = softmax(rel.scores);
    // The value path runs on the retrieved finalists only, so K is used
    // unsplit here.
    Matrix k_full = concat_rows(k_inherent, k_cross);
    return pool_values(weights, k_full, head.value_proj);
}

Vector twin_forward(const Vector& q, const Matrix& k_inherent,
                    const Matrix& k_cross, const TwinParams& params) {
    if (k_inherent.rows == 0) fail("twin_forward: empty behavior sequence");
    Vector concat;
    concat.reserve(params.config.n_heads * params.config.value_dim);
    for (const auto& head : params.heads) {
        Vector out = head_attention(q, k_inherent, k_cross, head, params.config);
        concat.insert(concat.end(), out.begin(), out.end());
    }
    return output_projection(concat, params.output_proj);
}

Matrix raw_project_keys(const Matrix& k_full, const DenseHeadWeights& head) {
    if (k_full.cols != head.key_proj.rows) {
        fail("raw_project_keys: shape mismatch");
    }
    return matmul(k_full, head.key_proj);
}

Vector raw_project_query(const Vector& q_padded,
                         const DenseHeadWeights& head) {
    if (q_padded.size() != head.query_proj.rows) {
        fail("raw_project_query: shape mismatch");
    }
    Vector query(head.query_proj.cols, 0.0);
    for (Index r = 0; r < head.query_proj.rows; ++r) {
        auto row = head.query_proj.row(r);
        for (Index c = 0; c < query.size(); ++c) query[c] += q_padded[r] * row[c];
    }
    count_mul_adds(head.query_proj.rows * head.query_proj.cols);
    for (Index c = 0; c < query.size(); ++c) query[c] += head.query_bias[c];
    return query;
}

Vector raw_scores_from_projected(const Matrix& projected_keys,
                                 const Vector& projected_query,
                                 const DenseHeadWeights& head) {
    if (projected_keys.cols != projected_query.size()) {
        fail("raw_scores_from_projected: shape mismatch");
    }
    Vector scores(projected_keys.rows, 0.0);
    const double inv_scale = 1.0 / head.score_scale;
    for (Index i = 0; i < projected_keys.rows; ++i) {
        auto row = projected_keys.row(i);
        double acc = 0.0;
        for (Index d = 0; d < row.size(); ++d) {
            acc += row[d] * projected_query[d];
        }
        scores[i] = acc * inv_scale;
    }
    count_mul_adds(static_cast<std::uint64_t>(projected_keys.rows) *
                   projected_keys.cols);
    return scores;
}

Vector raw_scores(const Matrix& k_full, const Vector& q_padded,
                  const DenseHeadWeights& head) {
    Matrix keys = raw_project_keys(k_full, head);
    Vector query = raw_project_query(q_padded, head);
    return raw_scores_from_projected(keys, query, head);
}

Vector raw_mhta_forward(const Vector& q, const Matrix& k_inherent,
                        const Matrix& k_cross, const DenseMhtaParams& params) {
    if (k_inherent.rows == 0) fail("raw_mhta_forward: empty behavior sequence");
    if (q.size() != params.config.inherent_dim) {
        fail("raw_mhta_forward: q length mismatch");
    }
    Matrix k_full = concat_rows(k_inherent, k_cross);
    Vector q_padded(params.config.inherent_dim + params.config.cross_dim, 0.0);
    std::copy(q.begin(), q.end(), q_padded.begin());

    Vector concat;
    concat.reserve(params.heads.size() * params.config.value_dim);
    for (const auto& head : params.heads) {
        Vector scores = raw_scores(k_full, q_padded, head);
        Vector weights = softmax(scores);
        Vector out = pool_values(weights, k_full, head.value_proj);
        concat.insert(concat.end(), out.begin(), out.end());
    }
    return output_projection(concat, params.output_proj);
}

DenseMhtaParams build_equivalent_dense(const TwinParams& params) {
    params.validate();
    const auto& cfg = params.config;
    const Index full_dim = cfg.inherent_dim + cfg.cross_dim;
    const Index dense_key_dim = cfg.key_dim + cfg.cross_count;
    const double scale = std::sqrt(double(cfg.key_dim));

    DenseMhtaParams dense;
    dense.config = cfg;
    dense.config.raw_key_dim = dense_key_dim;
    dense.output_proj = params.output_proj;
    for (const auto& head : params.heads) {
        DenseHeadWeights w;
        w.key_proj = Matrix(full_dim, dense_key_dim);
        for (Index r = 0; r < cfg.inherent_dim; ++r) {
            for (Index c = 0; c < cfg.key_dim; ++c) {
                w.key_proj.at(r, c) = head.inherent_proj.at(r, c);
            }
        }
        for (Index j = 0; j < cfg.cross_count; ++j) {
            for (Index d = 0; d < 8; ++d) {
                w.key_proj.at(cfg.inherent_dim + 8 * j + d, cfg.key_dim + j) =
                    head.cross_weights[j][d];
            }
        }
        w.query_proj = Matrix(full_dim, dense_key_dim);
        for (Index r = 0; r < cfg.inherent_dim; ++r) {
            for (Index c = 0; c < cfg.key_dim; ++c) {
                w.query_proj.at(r, c) = head.query_proj.at(r, c);
            }
        }
        // The target has no cross block, so the bias enters as an additive
        // projected-query term, pre-multiplied by the score scale.
        w.query_bias.assign(dense_key_dim, 0.0);
        for (Index j = 0; j < cfg.cross_count; ++j) {
            w.query_bias[cfg.key_dim + j] = scale * head.cross_bias[j];
        }
        w.value_proj = head.value_proj;
        w.score_scale = scale;
        dense.heads.push_back(std::move(w));
    }
    return dense;
}

DenseMhtaParams init_raw_params(const AttentionConfig& config,
                                std::uint64_t seed) {
    config.validate();
    const Index full_dim = config.inherent_dim + config.cross_dim;
    DenseMhtaParams params;
    params.config = config;
    const double proj_scale = 1.0 / std::sqrt(double(full_dim));
    for (Index a = 0; a < config.n_heads; ++a) {
        Rng rng(derive_seed(seed, a, 0x52));
        DenseHeadWeights head;
        head.key_proj = Matrix(full_dim, config.raw_key_dim);
        fill_gaussian(head.key_proj, rng, proj_scale);
        head.query_proj = Matrix(full_dim, config.raw_key_dim);
        fill_gaussian(head.query_proj, rng, proj_scale);
        head.query_bias.assign(config.raw_key_dim, 0.0);
        head.value_proj = Matrix(full_dim, config.value_dim);
        fill_gaussian(head.value_proj, rng, proj_scale);
        head.score_scale = std::sqrt(double(config.raw_key_dim));
        params.heads.push_back(std::move(head));
    }
    Rng rng(derive_seed(seed, config.n_heads, 0x53));
    params.output_proj =
        Matrix(config.n_heads * config.value_dim, config.output_dim);
    fill_gaussian(params.output_proj, rng,
                  1.0 / std::sqrt(double(config.n_heads * config.value_dim)));
    return params;
}

}  // namespace twin::attention
