#include "twin/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "twin/rng.hpp"

namespace twin::train {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Index resolve_workers(Index configured) {
    if (configured > 0) return configured;
    if (const char* env = std::getenv("TWIN_WORKERS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n > 0) return static_cast<Index>(n);
    }
    return 1;
}

// ---------------------------------------------------------------------------
// Per-sample forward cache

struct HeadCache {
    Matrix keys;        // L_sel x key_dim
    Vector query;       // key_dim
    Matrix compressed;  // L_sel x J
    Vector alpha;
    Vector weights;
    Matrix values;  // L_sel x value_dim
    Vector out;
};

struct RawHeadCache {
    Matrix keys;  // L_sel x raw_key_dim
    Vector query;
    Vector alpha;
    Vector weights;
    Matrix values;
    Vector out;
};

struct SampleCache {
    const datagen::LabeledSample* sample = nullptr;
    std::vector<feature::BehaviorRecord> selected_records;
    Matrix k_h;     // selected rows
    Matrix k_c;     // selected rows, unmasked
    Matrix k_full;  // cross block zeroed when the bias path is off
    Vector q;
    std::vector<HeadCache> heads;
    std::vector<RawHeadCache> raw_heads;
    Vector concat;
    Vector attn_out;
    std::vector<feature::BehaviorRecord> short_records;
    Vector short_vec;
    Vector z;
    Vector h1_pre, h1, h2_pre, h2;
    double logit = 0.0;
    double yhat = 0.0;
};

// Per-step scoring context for the consistency-preserved first stage: the
// pool-level projected keys play the embedding-server role, bit-identical
// to projecting each behavior row directly.
struct StepContext {
    std::vector<Matrix> pool_keys;  // per head: n_videos x key_dim
    attention::TwinParams scoring;  // bias zeroed when the bias path is off
    bool has_pool = false;
};

Index mlp_input_dim(const datagen::World& world, const TrainConfig& config) {
    Index dim = config.attention.output_dim + world.schema.inherent_dim() + 1;
    if (config.use_short_term) dim += world.schema.inherent_dim();
    return dim;
}

std::span<const feature::BehaviorRecord> gsu_input(
    const std::vector<feature::BehaviorRecord>& history,
    const TrainConfig& config) {
    if (config.gsu_input_length == 0 ||
        history.size() <= config.gsu_input_length) {
        return history;
    }
    return std::span<const feature::BehaviorRecord>(
        history.data() + history.size() - config.gsu_input_length,
        config.gsu_input_length);
}

StepContext build_step_context(const ModelParams& params,
                               const datagen::World& world,
                               const TrainConfig& config) {
    StepContext ctx;
    ctx.scoring = params.twin;
    if (!config.use_cross_bias) {
        for (auto& head : ctx.scoring.heads) {
            std::fill(head.cross_bias.begin(), head.cross_bias.end(), 0.0);
        }
    }
    const bool needs_pool = !config.raw_mhta &&
                            (config.gsu == retrieval::GsuKind::kTwinCp ||
                             config.gsu == retrieval::GsuKind::kOracle);
    if (!needs_pool) return ctx;

    const Index n_videos = world.config.n_videos;
    Matrix pool_kh(n_videos, world.schema.inherent_dim());
    for (Index v = 0; v < n_videos; ++v) {
        Vector row = feature::embed_target(
            world.item_of(static_cast<std::uint32_t>(v)), world.schema,
            params.tables);
        std::copy(row.begin(), row.end(), pool_kh.row(v).begin());
    }
    for (Index a = 0; a < ctx.scoring.config.n_heads; ++a) {
        ctx.pool_keys.push_back(
            attention::project_inherent(pool_kh, ctx.scoring.heads[a]));
    }
    ctx.has_pool = true;
    return ctx;
}

std::vector<Index> select_finalists(
    const datagen::LabeledSample& sample,
    std::span<const feature::BehaviorRecord> input, const Vector& q,
    const ModelParams& params, const StepContext& ctx,
    const datagen::World& world, const TrainConfig& config,
    const retrieval::PretrainedEmbeddings* pretrained) {
    const Index k = config.finalists;
    if (config.raw_mhta) {
        // The unsplit metric over the full K, no caching possible.
        auto [kh, kc] = feature::assemble_K(input, world.schema, params.tables);
        Matrix k_full(kh.rows, kh.cols + kc.cols);
        for (Index i = 0; i < kh.rows; ++i) {
            std::copy(kh.row(i).begin(), kh.row(i).end(),
                      k_full.row(i).begin());
            std::copy(kc.row(i).begin(), kc.row(i).end(),
                      k_full.row(i).begin() + kh.cols);
        }
        Vector q_pad(kh.cols + kc.cols, 0.0);
        std::copy(q.begin(), q.end(), q_pad.begin());
        std::vector<attention::RelevanceScores> scores;
        for (const auto& head : params.raw.heads) {
            scores.push_back(
                {attention::raw_scores(k_full, q_pad, head)});
        }
        return retrieval::round_robin_union(std::move(scores), k).indices;
    }
    switch (config.gsu) {
        case retrieval::GsuKind::kTwinCp:
        case retrieval::GsuKind::kOracle: {
            // Gathered pool keys are bit-identical to the fresh projection,
            // so the consistency-preserved stage and its oracle coincide.
            Matrix kc =
                feature::assemble_cross(input, world.schema, params.tables);
            retrieval::CachedKeys keys;
            keys.keys.assign(ctx.scoring.config.n_heads,
                             Matrix(input.size(), ctx.scoring.config.key_dim));
            for (Index i = 0; i < input.size(); ++i) {
                for (Index a = 0; a < keys.keys.size(); ++a) {
                    auto src = ctx.pool_keys[a].row(input[i].video_id);
                    std::copy(src.begin(), src.end(),
                              keys.keys[a].row(i).begin());
                }
            }
            Matrix dummy(0, ctx.scoring.config.inherent_dim);
            return retrieval::cp_gsu_retrieve(q, dummy, kc, ctx.scoring, k,
                                              &keys)
                .indices;
        }
        case retrieval::GsuKind::kSimHard:
            return retrieval::hard_gsu(sample.target, input, k).indices;
        case retrieval::GsuKind::kSimSoft:
            if (pretrained == nullptr) {
                fail("training: the inner-product stage needs embeddings");
            }
            return retrieval::soft_gsu(sample.target, input, *pretrained, k)
                .indices;
    }
    fail("training: unknown first-stage kind");
}

SampleCache forward_sample(const datagen::LabeledSample& sample,
                           const std::vector<feature::BehaviorRecord>& history,
                           const ModelParams& params, const StepContext& ctx,
                           const datagen::World& world,
                           const TrainConfig& config,
                           const retrieval::PretrainedEmbeddings* pretrained) {
    if (history.empty()) fail("training: sample user has no behaviors");
    const auto& schema = world.schema;
    const auto& acfg = config.attention;

    SampleCache cache;
    cache.sample = &sample;
    cache.q = feature::embed_target(sample.target, schema, params.tables);

    auto input = gsu_input(history, config);
    auto selected = select_finalists(sample, input, cache.q, params, ctx,
                                     world, config, pretrained);
    cache.selected_records.reserve(selected.size());
    for (Index idx : selected) cache.selected_records.push_back(input[idx]);

    auto [kh, kc] =
        feature::assemble_K(cache.selected_records, schema, params.tables);
    cache.k_h = std::move(kh);
    cache.k_c = std::move(kc);
    const Index length = cache.k_h.rows;
    cache.k_full = Matrix(length, acfg.inherent_dim + acfg.cross_dim);
    for (Index i = 0; i < length; ++i) {
        std::copy(cache.k_h.row(i).begin(), cache.k_h.row(i).end(),
                  cache.k_full.row(i).begin());
        if (config.use_cross_bias) {
            std::copy(cache.k_c.row(i).begin(), cache.k_c.row(i).end(),
                      cache.k_full.row(i).begin() + acfg.inherent_dim);
        }
    }

    if (config.raw_mhta) {
        Vector q_pad(acfg.inherent_dim + acfg.cross_dim, 0.0);
        std::copy(cache.q.begin(), cache.q.end(), q_pad.begin());
        cache.concat.reserve(params.raw.heads.size() * acfg.value_dim);
        for (const auto& head : params.raw.heads) {
            RawHeadCache hc;
            hc.keys = attention::raw_project_keys(cache.k_full, head);
            hc.query = attention::raw_project_query(q_pad, head);
            hc.alpha =
                attention::raw_scores_from_projected(hc.keys, hc.query, head);
            hc.weights = softmax(hc.alpha);
            hc.values = matmul(cache.k_full, head.value_proj);
            hc.out.assign(acfg.value_dim, 0.0);
            for (Index i = 0; i < length; ++i) {
                for (Index d = 0; d < acfg.value_dim; ++d) {
                    hc.out[d] += hc.weights[i] * hc.values.at(i, d);
                }
            }
            cache.concat.insert(cache.concat.end(), hc.out.begin(),
                                hc.out.end());
            cache.raw_heads.push_back(std::move(hc));
        }
        cache.attn_out.assign(params.raw.output_proj.cols, 0.0);
        for (Index r = 0; r < params.raw.output_proj.rows; ++r) {
            for (Index c = 0; c < params.raw.output_proj.cols; ++c) {
                cache.attn_out[c] +=
                    cache.concat[r] * params.raw.output_proj.at(r, c);
            }
        }
    } else {
        cache.concat.reserve(params.twin.heads.size() * acfg.value_dim);
        for (const auto& head : params.twin.heads) {
            HeadCache hc;
            hc.keys = attention::project_inherent(cache.k_h, head);
            hc.query = attention::project_query(cache.q, head);
            hc.compressed = attention::compress_cross(cache.k_c, head);
            hc.alpha.assign(length, 0.0);
            const double scale = 1.0 / std::sqrt(double(acfg.key_dim));
            for (Index i = 0; i < length; ++i) {
                double acc = 0.0;
                auto row = hc.keys.row(i);
                for (Index d = 0; d < row.size(); ++d) {
                    acc += row[d] * hc.query[d];
                }
                hc.alpha[i] = acc * scale;
                if (config.use_cross_bias) {
                    auto crow = hc.compressed.row(i);
                    for (Index j = 0; j < crow.size(); ++j) {
                        hc.alpha[i] += crow[j] * head.cross_bias[j];
                    }
                }
            }
            hc.weights = softmax(hc.alpha);
            hc.values = matmul(cache.k_full, head.value_proj);
            hc.out.assign(acfg.value_dim, 0.0);
            for (Index i = 0; i < length; ++i) {
                for (Index d = 0; d < acfg.value_dim; ++d) {
                    hc.out[d] += hc.weights[i] * hc.values.at(i, d);
                }
            }
            cache.concat.insert(cache.concat.end(), hc.out.begin(),
                                hc.out.end());
            cache.heads.push_back(std::move(hc));
        }
        cache.attn_out.assign(params.twin.output_proj.cols, 0.0);
        for (Index r = 0; r < params.twin.output_proj.rows; ++r) {
            for (Index c = 0; c < params.twin.output_proj.cols; ++c) {
                cache.attn_out[c] +=
                    cache.concat[r] * params.twin.output_proj.at(r, c);
            }
        }
    }

    if (config.use_short_term) {
        const Index count = std::min<Index>(config.short_term_count,
                                            history.size());
        cache.short_records.assign(history.end() - count, history.end());
        auto [sh, sc] =
            feature::assemble_K(cache.short_records, schema, params.tables);
        cache.short_vec.assign(schema.inherent_dim(), 0.0);
        for (Index i = 0; i < sh.rows; ++i) {
            for (Index d = 0; d < sh.cols; ++d) {
                cache.short_vec[d] += sh.at(i, d) / double(sh.rows);
            }
        }
    }

    // Predictor input: attention output, target embedding, optional
    // short-term summary, plus a history-length context feature.
    cache.z.reserve(mlp_input_dim(world, config));
    cache.z.insert(cache.z.end(), cache.attn_out.begin(),
                   cache.attn_out.end());
    cache.z.insert(cache.z.end(), cache.q.begin(), cache.q.end());
    if (config.use_short_term) {
        cache.z.insert(cache.z.end(), cache.short_vec.begin(),
                       cache.short_vec.end());
    }
    cache.z.push_back(0.1 * double(history.size()) /
                      double(world.config.max_behaviors));

    const auto& mlp = params.mlp;
    cache.h1_pre.assign(mlp.w1.cols, 0.0);
    for (Index i = 0; i < mlp.w1.rows; ++i) {
        for (Index j = 0; j < mlp.w1.cols; ++j) {
            cache.h1_pre[j] += cache.z[i] * mlp.w1.at(i, j);
        }
    }
    for (Index j = 0; j < cache.h1_pre.size(); ++j) {
        cache.h1_pre[j] += mlp.b1[j];
    }
    cache.h1.resize(cache.h1_pre.size());
    for (Index j = 0; j < cache.h1.size(); ++j) {
        cache.h1[j] = std::max(0.0, cache.h1_pre[j]);
    }
    cache.h2_pre.assign(mlp.w2.cols, 0.0);
    for (Index i = 0; i < mlp.w2.rows; ++i) {
        for (Index j = 0; j < mlp.w2.cols; ++j) {
            cache.h2_pre[j] += cache.h1[i] * mlp.w2.at(i, j);
        }
    }
    for (Index j = 0; j < cache.h2_pre.size(); ++j) {
        cache.h2_pre[j] += mlp.b2[j];
    }
    cache.h2.resize(cache.h2_pre.size());
    for (Index j = 0; j < cache.h2.size(); ++j) {
        cache.h2[j] = std::max(0.0, cache.h2_pre[j]);
    }
    cache.logit = mlp.b3;
    for (Index j = 0; j < cache.h2.size(); ++j) {
        cache.logit += mlp.w3[j] * cache.h2[j];
    }
    cache.yhat = sigmoid(cache.logit);
    return cache;
}

// ---------------------------------------------------------------------------
// Gradients

Gradients make_gradients(const datagen::World& world,
                         const ModelParams& params,
                         const TrainConfig& config) {
    const auto& acfg = config.attention;
    Gradients g;
    if (config.raw_mhta) {
        g.raw_heads.resize(params.raw.heads.size());
        for (Index a = 0; a < g.raw_heads.size(); ++a) {
            const auto& head = params.raw.heads[a];
            g.raw_heads[a].key_proj =
                Matrix(head.key_proj.rows, head.key_proj.cols);
            g.raw_heads[a].query_proj =
                Matrix(head.query_proj.rows, head.query_proj.cols);
            g.raw_heads[a].query_bias.assign(head.query_bias.size(), 0.0);
            g.raw_heads[a].value_proj =
                Matrix(head.value_proj.rows, head.value_proj.cols);
        }
        g.raw_output_proj = Matrix(params.raw.output_proj.rows,
                                   params.raw.output_proj.cols);
    } else {
        g.heads.resize(params.twin.heads.size());
        for (Index a = 0; a < g.heads.size(); ++a) {
            g.heads[a].query_proj = Matrix(acfg.inherent_dim, acfg.key_dim);
            g.heads[a].inherent_proj = Matrix(acfg.inherent_dim, acfg.key_dim);
            g.heads[a].cross_weights.assign(acfg.cross_count,
                                            Vector(8, 0.0));
            g.heads[a].cross_bias.assign(acfg.cross_count, 0.0);
            g.heads[a].value_proj =
                Matrix(acfg.inherent_dim + acfg.cross_dim, acfg.value_dim);
        }
        g.output_proj = Matrix(params.twin.output_proj.rows,
                               params.twin.output_proj.cols);
    }
    g.mlp.w1 = Matrix(params.mlp.w1.rows, params.mlp.w1.cols);
    g.mlp.b1.assign(params.mlp.b1.size(), 0.0);
    g.mlp.w2 = Matrix(params.mlp.w2.rows, params.mlp.w2.cols);
    g.mlp.b2.assign(params.mlp.b2.size(), 0.0);
    g.mlp.w3.assign(params.mlp.w3.size(), 0.0);
    g.tables.resize(world.schema.features.size());
    return g;
}

void scatter_inherent(const feature::FeatureSchema& schema,
                      std::span<const Index> slot_values_buffer,
                      const feature::BehaviorRecord* rec,
                      const feature::TargetItem* item,
                      std::span<const double> grad, double gain,
                      std::vector<TableGrads>& tables) {
    (void)slot_values_buffer;
    Index off = 0;
    for (Index slot = 0; slot < schema.inherent_count(); ++slot) {
        const auto& spec = schema.features[slot];
        auto values = rec != nullptr ? feature::inherent_values(*rec, slot)
                                     : feature::target_values(*item, slot);
        for (Index v : values) {
            auto& row = tables[slot].rows[v];
            if (row.empty()) row.assign(spec.dim, 0.0);
            for (Index d = 0; d < spec.dim; ++d) {
                row[d] += gain * grad[off + d];
            }
        }
        off += spec.dim;
    }
}

void scatter_cross(const feature::FeatureSchema& schema,
                   const feature::BehaviorRecord& rec,
                   std::span<const double> grad,
                   std::vector<TableGrads>& tables) {
    const Index base = schema.inherent_count();
    Index off = 0;
    for (Index slot = 0; slot < schema.cross_count(); ++slot) {
        const auto& spec = schema.features[base + slot];
        auto values = feature::cross_values(rec, slot);
        for (Index v : values) {
            auto& row = tables[base + slot].rows[v];
            if (row.empty()) row.assign(spec.dim, 0.0);
            for (Index d = 0; d < spec.dim; ++d) row[d] += grad[off + d];
        }
        off += spec.dim;
    }
}

void backward_sample(const SampleCache& cache, double dlogit,
                     const ModelParams& params, const datagen::World& world,
                     const TrainConfig& config, Gradients& g) {
    const auto& schema = world.schema;
    const auto& acfg = config.attention;
    const auto& mlp = params.mlp;
    const Index length = cache.k_full.rows;

    // Predictor backward.
    Vector dh2(cache.h2.size(), 0.0);
    for (Index j = 0; j < dh2.size(); ++j) {
        g.mlp.w3[j] += dlogit * cache.h2[j];
        dh2[j] = dlogit * mlp.w3[j];
    }
    g.mlp.b3 += dlogit;
    Vector dh2_pre(dh2.size(), 0.0);
    for (Index j = 0; j < dh2.size(); ++j) {
        dh2_pre[j] = cache.h2_pre[j] > 0.0 ? dh2[j] : 0.0;
    }
    Vector dh1(cache.h1.size(), 0.0);
    for (Index i = 0; i < mlp.w2.rows; ++i) {
        for (Index j = 0; j < mlp.w2.cols; ++j) {
            g.mlp.w2.at(i, j) += cache.h1[i] * dh2_pre[j];
            dh1[i] += mlp.w2.at(i, j) * dh2_pre[j];
        }
    }
    for (Index j = 0; j < dh2_pre.size(); ++j) g.mlp.b2[j] += dh2_pre[j];
    Vector dh1_pre(dh1.size(), 0.0);
    for (Index j = 0; j < dh1.size(); ++j) {
        dh1_pre[j] = cache.h1_pre[j] > 0.0 ? dh1[j] : 0.0;
    }
    Vector dz(cache.z.size(), 0.0);
    for (Index i = 0; i < mlp.w1.rows; ++i) {
        for (Index j = 0; j < mlp.w1.cols; ++j) {
            g.mlp.w1.at(i, j) += cache.z[i] * dh1_pre[j];
            dz[i] += mlp.w1.at(i, j) * dh1_pre[j];
        }
    }
    for (Index j = 0; j < dh1_pre.size(); ++j) g.mlp.b1[j] += dh1_pre[j];

    // Split dz back into its input blocks.
    Index off = 0;
    Vector dattn(dz.begin(), dz.begin() + cache.attn_out.size());
    off += cache.attn_out.size();
    Vector dq(dz.begin() + off, dz.begin() + off + cache.q.size());
    off += cache.q.size();
    Vector dshort;
    if (config.use_short_term) {
        dshort.assign(dz.begin() + off,
                      dz.begin() + off + cache.short_vec.size());
        off += cache.short_vec.size();
    }
    // The trailing history-length feature is data, not a parameter.

    Matrix dk_full(length, acfg.inherent_dim + acfg.cross_dim);

    if (config.raw_mhta) {
        const auto& raw = params.raw;
        Vector dconcat(cache.concat.size(), 0.0);
        for (Index r = 0; r < raw.output_proj.rows; ++r) {
            for (Index c = 0; c < raw.output_proj.cols; ++c) {
                g.raw_output_proj.at(r, c) += cache.concat[r] * dattn[c];
                dconcat[r] += raw.output_proj.at(r, c) * dattn[c];
            }
        }
        Vector dq_pad(acfg.inherent_dim + acfg.cross_dim, 0.0);
        for (Index a = 0; a < raw.heads.size(); ++a) {
            const auto& head = raw.heads[a];
            const auto& hc = cache.raw_heads[a];
            auto& hg = g.raw_heads[a];
            std::span<const double> dout(dconcat.data() + a * acfg.value_dim,
                                         acfg.value_dim);

            // Pooling backward.
            Vector dweights(length, 0.0);
            for (Index i = 0; i < length; ++i) {
                double acc = 0.0;
                for (Index d = 0; d < acfg.value_dim; ++d) {
                    acc += dout[d] * hc.values.at(i, d);
                }
                dweights[i] = acc;
            }
            double mix = 0.0;
            for (Index i = 0; i < length; ++i) {
                mix += hc.weights[i] * dweights[i];
            }
            Vector dalpha(length, 0.0);
            for (Index i = 0; i < length; ++i) {
                dalpha[i] = hc.weights[i] * (dweights[i] - mix);
            }
            // dV = weights outer dout; dW^v += K^T dV; dK += dV W^v^T.
            for (Index i = 0; i < length; ++i) {
                auto krow = cache.k_full.row(i);
                auto dkrow = dk_full.row(i);
                for (Index d = 0; d < acfg.value_dim; ++d) {
                    const double dv = hc.weights[i] * dout[d];
                    if (dv == 0.0) continue;
                    for (Index c = 0; c < krow.size(); ++c) {
                        hg.value_proj.at(c, d) += krow[c] * dv;
                        dkrow[c] += head.value_proj.at(c, d) * dv;
                    }
                }
            }
            // Score path.
            const double inv_scale = 1.0 / head.score_scale;
            Vector dquery(hc.query.size(), 0.0);
            for (Index i = 0; i < length; ++i) {
                const double da = dalpha[i] * inv_scale;
                if (da == 0.0) continue;
                auto krow = hc.keys.row(i);
                auto dkrow = dk_full.row(i);
                for (Index d = 0; d < krow.size(); ++d) {
                    dquery[d] += da * krow[d];
                    // dkeys(i,d) = da * query[d]; push through key_proj.
                }
                for (Index c = 0; c < cache.k_full.cols; ++c) {
                    double acc = 0.0;
                    for (Index d = 0; d < hc.query.size(); ++d) {
                        acc += head.key_proj.at(c, d) * (da * hc.query[d]);
                    }
                    dkrow[c] += acc;
                }
                for (Index c = 0; c < cache.k_full.cols; ++c) {
                    const double kc = cache.k_full.at(i, c);
                    if (kc == 0.0) continue;
                    for (Index d = 0; d < hc.query.size(); ++d) {
                        hg.key_proj.at(c, d) += kc * da * hc.query[d];
                    }
                }
            }
            for (Index d = 0; d < dquery.size(); ++d) {
                hg.query_bias[d] += dquery[d];
            }
            for (Index c = 0; c < head.query_proj.rows; ++c) {
                const double qp = c < cache.q.size() ? cache.q[c] : 0.0;
                for (Index d = 0; d < dquery.size(); ++d) {
                    hg.query_proj.at(c, d) += qp * dquery[d];
                    if (c < cache.q.size()) {
                        dq_pad[c] += head.query_proj.at(c, d) * dquery[d];
                    }
                }
            }
        }
        for (Index d = 0; d < cache.q.size(); ++d) dq[d] += dq_pad[d];
    } else {
        const auto& twin = params.twin;
        Vector dconcat(cache.concat.size(), 0.0);
        for (Index r = 0; r < twin.output_proj.rows; ++r) {
            for (Index c = 0; c < twin.output_proj.cols; ++c) {
                g.output_proj.at(r, c) += cache.concat[r] * dattn[c];
                dconcat[r] += twin.output_proj.at(r, c) * dattn[c];
            }
        }
        const double scale = 1.0 / std::sqrt(double(acfg.key_dim));
        for (Index a = 0; a < twin.heads.size(); ++a) {
            const auto& head = twin.heads[a];
            const auto& hc = cache.heads[a];
            auto& hg = g.heads[a];
            std::span<const double> dout(dconcat.data() + a * acfg.value_dim,
                                         acfg.value_dim);

            Vector dweights(length, 0.0);
            for (Index i = 0; i < length; ++i) {
                double acc = 0.0;
                for (Index d = 0; d < acfg.value_dim; ++d) {
                    acc += dout[d] * hc.values.at(i, d);
                }
                dweights[i] = acc;
            }
            double mix = 0.0;
            for (Index i = 0; i < length; ++i) {
                mix += hc.weights[i] * dweights[i];
            }
            Vector dalpha(length, 0.0);
            for (Index i = 0; i < length; ++i) {
                dalpha[i] = hc.weights[i] * (dweights[i] - mix);
            }

            for (Index i = 0; i < length; ++i) {
                auto krow = cache.k_full.row(i);
                auto dkrow = dk_full.row(i);
                for (Index d = 0; d < acfg.value_dim; ++d) {
                    const double dv = hc.weights[i] * dout[d];
                    if (dv == 0.0) continue;
                    for (Index c = 0; c < krow.size(); ++c) {
                        hg.value_proj.at(c, d) += krow[c] * dv;
                        dkrow[c] += head.value_proj.at(c, d) * dv;
                    }
                }
            }

            // Inherent score path: alpha_i = keys_i . query * scale + bias.
            Vector dquery(acfg.key_dim, 0.0);
            Matrix dkeys(length, acfg.key_dim);
            for (Index i = 0; i < length; ++i) {
                const double da = dalpha[i] * scale;
                auto krow = hc.keys.row(i);
                auto dkrow = dkeys.row(i);
                for (Index d = 0; d < acfg.key_dim; ++d) {
                    dquery[d] += da * krow[d];
                    dkrow[d] = da * hc.query[d];
                }
            }
            // dW^h += K_h^T dkeys; dK_h += dkeys W^h^T (into dk_full).
            for (Index i = 0; i < length; ++i) {
                auto dkrow = dkeys.row(i);
                auto khrow = cache.k_h.row(i);
                auto dfull = dk_full.row(i);
                for (Index d = 0; d < acfg.key_dim; ++d) {
                    const double dk = dkrow[d];
                    if (dk == 0.0) continue;
                    for (Index c = 0; c < acfg.inherent_dim; ++c) {
                        hg.inherent_proj.at(c, d) += khrow[c] * dk;
                        dfull[c] += head.inherent_proj.at(c, d) * dk;
                    }
                }
            }
            // dW^q += q outer dquery; dq += W^q dquery.
            for (Index c = 0; c < acfg.inherent_dim; ++c) {
                for (Index d = 0; d < acfg.key_dim; ++d) {
                    hg.query_proj.at(c, d) += cache.q[c] * dquery[d];
                    dq[c] += head.query_proj.at(c, d) * dquery[d];
                }
            }

            if (config.use_cross_bias) {
                // Bias path: alpha_i += compressed_i . cross_bias.
                for (Index j = 0; j < acfg.cross_count; ++j) {
                    double dbias = 0.0;
                    for (Index i = 0; i < length; ++i) {
                        dbias += hc.compressed.at(i, j) * dalpha[i];
                    }
                    hg.cross_bias[j] += dbias;
                }
                for (Index i = 0; i < length; ++i) {
                    const double da = dalpha[i];
                    if (da == 0.0) continue;
                    auto kcrow = cache.k_c.row(i);
                    auto dfull = dk_full.row(i);
                    for (Index j = 0; j < acfg.cross_count; ++j) {
                        const double dc = da * head.cross_bias[j];
                        const double* slice = kcrow.data() + 8 * j;
                        for (Index d = 0; d < 8; ++d) {
                            hg.cross_weights[j][d] += slice[d] * dc;
                            dfull[acfg.inherent_dim + 8 * j + d] +=
                                head.cross_weights[j][d] * dc;
                        }
                    }
                }
            }
        }
    }

    // Scatter dK rows into the embedding tables. The inherent block always
    // flows; the cross block only when the bias path is on (the value path
    // saw a zeroed cross block otherwise).
    for (Index i = 0; i < length; ++i) {
        auto dfull = dk_full.row(i);
        scatter_inherent(schema, {}, &cache.selected_records[i], nullptr,
                         dfull.subspan(0, acfg.inherent_dim), 1.0, g.tables);
        if (config.use_cross_bias) {
            scatter_cross(schema, cache.selected_records[i],
                          dfull.subspan(acfg.inherent_dim, acfg.cross_dim),
                          g.tables);
        }
    }
    scatter_inherent(schema, {}, nullptr, &cache.sample->target, dq, 1.0,
                     g.tables);
    if (config.use_short_term && !cache.short_records.empty()) {
        const double gain = 1.0 / double(cache.short_records.size());
        for (const auto& rec : cache.short_records) {
            scatter_inherent(schema, {}, &rec, nullptr, dshort, gain,
                             g.tables);
        }
    }
}

void merge_gradients(Gradients& into, const Gradients& from) {
    auto add_matrix = [](Matrix& a, const Matrix& b) {
        for (Index i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
    };
    auto add_vector = [](Vector& a, const Vector& b) {
        for (Index i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    for (Index a = 0; a < into.heads.size(); ++a) {
        add_matrix(into.heads[a].query_proj, from.heads[a].query_proj);
        add_matrix(into.heads[a].inherent_proj, from.heads[a].inherent_proj);
        for (Index j = 0; j < into.heads[a].cross_weights.size(); ++j) {
            add_vector(into.heads[a].cross_weights[j],
                       from.heads[a].cross_weights[j]);
        }
        add_vector(into.heads[a].cross_bias, from.heads[a].cross_bias);
        add_matrix(into.heads[a].value_proj, from.heads[a].value_proj);
    }
    if (!into.heads.empty()) add_matrix(into.output_proj, from.output_proj);
    for (Index a = 0; a < into.raw_heads.size(); ++a) {
        add_matrix(into.raw_heads[a].key_proj, from.raw_heads[a].key_proj);
        add_matrix(into.raw_heads[a].query_proj, from.raw_heads[a].query_proj);
        add_vector(into.raw_heads[a].query_bias, from.raw_heads[a].query_bias);
        add_matrix(into.raw_heads[a].value_proj, from.raw_heads[a].value_proj);
    }
    if (!into.raw_heads.empty()) {
        add_matrix(into.raw_output_proj, from.raw_output_proj);
    }
    add_matrix(into.mlp.w1, from.mlp.w1);
    add_vector(into.mlp.b1, from.mlp.b1);
    add_matrix(into.mlp.w2, from.mlp.w2);
    add_vector(into.mlp.b2, from.mlp.b2);
    add_vector(into.mlp.w3, from.mlp.w3);
    into.mlp.b3 += from.mlp.b3;
    for (Index t = 0; t < into.tables.size(); ++t) {
        for (const auto& [row, grad] : from.tables[t].rows) {
            auto& dst = into.tables[t].rows[row];
            if (dst.empty()) {
                dst = grad;
            } else {
                add_vector(dst, grad);
            }
        }
    }
    into.loss_sum += from.loss_sum;
    into.clamp_count += from.clamp_count;
    into.samples += from.samples;
}

// ---------------------------------------------------------------------------
// Optimizers

struct DenseView {
    double* values = nullptr;
    const double* grads = nullptr;
    Index size = 0;
};

void collect_views(ModelParams& params, const Gradients& g,
                   const TrainConfig& config, std::vector<DenseView>& out) {
    auto add = [&out](std::vector<double>& v, const std::vector<double>& gv) {
        out.push_back({v.data(), gv.data(), v.size()});
    };
    if (config.raw_mhta) {
        for (Index a = 0; a < params.raw.heads.size(); ++a) {
            add(params.raw.heads[a].key_proj.data,
                g.raw_heads[a].key_proj.data);
            add(params.raw.heads[a].query_proj.data,
                g.raw_heads[a].query_proj.data);
            add(params.raw.heads[a].query_bias, g.raw_heads[a].query_bias);
            add(params.raw.heads[a].value_proj.data,
                g.raw_heads[a].value_proj.data);
        }
        add(params.raw.output_proj.data, g.raw_output_proj.data);
    } else {
        for (Index a = 0; a < params.twin.heads.size(); ++a) {
            add(params.twin.heads[a].query_proj.data,
                g.heads[a].query_proj.data);
            add(params.twin.heads[a].inherent_proj.data,
                g.heads[a].inherent_proj.data);
            if (config.use_cross_bias) {
                for (Index j = 0; j < params.twin.heads[a].cross_weights.size();
                     ++j) {
                    add(params.twin.heads[a].cross_weights[j],
                        g.heads[a].cross_weights[j]);
                }
                add(params.twin.heads[a].cross_bias, g.heads[a].cross_bias);
            }
            add(params.twin.heads[a].value_proj.data,
                g.heads[a].value_proj.data);
        }
        add(params.twin.output_proj.data, g.output_proj.data);
    }
    add(params.mlp.w1.data, g.mlp.w1.data);
    add(params.mlp.b1, g.mlp.b1);
    add(params.mlp.w2.data, g.mlp.w2.data);
    add(params.mlp.b2, g.mlp.b2);
    add(params.mlp.w3, g.mlp.w3);
}

struct OptimState {
    // Adam moments aligned with the dense view order, plus the scalar b3.
    std::vector<Vector> m;
    std::vector<Vector> v;
    double m_b3 = 0.0, v_b3 = 0.0;
    Index step = 0;
    // AdaGrad accumulators per table.
    std::vector<Matrix> table_acc;
};

void apply_updates(ModelParams& params, const Gradients& g,
                   const datagen::World& world, const TrainConfig& config,
                   OptimState& state) {
    std::vector<DenseView> views;
    collect_views(params, g, config, views);
    if (state.m.empty()) {
        state.m.resize(views.size());
        state.v.resize(views.size());
        for (Index i = 0; i < views.size(); ++i) {
            state.m[i].assign(views[i].size, 0.0);
            state.v[i].assign(views[i].size, 0.0);
        }
        state.table_acc.clear();
        for (const auto& table : params.tables.tables) {
            state.table_acc.emplace_back(table.weights.rows,
                                         table.weights.cols);
        }
    }
    ++state.step;
    const double b1 = config.adam_beta1;
    const double b2 = config.adam_beta2;
    const double corr1 = 1.0 - std::pow(b1, double(state.step));
    const double corr2 = 1.0 - std::pow(b2, double(state.step));

    for (Index i = 0; i < views.size(); ++i) {
        auto& view = views[i];
        for (Index j = 0; j < view.size; ++j) {
            const double grad = view.grads[j];
            double& m = state.m[i][j];
            double& v = state.v[i][j];
            m = b1 * m + (1.0 - b1) * grad;
            v = b2 * v + (1.0 - b2) * grad * grad;
            view.values[j] -= config.adam_lr * (m / corr1) /
                              (std::sqrt(v / corr2) + config.adam_eps);
        }
    }
    {
        const double grad = g.mlp.b3;
        state.m_b3 = b1 * state.m_b3 + (1.0 - b1) * grad;
        state.v_b3 = b2 * state.v_b3 + (1.0 - b2) * grad * grad;
        params.mlp.b3 -= config.adam_lr * (state.m_b3 / corr1) /
                         (std::sqrt(state.v_b3 / corr2) + config.adam_eps);
    }

    for (Index t = 0; t < g.tables.size(); ++t) {
        auto& weights = params.tables.tables[t].weights;
        auto& acc = state.table_acc[t];
        for (const auto& [row, grad] : g.tables[t].rows) {
            for (Index d = 0; d < grad.size(); ++d) {
                double& a = acc.at(row, d);
                a += grad[d] * grad[d];
                weights.at(row, d) -= config.adagrad_lr * grad[d] /
                                      (std::sqrt(a) + config.adagrad_eps);
            }
        }
    }
    (void)world;
}

// ---------------------------------------------------------------------------
// Chunked, order-stable batch execution

constexpr Index kChunk = 16;

struct ChunkOutcome {
    Gradients grads;
    Vector predictions;  // aligned with the chunk's samples
};

template <typename Fn>
void run_chunks(Index n_chunks, Index workers, Fn&& body) {
    if (workers <= 1 || n_chunks <= 1) {
        for (Index c = 0; c < n_chunks; ++c) body(c);
        return;
    }
    std::atomic<Index> next{0};
    std::vector<std::thread> pool;
    const Index n_threads = std::min(workers, n_chunks);
    pool.reserve(n_threads);
    for (Index w = 0; w < n_threads; ++w) {
        pool.emplace_back([&]() {
            while (true) {
                const Index c = next.fetch_add(1);
                if (c >= n_chunks) break;
                body(c);
            }
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    attention.validate();
    if (finalists == 0) fail("train config: finalists must be >= 1");
    if (batch_size == 0 || steps == 0) {
        fail("train config: batch_size and steps must be >= 1");
    }
    if (test_fraction < 0.0 || test_fraction >= 1.0) {
        fail("train config: test_fraction must be in [0, 1)");
    }
    if (adagrad_lr < 0.0 || adam_lr < 0.0) {
        fail("train config: learning rates must be >= 0");
    }
}

ModelParams init_model(const datagen::World& world, const TrainConfig& config) {
    config.validate();
    if (config.attention.inherent_dim != world.schema.inherent_dim() ||
        config.attention.cross_dim != world.schema.cross_dim()) {
        fail("train config: attention dims must match the schema");
    }
    ModelParams params;
    params.tables = datagen::informed_tables(
        world, derive_seed(config.seed, 0x7AB1), config.init_scale,
        config.init_topic_mix, 0.5 * config.init_topic_mix);
    attention::InitOptions opts;
    opts.tie_query_key = true;
    opts.proj_gain = 2.0;
    opts.cross_bias_scale = 0.05;
    params.twin = attention::init_params(config.attention,
                                         derive_seed(config.seed, 0x7AB2),
                                         opts);
    if (config.raw_mhta) {
        // The unsplit variant starts from the value-identical dense build
        // and trains all entries freely from there.
        params.raw = attention::build_equivalent_dense(params.twin);
    }

    const Index in_dim = mlp_input_dim(world, config);
    Rng rng(derive_seed(config.seed, 0x7AB3));
    params.mlp.w1 = Matrix(in_dim, config.predictor.hidden1);
    fill_gaussian(params.mlp.w1, rng, 1.0 / std::sqrt(double(in_dim)));
    // Small positive biases keep the rectifier units alive at init.
    params.mlp.b1.assign(config.predictor.hidden1, 0.1);
    params.mlp.w2 = Matrix(config.predictor.hidden1, config.predictor.hidden2);
    fill_gaussian(params.mlp.w2, rng,
                  1.0 / std::sqrt(double(config.predictor.hidden1)));
    params.mlp.b2.assign(config.predictor.hidden2, 0.1);
    params.mlp.w3.assign(config.predictor.hidden2, 0.0);
    fill_gaussian(params.mlp.w3, rng,
                  1.0 / std::sqrt(double(config.predictor.hidden2)));
    params.mlp.b3 = 0.0;
    return params;
}

Vector forward(const Batch& batch, const ModelParams& params,
               const datagen::World& world, const TrainConfig& config,
               const retrieval::PretrainedEmbeddings* pretrained) {
    if (batch.log == nullptr) fail("forward: batch has no log");
    StepContext ctx = build_step_context(params, world, config);
    Vector out;
    out.reserve(batch.sample_indices.size());
    for (Index idx : batch.sample_indices) {
        const auto& sample = batch.log->samples[idx];
        out.push_back(forward_sample(sample, batch.log->behaviors[sample.user_id],
                                     params, ctx, world, config, pretrained)
                          .yhat);
    }
    return out;
}

double loss(std::span<const double> predicted, std::span<const int> labels,
            Index* clamp_count) {
    if (predicted.size() != labels.size() || predicted.empty()) {
        fail("loss: prediction/label size mismatch");
    }
    double acc = 0.0;
    Index clamped = 0;
    for (Index i = 0; i < predicted.size(); ++i) {
        double p = predicted[i];
        if (p <= 0.0 || p >= 1.0) {
            p = std::clamp(p, 1e-12, 1.0 - 1e-12);
            ++clamped;
        }
        acc -= labels[i] == 1 ? std::log(p) : std::log(1.0 - p);
    }
    if (clamp_count != nullptr) *clamp_count += clamped;
    return acc / double(predicted.size());
}

Gradients backward(const Batch& batch, const ModelParams& params,
                   const datagen::World& world, const TrainConfig& config,
                   const retrieval::PretrainedEmbeddings* pretrained) {
    if (batch.log == nullptr) fail("backward: batch has no log");
    StepContext ctx = build_step_context(params, world, config);
    Gradients g = make_gradients(world, params, config);
    const double inv_n = 1.0 / double(batch.sample_indices.size());
    for (Index idx : batch.sample_indices) {
        const auto& sample = batch.log->samples[idx];
        SampleCache cache =
            forward_sample(sample, batch.log->behaviors[sample.user_id],
                           params, ctx, world, config, pretrained);
        double p = cache.yhat;
        if (p <= 0.0 || p >= 1.0) {
            p = std::clamp(p, 1e-12, 1.0 - 1e-12);
            ++g.clamp_count;
        }
        g.loss_sum -= sample.label == 1 ? std::log(p) : std::log(1.0 - p);
        const double dlogit = (cache.yhat - double(sample.label)) * inv_n;
        backward_sample(cache, dlogit, params, world, config, g);
        ++g.samples;
    }
    return g;
}

TrainResult train(const datagen::World& world,
                  const datagen::SyntheticLog& log, const TrainConfig& config) {
    config.validate();
    const Index workers = resolve_workers(config.workers);

    ModelParams params = init_model(world, config);
    retrieval::PretrainedEmbeddings pretrained;
    const retrieval::PretrainedEmbeddings* pretrained_ptr = nullptr;
    if (config.gsu == retrieval::GsuKind::kSimSoft) {
        // A frozen fixture standing in for separately pretrained vectors.
        pretrained = datagen::freeze_video_embeddings(
            datagen::informed_tables(world, derive_seed(config.seed, 0x50F7),
                                     config.init_scale, config.init_topic_mix),
            world.config.n_videos);
        pretrained_ptr = &pretrained;
    }

    // Per-user split: the tail of each user's samples is held out.
    std::vector<Index> train_idx;
    std::vector<Index> test_idx;
    {
        std::unordered_map<std::uint32_t, std::vector<Index>> by_user;
        for (Index i = 0; i < log.samples.size(); ++i) {
            by_user[log.samples[i].user_id].push_back(i);
        }
        std::vector<std::uint32_t> users;
        users.reserve(by_user.size());
        for (const auto& [u, _] : by_user) users.push_back(u);
        std::sort(users.begin(), users.end());
        for (std::uint32_t u : users) {
            const auto& ids = by_user[u];
            const Index n_test =
                static_cast<Index>(config.test_fraction * double(ids.size()));
            for (Index i = 0; i < ids.size(); ++i) {
                (i + n_test < ids.size() ? train_idx : test_idx)
                    .push_back(ids[i]);
            }
        }
    }
    if (train_idx.empty()) fail("train: no training samples");

    OptimState optim;
    TrainResult result;
    Rng shuffle_rng(derive_seed(config.seed, 0x7AB4));
    std::vector<Index> order = train_idx;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    Index cursor = 0;

    auto evaluate = [&](Index step) {
        if (test_idx.empty()) return MetricsRow{step, 0.0, 0.5, 0.5};
        StepContext ctx = build_step_context(params, world, config);
        Vector scores(test_idx.size(), 0.0);
        std::vector<int> labels(test_idx.size(), 0);
        std::vector<std::uint32_t> users(test_idx.size(), 0);
        const Index n_chunks = (test_idx.size() + kChunk - 1) / kChunk;
        run_chunks(n_chunks, workers, [&](Index c) {
            const Index begin = c * kChunk;
            const Index end = std::min<Index>(begin + kChunk, test_idx.size());
            for (Index i = begin; i < end; ++i) {
                const auto& sample = log.samples[test_idx[i]];
                scores[i] = forward_sample(sample,
                                           log.behaviors[sample.user_id],
                                           params, ctx, world, config,
                                           pretrained_ptr)
                                .yhat;
                labels[i] = sample.label;
                users[i] = sample.user_id;
            }
        });
        MetricsRow row;
        row.step = step;
        row.loss = loss(scores, labels);
        row.auc = auc(scores, labels);
        row.gauc = gauc(users, scores, labels).value;
        return row;
    };

    for (Index step = 0; step < config.steps; ++step) {
        // Epoch-style batches over a per-epoch shuffle.
        std::vector<Index> batch_ids;
        batch_ids.reserve(config.batch_size);
        for (Index b = 0; b < config.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                cursor = 0;
            }
            batch_ids.push_back(order[cursor++]);
        }

        StepContext ctx = build_step_context(params, world, config);
        const Index n_chunks =
            (batch_ids.size() + kChunk - 1) / kChunk;
        std::vector<Gradients> chunk_grads(n_chunks);
        const double inv_n = 1.0 / double(batch_ids.size());
        run_chunks(n_chunks, workers, [&](Index c) {
            Gradients g = make_gradients(world, params, config);
            const Index begin = c * kChunk;
            const Index end =
                std::min<Index>(begin + kChunk, batch_ids.size());
            for (Index i = begin; i < end; ++i) {
                const auto& sample = log.samples[batch_ids[i]];
                SampleCache cache = forward_sample(
                    sample, log.behaviors[sample.user_id], params, ctx, world,
                    config, pretrained_ptr);
                double p = cache.yhat;
                if (p <= 0.0 || p >= 1.0) {
                    p = std::clamp(p, 1e-12, 1.0 - 1e-12);
                    ++g.clamp_count;
                }
                g.loss_sum -=
                    sample.label == 1 ? std::log(p) : std::log(1.0 - p);
                const double dlogit =
                    (cache.yhat - double(sample.label)) * inv_n;
                backward_sample(cache, dlogit, params, world, config, g);
                ++g.samples;
            }
            chunk_grads[c] = std::move(g);
        });
        Gradients total = std::move(chunk_grads[0]);
        for (Index c = 1; c < n_chunks; ++c) {
            merge_gradients(total, chunk_grads[c]);
        }

        const double step_loss = total.loss_sum / double(total.samples);
        if (!std::isfinite(step_loss)) {
            throw std::runtime_error("train: loss diverged at step " +
                                     std::to_string(step));
        }
        result.loss_trace.push_back(step_loss);
        result.clamp_warnings += total.clamp_count;

        apply_updates(params, total, world, config, optim);

        if (config.eval_every > 0 && (step + 1) % config.eval_every == 0 &&
            step + 1 < config.steps) {
            result.metrics.push_back(evaluate(step + 1));
        }
    }

    MetricsRow final_row = evaluate(config.steps);
    result.metrics.push_back(final_row);
    result.final_auc = final_row.auc;
    result.final_gauc = final_row.gauc;
    result.params = std::move(params);
    return result;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size() || scores.empty()) {
        fail("auc: score/label size mismatch");
    }
    std::vector<Index> order(scores.size());
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(),
              [&](Index a, Index b) { return scores[a] < scores[b]; });

    double rank_sum = 0.0;
    Index positives = 0;
    Index i = 0;
    while (i < order.size()) {
        Index j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (double(i + 1) + double(j));
        for (Index k = i; k < j; ++k) {
            if (labels[order[k]] == 1) {
                rank_sum += avg_rank;
                ++positives;
            }
        }
        i = j;
    }
    const Index negatives = scores.size() - positives;
    if (positives == 0 || negatives == 0) return 0.5;
    return (rank_sum - 0.5 * double(positives) * double(positives + 1)) /
           (double(positives) * double(negatives));
}

GaucResult gauc(std::span<const std::uint32_t> user_ids,
                std::span<const double> scores, std::span<const int> labels) {
    if (user_ids.size() != scores.size() || scores.size() != labels.size()) {
        fail("gauc: input size mismatch");
    }
    std::unordered_map<std::uint32_t, std::vector<Index>> by_user;
    for (Index i = 0; i < user_ids.size(); ++i) {
        by_user[user_ids[i]].push_back(i);
    }
    std::vector<std::uint32_t> users;
    users.reserve(by_user.size());
    for (const auto& [u, _] : by_user) users.push_back(u);
    std::sort(users.begin(), users.end());

    GaucResult result;
    double weighted = 0.0;
    Index weight_sum = 0;
    for (std::uint32_t u : users) {
        const auto& ids = by_user[u];
        Vector s;
        std::vector<int> l;
        bool has_pos = false;
        bool has_neg = false;
        for (Index i : ids) {
            s.push_back(scores[i]);
            l.push_back(labels[i]);
            (labels[i] == 1 ? has_pos : has_neg) = true;
        }
        if (!has_pos || !has_neg) {
            ++result.users_skipped;
            continue;
        }
        weighted += double(ids.size()) * auc(s, l);
        weight_sum += ids.size();
        ++result.users_counted;
    }
    result.value = weight_sum > 0 ? weighted / double(weight_sum) : 0.5;
    return result;
}

void append_metrics_csv(const std::string& path,
                        std::span<const MetricsRow> rows) {
    const bool exists = static_cast<bool>(std::ifstream(path));
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("metrics: cannot open " + path);
    if (!exists) out << "step,loss,auc,gauc\n";
    char buffer[160];
    for (const auto& row : rows) {
        std::snprintf(buffer, sizeof(buffer), "%zu,%.6f,%.6f,%.6f\n",
                      static_cast<std::size_t>(row.step), row.loss, row.auc,
                      row.gauc);
        out << buffer;
    }
}

}  // namespace twin::train
