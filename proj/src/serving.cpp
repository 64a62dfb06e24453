#include "twin/serving.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <stdexcept>
#include <string>

#include "twin/rng.hpp"

namespace twin::serving {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

std::mutex g_publish_mutex;

attention::AttentionConfig config_of(const FlopModel& model) {
    attention::AttentionConfig cfg;
    cfg.inherent_dim = model.inherent_dim;
    cfg.cross_dim = model.cross_dim;
    cfg.cross_count = model.cross_count;
    cfg.key_dim = model.key_dim;
    cfg.value_dim = 1;
    cfg.n_heads = model.n_heads;
    cfg.raw_key_dim = model.raw_key_dim;
    cfg.output_dim = 1;
    return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Cost model

void FlopModel::validate() const {
    if (inherent_dim == 0 || key_dim == 0 || raw_key_dim == 0 ||
        n_heads == 0) {
        fail("flop model: dimensions must be positive");
    }
    if (cross_dim != 8 * cross_count) {
        fail("flop model: cross_dim must be 8 * cross_count");
    }
}

FlopCount flops_raw(const FlopModel& model) {
    model.validate();
    const auto length = static_cast<std::uint64_t>(model.length);
    FlopCount out;
    out.projection = static_cast<std::uint64_t>(model.n_heads) * length *
                     (model.inherent_dim + model.cross_dim) *
                     model.raw_key_dim;
    out.qk_dots =
        static_cast<std::uint64_t>(model.n_heads) * length * model.raw_key_dim;
    return out;
}

FlopCount flops_twin_online(const FlopModel& model) {
    model.validate();
    const auto length = static_cast<std::uint64_t>(model.length);
    FlopCount out;
    out.qk_dots =
        static_cast<std::uint64_t>(model.n_heads) * length * model.key_dim;
    out.cross_compress =
        static_cast<std::uint64_t>(model.n_heads) * length * model.cross_dim;
    out.bias_dots =
        static_cast<std::uint64_t>(model.n_heads) * length * model.cross_count;
    out.mem_reads = length;  // one cached-row gather per behavior
    return out;
}

FlopLedger measured_flops_raw(const FlopModel& model, std::uint64_t seed) {
    model.validate();
    FlopLedger ledger;
    if (model.length == 0) return ledger;

    attention::AttentionConfig cfg = config_of(model);
    attention::DenseMhtaParams params = attention::init_raw_params(cfg, seed);

    Rng rng(derive_seed(seed, 0x7A11));
    Matrix k_full(model.length, model.inherent_dim + model.cross_dim);
    fill_gaussian(k_full, rng, 1.0);
    Vector q_pad(model.inherent_dim + model.cross_dim, 0.0);
    fill_gaussian(q_pad, rng, 1.0);

    // The per-request query projection is O(1) in L and sits outside the
    // per-behavior cost model.
    std::vector<Vector> queries;
    for (const auto& head : params.heads) {
        queries.push_back(attention::raw_project_query(q_pad, head));
    }

    ScopedFlopLedger scope(ledger);
    for (Index a = 0; a < params.heads.size(); ++a) {
        Matrix keys = attention::raw_project_keys(k_full, params.heads[a]);
        (void)attention::raw_scores_from_projected(keys, queries[a],
                                                   params.heads[a]);
    }
    return ledger;
}

FlopLedger measured_flops_twin_online(const FlopModel& model,
                                      std::uint64_t seed) {
    model.validate();
    FlopLedger ledger;
    if (model.length == 0) return ledger;

    attention::AttentionConfig cfg = config_of(model);
    attention::TwinParams params = attention::init_params(cfg, seed);

    Rng rng(derive_seed(seed, 0x7A22));
    Matrix kh(model.length, model.inherent_dim);
    fill_gaussian(kh, rng, 1.0);
    Matrix kc(model.length, model.cross_dim);
    fill_gaussian(kc, rng, 1.0);
    Vector q(model.inherent_dim, 0.0);
    fill_gaussian(q, rng, 1.0);

    // Cached keys and the projected query are produced ahead of the
    // request; only the gather and the per-behavior scoring count.
    std::vector<Matrix> keys;
    std::vector<Vector> queries;
    for (const auto& head : params.heads) {
        keys.push_back(attention::project_inherent(kh, head));
        queries.push_back(attention::project_query(q, head));
    }

    ScopedFlopLedger scope(ledger);
    count_mem_reads(model.length);
    for (Index a = 0; a < params.heads.size(); ++a) {
        (void)attention::relevance_from_projected(keys[a], queries[a], kc,
                                                  params.heads[a], cfg);
    }
    return ledger;
}

double reduction_ratio(const FlopCount& raw, const FlopCount& twin) {
    if (raw.projection == 0) return 0.0;
    return 1.0 - static_cast<double>(twin.mul_adds()) /
                     static_cast<double>(raw.projection);
}

// ---------------------------------------------------------------------------
// Projection cache

std::shared_ptr<const CacheVersion> ProjectionCache::current() const {
    std::lock_guard<std::mutex> lock(g_publish_mutex);
    return current_;
}

void ProjectionCache::refresh(const feature::FeatureSchema& schema,
                              const feature::EmbeddingSet& tables,
                              const attention::TwinParams& params,
                              std::span<const feature::TargetItem> pool,
                              double coverage_fraction, std::int64_t now) {
    if (coverage_fraction <= 0.0 || coverage_fraction > 1.0) {
        fail("refresh: coverage fraction must be in (0, 1]");
    }
    const Index covered = std::min<Index>(
        pool.size(),
        static_cast<Index>(std::llround(coverage_fraction *
                                        static_cast<double>(pool.size()))));

    auto next = std::make_shared<CacheVersion>();
    next->built_at = now;
    next->n_heads = params.config.n_heads;
    next->key_dim = params.config.key_dim;
    next->entries.reserve(covered);

    if (covered > 0) {
        Matrix pool_kh(covered, params.config.inherent_dim);
        for (Index r = 0; r < covered; ++r) {
            Vector row = feature::embed_target(pool[r], schema, tables);
            std::copy(row.begin(), row.end(), pool_kh.row(r).begin());
        }
        for (Index r = 0; r < covered; ++r) {
            next->entries[pool[r].video_id] =
                Vector(next->n_heads * next->key_dim, 0.0);
        }
        for (Index a = 0; a < params.config.n_heads; ++a) {
            Matrix proj = attention::project_inherent(pool_kh, params.heads[a]);
            for (Index r = 0; r < covered; ++r) {
                auto& entry = next->entries[pool[r].video_id];
                auto row = proj.row(r);
                std::copy(row.begin(), row.end(),
                          entry.begin() + a * next->key_dim);
            }
        }
    }

    // Publish only once the version is complete.
    std::lock_guard<std::mutex> lock(g_publish_mutex);
    next->version = next_version_++;
    current_ = std::move(next);
}

LookupResult lookup(const ProjectionCache& cache,
                    const feature::FeatureSchema& schema,
                    std::span<const feature::BehaviorRecord> behaviors,
                    const feature::EmbeddingSet& fresh_tables,
                    const attention::TwinParams& fresh_params) {
    auto version = cache.current();
    if (version == nullptr) {
        throw std::runtime_error("lookup: no published cache version");
    }
    const Index n_heads = version->n_heads;
    const Index key_dim = version->key_dim;

    LookupResult out;
    out.version = version->version;
    out.keys.keys.assign(n_heads, Matrix(behaviors.size(), key_dim));

    std::vector<Index> miss_positions;
    for (Index i = 0; i < behaviors.size(); ++i) {
        auto it = version->entries.find(behaviors[i].video_id);
        if (it == version->entries.end()) {
            miss_positions.push_back(i);
            continue;
        }
        for (Index a = 0; a < n_heads; ++a) {
            std::copy(it->second.begin() + a * key_dim,
                      it->second.begin() + (a + 1) * key_dim,
                      out.keys.keys[a].row(i).begin());
        }
    }
    count_mem_reads(behaviors.size());
    out.miss_count = miss_positions.size();

    if (!miss_positions.empty() &&
        cache.policy() == CoveragePolicy::kStrict) {
        std::string ids;
        for (Index i = 0; i < std::min<Index>(miss_positions.size(), 20); ++i) {
            if (!ids.empty()) ids += ", ";
            ids += std::to_string(behaviors[miss_positions[i]].video_id);
        }
        throw std::runtime_error(
            "lookup: " + std::to_string(miss_positions.size()) +
            " uncovered video ids under strict policy: " + ids);
    }

    if (!miss_positions.empty()) {
        // On-the-fly projection with fresh parameters, itemized separately.
        FlopLedger* ledger = active_ledger();
        const std::uint64_t before = ledger != nullptr ? ledger->mul_adds : 0;
        for (Index pos : miss_positions) {
            const auto& rec = behaviors[pos];
            feature::TargetItem item{rec.video_id, rec.author_id, rec.category,
                                     rec.duration_bucket};
            Matrix row(1, fresh_params.config.inherent_dim,
                       feature::embed_target(item, schema, fresh_tables));
            for (Index a = 0; a < n_heads; ++a) {
                Matrix proj =
                    attention::project_inherent(row, fresh_params.heads[a]);
                std::copy(proj.row(0).begin(), proj.row(0).end(),
                          out.keys.keys[a].row(pos).begin());
            }
        }
        if (ledger != nullptr) {
            const std::uint64_t delta = ledger->mul_adds - before;
            ledger->mul_adds -= delta;
            ledger->miss_mul_adds += delta;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scenario simulation

void VirtualClock::advance_to(std::int64_t t) {
    if (t < now) fail("virtual clock: cannot move backwards");
    now = t;
}

void SyncSchedule::validate() const {
    if (param_sync_period <= 0) {
        fail("schedule: param_sync_period must be positive");
    }
    if (cache_refresh_period < 0) {
        fail("schedule: cache_refresh_period must be >= 0");
    }
    if (coverage_fraction <= 0.0 || coverage_fraction > 1.0) {
        fail("schedule: coverage_fraction must be in (0, 1]");
    }
}

namespace {

// The continually training parameter state: a seeded Gaussian random walk
// stepped once per whole virtual minute, so the path at minute m does not
// depend on the event partition.
struct DriftingState {
    feature::EmbeddingSet tables;
    attention::TwinParams params;
    Rng rng;
    double rate;
    std::int64_t minute = 0;

    void advance_to(std::int64_t t) {
        if (rate <= 0.0) {
            minute = std::max(minute, t);
            return;
        }
        std::normal_distribution<double> step(0.0, rate);
        while (minute < t) {
            for (auto& table : tables.tables) {
                for (double& x : table.weights.data) x += step(rng);
            }
            for (auto& head : params.heads) {
                for (double& x : head.query_proj.data) x += step(rng);
                for (double& x : head.inherent_proj.data) x += step(rng);
                for (auto& w : head.cross_weights) {
                    for (double& x : w) x += step(rng);
                }
                for (double& x : head.cross_bias) x += step(rng);
                for (double& x : head.value_proj.data) x += step(rng);
            }
            for (double& x : params.output_proj.data) x += step(rng);
            ++minute;
        }
    }
};

}  // namespace

ScenarioReport run_scenario(const ScenarioConfig& config,
                            const ScenarioInputs& inputs) {
    config.schedule.validate();
    if (inputs.schema == nullptr || inputs.user_behaviors == nullptr) {
        fail("run_scenario: missing schema or behaviors");
    }
    for (Index i = 1; i < inputs.requests.size(); ++i) {
        if (inputs.requests[i].time < inputs.requests[i - 1].time) {
            fail("run_scenario: requests must be time-ascending");
        }
    }
    const auto& schema = *inputs.schema;
    const auto& schedule = config.schedule;

    DriftingState trainer{inputs.tables, inputs.params,
                          Rng(derive_seed(config.seed, 0xD21F7)),
                          config.drift_rate};

    feature::EmbeddingSet synced_tables = trainer.tables;
    attention::TwinParams synced_params = trainer.params;

    // Pool rows for the up-to-date side, rebuilt at every sync: the exact
    // projections a realtime scorer would compute from the synced state.
    std::unordered_map<std::uint32_t, Index> pool_row;
    pool_row.reserve(inputs.pool.size());
    for (Index r = 0; r < inputs.pool.size(); ++r) {
        pool_row[inputs.pool[r].video_id] = r;
    }
    std::vector<Matrix> fresh_keys;
    auto rebuild_fresh = [&]() {
        Matrix pool_kh(inputs.pool.size(), synced_params.config.inherent_dim);
        for (Index r = 0; r < inputs.pool.size(); ++r) {
            Vector row =
                feature::embed_target(inputs.pool[r], schema, synced_tables);
            std::copy(row.begin(), row.end(), pool_kh.row(r).begin());
        }
        fresh_keys.clear();
        for (Index a = 0; a < synced_params.config.n_heads; ++a) {
            fresh_keys.push_back(
                attention::project_inherent(pool_kh, synced_params.heads[a]));
        }
    };

    ScenarioReport report;
    FlopLedger ledger;
    ScopedFlopLedger scope(ledger);

    ProjectionCache cache(config.policy);
    VirtualClock clock;

    auto do_sync = [&]() {
        synced_tables = trainer.tables;
        synced_params = trainer.params;
        rebuild_fresh();
        ++report.sync_count;
    };
    auto do_refresh = [&](std::int64_t t) {
        cache.refresh(schema, synced_tables, synced_params, inputs.pool,
                      schedule.coverage_fraction, t);
        ++report.refresh_count;
    };

    do_sync();
    do_refresh(0);

    std::int64_t next_sync = schedule.param_sync_period;
    std::int64_t next_refresh = schedule.cache_refresh_period > 0
                                    ? schedule.cache_refresh_period
                                    : -1;

    const Index k = config.finalists;
    Matrix dummy_kh(0, synced_params.config.inherent_dim);
    double stale_sum = 0.0;

    for (Index i = 0; i < inputs.requests.size(); ++i) {
        const auto& request = inputs.requests[i];
        // Timed maintenance first; syncs win ties so refreshes always see
        // the freshest synced snapshot.
        while ((next_sync <= request.time) ||
               (next_refresh >= 0 && next_refresh <= request.time)) {
            const bool sync_first =
                next_refresh < 0 || next_sync <= next_refresh;
            const std::int64_t t = sync_first ? next_sync : next_refresh;
            trainer.advance_to(t);
            clock.advance_to(t);
            if (sync_first) {
                do_sync();
                next_sync += schedule.param_sync_period;
            } else {
                do_refresh(t);
                next_refresh += schedule.cache_refresh_period;
            }
        }
        trainer.advance_to(request.time);
        clock.advance_to(request.time);
        if (schedule.cache_refresh_period == 0) do_refresh(request.time);

        const auto& behaviors = (*inputs.user_behaviors)[request.user];
        if (behaviors.empty()) fail("run_scenario: user has no behaviors");

        Vector q = feature::embed_target(request.target, schema, synced_tables);
        Matrix kc = feature::assemble_cross(behaviors, schema, synced_tables);

        // Up-to-date side: gather per-head keys from the synced projections.
        retrieval::CachedKeys fresh;
        fresh.keys.assign(synced_params.config.n_heads,
                          Matrix(behaviors.size(),
                                 synced_params.config.key_dim));
        for (Index b = 0; b < behaviors.size(); ++b) {
            const Index row = pool_row.at(behaviors[b].video_id);
            for (Index a = 0; a < fresh.keys.size(); ++a) {
                auto src = fresh_keys[a].row(row);
                std::copy(src.begin(), src.end(),
                          fresh.keys[a].row(b).begin());
            }
        }
        auto oracle = retrieval::cp_gsu_retrieve(q, dummy_kh, kc,
                                                 synced_params, k, &fresh);

        LookupResult cached =
            lookup(cache, schema, behaviors, synced_tables, synced_params);
        auto cp = retrieval::cp_gsu_retrieve(q, dummy_kh, kc, synced_params, k,
                                             &cached.keys);

        RequestReport row;
        row.index = i;
        row.time = request.time;
        row.cache_version = cached.version;
        row.staleness = request.time - cache.current()->built_at;
        row.miss_count = cached.miss_count;
        row.hit_twin_cp = retrieval::hit_rate(cp, oracle);
        if (config.include_baselines) {
            auto soft = retrieval::soft_gsu(request.target, behaviors,
                                            inputs.frozen, k);
            auto hard = retrieval::hard_gsu(request.target, behaviors, k);
            row.hit_sim_soft = retrieval::hit_rate(soft, oracle);
            row.hit_sim_hard = retrieval::hit_rate(hard, oracle);
        }
        report.mean_hit_twin_cp += row.hit_twin_cp;
        report.mean_hit_sim_soft += row.hit_sim_soft;
        report.mean_hit_sim_hard += row.hit_sim_hard;
        stale_sum += static_cast<double>(row.staleness);
        report.total_miss_count += row.miss_count;
        report.requests.push_back(row);
    }

    const double n = std::max<double>(1.0, double(report.requests.size()));
    report.mean_hit_twin_cp /= n;
    report.mean_hit_sim_soft /= n;
    report.mean_hit_sim_hard /= n;
    report.mean_staleness = stale_sum / n;
    report.flops = ledger;
    return report;
}

}  // namespace twin::serving
