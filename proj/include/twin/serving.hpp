#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "twin/attention.hpp"
#include "twin/features.hpp"
#include "twin/numerics.hpp"
#include "twin/retrieval.hpp"

// Deployment simulation: the inherent-feature projector and versioned
// embedding server, parameter-sync cadence, staleness under continual
// training drift, and the analytic / measured multiply-add cost model.

namespace twin::serving {

// ---------------------------------------------------------------------------
// Cost model

struct FlopModel {
    Index length = 10000;     // behaviors scored per request; 0 allowed
    Index inherent_dim = 144;
    Index cross_dim = 40;
    Index cross_count = 5;
    Index key_dim = 32;
    Index raw_key_dim = 32;   // key projection width of the unsplit path
    Index n_heads = 4;

    void validate() const;  // positive dims, length may be zero
};

struct FlopCount {
    std::uint64_t projection = 0;      // unsplit path: key projection of K
    std::uint64_t qk_dots = 0;         // score dot products
    std::uint64_t cross_compress = 0;  // split path: 8-wide slice dots
    std::uint64_t bias_dots = 0;       // split path: bias inner products
    std::uint64_t mem_reads = 0;       // cache gathers, not multiply-adds

    std::uint64_t mul_adds() const {
        return projection + qk_dots + cross_compress + bias_dots;
    }
};

// Per-request scoring cost of the unsplit reference path:
// projection n_heads*L*(H+C)*d_out plus the itemized score dots.
FlopCount flops_raw(const FlopModel& model);

// Per-request scoring cost of the split path with cached inherent keys:
// n_heads*(L*key_dim + L*C + L*J) multiply-adds and L gathers.
FlopCount flops_twin_online(const FlopModel& model);

// Run the instrumented kernels on random inputs of the model's shapes and
// return the ledger counts; mul_adds and mem_reads equal the analytic
// totals exactly.
FlopLedger measured_flops_raw(const FlopModel& model, std::uint64_t seed);
FlopLedger measured_flops_twin_online(const FlopModel& model,
                                      std::uint64_t seed);

// Fraction of the projection bottleneck removed by the split path.
double reduction_ratio(const FlopCount& raw, const FlopCount& twin);

// ---------------------------------------------------------------------------
// Projection cache

enum class CoveragePolicy { kStrict, kComputeOnMiss };

struct CacheVersion {
    std::uint64_t version = 0;
    std::int64_t built_at = 0;  // virtual minutes
    Index key_dim = 0;
    Index n_heads = 0;
    // video id -> concatenated per-head projected inherent features
    // (n_heads * key_dim values).
    std::unordered_map<std::uint32_t, Vector> entries;
};

// One writer, many readers. A refresh builds the next version completely
// before publishing it; readers acquire a version handle once per request
// and never observe a partially built version.
class ProjectionCache {
  public:
    explicit ProjectionCache(CoveragePolicy policy = CoveragePolicy::kComputeOnMiss)
        : policy_(policy) {}

    CoveragePolicy policy() const { return policy_; }

    std::shared_ptr<const CacheVersion> current() const;

    // Projects the covered fraction of the pool (most popular first) with
    // the given snapshot and publishes it as the next version.
    void refresh(const feature::FeatureSchema& schema,
                 const feature::EmbeddingSet& tables,
                 const attention::TwinParams& params,
                 std::span<const feature::TargetItem> pool_by_popularity,
                 double coverage_fraction, std::int64_t now);

  private:
    CoveragePolicy policy_;
    std::shared_ptr<const CacheVersion> current_;
    std::uint64_t next_version_ = 1;
};

struct LookupResult {
    retrieval::CachedKeys keys;  // row i aligns with behaviors[i]
    Index miss_count = 0;
    std::uint64_t version = 0;
};

// Gathers the projected inherent rows for the behaviors' video ids from
// the newest published version. Strict policy throws std::runtime_error
// listing the missing ids; compute-on-miss projects them with the given
// fresh snapshot and itemizes that work as miss multiply-adds in the
// active ledger. Counts one mem_read per behavior.
LookupResult lookup(const ProjectionCache& cache,
                    const feature::FeatureSchema& schema,
                    std::span<const feature::BehaviorRecord> behaviors,
                    const feature::EmbeddingSet& fresh_tables,
                    const attention::TwinParams& fresh_params);

// ---------------------------------------------------------------------------
// Scenario simulation

struct VirtualClock {
    std::int64_t now = 0;

    void advance_to(std::int64_t t);  // throws on moving backwards
};

struct SyncSchedule {
    std::int64_t param_sync_period = 5;     // minutes
    std::int64_t cache_refresh_period = 15; // minutes; 0 = before every request
    double coverage_fraction = 0.97;

    void validate() const;
};

struct ScenarioRequest {
    std::uint32_t user = 0;
    feature::TargetItem target;
    std::int64_t time = 0;
};

struct ScenarioConfig {
    SyncSchedule schedule;
    double drift_rate = 0.0;  // per-minute random-walk stddev on parameters
    CoveragePolicy policy = CoveragePolicy::kComputeOnMiss;
    Index finalists = 100;
    bool include_baselines = true;
    std::uint64_t seed = 1;
};

struct ScenarioInputs {
    const feature::FeatureSchema* schema = nullptr;
    feature::EmbeddingSet tables;        // training state at t = 0
    attention::TwinParams params;
    const std::vector<std::vector<feature::BehaviorRecord>>* user_behaviors =
        nullptr;
    std::vector<feature::TargetItem> pool;  // most popular first
    retrieval::PretrainedEmbeddings frozen; // inner-product baseline table
    std::vector<ScenarioRequest> requests;  // time-ascending
};

struct RequestReport {
    Index index = 0;
    std::int64_t time = 0;
    std::int64_t staleness = 0;  // minutes since the cache was built
    std::uint64_t cache_version = 0;
    double hit_twin_cp = 0.0;
    double hit_sim_soft = 0.0;
    double hit_sim_hard = 0.0;
    Index miss_count = 0;
};

struct ScenarioReport {
    std::vector<RequestReport> requests;
    double mean_hit_twin_cp = 0.0;
    double mean_hit_sim_soft = 0.0;
    double mean_hit_sim_hard = 0.0;
    double mean_staleness = 0.0;
    Index refresh_count = 0;
    Index sync_count = 0;
    std::uint64_t total_miss_count = 0;
    FlopLedger flops;
};

// Replays the request stream against a drifting training state: the
// pooling/oracle side reads parameters synced every param_sync_period
// minutes, the first stage reads inherent keys from the cache refreshed
// every cache_refresh_period minutes (0 refreshes before each request).
ScenarioReport run_scenario(const ScenarioConfig& config,
                            const ScenarioInputs& inputs);

}  // namespace twin::serving
