#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "twin/features.hpp"
#include "twin/numerics.hpp"
#include "twin/retrieval.hpp"

// Seeded synthetic world: videos with latent topics, users with sparse
// interest mixtures, long behavior logs and click labels with a planted
// long-range dependency. The label deliberately rewards same-topic
// behaviors that sit beyond the most recent `recent_horizon` ones, so a
// model limited to short histories cannot recover it.

namespace twin::datagen {

struct LabelModel {
    double bias = -2.6;
    double affinity_weight = 2.0;   // share of target topic in full history
    double long_term_weight = 4.0;  // share among behaviors older than the horizon
    double playtime_weight = 1.5;   // recency-weighted playtime on the topic
    Index recent_horizon = 100;
};

struct WorldConfig {
    Index n_users = 2000;
    Index n_videos = 20000;
    Index n_authors = 2000;
    Index n_categories = 37;
    Index n_topics = 96;
    double topic_zipf_exponent = 0.6;
    Index interests_per_user = 3;
    double explore_prob = 0.15;      // off-interest behavior probability
    double interest_drift = 0.004;   // per-behavior random walk on weights
    Index behaviors_per_user_mean = 2000;
    Index behaviors_per_user_min = 200;
    Index max_behaviors = 10000;
    double behavior_length_sigma = 0.4;  // lognormal spread, 0 pins the mean
    std::int64_t window_minutes = 180LL * 24 * 60;
    Index id_dim = 64;     // embedding width of the id features
    Index small_dim = 8;   // embedding width of the small inherent features
    LabelModel label;
    std::uint64_t seed = 1;

    void validate() const;
    feature::SchemaVocabs vocabs() const;
};

struct Video {
    std::uint32_t id = 0;
    std::uint32_t author = 0;
    std::uint16_t topic = 0;
    std::uint16_t category = 0;
    std::uint8_t duration_bucket = 0;
    Index popularity_rank = 0;  // 0 = most popular
};

struct UserProfile {
    std::uint32_t id = 0;
    std::vector<std::uint16_t> interest_topics;
    std::vector<double> interest_weights;  // same order, sums to 1

    double affinity(std::uint16_t topic) const;
};

struct World {
    WorldConfig config;
    feature::FeatureSchema schema;
    std::vector<Video> videos;
    std::vector<UserProfile> users;
    std::vector<std::uint16_t> topic_category;  // topic -> category
    std::vector<double> topic_weights;          // configured mixture
    std::vector<std::uint32_t> videos_by_popularity;
    // Per-topic video ids plus cumulative popularity weights for sampling.
    std::vector<std::vector<std::uint32_t>> topic_videos;
    std::vector<std::vector<double>> topic_video_cdf;

    feature::TargetItem item_of(std::uint32_t video_id) const;
};

World generate_world(const WorldConfig& config);

std::vector<feature::BehaviorRecord> generate_behaviors(const World& world,
                                                        std::uint32_t user_id,
                                                        Index length);

struct LabeledSample {
    std::uint32_t user_id = 0;
    feature::TargetItem target;
    std::int64_t request_time = 0;
    int label = 0;
};

// Click probability of the planted label model; a pure function of the
// history, the target and the world's topic assignment.
double click_probability(const World& world, const feature::TargetItem& target,
                         std::span<const feature::BehaviorRecord> history);

// Bernoulli draw of click_probability, seeded from (world seed, history
// fingerprint, target, request time): identical histories and seeds give
// identical labels.
int label_click(const World& world, const feature::TargetItem& target,
                std::span<const feature::BehaviorRecord> history,
                std::int64_t request_time);

struct SyntheticLog {
    std::vector<std::vector<feature::BehaviorRecord>> behaviors;  // per user
    std::vector<LabeledSample> samples;
};

// Behavior logs for every user plus labeled samples at the end of the
// window; half the targets are drawn from the user's interests, half
// uniformly.
SyntheticLog generate_log(const World& world, Index samples_per_user);

// Targets only (no labels), for retrieval-only experiments.
std::vector<feature::TargetItem> sample_targets(const World& world,
                                                std::uint32_t user_id,
                                                Index count,
                                                std::uint64_t salt = 0);

// JSON-Lines round trip: one behavior or one labeled sample per line.
// import throws std::runtime_error naming the offending line number.
void export_log(const std::string& path, const SyntheticLog& log);
SyntheticLog import_log(const std::string& path);

// Topic-structured embedding initialization: id-class embeddings mix their
// topic centroid with noise so inner products reflect topical similarity
// before any training. Authors get a weaker mix (they post across topics);
// non-id tables are plain Gaussian.
feature::EmbeddingSet informed_tables(const World& world, std::uint64_t seed,
                                      double scale = 0.1,
                                      double topic_mix = 0.7,
                                      double author_mix = 0.35);

// Frozen per-video vectors (a snapshot of the video_id table) for the
// inner-product baseline.
retrieval::PretrainedEmbeddings freeze_video_embeddings(
    const feature::EmbeddingSet& tables, Index n_videos);

// Inherent-feature tuples of every video, most popular first; the unit the
// projection cache covers.
std::vector<feature::TargetItem> video_pool(const World& world);

}  // namespace twin::datagen
