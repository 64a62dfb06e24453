#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "twin/datagen.hpp"

using namespace twin;
using namespace twin::datagen;

namespace {

WorldConfig small_config() {
    WorldConfig config;
    config.n_users = 40;
    config.n_videos = 3000;
    config.n_authors = 300;
    config.n_topics = 48;
    config.behaviors_per_user_mean = 600;
    config.behaviors_per_user_min = 200;
    config.max_behaviors = 1500;
    config.seed = 7;
    return config;
}

// Rank-based AUC with tie halving, independent of the training module.
double rank_auc(const std::vector<double>& scores,
                const std::vector<int>& labels) {
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
    Index negatives = scores.size() - positives;
    if (positives == 0 || negatives == 0) return 0.5;
    return (rank_sum - 0.5 * double(positives) * double(positives + 1)) /
           (double(positives) * double(negatives));
}

}  // namespace

TEST_CASE("same seed gives an identical world") {
    WorldConfig config = small_config();
    World a = generate_world(config);
    World b = generate_world(config);
    REQUIRE(a.videos.size() == b.videos.size());
    for (Index v = 0; v < a.videos.size(); ++v) {
        CHECK(a.videos[v].topic == b.videos[v].topic);
        CHECK(a.videos[v].author == b.videos[v].author);
        CHECK(a.videos[v].popularity_rank == b.videos[v].popularity_rank);
    }
    for (Index u = 0; u < a.users.size(); ++u) {
        CHECK(a.users[u].interest_topics == b.users[u].interest_topics);
    }
}

TEST_CASE("video topics follow the configured mixture") {
    WorldConfig config = small_config();
    config.n_videos = 100000;
    World world = generate_world(config);

    std::vector<Index> counts(config.n_topics, 0);
    for (const auto& v : world.videos) counts[v.topic]++;
    for (Index t = 0; t < config.n_topics; ++t) {
        const double p = world.topic_weights[t];
        const double freq = double(counts[t]) / double(config.n_videos);
        const double sigma =
            std::sqrt(p * (1.0 - p) / double(config.n_videos));
        CHECK(std::fabs(freq - p) <= 5.0 * sigma + 1e-4);
    }
}

TEST_CASE("category vocabulary honors the configured 37") {
    WorldConfig config = small_config();
    World world = generate_world(config);
    CHECK(world.schema.spec("category").vocab == 37);
    for (const auto& v : world.videos) CHECK(v.category < 37);
}

TEST_CASE("behavior generation basics") {
    World world = generate_world(small_config());

    auto empty = generate_behaviors(world, 0, 0);
    CHECK(empty.empty());

    auto recs = generate_behaviors(world, 1, 500);
    REQUIRE(recs.size() == 500);
    for (Index i = 1; i < recs.size(); ++i) {
        CHECK(recs[i].event_time >= recs[i - 1].event_time);
    }
    auto again = generate_behaviors(world, 1, 500);
    for (Index i = 0; i < recs.size(); ++i) {
        CHECK(recs[i].video_id == again[i].video_id);
        CHECK(recs[i].playtime_bucket == again[i].playtime_bucket);
    }
}

TEST_CASE("zero drift keeps topic frequencies stationary") {
    WorldConfig config = small_config();
    config.interest_drift = 0.0;
    config.explore_prob = 0.0;
    World world = generate_world(config);

    auto recs = generate_behaviors(world, 3, 4000);
    const auto& user = world.users[3];
    // Frequency of the heaviest interest in each half should agree with the
    // static weight within Monte-Carlo noise.
    auto share = [&](Index begin, Index end) {
        Index hits = 0;
        for (Index i = begin; i < end; ++i) {
            if (world.videos[recs[i].video_id].topic ==
                user.interest_topics[0]) {
                ++hits;
            }
        }
        return double(hits) / double(end - begin);
    };
    const double w = user.interest_weights[0];
    const double sigma = std::sqrt(w * (1.0 - w) / 2000.0);
    CHECK(std::fabs(share(0, 2000) - w) <= 5.0 * sigma);
    CHECK(std::fabs(share(2000, 4000) - w) <= 5.0 * sigma);
}

TEST_CASE("playtime is conditionally higher on interest topics") {
    World world = generate_world(small_config());
    double on_sum = 0.0;
    double off_sum = 0.0;
    Index on_n = 0;
    Index off_n = 0;
    for (std::uint32_t u = 0; u < 20; ++u) {
        auto recs = generate_behaviors(world, u, 600);
        const auto& user = world.users[u];
        for (const auto& rec : recs) {
            if (user.affinity(world.videos[rec.video_id].topic) > 0.0) {
                on_sum += rec.playtime_bucket;
                ++on_n;
            } else {
                off_sum += rec.playtime_bucket;
                ++off_n;
            }
        }
    }
    REQUIRE(on_n > 1000);
    REQUIRE(off_n > 500);
    CHECK(on_sum / on_n > off_sum / off_n + 1.0);
}

TEST_CASE("ablation switch: zero long-term weights leave only affinity") {
    WorldConfig config = small_config();
    config.label.long_term_weight = 0.0;
    config.label.playtime_weight = 0.0;
    World world = generate_world(config);
    auto recs = generate_behaviors(world, 5, 400);

    feature::TargetItem target = world.item_of(recs[10].video_id);
    const std::uint16_t topic = world.videos[target.video_id].topic;
    Index same = 0;
    for (const auto& r : recs) {
        if (world.videos[r.video_id].topic == topic) ++same;
    }
    const double affinity = double(same) / double(recs.size());
    const double expect =
        1.0 / (1.0 + std::exp(-(config.label.bias +
                                config.label.affinity_weight * affinity)));
    CHECK(click_probability(world, target, recs) ==
          doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("labels are deterministic given history and seed") {
    World world = generate_world(small_config());
    auto recs = generate_behaviors(world, 2, 300);
    feature::TargetItem target = world.item_of(42);

    int first = label_click(world, target, recs, 999);
    int second = label_click(world, target, recs, 999);
    CHECK(first == second);

    // A different user with the identical history gets the identical label.
    auto copy = recs;
    CHECK(label_click(world, target, copy, 999) == first);
}

TEST_CASE("empirical click rate matches the mean probability") {
    WorldConfig config = small_config();
    config.n_users = 200;
    World world = generate_world(config);

    double p_sum = 0.0;
    double clicks = 0.0;
    Index n = 0;
    for (std::uint32_t u = 0; u < config.n_users; ++u) {
        auto recs = generate_behaviors(world, u, 400);
        auto targets = sample_targets(world, u, 10);
        for (Index i = 0; i < targets.size(); ++i) {
            p_sum += click_probability(world, targets[i], recs);
            clicks += label_click(world, targets[i], recs,
                                  world.config.window_minutes +
                                      static_cast<std::int64_t>(i));
            ++n;
        }
    }
    const double mean_p = p_sum / double(n);
    const double rate = clicks / double(n);
    const double stderr_bound = std::sqrt(mean_p * (1.0 - mean_p) / double(n));
    CHECK(std::fabs(rate - mean_p) <= 3.0 * stderr_bound);
}

TEST_CASE("planted long-term signal is recoverable by the count oracle") {
    WorldConfig config = small_config();
    config.n_users = 150;
    config.behaviors_per_user_mean = 800;
    config.behaviors_per_user_min = 400;
    config.max_behaviors = 2000;
    World world = generate_world(config);
    SyntheticLog log = generate_log(world, 10);

    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& sample : log.samples) {
        const auto& history = log.behaviors[sample.user_id];
        const std::uint16_t topic = world.videos[sample.target.video_id].topic;
        const Index horizon = config.label.recent_horizon;
        const Index old_cutoff =
            history.size() > horizon ? history.size() - horizon : 0;
        Index count = 0;
        for (Index i = 0; i < old_cutoff; ++i) {
            if (world.videos[history[i].video_id].topic == topic) ++count;
        }
        scores.push_back(double(count));
        labels.push_back(sample.label);
    }
    const double auc = rank_auc(scores, labels);
    MESSAGE("count-oracle AUC = ", auc);
    CHECK(auc >= 0.75);
}

TEST_CASE("log export/import round trip and stability") {
    WorldConfig config = small_config();
    config.n_users = 3;
    config.behaviors_per_user_mean = 300;
    config.behavior_length_sigma = 0.0;
    World world = generate_world(config);
    SyntheticLog log = generate_log(world, 4);

    auto dir = std::filesystem::temp_directory_path();
    auto path_a = (dir / "twin_log_a.jsonl").string();
    auto path_b = (dir / "twin_log_b.jsonl").string();
    export_log(path_a, log);
    SyntheticLog loaded = import_log(path_a);

    REQUIRE(loaded.behaviors.size() == log.behaviors.size());
    for (Index u = 0; u < log.behaviors.size(); ++u) {
        REQUIRE(loaded.behaviors[u].size() == log.behaviors[u].size());
        for (Index i = 0; i < log.behaviors[u].size(); ++i) {
            const auto& a = log.behaviors[u][i];
            const auto& b = loaded.behaviors[u][i];
            CHECK(a.video_id == b.video_id);
            CHECK(a.event_time == b.event_time);
            CHECK(a.interaction_flags == b.interaction_flags);
            CHECK(a.recency_bucket == b.recency_bucket);
        }
    }
    REQUIRE(loaded.samples.size() == log.samples.size());
    for (Index i = 0; i < log.samples.size(); ++i) {
        CHECK(loaded.samples[i].label == log.samples[i].label);
        CHECK(loaded.samples[i].target.video_id ==
              log.samples[i].target.video_id);
    }

    // Re-export is byte-identical.
    export_log(path_b, loaded);
    std::ifstream fa(path_a, std::ios::binary);
    std::ifstream fb(path_b, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), {});
    std::string sb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(sa == sb);

    std::filesystem::remove(path_a);
    std::filesystem::remove(path_b);
}

TEST_CASE("malformed log lines are reported with their line number") {
    auto path =
        (std::filesystem::temp_directory_path() / "twin_bad.jsonl").string();
    {
        std::ofstream out(path);
        out << R"({"type":"behavior","user":0,"video":1,"author":0,)"
            << R"("category":0,"duration":0,"ts":0,"playtime":0,)"
            << R"("position":0,"flags":0,"recency":0,"time":5})" << '\n';
        out << "not json at all\n";
    }
    try {
        (void)import_log(path);
        FAIL("expected import_log to throw");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST_CASE("informed embeddings put same-topic videos closer") {
    World world = generate_world(small_config());
    auto tables = informed_tables(world, 11);
    auto frozen = freeze_video_embeddings(tables, world.config.n_videos);

    // Mean inner product between same-topic pairs should exceed the
    // cross-topic mean.
    double same = 0.0;
    double cross = 0.0;
    Index same_n = 0;
    Index cross_n = 0;
    for (Index a = 0; a < 300; ++a) {
        for (Index b = a + 1; b < 300; ++b) {
            const auto& va = frozen.vectors.at(static_cast<std::uint32_t>(a));
            const auto& vb = frozen.vectors.at(static_cast<std::uint32_t>(b));
            double d = 0.0;
            for (Index i = 0; i < va.size(); ++i) d += va[i] * vb[i];
            if (world.videos[a].topic == world.videos[b].topic) {
                same += d;
                ++same_n;
            } else {
                cross += d;
                ++cross_n;
            }
        }
    }
    REQUIRE(same_n > 50);
    CHECK(same / same_n > cross / cross_n + 0.05);
}

TEST_CASE("video pool is ordered by popularity") {
    World world = generate_world(small_config());
    auto pool = video_pool(world);
    REQUIRE(pool.size() == world.config.n_videos);
    for (Index r = 0; r < pool.size(); ++r) {
        CHECK(world.videos[pool[r].video_id].popularity_rank == r);
    }
}
