#include "twin/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "twin/rng.hpp"

namespace twin::datagen {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Index sample_cdf(const std::vector<double>& cdf, double u) {
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u * cdf.back());
    return std::min<Index>(static_cast<Index>(it - cdf.begin()),
                           cdf.size() - 1);
}

std::uint64_t history_fingerprint(
    std::span<const feature::BehaviorRecord> history) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
        h ^= v;
        h *= 0x100000001b3ULL;
    };
    for (const auto& rec : history) {
        mix(rec.video_id);
        mix(static_cast<std::uint64_t>(rec.event_time));
        mix(rec.playtime_bucket);
    }
    return h;
}

std::uint16_t clamp_bucket(double x, Index vocab) {
    if (x < 0.0) return 0;
    if (x >= static_cast<double>(vocab)) {
        return static_cast<std::uint16_t>(vocab - 1);
    }
    return static_cast<std::uint16_t>(x);
}

}  // namespace

void WorldConfig::validate() const {
    if (n_users == 0 || n_videos == 0 || n_authors == 0 || n_topics == 0) {
        fail("world config: counts must be positive");
    }
    if (n_categories == 0) fail("world config: need categories");
    if (interests_per_user == 0 || interests_per_user > n_topics) {
        fail("world config: interests_per_user out of range");
    }
    if (behaviors_per_user_min > max_behaviors ||
        behaviors_per_user_mean == 0) {
        fail("world config: behavior length bounds are inconsistent");
    }
    if (explore_prob < 0.0 || explore_prob >= 1.0) {
        fail("world config: explore_prob must be in [0,1)");
    }
    if (window_minutes <= 0) fail("world config: window must be positive");
    if (label.recent_horizon == 0) fail("world config: horizon must be >= 1");
}

feature::SchemaVocabs WorldConfig::vocabs() const {
    feature::SchemaVocabs v;
    v.n_videos = n_videos;
    v.n_authors = n_authors;
    v.n_categories = n_categories;
    v.id_dim = id_dim;
    v.small_dim = small_dim;
    return v;
}

double UserProfile::affinity(std::uint16_t topic) const {
    for (Index i = 0; i < interest_topics.size(); ++i) {
        if (interest_topics[i] == topic) return interest_weights[i];
    }
    return 0.0;
}

feature::TargetItem World::item_of(std::uint32_t video_id) const {
    const Video& v = videos[video_id];
    return {v.id, v.author, v.category, v.duration_bucket};
}

World generate_world(const WorldConfig& config) {
    config.validate();
    World world;
    world.config = config;
    world.schema = feature::default_schema(config.vocabs());

    world.topic_weights.resize(config.n_topics);
    double norm = 0.0;
    for (Index t = 0; t < config.n_topics; ++t) {
        world.topic_weights[t] =
            1.0 / std::pow(double(t + 1), config.topic_zipf_exponent);
        norm += world.topic_weights[t];
    }
    for (double& w : world.topic_weights) w /= norm;
    std::vector<double> topic_cdf(config.n_topics);
    std::partial_sum(world.topic_weights.begin(), world.topic_weights.end(),
                     topic_cdf.begin());

    Rng rng(derive_seed(config.seed, 0x1000));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    world.topic_category.resize(config.n_topics);
    for (Index t = 0; t < config.n_topics; ++t) {
        world.topic_category[t] = static_cast<std::uint16_t>(
            rng() % config.n_categories);
    }

    // Authors get a home topic; videos prefer authors of their own topic.
    std::vector<std::uint16_t> author_topic(config.n_authors);
    std::vector<std::vector<std::uint32_t>> topic_authors(config.n_topics);
    for (Index a = 0; a < config.n_authors; ++a) {
        Index t = sample_cdf(topic_cdf, unit(rng));
        author_topic[a] = static_cast<std::uint16_t>(t);
        topic_authors[t].push_back(static_cast<std::uint32_t>(a));
    }

    // Popularity is a seeded permutation of video ids.
    world.videos_by_popularity.resize(config.n_videos);
    std::iota(world.videos_by_popularity.begin(),
              world.videos_by_popularity.end(), 0u);
    std::shuffle(world.videos_by_popularity.begin(),
                 world.videos_by_popularity.end(), rng);
    std::vector<Index> rank_of(config.n_videos);
    for (Index r = 0; r < config.n_videos; ++r) {
        rank_of[world.videos_by_popularity[r]] = r;
    }

    world.videos.resize(config.n_videos);
    world.topic_videos.assign(config.n_topics, {});
    for (Index v = 0; v < config.n_videos; ++v) {
        Video video;
        video.id = static_cast<std::uint32_t>(v);
        Index t = sample_cdf(topic_cdf, unit(rng));
        video.topic = static_cast<std::uint16_t>(t);
        video.category = world.topic_category[t];
        const auto& pool = topic_authors[t];
        video.author = pool.empty()
                           ? static_cast<std::uint32_t>(rng() %
                                                        config.n_authors)
                           : pool[rng() % pool.size()];
        video.duration_bucket = static_cast<std::uint8_t>(rng() % 16);
        video.popularity_rank = rank_of[v];
        world.topic_videos[t].push_back(video.id);
        world.videos[v] = video;
    }
    world.topic_video_cdf.assign(config.n_topics, {});
    for (Index t = 0; t < config.n_topics; ++t) {
        auto& cdf = world.topic_video_cdf[t];
        cdf.resize(world.topic_videos[t].size());
        double acc = 0.0;
        for (Index i = 0; i < cdf.size(); ++i) {
            const Video& v = world.videos[world.topic_videos[t][i]];
            acc += 1.0 / std::pow(double(v.popularity_rank + 1), 0.8);
            cdf[i] = acc;
        }
    }

    world.users.resize(config.n_users);
    for (Index u = 0; u < config.n_users; ++u) {
        Rng urng(derive_seed(config.seed, 0x2000, u));
        UserProfile profile;
        profile.id = static_cast<std::uint32_t>(u);
        std::uniform_real_distribution<double> uu(0.0, 1.0);
        while (profile.interest_topics.size() < config.interests_per_user) {
            auto t = static_cast<std::uint16_t>(sample_cdf(topic_cdf, uu(urng)));
            if (std::find(profile.interest_topics.begin(),
                          profile.interest_topics.end(),
                          t) == profile.interest_topics.end()) {
                profile.interest_topics.push_back(t);
            }
        }
        std::exponential_distribution<double> expdist(1.0);
        double sum = 0.0;
        for (Index i = 0; i < profile.interest_topics.size(); ++i) {
            profile.interest_weights.push_back(0.3 + expdist(urng));
            sum += profile.interest_weights.back();
        }
        for (double& w : profile.interest_weights) w /= sum;
        // Heaviest interest first, for readability of dumps.
        std::vector<Index> order(profile.interest_topics.size());
        std::iota(order.begin(), order.end(), Index{0});
        std::sort(order.begin(), order.end(), [&](Index a, Index b) {
            return profile.interest_weights[a] > profile.interest_weights[b];
        });
        UserProfile sorted;
        sorted.id = profile.id;
        for (Index i : order) {
            sorted.interest_topics.push_back(profile.interest_topics[i]);
            sorted.interest_weights.push_back(profile.interest_weights[i]);
        }
        world.users[u] = std::move(sorted);
    }
    return world;
}

std::vector<feature::BehaviorRecord> generate_behaviors(const World& world,
                                                        std::uint32_t user_id,
                                                        Index length) {
    const auto& config = world.config;
    const UserProfile& user = world.users[user_id];
    Rng rng(derive_seed(config.seed, 0x3000, user_id));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::vector<double> weights = user.interest_weights;  // drifts over time
    std::vector<feature::BehaviorRecord> out;
    out.reserve(length);
    for (Index i = 0; i < length; ++i) {
        if (config.interest_drift > 0.0) {
            double sum = 0.0;
            for (double& w : weights) {
                w = std::max(0.01, w + config.interest_drift * gauss(rng));
                sum += w;
            }
            for (double& w : weights) w /= sum;
        }

        std::uint16_t topic;
        if (unit(rng) < config.explore_prob) {
            topic = static_cast<std::uint16_t>(rng() % config.n_topics);
        } else {
            double u = unit(rng);
            double acc = 0.0;
            Index pick = weights.size() - 1;
            for (Index k = 0; k < weights.size(); ++k) {
                acc += weights[k];
                if (u <= acc) {
                    pick = k;
                    break;
                }
            }
            topic = user.interest_topics[pick];
        }
        if (world.topic_videos[topic].empty()) {
            topic = world.videos[rng() % config.n_videos].topic;
        }

        const auto& ids = world.topic_videos[topic];
        const auto& cdf = world.topic_video_cdf[topic];
        const Video& video = world.videos[ids[sample_cdf(cdf, unit(rng))]];

        feature::BehaviorRecord rec;
        rec.video_id = video.id;
        rec.author_id = video.author;
        rec.category = video.category;
        rec.duration_bucket = video.duration_bucket;
        rec.event_time = static_cast<std::int64_t>(
            (static_cast<long double>(i) * config.window_minutes) / length);
        rec.timestamp_bucket =
            static_cast<std::uint16_t>((rec.event_time / 60) % 24);

        // Playtime carries the planted cross-feature signal: on-interest
        // topics are watched longer.
        const double aff = user.affinity(video.topic);
        const double mu = 2.0 + 6.0 * std::min(1.0, aff * 2.5);
        rec.playtime_bucket = clamp_bucket(mu + 1.5 * gauss(rng), 10);
        rec.page_position = static_cast<std::uint16_t>(rng() % 8);

        std::uint8_t flags = 0;
        const double like_p = 0.03 + 0.25 * std::min(1.0, aff * 2.0);
        for (Index b = 0; b < 5; ++b) {
            if (unit(rng) < like_p) flags |= static_cast<std::uint8_t>(1u << b);
        }
        if (unit(rng) < 0.08 * (1.0 - std::min(1.0, aff * 2.0))) {
            flags |= 1u << 5;
        }
        rec.interaction_flags = flags;

        const double age_hours =
            static_cast<double>(config.window_minutes - rec.event_time) / 60.0;
        rec.recency_bucket =
            clamp_bucket(std::floor(std::log2(1.0 + age_hours)), 12);
        out.push_back(rec);
    }
    return out;
}

double click_probability(const World& world, const feature::TargetItem& target,
                         std::span<const feature::BehaviorRecord> history) {
    const auto& model = world.config.label;
    const std::uint16_t topic = world.videos[target.video_id].topic;
    if (history.empty()) return sigmoid(model.bias);

    Index same_total = 0;
    Index same_old = 0;
    double playtime_acc = 0.0;
    double playtime_norm = 0.0;
    const Index old_cutoff = history.size() > model.recent_horizon
                                 ? history.size() - model.recent_horizon
                                 : 0;
    const std::int64_t t_end = history.back().event_time;
    for (Index i = 0; i < history.size(); ++i) {
        const auto& rec = history[i];
        if (world.videos[rec.video_id].topic != topic) continue;
        ++same_total;
        if (i < old_cutoff) ++same_old;
        const double age_days =
            static_cast<double>(t_end - rec.event_time) / (24.0 * 60.0);
        const double w = std::exp(-age_days / 30.0);
        playtime_acc += w * (static_cast<double>(rec.playtime_bucket) / 9.0);
        playtime_norm += w;
    }

    const double affinity =
        static_cast<double>(same_total) / static_cast<double>(history.size());
    const double long_term =
        old_cutoff > 0 ? static_cast<double>(same_old) /
                             static_cast<double>(old_cutoff)
                       : 0.0;
    const double playtime =
        playtime_norm > 0.0 ? playtime_acc / playtime_norm : 0.0;

    return sigmoid(model.bias + model.affinity_weight * affinity +
                   model.long_term_weight * long_term +
                   model.playtime_weight * playtime);
}

int label_click(const World& world, const feature::TargetItem& target,
                std::span<const feature::BehaviorRecord> history,
                std::int64_t request_time) {
    const double p = click_probability(world, target, history);
    Rng rng(derive_seed(world.config.seed, history_fingerprint(history),
                        target.video_id,
                        static_cast<std::uint64_t>(request_time)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    return unit(rng) < p ? 1 : 0;
}

std::vector<feature::TargetItem> sample_targets(const World& world,
                                                std::uint32_t user_id,
                                                Index count,
                                                std::uint64_t salt) {
    const auto& config = world.config;
    const UserProfile& user = world.users[user_id];
    Rng rng(derive_seed(config.seed, 0x4000 + salt, user_id));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<feature::TargetItem> out;
    out.reserve(count);
    for (Index i = 0; i < count; ++i) {
        std::uint16_t topic;
        if (i % 2 == 0) {
            // On-interest half: draw from the user's mixture.
            double u = unit(rng);
            double acc = 0.0;
            Index pick = user.interest_weights.size() - 1;
            for (Index k = 0; k < user.interest_weights.size(); ++k) {
                acc += user.interest_weights[k];
                if (u <= acc) {
                    pick = k;
                    break;
                }
            }
            topic = user.interest_topics[pick];
        } else {
            topic = static_cast<std::uint16_t>(rng() % config.n_topics);
        }
        if (world.topic_videos[topic].empty()) topic = world.videos[0].topic;
        const auto& ids = world.topic_videos[topic];
        const auto& cdf = world.topic_video_cdf[topic];
        out.push_back(world.item_of(ids[sample_cdf(cdf, unit(rng))]));
    }
    return out;
}

SyntheticLog generate_log(const World& world, Index samples_per_user) {
    const auto& config = world.config;
    SyntheticLog log;
    log.behaviors.resize(config.n_users);
    for (Index u = 0; u < config.n_users; ++u) {
        Rng rng(derive_seed(config.seed, 0x5000, u));
        Index length = config.behaviors_per_user_mean;
        if (config.behavior_length_sigma > 0.0) {
            std::normal_distribution<double> gauss(0.0, 1.0);
            length = static_cast<Index>(
                std::llround(double(config.behaviors_per_user_mean) *
                             std::exp(config.behavior_length_sigma *
                                      gauss(rng))));
        }
        length = std::clamp(length, config.behaviors_per_user_min,
                            config.max_behaviors);
        log.behaviors[u] =
            generate_behaviors(world, static_cast<std::uint32_t>(u), length);

        auto targets = sample_targets(world, static_cast<std::uint32_t>(u),
                                      samples_per_user);
        for (Index i = 0; i < targets.size(); ++i) {
            LabeledSample sample;
            sample.user_id = static_cast<std::uint32_t>(u);
            sample.target = targets[i];
            sample.request_time =
                config.window_minutes + static_cast<std::int64_t>(i);
            sample.label = label_click(world, sample.target, log.behaviors[u],
                                       sample.request_time);
            log.samples.push_back(sample);
        }
    }
    return log;
}

void export_log(const std::string& path, const SyntheticLog& log) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("export_log: cannot open " + path);
    for (Index u = 0; u < log.behaviors.size(); ++u) {
        for (const auto& rec : log.behaviors[u]) {
            json row{{"type", "behavior"},
                     {"user", u},
                     {"video", rec.video_id},
                     {"author", rec.author_id},
                     {"category", rec.category},
                     {"duration", rec.duration_bucket},
                     {"ts", rec.timestamp_bucket},
                     {"playtime", rec.playtime_bucket},
                     {"position", rec.page_position},
                     {"flags", rec.interaction_flags},
                     {"recency", rec.recency_bucket},
                     {"time", rec.event_time}};
            out << row.dump() << '\n';
        }
    }
    for (const auto& sample : log.samples) {
        json row{{"type", "sample"},
                 {"user", sample.user_id},
                 {"video", sample.target.video_id},
                 {"author", sample.target.author_id},
                 {"category", sample.target.category},
                 {"duration", sample.target.duration_bucket},
                 {"time", sample.request_time},
                 {"label", sample.label}};
        out << row.dump() << '\n';
    }
}

SyntheticLog import_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("import_log: cannot open " + path);
    SyntheticLog log;
    std::string line;
    Index line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json row;
        try {
            row = json::parse(line);
            const std::string type = row.at("type").get<std::string>();
            const Index user = row.at("user").get<Index>();
            if (type == "behavior") {
                if (log.behaviors.size() <= user) {
                    log.behaviors.resize(user + 1);
                }
                feature::BehaviorRecord rec;
                rec.video_id = row.at("video").get<std::uint32_t>();
                rec.author_id = row.at("author").get<std::uint32_t>();
                rec.category = row.at("category").get<std::uint16_t>();
                rec.duration_bucket = row.at("duration").get<std::uint16_t>();
                rec.timestamp_bucket = row.at("ts").get<std::uint16_t>();
                rec.playtime_bucket = row.at("playtime").get<std::uint16_t>();
                rec.page_position = row.at("position").get<std::uint16_t>();
                rec.interaction_flags = row.at("flags").get<std::uint8_t>();
                rec.recency_bucket = row.at("recency").get<std::uint16_t>();
                rec.event_time = row.at("time").get<std::int64_t>();
                log.behaviors[user].push_back(rec);
            } else if (type == "sample") {
                LabeledSample sample;
                sample.user_id = static_cast<std::uint32_t>(user);
                sample.target.video_id = row.at("video").get<std::uint32_t>();
                sample.target.author_id = row.at("author").get<std::uint32_t>();
                sample.target.category = row.at("category").get<std::uint16_t>();
                sample.target.duration_bucket =
                    row.at("duration").get<std::uint16_t>();
                sample.request_time = row.at("time").get<std::int64_t>();
                sample.label = row.at("label").get<int>();
                log.samples.push_back(sample);
            } else {
                throw std::runtime_error("unknown row type '" + type + "'");
            }
        } catch (const std::exception& e) {
            throw std::runtime_error("import_log: line " +
                                     std::to_string(line_no) + ": " +
                                     e.what());
        }
    }
    return log;
}

feature::EmbeddingSet informed_tables(const World& world, std::uint64_t seed,
                                      double scale, double topic_mix,
                                      double author_mix) {
    const auto& schema = world.schema;
    feature::EmbeddingSet tables = feature::make_tables(schema);

    // Authors inherit the dominant topic of their videos; collect one pass.
    std::vector<std::uint16_t> author_topic(world.config.n_authors, 0);
    for (const auto& video : world.videos) {
        author_topic[video.author] = video.topic;
    }

    for (Index ti = 0; ti < tables.tables.size(); ++ti) {
        auto& table = tables.tables[ti];
        const auto& spec = schema.spec(table.name);
        Rng rng(derive_seed(seed, 0x7000, ti));
        fill_gaussian(table.weights, rng, scale);

        const bool is_video = table.name == "video_id";
        if (!is_video && table.name != "author_id") continue;

        // Per-topic centroids at this table's width.
        std::vector<Vector> centroids(world.config.n_topics);
        for (Index t = 0; t < centroids.size(); ++t) {
            Rng crng(derive_seed(seed, 0x6000 + ti, t));
            centroids[t].assign(spec.dim, 0.0);
            fill_gaussian(centroids[t], crng, 1.0);
        }
        const double mix = is_video ? topic_mix : author_mix;
        for (Index v = 0; v < spec.vocab; ++v) {
            const std::uint16_t topic =
                is_video ? world.videos[v].topic : author_topic[v];
            auto row = table.embedding_of(v);
            const Vector& c = centroids[topic];
            for (Index d = 0; d < row.size(); ++d) {
                row[d] = scale * ((1.0 - mix) * row[d] / scale + mix * c[d]);
            }
        }
    }
    return tables;
}

retrieval::PretrainedEmbeddings freeze_video_embeddings(
    const feature::EmbeddingSet& tables, Index n_videos) {
    const auto& table = tables.table("video_id");
    retrieval::PretrainedEmbeddings out;
    out.dim = table.weights.cols;
    for (Index v = 0; v < n_videos; ++v) {
        auto row = table.embedding_of(v);
        out.vectors[static_cast<std::uint32_t>(v)] =
            Vector(row.begin(), row.end());
    }
    return out;
}

std::vector<feature::TargetItem> video_pool(const World& world) {
    std::vector<feature::TargetItem> pool;
    pool.reserve(world.videos.size());
    for (std::uint32_t id : world.videos_by_popularity) {
        pool.push_back(world.item_of(id));
    }
    return pool;
}

}  // namespace twin::datagen
