#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "twin/training.hpp"

using namespace twin;
using namespace twin::train;

namespace {

datagen::WorldConfig tiny_world_config(std::uint64_t seed) {
    datagen::WorldConfig config;
    config.n_users = 6;
    config.n_videos = 12;
    config.n_authors = 6;
    config.n_categories = 5;
    config.n_topics = 6;
    config.interests_per_user = 2;
    config.behaviors_per_user_mean = 8;
    config.behaviors_per_user_min = 8;
    config.max_behaviors = 8;
    config.behavior_length_sigma = 0.0;
    config.id_dim = 4;
    config.small_dim = 2;
    config.window_minutes = 2000;
    config.seed = seed;
    return config;
}

TrainConfig tiny_train_config(const datagen::World& world,
                              std::uint64_t seed) {
    TrainConfig config;
    config.attention.inherent_dim = world.schema.inherent_dim();
    config.attention.cross_dim = world.schema.cross_dim();
    config.attention.cross_count = world.schema.cross_count();
    config.attention.key_dim = 2;
    config.attention.value_dim = 2;
    config.attention.n_heads = 1;
    config.attention.raw_key_dim = 2;
    config.attention.output_dim = 2;
    config.predictor.hidden1 = 6;
    config.predictor.hidden2 = 4;
    config.finalists = 100;  // >= L: the whole sequence is selected
    config.batch_size = 4;
    config.steps = 2;
    config.seed = seed;
    config.workers = 1;
    return config;
}

struct FdCase {
    std::string name;
    double* value;
    double analytic;
};

// Central finite differences at epsilon = 1e-5 against the analytic
// gradient, relative error <= 1e-4 (near-zero pairs pass on an absolute
// floor).
void check_gradients(const datagen::World& world,
                     const datagen::SyntheticLog& log,
                     const TrainConfig& config, double* worst_out) {
    ModelParams params = init_model(world, config);
    Batch batch{&log, {}};
    for (Index i = 0; i < std::min<Index>(4, log.samples.size()); ++i) {
        batch.sample_indices.push_back(i);
    }
    std::vector<int> labels;
    for (Index idx : batch.sample_indices) {
        labels.push_back(log.samples[idx].label);
    }

    Gradients grads = backward(batch, params, world, config, nullptr);

    std::vector<FdCase> cases;
    auto add_tensor = [&](const std::string& name, std::vector<double>& v,
                          const std::vector<double>& g, Index stride) {
        for (Index i = 0; i < v.size(); i += stride) {
            cases.push_back({name + "[" + std::to_string(i) + "]", &v[i],
                             g[i]});
        }
    };
    if (config.raw_mhta) {
        for (Index a = 0; a < params.raw.heads.size(); ++a) {
            add_tensor("raw.key", params.raw.heads[a].key_proj.data,
                       grads.raw_heads[a].key_proj.data, 7);
            add_tensor("raw.query", params.raw.heads[a].query_proj.data,
                       grads.raw_heads[a].query_proj.data, 7);
            add_tensor("raw.bias", params.raw.heads[a].query_bias,
                       grads.raw_heads[a].query_bias, 1);
            add_tensor("raw.value", params.raw.heads[a].value_proj.data,
                       grads.raw_heads[a].value_proj.data, 7);
        }
        add_tensor("raw.out", params.raw.output_proj.data,
                   grads.raw_output_proj.data, 3);
    } else {
        for (Index a = 0; a < params.twin.heads.size(); ++a) {
            add_tensor("twin.query", params.twin.heads[a].query_proj.data,
                       grads.heads[a].query_proj.data, 3);
            add_tensor("twin.key", params.twin.heads[a].inherent_proj.data,
                       grads.heads[a].inherent_proj.data, 3);
            if (config.use_cross_bias) {
                for (Index j = 0; j < config.attention.cross_count; ++j) {
                    add_tensor("twin.crossw",
                               params.twin.heads[a].cross_weights[j],
                               grads.heads[a].cross_weights[j], 2);
                }
                add_tensor("twin.beta", params.twin.heads[a].cross_bias,
                           grads.heads[a].cross_bias, 1);
            }
            add_tensor("twin.value", params.twin.heads[a].value_proj.data,
                       grads.heads[a].value_proj.data, 7);
        }
        add_tensor("twin.out", params.twin.output_proj.data,
                   grads.output_proj.data, 3);
    }
    add_tensor("mlp.w1", params.mlp.w1.data, grads.mlp.w1.data, 11);
    add_tensor("mlp.b1", params.mlp.b1, grads.mlp.b1, 2);
    add_tensor("mlp.w2", params.mlp.w2.data, grads.mlp.w2.data, 5);
    add_tensor("mlp.b2", params.mlp.b2, grads.mlp.b2, 1);
    add_tensor("mlp.w3", params.mlp.w3, grads.mlp.w3, 1);
    cases.push_back({"mlp.b3", &params.mlp.b3, grads.mlp.b3});

    // Embedding entries: every touched row plus a few untouched ones.
    for (Index t = 0; t < params.tables.tables.size(); ++t) {
        auto& table = params.tables.tables[t];
        for (Index v = 0; v < table.weights.rows; v += 2) {
            for (Index d = 0; d < table.weights.cols; d += 2) {
                auto it = grads.tables[t].rows.find(v);
                const double analytic =
                    it == grads.tables[t].rows.end() ? 0.0 : it->second[d];
                cases.push_back({table.name, &table.weights.at(v, d),
                                 analytic});
            }
        }
    }

    const double eps = 1e-5;
    double worst = 0.0;
    auto central = [&](FdCase& c, double h) {
        const double saved = *c.value;
        *c.value = saved + h;
        const double up = loss(forward(batch, params, world, config, nullptr),
                               labels);
        *c.value = saved - h;
        const double down =
            loss(forward(batch, params, world, config, nullptr), labels);
        *c.value = saved;
        return (up - down) / (2.0 * h);
    };
    Index compared = 0;
    Index kinks = 0;
    for (auto& c : cases) {
        const double fd = central(c, eps);
        const double denom = std::max(std::fabs(c.analytic), std::fabs(fd));
        if (denom <= 1e-7) continue;  // both effectively zero
        const double rel = std::fabs(c.analytic - fd) / denom;
        if (rel > 1e-4) {
            // A rectifier kink inside the step makes the quotient
            // epsilon-dependent; a genuine gradient bug does not.
            const double fd_small = central(c, eps / 10.0);
            if (std::fabs(fd_small - fd) > 10.0 * eps * eps * denom + 1e-9) {
                ++kinks;
                continue;
            }
            MESSAGE("gradient mismatch at ", c.name, ": analytic=", c.analytic,
                    " fd=", fd);
            CHECK(rel <= 1e-4);
        }
        ++compared;
        if (rel > worst) worst = rel;
    }
    MESSAGE("fd cases compared: ", compared, " kinks skipped: ", kinks);
    REQUIRE(compared > 30);
    CHECK(worst <= 1e-4);
    CHECK(kinks <= compared / 20);
    if (worst_out != nullptr) *worst_out = worst;
}

}  // namespace

TEST_CASE("loss analytic values") {
    Index clamps = 0;
    CHECK(loss(Vector{0.5, 0.5}, std::vector<int>{0, 1}, &clamps) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(clamps == 0);

    // Exact predictions are clamped and counted, loss ~ 0.
    CHECK(loss(Vector{1.0, 0.0}, std::vector<int>{1, 0}, &clamps) <= 1e-10);
    CHECK(clamps == 2);

    // Hand batch of two.
    const double expected = -(std::log(0.9) + std::log(0.8)) / 2.0;
    CHECK(loss(Vector{0.9, 0.2}, std::vector<int>{1, 0}) ==
          doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("auc endpoints, hand example and invariances") {
    CHECK(auc(Vector{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) ==
          1.0);
    CHECK(auc(Vector{0.9, 0.8, 0.2, 0.1}, std::vector<int>{0, 0, 1, 1}) ==
          0.0);
    CHECK(auc(Vector{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}) ==
          doctest::Approx(0.75).epsilon(1e-12));

    // Random scores hover at 1/2 over 1e5 samples.
    Rng rng(5);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Vector scores(100000);
    std::vector<int> labels(scores.size());
    for (Index i = 0; i < scores.size(); ++i) {
        scores[i] = unit(rng);
        labels[i] = (rng() & 1) != 0 ? 1 : 0;
    }
    const double random_auc = auc(scores, labels);
    CHECK(random_auc >= 0.48);
    CHECK(random_auc <= 0.52);

    // Strictly monotone transforms leave AUC unchanged.
    Vector transformed(scores.size());
    for (Index i = 0; i < scores.size(); ++i) {
        transformed[i] = std::exp(3.0 * scores[i]) - 7.0;
    }
    CHECK(auc(transformed, labels) == doctest::Approx(random_auc).epsilon(1e-12));
}

TEST_CASE("gauc weighting and single-class exclusion") {
    // One user reduces to auc.
    std::vector<std::uint32_t> one_user(4, 7);
    Vector s{0.1, 0.4, 0.35, 0.8};
    std::vector<int> l{0, 0, 1, 1};
    CHECK(gauc(one_user, s, l).value == doctest::Approx(0.75));

    // User 1: 10 samples, AUC 1.0. User 2: 30 samples, all scores tied,
    // AUC 0.5. Weighted mean = 0.625.
    std::vector<std::uint32_t> users;
    Vector scores;
    std::vector<int> labels;
    for (Index i = 0; i < 10; ++i) {
        users.push_back(1);
        scores.push_back(i < 5 ? 0.1 : 0.9);
        labels.push_back(i < 5 ? 0 : 1);
    }
    for (Index i = 0; i < 30; ++i) {
        users.push_back(2);
        scores.push_back(0.5);
        labels.push_back(i % 2 == 0 ? 1 : 0);
    }
    auto result = gauc(users, scores, labels);
    CHECK(result.value == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(result.users_counted == 2);

    // A third, single-class user is excluded and counted.
    for (Index i = 0; i < 5; ++i) {
        users.push_back(3);
        scores.push_back(0.7);
        labels.push_back(1);
    }
    auto excl = gauc(users, scores, labels);
    CHECK(excl.value == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(excl.users_skipped == 1);
}

TEST_CASE("zero predictor weights give 0.5 everywhere") {
    datagen::World world = datagen::generate_world(tiny_world_config(3));
    datagen::SyntheticLog log = datagen::generate_log(world, 4);
    TrainConfig config = tiny_train_config(world, 3);
    ModelParams params = init_model(world, config);
    params.mlp.w3.assign(params.mlp.w3.size(), 0.0);
    params.mlp.b3 = 0.0;

    Batch batch{&log, {0, 1, 2, 3, 4, 5}};
    Vector predictions = forward(batch, params, world, config, nullptr);
    for (double p : predictions) CHECK(p == 0.5);

    // And with generic weights the outputs stay strictly inside (0, 1).
    ModelParams generic = init_model(world, config);
    for (double p : forward(batch, generic, world, config, nullptr)) {
        CHECK(p > 0.0);
        CHECK(p < 1.0);
    }
}

TEST_CASE("swapping two behaviors leaves predictions unchanged") {
    datagen::World world = datagen::generate_world(tiny_world_config(5));
    datagen::SyntheticLog log = datagen::generate_log(world, 2);
    TrainConfig config = tiny_train_config(world, 5);
    config.use_short_term = false;  // the short window is position-based
    ModelParams params = init_model(world, config);

    Batch batch{&log, {0}};
    Vector base = forward(batch, params, world, config, nullptr);

    auto& history =
        const_cast<std::vector<feature::BehaviorRecord>&>(log.behaviors[0]);
    std::swap(history[1], history[5]);
    Vector swapped = forward(batch, params, world, config, nullptr);
    CHECK(swapped[0] == doctest::Approx(base[0]).epsilon(1e-12));
}

TEST_CASE("mean logit gradient is +1/2 on all-negative labels at 0.5") {
    datagen::World world = datagen::generate_world(tiny_world_config(7));
    datagen::SyntheticLog log = datagen::generate_log(world, 4);
    for (auto& sample :
         const_cast<std::vector<datagen::LabeledSample>&>(log.samples)) {
        sample.label = 0;
    }
    TrainConfig config = tiny_train_config(world, 7);
    ModelParams params = init_model(world, config);
    params.mlp.w3.assign(params.mlp.w3.size(), 0.0);
    params.mlp.b3 = 0.0;

    Batch batch{&log, {0, 1, 2, 3}};
    Gradients grads = backward(batch, params, world, config, nullptr);
    // dLoss/dlogit = yhat - y = +0.5 per sample; b3 accumulates the mean.
    CHECK(grads.mlp.b3 == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("analytic gradients match finite differences on tiny configs") {
    double worst_overall = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        datagen::World world =
            datagen::generate_world(tiny_world_config(100 + trial));
        datagen::SyntheticLog log = datagen::generate_log(world, 3);
        TrainConfig config = tiny_train_config(world, 200 + trial);
        config.use_short_term = trial % 2 == 0;
        if (trial == 7) config.gsu = retrieval::GsuKind::kSimHard;
        double worst = 0.0;
        check_gradients(world, log, config, &worst);
        worst_overall = std::max(worst_overall, worst);
    }
    MESSAGE("worst relative error (twin path): ", worst_overall);
}

TEST_CASE("gradients match finite differences without the bias path") {
    datagen::World world = datagen::generate_world(tiny_world_config(300));
    datagen::SyntheticLog log = datagen::generate_log(world, 3);
    TrainConfig config = tiny_train_config(world, 301);
    config.use_cross_bias = false;
    check_gradients(world, log, config, nullptr);
}

TEST_CASE("gradients match finite differences on the unsplit variant") {
    for (int trial = 0; trial < 2; ++trial) {
        datagen::World world =
            datagen::generate_world(tiny_world_config(400 + trial));
        datagen::SyntheticLog log = datagen::generate_log(world, 3);
        TrainConfig config = tiny_train_config(world, 401 + trial);
        config.raw_mhta = true;
        check_gradients(world, log, config, nullptr);
    }
}

TEST_CASE("zero learning rates leave parameters unchanged") {
    datagen::World world = datagen::generate_world(tiny_world_config(9));
    datagen::SyntheticLog log = datagen::generate_log(world, 4);
    TrainConfig config = tiny_train_config(world, 9);
    config.steps = 3;
    config.adagrad_lr = 0.0;
    config.adam_lr = 0.0;

    ModelParams initial = init_model(world, config);
    TrainResult result = twin::train::train(world, log, config);
    CHECK(result.params.mlp.w1.data == initial.mlp.w1.data);
    CHECK(result.params.twin.heads[0].inherent_proj.data ==
          initial.twin.heads[0].inherent_proj.data);
    CHECK(result.params.tables.tables[0].weights.data ==
          initial.tables.tables[0].weights.data);
}

TEST_CASE("training is bit-deterministic and worker-count invariant") {
    datagen::World world = datagen::generate_world(tiny_world_config(11));
    datagen::SyntheticLog log = datagen::generate_log(world, 6);
    TrainConfig config = tiny_train_config(world, 11);
    config.steps = 4;
    config.batch_size = 8;

    TrainResult a = twin::train::train(world, log, config);
    TrainResult b = twin::train::train(world, log, config);
    REQUIRE(a.loss_trace.size() == b.loss_trace.size());
    for (Index i = 0; i < a.loss_trace.size(); ++i) {
        CHECK(a.loss_trace[i] == b.loss_trace[i]);
    }

    config.workers = 2;
    TrainResult c = twin::train::train(world, log, config);
    for (Index i = 0; i < a.loss_trace.size(); ++i) {
        CHECK(a.loss_trace[i] == c.loss_trace[i]);
    }
}

TEST_CASE("oracle and consistency-preserved stages train identically") {
    datagen::World world = datagen::generate_world(tiny_world_config(13));
    datagen::SyntheticLog log = datagen::generate_log(world, 6);
    TrainConfig config = tiny_train_config(world, 13);
    config.steps = 4;
    config.batch_size = 8;
    config.finalists = 4;  // a real selection, not the boundary case

    config.gsu = retrieval::GsuKind::kTwinCp;
    TrainResult twin_run = twin::train::train(world, log, config);
    config.gsu = retrieval::GsuKind::kOracle;
    TrainResult oracle_run = twin::train::train(world, log, config);
    REQUIRE(twin_run.loss_trace.size() == oracle_run.loss_trace.size());
    for (Index i = 0; i < twin_run.loss_trace.size(); ++i) {
        CHECK(twin_run.loss_trace[i] == oracle_run.loss_trace[i]);
    }
}

TEST_CASE("a linearly separable toy signal is learned quickly") {
    datagen::World world = datagen::generate_world(tiny_world_config(15));
    datagen::SyntheticLog log = datagen::generate_log(world, 20);
    // Plant a separable rule: click iff the target category is even.
    for (auto& sample :
         const_cast<std::vector<datagen::LabeledSample>&>(log.samples)) {
        sample.label = sample.target.category % 2 == 0 ? 1 : 0;
    }
    TrainConfig config = tiny_train_config(world, 15);
    config.steps = 200;
    config.batch_size = 16;
    config.test_fraction = 0.0;
    config.adam_lr = 0.01;  // toy scale; the production default barely moves
    TrainResult result = twin::train::train(world, log, config);
    MESSAGE("toy loss after 200 steps: ", result.loss_trace.back());
    CHECK(result.loss_trace.back() < 0.1);
}
