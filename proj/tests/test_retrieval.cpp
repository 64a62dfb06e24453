#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <memory>
#include <random>

#include "twin/retrieval.hpp"
#include "twin/rng.hpp"

using namespace twin;
using namespace twin::retrieval;

namespace {

attention::AttentionConfig tiny_config(Index n_heads) {
    attention::AttentionConfig cfg;
    cfg.inherent_dim = 2;
    cfg.cross_dim = 8;
    cfg.cross_count = 1;
    cfg.key_dim = 1;
    cfg.value_dim = 2;
    cfg.n_heads = n_heads;
    cfg.output_dim = 2;
    return cfg;
}

feature::BehaviorRecord behavior(std::uint32_t video, std::uint16_t category,
                                 std::int64_t t) {
    feature::BehaviorRecord r;
    r.video_id = video;
    r.category = category;
    r.event_time = t;
    return r;
}

}  // namespace

TEST_CASE("round-robin union over two heads") {
    attention::AttentionConfig cfg = tiny_config(2);
    attention::TwinParams params = attention::init_params(cfg, 1);
    // Head 0 reads K_h column 0, head 1 reads column 1; cross bias off.
    for (Index a = 0; a < 2; ++a) {
        params.heads[a].query_proj = Matrix(2, 1, {1.0, 0.0});
        params.heads[a].cross_bias.assign(1, 0.0);
    }
    params.heads[0].inherent_proj = Matrix(2, 1, {1.0, 0.0});
    params.heads[1].inherent_proj = Matrix(2, 1, {0.0, 1.0});

    // Rankings: head 0 sees a,b,c,d,e; head 1 sees c,d,a,b,e.
    Matrix kh(5, 2, {50, 30,   // a
                     40, 5,    // b
                     30, 50,   // c
                     20, 40,   // d
                     10, 1});  // e
    Matrix kc(5, 8);
    Vector q{1.0, 0.0};

    auto result = cp_gsu_retrieve(q, kh, kc, params, 4);
    CHECK(result.indices == std::vector<Index>{0, 2, 1, 3});
    // Head 0 proposed a and b; head 1 proposed c and d.
    CHECK(result.provenance[0] == 0b01);
    CHECK(result.provenance[1] == 0b10);
    CHECK(result.provenance[2] == 0b01);
    CHECK(result.provenance[3] == 0b10);
}

TEST_CASE("single head reduces to topk on its scores") {
    attention::AttentionConfig cfg = tiny_config(1);
    attention::TwinParams params = attention::init_params(cfg, 2);
    Rng rng(3);
    Matrix kh(40, 2);
    fill_gaussian(kh, rng, 1.0);
    Matrix kc(40, 8);
    fill_gaussian(kc, rng, 1.0);
    Vector q{0.7, -0.2};

    auto result = cp_gsu_retrieve(q, kh, kc, params, 7);
    auto expected =
        topk_indices(result.per_head_scores[0].scores, 7);
    CHECK(result.indices == expected);
}

TEST_CASE("short sequences return everything ordered by head-1 score") {
    attention::AttentionConfig cfg = tiny_config(2);
    attention::TwinParams params = attention::init_params(cfg, 4);
    Rng rng(5);
    Matrix kh(6, 2);
    fill_gaussian(kh, rng, 1.0);
    Matrix kc(6, 8);
    Vector q{1.0, 1.0};

    auto result = cp_gsu_retrieve(q, kh, kc, params, 100);
    REQUIRE(result.indices.size() == 6);
    const auto& scores = result.per_head_scores[0].scores;
    for (Index i = 1; i < result.indices.size(); ++i) {
        CHECK(scores[result.indices[i - 1]] >= scores[result.indices[i]]);
    }

    Matrix empty_h(0, 2);
    Matrix empty_c(0, 8);
    CHECK_THROWS_AS(
        (void)cp_gsu_retrieve(q, empty_h, empty_c, params, 10),
        std::invalid_argument);
}

TEST_CASE("cached keys equal to fresh projections give the fresh result") {
    attention::AttentionConfig cfg = tiny_config(2);
    attention::TwinParams params = attention::init_params(cfg, 6);
    Rng rng(7);
    Matrix kh(300, 2);
    fill_gaussian(kh, rng, 1.0);
    Matrix kc(300, 8);
    fill_gaussian(kc, rng, 0.5);
    Vector q{0.3, 0.9};

    CachedKeys cache;
    for (const auto& head : params.heads) {
        cache.keys.push_back(attention::project_inherent(kh, head));
    }
    auto fresh = cp_gsu_retrieve(q, kh, kc, params, 50);
    auto cached = cp_gsu_retrieve(q, kh, kc, params, 50, &cache);
    CHECK(fresh.indices == cached.indices);
}

TEST_CASE("oracle equals the consistency-preserved retrieval exactly") {
    attention::AttentionConfig cfg = tiny_config(3);
    attention::TwinParams params = attention::init_params(cfg, 8);
    Rng rng(9);
    Matrix kh(500, 2);
    fill_gaussian(kh, rng, 1.0);
    Matrix kc(500, 8);
    fill_gaussian(kc, rng, 1.0);
    Vector q{0.5, -1.0};

    auto cp = cp_gsu_retrieve(q, kh, kc, params, 100);
    auto oracle = oracle_topk(q, kh, kc, params, 100);
    CHECK(cp.indices == oracle.indices);  // set and order
    CHECK(hit_rate(cp, oracle) == 1.0);
}

TEST_CASE("hard gsu recency and padding rules") {
    std::vector<feature::BehaviorRecord> behaviors;
    for (std::uint32_t i = 0; i < 10; ++i) {
        behaviors.push_back(behavior(i, i % 2 == 0 ? 3 : 5, 100 + i));
    }
    feature::TargetItem target{99, 0, 3, 0};

    // All even-category behaviors, most recent first: 8, 6, 4.
    auto matched = hard_gsu(target, behaviors, 3);
    CHECK(matched.indices == std::vector<Index>{8, 6, 4});

    // No category matches: fall back to the k most recent overall.
    feature::TargetItem off_target{99, 0, 7, 0};
    auto padded = hard_gsu(off_target, behaviors, 3);
    CHECK(padded.indices == std::vector<Index>{9, 8, 7});

    // Partial match: matches first, then most recent non-matches.
    auto mixed = hard_gsu(target, behaviors, 7);
    std::vector<Index> want{8, 6, 4, 2, 0, 9, 7};
    CHECK(mixed.indices == want);
}

TEST_CASE("soft gsu ranks by inner product with index tie-break") {
    PretrainedEmbeddings emb;
    emb.dim = 3;
    emb.vectors[100] = {1.0, 0.0, 0.0};  // target
    emb.vectors[0] = {0.0, 1.0, 0.0};    // orthogonal
    emb.vectors[1] = {0.0, 0.0, 1.0};    // orthogonal
    emb.vectors[2] = {0.0, 1.0, 1.0};    // orthogonal
    emb.vectors[3] = {1.0, 0.0, 0.0};    // identical to target

    std::vector<feature::BehaviorRecord> behaviors;
    for (std::uint32_t v = 0; v < 4; ++v) {
        behaviors.push_back(behavior(v, 0, v));
    }
    feature::TargetItem target{100, 0, 0, 0};

    auto ranked = soft_gsu(target, behaviors, emb, 4);
    CHECK(ranked.indices[0] == 3);  // identical embedding ranks first

    // All remaining scores tie at 0: lowest indices win.
    auto top2 = soft_gsu(target, behaviors, emb, 2);
    CHECK(top2.indices == std::vector<Index>{3, 0});

    feature::TargetItem missing{999, 0, 0, 0};
    CHECK_THROWS_AS((void)soft_gsu(missing, behaviors, emb, 2),
                    std::invalid_argument);
}

TEST_CASE("soft gsu equals the brute-force dot-product oracle") {
    Rng rng(10);
    std::normal_distribution<double> dist(0.0, 1.0);
    PretrainedEmbeddings emb;
    emb.dim = 8;
    std::vector<feature::BehaviorRecord> behaviors;
    for (std::uint32_t v = 0; v < 200; ++v) {
        Vector e(8);
        for (double& x : e) x = dist(rng);
        emb.vectors[v] = e;
        if (v < 199) behaviors.push_back(behavior(v, 0, v));
    }
    feature::TargetItem target{199, 0, 0, 0};

    Vector brute(behaviors.size(), 0.0);
    for (Index i = 0; i < behaviors.size(); ++i) {
        const auto& a = emb.vectors[behaviors[i].video_id];
        const auto& b = emb.vectors[199];
        for (Index d = 0; d < 8; ++d) brute[i] += a[d] * b[d];
    }
    auto expected = topk_indices(brute, 20);
    auto got = soft_gsu(target, behaviors, emb, 20);
    CHECK(got.indices == expected);
}

TEST_CASE("hit rate endpoints and monotonicity under nesting") {
    RetrievalResult oracle;
    oracle.indices = {1, 2, 3, 4};
    RetrievalResult same = oracle;
    CHECK(hit_rate(same, oracle) == 1.0);

    RetrievalResult disjoint;
    disjoint.indices = {10, 11};
    CHECK(hit_rate(disjoint, oracle) == 0.0);

    RetrievalResult small;
    small.indices = {1, 10};
    RetrievalResult bigger;
    bigger.indices = {1, 10, 2};
    CHECK(hit_rate(small, oracle) <= hit_rate(bigger, oracle));
}

TEST_CASE("hit-rate curve is monotone and saturates") {
    attention::AttentionConfig cfg = tiny_config(2);
    attention::TwinParams params = attention::init_params(cfg, 11);
    const Index length = 400;
    const Index oracle_k = 50;

    auto make_provider = [&](int count) {
        auto remaining = std::make_shared<int>(count);
        return [&, remaining](CurveInstance& out) {
            if (*remaining == 0) return false;
            --*remaining;
            Rng rng(derive_seed(12, static_cast<std::uint64_t>(*remaining)));
            out.q = {0.4, 1.1};
            out.k_inherent = Matrix(length, 2);
            fill_gaussian(out.k_inherent, rng, 1.0);
            out.k_cross = Matrix(length, 8);
            fill_gaussian(out.k_cross, rng, 0.5);
            out.behaviors.clear();
            for (std::uint32_t i = 0; i < length; ++i) {
                out.behaviors.push_back(behavior(i, i % 37, i));
            }
            out.target = feature::TargetItem{0, 0, 5, 0};
            return true;
        };
    };

    std::vector<Index> n_values{10, 25, 50, 100, 200, 400};

    auto twin_curve = hit_rate_curve(GsuKind::kTwinCp, n_values,
                                     make_provider(5), params, nullptr,
                                     oracle_k);
    for (Index i = 1; i < twin_curve.size(); ++i) {
        CHECK(twin_curve[i].mean_hit_rate >= twin_curve[i - 1].mean_hit_rate);
    }
    CHECK(twin_curve.back().mean_hit_rate == 1.0);  // n = L is a superset
    CHECK(twin_curve[2].mean_hit_rate == 1.0);      // consistency at n >= 50

    auto hard_curve = hit_rate_curve(GsuKind::kSimHard, n_values,
                                     make_provider(5), params, nullptr,
                                     oracle_k);
    for (Index i = 1; i < hard_curve.size(); ++i) {
        CHECK(hard_curve[i].mean_hit_rate >= hard_curve[i - 1].mean_hit_rate);
    }
    CHECK(hard_curve.back().mean_hit_rate == 1.0);

    auto oracle_curve = hit_rate_curve(GsuKind::kOracle, n_values,
                                       make_provider(3), params, nullptr,
                                       oracle_k);
    for (const auto& p : oracle_curve) {
        if (p.n >= oracle_k) CHECK(p.mean_hit_rate == 1.0);
    }

    CHECK_THROWS_AS(
        (void)hit_rate_curve(GsuKind::kTwinCp, std::vector<Index>{50, 10},
                             make_provider(1), params, nullptr, oracle_k),
        std::invalid_argument);
}

TEST_CASE("retrievers are deterministic") {
    attention::AttentionConfig cfg = tiny_config(2);
    attention::TwinParams params = attention::init_params(cfg, 13);
    Rng rng(14);
    Matrix kh(256, 2);
    fill_gaussian(kh, rng, 1.0);
    Matrix kc(256, 8);
    fill_gaussian(kc, rng, 1.0);
    Vector q{0.1, 0.2};

    auto first = cp_gsu_retrieve(q, kh, kc, params, 64);
    auto second = cp_gsu_retrieve(q, kh, kc, params, 64);
    CHECK(first.indices == second.indices);
    CHECK(first.provenance == second.provenance);
}
