#include "twin/features.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>
#include <string>

namespace twin::feature {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

std::vector<Index> bits_of(std::uint8_t mask) {
    std::vector<Index> out;
    for (Index b = 0; b < 8; ++b) {
        if (mask & (1u << b)) out.push_back(b);
    }
    return out;
}

void check_value(Index value, const FeatureSpec& spec) {
    if (value >= spec.vocab) {
        fail("feature '" + spec.name + "': value " + std::to_string(value) +
             " out of vocabulary (" + std::to_string(spec.vocab) + ")");
    }
}

// Adds the embeddings of `values` into out[offset, offset+dim).
void embed_into(std::span<const Index> values, const FeatureSpec& spec,
                const EmbeddingTable& table, std::span<double> out) {
    for (Index v : values) {
        check_value(v, spec);
        auto emb = table.embedding_of(v);
        for (Index d = 0; d < spec.dim; ++d) out[d] += emb[d];
    }
}

}  // namespace

Index FeatureSchema::inherent_dim() const {
    Index h = 0;
    for (const auto& f : features) {
        if (f.kind == FeatureKind::kInherent) h += f.dim;
    }
    return h;
}

Index FeatureSchema::cross_dim() const {
    Index c = 0;
    for (const auto& f : features) {
        if (f.kind == FeatureKind::kCross) c += f.dim;
    }
    return c;
}

Index FeatureSchema::cross_count() const {
    Index j = 0;
    for (const auto& f : features) {
        if (f.kind == FeatureKind::kCross) ++j;
    }
    return j;
}

Index FeatureSchema::inherent_count() const {
    return features.size() - cross_count();
}

const FeatureSpec& FeatureSchema::spec(std::string_view name) const {
    for (const auto& f : features) {
        if (f.name == name) return f;
    }
    fail("schema: unknown feature '" + std::string(name) + "'");
}

std::vector<const FeatureSpec*> FeatureSchema::inherent_specs() const {
    std::vector<const FeatureSpec*> out;
    for (const auto& f : features) {
        if (f.kind == FeatureKind::kInherent) out.push_back(&f);
    }
    return out;
}

std::vector<const FeatureSpec*> FeatureSchema::cross_specs() const {
    std::vector<const FeatureSpec*> out;
    for (const auto& f : features) {
        if (f.kind == FeatureKind::kCross) out.push_back(&f);
    }
    return out;
}

void FeatureSchema::validate() const {
    if (features.size() !=
        kInherentFeatureNames.size() + kCrossFeatureNames.size()) {
        fail("schema: expected " +
             std::to_string(kInherentFeatureNames.size() +
                            kCrossFeatureNames.size()) +
             " features, got " + std::to_string(features.size()));
    }
    for (Index i = 0; i < kInherentFeatureNames.size(); ++i) {
        const auto& f = features[i];
        if (f.name != kInherentFeatureNames[i]) {
            fail("schema: slot " + std::to_string(i) + " must be '" +
                 kInherentFeatureNames[i] + "', got '" + f.name + "'");
        }
        if (f.kind != FeatureKind::kInherent) {
            fail("schema: '" + f.name + "' must be inherent");
        }
    }
    for (Index i = 0; i < kCrossFeatureNames.size(); ++i) {
        const auto& f = features[kInherentFeatureNames.size() + i];
        if (f.name != kCrossFeatureNames[i]) {
            fail("schema: cross slot " + std::to_string(i) + " must be '" +
                 kCrossFeatureNames[i] + "', got '" + f.name + "'");
        }
        if (f.kind != FeatureKind::kCross) {
            fail("schema: '" + f.name + "' must be cross");
        }
        if (f.dim != 8) {
            fail("schema: cross feature '" + f.name + "' must be 8-wide");
        }
    }
    for (const auto& f : features) {
        if (f.vocab == 0 || f.dim == 0) {
            fail("schema: feature '" + f.name + "' needs vocab and dim > 0");
        }
        if (f.encoding == Encoding::kMultiHot && f.vocab > 8) {
            fail("schema: multi-hot feature '" + f.name +
                 "' vocabulary exceeds the 8-bit flag mask");
        }
    }
}

FeatureSchema default_schema(const SchemaVocabs& v) {
    auto one = [](std::string name, FeatureKind kind, Index vocab, Index dim) {
        return FeatureSpec{std::move(name), kind, Encoding::kOneHot, vocab,
                           dim};
    };
    FeatureSchema s;
    s.features = {
        one("video_id", FeatureKind::kInherent, v.n_videos, v.id_dim),
        one("author_id", FeatureKind::kInherent, v.n_authors, v.id_dim),
        one("category", FeatureKind::kInherent, v.n_categories, v.small_dim),
        one("duration_bucket", FeatureKind::kInherent, v.duration_buckets,
            v.small_dim),
        one("timestamp_bucket", FeatureKind::kCross, v.timestamp_buckets, 8),
        one("playtime_bucket", FeatureKind::kCross, v.playtime_buckets, 8),
        one("page_position", FeatureKind::kCross, v.position_buckets, 8),
        FeatureSpec{"interaction_flags", FeatureKind::kCross,
                    Encoding::kMultiHot, v.interaction_vocab, 8},
        one("recency_bucket", FeatureKind::kCross, v.recency_buckets, 8),
    };
    s.validate();
    return s;
}

const EmbeddingTable& EmbeddingSet::table(std::string_view name) const {
    for (const auto& t : tables) {
        if (t.name == name) return t;
    }
    fail("embedding set: unknown table '" + std::string(name) + "'");
}

EmbeddingTable& EmbeddingSet::table(std::string_view name) {
    for (auto& t : tables) {
        if (t.name == name) return t;
    }
    fail("embedding set: unknown table '" + std::string(name) + "'");
}

EmbeddingSet make_tables(const FeatureSchema& schema) {
    EmbeddingSet set;
    for (const auto& f : schema.features) {
        set.tables.push_back({f.name, Matrix(f.vocab, f.dim)});
    }
    return set;
}

std::vector<Index> inherent_values(const BehaviorRecord& rec, Index slot) {
    switch (slot) {
        case 0: return {rec.video_id};
        case 1: return {rec.author_id};
        case 2: return {rec.category};
        case 3: return {rec.duration_bucket};
        default: fail("inherent slot out of range");
    }
}

std::vector<Index> cross_values(const BehaviorRecord& rec, Index slot) {
    switch (slot) {
        case 0: return {rec.timestamp_bucket};
        case 1: return {rec.playtime_bucket};
        case 2: return {rec.page_position};
        case 3: return bits_of(rec.interaction_flags);
        case 4: return {rec.recency_bucket};
        default: fail("cross slot out of range");
    }
}

std::vector<Index> target_values(const TargetItem& item, Index slot) {
    switch (slot) {
        case 0: return {item.video_id};
        case 1: return {item.author_id};
        case 2: return {item.category};
        case 3: return {item.duration_bucket};
        default: fail("target slot out of range");
    }
}

std::vector<double> encode_hot(std::span<const Index> values,
                               const FeatureSpec& spec) {
    if (spec.encoding == Encoding::kOneHot && values.size() != 1) {
        fail("feature '" + spec.name + "': one-hot needs exactly one value");
    }
    std::vector<double> hot(spec.vocab, 0.0);
    for (Index v : values) {
        check_value(v, spec);
        if (hot[v] != 0.0) {
            fail("feature '" + spec.name + "': repeated multi-hot value");
        }
        hot[v] = 1.0;
    }
    return hot;
}

Vector embed(std::span<const double> hot, const EmbeddingTable& table) {
    if (hot.size() != table.weights.rows) {
        fail("embed: hot length " + std::to_string(hot.size()) +
             " != vocabulary " + std::to_string(table.weights.rows));
    }
    Vector out(table.weights.cols, 0.0);
    for (Index v = 0; v < hot.size(); ++v) {
        if (hot[v] == 0.0) continue;
        auto emb = table.embedding_of(v);
        for (Index d = 0; d < out.size(); ++d) out[d] += hot[v] * emb[d];
    }
    return out;
}

std::pair<Matrix, Matrix> assemble_K(std::span<const BehaviorRecord> behaviors,
                                     const FeatureSchema& schema,
                                     const EmbeddingSet& tables) {
    if (behaviors.empty()) fail("assemble_K: empty behavior sequence");
    const Index h = schema.inherent_dim();
    const Index c = schema.cross_dim();
    const Index n_inherent = schema.inherent_count();
    Matrix kh(behaviors.size(), h);
    Matrix kc(behaviors.size(), c);
    for (Index i = 0; i < behaviors.size(); ++i) {
        Index off = 0;
        for (Index slot = 0; slot < n_inherent; ++slot) {
            const auto& spec = schema.features[slot];
            auto values = inherent_values(behaviors[i], slot);
            embed_into(values, spec, tables.tables[slot],
                       kh.row(i).subspan(off, spec.dim));
            off += spec.dim;
        }
        off = 0;
        for (Index slot = 0; slot < schema.cross_count(); ++slot) {
            const auto& spec = schema.features[n_inherent + slot];
            auto values = cross_values(behaviors[i], slot);
            embed_into(values, spec, tables.tables[n_inherent + slot],
                       kc.row(i).subspan(off, spec.dim));
            off += spec.dim;
        }
    }
    return {std::move(kh), std::move(kc)};
}

Matrix assemble_cross(std::span<const BehaviorRecord> behaviors,
                      const FeatureSchema& schema,
                      const EmbeddingSet& tables) {
    if (behaviors.empty()) fail("assemble_cross: empty behavior sequence");
    const Index n_inherent = schema.inherent_count();
    Matrix kc(behaviors.size(), schema.cross_dim());
    for (Index i = 0; i < behaviors.size(); ++i) {
        Index off = 0;
        for (Index slot = 0; slot < schema.cross_count(); ++slot) {
            const auto& spec = schema.features[n_inherent + slot];
            auto values = cross_values(behaviors[i], slot);
            embed_into(values, spec, tables.tables[n_inherent + slot],
                       kc.row(i).subspan(off, spec.dim));
            off += spec.dim;
        }
    }
    return kc;
}

Vector embed_target(const TargetItem& target, const FeatureSchema& schema,
                    const EmbeddingSet& tables) {
    Vector q(schema.inherent_dim(), 0.0);
    Index off = 0;
    for (Index slot = 0; slot < schema.inherent_count(); ++slot) {
        const auto& spec = schema.features[slot];
        auto values = target_values(target, slot);
        embed_into(values, spec, tables.tables[slot],
                   std::span<double>(q).subspan(off, spec.dim));
        off += spec.dim;
    }
    return q;
}

}  // namespace twin::feature
