#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "twin/numerics.hpp"

// Feature schema, hot encoding, embedding lookup and assembly of the split
// behavior matrix K = [K_h  K_c]. The feature list is fixed (it is what
// BehaviorRecord carries); vocabulary sizes, dimensions and encodings come
// from the schema configuration.

namespace twin::feature {

enum class FeatureKind { kInherent, kCross };
enum class Encoding { kOneHot, kMultiHot };

struct FeatureSpec {
    std::string name;
    FeatureKind kind = FeatureKind::kInherent;
    Encoding encoding = Encoding::kOneHot;
    Index vocab = 0;  // v_A
    Index dim = 0;    // d_A
};

// Schema slot order defines the column blocks of K_h and K_c.
inline constexpr std::array<const char*, 4> kInherentFeatureNames = {
    "video_id", "author_id", "category", "duration_bucket"};
inline constexpr std::array<const char*, 5> kCrossFeatureNames = {
    "timestamp_bucket", "playtime_bucket", "page_position",
    "interaction_flags", "recency_bucket"};

struct FeatureSchema {
    std::vector<FeatureSpec> features;  // inherent slots first, then cross

    Index inherent_dim() const;  // sum of inherent dims
    Index cross_dim() const;     // sum of cross dims (8 per cross feature)
    Index cross_count() const;
    Index inherent_count() const;

    const FeatureSpec& spec(std::string_view name) const;
    std::vector<const FeatureSpec*> inherent_specs() const;
    std::vector<const FeatureSpec*> cross_specs() const;

    // Throws std::invalid_argument when the slot list, vocabulary sizes or
    // dimensions are inconsistent (cross features must be 8-wide).
    void validate() const;
};

struct SchemaVocabs {
    Index n_videos = 0;
    Index n_authors = 0;
    Index n_categories = 37;
    Index duration_buckets = 16;
    Index timestamp_buckets = 24;
    Index playtime_buckets = 10;
    Index position_buckets = 8;
    Index interaction_vocab = 6;  // multi-hot bitmask, at most 8 flags
    Index recency_buckets = 12;
    // Embedding widths; id features default to 64, the small inherent
    // features to 8. Cross features are always 8-wide.
    Index id_dim = 64;
    Index small_dim = 8;
};

// Default schema: id-class features at id_dim, small inherent features at
// small_dim, cross features at 8.
FeatureSchema default_schema(const SchemaVocabs& vocabs);

struct EmbeddingTable {
    std::string name;
    // Stored with one row per vocabulary entry. Logically this is the
    // dim x vocab dictionary whose column v embeds value v.
    Matrix weights;  // vocab x dim

    std::span<const double> embedding_of(Index value) const {
        return weights.row(value);
    }
    std::span<double> embedding_of(Index value) {
        return weights.row(value);
    }
};

struct EmbeddingSet {
    std::vector<EmbeddingTable> tables;  // schema slot order

    const EmbeddingTable& table(std::string_view name) const;
    EmbeddingTable& table(std::string_view name);
};

// Zero-initialized tables shaped per schema.
EmbeddingSet make_tables(const FeatureSchema& schema);

struct BehaviorRecord {
    std::uint32_t video_id = 0;
    std::uint32_t author_id = 0;
    std::uint16_t category = 0;
    std::uint16_t duration_bucket = 0;
    std::uint16_t timestamp_bucket = 0;
    std::uint16_t playtime_bucket = 0;
    std::uint16_t page_position = 0;
    std::uint16_t recency_bucket = 0;
    std::uint8_t interaction_flags = 0;  // bitmask over the flag vocabulary
    std::int64_t event_time = 0;         // virtual minutes
};

struct TargetItem {
    std::uint32_t video_id = 0;
    std::uint32_t author_id = 0;
    std::uint16_t category = 0;
    std::uint16_t duration_bucket = 0;
};

// Value(s) of a schema slot for a record. One-hot slots return a single
// index; the multi-hot flags slot returns the set bits in ascending order.
std::vector<Index> inherent_values(const BehaviorRecord& rec, Index slot);
std::vector<Index> cross_values(const BehaviorRecord& rec, Index slot);
std::vector<Index> target_values(const TargetItem& item, Index slot);

// One-hot / multi-hot code of length spec.vocab. Throws on out-of-vocab
// values or a repeated multi-hot value.
std::vector<double> encode_hot(std::span<const Index> values,
                               const FeatureSpec& spec);

// x_emb = E x_hot: the selected column for a one-hot code, the sum of
// selected columns for a multi-hot code. Throws on length mismatch.
Vector embed(std::span<const double> hot, const EmbeddingTable& table);

// Row i of the outputs is the concatenated inherent / cross embeddings of
// behavior i in schema order. Throws on an empty sequence or out-of-vocab
// values.
std::pair<Matrix, Matrix> assemble_K(std::span<const BehaviorRecord> behaviors,
                                     const FeatureSchema& schema,
                                     const EmbeddingSet& tables);

// The K_c block alone, for callers that source inherent keys elsewhere.
Matrix assemble_cross(std::span<const BehaviorRecord> behaviors,
                      const FeatureSchema& schema,
                      const EmbeddingSet& tables);

// Inherent-feature embedding of one item, length inherent_dim().
Vector embed_target(const TargetItem& target, const FeatureSchema& schema,
                    const EmbeddingSet& tables);

}  // namespace twin::feature
