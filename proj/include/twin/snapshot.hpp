#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "twin/features.hpp"
#include "twin/numerics.hpp"

// Binary snapshot format shared by embedding tables and attention
// parameters. A file is a sequence of named blocks:
//
//   u32  name length        (little-endian)
//   ...  name bytes
//   u64  rows, u64 cols     (little-endian)
//   f64  rows*cols values, row-major, little-endian
//
// Embedding blocks store the dim x vocab dictionary (one column per
// vocabulary entry). Parameter snapshots pair the block file with a JSON
// manifest listing shapes and a monotonically increasing version.

namespace twin::snapshot {

struct Block {
    std::string name;
    Matrix values;
};

void write_block(std::ostream& out, std::string_view name, const Matrix& m);

// Reads the next block; returns false on clean end-of-file, throws
// std::runtime_error on a truncated or malformed block.
bool read_block(std::istream& in, Block& out);

// One block per table, named after the feature, shaped dim x vocab.
void write_embeddings(const std::string& path,
                      const feature::EmbeddingSet& tables);

// Tables must already be shaped per `schema`; throws on any mismatch.
feature::EmbeddingSet read_embeddings(const std::string& path,
                                      const feature::FeatureSchema& schema);

}  // namespace twin::snapshot
