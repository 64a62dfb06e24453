#include "twin/snapshot.hpp"

#include <bit>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "snapshot format is little-endian");

namespace twin::snapshot {

namespace {

template <typename T>
void write_raw(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
bool read_raw(std::istream& in, T& value) {
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    return in.gcount() == sizeof(T);
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (Index i = 0; i < m.rows; ++i) {
        for (Index j = 0; j < m.cols; ++j) out.at(j, i) = m.at(i, j);
    }
    return out;
}

}  // namespace

void write_block(std::ostream& out, std::string_view name, const Matrix& m) {
    write_raw(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_raw(out, static_cast<std::uint64_t>(m.rows));
    write_raw(out, static_cast<std::uint64_t>(m.cols));
    out.write(reinterpret_cast<const char*>(m.data.data()),
              static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (!out) throw std::runtime_error("snapshot: write failed");
}

bool read_block(std::istream& in, Block& out) {
    std::uint32_t name_len = 0;
    if (!read_raw(in, name_len)) {
        if (in.eof()) return false;
        throw std::runtime_error("snapshot: truncated header");
    }
    out.name.resize(name_len);
    in.read(out.name.data(), name_len);
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;
    if (in.gcount() != name_len || !read_raw(in, rows) || !read_raw(in, cols)) {
        throw std::runtime_error("snapshot: truncated block '" + out.name +
                                 "'");
    }
    out.values = Matrix(static_cast<Index>(rows), static_cast<Index>(cols));
    const auto bytes =
        static_cast<std::streamsize>(out.values.data.size() * sizeof(double));
    in.read(reinterpret_cast<char*>(out.values.data.data()), bytes);
    if (in.gcount() != bytes) {
        throw std::runtime_error("snapshot: truncated data in '" + out.name +
                                 "'");
    }
    return true;
}

void write_embeddings(const std::string& path,
                      const feature::EmbeddingSet& tables) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("snapshot: cannot open " + path);
    for (const auto& table : tables.tables) {
        // Blocks carry the logical dim x vocab dictionary.
        write_block(out, table.name, transpose(table.weights));
    }
}

feature::EmbeddingSet read_embeddings(const std::string& path,
                                      const feature::FeatureSchema& schema) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("snapshot: cannot open " + path);
    feature::EmbeddingSet set = feature::make_tables(schema);
    Block block;
    Index seen = 0;
    while (read_block(in, block)) {
        auto& table = set.table(block.name);
        const auto& spec = schema.spec(block.name);
        if (block.values.rows != spec.dim || block.values.cols != spec.vocab) {
            throw std::runtime_error("snapshot: table '" + block.name +
                                     "' shape does not match schema");
        }
        table.weights = transpose(block.values);
        ++seen;
    }
    if (seen != schema.features.size()) {
        throw std::runtime_error("snapshot: missing tables in " + path);
    }
    return set;
}

}  // namespace twin::snapshot
