#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "cvgl/numerics.hpp"

namespace cvgl {

struct ScoredId {
    std::uint64_t id = 0;
    double score = 0.0;
    friend bool operator==(const ScoredId&, const ScoredId&) = default;
};

// Entries ordered by descending score, ties by ascending id.
struct RankedList {
    std::uint64_t query_id = 0;
    std::vector<ScoredId> entries;
    friend bool operator==(const RankedList&, const RankedList&) = default;
};

// Exact inner-product store of unit descriptors. Single writer until
// freeze(); concurrent searches are safe afterwards.
class DescriptorStore {
public:
    explicit DescriptorStore(std::size_t dim);

    void add(std::uint64_t id, std::span<const double> descriptor);
    void freeze() noexcept { frozen_ = true; }
    bool frozen() const noexcept { return frozen_; }

    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return ids_.size(); }
    std::span<const std::uint64_t> ids() const noexcept { return ids_; }
    std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * dim_, dim_}; }
    std::optional<std::size_t> position(std::uint64_t id) const;
    // Copy of all rows as a count x dim matrix.
    Matrix matrix() const;

    RankedList search(std::span<const double> query, std::size_t k, std::uint64_t query_id = 0) const;
    // queries is count x dim; query_ids (may be empty) labels each result.
    std::vector<RankedList> search_batch(const Matrix& queries, std::span<const std::uint64_t> query_ids,
                                         std::size_t k, int threads = 1) const;

private:
    std::size_t dim_;
    bool frozen_ = false;
    std::vector<std::uint64_t> ids_;
    std::vector<double> data_;
    std::unordered_map<std::uint64_t, std::size_t> positions_;
};

// CVDS file: magic, version, dim, count, then (u64 id, dim x f32) per row.
// Rows are re-normalized on load.
void save_descriptors(const std::filesystem::path& path, const DescriptorStore& store);
DescriptorStore load_descriptors(const std::filesystem::path& path);

} // namespace cvgl
