#include "cvgl/index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cvgl/binio.hpp"
#include "cvgl/error.hpp"

namespace cvgl {

namespace {

constexpr std::uint32_t kDescriptorVersion = 1;

// Strict "ranks ahead of" relation: higher score, then lower id.
bool ranks_ahead(const ScoredId& a, const ScoredId& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
}

} // namespace

DescriptorStore::DescriptorStore(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw UsageError("descriptor store: dim must be positive");
}

void DescriptorStore::add(std::uint64_t id, std::span<const double> descriptor) {
    if (frozen_) throw UsageError("descriptor store is frozen");
    if (descriptor.size() != dim_) {
        throw ShapeError("descriptor store: descriptor of length " + std::to_string(descriptor.size()) +
                         " added to store of dim " + std::to_string(dim_));
    }
    if (positions_.contains(id)) throw DataError("descriptor store: duplicate id " + std::to_string(id));
    const double norm = l2_norm(descriptor);
    if (!(std::abs(norm - 1.0) <= 1e-4)) {
        throw NumericError("descriptor store: id " + std::to_string(id) + " has norm " +
                           std::to_string(norm) + ", expected unit length");
    }
    positions_.emplace(id, ids_.size());
    ids_.push_back(id);
    data_.insert(data_.end(), descriptor.begin(), descriptor.end());
}

std::optional<std::size_t> DescriptorStore::position(std::uint64_t id) const {
    const auto it = positions_.find(id);
    if (it == positions_.end()) return std::nullopt;
    return it->second;
}

Matrix DescriptorStore::matrix() const { return Matrix(size(), dim_, data_); }

RankedList DescriptorStore::search(std::span<const double> query, std::size_t k,
                                   std::uint64_t query_id) const {
    if (ids_.empty()) throw UsageError("search on an empty descriptor store");
    if (k < 1 || k > ids_.size()) {
        throw UsageError("search: k=" + std::to_string(k) + " outside [1, " + std::to_string(ids_.size()) + "]");
    }
    if (query.size() != dim_) {
        throw ShapeError("search: query length " + std::to_string(query.size()) + " vs store dim " +
                         std::to_string(dim_));
    }
    RankedList out;
    out.query_id = query_id;
    auto& heap = out.entries;
    heap.reserve(k);
    // Max-heap on "worst first" so heap.front() is the weakest kept entry.
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        const ScoredId cand{ids_[i], dot(query, row(i))};
        if (heap.size() < k) {
            heap.push_back(cand);
            std::push_heap(heap.begin(), heap.end(), ranks_ahead);
        } else if (ranks_ahead(cand, heap.front())) {
            std::pop_heap(heap.begin(), heap.end(), ranks_ahead);
            heap.back() = cand;
            std::push_heap(heap.begin(), heap.end(), ranks_ahead);
        }
    }
    std::sort_heap(heap.begin(), heap.end(), ranks_ahead);
    return out;
}

std::vector<RankedList> DescriptorStore::search_batch(const Matrix& queries,
                                                      std::span<const std::uint64_t> query_ids,
                                                      std::size_t k, int threads) const {
    if (!query_ids.empty() && query_ids.size() != queries.rows()) {
        throw ShapeError("search_batch: " + std::to_string(query_ids.size()) + " ids for " +
                         std::to_string(queries.rows()) + " queries");
    }
    std::vector<RankedList> out(queries.rows());
    parallel_for(queries.rows(), threads, [&](std::size_t i) {
        out[i] = search(queries.row(i), k, query_ids.empty() ? i : query_ids[i]);
    });
    return out;
}

void save_descriptors(const std::filesystem::path& path, const DescriptorStore& store) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    binio::put_magic(os, "CVDS");
    binio::put_u32(os, kDescriptorVersion);
    binio::put_u32(os, static_cast<std::uint32_t>(store.dim()));
    binio::put_u64(os, store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        binio::put_u64(os, store.ids()[i]);
        for (double v : store.row(i)) binio::put_f32(os, static_cast<float>(v));
    }
    if (!os) throw DataError("write failed for " + path.string());
}

DescriptorStore load_descriptors(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open descriptor file " + path.string());
    const std::string what = "descriptor file " + path.string();
    binio::expect_magic(is, "CVDS", what);
    const std::uint32_t version = binio::get_u32(is, what);
    if (version != kDescriptorVersion) throw DataError("unsupported descriptor file version " + std::to_string(version));
    const std::uint32_t dim = binio::get_u32(is, what);
    const std::uint64_t count = binio::get_u64(is, what);
    if (dim == 0 || dim > (1u << 20)) throw DataError("implausible descriptor dim in " + what);
    DescriptorStore store(dim);
    std::vector<double> row(dim);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t id = binio::get_u64(is, what);
        for (double& v : row) v = binio::get_f32(is, what);
        store.add(id, l2_normalize(row));
    }
    return store;
}

} // namespace cvgl
