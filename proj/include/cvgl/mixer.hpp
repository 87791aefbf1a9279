#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cvgl/numerics.hpp"

namespace cvgl {

// Shape of the aggregation head. num_maps equals the backbone channel count
// and map_height * map_width equals the backbone token count.
struct MixerConfig {
    std::size_t num_maps = 768;   // s
    std::size_t map_height = 16;  // h
    std::size_t map_width = 16;   // w
    std::size_t num_blocks = 2;   // L
    std::size_t hidden_dim = 0;   // 0 selects n
    std::size_t out_depth = 64;   // d
    std::size_t out_rows = 4;     // r

    std::size_t n() const noexcept { return map_height * map_width; }
    std::size_t hidden() const noexcept { return hidden_dim == 0 ? n() : hidden_dim; }
    std::size_t descriptor_dim() const noexcept { return out_depth * out_rows; }

    void validate() const;
    // hidden_dim 0 and hidden_dim n describe the same head.
    friend bool operator==(const MixerConfig& a, const MixerConfig& b) {
        return a.num_maps == b.num_maps && a.map_height == b.map_height &&
               a.map_width == b.map_width && a.num_blocks == b.num_blocks &&
               a.hidden() == b.hidden() && a.out_depth == b.out_depth && a.out_rows == b.out_rows;
    }
};

std::string to_string(const MixerConfig& cfg);

struct MixerBlock {
    Matrix w1;  // hidden x n
    Matrix b1;  // 1 x hidden
    Matrix w2;  // n x hidden
    Matrix b2;  // 1 x n
    friend bool operator==(const MixerBlock&, const MixerBlock&) = default;
};

struct MixerParams {
    std::vector<MixerBlock> blocks;
    Matrix depth_proj;  // W_d, d x s
    Matrix row_proj;    // W_r, r x n

    static MixerParams zeros(const MixerConfig& cfg);
    // Uniform in +-sqrt(1/fan_in) per tensor.
    static MixerParams init(const MixerConfig& cfg, std::uint64_t seed);

    // Flat views in a fixed order: block0.W1, block0.b1, block0.W2, block0.b2, ...,
    // W_d, W_r. Names and pointers line up index for index.
    std::vector<Matrix*> tensors();
    std::vector<const Matrix*> tensors() const;
    std::vector<std::string> tensor_names() const;

    void check_shapes(const MixerConfig& cfg) const;
    bool all_finite() const;
    friend bool operator==(const MixerParams&, const MixerParams&) = default;
};

using Descriptor = std::vector<double>;

// tokens (N x D, token t at grid row t / w, col t % w) -> maps (s x n);
// map c, flat index t holds channel c of token t.
Matrix feature_transform(const Matrix& tokens, const MixerConfig& cfg);
Matrix inverse_feature_transform(const Matrix& maps, const MixerConfig& cfg);

// Every row x of maps becomes W2 * relu(W1 * x + b1) + b2 + x.
Matrix mixer_block_forward(const Matrix& maps, const MixerBlock& block);

// Activations kept by the forward pass for backpropagation.
struct MixerCache {
    bool valid = false;
    std::vector<Matrix> block_inputs;  // input of each block, s x n
    std::vector<Matrix> hidden_pre;    // W1 x + b1 per block, s x hidden
    Matrix mixed;                      // Z, s x n
    Matrix depth;                      // Z' = W_d Z, d x n
    Matrix output;                     // O = Z' W_r^T, d x r
    double output_norm = 0.0;
    Descriptor descriptor;             // flatten(O) / |O|
};

Descriptor mixer_forward(const Matrix& tokens, const MixerParams& params, const MixerConfig& cfg);
MixerCache mixer_forward_cached(const Matrix& tokens, const MixerParams& params,
                                const MixerConfig& cfg);

struct MixerGradients {
    MixerParams params;
    Matrix tokens;  // N x D
};

// Gradients of upstream . descriptor with respect to every parameter and the
// input tokens, through the exact normalization Jacobian.
MixerGradients mixer_backward(const MixerCache& cache, const MixerParams& params,
                              const MixerConfig& cfg, std::span<const double> upstream);

// CVMX checkpoint section: magic, version, config, named tensors.
void write_mixer(std::ostream& os, const MixerConfig& cfg, const MixerParams& params);
void read_mixer(std::istream& is, MixerConfig& cfg, MixerParams& params);
void save_mixer(const std::filesystem::path& path, const MixerConfig& cfg, const MixerParams& params);
void load_mixer(const std::filesystem::path& path, MixerConfig& cfg, MixerParams& params);

// Named tensor encoding shared with the trainer checkpoint.
void write_tensor(std::ostream& os, const std::string& name, const Matrix& m);
Matrix read_tensor(std::istream& is, const std::string& expected_name);

} // namespace cvgl
