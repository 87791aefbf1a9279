#include "cvgl/mixer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "cvgl/binio.hpp"
#include "cvgl/error.hpp"
#include "cvgl/rng.hpp"

namespace cvgl {

namespace {

constexpr std::uint32_t kMixerVersion = 1;

void add_row_bias(Matrix& m, const Matrix& bias) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto row = m.row(i);
        auto b = bias.row(0);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    }
}

Matrix column_sums(const Matrix& m) {
    Matrix out(1, m.cols());
    auto o = out.row(0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto row = m.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) o[j] += row[j];
    }
    return out;
}

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
    if (m.rows() != rows || m.cols() != cols) {
        throw ShapeError(name + " has shape " + m.shape_str() + ", expected " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix uniform_tensor(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.uniform(-bound, bound);
    return m;
}

} // namespace

void MixerConfig::validate() const {
    if (num_maps == 0 || map_height == 0 || map_width == 0) {
        throw UsageError("mixer: num_maps, map_height and map_width must be positive");
    }
    if (num_blocks < 1) throw UsageError("mixer: num_blocks must be at least 1");
    if (out_depth < 1 || out_rows < 1) throw UsageError("mixer: out_depth and out_rows must be positive");
    if (out_rows > n()) {
        throw UsageError("mixer: out_rows (" + std::to_string(out_rows) + ") exceeds h*w (" +
                         std::to_string(n()) + ")");
    }
}

std::string to_string(const MixerConfig& cfg) {
    std::ostringstream os;
    os << "s=" << cfg.num_maps << " h=" << cfg.map_height << " w=" << cfg.map_width
       << " L=" << cfg.num_blocks << " hidden=" << cfg.hidden() << " d=" << cfg.out_depth
       << " r=" << cfg.out_rows;
    return os.str();
}

MixerParams MixerParams::zeros(const MixerConfig& cfg) {
    cfg.validate();
    const std::size_t n = cfg.n();
    const std::size_t hid = cfg.hidden();
    MixerParams p;
    p.blocks.resize(cfg.num_blocks);
    for (auto& b : p.blocks) {
        b.w1 = Matrix(hid, n);
        b.b1 = Matrix(1, hid);
        b.w2 = Matrix(n, hid);
        b.b2 = Matrix(1, n);
    }
    p.depth_proj = Matrix(cfg.out_depth, cfg.num_maps);
    p.row_proj = Matrix(cfg.out_rows, n);
    return p;
}

MixerParams MixerParams::init(const MixerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t n = cfg.n();
    const std::size_t hid = cfg.hidden();
    MixerParams p;
    p.blocks.resize(cfg.num_blocks);
    for (auto& b : p.blocks) {
        b.w1 = uniform_tensor(hid, n, n, rng);
        b.b1 = uniform_tensor(1, hid, n, rng);
        b.w2 = uniform_tensor(n, hid, hid, rng);
        b.b2 = uniform_tensor(1, n, hid, rng);
    }
    p.depth_proj = uniform_tensor(cfg.out_depth, cfg.num_maps, cfg.num_maps, rng);
    p.row_proj = uniform_tensor(cfg.out_rows, n, n, rng);
    return p;
}

std::vector<Matrix*> MixerParams::tensors() {
    std::vector<Matrix*> out;
    for (auto& b : blocks) {
        out.push_back(&b.w1);
        out.push_back(&b.b1);
        out.push_back(&b.w2);
        out.push_back(&b.b2);
    }
    out.push_back(&depth_proj);
    out.push_back(&row_proj);
    return out;
}

std::vector<const Matrix*> MixerParams::tensors() const {
    auto mut = const_cast<MixerParams*>(this)->tensors();
    return {mut.begin(), mut.end()};
}

std::vector<std::string> MixerParams::tensor_names() const {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const std::string prefix = "block" + std::to_string(l) + ".";
        for (const char* t : {"W1", "b1", "W2", "b2"}) out.push_back(prefix + t);
    }
    out.emplace_back("W_d");
    out.emplace_back("W_r");
    return out;
}

void MixerParams::check_shapes(const MixerConfig& cfg) const {
    if (blocks.size() != cfg.num_blocks) {
        throw ShapeError("mixer params have " + std::to_string(blocks.size()) + " blocks, config has " +
                         std::to_string(cfg.num_blocks));
    }
    const std::size_t n = cfg.n();
    const std::size_t hid = cfg.hidden();
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const std::string prefix = "block" + std::to_string(l) + ".";
        expect_shape(blocks[l].w1, hid, n, prefix + "W1");
        expect_shape(blocks[l].b1, 1, hid, prefix + "b1");
        expect_shape(blocks[l].w2, n, hid, prefix + "W2");
        expect_shape(blocks[l].b2, 1, n, prefix + "b2");
    }
    expect_shape(depth_proj, cfg.out_depth, cfg.num_maps, "W_d");
    expect_shape(row_proj, cfg.out_rows, n, "W_r");
}

bool MixerParams::all_finite() const {
    for (const Matrix* t : tensors())
        if (!t->all_finite()) return false;
    return true;
}

Matrix feature_transform(const Matrix& tokens, const MixerConfig& cfg) {
    if (tokens.rows() != cfg.n()) {
        throw ShapeError("feature_transform: " + std::to_string(tokens.rows()) +
                         " tokens but map grid " + std::to_string(cfg.map_height) + "x" +
                         std::to_string(cfg.map_width) + " needs " + std::to_string(cfg.n()));
    }
    if (tokens.cols() != cfg.num_maps) {
        throw ShapeError("feature_transform: token dim " + std::to_string(tokens.cols()) +
                         " but num_maps is " + std::to_string(cfg.num_maps));
    }
    return transpose(tokens);
}

Matrix inverse_feature_transform(const Matrix& maps, const MixerConfig& cfg) {
    if (maps.rows() != cfg.num_maps || maps.cols() != cfg.n()) {
        throw ShapeError("inverse_feature_transform: maps " + maps.shape_str() + " vs config " +
                         std::to_string(cfg.num_maps) + "x" + std::to_string(cfg.n()));
    }
    return transpose(maps);
}

Matrix mixer_block_forward(const Matrix& maps, const MixerBlock& block) {
    const std::size_t n = maps.cols();
    const std::size_t hid = block.w1.rows();
    expect_shape(block.w1, hid, n, "W1");
    expect_shape(block.b1, 1, hid, "b1");
    expect_shape(block.w2, n, hid, "W2");
    expect_shape(block.b2, 1, n, "b2");
    Matrix hidden = matmul_nt(maps, block.w1);
    add_row_bias(hidden, block.b1);
    Matrix out = matmul_nt(relu(hidden), block.w2);
    add_row_bias(out, block.b2);
    auto o = out.data();
    auto x = maps.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += x[i];
    return out;
}

MixerCache mixer_forward_cached(const Matrix& tokens, const MixerParams& params,
                                const MixerConfig& cfg) {
    cfg.validate();
    params.check_shapes(cfg);
    MixerCache cache;
    Matrix x = feature_transform(tokens, cfg);
    cache.block_inputs.reserve(cfg.num_blocks);
    cache.hidden_pre.reserve(cfg.num_blocks);
    for (const auto& block : params.blocks) {
        Matrix hidden = matmul_nt(x, block.w1);
        add_row_bias(hidden, block.b1);
        Matrix y = matmul_nt(relu(hidden), block.w2);
        add_row_bias(y, block.b2);
        auto yd = y.data();
        auto xd = x.data();
        for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += xd[i];
        cache.block_inputs.push_back(std::move(x));
        cache.hidden_pre.push_back(std::move(hidden));
        x = std::move(y);
    }
    cache.mixed = std::move(x);
    cache.depth = matmul(params.depth_proj, cache.mixed);
    cache.output = matmul_nt(cache.depth, params.row_proj);
    cache.output_norm = l2_norm(cache.output.data());
    cache.descriptor = l2_normalize(cache.output.data());
    cache.valid = true;
    return cache;
}

Descriptor mixer_forward(const Matrix& tokens, const MixerParams& params, const MixerConfig& cfg) {
    return mixer_forward_cached(tokens, params, cfg).descriptor;
}

MixerGradients mixer_backward(const MixerCache& cache, const MixerParams& params,
                              const MixerConfig& cfg, std::span<const double> upstream) {
    if (!cache.valid) throw UsageError("mixer_backward: no forward cache");
    params.check_shapes(cfg);
    if (upstream.size() != cfg.descriptor_dim()) {
        throw ShapeError("mixer_backward: upstream gradient length " + std::to_string(upstream.size()) +
                         ", descriptor length " + std::to_string(cfg.descriptor_dim()));
    }
    MixerGradients g;
    g.params.blocks.resize(params.blocks.size());

    // d(v)/d(o) = (I - v v^T) / |o|
    const auto& v = cache.descriptor;
    const double vg = dot(v, upstream);
    Matrix grad_out(cfg.out_depth, cfg.out_rows);
    auto go = grad_out.data();
    for (std::size_t i = 0; i < go.size(); ++i) go[i] = (upstream[i] - v[i] * vg) / cache.output_norm;

    g.params.row_proj = matmul_tn(grad_out, cache.depth);
    const Matrix grad_depth = matmul(grad_out, params.row_proj);
    g.params.depth_proj = matmul_nt(grad_depth, cache.mixed);
    Matrix grad_x = matmul_tn(params.depth_proj, grad_depth);

    for (std::size_t l = params.blocks.size(); l-- > 0;) {
        const MixerBlock& block = params.blocks[l];
        const Matrix& input = cache.block_inputs[l];
        const Matrix& hidden = cache.hidden_pre[l];
        auto& gb = g.params.blocks[l];
        gb.w2 = matmul_tn(grad_x, relu(hidden));
        gb.b2 = column_sums(grad_x);
        Matrix grad_hidden = matmul(grad_x, block.w2);
        auto gh = grad_hidden.data();
        auto hp = hidden.data();
        for (std::size_t i = 0; i < gh.size(); ++i)
            if (!(hp[i] > 0.0)) gh[i] = 0.0;
        gb.w1 = matmul_tn(grad_hidden, input);
        gb.b1 = column_sums(grad_hidden);
        Matrix through = matmul(grad_hidden, block.w1);
        auto gx = grad_x.data();
        auto th = through.data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += th[i];
    }
    g.tokens = transpose(grad_x);
    return g;
}

void write_tensor(std::ostream& os, const std::string& name, const Matrix& m) {
    binio::put_string(os, name);
    binio::put_u64(os, m.rows());
    binio::put_u64(os, m.cols());
    for (double v : m.data()) binio::put_f64(os, v);
}

Matrix read_tensor(std::istream& is, const std::string& expected_name) {
    const std::string name = binio::get_string(is, "tensor name", 4096);
    if (name != expected_name) {
        throw DataError("checkpoint tensor '" + name + "' where '" + expected_name + "' was expected");
    }
    const std::uint64_t rows = binio::get_u64(is, name);
    const std::uint64_t cols = binio::get_u64(is, name);
    if (rows > (1u << 24) || cols > (1u << 24) || rows * cols > (1ull << 32)) {
        throw DataError("implausible tensor shape for " + name);
    }
    std::vector<double> data(rows * cols);
    for (double& v : data) v = binio::get_f64(is, name);
    return Matrix(rows, cols, std::move(data));
}

void write_mixer(std::ostream& os, const MixerConfig& cfg, const MixerParams& params) {
    params.check_shapes(cfg);
    binio::put_magic(os, "CVMX");
    binio::put_u32(os, kMixerVersion);
    for (std::size_t v : {cfg.num_maps, cfg.map_height, cfg.map_width, cfg.num_blocks, cfg.hidden(),
                          cfg.out_depth, cfg.out_rows}) {
        binio::put_u64(os, v);
    }
    const auto tensors = params.tensors();
    const auto names = params.tensor_names();
    binio::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i) write_tensor(os, names[i], *tensors[i]);
}

void read_mixer(std::istream& is, MixerConfig& cfg, MixerParams& params) {
    binio::expect_magic(is, "CVMX", "mixer checkpoint");
    const std::uint32_t version = binio::get_u32(is, "mixer version");
    if (version != kMixerVersion) {
        throw DataError("unsupported mixer checkpoint version " + std::to_string(version));
    }
    MixerConfig c;
    c.num_maps = binio::get_u64(is, "config");
    c.map_height = binio::get_u64(is, "config");
    c.map_width = binio::get_u64(is, "config");
    c.num_blocks = binio::get_u64(is, "config");
    c.hidden_dim = binio::get_u64(is, "config");
    c.out_depth = binio::get_u64(is, "config");
    c.out_rows = binio::get_u64(is, "config");
    try {
        c.validate();
    } catch (const Error& e) {
        throw DataError(std::string("corrupt mixer config: ") + e.what());
    }
    if (c.num_blocks > 1024) throw DataError("corrupt mixer config: too many blocks");
    MixerParams p = MixerParams::zeros(c);
    const std::uint32_t count = binio::get_u32(is, "tensor count");
    auto tensors = p.tensors();
    const auto names = p.tensor_names();
    if (count != tensors.size()) {
        throw DataError("mixer checkpoint holds " + std::to_string(count) + " tensors, expected " +
                        std::to_string(tensors.size()));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) *tensors[i] = read_tensor(is, names[i]);
    try {
        p.check_shapes(c);
    } catch (const ShapeError& e) {
        throw DataError(std::string("corrupt mixer checkpoint: ") + e.what());
    }
    cfg = c;
    params = std::move(p);
}

void save_mixer(const std::filesystem::path& path, const MixerConfig& cfg, const MixerParams& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    write_mixer(os, cfg, params);
    if (!os) throw DataError("write failed for " + path.string());
}

void load_mixer(const std::filesystem::path& path, MixerConfig& cfg, MixerParams& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path.string());
    read_mixer(is, cfg, params);
}

} // namespace cvgl
