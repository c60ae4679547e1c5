#include "toco/backbone.hpp"

#include <cmath>
#include <string>

namespace toco {

void VitConfig::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("VitConfig: " + what); };
    if (patch_size <= 0 || image_size <= 0) fail("image_size and patch_size must be positive");
    if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
    if (depth < 1) fail("depth must be >= 1");
    if (aux_block < 1 || aux_block > depth) fail("aux_block must lie in [1, depth]");
    if (heads < 1 || dim % heads != 0) fail("dim must be divisible by heads");
    if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
    if (channels < 1) fail("channels must be >= 1");
}

template <typename T>
Matrix<T> trunc_normal(Eigen::Index rows, Eigen::Index cols, double sigma, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        double v;
        do {
            v = dist(rng);
        } while (std::abs(v) > 2.0);
        m.data()[i] = T(v * sigma);
    }
    return m;
}

template <typename T>
VitWeights<T> VitWeights<T>::init(const VitConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    const int d = cfg.dim;
    const int hidden = d * cfg.mlp_ratio;
    const int patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
    auto tn = [&](Eigen::Index r, Eigen::Index c) { return Param<T>(trunc_normal<T>(r, c, 0.02, rng)); };
    auto zeros = [](Eigen::Index r, Eigen::Index c) { return Param<T>(Matrix<T>::Zero(r, c)); };
    auto ones = [](Eigen::Index c) { return Param<T>(Matrix<T>::Ones(1, c)); };

    VitWeights w;
    w.config = cfg;
    w.patch_w = tn(patch_dim, d);
    w.patch_b = zeros(1, d);
    w.cls_token = tn(1, d);
    w.pos_embed = tn(1 + cfg.tokens(), d);
    for (int b = 0; b < cfg.depth; ++b) {
        BlockWeights<T> blk;
        blk.ln1_gamma = ones(d);
        blk.ln1_beta = zeros(1, d);
        blk.qkv_w = tn(d, 3 * d);
        blk.qkv_b = zeros(1, 3 * d);
        blk.proj_w = tn(d, d);
        blk.proj_b = zeros(1, d);
        blk.ln2_gamma = ones(d);
        blk.ln2_beta = zeros(1, d);
        blk.fc1_w = tn(d, hidden);
        blk.fc1_b = zeros(1, hidden);
        blk.fc2_w = tn(hidden, d);
        blk.fc2_b = zeros(1, d);
        w.blocks.push_back(std::move(blk));
    }
    w.norm_gamma = ones(d);
    w.norm_beta = zeros(1, d);
    return w;
}

template <typename T>
std::vector<std::pair<std::string, Param<T>*>> VitWeights<T>::named_params() {
    std::vector<std::pair<std::string, Param<T>*>> out{
        {"patch_embed.weight", &patch_w},
        {"patch_embed.bias", &patch_b},
        {"cls_token", &cls_token},
        {"pos_embed", &pos_embed},
    };
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        auto& k = blocks[b];
        out.insert(out.end(), {
                                  {p + "norm1.weight", &k.ln1_gamma},
                                  {p + "norm1.bias", &k.ln1_beta},
                                  {p + "attn.qkv.weight", &k.qkv_w},
                                  {p + "attn.qkv.bias", &k.qkv_b},
                                  {p + "attn.proj.weight", &k.proj_w},
                                  {p + "attn.proj.bias", &k.proj_b},
                                  {p + "norm2.weight", &k.ln2_gamma},
                                  {p + "norm2.bias", &k.ln2_beta},
                                  {p + "mlp.fc1.weight", &k.fc1_w},
                                  {p + "mlp.fc1.bias", &k.fc1_b},
                                  {p + "mlp.fc2.weight", &k.fc2_w},
                                  {p + "mlp.fc2.bias", &k.fc2_b},
                              });
    }
    out.emplace_back("norm.weight", &norm_gamma);
    out.emplace_back("norm.bias", &norm_beta);
    return out;
}

template <typename T>
Matrix<T> extract_patches(const Image& image, int p) {
    if (p <= 0 || image.height % p != 0 || image.width % p != 0) {
        throw std::invalid_argument("patchify: image " + std::to_string(image.height) + "x" +
                                    std::to_string(image.width) + " is not divisible by patch size " +
                                    std::to_string(p));
    }
    const int gh = image.height / p;
    const int gw = image.width / p;
    Matrix<T> out(Eigen::Index(gh) * gw, Eigen::Index(image.channels) * p * p);
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const Eigen::Index row = Eigen::Index(gy) * gw + gx;
            Eigen::Index col = 0;
            for (int c = 0; c < image.channels; ++c) {
                for (int dy = 0; dy < p; ++dy) {
                    for (int dx = 0; dx < p; ++dx) out(row, col++) = T(image.at(c, gy * p + dy, gx * p + dx));
                }
            }
        }
    }
    return out;
}

template <typename T>
TokenGrid<T> patchify(const Image& image, const VitWeights<T>& weights) {
    const auto& cfg = weights.config;
    if (image.channels != cfg.channels) throw std::invalid_argument("patchify: channel count mismatch");
    Matrix<T> patches = extract_patches<T>(image, cfg.patch_size);
    TokenGrid<T> grid;
    grid.h = image.height / cfg.patch_size;
    grid.w = image.width / cfg.patch_size;
    grid.tokens.noalias() = patches * weights.patch_w.value;
    grid.tokens.rowwise() += weights.patch_b.value.row(0);
    return grid;
}

template <typename T>
Matrix<T> bilinear_matrix(int src_h, int src_w, int dst_h, int dst_w) {
    if (src_h <= 0 || src_w <= 0 || dst_h <= 0 || dst_w <= 0) throw std::invalid_argument("bilinear_matrix: empty grid");
    auto axis = [](int src, int dst, int i, int& i0, int& i1, double& frac) {
        double s = (i + 0.5) * double(src) / double(dst) - 0.5;
        if (s < 0) s = 0;
        i0 = std::min(int(std::floor(s)), src - 1);
        i1 = std::min(i0 + 1, src - 1);
        frac = s - i0;
    };
    Matrix<T> m = Matrix<T>::Zero(Eigen::Index(dst_h) * dst_w, Eigen::Index(src_h) * src_w);
    for (int y = 0; y < dst_h; ++y) {
        int y0, y1;
        double fy;
        axis(src_h, dst_h, y, y0, y1, fy);
        for (int x = 0; x < dst_w; ++x) {
            int x0, x1;
            double fx;
            axis(src_w, dst_w, x, x0, x1, fx);
            const Eigen::Index r = Eigen::Index(y) * dst_w + x;
            m(r, Eigen::Index(y0) * src_w + x0) += T((1 - fy) * (1 - fx));
            m(r, Eigen::Index(y0) * src_w + x1) += T((1 - fy) * fx);
            m(r, Eigen::Index(y1) * src_w + x0) += T(fy * (1 - fx));
            m(r, Eigen::Index(y1) * src_w + x1) += T(fy * fx);
        }
    }
    return m;
}

template <typename T>
Matrix<T> interpolate_pos_embed(const Matrix<T>& pos, std::pair<int, int> src_grid, std::pair<int, int> target_grid) {
    const auto [sh, sw] = src_grid;
    const auto [th, tw] = target_grid;
    if (pos.rows() != Eigen::Index(sh) * sw) {
        throw std::invalid_argument("interpolate_pos_embed: " + std::to_string(pos.rows()) + " rows for a " +
                                    std::to_string(sh) + "x" + std::to_string(sw) + " grid");
    }
    if (sh == th && sw == tw) return pos;
    Matrix<T> out;
    out.noalias() = bilinear_matrix<T>(sh, sw, th, tw) * pos;
    return out;
}

template <typename T>
BoundVit<T> bind(Tape<T>& tape, VitWeights<T>& w, bool trainable) {
    auto b = [&](Param<T>& p) { return trainable ? tape.parameter(p) : tape.constant(p.value); };
    BoundVit<T> v;
    v.weights = &w;
    v.patch_w = b(w.patch_w);
    v.patch_b = b(w.patch_b);
    v.cls_token = b(w.cls_token);
    v.pos_embed = b(w.pos_embed);
    for (auto& k : w.blocks) {
        v.blocks.push_back({b(k.ln1_gamma), b(k.ln1_beta), b(k.qkv_w), b(k.qkv_b), b(k.proj_w), b(k.proj_b),
                            b(k.ln2_gamma), b(k.ln2_beta), b(k.fc1_w), b(k.fc1_b), b(k.fc2_w), b(k.fc2_b)});
    }
    v.norm_gamma = b(w.norm_gamma);
    v.norm_beta = b(w.norm_beta);
    return v;
}

template <typename T>
VitGraph<T> forward_patches(const BoundVit<T>& vit, Var<T> patches, int h, int w) {
    const VitConfig& cfg = vit.weights->config;
    const int n = h * w;
    if (patches.rows() != n) throw std::invalid_argument("forward: patch rows do not match grid");
    const int g = cfg.grid();

    Var<T> tokens = add_row(matmul(patches, vit.patch_w), vit.patch_b);
    Var<T> pos = slice_rows(vit.pos_embed, 1, Eigen::Index(g) * g);
    if (h != g || w != g) pos = left_multiply(bilinear_matrix<T>(g, g, h, w), pos);
    tokens = add(tokens, pos);
    Var<T> cls = add(vit.cls_token, slice_rows(vit.pos_embed, 0, 1));
    const Var<T> parts[] = {cls, tokens};
    Var<T> x = concat_rows<T>(parts);

    VitGraph<T> out;
    out.h = h;
    out.w = w;
    for (std::size_t bi = 0; bi < vit.blocks.size(); ++bi) {
        const auto& blk = vit.blocks[bi];
        Var<T> y = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
        Var<T> qkv = add_row(matmul(y, blk.qkv_w), blk.qkv_b);
        std::vector<Matrix<T>> probs;
        Var<T> attn = multihead_attention(qkv, cfg.heads, &probs);
        x = add(x, add_row(matmul(attn, blk.proj_w), blk.proj_b));
        y = layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
        Var<T> hidden = gelu(add_row(matmul(y, blk.fc1_w), blk.fc1_b));
        x = add(x, add_row(matmul(hidden, blk.fc2_w), blk.fc2_b));
        if (!x.value().allFinite()) {
            throw NonFiniteError("forward: non-finite activation after block " + std::to_string(bi + 1) + " (max |x| " +
                                 std::to_string(double(x.value().cwiseAbs().maxCoeff())) + ")");
        }
        Var<T> xo = bi + 1 == vit.blocks.size() ? layer_norm(x, vit.norm_gamma, vit.norm_beta) : x;
        out.patch_tokens.push_back(slice_rows(xo, 1, n));
        out.class_tokens.push_back(slice_rows(xo, 0, 1));
        out.attention.push_back(std::move(probs));
    }
    out.final_pre_norm = x.value().bottomRows(n);
    return out;
}

template <typename T>
VitGraph<T> forward(const BoundVit<T>& vit, const Image& image) {
    const int p = vit.weights->config.patch_size;
    Tape<T>& tape = *vit.patch_w.tape;
    Var<T> patches = tape.constant(extract_patches<T>(image, p));
    return forward_patches(vit, patches, image.height / p, image.width / p);
}

template <typename T>
ForwardTrace<T> to_trace(const VitGraph<T>& graph) {
    ForwardTrace<T> t;
    for (std::size_t b = 0; b < graph.patch_tokens.size(); ++b) {
        t.blocks.push_back(TokenGrid<T>{graph.patch_tokens[b].value(), graph.h, graph.w});
        t.class_tokens.push_back(graph.class_tokens[b].value().row(0));
    }
    t.attention = graph.attention;
    t.final_pre_norm = graph.final_pre_norm;
    return t;
}

template <typename T>
ForwardTrace<T> forward(const Image& image, VitWeights<T>& weights) {
    Tape<T> tape;
    auto vit = bind(tape, weights, false);
    return to_trace(forward(vit, image));
}

template <typename T>
Matrix<T> class_attention_map(const ForwardTrace<T>& trace, int block) {
    if (block < 0 || block >= trace.depth()) throw std::out_of_range("class_attention_map: block out of range");
    const auto& heads = trace.attention[std::size_t(block)];
    const auto& grid = trace.blocks[std::size_t(block)];
    Matrix<T> map = Matrix<T>::Zero(grid.h, grid.w);
    for (const auto& a : heads) {
        for (int i = 0; i < grid.h * grid.w; ++i) map(i / grid.w, i % grid.w) += a(0, 1 + i);
    }
    return map / T(heads.size());
}

#define TOCO_INSTANTIATE_BACKBONE(T)                                                                   \
    template struct VitWeights<T>;                                                                     \
    template Matrix<T> trunc_normal<T>(Eigen::Index, Eigen::Index, double, std::mt19937_64&);          \
    template Matrix<T> extract_patches<T>(const Image&, int);                                          \
    template TokenGrid<T> patchify(const Image&, const VitWeights<T>&);                                \
    template Matrix<T> bilinear_matrix<T>(int, int, int, int);                                         \
    template Matrix<T> interpolate_pos_embed(const Matrix<T>&, std::pair<int, int>, std::pair<int, int>); \
    template BoundVit<T> bind(Tape<T>&, VitWeights<T>&, bool);                                         \
    template VitGraph<T> forward_patches(const BoundVit<T>&, Var<T>, int, int);                        \
    template VitGraph<T> forward(const BoundVit<T>&, const Image&);                                    \
    template ForwardTrace<T> forward(const Image&, VitWeights<T>&);                                    \
    template ForwardTrace<T> to_trace(const VitGraph<T>&);                                             \
    template Matrix<T> class_attention_map(const ForwardTrace<T>&, int);

TOCO_INSTANTIATE_BACKBONE(float)
TOCO_INSTANTIATE_BACKBONE(double)

}  // namespace toco
