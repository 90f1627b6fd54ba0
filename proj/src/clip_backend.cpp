// SPDX-License-Identifier: Apache-2.0
//
// CLIP ViT image/text towers evaluated on the autograd graph so gradients
// reach the prompt vectors and attention-modulated images. Weights are
// stored transposed (in x out) for row-major products.

#include "clipada/backbone.hpp"
#include "clipada/errors.hpp"
#include "clipada/prompting.hpp"
#include "clipada/safetensors.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <limits>

namespace clipada {

namespace {

struct TransformerBlock {
    ag::RowVector ln1_g, ln1_b, ln2_g, ln2_b;
    Matrix q_w, k_w, v_w, o_w, fc1_w, fc2_w;
    ag::RowVector q_b, k_b, v_b, o_b, fc1_b, fc2_b;
};

struct TowerConfig {
    int hidden = 0;
    int heads = 0;
    int layers = 0;
    double eps = 1e-5;
    bool quick_gelu = true;
};

class ClipBackend final : public Backend {
public:
    ClipBackend(const std::filesystem::path& dir, int feature_stage);

    const BackendDescriptor& descriptor() const override { return dims_; }
    const Tokenizer& tokenizer() const override { return *tokenizer_; }
    std::string name() const override { return "clip"; }
    int context_length() const override { return static_cast<int>(txt_pos_.rows()); }

    Matrix embed_tokens(std::span<const int> ids) const override {
        Matrix out(static_cast<Eigen::Index>(ids.size()), token_embedding_.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= token_embedding_.rows()) throw TokenizerError("token id out of range");
            out.row(static_cast<Eigen::Index>(i)) = token_embedding_.row(ids[i]);
        }
        return out;
    }

    PatchFeatureMap encode_image(const ag::ImageVar& image) const override;
    TextEmbedding encode_text(const PromptAssembly& assembly) const override;
    std::uint64_t parameter_hash() const override;

private:
    ag::Var block_forward(const ag::Var& x, const TransformerBlock& b, const TowerConfig& cfg,
                          const Matrix* mask) const;

    BackendDescriptor dims_;
    std::unique_ptr<ClipBpeTokenizer> tokenizer_;
    TowerConfig vis_cfg_, txt_cfg_;

    Matrix patch_w_;
    ag::RowVector class_emb_;
    Matrix vis_pos_;
    ag::RowVector pre_ln_g_, pre_ln_b_;
    std::vector<TransformerBlock> vis_blocks_;

    Matrix token_embedding_;
    Matrix txt_pos_;
    std::vector<TransformerBlock> txt_blocks_;
    ag::RowVector final_ln_g_, final_ln_b_;
    Matrix text_proj_;
};

TransformerBlock load_block(const SafetensorsFile& st, const std::string& prefix) {
    const auto w = [&](const std::string& n) { return Matrix(st.matrix(prefix + n + ".weight").transpose()); };
    const auto v = [&](const std::string& n) -> ag::RowVector { return st.matrix(prefix + n).row(0); };
    TransformerBlock b;
    b.ln1_g = v("layer_norm1.weight");
    b.ln1_b = v("layer_norm1.bias");
    b.ln2_g = v("layer_norm2.weight");
    b.ln2_b = v("layer_norm2.bias");
    b.q_w = w("self_attn.q_proj");
    b.k_w = w("self_attn.k_proj");
    b.v_w = w("self_attn.v_proj");
    b.o_w = w("self_attn.out_proj");
    b.q_b = v("self_attn.q_proj.bias");
    b.k_b = v("self_attn.k_proj.bias");
    b.v_b = v("self_attn.v_proj.bias");
    b.o_b = v("self_attn.out_proj.bias");
    b.fc1_w = w("mlp.fc1");
    b.fc1_b = v("mlp.fc1.bias");
    b.fc2_w = w("mlp.fc2");
    b.fc2_b = v("mlp.fc2.bias");
    return b;
}

TowerConfig tower_config(const nlohmann::json& j, int hidden, int heads, int layers) {
    TowerConfig c;
    c.hidden = j.value("hidden_size", hidden);
    c.heads = j.value("num_attention_heads", heads);
    c.layers = j.value("num_hidden_layers", layers);
    c.eps = j.value("layer_norm_eps", 1e-5);
    const std::string act = j.value("hidden_act", std::string("quick_gelu"));
    if (act != "quick_gelu" && act != "gelu") throw ConfigError("unsupported activation " + act);
    c.quick_gelu = act == "quick_gelu";
    return c;
}

ClipBackend::ClipBackend(const std::filesystem::path& dir, int feature_stage) {
    std::ifstream cf(dir / "config.json");
    if (!cf) throw CheckpointError("missing config.json in " + dir.string());
    nlohmann::json cfg;
    try {
        cf >> cfg;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("bad config.json: " + std::string(e.what()));
    }
    const nlohmann::json vj = cfg.value("vision_config", nlohmann::json::object());
    const nlohmann::json tj = cfg.value("text_config", nlohmann::json::object());
    vis_cfg_ = tower_config(vj, 768, 12, 12);
    txt_cfg_ = tower_config(tj, 512, 8, 12);
    if (feature_stage < 1 || feature_stage > vis_cfg_.layers) {
        throw ConfigError("feature stage " + std::to_string(feature_stage) + " outside encoder depth " +
                          std::to_string(vis_cfg_.layers));
    }

    dims_.patch_size = vj.value("patch_size", 32);
    dims_.feature_stage = feature_stage;
    dims_.raw_dim = vis_cfg_.hidden;
    dims_.shared_dim = cfg.value("projection_dim", 512);
    dims_.text_token_dim = txt_cfg_.hidden;

    tokenizer_ = std::make_unique<ClipBpeTokenizer>(dir / "vocab.json", dir / "merges.txt");

    const SafetensorsFile st(dir / "model.safetensors");
    patch_w_ = st.matrix("vision_model.embeddings.patch_embedding.weight").transpose();
    class_emb_ = st.matrix("vision_model.embeddings.class_embedding").row(0);
    vis_pos_ = st.matrix("vision_model.embeddings.position_embedding.weight");
    pre_ln_g_ = st.matrix("vision_model.pre_layrnorm.weight").row(0);
    pre_ln_b_ = st.matrix("vision_model.pre_layrnorm.bias").row(0);
    // Only the blocks up to the feature stage are ever evaluated.
    for (int i = 0; i < feature_stage; ++i) {
        vis_blocks_.push_back(load_block(st, "vision_model.encoder.layers." + std::to_string(i) + "."));
    }

    token_embedding_ = st.matrix("text_model.embeddings.token_embedding.weight");
    txt_pos_ = st.matrix("text_model.embeddings.position_embedding.weight");
    for (int i = 0; i < txt_cfg_.layers; ++i) {
        txt_blocks_.push_back(load_block(st, "text_model.encoder.layers." + std::to_string(i) + "."));
    }
    final_ln_g_ = st.matrix("text_model.final_layer_norm.weight").row(0);
    final_ln_b_ = st.matrix("text_model.final_layer_norm.bias").row(0);
    text_proj_ = st.matrix("text_projection.weight").transpose();

    if (patch_w_.rows() != 3 * dims_.patch_size * dims_.patch_size || patch_w_.cols() != dims_.raw_dim) {
        throw CheckpointError("patch embedding shape does not match config");
    }
    if (text_proj_.cols() != dims_.shared_dim) throw CheckpointError("text projection width != projection_dim");
}

ag::Var ClipBackend::block_forward(const ag::Var& x, const TransformerBlock& b, const TowerConfig& cfg,
                                   const Matrix* mask) const {
    const int head_dim = cfg.hidden / cfg.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    ag::Var h = ag::layer_norm(x, b.ln1_g, b.ln1_b, cfg.eps);
    ag::Var q = ag::scale(ag::linear(h, b.q_w, b.q_b), scale);
    ag::Var k = ag::linear(h, b.k_w, b.k_b);
    ag::Var v = ag::linear(h, b.v_w, b.v_b);
    std::vector<ag::Var> heads;
    for (int i = 0; i < cfg.heads; ++i) {
        ag::Var qh = ag::slice_cols(q, i * head_dim, head_dim);
        ag::Var kh = ag::slice_cols(k, i * head_dim, head_dim);
        ag::Var vh = ag::slice_cols(v, i * head_dim, head_dim);
        ag::Var scores = ag::matmul(qh, ag::transpose(kh));
        if (mask != nullptr) scores = ag::add_constant(scores, *mask);
        heads.push_back(ag::matmul(ag::softmax_rows(scores), vh));
    }
    ag::Var attn = ag::linear(ag::concat_cols(heads), b.o_w, b.o_b);
    ag::Var x1 = ag::add(x, attn);

    ag::Var m = ag::layer_norm(x1, b.ln2_g, b.ln2_b, cfg.eps);
    m = ag::linear(m, b.fc1_w, b.fc1_b);
    m = cfg.quick_gelu ? ag::quick_gelu(m) : ag::gelu(m);
    m = ag::linear(m, b.fc2_w, b.fc2_b);
    return ag::add(x1, m);
}

PatchFeatureMap ClipBackend::encode_image(const ag::ImageVar& image) const {
    static constexpr std::array<double, 3> kMean{0.48145466, 0.4578275, 0.40821073};
    static constexpr std::array<double, 3> kStd{0.26862954, 0.26130258, 0.27577711};
    ag::ImageVar norm;
    for (int c = 0; c < 3; ++c) norm[c] = ag::affine(image[c], 1.0 / kStd[c], -kMean[c] / kStd[c]);

    const int p = dims_.patch_size;
    ag::Var patches = ag::matmul(ag::patchify(norm, p), patch_w_);
    if (patches.rows() + 1 != vis_pos_.rows()) {
        throw ShapeError("image yields " + std::to_string(patches.rows()) + " patches but the weights expect " +
                         std::to_string(vis_pos_.rows() - 1));
    }
    const std::array<ag::Var, 2> parts{ag::Var::constant(class_emb_), patches};
    ag::Var x = ag::add_constant(ag::concat_rows(parts), vis_pos_);
    x = ag::layer_norm(x, pre_ln_g_, pre_ln_b_, vis_cfg_.eps);
    for (const auto& b : vis_blocks_) x = block_forward(x, b, vis_cfg_, nullptr);

    PatchFeatureMap out;
    out.features = ag::slice_rows(x, 1, x.rows() - 1);
    out.grid_rows = static_cast<int>(image[0].rows() / p);
    out.grid_cols = static_cast<int>(image[0].cols() / p);
    out.stage_index = dims_.feature_stage;
    return out;
}

TextEmbedding ClipBackend::encode_text(const PromptAssembly& assembly) const {
    if (assembly.length() > context_length()) {
        throw TokenizerError("prompt of length " + std::to_string(assembly.length()) + " exceeds context " +
                             std::to_string(context_length()));
    }
    const auto len = static_cast<Eigen::Index>(assembly.length());
    Matrix causal = Matrix::Zero(len, len);
    for (Eigen::Index r = 0; r < len; ++r) {
        for (Eigen::Index c = r + 1; c < len; ++c) causal(r, c) = -std::numeric_limits<double>::infinity();
    }
    const Matrix pos = txt_pos_.topRows(len);

    std::vector<ag::Var> rows;
    for (const auto& seq : assembly.sequences) {
        if (seq.cols() != dims_.text_token_dim) throw ShapeError("prompt width differs from D");
        ag::Var x = ag::add_constant(seq, pos);
        for (const auto& b : txt_blocks_) x = block_forward(x, b, txt_cfg_, &causal);
        x = ag::layer_norm(x, final_ln_g_, final_ln_b_, txt_cfg_.eps);
        rows.push_back(ag::matmul(ag::slice_rows(x, assembly.end_index, 1), text_proj_));
    }
    if (rows.empty()) throw ShapeError("empty prompt assembly");
    return {rows.size() == 1 ? rows.front() : ag::concat_rows(rows)};
}

std::uint64_t ClipBackend::parameter_hash() const {
    std::uint64_t h = hash_matrix(patch_w_);
    h = hash_matrix(class_emb_, h);
    h = hash_matrix(vis_pos_, h);
    h = hash_matrix(token_embedding_, h);
    h = hash_matrix(txt_pos_, h);
    h = hash_matrix(text_proj_, h);
    for (const auto* blocks : {&vis_blocks_, &txt_blocks_}) {
        for (const auto& b : *blocks) {
            for (const Matrix* m : {&b.q_w, &b.k_w, &b.v_w, &b.o_w, &b.fc1_w, &b.fc2_w}) h = hash_matrix(*m, h);
            for (const ag::RowVector* v : {&b.ln1_g, &b.ln1_b, &b.ln2_g, &b.ln2_b, &b.q_b, &b.k_b, &b.v_b,
                                           &b.o_b, &b.fc1_b, &b.fc2_b}) {
                h = hash_bytes(v->data(), sizeof(double) * static_cast<std::size_t>(v->size()), h);
            }
        }
    }
    return h;
}

} // namespace

std::unique_ptr<Backend> load_clip_backend(const std::filesystem::path& dir, int feature_stage) {
    return std::make_unique<ClipBackend>(dir, feature_stage);
}

} // namespace clipada
