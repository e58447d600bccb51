#include "pertrace/model.hpp"

#include "pertrace/errors.hpp"
#include "pertrace/hash.hpp"

#include <fstream>
#include <functional>

#include <fmt/format.h>

namespace pertrace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

const char* family_name(Family f) { return f == Family::gpt2 ? "gpt2" : "llama"; }

void ArchDescriptor::validate() const {
    auto positive = [](int v, const char* what) {
        if (v < 1) throw ConfigError(fmt::format("architecture field {} must be >= 1 (got {})", what, v));
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(n_kv_heads, "n_kv_heads");
    positive(d_model, "d_model");
    positive(d_head, "d_head");
    positive(d_mlp, "d_mlp");
    positive(vocab_size, "vocab_size");
    positive(max_positions, "max_positions");
    if (n_heads % n_kv_heads != 0)
        throw ConfigError(fmt::format("n_heads {} is not a multiple of n_kv_heads {}", n_heads, n_kv_heads));
    if (family == Family::gpt2 && n_kv_heads != n_heads)
        throw ConfigError("gpt2 family does not support grouped key/value heads");
    if (!head_dim_override && d_model != n_heads * d_head)
        throw ShapeError(fmt::format("d_model {} != n_heads {} x d_head {} and no head_dim override", d_model,
                                     n_heads, d_head));
    if (family == Family::llama && d_head % 2 != 0) throw ConfigError("rotary heads need an even d_head");
    if (pad_token_id && (*pad_token_id < 0 || *pad_token_id >= vocab_size))
        throw ConfigError(fmt::format("pad_token_id {} outside vocabulary", *pad_token_id));
}

json ArchDescriptor::to_json() const {
    json j = {{"family", family_name(family)},
              {"n_layers", n_layers},
              {"n_heads", n_heads},
              {"n_kv_heads", n_kv_heads},
              {"d_model", d_model},
              {"d_mlp", d_mlp},
              {"vocab_size", vocab_size},
              {"max_positions", max_positions},
              {"norm_eps", norm_eps},
              {"tied_embeddings", tied_embeddings}};
    if (head_dim_override) j["d_head"] = d_head;
    if (family == Family::llama) j["rope_theta"] = rope_theta;
    j["pad_token_id"] = pad_token_id ? json(*pad_token_id) : json(nullptr);
    return j;
}

ArchDescriptor ArchDescriptor::from_json(const json& j) {
    auto pick = [&](std::initializer_list<const char*> keys) -> const json* {
        for (const char* k : keys)
            if (j.contains(k) && !j.at(k).is_null()) return &j.at(k);
        return nullptr;
    };
    auto need_int = [&](std::initializer_list<const char*> keys) {
        const json* v = pick(keys);
        if (!v) throw ConfigError(fmt::format("model config lacks '{}'", *keys.begin()));
        return v->get<int>();
    };
    ArchDescriptor a;
    std::string fam;
    if (const json* f = pick({"family", "model_type"})) fam = f->get<std::string>();
    if (fam == "gpt2") {
        a.family = Family::gpt2;
    } else if (fam == "llama" || fam == "mistral" || fam == "qwen2") {
        a.family = Family::llama;
    } else {
        throw ConfigError(fmt::format("unsupported architecture family '{}'", fam));
    }
    try {
        a.n_layers = need_int({"n_layers", "n_layer", "num_hidden_layers"});
        a.n_heads = need_int({"n_heads", "n_head", "num_attention_heads"});
        const json* kv = pick({"n_kv_heads", "num_key_value_heads"});
        a.n_kv_heads = kv ? kv->get<int>() : a.n_heads;
        a.d_model = need_int({"d_model", "n_embd", "hidden_size"});
        if (const json* dh = pick({"d_head", "head_dim"})) {
            a.d_head = dh->get<int>();
            a.head_dim_override = true;
        } else {
            if (a.n_heads < 1 || a.d_model % a.n_heads != 0)
                throw ShapeError(fmt::format("d_model {} not divisible by n_heads {}", a.d_model, a.n_heads));
            a.d_head = a.d_model / a.n_heads;
        }
        if (const json* m = pick({"d_mlp", "n_inner", "intermediate_size"})) {
            a.d_mlp = m->get<int>();
        } else {
            a.d_mlp = 4 * a.d_model;
        }
        a.vocab_size = need_int({"vocab_size"});
        a.max_positions = need_int({"max_positions", "n_positions", "max_position_embeddings"});
        if (const json* e = pick({"norm_eps", "layer_norm_epsilon", "rms_norm_eps"})) a.norm_eps = e->get<float>();
        else a.norm_eps = a.family == Family::gpt2 ? 1e-5f : 1e-6f;
        if (const json* r = pick({"rope_theta"})) a.rope_theta = r->get<float>();
        if (const json* t = pick({"tied_embeddings", "tie_word_embeddings"})) a.tied_embeddings = t->get<bool>();
        else a.tied_embeddings = a.family == Family::gpt2;
        if (const json* p = pick({"pad_token_id"})) a.pad_token_id = p->get<int>();
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("model config: {}", e.what()));
    }
    a.validate();
    return a;
}

namespace {

Matrix slice_head_cols(const Matrix& w, int head, int d_head) {
    return w.slice_cols(static_cast<std::size_t>(head * d_head), static_cast<std::size_t>((head + 1) * d_head));
}

class Reader {
public:
    Reader(const TensorFile& f, std::string prefix) : f_(f), prefix_(std::move(prefix)) {}

    const TensorEntry* find(const std::string& name) const { return f_.find(prefix_ + name); }

    const TensorEntry& get(const std::string& name, std::vector<std::size_t> shape) const {
        const std::string full = prefix_ + name;
        const TensorEntry* e = f_.find(full);
        if (!e) throw DataError(fmt::format("missing tensor '{}'", full));
        if (e->shape != shape)
            throw ShapeError(fmt::format("tensor '{}': shape [{}] does not match expected [{}]", full,
                                         fmt::join(e->shape, ","), fmt::join(shape, ",")));
        return *e;
    }

    Matrix matrix(const std::string& name, std::size_t rows, std::size_t cols) const {
        return Matrix(rows, cols, get(name, {rows, cols}).data);
    }
    Matrix matrix_t(const std::string& name, std::size_t rows, std::size_t cols) const {
        return transpose(Matrix(cols, rows, get(name, {cols, rows}).data));
    }
    Vector vector(const std::string& name, std::size_t n) const { return get(name, {n}).data; }
    Vector optional_vector(const std::string& name, std::size_t n) const {
        return find(name) ? vector(name, n) : Vector{};
    }

private:
    const TensorFile& f_;
    std::string prefix_;
};

std::string detect_prefix(const TensorFile& f, Family fam) {
    if (fam == Family::gpt2) {
        if (f.contains("wte.weight")) return "";
        if (f.contains("transformer.wte.weight")) return "transformer.";
        throw DataError("missing tensor 'wte.weight'");
    }
    return "";
}

ModelWeights load_gpt2(const TensorFile& f, const ArchDescriptor& a) {
    Reader r(f, detect_prefix(f, Family::gpt2));
    const auto d = static_cast<std::size_t>(a.d_model);
    const auto hd = static_cast<std::size_t>(a.n_heads * a.d_head);
    const auto m = static_cast<std::size_t>(a.d_mlp);
    const auto v = static_cast<std::size_t>(a.vocab_size);
    ModelWeights w;
    w.embed = r.matrix("wte.weight", v, d);
    w.positional = r.matrix("wpe.weight", static_cast<std::size_t>(a.max_positions), d);
    for (int l = 0; l < a.n_layers; ++l) {
        const std::string p = fmt::format("h.{}.", l);
        LayerWeights lw;
        lw.ln1_gain = r.vector(p + "ln_1.weight", d);
        lw.ln1_bias = r.vector(p + "ln_1.bias", d);
        if (r.find(p + "attn.c_attn.weight")) {
            const Matrix qkv = r.matrix(p + "attn.c_attn.weight", d, 3 * hd);
            const Vector b = r.vector(p + "attn.c_attn.bias", 3 * hd);
            lw.wq = qkv.slice_cols(0, hd);
            lw.wk = qkv.slice_cols(hd, 2 * hd);
            lw.wv = qkv.slice_cols(2 * hd, 3 * hd);
            lw.bq.assign(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(hd));
            lw.bk.assign(b.begin() + static_cast<std::ptrdiff_t>(hd), b.begin() + static_cast<std::ptrdiff_t>(2 * hd));
            lw.bv.assign(b.begin() + static_cast<std::ptrdiff_t>(2 * hd), b.end());
        } else if (r.find(p + "attn.c_q.weight")) {
            lw.wq = r.matrix(p + "attn.c_q.weight", d, hd);
            lw.wk = r.matrix(p + "attn.c_k.weight", d, hd);
            lw.wv = r.matrix(p + "attn.c_v.weight", d, hd);
            lw.bq = r.optional_vector(p + "attn.c_q.bias", hd);
            lw.bk = r.optional_vector(p + "attn.c_k.bias", hd);
            lw.bv = r.optional_vector(p + "attn.c_v.bias", hd);
        } else {
            throw DataError(fmt::format("missing tensor '{}attn.c_attn.weight'", p));
        }
        lw.wo = r.matrix(p + "attn.c_proj.weight", hd, d);
        lw.bo = r.vector(p + "attn.c_proj.bias", d);
        lw.ln2_gain = r.vector(p + "ln_2.weight", d);
        lw.ln2_bias = r.vector(p + "ln_2.bias", d);
        lw.w_in = r.matrix(p + "mlp.c_fc.weight", d, m);
        lw.b_in = r.vector(p + "mlp.c_fc.bias", m);
        lw.w_out = r.matrix(p + "mlp.c_proj.weight", m, d);
        lw.b_out = r.vector(p + "mlp.c_proj.bias", d);
        w.layers.push_back(std::move(lw));
    }
    w.final_gain = r.vector("ln_f.weight", d);
    w.final_bias = r.vector("ln_f.bias", d);
    if (f.contains("lm_head.weight")) {
        Reader top(f, "");
        w.unembed = top.matrix("lm_head.weight", v, d);
    } else if (a.tied_embeddings) {
        w.unembed = w.embed;
    } else {
        throw DataError("missing tensor 'lm_head.weight'");
    }
    return w;
}

ModelWeights load_llama(const TensorFile& f, const ArchDescriptor& a) {
    Reader r(f, "model.");
    const auto d = static_cast<std::size_t>(a.d_model);
    const auto hq = static_cast<std::size_t>(a.n_heads * a.d_head);
    const auto hkv = static_cast<std::size_t>(a.n_kv_heads * a.d_head);
    const auto m = static_cast<std::size_t>(a.d_mlp);
    const auto v = static_cast<std::size_t>(a.vocab_size);
    ModelWeights w;
    w.embed = r.matrix("embed_tokens.weight", v, d);
    for (int l = 0; l < a.n_layers; ++l) {
        const std::string p = fmt::format("layers.{}.", l);
        LayerWeights lw;
        lw.ln1_gain = r.vector(p + "input_layernorm.weight", d);
        lw.wq = r.matrix_t(p + "self_attn.q_proj.weight", d, hq);
        lw.wk = r.matrix_t(p + "self_attn.k_proj.weight", d, hkv);
        lw.wv = r.matrix_t(p + "self_attn.v_proj.weight", d, hkv);
        lw.wo = r.matrix_t(p + "self_attn.o_proj.weight", hq, d);
        lw.bq = r.optional_vector(p + "self_attn.q_proj.bias", hq);
        lw.bk = r.optional_vector(p + "self_attn.k_proj.bias", hkv);
        lw.bv = r.optional_vector(p + "self_attn.v_proj.bias", hkv);
        lw.bo = r.optional_vector(p + "self_attn.o_proj.bias", d);
        lw.ln2_gain = r.vector(p + "post_attention_layernorm.weight", d);
        lw.w_gate = r.matrix_t(p + "mlp.gate_proj.weight", d, m);
        lw.w_in = r.matrix_t(p + "mlp.up_proj.weight", d, m);
        lw.w_out = r.matrix_t(p + "mlp.down_proj.weight", m, d);
        w.layers.push_back(std::move(lw));
    }
    w.final_gain = r.vector("norm.weight", d);
    if (f.contains("lm_head.weight")) {
        Reader top(f, "");
        w.unembed = top.matrix("lm_head.weight", v, d);
    } else if (a.tied_embeddings) {
        w.unembed = w.embed;
    } else {
        throw DataError("missing tensor 'lm_head.weight'");
    }
    return w;
}

TensorEntry entry_of(const Matrix& m) { return TensorEntry{DType::F32, {m.rows(), m.cols()}, std::vector<float>(m.values().begin(), m.values().end())}; }
TensorEntry entry_of(const Vector& v) { return TensorEntry{DType::F32, {v.size()}, v}; }

} // namespace

Matrix ModelBundle::w_q(int layer, int head) const {
    return slice_head_cols(weights.layers.at(static_cast<std::size_t>(layer)).wq, head, arch.d_head);
}
Matrix ModelBundle::w_k(int layer, int head) const {
    return slice_head_cols(weights.layers.at(static_cast<std::size_t>(layer)).wk, head / arch.kv_group(), arch.d_head);
}
Matrix ModelBundle::w_v(int layer, int head) const {
    return slice_head_cols(weights.layers.at(static_cast<std::size_t>(layer)).wv, head / arch.kv_group(), arch.d_head);
}
Matrix ModelBundle::w_o(int layer, int head) const {
    const auto& wo = weights.layers.at(static_cast<std::size_t>(layer)).wo;
    return wo.slice_rows(static_cast<std::size_t>(head * arch.d_head), static_cast<std::size_t>((head + 1) * arch.d_head));
}

ModelBundle load_checkpoint(const TensorFile& file, const ArchDescriptor& arch, Tokenizer tokenizer) {
    arch.validate();
    if (tokenizer.vocab_size() > static_cast<std::size_t>(arch.vocab_size))
        throw DataError(fmt::format("tokenizer has {} tokens but the model vocabulary is {}", tokenizer.vocab_size(),
                                    arch.vocab_size));
    ModelBundle b;
    b.arch = arch;
    b.weights = arch.family == Family::gpt2 ? load_gpt2(file, arch) : load_llama(file, arch);
    b.tokenizer = std::move(tokenizer);
    return b;
}

ModelBundle load_model(const fs::path& dir) {
    const fs::path cfg = dir / "config.json";
    std::ifstream in(cfg);
    if (!in) throw ConfigError(fmt::format("cannot open model config {}", cfg.string()));
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("{}: {}", cfg.string(), e.what()));
    }
    const ArchDescriptor arch = ArchDescriptor::from_json(j);
    const fs::path weights = dir / "model.safetensors";
    const TensorFile file = TensorFile::load(weights);
    ModelBundle b = load_checkpoint(file, arch, Tokenizer::load(dir / "vocab.json", dir / "merges.txt"));
    b.name = dir.filename().string();
    if (b.name.empty()) b.name = dir.parent_path().filename().string();
    b.checksum = file_checksum(weights);
    return b;
}

TensorFile to_tensor_file(const ModelBundle& b) {
    const auto& a = b.arch;
    const auto& w = b.weights;
    TensorFile f;
    if (a.family == Family::gpt2) {
        f.put("wte.weight", entry_of(w.embed));
        f.put("wpe.weight", entry_of(w.positional));
        for (int l = 0; l < a.n_layers; ++l) {
            const auto& lw = w.layers[static_cast<std::size_t>(l)];
            const std::string p = fmt::format("h.{}.", l);
            const std::size_t d = lw.wq.rows(), hd = lw.wq.cols();
            Matrix qkv(d, 3 * hd);
            for (std::size_t r = 0; r < d; ++r)
                for (std::size_t c = 0; c < hd; ++c) {
                    qkv(r, c) = lw.wq(r, c);
                    qkv(r, hd + c) = lw.wk(r, c);
                    qkv(r, 2 * hd + c) = lw.wv(r, c);
                }
            Vector bias(3 * hd, 0.0f);
            for (std::size_t c = 0; c < hd; ++c) {
                if (!lw.bq.empty()) bias[c] = lw.bq[c];
                if (!lw.bk.empty()) bias[hd + c] = lw.bk[c];
                if (!lw.bv.empty()) bias[2 * hd + c] = lw.bv[c];
            }
            f.put(p + "ln_1.weight", entry_of(lw.ln1_gain));
            f.put(p + "ln_1.bias", entry_of(lw.ln1_bias));
            f.put(p + "attn.c_attn.weight", entry_of(qkv));
            f.put(p + "attn.c_attn.bias", entry_of(bias));
            f.put(p + "attn.c_proj.weight", entry_of(lw.wo));
            f.put(p + "attn.c_proj.bias", entry_of(lw.bo.empty() ? Vector(d, 0.0f) : lw.bo));
            f.put(p + "ln_2.weight", entry_of(lw.ln2_gain));
            f.put(p + "ln_2.bias", entry_of(lw.ln2_bias));
            f.put(p + "mlp.c_fc.weight", entry_of(lw.w_in));
            f.put(p + "mlp.c_fc.bias", entry_of(lw.b_in.empty() ? Vector(lw.w_in.cols(), 0.0f) : lw.b_in));
            f.put(p + "mlp.c_proj.weight", entry_of(lw.w_out));
            f.put(p + "mlp.c_proj.bias", entry_of(lw.b_out.empty() ? Vector(d, 0.0f) : lw.b_out));
        }
        f.put("ln_f.weight", entry_of(w.final_gain));
        f.put("ln_f.bias", entry_of(w.final_bias));
    } else {
        f.put("model.embed_tokens.weight", entry_of(w.embed));
        for (int l = 0; l < a.n_layers; ++l) {
            const auto& lw = w.layers[static_cast<std::size_t>(l)];
            const std::string p = fmt::format("model.layers.{}.", l);
            f.put(p + "input_layernorm.weight", entry_of(lw.ln1_gain));
            f.put(p + "self_attn.q_proj.weight", entry_of(transpose(lw.wq)));
            f.put(p + "self_attn.k_proj.weight", entry_of(transpose(lw.wk)));
            f.put(p + "self_attn.v_proj.weight", entry_of(transpose(lw.wv)));
            f.put(p + "self_attn.o_proj.weight", entry_of(transpose(lw.wo)));
            if (!lw.bq.empty()) f.put(p + "self_attn.q_proj.bias", entry_of(lw.bq));
            if (!lw.bk.empty()) f.put(p + "self_attn.k_proj.bias", entry_of(lw.bk));
            if (!lw.bv.empty()) f.put(p + "self_attn.v_proj.bias", entry_of(lw.bv));
            if (!lw.bo.empty()) f.put(p + "self_attn.o_proj.bias", entry_of(lw.bo));
            f.put(p + "post_attention_layernorm.weight", entry_of(lw.ln2_gain));
            f.put(p + "mlp.gate_proj.weight", entry_of(transpose(lw.w_gate)));
            f.put(p + "mlp.up_proj.weight", entry_of(transpose(lw.w_in)));
            f.put(p + "mlp.down_proj.weight", entry_of(transpose(lw.w_out)));
        }
        f.put("model.norm.weight", entry_of(w.final_gain));
    }
    if (!a.tied_embeddings) f.put("lm_head.weight", entry_of(w.unembed));
    return f;
}

void save_model(const ModelBundle& b, const fs::path& dir) {
    fs::create_directories(dir);
    to_tensor_file(b).save(dir / "model.safetensors");
    std::ofstream cfg(dir / "config.json", std::ios::binary | std::ios::trunc);
    if (!cfg) throw DataError(fmt::format("cannot write {}", (dir / "config.json").string()));
    cfg << b.arch.to_json().dump(2) << '\n';
    b.tokenizer.save(dir / "vocab.json", dir / "merges.txt");
}

ModelBundle expand_vocab_with_pad(const ModelBundle& bundle, const std::string& pad_token) {
    if (bundle.arch.pad_token_id)
        throw ConfigError(fmt::format("model already has a pad token (id {})", *bundle.arch.pad_token_id));
    ModelBundle out = bundle;
    auto append_mean_row = [](Matrix& m) {
        std::vector<double> acc(m.cols(), 0.0);
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (std::size_t c = 0; c < m.cols(); ++c) acc[c] += m(r, c);
        auto& s = m.storage();
        for (double v : acc) s.push_back(static_cast<float>(v / static_cast<double>(m.rows())));
        m = Matrix(m.rows() + 1, m.cols(), std::move(s));
    };
    append_mean_row(out.weights.embed);
    append_mean_row(out.weights.unembed);
    if (!out.weights.unembed_bias.empty()) {
        double acc = 0.0;
        for (float v : out.weights.unembed_bias) acc += v;
        out.weights.unembed_bias.push_back(static_cast<float>(acc / static_cast<double>(out.weights.unembed_bias.size())));
    }
    const int id = out.arch.vocab_size;
    while (out.tokenizer.vocab_size() < static_cast<std::size_t>(id))
        out.tokenizer.add_special(fmt::format("<|unused_{}|>", out.tokenizer.vocab_size()));
    if (out.tokenizer.add_special(pad_token) != id) throw DataError("tokenizer and embedding sizes disagree");
    out.arch.vocab_size = id + 1;
    out.arch.pad_token_id = id;
    out.checksum = bundle.checksum.empty() ? std::string() : bundle.checksum + "+pad";
    return out;
}

std::string file_checksum(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(fmt::format("cannot open {}", path.string()));
    std::uint64_t h = kFnvOffset;
    std::vector<char> buf(1 << 20);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h = fnv1a64(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())), h);
    }
    return hex64(h);
}

} // namespace pertrace
