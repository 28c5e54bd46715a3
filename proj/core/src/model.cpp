#include "fssam/model.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fssam/errors.hpp"
#include "fssam/ops.hpp"

namespace fssam {

namespace {

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

std::size_t log2_exact(std::size_t v) {
    std::size_t n = 0;
    while (v > 1) {
        v >>= 1;
        ++n;
    }
    return n;
}

std::string block_name(const char* prefix, std::size_t i) { return std::string(prefix) + std::to_string(i); }

Tensor conv(const Tensor& x, const Model& m, const std::string& name, std::size_t stride, std::size_t padding) {
    return ops::add_channel_bias(ops::conv2d(x, m.param(name + ".weight"), stride, padding), m.param(name + ".bias"));
}

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (image_size == 0 || patch == 0 || d_model == 0 || n_heads == 0 || d_mem == 0 || mem_depth == 0) {
        fail("sizes must be positive");
    }
    if (!is_power_of_two(patch) || patch < 2) fail("patch must be a power of two >= 2");
    if (image_size % patch != 0) fail("image_size not divisible by patch");
    if (d_model % n_heads != 0) fail("d_model not divisible by n_heads");
    if (d_model % 4 != 0) fail("d_model not divisible by 4");
    if (d_mem % 4 != 0) fail("d_mem not divisible by 4");
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t d = cfg_.d_model, dm = cfg_.d_mem;

    nn::init_linear(params_, "image_encoder.patch_embed", 3 * cfg_.patch * cfg_.patch, d, rng);
    for (std::size_t i = 0; i < cfg_.enc_depth; ++i) {
        nn::init_transformer_block(params_, block_name("image_encoder.block", i), d, false, rng);
    }

    const std::size_t downs = log2_exact(cfg_.patch);
    for (std::size_t i = 0; i < downs; ++i) {
        nn::init_conv(params_, block_name("memory_encoder.mask_down", i), i == 0 ? 1 : dm, dm, 2, rng);
    }
    nn::init_linear(params_, "memory_encoder.feat_proj", d, dm, rng);
    nn::init_conv(params_, "memory_encoder.fuse0", dm, dm, 3, rng);
    nn::init_conv(params_, "memory_encoder.fuse1", dm, dm, 3, rng);
    nn::init_linear(params_, "memory_encoder.out_proj", dm, dm, rng);

    nn::init_linear(params_, "memory_attention.bank_proj", dm, d, rng);
    for (std::size_t i = 0; i < cfg_.mem_depth; ++i) {
        nn::init_transformer_block(params_, block_name("memory_attention.block", i), d, true, rng);
    }

    nn::init_transformer_block(params_, "mask_decoder.block0", d, false, rng);
    nn::init_decode_stack(params_, "mask_decoder.upsample", d, rng);
}

Tensor Model::linear(std::string_view name, const Tensor& x) const {
    const nn::LinearLayer layer = params_.linear(name);
    if (has_adapter(name)) return lora::lora_forward(layer, adapter(name), x);
    return nn::linear_forward(layer, x);
}

bool Model::has_tensor(std::string_view name) const {
    return params_.contains(name) || adapter_params_.contains(name);
}

const Tensor& Model::tensor(std::string_view name) const {
    if (adapter_params_.contains(name)) return adapter_params_.at(name);
    return params_.at(name);
}

void Model::set_tensor(std::string_view name, Tensor value) {
    if (adapter_params_.contains(name)) {
        adapter_params_.set(name, std::move(value));
    } else {
        params_.set(name, std::move(value));
    }
}

std::vector<std::string> Model::tensor_names() const {
    std::vector<std::string> names = params_.names();
    names.insert(names.end(), adapter_params_.names().begin(), adapter_params_.names().end());
    return names;
}

std::vector<LinearSite> Model::linear_sites() const {
    std::vector<LinearSite> sites;
    for (const auto& name : params_.names()) {
        if (!ends_with(name, ".weight")) continue;
        const Tensor& w = params_.at(name);
        if (w.rank() != 2) continue;
        LinearSite site;
        site.name = name.substr(0, name.size() - 7);
        site.group = *lora::group_of(site.name);
        site.d_out = w.dim(0);
        site.d_in = w.dim(1);
        const auto dot = site.name.rfind('.');
        const std::string_view leaf = std::string_view(site.name).substr(dot + 1);
        const std::string_view parent = std::string_view(site.name).substr(0, dot);
        if (leaf.size() == 1 && ends_with(parent, "attn")) site.projection = lora::parse_projection(leaf);
        sites.push_back(std::move(site));
    }
    return sites;
}

bool Model::has_adapter(std::string_view layer) const {
    return !adapted_.empty() && adapter_params_.contains(std::string(layer) + ".lora_a");
}

lora::LoraAdapter Model::adapter(std::string_view layer) const {
    const std::string base(layer);
    return {base, adapter_params_.at(base + ".lora_a"), adapter_params_.at(base + ".lora_b"), lora_.scale};
}

std::vector<std::string> Model::adapted_layers() const { return adapted_; }

void Model::add_adapter(const std::string& layer, Tensor a, Tensor b) {
    if (!params_.contains(layer + ".weight")) throw WiringError("no linear layer named " + layer);
    adapter_params_.add(layer + ".lora_a", std::move(a));
    adapter_params_.add(layer + ".lora_b", std::move(b));
    adapted_.push_back(layer);
    merged_ = false;
}

void Model::merge_adapters() {
    for (const auto& layer : adapted_) {
        const nn::LinearLayer merged = lora::merge_lora(params_.linear(layer), adapter(layer));
        params_.set(layer + ".weight", merged.weight.detach());
    }
    adapted_.clear();
    adapter_params_ = nn::ParameterSet();
    lora_.rank_by_group.clear();
    merged_ = true;
}

void Model::freeze_all() {
    for (const auto& n : params_.names()) params_.set(n, params_.at(n).detach());
    for (const auto& n : adapter_params_.names()) adapter_params_.set(n, adapter_params_.at(n).detach());
}

FeatureMap encode_image(const Model& model, const Tensor& image) {
    const auto& cfg = model.config();
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.image_size || image.dim(2) != cfg.image_size) {
        throw ShapeError("encode_image: expected [3x" + std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.image_size) + "], got " + shape_str(image.shape()));
    }
    const std::size_t g = cfg.grid();
    Tensor x = nn::patch_embed(image, cfg.patch, model, "image_encoder.patch_embed");
    x = ops::add(x, nn::sinusoidal_positions(g, g, cfg.d_model));
    for (std::size_t i = 0; i < cfg.enc_depth; ++i) {
        x = nn::transformer_block(x, nullptr, cfg.attention(), model, block_name("image_encoder.block", i));
    }
    return {x, g, g};
}

Tensor encode_memory(const Model& model, const FeatureMap& feat, const BinaryMask& mask) {
    const auto& cfg = model.config();
    if (mask.height != cfg.image_size || mask.width != cfg.image_size) {
        throw ShapeError("encode_memory: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " does not match image size " + std::to_string(cfg.image_size));
    }
    if (feat.h != cfg.grid() || feat.w != cfg.grid()) throw ShapeError("encode_memory: feature grid mismatch");

    Tensor m = mask.to_tensor();
    const std::size_t downs = log2_exact(cfg.patch);
    for (std::size_t i = 0; i < downs; ++i) {
        m = conv(m, model, block_name("memory_encoder.mask_down", i), 2, 0);
        if (i + 1 < downs) m = ops::relu(m);
    }
    const Tensor f = nn::tokens_to_grid(model.linear("memory_encoder.feat_proj", feat.tokens), feat.h, feat.w);
    Tensor x = ops::add(f, m);
    x = ops::relu(conv(x, model, "memory_encoder.fuse0", 1, 1));
    x = conv(x, model, "memory_encoder.fuse1", 1, 1);
    return model.linear("memory_encoder.out_proj", nn::grid_to_tokens(x));
}

MemoryBank build_memory_bank(std::span<const Tensor> entries, std::size_t h, std::size_t w) {
    if (entries.empty()) throw ContractError("memory bank needs at least one support frame");
    const Shape shape = entries.front().shape();
    if (shape.size() != 2 || shape[0] != h * w) {
        throw ShapeError("memory entry " + shape_str(shape) + " does not cover a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
    }
    const Tensor pos = nn::sinusoidal_positions(h, w, shape[1]);
    MemoryBank bank;
    std::vector<Tensor> parts;
    parts.reserve(entries.size());
    for (const auto& e : entries) {
        if (e.shape() != shape) {
            throw ShapeError("memory entries differ: " + shape_str(e.shape()) + " vs " + shape_str(shape));
        }
        bank.boundaries.push_back(parts.size() * h * w);
        parts.push_back(ops::add(e, pos));
    }
    bank.tokens = parts.size() == 1 ? parts.front() : ops::concat_rows(parts);
    return bank;
}

FeatureMap memory_attend(const Model& model, const FeatureMap& query, const MemoryBank& bank) {
    const auto& cfg = model.config();
    if (bank.frames() == 0) throw ContractError("memory_attend: empty memory bank");
    if (query.tokens.rank() != 2 || query.tokens.dim(1) != cfg.d_model) {
        throw ShapeError("memory_attend: query tokens " + shape_str(query.tokens.shape()) + " do not match d_model " +
                         std::to_string(cfg.d_model));
    }
    const Tensor memory = model.linear("memory_attention.bank_proj", bank.tokens);
    Tensor x = query.tokens;
    for (std::size_t i = 0; i < cfg.mem_depth; ++i) {
        x = nn::transformer_block(x, &memory, cfg.attention(), model, block_name("memory_attention.block", i));
    }
    return {x, query.h, query.w};
}

SegmentationOutput decode_mask(const Model& model, const FeatureMap& conditioned) {
    const auto& cfg = model.config();
    if (conditioned.h != cfg.grid() || conditioned.w != cfg.grid()) {
        throw ShapeError("decode_mask: grid " + std::to_string(conditioned.h) + "x" + std::to_string(conditioned.w) +
                         " does not match configuration");
    }
    const Tensor x = nn::transformer_block(conditioned.tokens, nullptr, cfg.attention(), model, "mask_decoder.block0");
    Tensor logits = nn::upsample_decode_stack(x, conditioned.h, conditioned.w, cfg.image_size, cfg.image_size, model,
                                              "mask_decoder.upsample");
    BinaryMask mask = BinaryMask::from_logits(logits);
    return {std::move(logits), std::move(mask)};
}

SegmentationOutput segment(const Model& model, const Tensor& query_image, std::span<const SupportItem> support) {
    if (support.empty()) throw ContractError("segment: support set is empty");
    const FeatureMap query = encode_image(model, query_image);
    std::vector<Tensor> entries;
    entries.reserve(support.size());
    for (const auto& s : support) {
        const FeatureMap f = s.image.storage_key() == query_image.storage_key() ? query : encode_image(model, s.image);
        entries.push_back(encode_memory(model, f, s.mask));
    }
    const MemoryBank bank = build_memory_bank(entries, query.h, query.w);
    return decode_mask(model, memory_attend(model, query, bank));
}

// Checkpoint layout:
//   "FSSAM-CKPT 1\n"
//   "config <bytes>\n" key=value lines
//   "manifest <bytes>\n" "kind=<factored|merged>" then "<name> <shape> <offset>" lines
//   "payload <bytes>\n" little-endian IEEE-754 doubles in manifest order

namespace {

std::string hex_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

double parse_double(const std::string& s, const std::string& key) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') throw IngestionError("checkpoint: bad number for " + key + ": " + s);
    return v;
}

std::size_t parse_size(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const auto v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw IngestionError("checkpoint: bad integer for " + key + ": " + s);
    }
}

void put_le(std::string& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>(bits & 0xffu));
        bits >>= 8;
    }
}

double get_le(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
    return std::bit_cast<double>(bits);
}

std::string config_record(const Checkpoint& ckpt) {
    const auto& c = ckpt.model.config();
    const auto& l = ckpt.model.lora_config();
    std::ostringstream os;
    os << "image_size=" << c.image_size << '\n'
       << "patch=" << c.patch << '\n'
       << "d_model=" << c.d_model << '\n'
       << "enc_depth=" << c.enc_depth << '\n'
       << "n_heads=" << c.n_heads << '\n'
       << "mem_depth=" << c.mem_depth << '\n'
       << "d_mem=" << c.d_mem << '\n';
    std::string targets;
    for (auto p : l.targets) {
        if (!targets.empty()) targets += ',';
        targets += lora::projection_letter(p);
    }
    os << "lora.targets=" << targets << '\n' << "lora.scale=" << hex_double(l.scale) << '\n';
    for (const auto& [g, r] : l.rank_by_group) os << "lora.rank." << lora::group_name(g) << '=' << r << '\n';
    os << "strategy=" << ckpt.strategy << '\n'
       << "epoch=" << ckpt.epoch << '\n'
       << "best_val_miou=" << hex_double(ckpt.best_val_miou) << '\n'
       << "predictor=" << (ckpt.oracle ? "oracle" : "network") << '\n';
    return os.str();
}

Shape parse_shape(const std::string& s) {
    if (s.size() < 2 || s.front() != '[' || s.back() != ']') throw IngestionError("checkpoint: bad shape " + s);
    Shape shape;
    if (s.size() == 2) return shape;
    std::stringstream ss(s.substr(1, s.size() - 2));
    std::string part;
    while (std::getline(ss, part, 'x')) shape.push_back(parse_size(part, "shape"));
    return shape;
}

std::string read_section(std::istream& in, const std::string& tag) {
    std::string line;
    if (!std::getline(in, line)) throw IngestionError("checkpoint: missing " + tag + " section");
    std::istringstream hs(line);
    std::string got;
    std::size_t bytes = 0;
    if (!(hs >> got >> bytes) || got != tag) throw IngestionError("checkpoint: expected " + tag + " header");
    std::string body(bytes, '\0');
    if (!in.read(body.data(), static_cast<std::streamsize>(bytes))) {
        throw IngestionError("checkpoint: truncated " + tag + " section");
    }
    return body;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const Model& m = ckpt.model;
    std::string payload;
    std::ostringstream manifest;
    manifest << "kind=" << (m.merged() ? "merged" : "factored") << '\n';
    for (const auto& name : m.tensor_names()) {
        const Tensor& t = m.tensor(name);
        manifest << name << ' ' << shape_str(t.shape()) << ' ' << payload.size() << '\n';
        for (double v : t.data()) put_le(payload, v);
    }
    const std::string config = config_record(ckpt);
    const std::string man = manifest.str();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write checkpoint " + path.string());
    out << "FSSAM-CKPT 1\n";
    out << "config " << config.size() << '\n' << config;
    out << "manifest " << man.size() << '\n' << man;
    out << "payload " << payload.size() << '\n';
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IngestionError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open checkpoint " + path.string());
    std::string magic;
    std::getline(in, magic);
    if (magic != "FSSAM-CKPT 1") throw IngestionError("not a checkpoint file: " + path.string());

    std::map<std::string, std::string> kv;
    {
        std::istringstream cs(read_section(in, "config"));
        std::string line;
        while (std::getline(cs, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw IngestionError("checkpoint: bad config line " + line);
            kv[line.substr(0, eq)] = line.substr(eq + 1);
        }
    }
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw IngestionError("checkpoint: missing config key " + key);
        return it->second;
    };

    Checkpoint ckpt{Model(), 0.0, 0, false, "none"};
    Model& m = ckpt.model;
    m.cfg_.image_size = parse_size(need("image_size"), "image_size");
    m.cfg_.patch = parse_size(need("patch"), "patch");
    m.cfg_.d_model = parse_size(need("d_model"), "d_model");
    m.cfg_.enc_depth = parse_size(need("enc_depth"), "enc_depth");
    m.cfg_.n_heads = parse_size(need("n_heads"), "n_heads");
    m.cfg_.mem_depth = parse_size(need("mem_depth"), "mem_depth");
    m.cfg_.d_mem = parse_size(need("d_mem"), "d_mem");
    try {
        m.cfg_.validate();
    } catch (const ConfigError& e) {
        throw IngestionError(std::string("checkpoint: ") + e.what());
    }
    m.lora_.targets.clear();
    {
        std::stringstream ts(need("lora.targets"));
        std::string p;
        while (std::getline(ts, p, ',')) m.lora_.targets.insert(lora::parse_projection(p));
    }
    m.lora_.scale = parse_double(need("lora.scale"), "lora.scale");
    for (const auto& [k, v] : kv) {
        if (k.rfind("lora.rank.", 0) == 0) {
            m.lora_.rank_by_group[lora::parse_group(k.substr(10))] = parse_size(v, k);
        }
    }
    ckpt.strategy = need("strategy");
    ckpt.epoch = static_cast<long>(std::stol(need("epoch")));
    ckpt.best_val_miou = parse_double(need("best_val_miou"), "best_val_miou");
    ckpt.oracle = need("predictor") == "oracle";

    const std::string manifest = read_section(in, "manifest");
    const std::string payload = read_section(in, "payload");
    std::istringstream ms(manifest);
    std::string line;
    std::getline(ms, line);
    if (line == "kind=merged") {
        m.merged_ = true;
    } else if (line != "kind=factored") {
        throw IngestionError("checkpoint: bad manifest kind " + line);
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
    while (std::getline(ms, line)) {
        std::istringstream ls(line);
        std::string name, shape_s;
        std::size_t offset = 0;
        if (!(ls >> name >> shape_s >> offset)) throw IngestionError("checkpoint: bad manifest line " + line);
        const Shape shape = parse_shape(shape_s);
        const std::size_t n = shape_numel(shape);
        if (offset + 8 * n > payload.size()) throw IngestionError("checkpoint: tensor " + name + " out of bounds");
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i) values[i] = get_le(bytes + offset + 8 * i);
        Tensor t(shape, std::move(values));
        if (ends_with(name, ".lora_a") || ends_with(name, ".lora_b")) {
            m.adapter_params_.add(name, std::move(t));
            if (ends_with(name, ".lora_a")) m.adapted_.push_back(name.substr(0, name.size() - 7));
        } else {
            m.params_.add(name, std::move(t));
        }
    }
    const Model reference(m.cfg_, 0);
    bool same = reference.params().names() == m.params_.names();
    for (std::size_t i = 0; same && i < m.params_.size(); ++i) {
        const auto& n = m.params_.names()[i];
        same = reference.params().at(n).shape() == m.params_.at(n).shape();
    }
    if (!same) {
        throw IngestionError("checkpoint: parameter manifest does not match the model configuration");
    }
    return ckpt;
}

}  // namespace fssam
