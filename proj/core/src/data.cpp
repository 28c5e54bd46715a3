#include "fssam/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "fssam/errors.hpp"

namespace fssam {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- folds

const std::vector<int>& FoldSpec::test_classes(std::size_t fold) const {
    if (fold >= fold_classes.size()) {
        throw ConfigError("fold " + std::to_string(fold) + " out of range (" + std::to_string(n_folds) + " folds)");
    }
    return fold_classes[fold];
}

std::vector<int> FoldSpec::train_classes(std::size_t fold) const {
    const auto& test = test_classes(fold);
    std::vector<int> out;
    for (const auto& f : fold_classes)
        for (int c : f)
            if (std::find(test.begin(), test.end(), c) == test.end()) out.push_back(c);
    std::sort(out.begin(), out.end());
    return out;
}

FoldSpec make_folds(std::vector<int> class_ids, std::size_t n_folds) {
    std::sort(class_ids.begin(), class_ids.end());
    if (std::adjacent_find(class_ids.begin(), class_ids.end()) != class_ids.end()) {
        throw ConfigError("make_folds: duplicate class ids");
    }
    if (n_folds == 0 || class_ids.empty() || class_ids.size() % n_folds != 0) {
        throw ConfigError("make_folds: " + std::to_string(class_ids.size()) + " classes cannot be split evenly into " +
                          std::to_string(n_folds) + " folds");
    }
    FoldSpec spec;
    spec.n_folds = n_folds;
    const std::size_t per = class_ids.size() / n_folds;
    for (std::size_t i = 0; i < n_folds; ++i) {
        spec.fold_classes.emplace_back(class_ids.begin() + static_cast<long>(i * per),
                                       class_ids.begin() + static_cast<long>((i + 1) * per));
    }
    return spec;
}

// ---------------------------------------------------------------- index

std::vector<int> DatasetIndex::classes() const {
    std::vector<int> out;
    for (const auto& [c, imgs] : by_class_)
        if (!imgs.empty()) out.push_back(c);
    return out;
}

const std::vector<std::size_t>& DatasetIndex::images_of(int class_id) const {
    static const std::vector<std::size_t> kNone;
    auto it = by_class_.find(class_id);
    return it == by_class_.end() ? kNone : it->second;
}

Tensor DatasetIndex::load_image(std::size_t i) const {
    if (i < images_.size()) return images_[i];
    return read_ppm(root_ / "images" / (entry(i).id + ".ppm"));
}

BinaryMask DatasetIndex::load_mask(std::size_t i, int class_id) const {
    if (i < masks_.size()) {
        auto it = masks_[i].find(class_id);
        if (it == masks_[i].end()) {
            throw IngestionError("image " + entry(i).id + " has no mask for class " + std::to_string(class_id));
        }
        return it->second;
    }
    return read_pgm(root_ / "masks" / std::to_string(class_id) / (entry(i).id + ".pgm"));
}

void DatasetIndex::add_class(int id, std::string name) { names_[id] = std::move(name); }

void DatasetIndex::add_image(std::string id, Tensor image, std::map<int, BinaryMask> masks) {
    Entry e{std::move(id), {}};
    for (const auto& [c, m] : masks) {
        e.classes.push_back(c);
        by_class_[c].push_back(entries_.size());
        if (!names_.count(c)) names_[c] = "class" + std::to_string(c);
    }
    entries_.push_back(std::move(e));
    images_.push_back(std::move(image));
    masks_.push_back(std::move(masks));
}

DatasetIndex load_dataset(const fs::path& root) {
    DatasetIndex index;
    const fs::path classes_file = root / "classes.txt";
    if (!fs::exists(classes_file)) return index;
    index.root_ = root;

    std::ifstream cf(classes_file);
    std::string line;
    std::vector<int> ids;
    while (std::getline(cf, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        int id = 0;
        std::string name;
        if (!(ls >> id)) throw IngestionError("bad line in " + classes_file.string() + ": " + line);
        std::getline(ls >> std::ws, name);
        index.names_[id] = name.empty() ? "class" + std::to_string(id) : name;
        ids.push_back(id);
    }

    std::map<std::string, std::vector<int>> membership;
    for (int c : ids) {
        const fs::path dir = root / "masks" / std::to_string(c);
        if (!fs::exists(dir)) continue;
        for (const auto& f : fs::directory_iterator(dir)) {
            if (f.path().extension() != ".pgm") continue;
            const std::string image_id = f.path().stem().string();
            const fs::path image = root / "images" / (image_id + ".ppm");
            if (!fs::exists(image)) throw IngestionError("mask without image: " + f.path().string());
            membership[image_id].push_back(c);
        }
    }

    const fs::path listing = root / "index.txt";
    if (fs::exists(listing)) {
        std::ifstream lf(listing);
        while (std::getline(lf, line)) {
            std::istringstream ls(line);
            std::string image_id;
            if (!(ls >> image_id)) continue;
            int c = 0;
            while (ls >> c) {
                const fs::path mask = root / "masks" / std::to_string(c) / (image_id + ".pgm");
                if (!fs::exists(mask)) throw IngestionError("missing mask " + mask.string());
            }
        }
    }

    for (auto& [image_id, cls] : membership) {
        std::sort(cls.begin(), cls.end());
        for (int c : cls) index.by_class_[c].push_back(index.entries_.size());
        index.entries_.push_back({image_id, cls});
    }
    return index;
}

void write_dataset(const fs::path& root, const DatasetIndex& index) {
    fs::create_directories(root / "images");
    {
        std::ofstream cf(root / "classes.txt", std::ios::trunc);
        for (const auto& [id, name] : index.class_names()) cf << id << ' ' << name << '\n';
        if (!cf) throw IngestionError("cannot write " + (root / "classes.txt").string());
    }
    std::ofstream lf(root / "index.txt", std::ios::trunc);
    for (std::size_t i = 0; i < index.size(); ++i) {
        const auto& e = index.entry(i);
        write_ppm(root / "images" / (e.id + ".ppm"), index.load_image(i));
        lf << e.id;
        for (int c : e.classes) {
            fs::create_directories(root / "masks" / std::to_string(c));
            write_pgm(root / "masks" / std::to_string(c) / (e.id + ".pgm"), index.load_mask(i, c));
            lf << ' ' << c;
        }
        lf << '\n';
    }
    if (!lf) throw IngestionError("cannot write " + (root / "index.txt").string());
}

// ---------------------------------------------------------------- samplers

std::string_view sampler_name(SamplerKind kind) {
    return kind == SamplerKind::query_first ? "query_first" : "class_first";
}

SamplerKind parse_sampler(std::string_view name) {
    if (name == "query_first") return SamplerKind::query_first;
    if (name == "class_first") return SamplerKind::class_first;
    throw ConfigError("unknown sampler '" + std::string(name) + "'");
}

namespace {

std::vector<std::size_t> pick_support(const DatasetIndex& index, int class_id, std::size_t query, std::size_t k,
                                      Rng& rng) {
    std::vector<std::size_t> others;
    for (auto i : index.images_of(class_id))
        if (i != query) others.push_back(i);
    if (others.size() < k) {
        throw SamplingError("class " + std::to_string(class_id) + " has " + std::to_string(others.size() + 1) +
                            " images; " + std::to_string(k + 1) + " needed for a " + std::to_string(k) +
                            "-shot episode");
    }
    std::vector<std::size_t> support;
    for (auto j : rng.choose(others.size(), k)) support.push_back(others[j]);
    return support;
}

std::set<int> eligible_set(const std::vector<int>& eligible) { return {eligible.begin(), eligible.end()}; }

}  // namespace

EpisodeDraw draw_query_first(const DatasetIndex& index, const std::vector<int>& eligible, std::size_t k, Rng& rng) {
    if (k == 0) throw ContractError("episodes need K >= 1");
    const auto elig = eligible_set(eligible);
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < index.size(); ++i) {
        for (int c : index.entry(i).classes) {
            if (elig.count(c)) {
                candidates.push_back(i);
                break;
            }
        }
    }
    if (candidates.empty()) throw SamplingError("no image holds any eligible class");
    EpisodeDraw d;
    d.query = candidates[rng.below(candidates.size())];
    std::vector<int> present;
    for (int c : index.entry(d.query).classes)
        if (elig.count(c)) present.push_back(c);
    d.class_id = present[rng.below(present.size())];
    d.support = pick_support(index, d.class_id, d.query, k, rng);
    return d;
}

EpisodeDraw draw_class_first(const DatasetIndex& index, const std::vector<int>& eligible, std::size_t k, Rng& rng) {
    if (k == 0) throw ContractError("episodes need K >= 1");
    std::vector<int> present;
    for (int c : eligible_set(eligible))
        if (!index.images_of(c).empty()) present.push_back(c);
    if (present.empty()) throw SamplingError("no eligible class has images");
    EpisodeDraw d;
    d.class_id = present[rng.below(present.size())];
    const auto& imgs = index.images_of(d.class_id);
    if (imgs.size() < k + 1) {
        throw SamplingError("class " + std::to_string(d.class_id) + " has " + std::to_string(imgs.size()) +
                            " images; " + std::to_string(k + 1) + " needed for a " + std::to_string(k) +
                            "-shot episode");
    }
    d.query = imgs[rng.below(imgs.size())];
    d.support = pick_support(index, d.class_id, d.query, k, rng);
    return d;
}

EpisodeDraw draw_episode(SamplerKind kind, const DatasetIndex& index, const std::vector<int>& eligible,
                         std::size_t k, Rng& rng) {
    return kind == SamplerKind::query_first ? draw_query_first(index, eligible, k, rng)
                                            : draw_class_first(index, eligible, k, rng);
}

Episode materialize(const DatasetIndex& index, const EpisodeDraw& draw) {
    Episode ep;
    ep.class_id = draw.class_id;
    ep.query_image = index.load_image(draw.query);
    ep.query_mask = index.load_mask(draw.query, draw.class_id);
    ep.query_id = index.entry(draw.query).id;
    for (auto i : draw.support) {
        ep.support.push_back({index.load_image(i), index.load_mask(i, draw.class_id)});
        ep.support_ids.push_back(index.entry(i).id);
    }
    return ep;
}

Episode sample_episode_query_first(const DatasetIndex& index, const std::vector<int>& eligible, std::size_t k,
                                   Rng& rng) {
    return materialize(index, draw_query_first(index, eligible, k, rng));
}

Episode sample_episode_class_first(const DatasetIndex& index, const std::vector<int>& eligible, std::size_t k,
                                   Rng& rng) {
    return materialize(index, draw_class_first(index, eligible, k, rng));
}

// ---------------------------------------------------------------- synthetic scenes

std::vector<int> SyntheticConfig::class_ids() const {
    std::vector<int> ids(n_classes());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i + 1);
    return ids;
}

void SyntheticConfig::validate() const {
    if (n_shapes == 0 || n_textures == 0) throw ConfigError("synthetic vocabulary is empty");
    if (n_shapes > kShapeKinds || n_textures > kTextureFamilies) {
        throw ConfigError("synthetic vocabulary exceeds " + std::to_string(kShapeKinds) + " shapes x " +
                          std::to_string(kTextureFamilies) + " textures");
    }
    if (image_size < 8) throw ConfigError("synthetic image_size must be at least 8");
    if (images_per_class < 2) throw ConfigError("images_per_class must be at least 2");
}

ShapeKind class_shape(int class_id) { return static_cast<ShapeKind>(((class_id - 1) / 2) % 8); }
int class_texture(int class_id) { return (class_id - 1) % 2; }

double class_hue(int class_id, std::size_t n_classes) {
    const std::size_t n = std::max<std::size_t>(1, n_classes);
    std::size_t stride = n / 4 + 1;
    while (std::gcd(stride, n) != 1) ++stride;
    return static_cast<double>((static_cast<std::size_t>(class_id - 1) * stride) % n) / static_cast<double>(n);
}

std::string_view similarity_name(Similarity s) { return s == Similarity::video_like ? "video_like" : "independent"; }

bool shape_contains(ShapeKind kind, double u, double v) {
    const double r2 = u * u + v * v;
    const double au = std::abs(u), av = std::abs(v);
    switch (kind) {
        case ShapeKind::disk: return r2 <= 1.0;
        case ShapeKind::square: return au <= 0.8 && av <= 0.8;
        case ShapeKind::triangle: return v <= 0.8 && v >= -0.9 && au <= (v + 0.9) * (0.95 / 1.7);
        case ShapeKind::ring: return r2 <= 1.0 && r2 >= 0.5 * 0.5;
        case ShapeKind::cross: return (au <= 0.35 && av <= 0.95) || (av <= 0.35 && au <= 0.95);
        case ShapeKind::diamond: return au + av <= 1.0;
        case ShapeKind::bar: return au <= 1.0 && av <= 0.5;
        case ShapeKind::chevron: {
            const double d = v - (0.9 * au - 0.55);
            return au <= 0.95 && d >= 0.0 && d <= 0.6;
        }
    }
    return false;
}

namespace {

struct Rgb {
    double r, g, b;
};

Rgb hsv(double h, double s, double v) {
    h = h - std::floor(h);
    const double x = h * 6.0;
    const int i = static_cast<int>(x) % 6;
    const double f = x - std::floor(x);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

Rgb background_color(const Scene& s, double x, double y, double size) {
    const double ca = std::cos(s.bg_angle), sa = std::sin(s.bg_angle);
    const double along = (x * ca + y * sa) / size;
    if (s.background_id % 2 == 0) {
        const double g = 0.42 + 0.12 * std::sin(2.0 * std::numbers::pi * (along + s.bg_phase));
        return {g, g, g};
    }
    // Tinted blocks on a rotated lattice.
    const double across = (-x * sa + y * ca) / size;
    const long bx = static_cast<long>(std::floor(along * 6.0 + s.bg_phase * 6.0));
    const long by = static_cast<long>(std::floor(across * 6.0));
    const bool odd = ((bx + by) % 2 + 2) % 2 == 1;
    const double tint = 0.08 * (s.background_id / 2 % 3);
    return odd ? Rgb{0.22 + tint, 0.33, 0.42} : Rgb{0.55, 0.45 - tint, 0.30};
}

Rgb object_color(const SceneObject& o, double x, double y, double size) {
    Rgb c = hsv(o.hue, 0.85, o.value);
    if (class_texture(o.class_id) == 1) {
        const double period = size / 12.0;
        if (static_cast<long>(std::floor((x + y) / period + o.stripe_phase)) % 2 == 0) {
            c = {c.r * 0.45, c.g * 0.45, c.b * 0.45};
        }
    }
    return c;
}

int label_at(const Scene& scene, double x, double y) {
    int label = -1;
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        if (shape_contains(class_shape(o.class_id), (x - o.cx) / o.radius, (y - o.cy) / o.radius)) {
            label = static_cast<int>(i);
        }
    }
    return label;
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

SceneObject random_object(int class_id, double size, double rmin, double rmax, double margin_frac,
                          std::size_t n_classes, Rng& rng) {
    SceneObject o;
    o.class_id = class_id;
    o.radius = rng.uniform(rmin, rmax) * size;
    const double margin = o.radius + margin_frac * size + 1.0;
    o.cx = rng.uniform(margin, size - margin);
    o.cy = rng.uniform(margin, size - margin);
    o.hue = class_hue(class_id, n_classes) + rng.uniform(-0.015, 0.015);
    o.value = rng.uniform(0.75, 1.0);
    o.stripe_phase = rng.uniform(0.0, 2.0);
    return o;
}

}  // namespace

BinaryMask Rendering::mask_of(int class_id) const {
    BinaryMask m(size, size);
    for (std::size_t i = 0; i < labels.size(); ++i)
        m.bits[i] = labels[i] >= 0 && object_classes[static_cast<std::size_t>(labels[i])] == class_id;
    return m;
}

namespace {

/// Fraction of the object's own footprint left visible by the objects above it.
double visible_fraction(const Scene& scene, std::size_t which, double size) {
    const auto& o = scene.objects[which];
    std::size_t own = 0, visible = 0;
    const long n = static_cast<long>(size);
    for (long y = 0; y < n; ++y) {
        for (long x = 0; x < n; ++x) {
            const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
            if (!shape_contains(class_shape(o.class_id), (px - o.cx) / o.radius, (py - o.cy) / o.radius)) continue;
            ++own;
            visible += label_at(scene, px, py) == static_cast<int>(which);
        }
    }
    return own ? static_cast<double>(visible) / static_cast<double>(own) : 0.0;
}

}  // namespace

Scene random_scene(const SyntheticConfig& cfg, int class_id, Rng& rng) {
    const double size = static_cast<double>(cfg.image_size);
    const std::size_t n = cfg.n_classes();
    Scene s;
    s.background_id = cfg.background_id;
    s.bg_phase = rng.uniform();
    s.bg_angle = rng.uniform(0.0, std::numbers::pi);
    // Target and distractors share one size and placement distribution, and
    // the target's depth is random, so only appearance tells them apart.
    std::vector<int> pool;
    if (cfg.distractor_pool.empty()) {
        for (int c : cfg.class_ids())
            if (c != class_id) pool.push_back(c);
    } else {
        for (int c : cfg.distractor_pool)
            if (c != class_id) pool.push_back(c);
    }
    for (int attempt = 0;; ++attempt) {
        s.objects.clear();
        for (std::size_t i = 0; i < cfg.clutter && !pool.empty(); ++i) {
            const int other = pool[rng.below(pool.size())];
            s.objects.push_back(random_object(other, size, 0.15, 0.22, 0.06, n, rng));
        }
        const std::size_t depth = rng.below(s.objects.size() + 1);
        s.objects.insert(s.objects.begin() + static_cast<long>(depth),
                         random_object(class_id, size, 0.15, 0.22, 0.06, n, rng));
        if (visible_fraction(s, depth, size) >= 0.6) return s;
        if (attempt == 15) {
            std::rotate(s.objects.begin() + static_cast<long>(depth), s.objects.begin() + static_cast<long>(depth) + 1,
                        s.objects.end());
            return s;
        }
    }
}

Rendering render_scene(const Scene& scene, const Similarity2D& view, std::size_t size, Rng& noise) {
    const double fs = static_cast<double>(size);
    std::vector<double> px(3 * size * size);
    Rendering r;
    r.size = size;
    r.labels.assign(size * size, -1);
    for (const auto& o : scene.objects) r.object_classes.push_back(o.class_id);
    for (std::size_t yi = 0; yi < size; ++yi) {
        for (std::size_t xi = 0; xi < size; ++xi) {
            const double x = (static_cast<double>(xi) + 0.5 - view.tx) / view.scale;
            const double y = (static_cast<double>(yi) + 0.5 - view.ty) / view.scale;
            const int label = label_at(scene, x, y);
            Rgb c = label < 0 ? background_color(scene, x, y, fs)
                              : object_color(scene.objects[static_cast<std::size_t>(label)], x, y, fs);
            const std::size_t at = yi * size + xi;
            r.labels[at] = label;
            px[at] = quantize(c.r + 0.02 * noise.normal());
            px[size * size + at] = quantize(c.g + 0.02 * noise.normal());
            px[2 * size * size + at] = quantize(c.b + 0.02 * noise.normal());
        }
    }
    r.image = Tensor({3, size, size}, std::move(px));
    return r;
}

void check_rendering(const Scene& scene, const Similarity2D& view, const Rendering& r) {
    for (std::size_t yi = 0; yi < r.size; ++yi) {
        for (std::size_t xi = 0; xi < r.size; ++xi) {
            const int label = r.labels[yi * r.size + xi];
            if (label < 0) continue;
            const auto& o = scene.objects.at(static_cast<std::size_t>(label));
            const double x = (static_cast<double>(xi) + 0.5 - view.tx) / view.scale;
            const double y = (static_cast<double>(yi) + 0.5 - view.ty) / view.scale;
            if (!shape_contains(class_shape(o.class_id), (x - o.cx) / o.radius, (y - o.cy) / o.radius) ||
                r.object_classes.at(static_cast<std::size_t>(label)) != o.class_id) {
                throw ContractError("rasterizer: pixel (" + std::to_string(xi) + ", " + std::to_string(yi) +
                                    ") labelled outside its shape");
            }
        }
    }
}

Similarity2D random_jitter(std::size_t size, Rng& rng) {
    const double fs = static_cast<double>(size);
    Similarity2D v;
    v.scale = rng.uniform(1.0 - kJitter, 1.0 + kJitter);
    // Scale about the image centre, then translate.
    const double c = fs / 2.0;
    v.tx = c - v.scale * c + rng.uniform(-kJitter, kJitter) * fs;
    v.ty = c - v.scale * c + rng.uniform(-kJitter, kJitter) * fs;
    return v;
}

BinaryMask warp_back(const BinaryMask& mask, const Similarity2D& view) {
    BinaryMask out(mask.height, mask.width);
    for (std::size_t y = 0; y < mask.height; ++y) {
        for (std::size_t x = 0; x < mask.width; ++x) {
            const double sx = view.scale * (static_cast<double>(x) + 0.5) + view.tx;
            const double sy = view.scale * (static_cast<double>(y) + 0.5) + view.ty;
            const long ix = static_cast<long>(std::floor(sx)), iy = static_cast<long>(std::floor(sy));
            if (ix < 0 || iy < 0 || ix >= static_cast<long>(mask.width) || iy >= static_cast<long>(mask.height)) continue;
            out.at(y, x) = mask.at(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
        }
    }
    return out;
}

Episode generate_synthetic_episode(const SyntheticConfig& cfg, int class_id, std::size_t k, Similarity similarity,
                                   Rng& rng) {
    if (class_id < 1 || static_cast<std::size_t>(class_id) > cfg.n_classes()) {
        throw ConfigError("class " + std::to_string(class_id) + " is not in the synthetic vocabulary");
    }
    if (k == 0) throw ContractError("episodes need K >= 1");
    const std::size_t size = cfg.image_size;
    Episode ep;
    ep.class_id = class_id;
    ep.query_id = "query";
    const Scene scene = random_scene(cfg, class_id, rng);
    const Rendering q = render_scene(scene, {}, size, rng);
    ep.query_image = q.image;
    ep.query_mask = q.mask_of(class_id);
    for (std::size_t i = 0; i < k; ++i) {
        Rendering s;
        for (int attempt = 0;; ++attempt) {
            if (similarity == Similarity::video_like) {
                s = render_scene(scene, random_jitter(size, rng), size, rng);
            } else {
                s = render_scene(random_scene(cfg, class_id, rng), {}, size, rng);
            }
            if (s.mask_of(class_id).count() > 0 || attempt > 16) break;
        }
        ep.support.push_back({s.image, s.mask_of(class_id)});
        ep.support_ids.push_back("support" + std::to_string(i));
    }
    return ep;
}

DatasetIndex build_synthetic_dataset(const SyntheticConfig& cfg, const std::vector<int>& classes) {
    cfg.validate();
    static constexpr const char* kShapeNames[] = {"disk", "square", "triangle", "ring",
                                                  "cross", "diamond", "bar", "chevron"};
    DatasetIndex index;
    const std::set<int> wanted(classes.begin(), classes.end());
    SyntheticConfig scene_cfg = cfg;
    scene_cfg.distractor_pool = classes;
    for (int c : classes) {
        index.add_class(c, std::string(kShapeNames[static_cast<int>(class_shape(c))]) +
                               (class_texture(c) ? "_striped" : "_solid"));
    }
    for (int c : classes) {
        for (std::size_t j = 0; j < cfg.images_per_class; ++j) {
            Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(c) * 100003 + j));
            const Scene scene = random_scene(scene_cfg, c, rng);
            const Rendering r = render_scene(scene, {}, cfg.image_size, rng);
            std::map<int, BinaryMask> masks;
            for (const auto& o : scene.objects) {
                if (!wanted.count(o.class_id) || masks.count(o.class_id)) continue;
                BinaryMask m = r.mask_of(o.class_id);
                if (m.count() > 0) masks.emplace(o.class_id, std::move(m));
            }
            char id[32];
            std::snprintf(id, sizeof id, "c%02d_%03zu", c, j);
            index.add_image(id, r.image, std::move(masks));
        }
    }
    return index;
}

// ---------------------------------------------------------------- netpbm

namespace {

std::size_t read_header_number(std::istream& in, const fs::path& path) {
    while (true) {
        const int ch = in.peek();
        if (ch == '#') {
            std::string comment;
            std::getline(in, comment);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            break;
        }
    }
    std::size_t v = 0;
    if (!(in >> v)) throw IngestionError("malformed netpbm header in " + path.string());
    return v;
}

std::vector<unsigned char> read_netpbm(const fs::path& path, const char* magic, std::size_t channels,
                                       std::size_t& w, std::size_t& h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open " + path.string());
    std::string m;
    in >> m;
    if (m != magic) throw IngestionError(path.string() + " is not a binary " + magic + " file");
    w = read_header_number(in, path);
    h = read_header_number(in, path);
    const std::size_t maxval = read_header_number(in, path);
    if (maxval != 255) throw IngestionError(path.string() + ": only maxval 255 is supported");
    in.get();
    std::vector<unsigned char> data(w * h * channels);
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()))) {
        throw IngestionError("truncated pixel data in " + path.string());
    }
    return data;
}

void write_netpbm(const fs::path& path, const char* magic, std::size_t w, std::size_t h,
                  const std::vector<unsigned char>& data) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write " + path.string());
    out << magic << '\n' << w << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IngestionError("failed writing " + path.string());
}

}  // namespace

void write_ppm(const fs::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm expects [3 x H x W]");
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::vector<unsigned char> data(3 * w * h);
    for (std::size_t i = 0; i < w * h; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            data[3 * i + c] = static_cast<unsigned char>(std::lround(std::clamp(image[c * w * h + i], 0.0, 1.0) * 255.0));
    write_netpbm(path, "P6", w, h, data);
}

Tensor read_ppm(const fs::path& path) {
    std::size_t w = 0, h = 0;
    const auto data = read_netpbm(path, "P6", 3, w, h);
    std::vector<double> v(3 * w * h);
    for (std::size_t i = 0; i < w * h; ++i)
        for (std::size_t c = 0; c < 3; ++c) v[c * w * h + i] = data[3 * i + c] / 255.0;
    return Tensor({3, h, w}, std::move(v));
}

void write_pgm(const fs::path& path, const BinaryMask& mask) {
    std::vector<unsigned char> data(mask.bits.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = mask.bits[i] ? 255 : 0;
    write_netpbm(path, "P5", mask.width, mask.height, data);
}

BinaryMask read_pgm(const fs::path& path) {
    std::size_t w = 0, h = 0;
    const auto data = read_netpbm(path, "P5", 1, w, h);
    BinaryMask m(h, w);
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data[i] != 0 && data[i] != 255) {
            throw IngestionError("non-binary mask value " + std::to_string(data[i]) + " in " + path.string());
        }
        m.bits[i] = data[i] ? 1 : 0;
    }
    return m;
}

}  // namespace fssam
