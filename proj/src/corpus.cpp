#include "wsclip/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "wsclip/checkpoint.hpp"
#include "wsclip/config.hpp"
#include "wsclip/errors.hpp"

namespace wsclip {

void SyntheticSpec::validate() const {
    if (image_size < 8) throw ConfigError("corpus: image_size must be >= 8");
    if (classes < 2 || classes > static_cast<std::int64_t>(shape_class_names().size()))
        throw ConfigError("corpus: classes must lie in [2, " +
                          std::to_string(shape_class_names().size()) + "]");
    if (colors < 1 || colors > static_cast<std::int64_t>(color_names().size()))
        throw ConfigError("corpus: colors must lie in [1, " +
                          std::to_string(color_names().size()) + "]");
    if (train_samples <= 0 || val_samples < 0 || test_samples <= 0 || hard_test_samples < 0)
        throw ConfigError("corpus: sample counts must be positive");
}

Tensor CorpusSplit::image(std::int64_t i) const {
    if (i < 0 || i >= size()) throw InputError("corpus split: sample index out of range");
    const std::int64_t per = images.size() / images.dim(0);
    std::vector<double> v(images.values().begin() + i * per,
                          images.values().begin() + (i + 1) * per);
    return Tensor({images.dim(1), images.dim(2), images.dim(3)}, std::move(v));
}

const CorpusSplit& Corpus::split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw InputError("corpus: no split named '" + name + "'");
    return it->second;
}

const std::vector<std::string>& shape_class_names() {
    static const std::vector<std::string> kNames = {"circle", "ring",    "square", "diamond",
                                                    "triangle", "cross", "saltire", "stripes",
                                                    "checker", "star"};
    return kNames;
}

const std::vector<std::string>& color_names() {
    static const std::vector<std::string> kNames = {"red",  "green",   "blue",   "yellow",
                                                    "cyan", "magenta", "orange", "white"};
    return kNames;
}

namespace {

struct Rgb {
    double r, g, b;
};

const Rgb kPalette[8] = {{0.90, 0.10, 0.10}, {0.10, 0.85, 0.10}, {0.15, 0.20, 0.95},
                         {0.95, 0.90, 0.10}, {0.10, 0.90, 0.90}, {0.90, 0.15, 0.90},
                         {0.95, 0.55, 0.10}, {0.95, 0.95, 0.95}};

const char* kColorTemplates[5] = {
    "a photo of a {c} {s}", "a picture of a {c} {s}", "this is a {c} {s}",
    "the {s} is {c}", "a {c} {s} on a textured background"};

const char* kPlainTemplates[5] = {
    "a photo of a {s}", "an image of a {s}", "a picture of a {s}", "this is a {s}",
    "a {s} on a textured background"};

bool inside_shape(std::int64_t cls, double u, double v) {
    const double au = std::abs(u), av = std::abs(v);
    switch (cls) {
        case 0: return u * u + v * v <= 1.0;                       // circle
        case 1: {                                                  // ring
            const double r = std::sqrt(u * u + v * v);
            return r >= 0.55 && r <= 1.0;
        }
        case 2: return au <= 0.85 && av <= 0.85;                   // square
        case 3: return au + av <= 1.1;                             // diamond
        case 4: return v <= 0.85 && au <= 0.5 * (v + 1.0);         // triangle (apex up)
        case 5: return (au <= 0.3 || av <= 0.3) && au <= 1 && av <= 1;  // cross
        case 6: return std::abs(au - av) <= 0.3 && au <= 1 && av <= 1;  // saltire
        case 7: return au <= 0.9 && av <= 0.9 &&
                       (static_cast<int>(std::floor((v + 1.0) * 2.0)) % 2 == 0);  // stripes
        case 8: return au <= 0.9 && av <= 0.9 &&
                       ((static_cast<int>(std::floor((u + 1.0) * 1.5)) +
                         static_cast<int>(std::floor((v + 1.0) * 1.5))) % 2 == 0);  // checker
        case 9: return std::pow(au, 2.0 / 3.0) + std::pow(av, 2.0 / 3.0) <= 1.0;   // star
        default: throw ConfigError("corpus: shape class out of range");
    }
}

void render(double* img, std::int64_t s, std::int64_t cls, std::int64_t color, Rng& rng,
            bool hard) {
    const double noise_amp = hard ? 0.20 : 0.07;
    const double base = rng.uniform(0.15, 0.35);
    const double gx = rng.uniform(-0.1, 0.1), gy = rng.uniform(-0.1, 0.1);
    const double cx = 0.5 + rng.uniform(-0.10, 0.10);
    const double cy = 0.5 + rng.uniform(-0.10, 0.10);
    const double radius = rng.uniform(hard ? 0.22 : 0.26, 0.40);
    const Rgb col = kPalette[color];

    // per-pixel deterministic hash noise so rendering is order-independent
    const std::uint64_t noise_seed = rng.next_u64();
    auto pixel_noise = [&](std::int64_t y, std::int64_t x, std::int64_t c) {
        const std::uint64_t h = Rng::mix(noise_seed, static_cast<std::uint64_t>((y * s + x) * 3 + c));
        return (static_cast<double>(h >> 11) * 0x1.0p-53 - 0.5) * 2.0;
    };

    for (std::int64_t y = 0; y < s; ++y)
        for (std::int64_t x = 0; x < s; ++x) {
            const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(s);
            const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(s);
            const double u = (fx - cx) / radius;
            const double v = (fy - cy) / radius;
            const bool hit = inside_shape(cls, u, v);
            for (std::int64_t c = 0; c < 3; ++c) {
                double val;
                if (hit) {
                    const double ch = c == 0 ? col.r : (c == 1 ? col.g : col.b);
                    val = ch + 0.04 * pixel_noise(y, x, c);
                } else {
                    val = base + gx * (fx - 0.5) + gy * (fy - 0.5) +
                          noise_amp * pixel_noise(y, x, c);
                }
                img[(c * s + y) * s + x] = std::clamp(val, 0.0, 1.0);
            }
        }
}

std::string fill(const std::string& tpl, const std::string& shape, const std::string& color) {
    std::string out = tpl;
    const size_t cpos = out.find("{c}");
    if (cpos != std::string::npos) out = out.substr(0, cpos) + color + out.substr(cpos + 3);
    const size_t spos = out.find("{s}");
    if (spos != std::string::npos) out = out.substr(0, spos) + shape + out.substr(spos + 3);
    return out;
}

CorpusSplit make_split(const SyntheticSpec& spec, std::int64_t n, std::uint64_t split_seed,
                       bool hard) {
    CorpusSplit split;
    const std::int64_t s = spec.image_size;
    std::vector<double> all(static_cast<size_t>(n * 3 * s * s));
    for (std::int64_t i = 0; i < n; ++i) {
        Rng rng(Rng::mix(split_seed, static_cast<std::uint64_t>(i)));
        const std::int64_t cls = i % spec.classes;
        const auto color = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(spec.colors)));
        render(all.data() + i * 3 * s * s, s, cls, color, rng, hard);
        const bool with_color = rng.below(2) == 0;
        const auto tpl = rng.below(5);
        const std::string caption =
            with_color ? fill(kColorTemplates[tpl], shape_class_names()[static_cast<size_t>(cls)],
                              color_names()[static_cast<size_t>(color)])
                       : fill(kPlainTemplates[tpl], shape_class_names()[static_cast<size_t>(cls)],
                              "");
        split.captions.push_back(caption);
        split.labels.push_back(cls);
    }
    split.images = Tensor({n, 3, s, s}, std::move(all));
    return split;
}

}  // namespace

std::vector<std::string> caption_grammar_words() {
    std::vector<std::string> words = {"a",  "an",    "photo", "picture", "image",     "this",
                                      "is", "the",   "on",    "of",      "textured", "background"};
    for (const auto& s : shape_class_names()) words.push_back(s);
    for (const auto& c : color_names()) words.push_back(c);
    return words;
}

Corpus generate_synthetic_corpus(const SyntheticSpec& spec) {
    spec.validate();
    Corpus corpus;
    corpus.spec = spec;
    corpus.class_names.assign(shape_class_names().begin(),
                              shape_class_names().begin() + spec.classes);
    corpus.vocab = Vocab::build(caption_grammar_words());
    corpus.splits["train"] = make_split(spec, spec.train_samples, Rng::mix(spec.seed, 0x7472), false);
    corpus.splits["val"] = make_split(spec, spec.val_samples, Rng::mix(spec.seed, 0x7661), false);
    corpus.splits["test"] = make_split(spec, spec.test_samples, Rng::mix(spec.seed, 0x7465), false);
    corpus.splits["test_hard"] =
        make_split(spec, spec.hard_test_samples, Rng::mix(spec.seed, 0x6861), true);
    return corpus;
}

void save_corpus(const std::string& dir, const Corpus& corpus) {
    std::filesystem::create_directories(dir);
    KeyValueConfig spec_kv;
    spec_kv.set_int("image_size", corpus.spec.image_size);
    spec_kv.set_int("classes", corpus.spec.classes);
    spec_kv.set_int("colors", corpus.spec.colors);
    spec_kv.set_int("train_samples", corpus.spec.train_samples);
    spec_kv.set_int("val_samples", corpus.spec.val_samples);
    spec_kv.set_int("test_samples", corpus.spec.test_samples);
    spec_kv.set_int("hard_test_samples", corpus.spec.hard_test_samples);
    spec_kv.set_int("seed", static_cast<std::int64_t>(corpus.spec.seed));
    spec_kv.set("rng", "mt19937_64 (19937-bit state), uniform doubles via (x>>11)*2^-53, "
                       "bounded ints via 128-bit multiply-shift");
    write_text_file(dir + "/spec.txt", spec_kv.to_text());

    std::string classes;
    for (const auto& c : corpus.class_names) classes += c + "\n";
    write_text_file(dir + "/classes.txt", classes);
    corpus.vocab.save(dir + "/vocab.txt");

    for (const auto& [name, split] : corpus.splits) {
        Checkpoint ckpt;
        ckpt.config.set("split", name);
        ckpt.config.set_int("samples", split.size());
        ckpt.tensors.emplace("images", split.images);
        save_checkpoint(dir + "/" + name + ".bin", ckpt);
        std::string tsv;
        for (std::int64_t i = 0; i < split.size(); ++i)
            tsv += std::to_string(i) + "\t" + split.captions[static_cast<size_t>(i)] + "\t" +
                   std::to_string(split.labels[static_cast<size_t>(i)]) + "\n";
        write_text_file(dir + "/" + name + ".tsv", tsv);
    }
}

Corpus load_corpus(const std::string& dir) {
    Corpus corpus;
    KeyValueConfig spec_kv = KeyValueConfig::parse_file(dir + "/spec.txt");
    corpus.spec.image_size = spec_kv.get_int("image_size");
    corpus.spec.classes = spec_kv.get_int("classes");
    corpus.spec.colors = spec_kv.get_int("colors");
    corpus.spec.train_samples = spec_kv.get_int("train_samples");
    corpus.spec.val_samples = spec_kv.get_int("val_samples");
    corpus.spec.test_samples = spec_kv.get_int("test_samples");
    corpus.spec.hard_test_samples = spec_kv.get_int("hard_test_samples");
    corpus.spec.seed = static_cast<std::uint64_t>(spec_kv.get_int("seed"));

    std::istringstream cls(read_text_file(dir + "/classes.txt"));
    std::string line;
    while (std::getline(cls, line))
        if (!line.empty()) corpus.class_names.push_back(line);
    corpus.vocab = Vocab::load(dir + "/vocab.txt");

    for (const char* name : {"train", "val", "test", "test_hard"}) {
        const std::string bin = dir + "/" + name + ".bin";
        if (!std::filesystem::exists(bin)) continue;
        Checkpoint ckpt = load_checkpoint(bin);
        CorpusSplit split;
        split.images = ckpt.tensors.at("images");
        std::istringstream tsv(read_text_file(dir + "/" + std::string(name) + ".tsv"));
        while (std::getline(tsv, line)) {
            if (line.empty()) continue;
            const size_t t1 = line.find('\t');
            const size_t t2 = line.rfind('\t');
            if (t1 == std::string::npos || t2 == t1)
                throw FormatError("corpus: malformed tsv line '" + line + "'");
            split.captions.push_back(line.substr(t1 + 1, t2 - t1 - 1));
            split.labels.push_back(std::stoll(line.substr(t2 + 1)));
        }
        if (static_cast<std::int64_t>(split.labels.size()) != split.images.dim(0))
            throw IntegrityError("corpus: tsv and image tensor disagree for split " +
                                 std::string(name));
        corpus.splits[name] = std::move(split);
    }
    return corpus;
}

Tensor gather_images(const CorpusSplit& split, const std::vector<std::int64_t>& ids) {
    const std::int64_t per = split.images.size() / split.images.dim(0);
    std::vector<double> out;
    out.reserve(ids.size() * static_cast<size_t>(per));
    for (auto i : ids) {
        if (i < 0 || i >= split.size()) throw InputError("gather_images: index out of range");
        out.insert(out.end(), split.images.values().begin() + i * per,
                   split.images.values().begin() + (i + 1) * per);
    }
    return Tensor({static_cast<std::int64_t>(ids.size()), split.images.dim(1),
                   split.images.dim(2), split.images.dim(3)},
                  std::move(out));
}

Tensor make_frame_stack(const Tensor& image, std::int64_t frames, Rng& rng) {
    if (image.rank() != 3) throw DimensionError("make_frame_stack: expects [3, s, s]");
    if (frames < 1) throw ConfigError("make_frame_stack: need at least one frame");
    const std::int64_t s = image.dim(1);
    std::vector<double> out;
    out.reserve(static_cast<size_t>(frames * image.size()));
    for (std::int64_t f = 0; f < frames; ++f) {
        std::int64_t dx = 0, dy = 0;
        if (f != frames / 2) {
            dx = static_cast<std::int64_t>(rng.below(5)) - 2;
            dy = static_cast<std::int64_t>(rng.below(5)) - 2;
        }
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t y = 0; y < s; ++y)
                for (std::int64_t x = 0; x < s; ++x) {
                    const std::int64_t sy = std::clamp<std::int64_t>(y + dy, 0, s - 1);
                    const std::int64_t sx = std::clamp<std::int64_t>(x + dx, 0, s - 1);
                    out.push_back(image.values()[static_cast<size_t>((c * s + sy) * s + sx)]);
                }
    }
    return Tensor({frames, 3, s, s}, std::move(out));
}

}  // namespace wsclip
