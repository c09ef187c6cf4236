#include "wsclip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "wsclip/config.hpp"
#include "wsclip/errors.hpp"

namespace wsclip {

TransformMode transform_from_string(const std::string& s) {
    if (s == "direct" || s == "direct_resize") return TransformMode::direct_resize;
    if (s == "shortest_side" || s == "shortest_side_center_crop" || s == "crop")
        return TransformMode::shortest_side_center_crop;
    throw ConfigError("unknown transform mode '" + s + "' (expected direct|shortest_side)");
}

const char* to_string(TransformMode m) {
    return m == TransformMode::direct_resize ? "direct" : "shortest_side";
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w) {
    if (image.rank() != 3) throw InputError("resize: expects [c, H, W]");
    const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h <= 0 || w <= 0 || out_h <= 0 || out_w <= 0)
        throw InputError("resize: degenerate image or target size");
    std::vector<double> out(static_cast<size_t>(c * out_h * out_w));
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    const auto& iv = image.values();
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < out_h; ++y) {
            const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
            const std::int64_t y0 = std::clamp<std::int64_t>(
                static_cast<std::int64_t>(std::floor(fy)), 0, h - 1);
            const std::int64_t y1 = std::min<std::int64_t>(y0 + 1, h - 1);
            const double wy = std::clamp(fy - static_cast<double>(y0), 0.0, 1.0);
            for (std::int64_t x = 0; x < out_w; ++x) {
                const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                const std::int64_t x0 = std::clamp<std::int64_t>(
                    static_cast<std::int64_t>(std::floor(fx)), 0, w - 1);
                const std::int64_t x1 = std::min<std::int64_t>(x0 + 1, w - 1);
                const double wx = std::clamp(fx - static_cast<double>(x0), 0.0, 1.0);
                const double v00 = iv[static_cast<size_t>((ch * h + y0) * w + x0)];
                const double v01 = iv[static_cast<size_t>((ch * h + y0) * w + x1)];
                const double v10 = iv[static_cast<size_t>((ch * h + y1) * w + x0)];
                const double v11 = iv[static_cast<size_t>((ch * h + y1) * w + x1)];
                out[static_cast<size_t>((ch * out_h + y) * out_w + x)] =
                    (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) +
                    wy * ((1.0 - wx) * v10 + wx * v11);
            }
        }
    return Tensor({c, out_h, out_w}, std::move(out));
}

namespace {

Tensor crop(const Tensor& image, std::int64_t top, std::int64_t left, std::int64_t ch,
            std::int64_t cw) {
    const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (top < 0 || left < 0 || top + ch > h || left + cw > w)
        throw InputError("crop window outside image");
    std::vector<double> out(static_cast<size_t>(c * ch * cw));
    const auto& iv = image.values();
    for (std::int64_t cc = 0; cc < c; ++cc)
        for (std::int64_t y = 0; y < ch; ++y)
            for (std::int64_t x = 0; x < cw; ++x)
                out[static_cast<size_t>((cc * ch + y) * cw + x)] =
                    iv[static_cast<size_t>((cc * h + top + y) * w + left + x)];
    return Tensor({c, ch, cw}, std::move(out));
}

}  // namespace

Tensor preprocess(const Tensor& image, TransformMode mode, std::int64_t size,
                  const CropScaleRange* train_augment, Rng* rng) {
    if (image.rank() != 3 || image.dim(0) == 0 || image.dim(1) == 0 || image.dim(2) == 0)
        throw InputError("preprocess: degenerate image " + shape_str(image.shape()));
    if (size <= 0) throw InputError("preprocess: target size must be positive");

    Tensor working = image;
    if (train_augment) {
        if (!rng) throw ContractError("preprocess: train augmentation needs an rng");
        if (!(train_augment->lo > 0.0 && train_augment->lo <= train_augment->hi &&
              train_augment->hi <= 1.0))
            throw ConfigError("preprocess: crop scale range must satisfy 0 < lo <= hi <= 1");
        const std::int64_t h = working.dim(1), w = working.dim(2);
        const double area = rng->uniform(train_augment->lo, train_augment->hi);
        // square crop window with the sampled area fraction
        const auto side = std::max<std::int64_t>(
            1, static_cast<std::int64_t>(std::llround(
                   std::sqrt(area * static_cast<double>(h) * static_cast<double>(w)))));
        const std::int64_t ch = std::min(side, h), cw = std::min(side, w);
        const std::int64_t top =
            ch < h ? static_cast<std::int64_t>(rng->below(static_cast<std::uint64_t>(h - ch + 1)))
                   : 0;
        const std::int64_t left =
            cw < w ? static_cast<std::int64_t>(rng->below(static_cast<std::uint64_t>(w - cw + 1)))
                   : 0;
        working = crop(working, top, left, ch, cw);
    }

    if (mode == TransformMode::direct_resize) return resize_bilinear(working, size, size);

    const std::int64_t h = working.dim(1), w = working.dim(2);
    std::int64_t nh, nw;
    if (h <= w) {
        nh = size;
        nw = std::max<std::int64_t>(
            size, static_cast<std::int64_t>(std::llround(
                      static_cast<double>(w) * static_cast<double>(size) / static_cast<double>(h))));
    } else {
        nw = size;
        nh = std::max<std::int64_t>(
            size, static_cast<std::int64_t>(std::llround(
                      static_cast<double>(h) * static_cast<double>(size) / static_cast<double>(w))));
    }
    Tensor scaled = resize_bilinear(working, nh, nw);
    return crop(scaled, (nh - size) / 2, (nw - size) / 2, size, size);
}

// ---------------------------------------------------------------------------
// zero-shot classifier
// ---------------------------------------------------------------------------

void PromptTemplateSet::validate() const {
    if (templates.empty()) throw InputError("prompt templates: empty set");
    for (const auto& t : templates) {
        const size_t first = t.find("{}");
        if (first == std::string::npos || t.find("{}", first + 1) != std::string::npos)
            throw InputError("prompt template '" + t + "' must contain exactly one {} slot");
    }
}

std::string PromptTemplateSet::fill(std::size_t index, const std::string& class_name) const {
    const std::string& t = templates.at(index);
    const size_t slot = t.find("{}");
    return t.substr(0, slot) + class_name + t.substr(slot + 2);
}

PromptTemplateSet PromptTemplateSet::defaults() {
    // 7-template subset aligned with the caption grammar's phrasings
    return PromptTemplateSet{{"a photo of a {}", "an image of a {}", "a picture of a {}",
                              "this is a {}", "a {} on a textured background",
                              "a photo of the {}", "the {}"}};
}

PromptTemplateSet PromptTemplateSet::load(const std::string& path) {
    PromptTemplateSet set;
    std::istringstream in(read_text_file(path));
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty() && line[0] != '#') set.templates.push_back(line);
    }
    set.validate();
    return set;
}

namespace {

// [n, d] -> unit rows (plain doubles, no tape)
void normalize_rows(std::vector<double>& v, std::int64_t n, std::int64_t d) {
    for (std::int64_t r = 0; r < n; ++r) {
        double sq = 0.0;
        for (std::int64_t i = 0; i < d; ++i) sq += v[static_cast<size_t>(r * d + i)] *
                                                   v[static_cast<size_t>(r * d + i)];
        const double nrm = std::sqrt(sq);
        if (!(nrm > 0.0) || !std::isfinite(nrm))
            throw NumericError("normalize: zero or non-finite embedding row");
        for (std::int64_t i = 0; i < d; ++i) v[static_cast<size_t>(r * d + i)] /= nrm;
    }
}

}  // namespace

ZeroShotClassifier build_zero_shot_classifier(const TowerWeights& text_weights,
                                              const TowerConfig& text_cfg, const Vocab& vocab,
                                              const std::vector<std::string>& class_names,
                                              const PromptTemplateSet& templates) {
    templates.validate();
    if (class_names.empty()) throw InputError("zero-shot classifier: no classes");
    const std::int64_t d = text_cfg.projection_dim;
    const std::int64_t t_count = static_cast<std::int64_t>(templates.templates.size());
    std::vector<double> rows;
    rows.reserve(class_names.size() * static_cast<size_t>(d));
    for (const auto& cls : class_names) {
        std::vector<std::vector<std::int64_t>> batch;
        for (std::int64_t t = 0; t < t_count; ++t) {
            const std::string filled = templates.fill(static_cast<size_t>(t), cls);
            if (token_count(filled, vocab) > text_cfg.context_length)
                throw InputError("prompt template '" + templates.templates[static_cast<size_t>(t)] +
                                 "' overflows the context length for class '" + cls + "'");
            batch.push_back(tokenize(filled, vocab, text_cfg.context_length));
        }
        Tensor emb = encode_text(text_weights, text_cfg, batch, Vocab::kEnd);  // [t, d]
        std::vector<double> ev = emb.values();
        normalize_rows(ev, t_count, d);
        std::vector<double> avg(static_cast<size_t>(d), 0.0);
        for (std::int64_t t = 0; t < t_count; ++t)
            for (std::int64_t i = 0; i < d; ++i)
                avg[static_cast<size_t>(i)] += ev[static_cast<size_t>(t * d + i)];
        for (auto& x : avg) x /= static_cast<double>(t_count);
        normalize_rows(avg, 1, d);
        rows.insert(rows.end(), avg.begin(), avg.end());
    }
    ZeroShotClassifier cls;
    cls.class_embeddings = Tensor({static_cast<std::int64_t>(class_names.size()), d}, rows);
    cls.class_names = class_names;
    return cls;
}

namespace {

// rank of `target` in the gallery under descending score, ties toward the
// lower index
std::int64_t rank_of(const double* scores, std::int64_t count, std::int64_t target) {
    std::int64_t rank = 0;
    for (std::int64_t j = 0; j < count; ++j) {
        if (j == target) continue;
        if (scores[j] > scores[target] || (scores[j] == scores[target] && j < target)) ++rank;
    }
    return rank;
}

}  // namespace

ClassificationResult classify_zero_shot(const Tensor& image_embeddings,
                                        const std::vector<std::int64_t>& labels,
                                        const ZeroShotClassifier& classifier) {
    if (image_embeddings.rank() != 2)
        throw DimensionError("classify_zero_shot: embeddings must be [n, d]");
    const std::int64_t n = image_embeddings.dim(0), d = image_embeddings.dim(1);
    const std::int64_t c = classifier.class_embeddings.dim(0);
    if (classifier.class_embeddings.dim(1) != d)
        throw DimensionError("classify_zero_shot: classifier dim mismatch");
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw InputError("classify_zero_shot: need one label per sample");
    for (double v : image_embeddings.values())
        if (!std::isfinite(v)) throw NumericError("classify_zero_shot: non-finite embedding");

    std::vector<double> emb = image_embeddings.values();
    normalize_rows(emb, n, d);
    const auto& cls = classifier.class_embeddings.values();
    const std::int64_t k5 = std::min<std::int64_t>(5, c);

    ClassificationResult result;
    result.predictions.resize(static_cast<size_t>(n));
    std::int64_t hit1 = 0, hit5 = 0;
    std::vector<double> scores(static_cast<size_t>(c));
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
            double dot = 0.0;
            for (std::int64_t q = 0; q < d; ++q)
                dot += emb[static_cast<size_t>(i * d + q)] * cls[static_cast<size_t>(j * d + q)];
            scores[static_cast<size_t>(j)] = dot;
        }
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < c; ++j)
            if (scores[static_cast<size_t>(j)] > scores[static_cast<size_t>(best)]) best = j;
        result.predictions[static_cast<size_t>(i)] = best;
        const std::int64_t label = labels[static_cast<size_t>(i)];
        if (label < 0 || label >= c) throw InputError("classify_zero_shot: label out of range");
        const std::int64_t r = rank_of(scores.data(), c, label);
        if (r < 1) ++hit1;
        if (r < k5) ++hit5;
    }
    result.top1 = static_cast<double>(hit1) / static_cast<double>(n);
    result.top5 = static_cast<double>(hit5) / static_cast<double>(n);
    return result;
}

// ---------------------------------------------------------------------------
// retrieval
// ---------------------------------------------------------------------------

RetrievalPairing RetrievalPairing::one_to_one(std::int64_t n) {
    RetrievalPairing p;
    p.captions_of_image.resize(static_cast<size_t>(n));
    p.image_of_caption.resize(static_cast<size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        p.captions_of_image[static_cast<size_t>(i)] = {i};
        p.image_of_caption[static_cast<size_t>(i)] = i;
    }
    return p;
}

RetrievalResult eval_retrieval(const Tensor& image_embeddings, const Tensor& text_embeddings,
                               const RetrievalPairing& pairing, std::vector<std::int64_t> ks) {
    if (image_embeddings.rank() != 2 || text_embeddings.rank() != 2 ||
        image_embeddings.dim(1) != text_embeddings.dim(1))
        throw DimensionError("eval_retrieval: embeddings must be [n, d] and [m, d]");
    const std::int64_t n = image_embeddings.dim(0);
    const std::int64_t m = text_embeddings.dim(0);
    const std::int64_t d = image_embeddings.dim(1);
    if (pairing.captions_of_image.empty() || pairing.image_of_caption.empty())
        throw InputError("eval_retrieval: empty pairing");
    if (static_cast<std::int64_t>(pairing.captions_of_image.size()) != n ||
        static_cast<std::int64_t>(pairing.image_of_caption.size()) != m)
        throw InputError("eval_retrieval: pairing does not match embedding counts");

    std::vector<double> img = image_embeddings.values();
    std::vector<double> txt = text_embeddings.values();
    normalize_rows(img, n, d);
    normalize_rows(txt, m, d);

    // best ground-truth rank per image query over captions
    std::vector<std::int64_t> img_rank(static_cast<size_t>(n));
    std::vector<double> row(static_cast<size_t>(std::max(n, m)));
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < m; ++j) {
            double dot = 0.0;
            for (std::int64_t q = 0; q < d; ++q)
                dot += img[static_cast<size_t>(i * d + q)] * txt[static_cast<size_t>(j * d + q)];
            row[static_cast<size_t>(j)] = dot;
        }
        std::int64_t best = m;
        for (auto gt : pairing.captions_of_image[static_cast<size_t>(i)]) {
            if (gt < 0 || gt >= m) throw InputError("eval_retrieval: caption index out of range");
            best = std::min(best, rank_of(row.data(), m, gt));
        }
        img_rank[static_cast<size_t>(i)] = best;
    }
    // rank of the owning image per caption query
    std::vector<std::int64_t> txt_rank(static_cast<size_t>(m));
    for (std::int64_t j = 0; j < m; ++j) {
        for (std::int64_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::int64_t q = 0; q < d; ++q)
                dot += txt[static_cast<size_t>(j * d + q)] * img[static_cast<size_t>(i * d + q)];
            row[static_cast<size_t>(i)] = dot;
        }
        const std::int64_t gt = pairing.image_of_caption[static_cast<size_t>(j)];
        if (gt < 0 || gt >= n) throw InputError("eval_retrieval: image index out of range");
        txt_rank[static_cast<size_t>(j)] = rank_of(row.data(), n, gt);
    }

    RetrievalResult result;
    result.ks = ks;
    for (auto k : ks) {
        std::int64_t hits = 0;
        for (auto r : img_rank) hits += r < k ? 1 : 0;
        result.text_recalls.push_back(static_cast<double>(hits) / static_cast<double>(n));
        hits = 0;
        for (auto r : txt_rank) hits += r < k ? 1 : 0;
        result.image_recalls.push_back(static_cast<double>(hits) / static_cast<double>(m));
    }
    std::vector<double> all = result.text_recalls;
    all.insert(all.end(), result.image_recalls.begin(), result.image_recalls.end());
    result.mean_recall = mean_recall(all);
    return result;
}

double mean_recall(const std::vector<double>& recalls) {
    if (recalls.empty()) throw InputError("mean_recall: no recalls");
    double acc = 0.0;
    for (double r : recalls) acc += r;
    return acc / static_cast<double>(recalls.size());
}

// ---------------------------------------------------------------------------
// video
// ---------------------------------------------------------------------------

std::vector<std::int64_t> video_frame_indices(std::int64_t frames, std::int64_t n_sample) {
    if (frames < 1) throw InputError("video_frame_indices: need at least one frame");
    if (n_sample < 1) throw InputError("video_frame_indices: need at least one sample");
    std::vector<std::int64_t> idx(static_cast<size_t>(n_sample));
    for (std::int64_t i = 0; i < n_sample; ++i)
        idx[static_cast<size_t>(i)] = static_cast<std::int64_t>(
            std::floor((static_cast<double>(i) + 0.5) * static_cast<double>(frames) /
                       static_cast<double>(n_sample)));
    return idx;
}

Tensor video_embed(const TowerWeights& vision_weights, const TowerConfig& vision_cfg,
                   const Tensor& frames, std::int64_t n_sample, bool* repeated) {
    if (frames.rank() != 4) throw DimensionError("video_embed: frames must be [f, 3, H, W]");
    const std::int64_t f = frames.dim(0);
    if (f < 1) throw InputError("video_embed: empty clip");
    if (repeated) *repeated = n_sample > f;
    const std::vector<std::int64_t> idx = video_frame_indices(f, n_sample);

    const std::int64_t per = frames.size() / f;
    std::vector<double> batch;
    batch.reserve(idx.size() * static_cast<size_t>(per));
    for (auto i : idx)
        batch.insert(batch.end(), frames.values().begin() + i * per,
                     frames.values().begin() + (i + 1) * per);
    Tensor stacked({static_cast<std::int64_t>(idx.size()), frames.dim(1), frames.dim(2),
                    frames.dim(3)},
                   std::move(batch));
    Tensor emb = encode_image(vision_weights, vision_cfg, stacked);  // [n_sample, d]
    const std::int64_t d = emb.dim(1);
    std::vector<double> avg(static_cast<size_t>(d), 0.0);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(idx.size()); ++i)
        for (std::int64_t q = 0; q < d; ++q)
            avg[static_cast<size_t>(q)] += emb.values()[static_cast<size_t>(i * d + q)];
    for (auto& x : avg) x /= static_cast<double>(idx.size());
    normalize_rows(avg, 1, d);
    return Tensor({d}, std::move(avg));
}

double video_metric(double top1, double top5, VideoMetricKind kind) {
    if (!(top1 >= 0.0 && top1 <= 1.0 && top5 >= 0.0 && top5 <= 1.0))
        throw InputError("video_metric: fractions must lie in [0, 1]");
    return kind == VideoMetricKind::top1 ? top1 : 0.5 * (top1 + top5);
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

bool EvalReport::has(const std::string& benchmark, const std::string& metric) const {
    for (const auto& r : records)
        if (r.benchmark == benchmark && r.metric == metric) return true;
    return false;
}

double EvalReport::value(const std::string& benchmark, const std::string& metric) const {
    for (const auto& r : records)
        if (r.benchmark == benchmark && r.metric == metric) return r.value;
    throw InputError("report: no record for benchmark '" + benchmark + "' metric '" + metric +
                     "'");
}

void EvalReport::add(const std::string& benchmark, const std::string& task,
                     const std::string& metric, double value) {
    records.push_back(EvalRecord{benchmark, task, metric, value});
}

double EvalReport::classification_average_top1() const {
    double acc = 0.0;
    int n = 0;
    for (const auto& r : records)
        if (r.task == "classification" && r.metric == "top1") {
            acc += r.value;
            ++n;
        }
    if (n == 0) throw InputError("report: no classification records");
    return acc / n;
}

std::vector<double> EvalReport::all_retrieval_recalls() const {
    std::vector<double> out;
    for (const auto& r : records)
        if (r.task == "retrieval" &&
            (r.metric.rfind("text_r", 0) == 0 || r.metric.rfind("image_r", 0) == 0))
            out.push_back(r.value);
    return out;
}

double EvalReport::retrieval_mean_recall() const { return mean_recall(all_retrieval_recalls()); }

std::string EvalReport::to_kv_text() const {
    std::string out = "report_version = 1\n";
    char buf[64];
    for (size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        out += "record." + std::to_string(i) + ".benchmark = " + r.benchmark + "\n";
        out += "record." + std::to_string(i) + ".task = " + r.task + "\n";
        out += "record." + std::to_string(i) + ".metric = " + r.metric + "\n";
        std::snprintf(buf, sizeof(buf), "%.17g", r.value);
        out += "record." + std::to_string(i) + ".value = " + buf + "\n";
    }
    return out;
}

std::string EvalReport::to_csv() const {
    std::string out = "benchmark,task,metric,value\n";
    char buf[64];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.value);
        out += r.benchmark + "," + r.task + "," + r.metric + "," + buf + "\n";
    }
    return out;
}

std::string EvalReport::presentation_table() const {
    std::string out;
    char buf[128];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%-24s %-14s %-18s %6.1f\n", r.benchmark.c_str(),
                      r.task.c_str(), r.metric.c_str(), r.value * 100.0);
        out += buf;
    }
    return out;
}

RobustnessResult robustness_delta(double anchor_accuracy, const std::vector<double>& variant_set) {
    if (variant_set.empty()) throw InputError("robustness_delta: empty variant set");
    double avg = 0.0;
    for (double v : variant_set) avg += v;
    avg /= static_cast<double>(variant_set.size());
    return RobustnessResult{avg, anchor_accuracy - avg};
}

RobustnessResult robustness_delta(const EvalReport& report, const std::string& anchor,
                                  const std::vector<std::string>& variants) {
    std::vector<double> accs;
    for (const auto& name : variants) accs.push_back(report.value(name, "top1"));
    return robustness_delta(report.value(anchor, "top1"), accs);
}

// ---------------------------------------------------------------------------
// linear probe
// ---------------------------------------------------------------------------

double linear_probe(const Tensor& train_features, const std::vector<std::int64_t>& train_labels,
                    const Tensor& test_features, const std::vector<std::int64_t>& test_labels,
                    double l2_penalty, std::int64_t max_iters) {
    if (train_features.rank() != 2 || test_features.rank() != 2 ||
        train_features.dim(1) != test_features.dim(1))
        throw DimensionError("linear_probe: features must be [n, d] with matching d");
    const std::int64_t n = train_features.dim(0), d = train_features.dim(1);
    const std::int64_t nt = test_features.dim(0);
    if (static_cast<std::int64_t>(train_labels.size()) != n ||
        static_cast<std::int64_t>(test_labels.size()) != nt)
        throw InputError("linear_probe: label counts do not match features");
    if (l2_penalty < 0.0 || max_iters <= 0)
        throw ConfigError("linear_probe: need l2_penalty >= 0 and max_iters > 0");

    std::int64_t classes = 0;
    for (auto l : train_labels) classes = std::max(classes, l + 1);
    for (auto l : test_labels) classes = std::max(classes, l + 1);
    std::int64_t distinct = 0;
    {
        std::vector<bool> seen(static_cast<size_t>(classes), false);
        for (auto l : train_labels)
            if (!seen[static_cast<size_t>(l)]) {
                seen[static_cast<size_t>(l)] = true;
                ++distinct;
            }
    }
    if (distinct < 2) throw InputError("linear_probe: training split has a single class");

    // scale features so the largest row norm is 1; keeps the fixed step safe
    double max_sq = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::int64_t q = 0; q < d; ++q) {
            const double v = train_features.values()[static_cast<size_t>(i * d + q)];
            sq += v * v;
        }
        max_sq = std::max(max_sq, sq);
    }
    const double scale = max_sq > 0.0 ? 1.0 / std::sqrt(max_sq) : 1.0;

    std::vector<double> w(static_cast<size_t>(d * classes), 0.0);
    std::vector<double> b(static_cast<size_t>(classes), 0.0);
    std::vector<double> probs(static_cast<size_t>(classes));
    std::vector<double> gw(w.size()), gb(b.size());
    const double lr = 2.0;
    for (std::int64_t it = 0; it < max_iters; ++it) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            double mx = -1e300;
            for (std::int64_t c = 0; c < classes; ++c) {
                double logit = b[static_cast<size_t>(c)];
                for (std::int64_t q = 0; q < d; ++q)
                    logit += scale * train_features.values()[static_cast<size_t>(i * d + q)] *
                             w[static_cast<size_t>(q * classes + c)];
                probs[static_cast<size_t>(c)] = logit;
                mx = std::max(mx, logit);
            }
            double z = 0.0;
            for (std::int64_t c = 0; c < classes; ++c) {
                probs[static_cast<size_t>(c)] = std::exp(probs[static_cast<size_t>(c)] - mx);
                z += probs[static_cast<size_t>(c)];
            }
            for (std::int64_t c = 0; c < classes; ++c) {
                const double delta = probs[static_cast<size_t>(c)] / z -
                                     (c == train_labels[static_cast<size_t>(i)] ? 1.0 : 0.0);
                gb[static_cast<size_t>(c)] += delta;
                for (std::int64_t q = 0; q < d; ++q)
                    gw[static_cast<size_t>(q * classes + c)] +=
                        delta * scale * train_features.values()[static_cast<size_t>(i * d + q)];
            }
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        for (size_t i = 0; i < w.size(); ++i)
            w[i] -= lr * (gw[i] * inv_n + l2_penalty * w[i]);
        for (size_t i = 0; i < b.size(); ++i) b[i] -= lr * gb[i] * inv_n;
    }

    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < nt; ++i) {
        std::int64_t best = 0;
        double best_logit = -1e300;
        for (std::int64_t c = 0; c < classes; ++c) {
            double logit = b[static_cast<size_t>(c)];
            for (std::int64_t q = 0; q < d; ++q)
                logit += scale * test_features.values()[static_cast<size_t>(i * d + q)] *
                         w[static_cast<size_t>(q * classes + c)];
            if (logit > best_logit) {
                best_logit = logit;
                best = c;
            }
        }
        if (best == test_labels[static_cast<size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(nt);
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

EvalManifest EvalManifest::load(const std::string& path) {
    KeyValueConfig kv = KeyValueConfig::parse_file(path);
    EvalManifest m;
    m.corpus_dir = kv.get_string("corpus", "");
    m.template_file = kv.get_string("templates", "");
    for (std::int64_t i = 0;; ++i) {
        const std::string p = "benchmark." + std::to_string(i) + ".";
        if (!kv.has(p + "name")) break;
        BenchmarkEntry e;
        e.name = kv.get_string(p + "name");
        e.task = kv.get_string(p + "task");
        if (e.task != "classification" && e.task != "retrieval" && e.task != "video" &&
            e.task != "linear_probe")
            throw ConfigError("manifest: unknown task '" + e.task + "'");
        e.metric = kv.get_string(p + "metric", e.task == "retrieval" ? "mr" : "top1");
        const std::string tmode =
            kv.get_string(p + "transform", e.task == "retrieval" ? "direct" : "best");
        if (tmode == "best")
            e.transform_best_of_two = true;
        else
            e.transform = transform_from_string(tmode);
        e.split = kv.get_string(p + "split", "test");
        e.train_split = kv.get_string(p + "train_split", "train");
        e.frames = kv.get_int(p + "frames", 8);
        e.n_sample = kv.get_int(p + "n_sample", 8);
        e.l2_penalty = kv.get_double(p + "l2_penalty", 1e-4);
        e.max_iters = kv.get_int(p + "max_iters", 200);
        m.benchmarks.push_back(e);
    }
    m.robustness_anchor = kv.get_string("robustness.anchor", "");
    const std::string variants = kv.get_string("robustness.variants", "");
    std::istringstream vs(variants);
    std::string item;
    while (std::getline(vs, item, ',')) {
        while (!item.empty() && item.front() == ' ') item.erase(item.begin());
        while (!item.empty() && item.back() == ' ') item.pop_back();
        if (!item.empty()) m.robustness_variants.push_back(item);
    }
    kv.require_all_consumed();
    return m;
}

EvalManifest EvalManifest::built_in(const std::string& corpus_dir) {
    EvalManifest m;
    m.corpus_dir = corpus_dir;
    BenchmarkEntry cls;
    cls.name = "shapes-test";
    cls.task = "classification";
    cls.transform_best_of_two = true;
    cls.split = "test";
    m.benchmarks.push_back(cls);
    BenchmarkEntry hard = cls;
    hard.name = "shapes-test-hard";
    hard.split = "test_hard";
    m.benchmarks.push_back(hard);
    BenchmarkEntry ret;
    ret.name = "shapes-retrieval";
    ret.task = "retrieval";
    ret.metric = "mr";
    ret.transform = TransformMode::direct_resize;
    ret.split = "test";
    m.benchmarks.push_back(ret);
    BenchmarkEntry vid;
    vid.name = "shapes-video";
    vid.task = "video";
    vid.metric = "mean_top1_top5";
    vid.transform = TransformMode::direct_resize;
    vid.split = "val";
    m.benchmarks.push_back(vid);
    BenchmarkEntry probe;
    probe.name = "shapes-probe";
    probe.task = "linear_probe";
    probe.transform = TransformMode::direct_resize;
    probe.split = "test";
    probe.train_split = "val";
    m.benchmarks.push_back(probe);
    m.robustness_anchor = "shapes-test";
    m.robustness_variants = {"shapes-test", "shapes-test-hard"};
    return m;
}

namespace {

Tensor embed_split_images(const TowerWeights& vision, const TowerConfig& cfg,
                          const CorpusSplit& split, TransformMode mode,
                          std::int64_t batch = 64) {
    const std::int64_t n = split.size();
    std::vector<double> all;
    all.reserve(static_cast<size_t>(n * cfg.projection_dim));
    for (std::int64_t start = 0; start < n; start += batch) {
        const std::int64_t count = std::min<std::int64_t>(batch, n - start);
        std::vector<double> images;
        images.reserve(static_cast<size_t>(count * 3 * cfg.input_resolution *
                                           cfg.input_resolution));
        for (std::int64_t i = 0; i < count; ++i) {
            Tensor pre = preprocess(split.image(start + i), mode, cfg.input_resolution);
            images.insert(images.end(), pre.values().begin(), pre.values().end());
        }
        Tensor emb = encode_image(
            vision, cfg,
            Tensor({count, 3, cfg.input_resolution, cfg.input_resolution}, std::move(images)));
        all.insert(all.end(), emb.values().begin(), emb.values().end());
    }
    return Tensor({n, cfg.projection_dim}, std::move(all));
}

Tensor embed_captions(const TowerWeights& text, const TowerConfig& cfg, const Vocab& vocab,
                      const std::vector<std::string>& captions, std::int64_t batch = 64) {
    const std::int64_t n = static_cast<std::int64_t>(captions.size());
    std::vector<double> all;
    all.reserve(static_cast<size_t>(n * cfg.projection_dim));
    for (std::int64_t start = 0; start < n; start += batch) {
        const std::int64_t count = std::min<std::int64_t>(batch, n - start);
        std::vector<std::vector<std::int64_t>> rows;
        rows.reserve(static_cast<size_t>(count));
        for (std::int64_t i = 0; i < count; ++i)
            rows.push_back(tokenize(captions[static_cast<size_t>(start + i)], vocab,
                                    cfg.context_length));
        Tensor emb = encode_text(text, cfg, rows, Vocab::kEnd);
        all.insert(all.end(), emb.values().begin(), emb.values().end());
    }
    return Tensor({n, cfg.projection_dim}, std::move(all));
}

}  // namespace

EvalReport run_eval(const ClipConfig& cfg, const TowerWeights& vision, const TowerWeights& text,
                    const Corpus& corpus, const EvalManifest& manifest, std::uint64_t seed) {
    cfg.validate();
    PromptTemplateSet templates = manifest.template_file.empty()
                                      ? PromptTemplateSet::defaults()
                                      : PromptTemplateSet::load(manifest.template_file);
    ZeroShotClassifier classifier =
        build_zero_shot_classifier(text, cfg.text, corpus.vocab, corpus.class_names, templates);

    EvalReport report;
    for (const auto& bench : manifest.benchmarks) {
        const CorpusSplit& split = corpus.split(bench.split);
        if (bench.task == "classification") {
            auto run_mode = [&](TransformMode mode) {
                Tensor emb = embed_split_images(vision, cfg.vision, split, mode);
                return classify_zero_shot(emb, split.labels, classifier);
            };
            if (bench.transform_best_of_two) {
                ClassificationResult direct = run_mode(TransformMode::direct_resize);
                ClassificationResult cropped = run_mode(TransformMode::shortest_side_center_crop);
                const bool direct_wins = direct.top1 >= cropped.top1;
                const ClassificationResult& best = direct_wins ? direct : cropped;
                report.add(bench.name, "classification", "top1", best.top1);
                report.add(bench.name, "classification", "top5", best.top5);
                report.add(bench.name, "classification", "top1_direct", direct.top1);
                report.add(bench.name, "classification", "top1_shortest_side", cropped.top1);
                report.add(bench.name, "classification", "picked_direct",
                           direct_wins ? 1.0 : 0.0);
            } else {
                ClassificationResult res = run_mode(bench.transform);
                report.add(bench.name, "classification", "top1", res.top1);
                report.add(bench.name, "classification", "top5", res.top5);
            }
        } else if (bench.task == "retrieval") {
            const TransformMode mode = bench.transform_best_of_two
                                           ? TransformMode::direct_resize
                                           : bench.transform;
            Tensor img = embed_split_images(vision, cfg.vision, split, mode);
            Tensor txt =
                embed_captions(text, cfg.text, corpus.vocab, split.captions);
            RetrievalResult res =
                eval_retrieval(img, txt, RetrievalPairing::one_to_one(split.size()));
            for (size_t k = 0; k < res.ks.size(); ++k) {
                report.add(bench.name, "retrieval", "text_r" + std::to_string(res.ks[k]),
                           res.text_recalls[k]);
                report.add(bench.name, "retrieval", "image_r" + std::to_string(res.ks[k]),
                           res.image_recalls[k]);
            }
            report.add(bench.name, "retrieval", "mr", res.mean_recall);
        } else if (bench.task == "video") {
            const TransformMode mode = bench.transform_best_of_two
                                           ? TransformMode::direct_resize
                                           : bench.transform;
            const std::int64_t n = split.size();
            std::vector<double> emb;
            emb.reserve(static_cast<size_t>(n * cfg.vision.projection_dim));
            for (std::int64_t i = 0; i < n; ++i) {
                Tensor pre = preprocess(split.image(i), mode, cfg.vision.input_resolution);
                Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(i) * 2654435761ull));
                Tensor clip = make_frame_stack(pre, bench.frames, rng);
                Tensor v = video_embed(vision, cfg.vision, clip, bench.n_sample);
                emb.insert(emb.end(), v.values().begin(), v.values().end());
            }
            ClassificationResult res = classify_zero_shot(
                Tensor({n, cfg.vision.projection_dim}, std::move(emb)), split.labels, classifier);
            const VideoMetricKind kind = bench.metric == "mean_top1_top5"
                                             ? VideoMetricKind::mean_top1_top5
                                             : VideoMetricKind::top1;
            report.add(bench.name, "video", bench.metric,
                       video_metric(res.top1, res.top5, kind));
            report.add(bench.name, "video", "top1", res.top1);
            report.add(bench.name, "video", "top5", res.top5);
        } else if (bench.task == "linear_probe") {
            const TransformMode mode = bench.transform_best_of_two
                                           ? TransformMode::direct_resize
                                           : bench.transform;
            const CorpusSplit& train = corpus.split(bench.train_split);
            Tensor train_emb = embed_split_images(vision, cfg.vision, train, mode);
            Tensor test_emb = embed_split_images(vision, cfg.vision, split, mode);
            const double acc = linear_probe(train_emb, train.labels, test_emb, split.labels,
                                            bench.l2_penalty, bench.max_iters);
            report.add(bench.name, "linear_probe", "top1", acc);
        }
    }

    if (!manifest.robustness_anchor.empty() && !manifest.robustness_variants.empty()) {
        RobustnessResult rr =
            robustness_delta(report, manifest.robustness_anchor, manifest.robustness_variants);
        report.add("robustness", "aggregate", "average", rr.average);
        report.add("robustness", "aggregate", "delta", rr.delta);
    }
    return report;
}

}  // namespace wsclip
