#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wsclip/corpus.hpp"
#include "wsclip/models.hpp"
#include "wsclip/rng.hpp"
#include "wsclip/tensor.hpp"
#include "wsclip/tokenizer.hpp"

namespace wsclip {

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

enum class TransformMode { direct_resize, shortest_side_center_crop };

TransformMode transform_from_string(const std::string& s);
const char* to_string(TransformMode m);

struct CropScaleRange {
    double lo = 0.9;
    double hi = 1.0;
};

// Bilinear resize with half-pixel centers: src = (dst + 0.5) * scale - 0.5.
Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w);

// direct_resize: straight to size x size. shortest_side_center_crop: scale
// so min(H, W) == size, then center crop. train_augment applies a random
// area-scaled square crop before resizing (rng required).
Tensor preprocess(const Tensor& image, TransformMode mode, std::int64_t size,
                  const CropScaleRange* train_augment = nullptr, Rng* rng = nullptr);

// ---------------------------------------------------------------------------
// zero-shot classification
// ---------------------------------------------------------------------------

struct PromptTemplateSet {
    std::vector<std::string> templates;  // each contains exactly one {} slot

    void validate() const;
    std::string fill(std::size_t index, const std::string& class_name) const;
    static PromptTemplateSet defaults();
    static PromptTemplateSet load(const std::string& path);  // one template per line
};

struct ZeroShotClassifier {
    Tensor class_embeddings;  // [num_classes, d], unit-norm rows
    std::vector<std::string> class_names;
};

// Per class: encode every filled template, normalize, average, re-normalize.
ZeroShotClassifier build_zero_shot_classifier(const TowerWeights& text_weights,
                                              const TowerConfig& text_cfg, const Vocab& vocab,
                                              const std::vector<std::string>& class_names,
                                              const PromptTemplateSet& templates);

struct ClassificationResult {
    double top1 = 0.0;
    double top5 = 0.0;  // top-min(5, C) when there are fewer classes
    std::vector<std::int64_t> predictions;
};

// Cosine scoring (embeddings are normalized internally); ties break toward
// the lower class index.
ClassificationResult classify_zero_shot(const Tensor& image_embeddings,
                                        const std::vector<std::int64_t>& labels,
                                        const ZeroShotClassifier& classifier);

// ---------------------------------------------------------------------------
// retrieval
// ---------------------------------------------------------------------------

struct RetrievalPairing {
    // ground-truth caption indices per image and the owning image per caption
    std::vector<std::vector<std::int64_t>> captions_of_image;
    std::vector<std::int64_t> image_of_caption;

    static RetrievalPairing one_to_one(std::int64_t n);
};

struct RetrievalResult {
    std::vector<std::int64_t> ks;
    std::vector<double> text_recalls;   // image query -> caption ranks, fraction per k
    std::vector<double> image_recalls;  // caption query -> image ranks
    double mean_recall = 0.0;           // mean of every reported recall
};

RetrievalResult eval_retrieval(const Tensor& image_embeddings, const Tensor& text_embeddings,
                               const RetrievalPairing& pairing,
                               std::vector<std::int64_t> ks = {1, 5, 10});

// Arithmetic mean of reported recalls (the MR aggregate).
double mean_recall(const std::vector<double>& recalls);

// ---------------------------------------------------------------------------
// video
// ---------------------------------------------------------------------------

// Uniform sampling rule: index_i = floor((i + 0.5) * f / n), i in [0, n).
std::vector<std::int64_t> video_frame_indices(std::int64_t frames, std::int64_t n_sample);

// Averages the projected class-token embeddings of the sampled frames, then
// normalizes. n_sample > frames repeats nearest indices and sets *repeated.
Tensor video_embed(const TowerWeights& vision_weights, const TowerConfig& vision_cfg,
                   const Tensor& frames, std::int64_t n_sample, bool* repeated = nullptr);

enum class VideoMetricKind { top1, mean_top1_top5 };

double video_metric(double top1, double top5, VideoMetricKind kind);

// ---------------------------------------------------------------------------
// reports, robustness, linear probe
// ---------------------------------------------------------------------------

struct EvalRecord {
    std::string benchmark;
    std::string task;    // classification | retrieval | video | linear_probe
    std::string metric;  // top1 | top5 | mean_top1_top5 | r1 | ... | mr
    double value = 0.0;  // fractions for accuracies/recalls
};

struct EvalReport {
    std::vector<EvalRecord> records;

    bool has(const std::string& benchmark, const std::string& metric) const;
    double value(const std::string& benchmark, const std::string& metric) const;
    void add(const std::string& benchmark, const std::string& task, const std::string& metric,
             double value);

    // aggregates, recomputable from the records
    double classification_average_top1() const;
    std::vector<double> all_retrieval_recalls() const;
    double retrieval_mean_recall() const;

    std::string to_kv_text() const;  // structured record file
    std::string to_csv() const;
    std::string presentation_table() const;  // percentages at 1 d.p.
};

struct RobustnessResult {
    double average = 0.0;
    double delta = 0.0;  // anchor accuracy - variant-set average
};

RobustnessResult robustness_delta(const EvalReport& report, const std::string& anchor,
                                  const std::vector<std::string>& variants);
RobustnessResult robustness_delta(double anchor_accuracy, const std::vector<double>& variant_set);

// Multinomial logistic regression on frozen features: full-batch gradient
// descent with momentum 0.9 and the fixed built-in schedule. Returns test
// top-1.
double linear_probe(const Tensor& train_features, const std::vector<std::int64_t>& train_labels,
                    const Tensor& test_features, const std::vector<std::int64_t>& test_labels,
                    double l2_penalty, std::int64_t max_iters);

// ---------------------------------------------------------------------------
// benchmark manifest
// ---------------------------------------------------------------------------

struct BenchmarkEntry {
    std::string name;
    std::string task;  // classification | retrieval | video | linear_probe
    std::string metric = "top1";
    TransformMode transform = TransformMode::direct_resize;
    // When set, both transforms run and the reported value is the better
    // one, with per-mode values kept in the record list.
    bool transform_best_of_two = false;
    std::string split = "test";
    std::string train_split = "train";  // linear_probe only
    std::int64_t frames = 8;            // video only
    std::int64_t n_sample = 8;
    double l2_penalty = 1e-4;
    std::int64_t max_iters = 200;
};

struct EvalManifest {
    std::string corpus_dir;
    std::string template_file;  // empty = built-in defaults
    std::vector<BenchmarkEntry> benchmarks;
    std::string robustness_anchor;
    std::vector<std::string> robustness_variants;

    static EvalManifest load(const std::string& path);
    static EvalManifest built_in(const std::string& corpus_dir);  // synthetic defaults
};

EvalReport run_eval(const ClipConfig& cfg, const TowerWeights& vision, const TowerWeights& text,
                    const Corpus& corpus, const EvalManifest& manifest, std::uint64_t seed);

}  // namespace wsclip
