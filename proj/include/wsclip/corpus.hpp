#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wsclip/rng.hpp"
#include "wsclip/tensor.hpp"
#include "wsclip/tokenizer.hpp"

namespace wsclip {

// Procedural stand-in for web-scale image-text pairs: colored geometric
// shapes on textured backgrounds with grammar-generated captions. The shape
// is the class label of the synthetic benchmark.
struct SyntheticSpec {
    std::int64_t image_size = 32;
    std::int64_t classes = 10;  // up to the built-in shape set
    std::int64_t colors = 8;    // up to the built-in palette
    std::int64_t train_samples = 4096;
    std::int64_t val_samples = 256;
    std::int64_t test_samples = 512;
    std::int64_t hard_test_samples = 256;  // noisier distribution-shift split
    std::uint64_t seed = 1;
    void validate() const;
};

struct CorpusSplit {
    Tensor images;  // [n, 3, s, s], values in [0, 1]
    std::vector<std::string> captions;
    std::vector<std::int64_t> labels;

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
    Tensor image(std::int64_t i) const;  // [3, s, s]
};

struct Corpus {
    SyntheticSpec spec;
    std::vector<std::string> class_names;
    Vocab vocab;
    std::map<std::string, CorpusSplit> splits;  // train, val, test, test_hard

    const CorpusSplit& split(const std::string& name) const;
};

const std::vector<std::string>& shape_class_names();  // the 10 shape classes
const std::vector<std::string>& color_names();        // the 8 palette entries
std::vector<std::string> caption_grammar_words();     // everything the grammar can emit

Corpus generate_synthetic_corpus(const SyntheticSpec& spec);

void save_corpus(const std::string& dir, const Corpus& corpus);
Corpus load_corpus(const std::string& dir);

// Batch assembly: images [b,3,s,s] for the given sample indices.
Tensor gather_images(const CorpusSplit& split, const std::vector<std::int64_t>& ids);

// Synthesizes a short clip from one image by deterministic sub-pixel
// jitter: frames [f, 3, s, s]. Frame f/2 is the untouched original.
Tensor make_frame_stack(const Tensor& image, std::int64_t frames, Rng& rng);

}  // namespace wsclip
