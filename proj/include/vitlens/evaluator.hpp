#pragma once

#include "vitlens/editor.hpp"
#include "vitlens/interpreter.hpp"
#include "vitlens/saliency.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vitlens {

// ---------------------------------------------------------------------------
// Inputs

struct LabeledInput {
    std::string id;
    Tensor patches; // preprocessed, [T x 3PP]
    int label = 0;  // index into the class vocabulary
    int group = 0;
};

struct AnnotatedImage {
    std::string id;
    Image image;
    std::vector<Box> boxes; // labels name vocabulary entries
};

// ---------------------------------------------------------------------------
// Toy fixtures

enum class ToyKind { identity, random, planted_attack, two_concept, spurious };

ToyKind parse_toy_kind(std::string_view name);
std::string_view to_string(ToyKind kind);

struct ToySpec {
    ToyKind kind = ToyKind::identity;
    int layers = 2;
    int dim = 32;
    int heads = 1;
    int patch_size = 4;
    int grid = 4;
    // identity: names of the planted tokens by position (defaults to "token<j>").
    std::vector<std::string> planted_concepts;
    int cases = 8; // per case set
    uint64_t seed = 0;
};

struct ToyModel {
    ToySpec spec;
    ModelBundle bundle;
    Vocabulary vocab;       // interpretation vocabulary
    Vocabulary class_vocab; // classification labels (may be empty)
    std::vector<WordList> wordlists;
    // identity / random: sample images (with boxes for identity).
    std::vector<AnnotatedImage> images;
    // planted_attack: clean / attacked; two_concept: source / donor;
    // spurious: train / test.
    std::vector<LabeledInput> first;
    std::vector<LabeledInput> second;
    std::vector<std::string> group_names;
    // planted_attack: position of the text patch in each attacked case.
    std::vector<int> planted_positions;
};

ToyModel make_toy_model(const ToySpec& spec);

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeOptions {
    int epochs = 1;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    size_t batch_size = 256;
    uint64_t seed = 0;
};

struct ProbeModel {
    Tensor weight; // [classes x dim]
    Tensor bias;   // [classes]
    std::vector<double> m_weight, v_weight, m_bias, v_bias;
    int64_t step = 0;

    int num_classes() const { return static_cast<int>(weight.dim(0)); }
};

struct ProbeGradient {
    std::vector<double> weight;
    std::vector<double> bias;
};

ProbeModel make_probe(int num_classes, int64_t dim);
// Mean softmax cross-entropy.
double probe_loss(const ProbeModel& probe, const Tensor& x, std::span<const int> labels);
ProbeGradient probe_gradient(const ProbeModel& probe, const Tensor& x, std::span<const int> labels);
std::vector<int> probe_predict(const ProbeModel& probe, const Tensor& x);

// Adam over shuffled mini-batches. `loss_trace`, when given, receives the
// full-data loss before training and after every step.
ProbeModel train_probe(const Tensor& x, std::span<const int> labels, int num_classes, const ProbeOptions& options,
                       std::vector<double>* loss_trace = nullptr);

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
    std::string set;
    std::string condition;
    std::string metric;
    double value = 0.0; // percentages in [0, 100] unless the metric says otherwise
    int64_t count = 0;
    int64_t total = 0;

    bool operator==(const ReportRow&) const = default;
};

struct LayerSeries {
    std::string name;
    std::map<int, double> values;
    std::map<int, int64_t> counts;

    bool operator==(const LayerSeries&) const = default;
};

struct ExperimentReport {
    std::string experiment;
    nlohmann::json config;
    std::vector<ReportRow> rows;
    std::vector<ReportRow> groups;
    std::map<std::string, std::map<int, double>> replaced_per_layer;
    std::vector<LayerSeries> series;
    std::vector<std::string> warnings;

    const ReportRow* find(const std::string& set, const std::string& condition, const std::string& metric) const;
    bool operator==(const ExperimentReport&) const = default;
};

nlohmann::json report_to_json(const ExperimentReport& report);
std::string report_to_csv(const ExperimentReport& report);
// Bar chart of the per-layer series, or of the rows when there are none.
Image report_chart(const ExperimentReport& report, int width = 640, int height = 360);

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentOptions {
    std::vector<int> layers; // empty: 1..L
    size_t top_k_membership = 1;
    bool skip_cls = false;
    bool with_smoothing = true;
    int samples = 100;
    uint64_t seed = 0;
    const DriftTable* drift = nullptr; // calibrated on the clean/first set when null
    unsigned threads = 0;
};

ExperimentReport typographical_experiment(std::span<const LabeledInput> clean, std::span<const LabeledInput> attacked,
                                          const WordList& words, const ModelBundle& bundle, const Vocabulary& vocab,
                                          const Vocabulary& class_vocab, const ExperimentOptions& options);

ExperimentReport entity_intervention_experiment(std::span<const LabeledInput> sources,
                                                std::span<const LabeledInput> donors, const WordList& source_words,
                                                const WordList& donor_words, const ModelBundle& bundle,
                                                const Vocabulary& vocab, const Vocabulary& class_vocab,
                                                const ExperimentOptions& options);

struct DebiasOptions {
    ExperimentOptions base;
    int layer = 0; // 0: the last block input, L
    int num_classes = 2;
    ProbeOptions probe;
    std::vector<std::string> group_names;
};

ExperimentReport debias_experiment(std::span<const LabeledInput> train, std::span<const LabeledInput> test,
                                   const WordList& keep_words, const ModelBundle& bundle, const Vocabulary& vocab,
                                   const DebiasOptions& options);

struct RankChangeOptions {
    std::vector<int> layers; // empty: 1..L+1
    MaskFill fill = MaskFill::mean;
    uint64_t seed = 0;
    unsigned threads = 0;
};

struct RankChangeRecord {
    std::string image_id;
    TokenRef token;
    std::string original_top_text;
    size_t post_mask_rank = 1;
    std::string condition; // "object-mask" or "random-mask"

    size_t rank_change() const { return post_mask_rank - 1; }
    bool operator==(const RankChangeRecord&) const = default;
};

struct RankChangeResult {
    std::vector<RankChangeRecord> records;
    ExperimentReport report;
};

RankChangeResult rank_change_eval(std::span<const AnnotatedImage> images, const ModelBundle& bundle,
                                  const Vocabulary& vocab, const RankChangeOptions& options);

struct IopOptions {
    std::vector<int> layers; // empty: 1..L+1
    double threshold = 0.75;
    uint64_t seed = 0;
    unsigned threads = 0;
};

ExperimentReport iop_coverage(std::span<const AnnotatedImage> images, const ModelBundle& bundle,
                              const Vocabulary& vocab, const IopOptions& options);

// ---------------------------------------------------------------------------
// Typographical attack synthesis

// White box with black text drawn in a built-in 5x7 bitmap font, placed at a
// seeded uniform position. `scale` is the pixel size of one font dot; 0
// picks one so the text spans about half the image width.
Image synthesize_attack(const Image& image, const std::string& text, uint64_t seed, int scale = 0);

// Renders text in black onto `image` at (x, y). Unknown glyphs draw as boxes.
void draw_text(Image& image, const std::string& text, int x, int y, int scale, std::array<uint8_t, 3> color);
int text_width(const std::string& text, int scale);
inline constexpr int kGlyphWidth = 5;
inline constexpr int kGlyphHeight = 7;

} // namespace vitlens
