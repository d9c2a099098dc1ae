#include "vitlens/cli.hpp"

#include "vitlens/diag.hpp"
#include "vitlens/evaluator.hpp"
#include "vitlens/rng.hpp"
#include "vitlens/serialize.hpp"
#include "vitlens/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>

namespace vitlens {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code(ErrorCode code) {
    switch (code) {
    case ErrorCode::dimension:
    case ErrorCode::compatibility:
    case ErrorCode::shape_mismatch:
    case ErrorCode::version_mismatch: return kExitCompatibility;
    case ErrorCode::not_found:
    case ErrorCode::io: return kExitIo;
    default: return kExitInput;
    }
}

namespace {

std::atomic<httplib::Server*> g_server{nullptr};
std::atomic<int> g_port{0};
std::mutex g_server_mutex;

struct Options {
    // shared
    std::string bundle, output, classes;
    std::vector<std::string> vocabs;
    unsigned threads = 0;
    uint64_t seed = 0;
    int samples = 100;
    bool smoothing = false;
    std::string drift_file, calibration_dir;
    std::vector<int> layers;
    // token selection
    std::string image;
    int layer = 0;
    std::optional<int> position;
    size_t top_k = 10;
    double threshold = kSaliencyThreshold;
    double iop_threshold = 0.75;
    std::string overlay, boxes_file;
    // drift
    std::string images_dir;
    bool distances = false;
    // edit
    std::string wordlist, mode = "remove", donor, donor_wordlist, plan_in, plan_out;
    bool skip_cls = false;
    size_t top_k_membership = 1;
    // eval
    bool toy = false;
    int cases = 0;
    std::string annotations, data, attacked, attack_text, sources, donors, source_wordlist, train, test, csv, chart;
    std::string fill = "mean";
    bool no_smoothing = false;
    bool records = false;
    int debias_layer = 0;
    int epochs = 1;
    double lr = 1e-3;
    size_t batch_size = 256;
    // toy
    std::string kind = "identity", out_dir;
    int toy_layers = 2, toy_dim = 32, toy_heads = 1, toy_patch = 4, toy_grid = 4, toy_cases = 8;
    std::vector<std::string> concepts;
    // serve
    std::string host = "127.0.0.1", wordlists_dir;
    int port = 8080;
    size_t capacity = 256;
};

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::io, "cannot write " + path.string());
    f << text;
    if (!f) fail(ErrorCode::io, "write failed for " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) fail(ErrorCode::io, "cannot open " + path.string());
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        fail(ErrorCode::format, path.string() + ": " + e.what());
    }
}

void emit(const json& result, const Options& o, std::ostream& out) {
    if (o.output.empty()) {
        out << result.dump(2) << '\n';
    } else {
        write_text(o.output, result.dump(2) + "\n");
    }
}

ModelBundle need_bundle(const Options& o) {
    if (o.bundle.empty()) fail(ErrorCode::input, "--bundle (or VITLENS_BUNDLE) is required");
    return load_bundle(o.bundle);
}

Vocabulary need_vocab(const Options& o, const ModelBundle& bundle) {
    if (o.vocabs.empty()) fail(ErrorCode::input, "--vocab (or VITLENS_VOCAB) is required");
    Vocabulary v = load_vocabulary(o.vocabs.front());
    check_compatible(v, bundle.manifest);
    return v;
}

Vocabulary class_vocab(const Options& o, const ModelBundle& bundle, const Vocabulary& fallback) {
    if (o.classes.empty()) return fallback;
    Vocabulary v = load_vocabulary(o.classes);
    check_compatible(v, bundle.manifest);
    return v;
}

std::vector<fs::path> image_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) fail(ErrorCode::io, "not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) fail(ErrorCode::input, "no PNG or JPEG images in " + dir.string());
    return out;
}

std::vector<int> resolve_layers(const std::vector<int>& layers, int last) {
    if (!layers.empty()) return layers;
    std::vector<int> out;
    for (int k = 1; k <= last; ++k) out.push_back(k);
    return out;
}

// Drift for smoothed runs: a saved table, a calibration directory, or the
// given fallback inputs.
DriftTable resolve_drift(const Options& o, const ModelBundle& bundle, const std::vector<Tensor>& fallback) {
    if (!o.drift_file.empty()) {
        DriftTable d = drift_from_json(read_json(o.drift_file));
        if (d.num_layers != bundle.manifest.num_layers || d.num_positions != bundle.manifest.seq_len()) {
            fail(ErrorCode::dimension, "drift table does not match the bundle dimensions");
        }
        return d;
    }
    if (!o.calibration_dir.empty()) {
        std::vector<Tensor> sets;
        for (const auto& p : image_files(o.calibration_dir)) sets.push_back(preprocess(load_image(p), bundle.manifest));
        return calibrate_drift(std::span<const Tensor>(sets), bundle, fs::path(o.calibration_dir).filename().string());
    }
    warn("no --drift or --calibration given; calibrating drift on the input itself");
    return calibrate_drift(std::span<const Tensor>(fallback), bundle, "input");
}

std::optional<SmoothingOptions> smoothing(const Options& o) {
    if (!o.smoothing) return std::nullopt;
    return SmoothingOptions{o.samples, o.seed};
}

// ---------------------------------------------------------------------------
// Dataset files: {"items": [{"id"?, "path" | "patches"+"shape", "label", "group"?}]}
// with paths relative to the file.

struct DataItem {
    std::string id;
    Tensor patches;
    std::optional<Image> image;
    json label;
    std::string group;
};

std::vector<DataItem> load_items(const fs::path& file, const Manifest& m) {
    const json j = read_json(file);
    const json& arr = j.is_object() && j.contains("items") ? j["items"] : j;
    if (!arr.is_array()) fail(ErrorCode::format, file.string() + ": expected an array of items");
    std::vector<DataItem> out;
    try {
        for (const auto& e : arr) {
            DataItem item;
            item.label = e.value("label", json());
            item.group = e.value("group", std::string());
            if (e.contains("patches")) {
                const auto shape = e.at("shape").get<std::vector<int64_t>>();
                auto values = floats_from_base64(e.at("patches").get<std::string>());
                if (shape.size() != 2 || static_cast<int64_t>(values.size()) != shape[0] * shape[1]) {
                    fail(ErrorCode::format, file.string() + ": patch payload does not match its shape");
                }
                if (shape[0] != m.num_patches() || shape[1] != m.patch_dim()) {
                    fail(ErrorCode::dimension, file.string() + ": patch tensor does not match the bundle");
                }
                item.patches = Tensor({shape[0], shape[1]}, std::move(values));
                item.id = e.value("id", "item-" + std::to_string(out.size()));
            } else {
                const fs::path path = file.parent_path() / e.at("path").get<std::string>();
                item.image = load_image(path);
                item.patches = preprocess(*item.image, m);
                item.id = e.value("id", path.filename().string());
            }
            out.push_back(std::move(item));
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::format, file.string() + ": " + e.what());
    }
    return out;
}

int label_index(const json& label, const Vocabulary* classes) {
    if (label.is_number_integer()) return label.get<int>();
    if (label.is_string() && classes) {
        if (const auto idx = classes->index_of(label.get<std::string>())) return static_cast<int>(*idx);
        fail(ErrorCode::input, "label '" + label.get<std::string>() + "' is not in the class vocabulary");
    }
    fail(ErrorCode::input, "item labels must be class names or integers");
}

std::vector<LabeledInput> labeled(const std::vector<DataItem>& items, const Vocabulary* classes,
                                  std::vector<std::string>* group_names = nullptr) {
    std::vector<LabeledInput> out;
    for (const auto& item : items) {
        int group = 0;
        if (group_names && !item.group.empty()) {
            auto it = std::find(group_names->begin(), group_names->end(), item.group);
            if (it == group_names->end()) it = group_names->insert(group_names->end(), item.group);
            group = static_cast<int>(it - group_names->begin());
        }
        out.push_back({item.id, item.patches, label_index(item.label, classes), group});
    }
    return out;
}

std::vector<AnnotatedImage> load_annotations(const fs::path& file) {
    const json j = read_json(file);
    const json& arr = j.is_object() && j.contains("images") ? j["images"] : j;
    if (!arr.is_array()) fail(ErrorCode::format, file.string() + ": expected an array of images");
    std::vector<AnnotatedImage> out;
    try {
        for (const auto& e : arr) {
            const fs::path path = file.parent_path() / e.at("path").get<std::string>();
            AnnotatedImage img{e.value("id", path.filename().string()), load_image(path), boxes_from_json(e.at("boxes"))};
            validate_boxes(img.boxes, img.image.width, img.image.height);
            out.push_back(std::move(img));
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::format, file.string() + ": " + e.what());
    }
    return out;
}

ExperimentOptions experiment_options(const Options& o) {
    ExperimentOptions e;
    e.layers = o.layers;
    e.top_k_membership = o.top_k_membership;
    e.skip_cls = o.skip_cls;
    e.with_smoothing = !o.no_smoothing;
    e.samples = o.samples;
    e.seed = o.seed;
    e.threads = o.threads;
    return e;
}

ToySpec toy_spec(const Options& o, ToyKind kind) {
    ToySpec s;
    s.kind = kind;
    s.layers = o.toy_layers;
    s.dim = o.toy_dim;
    s.heads = o.toy_heads;
    s.patch_size = o.toy_patch;
    s.grid = o.toy_grid;
    s.planted_concepts = o.concepts;
    s.cases = o.cases > 0 ? o.cases : o.toy_cases;
    s.seed = o.seed;
    return s;
}

const WordList& toy_wordlist(const ToyModel& toy, const std::string& id) {
    for (const auto& w : toy.wordlists) {
        if (w.id == id) return w;
    }
    fail(ErrorCode::not_found, "toy fixture has no word list '" + id + "'");
}

void write_report_extras(const ExperimentReport& report, const Options& o) {
    if (!o.csv.empty()) write_text(o.csv, report_to_csv(report));
    if (!o.chart.empty()) save_png(report_chart(report), o.chart);
}

// ---------------------------------------------------------------------------
// Commands

json cmd_interpret(const Options& o) {
    const ModelBundle bundle = need_bundle(o);
    const Vocabulary vocab = need_vocab(o, bundle);
    const Tensor patches = preprocess(load_image(o.image), bundle.manifest);
    const ActivationTrace trace = forward_full(patches, bundle);
    check_token(TokenRef{o.layer, o.position.value_or(0)}, bundle.manifest.num_layers, bundle.manifest.seq_len());
    InterpretOptions opts;
    opts.top_k = o.top_k;
    opts.threads = o.threads;
    opts.smoothing = smoothing(o);
    std::optional<DriftTable> drift;
    if (opts.smoothing) {
        drift = resolve_drift(o, bundle, {patches});
        opts.drift = &*drift;
    }
    json interps = interpretations_json(o.layer, o.position, trace, bundle, vocab, opts);
    json out{{"image", o.image}, {"layer", o.layer}, {"vocab_id", vocab.id()}, {"interpretations", std::move(interps)}};
    if (drift) out["drift"] = {{"calibration_set_id", drift->calibration_set_id}, {"calibration_size", drift->calibration_size}};
    return out;
}

json cmd_drift(const Options& o) {
    const ModelBundle bundle = need_bundle(o);
    std::vector<Tensor> sets;
    for (const auto& p : image_files(o.images_dir)) sets.push_back(preprocess(load_image(p), bundle.manifest));
    const DriftTable d =
        calibrate_drift(std::span<const Tensor>(sets), bundle, fs::path(o.images_dir).filename().string());
    return drift_to_json(d, o.distances);
}

json cmd_saliency(const Options& o) {
    const ModelBundle bundle = need_bundle(o);
    const Image image = load_image(o.image);
    const ActivationTrace trace = forward_full(preprocess(image, bundle.manifest), bundle);
    const SaliencyMap map = token_saliency({o.layer, o.position.value_or(0)}, trace, o.threshold);
    json out = saliency_to_json(map);
    out["image"] = o.image;
    if (!o.overlay.empty()) {
        save_png(saliency_overlay(model_frame(image, bundle.manifest), map), o.overlay);
        out["overlay"] = o.overlay;
    }
    if (!o.boxes_file.empty()) {
        const auto boxes = boxes_from_json(read_json(o.boxes_file));
        validate_boxes(boxes, image.width, image.height);
        const auto truth = map_boxes_to_model(boxes, image.width, image.height, bundle.manifest);
        const auto score = iop(map.mask, map.grid_size, bundle.manifest.patch_size, truth);
        out["iop"] = score ? json(*score) : json(nullptr);
    }
    return out;
}

json cmd_edit(const Options& o) {
    const ModelBundle bundle = need_bundle(o);
    const Vocabulary vocab = need_vocab(o, bundle);
    const Vocabulary classes = class_vocab(o, bundle, vocab);
    const Manifest& m = bundle.manifest;
    const Tensor patches = preprocess(load_image(o.image), m);
    const ActivationTrace trace = forward_full(patches, bundle);
    std::vector<std::string> warnings;

    InterventionPlan plan;
    if (!o.plan_in.empty()) {
        plan = plan_from_json(read_json(o.plan_in));
    } else {
        if (o.wordlist.empty()) fail(ErrorCode::input, "edit needs --wordlist or --plan");
        const WordList words = load_wordlist(o.wordlist, parse_wordlist_mode(o.mode));
        MatchOptions mopts;
        mopts.top_k_membership = o.top_k_membership;
        mopts.skip_cls = o.skip_cls;
        mopts.threads = o.threads;
        mopts.smoothing = smoothing(o);
        std::optional<DriftTable> drift;
        std::vector<Tensor> calibration{patches};
        std::optional<Tensor> donor_patches;
        if (!o.donor.empty()) {
            donor_patches = preprocess(load_image(o.donor), m);
            calibration.push_back(*donor_patches);
        }
        if (mopts.smoothing) {
            drift = resolve_drift(o, bundle, calibration);
            mopts.drift = &*drift;
        }
        const auto layers = resolve_layers(o.layers, m.num_layers);
        const MatchResult targets = match_tokens(trace, bundle, vocab, words, layers, mopts);
        warnings.insert(warnings.end(), targets.warnings.begin(), targets.warnings.end());
        if (!donor_patches) {
            plan = build_zero_plan(targets.tokens, Provenance{"zero", words.id, ""});
        } else {
            const WordList donor_words =
                load_wordlist(o.donor_wordlist.empty() ? o.wordlist : o.donor_wordlist, WordListMode::remove_matching);
            const ActivationTrace donor_trace = forward_full(*donor_patches, bundle);
            const MatchResult donor_tokens = match_tokens(donor_trace, bundle, vocab, donor_words, layers, mopts);
            warnings.insert(warnings.end(), donor_tokens.warnings.begin(), donor_tokens.warnings.end());
            auto swap = build_swap_plan(targets.tokens, donor_trace, donor_tokens.tokens, o.seed,
                                        Provenance{"swap", words.id, o.donor});
            warnings.insert(warnings.end(), swap.warnings.begin(), swap.warnings.end());
            plan = std::move(swap.plan);
        }
    }
    plan.validate(m.num_layers, m.seq_len(), m.hidden_dim);
    const json plan_json = plan_to_json(plan);
    if (!o.plan_out.empty()) write_text(o.plan_out, plan_json.dump(2) + "\n");

    auto top = [&](Ranking r) {
        if (o.top_k > 0 && r.size() > o.top_k) r.resize(o.top_k);
        return ranking_to_json(r);
    };
    json stats = json::object();
    for (int k = 1; k <= m.num_layers + 1; ++k) stats[std::to_string(k)] = 0;
    for (const auto& [layer, count] : plan.stats()) stats[std::to_string(layer)] = count;
    return {{"image", o.image},
            {"plan", plan_json},
            {"class_vocab_id", classes.id()},
            {"ranking_before", top(classify_trace(trace, bundle, classes))},
            {"ranking_after", top(classify(patches, bundle, classes, &plan))},
            {"replaced_per_layer", std::move(stats)},
            {"warnings", warnings}};
}

json cmd_eval_rank_change(const Options& o, bool iop_mode) {
    std::optional<ToyModel> toy;
    ModelBundle bundle;
    Vocabulary vocab;
    std::vector<AnnotatedImage> images;
    if (o.toy) {
        toy = make_toy_model(toy_spec(o, ToyKind::identity));
        bundle = toy->bundle;
        vocab = toy->vocab;
        images = toy->images;
    } else {
        if (o.annotations.empty()) fail(ErrorCode::input, "eval needs --annotations or --toy");
        bundle = need_bundle(o);
        vocab = need_vocab(o, bundle);
        images = load_annotations(o.annotations);
    }
    if (iop_mode) {
        IopOptions opts;
        opts.layers = o.layers;
        opts.threshold = o.iop_threshold;
        opts.seed = o.seed;
        opts.threads = o.threads;
        const ExperimentReport report = iop_coverage(images, bundle, vocab, opts);
        write_report_extras(report, o);
        json out = report_to_json(report);
        if (const ReportRow* row = report.find("all", "saliency", "high-iop")) {
            out["fraction"] = row->total > 0 ? static_cast<double>(row->count) / static_cast<double>(row->total) : 0.0;
        }
        return out;
    }
    RankChangeOptions opts;
    opts.layers = o.layers;
    opts.fill = o.fill == "zero" ? MaskFill::zero : MaskFill::mean;
    if (o.fill != "zero" && o.fill != "mean") fail(ErrorCode::input, "--fill must be mean or zero");
    opts.seed = o.seed;
    opts.threads = o.threads;
    const RankChangeResult result = rank_change_eval(images, bundle, vocab, opts);
    write_report_extras(result.report, o);
    json out = report_to_json(result.report);
    if (o.records) {
        json recs = json::array();
        for (const auto& r : result.records) {
            recs.push_back({{"image_id", r.image_id},
                            {"layer", r.token.layer},
                            {"position", r.token.position},
                            {"text", r.original_top_text},
                            {"condition", r.condition},
                            {"post_mask_rank", r.post_mask_rank}});
        }
        out["records"] = std::move(recs);
    }
    return out;
}

json cmd_eval_attack(const Options& o) {
    ExperimentReport report;
    if (o.toy) {
        const ToyModel toy = make_toy_model(toy_spec(o, ToyKind::planted_attack));
        report = typographical_experiment(toy.first, toy.second, toy_wordlist(toy, "typographic_text"), toy.bundle,
                                          toy.vocab, toy.class_vocab, experiment_options(o));
    } else {
        const ModelBundle bundle = need_bundle(o);
        const Vocabulary vocab = need_vocab(o, bundle);
        const Vocabulary classes = class_vocab(o, bundle, vocab);
        if (o.data.empty() || o.wordlist.empty()) fail(ErrorCode::input, "eval attack needs --data and --wordlist");
        const auto clean_items = load_items(o.data, bundle.manifest);
        const auto clean = labeled(clean_items, &classes);
        std::vector<LabeledInput> attacked;
        if (!o.attacked.empty()) {
            attacked = labeled(load_items(o.attacked, bundle.manifest), &classes);
        } else if (!o.attack_text.empty()) {
            for (size_t i = 0; i < clean_items.size(); ++i) {
                if (!clean_items[i].image) fail(ErrorCode::input, "--attack-text needs image items, not patch tensors");
                const Image attacked_image =
                    synthesize_attack(*clean_items[i].image, o.attack_text, CounterRng(o.seed).derive(7).bits(i));
                attacked.push_back({clean[i].id + "+text", preprocess(attacked_image, bundle.manifest), clean[i].label, 0});
            }
        } else {
            fail(ErrorCode::input, "eval attack needs --attacked or --attack-text");
        }
        report = typographical_experiment(clean, attacked, load_wordlist(o.wordlist, WordListMode::remove_matching),
                                          bundle, vocab, classes, experiment_options(o));
    }
    write_report_extras(report, o);
    return report_to_json(report);
}

json cmd_eval_entity(const Options& o) {
    ExperimentReport report;
    if (o.toy) {
        const ToyModel toy = make_toy_model(toy_spec(o, ToyKind::two_concept));
        report = entity_intervention_experiment(toy.first, toy.second, toy_wordlist(toy, "car"),
                                                toy_wordlist(toy, "airplane"), toy.bundle, toy.vocab, toy.class_vocab,
                                                experiment_options(o));
    } else {
        const ModelBundle bundle = need_bundle(o);
        const Vocabulary vocab = need_vocab(o, bundle);
        const Vocabulary classes = class_vocab(o, bundle, vocab);
        if (o.sources.empty() || o.donors.empty() || o.source_wordlist.empty() || o.donor_wordlist.empty()) {
            fail(ErrorCode::input, "eval entity needs --sources, --donors, --source-wordlist and --donor-wordlist");
        }
        report = entity_intervention_experiment(
            labeled(load_items(o.sources, bundle.manifest), &classes), labeled(load_items(o.donors, bundle.manifest), &classes),
            load_wordlist(o.source_wordlist, WordListMode::remove_matching),
            load_wordlist(o.donor_wordlist, WordListMode::remove_matching), bundle, vocab, classes, experiment_options(o));
    }
    write_report_extras(report, o);
    return report_to_json(report);
}

json cmd_eval_debias(const Options& o) {
    DebiasOptions opts;
    opts.base = experiment_options(o);
    opts.layer = o.debias_layer;
    opts.probe.epochs = o.epochs;
    opts.probe.lr = o.lr;
    opts.probe.batch_size = o.batch_size;
    opts.probe.seed = o.seed;
    ExperimentReport report;
    if (o.toy) {
        const ToyModel toy = make_toy_model(toy_spec(o, ToyKind::spurious));
        opts.group_names = toy.group_names;
        report = debias_experiment(toy.first, toy.second, toy_wordlist(toy, "hair"), toy.bundle, toy.vocab, opts);
    } else {
        const ModelBundle bundle = need_bundle(o);
        const Vocabulary vocab = need_vocab(o, bundle);
        std::optional<Vocabulary> classes;
        if (!o.classes.empty()) classes = class_vocab(o, bundle, vocab);
        if (o.train.empty() || o.test.empty() || o.wordlist.empty()) {
            fail(ErrorCode::input, "eval debias needs --train, --test and --wordlist");
        }
        const auto train = labeled(load_items(o.train, bundle.manifest), classes ? &*classes : nullptr, &opts.group_names);
        const auto test = labeled(load_items(o.test, bundle.manifest), classes ? &*classes : nullptr, &opts.group_names);
        int max_label = 0;
        for (const auto& x : train) max_label = std::max(max_label, x.label);
        opts.num_classes = classes ? static_cast<int>(classes->size()) : max_label + 1;
        report = debias_experiment(train, test, load_wordlist(o.wordlist, WordListMode::keep_matching), bundle, vocab, opts);
    }
    write_report_extras(report, o);
    return report_to_json(report);
}

json labeled_json(const LabeledInput& x, const ToyModel& toy) {
    json item{{"id", x.id}, {"shape", x.patches.shape()}, {"patches", floats_to_base64(x.patches.data())}};
    item["label"] = toy.class_vocab.empty() ? json(x.label) : json(toy.class_vocab.text(static_cast<size_t>(x.label)));
    if (!toy.group_names.empty()) item["group"] = toy.group_names.at(static_cast<size_t>(x.group));
    return item;
}

json cmd_toy(const Options& o) {
    if (o.out_dir.empty()) fail(ErrorCode::input, "toy needs --out");
    const ToyKind kind = parse_toy_kind(o.kind);
    const ToyModel toy = make_toy_model(toy_spec(o, kind));
    const fs::path dir = o.out_dir;
    fs::create_directories(dir);
    save_bundle(toy.bundle, dir / "bundle");
    save_vocabulary(toy.vocab, dir / "vocab.bin");
    json files{{"bundle", (dir / "bundle").string()}, {"vocab", (dir / "vocab.bin").string()}};
    if (!toy.class_vocab.empty()) {
        save_vocabulary(toy.class_vocab, dir / "classes.bin");
        files["classes"] = (dir / "classes.bin").string();
    }
    json wordlists = json::array();
    for (const auto& w : toy.wordlists) {
        std::string text;
        for (const auto& word : w.words) text += word + "\n";
        const fs::path p = dir / "wordlists" / (w.id + ".txt");
        write_text(p, text);
        wordlists.push_back({{"id", w.id}, {"path", p.string()}, {"mode", std::string(to_string(w.mode))}});
    }
    files["wordlists"] = std::move(wordlists);
    if (!toy.images.empty()) {
        json entries = json::array();
        fs::create_directories(dir / "images");
        for (const auto& img : toy.images) {
            const std::string rel = "images/" + img.id + ".png";
            save_png(img.image, dir / rel);
            entries.push_back({{"id", img.id}, {"path", rel}, {"boxes", boxes_to_json(img.boxes)}});
        }
        write_text(dir / "annotations.json", json{{"images", entries}}.dump(2) + "\n");
        files["annotations"] = (dir / "annotations.json").string();
    }
    const std::map<ToyKind, std::pair<std::string, std::string>> set_names{
        {ToyKind::planted_attack, {"clean", "attacked"}},
        {ToyKind::two_concept, {"sources", "donors"}},
        {ToyKind::spurious, {"train", "test"}}};
    if (const auto it = set_names.find(kind); it != set_names.end()) {
        for (const auto& [name, set] : {std::pair{it->second.first, &toy.first}, std::pair{it->second.second, &toy.second}}) {
            json items = json::array();
            for (const auto& x : *set) items.push_back(labeled_json(x, toy));
            const fs::path p = dir / "cases" / (name + ".json");
            write_text(p, json{{"items", items}}.dump() + "\n");
            files["cases"][name] = p.string();
        }
    }
    return {{"kind", std::string(to_string(kind))}, {"seed", o.seed}, {"manifest", manifest_to_json(toy.bundle.manifest)},
            {"files", std::move(files)}};
}

int cmd_serve(const Options& o, std::ostream& out) {
    ModelBundle bundle = need_bundle(o);
    std::vector<Vocabulary> vocabs;
    for (const auto& p : o.vocabs) vocabs.push_back(load_vocabulary(p));
    if (!o.classes.empty()) vocabs.push_back(load_vocabulary(o.classes));
    std::vector<WordList> wordlists;
    if (!o.wordlists_dir.empty()) {
        if (!fs::is_directory(o.wordlists_dir)) fail(ErrorCode::io, "not a directory: " + o.wordlists_dir);
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(o.wordlists_dir)) {
            if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) wordlists.push_back(load_wordlist(f, WordListMode::remove_matching));
    }
    ServiceConfig config;
    config.image_capacity = o.capacity;
    config.plan_capacity = o.capacity;
    config.threads = o.threads;
    Service service(std::move(bundle), std::move(vocabs), std::move(wordlists), config);

    httplib::Server server;
    service.mount(server);
    int port = o.port;
    if (port == 0) {
        port = server.bind_to_any_port(o.host);
    } else if (!server.bind_to_port(o.host, port)) {
        port = -1;
    }
    if (port < 0) fail(ErrorCode::io, "cannot bind " + o.host + ":" + std::to_string(o.port));
    {
        std::lock_guard lock(g_server_mutex);
        g_server = &server;
        g_port = port;
    }
    out << json{{"status", "listening"}, {"host", o.host}, {"port", port}, {"model", service.model_summary()}}.dump()
        << std::endl;
    const bool ok = server.listen_after_bind();
    {
        std::lock_guard lock(g_server_mutex);
        g_server = nullptr;
        g_port = 0;
    }
    return ok ? kExitOk : kExitIo;
}

json usage_error(const std::string& message) { return {{"error", {{"code", "usage"}, {"message", message}}}}; }

} // namespace

int serving_port() { return g_port.load(); }

void stop_serving() {
    std::lock_guard lock(g_server_mutex);
    if (httplib::Server* s = g_server.load()) s->stop();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options o;
    CLI::App app{"Latent-token interpretation and editing for vision transformers", "vitlens"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    auto add_bundle = [&](CLI::App* c, bool required) {
        auto* opt = c->add_option("--bundle", o.bundle, "Model bundle directory")->envname("VITLENS_BUNDLE");
        if (required) opt->required();
    };
    auto add_vocab = [&](CLI::App* c) {
        c->add_option("--vocab", o.vocabs, "Vocabulary file")->envname("VITLENS_VOCAB")->required()->expected(1);
    };
    auto add_output = [&](CLI::App* c) { c->add_option("-o,--output", o.output, "Write the JSON result here"); };
    auto add_threads = [&](CLI::App* c) {
        c->add_option("--threads", o.threads, "Worker threads (0: all cores)")->envname("VITLENS_THREADS");
    };
    auto add_seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Random seed")->envname("VITLENS_SEED"); };
    auto add_smoothing = [&](CLI::App* c) {
        c->add_flag("--smoothing", o.smoothing, "Random-smoothing interpretation");
        c->add_option("--samples", o.samples, "Smoothing samples")->envname("VITLENS_SAMPLES");
        c->add_option("--drift", o.drift_file, "Drift table JSON (from `drift`)");
        c->add_option("--calibration", o.calibration_dir, "Image directory to calibrate drift on");
    };
    auto add_token = [&](CLI::App* c, bool position_required) {
        c->add_option("--image", o.image, "Input image (PNG or JPEG)")->required();
        c->add_option("--layer", o.layer, "Token layer i in 1..L+1")->required();
        auto* p = c->add_option("--position", o.position, "Token position j (0 is CLS)");
        if (position_required) p->required();
    };

    auto* interpret = app.add_subcommand("interpret", "Rank vocabulary texts for latent tokens");
    add_bundle(interpret, true);
    add_vocab(interpret);
    add_token(interpret, false);
    interpret->add_option("-k,--top-k", o.top_k, "Texts per token (0: all)");
    add_smoothing(interpret);
    add_seed(interpret);
    add_threads(interpret);
    add_output(interpret);

    auto* drift = app.add_subcommand("drift", "Calibrate the smoothing drift table");
    add_bundle(drift, true);
    drift->add_option("--images", o.images_dir, "Calibration image directory")->required();
    drift->add_flag("--distances", o.distances, "Include per-token distances (histogram data)");
    add_output(drift);

    auto* saliency = app.add_subcommand("saliency", "Rollout saliency map for one token");
    add_bundle(saliency, true);
    add_token(saliency, true);
    saliency->add_option("--threshold", o.threshold, "Mask threshold on the normalized map");
    saliency->add_option("--overlay", o.overlay, "Write a heat overlay PNG");
    saliency->add_option("--boxes", o.boxes_file, "Truth boxes JSON (original pixels) to score IOP");
    add_output(saliency);

    auto* edit = app.add_subcommand("edit", "Build and apply an intervention plan");
    add_bundle(edit, true);
    add_vocab(edit);
    edit->add_option("--classes", o.classes, "Class vocabulary for predictions")->envname("VITLENS_CLASSES");
    edit->add_option("--image", o.image, "Input image")->required();
    edit->add_option("--wordlist", o.wordlist, "Word list file, one phrase per line");
    edit->add_option("--mode", o.mode, "remove or keep")->check(CLI::IsMember({"remove", "keep"}));
    edit->add_option("--layers", o.layers, "Layers to scan, comma separated (default 1..L)")->delimiter(',');
    edit->add_flag("--skip-cls", o.skip_cls, "Never select the CLS token");
    edit->add_option("--top-k-membership", o.top_k_membership, "Match within the top-k texts");
    edit->add_option("--donor", o.donor, "Donor image: swap instead of zeroing");
    edit->add_option("--donor-wordlist", o.donor_wordlist, "Word list selecting donor tokens");
    edit->add_option("--plan", o.plan_in, "Apply this plan JSON instead of matching");
    edit->add_option("--plan-out", o.plan_out, "Write the plan JSON here");
    edit->add_option("-k,--top-k", o.top_k, "Predictions to report");
    add_smoothing(edit);
    add_seed(edit);
    add_threads(edit);
    add_output(edit);

    auto* eval = app.add_subcommand("eval", "Run an evaluation or control experiment");
    eval->require_subcommand(1);
    auto add_eval_common = [&](CLI::App* c) {
        c->add_flag("--toy", o.toy, "Use the built-in synthetic fixture");
        c->add_option("--cases", o.cases, "Fixture cases per set");
        add_bundle(c, false);
        c->add_option("--vocab", o.vocabs, "Vocabulary file")->envname("VITLENS_VOCAB")->expected(1);
        c->add_option("--layers", o.layers, "Layers, comma separated")->delimiter(',');
        c->add_option("--csv", o.csv, "Also write the report as CSV");
        c->add_option("--chart", o.chart, "Also write a bar chart PNG");
        add_seed(c);
        add_threads(c);
        add_output(c);
    };
    auto add_experiment = [&](CLI::App* c) {
        add_eval_common(c);
        c->add_option("--classes", o.classes, "Class vocabulary")->envname("VITLENS_CLASSES");
        c->add_flag("--no-smoothing", o.no_smoothing, "Skip the random-smoothing condition");
        c->add_option("--samples", o.samples, "Smoothing samples")->envname("VITLENS_SAMPLES");
        c->add_flag("--skip-cls", o.skip_cls, "Never select the CLS token");
        c->add_option("--top-k-membership", o.top_k_membership, "Match within the top-k texts");
    };
    auto* rank_change = eval->add_subcommand("rank-change", "Rank change of top texts under object masking");
    add_eval_common(rank_change);
    rank_change->add_option("--annotations", o.annotations, "Images with labelled boxes (JSON)");
    rank_change->add_option("--fill", o.fill, "Mask fill: mean or zero");
    rank_change->add_flag("--records", o.records, "Include per-token records");
    auto* iop_cmd = eval->add_subcommand("iop", "Saliency coverage of labelled objects");
    add_eval_common(iop_cmd);
    iop_cmd->add_option("--annotations", o.annotations, "Images with labelled boxes (JSON)");
    iop_cmd->add_option("--threshold", o.iop_threshold, "IOP needed to count as covered");
    auto* attack = eval->add_subcommand("attack", "Typographical attack repair");
    add_experiment(attack);
    attack->add_option("--wordlist", o.wordlist, "Text word list");
    attack->add_option("--data", o.data, "Clean items (JSON)");
    attack->add_option("--attacked", o.attacked, "Attacked items paired with --data (JSON)");
    attack->add_option("--attack-text", o.attack_text, "Synthesize attacks with this text instead");
    auto* entity = eval->add_subcommand("entity", "Entity swap between image sets");
    add_experiment(entity);
    entity->add_option("--sources", o.sources, "Source items (JSON)");
    entity->add_option("--donors", o.donors, "Donor items (JSON)");
    entity->add_option("--source-wordlist", o.source_wordlist, "Words selecting source tokens");
    entity->add_option("--donor-wordlist", o.donor_wordlist, "Words selecting donor tokens");
    auto* debias = eval->add_subcommand("debias", "Keep-list debiasing of a linear probe");
    add_experiment(debias);
    debias->add_option("--train", o.train, "Training items with groups (JSON)");
    debias->add_option("--test", o.test, "Test items with groups (JSON)");
    debias->add_option("--wordlist", o.wordlist, "Keep word list");
    debias->add_option("--layer", o.debias_layer, "Keep-list layer (0: L)");
    debias->add_option("--epochs", o.epochs, "Probe epochs");
    debias->add_option("--lr", o.lr, "Probe learning rate");
    debias->add_option("--batch-size", o.batch_size, "Probe batch size");

    auto* toy = app.add_subcommand("toy", "Write a synthetic fixture bundle");
    toy->add_option("--kind", o.kind, "identity, random, planted-attack, two-concept or spurious");
    toy->add_option("--out", o.out_dir, "Output directory")->required();
    toy->add_option("--layers", o.toy_layers, "Blocks");
    toy->add_option("--dim", o.toy_dim, "Hidden width");
    toy->add_option("--heads", o.toy_heads, "Attention heads");
    toy->add_option("--patch-size", o.toy_patch, "Patch side in pixels");
    toy->add_option("--grid", o.toy_grid, "Patches per side");
    toy->add_option("--cases", o.toy_cases, "Cases per set");
    toy->add_option("--concepts", o.concepts, "Planted word per position (identity)")->delimiter(',');
    add_seed(toy);
    add_output(toy);

    auto* serve = app.add_subcommand("serve", "Run the HTTP/JSON service");
    add_bundle(serve, true);
    serve->add_option("--vocab", o.vocabs, "Vocabulary files (repeatable)")->envname("VITLENS_VOCAB");
    serve->add_option("--classes", o.classes, "Class vocabulary")->envname("VITLENS_CLASSES");
    serve->add_option("--wordlists", o.wordlists_dir, "Directory of *.txt word lists")->envname("VITLENS_WORDLISTS");
    serve->add_option("--host", o.host, "Bind address")->envname("VITLENS_HOST");
    serve->add_option("--port", o.port, "Port (0: any free port)")->envname("VITLENS_PORT");
    serve->add_option("--capacity", o.capacity, "Stored images and plans before eviction")->envname("VITLENS_CAPACITY");
    add_threads(serve);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        const CLI::App* target = &app;
        for (auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front(); sub;
             sub = sub->get_subcommands().empty() ? nullptr : sub->get_subcommands().front()) {
            target = sub;
        }
        out << target->help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << usage_error(e.what()).dump() << '\n';
        return kExitUsage;
    }

    set_warning_sink([&err](const std::string& msg) { err << "warning: " << msg << '\n'; });
    auto restore = [] { set_warning_sink([](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }); };
    int code = kExitOk;
    try {
        if (interpret->parsed()) emit(cmd_interpret(o), o, out);
        else if (drift->parsed()) emit(cmd_drift(o), o, out);
        else if (saliency->parsed()) emit(cmd_saliency(o), o, out);
        else if (edit->parsed()) emit(cmd_edit(o), o, out);
        else if (rank_change->parsed()) emit(cmd_eval_rank_change(o, false), o, out);
        else if (iop_cmd->parsed()) emit(cmd_eval_rank_change(o, true), o, out);
        else if (attack->parsed()) emit(cmd_eval_attack(o), o, out);
        else if (entity->parsed()) emit(cmd_eval_entity(o), o, out);
        else if (debias->parsed()) emit(cmd_eval_debias(o), o, out);
        else if (toy->parsed()) emit(cmd_toy(o), o, out);
        else if (serve->parsed()) code = cmd_serve(o, out);
    } catch (const Error& e) {
        err << error_json(e.code(), e.what()).dump() << '\n';
        code = exit_code(e.code());
    } catch (const std::exception& e) {
        err << json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump() << '\n';
        code = kExitFailure;
    }
    restore();
    return code;
}

} // namespace vitlens
