#include "vitlens/evaluator.hpp"

#include "vitlens/diag.hpp"
#include "vitlens/error.hpp"
#include "vitlens/parallel.hpp"
#include "vitlens/rng.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace vitlens {

using nlohmann::json;

namespace {

constexpr const char* kNoIntervention = "no-intervention";
constexpr const char* kRandomIntervention = "random-intervention";
constexpr const char* kOurs = "ours";
constexpr const char* kOursRs = "ours+rs";

uint64_t sub_seed(uint64_t seed, uint64_t a, uint64_t b = 0) { return CounterRng(seed).derive(a).bits(b); }

std::vector<int> default_layers(const std::vector<int>& layers, int last) {
    if (!layers.empty()) return layers;
    std::vector<int> out(static_cast<size_t>(last));
    std::iota(out.begin(), out.end(), 1);
    return out;
}

double percent(int64_t count, int64_t total) {
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(count) / static_cast<double>(total);
}

ReportRow make_row(std::string set, std::string condition, std::string metric, int64_t count, int64_t total) {
    return ReportRow{std::move(set), std::move(condition), std::move(metric), percent(count, total), count, total};
}

size_t top1(const Ranking& ranking) { return ranking.front().index; }

MatchOptions match_options(const ExperimentOptions& o, bool smoothed, const DriftTable* drift) {
    MatchOptions m;
    m.top_k_membership = o.top_k_membership;
    m.skip_cls = o.skip_cls;
    m.threads = 1;
    if (smoothed) {
        m.smoothing = SmoothingOptions{o.samples, o.seed};
        m.drift = drift;
    }
    return m;
}

WordList as_remove_list(WordList words) {
    words.mode = WordListMode::remove_matching;
    return words;
}

// Drift table for smoothed runs: the caller's, or one calibrated on `inputs`.
std::optional<DriftTable> drift_for(const ExperimentOptions& o, std::span<const LabeledInput> inputs,
                                    const ModelBundle& bundle, const std::string& set_id) {
    if (!o.with_smoothing || o.drift || inputs.empty()) return std::nullopt;
    std::vector<Tensor> patches;
    patches.reserve(inputs.size());
    for (const auto& in : inputs) patches.push_back(in.patches);
    return calibrate_drift(std::span<const Tensor>(patches), bundle, set_id);
}

void accumulate_stats(std::map<int, double>& into, const InterventionPlan& plan) {
    for (const auto& [layer, count] : plan.stats()) into[layer] += count;
}

void finish_average(std::map<int, double>& sums, size_t n, int num_layers) {
    for (int k = 1; k <= num_layers + 1; ++k) sums.try_emplace(k, 0.0);
    if (n == 0) return;
    for (auto& [_, v] : sums) v /= static_cast<double>(n);
}

json options_json(const ExperimentOptions& o, const std::vector<int>& layers) {
    return {{"layers", layers},
            {"top_k_membership", o.top_k_membership},
            {"skip_cls", o.skip_cls},
            {"with_smoothing", o.with_smoothing},
            {"samples", o.samples},
            {"seed", o.seed}};
}

// Zeroes, per layer, as many uniformly drawn non-CLS tokens as `guided` does.
InterventionPlan random_plan_like(const InterventionPlan& guided, int seq_len, uint64_t seed) {
    std::vector<TokenRef> tokens;
    SeededStream rng(seed);
    std::vector<int> positions(static_cast<size_t>(seq_len - 1));
    for (const auto& [layer, count] : guided.stats()) {
        std::iota(positions.begin(), positions.end(), 1);
        rng.shuffle(std::span<int>(positions));
        const auto n = std::min(static_cast<size_t>(count), positions.size());
        for (size_t i = 0; i < n; ++i) tokens.push_back({layer, positions[i]});
    }
    return build_zero_plan(tokens, Provenance{"random-zero", "", ""});
}

} // namespace

ExperimentReport typographical_experiment(std::span<const LabeledInput> clean, std::span<const LabeledInput> attacked,
                                          const WordList& words, const ModelBundle& bundle, const Vocabulary& vocab,
                                          const Vocabulary& class_vocab, const ExperimentOptions& options) {
    check_compatible(vocab, bundle.manifest);
    check_compatible(class_vocab, bundle.manifest);
    if (class_vocab.empty()) fail(ErrorCode::input, "typographical experiment needs a class vocabulary");
    const int num_layers = bundle.manifest.num_layers;
    const auto layers = default_layers(options.layers, num_layers);
    const WordList remove = as_remove_list(words);
    const auto own_drift = drift_for(options, clean.empty() ? attacked : clean, bundle, "clean");
    const DriftTable* drift = options.drift ? options.drift : (own_drift ? &*own_drift : nullptr);

    std::vector<std::string> conditions{kNoIntervention, kRandomIntervention, kOurs};
    if (options.with_smoothing) conditions.push_back(kOursRs);

    struct Outcome {
        std::map<std::string, size_t> top;
        std::map<std::string, InterventionPlan> plans;
    };
    auto run_set = [&](std::span<const LabeledInput> inputs, uint64_t set_index) {
        std::vector<Outcome> out(inputs.size());
        parallel_for(inputs.size(), options.threads, [&](size_t i) {
            const LabeledInput& in = inputs[i];
            const ActivationTrace trace = forward_full(in.patches, bundle);
            Outcome& o = out[i];
            o.top[kNoIntervention] = top1(classify_trace(trace, bundle, class_vocab));
            auto guided = [&](bool smoothed) {
                const auto match = match_tokens(trace, bundle, vocab, remove, layers, match_options(options, smoothed, drift));
                return build_zero_plan(match.tokens, Provenance{"zero", words.id, ""});
            };
            o.plans[kOurs] = guided(false);
            o.plans[kRandomIntervention] =
                random_plan_like(o.plans[kOurs], trace.seq_len(), sub_seed(options.seed, set_index, i));
            if (options.with_smoothing) o.plans[kOursRs] = guided(true);
            for (const auto& [name, plan] : o.plans) {
                o.top[name] = top1(apply(plan, in.patches, bundle, class_vocab).ranking);
            }
        });
        return out;
    };
    const auto clean_out = run_set(clean, 0);
    const auto attacked_out = run_set(attacked, 1);

    ExperimentReport report;
    report.experiment = "typographical";
    report.config = options_json(options, layers);
    report.config["wordlist"] = words.id;
    report.config["vocab_id"] = vocab.id();
    report.config["class_vocab_id"] = class_vocab.id();
    report.config["clean_size"] = clean.size();
    report.config["attacked_size"] = attacked.size();

    const bool paired = clean.size() == attacked.size();
    auto summarize = [&](const std::string& set, std::span<const LabeledInput> inputs, const std::vector<Outcome>& outs) {
        for (const auto& cond : conditions) {
            int64_t correct = 0, restored = 0;
            for (size_t i = 0; i < outs.size(); ++i) {
                const size_t top = outs[i].top.at(cond);
                correct += top == static_cast<size_t>(inputs[i].label) ? 1 : 0;
                if (set == "attacked" && paired) restored += top == clean_out[i].top.at(kNoIntervention) ? 1 : 0;
            }
            const auto n = static_cast<int64_t>(outs.size());
            report.rows.push_back(make_row(set, cond, "accuracy", correct, n));
            if (set == "attacked" && paired) report.rows.push_back(make_row(set, cond, "restored", restored, n));
            if (cond != kNoIntervention) {
                auto& avg = report.replaced_per_layer[set + "/" + cond];
                for (const auto& o : outs) accumulate_stats(avg, o.plans.at(cond));
                finish_average(avg, outs.size(), num_layers);
            }
        }
    };
    summarize("clean", clean, clean_out);
    summarize("attacked", attacked, attacked_out);
    return report;
}

ExperimentReport entity_intervention_experiment(std::span<const LabeledInput> sources,
                                                std::span<const LabeledInput> donors, const WordList& source_words,
                                                const WordList& donor_words, const ModelBundle& bundle,
                                                const Vocabulary& vocab, const Vocabulary& class_vocab,
                                                const ExperimentOptions& options) {
    check_compatible(vocab, bundle.manifest);
    check_compatible(class_vocab, bundle.manifest);
    if (class_vocab.empty()) fail(ErrorCode::input, "entity experiment needs a class vocabulary");
    if (!sources.empty() && donors.empty()) fail(ErrorCode::input, "entity experiment needs at least one donor image");
    ExperimentReport report;
    report.experiment = "entity-intervention";
    for (const auto* list : {&source_words, &donor_words}) {
        const auto missing = validate_wordlist(*list, vocab);
        if (!missing.empty()) {
            report.warnings.push_back(std::to_string(missing.size()) + " word(s) from '" + list->id +
                                      "' are not in vocabulary '" + vocab.id() + "'");
        }
    }
    const int num_layers = bundle.manifest.num_layers;
    const auto layers = default_layers(options.layers, num_layers);
    const WordList source_list = as_remove_list(source_words);
    const WordList donor_list = as_remove_list(donor_words);
    const auto own_drift = drift_for(options, sources, bundle, "sources");
    const DriftTable* drift = options.drift ? options.drift : (own_drift ? &*own_drift : nullptr);

    std::vector<ActivationTrace> donor_traces(donors.size());
    parallel_for(donors.size(), options.threads,
                 [&](size_t d) { donor_traces[d] = forward_full(donors[d].patches, bundle); });

    std::vector<std::string> conditions{kOurs};
    if (options.with_smoothing) conditions.push_back(kOursRs);
    struct Outcome {
        size_t baseline = 0;
        std::map<std::string, size_t> top;
        std::map<std::string, InterventionPlan> plans;
        std::vector<std::string> warnings;
    };
    std::vector<Outcome> outs(sources.size());
    parallel_for(sources.size(), options.threads, [&](size_t i) {
        const LabeledInput& src = sources[i];
        const size_t d = i % donors.size();
        const ActivationTrace trace = forward_full(src.patches, bundle);
        Outcome& o = outs[i];
        o.baseline = top1(classify_trace(trace, bundle, class_vocab));
        for (const auto& cond : conditions) {
            const auto mo = match_options(options, cond == kOursRs, drift);
            const auto targets = match_tokens(trace, bundle, vocab, source_list, layers, mo);
            const auto donor_tokens = match_tokens(donor_traces[d], bundle, vocab, donor_list, layers, mo);
            auto swap = build_swap_plan(targets.tokens, donor_traces[d], donor_tokens.tokens, sub_seed(options.seed, i),
                                        Provenance{"swap", source_words.id, donors[d].id});
            for (auto& w : swap.warnings) o.warnings.push_back(src.id + ": " + w);
            o.top[cond] = top1(apply(swap.plan, src.patches, bundle, class_vocab).ranking);
            o.plans[cond] = std::move(swap.plan);
        }
    });

    report.config = options_json(options, layers);
    report.config["source_wordlist"] = source_words.id;
    report.config["donor_wordlist"] = donor_words.id;
    report.config["vocab_id"] = vocab.id();
    report.config["class_vocab_id"] = class_vocab.id();
    const auto n = static_cast<int64_t>(sources.size());
    int64_t baseline_correct = 0;
    for (size_t i = 0; i < outs.size(); ++i) {
        baseline_correct += outs[i].baseline == static_cast<size_t>(sources[i].label) ? 1 : 0;
    }
    report.rows.push_back(make_row("source", kNoIntervention, "accuracy", baseline_correct, n));
    for (const auto& cond : conditions) {
        int64_t flipped = 0, to_target = 0;
        for (size_t i = 0; i < outs.size(); ++i) {
            flipped += outs[i].top.at(cond) != outs[i].baseline ? 1 : 0;
            to_target += outs[i].top.at(cond) == static_cast<size_t>(donors[i % donors.size()].label) ? 1 : 0;
        }
        report.rows.push_back(make_row("source", cond, "flip", flipped, n));
        report.rows.push_back(make_row("source", cond, "to-target", to_target, n));
        auto& avg = report.replaced_per_layer[cond];
        for (const auto& o : outs) accumulate_stats(avg, o.plans.at(cond));
        finish_average(avg, outs.size(), num_layers);
    }
    for (const auto& o : outs) report.warnings.insert(report.warnings.end(), o.warnings.begin(), o.warnings.end());
    return report;
}

ExperimentReport debias_experiment(std::span<const LabeledInput> train, std::span<const LabeledInput> test,
                                   const WordList& keep_words, const ModelBundle& bundle, const Vocabulary& vocab,
                                   const DebiasOptions& options) {
    check_compatible(vocab, bundle.manifest);
    if (train.empty() || test.empty()) fail(ErrorCode::input, "debias experiment needs non-empty train and test sets");
    const Manifest& m = bundle.manifest;
    const ExperimentOptions& base = options.base;
    const int layer = options.layer == 0 ? m.num_layers : options.layer;
    check_token(TokenRef{layer, 0}, m.num_layers, m.seq_len());
    const std::vector<int> layers = base.layers.empty() ? std::vector<int>{layer} : base.layers;
    WordList keep = keep_words;
    keep.mode = WordListMode::keep_matching;
    const auto own_drift = drift_for(base, train, bundle, "train");
    const DriftTable* drift = base.drift ? base.drift : (own_drift ? &*own_drift : nullptr);

    std::vector<std::string> conditions{kNoIntervention, kOurs};
    if (base.with_smoothing) conditions.push_back(kOursRs);

    struct Features {
        std::map<std::string, Tensor> x;
        std::map<std::string, std::map<int, double>> replaced;
    };
    auto featurize = [&](std::span<const LabeledInput> inputs) {
        Features f;
        const auto rows = static_cast<int64_t>(inputs.size());
        for (const auto& c : conditions) f.x[c] = Tensor::zeros({rows, static_cast<int64_t>(m.joint_dim)});
        std::vector<std::map<std::string, InterventionPlan>> plans(inputs.size());
        parallel_for(inputs.size(), base.threads, [&](size_t i) {
            const ActivationTrace trace = forward_full(inputs[i].patches, bundle);
            auto store = [&](const std::string& cond, const ActivationTrace& t) {
                const Tensor joint = project_to_joint(t.states.back().row(0), bundle);
                std::copy(joint.data().begin(), joint.data().end(), f.x.at(cond).row(static_cast<int64_t>(i)).begin());
            };
            store(kNoIntervention, trace);
            for (const auto& cond : conditions) {
                if (cond == kNoIntervention) continue;
                const auto match = match_tokens(trace, bundle, vocab, keep, layers, match_options(base, cond == kOursRs, drift));
                plans[i][cond] = build_zero_plan(match.tokens, Provenance{"keep-zero", keep.id, ""});
                store(cond, forward_full(inputs[i].patches, bundle, &plans[i][cond]));
            }
        });
        for (const auto& cond : conditions) {
            if (cond == kNoIntervention) continue;
            auto& avg = f.replaced[cond];
            for (const auto& p : plans) accumulate_stats(avg, p.at(cond));
            finish_average(avg, plans.size(), m.num_layers);
        }
        return f;
    };
    const Features train_f = featurize(train);
    const Features test_f = featurize(test);
    std::vector<int> train_labels, test_labels;
    for (const auto& in : train) train_labels.push_back(in.label);
    for (const auto& in : test) test_labels.push_back(in.label);

    ExperimentReport report;
    report.experiment = "debias";
    report.config = options_json(base, layers);
    report.config["layer"] = layer;
    report.config["wordlist"] = keep.id;
    report.config["vocab_id"] = vocab.id();
    report.config["num_classes"] = options.num_classes;
    report.config["probe"] = {{"epochs", options.probe.epochs},
                              {"lr", options.probe.lr},
                              {"batch_size", options.probe.batch_size},
                              {"seed", options.probe.seed}};
    report.config["train_size"] = train.size();
    report.config["test_size"] = test.size();

    std::set<std::pair<int, int>> group_keys;
    for (const auto& in : test) group_keys.insert({in.label, in.group});
    auto group_name = [&](int label, int group) {
        const std::string g = group >= 0 && group < static_cast<int>(options.group_names.size())
                                  ? options.group_names[static_cast<size_t>(group)]
                                  : "group" + std::to_string(group);
        return "label" + std::to_string(label) + "/" + g;
    };

    for (const auto& cond : conditions) {
        const ProbeModel probe =
            train_probe(train_f.x.at(cond), train_labels, options.num_classes, options.probe, nullptr);
        const auto train_pred = probe_predict(probe, train_f.x.at(cond));
        const auto pred = probe_predict(probe, test_f.x.at(cond));
        int64_t train_correct = 0;
        for (size_t i = 0; i < train_pred.size(); ++i) train_correct += train_pred[i] == train_labels[i] ? 1 : 0;
        report.rows.push_back(make_row("train", cond, "accuracy", train_correct, static_cast<int64_t>(train.size())));

        int64_t correct = 0;
        std::optional<ReportRow> worst;
        for (const auto& [label, group] : group_keys) {
            int64_t c = 0, t = 0;
            for (size_t i = 0; i < test.size(); ++i) {
                if (test[i].label != label || test[i].group != group) continue;
                ++t;
                c += pred[i] == label ? 1 : 0;
            }
            correct += c;
            ReportRow row = make_row(group_name(label, group), cond, "accuracy", c, t);
            if (!worst || row.value < worst->value) worst = row;
            report.groups.push_back(std::move(row));
        }
        report.rows.push_back(make_row("test", cond, "weighted-average", correct, static_cast<int64_t>(test.size())));
        report.rows.push_back(make_row("test", cond, "worst-group", worst->count, worst->total));
        if (cond != kNoIntervention) report.replaced_per_layer[cond] = test_f.replaced.at(cond);
    }
    return report;
}

RankChangeResult rank_change_eval(std::span<const AnnotatedImage> images, const ModelBundle& bundle,
                                  const Vocabulary& vocab, const RankChangeOptions& options) {
    check_compatible(vocab, bundle.manifest);
    if (vocab.empty()) fail(ErrorCode::input, "rank change needs a non-empty vocabulary");
    const Manifest& m = bundle.manifest;
    const auto layers = default_layers(options.layers, m.num_layers + 1);
    for (int layer : layers) check_token(TokenRef{layer, 0}, m.num_layers, m.seq_len());

    std::vector<std::vector<RankChangeRecord>> per_image(images.size());
    parallel_for(images.size(), options.threads, [&](size_t n) {
        const AnnotatedImage& img = images[n];
        validate_boxes(img.boxes, img.image.width, img.image.height);
        std::vector<std::string> labels;
        for (const auto& b : img.boxes) {
            if (std::find(labels.begin(), labels.end(), b.label) == labels.end()) labels.push_back(b.label);
        }
        if (labels.empty()) return;
        const ActivationTrace trace = forward_full(preprocess(img.image, m), bundle);

        // Masked traces are shared by every token matching the same label.
        std::map<std::string, std::pair<ActivationTrace, ActivationTrace>> masked;
        auto masked_for = [&](size_t label_index) -> const std::pair<ActivationTrace, ActivationTrace>& {
            const std::string& label = labels[label_index];
            auto it = masked.find(label);
            if (it != masked.end()) return it->second;
            std::vector<Box> boxes;
            for (const auto& b : img.boxes) {
                if (b.label == label) boxes.push_back(b);
            }
            const auto random = random_mask_like(boxes, img.image.width, img.image.height,
                                                 sub_seed(options.seed, n, label_index));
            auto object_trace = forward_full(preprocess(mask_boxes(img.image, boxes, options.fill, m), m), bundle);
            auto random_trace = forward_full(preprocess(mask_boxes(img.image, random, options.fill, m), m), bundle);
            return masked.emplace(label, std::pair{std::move(object_trace), std::move(random_trace)}).first->second;
        };

        for (int layer : layers) {
            for (int j = 0; j < m.seq_len(); ++j) {
                const TokenRef token{layer, j};
                const Interpretation original = interpret(token, trace, bundle, vocab, 1);
                const std::string& top_text = original.ranking.front().text;
                const auto hit = std::find(labels.begin(), labels.end(), top_text);
                if (hit == labels.end()) continue;
                const auto& [object_trace, random_trace] = masked_for(static_cast<size_t>(hit - labels.begin()));
                const size_t original_index = original.ranking.front().index;
                for (const auto& [condition, t] : {std::pair{"object-mask", &object_trace}, std::pair{"random-mask", &random_trace}}) {
                    const auto after = interpret(token, *t, bundle, vocab);
                    per_image[n].push_back({img.id, token, top_text, rank_of(after.ranking, original_index), condition});
                }
            }
        }
    });

    RankChangeResult result;
    for (auto& recs : per_image) {
        for (auto& r : recs) result.records.push_back(std::move(r));
    }
    ExperimentReport& report = result.report;
    report.experiment = "rank-change";
    report.config = {{"layers", layers},
                     {"fill", options.fill == MaskFill::mean ? "mean" : "zero"},
                     {"seed", options.seed},
                     {"vocab_id", vocab.id()},
                     {"images", images.size()}};
    if (result.records.empty()) {
        report.warnings.push_back("no token's top-1 interpretation matches an annotated label");
        warn(report.warnings.back());
        return result;
    }
    for (const char* condition : {"object-mask", "random-mask"}) {
        LayerSeries series{condition, {}, {}};
        double total = 0.0;
        int64_t count = 0;
        for (const auto& r : result.records) {
            if (r.condition != condition) continue;
            series.values[r.token.layer] += static_cast<double>(r.rank_change());
            series.counts[r.token.layer] += 1;
            total += static_cast<double>(r.rank_change());
            ++count;
        }
        for (auto& [layer, v] : series.values) v /= static_cast<double>(series.counts[layer]);
        report.rows.push_back(ReportRow{"all", condition, "mean-rank-change", total / static_cast<double>(count), count, count});
        report.series.push_back(std::move(series));
    }
    return result;
}

ExperimentReport iop_coverage(std::span<const AnnotatedImage> images, const ModelBundle& bundle,
                              const Vocabulary& vocab, const IopOptions& options) {
    check_compatible(vocab, bundle.manifest);
    if (vocab.empty()) fail(ErrorCode::input, "IOP coverage needs a non-empty vocabulary");
    const Manifest& m = bundle.manifest;
    const auto layers = default_layers(options.layers, m.num_layers + 1);
    for (int layer : layers) check_token(TokenRef{layer, 0}, m.num_layers, m.seq_len());
    const int side = m.image_size;

    struct Tally {
        int64_t high = 0, scored = 0, random_high = 0, excluded = 0;
    };
    std::vector<std::map<int, Tally>> per_image(images.size());
    parallel_for(images.size(), options.threads, [&](size_t n) {
        const AnnotatedImage& img = images[n];
        validate_boxes(img.boxes, img.image.width, img.image.height);
        if (img.boxes.empty()) return;
        const ActivationTrace trace = forward_full(preprocess(img.image, m), bundle);
        const auto model_boxes = map_boxes_to_model(img.boxes, img.image.width, img.image.height, m);
        uint64_t draw = 0;
        for (int layer : layers) {
            for (int j = 0; j < m.seq_len(); ++j) {
                const TokenRef token{layer, j};
                const std::string top_text = interpret(token, trace, bundle, vocab, 1).ranking.front().text;
                std::vector<Box> truth;
                for (const auto& b : model_boxes) {
                    if (b.label == top_text) truth.push_back(b);
                }
                if (truth.empty()) continue;
                Tally& t = per_image[n][layer];
                const SaliencyMap map = token_saliency(token, trace);
                const auto score = iop(map.mask, map.grid_size, m.patch_size, truth);
                if (!score) {
                    ++t.excluded;
                    continue;
                }
                ++t.scored;
                t.high += *score > options.threshold ? 1 : 0;

                // Baseline: a random rectangle with the prediction's pixel area.
                const int area_patches = static_cast<int>(map.mask_count());
                std::vector<Box> like;
                for (int t = 0; t < area_patches; ++t) {
                    const int x = (t % m.grid_size()) * m.patch_size, y = (t / m.grid_size()) * m.patch_size;
                    like.push_back(Box{"", x, y, x + m.patch_size, y + m.patch_size});
                }
                const auto rect = random_mask_like(like, side, side, sub_seed(options.seed, n, draw++)).front();
                std::vector<Box> clipped;
                for (const auto& b : truth) {
                    Box c{b.label, std::max(b.x0, rect.x0), std::max(b.y0, rect.y0), std::min(b.x1, rect.x1),
                          std::min(b.y1, rect.y1)};
                    if (c.x0 < c.x1 && c.y0 < c.y1) clipped.push_back(c);
                }
                const double rect_area = static_cast<double>(rect.x1 - rect.x0) * (rect.y1 - rect.y0);
                const double random_iop = static_cast<double>(union_area(clipped, side, side)) / rect_area;
                t.random_high += random_iop > options.threshold ? 1 : 0;
            }
        }
    });

    ExperimentReport report;
    report.experiment = "iop-coverage";
    report.config = {{"layers", layers},
                     {"threshold", options.threshold},
                     {"seed", options.seed},
                     {"vocab_id", vocab.id()},
                     {"images", images.size()}};
    std::map<int, Tally> totals;
    for (const auto& img : per_image) {
        for (const auto& [layer, t] : img) {
            Tally& s = totals[layer];
            s.high += t.high;
            s.scored += t.scored;
            s.random_high += t.random_high;
            s.excluded += t.excluded;
        }
    }
    LayerSeries ours{"saliency", {}, {}}, random{"random-rectangle", {}, {}};
    Tally all;
    for (const auto& [layer, t] : totals) {
        if (t.scored > 0) {
            ours.values[layer] = percent(t.high, t.scored);
            random.values[layer] = percent(t.random_high, t.scored);
        }
        ours.counts[layer] = t.scored;
        random.counts[layer] = t.scored;
        all.high += t.high;
        all.scored += t.scored;
        all.random_high += t.random_high;
        all.excluded += t.excluded;
    }
    report.series = {ours, random};
    report.rows.push_back(make_row("all", "saliency", "high-iop", all.high, all.scored));
    report.rows.push_back(make_row("all", "random-rectangle", "high-iop", all.random_high, all.scored));
    report.rows.push_back(ReportRow{"all", "saliency", "excluded-empty-mask", static_cast<double>(all.excluded),
                                    all.excluded, all.scored + all.excluded});
    if (all.scored == 0) report.warnings.push_back("no token's top-1 interpretation matches an annotated label");
    return report;
}

} // namespace vitlens
