#include "vitlens/service.hpp"

#include "vitlens/diag.hpp"
#include "vitlens/error.hpp"
#include "vitlens/serialize.hpp"

#include <httplib.h>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>

namespace vitlens {

using nlohmann::json;

int http_status(ErrorCode code) {
    switch (code) {
    case ErrorCode::not_found: return 404;
    case ErrorCode::dimension:
    case ErrorCode::compatibility:
    case ErrorCode::shape_mismatch:
    case ErrorCode::version_mismatch: return 409;
    case ErrorCode::io: return 500;
    default: return 400;
    }
}

json error_json(ErrorCode code, const std::string& message) {
    return {{"error", {{"code", std::string(to_string(code))}, {"message", message}}}};
}

std::string content_hash(std::span<const uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
        fail(ErrorCode::io, "SHA-256 digest failed");
    }
    std::ostringstream os;
    for (unsigned int i = 0; i < length; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
}

namespace {

template <typename T>
T field(const json& j, const char* key, T fallback) {
    if (!j.contains(key) || j[key].is_null()) return fallback;
    try {
        return j[key].get<T>();
    } catch (const json::exception&) {
        fail(ErrorCode::input, std::string("field '") + key + "' has the wrong type");
    }
}

template <typename T>
T required(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) fail(ErrorCode::input, std::string("missing field '") + key + "'");
    return field<T>(j, key, T{});
}

std::vector<int> all_layers(int last) {
    std::vector<int> out(static_cast<size_t>(last));
    std::iota(out.begin(), out.end(), 1);
    return out;
}

std::string png_data_url(const Image& image) {
    return "data:image/png;base64," + base64_encode(encode_png(image));
}

json tokens_from(const std::vector<TokenRef>& tokens) { return tokens_to_json(tokens); }

// Undoes the normalization of preprocessed patches, clamped to 8 bits.
Image frame_from_patches(const Tensor& patches, const Manifest& m) {
    const int p = m.patch_size, g = m.grid_size();
    Image out = Image::solid(m.image_size, m.image_size, {0, 0, 0});
    for (int t = 0; t < m.num_patches(); ++t) {
        const auto row = patches.row(t);
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < p; ++y) {
                for (int x = 0; x < p; ++x) {
                    const float v = row[static_cast<size_t>((c * p + y) * p + x)] * m.preprocess_std[static_cast<size_t>(c)] +
                                    m.preprocess_mean[static_cast<size_t>(c)];
                    const long q = std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f);
                    out.at((t % g) * p + x, (t / g) * p + y, c) = static_cast<uint8_t>(q);
                }
            }
        }
    }
    return out;
}

} // namespace

Service::Service(ModelBundle bundle, std::vector<Vocabulary> vocabs, std::vector<WordList> wordlists,
                 ServiceConfig config)
    : bundle_(std::move(bundle)),
      config_(config),
      images_(config.image_capacity),
      drifts_(config.drift_capacity),
      plans_(config.plan_capacity) {
    bundle_.manifest.validate();
    for (auto& v : vocabs) add_vocab(std::move(v));
    for (auto& w : wordlists) wordlists_[w.id] = std::move(w);
}

json Service::model_summary() const {
    const Manifest& m = bundle_.manifest;
    return {{"name", m.name},
            {"format_version", m.format_version},
            {"num_layers", m.num_layers},
            {"hidden_dim", m.hidden_dim},
            {"num_heads", m.num_heads},
            {"patch_size", m.patch_size},
            {"image_size", m.image_size},
            {"grid_size", m.grid_size()},
            {"seq_len", m.seq_len()},
            {"joint_dim", m.joint_dim},
            {"activation", std::string(to_string(m.activation))}};
}

json Service::list_vocabs() const {
    std::shared_lock lock(registry_mutex_);
    json out = json::array();
    for (const auto& [id, v] : vocabs_) {
        out.push_back({{"id", id}, {"size", v->size()}, {"dim", v->dim()}, {"default", id == default_vocab_}});
    }
    return out;
}

json Service::add_vocab(Vocabulary vocab) {
    check_compatible(vocab, bundle_.manifest);
    if (vocab.id().empty()) fail(ErrorCode::input, "vocabulary id must not be empty");
    auto shared = std::make_shared<const Vocabulary>(std::move(vocab));
    std::unique_lock lock(registry_mutex_);
    if (default_vocab_.empty()) default_vocab_ = shared->id();
    vocabs_[shared->id()] = shared;
    return {{"id", shared->id()}, {"size", shared->size()}, {"dim", shared->dim()}};
}

json Service::list_wordlists() const {
    json out = json::array();
    for (const auto& [id, w] : wordlists_) {
        out.push_back({{"id", id}, {"size", w.words.size()}, {"mode", std::string(to_string(w.mode))}});
    }
    return out;
}

std::shared_ptr<const Vocabulary> Service::vocab(const json& request, const char* key) const {
    std::shared_lock lock(registry_mutex_);
    const std::string id = field<std::string>(request, key, default_vocab_);
    if (id.empty()) fail(ErrorCode::not_found, "no vocabulary loaded");
    const auto it = vocabs_.find(id);
    if (it == vocabs_.end()) fail(ErrorCode::not_found, "unknown vocabulary '" + id + "'");
    return it->second;
}

WordList Service::wordlist(const json& spec, const json& request) const {
    WordList list;
    if (spec.is_string()) {
        const auto it = wordlists_.find(spec.get<std::string>());
        if (it == wordlists_.end()) fail(ErrorCode::not_found, "unknown word list '" + spec.get<std::string>() + "'");
        list = it->second;
    } else if (spec.is_array()) {
        try {
            list = make_wordlist("inline", spec.get<std::vector<std::string>>(), WordListMode::remove_matching);
        } catch (const json::exception&) {
            fail(ErrorCode::input, "word list must be an id or an array of strings");
        }
    } else {
        fail(ErrorCode::input, "word list must be an id or an array of strings");
    }
    if (request.contains("mode")) list.mode = parse_wordlist_mode(required<std::string>(request, "mode"));
    return list;
}

std::shared_ptr<const StoredImage> Service::image(const std::string& id) const {
    auto img = images_.get(id);
    if (!img) fail(ErrorCode::not_found, "unknown image '" + id + "'");
    return img;
}

json Service::add_image(std::span<const uint8_t> bytes, const std::vector<Box>& boxes) {
    if (bytes.empty()) fail(ErrorCode::input, "empty image upload");
    const std::string id = content_hash(bytes);
    auto stored = images_.get(id);
    if (!stored) {
        auto entry = std::make_shared<StoredImage>();
        entry->id = id;
        entry->image = decode_image(bytes);
        validate_boxes(boxes, entry->image.width, entry->image.height);
        entry->boxes = boxes;
        entry->frame = model_frame(entry->image, bundle_.manifest);
        entry->patches = preprocess(entry->image, bundle_.manifest);
        entry->trace = forward_full(entry->patches, bundle_);
        entry->png = encode_png(entry->frame);
        stored = images_.put(id, std::move(entry));
    }
    return image_summary(*stored);
}

json Service::add_patches(Tensor patches) {
    const Manifest& m = bundle_.manifest;
    if (patches.rank() != 2 || patches.dim(0) != m.num_patches() || patches.dim(1) != m.patch_dim()) {
        fail(ErrorCode::dimension, "patch tensor must be [" + std::to_string(m.num_patches()) + " x " +
                                       std::to_string(m.patch_dim()) + "]");
    }
    const auto values = patches.data();
    const std::string id = content_hash({reinterpret_cast<const uint8_t*>(values.data()), values.size() * sizeof(float)});
    auto stored = images_.get(id);
    if (!stored) {
        auto entry = std::make_shared<StoredImage>();
        entry->id = id;
        entry->frame = frame_from_patches(patches, m);
        entry->image = entry->frame;
        entry->trace = forward_full(patches, bundle_);
        entry->patches = std::move(patches);
        entry->png = encode_png(entry->frame);
        stored = images_.put(id, std::move(entry));
    }
    return image_summary(*stored);
}

json Service::image_summary(const StoredImage& stored) const {
    const Manifest& m = bundle_.manifest;
    return {{"image_id", stored.id},
            {"width", stored.image.width},
            {"height", stored.image.height},
            {"grid", {{"rows", m.grid_size()}, {"cols", m.grid_size()}, {"patch_size", m.patch_size}}},
            {"boxes", boxes_to_json(stored.boxes)},
            {"thumbnail", "data:image/png;base64," + base64_encode(stored.png)}};
}

std::shared_ptr<const DriftTable> Service::calibrate(std::vector<std::string> image_ids) {
    if (image_ids.empty()) fail(ErrorCode::input, "drift calibration needs at least one uploaded image");
    std::sort(image_ids.begin(), image_ids.end());
    image_ids.erase(std::unique(image_ids.begin(), image_ids.end()), image_ids.end());
    std::string joined;
    for (const auto& id : image_ids) joined += id + "\n";
    const std::string drift_id =
        "drift-" + content_hash({reinterpret_cast<const uint8_t*>(joined.data()), joined.size()}).substr(0, 16);
    auto table = drifts_.get(drift_id);
    if (!table) {
        std::vector<ActivationTrace> traces;
        for (const auto& id : image_ids) traces.push_back(image(id)->trace);
        table = drifts_.put(drift_id, std::make_shared<const DriftTable>(
                                          calibrate_drift(std::span<const ActivationTrace>(traces), bundle_, drift_id)));
    }
    std::unique_lock lock(latest_drift_mutex_);
    latest_drift_ = drift_id;
    return table;
}

std::shared_ptr<const DriftTable> Service::drift_for(const json& smoothing) const {
    std::string id = field<std::string>(smoothing, "drift_id", "");
    if (id.empty()) {
        std::shared_lock lock(latest_drift_mutex_);
        id = latest_drift_;
    }
    if (id.empty()) return nullptr;
    auto table = drifts_.get(id);
    if (!table) fail(ErrorCode::not_found, "unknown drift table '" + id + "'");
    return table;
}

// Drift for a smoothed request: the named or latest table, else one
// calibrated on every stored image.
std::shared_ptr<const DriftTable> Service::ensure_drift(const json& request) {
    const json smoothing = field<json>(request, "smoothing", json::object());
    if (!field<bool>(smoothing, "enabled", false)) return nullptr;
    if (auto table = drift_for(smoothing)) return table;
    return calibrate(images_.ids());
}

namespace {

std::optional<SmoothingOptions> smoothing_options(const json& request) {
    const json s = field<json>(request, "smoothing", json::object());
    if (!field<bool>(s, "enabled", false)) return std::nullopt;
    return SmoothingOptions{field<int>(s, "samples", 100), field<uint64_t>(s, "seed", 0)};
}

} // namespace

json Service::interpret(const json& request) {
    const auto img = image(required<std::string>(request, "image_id"));
    const auto v = vocab(request, "vocab_id");
    const Manifest& m = bundle_.manifest;
    const int layer = required<int>(request, "layer");
    check_token(TokenRef{layer, 0}, m.num_layers, m.seq_len());
    InterpretOptions opts;
    opts.top_k = field<size_t>(request, "top_k", 10);
    opts.threads = config_.threads;
    opts.smoothing = smoothing_options(request);
    std::shared_ptr<const DriftTable> drift;
    if (opts.smoothing) {
        drift = ensure_drift(request);
        opts.drift = drift.get();
    }
    std::optional<int> position;
    if (request.contains("position") && !request["position"].is_null()) {
        position = required<int>(request, "position");
        check_token(TokenRef{layer, *position}, m.num_layers, m.seq_len());
    }
    const json interpretations = interpretations_json(layer, position, img->trace, bundle_, *v, opts);
    json out{{"image_id", img->id}, {"layer", layer}, {"vocab_id", v->id()}, {"interpretations", interpretations}};
    if (drift) out["drift_id"] = drift->calibration_set_id;
    return out;
}

json Service::saliency(const json& request) const {
    const auto img = image(required<std::string>(request, "image_id"));
    const json token_json = request.contains("token") ? request["token"] : request;
    const TokenRef token{required<int>(token_json, "layer"), required<int>(token_json, "position")};
    const double threshold = field<double>(request, "threshold", kSaliencyThreshold);
    const SaliencyMap map = token_saliency(token, img->trace, threshold);
    json out = saliency_to_json(map);
    out["image_id"] = img->id;
    out["overlay"] = png_data_url(saliency_overlay(img->frame, map));
    if (!img->boxes.empty()) {
        const auto truth = map_boxes_to_model(img->boxes, img->image.width, img->image.height, bundle_.manifest);
        const auto score = vitlens::iop(map.mask, map.grid_size, bundle_.manifest.patch_size, truth);
        out["iop"] = score ? json(*score) : json(nullptr);
    }
    return out;
}

json Service::match(const json& request) {
    const auto img = image(required<std::string>(request, "image_id"));
    const auto v = vocab(request, "vocab_id");
    const WordList words = wordlist(request.contains("wordlist") ? request["wordlist"] : json(), request);
    const auto layers = field<std::vector<int>>(request, "layers", all_layers(bundle_.manifest.num_layers));
    MatchOptions opts;
    opts.top_k_membership = field<size_t>(request, "top_k_membership", 1);
    opts.skip_cls = field<bool>(request, "skip_cls", false);
    opts.threads = config_.threads;
    opts.smoothing = smoothing_options(request);
    std::shared_ptr<const DriftTable> drift;
    if (opts.smoothing) {
        drift = ensure_drift(request);
        opts.drift = drift.get();
    }
    const MatchResult result = match_tokens(img->trace, bundle_, *v, words, layers, opts);
    return {{"image_id", img->id},
            {"wordlist", words.id},
            {"mode", std::string(to_string(words.mode))},
            {"tokens", tokens_from(result.tokens)},
            {"count", result.tokens.size()},
            {"warnings", result.warnings}};
}

json Service::intervene(const json& request) {
    const auto img = image(required<std::string>(request, "image_id"));
    const auto v = vocab(request, "vocab_id");
    const auto classes = vocab(request, request.contains("class_vocab_id") ? "class_vocab_id" : "vocab_id");
    const Manifest& m = bundle_.manifest;
    const size_t top_k = field<size_t>(request, "top_k", 10);
    std::vector<std::string> warnings;

    InterventionPlan plan;
    if (request.contains("plan")) {
        plan = plan_from_json(request["plan"]);
    } else {
        const std::string rule = field<std::string>(request, "rule", "zero");
        const json match_result = match(request);
        std::vector<TokenRef> targets;
        for (const auto& t : match_result["tokens"]) targets.push_back({t["layer"].get<int>(), t["position"].get<int>()});
        for (const auto& w : match_result["warnings"]) warnings.push_back(w.get<std::string>());
        if (rule == "zero") {
            plan = build_zero_plan(targets, Provenance{"zero", match_result["wordlist"], ""});
        } else if (rule == "swap") {
            const auto donor = image(required<std::string>(request, "donor_image_id"));
            json donor_request = request;
            donor_request["image_id"] = donor->id;
            donor_request["wordlist"] = request.contains("donor_wordlist") ? request["donor_wordlist"] : request["wordlist"];
            donor_request["mode"] = "remove";
            const json donor_match = match(donor_request);
            std::vector<TokenRef> donor_tokens;
            for (const auto& t : donor_match["tokens"]) {
                donor_tokens.push_back({t["layer"].get<int>(), t["position"].get<int>()});
            }
            auto swap = build_swap_plan(targets, donor->trace, donor_tokens, field<uint64_t>(request, "seed", 0),
                                        Provenance{"swap", match_result["wordlist"], donor->id});
            warnings.insert(warnings.end(), swap.warnings.begin(), swap.warnings.end());
            plan = std::move(swap.plan);
        } else {
            fail(ErrorCode::input, "unknown rule '" + rule + "' (expected zero or swap)");
        }
    }
    plan.validate(m.num_layers, m.seq_len(), m.hidden_dim);

    const ActivationTrace after = forward_full(img->patches, bundle_, &plan);
    auto top = [&](Ranking r) {
        if (top_k > 0 && r.size() > top_k) r.resize(top_k);
        return ranking_to_json(r);
    };
    const int refresh_layer = field<int>(request, "interpret_layer", m.num_layers + 1);
    check_token(TokenRef{refresh_layer, 0}, m.num_layers, m.seq_len());
    InterpretOptions iopts;
    iopts.top_k = field<size_t>(request, "interpret_top_k", 3);
    iopts.threads = config_.threads;
    json refreshed = interpretations_json(refresh_layer, std::nullopt, after, bundle_, *v, iopts);

    json plan_json = plan_to_json(plan);
    const std::string dumped = plan_json.dump();
    const std::string plan_id =
        "plan-" + content_hash({reinterpret_cast<const uint8_t*>(dumped.data()), dumped.size()}).substr(0, 16);
    plans_.put(plan_id, std::make_shared<const InterventionPlan>(plan));
    json stats = json::object();
    for (int k = 1; k <= m.num_layers + 1; ++k) stats[std::to_string(k)] = 0;
    for (const auto& [layer, count] : plan.stats()) stats[std::to_string(layer)] = count;
    return {{"image_id", img->id},
            {"plan_id", plan_id},
            {"plan", std::move(plan_json)},
            {"class_vocab_id", classes->id()},
            {"ranking_before", top(classify_trace(img->trace, bundle_, *classes))},
            {"ranking_after", top(classify_trace(after, bundle_, *classes))},
            {"replaced_per_layer", std::move(stats)},
            {"interpretations_after", {{"layer", refresh_layer}, {"tokens", std::move(refreshed)}}},
            {"warnings", warnings}};
}

json Service::drift(const json& request) {
    const auto ids = field<std::vector<std::string>>(request, "image_ids", images_.ids());
    const auto table = calibrate(ids);
    return {{"drift_id", table->calibration_set_id},
            {"table", drift_to_json(*table, field<bool>(request, "include_distances", false))}};
}

json Service::get_plan(const std::string& id) const {
    const auto plan = plans_.get(id);
    if (!plan) fail(ErrorCode::not_found, "unknown plan '" + id + "'");
    return plan_to_json(*plan);
}

void Service::mount(httplib::Server& server) {
    auto respond = [](httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    };
    // Wraps a handler so library errors become {error: {code, message}}.
    auto guarded = [respond](auto fn) {
        return [respond, fn](const httplib::Request& req, httplib::Response& res) {
            try {
                respond(res, 200, fn(req));
            } catch (const Error& e) {
                respond(res, http_status(e.code()), error_json(e.code(), e.what()));
            } catch (const json::exception& e) {
                respond(res, 400, error_json(ErrorCode::format, std::string("malformed JSON: ") + e.what()));
            } catch (const std::exception& e) {
                respond(res, 500, error_json(ErrorCode::io, e.what()));
            }
        };
    };
    auto body_json = [](const httplib::Request& req) {
        if (req.body.empty()) return json::object();
        json j = json::parse(req.body);
        if (!j.is_object()) fail(ErrorCode::input, "request body must be a JSON object");
        return j;
    };

    server.Get("/api/health", guarded([this](const httplib::Request&) {
                   return json{{"status", "ok"}, {"model", model_summary()}};
               }));
    server.Get("/api/model", guarded([this](const httplib::Request&) { return model_summary(); }));
    server.Get("/api/vocab", guarded([this](const httplib::Request&) { return list_vocabs(); }));
    server.Post("/api/vocab", guarded([this](const httplib::Request& req) {
                    const std::string content_type = req.get_header_value("Content-Type");
                    if (content_type.rfind("application/json", 0) == 0) {
                        const json j = json::parse(req.body);
                        const auto texts = required<std::vector<std::string>>(j, "texts");
                        const auto rows = required<std::vector<std::vector<float>>>(j, "embeddings");
                        if (rows.size() != texts.size()) fail(ErrorCode::input, "texts and embeddings differ in length");
                        const auto dim = static_cast<int64_t>(rows.empty() ? 0 : rows.front().size());
                        std::vector<float> flat;
                        for (const auto& r : rows) {
                            if (static_cast<int64_t>(r.size()) != dim) fail(ErrorCode::input, "ragged embeddings");
                            flat.insert(flat.end(), r.begin(), r.end());
                        }
                        return add_vocab(Vocabulary(required<std::string>(j, "id"), texts,
                                                    Tensor({static_cast<int64_t>(texts.size()), dim}, std::move(flat))));
                    }
                    const std::string id = req.has_param("id") ? req.get_param_value("id") : "";
                    if (id.empty()) fail(ErrorCode::input, "binary vocabulary uploads need an ?id= parameter");
                    const auto* data = reinterpret_cast<const uint8_t*>(req.body.data());
                    return add_vocab(parse_vocabulary({data, req.body.size()}, id));
                }));
    server.Get("/api/wordlists", guarded([this](const httplib::Request&) { return list_wordlists(); }));
    server.Get("/api/images", guarded([this](const httplib::Request&) { return json(images_.ids()); }));
    server.Post("/api/images", guarded([this](const httplib::Request& req) {
                    if (req.get_header_value("Content-Type").rfind("application/json", 0) == 0) {
                        const json j = json::parse(req.body);
                        const auto shape = required<std::vector<int64_t>>(j, "shape");
                        if (shape.size() != 2) fail(ErrorCode::dimension, "patch shape must have two dims");
                        auto values = floats_from_base64(required<std::string>(j, "patches"));
                        if (static_cast<int64_t>(values.size()) != shape[0] * shape[1]) {
                            fail(ErrorCode::input, "patch payload does not match its shape");
                        }
                        return add_patches(Tensor({shape[0], shape[1]}, std::move(values)));
                    }
                    std::string bytes = req.body;
                    std::vector<Box> boxes;
                    if (req.is_multipart_form_data()) {
                        if (!req.has_file("image")) fail(ErrorCode::input, "multipart upload needs an 'image' part");
                        bytes = req.get_file_value("image").content;
                        if (req.has_file("boxes")) boxes = boxes_from_json(json::parse(req.get_file_value("boxes").content));
                    }
                    return add_image({reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size()}, boxes);
                }));
    server.Get(R"(/api/images/([0-9a-f]+)/thumbnail)", [this, respond](const httplib::Request& req, httplib::Response& res) {
        const auto img = images_.get(req.matches[1]);
        if (!img) {
            respond(res, 404, error_json(ErrorCode::not_found, "unknown image '" + std::string(req.matches[1]) + "'"));
            return;
        }
        res.set_content(reinterpret_cast<const char*>(img->png.data()), img->png.size(), "image/png");
    });
    server.Post("/api/interpret", guarded([this, body_json](const httplib::Request& req) { return interpret(body_json(req)); }));
    server.Post("/api/saliency", guarded([this, body_json](const httplib::Request& req) { return saliency(body_json(req)); }));
    server.Post("/api/match", guarded([this, body_json](const httplib::Request& req) { return match(body_json(req)); }));
    server.Post("/api/intervene", guarded([this, body_json](const httplib::Request& req) { return intervene(body_json(req)); }));
    server.Post("/api/drift", guarded([this, body_json](const httplib::Request& req) { return drift(body_json(req)); }));
    server.Get(R"(/api/plans/([A-Za-z0-9-]+))",
               guarded([this](const httplib::Request& req) { return get_plan(req.matches[1]); }));
}

} // namespace vitlens
