#pragma once

#include "vitlens/editor.hpp"
#include "vitlens/error.hpp"
#include "vitlens/saliency.hpp"

#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace vitlens {

// HTTP status for a library error: unknown ids 404, dimension and
// compatibility conflicts 409, other caller errors 400, I/O 500.
int http_status(ErrorCode code);
nlohmann::json error_json(ErrorCode code, const std::string& message);

// Lowercase hex SHA-256 of the bytes.
std::string content_hash(std::span<const uint8_t> bytes);

struct ServiceConfig {
    size_t image_capacity = 256;
    size_t plan_capacity = 256;
    size_t drift_capacity = 16;
    unsigned threads = 0;
};

struct StoredImage {
    std::string id;
    Image image;         // as uploaded
    Image frame;         // preprocessed square frame
    Tensor patches;
    ActivationTrace trace;
    std::vector<Box> boxes;
    std::vector<uint8_t> png; // frame as PNG, served as the thumbnail
};

// Bounded id -> value store; least recently used entries are evicted.
// Values are shared and immutable once stored.
template <typename T>
class LruStore {
public:
    explicit LruStore(size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

    std::shared_ptr<const T> get(const std::string& id) const {
        std::shared_lock lock(mutex_);
        const auto it = items_.find(id);
        if (it == items_.end()) return nullptr;
        it->second.last_used = ++clock_;
        return it->second.value;
    }

    // Returns the stored value; an existing id keeps its first value.
    std::shared_ptr<const T> put(const std::string& id, std::shared_ptr<const T> value) {
        std::unique_lock lock(mutex_);
        if (const auto it = items_.find(id); it != items_.end()) {
            it->second.last_used = ++clock_;
            return it->second.value;
        }
        if (items_.size() >= capacity_) {
            auto oldest = items_.begin();
            for (auto it = items_.begin(); it != items_.end(); ++it) {
                if (it->second.last_used < oldest->second.last_used) oldest = it;
            }
            items_.erase(oldest);
        }
        auto& slot = items_[id];
        slot.value = std::move(value);
        slot.last_used = ++clock_;
        return slot.value;
    }

    std::vector<std::string> ids() const {
        std::shared_lock lock(mutex_);
        std::vector<std::string> out;
        for (const auto& [id, _] : items_) out.push_back(id);
        return out;
    }

    size_t size() const {
        std::shared_lock lock(mutex_);
        return items_.size();
    }

    size_t capacity() const { return capacity_; }

private:
    struct Slot {
        std::shared_ptr<const T> value;
        mutable std::atomic<uint64_t> last_used{0};
    };
    size_t capacity_;
    mutable std::shared_mutex mutex_;
    mutable std::atomic<uint64_t> clock_{0};
    std::map<std::string, Slot> items_;
};

// Session state behind the HTTP API: one bundle, a vocabulary registry, word
// lists, and bounded image, drift, and plan stores. Every handler takes and
// returns JSON and throws vitlens::Error on failure.
class Service {
public:
    Service(ModelBundle bundle, std::vector<Vocabulary> vocabs, std::vector<WordList> wordlists,
            ServiceConfig config = {});

    nlohmann::json model_summary() const;
    nlohmann::json list_vocabs() const;
    nlohmann::json add_vocab(Vocabulary vocab);
    nlohmann::json list_wordlists() const;
    // Idempotent: the id is the content hash of the bytes.
    nlohmann::json add_image(std::span<const uint8_t> bytes, const std::vector<Box>& boxes = {});
    // Already-preprocessed [T x 3PP] patches (fixtures without a pixel form);
    // the id hashes the float bytes.
    nlohmann::json add_patches(Tensor patches);
    nlohmann::json interpret(const nlohmann::json& request);
    nlohmann::json saliency(const nlohmann::json& request) const;
    nlohmann::json match(const nlohmann::json& request);
    nlohmann::json intervene(const nlohmann::json& request);
    nlohmann::json drift(const nlohmann::json& request);
    nlohmann::json get_plan(const std::string& id) const;
    std::shared_ptr<const StoredImage> image(const std::string& id) const;

    const ModelBundle& bundle() const { return bundle_; }
    const ServiceConfig& config() const { return config_; }

    // Registers the /api routes on an httplib server.
    void mount(httplib::Server& server);

private:
    std::shared_ptr<const Vocabulary> vocab(const nlohmann::json& request, const char* key) const;
    WordList wordlist(const nlohmann::json& spec, const nlohmann::json& request) const;
    std::shared_ptr<const DriftTable> drift_for(const nlohmann::json& smoothing) const;
    std::shared_ptr<const DriftTable> calibrate(std::vector<std::string> image_ids);
    std::shared_ptr<const DriftTable> ensure_drift(const nlohmann::json& request);
    nlohmann::json image_summary(const StoredImage& stored) const;

    ModelBundle bundle_;
    ServiceConfig config_;
    mutable std::shared_mutex registry_mutex_;
    std::map<std::string, std::shared_ptr<const Vocabulary>> vocabs_;
    std::string default_vocab_;
    std::map<std::string, WordList> wordlists_;
    LruStore<StoredImage> images_;
    LruStore<DriftTable> drifts_;
    LruStore<InterventionPlan> plans_;
    mutable std::shared_mutex latest_drift_mutex_;
    std::string latest_drift_;
};

} // namespace vitlens
