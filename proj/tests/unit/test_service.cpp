#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vitlens/cli.hpp"
#include "vitlens/diag.hpp"
#include "vitlens/evaluator.hpp"
#include "vitlens/serialize.hpp"
#include "vitlens/service.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>
#include <unistd.h>

using namespace vitlens;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ToyModel toy(ToyKind kind, int cases = 8, std::vector<std::string> concepts = {}) {
    ToySpec spec;
    spec.kind = kind;
    spec.cases = cases;
    spec.planted_concepts = std::move(concepts);
    return make_toy_model(spec);
}

std::span<const uint8_t> bytes_of(const std::vector<uint8_t>& v) { return {v.data(), v.size()}; }

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("vitlens-test-" + std::to_string(getpid())) / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

struct CliRun {
    int code = 0;
    std::string out, err;
    json out_json() const { return json::parse(out); }
    json err_json() const { return json::parse(err.substr(err.find('{'))); }
};

CliRun cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    CliRun r;
    r.code = run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

// A Service behind an httplib server on a free local port.
struct TestServer {
    Service& service;
    httplib::Server server;
    std::thread thread;
    int port = 0;

    explicit TestServer(Service& s) : service(s) {
        service.mount(server);
        port = server.bind_to_any_port("127.0.0.1");
        REQUIRE(port > 0);
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~TestServer() {
        server.stop();
        thread.join();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(60, 0);
        return c;
    }
};

json post(httplib::Client& c, const std::string& path, const json& body, int expect = 200) {
    auto res = c.Post(path, body.dump(), "application/json");
    REQUIRE(res);
    CHECK_MESSAGE(res->status == expect, path << ": " << res->body);
    return json::parse(res->body);
}

json patches_body(const Tensor& patches) {
    return {{"shape", patches.shape()}, {"patches", floats_to_base64(patches.data())}};
}

} // namespace

TEST_CASE("error mapping and content hashes") {
    CHECK(http_status(ErrorCode::not_found) == 404);
    CHECK(http_status(ErrorCode::dimension) == 409);
    CHECK(http_status(ErrorCode::compatibility) == 409);
    CHECK(http_status(ErrorCode::version_mismatch) == 409);
    CHECK(http_status(ErrorCode::format) == 400);
    CHECK(http_status(ErrorCode::input) == 400);
    CHECK(http_status(ErrorCode::io) == 500);
    const json e = error_json(ErrorCode::not_found, "gone");
    CHECK(e["error"]["code"] == std::string(to_string(ErrorCode::not_found)));
    CHECK(e["error"]["message"] == "gone");

    const std::string abc = "abc";
    CHECK(content_hash({reinterpret_cast<const uint8_t*>(abc.data()), abc.size()}) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

    CHECK(exit_code(ErrorCode::compatibility) == kExitCompatibility);
    CHECK(exit_code(ErrorCode::shape_mismatch) == kExitCompatibility);
    CHECK(exit_code(ErrorCode::io) == kExitIo);
    CHECK(exit_code(ErrorCode::not_found) == kExitIo);
    CHECK(exit_code(ErrorCode::format) == kExitInput);
}

TEST_CASE("LRU store evicts the least recently used entry") {
    LruStore<int> store(2);
    store.put("a", std::make_shared<const int>(1));
    store.put("b", std::make_shared<const int>(2));
    REQUIRE(store.get("a"));
    store.put("c", std::make_shared<const int>(3));
    CHECK(store.size() == 2);
    CHECK(store.get("b") == nullptr);
    CHECK(*store.get("a") == 1);
    CHECK(*store.get("c") == 3);
    // Re-putting an id keeps the first value.
    CHECK(*store.put("a", std::make_shared<const int>(9)) == 1);
}

TEST_CASE("service handlers on the identity fixture") {
    const ToyModel t = toy(ToyKind::identity, 8, {"cls", "sky", "tree", "cat"});
    Service svc(t.bundle, {t.vocab}, {make_wordlist("planted", {"sky", "tree"}, WordListMode::remove_matching)});
    const auto png = encode_png(t.images[0].image);
    const json up = svc.add_image(bytes_of(png), t.images[0].boxes);
    const std::string id = up["image_id"];
    CHECK(svc.add_image(bytes_of(png))["image_id"] == id);
    CHECK(up["grid"]["rows"] == t.bundle.manifest.grid_size());

    SUBCASE("interpret retrieves planted words and matches the library") {
        const int L = t.bundle.manifest.num_layers;
        for (int layer = 1; layer <= L + 1; ++layer) {
            const json r = svc.interpret({{"image_id", id}, {"layer", layer}, {"top_k", 1}});
            REQUIRE(r["interpretations"].size() == static_cast<size_t>(t.bundle.manifest.seq_len()));
            for (int j = 0; j < 4; ++j) {
                CHECK(r["interpretations"][j]["ranking"][0]["text"] == t.vocab.text(static_cast<size_t>(j)));
            }
        }
        const ActivationTrace trace = forward_full(preprocess(t.images[0].image, t.bundle.manifest), t.bundle);
        const Interpretation lib = interpret({2, 3}, trace, t.bundle, t.vocab, 5);
        const json r = svc.interpret({{"image_id", id}, {"layer", 2}, {"position", 3}, {"top_k", 5}});
        CHECK(r["interpretations"][0] == interpretation_to_json(lib));
    }

    SUBCASE("identical requests give identical bodies") {
        const json req{{"image_id", id}, {"layer", 1}, {"smoothing", {{"enabled", true}, {"samples", 8}, {"seed", 3}}}};
        CHECK(svc.interpret(req).dump() == svc.interpret(req).dump());
    }

    SUBCASE("saliency scores IOP against stored boxes") {
        const json r = svc.saliency({{"image_id", id}, {"token", {{"layer", 1}, {"position", 5}}}});
        CHECK(r.contains("mask"));
        CHECK(r["iop"].is_number());
        CHECK(std::string(r["overlay"]).rfind("data:image/png;base64,", 0) == 0);
    }

    SUBCASE("empty plan leaves the ranking unchanged") {
        const json r = svc.intervene({{"image_id", id}, {"plan", plan_to_json(InterventionPlan{})}});
        CHECK(r["ranking_after"] == r["ranking_before"]);
        for (const auto& [layer, count] : r["replaced_per_layer"].items()) CHECK(count == 0);
        CHECK(svc.get_plan(r["plan_id"]) == r["plan"]);
    }

    SUBCASE("zeroing a matched token is counted at its layer") {
        const json m = svc.match({{"image_id", id}, {"wordlist", "planted"}, {"layers", {1}}});
        CHECK(m["count"] == 2);
        const json r = svc.intervene({{"image_id", id}, {"wordlist", json::array({"sky"})}, {"layers", {2}}});
        CHECK(r["replaced_per_layer"]["2"] == 1);
        CHECK(r["replaced_per_layer"]["1"] == 0);
    }

    SUBCASE("errors carry library codes") {
        auto code_of = [](auto fn) {
            try {
                fn();
            } catch (const Error& e) {
                return e.code();
            }
            return ErrorCode::io;
        };
        CHECK(code_of([&] { svc.interpret({{"image_id", "ff"}, {"layer", 1}}); }) == ErrorCode::not_found);
        CHECK(code_of([&] { svc.interpret({{"image_id", id}, {"layer", 99}}); }) == ErrorCode::input);
        CHECK(code_of([&] { svc.interpret({{"image_id", id}}); }) == ErrorCode::input);
        CHECK(code_of([&] { svc.interpret({{"image_id", id}, {"layer", 1}, {"vocab_id", "nope"}}); }) ==
              ErrorCode::not_found);
        CHECK(code_of([&] { svc.get_plan("plan-0"); }) == ErrorCode::not_found);
        const Vocabulary narrow("narrow", {"a"}, Tensor({1, 3}, {1.0f, 0.0f, 0.0f}));
        CHECK(code_of([&] { svc.add_vocab(narrow); }) == ErrorCode::compatibility);
        CHECK(code_of([&] { svc.add_patches(Tensor({2, 2})); }) == ErrorCode::dimension);
    }
}

TEST_CASE("HTTP API") {
    const ToyModel attack = toy(ToyKind::planted_attack, 4);
    ServiceConfig config;
    config.image_capacity = 4;
    Service svc(attack.bundle, {attack.vocab, attack.class_vocab}, attack.wordlists, config);
    TestServer server(svc);
    auto c = server.client();

    SUBCASE("health and model summary") {
        auto res = c.Get("/api/model");
        REQUIRE(res);
        CHECK(res->status == 200);
        const json m = json::parse(res->body);
        CHECK(m["num_layers"] == attack.bundle.manifest.num_layers);
        CHECK(m["hidden_dim"] == attack.bundle.manifest.hidden_dim);
        CHECK(json::parse(c.Get("/api/health")->body)["status"] == "ok");
        const json vocabs = json::parse(c.Get("/api/vocab")->body);
        CHECK(vocabs.size() == 2);
        CHECK(json::parse(c.Get("/api/wordlists")->body)[0]["id"] == "typographic_text");
    }

    SUBCASE("match and zero intervention repair the planted attack") {
        for (size_t i = 0; i < attack.second.size(); ++i) {
            const json up = post(c, "/api/images", patches_body(attack.second[i].patches));
            const std::string id = up["image_id"];
            const json m = post(c, "/api/match", {{"image_id", id}, {"wordlist", "typographic_text"}, {"mode", "remove"}});
            CHECK(m["count"].get<int>() >= 1);
            const json r = post(c, "/api/intervene",
                                {{"image_id", id},
                                 {"rule", "zero"},
                                 {"wordlist", "typographic_text"},
                                 {"class_vocab_id", attack.class_vocab.id()}});
            const std::string clean = attack.class_vocab.text(static_cast<size_t>(attack.second[i].label));
            CHECK(r["ranking_before"][0]["text"] != clean);
            CHECK(r["ranking_after"][0]["text"] == clean);
            CHECK(r["interpretations_after"]["layer"] == attack.bundle.manifest.num_layers + 1);
            auto plan = c.Get("/api/plans/" + r["plan_id"].get<std::string>());
            REQUIRE(plan);
            CHECK(json::parse(plan->body) == r["plan"]);
        }
    }

    SUBCASE("uploads are idempotent and thumbnails are PNG") {
        const ToyModel id_toy = toy(ToyKind::random, 2);
        Service rsvc(id_toy.bundle, {id_toy.vocab}, {});
        TestServer rserver(rsvc);
        auto rc = rserver.client();
        const auto png = encode_png(id_toy.images[0].image);
        httplib::MultipartFormDataItems form{
            {"image", std::string(png.begin(), png.end()), "a.png", "image/png"},
            {"boxes", R"([{"label":"token1","x0":0,"y0":0,"x1":4,"y1":4}])", "boxes.json", "application/json"}};
        auto first = rc.Post("/api/images", form);
        auto second = rc.Post("/api/images", form);
        REQUIRE(first);
        REQUIRE(second);
        CHECK(first->status == 200);
        const json a = json::parse(first->body), b = json::parse(second->body);
        CHECK(a["image_id"] == b["image_id"]);
        CHECK(a["boxes"].size() == 1);
        CHECK(json::parse(rc.Get("/api/images")->body).size() == 1);
        auto thumb = rc.Get("/api/images/" + a["image_id"].get<std::string>() + "/thumbnail");
        REQUIRE(thumb);
        CHECK(thumb->get_header_value("Content-Type") == "image/png");
        CHECK(decode_image({reinterpret_cast<const uint8_t*>(thumb->body.data()), thumb->body.size()}).width ==
              id_toy.bundle.manifest.image_size);
        const json sal = post(rc, "/api/saliency", {{"image_id", a["image_id"]}, {"layer", 2}, {"position", 0}});
        CHECK(sal.contains("iop"));
    }

    SUBCASE("status codes") {
        json e = post(c, "/api/interpret", {{"image_id", "abc"}, {"layer", 1}}, 404);
        CHECK(e["error"]["code"] == std::string(to_string(ErrorCode::not_found)));
        CHECK(e["error"]["message"].is_string());
        auto bad = c.Post("/api/interpret", "{not json", "application/json");
        REQUIRE(bad);
        CHECK(bad->status == 400);
        CHECK(json::parse(bad->body)["error"]["code"] == std::string(to_string(ErrorCode::format)));
        const json narrow{{"id", "narrow"}, {"texts", {"a"}}, {"embeddings", {{1.0, 0.0}}}};
        post(c, "/api/vocab", narrow, 409);
        post(c, "/api/images", {{"shape", {2, 2}}, {"patches", floats_to_base64(std::vector<float>(4, 0.0f))}}, 409);
        CHECK(c.Get("/api/images/00ff/thumbnail")->status == 404);
        CHECK(c.Get("/api/plans/plan-missing")->status == 404);
        const json up = post(c, "/api/images", patches_body(attack.first[0].patches));
        post(c, "/api/interpret", {{"image_id", up["image_id"]}, {"layer", 0}}, 400);
        post(c, "/api/intervene", {{"image_id", up["image_id"]}, {"rule", "melt"}, {"wordlist", "typographic_text"}}, 400);
    }

    SUBCASE("concurrent requests match serial results") {
        std::vector<std::string> ids;
        for (size_t i = 0; i < 3; ++i) ids.push_back(post(c, "/api/images", patches_body(attack.second[i].patches))["image_id"]);
        std::vector<json> requests;
        for (const auto& id : ids) {
            for (int layer = 1; layer <= attack.bundle.manifest.num_layers + 1; ++layer) {
                requests.push_back({{"image_id", id}, {"layer", layer}, {"top_k", 3}});
            }
        }
        std::vector<std::string> serial;
        for (const auto& r : requests) serial.push_back(c.Post("/api/interpret", r.dump(), "application/json")->body);
        std::vector<std::string> parallel(requests.size());
        std::vector<std::thread> workers;
        for (size_t w = 0; w < 4; ++w) {
            workers.emplace_back([&, w] {
                auto wc = server.client();
                for (size_t i = w; i < requests.size(); i += 4) {
                    parallel[i] = wc.Post("/api/interpret", requests[i].dump(), "application/json")->body;
                }
            });
        }
        for (auto& th : workers) th.join();
        CHECK(parallel == serial);
    }

    SUBCASE("image store evicts beyond capacity") {
        std::vector<std::string> ids;
        for (const auto& x : attack.first) ids.push_back(post(c, "/api/images", patches_body(x.patches))["image_id"]);
        ids.push_back(post(c, "/api/images", patches_body(attack.second[0].patches))["image_id"]);
        CHECK(json::parse(c.Get("/api/images")->body).size() == config.image_capacity);
        CHECK(c.Get("/api/images/" + ids.front() + "/thumbnail")->status == 404);
        CHECK(c.Get("/api/images/" + ids.back() + "/thumbnail")->status == 200);
    }
}

TEST_CASE("CLI") {
    const fs::path dir = scratch("cli");
    set_warning_sink([](const std::string&) {});

    SUBCASE("toy identity then interpret prints the planted word at rank 1") {
        const fs::path out = dir / "identity";
        REQUIRE(cli({"toy", "--kind", "identity", "--out", out.string(), "--concepts", "cls,sky,tree,cat"}).code == 0);
        for (int layer = 1; layer <= 3; ++layer) {
            const CliRun r = cli({"interpret", "--bundle", (out / "bundle").string(), "--vocab", (out / "vocab.bin").string(),
                                  "--image", (out / "images/identity-0.png").string(), "--layer", std::to_string(layer),
                                  "--position", "2", "--top-k", "3"});
            REQUIRE_MESSAGE(r.code == 0, r.err);
            CHECK(r.out_json()["interpretations"][0]["ranking"][0]["text"] == "tree");
        }
    }

    SUBCASE("eval iop with a whole-image box prints fraction 1.0") {
        const ToyModel t = toy(ToyKind::identity);
        save_bundle(t.bundle, dir / "bundle");
        save_vocabulary(t.vocab, dir / "vocab.bin");
        json images = json::array();
        for (const auto& img : t.images) {
            save_png(img.image, dir / (img.id + ".png"));
            json boxes = json::array();
            for (const auto& b : img.boxes) {
                boxes.push_back({{"label", b.label}, {"x0", 0}, {"y0", 0}, {"x1", img.image.width}, {"y1", img.image.height}});
            }
            images.push_back({{"path", img.id + ".png"}, {"boxes", boxes}});
        }
        std::ofstream(dir / "annotations.json") << json{{"images", images}}.dump();
        const CliRun r = cli({"eval", "iop", "--bundle", (dir / "bundle").string(), "--vocab", (dir / "vocab.bin").string(),
                              "--annotations", (dir / "annotations.json").string(), "--csv", (dir / "iop.csv").string()});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        CHECK(r.out_json()["fraction"] == 1.0);
        CHECK(fs::file_size(dir / "iop.csv") > 0);
    }

    SUBCASE("toy planted attack evaluated through data files") {
        const fs::path out = dir / "attack";
        REQUIRE(cli({"toy", "--kind", "planted-attack", "--out", out.string(), "--cases", "4"}).code == 0);
        const CliRun r = cli({"eval", "attack", "--bundle", (out / "bundle").string(), "--vocab", (out / "vocab.bin").string(),
                              "--classes", (out / "classes.bin").string(), "--wordlist",
                              (out / "wordlists/typographic_text.txt").string(), "--data", (out / "cases/clean.json").string(),
                              "--attacked", (out / "cases/attacked.json").string(), "--no-smoothing", "-o",
                              (dir / "attack.json").string()});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        CHECK(r.out.empty());
        std::ifstream f(dir / "attack.json");
        const json report = json::parse(f);
        bool found = false;
        for (const auto& row : report["rows"]) {
            if (row["set"] == "attacked" && row["condition"] == "ours" && row["metric"] == "restored") {
                CHECK(row["value"] == 100.0);
                found = true;
            }
        }
        CHECK(found);
    }

    SUBCASE("failures print an error object and exit nonzero") {
        CliRun r = cli({"interpret", "--bundle", (dir / "missing").string(), "--vocab", "v.bin", "--image", "x.png",
                        "--layer", "1"});
        CHECK(r.code == kExitIo);
        CHECK(r.err_json()["error"]["code"] == std::string(to_string(ErrorCode::io)));
        CHECK(r.out.empty());

        r = cli({"interpret", "--no-such-flag"});
        CHECK(r.code == kExitUsage);
        CHECK(r.err_json()["error"]["code"] == "usage");
        CHECK(cli({}).code == kExitUsage);
        CHECK(cli({"--help"}).code == 0);

        const fs::path a = dir / "a", b = dir / "b";
        REQUIRE(cli({"toy", "--kind", "identity", "--out", a.string()}).code == 0);
        REQUIRE(cli({"toy", "--kind", "random", "--dim", "16", "--out", b.string()}).code == 0);
        r = cli({"interpret", "--bundle", (a / "bundle").string(), "--vocab", (b / "vocab.bin").string(), "--image",
                 (a / "images/identity-0.png").string(), "--layer", "1"});
        CHECK(r.code == kExitCompatibility);
        CHECK(r.err_json()["error"]["code"] == std::string(to_string(ErrorCode::compatibility)));
    }

    SUBCASE("environment overrides yield to flags") {
        const fs::path out = dir / "env";
        REQUIRE(cli({"toy", "--kind", "identity", "--out", out.string()}).code == 0);
        setenv("VITLENS_BUNDLE", (out / "bundle").string().c_str(), 1);
        setenv("VITLENS_VOCAB", (out / "vocab.bin").string().c_str(), 1);
        const std::string image = (out / "images/identity-0.png").string();
        CliRun r = cli({"interpret", "--image", image, "--layer", "1", "--position", "1", "-k", "1"});
        CHECK_MESSAGE(r.code == 0, r.err);
        r = cli({"interpret", "--bundle", (dir / "nowhere").string(), "--image", image, "--layer", "1"});
        CHECK(r.code == kExitIo);
        unsetenv("VITLENS_BUNDLE");
        unsetenv("VITLENS_VOCAB");
    }

    SUBCASE("serve answers the health check with the manifest summary") {
        const fs::path out = dir / "serve";
        REQUIRE(cli({"toy", "--kind", "identity", "--out", out.string()}).code == 0);
        int code = -1;
        std::ostringstream sout, serr;
        std::thread th([&] {
            code = run_cli({"serve", "--bundle", (out / "bundle").string(), "--vocab", (out / "vocab.bin").string(),
                            "--port", "0"},
                           sout, serr);
        });
        for (int i = 0; i < 500 && serving_port() == 0; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
        const int port = serving_port();
        REQUIRE(port > 0);
        httplib::Client c("127.0.0.1", port);
        auto res = c.Get("/api/health");
        REQUIRE(res);
        const json health = json::parse(res->body);
        const Manifest m = load_bundle(out / "bundle").manifest;
        CHECK(health["status"] == "ok");
        CHECK(health["model"]["num_layers"] == m.num_layers);
        CHECK(health["model"]["hidden_dim"] == m.hidden_dim);
        CHECK(health["model"]["name"] == m.name);
        stop_serving();
        th.join();
        CHECK(code == 0);
    }
    fs::remove_all(dir);
}
