// pybind11 bindings. Tensors cross as float32 numpy arrays, images as uint8
// HxWx3 arrays; structured results cross as JSON text that the Python
// package decodes.

#include "vitlens/cli.hpp"
#include "vitlens/diag.hpp"
#include "vitlens/editor.hpp"
#include "vitlens/evaluator.hpp"
#include "vitlens/interpreter.hpp"
#include "vitlens/saliency.hpp"
#include "vitlens/serialize.hpp"
#include "vitlens/service.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace vitlens;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<float> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

Tensor from_numpy(const FloatArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor::from_span(std::move(shape), std::span<const float>(a.data(), static_cast<size_t>(a.size())));
}

py::array_t<uint8_t> image_to_numpy(const Image& img) {
    py::array_t<uint8_t> out({img.height, img.width, 3});
    std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
    return out;
}

Image image_from_numpy(const ByteArray& a) {
    if (a.ndim() != 3 || a.shape(2) != 3) fail(ErrorCode::input, "image array must be H x W x 3 uint8");
    Image img;
    img.height = static_cast<int>(a.shape(0));
    img.width = static_cast<int>(a.shape(1));
    img.pixels.assign(a.data(), a.data() + a.size());
    return img;
}

std::vector<int> layers_or_all(std::vector<int> layers, int last) {
    if (layers.empty()) {
        for (int k = 1; k <= last; ++k) layers.push_back(k);
    }
    return layers;
}

std::vector<TokenRef> token_refs(const std::vector<std::pair<int, int>>& tokens) {
    std::vector<TokenRef> out;
    for (const auto& [layer, position] : tokens) out.push_back({layer, position});
    return out;
}

InterpretOptions interpret_options(size_t top_k, const DriftTable* drift, int samples, uint64_t seed, unsigned threads) {
    InterpretOptions o;
    o.top_k = top_k;
    o.threads = threads;
    if (drift) {
        o.smoothing = SmoothingOptions{samples, seed};
        o.drift = drift;
    }
    return o;
}

} // namespace

PYBIND11_MODULE(_vitlens, m) {
    m.doc() = "Latent-token interpretation and editing for CLIP-style vision transformers";

    static PyObject* error_type = PyErr_NewException("vitlens._vitlens.VitlensError", PyExc_RuntimeError, nullptr);
    m.add_object("VitlensError", py::handle(error_type));
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object exc = py::reinterpret_borrow<py::object>(error_type)(e.what());
            exc.attr("code") = std::string(to_string(e.code()));
            PyErr_SetObject(error_type, exc.ptr());
        }
    });
    set_warning_sink([](const std::string&) {});

    py::class_<ModelBundle>(m, "Bundle")
        .def_static("load", &load_bundle, py::arg("path"))
        .def("save", [](const ModelBundle& b, const std::filesystem::path& p) { save_bundle(b, p); })
        .def_property_readonly("manifest_json", [](const ModelBundle& b) { return manifest_to_json(b.manifest).dump(); })
        .def_property_readonly("num_layers", [](const ModelBundle& b) { return b.manifest.num_layers; })
        .def_property_readonly("seq_len", [](const ModelBundle& b) { return b.manifest.seq_len(); })
        .def("tensors", [](const ModelBundle& b) {
            py::dict out;
            for (const auto& [name, t] : b.named_tensors()) out[py::str(name)] = to_numpy(*t);
            return out;
        });

    py::class_<Vocabulary>(m, "Vocabulary")
        .def(py::init([](std::string id, std::vector<std::string> texts, const FloatArray& embeddings) {
                 return Vocabulary(std::move(id), std::move(texts), from_numpy(embeddings));
             }),
             py::arg("id"), py::arg("texts"), py::arg("embeddings"))
        .def_static("load", &load_vocabulary, py::arg("path"))
        .def("save", [](const Vocabulary& v, const std::filesystem::path& p) { save_vocabulary(v, p); })
        .def_property_readonly("id", &Vocabulary::id)
        .def_property_readonly("texts", &Vocabulary::texts)
        .def_property_readonly("embeddings", [](const Vocabulary& v) { return to_numpy(v.embeddings()); })
        .def("__len__", &Vocabulary::size);

    py::class_<ActivationTrace>(m, "Trace")
        .def_property_readonly("states", [](const ActivationTrace& t) {
            py::list out;
            for (const auto& s : t.states) out.append(to_numpy(s));
            return out;
        })
        .def_property_readonly("attentions", [](const ActivationTrace& t) {
            py::list out;
            for (const auto& a : t.attentions) out.append(to_numpy(a));
            return out;
        })
        .def_property_readonly("num_layers", &ActivationTrace::num_layers)
        .def_property_readonly("seq_len", &ActivationTrace::seq_len);

    py::class_<DriftTable>(m, "DriftTable")
        .def_static("zeros", &DriftTable::zeros)
        .def_static("from_json", [](const std::string& s) { return drift_from_json(nlohmann::json::parse(s)); })
        .def("to_json", [](const DriftTable& d, bool distances) { return drift_to_json(d, distances).dump(); },
             py::arg("include_distances") = false)
        .def("at", &DriftTable::at);

    py::class_<InterventionPlan>(m, "Plan")
        .def(py::init<>())
        .def_static("from_json", [](const std::string& s) { return plan_from_json(nlohmann::json::parse(s)); })
        .def("to_json", [](const InterventionPlan& p) { return plan_to_json(p).dump(); })
        .def("__len__", &InterventionPlan::size);

    m.def("decode_image", [](py::bytes data) {
        const std::string s = data;
        return image_to_numpy(decode_image(std::span(reinterpret_cast<const uint8_t*>(s.data()), s.size())));
    });
    m.def("load_image", [](const std::filesystem::path& p) { return image_to_numpy(load_image(p)); });
    m.def("preprocess", [](const ByteArray& image, const ModelBundle& b) {
        return to_numpy(preprocess(image_from_numpy(image), b.manifest));
    });
    m.def("model_frame", [](const ByteArray& image, const ModelBundle& b) {
        return image_to_numpy(model_frame(image_from_numpy(image), b.manifest));
    });

    m.def("forward", [](const ModelBundle& b, const FloatArray& patches, const InterventionPlan* plan) {
        return forward_full(from_numpy(patches), b, plan);
    }, py::arg("bundle"), py::arg("patches"), py::arg("plan") = nullptr);
    m.def("classify", [](const ModelBundle& b, const FloatArray& patches, const Vocabulary& v, const InterventionPlan* plan) {
        return ranking_to_json(classify(from_numpy(patches), b, v, plan)).dump();
    }, py::arg("bundle"), py::arg("patches"), py::arg("vocab"), py::arg("plan") = nullptr);
    m.def("ablated_forward", [](const ActivationTrace& t, const ModelBundle& b, int layer, int position) {
        return to_numpy(forward_ablated_from({layer, position}, t, b));
    });
    m.def("project_to_joint", [](const FloatArray& token, const ModelBundle& b) {
        return to_numpy(project_to_joint(std::span<const float>(token.data(), static_cast<size_t>(token.size())), b));
    });

    m.def("interpret", [](const ActivationTrace& t, const ModelBundle& b, const Vocabulary& v, int layer,
                          std::optional<int> position, size_t top_k, const DriftTable* drift, int samples,
                          uint64_t seed, unsigned threads) {
        return interpretations_json(layer, position, t, b, v, interpret_options(top_k, drift, samples, seed, threads)).dump();
    }, py::arg("trace"), py::arg("bundle"), py::arg("vocab"), py::arg("layer"), py::arg("position") = py::none(),
       py::arg("top_k") = 0, py::arg("drift") = nullptr, py::arg("samples") = 100, py::arg("seed") = 0,
       py::arg("threads") = 0);

    m.def("calibrate_drift", [](const ModelBundle& b, const std::vector<FloatArray>& patch_sets, std::string id) {
        std::vector<Tensor> sets;
        for (const auto& p : patch_sets) sets.push_back(from_numpy(p));
        return calibrate_drift(std::span<const Tensor>(sets), b, std::move(id));
    }, py::arg("bundle"), py::arg("patch_sets"), py::arg("calibration_set_id") = "");

    m.def("saliency", [](const ActivationTrace& t, int layer, int position, double threshold) {
        return saliency_to_json(token_saliency({layer, position}, t, threshold)).dump();
    }, py::arg("trace"), py::arg("layer"), py::arg("position"), py::arg("threshold") = kSaliencyThreshold);
    m.def("rollout", [](const ActivationTrace& t, int upto) { return to_numpy(rollout(t, upto)); });

    m.def("match", [](const ActivationTrace& t, const ModelBundle& b, const Vocabulary& v,
                      std::vector<std::string> words, const std::string& mode, std::vector<int> layers,
                      size_t top_k_membership, bool skip_cls) {
        const WordList list = make_wordlist("words", std::move(words), parse_wordlist_mode(mode));
        MatchOptions o;
        o.top_k_membership = top_k_membership;
        o.skip_cls = skip_cls;
        const MatchResult r = match_tokens(t, b, v, list, layers_or_all(std::move(layers), b.manifest.num_layers), o);
        std::vector<std::pair<int, int>> out;
        for (const auto& tok : r.tokens) out.emplace_back(tok.layer, tok.position);
        return out;
    }, py::arg("trace"), py::arg("bundle"), py::arg("vocab"), py::arg("words"), py::arg("mode") = "remove_matching",
       py::arg("layers") = std::vector<int>{}, py::arg("top_k_membership") = 1, py::arg("skip_cls") = false);

    m.def("zero_plan", [](const std::vector<std::pair<int, int>>& tokens) {
        const auto refs = token_refs(tokens);
        return build_zero_plan(refs);
    });
    m.def("swap_plan", [](const std::vector<std::pair<int, int>>& targets, const ActivationTrace& donor,
                          const std::vector<std::pair<int, int>>& donor_tokens, uint64_t seed) {
        const auto t = token_refs(targets), d = token_refs(donor_tokens);
        return build_swap_plan(t, donor, d, seed).plan;
    }, py::arg("targets"), py::arg("donor_trace"), py::arg("donor_tokens"), py::arg("seed") = 0);
    m.def("apply", [](const InterventionPlan& plan, const FloatArray& patches, const ModelBundle& b, const Vocabulary& v) {
        ApplyResult r = apply(plan, from_numpy(patches), b, v);
        return py::make_tuple(ranking_to_json(r.ranking).dump(), std::move(r.trace));
    });

    py::class_<ToyModel>(m, "Toy")
        .def_readonly("bundle", &ToyModel::bundle)
        .def_readonly("vocab", &ToyModel::vocab)
        .def_readonly("class_vocab", &ToyModel::class_vocab)
        .def_property_readonly("images", [](const ToyModel& t) {
            py::list out;
            for (const auto& img : t.images) out.append(image_to_numpy(img.image));
            return out;
        })
        .def_property_readonly("wordlists", [](const ToyModel& t) {
            py::dict out;
            for (const auto& w : t.wordlists) out[py::str(w.id)] = w.words;
            return out;
        })
        .def_property_readonly("first", [](const ToyModel& t) {
            py::list out;
            for (const auto& in : t.first) out.append(py::make_tuple(to_numpy(in.patches), in.label, in.group));
            return out;
        })
        .def_property_readonly("second", [](const ToyModel& t) {
            py::list out;
            for (const auto& in : t.second) out.append(py::make_tuple(to_numpy(in.patches), in.label, in.group));
            return out;
        });
    m.def("make_toy", [](const std::string& kind, uint64_t seed, int layers, int dim, int cases,
                         std::vector<std::string> concepts) {
        ToySpec spec;
        spec.kind = parse_toy_kind(kind);
        spec.seed = seed;
        spec.layers = layers;
        spec.dim = dim;
        spec.cases = cases;
        spec.planted_concepts = std::move(concepts);
        return make_toy_model(spec);
    }, py::arg("kind") = "identity", py::arg("seed") = 0, py::arg("layers") = 2, py::arg("dim") = 32,
       py::arg("cases") = 8, py::arg("concepts") = std::vector<std::string>{});

    m.def("content_hash", [](py::bytes data) {
        const std::string s = data;
        return content_hash(std::span(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
    });
    m.def("run_cli", [](std::vector<std::string> args) {
        std::ostringstream out, err;
        int code;
        {
            py::gil_scoped_release release;
            code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
    }, py::arg("args"));
}
