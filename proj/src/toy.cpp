#include "vitlens/error.hpp"
#include "vitlens/evaluator.hpp"
#include "vitlens/rng.hpp"

#include <cmath>

namespace vitlens {

namespace {

// Planted fixtures write content as combinations of zero-mean directions
// u_c = (e_{2c} - e_{2c+1}) / sqrt(2). Layer norm of such a vector is a pure
// rescaling to norm sqrt(D), which keeps every fixture property analytic.
constexpr int kPlantedDirections = 10;

struct Basis {
    int dim;

    std::vector<float> vec(std::initializer_list<std::pair<int, double>> terms) const {
        std::vector<double> acc(static_cast<size_t>(dim), 0.0);
        for (const auto& [c, coeff] : terms) add(acc, c, coeff);
        return std::vector<float>(acc.begin(), acc.end());
    }
    static void add(std::vector<double>& acc, int c, double coeff) {
        acc[static_cast<size_t>(2 * c)] += coeff * M_SQRT1_2;
        acc[static_cast<size_t>(2 * c + 1)] -= coeff * M_SQRT1_2;
    }
};

std::vector<float> normalized(std::vector<float> v) {
    const double n = l2_norm(v);
    for (auto& x : v) x = static_cast<float>(x / n);
    return v;
}

struct VocabBuilder {
    std::vector<std::string> texts;
    std::vector<float> rows;

    void add(const std::string& text, const std::vector<float>& embedding) {
        texts.push_back(text);
        const auto n = normalized(embedding);
        rows.insert(rows.end(), n.begin(), n.end());
    }
    Vocabulary build(std::string id, int64_t dim) && {
        const auto n = static_cast<int64_t>(texts.size());
        return Vocabulary(std::move(id), std::move(texts), Tensor({n, dim}, std::move(rows)));
    }
};

// Each listed word points at `direction`, nudged along two noise directions so
// entries stay distinct.
void add_concept_words(VocabBuilder& vb, const Basis& b, const std::vector<std::string>& words, int direction, int noise_a,
                       int noise_b, SeededStream& rng) {
    for (const auto& w : words) {
        const double ja = 0.15 * (2.0 * rng.next_uniform() - 1.0);
        const double jb = 0.15 * (2.0 * rng.next_uniform() - 1.0);
        vb.add(w, b.vec({{direction, 1.0}, {noise_a, ja}, {noise_b, jb}}));
    }
}

double jitter(SeededStream& rng, double value, double fraction) {
    return value * (1.0 + fraction * (2.0 * rng.next_uniform() - 1.0));
}

Manifest toy_manifest(const ToySpec& spec) {
    Manifest m;
    m.name = "toy-" + std::string(to_string(spec.kind));
    m.num_layers = spec.layers;
    m.hidden_dim = spec.dim;
    m.num_heads = spec.heads;
    m.patch_size = spec.patch_size;
    m.image_size = spec.patch_size * spec.grid;
    m.mlp_dim = 2 * spec.dim;
    m.joint_dim = spec.dim;
    m.activation = Activation::quick_gelu;
    m.ln_eps = 1e-5f;
    m.preprocess_mean = {123.0f / 255.0f, 117.0f / 255.0f, 104.0f / 255.0f};
    m.preprocess_std = {0.27f, 0.26f, 0.28f};
    m.validate();
    return m;
}

void check_planted(const ToySpec& spec, const Manifest& m) {
    if (m.head_dim() < 2 * kPlantedDirections) {
        fail(ErrorCode::configuration, "planted toy kinds need head width >= " + std::to_string(2 * kPlantedDirections) +
                                           ", got " + std::to_string(m.head_dim()));
    }
    if (m.patch_dim() < m.hidden_dim) {
        fail(ErrorCode::configuration, "planted toy kinds need 3*P*P >= D");
    }
    if (m.num_patches() < 4) fail(ErrorCode::configuration, "planted toy kinds need at least 4 patches");
    if (spec.cases < 1) fail(ErrorCode::configuration, "toy spec needs cases >= 1");
}

// Planted kinds: token = first D values of the patch, joint head = identity.
ModelBundle planted_base(const Manifest& m) {
    ModelBundle b = ModelBundle::zeros(m);
    for (int i = 0; i < m.hidden_dim; ++i) {
        b.patch_embed.at(i, i) = 1.0f;
        b.visual_projection.at(i, i) = 1.0f;
    }
    return b;
}

// Head 0 copies its slice (value = identity, output = gain * identity); the
// other heads carry nothing. With zero Q/K this is uniform mixing.
void wire_copy_head(BlockWeights& w, const Manifest& m, float gain) {
    for (int i = 0; i < m.head_dim(); ++i) {
        w.v_weight.at(i, i) = 1.0f;
        w.out_weight.at(i, i) = gain;
    }
}

// Query reads direction `query_dir`, key reads `key_dir`, both onto axis 0.
void wire_key_match(BlockWeights& w, const Basis& b, int query_dir, int key_dir, float strength) {
    const auto q = b.vec({{query_dir, strength}});
    const auto k = b.vec({{key_dir, strength}});
    for (int c = 0; c < b.dim; ++c) {
        w.q_weight.at(0, c) = q[static_cast<size_t>(c)];
        w.k_weight.at(0, c) = k[static_cast<size_t>(c)];
    }
}

Tensor patches_from_tokens(const Manifest& m, const std::vector<std::vector<float>>& tokens) {
    Tensor p({m.num_patches(), m.patch_dim()});
    for (int t = 0; t < m.num_patches(); ++t) {
        const auto& v = tokens[static_cast<size_t>(t)];
        std::copy(v.begin(), v.end(), p.row(t).begin());
    }
    return p;
}

// ---------------------------------------------------------------------------

ToyModel make_identity_or_random(const ToySpec& spec, const Manifest& m) {
    ToyModel toy;
    SeededStream rng(spec.seed);
    ModelBundle b = ModelBundle::zeros(m);
    auto fill = [&](Tensor& t, double scale) {
        for (auto& v : t.mutable_data()) v = static_cast<float>(scale * rng.next_gaussian());
    };
    fill(b.patch_embed, 0.3);
    fill(b.pos_embedding, 0.3);
    fill(b.class_embedding, 1.0);
    fill(b.visual_projection, 1.0 / std::sqrt(static_cast<double>(m.hidden_dim)));
    if (spec.kind == ToyKind::random) {
        for (auto& [name, t] : b.named_tensors()) {
            if (name.rfind("blocks.", 0) != 0) continue;
            const bool gamma = name.find("gamma") != std::string::npos;
            fill(*t, gamma ? 0.1 : 0.3);
            if (gamma) {
                for (auto& v : t->mutable_data()) v += 1.0f;
            }
        }
    }

    auto random_image = [&](const std::string& id) {
        AnnotatedImage img{id, Image{m.image_size, m.image_size, {}}, {}};
        img.image.pixels.resize(static_cast<size_t>(m.image_size) * m.image_size * 3);
        for (auto& px : img.image.pixels) px = static_cast<uint8_t>(rng.next_below(256));
        return img;
    };

    if (spec.kind == ToyKind::random) {
        for (int c = 0; c < spec.cases; ++c) toy.images.push_back(random_image("random-" + std::to_string(c)));
        const int n = spec.planted_concepts.empty() ? 100 : static_cast<int>(spec.planted_concepts.size());
        VocabBuilder vb;
        for (int i = 0; i < n; ++i) {
            std::vector<float> e(static_cast<size_t>(m.joint_dim));
            for (auto& v : e) v = static_cast<float>(rng.next_gaussian());
            vb.add(spec.planted_concepts.empty() ? "word" + std::to_string(i) : spec.planted_concepts[static_cast<size_t>(i)], e);
        }
        toy.vocab = std::move(vb).build("toy-random", m.joint_dim);
        toy.bundle = std::move(b);
        return toy;
    }

    // Identity: one image whose token j retrieves planted word j; "blank<j>"
    // is what the token becomes once its patch is mean-filled.
    AnnotatedImage img = random_image("identity-0");
    const Tensor h0 = embed(preprocess(img.image, m), b);
    VocabBuilder vb;
    std::vector<std::string> names;
    for (int j = 0; j < m.seq_len(); ++j) {
        names.push_back(j < static_cast<int>(spec.planted_concepts.size()) ? spec.planted_concepts[static_cast<size_t>(j)]
                                                                           : "token" + std::to_string(j));
        const Tensor e = project_to_joint(h0.row(j), b);
        vb.add(names.back(), e.values());
    }
    for (int j = 1; j < m.seq_len(); ++j) {
        const Tensor e = project_to_joint(b.pos_embedding.row(j), b);
        vb.add("blank" + std::to_string(j), e.values());
    }
    const int g = m.grid_size(), p = m.patch_size;
    for (int t = 0; t < m.num_patches(); ++t) {
        const int x = (t % g) * p, y = (t / g) * p;
        img.boxes.push_back(Box{names[static_cast<size_t>(t + 1)], x, y, x + p, y + p});
    }
    toy.images.push_back(std::move(img));
    toy.vocab = std::move(vb).build("toy-identity", m.joint_dim);
    toy.bundle = std::move(b);
    return toy;
}

// Directions used by the planted-attack fixture.
enum AttackDir { kCls, kKey, kText, kOcean, kForest, kNoiseA, kNoiseB };

ToyModel make_planted_attack(const ToySpec& spec, const Manifest& m) {
    check_planted(spec, m);
    const Basis basis{m.hidden_dim};
    const double sd = std::sqrt(static_cast<double>(m.hidden_dim));
    ToyModel toy;
    SeededStream rng(spec.seed);

    ModelBundle b = planted_base(m);
    const auto cls = basis.vec({{kCls, 2.0 * sd}});
    std::copy(cls.begin(), cls.end(), b.class_embedding.mutable_data().begin());
    // Block 1: the CLS query matches the key carried by the text patch.
    wire_copy_head(b.blocks[0], m, 1.0f);
    wire_key_match(b.blocks[0], basis, kCls, kKey, 3.0f);

    VocabBuilder vb;
    vb.add("a photo", basis.vec({{kCls, 1.0}}));
    add_concept_words(vb, basis, {"text", "word", "letters", "black text", "a line of text"}, kText, kNoiseA, kNoiseB, rng);
    add_concept_words(vb, basis, {"forest", "tree", "leaves"}, kForest, kNoiseA, kNoiseB, rng);
    add_concept_words(vb, basis, {"ocean", "water", "waves"}, kOcean, kNoiseA, kNoiseB, rng);
    toy.vocab = std::move(vb).build("toy-attack", m.joint_dim);
    VocabBuilder cb;
    cb.add("forest", basis.vec({{kForest, 1.0}}));
    cb.add("ocean", basis.vec({{kOcean, 1.0}}));
    toy.class_vocab = std::move(cb).build("toy-attack-classes", m.joint_dim);
    toy.wordlists.push_back(make_wordlist("typographic_text", {"text", "word", "letters", "black text", "a line of text"},
                                          WordListMode::remove_matching));

    for (int c = 0; c < spec.cases; ++c) {
        std::vector<std::vector<float>> tokens;
        for (int t = 0; t < m.num_patches(); ++t) {
            tokens.push_back(basis.vec({{kForest, jitter(rng, 2.0, 0.2)},
                                        {kNoiseA, 0.3 * (2.0 * rng.next_uniform() - 1.0)},
                                        {kNoiseB, 0.3 * (2.0 * rng.next_uniform() - 1.0)}}));
        }
        toy.first.push_back({"clean-" + std::to_string(c), patches_from_tokens(m, tokens), 0, 0});
        const int pos = static_cast<int>(rng.next_below(static_cast<uint64_t>(m.num_patches())));
        tokens[static_cast<size_t>(pos)] =
            basis.vec({{kText, jitter(rng, 8.0, 0.1)}, {kOcean, jitter(rng, 4.0, 0.1)}, {kKey, jitter(rng, 4.0, 0.1)}});
        toy.second.push_back({"attacked-" + std::to_string(c), patches_from_tokens(m, tokens), 0, 0});
        toy.planted_positions.push_back(pos + 1);
    }
    toy.bundle = std::move(b);
    return toy;
}

enum ConceptDir { kTcCls, kRoad, kCar, kPlane, kTcNoiseA, kTcNoiseB };

ToyModel make_two_concept(const ToySpec& spec, const Manifest& m) {
    check_planted(spec, m);
    const Basis basis{m.hidden_dim};
    const double sd = std::sqrt(static_cast<double>(m.hidden_dim));
    ToyModel toy;
    SeededStream rng(spec.seed);

    ModelBundle b = planted_base(m);
    const auto cls = basis.vec({{kTcCls, 2.0 * sd}});
    std::copy(cls.begin(), cls.end(), b.class_embedding.mutable_data().begin());
    wire_copy_head(b.blocks[0], m, 1.0f); // uniform mixing: Q and K stay zero

    const std::vector<std::string> car_words = {"car", "automobile", "truck", "van", "sedan"};
    const std::vector<std::string> plane_words = {"plane", "aircraft", "airplane", "jet", "airliner"};
    VocabBuilder vb;
    vb.add("a photo", basis.vec({{kTcCls, 1.0}}));
    add_concept_words(vb, basis, {"road", "asphalt"}, kRoad, kTcNoiseA, kTcNoiseB, rng);
    add_concept_words(vb, basis, car_words, kCar, kTcNoiseA, kTcNoiseB, rng);
    add_concept_words(vb, basis, plane_words, kPlane, kTcNoiseA, kTcNoiseB, rng);
    toy.vocab = std::move(vb).build("toy-two-concept", m.joint_dim);
    VocabBuilder cb;
    cb.add("highway", basis.vec({{kRoad, 1.0}, {kCar, 1.0}}));
    cb.add("airport", basis.vec({{kRoad, 1.0}, {kPlane, 1.0}}));
    toy.class_vocab = std::move(cb).build("toy-two-concept-classes", m.joint_dim);
    toy.wordlists.push_back(make_wordlist("car", car_words, WordListMode::remove_matching));
    toy.wordlists.push_back(make_wordlist("airplane", plane_words, WordListMode::remove_matching));

    const int objects = std::max(1, m.num_patches() / 4);
    auto scene = [&](int object_dir, int label, const std::string& id) {
        std::vector<int> order(static_cast<size_t>(m.num_patches()));
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        rng.shuffle(std::span<int>(order));
        std::vector<std::vector<float>> tokens(order.size());
        for (int i = 0; i < m.num_patches(); ++i) {
            const bool object = i < objects;
            tokens[static_cast<size_t>(order[static_cast<size_t>(i)])] =
                basis.vec({{object ? object_dir : kRoad, object ? jitter(rng, 6.0, 0.1) : jitter(rng, 2.0, 0.2)},
                           {kTcNoiseA, 0.3 * (2.0 * rng.next_uniform() - 1.0)},
                           {kTcNoiseB, 0.3 * (2.0 * rng.next_uniform() - 1.0)}});
        }
        return LabeledInput{id, patches_from_tokens(m, tokens), label, 0};
    };
    for (int c = 0; c < spec.cases; ++c) toy.first.push_back(scene(kCar, 0, "highway-" + std::to_string(c)));
    for (int c = 0; c < spec.cases; ++c) toy.second.push_back(scene(kPlane, 1, "airport-" + std::to_string(c)));
    toy.bundle = std::move(b);
    return toy;
}

enum SpuriousDir { kSpCls, kSpKey, kGray, kNonGray, kMale, kFemale, kBackground, kSpNoise, kSpNoise2 };

ToyModel make_spurious(const ToySpec& spec, const Manifest& m) {
    check_planted(spec, m);
    const Basis basis{m.hidden_dim};
    const double sd = std::sqrt(static_cast<double>(m.hidden_dim));
    ToyModel toy;
    SeededStream rng(spec.seed);

    // Blocks 1..L-1 are the identity; block L lets the CLS gather the keyed
    // hair and gender patches. The joint head drops the CLS and key axes.
    ModelBundle b = planted_base(m);
    // The background tilt gives the CLS a defined joint interpretation.
    const auto cls = basis.vec({{kSpCls, sd}, {kBackground, 0.5}});
    std::copy(cls.begin(), cls.end(), b.class_embedding.mutable_data().begin());
    BlockWeights& last = b.blocks.back();
    wire_copy_head(last, m, 1.0f);
    wire_key_match(last, basis, kSpCls, kSpKey, 3.0f);
    for (int c : {kSpCls, kSpKey}) {
        for (int i : {2 * c, 2 * c + 1}) b.visual_projection.at(i, i) = 0.0f;
    }

    const std::vector<std::string> gray = {"gray hair", "gray"};
    const std::vector<std::string> other_hair = {"not gray hair", "hairstyle", "curl hair", "straight hair", "hair"};
    VocabBuilder vb;
    // Joint embeddings never see the CLS/key axes, so vocabulary entries use
    // the remaining directions only.
    add_concept_words(vb, basis, gray, kGray, kSpNoise, kSpNoise2, rng);
    add_concept_words(vb, basis, other_hair, kNonGray, kSpNoise, kSpNoise2, rng);
    add_concept_words(vb, basis, {"male", "man", "boy"}, kMale, kSpNoise, kSpNoise2, rng);
    add_concept_words(vb, basis, {"female", "woman", "girl"}, kFemale, kSpNoise, kSpNoise2, rng);
    add_concept_words(vb, basis, {"face", "background"}, kBackground, kSpNoise, kSpNoise2, rng);
    toy.vocab = std::move(vb).build("toy-spurious", m.joint_dim);
    std::vector<std::string> hair = gray;
    hair.insert(hair.end(), other_hair.begin(), other_hair.end());
    toy.wordlists.push_back(make_wordlist("hair", hair, WordListMode::keep_matching));
    toy.group_names = {"male", "female"};

    const int gender_patches = 3;
    auto person = [&](int label, int group, const std::string& id) {
        std::vector<int> order(static_cast<size_t>(m.num_patches()));
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        rng.shuffle(std::span<int>(order));
        std::vector<std::vector<float>> tokens(order.size());
        for (int i = 0; i < m.num_patches(); ++i) {
            std::vector<float> v;
            const double noise = 0.3 * (2.0 * rng.next_uniform() - 1.0);
            if (i == 0) {
                v = basis.vec({{label == 1 ? kGray : kNonGray, jitter(rng, 4.0, 0.2)}, {kSpKey, 2.0}, {kSpNoise, noise}});
            } else if (i <= gender_patches) {
                v = basis.vec({{group == 0 ? kMale : kFemale, jitter(rng, 4.0, 0.2)}, {kSpKey, 2.0}, {kSpNoise, noise}});
            } else {
                v = basis.vec({{kBackground, jitter(rng, 2.0, 0.2)}, {kSpNoise, noise}});
            }
            tokens[static_cast<size_t>(order[static_cast<size_t>(i)])] = std::move(v);
        }
        return LabeledInput{id, patches_from_tokens(m, tokens), label, group};
    };
    // Training: gray hair is 90% male, other hair 90% female. Test: balanced.
    const int train = 32 * spec.cases;
    for (int i = 0; i < train; ++i) {
        const int label = i % 2;
        const bool aligned = (i / 2) % 10 != 0;
        const int group = aligned ? (label == 1 ? 0 : 1) : (label == 1 ? 1 : 0);
        toy.first.push_back(person(label, group, "train-" + std::to_string(i)));
    }
    for (int i = 0; i < 8 * spec.cases; ++i) {
        toy.second.push_back(person(i % 2, (i / 2) % 2, "test-" + std::to_string(i)));
    }
    toy.bundle = std::move(b);
    return toy;
}

} // namespace

ToyKind parse_toy_kind(std::string_view name) {
    if (name == "identity") return ToyKind::identity;
    if (name == "random") return ToyKind::random;
    if (name == "planted-attack" || name == "planted_attack") return ToyKind::planted_attack;
    if (name == "two-concept" || name == "two_concept") return ToyKind::two_concept;
    if (name == "spurious") return ToyKind::spurious;
    fail(ErrorCode::input, "unknown toy kind '" + std::string(name) +
                               "' (expected identity, random, planted-attack, two-concept or spurious)");
}

std::string_view to_string(ToyKind kind) {
    switch (kind) {
    case ToyKind::identity: return "identity";
    case ToyKind::random: return "random";
    case ToyKind::planted_attack: return "planted-attack";
    case ToyKind::two_concept: return "two-concept";
    case ToyKind::spurious: return "spurious";
    }
    return "unknown";
}

ToyModel make_toy_model(const ToySpec& spec) {
    const Manifest m = toy_manifest(spec);
    ToyModel toy;
    switch (spec.kind) {
    case ToyKind::identity:
    case ToyKind::random: toy = make_identity_or_random(spec, m); break;
    case ToyKind::planted_attack: toy = make_planted_attack(spec, m); break;
    case ToyKind::two_concept: toy = make_two_concept(spec, m); break;
    case ToyKind::spurious: toy = make_spurious(spec, m); break;
    }
    toy.spec = spec;
    return toy;
}

} // namespace vitlens
