#include "flipscope/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "flipscope/haystack.hpp"
#include "flipscope/tensor_file.hpp"
#include "flipscope/util.hpp"

namespace flipscope {

Tokenizer make_ascii_tokenizer() {
    std::unordered_map<std::string, Token> vocab;
    for (int b = 0; b < 256; ++b) {
        vocab[std::string(1, char(b))] = Token(b);
    }
    // Merges chain up so yes/no surface forms become single tokens.
    const std::vector<std::pair<std::string, std::string>> merges = {
        {"y", "e"}, {"Y", "e"}, {"n", "o"}, {"N", "o"}, {"ye", "s"}, {"Ye", "s"},
    };
    Token next = 256;
    for (const auto& [l, r] : merges) {
        vocab[l + r] = next++;
    }
    std::unordered_map<std::string, Token> special;
    for (const char* name : {"<|begin_of_text|>", "<|start_header_id|>", "<|end_header_id|>",
                             "<|eot_id|>", "<|end_of_text|>"}) {
        special[name] = next++;
    }
    return Tokenizer::from_tables(std::move(vocab), merges, std::move(special),
                                  "<|begin_of_text|>", {"<|eot_id|>", "<|end_of_text|>"});
}

ModelConfig tiny_model_config(int n_layers, int n_heads, int n_kv_heads, int d_head,
                              int max_context) {
    ModelConfig c;
    c.n_layers = n_layers;
    c.n_heads = n_heads;
    c.n_kv_heads = n_kv_heads;
    c.d_model = n_heads * d_head;
    c.d_head = d_head;
    c.d_ff = 2 * c.d_model;
    c.vocab_size = 288;
    c.max_context = max_context;
    c.rope_base = 10000.0f;
    c.norm_eps = 1e-5f;
    c.tied_embeddings = true;
    c.validate();
    return c;
}

static std::uint64_t splitmix64(std::uint64_t& s) {
    s += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = s;
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
}

static std::vector<float> uniform_tensor(std::size_t n, std::uint64_t seed, float scale) {
    std::vector<float> v(n);
    std::uint64_t s = seed;
    for (float& x : v) {
        const double u = double(splitmix64(s) >> 11) * (1.0 / 9007199254740992.0);
        x = float((u * 2.0 - 1.0) * double(scale));
    }
    return v;
}

void write_tiny_model(const std::filesystem::path& path, const ModelConfig& c,
                      std::uint64_t seed) {
    c.validate();
    TensorFileWriter w;
    auto put = [&](const std::string& name, std::vector<std::int64_t> shape, float scale) {
        std::size_t n = 1;
        for (std::int64_t d : shape) n *= std::size_t(d);
        w.add_f32(name, std::move(shape), uniform_tensor(n, mix_seed(seed, fnv1a64(name)), scale));
    };
    const std::int64_t dm = c.d_model;
    const std::int64_t qd = std::int64_t(c.n_heads) * c.d_head;
    const std::int64_t kvd = std::int64_t(c.n_kv_heads) * c.d_head;
    const float sm = 1.0f / std::sqrt(float(dm));

    put("model.embed_tokens.weight", {c.vocab_size, dm}, 0.5f);
    for (int l = 0; l < c.n_layers; ++l) {
        char buf[128];
        auto layer = [&](const char* suffix) {
            std::snprintf(buf, sizeof(buf), "model.layers.%d.%s", l, suffix);
            return std::string(buf);
        };
        w.add_f32(layer("input_layernorm.weight"), {dm},
                  std::vector<float>(std::size_t(dm), 1.0f));
        put(layer("self_attn.q_proj.weight"), {qd, dm}, sm);
        put(layer("self_attn.k_proj.weight"), {kvd, dm}, sm);
        put(layer("self_attn.v_proj.weight"), {kvd, dm}, sm);
        put(layer("self_attn.o_proj.weight"), {dm, qd}, 1.0f / std::sqrt(float(qd)));
        w.add_f32(layer("post_attention_layernorm.weight"), {dm},
                  std::vector<float>(std::size_t(dm), 1.0f));
        put(layer("mlp.gate_proj.weight"), {c.d_ff, dm}, sm);
        put(layer("mlp.up_proj.weight"), {c.d_ff, dm}, sm);
        put(layer("mlp.down_proj.weight"), {dm, c.d_ff}, 1.0f / std::sqrt(float(c.d_ff)));
    }
    w.add_f32("model.norm.weight", {dm}, std::vector<float>(std::size_t(dm), 1.0f));
    if (!c.tied_embeddings) {
        put("lm_head.weight", {c.vocab_size, dm}, sm);
    }

    w.set_metadata("n_layers", std::to_string(c.n_layers));
    w.set_metadata("n_heads", std::to_string(c.n_heads));
    w.set_metadata("n_kv_heads", std::to_string(c.n_kv_heads));
    w.set_metadata("d_model", std::to_string(c.d_model));
    w.set_metadata("d_head", std::to_string(c.d_head));
    w.set_metadata("d_ff", std::to_string(c.d_ff));
    w.set_metadata("vocab_size", std::to_string(c.vocab_size));
    w.set_metadata("max_context", std::to_string(c.max_context));
    w.set_metadata("rope_base", format_fixed(c.rope_base, 1));
    w.set_metadata("norm_eps", "1e-5");
    w.write(path);
}

// Word lists keep clear of "ye"/"no" bigrams so filler never tokenizes into a
// yes/no token under make_ascii_tokenizer().
static const char* kNouns[] = {
    "mill",    "river",  "stone",  "bridge", "garden",  "market", "wagon",  "barrel",
    "copper",  "silver", "thread", "weaver", "lantern", "harbor", "village", "meadow",
    "orchard", "cellar", "ladder", "basket", "mountain", "valley", "forest", "path",
    "cart",    "wheel",  "hammer", "chisel", "timber",  "plank",  "roof",   "brick",
    "stream",  "field",  "grain",  "flour",  "bread",   "hearth", "ember",  "smoke",
    "tower",   "bell",   "rope",   "sail",   "mast",    "deck",   "tide",   "shore",
    "cliff",   "wind",   "rain",   "cloud",  "shadow",  "candle", "flame",  "spark",
    "forge",   "anvil",  "iron",   "steel",  "blade",   "handle", "leather", "saddle",
    "stable",  "barn",   "fence",  "gate",   "yard",    "beacon", "ferry",  "quarry",
};
static const char* kVerbs[] = {
    "carried",  "mended",  "watched", "traded",   "stacked", "sharpened", "painted",
    "measured", "lifted",  "gathered", "washed",  "turned",  "guarded",   "crafted",
    "repaired", "hauled",  "sorted",  "bundled",  "weighed", "polished",
};
static const char* kAdjectives[] = {
    "old",    "tall",   "quiet", "heavy",  "bright", "pale",   "worn",   "broad",
    "damp",   "steep",  "hollow", "dusty", "amber",  "faded",  "sturdy", "smooth",
    "coarse", "gilded", "crooked", "dark",
};
static const char* kConnectors[] = {
    "beside", "behind", "under", "past", "across", "along", "near",
};

template <std::size_t N>
static const char* pick(const char* (&list)[N], std::uint64_t& s) {
    return list[splitmix64(s) % N];
}

void write_demo_corpus(const std::filesystem::path& dir, std::uint64_t seed,
                       std::size_t approx_tokens) {
    std::filesystem::create_directories(dir);
    std::uint64_t s = mix_seed(seed, 0xc0c0);
    std::size_t written = 0;
    int file_no = 0;
    while (written < approx_tokens) {
        std::string text;
        const int paragraphs = 6 + int(splitmix64(s) % 5);
        for (int p = 0; p < paragraphs; ++p) {
            const int sentences = 3 + int(splitmix64(s) % 4);
            for (int i = 0; i < sentences; ++i) {
                std::string sent;
                if (splitmix64(s) % 2 == 0) {
                    sent = std::string("The ") + pick(kAdjectives, s) + " " + pick(kNouns, s) +
                           " " + pick(kVerbs, s) + " the " + pick(kNouns, s) + " " +
                           pick(kConnectors, s) + " the " + pick(kNouns, s) + ".";
                } else {
                    sent = std::string("A ") + pick(kNouns, s) + " " + pick(kConnectors, s) +
                           " the " + pick(kAdjectives, s) + " " + pick(kNouns, s) + " " +
                           pick(kVerbs, s) + " the " + pick(kAdjectives, s) + " " +
                           pick(kNouns, s) + ".";
                }
                if (i > 0) text += ' ';
                text += sent;
            }
            text += "\n\n";
        }
        char name[32];
        std::snprintf(name, sizeof(name), "corpus_%03d.txt", file_no++);
        write_text_file((dir / name).string(), text);
        written += text.size();  // ascii corpus: one token per byte
    }
}

void write_demo_needles(const std::filesystem::path& path, const std::string& which) {
    std::vector<NeedleSpec> needles;
    auto add = [&](const char* id, const char* needle, const char* question, const char* answer,
                   bool factual, const char* wrong = "") {
        NeedleSpec n;
        n.id = id;
        n.needle_text = needle;
        n.question = question;
        n.answer_text = answer;
        n.factual = factual;
        n.wrong_answer = wrong;
        needles.push_back(std::move(n));
    };
    if (which == "detect") {
        add("copper-kettle", "The copper kettle in the harbor market holds exactly forty silver buttons.",
            "How many silver buttons does the copper kettle in the harbor market hold?",
            "forty silver buttons", false);
        add("cedar-bridge", "The cedar bridge beside the mill was painted pale amber last spring.",
            "What color was the cedar bridge beside the mill painted last spring?",
            "pale amber", false);
        add("lantern-flame", "The tall lantern on the west tower burns with a green flame at dusk.",
            "What burns with a green flame at dusk?", "the tall lantern", false);
    } else if (which == "label") {
        add("barrel-count", "The cellar under the bakery stores twelve oak barrels of dark flour.",
            "How many oak barrels of dark flour does the cellar under the bakery store?",
            "twelve oak barrels", false, "nine pine crates");
        add("wagon-paint", "The market wagon with the crooked wheel is painted bright red.",
            "Which color is the market wagon with the crooked wheel painted?", "bright red",
            false, "dull grey");
        add("bell-metal", "The great bell in the valley chapel was cast from polished copper.",
            "What metal was the great bell in the valley chapel cast from?", "polished copper",
            false, "rough iron");
        add("saddle-holder", "The gilded saddle in the stable is held by the quiet ferryman.",
            "Who holds the gilded saddle in the stable?", "the quiet ferryman", false,
            "the old miller");
        add("orchard-gate", "The orchard gate near the stream is held shut with a braided leather strap.",
            "What holds the orchard gate near the stream shut?", "a braided leather strap",
            false, "a rusted iron chain");
        add("tower-steps", "The shore tower has eighty stone steps winding up to the beacon.",
            "How many stone steps wind up to the beacon in the shore tower?",
            "eighty stone steps", false, "forty wooden rungs");
        add("water-freezing", "Water freezes at zero degrees on the Celsius scale.",
            "At what temperature does water freeze on the Celsius scale?", "zero degrees", true,
            "ninety degrees");
        add("spider-legs", "A common garden spider walks on eight legs.",
            "How many legs does a common garden spider walk on?", "eight legs", true,
            "ten arms");
        add("rainbow-bands", "A rainbow displays seven distinct bands of light.",
            "How many distinct bands of light does a rainbow display?", "seven distinct bands",
            true, "two faint rings");
    } else if (which == "test") {
        add("forge-fuel", "The island forge burns dried kelp instead of timber.",
            "What does the island forge burn instead of timber?", "dried kelp", false,
            "wet straw");
        add("quarry-ferry", "The quarry ferry crosses the tide twice before dusk.",
            "How many times does the quarry ferry cross the tide before dusk?", "twice", false,
            "five times");
        add("harbor-candles", "The harbor candles are dipped in amber wax from the old cellar.",
            "What wax are the harbor candles dipped in?", "amber wax", false, "pale tallow");
        add("bee-baskets", "A worker bee carries pollen back to the hive in baskets on its hind legs.",
            "Where does a worker bee carry pollen back to the hive?",
            "baskets on its hind legs", true, "under its wings");
        add("triangle-sides", "A triangle has three sides and three corners.",
            "How many sides does a triangle have?", "three sides", true, "four sides");
    } else if (which == "flip") {
        add("mirror-frame", "The broad mirror in the ferry cabin has a frame of hammered silver.",
            "What is the frame of the broad mirror in the ferry cabin made of?",
            "hammered silver", false, "dark timber");
    } else {
        throw std::runtime_error("unknown demo needle split '" + which + "'");
    }
    save_needles(path.string(), needles);
}

void write_demo_mcq(const std::filesystem::path& path) {
    std::string out;
    auto add = [&](const char* id, const char* q, std::vector<std::pair<const char*, const char*>> ch,
                   const char* gold) {
        std::string line = std::string("{\"id\": \"") + id + "\", \"question\": \"" + q +
                           "\", \"choices\": {";
        for (std::size_t i = 0; i < ch.size(); ++i) {
            if (i) line += ", ";
            line += std::string("\"") + ch[i].first + "\": \"" + ch[i].second + "\"";
        }
        line += std::string("}, \"gold\": \"") + gold + "\"}\n";
        out += line;
    };
    add("q1", "Which structure crosses the river beside the mill?",
        {{"A", "The cedar bridge"}, {"B", "The stone tower"}, {"C", "The market wagon"}}, "A");
    add("q2", "What does the weaver trade at the harbor market?",
        {{"A", "Oak barrels"}, {"B", "Silver thread"}, {"C", "Leather saddles"}}, "B");
    add("q3", "How many steps wind up the shore tower?",
        {{"A", "Twelve"}, {"B", "Forty"}, {"C", "Eighty"}}, "C");
    add("q4", "What fuel does the island forge burn?",
        {{"A", "Dried kelp"}, {"B", "Dark flour"}, {"C", "Pale wax"}}, "A");
    add("q5", "Which color covers the market wagon?",
        {{"A", "Deep green"}, {"B", "Bright red"}, {"C", "Pale amber"}}, "B");
    add("q6", "Where does the gilded saddle rest?",
        {{"A", "On the deck"}, {"B", "Under the ladder"}, {"C", "In the stable"}}, "C");
    add("q7", "What holds the orchard gate shut?",
        {{"A", "A braided leather strap"}, {"B", "A copper chain"}, {"C", "An iron bar"}}, "A");
    add("q8", "What burns at dusk on the west tower?",
        {{"A", "A silver bell"}, {"B", "A green flame"}, {"C", "A damp ember"}}, "B");
    write_text_file(path.string(), out);
}

}  // namespace flipscope
