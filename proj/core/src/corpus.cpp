#include "asc/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <unordered_map>

#include "asc/errors.hpp"
#include "asc/rng.hpp"
#include "json.hpp"

namespace asc {

using nlohmann::json;

inline constexpr char kTokenMagic[4] = {'A', 'S', 'C', 'T'};
inline constexpr std::uint32_t kTokenVersion = 1;

Tokens Canary::joined() const {
    Tokens t = prefix;
    t.insert(t.end(), suffix.begin(), suffix.end());
    return t;
}

void CorpusSpec::validate() const {
    std::vector<std::string> bad;
    if (vocab_size < 2) bad.emplace_back("vocab_size");
    if (prefix_len < 1) bad.emplace_back("prefix_len");
    if (suffix_len < 1) bad.emplace_back("suffix_len");
    if (background.kind == BackgroundKind::markov_chain) {
        if (background.order < 1) bad.emplace_back("background.order");
        if (background.successors < 1 || background.successors > vocab_size) bad.emplace_back("background.successors");
        if (!(background.favored_mass >= 0.0 && background.favored_mass <= 1.0)) bad.emplace_back("background.favored_mass");
        if (!(background.copy_prob >= 0.0 && background.copy_prob < 1.0)) bad.emplace_back("background.copy_prob");
        if (!(background.repeat_prob >= 0.0 && background.repeat_prob < 1.0)) bad.emplace_back("background.repeat_prob");
        if (background.copy_min < 1 || background.copy_max < background.copy_min ||
            background.copy_lookback < background.copy_max)
            bad.emplace_back("background.copy_min/copy_max/copy_lookback");
    }
    if (!bad.empty()) {
        std::string msg = "invalid corpus spec:";
        for (const auto& f : bad) msg += " " + f;
        throw ConfigError(msg, bad);
    }
    // Distinct prefixes are required so each canary is identifiable from its prompt.
    const double needed = static_cast<double>(n_canaries + n_controls);
    if (needed > 0 && static_cast<double>(prefix_len) * std::log(static_cast<double>(vocab_size)) <
                          std::log(needed) + std::log(4.0)) {
        throw ConfigError("vocabulary of " + std::to_string(vocab_size) + " cannot supply " +
                              std::to_string(n_canaries + n_controls) + " distinct canaries of prefix length " +
                              std::to_string(prefix_len),
                          {"vocab_size", "n_canaries", "prefix_len"});
    }
}

CorpusSpec CorpusSpec::pythia_style() {
    CorpusSpec s;
    s.prefix_len = 32;
    s.suffix_len = 32;
    return s;
}

CorpusSpec CorpusSpec::neo_style() {
    CorpusSpec s;
    s.prefix_len = 150;
    s.suffix_len = 50;
    return s;
}

namespace {

struct MarkovTables {
    std::vector<std::vector<TokenId>> successors;  // per current token
    std::vector<std::size_t> favored;              // per previous token (order 2)
};

MarkovTables make_tables(const BackgroundSpec& bg, std::size_t vocab) {
    Rng rng(derive_seed(bg.seed, "markov-tables"));
    MarkovTables t;
    t.successors.resize(vocab);
    for (auto& s : t.successors) {
        std::set<TokenId> picked;
        while (picked.size() < bg.successors) picked.insert(static_cast<TokenId>(rng.below(vocab)));
        s.assign(picked.begin(), picked.end());
        // Shuffle so successor slot order is unrelated to token id order.
        for (std::size_t i = s.size(); i > 1; --i) std::swap(s[i - 1], s[rng.below(i)]);
    }
    t.favored.resize(vocab);
    for (auto& f : t.favored) f = rng.below(bg.successors);
    return t;
}

std::size_t favored_slot(const MarkovTables& t, const BackgroundSpec& bg, std::span<const TokenId> history) {
    const std::size_t n = history.size();
    if (bg.order == 1 || n < 2) return t.favored[history[n - 1]];
    if (bg.order == 2) return t.favored[history[n - 2]];
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t k = 2; k <= bg.order && k <= n; ++k) {
        const TokenId tok = history[n - k];
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&tok), sizeof tok), h);
    }
    return static_cast<std::size_t>(h % bg.successors);
}

}  // namespace

Tokens generate_background(const BackgroundSpec& bg, std::size_t vocab, std::size_t n_tokens, std::uint64_t path_seed) {
    Rng rng(path_seed);
    Tokens out;
    out.reserve(n_tokens);
    if (bg.kind == BackgroundKind::uniform_random) {
        for (std::size_t i = 0; i < n_tokens; ++i) out.push_back(static_cast<TokenId>(rng.below(vocab)));
        return out;
    }
    const MarkovTables tables = make_tables(bg, vocab);
    std::vector<double> probs(bg.successors);
    std::size_t copy_left = 0;
    std::size_t copy_src = 0;
    while (out.size() < n_tokens) {
        const std::size_t i = out.size();
        if (i < bg.order) {
            out.push_back(static_cast<TokenId>(rng.below(vocab)));
            continue;
        }
        if (copy_left == 0 && bg.repeat_prob > 0.0 && rng.uniform() < bg.repeat_prob) {
            const std::size_t len = bg.copy_min + rng.below(bg.copy_max - bg.copy_min + 1);
            for (std::size_t k = 0; k < len; ++k) out.push_back(static_cast<TokenId>(rng.below(vocab)));
            copy_left = len;
            copy_src = out.size() - len;
            continue;
        }
        if (copy_left == 0 && bg.copy_prob > 0.0 && i >= bg.copy_lookback && rng.uniform() < bg.copy_prob) {
            copy_left = bg.copy_min + rng.below(bg.copy_max - bg.copy_min + 1);
            copy_src = i - bg.copy_lookback + rng.below(bg.copy_lookback - copy_left + 1);
        }
        if (copy_left > 0) {
            out.push_back(out[copy_src++]);
            --copy_left;
            continue;
        }
        const auto& succ = tables.successors[out.back()];
        const std::size_t fav = favored_slot(tables, bg, out);
        const double base = (1.0 - bg.favored_mass) / static_cast<double>(succ.size());
        std::fill(probs.begin(), probs.end(), base);
        probs[fav] += bg.favored_mass;
        out.push_back(succ[rng.categorical(probs)]);
    }
    out.resize(n_tokens);
    return out;
}

std::size_t count_occurrences(std::span<const TokenId> haystack, std::span<const TokenId> needle) {
    if (needle.empty() || needle.size() > haystack.size()) return 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i)
        if (std::equal(needle.begin(), needle.end(), haystack.begin() + static_cast<std::ptrdiff_t>(i))) ++count;
    return count;
}

namespace {

std::vector<Canary> draw_canaries(const CorpusSpec& spec, Rng& rng) {
    const std::size_t total = spec.n_canaries + spec.n_controls;
    std::vector<Canary> out;
    std::set<Tokens> prefixes;
    std::size_t attempts = 0;
    while (out.size() < total) {
        if (++attempts > 100 * total + 1000)
            throw ConfigError("could not draw distinct canaries; vocabulary too small", {"vocab_size"});
        Canary c;
        for (std::size_t i = 0; i < spec.prefix_len; ++i) c.prefix.push_back(static_cast<TokenId>(rng.below(spec.vocab_size)));
        for (std::size_t i = 0; i < spec.suffix_len; ++i) c.suffix.push_back(static_cast<TokenId>(rng.below(spec.vocab_size)));
        if (!prefixes.insert(c.prefix).second) continue;
        out.push_back(std::move(c));
    }
    return out;
}

// Occurrence count of every sequence in `needles` (all of equal length) within `stream`.
std::vector<std::size_t> count_all(std::span<const TokenId> stream, const std::vector<Tokens>& needles) {
    std::vector<std::size_t> counts(needles.size(), 0);
    if (needles.empty()) return counts;
    const std::size_t len = needles.front().size();
    std::unordered_multimap<TokenId, std::size_t> by_first;
    for (std::size_t i = 0; i < needles.size(); ++i) by_first.emplace(needles[i].front(), i);
    for (std::size_t pos = 0; pos + len <= stream.size(); ++pos) {
        auto [lo, hi] = by_first.equal_range(stream[pos]);
        for (auto it = lo; it != hi; ++it) {
            const Tokens& n = needles[it->second];
            if (std::equal(n.begin(), n.end(), stream.begin() + static_cast<std::ptrdiff_t>(pos))) ++counts[it->second];
        }
    }
    return counts;
}

}  // namespace

Corpus build_corpus(const CorpusSpec& spec) {
    spec.validate();
    Rng canary_rng(derive_seed(spec.seed, "canaries"));
    std::vector<Canary> all = draw_canaries(spec, canary_rng);

    Corpus corpus;
    corpus.canaries.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.n_canaries));
    corpus.controls.assign(all.begin() + static_cast<std::ptrdiff_t>(spec.n_canaries), all.end());

    std::vector<Tokens> needles;
    for (const auto& c : all) needles.push_back(c.joined());

    for (std::uint64_t attempt = 0;; ++attempt) {
        if (attempt > 16) throw ConfigError("could not build a corpus free of accidental canary occurrences");
        Rng place_rng(derive_seed(derive_seed(spec.seed, "placement"), attempt));
        Tokens background = generate_background(spec.background, spec.vocab_size, spec.background_tokens,
                                                 derive_seed(derive_seed(spec.seed, "background-path"), attempt));

        std::vector<std::size_t> order;
        order.reserve(spec.n_canaries * spec.repetitions);
        for (std::size_t c = 0; c < spec.n_canaries; ++c)
            for (std::size_t r = 0; r < spec.repetitions; ++r) order.push_back(c);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[place_rng.below(i)]);

        std::vector<std::size_t> cuts(order.size());
        for (auto& p : cuts) p = place_rng.below(background.size() + 1);
        std::sort(cuts.begin(), cuts.end());

        Tokens stream;
        stream.reserve(background.size() + order.size() * (spec.prefix_len + spec.suffix_len));
        std::size_t bg_pos = 0;
        for (std::size_t k = 0; k < order.size(); ++k) {
            stream.insert(stream.end(), background.begin() + static_cast<std::ptrdiff_t>(bg_pos),
                          background.begin() + static_cast<std::ptrdiff_t>(cuts[k]));
            bg_pos = cuts[k];
            const Tokens& n = needles[order[k]];
            stream.insert(stream.end(), n.begin(), n.end());
        }
        stream.insert(stream.end(), background.begin() + static_cast<std::ptrdiff_t>(bg_pos), background.end());

        Tokens heldout = generate_background(spec.background, spec.vocab_size, spec.heldout_tokens,
                                             derive_seed(derive_seed(spec.seed, "heldout-path"), attempt));

        const auto counts = count_all(stream, needles);
        const auto held_counts = count_all(heldout, needles);
        bool ok = true;
        for (std::size_t i = 0; i < needles.size(); ++i) {
            const std::size_t expected = i < spec.n_canaries ? spec.repetitions : 0;
            if (counts[i] != expected || held_counts[i] != 0) ok = false;
        }
        if (!ok) continue;
        corpus.stream = std::move(stream);
        corpus.heldout = std::move(heldout);
        return corpus;
    }
}

Bytes encode_tokens(std::span<const TokenId> tokens) {
    ByteWriter w;
    w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kTokenMagic), 4));
    w.u32(kTokenVersion);
    w.u64(tokens.size());
    for (TokenId t : tokens) w.u32(t);
    return std::move(w.bytes());
}

Tokens decode_tokens(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    const auto magic = r.raw(4);
    if (std::memcmp(magic.data(), kTokenMagic, 4) != 0) throw LoadError("token file: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kTokenVersion) throw LoadError("token file: unsupported version " + std::to_string(version));
    const std::uint64_t n = r.u64();
    if (r.remaining() != n * 4)
        throw LoadError("token file: header says " + std::to_string(n) + " tokens but payload has " +
                        std::to_string(r.remaining()) + " bytes");
    Tokens out(static_cast<std::size_t>(n));
    for (auto& t : out) t = r.u32();
    return out;
}

void save_tokens(const std::filesystem::path& path, std::span<const TokenId> tokens) {
    write_file(path, encode_tokens(tokens));
}

Tokens load_tokens(const std::filesystem::path& path) { return decode_tokens(read_file(path)); }

std::string canaries_to_json(const std::vector<Canary>& canaries) {
    json arr = json::array();
    for (const auto& c : canaries) arr.push_back({{"prefix", c.prefix}, {"suffix", c.suffix}});
    return arr.dump();
}

std::vector<Canary> canaries_from_json(const std::string& text) {
    std::vector<Canary> out;
    try {
        const json arr = json::parse(text);
        if (!arr.is_array()) throw LoadError("canary manifest: expected a JSON array");
        for (const auto& e : arr) {
            Canary c;
            c.prefix = e.at("prefix").get<Tokens>();
            c.suffix = e.at("suffix").get<Tokens>();
            if (c.prefix.empty() || c.suffix.empty()) throw LoadError("canary manifest: empty prefix or suffix");
            out.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw LoadError(std::string("canary manifest: ") + e.what());
    }
    return out;
}

void save_canaries(const std::filesystem::path& path, const std::vector<Canary>& canaries) {
    write_text(path, canaries_to_json(canaries));
}

std::vector<Canary> load_canaries(const std::filesystem::path& path) { return canaries_from_json(read_text(path)); }

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
    std::filesystem::create_directories(dir);
    save_tokens(dir / "tokens.bin", corpus.stream);
    save_tokens(dir / "heldout.bin", corpus.heldout);
    save_canaries(dir / "canaries.json", corpus.canaries);
    save_canaries(dir / "controls.json", corpus.controls);
}

Corpus load_corpus(const std::filesystem::path& dir) {
    Corpus c;
    c.stream = load_tokens(dir / "tokens.bin");
    c.heldout = load_tokens(dir / "heldout.bin");
    c.canaries = load_canaries(dir / "canaries.json");
    c.controls = load_canaries(dir / "controls.json");
    return c;
}

}  // namespace asc
