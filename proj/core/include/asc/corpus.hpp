#pragma once

// Synthetic training corpora with planted canaries.
//
// Token file layout: "ASCT" | u32 version (=1) | u64 token count | u32 token ids (little-endian).
// Canary manifests are JSON arrays of {"prefix": [ids], "suffix": [ids]}.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "asc/io.hpp"
#include "asc/model.hpp"

namespace asc {

struct Canary {
    Tokens prefix;
    Tokens suffix;

    Tokens joined() const;
    friend bool operator==(const Canary&, const Canary&) = default;
};

enum class BackgroundKind { markov_chain, uniform_random };

struct BackgroundSpec {
    BackgroundKind kind = BackgroundKind::markov_chain;
    std::size_t order = 2;
    // Successor-set size per token for the Markov chain.
    std::size_t successors = 8;
    // Probability mass placed on the context-selected successor (the rest is spread uniformly).
    double favored_mass = 0.6;
    // Per-position probability of starting an in-context repeat of an earlier span.
    double copy_prob = 0.02;
    std::size_t copy_min = 4;
    std::size_t copy_max = 12;
    std::size_t copy_lookback = 48;
    // Per-position probability of emitting a span of uniform random tokens followed directly by
    // its repeat (length in [copy_min, copy_max]). Teaches copying of arbitrary token pairs.
    double repeat_prob = 0.0;
    std::uint64_t seed = 1;
};

struct CorpusSpec {
    BackgroundSpec background;
    std::size_t background_tokens = 1'000'000;
    std::size_t heldout_tokens = 20'000;
    std::size_t n_canaries = 64;
    // Negative controls: generated exactly like canaries but never placed in the stream.
    std::size_t n_controls = 64;
    std::size_t prefix_len = 32;
    std::size_t suffix_len = 32;
    std::size_t repetitions = 200;
    std::size_t vocab_size = 512;
    std::uint64_t seed = 1;

    void validate() const;

    // Presets for the canary lengths: (32, 32) and (150, 50).
    static CorpusSpec pythia_style();
    static CorpusSpec neo_style();
};

struct Corpus {
    Tokens stream;
    Tokens heldout;
    std::vector<Canary> canaries;
    std::vector<Canary> controls;
};

// Deterministic for a given spec. Throws ConfigError when the vocabulary cannot supply
// enough distinct canaries.
Corpus build_corpus(const CorpusSpec& spec);

// A fresh background sample path from the same chain (different seed stream).
Tokens generate_background(const BackgroundSpec& bg, std::size_t vocab_size, std::size_t n_tokens,
                           std::uint64_t path_seed);

// Number of start positions where `needle` occurs in `haystack` (overlaps counted); brute force.
std::size_t count_occurrences(std::span<const TokenId> haystack, std::span<const TokenId> needle);

Bytes encode_tokens(std::span<const TokenId> tokens);
Tokens decode_tokens(std::span<const std::uint8_t> bytes);
void save_tokens(const std::filesystem::path& path, std::span<const TokenId> tokens);
Tokens load_tokens(const std::filesystem::path& path);

std::string canaries_to_json(const std::vector<Canary>& canaries);
std::vector<Canary> canaries_from_json(const std::string& text);
void save_canaries(const std::filesystem::path& path, const std::vector<Canary>& canaries);
std::vector<Canary> load_canaries(const std::filesystem::path& path);

// Directory layout written by save_corpus: tokens.bin, heldout.bin, canaries.json, controls.json.
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace asc
