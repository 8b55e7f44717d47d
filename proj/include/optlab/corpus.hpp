#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "optlab/tensor.hpp"

namespace optlab {

struct Document {
    std::uint64_t id = 0;
    std::string source;
    std::string text;  // arbitrary bytes

    bool operator==(const Document&) const = default;
};

/// Runs of spaces and tabs become one space, trailing spaces and tabs are
/// dropped from every line, and three or more newlines become two.
/// Idempotent.
std::string normalize_whitespace(std::string_view text);

// ---- near-duplicate removal -------------------------------------------------

struct DedupConfig {
    double jaccard_threshold = 0.95;
    std::size_t shingle_width = 5;
    std::size_t num_hashes = 128;
    std::size_t bands = 16;
    std::size_t rows = 8;
    std::uint64_t seed = 0x5eed;
    // Verify candidates with exact shingle Jaccard instead of the estimate.
    bool exact_verification = false;

    void validate() const;
    bool operator==(const DedupConfig&) const = default;
};

/// Sorted, unique 64-bit hashes of whitespace-token w-grams.
using ShingleSet = std::vector<std::uint64_t>;
using MinHashSignature = std::vector<std::uint64_t>;

// Empty when the text has fewer than w tokens.
std::optional<ShingleSet> shingle(std::string_view text, std::size_t w);
double exact_jaccard(const ShingleSet& a, const ShingleSet& b);

/// Component i is the minimum of hash_i over the set; hash_i is a seeded
/// 64-bit mixer, shared by every document that uses the same seed.
MinHashSignature minhash(const ShingleSet& shingles, std::size_t num_hashes, std::uint64_t seed);
double signature_agreement(const MinHashSignature& a, const MinHashSignature& b);

struct Removal {
    std::uint64_t removed_id = 0;
    std::uint64_t kept_id = 0;
    double estimate = 0.0;  // similarity between the removed and kept documents
};

struct DedupReport {
    std::vector<Removal> removals;
    std::vector<std::uint64_t> short_documents;  // too few tokens; kept unexamined
    std::size_t candidate_pairs = 0;
};

struct DedupResult {
    std::vector<Document> kept;  // input order preserved
    DedupReport report;
};

/// Banded LSH proposes pairs sharing any band; pairs at or above the threshold
/// are merged into clusters and each cluster keeps its lowest id.
DedupResult dedup_corpus(std::span<const Document> docs, const DedupConfig& config);

// ---- conversation threads ---------------------------------------------------------

struct Comment {
    std::string id;
    std::optional<std::string> parent;  // empty for the root post
    std::int64_t timestamp = 0;
    std::string text;
};

struct RedditThread {
    std::vector<Comment> nodes;
};

/// Comment ids compare by length, then bytewise, which orders canonical
/// decimal and base-36 ids numerically.
bool comment_id_less(std::string_view a, std::string_view b);

/// Node indices of the root-to-leaf path with the most nodes. Ties go to the
/// leaf with the earliest timestamp, then the smallest id. Throws TreeError
/// unless there is exactly one root, ids are unique, and every parent exists
/// and is reachable from the root.
std::vector<std::size_t> longest_chain(const RedditThread& thread);

// The chain's texts in chronological order, one comment per line.
Document extract_longest_chain(const RedditThread& thread, std::uint64_t doc_id = 0);

RedditThread thread_from_json(const nlohmann::json& j);

// ---- byte-level BPE -------------------------------------------------------------

inline constexpr std::string_view kEndOfTextLiteral = "<|endoftext|>";
inline constexpr TokenId kFirstMergeId = 257;

/// Id 0 is end-of-text, byte b is id b+1, merge i produces id 257+i.
class BpeVocab {
public:
    BpeVocab();
    explicit BpeVocab(std::vector<std::pair<TokenId, TokenId>> merges);

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }
    // Byte string of a token; end-of-text maps to its literal.
    const std::string& token_bytes(TokenId id) const;
    // Merge rank of a pair, if it was learned.
    std::optional<std::size_t> rank(TokenId a, TokenId b) const;

    nlohmann::json to_json() const;
    static BpeVocab from_json(const nlohmann::json& j);

    bool operator==(const BpeVocab& other) const { return merges_ == other.merges_; }

private:
    std::vector<std::pair<TokenId, TokenId>> merges_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::uint64_t, std::size_t> ranks_;
};

/// Splits text the way byte-level GPT-2 tokenizers do before merging:
/// contractions, optional-space letter runs, digit runs, symbol runs and
/// whitespace. Bytes at or above 0x80 count as letters. Concatenating the
/// pieces gives back the input.
std::vector<std::string_view> pretokenize(std::string_view text);

/// Greedy training: repeatedly merge the most frequent adjacent pair within
/// pre-tokens, ties to the pair whose (left bytes, right bytes) is smallest,
/// until the vocabulary reaches vocab_size or no pair remains.
BpeVocab bpe_train(std::span<const std::string> corpus, std::size_t vocab_size);

/// Applies merges by rank inside each pre-token. The end-of-text literal
/// encodes to id 0.
std::vector<TokenId> bpe_encode(const BpeVocab& vocab, std::string_view text);

// Throws IndexError on an id outside the vocabulary.
std::string bpe_decode(const BpeVocab& vocab, std::span<const TokenId> ids);

// Concatenated encodings, each document followed by end-of-text.
std::vector<TokenId> encode_documents(const BpeVocab& vocab, std::span<const Document> docs);

// ---- files -----------------------------------------------------------------------

enum class DocFormat { lines, length_prefixed };

DocFormat parse_doc_format(std::string_view name);
std::string_view doc_format_name(DocFormat format);

/// Line-delimited files hold one document per line; length-prefixed files
/// hold u64 little-endian byte counts each followed by that many bytes.
std::vector<Document> read_documents(const std::filesystem::path& path, DocFormat format,
                                     std::string_view source = "", std::uint64_t first_id = 0);
void write_documents(const std::filesystem::path& path, std::span<const Document> docs, DocFormat format);

struct ManifestEntry {
    std::filesystem::path path;
    std::string source;
    double weight = 1.0;
    DocFormat format = DocFormat::lines;
};

/// JSON {"sources": [{"path", "source", "weight", "format"}]}; relative paths
/// resolve against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Each source contributes round(weight × count) documents, cycling through
/// its files in order. Ids are renumbered densely.
std::vector<Document> load_manifest_documents(std::span<const ManifestEntry> entries);

// u32 little-endian token ids.
void write_tokens(const std::filesystem::path& path, std::span<const TokenId> tokens);
std::vector<TokenId> read_tokens(const std::filesystem::path& path);

} // namespace optlab
