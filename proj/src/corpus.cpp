#include "optlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>

#include "optlab/errors.hpp"
#include "optlab/random.hpp"

namespace optlab {

namespace {

bool is_blank(char c) { return c == ' ' || c == '\t'; }

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

std::vector<std::string_view> split_whitespace(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        const std::size_t start = i;
        while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        if (i > start) {
            out.push_back(text.substr(start, i - start));
        }
    }
    return out;
}

class DisjointSets {
public:
    explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) {
            parent_[std::max(a, b)] = std::min(a, b);
        }
    }

private:
    std::vector<std::size_t> parent_;
};

std::uint64_t pair_key(TokenId a, TokenId b) { return (static_cast<std::uint64_t>(a) << 32) | b; }

} // namespace

std::string normalize_whitespace(std::string_view text) {
    std::string lines;
    lines.reserve(text.size());
    std::size_t line_start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c == '\n') {
            while (lines.size() > line_start && is_blank(lines.back())) {
                lines.pop_back();
            }
            lines.push_back('\n');
            line_start = lines.size();
        } else if (is_blank(c)) {
            if (lines.size() == line_start || lines.back() != ' ') {
                lines.push_back(' ');
            }
        } else {
            lines.push_back(c);
        }
    }
    while (lines.size() > line_start && is_blank(lines.back())) {
        lines.pop_back();
    }

    std::string out;
    out.reserve(lines.size());
    std::size_t run = 0;
    for (char c : lines) {
        if (c == '\n') {
            if (++run <= 2) {
                out.push_back(c);
            }
        } else {
            run = 0;
            out.push_back(c);
        }
    }
    return out;
}

// ---- near-duplicate removal ---------------------------------------------------

void DedupConfig::validate() const {
    if (!(jaccard_threshold > 0.0 && jaccard_threshold <= 1.0)) {
        throw ConfigError("dedup: jaccard_threshold must lie in (0, 1]");
    }
    if (shingle_width < 1) {
        throw ConfigError("dedup: shingle_width must be at least 1");
    }
    if (num_hashes == 0 || bands * rows != num_hashes) {
        throw ConfigError("dedup: bands × rows must equal num_hashes");
    }
}

std::optional<ShingleSet> shingle(std::string_view text, std::size_t w) {
    if (w == 0) {
        throw ConfigError("shingle width must be at least 1");
    }
    const auto tokens = split_whitespace(text);
    if (tokens.size() < w) {
        return std::nullopt;
    }
    ShingleSet out;
    out.reserve(tokens.size() - w + 1);
    for (std::size_t i = 0; i + w <= tokens.size(); ++i) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (std::size_t j = i; j < i + w; ++j) {
            h = mix64(h ^ tokens[j].size());
            for (unsigned char c : tokens[j]) {
                h ^= c;
                h *= 0x100000001b3ULL;
            }
        }
        out.push_back(mix64(h));
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

double exact_jaccard(const ShingleSet& a, const ShingleSet& b) {
    if (a.empty() && b.empty()) {
        return 1.0;
    }
    std::size_t inter = 0;
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] == b[j]) {
            ++inter;
            ++i;
            ++j;
        } else if (a[i] < b[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

MinHashSignature minhash(const ShingleSet& shingles, std::size_t num_hashes, std::uint64_t seed) {
    MinHashSignature sig(num_hashes, ~std::uint64_t{0});
    for (std::size_t i = 0; i < num_hashes; ++i) {
        const std::uint64_t s = derive_seed({seed, i});
        std::uint64_t best = ~std::uint64_t{0};
        for (auto x : shingles) {
            best = std::min(best, mix64(x ^ s));
        }
        sig[i] = best;
    }
    return sig;
}

double signature_agreement(const MinHashSignature& a, const MinHashSignature& b) {
    if (a.size() != b.size() || a.empty()) {
        throw DimensionError("signatures must have equal nonzero length");
    }
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        same += a[i] == b[i] ? 1 : 0;
    }
    return static_cast<double>(same) / static_cast<double>(a.size());
}

DedupResult dedup_corpus(std::span<const Document> docs, const DedupConfig& config) {
    config.validate();
    const std::size_t n = docs.size();
    std::vector<std::optional<ShingleSet>> sets(n);
    std::vector<MinHashSignature> sigs(n);
    DedupResult result;
    for (std::size_t i = 0; i < n; ++i) {
        sets[i] = shingle(docs[i].text, config.shingle_width);
        if (sets[i]) {
            sigs[i] = minhash(*sets[i], config.num_hashes, config.seed);
        } else {
            result.report.short_documents.push_back(docs[i].id);
        }
    }

    std::set<std::pair<std::size_t, std::size_t>> candidates;
    for (std::size_t band = 0; band < config.bands; ++band) {
        std::map<std::uint64_t, std::vector<std::size_t>> buckets;
        for (std::size_t i = 0; i < n; ++i) {
            if (!sets[i]) {
                continue;
            }
            std::uint64_t h = mix64(band + 1);
            for (std::size_t r = 0; r < config.rows; ++r) {
                h = mix64(h ^ sigs[i][band * config.rows + r]);
            }
            buckets[h].push_back(i);
        }
        for (const auto& [key, members] : buckets) {
            for (std::size_t a = 0; a < members.size(); ++a) {
                for (std::size_t b = a + 1; b < members.size(); ++b) {
                    candidates.emplace(members[a], members[b]);
                }
            }
        }
    }
    result.report.candidate_pairs = candidates.size();

    auto similarity = [&](std::size_t a, std::size_t b) {
        return config.exact_verification ? exact_jaccard(*sets[a], *sets[b]) : signature_agreement(sigs[a], sigs[b]);
    };
    DisjointSets clusters(n);
    for (const auto& [a, b] : candidates) {
        if (similarity(a, b) >= config.jaccard_threshold) {
            clusters.unite(a, b);
        }
    }

    // Keeper of each cluster: the member with the lowest document id.
    std::vector<std::size_t> keeper(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& k = keeper[clusters.find(i)];
        if (k == n || docs[i].id < docs[k].id) {
            k = i;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = keeper[clusters.find(i)];
        if (k == i) {
            result.kept.push_back(docs[i]);
        } else {
            result.report.removals.push_back({docs[i].id, docs[k].id, similarity(i, k)});
        }
    }
    return result;
}

// ---- conversation threads -------------------------------------------------------------

bool comment_id_less(std::string_view a, std::string_view b) {
    return a.size() != b.size() ? a.size() < b.size() : a < b;
}

std::vector<std::size_t> longest_chain(const RedditThread& thread) {
    const auto& nodes = thread.nodes;
    if (nodes.empty()) {
        throw TreeError("thread has no comments");
    }
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (!index.emplace(nodes[i].id, i).second) {
            throw TreeError("duplicate comment id '" + nodes[i].id + "'");
        }
    }
    std::vector<std::size_t> parent(nodes.size(), nodes.size());
    std::vector<std::vector<std::size_t>> children(nodes.size());
    std::optional<std::size_t> root;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (!nodes[i].parent) {
            if (root) {
                throw TreeError("thread has more than one root");
            }
            root = i;
            continue;
        }
        const auto it = index.find(*nodes[i].parent);
        if (it == index.end()) {
            throw TreeError("comment '" + nodes[i].id + "' names missing parent '" + *nodes[i].parent + "'");
        }
        parent[i] = it->second;
        children[it->second].push_back(i);
    }
    if (!root) {
        throw TreeError("thread has no root");
    }

    std::vector<std::size_t> depth(nodes.size(), 0);
    std::vector<std::size_t> stack = {*root};
    depth[*root] = 1;
    std::size_t visited = 0;
    std::optional<std::size_t> best;
    while (!stack.empty()) {
        const std::size_t u = stack.back();
        stack.pop_back();
        ++visited;
        if (children[u].empty()) {
            const auto& cand = nodes[u];
            if (!best || depth[u] > depth[*best] ||
                (depth[u] == depth[*best] &&
                 (cand.timestamp < nodes[*best].timestamp ||
                  (cand.timestamp == nodes[*best].timestamp && comment_id_less(cand.id, nodes[*best].id))))) {
                best = u;
            }
        }
        for (std::size_t c : children[u]) {
            depth[c] = depth[u] + 1;
            stack.push_back(c);
        }
    }
    if (visited != nodes.size()) {
        throw TreeError("parent links contain a cycle unreachable from the root");
    }

    std::vector<std::size_t> path;
    for (std::size_t u = *best; u != nodes.size(); u = parent[u]) {
        path.push_back(u);
    }
    std::reverse(path.begin(), path.end());
    return path;
}

Document extract_longest_chain(const RedditThread& thread, std::uint64_t doc_id) {
    auto path = longest_chain(thread);
    std::stable_sort(path.begin(), path.end(), [&](std::size_t a, std::size_t b) {
        return thread.nodes[a].timestamp < thread.nodes[b].timestamp;
    });
    Document doc;
    doc.id = doc_id;
    doc.source = "reddit";
    for (std::size_t i = 0; i < path.size(); ++i) {
        if (i > 0) {
            doc.text.push_back('\n');
        }
        doc.text += thread.nodes[path[i]].text;
    }
    return doc;
}

RedditThread thread_from_json(const nlohmann::json& j) {
    const auto& list = j.is_array() ? j : j.at("comments");
    RedditThread t;
    for (const auto& c : list) {
        Comment node;
        auto id_of = [](const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
        node.id = id_of(c.at("id"));
        if (c.contains("parent") && !c.at("parent").is_null()) {
            node.parent = id_of(c.at("parent"));
        }
        node.timestamp = c.value("timestamp", std::int64_t{0});
        node.text = c.value("text", std::string());
        t.nodes.push_back(std::move(node));
    }
    return t;
}

// ---- byte-level BPE ------------------------------------------------------------------------

BpeVocab::BpeVocab() : BpeVocab(std::vector<std::pair<TokenId, TokenId>>{}) {}

BpeVocab::BpeVocab(std::vector<std::pair<TokenId, TokenId>> merges) : merges_(std::move(merges)) {
    tokens_.reserve(kFirstMergeId + merges_.size());
    tokens_.emplace_back(kEndOfTextLiteral);
    for (int b = 0; b < 256; ++b) {
        tokens_.emplace_back(1, static_cast<char>(b));
    }
    for (std::size_t i = 0; i < merges_.size(); ++i) {
        const auto [a, b] = merges_[i];
        if (a == kEndOfText || b == kEndOfText || a >= tokens_.size() || b >= tokens_.size()) {
            throw ConfigError("merge " + std::to_string(i) + " refers to an id not yet defined");
        }
        tokens_.push_back(tokens_[a] + tokens_[b]);
        ranks_.emplace(pair_key(a, b), i);
    }
}

const std::string& BpeVocab::token_bytes(TokenId id) const {
    if (id >= tokens_.size()) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(tokens_.size()));
    }
    return tokens_[id];
}

std::optional<std::size_t> BpeVocab::rank(TokenId a, TokenId b) const {
    const auto it = ranks_.find(pair_key(a, b));
    if (it == ranks_.end()) {
        return std::nullopt;
    }
    return it->second;
}

nlohmann::json BpeVocab::to_json() const {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : merges_) {
        merges.push_back({a, b});
    }
    return {{"format", "byte-bpe"}, {"end_of_text", kEndOfText}, {"vocab_size", size()}, {"merges", merges}};
}

BpeVocab BpeVocab::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "byte-bpe") {
        throw ConfigError("vocabulary file is not a byte-bpe vocabulary");
    }
    std::vector<std::pair<TokenId, TokenId>> merges;
    for (const auto& m : j.at("merges")) {
        merges.emplace_back(m.at(0).get<TokenId>(), m.at(1).get<TokenId>());
    }
    return BpeVocab(std::move(merges));
}

std::vector<std::string_view> pretokenize(std::string_view text) {
    enum class Cls { letter, digit, space, other };
    auto cls = [](unsigned char c) {
        if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80) {
            return Cls::letter;
        }
        if (c >= '0' && c <= '9') {
            return Cls::digit;
        }
        return is_space(c) ? Cls::space : Cls::other;
    };
    auto at = [&](std::size_t i) { return static_cast<unsigned char>(text[i]); };
    static constexpr std::string_view kContractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};

    std::vector<std::string_view> out;
    const std::size_t n = text.size();
    std::size_t i = 0;
    while (i < n) {
        if (text[i] == '\'') {
            bool matched = false;
            for (auto c : kContractions) {
                if (text.substr(i, c.size()) == c) {
                    out.push_back(text.substr(i, c.size()));
                    i += c.size();
                    matched = true;
                    break;
                }
            }
            if (matched) {
                continue;
            }
        }
        std::size_t start = i;
        if (text[i] == ' ' && i + 1 < n && cls(at(i + 1)) != Cls::space) {
            ++i;
        }
        const Cls c = cls(at(i));
        if (c != Cls::space) {
            while (i < n && cls(at(i)) == c) {
                ++i;
            }
            out.push_back(text.substr(start, i - start));
            continue;
        }
        start = i;
        while (i < n && cls(at(i)) == Cls::space) {
            ++i;
        }
        if (i < n && i - start > 1) {
            --i;  // the last whitespace byte starts the next piece
        }
        out.push_back(text.substr(start, i - start));
    }
    return out;
}

BpeVocab bpe_train(std::span<const std::string> corpus, std::size_t vocab_size) {
    if (vocab_size <= 256) {
        throw ConfigError("bpe vocab_size must exceed 256");
    }
    std::map<std::string_view, std::int64_t> word_counts;
    for (const auto& doc : corpus) {
        for (auto piece : pretokenize(doc)) {
            ++word_counts[piece];
        }
    }
    struct Word {
        std::vector<TokenId> symbols;
        std::int64_t count;
    };
    std::vector<Word> words;
    words.reserve(word_counts.size());
    for (const auto& [text, count] : word_counts) {
        Word w{{}, count};
        for (unsigned char c : text) {
            w.symbols.push_back(static_cast<TokenId>(c) + 1);
        }
        words.push_back(std::move(w));
    }

    std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
    std::unordered_map<std::uint64_t, std::set<std::size_t>> where;
    auto account = [&](std::size_t wi, std::int64_t sign) {
        const auto& s = words[wi].symbols;
        for (std::size_t k = 0; k + 1 < s.size(); ++k) {
            const auto key = pair_key(s[k], s[k + 1]);
            pair_counts[key] += sign * words[wi].count;
            if (sign > 0) {
                where[key].insert(wi);
            }
        }
    };
    for (std::size_t wi = 0; wi < words.size(); ++wi) {
        account(wi, +1);
    }

    std::vector<std::string> bytes;  // token id → byte string, grown as merges land
    bytes.emplace_back(kEndOfTextLiteral);
    for (int b = 0; b < 256; ++b) {
        bytes.emplace_back(1, static_cast<char>(b));
    }
    std::vector<std::pair<TokenId, TokenId>> merges;
    while (bytes.size() < vocab_size) {
        std::optional<std::uint64_t> best;
        std::int64_t best_count = 0;
        for (const auto& [key, count] : pair_counts) {
            if (count <= 0) {
                continue;
            }
            if (!best || count > best_count) {
                best = key;
                best_count = count;
                continue;
            }
            if (count == best_count) {
                const auto& la = bytes[key >> 32];
                const auto& ra = bytes[key & 0xffffffffu];
                const auto& lb = bytes[*best >> 32];
                const auto& rb = bytes[*best & 0xffffffffu];
                if (la < lb || (la == lb && ra < rb)) {
                    best = key;
                }
            }
        }
        if (!best) {
            break;
        }
        const auto a = static_cast<TokenId>(*best >> 32);
        const auto b = static_cast<TokenId>(*best & 0xffffffffu);
        const auto merged = static_cast<TokenId>(bytes.size());
        merges.emplace_back(a, b);
        bytes.push_back(bytes[a] + bytes[b]);

        const auto affected = where[*best];
        for (std::size_t wi : affected) {
            account(wi, -1);
            auto& s = words[wi].symbols;
            std::vector<TokenId> next;
            next.reserve(s.size());
            for (std::size_t k = 0; k < s.size(); ++k) {
                if (k + 1 < s.size() && s[k] == a && s[k + 1] == b) {
                    next.push_back(merged);
                    ++k;
                } else {
                    next.push_back(s[k]);
                }
            }
            s = std::move(next);
            account(wi, +1);
        }
        pair_counts.erase(*best);
        where.erase(*best);
    }
    return BpeVocab(std::move(merges));
}

namespace {

void encode_piece(const BpeVocab& vocab, std::string_view piece, std::vector<TokenId>& out) {
    std::vector<TokenId> s;
    s.reserve(piece.size());
    for (unsigned char c : piece) {
        s.push_back(static_cast<TokenId>(c) + 1);
    }
    while (s.size() > 1) {
        std::optional<std::size_t> best_rank;
        for (std::size_t k = 0; k + 1 < s.size(); ++k) {
            const auto r = vocab.rank(s[k], s[k + 1]);
            if (r && (!best_rank || *r < *best_rank)) {
                best_rank = r;
            }
        }
        if (!best_rank) {
            break;
        }
        const auto [a, b] = vocab.merges()[*best_rank];
        const auto merged = static_cast<TokenId>(kFirstMergeId + *best_rank);
        std::vector<TokenId> next;
        next.reserve(s.size());
        for (std::size_t k = 0; k < s.size(); ++k) {
            if (k + 1 < s.size() && s[k] == a && s[k + 1] == b) {
                next.push_back(merged);
                ++k;
            } else {
                next.push_back(s[k]);
            }
        }
        s = std::move(next);
    }
    out.insert(out.end(), s.begin(), s.end());
}

} // namespace

std::vector<TokenId> bpe_encode(const BpeVocab& vocab, std::string_view text) {
    std::vector<TokenId> out;
    out.reserve(text.size());
    while (!text.empty()) {
        const auto pos = text.find(kEndOfTextLiteral);
        const auto segment = text.substr(0, pos);
        for (auto piece : pretokenize(segment)) {
            encode_piece(vocab, piece, out);
        }
        if (pos == std::string_view::npos) {
            break;
        }
        out.push_back(kEndOfText);
        text.remove_prefix(pos + kEndOfTextLiteral.size());
    }
    return out;
}

std::string bpe_decode(const BpeVocab& vocab, std::span<const TokenId> ids) {
    std::string out;
    for (TokenId id : ids) {
        out += vocab.token_bytes(id);
    }
    return out;
}

std::vector<TokenId> encode_documents(const BpeVocab& vocab, std::span<const Document> docs) {
    std::vector<TokenId> out;
    for (const auto& d : docs) {
        const auto ids = bpe_encode(vocab, d.text);
        out.insert(out.end(), ids.begin(), ids.end());
        out.push_back(kEndOfText);
    }
    return out;
}

// ---- files -----------------------------------------------------------------------------

DocFormat parse_doc_format(std::string_view name) {
    if (name == "lines") {
        return DocFormat::lines;
    }
    if (name == "length-prefixed") {
        return DocFormat::length_prefixed;
    }
    throw ConfigError("unknown document format '" + std::string(name) + "' (expected lines or length-prefixed)");
}

std::string_view doc_format_name(DocFormat format) {
    return format == DocFormat::lines ? "lines" : "length-prefixed";
}

std::vector<Document> read_documents(const std::filesystem::path& path, DocFormat format, std::string_view source,
                                     std::uint64_t first_id) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot read documents from " + path.string());
    }
    const std::string data{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    std::vector<Document> docs;
    auto add = [&](std::string text) {
        docs.push_back({first_id + docs.size(), std::string(source), std::move(text)});
    };
    if (format == DocFormat::lines) {
        std::size_t start = 0;
        while (start < data.size()) {
            auto nl = data.find('\n', start);
            if (nl == std::string::npos) {
                nl = data.size();
            }
            if (nl > start) {
                add(data.substr(start, nl - start));
            }
            start = nl + 1;
        }
        return docs;
    }
    std::size_t pos = 0;
    while (pos < data.size()) {
        if (data.size() - pos < 8) {
            throw InputError(path.string() + ": truncated length prefix at byte " + std::to_string(pos));
        }
        std::uint64_t len = 0;
        for (int k = 0; k < 8; ++k) {
            len |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos + static_cast<std::size_t>(k)]))
                   << (8 * k);
        }
        pos += 8;
        if (data.size() - pos < len) {
            throw InputError(path.string() + ": document at byte " + std::to_string(pos - 8) + " is truncated");
        }
        add(data.substr(pos, len));
        pos += len;
    }
    return docs;
}

void write_documents(const std::filesystem::path& path, std::span<const Document> docs, DocFormat format) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw InputError("cannot write documents to " + path.string());
    }
    for (const auto& d : docs) {
        if (format == DocFormat::lines) {
            if (d.text.find('\n') != std::string::npos) {
                throw InputError("document " + std::to_string(d.id) +
                                 " contains a newline; use the length-prefixed format");
            }
            out << d.text << '\n';
        } else {
            char len[8];
            for (int k = 0; k < 8; ++k) {
                len[k] = static_cast<char>(static_cast<std::uint64_t>(d.text.size()) >> (8 * k));
            }
            out.write(len, 8);
            out.write(d.text.data(), static_cast<std::streamsize>(d.text.size()));
        }
    }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot read manifest " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    std::vector<ManifestEntry> entries;
    for (const auto& s : j.at("sources")) {
        ManifestEntry e;
        e.path = s.at("path").get<std::string>();
        if (e.path.is_relative()) {
            e.path = path.parent_path() / e.path;
        }
        e.source = s.value("source", e.path.stem().string());
        e.weight = s.value("weight", 1.0);
        e.format = parse_doc_format(s.value("format", std::string("lines")));
        if (!(e.weight >= 0.0)) {
            throw ConfigError(path.string() + ": source '" + e.source + "' has a negative weight");
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

std::vector<Document> load_manifest_documents(std::span<const ManifestEntry> entries) {
    std::vector<Document> out;
    for (const auto& e : entries) {
        const auto docs = read_documents(e.path, e.format, e.source);
        if (docs.empty()) {
            continue;
        }
        const auto take = static_cast<std::size_t>(std::llround(e.weight * static_cast<double>(docs.size())));
        for (std::size_t i = 0; i < take; ++i) {
            Document d = docs[i % docs.size()];
            d.id = out.size();
            out.push_back(std::move(d));
        }
    }
    return out;
}

void write_tokens(const std::filesystem::path& path, std::span<const TokenId> tokens) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw InputError("cannot write tokens to " + path.string());
    }
    for (TokenId t : tokens) {
        const char b[4] = {static_cast<char>(t), static_cast<char>(t >> 8), static_cast<char>(t >> 16),
                           static_cast<char>(t >> 24)};
        out.write(b, 4);
    }
}

std::vector<TokenId> read_tokens(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot read tokens from " + path.string());
    }
    const std::string data{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (data.size() % 4 != 0) {
        throw InputError(path.string() + ": token file length is not a multiple of 4");
    }
    std::vector<TokenId> out(data.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        TokenId t = 0;
        for (int k = 0; k < 4; ++k) {
            t |= static_cast<TokenId>(static_cast<unsigned char>(data[i * 4 + static_cast<std::size_t>(k)])) << (8 * k);
        }
        out[i] = t;
    }
    return out;
}

} // namespace optlab
