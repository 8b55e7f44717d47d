#include "optlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "optlab/errors.hpp"

namespace optlab {

namespace {

constexpr char kMagic[8] = {'O', 'P', 'T', 'L', 'A', 'B', 'C', 'K'};
constexpr std::size_t kHeaderBytes = 8 + 4 + 8 + 8 + 8;

enum class EntryKind : std::uint8_t { f64 = 0, u64 = 1, bytes = 2 };

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
    void raw(std::string_view s) {
        out_.insert(out_.end(), reinterpret_cast<const std::uint8_t*>(s.data()),
                    reinterpret_cast<const std::uint8_t*>(s.data()) + s.size());
    }
    std::vector<std::uint8_t>& bytes() { return out_; }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) {
            out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
    std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::span<const std::uint8_t> raw(std::size_t n) {
        need(n);
        auto s = b_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n) const {
        if (b_.size() - pos_ < n) {
            throw CheckpointError("checkpoint payload ends early");
        }
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) {
            v |= static_cast<std::uint64_t>(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        }
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

struct Entry {
    EntryKind kind;
    std::vector<std::uint64_t> dims;
    std::vector<double> f64;
    std::vector<std::uint64_t> u64;
    std::string bytes;
};

class EntryWriter {
public:
    void f64(const std::string& name, std::vector<std::uint64_t> dims, std::span<const double> values) {
        header(name, EntryKind::f64, dims);
        for (double v : values) {
            w_.f64(v);
        }
        ++count_;
    }
    void u64(const std::string& name, std::span<const std::uint64_t> values) {
        header(name, EntryKind::u64, {values.size()});
        for (auto v : values) {
            w_.u64(v);
        }
        ++count_;
    }
    void bytes(const std::string& name, std::string_view data) {
        header(name, EntryKind::bytes, {data.size()});
        w_.raw(data);
        ++count_;
    }
    std::vector<std::uint8_t> finish() {
        Writer out;
        out.u32(count_);
        out.raw(w_.bytes());
        return std::move(out.bytes());
    }

private:
    void header(const std::string& name, EntryKind kind, const std::vector<std::uint64_t>& dims) {
        w_.u16(static_cast<std::uint16_t>(name.size()));
        w_.raw(name);
        w_.u8(static_cast<std::uint8_t>(kind));
        w_.u32(static_cast<std::uint32_t>(dims.size()));
        for (auto d : dims) {
            w_.u64(d);
        }
    }
    Writer w_;
    std::uint32_t count_ = 0;
};

std::map<std::string, Entry> read_entries(std::span<const std::uint8_t> payload) {
    Reader r(payload);
    const std::uint32_t count = r.u32();
    std::map<std::string, Entry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.u16();
        auto name_bytes = r.raw(name_len);
        std::string name(name_bytes.begin(), name_bytes.end());
        Entry e;
        e.kind = static_cast<EntryKind>(r.u8());
        const auto rank = r.u32();
        std::uint64_t n = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            e.dims.push_back(r.u64());
            n *= e.dims.back();
        }
        switch (e.kind) {
        case EntryKind::f64:
            e.f64.resize(n);
            for (auto& v : e.f64) {
                v = r.f64();
            }
            break;
        case EntryKind::u64:
            e.u64.resize(n);
            for (auto& v : e.u64) {
                v = r.u64();
            }
            break;
        case EntryKind::bytes: {
            auto b = r.raw(n);
            e.bytes.assign(b.begin(), b.end());
            break;
        }
        default:
            throw CheckpointError("checkpoint entry '" + name + "' has unknown kind");
        }
        entries.emplace(std::move(name), std::move(e));
    }
    if (!r.done()) {
        throw CheckpointError("checkpoint payload has trailing bytes");
    }
    return entries;
}

const Entry& require(const std::map<std::string, Entry>& entries, const std::string& name, EntryKind kind) {
    auto it = entries.find(name);
    if (it == entries.end() || it->second.kind != kind) {
        throw CheckpointError("checkpoint is missing entry '" + name + "'");
    }
    return it->second;
}

ModelConfig parse_model_key(const std::string& key) {
    ModelConfig cfg;
    std::istringstream in(key);
    std::string item;
    while (std::getline(in, item, ';')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw CheckpointError("malformed model config entry in checkpoint");
        }
        const std::string k = item.substr(0, eq);
        const std::string v = item.substr(eq + 1);
        if (k == "n_layers") {
            cfg.n_layers = std::stoull(v);
        } else if (k == "n_heads") {
            cfg.n_heads = std::stoull(v);
        } else if (k == "d_model") {
            cfg.d_model = std::stoull(v);
        } else if (k == "vocab_size") {
            cfg.vocab_size = std::stoull(v);
        } else if (k == "max_seq_len") {
            cfg.max_seq_len = std::stoull(v);
        } else if (k == "dropout") {
            cfg.dropout = std::bit_cast<double>(std::stoull(v, nullptr, 16));
        } else if (k == "ffn_mult") {
            cfg.ffn_mult = std::stoull(v);
        } else if (k == "tie_embeddings") {
            cfg.tie_embeddings = v == "1";
        } else {
            throw CheckpointError("unknown model config key '" + k + "' in checkpoint");
        }
    }
    return cfg;
}

std::string describe_mismatch(const ModelConfig& stored, const ModelConfig& expected) {
    std::ostringstream os;
    auto diff = [&](const char* name, auto a, auto b) {
        if (a != b) {
            os << ' ' << name << " checkpoint=" << a << " run=" << b;
        }
    };
    diff("n_layers", stored.n_layers, expected.n_layers);
    diff("n_heads", stored.n_heads, expected.n_heads);
    diff("d_model", stored.d_model, expected.d_model);
    diff("vocab_size", stored.vocab_size, expected.vocab_size);
    diff("max_seq_len", stored.max_seq_len, expected.max_seq_len);
    diff("dropout", stored.dropout, expected.dropout);
    diff("ffn_mult", stored.ffn_mult, expected.ffn_mult);
    diff("tie_embeddings", stored.tie_embeddings, expected.tie_embeddings);
    return os.str();
}

} // namespace

std::string model_config_key(const ModelConfig& c) {
    std::ostringstream os;
    os << "n_layers=" << c.n_layers << ";n_heads=" << c.n_heads << ";d_model=" << c.d_model
       << ";vocab_size=" << c.vocab_size << ";max_seq_len=" << c.max_seq_len << ";dropout=" << std::hex
       << std::bit_cast<std::uint64_t>(c.dropout) << std::dec << ";ffn_mult=" << c.ffn_mult
       << ";tie_embeddings=" << (c.tie_embeddings ? 1 : 0);
    return os.str();
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    const auto& s = ckpt.state;
    EntryWriter e;
    const std::string key = model_config_key(ckpt.model);
    e.bytes("model.config", key);

    const std::uint64_t counters[] = {s.step, s.tokens_seen, s.optimizer.t, s.control_cursor,
                                      s.scaler.consecutive_good, s.scaler.config.growth_interval};
    e.u64("state.counters", counters);

    for (std::size_t i = 0; i < s.params.size(); ++i) {
        const auto& p = s.params[i];
        std::vector<std::uint64_t> dims(p.value.shape().begin(), p.value.shape().end());
        e.f64("param/" + p.name, dims, p.value.data());
        e.f64("adam.m/" + p.name, dims, s.optimizer.m.at(i));
        e.f64("adam.v/" + p.name, dims, s.optimizer.v.at(i));
    }

    const auto& sc = s.scaler.config;
    const double scaler[] = {s.scaler.scale,     sc.initial_scale, sc.growth_factor,
                             sc.backoff_factor,  sc.min_scale,     sc.healthy_threshold};
    e.f64("scaler", {6}, scaler);

    std::ostringstream rng;
    rng << s.data_rng;
    e.bytes("rng.data", rng.str());

    const double clip[] = {s.clip.max_norm};
    e.f64("clip", {1}, clip);

    std::vector<std::uint64_t> override_steps;
    std::vector<double> override_factors;
    for (const auto& o : s.overrides) {
        override_steps.push_back(o.from_step);
        override_factors.push_back(o.factor);
    }
    e.u64("overrides.step", override_steps);
    e.f64("overrides.factor", {override_factors.size()}, override_factors);

    std::vector<std::uint64_t> health_steps;
    std::vector<double> health_values;
    for (const auto& h : s.health) {
        health_steps.push_back(h.step);
        health_values.insert(health_values.end(),
                             {h.train_loss, h.val_loss, h.loss_scale, h.grad_norm, h.act_norm});
    }
    e.u64("health.step", health_steps);
    e.f64("health.values", {s.health.size(), 5}, health_values);

    std::vector<std::uint64_t> reg_steps;
    std::vector<double> reg_scales;
    for (const auto& c : s.checkpoints) {
        reg_steps.push_back(c.step);
        reg_scales.push_back(c.scale);
    }
    e.u64("registry.step", reg_steps);
    e.f64("registry.scale", {reg_scales.size()}, reg_scales);

    const auto payload = e.finish();
    Writer out;
    out.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kMagic), 8));
    out.u32(ckpt.version);
    out.u64(fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(key.data()), key.size())));
    out.u64(payload.size());
    out.u64(fnv1a64(payload));
    out.raw(payload);
    return std::move(out.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const ModelConfig* expected) {
    if (bytes.size() < kHeaderBytes) {
        throw CheckpointError("checkpoint checksum error: file truncated inside the header");
    }
    if (std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw CheckpointError("not a checkpoint file (bad magic)");
    }
    Reader header(bytes.subspan(8, kHeaderBytes - 8));
    Checkpoint ckpt;
    ckpt.version = header.u32();
    if (ckpt.version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(ckpt.version));
    }
    const std::uint64_t digest = header.u64();
    const std::uint64_t length = header.u64();
    const std::uint64_t checksum = header.u64();
    const auto payload = bytes.subspan(kHeaderBytes);
    if (payload.size() != length || fnv1a64(payload) != checksum) {
        throw CheckpointError("checkpoint checksum error: payload is truncated or corrupted");
    }

    const auto entries = read_entries(payload);
    const auto& key = require(entries, "model.config", EntryKind::bytes).bytes;
    if (fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(key.data()), key.size())) !=
        digest) {
        throw CheckpointError("checkpoint config digest does not match its config entry");
    }
    ckpt.model = parse_model_key(key);
    if (expected != nullptr && !(ckpt.model == *expected)) {
        throw ConfigError("checkpoint model config does not match the run:" +
                          describe_mismatch(ckpt.model, *expected));
    }

    auto& s = ckpt.state;
    const auto& counters = require(entries, "state.counters", EntryKind::u64).u64;
    if (counters.size() != 6) {
        throw CheckpointError("checkpoint counters entry has the wrong size");
    }
    s.step = counters[0];
    s.tokens_seen = counters[1];
    s.optimizer.t = counters[2];
    s.control_cursor = counters[3];
    s.scaler.consecutive_good = counters[4];
    s.scaler.config.growth_interval = counters[5];

    s.params = parameter_layout(ckpt.model);
    for (auto& p : s.params) {
        const auto& stored = require(entries, "param/" + p.name, EntryKind::f64);
        const std::vector<std::uint64_t> dims(p.value.shape().begin(), p.value.shape().end());
        if (stored.dims != dims) {
            throw CheckpointError("checkpoint tensor '" + p.name + "' has the wrong shape");
        }
        std::copy(stored.f64.begin(), stored.f64.end(), p.value.data().begin());
        s.optimizer.m.push_back(require(entries, "adam.m/" + p.name, EntryKind::f64).f64);
        s.optimizer.v.push_back(require(entries, "adam.v/" + p.name, EntryKind::f64).f64);
        if (s.optimizer.m.back().size() != p.value.size() || s.optimizer.v.back().size() != p.value.size()) {
            throw CheckpointError("checkpoint optimizer moments for '" + p.name + "' have the wrong size");
        }
    }

    const auto& scaler = require(entries, "scaler", EntryKind::f64).f64;
    if (scaler.size() != 6) {
        throw CheckpointError("checkpoint scaler entry has the wrong size");
    }
    s.scaler.scale = scaler[0];
    s.scaler.config.initial_scale = scaler[1];
    s.scaler.config.growth_factor = scaler[2];
    s.scaler.config.backoff_factor = scaler[3];
    s.scaler.config.min_scale = scaler[4];
    s.scaler.config.healthy_threshold = scaler[5];

    std::istringstream rng(require(entries, "rng.data", EntryKind::bytes).bytes);
    rng >> s.data_rng;
    if (!rng) {
        throw CheckpointError("checkpoint RNG state is unreadable");
    }

    s.clip.max_norm = require(entries, "clip", EntryKind::f64).f64.at(0);

    const auto& ov_steps = require(entries, "overrides.step", EntryKind::u64).u64;
    const auto& ov_factors = require(entries, "overrides.factor", EntryKind::f64).f64;
    if (ov_steps.size() != ov_factors.size()) {
        throw CheckpointError("checkpoint override entries disagree in length");
    }
    for (std::size_t i = 0; i < ov_steps.size(); ++i) {
        s.overrides.push_back({ov_steps[i], ov_factors[i]});
    }

    const auto& h_steps = require(entries, "health.step", EntryKind::u64).u64;
    const auto& h_values = require(entries, "health.values", EntryKind::f64).f64;
    if (h_values.size() != h_steps.size() * 5) {
        throw CheckpointError("checkpoint health entries disagree in length");
    }
    for (std::size_t i = 0; i < h_steps.size(); ++i) {
        const double* v = h_values.data() + i * 5;
        s.health.push_back({h_steps[i], v[0], v[1], v[2], v[3], v[4]});
    }

    const auto& reg_steps = require(entries, "registry.step", EntryKind::u64).u64;
    const auto& reg_scales = require(entries, "registry.scale", EntryKind::f64).f64;
    if (reg_steps.size() != reg_scales.size()) {
        throw CheckpointError("checkpoint registry entries disagree in length");
    }
    for (std::size_t i = 0; i < reg_steps.size(); ++i) {
        s.checkpoints.push_back({reg_steps[i], reg_scales[i]});
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode_checkpoint(ckpt);
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw CheckpointError("cannot write checkpoint " + tmp.string());
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw CheckpointError("short write on checkpoint " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot read checkpoint " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
    const auto bytes = read_file(path);
    return decode_checkpoint(bytes, expected);
}

std::uint32_t peek_checkpoint_version(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw CheckpointError("not a checkpoint file: " + path.string());
    }
    Reader r(std::span<const std::uint8_t>(bytes).subspan(8, 4));
    return r.u32();
}

} // namespace optlab
