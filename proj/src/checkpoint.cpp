#include "flowmo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "flowmo/config.hpp"

namespace flowmo::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'F', 'L', 'O', 'W', 'M', 'O', 'C', 'K'};
enum : std::uint8_t { kF64 = 0, kU8 = 1 };

class Writer {
public:
    template <class T>
    void pod(const T& v) {
        bytes(&v, sizeof v);
    }
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void tensor(const std::string& name, const Tensor& t) {
        pod(static_cast<std::uint16_t>(name.size()));
        bytes(name.data(), name.size());
        pod(kF64);
        pod(static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) pod(static_cast<std::uint64_t>(d));
        bytes(t.data(), t.numel() * sizeof(double));
    }
    void blob(const std::string& name, const std::string& data) {
        pod(static_cast<std::uint16_t>(name.size()));
        bytes(name.data(), name.size());
        pod(kU8);
        pod(std::uint8_t{1});
        pod(static_cast<std::uint64_t>(data.size()));
        bytes(data.data(), data.size());
    }
    const std::vector<char>& buffer() const { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(const std::vector<char>& buf, std::size_t end) : buf_(buf), end_(end) {}

    template <class T>
    T pod() {
        T v;
        bytes(&v, sizeof v);
        return v;
    }
    void bytes(void* p, std::size_t n) {
        if (n > end_ - pos_) throw CorruptCheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    bool done() const { return pos_ == end_; }

private:
    const std::vector<char>& buf_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

struct Entry {
    std::string name;
    std::uint8_t dtype = kF64;
    Tensor tensor;
    std::string blob;
};

Entry read_entry(Reader& r) {
    Entry e;
    e.name.resize(r.pod<std::uint16_t>());
    r.bytes(e.name.data(), e.name.size());
    e.dtype = r.pod<std::uint8_t>();
    const auto rank = r.pod<std::uint8_t>();
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
        const auto v = r.pod<std::uint64_t>();
        if (v > (std::uint64_t{1} << 40)) throw CorruptCheckpointError("implausible dimension in tensor '" + e.name + "'");
        d = static_cast<std::size_t>(v);
        numel *= v;
    }
    if (e.dtype == kF64) {
        std::vector<double> data(numel);
        r.bytes(data.data(), numel * sizeof(double));
        e.tensor = Tensor(std::move(shape), std::move(data));
    } else if (e.dtype == kU8) {
        e.blob.resize(numel);
        r.bytes(e.blob.data(), numel);
    } else {
        throw CorruptCheckpointError("unknown dtype " + std::to_string(e.dtype) + " for tensor '" + e.name + "'");
    }
    return e;
}

}  // namespace

std::string stage_name(StageTag tag) {
    switch (tag) {
        case StageTag::Stage1A: return "1A";
        case StageTag::Stage1B: return "1B";
        case StageTag::Stage2: return "2";
    }
    return "?";
}

void CheckpointState::validate() const {
    const std::size_t n = names.size();
    if (params.size() != n || ema.size() != n || adam.m.size() != n || adam.v.size() != n)
        throw CheckpointError("checkpoint state: parameter, EMA and moment lists differ in length");
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = params[i].shape();
        if (ema[i].shape() != s || adam.m[i].shape() != s || adam.v[i].shape() != s)
            throw CheckpointError("checkpoint state: tensors for '" + names[i] + "' are not shape-congruent");
    }
}

void save_checkpoint(const CheckpointState& state, const std::filesystem::path& path) {
    state.validate();
    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.pod(state.version);
    w.pod(state.fingerprint);
    w.pod(static_cast<std::uint8_t>(state.stage));
    w.pod(state.step);
    const std::size_t count = 4 * state.names.size() + 2;
    w.pod(static_cast<std::uint32_t>(count));
    w.blob("meta/config", state.config_text);
    Tensor adam_step(Shape{1}, static_cast<double>(state.adam.step));
    w.tensor("meta/adam_step", adam_step);
    for (std::size_t i = 0; i < state.names.size(); ++i) w.tensor("param/" + state.names[i], state.params[i]);
    for (std::size_t i = 0; i < state.names.size(); ++i) w.tensor("ema/" + state.names[i], state.ema[i]);
    for (std::size_t i = 0; i < state.names.size(); ++i) w.tensor("adam_m/" + state.names[i], state.adam.m[i]);
    for (std::size_t i = 0; i < state.names.size(); ++i) w.tensor("adam_v/" + state.names[i], state.adam.v[i]);
    const std::uint64_t checksum = fnv1a64(w.buffer().data(), w.buffer().size());
    w.pod(checksum);

    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError("cannot open " + tmp + " for writing");
        os.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
        if (!os) throw CheckpointError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

CheckpointState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof kMagic + 8 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
        throw CorruptCheckpointError(path.string() + " is not a checkpoint file");

    Reader header(buf, buf.size());
    char magic[8];
    header.bytes(magic, sizeof magic);
    CheckpointState s;
    s.version = header.pod<std::uint32_t>();
    if (s.version != kCheckpointVersion)
        throw CheckpointVersionError("checkpoint version " + std::to_string(s.version) + " is not supported (expected " +
                                     std::to_string(kCheckpointVersion) + ")");

    const std::size_t body = buf.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, buf.data() + body, sizeof stored);
    if (stored != fnv1a64(buf.data(), body))
        throw CorruptCheckpointError(path.string() + ": checksum mismatch (truncated or corrupted)");

    Reader r(buf, body);
    r.bytes(magic, sizeof magic);
    r.pod<std::uint32_t>();
    s.fingerprint = r.pod<std::uint64_t>();
    const auto stage = r.pod<std::uint8_t>();
    if (stage < 1 || stage > 3) throw CorruptCheckpointError("unknown stage tag " + std::to_string(stage));
    s.stage = static_cast<StageTag>(stage);
    s.step = r.pod<std::uint64_t>();
    const auto count = r.pod<std::uint32_t>();

    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e = read_entry(r);
        auto strip = [&](const char* prefix) { return e.name.substr(std::strlen(prefix)); };
        if (e.name == "meta/config") {
            s.config_text = e.blob;
        } else if (e.name == "meta/adam_step") {
            s.adam.step = static_cast<std::size_t>(e.tensor.item());
        } else if (e.name.rfind("param/", 0) == 0) {
            s.names.push_back(strip("param/"));
            s.params.push_back(std::move(e.tensor));
        } else if (e.name.rfind("ema/", 0) == 0) {
            s.ema.push_back(std::move(e.tensor));
        } else if (e.name.rfind("adam_m/", 0) == 0) {
            s.adam.m.push_back(std::move(e.tensor));
        } else if (e.name.rfind("adam_v/", 0) == 0) {
            s.adam.v.push_back(std::move(e.tensor));
        } else {
            throw CorruptCheckpointError("unexpected entry '" + e.name + "'");
        }
    }
    if (!r.done()) throw CorruptCheckpointError("trailing bytes after the tensor table");
    try {
        s.validate();
    } catch (const CheckpointError& e) {
        throw CorruptCheckpointError(e.what());
    }
    return s;
}

void require_fingerprint(const CheckpointState& state, std::uint64_t expected) {
    if (state.fingerprint != expected) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "checkpoint fingerprint %016llx does not match config fingerprint %016llx",
                      static_cast<unsigned long long>(state.fingerprint), static_cast<unsigned long long>(expected));
        throw FingerprintMismatchError(buf);
    }
}

CheckpointState capture(const ParameterStore& store, const std::vector<Tensor>& ema, const optim::AdamState& adam,
                        StageTag stage, std::uint64_t step, std::uint64_t fingerprint, std::string config_text) {
    CheckpointState s;
    s.stage = stage;
    s.step = step;
    s.fingerprint = fingerprint;
    s.config_text = std::move(config_text);
    for (const auto& p : store.all()) s.names.push_back(p.name);
    s.params = store.values();
    s.ema = ema;
    s.adam = adam;
    s.validate();
    return s;
}

void restore(ParameterStore& store, const CheckpointState& state, const std::vector<Tensor>& tensors) {
    const auto& all = store.all();
    if (state.names.size() != all.size() || tensors.size() != all.size())
        throw CheckpointError("checkpoint has " + std::to_string(state.names.size()) + " parameters, model has " +
                              std::to_string(all.size()));
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (state.names[i] != all[i].name)
            throw CheckpointError("checkpoint parameter '" + state.names[i] + "' where model expects '" + all[i].name + "'");
    }
    store.set_values(tensors);
}

}  // namespace flowmo::ckpt
