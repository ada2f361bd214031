#include <cstring>
#include <map>

#include "refine3d/errors.hpp"
#include "refine3d/fsio.hpp"
#include "refine3d/trainer.hpp"

namespace refine3d {

namespace {

constexpr char kMagic[4] = {'R', '3', 'D', 'N'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    char b[4];
    b[0] = static_cast<char>(v & 0xff);
    b[1] = static_cast<char>((v >> 8) & 0xff);
    b[2] = static_cast<char>((v >> 16) & 0xff);
    b[3] = static_cast<char>((v >> 24) & 0xff);
    out.append(b, 4);
}

void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

float u32_as_f32(uint32_t bits) {
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

void put_string(std::string& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out += s;
}

void put_tensor(std::string& out, const std::string& name, uint8_t tag,
                const std::vector<int64_t>& dims, const float* data, size_t count) {
    put_string(out, name);
    out.push_back(static_cast<char>(tag));
    out.push_back(static_cast<char>(dims.size()));
    for (int64_t d : dims) put_u32(out, static_cast<uint32_t>(d));
    for (size_t i = 0; i < count; ++i) put_f32(out, data[i]);
}

// Run-state scalars ride along as a tag-3 tensor; integers are bit-cast
// into the f32 stream so the round trip is exact.
constexpr int64_t kScalarCount = 10;

struct Reader {
    const std::string& bytes;
    size_t pos = 0;

    explicit Reader(const std::string& b) : bytes(b) {}

    void need(size_t n) const {
        if (pos + n > bytes.size())
            throw FormatError("checkpoint: truncated file at byte " + std::to_string(pos));
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(bytes[pos + i]);
        pos += 4;
        return v;
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(bytes[pos++]);
    }
    std::string str() {
        const uint32_t len = u32();
        if (len > (1u << 20))
            throw FormatError("checkpoint: implausible string length at byte " +
                              std::to_string(pos - 4));
        need(len);
        std::string s = bytes.substr(pos, len);
        pos += len;
        return s;
    }
};

struct RawTensor {
    uint8_t tag = 0;
    std::vector<int64_t> dims;
    std::vector<float> values;
};

std::map<std::string, RawTensor> parse_tensors(Reader& r, std::string* preset) {
    char magic[4];
    r.need(4);
    std::memcpy(magic, r.bytes.data() + r.pos, 4);
    r.pos += 4;
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("checkpoint: bad magic bytes");
    const uint32_t version = r.u32();
    if (version != kVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    *preset = r.str();
    const uint32_t count = r.u32();
    std::map<std::string, RawTensor> tensors;
    for (uint32_t t = 0; t < count; ++t) {
        const std::string name = r.str();
        RawTensor raw;
        raw.tag = r.u8();
        const uint8_t rank = r.u8();
        int64_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            raw.dims.push_back(static_cast<int64_t>(r.u32()));
            numel *= raw.dims.back();
        }
        if (numel < 0 || numel > (int64_t{1} << 31))
            throw FormatError("checkpoint: implausible tensor size for " + name);
        raw.values.resize(static_cast<size_t>(numel));
        for (int64_t i = 0; i < numel; ++i)
            raw.values[static_cast<size_t>(i)] = u32_as_f32(r.u32());
        if (!tensors.emplace(name, std::move(raw)).second)
            throw FormatError("checkpoint: duplicate tensor " + name);
    }
    return tensors;
}

std::string adam_prefix(Partition p) {
    switch (p) {
        case Partition::theta_base: return "adam.base.";
        case Partition::phi_att: return "adam.att.";
        case Partition::phi_ref: return "adam.ref.";
        default: throw StateError("adam prefix for non-trainable partition");
    }
}

void fill_adam(AdamState& adam, const std::map<std::string, RawTensor>& tensors, int64_t tau) {
    const std::string prefix = adam_prefix(adam.partition());
    for (auto& mom : adam.moments()) {
        for (const char* kind : {"m.", "v."}) {
            const std::string key = prefix + kind + mom.param_name;
            auto it = tensors.find(key);
            if (it == tensors.end())
                throw ConfigError("checkpoint: missing optimizer tensor " + key);
            auto& dst = kind[0] == 'm' ? mom.m : mom.v;
            if (it->second.values.size() != dst.size())
                throw ConfigError("checkpoint: optimizer tensor " + key + " has wrong size");
            dst = it->second.values;
        }
    }
    adam.set_tau(tau);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const AdamState& base, const AdamState& att, const AdamState& ref,
                     const TrainState& state, uint64_t seed) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_string(out, model.config().preset_name);

    uint32_t count = static_cast<uint32_t>(model.params().entries().size());
    for (const AdamState* a : {&base, &att, &ref})
        count += static_cast<uint32_t>(a->moments().size()) * 2;
    count += 1;  // state scalars
    put_u32(out, count);

    for (const auto& e : model.params().entries()) {
        put_tensor(out, e.name, static_cast<uint8_t>(e.partition), e.tensor.shape(),
                   e.tensor.data().data(), e.tensor.data().size());
    }
    for (const AdamState* a : {&base, &att, &ref}) {
        const std::string prefix = adam_prefix(a->partition());
        for (const auto& mom : a->moments()) {
            const int64_t n = static_cast<int64_t>(mom.m.size());
            put_tensor(out, prefix + "m." + mom.param_name,
                       static_cast<uint8_t>(Partition::optimizer), {n}, mom.m.data(),
                       mom.m.size());
            put_tensor(out, prefix + "v." + mom.param_name,
                       static_cast<uint8_t>(Partition::optimizer), {n}, mom.v.data(),
                       mom.v.size());
        }
    }

    put_string(out, "state.scalars");
    out.push_back(static_cast<char>(Partition::optimizer));
    out.push_back(1);
    put_u32(out, static_cast<uint32_t>(kScalarCount));
    put_u32(out, static_cast<uint32_t>(state.phases_completed));
    put_u32(out, static_cast<uint32_t>(state.global_step & 0xffffffffULL));
    put_u32(out, static_cast<uint32_t>(state.global_step >> 32));
    put_u32(out, static_cast<uint32_t>(state.patience_counter));
    put_f32(out, static_cast<float>(state.best_val));
    put_u32(out, static_cast<uint32_t>(seed & 0xffffffffULL));
    put_u32(out, static_cast<uint32_t>(seed >> 32));
    put_u32(out, static_cast<uint32_t>(base.tau()));
    put_u32(out, static_cast<uint32_t>(att.tau()));
    put_u32(out, static_cast<uint32_t>(ref.tau()));

    write_file_atomic(path, out);
}

std::string checkpoint_preset(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    Reader r(bytes);
    r.need(4);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic bytes");
    r.pos = 4;
    const uint32_t version = r.u32();
    if (version != kVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    return r.str();
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, Model& model, AdamState* base,
                               AdamState* att, AdamState* ref) {
    const std::string bytes = read_file(path);
    Reader r(bytes);
    CheckpointInfo info;
    // parse everything first so a malformed file mutates nothing
    std::map<std::string, RawTensor> tensors = parse_tensors(r, &info.preset);

    if (info.preset != model.config().preset_name)
        throw ConfigError("checkpoint: preset '" + info.preset + "' does not match model '" +
                          model.config().preset_name + "'");

    for (const auto& e : model.params().entries()) {
        auto it = tensors.find(e.name);
        if (it == tensors.end()) throw ConfigError("checkpoint: missing tensor " + e.name);
        if (it->second.dims != e.tensor.shape())
            throw ConfigError("checkpoint: tensor " + e.name + " has shape mismatch vs config");
        if (it->second.tag != static_cast<uint8_t>(e.partition))
            throw ConfigError("checkpoint: tensor " + e.name + " has wrong partition tag");
    }
    auto scalars_it = tensors.find("state.scalars");
    if (scalars_it == tensors.end() ||
        scalars_it->second.values.size() != static_cast<size_t>(kScalarCount))
        throw FormatError("checkpoint: missing or malformed state scalars");
    const auto& sc = scalars_it->second.values;
    auto as_u32 = [&](int i) {
        uint32_t bits;
        std::memcpy(&bits, &sc[static_cast<size_t>(i)], 4);
        return bits;
    };
    info.state.phases_completed = static_cast<int>(as_u32(0));
    info.state.global_step =
        static_cast<int64_t>(as_u32(1)) | (static_cast<int64_t>(as_u32(2)) << 32);
    info.state.patience_counter = static_cast<int64_t>(as_u32(3));
    info.state.best_val = static_cast<double>(sc[4]);
    info.seed = static_cast<uint64_t>(as_u32(5)) | (static_cast<uint64_t>(as_u32(6)) << 32);

    // commit
    for (auto& e : model.params().entries()) e.tensor.data() = tensors.at(e.name).values;
    if (base) fill_adam(*base, tensors, static_cast<int64_t>(as_u32(7)));
    if (att) fill_adam(*att, tensors, static_cast<int64_t>(as_u32(8)));
    if (ref) fill_adam(*ref, tensors, static_cast<int64_t>(as_u32(9)));
    return info;
}

}  // namespace refine3d
