#include "gbaf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace gbaf {

namespace {

constexpr char kMagic[4] = {'G', 'B', 'A', 'F'};

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

void put_u16(std::string& out, std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

class Reader {
public:
    Reader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

    std::uint16_t u16() { return static_cast<std::uint16_t>(raw(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(raw(4)); }
    std::uint64_t u64() { return raw(8); }
    double f64() { return std::bit_cast<double>(raw(8)); }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    std::uint64_t raw(std::size_t n) {
        need(n);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += n;
        return v;
    }
    void need(std::size_t n) {
        if (pos_ + n > bytes_.size())
            throw FormatError("checkpoint '" + path_ + "': truncated at byte " + std::to_string(pos_));
    }
    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

} // namespace

Checkpoint checkpoint_from_model(const GbafModel& model, const RunConfig& rc,
                                 std::uint64_t trained_batches) {
    Checkpoint ckpt;
    ckpt.trained_batches = trained_batches;
    ckpt.config_text = config_to_text(rc);
    std::uint64_t offset = 0;
    for (const NamedParam& np : model.named_parameters()) {
        ckpt.manifest.push_back({np.name, np.tensor.shape(), offset});
        ckpt.payload.insert(ckpt.payload.end(), np.tensor.data().begin(), np.tensor.data().end());
        offset += np.tensor.size();
    }
    const PowerNormalizer& norm = model.normalizer();
    ckpt.norm_mean.assign(norm.running_mean().begin(), norm.running_mean().end());
    ckpt.norm_var.assign(norm.running_var().begin(), norm.running_var().end());
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, ckpt.version);
    put_u64(buf, ckpt.trained_batches);
    put_u64(buf, ckpt.config_text.size());
    buf.append(ckpt.config_text);
    put_u32(buf, static_cast<std::uint32_t>(ckpt.manifest.size()));
    for (const auto& entry : ckpt.manifest) {
        put_u16(buf, static_cast<std::uint16_t>(entry.name.size()));
        buf.append(entry.name);
        put_u16(buf, static_cast<std::uint16_t>(entry.shape.size()));
        for (std::size_t d : entry.shape) put_u64(buf, d);
        put_u64(buf, entry.offset);
    }
    put_u64(buf, ckpt.payload.size());
    for (double d : ckpt.payload) put_f64(buf, d);
    put_u64(buf, ckpt.norm_mean.size());
    for (double d : ckpt.norm_mean) put_f64(buf, d);
    for (double d : ckpt.norm_var) put_f64(buf, d);
    put_u64(buf, fnv1a(buf));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot write '" + path + "'");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 4 + 4 + 8 + 8)
        throw FormatError("checkpoint '" + path + "': too short to be a GBAF file");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("checkpoint '" + path + "': bad magic, not a GBAF checkpoint");
    const std::string body = bytes.substr(0, bytes.size() - 8);
    std::uint64_t stored_sum = 0;
    for (std::size_t i = 0; i < 8; ++i)
        stored_sum |= static_cast<std::uint64_t>(
                          static_cast<unsigned char>(bytes[bytes.size() - 8 + i]))
                      << (8 * i);
    if (fnv1a(body) != stored_sum)
        throw FormatError("checkpoint '" + path + "': checksum mismatch (corrupted file)");

    Reader r(body, path);
    (void)r.str(4); // magic
    Checkpoint ckpt;
    ckpt.version = r.u32();
    if (ckpt.version != Checkpoint::kVersion)
        throw FormatError("checkpoint '" + path + "': format version " +
                          std::to_string(ckpt.version) + " unsupported, this build reads version " +
                          std::to_string(Checkpoint::kVersion));
    ckpt.trained_batches = r.u64();
    ckpt.config_text = r.str(r.u64());
    const std::uint32_t n_params = r.u32();
    ckpt.manifest.reserve(n_params);
    for (std::uint32_t i = 0; i < n_params; ++i) {
        Checkpoint::ParamEntry entry;
        entry.name = r.str(r.u16());
        const std::uint16_t ndim = r.u16();
        entry.shape.resize(ndim);
        for (std::uint16_t d = 0; d < ndim; ++d) entry.shape[d] = r.u64();
        entry.offset = r.u64();
        ckpt.manifest.push_back(std::move(entry));
    }
    const std::uint64_t payload_count = r.u64();
    ckpt.payload.resize(payload_count);
    for (std::uint64_t i = 0; i < payload_count; ++i) ckpt.payload[i] = r.f64();
    const std::uint64_t rounds = r.u64();
    ckpt.norm_mean.resize(rounds);
    for (std::uint64_t i = 0; i < rounds; ++i) ckpt.norm_mean[i] = r.f64();
    ckpt.norm_var.resize(rounds);
    for (std::uint64_t i = 0; i < rounds; ++i) ckpt.norm_var[i] = r.f64();
    return ckpt;
}

GbafModel model_from_checkpoint(const Checkpoint& ckpt, RunConfig* out_config) {
    RunConfig rc = parse_config_text(ckpt.config_text, "<checkpoint config>");
    rc.model.validate();
    GbafModel model = GbafModel::init(rc.model, 0);

    const std::vector<NamedParam> params = model.named_parameters();
    if (params.size() != ckpt.manifest.size())
        throw ConfigError("checkpoint: manifest has " + std::to_string(ckpt.manifest.size()) +
                          " parameters, config-built model has " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& entry = ckpt.manifest[i];
        const NamedParam& np = params[i];
        if (entry.name != np.name)
            throw ConfigError("checkpoint: parameter " + std::to_string(i) + " is '" + entry.name +
                              "', model expects '" + np.name + "'");
        if (entry.shape != np.tensor.shape())
            throw ConfigError("checkpoint: '" + entry.name + "' has shape " +
                              shape_to_string(entry.shape) + ", model expects " +
                              shape_to_string(np.tensor.shape()));
        if (entry.offset + np.tensor.size() > ckpt.payload.size())
            throw FormatError("checkpoint: payload too small for '" + entry.name + "'");
        Tensor t = np.tensor;
        std::copy_n(ckpt.payload.begin() + static_cast<std::ptrdiff_t>(entry.offset),
                    np.tensor.size(), t.data().begin());
    }
    if (ckpt.norm_mean.size() != rc.model.T || ckpt.norm_var.size() != rc.model.T)
        throw ConfigError("checkpoint: normalizer stats cover " +
                          std::to_string(ckpt.norm_mean.size()) + " rounds, config has T=" +
                          std::to_string(rc.model.T));
    model.normalizer().set_running_stats(ckpt.norm_mean, ckpt.norm_var);
    if (out_config) *out_config = rc;
    return model;
}

} // namespace gbaf
