#include "afrd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

AFRD_BEGIN_NAMESPACE

namespace {

constexpr char kMagic[4] = {'A', 'F', 'R', 'D'};
constexpr std::uint8_t kDtypeF32 = 0;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

void put_text(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::string text(const char* what) {
        const auto n = u32(what);
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void skip(std::size_t n) {
        need(n, "header");
        pos_ += n;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    bool done() const { return pos_ == bytes_.size(); }
    std::size_t pos() const { return pos_; }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

struct Entry {
    std::string name;
    Shape shape;
};

}  // namespace

std::string encode_checkpoint(const AfrdModel& model, const AdamState* optimizer) {
    std::vector<std::pair<std::string, std::span<const real>>> blobs;
    std::vector<Entry> entries;
    for (const auto& nt : model.named_tensors()) {
        entries.push_back({nt.name, nt.tensor.shape()});
        blobs.emplace_back(nt.name, nt.tensor.data());
    }
    std::string meta;
    if (optimizer != nullptr) {
        const auto params = model.trainable();
        if (optimizer->m.size() != params.size()) throw ConfigError("optimizer state does not match model");
        meta = "adam_step = " + std::to_string(optimizer->step) + "\n";
        for (const char* which : {"m", "v"}) {
            const auto& moments = which[0] == 'm' ? optimizer->m : optimizer->v;
            for (std::size_t i = 0; i < params.size(); ++i) {
                entries.push_back({std::string("adamw.") + which + "." + params[i].name, params[i].tensor.shape()});
                blobs.emplace_back(entries.back().name, std::span<const real>(moments[i]));
            }
        }
    }

    std::string out(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_text(out, model.config.to_text());
    put_text(out, meta);
    put_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        put_text(out, e.name);
        out.push_back(static_cast<char>(kDtypeF32));
        put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (const auto& [name, data] : blobs)
        for (real v : data) put_f32(out, static_cast<float>(v));
    return out;
}

LoadedCheckpoint decode_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not an AFRD checkpoint (bad magic)");
    r.skip(4);
    const auto version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    ModelConfig config;
    try {
        config = ModelConfig::parse(r.text("model config"));
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint model config: ") + e.what());
    }
    const std::string meta = r.text("metadata");
    const auto count = r.u32("entry count");

    std::vector<Entry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e;
        e.name = r.text("entry name");
        if (r.u8("dtype") != kDtypeF32) throw FormatError("entry " + e.name + ": unsupported dtype");
        const auto rank = r.u32("rank");
        if (rank > 8) throw FormatError("entry " + e.name + ": implausible rank");
        for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.u32("dims"));
        entries.push_back(std::move(e));
    }

    LoadedCheckpoint out{model_skeleton(config), std::nullopt};
    const auto tensors = out.model.named_tensors();
    const auto params = out.model.trainable();
    const bool has_opt = entries.size() == tensors.size() + 2 * params.size();
    if (entries.size() != tensors.size() && !has_opt) {
        throw FormatError("checkpoint holds " + std::to_string(entries.size()) + " entries; model layout needs " +
                          std::to_string(tensors.size()));
    }
    auto expect = [&](std::size_t i, const std::string& name, const Shape& shape) {
        if (entries[i].name != name || entries[i].shape != shape) {
            throw FormatError("checkpoint entry " + std::to_string(i) + " is " + entries[i].name + " " +
                              shape_str(entries[i].shape) + ", expected " + name + " " + shape_str(shape));
        }
    };
    for (std::size_t i = 0; i < tensors.size(); ++i) expect(i, tensors[i].name, tensors[i].tensor.shape());
    if (has_opt) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            expect(tensors.size() + i, "adamw.m." + params[i].name, params[i].tensor.shape());
            expect(tensors.size() + params.size() + i, "adamw.v." + params[i].name, params[i].tensor.shape());
        }
    }

    std::size_t total = 0;
    for (const auto& e : entries) total += shape_numel(e.shape);
    r.need(total * 4, "parameter blobs");
    for (const auto& nt : tensors) {
        Tensor t = nt.tensor;
        for (auto& v : t.mutable_data()) v = static_cast<real>(r.f32("blob"));
    }
    if (has_opt) {
        AdamState st;
        st.init([&] {
            std::vector<Tensor> ps;
            for (const auto& p : params) ps.push_back(p.tensor);
            return ps;
        }());
        for (auto* moments : {&st.m, &st.v})
            for (auto& buf : *moments)
                for (auto& v : buf) v = static_cast<real>(r.f32("blob"));
        const auto eq = meta.find('=');
        if (meta.rfind("adam_step", 0) != 0 || eq == std::string::npos) throw FormatError("checkpoint: missing adam_step");
        try {
            st.step = std::stoull(meta.substr(eq + 1));
        } catch (const std::exception&) {
            throw FormatError("checkpoint: bad adam_step");
        }
        out.optimizer = std::move(st);
    }
    if (!r.done()) throw FormatError("checkpoint has trailing bytes");
    return out;
}

void save_checkpoint(const AfrdModel& model, const AdamState* optimizer, const std::string& path) {
    const std::string bytes = encode_checkpoint(model, optimizer);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + path + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        return decode_checkpoint(ss.str());
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
}

AFRD_END_NAMESPACE
