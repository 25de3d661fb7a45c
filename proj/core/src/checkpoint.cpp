#include "cascade/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cascade/error.hpp"

namespace cascade {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

template <typename T>
const Tensor<T>& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n != name) continue;
        if (const auto* p = std::get_if<Tensor<T>>(&t)) return *p;
        throw CheckpointError("checkpoint tensor '" + name + "' has an unexpected dtype");
    }
    throw CheckpointError("checkpoint has no tensor '" + name + "'");
}

template const Tensor<float>& Checkpoint::get(const std::string&) const;
template const Tensor<double>& Checkpoint::get(const std::string&) const;

namespace {

class Writer {
public:
    template <typename U>
    void put(U v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out.insert(out.end(), p, p + sizeof(U));
    }
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        out.insert(out.end(), p, p + n);
    }
    std::vector<std::uint8_t> out;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
    template <typename U>
    U get(const char* what) {
        need(sizeof(U), what);
        U v;
        std::memcpy(&v, b_.data() + off_, sizeof(U));
        off_ += sizeof(U);
        return v;
    }
    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = b_.subspan(off_, n);
        off_ += n;
        return s;
    }
    std::size_t offset() const { return off_; }
    std::size_t remaining() const { return b_.size() - off_; }

private:
    void need(std::size_t n, const char* what) {
        if (n > b_.size() - off_)
            throw CheckpointError(std::string("checkpoint truncated reading ") + what + " at byte offset " +
                                  std::to_string(off_));
    }
    std::span<const std::uint8_t> b_;
    std::size_t off_ = 0;
};

template <typename T>
void write_tensor(Writer& w, const Tensor<T>& t) {
    w.put(static_cast<std::uint8_t>(dtype_of<T>()));
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    w.bytes(t.values().data(), t.numel() * sizeof(T));
}

template <typename T>
Tensor<T> read_values(Reader& r, Shape shape, std::size_t n) {
    auto raw = r.take(n * sizeof(T), "tensor values");
    std::vector<T> v(n);
    std::memcpy(v.data(), raw.data(), raw.size());
    return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.put(kCheckpointVersion);
    w.put(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        w.put(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        std::visit([&](const auto& x) { write_tensor(w, x); }, t);
    }
    w.put(static_cast<std::uint64_t>(ckpt.metadata.size()));
    w.bytes(ckpt.metadata.data(), ckpt.metadata.size());
    return std::move(w.out);
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    auto magic = r.take(sizeof kCheckpointMagic, "magic");
    if (std::memcmp(magic.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
        throw CheckpointError("not a checkpoint file (bad magic)");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    const auto count = r.get<std::uint32_t>("entry count");
    Checkpoint ckpt;
    for (std::uint32_t e = 0; e < count; ++e) {
        const std::size_t entry_off = r.offset();
        const auto name_len = r.get<std::uint32_t>("name length");
        auto name_bytes = r.take(name_len, "name");
        std::string name(name_bytes.begin(), name_bytes.end());
        const auto dtype = r.get<std::uint8_t>("dtype");
        const auto rank = r.get<std::uint32_t>("rank");
        if (rank == 0 || rank > 8)
            throw CheckpointError("entry '" + name + "' at byte offset " + std::to_string(entry_off) +
                                  " has invalid rank " + std::to_string(rank));
        Shape shape;
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const auto ext = r.get<std::uint64_t>("extent");
            if (ext == 0 || ext > r.remaining() || n > r.remaining() / ext)
                throw CheckpointError("entry '" + name + "' at byte offset " + std::to_string(entry_off) +
                                      " has an implausible extent");
            shape.push_back(static_cast<std::size_t>(ext));
            n *= static_cast<std::size_t>(ext);
        }
        if (dtype == static_cast<std::uint8_t>(DType::f32))
            ckpt.put(std::move(name), read_values<float>(r, std::move(shape), n));
        else if (dtype == static_cast<std::uint8_t>(DType::f64))
            ckpt.put(std::move(name), read_values<double>(r, std::move(shape), n));
        else
            throw CheckpointError("entry '" + name + "' has unknown dtype tag " + std::to_string(dtype));
    }
    const auto meta_len = r.get<std::uint64_t>("metadata length");
    if (meta_len > r.remaining())
        throw CheckpointError("checkpoint truncated reading metadata at byte offset " + std::to_string(r.offset()));
    auto meta = r.take(static_cast<std::size_t>(meta_len), "metadata");
    ckpt.metadata.assign(meta.begin(), meta.end());
    if (r.remaining() != 0)
        throw CheckpointError(std::to_string(r.remaining()) + " trailing bytes after checkpoint metadata");
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ckpt);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write '" + tmp.string() + "'");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw DataError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), {});
    try {
        return parse_checkpoint(bytes);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

}  // namespace cascade
