#include "mrlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>

#include "mrlab/error.hpp"
#include "mrlab/io.hpp"

namespace mrlab {

namespace {

constexpr char kMagic[6] = {'M', 'R', 'L', 'A', 'B', '1'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian; add byte swapping for this platform");

void put_u32(std::string& out, std::uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_u64(std::string& out, std::uint64_t v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

struct Reader {
    const std::string& bytes;
    std::size_t pos = 0;
    void need(std::size_t n, const char* what) {
        if (pos + n > bytes.size()) throw IoError(std::string("checkpoint truncated at ") + what);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v;
        std::memcpy(&v, bytes.data() + pos, 8);
        pos += 8;
        return v;
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::string out;
    out.reserve(32 + ckpt.section.size() + ckpt.config_json.size() + ckpt.params.size() * 8);
    out.append(kMagic, sizeof(kMagic));
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(ckpt.section.size()));
    out.append(ckpt.section);
    put_u32(out, static_cast<std::uint32_t>(ckpt.config_json.size()));
    out.append(ckpt.config_json);
    put_u64(out, static_cast<std::uint64_t>(ckpt.params.size()));
    out.append(reinterpret_cast<const char*>(ckpt.params.data()), ckpt.params.size() * 8);
    atomic_write_file(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_section) {
    const std::string bytes = read_file(path);
    Reader r{bytes};
    const std::string magic = r.str(sizeof(kMagic), "magic");
    if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
        throw IoError(path.string() + ": not an MRLAB1 checkpoint");
    }
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw IoError(path.string() + ": unsupported checkpoint version " +
                      std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.section = r.str(r.u32("section length"), "section");
    ckpt.config_json = r.str(r.u32("config length"), "config");
    const std::uint64_t count = r.u64("parameter count");
    r.need(count * 8, "parameters");
    ckpt.params.resize(count);
    std::memcpy(ckpt.params.data(), bytes.data() + r.pos, count * 8);
    if (!expected_section.empty() && ckpt.section != expected_section) {
        throw IoError(path.string() + ": expected section '" + expected_section + "', found '" +
                      ckpt.section + "'");
    }
    return ckpt;
}

} // namespace mrlab
