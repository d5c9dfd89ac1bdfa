#include "mrlab/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>

#include <unistd.h>

#include "mrlab/error.hpp"

namespace fs = std::filesystem;

namespace mrlab {

void atomic_write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

std::uint64_t fnv1a(const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t fnv1a_doubles(const std::vector<double>& values) {
    return fnv1a(values.data(), values.size() * sizeof(double));
}

void RunLog::note(const std::string& line) {
    lines.push_back(line);
    if (echo_stderr) std::cerr << "[mrlab] " << line << "\n";
}

DirLock::DirLock(const fs::path& dir) {
    fs::create_directories(dir);
    lock_path_ = dir / ".mrlab.lock";
    // O_EXCL-style create; fails if another run holds the directory.
    std::FILE* f = std::fopen(lock_path_.c_str(), "wx");
    if (!f) {
        throw IoError("output directory is locked by another run: " + lock_path_.string());
    }
    std::fputs("locked\n", f);
    std::fclose(f);
    held_ = true;
}

DirLock::~DirLock() {
    if (held_) {
        std::error_code ec;
        fs::remove(lock_path_, ec);
    }
}

} // namespace mrlab
