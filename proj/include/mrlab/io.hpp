#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mrlab {

// Write via a temp file in the same directory plus rename, so interrupted
// runs never leave truncated artifacts behind.
void atomic_write_file(const std::filesystem::path& path, const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

std::uint64_t fnv1a(const void* data, std::size_t bytes);
std::uint64_t fnv1a_doubles(const std::vector<double>& values);

// Append-only event log carried through a run; the CLI mirrors entries to
// stderr and persists them next to the outputs.
struct RunLog {
    std::vector<std::string> lines;
    bool echo_stderr = false;
    void note(const std::string& line);
};

// Guards an output directory: one subcommand at a time.
class DirLock {
public:
    explicit DirLock(const std::filesystem::path& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::filesystem::path lock_path_;
    bool held_ = false;
};

} // namespace mrlab
