#include "byteio.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <iterator>

#include "simclip/errors.hpp"

namespace simclip::io {

namespace {

std::string errno_text() { return std::strerror(errno); }

}  // namespace

void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw FormatError("cannot create " + tmp.string() + ": " + errno_text());

    std::size_t written = 0;
    while (written < bytes.size()) {
        const ssize_t n = ::write(fd, bytes.data() + written, bytes.size() - written);
        if (n < 0) {
            if (errno == EINTR) continue;
            const std::string reason = errno_text();
            ::close(fd);
            std::filesystem::remove(tmp);
            throw FormatError("write to " + tmp.string() + " failed: " + reason);
        }
        written += static_cast<std::size_t>(n);
    }
    const int synced = ::fsync(fd);
    const int closed = ::close(fd);
    if (synced != 0 || closed != 0) {
        std::filesystem::remove(tmp);
        throw FormatError("cannot flush " + tmp.string() + ": " + errno_text());
    }
    std::filesystem::rename(tmp, path);
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace simclip::io
