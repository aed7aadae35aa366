#include "tbd/blob.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tbd::blob {

namespace {

[[noreturn]] void io_fail(const std::string& what, const std::string& path) {
  throw Error(ErrorCategory::io, what + ": " + path + ": " + std::strerror(errno));
}

void check_name(const std::string& name) {
  if (name.empty()) throw Error(ErrorCategory::format, "tensor name is empty");
  for (char c : name) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      throw Error(ErrorCategory::format, "tensor name contains whitespace: '" + name + "'");
    }
  }
}

}  // namespace

Writer::Writer(const std::string& base_path) : base_(base_path) {
  fd_ = ::open((base_ + ".bin").c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd_ < 0) io_fail("cannot create", base_ + ".bin");
}

Writer::~Writer() {
  if (!finished_) {
    try {
      finish();
    } catch (...) {
      // destructor must not throw; explicit finish() reports errors
    }
  }
}

void Writer::add(const std::string& name, const Tensor& t) {
  if (finished_) throw Error(ErrorCategory::state, "blob writer already finished");
  check_name(name);
  for (const auto& e : entries_) {
    if (e.name == name) throw Error(ErrorCategory::format, "duplicate tensor name: '" + name + "'");
  }
  const double* p = t.data();
  size_t bytes = static_cast<size_t>(t.numel()) * sizeof(double);
  size_t done = 0;
  while (done < bytes) {
    ssize_t n = ::write(fd_, reinterpret_cast<const char*>(p) + done, bytes - done);
    if (n < 0) io_fail("write failed", base_ + ".bin");
    done += static_cast<size_t>(n);
  }
  entries_.push_back({name, t.shape(), offset_});
  offset_ += bytes;
}

void Writer::finish() {
  if (finished_) return;
  finished_ = true;
  if (::close(fd_) != 0) io_fail("close failed", base_ + ".bin");
  fd_ = -1;
  std::ofstream m(base_ + ".manifest", std::ios::trunc);
  if (!m) io_fail("cannot create", base_ + ".manifest");
  for (const auto& e : entries_) {
    m << e.name << ' ' << e.shape.size();
    for (int d : e.shape) m << ' ' << d;
    m << ' ' << e.offset << '\n';
  }
  m.flush();
  if (!m) io_fail("write failed", base_ + ".manifest");
}

Reader::Reader(const std::string& base_path) : base_(base_path) {
  std::ifstream m(base_ + ".manifest");
  if (!m) io_fail("cannot open", base_ + ".manifest");
  std::string line;
  int lineno = 0;
  while (std::getline(m, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string name;
    size_t ndim = 0;
    if (!(is >> name >> ndim) || ndim > 8) {
      throw Error(ErrorCategory::format,
                  base_ + ".manifest:" + std::to_string(lineno) + ": malformed entry");
    }
    Entry e;
    e.numel = 1;
    for (size_t i = 0; i < ndim; ++i) {
      int d = 0;
      if (!(is >> d) || d <= 0) {
        throw Error(ErrorCategory::format,
                    base_ + ".manifest:" + std::to_string(lineno) + ": bad dimension");
      }
      e.shape.push_back(d);
      e.numel *= d;
    }
    if (!(is >> e.offset)) {
      throw Error(ErrorCategory::format,
                  base_ + ".manifest:" + std::to_string(lineno) + ": missing offset");
    }
    if (!entries_.emplace(name, std::move(e)).second) {
      throw Error(ErrorCategory::format,
                  base_ + ".manifest:" + std::to_string(lineno) + ": duplicate name '" + name + "'");
    }
    order_.push_back(name);
  }
  fd_ = ::open((base_ + ".bin").c_str(), O_RDONLY);
  if (fd_ < 0) io_fail("cannot open", base_ + ".bin");
  off_t sz = ::lseek(fd_, 0, SEEK_END);
  if (sz < 0) io_fail("cannot size", base_ + ".bin");
  file_size_ = static_cast<uint64_t>(sz);
  for (const auto& [name, e] : entries_) {
    uint64_t end = e.offset + static_cast<uint64_t>(e.numel) * sizeof(double);
    if (end > file_size_) {
      throw Error(ErrorCategory::format, "blob truncated: '" + name + "' needs bytes up to " +
                                             std::to_string(end) + " but " + base_ + ".bin has " +
                                             std::to_string(file_size_));
    }
  }
}

Reader::~Reader() {
  if (fd_ >= 0) ::close(fd_);
}

bool Reader::has(const std::string& name) const { return entries_.count(name) != 0; }

const Reader::Entry& Reader::find(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw Error(ErrorCategory::format, "no tensor named '" + name + "' in " + base_);
  }
  return it->second;
}

const std::vector<int>& Reader::shape(const std::string& name) const { return find(name).shape; }

Tensor Reader::read(const std::string& name) const {
  const Entry& e = find(name);
  std::vector<double> data(static_cast<size_t>(e.numel));
  size_t bytes = data.size() * sizeof(double);
  size_t done = 0;
  while (done < bytes) {
    ssize_t n = ::pread(fd_, reinterpret_cast<char*>(data.data()) + done, bytes - done,
                        static_cast<off_t>(e.offset + done));
    if (n < 0) io_fail("read failed", base_ + ".bin");
    if (n == 0) {
      throw Error(ErrorCategory::format, "blob truncated while reading '" + name + "'");
    }
    done += static_cast<size_t>(n);
  }
  return Tensor::from_data(e.shape, std::move(data));
}

}  // namespace tbd::blob
