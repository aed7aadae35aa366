#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tbd/tensor.hpp"

namespace tbd::blob {

/// Named-tensor storage: `<base>.bin` holds the raw values of every tensor
/// back to back as little-endian float64; `<base>.manifest` is a text index
/// with one line per tensor:
///
///   <name> <ndim> <dim0> ... <dimN-1> <byte-offset>
///
/// Names must be non-empty and free of whitespace. Entries appear in the
/// order they were added, so identical add sequences produce identical files.
class Writer {
 public:
  explicit Writer(const std::string& base_path);
  ~Writer();

  Writer(const Writer&) = delete;
  Writer& operator=(const Writer&) = delete;

  void add(const std::string& name, const Tensor& t);
  /// Flushes both files and closes them. Called by the destructor if needed,
  /// but calling it explicitly surfaces I/O errors.
  void finish();

 private:
  struct Entry {
    std::string name;
    std::vector<int> shape;
    uint64_t offset;
  };
  std::string base_;
  std::vector<Entry> entries_;
  uint64_t offset_ = 0;
  int fd_ = -1;
  bool finished_ = false;
};

class Reader {
 public:
  explicit Reader(const std::string& base_path);
  ~Reader();

  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  bool has(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  const std::vector<int>& shape(const std::string& name) const;
  /// Reads one tensor; safe to call concurrently (pread, no shared cursor).
  Tensor read(const std::string& name) const;

 private:
  struct Entry {
    std::vector<int> shape;
    uint64_t offset;
    int64_t numel;
  };
  const Entry& find(const std::string& name) const;
  std::string base_;
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
  int fd_ = -1;
  uint64_t file_size_ = 0;
};

}  // namespace tbd::blob
