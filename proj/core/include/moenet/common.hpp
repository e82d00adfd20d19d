#pragma once

#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

namespace moenet {

// Error taxonomy. std::invalid_argument is used directly for bad call
// arguments; the types below separate the failure classes the CLI maps
// to exit codes (config/usage -> 2, numerical -> 1).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelBuildError : std::runtime_error {
  explicit ModelBuildError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void format_into(std::ostringstream& os, A&& a, Rest&&... rest) {
  os << std::forward<A>(a);
  format_into(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Args>
std::string strcat_msg(Args&&... args) {
  std::ostringstream os;
  detail::format_into(os, std::forward<Args>(args)...);
  return os.str();
}

namespace detail {

// Exact-size free list for tensor payloads. Graph buffers are allocated and
// released once per training step; recycling them keeps the pages warm
// instead of paying mmap zero-fill faults on every step.
template <typename T>
class BufferPool {
 public:
  static BufferPool& instance() {
    static thread_local BufferPool pool;
    return pool;
  }

  T* acquire(size_t n) {
    auto it = free_.find(n);
    if (it != free_.end() && !it->second.empty()) {
      T* p = it->second.back();
      it->second.pop_back();
      cached_bytes_ -= n * sizeof(T);
      return p;
    }
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }

  void release(T* p, size_t n) {
    if (cached_bytes_ + n * sizeof(T) > kMaxCachedBytes) {
      ::operator delete(p);
      return;
    }
    cached_bytes_ += n * sizeof(T);
    free_[n].push_back(p);
  }

  ~BufferPool() {
    for (auto& [n, list] : free_)
      for (T* p : list) ::operator delete(p);
  }

 private:
  static constexpr size_t kMaxCachedBytes = size_t(512) << 20;
  std::unordered_map<size_t, std::vector<T*>> free_;
  size_t cached_bytes_ = 0;
};

}  // namespace detail

// Pooled, default-initializing allocator for tensor payloads. Op outputs are
// fully overwritten, so zero-fill on resize is skipped; buffers that need
// zeros fill explicitly.
template <typename T>
class PoolAllocator {
 public:
  using value_type = T;
  PoolAllocator() = default;
  template <typename U>
  PoolAllocator(const PoolAllocator<U>&) {}

  T* allocate(size_t n) { return detail::BufferPool<T>::instance().acquire(n); }
  void deallocate(T* p, size_t n) {
    detail::BufferPool<T>::instance().release(p, n);
  }

  template <typename U>
  void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(ptr)) U;
  }
  template <typename U, typename... Args>
  void construct(U* ptr, Args&&... args) {
    ::new (static_cast<void*>(ptr)) U(std::forward<Args>(args)...);
  }

  bool operator==(const PoolAllocator&) const { return true; }
  bool operator!=(const PoolAllocator&) const { return false; }
};

template <typename T>
using ValueBuffer = std::vector<T, PoolAllocator<T>>;

}  // namespace moenet
