#pragma once

// Heap accounting for the "no n x n intermediate" contract. The counters
// only move when an executable links the `lotattn_alloc_hook` object
// library, which interposes the glibc allocator entry points.

#include <cstddef>
#include <cstdint>

namespace lotattn::alloc_audit {

bool available();
std::int64_t current_bytes();
std::int64_t peak_bytes();
void reset_peak();

// Tracks the peak heap growth above the level at construction.
class Scope {
 public:
  Scope();
  std::int64_t peak_delta() const;

 private:
  std::int64_t start_;
};

namespace detail {
void mark_installed();
void on_alloc(std::size_t bytes);
void on_free(std::size_t bytes);
}  // namespace detail

}  // namespace lotattn::alloc_audit
