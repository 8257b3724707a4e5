// glibc allocator interposition feeding lotattn::alloc_audit. Linked into
// executables only; every entry point forwards to the __libc_* originals.

#include <errno.h>
#include <malloc.h>

#include <cstddef>

#include "lotattn/alloc_audit.hpp"

extern "C" {
void* __libc_malloc(size_t);
void __libc_free(void*);
void* __libc_calloc(size_t, size_t);
void* __libc_realloc(void*, size_t);
void* __libc_memalign(size_t, size_t);
void* __libc_valloc(size_t);
void* __libc_pvalloc(size_t);
}

namespace {

using lotattn::alloc_audit::detail::on_alloc;
using lotattn::alloc_audit::detail::on_free;

void* track(void* p) {
  if (p != nullptr) on_alloc(malloc_usable_size(p));
  return p;
}

struct Installer {
  Installer() { lotattn::alloc_audit::detail::mark_installed(); }
} installer;

}  // namespace

extern "C" {

void* malloc(size_t n) { return track(__libc_malloc(n)); }

void free(void* p) {
  if (p == nullptr) return;
  on_free(malloc_usable_size(p));
  __libc_free(p);
}

void* calloc(size_t count, size_t size) { return track(__libc_calloc(count, size)); }

void* realloc(void* p, size_t n) {
  const size_t old = p != nullptr ? malloc_usable_size(p) : 0;
  void* q = __libc_realloc(p, n);
  if (q != nullptr) {
    on_free(old);
    on_alloc(malloc_usable_size(q));
  } else if (p != nullptr && n == 0) {
    on_free(old);
  }
  return q;
}

void* memalign(size_t alignment, size_t n) { return track(__libc_memalign(alignment, n)); }

void* aligned_alloc(size_t alignment, size_t n) { return track(__libc_memalign(alignment, n)); }

int posix_memalign(void** out, size_t alignment, size_t n) {
  if (alignment % sizeof(void*) != 0 || (alignment & (alignment - 1)) != 0) return EINVAL;
  void* p = __libc_memalign(alignment, n);
  if (p == nullptr) return ENOMEM;
  *out = track(p);
  return 0;
}

void* valloc(size_t n) { return track(__libc_valloc(n)); }

void* pvalloc(size_t n) { return track(__libc_pvalloc(n)); }

}  // extern "C"
