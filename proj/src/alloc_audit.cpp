#include "lotattn/alloc_audit.hpp"

#include <atomic>

namespace lotattn::alloc_audit {
namespace {

constinit std::atomic<bool> g_installed{false};
constinit std::atomic<std::int64_t> g_current{0};
constinit std::atomic<std::int64_t> g_peak{0};

}  // namespace

bool available() { return g_installed.load(std::memory_order_relaxed); }
std::int64_t current_bytes() { return g_current.load(std::memory_order_relaxed); }
std::int64_t peak_bytes() { return g_peak.load(std::memory_order_relaxed); }
void reset_peak() { g_peak.store(g_current.load(std::memory_order_relaxed)); }

Scope::Scope() : start_(current_bytes()) { reset_peak(); }

std::int64_t Scope::peak_delta() const { return peak_bytes() - start_; }

namespace detail {

void mark_installed() { g_installed.store(true); }

void on_alloc(std::size_t bytes) {
  const std::int64_t now =
      g_current.fetch_add(static_cast<std::int64_t>(bytes), std::memory_order_relaxed) +
      static_cast<std::int64_t>(bytes);
  std::int64_t peak = g_peak.load(std::memory_order_relaxed);
  while (now > peak && !g_peak.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
  }
}

void on_free(std::size_t bytes) {
  g_current.fetch_sub(static_cast<std::int64_t>(bytes), std::memory_order_relaxed);
}

}  // namespace detail
}  // namespace lotattn::alloc_audit
