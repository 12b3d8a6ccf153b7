#include "fedgin/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace fedgin::log {

namespace {
std::atomic<Level> g_level{Level::Info};
std::mutex g_mutex;

const char* tag(Level l) {
  switch (l) {
    case Level::Debug: return "debug";
    case Level::Info: return "info";
    case Level::Warn: return "warn";
    case Level::Error: return "error";
    default: return "";
  }
}
}  // namespace

void set_level(Level l) { g_level.store(l); }
Level level() { return g_level.load(); }

void write(Level l, const std::string& message) {
  std::lock_guard lock(g_mutex);
  std::cerr << "[fedgin " << tag(l) << "] " << message << '\n';
}

}  // namespace fedgin::log
