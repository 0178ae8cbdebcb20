#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "qexplain/trace.hpp"

namespace qx::test {

inline Trace constant_trace(const std::string& id, double bw, double duration, TraceKind kind = TraceKind::abr) {
  Trace t;
  t.id = id;
  t.kind = kind;
  for (double s = 0.0; s < duration; s += 1.0) t.samples.push_back({s, bw});
  if (kind == TraceKind::cc) t.link = CcLink{100.0, 50.0, 0.0};
  return t;
}

inline Trace step_trace(const std::string& id, const std::vector<double>& bws, TraceKind kind = TraceKind::abr) {
  Trace t;
  t.id = id;
  t.kind = kind;
  for (std::size_t i = 0; i < bws.size(); ++i) t.samples.push_back({static_cast<double>(i), bws[i]});
  if (kind == TraceKind::cc) t.link = CcLink{100.0, 50.0, 0.0};
  return t;
}

inline std::shared_ptr<const Trace> share(Trace t) { return std::make_shared<const Trace>(std::move(t)); }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = std::string("qx_") + (info ? std::string(info->test_suite_name()) + "_" + info->name() : "tmp");
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::filesystem::path operator/(const std::string& f) const { return path_ / f; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace qx::test
